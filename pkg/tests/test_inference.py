import statistics
from dataclasses import replace

import pytest
import torch

from latseg.alignment import AlignmentConfig
from latseg.checkpoint import load_checkpoint, save_checkpoint, state_digest
from latseg.data import synth_dataset
from latseg.errors import ConfigError, ContractError, DataError, ShapeError
from latseg.inference import (
    bundle_from_model,
    check_bundle_sections,
    evaluate,
    infer,
    load_bundle,
    save_bundle,
    stability_eval,
)
from latseg.schedule import BetaScheduleConfig
from latseg.training import TrainConfig, train


def small_config(**overrides) -> TrainConfig:
    base = dict(
        codec="pixel_space",
        resolution=16,
        batch_size=2,
        lr=2e-3,
        warmup_steps=5,
        max_steps=40,
        seed=0,
        base_width=8,
        channel_mults=(1, 2),
        time_dim=16,
        schedule=BetaScheduleConfig(num_steps=50),
        alignment=AlignmentConfig(
            enabled=False, patch_size=2, embed_dim=16, hidden_dim=32
        ),
    )
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def samples16():
    return synth_dataset(10, seed=99, resolution=16)


@pytest.fixture(scope="module")
def trained16(samples16):
    return train(small_config(), samples16)


@pytest.fixture(scope="module")
def bundle16(trained16):
    return bundle_from_model(trained16.model)


class TestInfer:
    def test_mask_contract(self, bundle16, samples16):
        mask = infer(samples16[0].image, bundle16)
        assert mask.shape == (16, 16)
        assert set(mask.unique().tolist()) <= {0.0, 1.0}

    def test_same_seed_same_mask(self, bundle16, samples16):
        a = infer(samples16[0].image, bundle16, seed=7)
        b = infer(samples16[0].image, bundle16, seed=7)
        assert torch.equal(a, b)

    def test_one_denoiser_call_per_image(self, trained16, samples16):
        bundle = bundle_from_model(trained16.model)
        assert bundle.unet_calls == 0
        infer(samples16[0].image, bundle)
        assert bundle.unet_calls == 1
        evaluate(bundle, samples16[:6])
        assert bundle.unet_calls == 7

    def test_batched_input_rejected(self, bundle16, samples16):
        with pytest.raises(ShapeError):
            infer(samples16[0].image.unsqueeze(0), bundle16)

    def test_wrong_resolution_rejected(self, bundle16):
        with pytest.raises(ConfigError, match="16x16"):
            infer(torch.zeros(3, 32, 32), bundle16)

    def test_inference_mode_requires_no_grad(self, bundle16):
        assert all(not p.requires_grad for p in bundle16.unet.parameters())
        assert not bundle16.unet.training


class TestEvaluate:
    def test_returns_dataset_mean(self, bundle16, samples16):
        metrics = evaluate(bundle16, samples16[:4])
        assert 0.0 <= metrics.dice <= 1.0
        assert 0.0 <= metrics.iou <= metrics.dice

    def test_empty_dataset_rejected(self, bundle16):
        with pytest.raises(DataError):
            evaluate(bundle16, [])

    def test_deterministic(self, bundle16, samples16):
        a = evaluate(bundle16, samples16[:4], seed=3)
        b = evaluate(bundle16, samples16[:4], seed=3)
        assert a == b


class TestStability:
    def test_requires_at_least_two_seeds(self, bundle16, samples16):
        with pytest.raises(ConfigError, match="2 seeds"):
            stability_eval(bundle16, samples16[:2], [0])

    def test_mean_and_sample_std(self, bundle16, samples16):
        seeds = (0, 1, 2)
        mean, std, per_seed = stability_eval(bundle16, samples16[:4], seeds)
        assert len(per_seed) == 3
        assert mean == pytest.approx(statistics.fmean(per_seed))
        assert std == pytest.approx(statistics.stdev(per_seed))

    def test_deterministic(self, bundle16, samples16):
        a = stability_eval(bundle16, samples16[:3], (0, 1))
        b = stability_eval(bundle16, samples16[:3], (0, 1))
        assert a == b


class TestBundleSerialization:
    def test_roundtrip_is_bitwise(self, bundle16, samples16, tmp_path):
        path = tmp_path / "model.lscp"
        save_bundle(bundle16, path)
        loaded = load_bundle(path)
        assert state_digest(loaded.unet) == state_digest(bundle16.unet)
        assert loaded.parameterization is bundle16.parameterization
        assert loaded.resolution == bundle16.resolution
        a = infer(samples16[0].image, bundle16, seed=5)
        b = infer(samples16[0].image, loaded, seed=5)
        assert torch.equal(a, b)

    def test_saved_sections_carry_no_training_state(self, bundle16, tmp_path):
        path = tmp_path / "model.lscp"
        save_bundle(bundle16, path)
        assert check_bundle_sections(path) == sorted(
            ["unet", "image_encoder", "codec.encoder", "codec.decoder"]
        )

    def test_training_only_sections_rejected(self, bundle16, tmp_path):
        clean = tmp_path / "clean.lscp"
        save_bundle(bundle16, clean)
        ckpt = load_checkpoint(clean)
        dirty = tmp_path / "dirty.lscp"
        sections = dict(ckpt.sections)
        sections["projection_head"] = {"weight": torch.zeros(2, 2).numpy()}
        save_checkpoint(dirty, sections, ckpt.metadata)
        with pytest.raises(ContractError, match="projection_head"):
            check_bundle_sections(dirty)
        with pytest.raises(ContractError):
            load_bundle(dirty)

    @pytest.mark.parametrize("marker", ["teacher_blocks", "alignment_state"])
    def test_other_markers_rejected(self, bundle16, tmp_path, marker):
        clean = tmp_path / "clean.lscp"
        save_bundle(bundle16, clean)
        ckpt = load_checkpoint(clean)
        dirty = tmp_path / "dirty.lscp"
        sections = dict(ckpt.sections)
        sections[marker] = {"w": torch.zeros(1).numpy()}
        save_checkpoint(dirty, sections, ckpt.metadata)
        with pytest.raises(ContractError, match=marker):
            check_bundle_sections(dirty)


class TestZeroOverheadParity:
    def test_aligned_and_plain_bundles_match_in_size_and_calls(self, samples16):
        plain_cfg = small_config(max_steps=4)
        aligned_cfg = replace(
            plain_cfg,
            alignment=replace(plain_cfg.alignment, enabled=True, lam=0.5),
        )
        plain = bundle_from_model(train(plain_cfg, samples16).model)
        aligned = bundle_from_model(train(aligned_cfg, samples16).model)
        assert aligned.parameter_total() == plain.parameter_total()
        infer(samples16[0].image, plain)
        infer(samples16[0].image, aligned)
        assert aligned.unet_calls == plain.unet_calls == 1

    def test_bundle_drops_alignment_module(self, samples16):
        cfg = small_config(
            max_steps=2,
            alignment=AlignmentConfig(
                enabled=True, lam=0.5, patch_size=2, embed_dim=16, hidden_dim=32
            ),
        )
        result = train(cfg, samples16)
        bundle = bundle_from_model(result.model)
        assert not hasattr(bundle, "alignment")
        assert not hasattr(bundle, "teacher")

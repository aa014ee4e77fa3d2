import copy

import pytest
import torch

from latseg import training
from latseg.alignment import AlignmentConfig
from latseg.checkpoint import state_digest
from latseg.codec import pixel_space_codec
from latseg.config import format_config, parse_config_text
from latseg.data import synth_dataset
from latseg.errors import ConfigError, NumericsError, StateError
from latseg.schedule import BetaScheduleConfig, Parameterization
from latseg.training import (
    TrainConfig,
    build_model,
    prepare_codec,
    train,
    train_step,
    trainable_parameters,
)


def small_config(**overrides) -> TrainConfig:
    base = dict(
        codec="pixel_space",
        resolution=16,
        batch_size=2,
        lr=2e-3,
        warmup_steps=5,
        max_steps=25,
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


def aligned(config: TrainConfig, lam: float) -> TrainConfig:
    from dataclasses import replace

    return replace(config, alignment=replace(config.alignment, enabled=True, lam=lam))


@pytest.fixture(scope="module")
def samples16():
    return synth_dataset(10, seed=99, resolution=16)


class TestTrainConfig:
    def test_desk_defaults(self):
        cfg = TrainConfig()
        assert cfg.parameterization is Parameterization.X0
        assert cfg.batch_size == 4
        assert cfg.lr == 4e-5
        assert cfg.warmup_steps == 100
        assert cfg.max_steps == 2000
        assert cfg.resolution == 64
        assert cfg.schedule.num_steps == 1000
        assert not cfg.alignment.enabled

    def test_mapping_text_roundtrip(self):
        cfg = small_config(
            parameterization=Parameterization.EPSILON,
            lr=3e-4,
            alignment=AlignmentConfig(
                enabled=True, lam=0.75, patch_size=2, embed_dim=16, hidden_dim=32
            ),
        )
        text = format_config(cfg.to_mapping())
        back = TrainConfig.from_mapping(parse_config_text(text))
        assert back == cfg

    def test_echo_is_canonical(self):
        mapping = small_config().to_mapping()
        text = format_config(mapping)
        echoed = TrainConfig.from_mapping(parse_config_text(text)).to_mapping()
        assert echoed == mapping

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="alignment.lamda"):
            TrainConfig.from_mapping({"alignment.lamda": "0.5"})

    def test_bad_parameterization_is_config_error(self):
        with pytest.raises(ConfigError, match="parameterization"):
            TrainConfig.from_mapping({"parameterization": "zeta"})

    def test_bad_schedule_kind_is_config_error(self):
        with pytest.raises(ConfigError, match="schedule.kind"):
            TrainConfig.from_mapping({"schedule.kind": "cosine"})

    @pytest.mark.parametrize(
        "overrides",
        [
            dict(batch_size=0),
            dict(lr=0.0),
            dict(lr=-1e-4),
            dict(codec="vae"),
            dict(max_steps=0),
            dict(seed=-1),
        ],
    )
    def test_invalid_fields(self, overrides):
        with pytest.raises(ConfigError):
            small_config(**overrides)

    def test_warmup_constant_lr_per_step(self):
        cfg = small_config(lr=1e-3, warmup_steps=4)
        assert cfg.lr_at(1) == pytest.approx(2.5e-4)
        assert cfg.lr_at(2) == pytest.approx(5.0e-4)
        assert cfg.lr_at(4) == 1e-3
        assert cfg.lr_at(5) == 1e-3
        assert cfg.lr_at(400) == 1e-3
        values = [cfg.lr_at(s) for s in range(1, 20)]
        assert values == sorted(values)


class TestBuildModel:
    def test_components_present(self, samples16):
        cfg = small_config()
        model = build_model(cfg, prepare_codec(cfg, samples16))
        assert model.alignment is None
        assert model.latent_shape() == (3, 16, 16)
        n_params = sum(p.numel() for p in trainable_parameters(model))
        assert n_params > 0

    def test_alignment_head_in_trainables(self, samples16):
        cfg = aligned(small_config(), lam=0.5)
        model = build_model(cfg, prepare_codec(cfg, samples16))
        assert model.alignment is not None
        without = len(list(model.unet.parameters())) + len(
            list(model.encoder.parameters())
        )
        assert len(trainable_parameters(model)) == without + len(
            list(model.alignment.head.parameters())
        )

    def test_tap_geometry_fails_fast(self):
        cfg = small_config(channel_mults=(1, 2, 4, 8, 16, 32))
        with pytest.raises(ConfigError, match="divisible"):
            build_model(cfg, pixel_space_codec())

    def test_same_seed_same_init(self, samples16):
        cfg = small_config()
        codec = prepare_codec(cfg, samples16)
        a = build_model(cfg, codec)
        b = build_model(cfg, codec)
        assert state_digest(a.unet) == state_digest(b.unet)
        assert state_digest(a.encoder) == state_digest(b.encoder)

    def test_different_seed_different_init(self, samples16):
        codec = pixel_space_codec()
        a = build_model(small_config(seed=0), codec)
        b = build_model(small_config(seed=1), codec)
        assert state_digest(a.unet) != state_digest(b.unet)


class TestTrainLoop:
    def test_loss_decreases_x0_and_epsilon(self, samples16):
        for parameterization in (Parameterization.X0, Parameterization.EPSILON):
            cfg = small_config(parameterization=parameterization, max_steps=150)
            result = train(cfg, samples16)
            first = sum(result.losses.pred[:10]) / 10
            last = sum(result.losses.pred[-10:]) / 10
            assert last < first, parameterization

    def test_parameters_change_after_one_step(self, samples16):
        cfg = small_config(max_steps=1)
        result = train(cfg, samples16)
        fresh = build_model(cfg, result.model.codec)
        assert state_digest(result.model.unet) != state_digest(fresh.unet)

    def test_image_encoder_trains_while_codec_stays_frozen(self, codec32):
        samples32 = synth_dataset(4, seed=7, resolution=32)
        cfg = small_config(codec="toy_ae", resolution=32, max_steps=2)
        result = train(cfg, samples32, codec=codec32)
        fresh = build_model(cfg, codec32)
        assert state_digest(result.model.encoder) != state_digest(fresh.encoder)
        assert state_digest(result.model.codec.encoder) == state_digest(codec32.encoder)

    def test_run_is_bit_reproducible(self, samples16):
        cfg = small_config(max_steps=8)
        a = train(cfg, samples16)
        b = train(cfg, samples16)
        assert a.losses.pred == b.losses.pred
        assert state_digest(a.model.unet) == state_digest(b.model.unet)
        assert a.data_digest == b.data_digest

    def test_lambda_zero_matches_alignment_free_run_bitwise(self, samples16):
        cfg_off = small_config(max_steps=25)
        cfg_zero = aligned(cfg_off, lam=0.0)
        off = train(cfg_off, samples16)
        zero = train(cfg_zero, samples16)
        assert off.losses.pred == zero.losses.pred
        assert off.losses.total == zero.losses.total
        assert state_digest(off.model.unet) == state_digest(zero.model.unet)
        assert state_digest(off.model.encoder) == state_digest(zero.model.encoder)

    def test_lambda_zero_still_logs_distill(self, samples16):
        cfg = aligned(small_config(max_steps=3), lam=0.0)
        result = train(cfg, samples16)
        assert any(v != 0.0 for v in result.losses.distill)
        off = train(small_config(max_steps=3), samples16)
        assert all(v == 0.0 for v in off.losses.distill)

    def test_positive_lambda_changes_trajectory(self, samples16):
        off = train(small_config(max_steps=10), samples16)
        on = train(aligned(small_config(max_steps=10), lam=0.5), samples16)
        assert state_digest(off.model.unet) != state_digest(on.model.unet)
        assert off.losses.total != on.losses.total

    def test_total_combines_pred_and_distill(self, samples16):
        lam = 0.5
        result = train(aligned(small_config(max_steps=5), lam=lam), samples16)
        for p, d, t in zip(
            result.losses.pred, result.losses.distill, result.losses.total
        ):
            assert t == pytest.approx(p + lam * d, rel=1e-5, abs=1e-6)

    def test_resolution_mismatch_rejected(self, samples16):
        cfg = small_config(resolution=32)
        with pytest.raises(ConfigError, match="resolution"):
            train(cfg, samples16)

    def test_empty_dataset_rejected(self):
        with pytest.raises(ConfigError, match="nonempty"):
            train(small_config(), [])

    def test_non_finite_loss_dumps_diagnostics(self, samples16):
        cfg = small_config()
        model = build_model(cfg, pixel_space_codec())
        optimizer = torch.optim.AdamW(trainable_parameters(model), lr=cfg.lr)
        images = torch.full((2, 3, 16, 16), float("nan"))
        masks = torch.stack([samples16[0].mask, samples16[1].mask])
        t = torch.tensor([5, 9])
        eps = torch.zeros((2, 3, 16, 16))
        with pytest.raises(NumericsError) as err:
            train_step(model, optimizer, images, masks, t, eps)
        message = str(err.value)
        assert "t=[5, 9]" in message
        assert "|z_x|" in message and "|z_y|" in message

    def test_mutated_codec_detected(self, samples16, codec32, monkeypatch):
        codec = copy.deepcopy(codec32)
        cfg = small_config(
            codec="toy_ae",
            resolution=32,
            max_steps=2,
            alignment=AlignmentConfig(
                enabled=False, patch_size=8, embed_dim=16, hidden_dim=32
            ),
        )
        samples32 = synth_dataset(4, seed=7, resolution=32)
        original = training.train_step

        def corrupting(model, optimizer, images, masks, t, eps):
            out = original(model, optimizer, images, masks, t, eps)
            with torch.no_grad():
                next(model.codec.encoder.parameters()).add_(1.0)
            return out

        monkeypatch.setattr(training, "train_step", corrupting)
        with pytest.raises(StateError, match="codec"):
            train(cfg, samples32, codec=codec)

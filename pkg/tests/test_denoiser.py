"""U-Net shapes, determinism, exact stem duplication, gradient checks."""

import pytest
import torch

from latseg.denoiser import (
    DenoiserConfig,
    DenoiserNet,
    DuplicableConv2d,
    SinusoidalTimeEmbedding,
    build_denoiser,
    duplicate_input_layer,
)
from latseg.errors import ConfigError, ShapeError, StateError
from latseg.seeding import seed_module_init

MICRO = DenoiserConfig(latent_channels=2, base_width=8, channel_mults=(1, 2), time_dim=16)


def make_net(config=MICRO, duplicated=True, seed=31):
    seed_module_init(seed, "test.denoiser")
    return build_denoiser(config, duplicated=duplicated)


class TestTimeEmbedding:
    def test_shape(self):
        emb = SinusoidalTimeEmbedding(16)
        out = emb(torch.tensor([0, 5, 999]))
        assert out.shape == (3, 16)

    def test_odd_dim_rejected(self):
        with pytest.raises(ConfigError):
            SinusoidalTimeEmbedding(15)

    def test_distinct_timesteps_distinct_embeddings(self):
        emb = SinusoidalTimeEmbedding(32)
        out = emb(torch.tensor([1, 2]))
        assert not torch.allclose(out[0], out[1])


class TestConfig:
    def test_tap_defaults_to_deepest(self):
        cfg = DenoiserConfig()
        assert cfg.tap_index == len(cfg.channel_mults) - 1
        assert cfg.tap_channels() == 128

    def test_tap_spatial(self):
        cfg = DenoiserConfig()  # deepest of 3 levels: /4
        assert cfg.tap_spatial(16) == 4
        with pytest.raises(ConfigError):
            cfg.tap_spatial(18)

    def test_tap_out_of_range(self):
        with pytest.raises(ConfigError):
            DenoiserConfig(tap_block=3)

    def test_bad_width(self):
        with pytest.raises(ConfigError):
            DenoiserConfig(base_width=0)


class TestForward:
    def test_output_shapes(self):
        net = make_net()
        z = torch.randn(3, 4, 8, 8)
        pred, tap = net(z, torch.tensor([1, 5, 9]))
        assert pred.shape == (3, 2, 8, 8)
        assert tap.shape == (3, 16, 4, 4)

    def test_scalar_timestep_broadcasts(self):
        net = make_net()
        z = torch.randn(2, 4, 8, 8)
        pred, _ = net(z, 7)
        assert pred.shape == (2, 2, 8, 8)

    def test_bitwise_deterministic(self):
        net = make_net()
        z = torch.randn(2, 4, 8, 8, generator=torch.Generator().manual_seed(3))
        t = torch.tensor([2, 8])
        p1, m1 = net(z, t)
        p2, m2 = net(z, t)
        assert torch.equal(p1, p2)
        assert torch.equal(m1, m2)

    def test_channel_mismatch_rejected(self):
        net = make_net()
        with pytest.raises(ShapeError):
            net(torch.randn(1, 2, 8, 8), 1)

    def test_tap_block_selects_encoder_level(self):
        cfg = DenoiserConfig(
            latent_channels=2, base_width=8, channel_mults=(1, 2), time_dim=16, tap_block=0
        )
        net = make_net(cfg)
        _, tap = net(torch.randn(1, 4, 8, 8), 1)
        assert tap.shape == (1, 8, 8, 8)

    def test_tap_is_on_autograd_path(self):
        # distillation-style loss on the tap alone must reach the stem
        net = make_net()
        z = torch.randn(1, 4, 8, 8)
        _, tap = net(z, 3)
        tap.square().mean().backward()
        assert net.stem.weight.grad is not None
        assert torch.any(net.stem.weight.grad != 0)


class TestDuplication:
    def test_channel_count_doubles(self):
        net = make_net(DenoiserConfig(), duplicated=False)
        assert net.input_channels == 4
        duplicate_input_layer(net)
        assert net.input_channels == 8

    def test_halved_weights_layout(self):
        net = make_net(duplicated=False)
        original = net.stem.weight.detach().clone()
        bias = net.stem.bias.detach().clone()
        duplicate_input_layer(net)
        half = original * 0.5
        assert torch.equal(net.stem.weight[:, :2], half)
        assert torch.equal(net.stem.weight[:, 2:], half)
        assert torch.equal(net.stem.bias, bias)

    def test_double_duplication_rejected(self):
        net = make_net()
        with pytest.raises(StateError):
            duplicate_input_layer(net)

    def test_zero_input_gives_identical_bias_map(self):
        seed_module_init(5, "test.stem")
        layer = DuplicableConv2d(3, 6)
        z = torch.zeros(2, 3, 5, 5)
        before = layer(z)
        layer.duplicate()
        after = layer(torch.zeros(2, 6, 5, 5))
        assert torch.equal(before, after)

    def test_duplicated_stem_exact_on_100_inputs(self):
        seed_module_init(6, "test.stem2")
        layer = DuplicableConv2d(4, 8)
        g = torch.Generator().manual_seed(17)
        inputs = [torch.randn(1, 4, 7, 7, generator=g) for _ in range(100)]
        before = [layer(z) for z in inputs]
        layer.duplicate()
        for z, ref in zip(inputs, before):
            out = layer(torch.cat([z, z], dim=1))
            assert torch.equal(out, ref)

    def test_full_net_exact_after_duplication(self):
        net = make_net(duplicated=False)
        g = torch.Generator().manual_seed(23)
        cases = [
            (torch.randn(2, 2, 8, 8, generator=g), torch.tensor([1, 4]))
            for _ in range(10)
        ]
        refs = [net(z, t) for z, t in cases]
        duplicate_input_layer(net)
        for (z, t), (pred_ref, tap_ref) in zip(cases, refs):
            pred, tap = net(torch.cat([z, z], dim=1), t)
            assert torch.equal(pred, pred_ref)
            assert torch.equal(tap, tap_ref)


class TestGradients:
    def test_finite_difference_on_micro_net(self):
        # central differences vs autograd, float64, a handful of weights
        net = make_net().double()
        g = torch.Generator().manual_seed(41)
        z = torch.randn(2, 4, 8, 8, generator=g, dtype=torch.float64)
        target = torch.randn(2, 2, 8, 8, generator=g, dtype=torch.float64)
        t = torch.tensor([3, 7])

        def loss_value():
            pred, _ = net(z, t)
            return torch.mean(torch.abs(pred - target))

        loss = loss_value()
        net.zero_grad()
        loss.backward()

        h = 1e-5
        checked = 0
        for name, param in net.named_parameters():
            if param.grad is None or param.numel() == 0:
                continue
            flat = param.detach().view(-1)
            idx = checked % flat.numel()
            with torch.no_grad():
                old = flat[idx].item()
                flat[idx] = old + h
                up = loss_value().item()
                flat[idx] = old - h
                down = loss_value().item()
                flat[idx] = old
            numeric = (up - down) / (2 * h)
            analytic = param.grad.view(-1)[idx].item()
            scale = max(abs(numeric), abs(analytic), 1e-8)
            assert abs(numeric - analytic) / scale < 1e-4, name
            checked += 1
            if checked >= 8:
                break
        assert checked == 8

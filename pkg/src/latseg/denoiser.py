"""Tiny conditioned U-Net with a timestep embedding and an alignment tap.

The input stem is a `DuplicableConv2d`: its forward always runs the
convolution without bias and adds the bias afterwards, in both the original
and the duplicated state. That structure is what makes input-layer
duplication an exact identity rather than an approximate one: halving
weights is exact in floating point (power-of-two scale), the halved halves
see the same per-position summation order as the original kernel, and
0.5c + 0.5c == c without rounding. So new(concat(z, z)) == old(z) bitwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Tuple

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, ShapeError, StateError


def _norm_groups(channels: int) -> int:
    return math.gcd(8, channels)


class SinusoidalTimeEmbedding(nn.Module):
    """Classic sin/cos embedding of the integer timestep."""

    def __init__(self, dim: int):
        super().__init__()
        if dim % 2:
            raise ConfigError(f"time embedding dim must be even, got {dim}")
        self.dim = dim

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        half = self.dim // 2
        freqs = torch.exp(
            -math.log(10000.0) * torch.arange(half, dtype=torch.float64) / (half - 1)
        ).to(t.device)
        args = t.double()[:, None] * freqs[None, :]
        emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
        return emb


class DuplicableConv2d(nn.Module):
    """Conv2d whose input layer can be widened 2x with exact equivalence."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3):
        super().__init__()
        self.base_in_channels = in_channels
        self.padding = kernel_size // 2
        weight = torch.empty(out_channels, in_channels, kernel_size, kernel_size)
        nn.init.kaiming_uniform_(weight, a=math.sqrt(5))
        self.weight = nn.Parameter(weight)
        self.bias = nn.Parameter(torch.zeros(out_channels))
        self.duplicated = False

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        expected = self.weight.shape[1]
        if x.ndim != 4 or x.shape[1] != expected:
            raise ShapeError(
                f"stem expects (B,{expected},H,W), got {tuple(x.shape)}"
            )
        if self.duplicated:
            c = expected // 2
            out = F.conv2d(x[:, :c], self.weight[:, :c], None, padding=self.padding)
            out = out + F.conv2d(x[:, c:], self.weight[:, c:], None, padding=self.padding)
        else:
            out = F.conv2d(x, self.weight, None, padding=self.padding)
        return out + self.bias.view(1, -1, 1, 1)

    def duplicate(self) -> None:
        if self.duplicated:
            raise StateError("input layer is already duplicated")
        with torch.no_grad():
            halved = self.weight * 0.5
            self.weight = nn.Parameter(torch.cat([halved, halved], dim=1).contiguous())
        self.duplicated = True


class ResidualBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, time_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_norm_groups(in_channels), in_channels)
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, out_channels)
        self.norm2 = nn.GroupNorm(_norm_groups(out_channels), out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        if in_channels != out_channels:
            self.skip = nn.Conv2d(in_channels, out_channels, 1)
        else:
            self.skip = nn.Identity()

    def forward(self, x: torch.Tensor, t_emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_proj(t_emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


@dataclass(frozen=True)
class DenoiserConfig:
    latent_channels: int = 4
    base_width: int = 32
    channel_mults: Tuple[int, ...] = (1, 2, 4)
    time_dim: int = 64
    tap_block: int = -1  # encoder block index; -1 means the deepest

    def __post_init__(self):
        if self.latent_channels < 1 or self.base_width < 1:
            raise ConfigError("latent_channels and base_width must be positive")
        if not self.channel_mults:
            raise ConfigError("channel_mults must be nonempty")
        n = len(self.channel_mults)
        if not (-n <= self.tap_block < n):
            raise ConfigError(
                f"tap_block {self.tap_block} out of range for {n} encoder blocks"
            )

    @property
    def widths(self) -> Tuple[int, ...]:
        return tuple(self.base_width * m for m in self.channel_mults)

    @property
    def tap_index(self) -> int:
        return self.tap_block % len(self.channel_mults)

    def tap_channels(self) -> int:
        return self.widths[self.tap_index]

    def tap_spatial(self, latent_side: int) -> int:
        down = 2**self.tap_index
        if latent_side % down:
            raise ConfigError(
                f"latent side {latent_side} not divisible by the tap's "
                f"downsampling factor {down}"
            )
        return latent_side // down


class DenoiserNet(nn.Module):
    """Concat-conditioned U-Net: (B, 2C, H, W) + t -> (B, C, H, W) and a tap.

    Built with C input channels; `duplicate_input_layer` widens the stem to
    2C for concat conditioning. The second return value is the activation of
    the configured encoder block, kept on the autograd path so a distillation
    loss can reach every weight upstream of the tap.
    """

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        widths = config.widths
        self.time_embed = SinusoidalTimeEmbedding(config.time_dim)
        self.time_mlp = nn.Sequential(
            nn.Linear(config.time_dim, config.time_dim),
            nn.SiLU(),
            nn.Linear(config.time_dim, config.time_dim),
        )
        self.stem = DuplicableConv2d(config.latent_channels, widths[0])
        self.encoder_blocks = nn.ModuleList(
            ResidualBlock(w, w, config.time_dim) for w in widths
        )
        self.downsamples = nn.ModuleList(
            nn.Conv2d(widths[i], widths[i + 1], 3, stride=2, padding=1)
            for i in range(len(widths) - 1)
        )
        self.middle = ResidualBlock(widths[-1], widths[-1], config.time_dim)
        self.upsamples = nn.ModuleList(
            nn.ConvTranspose2d(widths[i + 1], widths[i], 4, stride=2, padding=1)
            for i in reversed(range(len(widths) - 1))
        )
        self.decoder_blocks = nn.ModuleList(
            ResidualBlock(2 * widths[i], widths[i], config.time_dim)
            for i in reversed(range(len(widths) - 1))
        )
        self.head_norm = nn.GroupNorm(_norm_groups(widths[0]), widths[0])
        self.head = nn.Conv2d(widths[0], config.latent_channels, 3, padding=1)

    @property
    def input_channels(self) -> int:
        return self.stem.weight.shape[1]

    def forward(
        self, z_in: torch.Tensor, t: torch.Tensor
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        if z_in.ndim != 4 or z_in.shape[1] != self.input_channels:
            raise ShapeError(
                f"expected input (B,{self.input_channels},H,W), got {tuple(z_in.shape)}"
            )
        if not torch.is_tensor(t):
            t = torch.as_tensor(t)
        if t.ndim == 0:
            t = t.expand(z_in.shape[0])
        t_emb = self.time_mlp(self.time_embed(t).to(z_in.dtype))

        h = self.stem(z_in)
        skips: List[torch.Tensor] = []
        tap: torch.Tensor | None = None
        for i, block in enumerate(self.encoder_blocks):
            h = block(h, t_emb)
            if i == self.config.tap_index:
                tap = h
            if i < len(self.downsamples):
                skips.append(h)
                h = self.downsamples[i](h)
        h = self.middle(h, t_emb)
        for up, block in zip(self.upsamples, self.decoder_blocks):
            h = up(h)
            h = block(torch.cat([h, skips.pop()], dim=1), t_emb)
        pred = self.head(F.silu(self.head_norm(h)))
        assert tap is not None
        return pred, tap


def duplicate_input_layer(net: DenoiserNet) -> DenoiserNet:
    """Widen the stem from C to 2C channels, halving its weights in place.

    The widened stem reproduces the original exactly on duplicated input,
    down to the last bit; see the module docstring for why.
    """
    net.stem.duplicate()
    return net


def build_denoiser(config: DenoiserConfig, duplicated: bool = True) -> DenoiserNet:
    """Fresh denoiser; by default with the stem already widened for concat input."""
    net = DenoiserNet(config)
    if duplicated:
        duplicate_input_layer(net)
    return net

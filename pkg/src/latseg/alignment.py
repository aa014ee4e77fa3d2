"""Teacher features, token projection, and the cosine distillation loss.

Everything here exists only during training. The teacher is frozen (either
a seed-fixed random patch transformer or an external token provider), the
projection head maps U-Net tap channels onto the teacher's embedding width
token by token, and the loss is the negative mean per-token cosine
similarity. Inference never imports this module's state: bundles are
rejected if they carry any of it.
"""

from __future__ import annotations

import struct
import subprocess
from dataclasses import dataclass
from pathlib import Path

import torch
from torch import nn

from .errors import ConfigError, DataError, ShapeError
from .seeding import seed_module_init

COSINE_EPS = 1e-8


@dataclass(frozen=True)
class AlignmentConfig:
    """Distillation settings; `lam` is the loss weight (config key "lambda")."""

    enabled: bool = False
    lam: float = 0.5
    teacher: str = "frozen_random"
    tap_block: int = -1  # which U-Net encoder block feeds the loss
    patch_size: int = 16
    embed_dim: int = 64
    hidden_dim: int = 128
    teacher_command: str = ""

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError(f"alignment.lambda must be >= 0, got {self.lam}")
        if self.teacher not in ("frozen_random", "external"):
            raise ConfigError(
                f"alignment.teacher must be frozen_random or external, got {self.teacher!r}"
            )
        if self.patch_size < 1 or self.embed_dim < 1:
            raise ConfigError("alignment patch_size and embed_dim must be positive")
        if self.teacher == "external" and not self.teacher_command:
            raise ConfigError("alignment.teacher=external requires alignment.teacher_command")


class TransformerBlock(nn.Module):
    def __init__(self, dim: int, heads: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, dim * 4), nn.GELU(), nn.Linear(dim * 4, dim)
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.norm1(x)
        attn, _ = self.attn(h, h, h, need_weights=False)
        x = x + attn
        return x + self.mlp(self.norm2(x))


class TeacherEncoder(nn.Module):
    """Frozen patch transformer producing L x D tokens from a clean image.

    A stand-in for a large pretrained backbone: random but seed-fixed, so its
    features are an arbitrary-but-consistent target. Any provider of L x D
    tokens can replace it through the external adapter.
    """

    def __init__(self, patch_size: int, embed_dim: int, resolution: int, depth: int = 2):
        super().__init__()
        if resolution % patch_size:
            raise ConfigError(
                f"resolution {resolution} is not divisible by teacher patch size {patch_size}"
            )
        side = resolution // patch_size
        self.patch_size = patch_size
        self.embed_dim = embed_dim
        self.num_tokens = side * side
        self.patch_embed = nn.Conv2d(3, embed_dim, patch_size, stride=patch_size)
        self.pos_embed = nn.Parameter(torch.randn(1, self.num_tokens, embed_dim) * 0.02)
        self.blocks = nn.ModuleList(TransformerBlock(embed_dim) for _ in range(depth))
        self.norm = nn.LayerNorm(embed_dim)
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"teacher expects (B,3,H,W) images, got {tuple(x.shape)}")
        with torch.no_grad():
            tokens = self.patch_embed(x).flatten(2).transpose(1, 2)
            if tokens.shape[1] != self.num_tokens:
                raise ShapeError(
                    f"image yields {tokens.shape[1]} patches, teacher was built "
                    f"for {self.num_tokens}"
                )
            tokens = tokens + self.pos_embed
            for block in self.blocks:
                tokens = block(tokens)
            return self.norm(tokens)


def build_teacher(config: AlignmentConfig, resolution: int, seed: int) -> nn.Module:
    if config.teacher == "external":
        return ExternalTeacher(config.teacher_command, resolution)
    seed_module_init(seed, "alignment.teacher")
    return TeacherEncoder(config.patch_size, config.embed_dim, resolution)


class ProjectionHead(nn.Module):
    """Per-token MLP from tap channels to the teacher embedding width."""

    def __init__(self, in_dim: int, embed_dim: int, hidden_dim: int = 128):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(in_dim, hidden_dim),
            nn.SiLU(),
            nn.Linear(hidden_dim, hidden_dim),
            nn.SiLU(),
            nn.Linear(hidden_dim, embed_dim),
        )

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        return self.net(tokens)


def flatten_feature_map(m: torch.Tensor) -> torch.Tensor:
    """(B, C, H, W) -> (B, H*W, C); cell (r, c) becomes token r*W + c."""
    if m.ndim != 4:
        raise ShapeError(f"feature map must be (B,C,H,W), got {tuple(m.shape)}")
    return m.flatten(2).transpose(1, 2)


def project_features(
    m: torch.Tensor, head: ProjectionHead, expected_tokens: int | None = None
) -> torch.Tensor:
    """Flatten the tap and project every token; never interpolates.

    When `expected_tokens` is given, a token-count mismatch is an error
    naming both sides; silently resampling would hide a misconfigured
    tap/teacher pairing.
    """
    tokens = flatten_feature_map(m)
    if expected_tokens is not None and tokens.shape[1] != expected_tokens:
        raise ShapeError(
            f"feature map yields {tokens.shape[1]} tokens (HW) but the teacher "
            f"produces {expected_tokens} (L); pick a tap/patch size with HW = L"
        )
    return head(tokens)


def distill_loss(h: torch.Tensor, p: torch.Tensor) -> torch.Tensor:
    """Negative mean per-token cosine similarity, in [-1, 1]."""
    if h.shape != p.shape:
        raise ShapeError(f"token shapes differ: teacher {tuple(h.shape)} vs projected {tuple(p.shape)}")
    num = (h * p).sum(dim=-1)
    denom = h.norm(dim=-1).clamp_min(COSINE_EPS) * p.norm(dim=-1).clamp_min(COSINE_EPS)
    return -(num / denom).mean()


def mean_token_cosine(h: torch.Tensor, p: torch.Tensor) -> float:
    """Convenience: the (positive) mean cosine similarity, for reporting."""
    return float(-distill_loss(h, p).item())


def total_loss(l_pred: torch.Tensor, l_distill, lam: float):
    """l_pred + lam * l_distill.

    lam == 0 returns l_pred itself: the distillation term contributes exactly
    zero to both value and gradients, keeping the zero-weight run bit-equal
    to a run where alignment was never built.
    """
    if lam < 0:
        raise ConfigError(f"alignment.lambda must be >= 0, got {lam}")
    if lam == 0:
        return l_pred
    return l_pred + lam * l_distill


TOKEN_BLOB_HEADER = struct.Struct("<II")


def write_token_blob(path, tokens: torch.Tensor) -> None:
    """Serialize an L x D float32 token matrix: u32 L, u32 D, row-major data."""
    if tokens.ndim != 2:
        raise ShapeError(f"token blob wants an (L, D) matrix, got {tuple(tokens.shape)}")
    arr = tokens.detach().cpu().to(torch.float32).contiguous().numpy()
    with open(path, "wb") as fh:
        fh.write(TOKEN_BLOB_HEADER.pack(arr.shape[0], arr.shape[1]))
        fh.write(arr.tobytes())


def read_token_blob(source) -> torch.Tensor:
    data = source if isinstance(source, bytes) else Path(source).read_bytes()
    if len(data) < TOKEN_BLOB_HEADER.size:
        raise DataError("token blob too short for its header")
    l_count, d_count = TOKEN_BLOB_HEADER.unpack_from(data)
    expected = TOKEN_BLOB_HEADER.size + l_count * d_count * 4
    if len(data) != expected:
        raise DataError(
            f"token blob length {len(data)} does not match header "
            f"({l_count}x{d_count} float32 = {expected} bytes)"
        )
    import numpy as np

    arr = np.frombuffer(data, dtype="<f4", offset=TOKEN_BLOB_HEADER.size)
    return torch.from_numpy(arr.reshape(l_count, d_count).copy())


class ExternalTeacher(nn.Module):
    """Adapter for any token provider: a command that reads an image file
    path (argv[1]) and writes a token blob to stdout."""

    def __init__(self, command: str, resolution: int):
        super().__init__()
        if not command:
            raise ConfigError("external teacher needs a command")
        self.command = command
        self.resolution = resolution

    def features_for_file(self, image_path) -> torch.Tensor:
        proc = subprocess.run(
            [*self.command.split(), str(image_path)], capture_output=True
        )
        if proc.returncode != 0:
            raise DataError(
                f"external teacher failed on {image_path}: "
                f"{proc.stderr.decode(errors='replace')[:500]}"
            )
        return read_token_blob(proc.stdout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        import tempfile

        from .data import image_to_uint8
        from PIL import Image

        if x.ndim == 3:
            x = x.unsqueeze(0)
        outputs = []
        with tempfile.TemporaryDirectory() as tmp:
            for i, image in enumerate(x):
                path = Path(tmp) / f"{i}.png"
                Image.fromarray(image_to_uint8(image)).save(path)
                outputs.append(self.features_for_file(path))
        return torch.stack(outputs)


class AlignmentModule(nn.Module):
    """Teacher + projection head, wired for one training setup."""

    def __init__(
        self,
        config: AlignmentConfig,
        tap_channels: int,
        resolution: int,
        seed: int,
    ):
        super().__init__()
        self.config = config
        self.teacher = build_teacher(config, resolution, seed)
        seed_module_init(seed, "alignment.head")
        self.head = ProjectionHead(tap_channels, config.embed_dim, config.hidden_dim)
        side = resolution // config.patch_size
        self.num_tokens = side * side

    def teacher_features(self, x: torch.Tensor) -> torch.Tensor:
        return self.teacher(x)

    def loss(self, m: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        h = self.teacher_features(x)
        p = project_features(m, self.head, expected_tokens=h.shape[1])
        return distill_loss(h, p)

    def trainable_parameters(self):
        return self.head.parameters()

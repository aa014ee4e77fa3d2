"""Synthetic shape dataset, directory ingestion, and split/export helpers.

A sample is an image in [-1, 1] (3xHxW float32) with an exactly-known binary
mask. Synthetic samples are deterministic per (seed, index): each index owns
a derived RNG, so generation order and parallelism cannot change the data.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import List, NamedTuple, Sequence

import numpy as np
import torch
from PIL import Image

from .errors import DataError, ShapeError
from .seeding import numpy_generator

FOREGROUND_FRACTION_RANGE = (0.02, 0.6)
_MAX_REDRAWS = 200


@dataclass
class SamplePair:
    image: torch.Tensor  # 3xHxW float32 in [-1, 1]
    mask: torch.Tensor  # HxW float32 in {0, 1}
    id: str

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise ShapeError(f"image must be 3xHxW, got {tuple(self.image.shape)}")
        if tuple(self.mask.shape) != tuple(self.image.shape[1:]):
            raise ShapeError(
                f"mask shape {tuple(self.mask.shape)} does not match "
                f"image spatial shape {tuple(self.image.shape[1:])}"
            )
        values = torch.unique(self.mask)
        if not bool(torch.all((values == 0) | (values == 1))):
            raise DataError(f"mask for sample {self.id!r} is not binary")


def _ellipse_mask(rng: np.random.Generator, resolution: int) -> np.ndarray:
    """Union of 1-3 rotated ellipses, drawn on an exact boolean grid."""
    n_blobs = int(rng.integers(1, 4))
    yy, xx = np.mgrid[0:resolution, 0:resolution].astype(np.float64)
    mask = np.zeros((resolution, resolution), dtype=bool)
    for _ in range(n_blobs):
        cy, cx = rng.uniform(0.2, 0.8, size=2) * resolution
        ay, ax = rng.uniform(0.08, 0.28, size=2) * resolution
        theta = rng.uniform(0.0, np.pi)
        ct, st_ = np.cos(theta), np.sin(theta)
        u = (xx - cx) * ct + (yy - cy) * st_
        v = -(xx - cx) * st_ + (yy - cy) * ct
        mask |= (u / ax) ** 2 + (v / ay) ** 2 <= 1.0
    return mask


def _smooth_field(rng: np.random.Generator, resolution: int, cells: int = 8) -> np.ndarray:
    """Low-frequency texture: coarse Gaussian grid upsampled bilinearly."""
    coarse = rng.standard_normal((cells + 1, cells + 1))
    grid = torch.from_numpy(coarse)[None, None]
    field = torch.nn.functional.interpolate(
        grid, size=(resolution, resolution), mode="bilinear", align_corners=True
    )
    return field[0, 0].numpy()


def make_sample(seed: int, index: int, resolution: int) -> SamplePair:
    rng = numpy_generator(seed, f"sample:{index}")
    area = float(resolution * resolution)
    for _ in range(_MAX_REDRAWS):
        mask = _ellipse_mask(rng, resolution)
        frac = mask.sum() / area
        if FOREGROUND_FRACTION_RANGE[0] <= frac <= FOREGROUND_FRACTION_RANGE[1]:
            break
    else:
        raise DataError(
            f"sample {index}: no mask with foreground fraction in "
            f"{FOREGROUND_FRACTION_RANGE} after {_MAX_REDRAWS} draws"
        )

    bg = rng.uniform(-0.85, -0.35)
    fg = rng.uniform(0.25, 0.75)
    base = np.where(mask, fg, bg)
    texture = _smooth_field(rng, resolution) * 0.18
    image = np.empty((3, resolution, resolution), dtype=np.float64)
    for c in range(3):
        tint = rng.uniform(-0.08, 0.08)
        pixel_noise = rng.standard_normal((resolution, resolution)) * 0.06
        image[c] = base + tint + texture + pixel_noise
    image = np.clip(image, -1.0, 1.0)
    return SamplePair(
        image=torch.from_numpy(image).float(),
        mask=torch.from_numpy(mask.astype(np.float32)),
        id=f"synth-{seed}-{index:05d}",
    )


def synth_dataset(n: int, seed: int, resolution: int) -> List[SamplePair]:
    if n < 1:
        raise DataError(f"dataset size must be >= 1, got {n}")
    return [make_sample(seed, i, resolution) for i in range(n)]


def dataset_digest(samples: Sequence[SamplePair]) -> str:
    """Content hash binding a report to the exact data it was computed from."""
    h = hashlib.blake2b(digest_size=16)
    for s in samples:
        h.update(s.id.encode())
        h.update(s.image.numpy().tobytes())
        h.update(s.mask.numpy().tobytes())
    return h.hexdigest()


class DatasetSplit(NamedTuple):
    train: List[SamplePair]
    val: List[SamplePair]
    test: List[SamplePair]


def split_dataset(
    samples: Sequence[SamplePair], train_frac: float = 0.8, val_frac: float = 0.1
) -> DatasetSplit:
    """Deterministic 80/10/10-style split by position (synthetic samples are iid)."""
    if not 0.0 < train_frac < 1.0 or val_frac < 0.0 or train_frac + val_frac > 1.0:
        raise DataError(f"bad split fractions ({train_frac}, {val_frac})")
    n = len(samples)
    n_train = round(n * train_frac)
    n_val = round(n * val_frac)
    return DatasetSplit(
        train=list(samples[:n_train]),
        val=list(samples[n_train : n_train + n_val]),
        test=list(samples[n_train + n_val :]),
    )


def image_to_uint8(image: torch.Tensor) -> np.ndarray:
    """[-1,1] 3xHxW float -> HxWx3 uint8."""
    arr = image.clamp(-1, 1).permute(1, 2, 0).numpy()
    return np.round((arr + 1.0) * 127.5).astype(np.uint8)


def save_directory(samples: Sequence[SamplePair], path) -> None:
    """Export to the images/ + masks/ PNG layout load_directory consumes."""
    root = Path(path)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for s in samples:
        Image.fromarray(image_to_uint8(s.image)).save(root / "images" / f"{s.id}.png")
        mask8 = (s.mask.numpy() * 255).astype(np.uint8)
        Image.fromarray(mask8, mode="L").save(root / "masks" / f"{s.id}.png")


def load_image(path, resolution: int) -> torch.Tensor:
    """One PNG/JPEG -> 3xHxW float in [-1, 1], resized like load_directory."""
    try:
        with Image.open(path) as im:
            rgb = im.convert("RGB").resize((resolution, resolution), Image.BILINEAR)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    arr = np.asarray(rgb, dtype=np.float32) / 127.5 - 1.0
    return torch.from_numpy(arr.transpose(2, 0, 1)).contiguous()


def save_mask_png(mask: torch.Tensor, path) -> None:
    mask8 = (mask.numpy() * 255).astype(np.uint8)
    Image.fromarray(mask8, mode="L").save(path)


def load_directory(path, resolution: int) -> List[SamplePair]:
    """Read name-matched images/<id>.png + masks/<id>.png pairs.

    Images are resized bilinearly and normalized to [-1, 1]; grayscale inputs
    are replicated to 3 channels. Masks are resized with nearest neighbour and
    thresholded at 127/255 (anti-aliased mask PNGs stay binary).
    """
    root = Path(path)
    img_dir, mask_dir = root / "images", root / "masks"
    if not img_dir.is_dir() or not mask_dir.is_dir():
        raise DataError(f"{root} must contain images/ and masks/ directories")
    img_files = sorted(img_dir.glob("*.png"))
    if not img_files:
        raise DataError(f"no PNG images found under {img_dir}")
    samples = []
    for img_path in img_files:
        mask_path = mask_dir / img_path.name
        if not mask_path.exists():
            raise DataError(f"missing mask for image {img_path.name}")
        with Image.open(img_path) as im:
            rgb = im.convert("RGB").resize((resolution, resolution), Image.BILINEAR)
            image = np.asarray(rgb, dtype=np.float32) / 127.5 - 1.0
        with Image.open(mask_path) as mm:
            gray = mm.convert("L").resize((resolution, resolution), Image.NEAREST)
            mask = (np.asarray(gray) > 127).astype(np.float32)
        samples.append(
            SamplePair(
                image=torch.from_numpy(image.transpose(2, 0, 1)).contiguous(),
                mask=torch.from_numpy(mask),
                id=img_path.stem,
            )
        )
    return samples

"""Frozen latent codec (encoder/decoder pair) and its learnable clone.

Two codec kinds share one interface:

  toy_ae       small conv autoencoder, 4x downsample, 4 latent channels,
               pretrained on the synthetic set then frozen
  pixel_space  identity encode / identity decode, for the fastest tests

Masks ride through the same encoder as images: replicated to 3 channels and
rescaled to [-1, 1] first. Binarization thresholds the channel-mean of a
decoded image at the midpoint of that range.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass
from typing import List, Sequence

import torch
from torch import nn

from .checkpoint import (
    Checkpoint,
    load_checkpoint,
    parameter_count,
    save_checkpoint,
    state_digest,
)
from .data import SamplePair
from .errors import ConfigError, DataError, ShapeError, StateError
from .seeding import seed_module_init, torch_generator

TOY_LATENT_CHANNELS = 4
TOY_DOWNSAMPLE = 4


class PixelIdentity(nn.Module):
    """Parameter-free stand-in for E or D: the latent space is pixel space."""

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x


class ToyEncoder(nn.Module):
    def __init__(self, c_lat: int = TOY_LATENT_CHANNELS):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, 32, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(32, 64, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(64, c_lat, 3, padding=1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class ToyDecoder(nn.Module):
    def __init__(self, c_lat: int = TOY_LATENT_CHANNELS):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(c_lat, 64, 3, padding=1),
            nn.SiLU(),
            nn.ConvTranspose2d(64, 32, 4, stride=2, padding=1),
            nn.SiLU(),
            nn.ConvTranspose2d(32, 16, 4, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(16, 3, 3, padding=1),
            nn.Tanh(),
        )

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.net(z)


def _freeze(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        p.requires_grad_(False)
    module.eval()
    return module


@dataclass
class Codec:
    """Frozen (E, D) pair with the bookkeeping the training loop relies on."""

    encoder: nn.Module
    decoder: nn.Module
    kind: str
    downsample_factor: int
    latent_channels: int
    threshold: float = 0.0
    psnr_floor: float = float("nan")
    mask_dice_floor: float = float("nan")

    def __post_init__(self):
        _freeze(self.encoder)
        _freeze(self.decoder)

    @property
    def frozen(self) -> bool:
        return not any(
            p.requires_grad
            for m in (self.encoder, self.decoder)
            for p in m.parameters()
        )

    def digest(self) -> str:
        return state_digest(
            {
                **{f"E/{k}": v for k, v in self.encoder.state_dict().items()},
                **{f"D/{k}": v for k, v in self.decoder.state_dict().items()},
            }
        )

    def _check_image(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim == 3:
            x = x.unsqueeze(0)
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"expected images shaped (B,3,H,W), got {tuple(x.shape)}")
        return x

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        """Frozen E; output carries no gradient history."""
        batched = x.ndim == 4
        x = self._check_image(x)
        with torch.no_grad():
            z = self.encoder(x)
        return z if batched else z.squeeze(0)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        batched = z.ndim == 4
        if not batched:
            z = z.unsqueeze(0)
        if z.shape[1] != self.latent_channels:
            raise ShapeError(
                f"latent has {z.shape[1]} channels, codec expects {self.latent_channels}"
            )
        with torch.no_grad():
            x = self.decoder(z)
        return x if batched else x.squeeze(0)

    def mask_to_image(self, y: torch.Tensor) -> torch.Tensor:
        """{0,1} mask -> [-1,1] 3-channel image, the codec's input convention."""
        if y.ndim == 2:
            y = y.unsqueeze(0)
        values = torch.unique(y)
        if not bool(torch.all((values == 0) | (values == 1))):
            raise DataError(f"mask values must be binary, found {values[:8].tolist()}")
        return (y.float() * 2.0 - 1.0).unsqueeze(1).expand(-1, 3, -1, -1).contiguous()

    def encode_mask(self, y: torch.Tensor) -> torch.Tensor:
        """Ground-truth mask -> latent, via channel replication and rescale."""
        batched = y.ndim == 3
        z = self.encode(self.mask_to_image(y))
        return z if batched else z.squeeze(0)

    def binarize(self, decoded: torch.Tensor) -> torch.Tensor:
        """Channel-mean of a decoded image, thresholded at the range midpoint."""
        if decoded.ndim == 3:
            decoded = decoded.unsqueeze(0)
            squeeze = True
        else:
            squeeze = False
        logical = decoded.mean(dim=1)
        mask = (logical > self.threshold).float()
        return mask.squeeze(0) if squeeze else mask

    def latent_shape(self, resolution: int) -> tuple:
        if resolution % self.downsample_factor:
            raise ConfigError(
                f"resolution {resolution} not divisible by downsample factor "
                f"{self.downsample_factor}"
            )
        side = resolution // self.downsample_factor
        return (self.latent_channels, side, side)


def clone_encoder(codec: Codec) -> nn.Module:
    """Learnable copy of E: bit-identical parameters, independently owned."""
    clone = copy.deepcopy(codec.encoder)
    for p in clone.parameters():
        p.requires_grad_(True)
    clone.train()
    return clone


def pixel_space_codec(threshold: float = 0.0) -> Codec:
    return Codec(
        encoder=PixelIdentity(),
        decoder=PixelIdentity(),
        kind="pixel_space",
        downsample_factor=1,
        latent_channels=3,
        threshold=threshold,
        psnr_floor=float("inf"),
        mask_dice_floor=1.0,
    )


def psnr(reference: torch.Tensor, reconstruction: torch.Tensor) -> float:
    """Peak signal-to-noise ratio over the [-1, 1] range (peak-to-peak 2)."""
    mse = torch.mean((reference - reconstruction) ** 2).item()
    if mse == 0.0:
        return float("inf")
    return 10.0 * math.log10(4.0 / mse)


def pretrain_toy_codec(
    samples: Sequence[SamplePair],
    seed: int,
    steps: int = 600,
    batch_size: int = 8,
    lr: float = 2e-3,
) -> Codec:
    """Train the toy autoencoder on images and mask-images, then freeze it.

    Half of every batch is a dataset image, half a mask rendered as an image,
    so both things the segmentation model round-trips are in distribution.
    Quality floors (PSNR on images, Dice on mask round trips) are measured on
    the training set and recorded on the codec.
    """
    if not samples:
        raise DataError("cannot pretrain a codec on an empty dataset")
    seed_module_init(seed, "codec.encoder")
    encoder = ToyEncoder()
    seed_module_init(seed, "codec.decoder")
    decoder = ToyDecoder()
    params = list(encoder.parameters()) + list(decoder.parameters())
    opt = torch.optim.Adam(params, lr=lr)
    g = torch_generator(seed, "codec.batches")

    images = torch.stack([s.image for s in samples])
    masks = torch.stack([s.mask for s in samples])
    half = max(1, batch_size // 2)
    for _ in range(steps):
        idx_img = torch.randint(0, len(samples), (half,), generator=g)
        idx_mask = torch.randint(0, len(samples), (half,), generator=g)
        mask_imgs = (masks[idx_mask] * 2.0 - 1.0).unsqueeze(1).expand(-1, 3, -1, -1)
        batch = torch.cat([images[idx_img], mask_imgs])
        recon = decoder(encoder(batch))
        loss = torch.mean((recon - batch) ** 2)
        opt.zero_grad()
        loss.backward()
        opt.step()

    codec = Codec(
        encoder=encoder,
        decoder=decoder,
        kind="toy_ae",
        downsample_factor=TOY_DOWNSAMPLE,
        latent_channels=TOY_LATENT_CHANNELS,
    )
    codec.psnr_floor = _image_psnr_floor(codec, images)
    codec.mask_dice_floor = mask_roundtrip_dice(codec, masks)
    return codec


def _image_psnr_floor(codec: Codec, images: torch.Tensor) -> float:
    worst = float("inf")
    for i in range(0, len(images), 16):
        chunk = images[i : i + 16]
        recon = codec.decode(codec.encode(chunk))
        for x, r in zip(chunk, recon):
            worst = min(worst, psnr(x, r))
    return worst


def mask_roundtrip_dice(codec: Codec, masks: torch.Tensor) -> float:
    """Mean Dice of binarize(D(E(mask))) against the original masks."""
    from .metrics import dice_iou

    scores: List[float] = []
    for i in range(0, len(masks), 16):
        chunk = masks[i : i + 16]
        recon = codec.decode(codec.encode_mask(chunk))
        binary = codec.binarize(recon)
        for pred, gt in zip(binary, chunk):
            scores.append(dice_iou(pred, gt).dice)
    return float(sum(scores) / len(scores))


def save_codec(codec: Codec, path) -> None:
    save_checkpoint(
        path,
        sections={
            "codec.encoder": codec.encoder.state_dict(),
            "codec.decoder": codec.decoder.state_dict(),
        },
        metadata={
            "kind": codec.kind,
            "downsample_factor": codec.downsample_factor,
            "latent_channels": codec.latent_channels,
            "threshold": codec.threshold,
            "psnr_floor": codec.psnr_floor,
            "mask_dice_floor": codec.mask_dice_floor,
            "digest": codec.digest(),
        },
    )


def load_codec(path) -> Codec:
    ckpt: Checkpoint = load_checkpoint(path)
    meta = ckpt.metadata
    if meta.get("kind") == "pixel_space":
        return pixel_space_codec(threshold=meta.get("threshold", 0.0))
    if meta.get("kind") != "toy_ae":
        raise DataError(f"unknown codec kind {meta.get('kind')!r} in {path}")
    encoder = ToyEncoder(meta["latent_channels"])
    decoder = ToyDecoder(meta["latent_channels"])
    encoder.load_state_dict(ckpt.section("codec.encoder"))
    decoder.load_state_dict(ckpt.section("codec.decoder"))
    codec = Codec(
        encoder=encoder,
        decoder=decoder,
        kind=meta["kind"],
        downsample_factor=meta["downsample_factor"],
        latent_channels=meta["latent_channels"],
        threshold=meta["threshold"],
        psnr_floor=meta["psnr_floor"],
        mask_dice_floor=meta["mask_dice_floor"],
    )
    if meta.get("digest") and codec.digest() != meta["digest"]:
        raise StateError(f"codec digest mismatch after loading {path}")
    return codec


def codec_parameter_count(codec: Codec) -> int:
    return parameter_count(codec.encoder) + parameter_count(codec.decoder)

"""Single-step reverse inference from pure noise, alignment-free by design.

An InferenceBundle carries exactly what prediction needs: U-Net, trained
image encoder, frozen codec, schedule, parameterization. Teacher and
projection-head state are structurally excluded; loading a container that
smuggles them in is a contract violation, not a warning. One U-Net call per
image, counted, so "zero inference overhead" is a measurable property
rather than a claim.
"""

from __future__ import annotations

import statistics
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import torch
from torch import nn

from .checkpoint import (
    load_checkpoint,
    parameter_count,
    read_section_names,
    save_checkpoint,
)
from .codec import Codec, PixelIdentity, ToyDecoder, ToyEncoder, pixel_space_codec
from .data import SamplePair
from .denoiser import build_denoiser
from .errors import ConfigError, ContractError, DataError, ShapeError
from .metrics import SegmentationMetrics, dice_iou, mean_metrics
from .schedule import NoiseSchedule, Parameterization, build_schedule, reconstruct
from .seeding import torch_generator

FORBIDDEN_SECTION_MARKERS = ("teacher", "projection", "alignment")


@dataclass
class InferenceBundle:
    unet: nn.Module
    encoder: nn.Module
    codec: Codec
    schedule: NoiseSchedule
    parameterization: Parameterization
    resolution: int
    seed: int
    unet_calls: int = 0

    def __post_init__(self):
        self.parameterization = Parameterization(self.parameterization)
        self.unet.eval()
        self.encoder.eval()
        for p in self.unet.parameters():
            p.requires_grad_(False)
        for p in self.encoder.parameters():
            p.requires_grad_(False)

    def parameter_total(self) -> int:
        """Everything inference can touch: U-Net, image encoder, codec E and D."""
        return (
            parameter_count(self.unet)
            + parameter_count(self.encoder)
            + parameter_count(self.codec.encoder)
            + parameter_count(self.codec.decoder)
        )


def bundle_from_model(model) -> InferenceBundle:
    """Strip a TrainedModel down to its inference components.

    The alignment module is simply not carried over; nothing is copied from
    it, so a bundle is structurally identical whether or not the run used
    distillation.
    """
    return InferenceBundle(
        unet=model.unet,
        encoder=model.encoder,
        codec=model.codec,
        schedule=model.schedule,
        parameterization=model.config.parameterization,
        resolution=model.config.resolution,
        seed=model.config.seed,
    )


def infer(
    x: torch.Tensor,
    bundle: InferenceBundle,
    seed: Optional[int] = None,
    image_id: str = "0",
) -> torch.Tensor:
    """Image -> binary mask with one reverse step at t = T.

    Noise is drawn from a generator derived from (seed, image_id), so a
    dataset sweep is reproducible image by image regardless of order.
    """
    if x.ndim != 3 or x.shape[0] != 3:
        raise ShapeError(f"infer expects a single 3xHxW image, got {tuple(x.shape)}")
    if tuple(x.shape[1:]) != (bundle.resolution, bundle.resolution):
        raise ConfigError(
            f"image is {tuple(x.shape[1:])} but the bundle was trained at "
            f"{bundle.resolution}x{bundle.resolution}"
        )
    latent_shape = bundle.codec.latent_shape(bundle.resolution)
    if seed is None:
        seed = bundle.seed
    g = torch_generator(seed, f"infer:{image_id}")
    t_terminal = bundle.schedule.num_steps
    with torch.no_grad():
        z_x = bundle.encoder(x.unsqueeze(0))
        z_t = torch.randn((1, *latent_shape), generator=g)
        bundle.unet_calls += 1
        pred, _ = bundle.unet(torch.cat([z_x, z_t], dim=1), torch.tensor([t_terminal]))
        z_hat = reconstruct(pred, z_t, t_terminal, bundle.parameterization, bundle.schedule)
        decoded = bundle.codec.decode(z_hat)
        mask = bundle.codec.binarize(decoded)
    return mask.squeeze(0)


def evaluate(
    bundle: InferenceBundle, samples: Sequence[SamplePair], seed: Optional[int] = None
) -> SegmentationMetrics:
    """Dataset-mean Dice/IoU of single-step predictions against ground truth."""
    if not samples:
        raise DataError("cannot evaluate on an empty dataset")
    per_image = []
    for sample in samples:
        mask = infer(sample.image, bundle, seed=seed, image_id=sample.id)
        per_image.append(dice_iou(mask, sample.mask))
    return mean_metrics(per_image)


def stability_eval(
    bundle: InferenceBundle, samples: Sequence[SamplePair], seeds: Sequence[int]
) -> Tuple[float, float, List[float]]:
    """Mean and sample std of dataset-mean Dice across inference seeds."""
    if len(seeds) < 2:
        raise ConfigError(f"stability evaluation needs >= 2 seeds, got {len(seeds)}")
    per_seed = [evaluate(bundle, samples, seed=s).dice for s in seeds]
    return (
        float(statistics.fmean(per_seed)),
        float(statistics.stdev(per_seed)),
        per_seed,
    )


def save_bundle(bundle: InferenceBundle, path) -> None:
    sections = {
        "unet": bundle.unet.state_dict(),
        "image_encoder": bundle.encoder.state_dict(),
        "codec.encoder": bundle.codec.encoder.state_dict(),
        "codec.decoder": bundle.codec.decoder.state_dict(),
    }
    metadata = {
        "parameterization": bundle.parameterization.value,
        "resolution": bundle.resolution,
        "seed": bundle.seed,
        "schedule.kind": bundle.schedule.config.kind.value,
        "schedule.beta_start": bundle.schedule.config.beta_start,
        "schedule.beta_end": bundle.schedule.config.beta_end,
        "schedule.num_steps": bundle.schedule.config.num_steps,
        "codec.kind": bundle.codec.kind,
        "codec.downsample_factor": bundle.codec.downsample_factor,
        "codec.latent_channels": bundle.codec.latent_channels,
        "codec.threshold": bundle.codec.threshold,
        "unet.base_width": bundle.unet.config.base_width,
        "unet.channel_mults": list(bundle.unet.config.channel_mults),
        "unet.time_dim": bundle.unet.config.time_dim,
        "unet.tap_block": bundle.unet.config.tap_block,
    }
    save_checkpoint(path, sections, metadata)


def check_bundle_sections(path) -> List[str]:
    """Structural gate: reject any container carrying training-only state."""
    names = read_section_names(path)
    offending = [
        name
        for name in names
        if any(marker in name.lower() for marker in FORBIDDEN_SECTION_MARKERS)
    ]
    if offending:
        raise ContractError(
            f"bundle at {path} contains training-only sections {offending}; "
            "inference bundles must carry no teacher or projection parameters"
        )
    return names


def load_bundle(path) -> InferenceBundle:
    from .denoiser import DenoiserConfig

    check_bundle_sections(path)
    ckpt = load_checkpoint(path)
    meta = ckpt.metadata
    from .schedule import BetaScheduleConfig

    schedule = build_schedule(
        BetaScheduleConfig(
            kind=meta["schedule.kind"],
            beta_start=meta["schedule.beta_start"],
            beta_end=meta["schedule.beta_end"],
            num_steps=meta["schedule.num_steps"],
        )
    )
    if meta["codec.kind"] == "pixel_space":
        codec = pixel_space_codec(threshold=meta["codec.threshold"])
    else:
        encoder = ToyEncoder(meta["codec.latent_channels"])
        decoder = ToyDecoder(meta["codec.latent_channels"])
        encoder.load_state_dict(ckpt.section("codec.encoder"))
        decoder.load_state_dict(ckpt.section("codec.decoder"))
        codec = Codec(
            encoder=encoder,
            decoder=decoder,
            kind=meta["codec.kind"],
            downsample_factor=meta["codec.downsample_factor"],
            latent_channels=meta["codec.latent_channels"],
            threshold=meta["codec.threshold"],
        )
    d_cfg = DenoiserConfig(
        latent_channels=codec.latent_channels,
        base_width=meta["unet.base_width"],
        channel_mults=tuple(meta["unet.channel_mults"]),
        time_dim=meta["unet.time_dim"],
        tap_block=meta["unet.tap_block"],
    )
    unet = build_denoiser(d_cfg, duplicated=True)
    unet.load_state_dict(ckpt.section("unet"))
    if codec.kind == "pixel_space":
        image_encoder: nn.Module = PixelIdentity()
    else:
        image_encoder = ToyEncoder(codec.latent_channels)
    encoder_state = ckpt.sections.get("image_encoder")
    if encoder_state:
        image_encoder.load_state_dict(encoder_state)
    return InferenceBundle(
        unet=unet,
        encoder=image_encoder,
        codec=codec,
        schedule=schedule,
        parameterization=meta["parameterization"],
        resolution=meta["resolution"],
        seed=meta["seed"],
    )

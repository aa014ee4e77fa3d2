"""Fine-tuning loop: noise the mask latent, predict, optionally align.

One step, per the pipeline:

    z_y   = E(y)               frozen codec, replicated-channel mask
    z_x   = E_theta(x)         learnable encoder clone
    z_t   = alpha_t z_y + sigma_t eps
    pred, m = unet(concat(z_x, z_t), t)
    l_pred   = mean |pred - target(parameterization)|
    l_total  = l_pred + lambda * l_distill(m, teacher(x))

AdamW over {unet, E_theta, projection head} with a warmup-constant learning
rate. All randomness flows through named per-purpose generators, so adding
or removing the alignment branch cannot shift the batch, timestep, or noise
streams: a lambda=0 run is bit-identical to one without alignment built.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import torch
from torch import nn

from .alignment import AlignmentConfig, AlignmentModule, total_loss
from .checkpoint import state_digest
from .codec import Codec, clone_encoder, pixel_space_codec, pretrain_toy_codec
from .config import (
    get_bool,
    get_float,
    get_int,
    get_int_tuple,
    get_str,
    reject_unknown_keys,
)
from .data import SamplePair, dataset_digest
from .denoiser import DenoiserConfig, DenoiserNet, build_denoiser
from .errors import ConfigError, NumericsError, StateError
from .schedule import (
    BetaScheduleConfig,
    NoiseSchedule,
    Parameterization,
    build_schedule,
    forward_noise,
    training_target,
)
from .seeding import apply_determinism, seed_module_init, torch_generator

CODEC_KINDS = ("toy_ae", "pixel_space")

CONFIG_KEYS = (
    "parameterization",
    "codec",
    "batch_size",
    "lr",
    "warmup_steps",
    "max_steps",
    "seed",
    "resolution",
    "schedule.kind",
    "schedule.beta_start",
    "schedule.beta_end",
    "schedule.num_steps",
    "alignment.enabled",
    "alignment.lambda",
    "alignment.teacher",
    "alignment.tap_block",
    "alignment.patch_size",
    "alignment.embed_dim",
    "alignment.hidden_dim",
    "alignment.teacher_command",
    "denoiser.base_width",
    "denoiser.channel_mults",
    "denoiser.time_dim",
)


@dataclass(frozen=True)
class TrainConfig:
    parameterization: Parameterization = Parameterization.X0
    schedule: BetaScheduleConfig = field(default_factory=BetaScheduleConfig)
    alignment: AlignmentConfig = field(default_factory=AlignmentConfig)
    codec: str = "toy_ae"
    batch_size: int = 4
    lr: float = 4e-5
    warmup_steps: int = 100
    max_steps: int = 2000
    seed: int = 0
    resolution: int = 64
    base_width: int = 32
    channel_mults: Tuple[int, ...] = (1, 2, 4)
    time_dim: int = 64

    def __post_init__(self):
        try:
            object.__setattr__(
                self, "parameterization", Parameterization(self.parameterization)
            )
        except ValueError as exc:
            known = ", ".join(p.value for p in Parameterization)
            raise ConfigError(
                f"parameterization must be one of {{{known}}}, "
                f"got {self.parameterization!r}"
            ) from exc
        if self.codec not in CODEC_KINDS:
            raise ConfigError(f"codec must be one of {CODEC_KINDS}, got {self.codec!r}")
        for name in ("batch_size", "warmup_steps", "max_steps", "resolution"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.seed < 0:
            raise ConfigError(f"seed must be nonnegative, got {self.seed}")

    def lr_at(self, step: int) -> float:
        """Warmup-constant schedule; `step` is the 1-based update index."""
        return self.lr * min(1.0, step / self.warmup_steps)

    def denoiser_config(self, latent_channels: int) -> DenoiserConfig:
        return DenoiserConfig(
            latent_channels=latent_channels,
            base_width=self.base_width,
            channel_mults=self.channel_mults,
            time_dim=self.time_dim,
            tap_block=self.alignment.tap_block,
        )

    @classmethod
    def from_mapping(cls, mapping: Dict[str, str]) -> "TrainConfig":
        reject_unknown_keys(mapping, CONFIG_KEYS)
        defaults = cls()
        schedule = BetaScheduleConfig(
            kind=get_str(mapping, "schedule.kind", defaults.schedule.kind.value),
            beta_start=get_float(mapping, "schedule.beta_start", defaults.schedule.beta_start),
            beta_end=get_float(mapping, "schedule.beta_end", defaults.schedule.beta_end),
            num_steps=get_int(mapping, "schedule.num_steps", defaults.schedule.num_steps),
        )
        align_defaults = defaults.alignment
        alignment = AlignmentConfig(
            enabled=get_bool(mapping, "alignment.enabled", align_defaults.enabled),
            lam=get_float(mapping, "alignment.lambda", align_defaults.lam),
            teacher=get_str(mapping, "alignment.teacher", align_defaults.teacher),
            tap_block=get_int(mapping, "alignment.tap_block", align_defaults.tap_block),
            patch_size=get_int(mapping, "alignment.patch_size", align_defaults.patch_size),
            embed_dim=get_int(mapping, "alignment.embed_dim", align_defaults.embed_dim),
            hidden_dim=get_int(mapping, "alignment.hidden_dim", align_defaults.hidden_dim),
            teacher_command=get_str(
                mapping, "alignment.teacher_command", align_defaults.teacher_command
            ),
        )
        return cls(
            parameterization=get_str(
                mapping, "parameterization", defaults.parameterization.value
            ),
            schedule=schedule,
            alignment=alignment,
            codec=get_str(mapping, "codec", defaults.codec),
            batch_size=get_int(mapping, "batch_size", defaults.batch_size),
            lr=get_float(mapping, "lr", defaults.lr),
            warmup_steps=get_int(mapping, "warmup_steps", defaults.warmup_steps),
            max_steps=get_int(mapping, "max_steps", defaults.max_steps),
            seed=get_int(mapping, "seed", defaults.seed),
            resolution=get_int(mapping, "resolution", defaults.resolution),
            base_width=get_int(mapping, "denoiser.base_width", defaults.base_width),
            channel_mults=get_int_tuple(
                mapping, "denoiser.channel_mults", defaults.channel_mults
            ),
            time_dim=get_int(mapping, "denoiser.time_dim", defaults.time_dim),
        )

    def to_mapping(self) -> Dict[str, object]:
        return {
            "parameterization": self.parameterization.value,
            "codec": self.codec,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "warmup_steps": self.warmup_steps,
            "max_steps": self.max_steps,
            "seed": self.seed,
            "resolution": self.resolution,
            "schedule.kind": self.schedule.kind.value,
            "schedule.beta_start": self.schedule.beta_start,
            "schedule.beta_end": self.schedule.beta_end,
            "schedule.num_steps": self.schedule.num_steps,
            "alignment.enabled": self.alignment.enabled,
            "alignment.lambda": self.alignment.lam,
            "alignment.teacher": self.alignment.teacher,
            "alignment.tap_block": self.alignment.tap_block,
            "alignment.patch_size": self.alignment.patch_size,
            "alignment.embed_dim": self.alignment.embed_dim,
            "alignment.hidden_dim": self.alignment.hidden_dim,
            "alignment.teacher_command": self.alignment.teacher_command,
            "denoiser.base_width": self.base_width,
            "denoiser.channel_mults": ",".join(str(m) for m in self.channel_mults),
            "denoiser.time_dim": self.time_dim,
        }


@dataclass
class TrainedModel:
    config: TrainConfig
    codec: Codec
    unet: DenoiserNet
    encoder: nn.Module
    alignment: Optional[AlignmentModule]
    schedule: NoiseSchedule

    def latent_shape(self) -> tuple:
        return self.codec.latent_shape(self.config.resolution)


@dataclass
class LossHistory:
    pred: List[float] = field(default_factory=list)
    distill: List[float] = field(default_factory=list)
    total: List[float] = field(default_factory=list)


@dataclass
class TrainResult:
    model: TrainedModel
    losses: LossHistory
    wall_time: float
    data_digest: str


def prepare_codec(
    config: TrainConfig, train_samples: Sequence[SamplePair], codec_seed: int | None = None
) -> Codec:
    """Build the frozen codec a run (or a whole sweep) will share."""
    if config.codec == "pixel_space":
        return pixel_space_codec()
    seed = config.seed if codec_seed is None else codec_seed
    return pretrain_toy_codec(train_samples, seed=seed)


def build_model(config: TrainConfig, codec: Codec) -> TrainedModel:
    """Fresh seeded components; nothing trained yet except the codec."""
    if config.resolution % codec.downsample_factor:
        raise ConfigError(
            f"resolution {config.resolution} incompatible with codec downsample "
            f"factor {codec.downsample_factor}"
        )
    d_cfg = config.denoiser_config(codec.latent_channels)
    latent_side = config.resolution // codec.downsample_factor
    d_cfg.tap_spatial(latent_side)  # fail fast on indivisible tap geometry

    seed_module_init(config.seed, "unet")
    unet = build_denoiser(d_cfg, duplicated=True)
    encoder = clone_encoder(codec)
    alignment = None
    if config.alignment.enabled:
        alignment = AlignmentModule(
            config.alignment,
            tap_channels=d_cfg.tap_channels(),
            resolution=config.resolution,
            seed=config.seed,
        )
    return TrainedModel(
        config=config,
        codec=codec,
        unet=unet,
        encoder=encoder,
        alignment=alignment,
        schedule=build_schedule(config.schedule),
    )


def trainable_parameters(model: TrainedModel) -> List[torch.Tensor]:
    params = list(model.unet.parameters()) + list(model.encoder.parameters())
    if model.alignment is not None:
        params += list(model.alignment.head.parameters())
    return params


def train_step(
    model: TrainedModel,
    optimizer: torch.optim.Optimizer,
    images: torch.Tensor,
    masks: torch.Tensor,
    t: torch.Tensor,
    eps: torch.Tensor,
) -> Tuple[float, Optional[float], float]:
    """One update on a prepared batch; returns (l_pred, l_distill, l_total).

    The distillation term enters the backward graph only when lambda > 0;
    at lambda = 0 it is still computed (gradient-free) for the logs.
    """
    config = model.config
    z_y = model.codec.encode_mask(masks)
    z_x = model.encoder(images)
    z_t = forward_noise(z_y, eps, t, model.schedule)
    pred, tap = model.unet(torch.cat([z_x, z_t], dim=1), t)
    target = training_target(z_y, eps, t, config.parameterization, model.schedule)
    l_pred = torch.mean(torch.abs(pred - target))

    l_distill_value: Optional[float] = None
    if model.alignment is not None:
        lam = config.alignment.lam
        if lam > 0:
            l_distill = model.alignment.loss(tap, images)
            l_total = total_loss(l_pred, l_distill, lam)
            l_distill_value = float(l_distill.detach())
        else:
            with torch.no_grad():
                l_distill_value = float(model.alignment.loss(tap, images))
            l_total = l_pred
    else:
        l_total = l_pred

    if not torch.isfinite(l_total):
        raise NumericsError(
            "non-finite loss: "
            f"t={t.tolist()}, l_pred={float(l_pred.detach()):.4g}, "
            f"l_distill={l_distill_value}, |z_x|={float(z_x.detach().norm()):.4g}, "
            f"|z_y|={float(z_y.norm()):.4g}, |pred|={float(pred.detach().norm()):.4g}"
        )

    optimizer.zero_grad(set_to_none=True)
    l_total.backward()
    optimizer.step()
    return float(l_pred.detach()), l_distill_value, float(l_total.detach())


def train(
    config: TrainConfig,
    train_samples: Sequence[SamplePair],
    codec: Codec | None = None,
) -> TrainResult:
    """Run the full fine-tuning loop; frozen components are digest-checked."""
    apply_determinism()
    if not train_samples:
        raise ConfigError("training requires a nonempty dataset")
    if tuple(train_samples[0].image.shape[1:]) != (config.resolution, config.resolution):
        raise ConfigError(
            f"dataset resolution {tuple(train_samples[0].image.shape[1:])} does not "
            f"match config resolution {config.resolution}"
        )
    if codec is None:
        codec = prepare_codec(config, train_samples)
    model = build_model(config, codec)

    codec_digest = codec.digest()
    teacher_digest = (
        state_digest(model.alignment.teacher)
        if model.alignment is not None and isinstance(model.alignment.teacher, nn.Module)
        and any(True for _ in model.alignment.teacher.parameters())
        else None
    )

    images = torch.stack([s.image for s in train_samples])
    masks = torch.stack([s.mask for s in train_samples])
    optimizer = torch.optim.AdamW(trainable_parameters(model), lr=config.lr)

    g_batch = torch_generator(config.seed, "train.batch")
    g_t = torch_generator(config.seed, "train.timestep")
    g_eps = torch_generator(config.seed, "train.noise")
    latent_shape = model.latent_shape()
    num_steps = model.schedule.num_steps

    losses = LossHistory()
    start = time.monotonic()
    for step in range(1, config.max_steps + 1):
        lr = config.lr_at(step)
        for group in optimizer.param_groups:
            group["lr"] = lr
        idx = torch.randint(0, len(train_samples), (config.batch_size,), generator=g_batch)
        t = torch.randint(1, num_steps + 1, (config.batch_size,), generator=g_t)
        eps = torch.randn((config.batch_size, *latent_shape), generator=g_eps)
        l_pred, l_distill, l_total = train_step(
            model, optimizer, images[idx], masks[idx], t, eps
        )
        losses.pred.append(l_pred)
        losses.distill.append(l_distill if l_distill is not None else 0.0)
        losses.total.append(l_total)
    wall = time.monotonic() - start

    if codec.digest() != codec_digest:
        raise StateError("frozen codec parameters changed during training")
    if teacher_digest is not None and state_digest(model.alignment.teacher) != teacher_digest:
        raise StateError("frozen teacher parameters changed during training")

    return TrainResult(
        model=model,
        losses=losses,
        wall_time=wall,
        data_digest=dataset_digest(train_samples),
    )

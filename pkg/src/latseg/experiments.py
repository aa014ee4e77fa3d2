"""Experiment harnesses: ablation grid, lambda sweep, schedule sweep, stability.

Each harness trains the cells it needs (sharing one frozen codec across
cells so that cells differ only in what the grid varies), evaluates
single-step inference on the held-out split, and returns an
ExperimentReport whose every number is regenerable from (config, seed,
dataset digest).
"""

from __future__ import annotations

import hashlib
import statistics
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import torch

from .alignment import mean_token_cosine, project_features
from .codec import Codec
from .config import format_config
from .data import SamplePair, dataset_digest
from .errors import ConfigError, StateError
from .inference import bundle_from_model, evaluate, stability_eval
from .schedule import BetaScheduleConfig, Parameterization, ScheduleKind
from .seeding import torch_generator
from .training import TrainConfig, TrainResult, TrainedModel, prepare_codec, train

DEFAULT_LAMBDA_GRID: Tuple[float, ...] = (0.0, 0.15, 0.25, 0.5, 0.75, 1.0, 1.25)

DEFAULT_SCHEDULE_GRID: Tuple[BetaScheduleConfig, ...] = (
    BetaScheduleConfig(ScheduleKind.LINEAR, 0.0001, 0.02, 1000),
    BetaScheduleConfig(ScheduleKind.LINEAR, 0.00085, 0.012, 1000),
    BetaScheduleConfig(ScheduleKind.LINEAR, 0.0015, 0.0155, 1000),
    BetaScheduleConfig(ScheduleKind.SCALED_LINEAR, 0.0001, 0.02, 1000),
    BetaScheduleConfig(ScheduleKind.SCALED_LINEAR, 0.0015, 0.0155, 1000),
)

ABLATION_ORDER: Tuple[Tuple[Parameterization, bool], ...] = (
    (Parameterization.EPSILON, False),
    (Parameterization.EPSILON, True),
    (Parameterization.V, False),
    (Parameterization.V, True),
    (Parameterization.X0, False),
    (Parameterization.X0, True),
)


@dataclass
class ExperimentReport:
    run_id: str
    kind: str
    config: Dict[str, object]
    data_digest: str
    metrics: Dict[str, float] = field(default_factory=dict)
    tables: Dict[str, List[Dict[str, object]]] = field(default_factory=dict)
    losses: Dict[str, List[float]] = field(default_factory=dict)
    wall_time: float = 0.0

    def to_json_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "kind": self.kind,
            "config": self.config,
            "data_digest": self.data_digest,
            "metrics": self.metrics,
            "tables": self.tables,
            "losses": self.losses,
            "wall_time": self.wall_time,
        }

    @classmethod
    def from_json_dict(cls, payload: dict) -> "ExperimentReport":
        return cls(**payload)

    def comparable_dict(self) -> dict:
        """Everything except wall-clock, for bit-reproducibility checks."""
        payload = self.to_json_dict()
        payload.pop("wall_time")
        return payload


def config_run_id(kind: str, config: TrainConfig, data_digest: str) -> str:
    text = format_config(config.to_mapping()) + data_digest
    digest = hashlib.blake2b(text.encode(), digest_size=6).hexdigest()
    return f"{kind}-{digest}"


def _sample_std(values: Sequence[float]) -> float:
    return float(statistics.stdev(values)) if len(values) > 1 else 0.0


def evaluate_token_alignment(
    model: TrainedModel, samples: Sequence[SamplePair], seed: Optional[int] = None
) -> float:
    """Mean token cosine between projected tap features and teacher tokens.

    Measured in the inference configuration (t = T, per-image seeded noise)
    so the number describes the deployed model, not a training batch.
    """
    if model.alignment is None:
        raise StateError("model was trained without an alignment module")
    if seed is None:
        seed = model.config.seed
    t_terminal = model.schedule.num_steps
    latent_shape = model.latent_shape()
    values = []
    with torch.no_grad():
        for sample in samples:
            g = torch_generator(seed, f"aligncos:{sample.id}")
            z_x = model.encoder(sample.image.unsqueeze(0))
            z_t = torch.randn((1, *latent_shape), generator=g)
            _, tap = model.unet(
                torch.cat([z_x, z_t], dim=1), torch.tensor([t_terminal])
            )
            h = model.alignment.teacher_features(sample.image.unsqueeze(0))
            p = project_features(tap, model.alignment.head, expected_tokens=h.shape[1])
            values.append(mean_token_cosine(h, p))
    return float(statistics.fmean(values))


def run_single(
    config: TrainConfig,
    train_samples: Sequence[SamplePair],
    test_samples: Sequence[SamplePair],
    codec: Optional[Codec] = None,
) -> Tuple[ExperimentReport, TrainResult]:
    result = train(config, train_samples, codec=codec)
    bundle = bundle_from_model(result.model)
    test_metrics = evaluate(bundle, test_samples)
    tail = max(1, len(result.losses.total) // 20)
    metrics = {
        "dice": test_metrics.dice,
        "iou": test_metrics.iou,
        "l_pred_final": float(statistics.fmean(result.losses.pred[-tail:])),
        "l_total_final": float(statistics.fmean(result.losses.total[-tail:])),
    }
    if result.model.alignment is not None:
        metrics["token_cosine"] = evaluate_token_alignment(result.model, test_samples)
    report = ExperimentReport(
        run_id=config_run_id("train", config, result.data_digest),
        kind="train",
        config=config.to_mapping(),
        data_digest=result.data_digest,
        metrics=metrics,
        losses={
            "pred": result.losses.pred,
            "distill": result.losses.distill,
            "total": result.losses.total,
        },
        wall_time=result.wall_time,
    )
    return report, result


def _with_alignment(config: TrainConfig, enabled: bool, lam: Optional[float] = None) -> TrainConfig:
    alignment = replace(
        config.alignment,
        enabled=enabled,
        lam=config.alignment.lam if lam is None else lam,
    )
    return replace(config, alignment=alignment)


def run_ablation_grid(
    base_config: TrainConfig,
    train_samples: Sequence[SamplePair],
    test_samples: Sequence[SamplePair],
    codec: Optional[Codec] = None,
) -> ExperimentReport:
    """Six cells: three parameterizations, alignment off/on for each."""
    if codec is None:
        codec = prepare_codec(base_config, train_samples)
    digest = dataset_digest(train_samples)
    rows = []
    total_wall = 0.0
    for parameterization, aligned in ABLATION_ORDER:
        cell = _with_alignment(
            replace(base_config, parameterization=parameterization), aligned
        )
        report, _ = run_single(cell, train_samples, test_samples, codec=codec)
        total_wall += report.wall_time
        rows.append(
            {
                "parameterization": parameterization.value,
                "aligned": aligned,
                "dice": report.metrics["dice"],
                "iou": report.metrics["iou"],
            }
        )
    return ExperimentReport(
        run_id=config_run_id("ablate", base_config, digest),
        kind="ablate",
        config=base_config.to_mapping(),
        data_digest=digest,
        tables={"ablation": rows},
        wall_time=total_wall,
    )


def run_lambda_sweep(
    base_config: TrainConfig,
    train_samples: Sequence[SamplePair],
    test_samples: Sequence[SamplePair],
    lambdas: Sequence[float] = DEFAULT_LAMBDA_GRID,
    seeds: Sequence[int] = (0, 1, 2),
    codec: Optional[Codec] = None,
) -> ExperimentReport:
    """Distillation weight sweep; per-lambda mean and std of Dice over seeds."""
    if not lambdas:
        raise ConfigError("lambda sweep needs a nonempty grid")
    if codec is None:
        codec = prepare_codec(base_config, train_samples)
    digest = dataset_digest(train_samples)
    rows = []
    total_wall = 0.0
    for lam in lambdas:
        per_seed = []
        for seed in seeds:
            cell = _with_alignment(replace(base_config, seed=seed), True, lam=lam)
            report, _ = run_single(cell, train_samples, test_samples, codec=codec)
            total_wall += report.wall_time
            per_seed.append(report.metrics["dice"])
        rows.append(
            {
                "lambda": lam,
                "dice_mean": float(statistics.fmean(per_seed)),
                "dice_std": _sample_std(per_seed),
                "per_seed": per_seed,
            }
        )
    return ExperimentReport(
        run_id=config_run_id("sweep-lambda", base_config, digest),
        kind="sweep-lambda",
        config=base_config.to_mapping(),
        data_digest=digest,
        tables={"lambda_sweep": rows},
        wall_time=total_wall,
    )


def run_schedule_sweep(
    base_config: TrainConfig,
    train_samples: Sequence[SamplePair],
    test_samples: Sequence[SamplePair],
    schedules: Sequence[BetaScheduleConfig] = DEFAULT_SCHEDULE_GRID,
    codec: Optional[Codec] = None,
) -> ExperimentReport:
    if not schedules:
        raise ConfigError("schedule sweep needs a nonempty grid")
    if codec is None:
        codec = prepare_codec(base_config, train_samples)
    digest = dataset_digest(train_samples)
    rows = []
    total_wall = 0.0
    for schedule in schedules:
        cell = replace(base_config, schedule=schedule)
        report, _ = run_single(cell, train_samples, test_samples, codec=codec)
        total_wall += report.wall_time
        rows.append(
            {
                "kind": schedule.kind.value,
                "beta_start": schedule.beta_start,
                "beta_end": schedule.beta_end,
                "dice": report.metrics["dice"],
                "iou": report.metrics["iou"],
            }
        )
    return ExperimentReport(
        run_id=config_run_id("sweep-schedule", base_config, digest),
        kind="sweep-schedule",
        config=base_config.to_mapping(),
        data_digest=digest,
        tables={"schedule_sweep": rows},
        wall_time=total_wall,
    )


def run_stability(
    base_config: TrainConfig,
    train_samples: Sequence[SamplePair],
    test_samples: Sequence[SamplePair],
    seeds: Sequence[int] = tuple(range(10)),
    codec: Optional[Codec] = None,
) -> ExperimentReport:
    """Train once, then measure Dice spread across inference noise seeds."""
    report, result = run_single(base_config, train_samples, test_samples, codec=codec)
    bundle = bundle_from_model(result.model)
    mean, std, per_seed = stability_eval(bundle, test_samples, seeds)
    rows = [{"seed": s, "dice": d} for s, d in zip(seeds, per_seed)]
    return ExperimentReport(
        run_id=config_run_id("stability", base_config, report.data_digest),
        kind="stability",
        config=base_config.to_mapping(),
        data_digest=report.data_digest,
        metrics={"dice_mean": mean, "dice_std": std},
        tables={"stability": rows},
        wall_time=report.wall_time,
    )

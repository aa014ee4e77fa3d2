"""Command-line entry point.

    latseg synth-data --out data/ --count 100
    latseg train --config desk.cfg --out runs/desk
    latseg eval --bundle runs/desk/checkpoints/model.lscp --data data/
    latseg ablate --config toy.cfg --out runs/ablate
    latseg report runs/ablate

Exit codes: 0 success, 2 usage error, 3 config validation error, 1 runtime
failure. Every training command writes a self-contained run directory
(config.resolved, report.json, tables/, plots/, checkpoints/).
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional, Sequence

from . import report as report_mod
from .config import format_config, parse_config_file
from .data import (
    SamplePair,
    load_directory,
    load_image,
    save_directory,
    save_mask_png,
    split_dataset,
    synth_dataset,
)
from .errors import ConfigError, LatsegError
from .experiments import (
    ExperimentReport,
    run_ablation_grid,
    run_lambda_sweep,
    run_schedule_sweep,
    run_single,
    run_stability,
)
from .inference import bundle_from_model, evaluate, infer, load_bundle, save_bundle
from .training import TrainConfig

DEFAULT_DATA_SEED = 1234


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="latseg",
        description="Latent-diffusion segmentation fine-tuning and evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_opts(p):
        p.add_argument("--config", type=Path, help="key = value config file")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument(
            "--dry-run",
            action="store_true",
            help="validate config, print the resolved plan, train nothing",
        )

    def add_data_opts(p):
        p.add_argument("--data", type=Path, help="images/ + masks/ directory")
        p.add_argument(
            "--train-count", type=int, default=200, help="synthetic training samples"
        )
        p.add_argument(
            "--test-count", type=int, default=50, help="synthetic test samples"
        )
        p.add_argument(
            "--data-seed", type=int, default=DEFAULT_DATA_SEED, help="synthesis seed"
        )

    p = sub.add_parser("synth-data", help="write a synthetic PNG dataset")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--seed", type=int, default=DEFAULT_DATA_SEED)

    p = sub.add_parser("train", help="fine-tune one model and save its bundle")
    add_config_opts(p)
    add_data_opts(p)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("infer", help="segment one image with a saved bundle")
    p.add_argument("--bundle", type=Path, required=True)
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="output mask PNG")
    p.add_argument("--seed", type=int, help="inference noise seed")

    p = sub.add_parser("eval", help="mean Dice/IoU of a bundle on a dataset")
    p.add_argument("--bundle", type=Path, required=True)
    add_data_opts(p)
    p.add_argument("--seed", type=int, help="inference noise seed")

    for name, help_text in (
        ("ablate", "parameterization x alignment grid"),
        ("sweep-lambda", "distillation weight sweep"),
        ("sweep-schedule", "noise schedule sweep"),
        ("stability", "inference seed spread for one model"),
    ):
        p = sub.add_parser(name, help=help_text)
        add_config_opts(p)
        add_data_opts(p)
        p.add_argument("--out", type=Path, required=True)
        if name == "sweep-lambda":
            p.add_argument(
                "--seeds", type=int, default=3, help="training seeds per grid point"
            )
        if name == "stability":
            p.add_argument(
                "--seeds", type=int, default=10, help="number of inference seeds"
            )

    p = sub.add_parser("report", help="re-render tables and plots for a run")
    p.add_argument("run_dir", type=Path)

    return parser


def load_config(args) -> TrainConfig:
    if getattr(args, "config", None) is not None:
        config = TrainConfig.from_mapping(parse_config_file(args.config))
    else:
        config = TrainConfig()
    if getattr(args, "seed", None) is not None:
        config = replace(config, seed=args.seed)
    return config


def load_datasets(args, config: TrainConfig):
    if args.data is not None:
        samples = load_directory(args.data, config.resolution)
        split = split_dataset(samples, train_frac=0.8, val_frac=0.0)
        return split.train, split.test
    total = args.train_count + args.test_count
    samples = synth_dataset(total, seed=args.data_seed, resolution=config.resolution)
    return samples[: args.train_count], samples[args.train_count :]


def describe_plan(command: str, config: TrainConfig, args) -> str:
    lines = [f"command: {command}", "resolved config:"]
    lines += [
        "  " + line for line in format_config(config.to_mapping()).rstrip().splitlines()
    ]
    if args.data is not None:
        lines.append(f"data: directory {args.data}")
    else:
        lines.append(
            f"data: synthetic {args.train_count} train / {args.test_count} test "
            f"(seed {args.data_seed})"
        )
    return "\n".join(lines)


def _finish_run(rep: ExperimentReport, out_dir: Path) -> None:
    report_mod.write_run_dir(rep, out_dir)
    for name, rows in rep.tables.items():
        print(f"table {name}:")
        print(report_mod.format_table_text(rows), end="")
    for key in sorted(rep.metrics):
        print(f"{key}: {rep.metrics[key]:.4f}")
    print(f"run directory: {out_dir}")


def cmd_synth_data(args) -> int:
    samples = synth_dataset(args.count, seed=args.seed, resolution=args.resolution)
    save_directory(samples, args.out)
    print(f"wrote {len(samples)} samples under {args.out}")
    return 0


def cmd_train(args) -> int:
    config = load_config(args)
    if args.dry_run:
        print(describe_plan("train", config, args))
        return 0
    train_s, test_s = load_datasets(args, config)
    rep, result = run_single(config, train_s, test_s)
    out_dir = Path(args.out)
    report_mod.write_run_dir(rep, out_dir)
    bundle = bundle_from_model(result.model)
    save_bundle(bundle, out_dir / "checkpoints" / "model.lscp")
    for key in sorted(rep.metrics):
        print(f"{key}: {rep.metrics[key]:.4f}")
    print(f"run directory: {out_dir}")
    return 0


def cmd_infer(args) -> int:
    bundle = load_bundle(args.bundle)
    image = load_image(args.image, bundle.resolution)
    mask = infer(image, bundle, seed=args.seed, image_id=args.image.stem)
    save_mask_png(mask, args.out)
    print(f"wrote {args.out} (foreground fraction {float(mask.mean()):.3f})")
    return 0


def cmd_eval(args) -> int:
    bundle = load_bundle(args.bundle)
    if args.data is not None:
        samples = load_directory(args.data, bundle.resolution)
    else:
        samples = synth_dataset(
            args.test_count, seed=args.data_seed, resolution=bundle.resolution
        )
    metrics = evaluate(bundle, samples, seed=args.seed)
    print(f"dice: {metrics.dice:.4f}")
    print(f"iou: {metrics.iou:.4f}")
    return 0


def cmd_harness(args) -> int:
    config = load_config(args)
    if args.dry_run:
        print(describe_plan(args.command, config, args))
        return 0
    train_s, test_s = load_datasets(args, config)
    if args.command == "ablate":
        rep = run_ablation_grid(config, train_s, test_s)
    elif args.command == "sweep-lambda":
        rep = run_lambda_sweep(config, train_s, test_s, seeds=range(args.seeds))
    elif args.command == "sweep-schedule":
        rep = run_schedule_sweep(config, train_s, test_s)
    else:
        rep = run_stability(config, train_s, test_s, seeds=range(args.seeds))
    _finish_run(rep, Path(args.out))
    return 0


def cmd_report(args) -> int:
    report_mod.render_run_dir(args.run_dir)
    rep = report_mod.load_report(args.run_dir)
    for name, rows in rep.tables.items():
        print(f"table {name}:")
        print(report_mod.format_table_text(rows), end="")
    print(f"re-rendered {args.run_dir}")
    return 0


def dispatch(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "synth-data": cmd_synth_data,
        "train": cmd_train,
        "infer": cmd_infer,
        "eval": cmd_eval,
        "ablate": cmd_harness,
        "sweep-lambda": cmd_harness,
        "sweep-schedule": cmd_harness,
        "stability": cmd_harness,
        "report": cmd_report,
    }
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 3
    except LatsegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()

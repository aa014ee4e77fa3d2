"""Feature-distillation effect at desk scale.

Trains aligned models at lambda = 0 and lambda = 0.5 (otherwise identical),
reports test Dice plus the mean token cosine between the projected U-Net tap
features and the frozen teacher tokens, measured in the inference
configuration. Add more grid points with --lambdas.

    python3 scripts/alignment_study.py --lambdas 0 0.5 --out runs/alignment
"""

import argparse
from dataclasses import replace
from pathlib import Path

from latseg.data import dataset_digest, split_dataset, synth_dataset
from latseg.experiments import (
    ExperimentReport,
    config_run_id,
    evaluate_token_alignment,
)
from latseg.inference import bundle_from_model, evaluate
from latseg.report import format_table_text, write_run_dir
from latseg.training import TrainConfig, prepare_codec, train


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--lambdas", type=float, nargs="+", default=[0.0, 0.5])
    parser.add_argument("--out", type=Path, default=Path("runs/alignment"))
    parser.add_argument("--data-seed", type=int, default=1234)
    args = parser.parse_args()

    base = TrainConfig()
    samples = synth_dataset(250, seed=args.data_seed, resolution=base.resolution)
    split = split_dataset(samples, train_frac=0.8, val_frac=0.0)
    codec = prepare_codec(base, split.train, codec_seed=0)

    rows = []
    for lam in args.lambdas:
        cfg = replace(
            base, alignment=replace(base.alignment, enabled=True, lam=lam)
        )
        result = train(cfg, split.train, codec=codec)
        dice = evaluate(bundle_from_model(result.model), split.test).dice
        cosine = evaluate_token_alignment(result.model, split.test)
        rows.append({"lambda": lam, "dice": dice, "token_cosine": cosine})
        print(f"  lambda {lam}: dice {dice:.4f}, token cosine {cosine:.4f}")

    digest = dataset_digest(split.train)
    report = ExperimentReport(
        run_id=config_run_id("alignment-study", base, digest),
        kind="alignment-study",
        config=base.to_mapping(),
        data_digest=digest,
        tables={"alignment_effect": rows},
    )
    write_run_dir(report, args.out)
    print()
    print(format_table_text(rows), end="")
    print(f"run directory: {args.out}")


if __name__ == "__main__":
    main()

import pytest

from latseg.alignment import AlignmentConfig
from latseg.data import synth_dataset
from latseg.errors import ConfigError, StateError
from latseg.experiments import (
    ABLATION_ORDER,
    DEFAULT_LAMBDA_GRID,
    DEFAULT_SCHEDULE_GRID,
    config_run_id,
    evaluate_token_alignment,
    run_ablation_grid,
    run_lambda_sweep,
    run_schedule_sweep,
    run_single,
    run_stability,
)
from latseg.schedule import BetaScheduleConfig, ScheduleKind
from latseg.training import TrainConfig, train


def tiny_config(**overrides) -> TrainConfig:
    base = dict(
        codec="pixel_space",
        resolution=16,
        batch_size=2,
        lr=2e-3,
        warmup_steps=2,
        max_steps=3,
        seed=0,
        base_width=8,
        channel_mults=(1, 2),
        time_dim=16,
        schedule=BetaScheduleConfig(num_steps=50),
        alignment=AlignmentConfig(
            enabled=False, patch_size=2, embed_dim=16, hidden_dim=32
        ),
    )
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def data16():
    samples = synth_dataset(10, seed=55, resolution=16)
    return samples[:7], samples[7:]


class TestGrids:
    def test_lambda_grid_values(self):
        assert DEFAULT_LAMBDA_GRID == (0.0, 0.15, 0.25, 0.5, 0.75, 1.0, 1.25)

    def test_schedule_grid_rows(self):
        assert len(DEFAULT_SCHEDULE_GRID) == 5
        spans = [
            (cfg.kind, cfg.beta_start, cfg.beta_end) for cfg in DEFAULT_SCHEDULE_GRID
        ]
        assert spans == [
            (ScheduleKind.LINEAR, 0.0001, 0.02),
            (ScheduleKind.LINEAR, 0.00085, 0.012),
            (ScheduleKind.LINEAR, 0.0015, 0.0155),
            (ScheduleKind.SCALED_LINEAR, 0.0001, 0.02),
            (ScheduleKind.SCALED_LINEAR, 0.0015, 0.0155),
        ]
        assert all(cfg.num_steps == 1000 for cfg in DEFAULT_SCHEDULE_GRID)

    def test_ablation_order_covers_six_cells(self):
        assert len(ABLATION_ORDER) == 6
        assert [aligned for _, aligned in ABLATION_ORDER] == [
            False,
            True,
        ] * 3


class TestRunSingle:
    def test_metrics_and_losses(self, data16):
        train_s, test_s = data16
        report, result = run_single(tiny_config(), train_s, test_s)
        assert set(report.metrics) == {"dice", "iou", "l_pred_final", "l_total_final"}
        assert len(report.losses["pred"]) == 3
        assert report.data_digest == result.data_digest
        assert report.run_id.startswith("train-")

    def test_aligned_run_reports_token_cosine(self, data16):
        train_s, test_s = data16
        cfg = tiny_config(
            alignment=AlignmentConfig(
                enabled=True, lam=0.5, patch_size=2, embed_dim=16, hidden_dim=32
            )
        )
        report, result = run_single(cfg, train_s, test_s)
        assert -1.0 <= report.metrics["token_cosine"] <= 1.0

    def test_token_alignment_requires_module(self, data16):
        train_s, test_s = data16
        result = train(tiny_config(), train_s)
        with pytest.raises(StateError):
            evaluate_token_alignment(result.model, test_s)

    def test_run_id_depends_on_config(self, data16):
        train_s, _ = data16
        a = config_run_id("train", tiny_config(), "d0")
        b = config_run_id("train", tiny_config(seed=1), "d0")
        c = config_run_id("train", tiny_config(), "d1")
        assert a != b and a != c
        assert a == config_run_id("train", tiny_config(), "d0")


class TestHarnesses:
    def test_ablation_table_layout(self, data16):
        train_s, test_s = data16
        report = run_ablation_grid(tiny_config(max_steps=2), train_s, test_s)
        rows = report.tables["ablation"]
        assert [(r["parameterization"], r["aligned"]) for r in rows] == [
            ("epsilon", False),
            ("epsilon", True),
            ("v", False),
            ("v", True),
            ("x0", False),
            ("x0", True),
        ]
        assert all(0.0 <= r["dice"] <= 1.0 for r in rows)

    def test_lambda_sweep_single_seed_has_zero_std(self, data16):
        train_s, test_s = data16
        report = run_lambda_sweep(
            tiny_config(max_steps=2), train_s, test_s, lambdas=(0.0, 0.5), seeds=(0,)
        )
        rows = report.tables["lambda_sweep"]
        assert [r["lambda"] for r in rows] == [0.0, 0.5]
        assert all(r["dice_std"] == 0.0 for r in rows)
        assert all(len(r["per_seed"]) == 1 for r in rows)

    def test_lambda_sweep_multi_seed_std(self, data16):
        train_s, test_s = data16
        report = run_lambda_sweep(
            tiny_config(max_steps=2), train_s, test_s, lambdas=(0.25,), seeds=(0, 1)
        )
        row = report.tables["lambda_sweep"][0]
        assert len(row["per_seed"]) == 2
        assert row["dice_std"] >= 0.0

    def test_empty_grids_rejected(self, data16):
        train_s, test_s = data16
        with pytest.raises(ConfigError):
            run_lambda_sweep(tiny_config(), train_s, test_s, lambdas=())
        with pytest.raises(ConfigError):
            run_schedule_sweep(tiny_config(), train_s, test_s, schedules=())

    def test_schedule_sweep_rows(self, data16):
        train_s, test_s = data16
        grid = (
            BetaScheduleConfig(ScheduleKind.LINEAR, 1e-4, 0.02, 50),
            BetaScheduleConfig(ScheduleKind.SCALED_LINEAR, 1e-4, 0.02, 50),
        )
        report = run_schedule_sweep(
            tiny_config(max_steps=2), train_s, test_s, schedules=grid
        )
        rows = report.tables["schedule_sweep"]
        assert [r["kind"] for r in rows] == ["linear", "scaled_linear"]
        assert rows[0]["beta_end"] == 0.02

    def test_stability_rows_and_summary(self, data16):
        train_s, test_s = data16
        report = run_stability(
            tiny_config(max_steps=2), train_s, test_s, seeds=(0, 1, 2)
        )
        rows = report.tables["stability"]
        assert [r["seed"] for r in rows] == [0, 1, 2]
        assert set(report.metrics) == {"dice_mean", "dice_std"}

    def test_harness_reports_are_reproducible(self, data16):
        train_s, test_s = data16
        cfg = tiny_config(max_steps=2)
        a = run_ablation_grid(cfg, train_s, test_s)
        b = run_ablation_grid(cfg, train_s, test_s)
        assert a.comparable_dict() == b.comparable_dict()
        assert a.wall_time > 0.0

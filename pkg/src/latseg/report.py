"""Render ExperimentReports to run directories: CSV tables, plots, Markdown.

Rendering never recomputes anything. A run directory's report.json is the
complete record; `render_run_dir` can rebuild every table and plot from it,
so tables stay regenerable without retraining.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from .config import format_config
from .errors import DataError
from .experiments import ExperimentReport


def _cell(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return f"{value:.6g}"
    if isinstance(value, (list, tuple)):
        return ";".join(_cell(v) for v in value)
    return str(value)


def write_table_csv(path: Path, rows: Sequence[Dict[str, object]]) -> None:
    if not rows:
        raise DataError(f"refusing to write empty table {path.name}")
    fieldnames = list(rows[0])
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _cell(v) for k, v in row.items()})


def format_table_text(rows: Sequence[Dict[str, object]]) -> str:
    """Space-aligned text table for terminal output and Markdown."""
    if not rows:
        return "(empty table)\n"
    fieldnames = list(rows[0])
    cells = [[_cell(row.get(name, "")) for name in fieldnames] for row in rows]
    widths = [
        max(len(name), *(len(line[i]) for line in cells))
        for i, name in enumerate(fieldnames)
    ]
    out = []
    out.append("  ".join(name.ljust(w) for name, w in zip(fieldnames, widths)))
    out.append("  ".join("-" * w for w in widths))
    for line in cells:
        out.append("  ".join(v.ljust(w) for v, w in zip(line, widths)))
    return "\n".join(out) + "\n"


def format_mean_std(mean: float, std: float) -> str:
    return f"{mean:.4f} +/- {std:.4f}"


def render_markdown(report: ExperimentReport) -> str:
    lines = [
        f"# Run {report.run_id}",
        "",
        f"- kind: {report.kind}",
        f"- dataset digest: {report.data_digest}",
        f"- wall time: {report.wall_time:.1f} s",
        "",
    ]
    if report.metrics:
        lines.append("## Metrics")
        lines.append("")
        for key in sorted(report.metrics):
            lines.append(f"- {key}: {_cell(report.metrics[key])}")
        lines.append("")
    for name, rows in report.tables.items():
        lines.append(f"## Table: {name}")
        lines.append("")
        lines.append("```")
        lines.append(format_table_text(rows).rstrip())
        lines.append("```")
        lines.append("")
    lines.append("## Config")
    lines.append("")
    lines.append("```")
    lines.append(format_config(report.config).rstrip())
    lines.append("```")
    return "\n".join(lines) + "\n"


def _plot_losses(losses: Dict[str, List[float]], path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    steps = range(1, len(losses["pred"]) + 1)
    ax.plot(steps, losses["pred"], label="prediction", linewidth=0.9)
    if any(v != 0.0 for v in losses.get("distill", [])):
        ax.plot(steps, losses["distill"], label="distillation", linewidth=0.9)
        ax.plot(steps, losses["total"], label="total", linewidth=0.9)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def _table_plot_columns(rows: Sequence[Dict[str, object]]) -> Optional[tuple]:
    """Pick (x label column, y column, yerr column) for a quick bar chart."""
    first = rows[0]
    y = next((k for k in ("dice_mean", "dice") if k in first), None)
    if y is None:
        return None
    yerr = "dice_std" if "dice_std" in first else None
    x = next(
        (k for k in ("lambda", "seed", "kind", "parameterization") if k in first), None
    )
    return x, y, yerr


def _plot_table(name: str, rows: Sequence[Dict[str, object]], path: Path) -> bool:
    columns = _table_plot_columns(rows)
    if columns is None:
        return False
    x_col, y_col, yerr_col = columns

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    def label(i, row):
        if x_col is None:
            return str(i)
        extra = ""
        if x_col == "parameterization" and "aligned" in row:
            extra = "+align" if row["aligned"] else ""
        if x_col == "kind" and "beta_start" in row:
            extra = f"\n{row['beta_start']:g}-{row['beta_end']:g}"
        return f"{row[x_col]}{extra}"

    labels = [label(i, row) for i, row in enumerate(rows)]
    values = [float(row[y_col]) for row in rows]
    errors = [float(row[yerr_col]) for row in rows] if yerr_col else None
    fig, ax = plt.subplots(figsize=(max(4, 1.1 * len(rows)), 4))
    ax.bar(range(len(rows)), values, yerr=errors, capsize=3)
    ax.set_xticks(range(len(rows)), labels, fontsize=8)
    ax.set_ylabel(y_col)
    ax.set_title(name)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return True


def write_run_dir(report: ExperimentReport, out_dir) -> Path:
    """Persist a report and render it; returns the run directory path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "checkpoints").mkdir(exist_ok=True)
    (out_dir / "config.resolved").write_text(format_config(report.config))
    with open(out_dir / "report.json", "w") as fh:
        json.dump(report.to_json_dict(), fh, indent=2, sort_keys=True)
    render_run_dir(out_dir)
    return out_dir


def load_report(run_dir) -> ExperimentReport:
    path = Path(run_dir) / "report.json"
    try:
        with open(path) as fh:
            payload = json.load(fh)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{path} is not valid report JSON: {exc}") from exc
    return ExperimentReport.from_json_dict(payload)


def render_run_dir(run_dir) -> Path:
    """(Re)build tables/, plots/, and report.md from report.json alone."""
    run_dir = Path(run_dir)
    report = load_report(run_dir)
    tables_dir = run_dir / "tables"
    plots_dir = run_dir / "plots"
    tables_dir.mkdir(exist_ok=True)
    plots_dir.mkdir(exist_ok=True)
    for name, rows in report.tables.items():
        write_table_csv(tables_dir / f"{name}.csv", rows)
        _plot_table(name, rows, plots_dir / f"{name}.png")
    if report.losses.get("pred"):
        _plot_losses(report.losses, plots_dir / "loss.png")
    (run_dir / "report.md").write_text(render_markdown(report))
    return run_dir

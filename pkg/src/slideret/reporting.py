"""Report emission: delimited per-stage metrics plus rendered figures."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .metrics import ConsistencyTable, StageReport

METRIC_COLUMNS = ("mAP", "r_at_3", "p_at_5", "site_map", "site_r_at_3", "site_p_at_5", "src", "krc")


def write_trajectory_csv(reports: list[StageReport], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("stage",) + METRIC_COLUMNS)
        for report in reports:
            row = report.to_dict()
            writer.writerow([row["stage"]] + [row[c] if row[c] is not None else "" for c in METRIC_COLUMNS])


def plot_trajectories(reports: list[StageReport], path: Path) -> None:
    stages = [r.stage for r in reports]
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for column in ("mAP", "r_at_3", "p_at_5", "site_map"):
        ax.plot(stages, [r.to_dict()[column] for r in reports], marker="o", label=column)
    ax.set_xlabel("training stage")
    ax.set_ylabel("metric value")
    ax.set_ylim(0.0, 1.05)
    ax.set_xticks(stages)
    ax.legend(loc="lower left", fontsize=9)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)


def plot_consistency_heatmap(table: ConsistencyTable, path: Path) -> None:
    import numpy as np

    n = table.num_tasks
    grid = np.full((n, n), np.nan)
    for (i, j), value in table.rho.items():
        grid[i - 1, j - 1] = value
    fig, ax = plt.subplots(figsize=(5, 4))
    im = ax.imshow(grid, vmin=-1, vmax=1, cmap="RdYlGn")
    ax.set_xticks(range(n), [f"stage {j+1}" for j in range(n)])
    ax.set_yticks(range(n), [f"task {i+1}" for i in range(n)])
    for (i, j), value in table.rho.items():
        ax.text(j - 1, i - 1, f"{value:.2f}", ha="center", va="center", fontsize=9)
    ax.set_title("per-task-pair Spearman rho")
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)


def write_comparison(rows: list[dict], csv_path: Path, txt_path: Path) -> None:
    """Side-by-side final-stage metrics, one row per run."""
    header = ("run",) + METRIC_COLUMNS
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([row["run"]] + [row.get(c, "") if row.get(c) is not None else "" for c in METRIC_COLUMNS])

    widths = [max(len(h), 12) for h in header]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    for row in rows:
        cells = [str(row["run"])]
        for column in METRIC_COLUMNS:
            value = row.get(column)
            cells.append("-" if value is None or value == "" else f"{float(value):.4f}")
        lines.append("  ".join(c.ljust(w) for c, w in zip(cells, widths)))
    txt_path.write_text("\n".join(lines) + "\n")


def plot_comparison(rows: list[dict], path: Path) -> None:
    import numpy as np

    bar_metrics = ("mAP", "r_at_3", "p_at_5", "src")
    fig, ax = plt.subplots(figsize=(8, 4.5))
    x = np.arange(len(bar_metrics))
    width = 0.8 / max(1, len(rows))
    for i, row in enumerate(rows):
        values = [row.get(m) if row.get(m) not in (None, "") else 0.0 for m in bar_metrics]
        ax.bar(x + i * width, [float(v) for v in values], width, label=str(row["run"]))
    ax.set_xticks(x + width * (len(rows) - 1) / 2, bar_metrics)
    ax.set_ylim(0, 1.05)
    ax.legend(fontsize=9)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)

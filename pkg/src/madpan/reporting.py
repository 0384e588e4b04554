"""CSV tables and matplotlib figures for sweep and benchmark reports."""
from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def write_table(rows: list[dict], path: str | Path) -> None:
    if not rows:
        raise ValueError("no rows to write")
    fields = list(rows[0].keys())
    for row in rows[1:]:
        for k in row:
            if k not in fields:
                fields.append(k)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)


def plot_sweep(
    xs, series: dict[str, list[float]], x_label: str, path: str | Path,
    title: str = "",
) -> None:
    """Line plot of one or more scores against a sweep variable."""
    fig, ax = plt.subplots(figsize=(6, 4))
    numeric = all(isinstance(x, (int, float)) for x in xs)
    positions = xs if numeric else range(len(xs))
    for name, values in series.items():
        ax.plot(positions, values, marker="o", label=name)
    if not numeric:
        ax.set_xticks(list(positions))
        ax.set_xticklabels([str(x) for x in xs])
    ax.set_xlabel(x_label)
    ax.set_ylabel("score")
    if title:
        ax.set_title(title)
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_runtime(rows: list[dict], path: str | Path) -> None:
    """Log-log per-step time against width, one line per mode."""
    fig, ax = plt.subplots(figsize=(6, 4))
    modes = sorted({r["mode"] for r in rows})
    for mode in modes:
        pts = sorted(
            ((r["width"], r["seconds"]) for r in rows if r["mode"] == mode)
        )
        ax.loglog([p[0] for p in pts], [p[1] for p in pts], marker="o", label=mode)
    ax.set_xlabel("latent width")
    ax.set_ylabel("seconds per step")
    ax.legend()
    ax.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)

"""Figure rendering for the report path.

Uses the Agg backend so reports work headless. PNG metadata is pinned
to a constant so repeated runs rewrite identical files where the
toolkit allows it.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .metrics import ParityRow, RateStat

_PNG_METADATA = {"Software": "aeropipe"}


def availability_figure(stats: list[RateStat], path: Path) -> None:
    """Monthly availability trend, one line per network."""
    months = sorted({s.month for s in stats})
    networks = sorted(
        {s.scope.removeprefix("network:") for s in stats if s.scope.startswith("network:")}
    )
    by_key = {(s.scope, s.month): s.rate for s in stats}
    fig, ax = plt.subplots(figsize=(7, 4))
    for net in networks:
        ys = [by_key.get((f"network:{net}", m)) for m in months]
        ax.plot(months, [y if y is not None else float("nan") for y in ys], marker="o", label=net)
    ax.set_ylabel("availability (%)")
    ax.set_xlabel("month")
    ax.set_ylim(0, 100)
    ax.grid(True, alpha=0.3)
    if networks:
        ax.legend()
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata=_PNG_METADATA)
    plt.close(fig)


def parity_figure(rows: list[ParityRow], path: Path) -> None:
    """Raw next to calibrated hourly record counts, grouped by month."""
    ordered = sorted(rows, key=lambda r: r.month)
    months = [r.month for r in ordered]
    x = range(len(months))
    width = 0.38
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.bar([i - width / 2 for i in x], [r.raw_points for r in ordered], width, label="raw")
    ax.bar(
        [i + width / 2 for i in x],
        [r.calibrated_points for r in ordered],
        width,
        label="calibrated",
    )
    ax.set_xticks(list(x))
    ax.set_xticklabels(months)
    ax.set_ylabel("hourly records")
    ax.set_xlabel("month")
    ax.grid(True, axis="y", alpha=0.3)
    ax.legend()
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata=_PNG_METADATA)
    plt.close(fig)

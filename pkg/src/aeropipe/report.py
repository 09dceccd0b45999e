"""Report rendering: delimited files for machines, aligned tables for eyes.

All output ordering is explicit (month, then scope kind, then scope
name) so a repeated run produces byte-identical files.
"""

from __future__ import annotations

import csv
from pathlib import Path

from .metrics import CalibrationStat, Counters, ParityRow, RateStat


def _scope_kind(scope: str) -> int:
    if scope == "all":
        return 0
    if scope.startswith("network:"):
        return 1
    return 2


def _ordered(stats: list[RateStat]) -> list[RateStat]:
    return sorted(stats, key=lambda s: (s.month, _scope_kind(s.scope), s.scope))


def write_rate_csv(
    stats: list[RateStat],
    path: Path,
    *,
    numerator_label: str,
    denominator_label: str,
    rate_label: str,
) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["month", "scope", numerator_label, denominator_label, rate_label])
        for s in _ordered(stats):
            writer.writerow([s.month, s.scope, s.numerator, s.denominator, s.formatted()])


def write_availability_csv(stats: list[RateStat], path: Path) -> None:
    write_rate_csv(
        stats,
        path,
        numerator_label="hours_with_data",
        denominator_label="total_hours",
        rate_label="availability_pct",
    )


def write_calibration_csv(stats: list[CalibrationStat], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            [
                "month",
                "scope",
                "hours_with_calibrated",
                "hours_with_raw",
                "calibration_pct",
                "raw_points",
                "calibrated_points",
            ]
        )
        for s in _ordered(stats):
            writer.writerow(
                [
                    s.month,
                    s.scope,
                    s.numerator,
                    s.denominator,
                    s.formatted(),
                    s.raw_points,
                    s.calibrated_points,
                ]
            )


def write_parity_csv(rows: list[ParityRow], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["month", "raw_points", "calibrated_points"])
        for r in sorted(rows, key=lambda r: r.month):
            writer.writerow([r.month, r.raw_points, r.calibrated_points])


def write_counters_csv(counters: Counters, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["stage", "month", "records"])
        for stage in counters.stages():
            for month, n in counters.by_month(stage).items():
                writer.writerow([stage, month, n])


def render_table(headers: list[str], rows: list[list[str]]) -> str:
    """Monospace table with right-padded columns; no wrapping."""
    widths = [len(h) for h in headers]
    for row in rows:
        for i, cell in enumerate(row):
            widths[i] = max(widths[i], len(cell))
    lines = [
        "  ".join(h.ljust(widths[i]) for i, h in enumerate(headers)).rstrip(),
        "  ".join("-" * widths[i] for i in range(len(headers))),
    ]
    for row in rows:
        lines.append("  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip())
    return "\n".join(lines)


def rate_table(
    stats: list[RateStat],
    rate_label: str,
    *,
    numerator_label: str = "numerator",
    denominator_label: str = "denominator",
    include_devices: bool = False,
) -> str:
    rows = []
    for s in _ordered(stats):
        if not include_devices and _scope_kind(s.scope) == 2:
            continue
        rows.append([s.month, s.scope, str(s.numerator), str(s.denominator), s.formatted()])
    return render_table(["month", "scope", numerator_label, denominator_label, rate_label], rows)


def parity_table(rows: list[ParityRow]) -> str:
    body = [[r.month, str(r.raw_points), str(r.calibrated_points)] for r in sorted(rows, key=lambda r: r.month)]
    return render_table(["month", "raw_points", "calibrated_points"], body)


def counters_table(counters: Counters) -> str:
    body = []
    for stage in counters.stages():
        for month, n in counters.by_month(stage).items():
            body.append([stage, month, str(n)])
    return render_table(["stage", "month", "records"], body)

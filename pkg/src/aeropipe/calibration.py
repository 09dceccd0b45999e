"""Reference-grade correction of low-cost PM2.5 readings.

A linear model is fitted offline against collocated reference data
(ordinary least squares on raw pm2_5, temperature, humidity plus an
intercept) and applied per hourly record. Records that cannot be
calibrated pass through flagged, never dropped, so downstream row
counts stay comparable across the calibration boundary.

The solver is written out longhand (normal equations, Gaussian
elimination with partial pivoting) because the fit is a core behaviour
under test here; tests cross-check it against an independent solver.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

from .model import AeropipeError, CalibrationFlag, ConsolidatedRecord, ForecastRow, HourKey
from .sources import CollocationRow

MIN_FIT_ROWS = 10
# Pivot-ratio threshold beyond which the normal-equation system is
# treated as numerically degenerate (collinear predictors).
CONDITION_LIMIT = 1e12

FORECAST_SEASON_HOURS = 24
FORECAST_MIN_HISTORY = 48
FORECAST_HORIZONS = range(1, 25)


class CalibrationError(AeropipeError):
    """Fit rejected: too few rows or a degenerate design matrix."""


@dataclass(frozen=True)
class CalibrationModel:
    """Affine correction: pm = b0 + b1*raw + b2*temp + b3*humidity."""

    network: str
    intercept: float
    coef_raw: float
    coef_temperature: float
    coef_humidity: float
    training_rows: int
    rmse: float

    def predict(self, raw_pm2_5: float, temperature: float, humidity: float) -> float:
        value = (
            self.intercept
            + self.coef_raw * raw_pm2_5
            + self.coef_temperature * temperature
            + self.coef_humidity * humidity
        )
        return max(0.0, value)

    def save(self, path: Path) -> None:
        lines = [
            f"network\t{self.network}",
            f"intercept\t{self.intercept!r}",
            f"coef_raw\t{self.coef_raw!r}",
            f"coef_temperature\t{self.coef_temperature!r}",
            f"coef_humidity\t{self.coef_humidity!r}",
            f"training_rows\t{self.training_rows}",
            f"rmse\t{self.rmse!r}",
        ]
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: Path) -> "CalibrationModel":
        fields: dict[str, str] = {}
        for line in path.read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            key, _, value = line.partition("\t")
            fields[key] = value
        try:
            return cls(
                network=fields["network"],
                intercept=float(fields["intercept"]),
                coef_raw=float(fields["coef_raw"]),
                coef_temperature=float(fields["coef_temperature"]),
                coef_humidity=float(fields["coef_humidity"]),
                training_rows=int(fields["training_rows"]),
                rmse=float(fields["rmse"]),
            )
        except (KeyError, ValueError) as exc:
            raise CalibrationError(f"corrupt model file {path}: {exc}") from exc


def _solve(matrix: list[list[float]], rhs: list[float]) -> list[float]:
    """Gaussian elimination with partial pivoting on an n x n system.

    Raises CalibrationError when the pivot ratio (largest initial pivot
    candidate over smallest used pivot) exceeds CONDITION_LIMIT.
    """
    n = len(matrix)
    a = [row[:] + [rhs[i]] for i, row in enumerate(matrix)]
    max_initial = max(max(abs(v) for v in row) for row in matrix)
    if max_initial == 0.0:
        raise CalibrationError("degenerate fit: zero design matrix")
    min_pivot = math.inf
    for col in range(n):
        pivot_row = max(range(col, n), key=lambda r: abs(a[r][col]))
        pivot = abs(a[pivot_row][col])
        if pivot == 0.0 or max_initial / pivot > CONDITION_LIMIT:
            raise CalibrationError(
                f"degenerate fit: near-singular normal equations (pivot ratio > {CONDITION_LIMIT:g})"
            )
        min_pivot = min(min_pivot, pivot)
        a[col], a[pivot_row] = a[pivot_row], a[col]
        for r in range(col + 1, n):
            factor = a[r][col] / a[col][col]
            if factor != 0.0:
                for c in range(col, n + 1):
                    a[r][c] -= factor * a[col][c]
    x = [0.0] * n
    for row in range(n - 1, -1, -1):
        acc = a[row][n] - sum(a[row][c] * x[c] for c in range(row + 1, n))
        x[row] = acc / a[row][row]
    return x


def fit(network: str, rows: list[CollocationRow]) -> CalibrationModel:
    """Least-squares fit of the four-term correction for one network."""
    if len(rows) < MIN_FIT_ROWS:
        raise CalibrationError(f"need at least {MIN_FIT_ROWS} collocation rows, got {len(rows)}")
    # Design columns: 1, raw, temperature, humidity.
    k = 4
    xtx = [[0.0] * k for _ in range(k)]
    xty = [0.0] * k
    for row in rows:
        x = (1.0, row.raw_pm2_5, row.temperature, row.humidity)
        for i in range(k):
            xty[i] += x[i] * row.reference_pm2_5
            for j in range(k):
                xtx[i][j] += x[i] * x[j]
    beta = _solve(xtx, xty)
    sq_err = 0.0
    for row in rows:
        pred = beta[0] + beta[1] * row.raw_pm2_5 + beta[2] * row.temperature + beta[3] * row.humidity
        sq_err += (row.reference_pm2_5 - pred) ** 2
    rmse = math.sqrt(sq_err / len(rows))
    return CalibrationModel(
        network=network,
        intercept=beta[0],
        coef_raw=beta[1],
        coef_temperature=beta[2],
        coef_humidity=beta[3],
        training_rows=len(rows),
        rmse=rmse,
    )


def calibrate(
    records: list[ConsolidatedRecord],
    model: CalibrationModel | None,
) -> list[ConsolidatedRecord]:
    """Apply the correction, passing uncalibratable records through.

    Three outcomes per record:
      - weather fields present and a model exists: CALIBRATED
      - weather join missed upstream: MISSING_WEATHER (unchanged)
      - no model for the network: MODEL_UNAVAILABLE
    """
    out: list[ConsolidatedRecord] = []
    for rec in records:
        if rec.calibration_flag is CalibrationFlag.MISSING_WEATHER:
            out.append(rec)
            continue
        if model is None or rec.temperature is None or rec.humidity is None:
            flag = (
                CalibrationFlag.MODEL_UNAVAILABLE
                if model is None
                else CalibrationFlag.MISSING_WEATHER
            )
            out.append(
                ConsolidatedRecord(
                    device_id=rec.device_id,
                    site_id=rec.site_id,
                    hour=rec.hour,
                    raw_pm2_5_mean=rec.raw_pm2_5_mean,
                    raw_pm10_mean=rec.raw_pm10_mean,
                    sample_count=rec.sample_count,
                    temperature=rec.temperature,
                    humidity=rec.humidity,
                    calibrated_pm2_5=None,
                    calibration_flag=flag,
                )
            )
            continue
        out.append(
            ConsolidatedRecord(
                device_id=rec.device_id,
                site_id=rec.site_id,
                hour=rec.hour,
                raw_pm2_5_mean=rec.raw_pm2_5_mean,
                raw_pm10_mean=rec.raw_pm10_mean,
                sample_count=rec.sample_count,
                temperature=rec.temperature,
                humidity=rec.humidity,
                calibrated_pm2_5=model.predict(rec.raw_pm2_5_mean, rec.temperature, rec.humidity),
                calibration_flag=CalibrationFlag.CALIBRATED,
            )
        )
    return out


def forecast(
    history: dict[HourKey, float],
    now: HourKey,
    device_id: str,
    horizons: range = FORECAST_HORIZONS,
) -> list[ForecastRow]:
    """Seasonal-naive forecast: each horizon repeats the value one
    season (24 h) earlier; holes fall back to the last observed value.

    History must span at least FORECAST_MIN_HISTORY hours ending at
    `now` (inclusive); shorter histories produce no rows.
    """
    if not history:
        return []
    observed = sorted(h for h in history if h <= now)
    if not observed or observed[-1] - observed[0] + 1 < FORECAST_MIN_HISTORY:
        return []
    last_value = history[observed[-1]]
    rows: list[ForecastRow] = []
    for h in horizons:
        target = now + h
        lagged = target - FORECAST_SEASON_HOURS
        value = history.get(lagged)
        if value is None or lagged > now:
            value = last_value
        rows.append(ForecastRow(device_id=device_id, hour=target, horizon=h, predicted_pm2_5=value))
    return rows

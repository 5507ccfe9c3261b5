"""Evaluation and reporting: correlations, lag sweeps, RMSE, CSV emission.

Report files mirror the run's headline views: per-prediction errors and
a running RMSE timeline, Pearson/Spearman correlations of window scores
against closes over a range of lags (lag L means scores lead prices by
L minutes), hourly summed scores with mean close, and daily tweet
volume. Everything is a pure computation over immutable run data, and
file output is byte-deterministic.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import AlignedWindow, WindowKey, format_timestamp
from .errors import DataError, StorageError
from .predictor import PredictionRecord

DEFAULT_MAX_LAG = 60


@dataclass(frozen=True)
class LagCorrelation:
    lag_minutes: int
    pearson_r: float
    spearman_rho: float
    n: int


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    """Sample Pearson correlation coefficient."""
    xa = np.asarray(x, dtype=np.float64)
    ya = np.asarray(y, dtype=np.float64)
    if xa.shape != ya.shape or xa.ndim != 1 or len(xa) < 2:
        raise DataError("pearson needs two equal-length series of length >= 2")
    dx = xa - xa.mean()
    dy = ya - ya.mean()
    denom = math.sqrt(float((dx * dx).sum()) * float((dy * dy).sum()))
    if denom == 0.0:
        raise DataError("correlation undefined: zero variance")
    r = float((dx * dy).sum()) / denom
    return max(-1.0, min(1.0, r))


def _fractional_ranks(values: np.ndarray) -> np.ndarray:
    """Ranks starting at 1, with tied values sharing the average rank."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    sorted_values = values[order]
    i = 0
    while i < len(sorted_values):
        j = i
        while j + 1 < len(sorted_values) and sorted_values[j + 1] == sorted_values[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    """Spearman rank correlation: Pearson over fractional ranks."""
    xa = np.asarray(x, dtype=np.float64)
    ya = np.asarray(y, dtype=np.float64)
    if xa.shape != ya.shape or xa.ndim != 1 or len(xa) < 2:
        raise DataError("spearman needs two equal-length series of length >= 2")
    return pearson(_fractional_ranks(xa), _fractional_ranks(ya))


def lag_sweep(
    scores: Sequence[float], closes: Sequence[float], max_lag: int
) -> list[LagCorrelation]:
    """Correlate scores against closes shifted by 0..max_lag minutes.

    At lag L, scores[t] is paired with closes[t+L], so a peak at L means
    sentiment leads price by L minutes.
    """
    n = len(scores)
    if len(closes) != n:
        raise DataError("lag_sweep needs aligned equal-length series")
    if max_lag < 0 or n <= max_lag + 2:
        raise DataError(f"series of length {n} too short for max_lag {max_lag}")
    out = []
    for lag in range(max_lag + 1):
        xs = scores[: n - lag]
        ys = closes[lag:]
        out.append(
            LagCorrelation(
                lag_minutes=lag,
                pearson_r=pearson(xs, ys),
                spearman_rho=spearman(xs, ys),
                n=n - lag,
            )
        )
    return out


def rmse(records: Sequence[PredictionRecord]) -> float:
    """Root mean square prediction error in USD over completed records."""
    errors = [r.predicted - r.actual for r in records if r.completed()]
    if not errors:
        raise DataError("rmse needs at least one completed prediction")
    return math.sqrt(math.fsum(e * e for e in errors) / len(errors))


@dataclass(frozen=True)
class CompletedPrediction:
    """A completed prediction joined with its naive-baseline prediction."""

    window: WindowKey
    predicted: float
    actual: float
    naive: float
    model_version: int

    @property
    def abs_error(self) -> float:
        return abs(self.predicted - self.actual)


@dataclass(frozen=True)
class RunData:
    """Everything a report needs: gap-filled windows and completed predictions."""

    windows: list[AlignedWindow]
    predictions: list[CompletedPrediction]


def _fmt(value: float) -> str:
    return repr(float(value))


def _write_csv(path: Path, header: list[str], rows: list[list[str]]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def emit_report(run: RunData, out_dir: str | Path) -> list[Path]:
    """Write the report CSVs and summary; returns the paths written.

    Rerunning over the same run data produces byte-identical files.
    """
    if not run.predictions:
        raise DataError("cannot report on a run with no completed predictions")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise StorageError(f"report directory {out} is not writable: {exc}") from exc

    paths = []

    rows = [
        [p.window.iso(), _fmt(p.predicted), _fmt(p.actual), _fmt(p.abs_error)]
        for p in run.predictions
    ]
    paths.append(out / "predictions.csv")
    _write_csv(paths[-1], ["window", "predicted", "actual", "error"], rows)

    rows = []
    total_sq = 0.0
    for i, p in enumerate(run.predictions, 1):
        total_sq += (p.predicted - p.actual) ** 2
        rows.append(
            [p.window.iso(), _fmt(p.abs_error), _fmt(math.sqrt(total_sq / i))]
        )
    paths.append(out / "rmse_timeline.csv")
    _write_csv(paths[-1], ["window", "abs_error", "cumulative_rmse"], rows)

    rows = []
    scores = [w.score_sum for w in run.windows]
    closes = [w.bar.close for w in run.windows if w.bar is not None]
    if len(closes) == len(scores):
        max_lag = min(DEFAULT_MAX_LAG, len(scores) - 3)
        if max_lag >= 0:
            try:
                sweep = lag_sweep(scores, closes, max_lag)
                rows = [
                    [str(c.lag_minutes), _fmt(c.pearson_r), _fmt(c.spearman_rho), str(c.n)]
                    for c in sweep
                ]
            except DataError:
                rows = []  # constant series: emit header only
    paths.append(out / "lag_correlations.csv")
    _write_csv(paths[-1], ["lag_minutes", "pearson_r", "spearman_rho", "n"], rows)

    hourly: dict[int, tuple[float, list[float]]] = {}
    for w in run.windows:
        hour = w.window.epoch_minute // 60
        score_sum, hour_closes = hourly.get(hour, (0.0, []))
        if w.bar is not None:
            hour_closes = hour_closes + [w.bar.close]
        hourly[hour] = (score_sum + w.score_sum, hour_closes)
    rows = []
    for hour in sorted(hourly):
        score_sum, hour_closes = hourly[hour]
        mean_close = math.fsum(hour_closes) / len(hour_closes) if hour_closes else ""
        rows.append(
            [
                format_timestamp(hour * 3600.0),
                _fmt(score_sum),
                _fmt(mean_close) if hour_closes else "",
            ]
        )
    paths.append(out / "hourly_sentiment_price.csv")
    _write_csv(paths[-1], ["hour", "score_sum", "mean_close"], rows)

    daily: dict[str, int] = {}
    for w in run.windows:
        day = datetime.fromtimestamp(w.window.start(), tz=timezone.utc).strftime(
            "%Y-%m-%d"
        )
        daily[day] = daily.get(day, 0) + w.tweet_count
    rows = [[day, str(count)] for day, count in sorted(daily.items())]
    paths.append(out / "tweet_volume.csv")
    _write_csv(paths[-1], ["date", "tweet_count"], rows)

    model_records = [
        PredictionRecord(
            window=p.window,
            predicted=p.predicted,
            model_version=p.model_version,
            actual=p.actual,
            abs_error=p.abs_error,
        )
        for p in run.predictions
    ]
    naive_records = [
        PredictionRecord(
            window=p.window,
            predicted=p.naive,
            model_version=0,
            actual=p.actual,
            abs_error=abs(p.naive - p.actual),
        )
        for p in run.predictions
    ]
    summary = out / "summary.txt"
    summary.write_text(
        "windows: {n_windows}\n"
        "completed_predictions: {n_pred}\n"
        "overall_rmse_usd: {model_rmse}\n"
        "baseline_rmse_usd: {naive_rmse}\n".format(
            n_windows=len(run.windows),
            n_pred=len(run.predictions),
            model_rmse=_fmt(rmse(model_records)),
            naive_rmse=_fmt(rmse(naive_records)),
        ),
        encoding="utf-8",
    )
    paths.append(summary)
    return paths

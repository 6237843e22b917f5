"""Masked error metrics and z-score normalization.

Positions where the ground truth is exactly zero are treated as missing and
excluded from every metric, using one shared mask per report.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DataError, EmptyMaskError
from .tensor import Tensor

REPORT_HORIZONS = (3, 6, 12)


def _arr(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


@dataclass(frozen=True)
class NormStats:
    """Per-channel mean and population standard deviation."""

    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mu, dtype=np.float64))
        sigma = np.atleast_1d(np.asarray(self.sigma, dtype=np.float64))
        if mu.shape != sigma.shape:
            raise ContractError(f"mu shape {mu.shape} != sigma shape {sigma.shape}")
        if not (sigma > 0).all() or not np.isfinite(sigma).all():
            raise DataError(f"standard deviation must be positive for every channel, got {sigma}")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)

    @classmethod
    def fit(cls, readings) -> "NormStats":
        """Statistics over all axes but the last (channel) axis."""
        x = _arr(readings)
        flat = x.reshape(-1, x.shape[-1])
        return cls(flat.mean(axis=0), flat.std(axis=0))


def zscore(x, stats: NormStats) -> np.ndarray:
    return (_arr(x) - stats.mu) / stats.sigma


def inverse_zscore(z, stats: NormStats) -> np.ndarray:
    return _arr(z) * stats.sigma + stats.mu


@dataclass
class MetricReport:
    mae: float
    rmse: float
    mape: float
    masked_count: int
    total_count: int
    horizons: dict[int, dict[str, float]] = field(default_factory=dict)

    def to_json(self) -> str:
        payload = {
            "mae": self.mae,
            "rmse": self.rmse,
            "mape": self.mape,
            "masked_count": self.masked_count,
            "total_count": self.total_count,
            "horizons": {str(h): v for h, v in self.horizons.items()},
        }
        return json.dumps(payload, separators=(",", ":"))

    def csv_rows(self) -> list[tuple[str, float, float, float]]:
        rows = [(str(h), v["mae"], v["rmse"], v["mape"]) for h, v in self.horizons.items()]
        rows.append(("average", self.mae, self.rmse, self.mape))
        return rows

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(("horizon", "mae", "rmse", "mape"))
        for h, mae, rmse, mape in self.csv_rows():
            writer.writerow((h, repr(mae), repr(rmse), repr(mape)))
        return buf.getvalue()


def _masked(pred: np.ndarray, truth: np.ndarray) -> tuple[float, float, float, int]:
    mask = truth != 0
    count = int(mask.sum())
    if count == 0:
        raise EmptyMaskError("every ground-truth entry is zero; nothing to evaluate")
    err = np.where(mask, pred - truth, 0.0)
    abs_err = np.abs(err)
    mae = abs_err.sum() / count
    rmse = np.sqrt((err * err).sum() / count)
    safe = np.where(mask, np.abs(truth), 1.0)
    mape = (abs_err / safe).sum() / count * 100.0
    return float(mae), float(rmse), float(mape), count


def masked_metrics(pred, truth, horizon_axis: int | None = None) -> MetricReport:
    """MAE, RMSE and MAPE (percent) over entries with nonzero truth.

    With ``horizon_axis`` set, single-step metrics are also reported for the
    1-based horizons 3, 6 and 12 that exist along that axis.
    """
    p, t = _arr(pred), _arr(truth)
    if p.shape != t.shape:
        raise ContractError(f"prediction shape {p.shape} != truth shape {t.shape}")
    mae, rmse, mape, count = _masked(p, t)
    horizons: dict[int, dict[str, float]] = {}
    if horizon_axis is not None:
        steps = p.shape[horizon_axis]
        for h in REPORT_HORIZONS:
            if h > steps:
                continue
            ph = np.take(p, h - 1, axis=horizon_axis)
            th = np.take(t, h - 1, axis=horizon_axis)
            try:
                hm, hr, hp, _ = _masked(ph, th)
            except EmptyMaskError:
                hm = hr = hp = float("nan")
            horizons[h] = {"mae": hm, "rmse": hr, "mape": hp}
    return MetricReport(mae, rmse, mape, count, int(p.size), horizons)


def masked_mae_loss(pred: Tensor, truth: np.ndarray, mask: np.ndarray) -> Tensor:
    """Differentiable masked MAE, ``sum(mask * |pred - truth|) / sum(mask)``."""
    mask = np.asarray(mask, dtype=np.float64)
    denom = mask.sum()
    if denom == 0:
        raise EmptyMaskError("loss mask selects no entries")
    diff = (pred - Tensor(truth)).abs()
    return (diff * Tensor(mask)).sum() / float(denom)


def ha_table(readings: np.ndarray, dow: np.ndarray, sod: np.ndarray, steps_per_day: int) -> np.ndarray:
    """Per-(dow, sod, node, channel) mean of the nonzero readings; unseen cells hold the node mean.

    ``readings`` is ``[steps, N, C]``; ``dow`` runs 1..7 and ``sod`` 1..steps_per_day.
    """
    x = np.asarray(readings, dtype=np.float64)
    seen = x != 0
    cell = (np.asarray(dow) - 1) * steps_per_day + (np.asarray(sod) - 1)
    n_cells = 7 * steps_per_day
    sums = np.zeros((n_cells,) + x.shape[1:])
    counts = np.zeros((n_cells,) + x.shape[1:])
    np.add.at(sums, cell, np.where(seen, x, 0.0))
    np.add.at(counts, cell, seen)
    node_count = seen.sum(axis=0)
    node_mean = np.where(seen, x, 0.0).sum(axis=0) / np.maximum(node_count, 1)
    table = np.where(counts > 0, sums / np.maximum(counts, 1), node_mean)
    return table.reshape((7, steps_per_day) + x.shape[1:])


def ha_baseline(dataset, steps_in: int = 12, steps_out: int = 12, split: str = "test") -> MetricReport:
    """Historical-average forecast scored on the targets of every ``split`` window.

    The lookup table is built from the training split only; each target step is
    predicted by the table cell of its (day of week, step of day).
    """
    lo, hi = dataset.bounds("train")
    spd = dataset.steps_per_day
    table = ha_table(
        dataset.readings[lo:hi], dataset.day_of_week[lo:hi], dataset.step_of_day[lo:hi], spd
    )
    s_lo, s_hi = dataset.bounds(split)
    starts = np.arange(s_lo, s_hi - steps_in - steps_out + 1)
    if starts.size == 0:
        raise DataError(f"{split} split too short for T={steps_in}, S={steps_out}")
    idx = starts[:, None] + steps_in + np.arange(steps_out)[None, :]
    pred = table[dataset.day_of_week[idx] - 1, dataset.step_of_day[idx] - 1]
    return masked_metrics(pred, dataset.readings[idx], horizon_axis=1)

"""Composite, point and uncertainty metrics over an evaluation window.

Calibration uses probability integral transform values u_i = F_i(y_i).
Poisson CDFs are step functions, so for that family u_i is randomised
uniformly within the jump: u = F(y-1) + v (F(y) - F(y-1)), v ~ U(0, 1),
drawn from a seeded generator.  That keeps u uniform under a correct model.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .distributions import DistParams, cdf, nll, point_prediction, quantile
from .errors import POutOfRange, ProbGnnError, ShapeMismatch, ZeroMeanTarget

DEFAULT_BINS = 19
DEFAULT_ALPHA = 0.05

METRIC_COLUMNS = ("nll", "nll_per_obs", "calibration_error", "mpiw", "picp", "mae", "mape")


def bin_probabilities(bins=DEFAULT_BINS) -> np.ndarray:
    """``bins`` equally spaced interior probabilities; 19 gives 0.05..0.95."""
    if np.ndim(bins) == 0:
        bins = int(bins)
        if bins < 1:
            raise ProbGnnError("bins must be >= 1")
        return np.arange(1, bins + 1) / (bins + 1)
    p = np.asarray(bins, dtype=np.float64)
    if np.any(np.diff(p) <= 0) or p.min() <= 0 or p.max() >= 1:
        raise ProbGnnError("bin probabilities must be strictly increasing inside (0, 1)")
    return p


def check_alpha(alpha):
    if not 0 < alpha < 1:
        raise POutOfRange(f"alpha must lie in (0, 1), got {alpha}")


def _targets(pred: DistParams, y):
    y = np.asarray(y, dtype=np.float64)
    if y.shape != pred.shape:
        raise ShapeMismatch(f"targets {y.shape} vs predictions {pred.shape}")
    return y


def point_metrics(pred: DistParams, y, tg_mean="truncated"):
    """MAE and MAPE, where MAPE = MAE / mean(y) over the whole window."""
    y = _targets(pred, y)
    yhat = point_prediction(pred, tg_mean=tg_mean)
    mae = float(np.mean(np.abs(y - yhat)))
    ybar = float(y.mean())
    if ybar <= 0:
        raise ZeroMeanTarget("MAPE needs a positive mean target")
    return mae, mae / ybar


def interval_metrics(pred: DistParams, y, alpha=DEFAULT_ALPHA):
    """Central (1 - alpha) intervals; returns (mpiw, picp, lower, upper).

    Coverage counts the closed interval L <= y <= U.
    """
    check_alpha(alpha)
    y = _targets(pred, y)
    lower = quantile(pred, np.full(pred.shape, alpha / 2))
    upper = quantile(pred, np.full(pred.shape, 1 - alpha / 2))
    mpiw = float(np.mean(upper - lower))
    picp = float(np.mean((lower <= y) & (y <= upper)))
    return mpiw, picp, lower, upper


def pit(pred: DistParams, y, seed=0):
    y = _targets(pred, y)
    if pred.family != "Pois":
        return cdf(pred, y)
    v = np.random.default_rng(seed).random(y.shape)
    below = cdf(pred, y - 1.0)
    return below + v * (cdf(pred, y) - below)


def pit_calibration(u, bins=DEFAULT_BINS):
    """CE and QQ points straight from PIT values."""
    p = bin_probabilities(bins)
    u = np.sort(np.asarray(u, dtype=np.float64).ravel())
    q = np.searchsorted(u, p, side="right") / u.size
    return float(np.abs(q - p).sum()), list(zip(p.tolist(), q.tolist()))


def calibration(pred: DistParams, y, bins=DEFAULT_BINS, seed=0):
    """CE = sum over bin probabilities p of |q(p) - p|, with q(p) = share of u_i <= p."""
    return pit_calibration(pit(pred, y, seed), bins)


@dataclass
class MetricsReport:
    nll: float
    nll_per_obs: float
    mae: float
    mape: float
    calibration_error: float
    mpiw: float
    picp: float
    coverage: float
    n_obs: int
    qq_points: list = field(default_factory=list)

    def metrics(self):
        return {k: getattr(self, k) for k in METRIC_COLUMNS}

    def to_dict(self):
        d = asdict(self)
        d["qq_points"] = [list(x) for x in self.qq_points]
        return d

    def to_json(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def qq_to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["p", "q"])
            for p, q in self.qq_points:
                w.writerow([repr(p), repr(q)])


def evaluate(pred: DistParams, y, alpha=DEFAULT_ALPHA, bins=DEFAULT_BINS, seed=0, tg_mean="truncated"):
    check_alpha(alpha)
    bin_probabilities(bins)
    pred = pred.detach()
    y = _targets(pred, y)
    total = nll(pred, y).item()
    mae, mape = point_metrics(pred, y, tg_mean)
    mpiw, picp, _, _ = interval_metrics(pred, y, alpha)
    ce, qq = calibration(pred, y, bins, seed)
    return MetricsReport(total, total / y.size, mae, mape, ce, mpiw, picp, 1 - alpha, int(y.size), qq)


def evaluate_model(model, batch, alpha=DEFAULT_ALPHA, bins=DEFAULT_BINS, seed=0):
    """Evaluate a ProbGnn or Ensemble (anything with ``predict``) on a Batch."""
    pred = model.predict(batch)
    tg_mean = getattr(model.config, "tg_mean", "truncated")
    return evaluate(pred, batch.y, alpha, bins, seed, tg_mean)


@dataclass
class ShiftTable:
    rows: list

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["window", "model"] + list(METRIC_COLUMNS) + ["n_obs"])
            for row in self.rows:
                rep = row["report"]
                w.writerow([row["window"], row["model"]] + [repr(float(v)) for v in rep.metrics().values()]
                           + [rep.n_obs])

    def lookup(self, window, model):
        for row in self.rows:
            if row["window"] == window and row["model"] == model:
                return row["report"]
        raise KeyError((window, model))


def shift_report(models, windows, alpha=DEFAULT_ALPHA, bins=DEFAULT_BINS, seed=0) -> ShiftTable:
    """One MetricsReport per (window, model).

    ``models`` maps a label to a predictor (``ProbGnn`` / ``Ensemble``);
    ``windows`` maps a window name to a Batch.  Row order follows the inputs.
    """
    if not windows:
        raise ProbGnnError("shift_report needs at least one window")
    if isinstance(models, dict):
        models = list(models.items())
    rows = []
    for wname, batch in windows.items():
        for mname, model in models:
            rows.append({"window": wname, "model": mname,
                         "report": evaluate_model(model, batch, alpha, bins, seed)})
    return ShiftTable(rows)

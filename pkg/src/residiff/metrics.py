"""Scoring rules and coverage metrics for sample-based forecasts.

Ensembles use the sample axis at position -3: shape ``(..., S, M, d)`` with a
matching target of shape ``(..., M, d)``. Aggregates are uniform means over
all (window, horizon step, variate) cells.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

PICP_LEVELS = (0.5, 0.8, 0.95)
_INV_SQRT_PI = 1.0 / math.sqrt(math.pi)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


# --------------------------------------------------------------------------
# empirical quantiles (shared convention with coverage optimization)
# --------------------------------------------------------------------------

def order_index(S: int, p: float) -> int:
    """0-based order statistic used as the empirical ``p``-quantile of ``S`` samples.

    Generalized inverse of the empirical CDF: the smallest sample ``x`` with
    ``F(x) >= p``. A 1e-9 guard absorbs round-off in ``S * p``.
    """
    j = math.ceil(S * p - 1e-9)
    return min(max(j, 1), S) - 1


def interval_bounds(sorted_samples: np.ndarray, gamma: float, axis: int = -3):
    """Lower/upper ends of the central ``gamma`` interval from pre-sorted samples."""
    S = sorted_samples.shape[axis]
    lo = np.take(sorted_samples, order_index(S, (1.0 - gamma) / 2.0), axis=axis)
    hi = np.take(sorted_samples, order_index(S, (1.0 + gamma) / 2.0), axis=axis)
    return lo, hi


# --------------------------------------------------------------------------
# CRPS
# --------------------------------------------------------------------------

def crps_empirical(samples, y, axis: int = -1) -> np.ndarray:
    """CRPS of the empirical distribution of ``samples`` against ``y``.

    Uses the energy form ``E|X - y| - 0.5 E|X - X'|`` with the pairwise term
    computed from order statistics in ``O(S log S)``. Returns per-cell scores
    (``samples`` reduced along ``axis``).
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.shape[axis] == 0:
        raise ValueError("crps_empirical needs at least one sample")
    x = np.moveaxis(x, axis, -1)
    y = np.asarray(y, dtype=np.float64)[..., None]
    S = x.shape[-1]
    # anchoring on the first sample keeps point masses exact: their
    # deviations vanish and the score collapses to |x - y| bit for bit
    ref_err = np.abs(x[..., :1] - y)
    abs_err = ref_err[..., 0] + (np.abs(x - y) - ref_err).mean(axis=-1)
    xs = np.sort(x, axis=-1)
    weights = 2.0 * np.arange(1, S + 1) - S - 1
    # weights sum to zero, so shifting by the minimum leaves the sum unchanged
    spread = ((xs - xs[..., :1]) * weights).sum(axis=-1) / (S * S)
    return abs_err - spread


def crps_ensemble(ensemble, y) -> float:
    """Mean CRPS over cells for ensembles shaped ``(..., S, M, d)``."""
    return float(np.mean(crps_empirical(ensemble, y, axis=-3)))


def crps_gaussian(mu, sigma, y):
    """Closed-form CRPS of ``N(mu, sigma^2)`` at observation ``y``.

    ``sigma == 0`` reduces to the absolute error.
    """
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if np.any(sigma < 0):
        raise ValueError("sigma must be non-negative")
    err = y - mu
    safe = np.where(sigma > 0, sigma, 1.0)
    z = err / safe
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * z * z)
    val = safe * (z * (2.0 * ndtr(z) - 1.0) + 2.0 * pdf - _INV_SQRT_PI)
    out = np.where(sigma > 0, val, np.abs(err))
    return float(out) if out.ndim == 0 else out


# --------------------------------------------------------------------------
# coverage
# --------------------------------------------------------------------------

def picp(gamma: float, y, ensemble) -> float:
    """Fraction of cells whose target lies in the central ``gamma`` interval."""
    if not 0.0 < gamma < 1.0:
        raise ValueError(f"gamma must lie in (0, 1), got {gamma}")
    xs = np.sort(np.asarray(ensemble, dtype=np.float64), axis=-3)
    return _picp_sorted(gamma, np.asarray(y, dtype=np.float64), xs)


def _picp_sorted(gamma, y, sorted_ens) -> float:
    lo, hi = interval_bounds(sorted_ens, gamma)
    return float(np.mean((y >= lo) & (y <= hi)))


def picp_distance(y, ensemble, levels=PICP_LEVELS) -> float:
    """Sum over ``levels`` of ``|PICP(gamma) - gamma|``."""
    xs = np.sort(np.asarray(ensemble, dtype=np.float64), axis=-3)
    y = np.asarray(y, dtype=np.float64)
    return float(sum(abs(_picp_sorted(g, y, xs) - g) for g in levels))


# --------------------------------------------------------------------------
# point metrics on the mean-collapsed ensemble
# --------------------------------------------------------------------------

def point_metrics(y, ensemble) -> tuple[float, float]:
    """MAE and MSE of the per-cell ensemble mean against ``y``."""
    ens = np.asarray(ensemble, dtype=np.float64)
    ref = ens[..., :1, :, :]
    mean = (ref + (ens - ref).mean(axis=-3, keepdims=True))[..., 0, :, :]
    err = mean - np.asarray(y, dtype=np.float64)
    return float(np.mean(np.abs(err))), float(np.mean(err * err))


# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------

@dataclass
class MetricReport:
    crps: float
    picp: dict
    picp_distance: float
    mae: float
    mse: float
    crps_per_step: list = field(default_factory=list)
    mae_per_step: list = field(default_factory=list)

    def to_record(self) -> str:
        """Flat ``key=value`` text, one metric per line."""
        lines = [
            f"crps={self.crps:.9g}",
            f"picp_distance={self.picp_distance:.9g}",
            f"mae={self.mae:.9g}",
            f"mse={self.mse:.9g}",
        ]
        lines += [f"picp@{g:g}={v:.9g}" for g, v in sorted(self.picp.items())]
        lines += [f"crps@h{m + 1}={v:.9g}" for m, v in enumerate(self.crps_per_step)]
        lines += [f"mae@h{m + 1}={v:.9g}" for m, v in enumerate(self.mae_per_step)]
        return "\n".join(lines) + "\n"

    def to_rows(self, **tags) -> list[dict]:
        """Machine-readable rows ``{metric, value, ...tags}``."""
        rows = [
            {**tags, "metric": "crps", "value": self.crps},
            {**tags, "metric": "picp_distance", "value": self.picp_distance},
            {**tags, "metric": "mae", "value": self.mae},
            {**tags, "metric": "mse", "value": self.mse},
        ]
        rows += [{**tags, "metric": f"picp@{g:g}", "value": v} for g, v in sorted(self.picp.items())]
        rows += [
            {**tags, "metric": "crps", "horizon": m + 1, "value": v}
            for m, v in enumerate(self.crps_per_step)
        ]
        return rows

    def to_json(self, **tags) -> str:
        return json.dumps(self.to_rows(**tags), sort_keys=True)


def evaluate_ensemble(y, ensemble, levels=PICP_LEVELS) -> MetricReport:
    """Compute the full metric suite for ``ensemble`` shaped ``(B, S, M, d)``."""
    y = np.asarray(y, dtype=np.float64)
    ens = np.asarray(ensemble, dtype=np.float64)
    cell_crps = crps_empirical(ens, y, axis=-3)
    xs = np.sort(ens, axis=-3)
    cover = {g: _picp_sorted(g, y, xs) for g in levels}
    mae, mse = point_metrics(y, ens)
    mean_err = np.abs(ens.mean(axis=-3) - y)
    reduce_axes = tuple(i for i in range(cell_crps.ndim) if i != cell_crps.ndim - 2)
    return MetricReport(
        crps=float(cell_crps.mean()),
        picp=cover,
        picp_distance=float(sum(abs(cover[g] - g) for g in levels)),
        mae=mae,
        mse=mse,
        crps_per_step=[float(v) for v in cell_crps.mean(axis=reduce_axes)],
        mae_per_step=[float(v) for v in mean_err.mean(axis=reduce_axes)],
    )

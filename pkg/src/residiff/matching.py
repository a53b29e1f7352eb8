"""Post-hoc distribution matching of residual ensembles.

Two adjustments operate on residual-space ensembles shaped ``(..., S, M, d)``:

* error-aware expansion rescales each cell's spread to the CRPS-optimal
  standard deviation implied by the ensemble's own mean absolute residual;
* coverage optimization stretches the tails shell by shell with expansion
  factors fitted on a validation split so that interval coverage matches
  its nominal level.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .metrics import interval_bounds, order_index

log = logging.getLogger(__name__)

SQRT_LN2 = math.sqrt(math.log(2.0))
STD_FLOOR = 1e-9
LAMBDA_BOUNDS = (1e-3, 100.0)
PICP_TOL = 1e-3
MAX_BISECT = 60


def optimal_sigma(y, mu):
    """CRPS-minimizing Gaussian standard deviation ``|y - mu| / sqrt(ln 2)``."""
    out = np.abs(np.asarray(y, dtype=np.float64) - np.asarray(mu, dtype=np.float64)) / SQRT_LN2
    return float(out) if out.ndim == 0 else out


def default_gamma(start: float = 0.04, step: float = 0.04, stop: float = 0.96) -> np.ndarray:
    """Quantile grid ``start, start+step, ..., <= stop`` (all < 1)."""
    n = int(math.floor((stop - start) / step + 1e-9)) + 1
    grid = np.round(start + step * np.arange(n), 12)
    return grid[grid < 1.0]


# --------------------------------------------------------------------------
# error-aware expansion
# --------------------------------------------------------------------------

def eae_expand(ensemble, alpha: float = 1.0):
    """Rescale each cell to std ``alpha * mean|r| / sqrt(ln 2)`` about its mean.

    Returns ``(expanded, lambda_eae)`` where ``lambda_eae`` has the ensemble
    shape minus the sample axis. Cells whose population std is at or below
    ``STD_FLOOR`` are left untouched.
    """
    r = np.asarray(ensemble, dtype=np.float64)
    if r.shape[-3] < 2:
        raise ValueError("error-aware expansion needs at least 2 samples per cell")
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    lam = eae_factor(r, alpha)
    mean = r.mean(axis=-3, keepdims=True)
    degenerate = r.std(axis=-3, keepdims=True) <= STD_FLOOR
    expanded = np.where(degenerate, r, mean + lam[..., None, :, :] * (r - mean))
    return expanded, lam


def eae_factor(ensemble, alpha: float = 1.0) -> np.ndarray:
    """Expansion factor ``sigma* / std`` per cell (std floored)."""
    r = np.asarray(ensemble, dtype=np.float64)
    target = alpha * np.abs(r).mean(axis=-3) / SQRT_LN2
    std = np.maximum(r.std(axis=-3), STD_FLOOR)
    return target / std


def finalize(y_hat, residual_ensemble, lambda_eae=None) -> np.ndarray:
    """Forecast ensemble ``y_hat + E[r] + lambda * (r - E[r])``.

    ``y_hat`` is ``(..., M, d)``; the residual ensemble is ``(..., S, M, d)``.
    With ``lambda_eae=None`` (or 1) this is simply ``y_hat + r``.
    """
    r = np.asarray(residual_ensemble, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)[..., None, :, :]
    if lambda_eae is None:
        return y_hat + r
    lam = np.asarray(lambda_eae, dtype=np.float64)[..., None, :, :]
    mean = r.mean(axis=-3, keepdims=True)
    return y_hat + mean + lam * (r - mean)


# --------------------------------------------------------------------------
# coverage optimization
# --------------------------------------------------------------------------

@dataclass
class CalibrationProfile:
    """Shell grid ``gamma`` (length l+1) and fitted tail factors ``lam`` (length l)."""

    gamma: np.ndarray
    lam: np.ndarray
    warnings: list = field(default_factory=list)
    calib_picp: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "gamma": [float(g) for g in self.gamma],
            "lambda": [float(v) for v in self.lam],
            "warnings": list(self.warnings),
            "calib_picp": [float(v) for v in self.calib_picp],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CalibrationProfile":
        return cls(
            gamma=np.asarray(d["gamma"], dtype=np.float64),
            lam=np.asarray(d["lambda"], dtype=np.float64),
            warnings=list(d.get("warnings", [])),
            calib_picp=list(d.get("calib_picp", [])),
        )


def stretch_tails(sorted_ens: np.ndarray, gamma: float, lam: float) -> np.ndarray:
    """Move samples at or beyond the central ``gamma`` interval by factor ``lam``.

    Input must be sorted along the sample axis (-3); the map is monotone so
    the output stays sorted. The interval end points are fixed points.
    """
    lo, hi = interval_bounds(sorted_ens, gamma)
    lo = lo[..., None, :, :]
    hi = hi[..., None, :, :]
    out = np.where(sorted_ens <= lo, lo - lam * (lo - sorted_ens), sorted_ens)
    return np.where(sorted_ens >= hi, hi + lam * (sorted_ens - hi), out)


def co_apply(ensemble, profile: CalibrationProfile) -> np.ndarray:
    """Apply the fitted shells in order; returns a new ensemble.

    Sample order within a cell is preserved (the per-cell map is monotone).
    """
    r = np.asarray(ensemble, dtype=np.float64)
    order = np.argsort(r, axis=-3, kind="stable")
    xs = np.take_along_axis(r, order, axis=-3)
    for g, lam in zip(profile.gamma[:-1], profile.lam):
        xs = stretch_tails(xs, float(g), float(lam))
    out = np.empty_like(xs)
    np.put_along_axis(out, order, xs, axis=-3)
    return out


def _shell_picp(sorted_ens, y, gamma_inner, gamma_target, lam) -> float:
    # only the two order statistics that bound the target interval matter
    S = sorted_ens.shape[-3]
    lo_in, hi_in = interval_bounds(sorted_ens, gamma_inner)
    lo_t = np.take(sorted_ens, order_index(S, (1.0 - gamma_target) / 2.0), axis=-3)
    hi_t = np.take(sorted_ens, order_index(S, (1.0 + gamma_target) / 2.0), axis=-3)
    lo_t = np.where(lo_t <= lo_in, lo_in - lam * (lo_in - lo_t), lo_t)
    hi_t = np.where(hi_t >= hi_in, hi_in + lam * (hi_t - hi_in), hi_t)
    return float(np.mean((y >= lo_t) & (y <= hi_t)))


def co_fit(true_residuals, ensembles, gamma=None, *, bounds=LAMBDA_BOUNDS,
           tol: float = PICP_TOL, max_iter: int = MAX_BISECT) -> CalibrationProfile:
    """Fit one tail expansion factor per shell on pooled validation cells.

    Args:
        true_residuals: ``(B, M, d)`` observed residuals ``y - y_hat``.
        ensembles: ``(B, S, M, d)`` sampled residual ensembles.
        gamma: strictly increasing levels in ``[0, 1)``; defaults to
            ``0.04, 0.08, ..., 0.96``.

    Shell ``i`` stretches everything outside the ``gamma[i]`` interval so that
    pooled coverage of the ``gamma[i+1]`` interval hits ``gamma[i+1]``. The
    factor is found by bisection on ``log(lambda)``; if the target is out of
    reach the factor is clamped to the bound and a warning is recorded.
    """
    y = np.asarray(true_residuals, dtype=np.float64)
    ens = np.asarray(ensembles, dtype=np.float64)
    gamma = default_gamma() if gamma is None else np.asarray(gamma, dtype=np.float64)
    if gamma.ndim != 1 or gamma.size < 2:
        raise ValueError("gamma needs at least two levels")
    if np.any(np.diff(gamma) <= 0) or gamma[0] < 0 or gamma[-1] >= 1:
        raise ValueError("gamma must be strictly increasing within [0, 1)")
    warnings = []
    n_cells = y.size
    if n_cells < 100:
        msg = f"only {n_cells} pooled calibration cells (< 100)"
        log.warning(msg)
        warnings.append(msg)

    xs = np.sort(ens, axis=-3)
    lo_b, hi_b = math.log(bounds[0]), math.log(bounds[1])
    lams, achieved = [], []
    for i in range(gamma.size - 1):
        g_in, g_out = float(gamma[i]), float(gamma[i + 1])

        def cover(lam):
            return _shell_picp(xs, y, g_in, g_out, lam)

        p_lo, p_hi = cover(bounds[0]), cover(bounds[1])
        if p_lo >= g_out:
            lam, p = bounds[0], p_lo
            if p_lo - g_out > tol:
                warnings.append(f"shell {i}: coverage {p_lo:.4f} > {g_out} at lower bound")
        elif p_hi <= g_out:
            lam, p = bounds[1], p_hi
            if g_out - p_hi > tol:
                warnings.append(f"shell {i}: coverage {p_hi:.4f} < {g_out} at upper bound")
        else:
            a, b = lo_b, hi_b
            best_lam, best_p = bounds[1], p_hi
            for _ in range(max_iter):
                mid = 0.5 * (a + b)
                lam_mid = math.exp(mid)
                p_mid = cover(lam_mid)
                if abs(p_mid - g_out) < abs(best_p - g_out):
                    best_lam, best_p = lam_mid, p_mid
                if abs(p_mid - g_out) <= tol:
                    break
                if p_mid < g_out:
                    a = mid
                else:
                    b = mid
            lam, p = best_lam, best_p
        lams.append(lam)
        achieved.append(p)
        xs = stretch_tails(xs, g_in, lam)
    return CalibrationProfile(gamma=gamma, lam=np.asarray(lams), warnings=warnings,
                              calib_picp=achieved)

"""Point forecasters (conditional-median estimators) and residual statistics.

Windows are batched as ``x: (B, N, d)`` histories and ``y: (B, M, d)``
targets. Every estimator exposes ``predict(x) -> (B, M, d)``.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigurationError

SIGMA_FLOOR = 1e-6


class SeasonalNaive:
    """Repeat the last observed seasonal cycle of length ``period``."""

    kind = "seasonal_naive"

    def __init__(self, period: int, N: int, M: int, d: int):
        if not 1 <= period <= N:
            raise ConfigurationError(f"seasonal period {period} must lie in [1, N={N}]")
        self.period, self.N, self.M, self.d = int(period), int(N), int(M), int(d)
        self.history = []

    def predict(self, x: np.ndarray) -> np.ndarray:
        x = _check_x(x, self.N, self.d)
        idx = self.N - self.period + (np.arange(self.M) % self.period)
        return x[:, idx, :].copy()

    def params(self) -> dict:
        return {}

    def meta(self) -> dict:
        return {"kind": self.kind, "period": self.period, "N": self.N, "M": self.M, "d": self.d}


class LinearL1:
    """Per-variate affine map ``R^N -> R^M`` fitted by subgradient descent on MAE.

    ``weight`` has shape ``(d, M, N)`` and ``bias`` ``(d, M)``. Training starts
    from the ridge least-squares solution and then descends the L1 loss with
    a backtracking step: a step that does not lower the training MAE is
    rejected and the step size halved, so the recorded loss never increases.
    """

    kind = "linear_l1"

    def __init__(self, N: int, M: int, d: int):
        self.N, self.M, self.d = int(N), int(M), int(d)
        self.weight = np.zeros((d, M, N))
        self.bias = np.zeros((d, M))
        self.history: list[float] = []
        self.val_history: list[float] = []

    def predict(self, x: np.ndarray) -> np.ndarray:
        x = _check_x(x, self.N, self.d)
        return np.einsum("jmn,bnj->bmj", self.weight, x) + self.bias.T[None]

    def params(self) -> dict:
        return {"weight": self.weight, "bias": self.bias}

    def meta(self) -> dict:
        return {"kind": self.kind, "N": self.N, "M": self.M, "d": self.d}

    def mae(self, x, y) -> float:
        return float(np.mean(np.abs(self.predict(x) - y)))

    def init_least_squares(self, x: np.ndarray, y: np.ndarray, ridge: float = 1e-6) -> None:
        B = x.shape[0]
        for j in range(self.d):
            design = np.hstack([x[:, :, j], np.ones((B, 1))])
            gram = design.T @ design + ridge * B * np.eye(self.N + 1)
            coef = np.linalg.solve(gram, design.T @ y[:, :, j])
            self.weight[j] = coef[:-1].T
            self.bias[j] = coef[-1]

    def subgradient(self, x: np.ndarray, y: np.ndarray):
        """Subgradient of the mean absolute error w.r.t. ``(weight, bias)``."""
        sign = np.sign(self.predict(x) - y) / y.size
        return np.einsum("bmj,bnj->jmn", sign, x), sign.sum(axis=0).T

    def step(self, x, y, lr: float) -> float:
        """One backtracking subgradient step; returns the accepted step size."""
        gw, gb = self.subgradient(x, y)
        base = self.mae(x, y)
        w0, b0 = self.weight, self.bias
        while lr > 1e-12:
            self.weight, self.bias = w0 - lr * gw, b0 - lr * gb
            if self.mae(x, y) <= base:
                return lr
            lr *= 0.5
        self.weight, self.bias = w0, b0
        return lr

    def fit(self, x, y, *, x_val=None, y_val=None, lr: float = 0.05, epochs: int = 200,
            patience: int = 20) -> "LinearL1":
        self.init_least_squares(x, y)
        self.history = [self.mae(x, y)]
        best = (np.inf, self.weight, self.bias)
        stale = 0
        for _ in range(epochs):
            lr = self.step(x, y, lr)
            if lr <= 1e-12:
                break
            self.history.append(self.mae(x, y))
            lr = min(lr * 1.5, 1.0)
            if x_val is not None and len(x_val):
                v = self.mae(x_val, y_val)
                self.val_history.append(v)
                if v < best[0] - 1e-12:
                    best, stale = (v, self.weight, self.bias), 0
                else:
                    stale += 1
                    if stale >= patience:
                        break
        if np.isfinite(best[0]):
            self.weight, self.bias = best[1], best[2]
        return self


POINT_KINDS = ("seasonal_naive", "linear_l1")


def fit_point_estimator(x, y, kind: str = "linear_l1", *, period: int | None = None,
                        lr: float = 0.05, epochs: int = 200, x_val=None, y_val=None):
    """Fit a point estimator on training windows ``x: (B, N, d)``, ``y: (B, M, d)``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 3 or y.ndim != 3 or x.shape[0] == 0 or x.shape[0] != y.shape[0]:
        raise ConfigurationError("need a non-empty, aligned batch of training windows")
    _, N, d = x.shape
    M = y.shape[1]
    if kind == "seasonal_naive":
        return SeasonalNaive(period if period is not None else N, N, M, d)
    if kind == "linear_l1":
        return LinearL1(N, M, d).fit(x, y, x_val=x_val, y_val=y_val, lr=lr, epochs=epochs)
    raise ConfigurationError(f"unknown point estimator {kind!r}; choose from {POINT_KINDS}")


def restore_point_estimator(meta: dict, arrays: dict):
    kind = meta["kind"]
    if kind == "seasonal_naive":
        return SeasonalNaive(meta["period"], meta["N"], meta["M"], meta["d"])
    if kind == "linear_l1":
        est = LinearL1(meta["N"], meta["M"], meta["d"])
        w, b = arrays["weight"], arrays["bias"]
        if w.shape != est.weight.shape or b.shape != est.bias.shape:
            raise ValueError("stored point-estimator weights do not match its dimensions")
        est.weight, est.bias = w.astype(np.float64), b.astype(np.float64)
        return est
    raise ConfigurationError(f"unknown point estimator {kind!r}")


def residuals(estimator, x, y) -> np.ndarray:
    """``y - y_hat`` per window, shape ``(B, M, d)``."""
    return np.asarray(y, dtype=np.float64) - estimator.predict(x)


def fit_sigma_trn(train_residuals, floor: float = SIGMA_FLOOR) -> np.ndarray:
    """Zero-mean Gaussian scale per (horizon step, variate): ``sqrt(mean r^2)``."""
    r = np.asarray(train_residuals, dtype=np.float64)
    if r.ndim != 3:
        raise ValueError("expected residuals shaped (B, M, d)")
    return np.maximum(np.sqrt(np.mean(r * r, axis=0)), floor)


def gaussian_baseline_ensemble(y_hat, sigma_trn, S: int, rng: np.random.Generator) -> np.ndarray:
    """``S`` samples of ``y_hat + sigma_trn * eps``; returns ``(B, S, M, d)``.

    A single window ``(M, d)`` gives ``(S, M, d)``.
    """
    y_hat = np.asarray(y_hat, dtype=np.float64)
    eps = rng.standard_normal(y_hat.shape[:-2] + (S,) + y_hat.shape[-2:])
    return y_hat[..., None, :, :] + np.asarray(sigma_trn)[None] * eps


def _check_x(x, N, d) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.shape[1:] != (N, d):
        raise ValueError(f"history shape {x.shape[1:]} does not match model (N={N}, d={d})")
    return x

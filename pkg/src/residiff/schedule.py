"""Diffusion noise schedules and DDIM inference subsequences.

Steps are 1-based: index ``k`` in ``1..K`` lives at array position ``k - 1``.
``alpha_bar(0)`` is defined as 1 so that step 0 denotes the clean sample.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError


@dataclass(frozen=True)
class DiffusionSchedule:
    """Linear-beta variance schedule with cumulative signal retention."""

    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    beta_start: float
    beta_end: float

    @property
    def K(self) -> int:
        return int(self.beta.shape[0])

    def abar(self, k) -> np.ndarray | float:
        """``alpha_bar`` at 1-based step(s) ``k``; step 0 maps to 1."""
        k_arr = np.asarray(k)
        if np.any(k_arr < 0) or np.any(k_arr > self.K):
            raise ValueError(f"diffusion step out of range [0, {self.K}]: {k}")
        padded = np.concatenate(([1.0], self.alpha_bar))
        out = padded[k_arr]
        return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class InferenceSchedule:
    kappa: np.ndarray  # strictly increasing, 1-based, kappa[-1] == K

    @property
    def W(self) -> int:
        return int(self.kappa.shape[0])


def build_linear_beta(K: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> DiffusionSchedule:
    """Linearly spaced betas from ``beta_start`` (k=1) to ``beta_end`` (k=K)."""
    if int(K) != K or K < 1:
        raise ConfigurationError(f"K must be a positive integer, got {K}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigurationError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    K = int(K)
    if K == 1:
        beta = np.array([beta_start], dtype=np.float64)
    else:
        beta = np.linspace(beta_start, beta_end, K, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    for arr in (beta, alpha, alpha_bar):
        arr.setflags(write=False)
    return DiffusionSchedule(beta, alpha, alpha_bar, float(beta_start), float(beta_end))


def build_cosine_kappa(K: int, W: int) -> InferenceSchedule:
    """Cosine-spaced subsequence: dense near step 0, sparse near step K.

    Raw indices are ``round(K * (1 - cos(i*pi/(2W))))`` for ``i = 1..W``;
    they are then pushed up to be strictly increasing from 1 and pulled
    down so the last one is exactly ``K``.
    """
    _check_kw(K, W)
    raw = [int(round(K * (1.0 - math.cos(i * math.pi / (2 * W))))) for i in range(1, W + 1)]
    return InferenceSchedule(_monotonize(raw, K))


def build_uniform_kappa(K: int, W: int) -> InferenceSchedule:
    """Evenly spaced subsequence ``{K/W, 2K/W, ..., K}`` (rounded)."""
    _check_kw(K, W)
    raw = [int(round(i * K / W)) for i in range(1, W + 1)]
    return InferenceSchedule(_monotonize(raw, K))


INFERENCE_SCHEDULES = {"cosine": build_cosine_kappa, "uniform": build_uniform_kappa}


def build_kappa(kind: str, K: int, W: int) -> InferenceSchedule:
    try:
        builder = INFERENCE_SCHEDULES[kind]
    except KeyError:
        raise ConfigurationError(
            f"unknown inference schedule {kind!r}; choose from {sorted(INFERENCE_SCHEDULES)}"
        ) from None
    return builder(K, W)


def _check_kw(K: int, W: int) -> None:
    if int(K) != K or K < 1 or int(W) != W or W < 1:
        raise ConfigurationError(f"K and W must be positive integers, got K={K}, W={W}")
    if W > K:
        raise ConfigurationError(f"inference length W={W} exceeds diffusion steps K={K}")


def _monotonize(raw: list[int], K: int) -> np.ndarray:
    W = len(raw)
    kappa = list(raw)
    kappa[-1] = K
    prev = 0
    for i in range(W):
        kappa[i] = max(kappa[i], prev + 1)
        prev = kappa[i]
    kappa[-1] = K
    for i in range(W - 2, -1, -1):
        kappa[i] = min(kappa[i], kappa[i + 1] - 1)
    out = np.asarray(kappa, dtype=np.int64)
    out.setflags(write=False)
    return out

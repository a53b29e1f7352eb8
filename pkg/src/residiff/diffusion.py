"""Residual diffusion: forward noising, the denoiser, training and DDIM sampling.

All tensors are float64 numpy arrays. Residual tensors are ``(..., M, d)``;
``k`` is a 1-based diffusion step (scalar or one per batch row).
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from scipy.special import ndtr

from .errors import NumericalError
from .schedule import DiffusionSchedule, InferenceSchedule

log = logging.getLogger(__name__)

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


# --------------------------------------------------------------------------
# closed-form diffusion algebra
# --------------------------------------------------------------------------

def _bcast(v, like: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return v.reshape(v.shape + (1,) * (like.ndim - v.ndim))


def forward_diffuse(r0, k, eps, sched: DiffusionSchedule) -> np.ndarray:
    """``sqrt(abar_k) * r0 + sqrt(1 - abar_k) * eps``."""
    r0 = np.asarray(r0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if r0.shape != eps.shape:
        raise ValueError(f"r0 shape {r0.shape} != eps shape {eps.shape}")
    if np.any(np.asarray(k) < 1):
        raise ValueError("forward diffusion needs k >= 1")
    ab = _bcast(sched.abar(k), r0)
    return np.sqrt(ab) * r0 + np.sqrt(1.0 - ab) * eps


def predict_r0(rk, eps_hat, k, sched: DiffusionSchedule) -> np.ndarray:
    """Invert the forward map given a noise estimate."""
    rk = np.asarray(rk, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    if rk.shape != eps_hat.shape:
        raise ValueError(f"rk shape {rk.shape} != eps_hat shape {eps_hat.shape}")
    ab = _bcast(sched.abar(k), rk)
    return (rk - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)


def ddim_step(r_k, r0_hat, k, k_prev, sched: DiffusionSchedule) -> np.ndarray:
    """Deterministic DDIM move from step ``k`` to ``k_prev < k``.

    ``k_prev == 0`` returns ``r0_hat`` itself.
    """
    if k_prev >= k:
        raise ValueError(f"ddim_step needs k_prev < k, got {k_prev} >= {k}")
    r_k = np.asarray(r_k, dtype=np.float64)
    r0_hat = np.asarray(r0_hat, dtype=np.float64)
    if k_prev == 0:
        return r0_hat.copy()
    ab, ab_prev = sched.abar(k), sched.abar(k_prev)
    coef = math.sqrt((1.0 - ab_prev) / (1.0 - ab))
    return math.sqrt(ab_prev) * r0_hat + coef * (r_k - math.sqrt(ab) * r0_hat)


# --------------------------------------------------------------------------
# reference denoiser
# --------------------------------------------------------------------------

def gelu(x):
    return x * ndtr(x)


def gelu_grad(x):
    return ndtr(x) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def step_features(k, n_freq: int) -> np.ndarray:
    """Sinusoidal features of the diffusion step, shape ``(B, 2 * n_freq)``."""
    k = np.atleast_1d(np.asarray(k, dtype=np.float64))
    freqs = np.exp(-math.log(10000.0) * np.arange(n_freq) / n_freq)
    ang = k[:, None] * freqs[None]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


class MLPDenoiser:
    """Noise estimator conditioned on the history and the point forecast.

    Per window: ``concat(x, y_hat)`` is standardized per variate and stacked
    on top of ``r_k`` along time; a shared linear map over time plus GELU
    gives one ``H``-vector per variate. The step is embedded by two dense
    layers into ``d_k`` extra rows. A residual mixing layer across the
    ``d + d_k`` rows and a residual hidden layer follow, then the first ``d``
    rows are projected to the horizon. The output adds ``r_k * k / K``.
    """

    param_names = ("W1", "b1", "We1", "be1", "We2", "be2", "Wm", "bm", "Wh", "bh", "Wo", "bo")

    def __init__(self, N: int, M: int, d: int, *, H: int = 64, d_k: int = 4, K: int = 1000,
                 n_freq: int = 8, seed: int = 0):
        self.N, self.M, self.d, self.H, self.d_k, self.K = N, M, d, H, d_k, K
        self.n_freq = n_freq
        L, R, F = N + 2 * M, d + d_k, 2 * n_freq
        self.shapes = {
            "W1": (L, H), "b1": (H,),
            "We1": (F, H), "be1": (H,),
            "We2": (H, d_k * H), "be2": (d_k * H,),
            "Wm": (R, R), "bm": (R,),
            "Wh": (H, H), "bh": (H,),
            "Wo": (H, M), "bo": (M,),
        }
        rng = np.random.default_rng(seed)
        self.params = {}
        for name in self.param_names:
            shape = self.shapes[name]
            if name.startswith("W"):
                bound = 1.0 / math.sqrt(shape[0])
                self.params[name] = rng.uniform(-bound, bound, size=shape)
            else:
                self.params[name] = np.zeros(shape)

    # -- metadata ---------------------------------------------------------

    def dims(self) -> dict:
        return {"N": self.N, "M": self.M, "d": self.d, "H": self.H, "d_k": self.d_k,
                "K": self.K, "n_freq": self.n_freq}

    @classmethod
    def from_params(cls, dims: dict, params: dict) -> "MLPDenoiser":
        model = cls(dims["N"], dims["M"], dims["d"], H=dims["H"], d_k=dims["d_k"],
                    K=dims["K"], n_freq=dims["n_freq"])
        for name in cls.param_names:
            arr = np.asarray(params[name], dtype=np.float64)
            if arr.shape != model.shapes[name]:
                raise ValueError(
                    f"parameter {name} has shape {arr.shape}, expected {model.shapes[name]}"
                )
            model.params[name] = arr.copy()
        return model

    def zero_(self) -> "MLPDenoiser":
        for name in self.param_names:
            self.params[name] = np.zeros(self.shapes[name])
        return self

    # -- forward / backward ---------------------------------------------

    def _check(self, rk, x, y_hat):
        if x.shape[1:] != (self.N, self.d) or y_hat.shape[1:] != (self.M, self.d) \
                or rk.shape[1:] != (self.M, self.d):
            raise ValueError(
                f"input shapes x{x.shape}, y_hat{y_hat.shape}, rk{rk.shape} do not match "
                f"model dims N={self.N}, M={self.M}, d={self.d}"
            )

    def __call__(self, rk, k, x, y_hat) -> np.ndarray:
        return self.forward(rk, k, x, y_hat)[0]

    def forward(self, rk, k, x, y_hat):
        """Return ``(eps_hat, cache)`` for batched inputs."""
        rk = np.asarray(rk, dtype=np.float64)
        x = np.asarray(x, dtype=np.float64)
        y_hat = np.asarray(y_hat, dtype=np.float64)
        if rk.ndim == 2:
            rk, x, y_hat = rk[None], x[None], y_hat[None]
            squeeze = True
        else:
            squeeze = False
        self._check(rk, x, y_hat)
        B = rk.shape[0]
        k = np.broadcast_to(np.asarray(k, dtype=np.float64), (B,))
        p = self.params
        d, H = self.d, self.H

        z1 = np.concatenate([x, y_hat], axis=1)
        mu = z1.mean(axis=1, keepdims=True)
        sd = z1.std(axis=1, keepdims=True)
        z1n = (z1 - mu) / np.maximum(sd, 1e-6)
        z2t = np.concatenate([z1n, rk], axis=1).transpose(0, 2, 1)  # (B, d, L)

        a1 = z2t @ p["W1"] + p["b1"]
        z3 = gelu(a1)
        phi = step_features(k, self.n_freq)
        ae = phi @ p["We1"] + p["be1"]
        he = gelu(ae)
        emb = (he @ p["We2"] + p["be2"]).reshape(B, self.d_k, H)
        z4 = np.concatenate([z3, emb], axis=1)  # (B, R, H)
        am = np.einsum("rs,bsh->brh", p["Wm"], z4) + p["bm"][None, :, None]
        z5 = z4 + gelu(am)
        ah = z5 @ p["Wh"] + p["bh"]
        zh = z5 + gelu(ah)
        o = zh[:, :d] @ p["Wo"] + p["bo"]  # (B, d, M)
        out = o.transpose(0, 2, 1) + rk * (k / self.K)[:, None, None]
        cache = dict(z2t=z2t, a1=a1, phi=phi, ae=ae, he=he, z4=z4, am=am, z5=z5, ah=ah, zh=zh)
        return (out[0] if squeeze else out), cache

    def backward(self, cache: dict, grad_out: np.ndarray) -> dict:
        """Parameter gradients given ``dL/d eps_hat`` of shape ``(B, M, d)``."""
        p = self.params
        d = self.d
        B = grad_out.shape[0]
        go = grad_out.transpose(0, 2, 1)  # (B, d, M)
        g = {}
        zh = cache["zh"]
        g["Wo"] = np.einsum("bdh,bdm->hm", zh[:, :d], go)
        g["bo"] = go.sum(axis=(0, 1))
        gzh = np.zeros_like(zh)
        gzh[:, :d] = go @ p["Wo"].T

        gah = gzh * gelu_grad(cache["ah"])
        g["Wh"] = np.einsum("brh,brk->hk", cache["z5"], gah)
        g["bh"] = gah.sum(axis=(0, 1))
        gz5 = gzh + gah @ p["Wh"].T

        gam = gz5 * gelu_grad(cache["am"])
        g["Wm"] = np.einsum("brh,bsh->rs", gam, cache["z4"])
        g["bm"] = gam.sum(axis=(0, 2))
        gz4 = gz5 + np.einsum("rs,brh->bsh", p["Wm"], gam)

        gemb = gz4[:, d:].reshape(B, -1)
        g["We2"] = cache["he"].T @ gemb
        g["be2"] = gemb.sum(axis=0)
        gae = (gemb @ p["We2"].T) * gelu_grad(cache["ae"])
        g["We1"] = cache["phi"].T @ gae
        g["be1"] = gae.sum(axis=0)

        ga1 = gz4[:, :d] * gelu_grad(cache["a1"])
        g["W1"] = np.einsum("bdl,bdh->lh", cache["z2t"], ga1)
        g["b1"] = ga1.sum(axis=(0, 1))
        return g


def denoise(denoiser, rk, k, x, y_hat) -> np.ndarray:
    """Noise estimate from any callable ``denoiser(rk, k, x, y_hat)``."""
    return denoiser(rk, k, x, y_hat)


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

class Adam:
    """Adam with L2 weight decay folded into the gradient."""

    def __init__(self, params: dict, lr: float = 5e-4, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 1e-5):
        self.params = params
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, g in grads.items():
            w = self.params[name]
            if self.weight_decay:
                g = g + self.weight_decay * w
            self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            self.v[name] = b2 * self.v[name] + (1.0 - b2) * g * g
            w -= self.lr * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)


def noise_loss(model, x, y_hat, r0, k, eps, sched, *, grad: bool = True):
    """Mean absolute noise-estimation error and (optionally) its gradients."""
    rk = forward_diffuse(r0, k, eps, sched)
    eps_hat, cache = model.forward(rk, k, x, y_hat)
    diff = eps_hat - eps
    loss = float(np.mean(np.abs(diff)))
    if not grad:
        return loss, None
    return loss, model.backward(cache, np.sign(diff) / diff.size)


def train_denoiser(model: MLPDenoiser, x, y_hat, r0, sched: DiffusionSchedule, *,
                   epochs: int = 100, batch_size: int = 32, lr: float = 5e-4,
                   weight_decay: float = 1e-5, seed: int = 0, val=None,
                   optimizer: Adam | None = None) -> dict:
    """Minimize the L1 noise loss with Adam.

    ``x``, ``y_hat`` and ``r0`` (normalized residuals) are aligned batches.
    ``val`` is an optional ``(x, y_hat, r0)`` triple scored every epoch with
    a fixed draw of steps and noise. Returns the per-epoch loss history.
    """
    rng = np.random.default_rng(seed)
    opt = optimizer or Adam(model.params, lr=lr, weight_decay=weight_decay)
    B = x.shape[0]
    history = {"train": [], "val": []}
    val_draw = None
    if val is not None:
        vrng = np.random.default_rng([seed, 1])
        vx, vy, vr = val
        val_draw = (vx, vy, vr, vrng.integers(1, sched.K + 1, size=vx.shape[0]),
                    vrng.standard_normal(vr.shape))
        history["val"].append(_val_loss(model, sched, val_draw))
    for epoch in range(epochs):
        perm = rng.permutation(B)
        total = 0.0
        for start in range(0, B, batch_size):
            idx = perm[start:start + batch_size]
            k = rng.integers(1, sched.K + 1, size=idx.size)
            eps = rng.standard_normal(r0[idx].shape)
            loss, grads = noise_loss(model, x[idx], y_hat[idx], r0[idx], k, eps, sched)
            if not math.isfinite(loss):
                raise NumericalError(f"non-finite denoiser loss at epoch {epoch}")
            opt.step(grads)
            total += loss * idx.size
        history["train"].append(total / B)
        if val_draw is not None:
            history["val"].append(_val_loss(model, sched, val_draw))
        for name, w in model.params.items():
            if not np.all(np.isfinite(w)):
                raise NumericalError(f"non-finite weights in {name} after epoch {epoch}")
    return history


def _val_loss(model, sched, draw) -> float:
    vx, vy, vr, vk, veps = draw
    return noise_loss(model, vx, vy, vr, vk, veps, sched, grad=False)[0]


# --------------------------------------------------------------------------
# sampling
# --------------------------------------------------------------------------

def sample_noise(shape, S: int, seed: int) -> np.ndarray:
    """Initial noise ``(B, S, M, d)``; sample ``s`` uses its own stream keyed by ``s``."""
    out = np.empty((shape[0], S) + tuple(shape[1:]))
    for s in range(S):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(s,)))
        out[:, s] = rng.standard_normal(shape)
    return out


def sample_ensemble(denoiser, x, y_hat, sigma_trn, sched: DiffusionSchedule,
                    infsched: InferenceSchedule, S: int, seed: int = 0, *,
                    trajectory: bool = False, n_jobs: int = 1, chunk: int = 4096):
    """Draw ``S`` residual paths per window with deterministic DDIM.

    Returns the de-normalized residual ensemble ``(B, S, M, d)``. With
    ``trajectory=True`` also returns the list of de-normalized states after
    each denoising step, starting with the initial noise.
    """
    x = np.asarray(x, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    B = x.shape[0]
    M, d = y_hat.shape[1:]
    noise = sample_noise((B, M, d), S, seed)
    flat = noise.reshape(B * S, M, d)
    xs = np.repeat(x, S, axis=0)
    ys = np.repeat(y_hat, S, axis=0)
    kappa = [0] + [int(k) for k in infsched.kappa]

    def run(lo, hi):
        r = flat[lo:hi].copy()
        states = [r.copy()] if trajectory else None
        for i in range(len(kappa) - 1, 0, -1):
            k, k_prev = kappa[i], kappa[i - 1]
            eps_hat = denoiser(r, np.full(hi - lo, k), xs[lo:hi], ys[lo:hi])
            r0_hat = predict_r0(r, eps_hat, k, sched)
            r = ddim_step(r, r0_hat, k, k_prev, sched)
            if not np.all(np.isfinite(r)):
                raise NumericalError(f"non-finite sample after denoising step {k} -> {k_prev}")
            if trajectory:
                states.append(r.copy())
        return r, states

    bounds = [(lo, min(lo + chunk, B * S)) for lo in range(0, B * S, chunk)]
    if n_jobs > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            parts = list(pool.map(lambda b: run(*b), bounds))
    else:
        parts = [run(*b) for b in bounds]
    sig = np.asarray(sigma_trn, dtype=np.float64)
    final = np.concatenate([p[0] for p in parts]).reshape(B, S, M, d) * sig
    if not trajectory:
        return final
    n_states = len(parts[0][1])
    traj = [
        np.concatenate([p[1][j] for p in parts]).reshape(B, S, M, d) * sig
        for j in range(n_states)
    ]
    return final, traj

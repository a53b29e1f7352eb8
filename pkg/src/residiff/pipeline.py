"""End-to-end training, calibration, forecasting and evaluation.

Metrics are computed in the dataset's standardized units; forecasts written
for users are mapped back to raw units.
"""

from __future__ import annotations

import contextlib
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .bundle import ModelBundle
from .config import RunConfig
from .data import Dataset
from .diffusion import Adam, MLPDenoiser, noise_loss, sample_ensemble, train_denoiser
from .errors import ConfigurationError, NumericalError
from .matching import co_apply, co_fit, default_gamma, eae_factor, finalize
from .metrics import MetricReport, crps_ensemble, evaluate_ensemble
from .point import LinearL1, fit_point_estimator, fit_sigma_trn, gaussian_baseline_ensemble
from .schedule import build_linear_beta

log = logging.getLogger(__name__)

ARMS = ("point", "gaussian", "one_step", "ddim", "ddim_eae", "ddim_eae_co")

# seed tags for independent random streams derived from the root seed
_TAG_DENOISER_INIT, _TAG_TRAIN, _TAG_CALIB, _TAG_GAUSS, _TAG_ONE, _TAG_DDIM = range(1, 7)


def derive_seed(root: int, tag: int) -> int:
    return int(np.random.SeedSequence([root, tag]).generate_state(1)[0])


@contextlib.contextmanager
def stage(name: str):
    """Re-raise failures with the pipeline stage prefixed to the message."""
    try:
        yield
    except Exception as exc:
        if not getattr(exc, "_stage", None):
            exc.args = (f"[{name}] {exc}",) + exc.args[1:]
            exc._stage = name
        raise


def _windows(cfg: RunConfig, data: Dataset, split: str, stride: int | None = None):
    x, y, _ = data.windows(split, cfg.input_len, cfg.pred_len, stride or cfg.stride)
    return x, y


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

def run_train(cfg: RunConfig, data: Dataset) -> ModelBundle:
    """Fit point estimator, training-residual scale and denoiser."""
    x, y = _windows(cfg, data, "train")
    if x.shape[0] < 2:
        raise ConfigurationError("[data] fewer than 2 training windows; shorten input_len/pred_len")
    xv, yv = _windows(cfg, data, "val")
    K = cfg.diffusion_steps
    with stage("schedule"):
        sched = build_linear_beta(K, cfg.beta_start, cfg.beta_end)
    model = MLPDenoiser(cfg.input_len, cfg.pred_len, data.d, H=cfg.diff_d_model, d_k=cfg.t_emb,
                        K=K, n_freq=cfg.n_freq, seed=derive_seed(cfg.seed, _TAG_DENOISER_INIT))
    train_log = {}
    if cfg.joint and cfg.point_kind == "linear_l1":
        with stage("joint"):
            point, sigma, hist = _train_joint(cfg, x, y, xv, yv, model, sched)
        train_log["denoiser"] = hist
        train_log["point"] = point.history
    else:
        with stage("point"):
            point = fit_point_estimator(
                x, y, cfg.point_kind, period=cfg.point_period, lr=cfg.point_lr,
                epochs=cfg.point_epochs, x_val=xv if len(xv) else None,
                y_val=yv if len(yv) else None)
        train_log["point"] = list(getattr(point, "history", []))
        with stage("sigma"):
            y_hat = point.predict(x)
            sigma = fit_sigma_trn(y - y_hat)
        with stage("denoiser"):
            r0 = (y - y_hat) / sigma
            val = None
            if len(xv):
                yv_hat = point.predict(xv)
                val = (xv, yv_hat, (yv - yv_hat) / sigma)
            hist = train_denoiser(model, x, y_hat, r0, sched, epochs=cfg.num_epochs,
                                  batch_size=cfg.batch_size, lr=cfg.diff_learning_rate,
                                  weight_decay=cfg.weight_decay,
                                  seed=derive_seed(cfg.seed, _TAG_TRAIN), val=val)
        train_log["denoiser"] = hist
    log.info("trained: final denoiser loss %.4f", train_log["denoiser"]["train"][-1]
             if train_log["denoiser"]["train"] else float("nan"))
    return ModelBundle(config=cfg, point=point, denoiser=model, sigma_trn=sigma,
                       data_mean=data.mean.copy(), data_std=data.std.copy(), log=train_log)


def _train_joint(cfg, x, y, xv, yv, model, sched):
    """Alternate point and denoiser updates on each minibatch.

    The point estimator starts from its least-squares fit; the residual scale
    is refreshed from the current point estimator at every epoch start.
    """
    point = LinearL1(cfg.input_len, cfg.pred_len, x.shape[2])
    point.init_least_squares(x, y)
    point.history = [point.mae(x, y)]
    rng = np.random.default_rng(derive_seed(cfg.seed, _TAG_TRAIN))
    opt = Adam(model.params, lr=cfg.diff_learning_rate, weight_decay=cfg.weight_decay)
    hist = {"train": [], "val": []}
    B = x.shape[0]
    lr_pt = cfg.point_lr
    for epoch in range(cfg.num_epochs):
        sigma = fit_sigma_trn(y - point.predict(x))
        perm = rng.permutation(B)
        total = 0.0
        for start in range(0, B, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            xb, yb = x[idx], y[idx]
            y_hat = point.predict(xb)
            r0 = (yb - y_hat) / sigma
            k = rng.integers(1, sched.K + 1, size=idx.size)
            eps = rng.standard_normal(r0.shape)
            loss, grads = noise_loss(model, xb, y_hat, r0, k, eps, sched)
            if not math.isfinite(loss):
                raise NumericalError(f"non-finite denoiser loss at epoch {epoch}")
            opt.step(grads)
            gw, gb = point.subgradient(xb, yb)
            point.weight = point.weight - lr_pt * gw
            point.bias = point.bias - lr_pt * gb
            total += loss * idx.size
        lr_pt *= 0.97
        hist["train"].append(total / B)
        point.history.append(point.mae(x, y))
    sigma = fit_sigma_trn(y - point.predict(x))
    return point, sigma, hist


# --------------------------------------------------------------------------
# inference
# --------------------------------------------------------------------------

def sample_residuals(bundle: ModelBundle, x, y_hat, *, seed: int, kappa=None, S=None,
                     trajectory: bool = False):
    cfg = bundle.config
    return sample_ensemble(bundle.denoiser, x, y_hat, bundle.sigma_trn, bundle.schedule,
                           kappa or bundle.kappa(), S or cfg.samples, seed,
                           trajectory=trajectory, n_jobs=cfg.n_jobs)


def run_calibrate(bundle: ModelBundle, data: Dataset, gamma=None) -> ModelBundle:
    """Fit the coverage profile on validation windows; returns the updated bundle."""
    cfg = bundle.config
    bundle.check_data(data.d)
    xv, yv = _windows(cfg, data, "val", cfg.eval_stride)
    warn = []
    if xv.shape[0] == 0:
        raise ConfigurationError("[calibrate] validation split holds no complete window")
    if xv.shape[0] < 10:
        warn.append(f"validation split has only {xv.shape[0]} windows")
        log.warning(warn[-1])
    with stage("calibrate"):
        y_hat = bundle.point.predict(xv)
        ens = sample_residuals(bundle, xv, y_hat, seed=derive_seed(cfg.seed, _TAG_CALIB))
        if gamma is None:
            gamma = default_gamma(cfg.co_gamma_start, cfg.co_gamma_step, cfg.co_gamma_max)
        profile = co_fit(yv - y_hat, ens, gamma)
    profile.warnings = warn + profile.warnings
    bundle.profile = profile
    return bundle


def forecast(bundle: ModelBundle, x, *, seed: int | None = None, use_co: bool | None = None,
             use_eae: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Full inference: sample, coverage-adjust, expand. Returns ``(y_hat, ensemble)``."""
    cfg = bundle.config
    x = np.asarray(x, dtype=np.float64)
    y_hat = bundle.point.predict(x)
    r = sample_residuals(bundle, x, y_hat,
                         seed=derive_seed(cfg.seed if seed is None else seed, _TAG_DDIM))
    if use_co is None:
        use_co = bundle.profile is not None
    if use_co:
        if bundle.profile is None:
            raise ConfigurationError("coverage optimization requested but the model is not calibrated")
        r = co_apply(r, bundle.profile)
    lam = eae_factor(r, cfg.alpha) if use_eae else None
    return y_hat, finalize(y_hat, r, lam)


@dataclass
class EvaluationResult:
    reports: dict
    trajectory: list = field(default_factory=list)
    plot_data: np.ndarray | None = None

    def to_rows(self) -> list[dict]:
        rows = []
        for arm, rep in self.reports.items():
            rows += rep.to_rows(arm=arm)
        rows += [{"arm": "ddim", "metric": "crps_trajectory", "step": i, "value": v}
                 for i, v in enumerate(self.trajectory)]
        return rows


def run_evaluate(bundle: ModelBundle, data: Dataset, arms=None, *, trajectory: bool = False,
                 plot_data: bool = False, split: str = "test") -> EvaluationResult:
    """Score ablation arms on a split.

    Arms: ``point`` (ensemble collapsed to the point forecast), ``gaussian``
    (point plus training-residual Gaussian), ``one_step`` (single denoising
    step from step K), ``ddim``, ``ddim_eae`` and ``ddim_eae_co``. The DDIM
    arms share one sampled residual ensemble.
    """
    cfg = bundle.config
    bundle.check_data(data.d)
    if arms is None:
        arms = [a for a in ARMS if a != "ddim_eae_co" or bundle.profile is not None]
    unknown = set(arms) - set(ARMS)
    if unknown:
        raise ConfigurationError(f"unknown evaluation arms {sorted(unknown)}")
    if "ddim_eae_co" in arms and bundle.profile is None:
        raise ConfigurationError("arm ddim_eae_co needs a calibrated model (run calibrate first)")
    x, y = _windows(cfg, data, split, cfg.eval_stride)
    if x.shape[0] == 0:
        raise ConfigurationError(f"{split} split holds no complete window")
    y_hat = bundle.point.predict(x)
    reports = {}
    traj_crps = []
    final = None
    if "point" in arms:
        reports["point"] = evaluate_ensemble(y, y_hat[:, None])
    if "gaussian" in arms:
        rng = np.random.default_rng(derive_seed(cfg.seed, _TAG_GAUSS))
        ens = gaussian_baseline_ensemble(y_hat, bundle.sigma_trn, cfg.samples, rng)
        reports["gaussian"] = evaluate_ensemble(y, ens)
    if "one_step" in arms:
        kappa = bundle.kappa(W=1)
        r = sample_residuals(bundle, x, y_hat, seed=derive_seed(cfg.seed, _TAG_ONE), kappa=kappa)
        reports["one_step"] = evaluate_ensemble(y, finalize(y_hat, r))
    ddim_arms = {"ddim", "ddim_eae", "ddim_eae_co"} & set(arms)
    if ddim_arms or trajectory or plot_data:
        out = sample_residuals(bundle, x, y_hat, seed=derive_seed(cfg.seed, _TAG_DDIM),
                               trajectory=trajectory)
        r, states = out if trajectory else (out, None)
        if states is not None:
            traj_crps = [crps_ensemble(finalize(y_hat, s), y) for s in states]
        if "ddim" in arms:
            reports["ddim"] = evaluate_ensemble(y, finalize(y_hat, r))
        if "ddim_eae" in arms:
            reports["ddim_eae"] = evaluate_ensemble(y, finalize(y_hat, r, eae_factor(r, cfg.alpha)))
        if "ddim_eae_co" in arms or plot_data:
            # plots show the most complete pipeline available
            r_co = co_apply(r, bundle.profile) if bundle.profile is not None else r
            final = finalize(y_hat, r_co, eae_factor(r_co, cfg.alpha))
            if "ddim_eae_co" in arms:
                reports["ddim_eae_co"] = evaluate_ensemble(y, final)
    reports = {a: reports[a] for a in ARMS if a in reports}
    plot = interval_series(y, final) if plot_data and final is not None else None
    return EvaluationResult(reports=reports, trajectory=traj_crps, plot_data=plot)


def interval_series(y, ensemble) -> np.ndarray:
    """Rows ``(window, step, variate, truth, mean, std, mean-+1sd, mean-+2sd)``."""
    mean = ensemble.mean(axis=1)
    std = ensemble.std(axis=1)
    B, M, d = y.shape
    w, m, j = np.meshgrid(np.arange(B), np.arange(M), np.arange(d), indexing="ij")
    cols = [w, m, j, y, mean, std, mean - std, mean + std, mean - 2 * std, mean + 2 * std]
    return np.stack([c.reshape(-1).astype(np.float64) for c in cols], axis=1)


PLOT_COLUMNS = ("window", "step", "variate", "truth", "mean", "std",
                "lo1", "hi1", "lo2", "hi2")


def report_text(result: EvaluationResult) -> str:
    parts = []
    for arm, rep in result.reports.items():
        parts.append(f"[{arm}]\n{rep.to_record()}")
    if result.trajectory:
        parts.append("[trajectory]\n" + "".join(
            f"crps@step{i}={v:.9g}\n" for i, v in enumerate(result.trajectory)))
    return "\n".join(parts)


__all__ = ["ARMS", "EvaluationResult", "MetricReport", "forecast", "run_calibrate",
           "run_evaluate", "run_train", "report_text", "interval_series"]

"""Probabilistic forecasting with a point estimator plus residual diffusion.

A point forecaster supplies the conditional median; a conditional diffusion
model samples normalized residuals with deterministic DDIM steps; error-aware
expansion and coverage optimization then reshape the residual ensemble.
"""

from .bundle import ModelBundle, load_bundle, save_bundle
from .config import RunConfig, load_config
from .data import Dataset, load_csv, synth_generate, write_csv
from .diffusion import MLPDenoiser, ddim_step, forward_diffuse, predict_r0, sample_ensemble, train_denoiser
from .errors import ConfigurationError, DataError, NumericalError
from .matching import CalibrationProfile, co_apply, co_fit, eae_expand, finalize, optimal_sigma
from .metrics import (
    crps_empirical,
    crps_ensemble,
    crps_gaussian,
    evaluate_ensemble,
    picp,
    picp_distance,
    point_metrics,
)
from .pipeline import forecast, report_text, run_calibrate, run_evaluate, run_train
from .point import fit_point_estimator, fit_sigma_trn, gaussian_baseline_ensemble, residuals
from .schedule import build_cosine_kappa, build_linear_beta

__version__ = "0.1.0"

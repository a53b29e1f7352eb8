"""Versioned model container.

A bundle is a zip archive holding ``meta.json`` (format version, dimensions,
config, schedule parameters, point-estimator metadata, calibration profile,
training log) and one ``.npy`` member per array. Member order, timestamps and
JSON key order are fixed, so identical models serialize to identical bytes.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig, attr_of
from .diffusion import MLPDenoiser
from .errors import ConfigurationError
from .matching import CalibrationProfile
from .point import restore_point_estimator
from .schedule import build_kappa, build_linear_beta

FORMAT = "residiff-bundle"
VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


@dataclass
class ModelBundle:
    config: RunConfig
    point: object
    denoiser: MLPDenoiser
    sigma_trn: np.ndarray
    data_mean: np.ndarray
    data_std: np.ndarray
    profile: CalibrationProfile | None = None
    log: dict = field(default_factory=dict)

    @property
    def schedule(self):
        c = self.config
        return build_linear_beta(c.diffusion_steps, c.beta_start, c.beta_end)

    def kappa(self, W: int | None = None, kind: str | None = None):
        c = self.config
        return build_kappa(kind or c.inference_schedule, c.diffusion_steps,
                           W or c.inference_diffusion_steps)

    def check_data(self, d: int) -> None:
        if d != self.denoiser.d:
            raise ConfigurationError(
                f"dataset has {d} variates but the model was trained on {self.denoiser.d}"
            )


def _npy_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(arr), allow_pickle=False)
    return buf.getvalue()


def _write(zf: zipfile.ZipFile, name: str, payload: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, payload)


def save_bundle(bundle: ModelBundle, path) -> None:
    arrays = {"sigma_trn": bundle.sigma_trn, "data_mean": bundle.data_mean,
              "data_std": bundle.data_std}
    for name in MLPDenoiser.param_names:
        arrays[f"denoiser/{name}"] = bundle.denoiser.params[name]
    for name, arr in bundle.point.params().items():
        arrays[f"point/{name}"] = arr
    c = bundle.config
    meta = {
        "format": FORMAT,
        "version": VERSION,
        "dims": bundle.denoiser.dims(),
        "config": c.to_dict(),
        "schedule": {"K": c.diffusion_steps, "beta_start": c.beta_start,
                     "beta_end": c.beta_end, "W": c.inference_diffusion_steps,
                     "inference_schedule": c.inference_schedule},
        "point": bundle.point.meta(),
        "profile": bundle.profile.to_dict() if bundle.profile is not None else None,
        "log": bundle.log,
        "arrays": sorted(arrays),
    }
    with zipfile.ZipFile(path, "w") as zf:
        _write(zf, "meta.json", json.dumps(meta, sort_keys=True, indent=1).encode())
        for name in sorted(arrays):
            _write(zf, name + ".npy", _npy_bytes(np.asarray(arrays[name], dtype=np.float64)))


def load_bundle(path) -> ModelBundle:
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        if meta.get("format") != FORMAT:
            raise ConfigurationError(f"{path}: not a model bundle")
        if meta.get("version") != VERSION:
            raise ConfigurationError(f"{path}: unsupported bundle version {meta.get('version')}")
        arrays = {name: np.load(io.BytesIO(zf.read(name + ".npy")), allow_pickle=False)
                  for name in meta["arrays"]}
    config = RunConfig(**{attr_of(k): v for k, v in meta["config"].items()})
    dims = meta["dims"]
    expected = {"N": config.input_len, "M": config.pred_len, "H": config.diff_d_model,
                "d_k": config.t_emb, "K": config.diffusion_steps}
    for key, val in expected.items():
        if dims[key] != val:
            raise ConfigurationError(f"{path}: dimension {key}={dims[key]} disagrees with config ({val})")
    denoiser = MLPDenoiser.from_params(
        dims, {n: arrays[f"denoiser/{n}"] for n in MLPDenoiser.param_names})
    point_arrays = {k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith("point/")}
    point = restore_point_estimator(meta["point"], point_arrays)
    if (point.N, point.M, point.d) != (dims["N"], dims["M"], dims["d"]):
        raise ConfigurationError(f"{path}: point estimator dimensions disagree with the denoiser")
    sigma = arrays["sigma_trn"]
    if sigma.shape != (dims["M"], dims["d"]):
        raise ConfigurationError(f"{path}: sigma_trn shape {sigma.shape} disagrees with dims")
    profile = CalibrationProfile.from_dict(meta["profile"]) if meta["profile"] else None
    return ModelBundle(config=config, point=point, denoiser=denoiser, sigma_trn=sigma,
                       data_mean=arrays["data_mean"], data_std=arrays["data_std"],
                       profile=profile, log=meta.get("log", {}))


def bundle_bytes(bundle: ModelBundle) -> bytes:
    buf = io.BytesIO()
    save_bundle(bundle, buf)
    return buf.getvalue()

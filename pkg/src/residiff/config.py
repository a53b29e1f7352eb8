"""Run configuration: a flat ``key = value`` text file plus overrides.

Keys follow the hyperparameter names used for the reference runs
(``diffusion_steps``, ``inference_diffusion_steps``, ``beta_schedule``,
``inference_schedule``, ...); grouped keys use a dot (``point.kind``,
``co.gamma_start``). Lines starting with ``#`` are comments.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

from .errors import ConfigurationError


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    data: str = ""
    input_len: int = 48
    pred_len: int = 24
    stride: int = 1
    eval_stride: int = 1
    # diffusion
    diffusion_steps: int = 1000
    inference_diffusion_steps: int = 10
    beta_schedule: str = "linear"
    inference_schedule: str = "cosine"
    beta_start: float = 1e-4
    beta_end: float = 0.02
    samples: int = 100
    # denoiser
    diff_d_model: int = 64
    t_emb: int = 4
    n_freq: int = 8
    num_epochs: int = 100
    batch_size: int = 32
    diff_learning_rate: float = 5e-4
    weight_decay: float = 1e-5
    joint: bool = False
    # distribution matching
    alpha: float = 1.0
    co_gamma_start: float = 0.04
    co_gamma_step: float = 0.04
    co_gamma_max: float = 0.96
    # point estimator
    point_kind: str = "linear_l1"
    point_period: int = 24
    point_lr: float = 0.05
    point_epochs: int = 200
    n_jobs: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        positive = ("input_len", "pred_len", "stride", "eval_stride", "diffusion_steps",
                    "inference_diffusion_steps", "samples", "diff_d_model", "t_emb", "n_freq",
                    "batch_size", "point_period", "n_jobs")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{key_of(name)} must be >= 1")
        for name in ("num_epochs", "point_epochs"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{key_of(name)} must be >= 0")
        if self.inference_diffusion_steps > self.diffusion_steps:
            raise ConfigurationError("inference_diffusion_steps exceeds diffusion_steps")
        if self.beta_schedule != "linear":
            raise ConfigurationError(f"unsupported beta_schedule {self.beta_schedule!r}")
        if self.inference_schedule not in ("cosine", "uniform"):
            raise ConfigurationError(f"unsupported inference_schedule {self.inference_schedule!r}")
        if not 0 < self.beta_start <= self.beta_end < 1:
            raise ConfigurationError("need 0 < beta_start <= beta_end < 1")
        if self.alpha <= 0:
            raise ConfigurationError("alpha must be positive")
        if not (0 <= self.co_gamma_start < self.co_gamma_max < 1 and self.co_gamma_step > 0):
            raise ConfigurationError("co.gamma_* must satisfy 0 <= start < max < 1, step > 0")
        if self.point_kind not in ("seasonal_naive", "linear_l1"):
            raise ConfigurationError(f"unknown point.kind {self.point_kind!r}")
        if self.diff_learning_rate <= 0 or self.point_lr <= 0 or self.weight_decay < 0:
            raise ConfigurationError("learning rates must be positive, weight decay >= 0")

    def replace(self, **changes) -> "RunConfig":
        merged = {**asdict(self), **changes}
        return RunConfig(**merged)

    def to_dict(self) -> dict:
        """Plain dict keyed by config-file names."""
        return {key_of(k): v for k, v in asdict(self).items()}

    def to_text(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in self.to_dict().items())


_GROUPS = ("co", "point")
_FIELDS = {f.name: f for f in fields(RunConfig)}


def key_of(attr: str) -> str:
    for g in _GROUPS:
        if attr.startswith(g + "_"):
            return g + "." + attr[len(g) + 1:]
    return attr


def attr_of(key: str) -> str:
    return key.replace(".", "_")


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _coerce(key: str, text: str):
    attr = attr_of(key)
    if attr not in _FIELDS or key != key_of(attr):
        raise ConfigurationError(f"unknown config key {key!r}")
    typ = _FIELDS[attr].type
    text = text.strip()
    try:
        if typ == "bool":
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if typ == "int":
            return int(text)
        if typ == "float":
            return float(text)
    except ValueError:
        raise ConfigurationError(f"config key {key!r}: cannot parse {text!r} as {typ}") from None
    return text.strip("\"'")


def parse_config_text(text: str) -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"config line {lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        values[attr_of(key)] = _coerce(key, val)
    return values


def parse_overrides(items) -> dict:
    """Parse ``["key=value", ...]`` command-line overrides."""
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} is not key=value")
        key, val = item.split("=", 1)
        out[attr_of(key.strip())] = _coerce(key.strip(), val)
    return out


def load_config(path=None, overrides=None) -> RunConfig:
    """Read a config file (optional) and apply overrides; overrides win."""
    values = {}
    if path:
        with open(path) as fh:
            values.update(parse_config_text(fh.read()))
    values.update(overrides or {})
    return RunConfig(**values)

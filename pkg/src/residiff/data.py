"""Time-series ingestion, chronological splits, windowing and synthetic data."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DataError

SPLITS = ("train", "val", "test")


@dataclass
class Dataset:
    """A ``(T, d)`` series standardized with train-split statistics.

    Splits are contiguous and chronological: ``train = [0, t_train)``,
    ``val = [t_train, t_val)``, ``test = [t_val, T)``.
    """

    raw: np.ndarray
    columns: list
    timestamps: list
    t_train: int
    t_val: int
    mean: np.ndarray = field(init=False)
    std: np.ndarray = field(init=False)
    values: np.ndarray = field(init=False)

    def __post_init__(self):
        self.raw = np.asarray(self.raw, dtype=np.float64)
        if self.raw.ndim != 2:
            raise DataError("series must be a (T, d) matrix")
        T = self.raw.shape[0]
        if not 0 < self.t_train <= self.t_val <= T:
            raise ConfigurationError(f"bad split boundaries ({self.t_train}, {self.t_val}) for T={T}")
        train = self.raw[: self.t_train]
        self.mean = train.mean(axis=0)
        std = train.std(axis=0)
        self.std = np.where(std > 0, std, 1.0)
        self.values = (self.raw - self.mean) / self.std

    @property
    def T(self) -> int:
        return self.raw.shape[0]

    @property
    def d(self) -> int:
        return self.raw.shape[1]

    def split_range(self, split: str) -> tuple[int, int]:
        if split == "train":
            return 0, self.t_train
        if split == "val":
            return self.t_train, self.t_val
        if split == "test":
            return self.t_val, self.T
        raise ValueError(f"unknown split {split!r}; choose from {SPLITS}")

    def windows(self, split: str, N: int, M: int, stride: int = 1):
        """All ``(x, y)`` windows lying entirely inside ``split``.

        Returns ``x: (B, N, d)`` and ``y: (B, M, d)`` in standardized units,
        plus the start index of each window.
        """
        lo, hi = self.split_range(split)
        starts = np.arange(lo, hi - N - M + 1, stride)
        if starts.size == 0:
            empty = np.empty((0, N, self.d)), np.empty((0, M, self.d))
            return empty[0], empty[1], starts
        idx = starts[:, None] + np.arange(N + M)[None]
        seg = self.values[idx]
        return seg[:, :N].copy(), seg[:, N:].copy(), starts

    def destandardize(self, arr) -> np.ndarray:
        return np.asarray(arr) * self.std + self.mean


def split_bounds(T: int, train_frac: float = 0.7, val_frac: float = 0.1) -> tuple[int, int]:
    if not (0 < train_frac <= 1 and 0 <= val_frac and train_frac + val_frac <= 1 + 1e-12):
        raise ConfigurationError(f"invalid split fractions ({train_frac}, {val_frac})")
    t_train = max(1, int(math.floor(T * train_frac + 1e-9)))
    t_val = min(T, int(math.floor(T * (train_frac + val_frac) + 1e-9)))
    return t_train, max(t_train, t_val)


def from_array(values, *, columns=None, timestamps=None, train_frac: float = 0.7,
               val_frac: float = 0.1) -> Dataset:
    values = np.asarray(values, dtype=np.float64)
    T, d = values.shape
    if not np.all(np.isfinite(values)):
        bad = np.argwhere(~np.isfinite(values))[0]
        raise DataError(f"non-finite value at row {bad[0] + 1}, column {bad[1] + 1}")
    t_train, t_val = split_bounds(T, train_frac, val_frac)
    return Dataset(
        raw=values,
        columns=list(columns) if columns is not None else [f"v{j}" for j in range(d)],
        timestamps=list(timestamps) if timestamps is not None else [str(t) for t in range(T)],
        t_train=t_train,
        t_val=t_val,
    )


def load_csv(path, *, train_frac: float = 0.7, val_frac: float = 0.1) -> Dataset:
    """Read ``timestamp, v1, ..., vd`` with a header row.

    Rows are numbered from 1 after the header in error messages.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if len(header) < 2:
            raise DataError(f"{path}: need a timestamp column and at least one variate")
        width = len(header)
        stamps, rows = [], []
        for i, row in enumerate(reader, start=1):
            if not row:
                continue
            if len(row) != width:
                raise DataError(f"{path}: row {i} has {len(row)} fields, expected {width}")
            vals = []
            for j, cell in enumerate(row[1:], start=1):
                try:
                    v = float(cell)
                except ValueError:
                    raise DataError(
                        f"{path}: row {i}, column {header[j]!r}: non-numeric value {cell!r}"
                    ) from None
                if not math.isfinite(v):
                    raise DataError(f"{path}: row {i}, column {header[j]!r}: value is {cell}")
                vals.append(v)
            stamps.append(row[0])
            rows.append(vals)
    if not rows:
        raise DataError(f"{path}: no data rows")
    return from_array(np.array(rows), columns=header[1:], timestamps=stamps,
                      train_frac=train_frac, val_frac=val_frac)


def write_csv(dataset: Dataset, path) -> None:
    """Write the raw (unstandardized) series with full float precision."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp"] + list(dataset.columns))
        for stamp, row in zip(dataset.timestamps, dataset.raw):
            w.writerow([stamp] + [repr(float(v)) for v in row])


# --------------------------------------------------------------------------
# synthetic generators
# --------------------------------------------------------------------------

SYNTH_KINDS = ("ar1", "sinusoid_noise", "random_walk", "heteroscedastic")


def synth_generate(kind: str, T: int, d: int = 1, seed: int = 0, **params) -> Dataset:
    """Reproducible synthetic series.

    Kinds and their parameters (defaults in brackets):

    * ``ar1``: ``rho`` [0.9], ``sigma`` [1.0], stationary start.
    * ``sinusoid_noise``: ``period`` [24], ``amplitude`` [1.0], ``noise`` [0.1].
    * ``random_walk``: ``sigma`` [1.0].
    * ``heteroscedastic``: seasonal signal whose noise std follows a latent
      driver in ``[0, 1]`` tied to the seasonal phase and, optionally, a slow
      AR(1) log-volatility. ``period`` [24], ``amplitude`` [1.0],
      ``noise_low`` [0.05], ``noise_high`` [0.6], ``slow`` [0.0].
    """
    rng = np.random.default_rng(seed)
    t = np.arange(T, dtype=np.float64)[:, None]
    phase = rng.uniform(0, 2 * np.pi, size=(1, d))
    split = {k: params.pop(k) for k in ("train_frac", "val_frac") if k in params}
    if kind == "ar1":
        rho = params.pop("rho", 0.9)
        sigma = params.pop("sigma", 1.0)
        e = rng.standard_normal((T, d)) * sigma
        out = np.empty((T, d))
        out[0] = e[0] / math.sqrt(1.0 - rho * rho)
        for i in range(1, T):
            out[i] = rho * out[i - 1] + e[i]
    elif kind == "sinusoid_noise":
        period = params.pop("period", 24)
        amp = params.pop("amplitude", 1.0)
        noise = params.pop("noise", 0.1)
        out = amp * np.sin(2 * np.pi * t / period + phase) + noise * rng.standard_normal((T, d))
    elif kind == "random_walk":
        sigma = params.pop("sigma", 1.0)
        out = np.cumsum(sigma * rng.standard_normal((T, d)), axis=0)
    elif kind == "heteroscedastic":
        period = params.pop("period", 24)
        amp = params.pop("amplitude", 1.0)
        low = params.pop("noise_low", 0.05)
        high = params.pop("noise_high", 0.6)
        slow = params.pop("slow", 0.0)
        driver = 0.5 * (1.0 + np.sin(2 * np.pi * t / period + phase))
        vol = low + (high - low) * driver
        if slow:
            h = np.empty((T, d))
            h[0] = rng.standard_normal(d)
            z = rng.standard_normal((T, d)) * math.sqrt(1 - 0.99 ** 2)
            for i in range(1, T):
                h[i] = 0.99 * h[i - 1] + z[i]
            vol = vol * np.exp(slow * h)
        out = amp * np.sin(2 * np.pi * t / period + phase) + vol * rng.standard_normal((T, d))
    else:
        raise ConfigurationError(f"unknown synthetic kind {kind!r}; choose from {SYNTH_KINDS}")
    if params:
        raise ConfigurationError(f"unused parameters for {kind}: {sorted(params)}")
    return from_array(out, **split)

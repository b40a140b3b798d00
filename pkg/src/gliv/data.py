"""Observation tables and their CSV format (``y,t,z,x1,...,xd``)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd

from .errors import ValidationError


@dataclass(frozen=True)
class Dataset:
    """IID sample of (Y, T, Z, X) with T and Z stored as integer codes.

    Codes index ``config.treatments`` / ``config.instruments`` of the
    configuration the dataset was built against.
    """

    y: np.ndarray
    t: np.ndarray
    z: np.ndarray
    x: np.ndarray
    treatments: tuple
    instruments: tuple

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).reshape(-1)
        t = np.asarray(self.t, dtype=np.intp).reshape(-1)
        z = np.asarray(self.z, dtype=np.intp).reshape(-1)
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        n = y.shape[0]
        if n < 1:
            raise ValidationError("dataset must contain at least one row")
        if not (t.shape[0] == z.shape[0] == x.shape[0] == n):
            raise ValidationError("y, t, z and x must have the same number of rows")
        if not np.all(np.isfinite(y)):
            raise ValidationError("y must be finite")
        if not np.all(np.isfinite(x)):
            raise ValidationError("x must be finite")
        if t.min() < 0 or t.max() >= len(self.treatments):
            raise ValidationError("treatment code out of range")
        if z.min() < 0 or z.max() >= len(self.instruments):
            raise ValidationError("instrument code out of range")
        for name, arr in (("y", y), ("t", t), ("z", z), ("x", x)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "treatments", tuple(self.treatments))
        object.__setattr__(self, "instruments", tuple(self.instruments))

    @property
    def n(self):
        return self.y.shape[0]

    @property
    def d(self):
        return self.x.shape[1]

    @classmethod
    def from_labels(cls, config, y, t, z, x):
        t_codes = _encode(t, config.treatments, "treatment")
        z_codes = _encode(z, config.instruments, "instrument")
        return cls(y, t_codes, z_codes, x, config.treatments, config.instruments)

    def subset(self, idx):
        idx = np.asarray(idx)
        return Dataset(self.y[idx], self.t[idx], self.z[idx], self.x[idx],
                       self.treatments, self.instruments)

    def with_outcome(self, y):
        return Dataset(y, self.t, self.z, self.x, self.treatments, self.instruments)

    def to_frame(self):
        frame = pd.DataFrame({
            "y": self.y,
            "t": np.asarray(self.treatments, dtype=object)[self.t],
            "z": np.asarray(self.instruments, dtype=object)[self.z],
        })
        for j in range(self.d):
            frame[f"x{j + 1}"] = self.x[:, j]
        return frame


def _encode(labels, allowed, what):
    labels = np.asarray(labels).astype(str)
    lookup = {lab: i for i, lab in enumerate(allowed)}
    unknown = sorted(set(labels.tolist()) - set(lookup))
    if unknown:
        raise ValidationError(f"unknown {what} label(s) {unknown}; expected one of {list(allowed)}")
    return np.fromiter((lookup[v] for v in labels), dtype=np.intp, count=labels.shape[0])


def read_csv(path, config):
    try:
        frame = pd.read_csv(path, dtype={"t": str, "z": str}, float_precision="round_trip")
    except FileNotFoundError:
        raise ValidationError(f"dataset {path} not found") from None
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise ValidationError(f"cannot parse dataset {path}: {exc}") from None
    missing = [c for c in ("y", "t", "z") if c not in frame.columns]
    if missing:
        raise ValidationError(f"dataset {path} lacks column(s) {missing}")
    xcols = [c for c in frame.columns if c not in ("y", "t", "z")]
    if not xcols:
        raise ValidationError(f"dataset {path} has no covariate columns x1..xd")
    if frame[["y", *xcols]].isna().any().any():
        raise ValidationError(f"dataset {path} has missing numeric values")
    try:
        x = frame[xcols].to_numpy(dtype=float)
        y = frame["y"].to_numpy(dtype=float)
    except ValueError as exc:
        raise ValidationError(f"dataset {path}: non-numeric y or x value ({exc})") from None
    return Dataset.from_labels(config, y, frame["t"].to_numpy(), frame["z"].to_numpy(), x)


def write_csv(dataset, path):
    dataset.to_frame().to_csv(path, index=False, float_format="%.17g")

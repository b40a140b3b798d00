"""First-step conditional expectations given the covariates.

For every instrument level z and treatment t the fit provides

* ``pi[z](x)      = P(Z = z | X = x)``
* ``h_t[t, z](x)  = E[1{Z = z} 1{T = t} | X = x]``
* ``h_y[t, z](x)  = E[1{Z = z} Y 1{T = t} | X = x]``

and the ratios ``P = h_t / pi`` and ``I = h_y / pi``. Divisions always use the
propensity clamped from below at ``trim_floor``.

Two learners ship: exact cell means for discrete covariates and least-squares
polynomial series. Anything exposing ``evaluate(x)`` and
``conditional_mean(v, x)`` with the same meaning can stand in for a fit (the
cross-fitting code only relies on that contract).
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .errors import EmptyCellError, EstimationError, ValidationError

DEFAULT_TRIM = 0.01


@dataclass(frozen=True)
class DiscreteCells:
    def __str__(self):
        return "cells"


@dataclass(frozen=True)
class PolynomialSeries:
    degree: int

    def __post_init__(self):
        if int(self.degree) < 0:
            raise ValidationError("series degree must be non-negative")

    def __str__(self):
        return f"series:{self.degree}"


def parse_learner(text):
    """``"cells"`` or ``"series:<degree>"``."""
    if isinstance(text, (DiscreteCells, PolynomialSeries)):
        return text
    text = str(text).strip()
    if text == "cells":
        return DiscreteCells()
    if text.startswith("series:"):
        try:
            return PolynomialSeries(int(text.split(":", 1)[1]))
        except ValueError:
            pass
    raise ValidationError(f"unknown learner {text!r}; use 'cells' or 'series:<degree>'")


def canonical_rows(x, digits=12):
    """Round every entry to ``digits`` significant digits."""
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    nz = x != 0
    mag = np.floor(np.log10(np.abs(x[nz])))
    scale = 10.0 ** (digits - 1 - mag)
    out[nz] = np.round(x[nz] * scale) / scale
    return out


class _CellSmoother:
    """Within-cell means over exact covariate values."""

    def __init__(self, x):
        keys = canonical_rows(x)
        self.cells, self.train_index = np.unique(keys, axis=0, return_inverse=True)
        self.train_index = self.train_index.reshape(-1)
        self.counts = np.bincount(self.train_index, minlength=len(self.cells)).astype(float)
        self._lookup = {tuple(row): i for i, row in enumerate(self.cells)}

    @property
    def n_cells(self):
        return len(self.cells)

    def index_of(self, x):
        if x is None:
            return self.train_index
        keys = canonical_rows(np.atleast_2d(x))
        idx = np.empty(keys.shape[0], dtype=np.intp)
        for i, row in enumerate(keys):
            j = self._lookup.get(tuple(row))
            if j is None:
                raise EmptyCellError(f"covariate cell {tuple(row.tolist())} is absent from the fitting sample")
            idx[i] = j
        return idx

    def fit_values(self, v):
        v = np.asarray(v, dtype=float)
        flat = v.reshape(v.shape[0], -1)
        sums = np.stack(
            [np.bincount(self.train_index, weights=flat[:, j], minlength=self.n_cells)
             for j in range(flat.shape[1])],
            axis=1,
        )
        return (sums / self.counts[:, None]).reshape((self.n_cells,) + v.shape[1:])

    def predict(self, coef, x=None):
        return coef[self.index_of(x)]


class _SeriesSmoother:
    """Least-squares projection on polynomials of total degree <= ``degree``."""

    def __init__(self, x, degree):
        x = np.asarray(x, dtype=float)
        self.degree = int(degree)
        self.center = x.mean(axis=0)
        spread = x.std(axis=0)
        self.scale = np.where(spread > 0, spread, 1.0)
        self.powers = [
            p for r in range(self.degree + 1)
            for p in itertools.combinations_with_replacement(range(x.shape[1]), r)
        ]
        self.train_design = self.design(x)
        rank = np.linalg.matrix_rank(self.train_design)
        if rank < self.train_design.shape[1]:
            raise EstimationError(
                f"series design of degree {self.degree} is rank deficient "
                f"(rank {rank} < {self.train_design.shape[1]} basis functions)"
            )
        self._pinv = np.linalg.pinv(self.train_design)

    def design(self, x):
        u = (np.atleast_2d(np.asarray(x, dtype=float)) - self.center) / self.scale
        cols = [np.prod(u[:, list(p)], axis=1) if p else np.ones(u.shape[0]) for p in self.powers]
        return np.column_stack(cols)

    def fit_values(self, v):
        v = np.asarray(v, dtype=float)
        flat = v.reshape(v.shape[0], -1)
        return (self._pinv @ flat).reshape((self._pinv.shape[0],) + v.shape[1:])

    def predict(self, coef, x=None):
        basis = self.train_design if x is None else self.design(x)
        flat = coef.reshape(coef.shape[0], -1)
        return (basis @ flat).reshape((basis.shape[0],) + coef.shape[1:])


@dataclass(frozen=True)
class NuisanceValues:
    """Nuisance functions evaluated at ``m`` covariate rows.

    ``pi`` sums to one across instruments; ``pi_trim`` is ``pi`` clamped at the
    trim floor and is what every division uses.
    """

    pi: np.ndarray        # (m, N_Z)
    pi_trim: np.ndarray   # (m, N_Z)
    h_t: np.ndarray       # (m, N_T, N_Z)
    h_y: np.ndarray       # (m, N_T, N_Z)

    @property
    def P(self):
        return self.h_t / self.pi_trim[:, None, :]

    @property
    def I(self):
        return self.h_y / self.pi_trim[:, None, :]

    def pi_w(self, mask):
        """Propensity of the instrument subset ``mask`` (boolean over Z)."""
        return self.pi[:, np.asarray(mask, dtype=bool)].sum(axis=1)


class NuisanceFit:
    def __init__(self, model_kind, smoother, z, n_treatments, n_instruments, trim_floor,
                 pi_coef, h_t_coef, h_y_coef):
        self.model_kind = model_kind
        self.trim_floor = float(trim_floor)
        self._smoother = smoother
        self._z = z
        self.n_treatments = n_treatments
        self.n_instruments = n_instruments
        self._pi = pi_coef
        self._h_t = h_t_coef
        self._h_y = h_y_coef

    @property
    def cells(self):
        """Distinct covariate rows (cell-means fits only)."""
        return getattr(self._smoother, "cells", None)

    def cell_index(self, x=None):
        return self._smoother.index_of(x)

    def _pi_at(self, x):
        raw = self._smoother.predict(self._pi, x)
        if isinstance(self.model_kind, PolynomialSeries):
            raw = np.clip(raw, self.trim_floor, 1.0)
            raw = raw / raw.sum(axis=1, keepdims=True)
        return raw

    def evaluate(self, x=None):
        """Evaluate at covariate rows ``x`` (training rows when None)."""
        pi = self._pi_at(x)
        return NuisanceValues(
            pi=pi,
            pi_trim=np.maximum(pi, self.trim_floor),
            h_t=self._smoother.predict(self._h_t, x),
            h_y=self._smoother.predict(self._h_y, x),
        )

    def conditional_mean(self, v, x=None):
        """``E[v | Z = z, X]`` for each z, shape (m, N_Z).

        ``v`` is a per-observation vector on the fitting sample.
        """
        v = np.asarray(v, dtype=float)
        onehot = np.zeros((v.shape[0], self.n_instruments))
        onehot[np.arange(v.shape[0]), self._z] = v
        h = self._smoother.predict(self._smoother.fit_values(onehot), x)
        return h / np.maximum(self._pi_at(x), self.trim_floor)


def fit(dataset, config, model_kind=DiscreteCells(), trim_floor=DEFAULT_TRIM):
    """Fit the propensity and the treatment / outcome projections."""
    model_kind = parse_learner(model_kind)
    if not 0.0 <= trim_floor < 1.0 / config.n_instruments:
        raise ValidationError(f"trim floor must lie in [0, 1/N_Z), got {trim_floor}")
    if dataset.treatments != config.treatments or dataset.instruments != config.instruments:
        raise ValidationError("dataset labels were encoded against a different configuration")
    n, nt, nz = dataset.n, config.n_treatments, config.n_instruments
    zhot = np.zeros((n, nz))
    zhot[np.arange(n), dataset.z] = 1.0
    thot = np.zeros((n, nt))
    thot[np.arange(n), dataset.t] = 1.0
    joint = thot[:, :, None] * zhot[:, None, :]

    if isinstance(model_kind, DiscreteCells):
        smoother = _CellSmoother(dataset.x)
        per_z = np.stack(
            [np.bincount(smoother.train_index, weights=zhot[:, j], minlength=smoother.n_cells)
             for j in range(nz)], axis=1)
        empty = np.argwhere(per_z == 0)
        if empty.size:
            c, j = empty[0]
            raise EmptyCellError(
                f"covariate cell x={tuple(smoother.cells[c].tolist())} has no observation "
                f"with instrument {config.instruments[j]}"
            )
    else:
        smoother = _SeriesSmoother(dataset.x, model_kind.degree)

    return NuisanceFit(
        model_kind, smoother, dataset.z, nt, nz, trim_floor,
        pi_coef=smoother.fit_values(zhot),
        h_t_coef=smoother.fit_values(joint),
        h_y_coef=smoother.fit_values(joint * dataset.y[:, None, None]),
    )


def eval_vectors(fit_, x, t, config):
    """``(P_tZ, I_tZ, pi)`` at a single covariate vector, ordered by instrument."""
    vals = fit_.evaluate(np.atleast_2d(np.asarray(x, dtype=float)))
    ti = config.treatment_index(t)
    return vals.P[0, ti], vals.I[0, ti], vals.pi[0]

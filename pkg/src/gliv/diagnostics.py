"""Plug-in checks of the observable implications of the type configuration.

For an outcome set B and a type cell (t, k) the kernel value

    Q_t(x, (B, Sigma_{t,k})) = bt_{t,k} . g_{t,Z}(x),
    g_{t,z}(x) = P(Y in B, T = t | Z = z, X = x)

is the probability that a unit of the cell has Y_t in B, so it must lie in
[0, 1]. The estimates use cell frequencies and are compared with a tolerance
of three plug-in standard errors by default. This is a diagnostic screen,
not a test with controlled size.

Equality restrictions between coinciding type sets are checked on the type
probabilities themselves (B equal to the whole outcome space). Between
different treatments the kernels describe different potential outcomes, so
the set-union equalities do not carry over to individual bins.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .nuisance import DiscreteCells
from .typeconfig import find_equality_restrictions, reduced_inequalities

DEFAULT_BINS = 10
SE_MULTIPLIER = 3.0
NOTE = ("plug-in diagnostic: tolerance is a heuristic multiple of cell-level standard errors, "
        "not a test with controlled size")


def default_breakpoints(y, bins=DEFAULT_BINS):
    """Interior breakpoints of ``bins`` equal-probability bins of ``y``."""
    bins = int(bins)
    if bins < 1:
        raise ValidationError("number of bins must be positive")
    qs = np.quantile(np.asarray(y, dtype=float), np.arange(1, bins) / bins)
    return np.unique(qs)


def bin_index(y, breakpoints):
    """Left-closed, right-open bins: bin j is [b_j, b_{j+1})."""
    return np.searchsorted(np.asarray(breakpoints, dtype=float), y, side="right")


@dataclass(frozen=True)
class RawImplications:
    """Cell-level kernel ingredients.

    ``g[c, t, z, b]`` is the frequency of (Y in bin b, T = t) among the
    observations of cell c with Z = z; ``counts[c, z]`` is the number of those
    observations.
    """

    config: object
    cells: np.ndarray
    breakpoints: np.ndarray
    g: np.ndarray
    counts: np.ndarray

    @property
    def n_bins(self):
        return self.g.shape[3]

    def _combo(self, coef, g):
        """Value and plug-in SE of sum_{t,z} coef[t,z] g[.., t, z, ..] per cell and bin."""
        val = np.einsum("tz,ctzb->cb", coef, g)
        lin = np.einsum("tz,ctzb->czb", coef, g)
        sq = np.einsum("tz,ctzb->czb", coef ** 2, g)
        var = ((sq - lin ** 2) / self.counts[:, :, None]).sum(axis=1)
        return val, np.sqrt(np.clip(var, 0.0, None))

    def coefficients(self, cells):
        """Coefficient matrix (N_T, N_Z) of the summed kernels of ``cells``."""
        cfg = self.config
        coef = np.zeros((cfg.n_treatments, cfg.n_instruments))
        for t, k in cells:
            coef[cfg.treatment_index(t)] += cfg.btilde(t, k)
        coef[np.abs(coef) < 1e-12] = 0.0
        return coef

    def kernel(self, t, k):
        """Q estimates and standard errors, each (n_cells, n_bins)."""
        return self._combo(self.coefficients([(t, k)]), self.g)

    def type_probability(self, cells):
        """Summed kernels over the whole outcome space, (n_cells,) each."""
        val, se = self._combo(self.coefficients(cells), self.g.sum(axis=3, keepdims=True))
        return val[:, 0], se[:, 0]

    def binwise_discrepancy(self, restriction):
        """Left minus right kernel sums bin by bin (not implied by the model)."""
        left = self._combo(self.coefficients(restriction.left), self.g)[0]
        right = self._combo(self.coefficients(restriction.right), self.g)[0]
        return left - right


def q_kernel_estimates(dataset, config, fit, bins=None):
    """Cell frequencies behind every kernel value.

    ``bins`` is a bin count, a sequence of interior breakpoints, or None for
    the default equal-probability grid.
    """
    if not isinstance(getattr(fit, "model_kind", None), DiscreteCells):
        raise ValidationError("implication checks require a cell-means nuisance fit")
    if bins is None or np.isscalar(bins):
        brk = default_breakpoints(dataset.y, DEFAULT_BINS if bins is None else bins)
    else:
        brk = np.asarray(bins, dtype=float)
        if brk.ndim != 1 or np.any(np.diff(brk) <= 0) or not np.all(np.isfinite(brk)):
            raise ValidationError("breakpoints must be finite and strictly increasing")
    nb = brk.size + 1
    cell = fit.cell_index()
    n_cells = fit.cells.shape[0]
    nt, nz = config.n_treatments, config.n_instruments
    b = bin_index(dataset.y, brk)
    key = ((cell * nt + dataset.t) * nz + dataset.z) * nb + b
    g = np.bincount(key, minlength=n_cells * nt * nz * nb).reshape(n_cells, nt, nz, nb).astype(float)
    counts = np.bincount(cell * nz + dataset.z, minlength=n_cells * nz).reshape(n_cells, nz).astype(float)
    g /= counts[:, None, :, None]
    return RawImplications(config, fit.cells, brk, g, counts)


@dataclass(frozen=True)
class RangeCheck:
    t: str
    k: int
    bin: int
    cell: tuple
    q: float
    se: float
    violation: float
    tolerance: float

    @property
    def flagged(self):
        return self.violation > self.tolerance


@dataclass(frozen=True)
class EqualityCheck:
    relation: str
    automatic: bool
    cell: tuple
    discrepancy: float
    se: float
    tolerance: float

    @property
    def flagged(self):
        return abs(self.discrepancy) > self.tolerance


@dataclass(frozen=True)
class ImplicationReport:
    ranges: tuple
    equalities: tuple
    breakpoints: tuple
    tolerance_mode: str
    reduced: tuple = field(default_factory=tuple)
    note: str = NOTE

    @property
    def max_violation(self):
        return max((r.violation for r in self.ranges), default=0.0)

    @property
    def max_discrepancy(self):
        return max((abs(e.discrepancy) for e in self.equalities), default=0.0)

    @property
    def flagged(self):
        return [r for r in self.ranges if r.flagged] + [e for e in self.equalities if e.flagged]

    @property
    def passed(self):
        return not self.flagged

    def table(self, limit=20):
        lines = [self.note,
                 f"range checks: {len(self.ranges)}, equality checks: {len(self.equalities)}, "
                 f"flagged: {len(self.flagged)}, max violation: {self.max_violation:.4g}"]
        if self.reduced:
            lines.append("informative inequalities: " + ", ".join(
                f"Q[{t},{k}] {'>= 0' if side == 'lower' else '<= 1'}" for t, k, side in self.reduced))
        flagged = sorted(self.flagged, key=lambda c: -getattr(c, "violation", abs(getattr(c, "discrepancy", 0))))
        if flagged:
            lines.append(f"{'check':<26}{'cell':>16}{'bin':>5}{'value':>11}{'se':>9}{'tol':>9}")
            for c in flagged[:limit]:
                cell = ",".join(f"{v:.4g}" for v in c.cell)
                if isinstance(c, RangeCheck):
                    lines.append(f"{f'Q[{c.t},{c.k}]':<26}{cell:>16}{c.bin:>5}{c.q:>11.4f}{c.se:>9.4f}{c.tolerance:>9.4f}")
                else:
                    lines.append(f"{c.relation[:25]:<26}{cell:>16}{'all':>5}{c.discrepancy:>11.4f}"
                                 f"{c.se:>9.4f}{c.tolerance:>9.4f}")
        return "\n".join(lines)


ROUNDING = 1e-12


def _tolerance(tolerance, se):
    # the floor absorbs floating-point rounding of exact zeros
    if tolerance == "auto":
        return np.maximum(SE_MULTIPLIER * se, ROUNDING)
    tol = float(tolerance)
    if tol < 0:
        raise ValidationError("tolerance must be non-negative")
    return np.full_like(se, max(tol, ROUNDING))


def check_implications(raw, tolerance="auto"):
    """Range checks for every (t, k, bin, cell) and type-level equalities."""
    cfg = raw.config
    mode = "auto" if tolerance == "auto" else f"{float(tolerance):g}"
    ranges = []
    for t in cfg.treatments:
        parts = cfg.partition(t)
        for k in range(1, cfg.n_instruments + 1):
            if not parts[k]:
                continue
            q, se = raw.kernel(t, k)
            viol = np.maximum(np.maximum(-q, q - 1.0), 0.0)
            tol = _tolerance(tolerance, se)
            for c in range(q.shape[0]):
                cell = tuple(float(v) for v in raw.cells[c])
                for b in range(q.shape[1]):
                    ranges.append(RangeCheck(t, k, b, cell, float(q[c, b]), float(se[c, b]),
                                             float(viol[c, b]), float(tol[c, b])))
    equalities = []
    for rel in find_equality_restrictions(cfg):
        left, lse = raw.type_probability(rel.left)
        right, _ = raw.type_probability(rel.right)
        coef = raw.coefficients(rel.left) - raw.coefficients(rel.right)
        _, se = raw._combo(coef, raw.g.sum(axis=3, keepdims=True))
        se = se[:, 0]
        tol = _tolerance(tolerance, se)
        disc = left - right
        if rel.automatic:
            # identities hold exactly for cell frequencies; only rounding remains
            tol = np.maximum(tol, 1e-9)
        for c in range(disc.shape[0]):
            equalities.append(EqualityCheck(str(rel), rel.automatic, tuple(float(v) for v in raw.cells[c]),
                                            float(disc[c]), float(se[c]), float(tol[c])))
    return ImplicationReport(
        ranges=tuple(ranges),
        equalities=tuple(equalities),
        breakpoints=tuple(float(v) for v in raw.breakpoints),
        tolerance_mode=mode,
        reduced=tuple(reduced_inequalities(cfg)),
    )


def test_implications(dataset, config, fit, bins=None, tolerance="auto"):
    return check_implications(q_kernel_estimates(dataset, config, fit, bins), tolerance)


# keep pytest from collecting the helper above when imported into tests
test_implications.__test__ = False

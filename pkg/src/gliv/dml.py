"""Cross-fitted (DML2) estimation with the orthogonal scores of ``estimators``.

For each fold the nuisances are fit on the other folds and evaluated on the
fold itself. The estimate solves the pooled score equation
``sum_i (a_i - theta d_i) = 0`` and the variance is the average squared
influence value, each observation using its own fold's nuisances.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateSubpopulationError, EmptyCellError, ValidationError
from .estimators import DEGENERACY_THRESHOLD, ParameterId, score_pieces
from .nuisance import DEFAULT_TRIM, fit, parse_learner


@dataclass(frozen=True)
class CrossFitPlan:
    L: int
    assignments: np.ndarray
    seed: int

    def folds(self):
        return [np.flatnonzero(self.assignments == l) for l in range(self.L)]


def make_plan(n, L, seed):
    """Shuffled partition of ``range(n)`` into ``L`` folds of near-equal size."""
    n, L = int(n), int(L)
    if L < 2:
        raise ValidationError(f"fold count must be at least 2, got {L}")
    if n < 2 * L:
        raise ValidationError(f"need at least {2 * L} observations for {L} folds, got {n}")
    order = np.random.default_rng(int(seed)).permutation(n)
    assign = np.empty(n, dtype=np.intp)
    assign[order] = np.arange(n) % L
    assign.setflags(write=False)
    return CrossFitPlan(L, assign, int(seed))


@dataclass(frozen=True)
class DmlResult:
    """``variance`` is the root-n scale V; ``se = sqrt(variance / n)``."""

    parameter: ParameterId
    estimate: float
    variance: float
    n: int

    @property
    def se(self):
        return float(np.sqrt(self.variance / self.n))


def _fit_fold(learner, train, config, trim_floor, fold):
    try:
        if callable(learner):
            return learner(train, config, trim_floor)
        return fit(train, config, learner, trim_floor)
    except EmptyCellError as exc:
        raise EmptyCellError(f"fold {fold} complement: {exc}") from None


def cross_fit_pieces(dataset, config, target, plan, learner_kind="cells", trim_floor=DEFAULT_TRIM):
    """Per-observation score pieces ``(a, d)`` with own-fold nuisances."""
    if plan.assignments.shape[0] != dataset.n:
        raise ValidationError("cross-fitting plan does not match the sample size")
    target.validate(config)
    learner = learner_kind if callable(learner_kind) else parse_learner(learner_kind)
    a = np.empty(dataset.n)
    d = np.empty(dataset.n)
    for l, idx in enumerate(plan.folds()):
        train = dataset.subset(np.flatnonzero(plan.assignments != l))
        nf = _fit_fold(learner, train, config, trim_floor, l)
        try:
            vals = nf.evaluate(dataset.x[idx])
        except EmptyCellError as exc:
            raise EmptyCellError(f"fold {l}: {exc}") from None
        a[idx], d[idx] = score_pieces(target, config, dataset.y[idx], dataset.t[idx], dataset.z[idx], vals)
    return a, d


def _fold_sum(values, plan):
    # fold-ordered reduction keeps the result independent of scheduling
    return float(sum(values[idx].sum() for idx in plan.folds()))


def dml2_generic(dataset, config, target, plan, learner_kind="cells", trim_floor=DEFAULT_TRIM):
    """DML2 estimate and variance for any p, q, beta or gamma parameter."""
    if isinstance(target, str):
        target = ParameterId.parse(target)
    a, d = cross_fit_pieces(dataset, config, target, plan, learner_kind, trim_floor)
    denom = _fold_sum(d, plan)
    if abs(denom) / dataset.n < DEGENERACY_THRESHOLD:
        raise DegenerateSubpopulationError(f"{target}: cross-fitted denominator is numerically zero")
    theta = _fold_sum(a, plan) / denom
    scale = denom / dataset.n if target.is_ratio else 1.0
    psi = (a - theta * d) / scale
    return DmlResult(target, theta, _fold_sum(psi ** 2, plan) / dataset.n, dataset.n)


def dml2_beta(dataset, config, t, k, plan, learner_kind="cells", trim_floor=DEFAULT_TRIM):
    return dml2_generic(dataset, config, ParameterId.beta(t, k), plan, learner_kind, trim_floor)

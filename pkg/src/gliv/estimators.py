"""Plug-in (CEP) estimators, efficient influence functions and the delta method.

Every parameter shares one building block. For a cell (t, k) with contraction
vector ``bt`` the per-observation orthogonal score is ``a_i - theta * d_i``,
where

* type probability ``p``:   a = bt.(zeta(iota 1{T=t} - P) + P),            d = 1
* treated probability ``q``: a = bt.zeta(iota 1{T=t} - P) pi_W + bt.P 1{Z in W}, d = 1
* mean outcome ``beta``:     a = bt.(zeta(iota Y 1{T=t} - I) + I),          d = the p score
* treated mean ``gamma``:    a = bt.zeta(iota Y 1{T=t} - I) pi_W + bt.I 1{Z in W},
                             d = the q score

``zeta`` has diagonal ``1{Z=z}/pi_z``, so only the entry at the observed
instrument survives. The influence function is ``(a - theta d) / scale`` with
``scale`` equal to p for beta, q for gamma and 1 otherwise.
"""
from __future__ import annotations

import re
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateSubpopulationError, ValidationError
from .typeconfig import find_equality_restrictions

DEGENERACY_THRESHOLD = 1e-10
_KINDS = ("p", "q", "beta", "gamma")


@dataclass(frozen=True, order=True)
class ParameterId:
    """Identifies p[t,k], q[t',t,k], beta[t,k] or gamma[t',t,k]."""

    kind: str
    t: str
    k: int
    t_prime: str | None = None

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValidationError(f"unknown parameter kind {self.kind!r}")
        if self.kind in ("q", "gamma") and self.t_prime is None:
            raise ValidationError(f"{self.kind} parameters need a treated label t'")
        if self.kind in ("p", "beta") and self.t_prime is not None:
            raise ValidationError(f"{self.kind} parameters take no treated label")
        object.__setattr__(self, "k", int(self.k))

    @classmethod
    def p(cls, t, k):
        return cls("p", str(t), k)

    @classmethod
    def q(cls, t_prime, t, k):
        return cls("q", str(t), k, str(t_prime))

    @classmethod
    def beta(cls, t, k):
        return cls("beta", str(t), k)

    @classmethod
    def gamma(cls, t_prime, t, k):
        return cls("gamma", str(t), k, str(t_prime))

    @property
    def is_ratio(self):
        return self.kind in ("beta", "gamma")

    def companion(self):
        """The probability parameter normalizing a ratio parameter."""
        if self.kind == "beta":
            return ParameterId.p(self.t, self.k)
        if self.kind == "gamma":
            return ParameterId.q(self.t_prime, self.t, self.k)
        return None

    def __str__(self):
        if self.t_prime is None:
            return f"{self.kind}:{self.t}:{self.k}"
        return f"{self.kind}:{self.t_prime}:{self.t}:{self.k}"

    @classmethod
    def parse(cls, text):
        """Parse ``beta:t1:1``, ``p:t1:1``, ``q:t1:t3:1`` or ``gamma:t1:t3:1``."""
        parts = str(text).strip().split(":")
        try:
            if parts[0] in ("p", "beta") and len(parts) == 3:
                return cls(parts[0], parts[1], int(parts[2]))
            if parts[0] in ("q", "gamma") and len(parts) == 4:
                return cls(parts[0], parts[2], int(parts[3]), parts[1])
        except ValueError:
            pass
        raise ValidationError(
            f"cannot parse parameter {text!r}; expected kind:t:k or kind:t':t:k"
        )

    def validate(self, config):
        config.treatment_index(self.t)
        if self.t_prime is not None:
            config.treatment_index(self.t_prime)
        if not 1 <= self.k <= config.n_instruments:
            raise ValidationError(f"{self}: k must lie in 1..{config.n_instruments}")
        if not config.partition(self.t)[self.k]:
            raise ValidationError(f"{self}: the type cell ({self.t}, {self.k}) is empty")
        if self.t_prime is not None and config.w_set(self.t_prime, self.t, self.k) is None:
            raise ValidationError(f"W-set does not exist for ({self.t_prime},{self.t},{self.k})")
        return self


def parse_parameters(text):
    """Comma separated list of parameter ids."""
    items = [s for s in re.split(r"[,\s]+", str(text)) if s]
    return [ParameterId.parse(s) for s in items]


def default_parameters(config):
    """All beta[t,k] with a nonempty cell, then gamma[t,t,k] for k < N_Z."""
    betas, gammas = [], []
    for t in config.treatments:
        parts = config.partition(t)
        for k in range(1, config.n_instruments + 1):
            if parts[k]:
                betas.append(ParameterId.beta(t, k))
                if k < config.n_instruments:
                    gammas.append(ParameterId.gamma(t, t, k))
    return betas + gammas


# -- score pieces --------------------------------------------------------------

def score_pieces(param, config, y, t, z, vals):
    """Per-observation ``(a, d)`` of the orthogonal score for ``param``.

    ``vals`` holds nuisances evaluated at each observation's covariates.
    """
    ti = config.treatment_index(param.t)
    bt = config.btilde(param.t, param.k)
    rows = np.arange(y.shape[0])
    pi_obs = vals.pi_trim[rows, z]
    weight = bt[z] / pi_obs
    treated = (t == ti).astype(float)
    P = vals.h_t[:, ti, :] / vals.pi_trim
    bP = P @ bt
    corr_t = weight * (treated - P[rows, z])
    need_y = param.kind in ("beta", "gamma")
    if need_y:
        I = vals.h_y[:, ti, :] / vals.pi_trim
        bI = I @ bt
        corr_y = weight * (y * treated - I[rows, z])

    if param.kind in ("p", "beta"):
        d = corr_t + bP
        if param.kind == "p":
            return d, np.ones_like(d)
        return corr_y + bI, d

    mask = config.w_mask(param.t_prime, param.t, param.k)
    if mask is None:
        raise ValidationError(f"W-set does not exist for ({param.t_prime},{param.t},{param.k})")
    pi_w = vals.pi_w(mask)
    in_w = mask[z].astype(float)
    d = corr_t * pi_w + bP * in_w
    if param.kind == "q":
        return d, np.ones_like(d)
    return corr_y * pi_w + bI * in_w, d


# -- point estimates -------------------------------------------------------------

def _contracted(param, config, vals, outcome):
    ti = config.treatment_index(param.t)
    bt = config.btilde(param.t, param.k)
    h = vals.h_y if outcome else vals.h_t
    return (h[:, ti, :] / vals.pi_trim) @ bt


def _check_denominator(value, param):
    if abs(value) < DEGENERACY_THRESHOLD:
        raise DegenerateSubpopulationError(
            f"{param}: estimated subpopulation probability {value:.3g} is numerically zero"
        )


def _w_weight(param, config, vals):
    mask = config.w_mask(param.t_prime, param.t, param.k)
    if mask is None:
        raise ValidationError(f"W-set does not exist for ({param.t_prime},{param.t},{param.k})")
    return vals.pi_w(mask)


def _point(param, config, vals):
    if param.kind == "p":
        return float(np.mean(_contracted(param, config, vals, False)))
    if param.kind == "q":
        return float(np.mean(_contracted(param, config, vals, False) * _w_weight(param, config, vals)))
    denom = _point(param.companion(), config, vals)
    _check_denominator(denom, param)
    num = _contracted(param, config, vals, True)
    if param.kind == "gamma":
        num = num * _w_weight(param, config, vals)
    return float(np.mean(num)) / denom


def _values(dataset, fit):
    return fit.evaluate(dataset.x)


def estimate_p(dataset, config, fit, t, k):
    param = ParameterId.p(t, k).validate(config)
    return _point(param, config, _values(dataset, fit))


def estimate_q(dataset, config, fit, t_prime, t, k):
    param = ParameterId.q(t_prime, t, k).validate(config)
    return _point(param, config, _values(dataset, fit))


def estimate_beta(dataset, config, fit, t, k):
    param = ParameterId.beta(t, k).validate(config)
    return _point(param, config, _values(dataset, fit))


def estimate_gamma(dataset, config, fit, t_prime, t, k):
    param = ParameterId.gamma(t_prime, t, k).validate(config)
    return _point(param, config, _values(dataset, fit))


# -- influence functions and covariance ------------------------------------------

def influence_values(dataset, config, fit, params, estimates, vals=None):
    """n x K matrix of plugged-in efficient influence values.

    ``estimates`` maps ParameterId to value and must contain the companion
    probability of every ratio parameter.
    """
    if vals is None:
        vals = _values(dataset, fit)
    cols = []
    for param in params:
        if param not in estimates:
            raise ValidationError(f"no estimate supplied for {param}")
        theta = estimates[param]
        scale = 1.0
        if param.is_ratio:
            comp = param.companion()
            if comp not in estimates:
                raise ValidationError(f"{param} needs the companion estimate {comp}")
            scale = estimates[comp]
            _check_denominator(scale, param)
        a, d = score_pieces(param, config, dataset.y, dataset.t, dataset.z, vals)
        cols.append((a - theta * d) / scale)
    return np.column_stack(cols) if cols else np.zeros((dataset.n, 0))


def covariance(influence):
    """Uncentered outer-product average of the influence rows."""
    psi = np.asarray(influence, dtype=float)
    if psi.ndim == 1:
        psi = psi[:, None]
    if psi.shape[0] < 2:
        raise ValidationError("covariance needs at least two observations")
    v = psi.T @ psi / psi.shape[0]
    return (v + v.T) / 2


@dataclass(frozen=True)
class EstimateReport:
    """Estimates with influence values.

    ``v_hat`` is the asymptotic covariance of the root-n scaled estimates;
    ``covariance = v_hat / n`` is the covariance of the estimate vector and
    ``standard_errors = sqrt(diag(v_hat) / n)``.
    """

    parameters: tuple
    estimates: np.ndarray
    influence: np.ndarray
    v_hat: np.ndarray
    n: int
    residual_p0: dict = field(default_factory=dict)

    @property
    def covariance(self):
        return self.v_hat / self.n

    @property
    def standard_errors(self):
        return np.sqrt(np.clip(np.diag(self.v_hat), 0.0, None) / self.n)

    def index(self, param):
        if isinstance(param, str):
            param = ParameterId.parse(param)
        try:
            return self.parameters.index(param)
        except ValueError:
            raise ValidationError(f"{param} is not in the report") from None

    def value(self, param):
        return float(self.estimates[self.index(param)])

    def se(self, param):
        return float(self.standard_errors[self.index(param)])


def overidentifying_restrictions(config):
    return [r for r in find_equality_restrictions(config) if not r.automatic]


def estimate(dataset, config, fit, params=None, warn=True):
    """Point estimates, influence matrix and covariance for ``params``."""
    config.require_monotone()
    params = tuple(default_parameters(config) if params is None else params)
    if not params:
        raise ValidationError("no parameters requested")
    for param in params:
        param.validate(config)
    if warn:
        extra = overidentifying_restrictions(config)
        if extra:
            warnings.warn(
                "estimates do not impose the overidentifying restrictions: "
                + "; ".join(str(r) for r in extra),
                stacklevel=2,
            )
    vals = _values(dataset, fit)
    needed = list(params) + [p.companion() for p in params if p.is_ratio]
    est = {}
    for param in needed:
        if param not in est:
            est[param] = _point(param, config, vals)
    psi = influence_values(dataset, config, fit, params, est, vals=vals)

    residual = {}
    for t in config.treatments:
        parts = config.partition(t)
        total = 0.0
        for k in range(1, config.n_instruments + 1):
            if parts[k]:
                total += _point(ParameterId.p(t, k), config, vals)
        residual[t] = 1.0 - total
    return EstimateReport(
        parameters=params,
        estimates=np.array([est[p] for p in params]),
        influence=psi,
        v_hat=covariance(psi),
        n=dataset.n,
        residual_p0=residual,
    )


# -- delta method ----------------------------------------------------------------

def numerical_gradient(phi, point):
    point = np.asarray(point, dtype=float)
    grad = np.empty_like(point)
    for i in range(point.size):
        h = 1e-6 * (1.0 + abs(point[i]))
        up, down = point.copy(), point.copy()
        up[i] += h
        down[i] -= h
        grad[i] = (phi(up) - phi(down)) / (2 * h)
    return grad


def derived_parameter(report, phi, gradient=None):
    """Estimate and standard error of ``phi(estimates)``.

    ``phi`` maps the report's estimate vector to a scalar. ``gradient`` may be
    a callable or a fixed vector; by default central differences are used.
    """
    value = float(phi(report.estimates))
    if gradient is None:
        grad = numerical_gradient(phi, report.estimates)
    elif callable(gradient):
        grad = np.asarray(gradient(report.estimates), dtype=float)
    else:
        grad = np.asarray(gradient, dtype=float)
    if grad.shape != report.estimates.shape or not np.all(np.isfinite(grad)):
        raise ValidationError("gradient of the derived parameter is not finite")
    psi = report.influence @ grad
    se = float(np.sqrt(np.mean(psi ** 2) / report.n))
    return value, se


def _cells_phi(report, cells):
    """Positions of (beta, p) for each (t, k) in ``cells``."""
    idx = []
    for t, k in cells:
        idx.append((report.index(ParameterId.beta(t, k)), report.index(ParameterId.p(t, k))))
    return idx


def pooled_lasf(report, cells):
    """p-weighted average of beta[t,k] over ``cells`` with its standard error."""
    idx = _cells_phi(report, cells)

    def phi(v):
        w = np.array([v[j] for _, j in idx])
        b = np.array([v[i] for i, _ in idx])
        return float(w @ b / w.sum())

    return derived_parameter(report, phi)


def switcher_lasf(report, config, t):
    """Mean outcome under ``t`` for t-switchers (cells k = 1..N_Z-1)."""
    parts = config.partition(t)
    cells = [(t, k) for k in range(1, config.n_instruments) if parts[k]]
    return pooled_lasf(report, cells)


def switcher_contrast(report, target, others):
    """``beta[target] - pooled beta[others]`` with its standard error.

    ``target`` is a (t, k) cell and ``others`` a list of cells; weights are
    the estimated type probabilities of ``others``.
    """
    ib, _ = _cells_phi(report, [target])[0]
    idx = _cells_phi(report, others)

    def phi(v):
        w = np.array([v[j] for _, j in idx])
        b = np.array([v[i] for i, _ in idx])
        return float(v[ib] - w @ b / w.sum())

    return derived_parameter(report, phi)


def with_companions(params):
    """``params`` followed by the probabilities the derived helpers need."""
    out = list(params)
    for p in params:
        c = p.companion()
        if c is not None and c not in out:
            out.append(c)
    return out

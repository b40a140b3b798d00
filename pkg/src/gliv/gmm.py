"""Two-step GMM on moments of the pseudo-outcomes ``Y*_{t,k}``.

Each moment j is attached to a type cell (t_j, k_j) and a function
``m_j(y, eta)``. Its efficient influence value at observation i is

    bt_j[Z_i] / pi_{Z_i}(X_i) * (m_j(Y_i, eta) 1{T_i = t_j} - mhat_{Z_i}(X_i, eta))
        + bt_j . mhat(X_i, eta)

with ``mhat_z(x, eta) = E[m_j(Y, eta) 1{T = t_j} | Z = z, X = x]``. The
treated variant (``treated`` set to t') weights the first term by pi_W and
the second by 1{Z in W}, as for the treated mean outcome.

Moments may be discontinuous in eta, so both stages use derivative-free
multi-start Nelder-Mead over the box of admissible values, and the Jacobian
is a numerical difference of the smoothed nuisance.
"""
from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from .errors import EstimationError, ValidationError

_KINDS = ("mean", "quantile", "custom")


@dataclass(frozen=True)
class MomentEntry:
    """One moment condition.

    ``selector`` is the vector a_j in ``y - a_j'eta`` (mean) or
    ``1{y <= a_j'eta} - tau`` (quantile). Custom moments supply
    ``func(y, eta)`` returning an array shaped like ``y``.
    """

    t: str
    k: int
    kind: str = "mean"
    selector: tuple = (1.0,)
    tau: float | None = None
    func: object = None
    treated: str | None = None

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValidationError(f"unknown moment kind {self.kind!r}")
        if self.kind == "quantile" and not (self.tau is not None and 0.0 < self.tau < 1.0):
            raise ValidationError("quantile moments need tau in (0, 1)")
        if self.kind == "custom" and not callable(self.func):
            raise ValidationError("custom moments need a callable func(y, eta)")
        if self.kind == "quantile" and self.treated is not None:
            raise ValidationError("treated-conditional quantile moments are not supported")
        object.__setattr__(self, "selector", tuple(float(v) for v in self.selector))
        object.__setattr__(self, "k", int(self.k))

    def evaluate(self, y, eta):
        if self.kind == "custom":
            return np.asarray(self.func(y, eta), dtype=float)
        c = float(np.dot(self.selector, eta))
        if self.kind == "mean":
            return y - c
        return (y <= c).astype(float) - self.tau


@dataclass(frozen=True)
class MomentSpec:
    entries: tuple
    d_eta: int
    bounds: tuple

    def __post_init__(self):
        entries = tuple(self.entries)
        if not entries:
            raise ValidationError("a moment specification needs at least one entry")
        d = int(self.d_eta)
        if d < 1 or d > len(entries):
            raise ValidationError(f"parameter dimension must lie in 1..J={len(entries)}, got {d}")
        bounds = tuple((float(lo), float(hi)) for lo, hi in self.bounds)
        if len(bounds) != d:
            raise ValidationError(f"expected {d} bounds, got {len(bounds)}")
        for lo, hi in bounds:
            if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
                raise ValidationError(f"bounds must be finite with lower < upper, got ({lo}, {hi})")
        for e in entries:
            if e.kind != "custom" and len(e.selector) != d:
                raise ValidationError(f"selector {e.selector} does not have length {d}")
        object.__setattr__(self, "entries", entries)
        object.__setattr__(self, "d_eta", d)
        object.__setattr__(self, "bounds", bounds)

    @property
    def J(self):
        return len(self.entries)

    def to_dict(self):
        out = []
        for j, e in enumerate(self.entries, start=1):
            if e.kind == "custom":
                raise ValidationError("custom moments cannot be serialized")
            item = {"j": j, "t": e.t, "k": e.k, "kind": e.kind, "selector": list(e.selector)}
            if e.tau is not None:
                item["tau"] = e.tau
            if e.treated is not None:
                item["treated"] = e.treated
            out.append(item)
        return {"moments": out, "bounds": [list(b) for b in self.bounds]}


def spec_from_json(data, y=None):
    """Build a MomentSpec from decoded JSON.

    Accepts a list of moment objects or ``{"moments": [...], "bounds": [...]}``.
    Missing bounds default to the observed outcome range ``y`` on every
    coordinate, widened by 10 percent.
    """
    if isinstance(data, dict):
        items, bounds = data.get("moments"), data.get("bounds")
    else:
        items, bounds = data, None
    if not isinstance(items, list) or not items:
        raise ValidationError("moment specification must be a non-empty list")
    entries = []
    for item in items:
        if not isinstance(item, dict):
            raise ValidationError("each moment must be a JSON object")
        kind = item.get("kind", "mean")
        if kind == "custom":
            raise ValidationError("custom moments are available through the library only")
        try:
            entries.append(MomentEntry(
                t=str(item["t"]), k=int(item["k"]), kind=kind,
                selector=tuple(item.get("selector", (1.0,))),
                tau=item.get("tau"), treated=item.get("treated"),
            ))
        except KeyError as exc:
            raise ValidationError(f"moment entry lacks field {exc}") from None
    d = len(entries[0].selector)
    if bounds is None:
        if y is None:
            raise ValidationError("bounds are required when no outcome data is supplied")
        lo, hi = float(np.min(y)), float(np.max(y))
        pad = 0.1 * (hi - lo) if hi > lo else 1.0
        bounds = [(lo - pad, hi + pad)] * d
    return MomentSpec(tuple(entries), d, tuple(tuple(b) for b in bounds))


class _Moments:
    """Evaluates the influence matrix of a spec at any eta on one sample."""

    def __init__(self, dataset, config, fit, spec):
        if getattr(fit, "_z", None) is None or fit._z.shape[0] != dataset.n:
            raise ValidationError("the nuisance fit must come from the estimation sample")
        config.require_monotone()
        self.dataset, self.config, self.fit, self.spec = dataset, config, fit, spec
        self.vals = fit.evaluate()
        rows = np.arange(dataset.n)
        self._cols = []
        for e in spec.entries:
            ti = config.treatment_index(e.t)
            if not 1 <= e.k <= config.n_instruments or not config.partition(e.t)[e.k]:
                raise ValidationError(f"moment on ({e.t}, {e.k}) refers to an empty type cell")
            bt = config.btilde(e.t, e.k)
            treated = (dataset.t == ti).astype(float)
            if e.treated is not None:
                mask = config.w_mask(e.treated, e.t, e.k)
                if mask is None:
                    raise ValidationError(f"W-set does not exist for ({e.treated},{e.t},{e.k})")
                pi_w, in_w = self.vals.pi_w(mask), mask[dataset.z].astype(float)
            else:
                pi_w, in_w = np.ones(dataset.n), np.ones(dataset.n)
            col = {
                "entry": e, "bt": bt, "treated": treated,
                "weight": bt[dataset.z] / self.vals.pi_trim[rows, dataset.z],
                "pi_w": pi_w, "in_w": in_w,
            }
            if e.kind == "mean":
                col["I"] = self.vals.h_y[:, ti, :] / self.vals.pi_trim
                col["P"] = self.vals.h_t[:, ti, :] / self.vals.pi_trim
            self._cols.append(col)
        self._rows = rows

    def _mhat(self, col, eta):
        e = col["entry"]
        if e.kind == "mean":
            return col["I"] - float(np.dot(e.selector, eta)) * col["P"]
        m = e.evaluate(self.dataset.y, eta) * col["treated"]
        return self.fit.conditional_mean(m)

    def psi(self, eta):
        eta = np.asarray(eta, dtype=float)
        out = np.empty((self.dataset.n, self.spec.J))
        for j, col in enumerate(self._cols):
            mhat = self._mhat(col, eta)
            m = col["entry"].evaluate(self.dataset.y, eta) * col["treated"]
            corr = col["weight"] * (m - mhat[self._rows, self.dataset.z])
            out[:, j] = corr * col["pi_w"] + (mhat @ col["bt"]) * col["in_w"]
        return out

    def moment_means(self, eta):
        return self.psi(eta).mean(axis=0)

    def smoothed(self, eta):
        """Sample average of the contracted nuisance for each moment."""
        eta = np.asarray(eta, dtype=float)
        return np.array([
            np.mean((self._mhat(col, eta) @ col["bt"]) * col["pi_w"]) for col in self._cols
        ])


def psi_m_values(dataset, config, fit, spec, eta):
    """n x J matrix of moment influence values at ``eta``."""
    return _Moments(dataset, config, fit, spec).psi(eta)


# -- optimizer ------------------------------------------------------------------

def _start_points(bounds):
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    center = (lo + hi) / 2
    d = len(bounds)
    g = min(d, 3)
    grids = [lo[i] + (hi[i] - lo[i]) * np.arange(1, 6) / 6 for i in range(g)]
    pts = []
    for combo in itertools.product(*grids):
        p = center.copy()
        p[:g] = combo
        pts.append(p)
    pts.append(center)
    uniq = []
    for p in pts:
        if not any(np.array_equal(p, q) for q in uniq):
            uniq.append(p)
    return uniq


def _simplex(x0, bounds):
    d = x0.size
    simplex = np.tile(x0, (d + 1, 1))
    for i, (lo, hi) in enumerate(bounds):
        step = 0.1 * (hi - lo)
        simplex[i + 1, i] = x0[i] + step if x0[i] + step <= hi else x0[i] - step
    return simplex


def _golden(f, a, b, tol=1e-12, max_iter=200):
    ratio = (math.sqrt(5) - 1) / 2
    c, d = b - ratio * (b - a), a + ratio * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(max_iter):
        if b - a <= tol * (1 + abs(a) + abs(b)):
            break
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - ratio * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + ratio * (b - a)
            fd = f(d)
    return (c, fc) if fc <= fd else (d, fd)


def _minimize(objective, bounds, extra_starts=()):
    """Best result of Nelder-Mead from every start; golden refinement in 1-D."""
    best_x, best_f = None, np.inf
    failures = 0
    for x0 in list(_start_points(bounds)) + [np.asarray(s, dtype=float) for s in extra_starts]:
        try:
            f0 = objective(x0)
            res = optimize.minimize(
                objective, x0, method="Nelder-Mead", bounds=bounds,
                options={"initial_simplex": _simplex(x0, bounds), "xatol": 1e-9,
                         "fatol": np.inf, "maxfev": 10_000},
            )
        except (FloatingPointError, ValueError, np.linalg.LinAlgError):
            failures += 1
            continue
        x, fx = (res.x, res.fun) if res.fun <= f0 else (x0, f0)
        if np.isfinite(fx) and fx < best_f:
            best_x, best_f = np.array(x, dtype=float), float(fx)
    if best_x is None:
        raise EstimationError(f"the GMM criterion could not be evaluated from any of the {failures} starts")
    if len(bounds) == 1:
        lo, hi = bounds[0]
        half = 0.05 * (hi - lo)
        a, b = max(lo, best_x[0] - half), min(hi, best_x[0] + half)
        xg, fg = _golden(lambda v: objective(np.array([v])), a, b)
        if fg <= best_f:
            best_x, best_f = np.array([xg]), float(fg)
    return best_x, best_f


def _criterion(moments, weight):
    def f(eta):
        g = moments.moment_means(eta)
        return float(g @ weight @ g)
    return f


def gmm_first_stage(dataset, config, fit, spec, _moments=None):
    moments = _moments or _Moments(dataset, config, fit, spec)
    eta, _ = _minimize(_criterion(moments, np.eye(spec.J)), spec.bounds)
    return eta


def estimate_V(dataset, config, fit, spec, eta_tilde, _moments=None):
    moments = _moments or _Moments(dataset, config, fit, spec)
    psi = moments.psi(eta_tilde)
    v = psi.T @ psi / dataset.n
    return (v + v.T) / 2


def _weight_matrix(V):
    if np.linalg.matrix_rank(V) < V.shape[0]:
        warnings.warn("moment covariance is singular; using pseudoinverse weighting", stacklevel=3)
        return np.linalg.pinv(V), True
    return np.linalg.inv(V), False


def gmm_second_stage(dataset, config, fit, spec, V_hat, eta_tilde=None, _moments=None):
    moments = _moments or _Moments(dataset, config, fit, spec)
    weight, _ = _weight_matrix(V_hat)
    starts = () if eta_tilde is None else (eta_tilde,)
    eta, _ = _minimize(_criterion(moments, weight), spec.bounds, starts)
    return eta


def gamma_hat(dataset, config, fit, spec, eta_hat, epsilon_n=None, _moments=None):
    """Numerical Jacobian of the smoothed moments, J x d_eta."""
    moments = _moments or _Moments(dataset, config, fit, spec)
    eps = dataset.n ** -0.25 if epsilon_n is None else float(epsilon_n)
    if eps <= 0:
        raise ValidationError("epsilon_n must be positive")
    eta_hat = np.asarray(eta_hat, dtype=float)
    out = np.empty((spec.J, spec.d_eta))
    for l, (lo, hi) in enumerate(spec.bounds):
        up, down = eta_hat.copy(), eta_hat.copy()
        up[l] = min(eta_hat[l] + eps, hi)
        down[l] = max(eta_hat[l] - eps, lo)
        out[:, l] = (moments.smoothed(up) - moments.smoothed(down)) / (up[l] - down[l])
    return out


def gmm_covariance(Gamma_hat, V_hat, n):
    """Covariance of the estimate, ``(Gamma' V^-1 Gamma)^-1 / n``."""
    G = np.asarray(Gamma_hat, dtype=float)
    if np.linalg.matrix_rank(G) < G.shape[1]:
        raise EstimationError(
            "the moment Jacobian must have full column rank; the parameters are not locally identified"
        )
    weight, _ = _weight_matrix(np.asarray(V_hat, dtype=float))
    return _covariance(G, weight, n)


def _covariance(G, weight, n):
    cov = np.linalg.inv(G.T @ weight @ G) / n
    return (cov + cov.T) / 2


@dataclass(frozen=True)
class GmmResult:
    eta_hat: np.ndarray
    first_stage_eta: np.ndarray
    V_hat: np.ndarray
    Gamma_hat: np.ndarray
    covariance: np.ndarray
    objective_value: float
    first_stage_objective: float
    n: int
    epsilon_n: float
    pinv_weighting: bool = False
    notes: tuple = field(default_factory=tuple)

    @property
    def standard_errors(self):
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))


def estimate_gmm(dataset, config, fit, spec, epsilon_n=None):
    """First stage, weight estimation, second stage and inference."""
    moments = _Moments(dataset, config, fit, spec)
    eta_tilde = gmm_first_stage(dataset, config, fit, spec, _moments=moments)
    V = estimate_V(dataset, config, fit, spec, eta_tilde, _moments=moments)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        weight, singular = _weight_matrix(V)
    for w in caught:
        warnings.warn(str(w.message), stacklevel=2)
    crit = _criterion(moments, weight)
    eta_hat, obj = _minimize(crit, spec.bounds, (eta_tilde,))
    eps = dataset.n ** -0.25 if epsilon_n is None else float(epsilon_n)
    G = gamma_hat(dataset, config, fit, spec, eta_hat, eps, _moments=moments)
    if np.linalg.matrix_rank(G) < G.shape[1]:
        raise EstimationError(
            "the moment Jacobian must have full column rank; the parameters are not locally identified"
        )
    cov = _covariance(G, weight, dataset.n)
    notes = ()
    if spec.J > spec.d_eta and obj < 1e-14 and crit(eta_tilde) < 1e-14:
        notes = ("criterion is flat near its minimum; check identification of every parameter subvector",)
    return GmmResult(
        eta_hat=eta_hat, first_stage_eta=eta_tilde, V_hat=V, Gamma_hat=G, covariance=cov,
        objective_value=obj, first_stage_objective=float(crit(eta_tilde)), n=dataset.n,
        epsilon_n=eps, pinv_weighting=singular, notes=notes,
    )

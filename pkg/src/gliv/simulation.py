"""Simulation designs, population values and a seeded Monte Carlo runner.

Two designs share everything but the covariate law: X is uniform on
(0.5, 0.7) or uniform on the five points 0.5, 0.55, ..., 0.7. Given X, the
type is drawn from Binomial(4, X) with values 0..4 mapped to s1, s2, s4, s5, s3
of the main example, the instrument is Bernoulli(X), and potential outcomes
are built from four independent normals.

Random numbers come from one counter-based stream per (seed, replication,
variable), so a replication can be regenerated alone and results do not
depend on how replications are scheduled.
"""
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, special

from .data import Dataset
from .errors import GlivError, ValidationError
from .estimators import ParameterId, estimate
from .nuisance import DiscreteCells, PolynomialSeries, fit, parse_learner
from .typeconfig import TypeConfig, main_example

X_POINTS = (0.5, 0.55, 0.6, 0.65, 0.7)
X_LOW, X_HIGH = 0.5, 0.7

# Binomial value -> column of the main example (s1, s2, s3, s4, s5)
VALUE_TO_TYPE = np.array([0, 1, 3, 4, 2])
DEFIER = 5

# mean shift of each potential outcome: (xi mean offset, uses the common xi)
# rows are types s1..s5 then the defier, columns treatments t1..t3;
# entries name the xi_j component: 1 -> xi1 (mean X), 2 -> xi2 (X+0.2), 3 -> xi3 (X+0.4)
_COMPONENT = np.array([
    [3, 2, 1],
    [2, 3, 1],
    [1, 1, 1],
    [3, 2, 1],
    [2, 3, 1],
    [3, 2, 1],
])
_COMMON = np.array([1, 1, 1, 0, 0, 0], dtype=bool)
_XI_MEAN = 0.1
_COMPONENT_OFFSET = np.array([0.0, 0.0, 0.2, 0.4])

_STREAMS = {"x": 0, "s": 1, "z": 2, "xi": 3, "xi1": 4, "xi2": 5, "xi3": 6, "defier": 7}


def defier_config():
    """Main example plus the type taking t1 at z1 and t3 at z2."""
    base = main_example()
    cols = [tuple(base.types[:, j]) for j in range(base.n_types)] + [("t1", "t3")]
    return TypeConfig.from_columns(base.treatments, base.instruments, cols,
                                   type_names=list(base.type_names) + ["defier"])


@dataclass(frozen=True)
class DgpSpec:
    """Simulation design.

    ``success_z2`` maps the Bernoulli success to the second instrument label.
    ``defier_share`` replaces that fraction of units by defiers whose
    potential outcomes are shifted up by ``defier_shift``; it is zero for the
    clean design.
    """

    x_kind: str = "discrete"
    n: int = 3000
    seed: int = 0
    success_z2: bool = True
    defier_share: float = 0.0
    defier_shift: float = 4.0

    def __post_init__(self):
        if self.x_kind not in ("discrete", "continuous"):
            raise ValidationError(f"x_kind must be 'discrete' or 'continuous', got {self.x_kind!r}")
        if int(self.n) < 1:
            raise ValidationError("n must be at least 1")
        if not 0.0 <= self.defier_share < 1.0:
            raise ValidationError("defier_share must lie in [0, 1)")


def _stream(seed, replication, name):
    ss = np.random.SeedSequence([int(seed) & (2**63 - 1), int(replication), _STREAMS[name]])
    return np.random.Generator(np.random.Philox(ss))


def _normal(seed, replication, name, n):
    u = _stream(seed, replication, name).random(n)
    return special.ndtri(u)


def generate(dgp, replication=0):
    """Draw one sample; returns the dataset and the latent type column index."""
    n, seed = int(dgp.n), dgp.seed
    ux = _stream(seed, replication, "x").random(n)
    if dgp.x_kind == "discrete":
        x = np.asarray(X_POINTS)[np.minimum((ux * 5).astype(int), 4)]
    else:
        x = X_LOW + (X_HIGH - X_LOW) * ux
    value = (_stream(seed, replication, "s").random((n, 4)) < x[:, None]).sum(axis=1)
    s = VALUE_TO_TYPE[value]
    if dgp.defier_share > 0:
        s = np.where(_stream(seed, replication, "defier").random(n) < dgp.defier_share, DEFIER, s)
    success = _stream(seed, replication, "z").random(n) < x
    z = np.where(success, 1, 0) if dgp.success_z2 else np.where(success, 0, 1)

    cfg = defier_config()
    tcode = {lab: i for i, lab in enumerate(cfg.treatments)}
    table = np.vectorize(tcode.get)(cfg.types)  # (N_Z, N_S) codes
    t = table[z, s]

    xi = _XI_MEAN + _normal(seed, replication, "xi", n)
    comps = np.column_stack([
        np.zeros(n),
        x + _normal(seed, replication, "xi1", n),
        x + 0.2 + _normal(seed, replication, "xi2", n),
        x + 0.4 + _normal(seed, replication, "xi3", n),
    ])
    y = comps[np.arange(n), _COMPONENT[s, t]] + np.where(_COMMON[s], xi, 0.0)
    if dgp.defier_share > 0:
        y = y + np.where(s == DEFIER, dgp.defier_shift, 0.0)
    ds = Dataset(y, t, z, x[:, None], cfg.treatments, cfg.instruments)
    return ds, s


# -- population quantities ---------------------------------------------------------

def _type_probs(x):
    """P(S = s | X = x) for the five main-example types, shape (m, 5)."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    out = np.zeros((x.size, 5))
    for v in range(5):
        out[:, VALUE_TO_TYPE[v]] += special.comb(4, v) * x ** v * (1 - x) ** (4 - v)
    return out


def _instrument_probs(x, success_z2=True):
    x = np.atleast_1d(np.asarray(x, dtype=float))
    pi = np.column_stack([1 - x, x])
    return pi if success_z2 else pi[:, ::-1]


def _outcome_moments(x):
    """Means and variances of Y_t given (S, X), shapes (m, 5, 3)."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    comp = _COMPONENT[:5]
    mean = x[:, None, None] + _COMPONENT_OFFSET[comp][None] + np.where(_COMMON[:5], _XI_MEAN, 0.0)[None, :, None]
    var = np.broadcast_to(np.where(_COMMON[:5], 2.0, 1.0)[None, :, None], mean.shape)
    return mean, var


class _Population:
    """Conditional laws of the clean design at covariate points."""

    def __init__(self, config, success_z2):
        self.config = config
        self.success_z2 = success_z2

    def pieces(self, param, x, theta):
        """Per-x integrands: numerator, denominator and bound terms."""
        cfg = self.config
        ps = _type_probs(x)
        pi = _instrument_probs(x, self.success_z2)
        mean, var = _outcome_moments(x)
        ti = cfg.treatment_index(param.t)
        takes = np.array([[cfg.types[i, j] == param.t for j in range(5)] for i in range(2)], dtype=float)
        members = np.zeros(5)
        members[list(cfg.partition(param.t)[param.k])] = 1.0
        bt = cfg.btilde(param.t, param.k)
        mu = mean[:, :, ti]
        v = var[:, :, ti]

        if param.kind in ("q", "gamma"):
            mask = cfg.w_mask(param.t_prime, param.t, param.k)
            tp = np.array([[cfg.types[i, j] == param.t_prime for j in range(5)] for i in range(2)], dtype=float)
            p_treated = pi @ tp  # (m, 5): P(T = t' | S = s, X)
            weight = ps * members * p_treated
            pi_w = pi[:, mask].sum(axis=1)
            in_w = mask.astype(float)
        else:
            weight = ps * members
            pi_w = np.ones(ps.shape[0])
            in_w = np.ones(2)

        if param.kind in ("p", "q"):
            num = weight.sum(axis=1)
            den = np.ones_like(num)
            # g = 1{T = t}; its conditional mean given (Z = z, X) is P_{t,z}
            m = ps @ takes.T
            g2 = m
            c = (m @ bt)[:, None] * in_w[None, :] - theta
        else:
            num = (weight * mu).sum(axis=1)
            den = weight.sum(axis=1)
            dev = mu - theta
            m = (ps * dev) @ takes.T
            g2 = (ps * (v + dev ** 2)) @ takes.T
            c = (m @ bt)[:, None] * in_w[None, :]
        w = bt[None, :] * pi_w[:, None] / pi
        bound = (pi * (w ** 2 * (g2 - m ** 2) + c ** 2)).sum(axis=1)
        return num, den, bound


def _expect(fun, x_kind):
    if x_kind == "discrete":
        return float(np.mean(fun(np.asarray(X_POINTS))))
    val, _ = integrate.quad(lambda u: float(fun(np.array([u]))[0]), X_LOW, X_HIGH,
                            epsabs=1e-13, epsrel=1e-12, limit=200)
    return val / (X_HIGH - X_LOW)


def _validate_target(param, config):
    param.validate(config)
    return param


def true_value(dgp, param):
    """Population value of ``param`` under the clean design."""
    pop = _Population(main_example(), dgp.success_z2)
    param = _validate_target(param, pop.config)
    num = _expect(lambda x: pop.pieces(param, x, 0.0)[0], dgp.x_kind)
    if param.kind in ("p", "q"):
        return num
    den = _expect(lambda x: pop.pieces(param, x, 0.0)[1], dgp.x_kind)
    return num / den


def efficiency_bound(dgp, param):
    """Standard deviation of the efficient influence function, sigma."""
    pop = _Population(main_example(), dgp.success_z2)
    param = _validate_target(param, pop.config)
    theta = true_value(dgp, param)
    scale = 1.0
    if param.is_ratio:
        scale = true_value(dgp, param.companion())
    v = _expect(lambda x: pop.pieces(param, x, theta)[2], dgp.x_kind)
    return float(np.sqrt(v) / abs(scale))


def true_values(dgp, params=None):
    """Mapping ParameterId -> population value for the main-example family."""
    cfg = main_example()
    if params is None:
        params = []
        for t in cfg.treatments:
            parts = cfg.partition(t)
            for k in range(1, cfg.n_instruments + 1):
                if not parts[k]:
                    continue
                params += [ParameterId.p(t, k), ParameterId.beta(t, k)]
                for tp in cfg.treatments:
                    if cfg.w_set(tp, t, k) is not None:
                        params += [ParameterId.q(tp, t, k)]
                        if cfg.w_set(tp, t, k):
                            params += [ParameterId.gamma(tp, t, k)]
    return {p: true_value(dgp, p) for p in params}


# -- Monte Carlo -------------------------------------------------------------

DEFAULT_TARGETS = (ParameterId.beta("t1", 1), ParameterId.beta("t2", 1), ParameterId.beta("t3", 1))


def default_learner(dgp):
    # the nuisance functions of the continuous design are polynomials of degree <= 6
    return DiscreteCells() if dgp.x_kind == "discrete" else PolynomialSeries(6)


@dataclass(frozen=True)
class McRow:
    parameter: str
    value: float
    mean_bias: float
    median_bias: float
    std: float
    rmse: float
    successes: int


@dataclass
class McSummary:
    """Stored per-replication draws and their bias, spread and RMSE summary.

    Standard deviations use ``ddof=0`` so that ``rmse**2 = bias**2 + std**2``.
    Rows for ``sigma`` summarize the plug-in ``sqrt(n) * se`` against the
    efficiency bound.
    """

    targets: tuple
    estimates: np.ndarray      # (reps, K), NaN where a replication failed
    std_errors: np.ndarray     # (reps, K)
    truths: np.ndarray         # (K,)
    sigmas: np.ndarray         # (K,) efficiency bounds
    n: int
    failures: list = field(default_factory=list)

    @property
    def reps(self):
        return self.estimates.shape[0]

    def _row(self, name, draws, value):
        ok = draws[np.isfinite(draws)]
        if ok.size == 0:
            return McRow(name, value, np.nan, np.nan, np.nan, np.nan, 0)
        err = ok - value
        return McRow(name, float(value), float(err.mean()), float(np.median(err)),
                     float(ok.std()), float(np.sqrt(np.mean(err ** 2))), int(ok.size))

    def rows(self):
        out = [self._row(str(p), self.estimates[:, i], self.truths[i]) for i, p in enumerate(self.targets)]
        scaled = self.std_errors * np.sqrt(self.n)
        out += [self._row(f"sigma[{p}]", scaled[:, i], self.sigmas[i]) for i, p in enumerate(self.targets)]
        return out

    def efficiency_ratio(self):
        """Across-replication std of each estimate over its mean standard error."""
        return np.nanstd(self.estimates, axis=0) / np.nanmean(self.std_errors, axis=0)

    def coverage(self, level_z=1.959963984540054):
        lo = self.estimates - level_z * self.std_errors
        hi = self.estimates + level_z * self.std_errors
        hit = (lo <= self.truths) & (self.truths <= hi)
        ok = np.isfinite(self.estimates)
        return np.array([hit[ok[:, i], i].mean() for i in range(len(self.targets))])

    def table(self):
        head = f"{'Parameter':<22}{'Value':>8}{'Mean Bias':>11}{'Median Bias':>13}{'Std Dev':>10}{'Root MSE':>10}{'Reps':>7}"
        lines = [head, "-" * len(head)]
        for r in self.rows():
            lines.append(f"{r.parameter:<22}{r.value:>8.4f}{r.mean_bias:>11.4f}{r.median_bias:>13.4f}"
                         f"{r.std:>10.4f}{r.rmse:>10.4f}{r.successes:>7d}")
        if self.failures:
            lines.append(f"failed replications: {len(self.failures)}")
        return "\n".join(lines)


@dataclass(frozen=True)
class _Job:
    dgp: DgpSpec
    targets: tuple
    estimator: str
    learner: object
    trim: float
    folds: int


def _fold_seed(dgp, replication):
    return int(np.random.SeedSequence([int(dgp.seed) & (2**63 - 1), int(replication), 99]).generate_state(1)[0])


def _one(job, replication):
    from .dml import dml2_generic, make_plan

    config = main_example()
    ds, _ = generate(job.dgp, replication)
    try:
        if job.estimator == "cep":
            nf = fit(ds, config, job.learner, job.trim)
            rep = estimate(ds, config, nf, job.targets, warn=False)
            return rep.estimates, rep.standard_errors, None
        plan = make_plan(ds.n, job.folds, _fold_seed(job.dgp, replication))
        est, se = [], []
        for p in job.targets:
            r = dml2_generic(ds, config, p, plan, job.learner, job.trim)
            est.append(r.estimate)
            se.append(r.se)
        return np.array(est), np.array(se), None
    except GlivError as exc:
        k = len(job.targets)
        return np.full(k, np.nan), np.full(k, np.nan), f"replication {replication}: {exc}"


def _chunk(args):
    job, reps = args
    return [_one(job, r) for r in reps]


def run_monte_carlo(dgp, reps, targets=DEFAULT_TARGETS, estimator_kind="cep", parallelism=1,
                    learner=None, trim_floor=0.01, folds=5):
    """Replicate ``estimator_kind`` ("cep" or "dml") over ``reps`` samples."""
    if int(reps) < 2:
        raise ValidationError("reps must be at least 2")
    if estimator_kind not in ("cep", "dml"):
        raise ValidationError(f"estimator must be 'cep' or 'dml', got {estimator_kind!r}")
    targets = tuple(targets)
    for p in targets:
        _validate_target(p, main_example())
    learner = default_learner(dgp) if learner is None else parse_learner(learner)
    job = _Job(dgp, targets, estimator_kind, learner, float(trim_floor), int(folds))

    workers = max(1, int(parallelism))
    indices = list(range(int(reps)))
    if workers == 1:
        results = [_one(job, r) for r in indices]
    else:
        size = -(-len(indices) // (4 * workers))
        chunks = [(job, indices[i:i + size]) for i in range(0, len(indices), size)]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = [res for part in pool.map(_chunk, chunks) for res in part]

    clean = DgpSpec(dgp.x_kind, dgp.n, dgp.seed, dgp.success_z2)
    return McSummary(
        targets=targets,
        estimates=np.array([r[0] for r in results]),
        std_errors=np.array([r[1] for r in results]),
        truths=np.array([true_value(clean, p) for p in targets]),
        sigmas=np.array([efficiency_bound(clean, p) for p in targets]),
        n=int(dgp.n),
        failures=[r[2] for r in results if r[2] is not None],
    )

"""Shared builders for the test suite."""
import itertools

import numpy as np

from gliv.data import Dataset
from gliv.typeconfig import TypeConfig, check_unordered_monotonicity

X_POINTS = (0.5, 0.55, 0.6, 0.65, 0.7)


def random_config(rng, max_treatments=3, max_instruments=3, max_types=6):
    """Configuration with random distinct type columns (may violate monotonicity)."""
    nt = int(rng.integers(2, max_treatments + 1))
    nz = int(rng.integers(2, max_instruments + 1))
    labels = [f"t{i}" for i in range(nt)]
    pool = list(itertools.product(range(nt), repeat=nz))
    ns = int(rng.integers(1, min(max_types, len(pool)) + 1))
    pick = rng.choice(len(pool), size=ns, replace=False)
    cols = [tuple(labels[v] for v in pool[i]) for i in pick]
    return TypeConfig.from_columns(labels, [f"z{i}" for i in range(nz)], cols)


def random_monotone_config(rng, **kw):
    """Rejection sampler over ``random_config`` restricted to monotone supports."""
    while True:
        cfg = random_config(rng, **kw)
        if check_unordered_monotonicity(cfg):
            return cfg


def penrose_residuals(m, mp):
    return (
        np.abs(m @ mp @ m - m).max(),
        np.abs(mp @ m @ mp - mp).max(),
        np.abs((m @ mp).T - m @ mp).max(),
        np.abs((mp @ m).T - mp @ m).max(),
    )


def population_sample(config, type_probs, z_probs, outcome, n, rng, x_points=X_POINTS):
    """Sample from a population with discrete X.

    ``type_probs(x)`` and ``z_probs(x)`` give the type and instrument laws at a
    covariate value; ``outcome(t_code, s, x, rng)`` draws outcomes.
    """
    x = rng.choice(np.asarray(x_points), size=n)
    s = np.empty(n, dtype=int)
    z = np.empty(n, dtype=int)
    for v in np.unique(x):
        idx = np.flatnonzero(x == v)
        s[idx] = rng.choice(config.n_types, size=idx.size, p=type_probs(v))
        z[idx] = rng.choice(config.n_instruments, size=idx.size, p=z_probs(v))
    code = {lab: i for i, lab in enumerate(config.treatments)}
    table = np.vectorize(code.get)(config.types)
    t = table[z, s]
    y = outcome(t, s, x, rng)
    return Dataset(y, t, z, x, config.treatments, config.instruments), s


def cell_mean(values, mask):
    return values[mask].sum() / mask.sum()

"""Type support, unordered monotonicity and the response-matrix algebra.

A type is the vector of treatments an individual would take under each
instrument value. The support is stored as an ``N_Z x N_S`` label matrix whose
column ``j`` is type ``s_j``. Everything the estimators need (response matrices,
their pseudoinverses, the partitions by how often a treatment appears, the
contraction rows ``b_tilde`` and the instrument sets ``W``) is derived here.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import MonotonicityError, ValidationError

SVD_CUTOFF = 1e-12


def pseudoinverse(m, cutoff=SVD_CUTOFF):
    """Moore-Penrose inverse through the SVD.

    Singular values below ``cutoff`` (absolute) are treated as zero.
    """
    m = np.atleast_2d(np.asarray(m, dtype=float))
    if not np.all(np.isfinite(m)):
        raise ValidationError("pseudoinverse requires finite entries")
    u, s, vt = np.linalg.svd(m, full_matrices=False)
    s_inv = np.zeros_like(s)
    keep = s > cutoff
    s_inv[keep] = 1.0 / s[keep]
    return (vt.T * s_inv) @ u.T


def find_forbidden_submatrix(b):
    """Return ``(rows, cols)`` of a 2x2 permutation submatrix, or None.

    A binary matrix is lonesum exactly when no such submatrix exists.
    """
    b = np.asarray(b)
    n_rows, n_cols = b.shape
    for i, k in itertools.combinations(range(n_rows), 2):
        diff = b[i].astype(int) - b[k].astype(int)
        pos = np.flatnonzero(diff > 0)
        neg = np.flatnonzero(diff < 0)
        if pos.size and neg.size:
            cols = tuple(sorted((int(pos[0]), int(neg[0]))))
            return (i, k), cols
    return None


@dataclass(frozen=True)
class EqualityRestriction:
    """``sum of p over left == sum of p over right`` for (t, k) cells.

    ``automatic`` marks relations that hold identically for every observable
    distribution (they follow from treatment probabilities summing to one), so
    they carry no overidentifying content.
    """

    left: tuple
    right: tuple
    automatic: bool

    def __str__(self):
        def side(cells):
            if not cells:
                return "0"
            return " + ".join(f"p[{t},{k}]" for t, k in cells)

        tag = "identity" if self.automatic else "overidentifying"
        return f"{side(self.left)} = {side(self.right)}  ({tag})"


@dataclass(frozen=True)
class TypeConfig:
    treatments: tuple
    instruments: tuple
    types: np.ndarray = field(repr=False)
    type_names: tuple = None

    def __post_init__(self):
        treatments = tuple(str(t) for t in self.treatments)
        instruments = tuple(str(z) for z in self.instruments)
        types = np.asarray(self.types, dtype=object)
        if types.ndim != 2:
            raise ValidationError("types must be a 2-d label matrix (instruments x types)")
        if len(set(treatments)) != len(treatments):
            raise ValidationError("treatment labels must be distinct")
        if len(set(instruments)) != len(instruments):
            raise ValidationError("instrument labels must be distinct")
        if len(treatments) < 2 or len(instruments) < 2:
            raise ValidationError("need at least two treatments and two instruments")
        if types.shape[0] != len(instruments) or types.shape[1] < 1:
            raise ValidationError(
                f"types has shape {types.shape}; expected ({len(instruments)}, N_S>=1)"
            )
        types = np.vectorize(str, otypes=[object])(types)
        unknown = sorted(set(types.ravel()) - set(treatments))
        if unknown:
            raise ValidationError(f"types use unknown treatment labels: {unknown}")
        columns = [tuple(col) for col in types.T]
        if len(set(columns)) != len(columns):
            raise ValidationError("types must be pairwise distinct columns")
        names = self.type_names
        if names is None:
            names = tuple(f"s{j + 1}" for j in range(types.shape[1]))
        elif len(names) != types.shape[1]:
            raise ValidationError("type_names length does not match the number of types")
        types.setflags(write=False)
        object.__setattr__(self, "treatments", treatments)
        object.__setattr__(self, "instruments", instruments)
        object.__setattr__(self, "types", types)
        object.__setattr__(self, "type_names", tuple(str(s) for s in names))

    def __hash__(self):
        return hash((self.treatments, self.instruments, tuple(map(tuple, self.types))))

    def __eq__(self, other):
        if not isinstance(other, TypeConfig):
            return NotImplemented
        return (
            self.treatments == other.treatments
            and self.instruments == other.instruments
            and np.array_equal(self.types, other.types)
        )

    @property
    def n_treatments(self):
        return len(self.treatments)

    @property
    def n_instruments(self):
        return len(self.instruments)

    @property
    def n_types(self):
        return self.types.shape[1]

    def treatment_index(self, t):
        try:
            return self.treatments.index(str(t))
        except ValueError:
            raise ValidationError(f"unknown treatment label {t!r}") from None

    def instrument_index(self, z):
        try:
            return self.instruments.index(str(z))
        except ValueError:
            raise ValidationError(f"unknown instrument label {z!r}") from None

    def _check_k(self, k):
        if not isinstance(k, (int, np.integer)) or not 1 <= k <= self.n_instruments:
            raise ValidationError(f"k must be an integer in 1..{self.n_instruments}, got {k!r}")

    # -- combinatorial objects, cached per treatment --------------------

    @cached_property
    def _response(self):
        return {
            t: (self.types == t).astype(float) for t in self.treatments
        }

    @cached_property
    def _pinv(self):
        return {t: pseudoinverse(b) for t, b in self._response.items()}

    def response_matrix(self, t):
        self.treatment_index(t)
        return self._response[str(t)].copy()

    def response_pinv(self, t):
        self.treatment_index(t)
        return self._pinv[str(t)].copy()

    def partition(self, t):
        """Column indices of the types in which ``t`` appears exactly k times.

        Returns a list indexed by k = 0..N_Z.
        """
        counts = self.response_matrix(t).sum(axis=0).astype(int)
        return [tuple(int(j) for j in np.flatnonzero(counts == k)) for k in range(self.n_instruments + 1)]

    def indicator_row(self, t, k):
        members = self.partition(t)[k]
        b = np.zeros(self.n_types)
        b[list(members)] = 1.0
        return b

    def btilde(self, t, k):
        self._check_k(k)
        return self.indicator_row(t, k) @ self._pinv[str(self.treatments[self.treatment_index(t)])]

    def w_set(self, t_prime, t, k):
        """Instrument labels at which every type in the (t, k) cell takes ``t_prime``.

        Returns None when the cell's types disagree on that set, so the
        treated-subpopulation parameters are not identified.
        """
        self._check_k(k)
        self.treatment_index(t_prime)
        members = self.partition(t)[k]
        if not members:
            raise ValidationError(f"the type cell for ({t}, {k}) is empty")
        sets = {
            tuple(z for i, z in enumerate(self.instruments) if self.types[i, j] == str(t_prime))
            for j in members
        }
        if len(sets) != 1:
            return None
        return frozenset(sets.pop())

    def w_mask(self, t_prime, t, k):
        """Boolean mask over instruments for ``w_set``; None when absent."""
        w = self.w_set(t_prime, t, k)
        if w is None:
            return None
        return np.array([z in w for z in self.instruments])

    # -- monotonicity ---------------------------------------------------

    def monotonicity_violation(self):
        """First (treatment, rows, cols) with a forbidden submatrix, else None."""
        for t in self.treatments:
            hit = find_forbidden_submatrix(self._response[t])
            if hit is not None:
                return t, hit[0], hit[1]
        return None

    def require_monotone(self):
        hit = self.monotonicity_violation()
        if hit is not None:
            t, rows, cols = hit
            z = [self.instruments[i] for i in rows]
            s = [self.type_names[j] for j in cols]
            sub = self._response[t][np.ix_(rows, cols)].astype(int).tolist()
            raise MonotonicityError(
                f"unordered monotonicity fails for treatment {t}: response submatrix "
                f"rows {z} x types {s} = {sub}",
                treatment=t, rows=rows, cols=cols,
            )

    # -- serialization --------------------------------------------------

    def to_dict(self):
        return {
            "treatments": list(self.treatments),
            "instruments": list(self.instruments),
            "types": [list(col) for col in self.types.T],
            "type_names": list(self.type_names),
        }

    @classmethod
    def from_dict(cls, d):
        try:
            cols = d["types"]
            types = np.array(cols, dtype=object).T if len(cols) else np.empty((0, 0))
            return cls(d["treatments"], d["instruments"], types, d.get("type_names"))
        except KeyError as exc:
            raise ValidationError(f"config JSON is missing key {exc}") from None

    @classmethod
    def from_columns(cls, treatments, instruments, columns, type_names=None):
        return cls(treatments, instruments, np.array(columns, dtype=object).T, type_names)


def check_unordered_monotonicity(config):
    return config.monotonicity_violation() is None


def build_response_matrix(config, t):
    return config.response_matrix(t)


def partition(config, t):
    return config.partition(t)


def btilde(config, t, k):
    return config.btilde(t, k)


def w_set(config, t_prime, t, k):
    return config.w_set(t_prime, t, k)


def _relation_is_automatic(config, left, right):
    # The linear functional sum_L btilde.P_t - sum_R btilde.P_t vanishes on every
    # table of P[t, z] with columns summing to one iff its coefficients do not
    # depend on t and add up to zero.
    coef = np.zeros((config.n_treatments, config.n_instruments))
    for sign, cells in ((1.0, left), (-1.0, right)):
        for t, k in cells:
            coef[config.treatment_index(t)] += sign * config.btilde(t, k)
    if not np.allclose(coef, coef[0], atol=1e-10):
        return False
    return bool(abs(coef[0].sum()) < 1e-10)


def find_equality_restrictions(config):
    """Equalities among type probabilities implied by coinciding type sets.

    Only exact set-union coincidences between families of pairwise disjoint
    (t, k) cells are reported, reduced to minimal relations. Cells whose type
    set is empty yield ``p = 0``.
    """
    cells = [(t, k) for t in config.treatments for k in range(1, config.n_instruments + 1)]
    sets = {c: frozenset(config.partition(c[0])[c[1]]) for c in cells}
    out = [EqualityRestriction((c,), (), _relation_is_automatic(config, (c,), ()))
           for c in cells if not sets[c]]
    live = [c for c in cells if sets[c]]

    by_union = {}
    for r in range(1, len(live) + 1):
        for family in itertools.combinations(live, r):
            members = [sets[c] for c in family]
            total = sum(len(m) for m in members)
            union = frozenset().union(*members)
            if len(union) != total:
                continue
            by_union.setdefault(union, []).append(frozenset(family))

    found = []
    for union, families in by_union.items():
        for a, b in itertools.combinations(families, 2):
            if a & b:
                continue
            found.append((a, b))

    def reducible(a, b):
        # a smaller relation sits inside (a, b) when proper sub-families share a union
        for ra in range(1, len(a) + 1):
            for sa in itertools.combinations(sorted(a), ra):
                ua = frozenset().union(*(sets[c] for c in sa))
                for rb in range(1, len(b) + 1):
                    for sb in itertools.combinations(sorted(b), rb):
                        if len(sa) == len(a) and len(sb) == len(b):
                            continue
                        if ua == frozenset().union(*(sets[c] for c in sb)):
                            return True
        return False

    order = {c: i for i, c in enumerate(cells)}
    for a, b in found:
        if reducible(a, b):
            continue
        left = tuple(sorted(a, key=order.get))
        right = tuple(sorted(b, key=order.get))
        if len(left) < len(right) or (len(left) == len(right) and order[left[0]] > order[right[0]]):
            left, right = right, left
        out.append(EqualityRestriction(left, right, _relation_is_automatic(config, left, right)))
    return out


def reduced_inequalities(config):
    """Range checks that are not automatically satisfied by cell frequencies.

    A lower bound ``Q >= 0`` is informative only when ``b_tilde`` has a
    negative entry; an upper bound ``Q <= 1`` only when its positive entries
    sum above one. Returns ``(t, k, bound)`` triples with bound in
    {"lower", "upper"}.
    """
    out = []
    for t in config.treatments:
        parts = config.partition(t)
        for k in range(1, config.n_instruments + 1):
            if not parts[k]:
                continue
            bt = config.btilde(t, k)
            if np.any(bt < -1e-12):
                out.append((t, k, "lower"))
            if bt[bt > 0].sum() > 1 + 1e-12:
                out.append((t, k, "upper"))
    return out


# -- presets ----------------------------------------------------------------

def main_example():
    return TypeConfig.from_columns(
        ["t1", "t2", "t3"],
        ["z1", "z2"],
        [("t1", "t1"), ("t2", "t2"), ("t3", "t3"), ("t3", "t1"), ("t3", "t2")],
    )


def binary_late():
    return TypeConfig.from_columns(
        ["t0", "t1"],
        ["z0", "z1"],
        [("t1", "t1"), ("t0", "t1"), ("t0", "t0")],
        type_names=["always", "complier", "never"],
    )


PRESETS = {"main_example": main_example, "binary_late": binary_late}


def load_config(spec):
    """Load a preset by name or a JSON file by path."""
    if str(spec) in PRESETS:
        return PRESETS[str(spec)]()
    path = Path(spec)
    if not path.exists():
        raise ValidationError(f"config {spec!r} is neither a preset ({', '.join(PRESETS)}) nor a file")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config file {path} is not valid JSON: {exc}") from None
    return TypeConfig.from_dict(data)

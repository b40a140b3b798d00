import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gliv.errors import MonotonicityError, ValidationError
from gliv.typeconfig import (
    TypeConfig,
    binary_late,
    btilde,
    build_response_matrix,
    check_unordered_monotonicity,
    find_equality_restrictions,
    load_config,
    main_example,
    partition,
    pseudoinverse,
    reduced_inequalities,
    w_set,
)

from support import penrose_residuals, random_monotone_config


@pytest.fixture
def cfg():
    return main_example()


def test_presets_are_monotone():
    assert check_unordered_monotonicity(main_example())
    assert check_unordered_monotonicity(binary_late())


def test_defier_pair_is_not_monotone():
    cfg = TypeConfig.from_columns(["t1", "t2"], ["z1", "z2"], [("t1", "t2"), ("t2", "t1")])
    assert not check_unordered_monotonicity(cfg)
    with pytest.raises(MonotonicityError, match=r"\[\[1, 0\], \[0, 1\]\]"):
        cfg.require_monotone()


@pytest.mark.parametrize("t, expected", [
    ("t1", [[1, 0, 0, 0, 0], [1, 0, 0, 1, 0]]),
    ("t3", [[0, 0, 1, 1, 1], [0, 0, 1, 0, 0]]),
])
def test_response_matrix(cfg, t, expected):
    assert build_response_matrix(cfg, t).tolist() == expected


def test_response_matrix_zero_when_never_taken():
    single = TypeConfig.from_columns(["a", "b"], ["z1", "z2"], [("a", "a")])
    assert not build_response_matrix(single, "b").any()


def test_unknown_treatment_rejected(cfg):
    with pytest.raises(ValidationError):
        build_response_matrix(cfg, "t9")
    with pytest.raises(ValidationError):
        partition(cfg, "t9")


def test_pinv_t3_matches_display(cfg):
    expected = np.array([[0, 0], [0, 0], [0, 1], [0.5, -0.5], [0.5, -0.5]])
    assert np.allclose(cfg.response_pinv("t3"), expected, atol=1e-14)


def test_pinv_identity():
    assert np.allclose(pseudoinverse(np.eye(4)), np.eye(4))


def test_pinv_random_lonesum():
    rng = np.random.default_rng(3)
    # sorted rows of a staircase give a lonesum matrix
    for _ in range(20):
        widths = np.sort(rng.integers(0, 6, size=2))
        m = np.array([[1.0 if j < w else 0.0 for j in range(5)] for w in widths])
        m = m[:, rng.permutation(5)]
        assert max(penrose_residuals(m, pseudoinverse(m))) < 1e-10


def test_partition_main_example(cfg):
    assert partition(cfg, "t1") == [(1, 2, 4), (3,), (0,)]
    assert partition(cfg, "t3") == [(0, 1), (3, 4), (2,)]


def test_partition_single_type():
    single = TypeConfig.from_columns(["a", "b"], ["z1", "z2", "z3"], [("a", "a", "a")])
    parts = partition(single, "a")
    assert parts[3] == (0,)
    assert all(parts[k] == () for k in range(3))


@pytest.mark.parametrize("t, k, expected", [
    ("t1", 1, (-1, 1)),
    ("t1", 2, (1, 0)),
    ("t3", 1, (1, -1)),
    ("t3", 2, (0, 1)),
])
def test_btilde_main_example(cfg, t, k, expected):
    assert np.allclose(btilde(cfg, t, k), expected, atol=1e-12)


def test_btilde_binary():
    cfg = binary_late()
    assert np.allclose(btilde(cfg, "t0", 1), (1, -1))
    assert np.allclose(btilde(cfg, "t1", 1), (-1, 1))


@pytest.mark.parametrize("k", [0, 3, -1])
def test_btilde_k_out_of_range(cfg, k):
    with pytest.raises(ValidationError):
        btilde(cfg, "t1", k)


def test_w_sets(cfg):
    assert w_set(cfg, "t3", "t3", 1) == {"z1"}
    assert w_set(cfg, "t1", "t3", 1) is None
    assert w_set(cfg, "t1", "t1", 2) == {"z1", "z2"}
    # derived from the configuration: s4 takes t1 at z2 only
    assert w_set(cfg, "t1", "t1", 1) == {"z2"}
    assert w_set(cfg, "t2", "t1", 1) == frozenset()


def test_w_set_empty_cell_errors():
    base = main_example()
    cfg = TypeConfig.from_columns(base.treatments, base.instruments,
                                  [tuple(base.types[:, j]) for j in range(4)])
    with pytest.raises(ValidationError):
        w_set(cfg, "t2", "t2", 1)


def test_restrictions_main_example(cfg):
    rels = find_equality_restrictions(cfg)
    assert len(rels) == 1
    rel = rels[0]
    assert set(rel.left) == {("t1", 1), ("t2", 1)}
    assert rel.right == (("t3", 1),)
    assert rel.automatic


def test_restrictions_without_s5():
    base = main_example()
    cols = [tuple(base.types[:, j]) for j in range(4)]
    cfg = TypeConfig.from_columns(base.treatments, base.instruments, cols)
    rels = {(r.left, r.right): r for r in find_equality_restrictions(cfg)}
    assert ((("t2", 1),), ()) in rels
    over = [r for r in rels.values() if not r.automatic]
    assert len(over) == 1
    assert {over[0].left, over[0].right} == {(("t1", 1),), (("t3", 1),)}


def test_restrictions_binary():
    rels = find_equality_restrictions(binary_late())
    assert len(rels) == 1
    assert {rels[0].left, rels[0].right} == {(("t0", 1),), (("t1", 1),)}


def test_reduced_inequalities():
    assert reduced_inequalities(main_example()) == [("t1", 1, "lower"), ("t2", 1, "lower"), ("t3", 1, "lower")]
    assert reduced_inequalities(binary_late()) == [("t0", 1, "lower"), ("t1", 1, "lower")]


def test_json_round_trip(tmp_path, cfg):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg.to_dict()))
    assert load_config(str(path)) == cfg
    assert load_config("binary_late") == binary_late()


@pytest.mark.parametrize("types, match", [
    ([("t1", "t9")], "unknown"),
    ([("t1", "t2"), ("t1", "t2")], "distinct"),
])
def test_invalid_configs(types, match):
    with pytest.raises(ValidationError, match=match):
        TypeConfig.from_columns(["t1", "t2"], ["z1", "z2"], types)


def test_too_few_instruments():
    with pytest.raises(ValidationError):
        TypeConfig.from_columns(["t1", "t2"], ["z1"], [("t1",)])


def test_missing_config_file():
    with pytest.raises(ValidationError):
        load_config("/no/such/config.json")


# -- properties over random monotone configurations ----------------------------

@st.composite
def monotone_configs(draw):
    seed = draw(st.integers(0, 2**32 - 1))
    return random_monotone_config(np.random.default_rng(seed))


@settings(max_examples=60, deadline=None)
@given(monotone_configs())
def test_penrose_conditions(cfg):
    for t in cfg.treatments:
        b = cfg.response_matrix(t)
        assert max(penrose_residuals(b, cfg.response_pinv(t))) < 1e-10


@settings(max_examples=60, deadline=None)
@given(monotone_configs())
def test_response_matrices_partition_rows(cfg):
    total = sum(cfg.response_matrix(t) for t in cfg.treatments)
    assert np.array_equal(total, np.ones_like(total))


@settings(max_examples=60, deadline=None)
@given(monotone_configs())
def test_btilde_reproduces_membership(cfg):
    for t in cfg.treatments:
        parts = cfg.partition(t)
        b = cfg.response_matrix(t)
        for k in range(1, cfg.n_instruments + 1):
            member = np.zeros(cfg.n_types)
            member[list(parts[k])] = 1
            assert np.allclose(cfg.btilde(t, k) @ b, member, atol=1e-9)


@settings(max_examples=60, deadline=None)
@given(monotone_configs())
def test_own_treatment_w_set_exists(cfg):
    for t in cfg.treatments:
        parts = cfg.partition(t)
        for k in range(1, cfg.n_instruments + 1):
            if parts[k]:
                assert cfg.w_set(t, t, k) is not None


@settings(max_examples=60, deadline=None)
@given(monotone_configs())
def test_partition_is_a_partition(cfg):
    for t in cfg.treatments:
        parts = cfg.partition(t)
        flat = [j for p in parts for j in p]
        assert sorted(flat) == list(range(cfg.n_types))

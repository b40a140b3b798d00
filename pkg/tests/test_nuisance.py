import numpy as np
import pytest

from gliv.data import Dataset, read_csv, write_csv
from gliv.errors import EmptyCellError, EstimationError, ValidationError
from gliv.nuisance import DiscreteCells, PolynomialSeries, canonical_rows, eval_vectors, fit, parse_learner
from gliv.simulation import DgpSpec, generate
from gliv.typeconfig import binary_late, main_example


def _one_cell(t, z, y=None, x=0.3):
    cfg = binary_late()
    n = len(t)
    y = np.zeros(n) if y is None else y
    return cfg, Dataset(y, t, z, np.full(n, x), cfg.treatments, cfg.instruments)


@pytest.fixture(scope="module")
def big_sample():
    ds, _ = generate(DgpSpec("discrete", 100_000, 17))
    return ds


def test_treatment_shares_in_single_cell():
    # z1 arm all takes t1, z0 arm never does
    cfg, ds = _one_cell(t=[0, 0, 1, 1], z=[0, 0, 1, 1])
    P, _, pi = eval_vectors(fit(ds, cfg), [0.3], "t1", cfg)
    assert P.tolist() == [0.0, 1.0]
    assert pi.tolist() == [0.5, 0.5]


def test_division_by_propensity():
    # five z0 rows with one t1, five z1 rows with four t1
    cfg, ds = _one_cell(t=[1, 0, 0, 0, 0, 1, 1, 1, 1, 0], z=[0] * 5 + [1] * 5)
    nf = fit(ds, cfg)
    vals = nf.evaluate(np.array([[0.3]]))
    assert np.allclose(vals.h_t[0, 1], [0.1, 0.4])
    P, _, _ = eval_vectors(nf, [0.3], "t1", cfg)
    assert np.allclose(P, [0.2, 0.8])


def test_trim_floor_applies_to_division():
    t = np.zeros(100, dtype=int)
    z = np.ones(100, dtype=int)
    z[0], t[0] = 0, 1
    cfg, ds = _one_cell(t=t, z=z)
    nf = fit(ds, cfg, trim_floor=0.05)
    P, _, pi = eval_vectors(nf, [0.3], "t1", cfg)
    assert pi[0] == pytest.approx(0.01)
    assert P[0] == pytest.approx(0.01 / 0.05)


def test_constant_outcome_scales_treatment_projection(big_sample):
    cfg = main_example()
    ds = big_sample.with_outcome(np.full(big_sample.n, 3.0))
    vals = fit(ds, cfg).evaluate()
    assert np.allclose(vals.h_y, 3 * vals.h_t, atol=1e-14)


@pytest.mark.parametrize("x", [0.5, 0.55, 0.6, 0.65, 0.7])
def test_propensity_tracks_bernoulli_law(big_sample, x):
    _, _, pi = eval_vectors(fit(big_sample, main_example()), [x], "t1", main_example())
    assert abs(pi[1] - x) < 0.02


@pytest.mark.parametrize("x", [0.5, 0.55, 0.6, 0.65, 0.7])
def test_treatment_probabilities_match_type_law(big_sample, x):
    cfg = main_example()
    P, _, _ = eval_vectors(fit(big_sample, cfg), [x], "t1", cfg)
    # t1 is taken by s1 at z1 and by s1, s4 at z2
    p_s1 = (1 - x) ** 4
    p_s4 = 6 * x ** 2 * (1 - x) ** 2
    assert abs(P[0] - p_s1) < 0.02
    assert abs(P[1] - (p_s1 + p_s4)) < 0.02


def test_cell_identities(big_sample):
    cfg = main_example()
    nf = fit(big_sample, cfg)
    vals = nf.evaluate()
    assert np.allclose(vals.pi.sum(axis=1), 1.0, atol=1e-12)
    assert np.allclose(vals.h_t.sum(axis=1), vals.pi, atol=1e-12)
    assert np.allclose(vals.P.sum(axis=1), 1.0, atol=1e-12)


def test_within_cell_moment_identity(big_sample):
    cfg = main_example()
    nf = fit(big_sample, cfg)
    vals = nf.evaluate()
    cell = nf.cell_index()
    rows = np.arange(big_sample.n)
    for ti in range(cfg.n_treatments):
        resid = big_sample.y * (big_sample.t == ti) - vals.I[rows, ti, big_sample.z]
        for c in np.unique(cell):
            for zi in range(cfg.n_instruments):
                sel = (cell == c) & (big_sample.z == zi)
                assert abs(resid[sel].sum()) < 1e-8


def test_series_reproduces_cells():
    cfg = main_example()
    ds, _ = generate(DgpSpec("discrete", 4000, 2))
    a = fit(ds, cfg, DiscreteCells()).evaluate()
    # four distinct powers interpolate five support points exactly
    b = fit(ds, cfg, PolynomialSeries(4)).evaluate()
    for name in ("pi", "h_t", "h_y"):
        assert np.allclose(getattr(a, name), getattr(b, name), atol=1e-8)


def test_series_rank_deficient():
    cfg = main_example()
    ds, _ = generate(DgpSpec("discrete", 500, 2))
    with pytest.raises(EstimationError, match="rank"):
        fit(ds, cfg, PolynomialSeries(5))


def test_series_propensity_on_simplex():
    cfg = main_example()
    ds, _ = generate(DgpSpec("continuous", 2000, 4))
    nf = fit(ds, cfg, PolynomialSeries(3), trim_floor=0.05)
    vals = nf.evaluate(np.linspace(0.4, 0.8, 50)[:, None])
    assert np.allclose(vals.pi.sum(axis=1), 1.0)
    assert vals.pi_trim.min() >= 0.05


def test_empty_instrument_cell_named():
    cfg, ds = _one_cell(t=[0, 1, 1], z=[0, 0, 0])
    with pytest.raises(EmptyCellError, match=r"0\.3.*z1"):
        fit(ds, cfg)


def test_unseen_cell_rejected():
    cfg, ds = _one_cell(t=[0, 1], z=[0, 1])
    with pytest.raises(EmptyCellError):
        fit(ds, cfg).evaluate(np.array([[0.9]]))


def test_canonical_rounding_merges_representations():
    x = np.array([[0.1 + 0.2], [0.3], [0.0], [-2.5e-7]])
    r = canonical_rows(x)
    assert r[0, 0] == r[1, 0]
    assert r[2, 0] == 0.0
    assert r[3, 0] == -2.5e-7


@pytest.mark.parametrize("text, expected", [
    ("cells", DiscreteCells()),
    ("series:3", PolynomialSeries(3)),
])
def test_parse_learner(text, expected):
    assert parse_learner(text) == expected


@pytest.mark.parametrize("text", ["kernel", "series:x", "series:-1"])
def test_parse_learner_rejects(text):
    with pytest.raises(ValidationError):
        parse_learner(text)


def test_trim_floor_range():
    cfg, ds = _one_cell(t=[0, 1], z=[0, 1])
    with pytest.raises(ValidationError):
        fit(ds, cfg, trim_floor=0.6)


# -- data layer -----------------------------------------------------------------

def test_csv_round_trip(tmp_path):
    cfg = main_example()
    ds, _ = generate(DgpSpec("continuous", 50, 9))
    path = tmp_path / "d.csv"
    write_csv(ds, path)
    back = read_csv(path, cfg)
    assert np.array_equal(back.y, ds.y)
    assert np.array_equal(back.x, ds.x)
    assert np.array_equal(back.t, ds.t)
    assert np.array_equal(back.z, ds.z)


def test_csv_unknown_label(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("y,t,z,x1\n1.0,t1,z1,0.5\n2.0,t7,z2,0.5\n")
    with pytest.raises(ValidationError, match="t7"):
        read_csv(path, main_example())


@pytest.mark.parametrize("body", [
    "y,t,z\n1,t1,z1\n",
    "y,t,z,x1\n1,t1,z1,\n",
    "y,t,x1\n1,t1,0.5\n",
])
def test_csv_malformed(tmp_path, body):
    path = tmp_path / "d.csv"
    path.write_text(body)
    with pytest.raises(ValidationError):
        read_csv(path, main_example())


def test_dataset_rejects_nonfinite():
    cfg = main_example()
    with pytest.raises(ValidationError):
        Dataset([np.nan], [0], [0], [0.5], cfg.treatments, cfg.instruments)

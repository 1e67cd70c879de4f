import io
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drciv import Dataset, diagnose, load_dataset
from drciv.dataset import DiscreteTreatmentWarning
from drciv.errors import ParseError, SchemaError, SupportError
from drciv.simulate import generate, preset

SCHEMA = {"outcome": "y", "treatment": "t", "instrument": "z", "covariates": ["x"]}


def _csv(rows, header="y,t,z,x"):
    return header + "\n" + "\n".join(",".join(str(c) for c in r) for r in rows) + "\n"


def test_load_ten_rows():
    rows = [(i * 0.1, 1 + i * 0.37, i % 2, i * 1.5) for i in range(10)]
    d = load_dataset(_csv(rows), SCHEMA)
    assert d.n == 10 and d.K == 1 and d.d_x == 1
    np.testing.assert_allclose(d.treatment, [r[1] for r in rows])


def test_raw_codes_reindexed_with_labels():
    rows = [(i, i + 0.5, 2 * (i % 2), 0.1 * i) for i in range(6)]
    d = load_dataset(_csv(rows), SCHEMA)
    assert sorted(set(d.instrument.tolist())) == [0, 1]
    assert d.instrument_labels == ("0", "2")


def test_declared_order_kept():
    rows = [(i, i + 0.5, ["b", "a", "c"][i % 3], 0.1 * i) for i in range(9)]
    d = load_dataset(_csv(rows), {**SCHEMA, "instrument_order": ["c", "a", "b"]})
    assert d.instrument_labels == ("c", "a", "b")
    assert d.instrument[0] == 2 and d.instrument[1] == 1 and d.instrument[2] == 0


def test_empty_class_after_filtering():
    rows = [(1, 1.5, 0, 0.1), (2, 2.5, 0, 0.2), ("NA", 3.5, 1, 0.3)]
    with pytest.raises(SupportError):
        load_dataset(_csv(rows), SCHEMA)


def test_missing_rows_dropped_and_counted():
    rows = [(1, 1.5, 0, 0.1), (2, 2.5, 1, ""), (3, 3.5, 1, 0.3), (4, 4.5, 0, 0.4)]
    d = load_dataset(_csv(rows), SCHEMA)
    assert d.n == 3 and d.dropped_rows == 1


def test_missing_column():
    with pytest.raises(SchemaError):
        load_dataset(_csv([(1, 2, 0, 1)]), {**SCHEMA, "covariates": ["age"]})


def test_non_numeric_cell_reports_position():
    rows = [(1, 1.5, 0, 0.1), (2, "abc", 1, 0.2)]
    with pytest.raises(ParseError) as info:
        load_dataset(_csv(rows), SCHEMA)
    assert info.value.details["row"] == 3 and info.value.details["column"] == "t"


def test_constructor_invariants():
    with pytest.raises(SupportError):
        Dataset(np.zeros(3), np.arange(3.0), np.zeros(3, int))
    with pytest.raises(SupportError):
        Dataset(np.zeros(3), np.arange(3.0), np.array([0, 2, 2]))
    with pytest.raises(SchemaError):
        Dataset(np.zeros(3), np.arange(2.0), np.array([0, 1, 1]))
    with pytest.warns(DiscreteTreatmentWarning):
        d = Dataset(np.zeros(6), np.array([1.0, 1.0, 1.0, 2.0, 2.0, 2.0]), np.array([0, 1, 0, 1, 0, 1]))
    assert "discrete-suspect" in d.flags


def test_round_trip_bit_exact():
    d = generate(preset("dgp_x"), 300, seed=5)
    back = load_dataset(io.StringIO(d.to_csv()), d.schema())
    for a in ("outcome", "treatment", "instrument", "covariates"):
        assert np.array_equal(getattr(d, a), getattr(back, a))
    assert back.instrument_labels == d.instrument_labels


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(4, 60))
def test_round_trip_property(seed, n):
    rng = np.random.default_rng(seed)
    z = np.r_[0, 1, rng.integers(0, 2, n - 2)]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        d = Dataset(rng.normal(size=n) * 1e3, rng.standard_cauchy(n), z, covariates=rng.normal(size=(n, 2)))
        back = load_dataset(d.to_csv(), d.schema())
    assert np.array_equal(d.outcome, back.outcome) and np.array_equal(d.treatment, back.treatment)
    assert np.array_equal(d.covariates, back.covariates)


def _sleep_study_arms(rng):
    t = []
    for mean, sd, size in ((5.62, 0.80, 77), (5.99, 0.85, 75), (6.22, 0.95, 74)):
        e = rng.normal(size=size)
        t.append(mean + sd * (e - e.mean()) / e.std())
    z = np.repeat([0, 1, 2], [77, 75, 74])
    return Dataset(rng.normal(size=226), np.concatenate(t), z)


def test_sleep_study_mean_gaps():
    diag = diagnose(_sleep_study_arms(np.random.default_rng(1)))
    gaps = [g["gap"] for g in diag.first_stage_mean_gaps]
    np.testing.assert_allclose(gaps, [0.37, 0.23], atol=1e-12)
    assert sum(diag.cell_counts.values()) == 226


def test_identical_arms():
    t = np.linspace(0, 1, 50)
    d = Dataset(np.zeros(100), np.r_[t, t], np.repeat([0, 1], 50))
    diag = diagnose(d)
    assert diag.ks_dominance[0]["statistic"] == 0.0
    assert diag.first_stage_mean_gaps[0]["gap"] == 0.0
    assert not diag.quantile_crossing_flags[0]["crossing"]


def test_variance_shift_flags_crossing():
    d = generate(preset("dgp_rs"), 10_000, seed=2)
    diag = diagnose(d)
    g = diag.first_stage_mean_gaps[0]
    assert abs(g["gap"]) < 3 * g["se"]
    assert diag.quantile_crossing_flags[0]["crossing"]
    assert 0.0 <= diag.ks_dominance[0]["statistic"] <= 1.0


def test_monotone_shift_no_crossing():
    diag = diagnose(generate(preset("dgp_m"), 4000, seed=2))
    assert not diag.quantile_crossing_flags[0]["crossing"]
    assert diag.ks_dominance[0]["pvalue"] > 0.01


def test_gap_equals_cell_mean_difference():
    d = generate(preset("constant3"), 901, seed=3)
    diag = diagnose(d)
    means = [d.treatment[d.instrument == k].mean() for k in range(3)]
    for k, g in enumerate(diag.first_stage_mean_gaps, start=1):
        assert g["gap"] == pytest.approx(means[k] - means[k - 1], abs=1e-14)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_diagnose_permutation_invariant(seed):
    d = generate(preset("constant3"), 200, seed=seed)
    perm = np.random.default_rng(seed).permutation(d.n)
    a, b = diagnose(d).to_dict(), diagnose(d.take(perm)).to_dict()
    assert a == b

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad
from scipy.stats import norm

from drciv import EstimandConfig
from drciv.errors import ResolutionError, SpecConsistencyError, SpecError
from drciv.simulate import (
    PRESETS,
    DgpSpec,
    Expr,
    McEstimator,
    generate,
    load_spec,
    monte_carlo,
    oracle,
    preset,
    verify_restrictions,
)

# -- expression grammar -----------------------------------------------------------


@pytest.mark.parametrize(
    "text",
    [
        "__import__('os')",
        "t.real",
        "lambda a: a",
        "t == 1",
        "exp(t, u)",
        "'a'",
        "foo(t)",
        "t[0]",
        "y + 1",
        "True + t",
        "t +",
    ],
)
def test_grammar_rejects(text):
    with pytest.raises(SpecError):
        Expr.parse(text)


def test_grammar_scopes_variables():
    Expr.parse("u + x1", ["u", "x1"])
    with pytest.raises(SpecError):
        Expr.parse("u + x2", ["u", "x1"])
    with pytest.raises(SpecError):
        DgpSpec(name="bad", outcome="t + x1", first_stage=("u", "1 + u"))


@settings(max_examples=40, deadline=None)
@given(
    t=st.floats(-3, 3),
    u=st.floats(0.01, 0.99),
)
def test_expression_matches_numpy(t, u):
    e = Expr.parse("t^2 + exp(u)*ind(t > 0) - qnorm(u)/2 + max(t, u) + abs(t)")
    ref = t**2 + np.exp(u) * (t > 0) - norm.ppf(u) / 2 + max(t, u) + abs(t)
    assert float(e(t=np.array(t), u=np.array(u))) == pytest.approx(ref, rel=1e-12, abs=1e-12)


def test_first_stage_must_increase():
    with pytest.raises(SpecError, match="increasing"):
        DgpSpec(name="bad", outcome="t", first_stage=("u", "1 - u"))
    with pytest.raises(SpecError):
        DgpSpec(name="bad", outcome="t", first_stage=("u",))
    with pytest.raises(SpecError):
        DgpSpec(name="bad", outcome="t", first_stage=("u", "u + 1"), arm_weights=("1",))


# -- generation -------------------------------------------------------------------


def test_seed_determinism():
    a, b = generate(preset("dgp_x"), 500, seed=3), generate(preset("dgp_x"), 500, seed=3)
    for f in ("outcome", "treatment", "instrument", "covariates"):
        assert np.array_equal(getattr(a, f), getattr(b, f))
    c = generate(preset("dgp_x"), 500, seed=4)
    assert not np.array_equal(a.outcome, c.outcome)


def test_dgp_m_structure():
    spec = preset("dgp_m")
    u = np.linspace(0.01, 0.99, 50)
    X = np.zeros((50, 0))
    np.testing.assert_allclose(spec.treatment(1, X, u) - spec.treatment(0, X, u), 0.5, atol=1e-14)
    d = generate(spec, 4000, seed=1)
    for z, lo in ((0, 1.0), (1, 1.5)):
        t = d.treatment[d.instrument == z]
        assert t.min() >= lo and t.max() <= lo + 1


def test_dgp_rs_structure():
    spec = preset("dgp_rs")
    u = np.linspace(0.01, 0.99, 50)
    X = np.zeros((50, 0))
    np.testing.assert_allclose(spec.treatment(1, X, u) - spec.treatment(0, X, u), 2 * u - 1, atol=1e-14)
    # equal means by construction
    assert quad(lambda s: spec.treatment(1, np.zeros((1, 0)), np.array([s]))[0], 0, 1)[0] == pytest.approx(5.0)
    assert quad(lambda s: spec.treatment(0, np.zeros((1, 0)), np.array([s]))[0], 0, 1)[0] == pytest.approx(5.0)


@pytest.mark.parametrize("name", ["dgp_m", "constant", "constant3", "dgp_x"])
def test_invariant_coupling_orders_potential_treatments(name):
    spec = preset(name)
    rng = np.random.default_rng(0)
    X = spec.covariate_values(rng.random((2000, spec.d_w)))
    V = rng.random(2000)
    T = [spec.treatment(k, X, spec.arm_rank(k, V, None, None)) for k in range(spec.K + 1)]
    for k in range(1, spec.K + 1):
        assert np.all(np.sign(T[k] - T[k - 1]) >= 0)


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_presets_verify(name):
    spec = preset(name)
    out = verify_restrictions(spec, probe_size=20_000)
    assert out == {"monotone_holds": spec.monotone, "rank_similar_holds": spec.rank_similar}


def test_dgp_rs_flags():
    assert verify_restrictions(preset("dgp_rs"), 20_000) == {"monotone_holds": False, "rank_similar_holds": True}


def test_violated_coupling():
    out = verify_restrictions(preset("dgp_v"), 20_000)
    assert out["rank_similar_holds"] is False
    spec = preset("dgp_v")
    V = np.array([0.2, 0.2])
    eta = np.array([[1.0], [-1.0]])
    np.testing.assert_allclose(spec.arm_rank(1, V, eta, None), [0.8, 0.2])


def test_declared_flags_mismatch():
    spec = DgpSpec(name="liar", outcome="t + eta1", first_stage=("5 + (2*u - 1)", "5 + 2*(2*u - 1)"))
    with pytest.raises(SpecConsistencyError):
        verify_restrictions(spec, 10_000)


def test_spec_round_trip(tmp_path):
    for spec in PRESETS.values():
        assert DgpSpec.from_dict(spec.to_dict()) == spec
        assert DgpSpec.from_dict(json.loads(spec.to_json())) == spec
    path = tmp_path / "spec.json"
    path.write_text(preset("dgp_x").to_json())
    assert load_spec(path) == preset("dgp_x")
    assert load_spec("dgp_m") is preset("dgp_m")
    with pytest.raises(SpecError):
        DgpSpec.from_dict({**preset("dgp_m").to_dict(), "colour": "red"})
    with pytest.raises(SpecError):
        preset("nope")


# -- oracles ------------------------------------------------------------------------


@pytest.mark.parametrize(
    "estimand",
    ["tau_u(0.3)", "pi_v(0.7)", "tau_dr", "tau_dr_plus", "pi_dr", "pi_dr_plus", "wald_weighted_late", "wald_x",
     "wald"],
)
def test_constant_effect_oracle(estimand):
    assert oracle(preset("constant"), estimand).value == pytest.approx(0.7, abs=1e-9)


def test_constant_effect_multi_oracle():
    assert oracle(preset("constant3"), "pi_dr_multi").value == pytest.approx(0.7, abs=1e-9)


def test_no_negative_cells():
    with pytest.raises(ResolutionError):
        oracle(preset("constant"), "tau_dr_minus")


def _rs_closed_form(lo, hi):
    # g = t^2/10 plus terms that cancel across arms, T0 = 4 + 2u, T1 = 3 + 4u
    num = quad(lambda u: abs(2 * u - 1) * ((3 + 4 * u) ** 2 - (4 + 2 * u) ** 2) / (10 * (2 * u - 1)), lo, hi,
               points=[0.5])[0]
    den = quad(lambda u: abs(2 * u - 1), lo, hi, points=[0.5])[0]
    return num / den


@pytest.mark.parametrize("estimand,lo,hi", [("tau_dr", 0, 1), ("tau_dr_plus", 0.5, 1), ("tau_dr_minus", 0, 0.5)])
def test_dgp_rs_oracle_matches_quadrature(estimand, lo, hi):
    truth = _rs_closed_form(lo, hi)
    got = oracle(preset("dgp_rs"), estimand)
    assert abs(got.value - truth) <= max(got.error_bound, 1e-8)
    assert truth == pytest.approx({"tau_dr": 1.0, "tau_dr_plus": 1.2, "tau_dr_minus": 0.8}[estimand])


def test_monotone_wald_weighted_late_equals_tau_dr():
    spec = preset("dgp_m")
    a, b = oracle(spec, "tau_dr"), oracle(spec, "wald_weighted_late")
    c = oracle(spec, "wald_weighted_late", form="derivative")
    assert abs(a.value - b.value) <= a.error_bound + b.error_bound
    assert abs(a.value - c.value) <= a.error_bound + c.error_bound
    assert a.value == pytest.approx(1.875, abs=1e-6)


@pytest.mark.parametrize("name,estimand", [("dgp_rs", "tau_dr"), ("dgp_m", "pi_dr"), ("dgp_x", "pi_dr")])
def test_oracle_stable_in_resolution(name, estimand):
    spec = preset(name)
    a = oracle(spec, estimand, resolution=100)
    b = oracle(spec, estimand, resolution=200)
    assert abs(a.value - b.value) <= a.error_bound


def test_oracle_rejects_bad_ids():
    with pytest.raises(SpecError):
        oracle(preset("dgp_m"), "late")
    with pytest.raises(SpecError):
        oracle(preset("dgp_m"), "tau_u")
    with pytest.raises(ResolutionError):
        oracle(preset("dgp_m"), "tau_dr", resolution=10)


# -- Monte Carlo harness ----------------------------------------------------------------


def test_mc_smoke_constant_effect():
    rep = monte_carlo(preset("constant"), [McEstimator("dr", "pi_dr")], reps=2, n=500, seed=1)
    row = rep.row("dr")
    assert row.oracle.value == pytest.approx(0.7, abs=1e-9)
    assert abs(row.bias) < 3 * row.sd / np.sqrt(2)
    assert 0.0 <= row.coverage <= 1.0


def test_mc_rmse_decomposition_and_determinism():
    est = [McEstimator("dr", "pi_dr"), McEstimator("wald", "wald"), McEstimator("late", "wald", oracle=None)]
    a = monte_carlo(preset("dgp_x"), est, reps=6, n=400, seed=3)
    b = monte_carlo(preset("dgp_x"), est, reps=6, n=400, seed=3, workers=2)
    for label in ("dr", "wald"):
        r = a.row(label)
        assert r.rmse**2 == pytest.approx(r.bias**2 + r.sd**2, abs=1e-10)
        np.testing.assert_array_equal(r.estimates, b.row(label).estimates)
    late = a.row("late")
    assert late.bias is None and late.coverage is None and late.rmse is None
    assert json.dumps(a.to_dict()) == json.dumps(b.to_dict())
    assert "dr" in a.to_table()


def test_mc_counts_failures():
    rep = monte_carlo(preset("dgp_rs"), [McEstimator("wald", "wald", oracle=None)], reps=4, n=2000, seed=2)
    row = rep.row("wald")
    assert row.failures == sum(row.failure_kinds.values())
    assert set(row.failure_kinds) <= {"weak_first_stage"}
    assert row.flagged == (row.failure_share > 0.2)


def test_mc_needs_two_reps():
    with pytest.raises(SpecError):
        monte_carlo(preset("constant"), [McEstimator("dr", "pi_dr")], reps=1, n=100)


def test_mc_estimator_oracle_mapping():
    assert McEstimator("a", "wald_x_multi").oracle_id() == "pi_dr_multi"
    assert McEstimator("a", "distributional(1.5)").oracle_id() == "distributional(1.5)"
    assert McEstimator("a", "pi_dr", EstimandConfig(), oracle=None).oracle_id() is None

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from selftune.adaptation import (MU0_GRID, bounded_osc_law, custom_law, effective_gains,
                                 equilibrium_point, law_rate, log_law, make_law, sigmoid_law,
                                 validate_theorem1, validate_theorem3_4)
from selftune.errors import DomainViolation, ExpressionError, NotInImage


class TestRate:
    def test_sigmoid(self):
        assert law_rate(sigmoid_law(), 1.0, 0.0) == 0.0

    def test_log(self):
        assert law_rate(log_law(), 1.0, 0.0) == 0.0

    def test_bounded_osc(self):
        assert law_rate(bounded_osc_law(1.0, 1.0), 1.0, 0.5) == 0.0

    @pytest.mark.parametrize("amp", [0.0, -1.0])
    def test_amplitude_domain(self, amp):
        with pytest.raises(DomainViolation):
            law_rate(log_law(), amp, 0.0)


class TestConstruction:
    @pytest.mark.parametrize("ctor, a, b", [
        (log_law, 0.0, 1.0), (log_law, 1.0, -1.0), (bounded_osc_law, -1.0, 1.0),
        (bounded_osc_law, 1.0, 0.0),
    ])
    def test_gain_sign(self, ctor, a, b):
        with pytest.raises(ValueError):
            ctor(a, b)

    def test_make_law(self):
        assert make_law("log", 2.0, 3.0).params == {"a": 2.0, "b": 3.0}
        assert make_law("sigmoid").variant == "sigmoid"
        assert make_law("custom", f="-ln(x)", g="mu").variant == "custom"
        with pytest.raises(ExpressionError):
            make_law("custom", f="-ln(x)")
        with pytest.raises(ValueError):
            make_law("quadratic")

    def test_custom_rejects_mixed_amplitudes(self):
        with pytest.raises(ExpressionError):
            custom_law("x + r", "mu")
        with pytest.raises(ExpressionError):
            custom_law("-ln(x)", "mu + t")

    def test_custom_matches_builtin(self):
        custom = custom_law("-2*ln(x)", "3*mu")
        builtin = log_law(2.0, 3.0)
        x = np.logspace(-3, 3, 20)
        mu = np.linspace(-2, 2, 20)
        assert np.allclose(custom.rate(x, mu), builtin.rate(x, mu), rtol=1e-14)
        assert not custom.has_analytic_derivatives and builtin.has_analytic_derivatives


class TestEquilibrium:
    @pytest.mark.parametrize("mu0", [-1.0, 0.0, 0.7, 2.0])
    def test_log(self, mu0):
        assert equilibrium_point(log_law(), mu0) == pytest.approx(math.exp(-mu0), rel=1e-15)

    def test_sigmoid(self):
        assert equilibrium_point(sigmoid_law(), 0.0) == 1.0
        assert equilibrium_point(sigmoid_law(), 1.0) == pytest.approx(math.exp(-0.5), rel=1e-15)

    def test_custom_by_bisection(self):
        law = custom_law("1/(1 + x**2)", "1/(1 + exp(-mu))")
        assert equilibrium_point(law, 1.0) == pytest.approx(math.exp(-0.5), rel=1e-11)

    def test_hint(self):
        law = custom_law("-ln(x)", "mu")
        assert equilibrium_point(law, 20.0, x_hint=1e-8) == pytest.approx(math.exp(-20), rel=1e-9)

    def test_not_in_image(self):
        with pytest.raises(NotInImage):
            equilibrium_point(bounded_osc_law(1.0, 1.0), 2.0)
        with pytest.raises(NotInImage):
            equilibrium_point(custom_law("1/(1 + x**2)", "mu"), -1.0)

    @pytest.mark.parametrize("law, lo, hi", [
        (log_law(1.0, 1.0), -5.0, 5.0),
        (log_law(2.5, 0.4), -5.0, 5.0),
        (sigmoid_law(), -5.0, 5.0),
        (bounded_osc_law(1.0, 1.0), 0.0, 1.0),
        (bounded_osc_law(3.0, 2.0), 0.0, 0.5),
        (custom_law("1/(1 + r**2)", "mu"), 0.0, 1.0),
    ])
    def test_residual_random_mu0(self, law, lo, hi):
        rng = np.random.default_rng(5)
        for mu0 in rng.uniform(lo, hi, 50):
            if mu0 in (lo, hi):
                continue
            x = equilibrium_point(law, mu0)
            assert x > 0
            assert abs(float(law.f(x)) - float(law.g(mu0))) <= 1e-11


@pytest.mark.parametrize("law", [log_law(1.0, 1.0), log_law(3.0, 0.5), sigmoid_law(),
                                 bounded_osc_law(2.0, 1.5)])
def test_analytic_derivatives_match_differences(law):
    rng = np.random.default_rng(2)
    x = np.exp(rng.uniform(-3, 3, 40))
    mu = rng.uniform(-4, 4, 40)
    for xi in x:
        h = 1e-6 * xi
        fd = (law.f(xi + h) - law.f(xi - h)) / (2 * h)
        assert law.df(xi) == pytest.approx(fd, rel=1e-6, abs=1e-12)
    for m in mu:
        h = 1e-6 * (1 + abs(m))
        fd = (law.g(m + h) - law.g(m - h)) / (2 * h)
        assert law.dg(m) == pytest.approx(fd, rel=1e-6, abs=1e-12)


class TestFirstOrderHypotheses:
    @pytest.mark.parametrize("law", [log_law(1.0, 1.0), log_law(0.3, 4.0), sigmoid_law()])
    def test_passes_on_mu0_grid(self, law):
        rep = validate_theorem1(law, MU0_GRID)
        assert rep.passed, rep.failed()
        assert rep.theorem == "T1"
        assert all(math.isfinite(c.margin) for c in rep.conditions.values())

    def test_custom_sigmoid_uses_differences(self):
        rep = validate_theorem1(custom_law("1/(1 + x**2)", "1/(1 + exp(-mu))"), MU0_GRID)
        assert rep.passed
        assert rep.metadata["derivatives"] == "central differences"

    def test_increasing_f_fails_with_witness(self):
        rep = validate_theorem1(custom_law("ln(x)", "mu"), [0.0])
        assert not rep.passed
        for name in ("f_strictly_decreasing", "df_strictly_negative"):
            cond = rep.conditions[name]
            assert not cond.passed and cond.witness is not None and cond.margin <= 0

    def test_image_failure(self):
        rep = validate_theorem1(custom_law("1/(1 + x**2)", "mu"), [0.5, 2.0])
        cond = rep.conditions["g_mu0_in_image_of_f"]
        assert not cond.passed and cond.witness == 2.0

    def test_report_serialises(self):
        d = validate_theorem1(log_law(), [0.0]).to_dict()
        assert d["passed"] and set(d["conditions"]) >= {"f_strictly_decreasing"}


class TestOscillatorHypotheses:
    @pytest.mark.parametrize("a, b", [(1.0, 1.0), (0.5, 1.0), (4.0, 2.0), (2.0, 1.0)])
    def test_log_law_gains(self, a, b):
        rep = validate_theorem3_4(log_law(a, b), 0.3)
        assert rep.values["a_eff"] == pytest.approx(a, rel=1e-14)
        assert rep.values["b_eff"] == pytest.approx(b, rel=1e-14)
        assert rep.passed == (a <= b * b)
        assert rep.theorem == "T3"

    def test_bounded_osc_example(self):
        rep = validate_theorem3_4(bounded_osc_law(1.0, 1.0), 0.5)
        assert rep.values["a_eff"] == pytest.approx(0.25, rel=1e-12)
        assert rep.passed and rep.theorem == "T4"

    @pytest.mark.parametrize("b", [0.5, 1.0, 2.0])
    def test_bounded_osc_closed_form_gain(self, b):
        law = bounded_osc_law(3.0, b)
        for mu0 in np.linspace(0.05, 0.95, 7) / b:
            a_eff, b_eff, _ = effective_gains(law, mu0)
            assert a_eff == pytest.approx(3.0 * b * mu0 * (1 - b * mu0), rel=1e-10)
            assert b_eff == b

    @pytest.mark.parametrize("b", [0.5, 1.0, 2.0])
    def test_worst_case_failure(self, b):
        rep = validate_theorem3_4(bounded_osc_law(4 * b * b + 0.1, b), 1 / (2 * b))
        cond = rep.conditions["a_eff_at_most_b_eff_squared"]
        assert not cond.passed and cond.margin < 0 and cond.witness is not None

    @pytest.mark.parametrize("b", [0.5, 1.0, 2.0])
    def test_four_b_squared_boundary(self, b):
        law_ok = bounded_osc_law(4 * b * b, b)
        law_bad = bounded_osc_law(4 * b * b + 0.4, b)
        mu0s = np.linspace(0, 1 / b, 52)[1:-1]
        assert all(validate_theorem3_4(law_ok, m).passed for m in mu0s)
        assert any(not validate_theorem3_4(law_bad, m).passed for m in mu0s)

    def test_flipped_law_negative_gain(self):
        rep = validate_theorem3_4(custom_law("ln(r)", "mu"), 0.0)
        assert not rep.conditions["a_eff_positive"].passed

    def test_user_supplied_root(self):
        # f(r) = -(ln r)**2 is not monotone; r* = e and 1/e both solve f = g(1) = -1
        law = custom_law("-(ln(r))**2", "-mu")
        for root in (math.e, 1 / math.e):
            _, _, r = effective_gains(law, 1.0, r_star=root)
            assert r == root

    @settings(max_examples=40, deadline=None)
    @given(a=st.floats(0.05, 10.0), b=st.floats(0.1, 4.0), mu0=st.floats(-3, 3))
    def test_log_condition_property(self, a, b, mu0):
        rep = validate_theorem3_4(log_law(a, b), mu0)
        if a < b * b * (1 - 1e-9):
            assert rep.passed
        elif a > b * b * (1 + 1e-9):
            assert not rep.passed

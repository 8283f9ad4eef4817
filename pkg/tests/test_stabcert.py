import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from selftune.adaptation import bounded_osc_law, custom_law, log_law, sigmoid_law
from selftune.dynamics import FirstOrderLoop, FirstOrderModel, OscillatorLoop, OscillatorModel
from selftune.stabcert import (DEFAULT_START_TIMES, Box, Budget, EpsilonFamily, TargetSet,
                               epsilon_residual_sweep, falsify_practical_stability,
                               falsify_semiglobal_practical, fit_linear_constant,
                               replay_witness, simulate_batch)

# reduced budgets keep the unit suite quick; the acceptance suite runs the defaults
SMALL = Budget(epsilons=(1e-2, 1e-3), points_per_shell=8, shells=2, horizon=150.0)


def first_order(law=None, mu0=0.5, p="sin(t)"):
    loop = FirstOrderLoop(FirstOrderModel(mu0), law or log_law())
    return EpsilonFamily.from_source(loop, p), TargetSet(loop)


def oscillator(law=None, mu0=0.3, p="sin(t)"):
    loop = OscillatorLoop(OscillatorModel(mu0), law or log_law())
    return EpsilonFamily.from_source(loop, p), TargetSet(loop)


class TestFamily:
    def test_start_times_over_one_period(self):
        fam, _ = first_order(p="sin(t)")
        assert fam.default_start_times() == pytest.approx((0, math.pi / 2, math.pi, 3 * math.pi / 2))
        fam, _ = first_order(p="cos(2*t)")
        assert fam.default_start_times()[1] == pytest.approx(math.pi / 4)

    def test_aperiodic_start_times(self):
        fam, _ = first_order(p="1/(1 + x**2)")
        assert fam.default_start_times() == DEFAULT_START_TIMES

    def test_admissible_set(self):
        assert first_order()[0].admissible_set == "x > 0"
        assert oscillator()[0].admissible_set == "(x, xdot) != (0, 0)"

    def test_member_carries_epsilon(self):
        fam, _ = first_order()
        member = fam.member(np.array([0.0, 0.1]))
        assert np.array_equal(member.model.perturbation.epsilon, [0.0, 0.1])


class TestTarget:
    @settings(max_examples=40, deadline=None)
    @given(q=st.floats(-3, 3), p=st.floats(-3, 3), phi=st.floats(0, 2 * math.pi))
    def test_distance_in_chart(self, q, p, phi):
        for _, target in (first_order(), oscillator()):
            y = target.from_qp(q, p, phi)
            assert target.distance(y) == pytest.approx(math.hypot(q, p), abs=1e-12)

    def test_zero_exactly_on_target(self):
        _, target = oscillator()
        r = target.star
        phis = np.linspace(0, 2 * math.pi, 13)
        on_orbit = np.column_stack([r * np.cos(phis), -r * np.sin(phis), np.full(13, 0.3)])
        assert np.max(target.distance(on_orbit)) < 1e-15
        assert target.distance([r, 0.0, 0.31]) > 0

    def test_outside_domain_is_infinite(self):
        _, target = first_order()
        assert target.distance([0.0, 0.5]) == np.inf
        _, target = oscillator()
        assert target.distance([0.0, 0.0, 0.3]) == np.inf

    def test_shell_radius(self):
        _, target = oscillator()
        pts = target.shell(0.2, 16, np.random.default_rng(0))
        assert np.allclose(target.distance(pts), 0.2, atol=1e-14)

    def test_description(self):
        assert "equilibrium" in first_order()[1].description
        assert "periodic orbit" in oscillator()[1].description


def test_box_sample():
    box = Box((0.1, -2.0), (10.0, 2.0))
    pts = box.sample(30, np.random.default_rng(0))
    assert pts.shape == (30, 2)
    assert np.all((pts >= box.low) & (pts <= box.high))
    assert any(np.array_equal(p, [0.1, -2.0]) for p in pts)


@pytest.mark.parametrize("kwargs", [{"epsilons": ()}, {"epsilons": (-1e-3,)}, {"horizon": 0.0},
                                    {"points_per_shell": 0}, {"convergence_window": 0.0}])
def test_budget_validation(kwargs):
    with pytest.raises(ValueError):
        Budget(**kwargs)


def test_batch_freezes_escaped_members():
    fam, target = first_order(law=custom_law("ln(x)", "mu"))
    states = target.from_qp(np.array([0.01, 0.001]), np.array([0.0, 0.0]))
    res = simulate_batch(fam, target, states, [0.0, 0.0], [0.0, 0.0], 50.0, 0.05)
    assert np.all(np.isfinite(res.exit_time)) and np.all(res.max_distance >= 0.05)
    # the closer start leaves the band later
    assert res.exit_time[0] < res.exit_time[1]
    # frozen members report the state at which they escaped
    for k in range(2):
        assert target.distance(res.final[k]) == pytest.approx(res.max_distance[k])


class TestPracticalStability:
    def test_nominal_not_falsified(self):
        fam, target = first_order()
        v = falsify_practical_stability(fam, target, 0.05, Budget(
            epsilons=(0.0,), points_per_shell=8, shells=2, horizon=100.0))
        assert v.outcome == "not_falsified" and v.witness is None and v.budget_exhausted

    def test_sigmoid_not_falsified(self):
        fam, target = first_order(law=sigmoid_law(), mu0=0.0)
        v = falsify_practical_stability(fam, target, 0.05, SMALL)
        assert not v.falsified

    def test_flipped_law_falsified_and_replayable(self):
        fam, target = first_order(law=custom_law("ln(x)", "mu"))
        v = falsify_practical_stability(fam, target, 0.05, SMALL)
        assert v.falsified and v.witness is not None
        w = v.witness
        assert replay_witness(fam, target, w) >= w.radius
        assert w.epsilon == min(SMALL.epsilons)
        assert len(w.excerpt_t) == len(w.excerpt_states) > 1

    def test_verdict_consistent_with_escape_counts(self):
        for law in (log_law(), custom_law("ln(x)", "mu")):
            fam, target = first_order(law=law)
            v = falsify_practical_stability(fam, target, 0.05, SMALL)
            at_min = [c["escapes_by_epsilon"][repr(min(SMALL.epsilons))]
                      for c in v.details["per_U1"].values()]
            assert v.falsified == all(n > 0 for n in at_min)

    def test_multiple_u1_candidates(self):
        fam, target = first_order(law=custom_law("ln(x)", "mu"))
        budget = Budget(epsilons=(1e-3,), points_per_shell=4, shells=1, horizon=100.0,
                        u1_fractions=(0.5, 0.1))
        v = falsify_practical_stability(fam, target, 0.05, budget)
        assert v.falsified and len(v.details["per_U1"]) == 2

    def test_deterministic(self):
        fam, target = oscillator()
        budget = Budget(epsilons=(1e-2,), points_per_shell=4, shells=1, horizon=60.0, seed=3)
        a = falsify_practical_stability(fam, target, 0.05, budget).to_json()
        b = falsify_practical_stability(fam, target, 0.05, budget).to_json()
        assert a == b
        assert json.loads(a)["outcome"] == "not_falsified"

    def test_radius_must_be_positive(self):
        fam, target = first_order()
        with pytest.raises(ValueError):
            falsify_practical_stability(fam, target, 0.0, SMALL)


class TestSemiglobal:
    def test_first_order_box(self):
        fam, target = first_order()
        v = falsify_semiglobal_practical(fam, target, Box((0.1, -2.0), (10.0, 2.0)), 0.05,
                                         Budget(epsilons=(1e-2, 1e-3), points_per_shell=8,
                                                shells=2, horizon=200.0))
        assert v.outcome == "not_falsified"
        assert set(v.details) == {"practical_stability", "semiglobal_boundedness", "convergence"}

    def test_oscillator_log_law(self):
        fam, target = oscillator()
        v = falsify_semiglobal_practical(fam, target, 1.0, 0.05, Budget(
            epsilons=(1e-3,), points_per_shell=6, shells=2, horizon=200.0))
        assert v.outcome == "not_falsified"

    def test_convergence_clause_catches_slow_runs(self):
        # horizon too short to settle from K: the convergence clause must fire
        fam, target = first_order(law=sigmoid_law(), mu0=0.0)
        v = falsify_semiglobal_practical(fam, target, 2.0, 0.05, Budget(
            epsilons=(1e-3,), points_per_shell=6, shells=1, horizon=10.0))
        assert v.falsified
        assert v.details["convergence"]["outcome"] == "falsified"
        assert v.witness is not None

    def test_general_law_far_start_reports_per_clause(self):
        fam, target = oscillator(law=bounded_osc_law(1.0, 1.0), mu0=0.5)
        v = falsify_semiglobal_practical(fam, target, 3.0, 0.05, Budget(
            epsilons=(1e-3,), points_per_shell=4, shells=1, horizon=100.0))
        assert all(d["outcome"] in ("falsified", "not_falsified") for d in v.details.values())

    def test_k_must_exceed_u(self):
        fam, target = first_order()
        with pytest.raises(ValueError):
            falsify_semiglobal_practical(fam, target, 0.01, 0.05, SMALL)


class TestResidualSweep:
    def test_nominal(self):
        fam, target = first_order()
        (_, residual), = epsilon_residual_sweep(fam, target, [0.0])
        assert residual <= 1e-6

    def test_sigmoid_decreasing(self):
        fam, target = first_order(law=sigmoid_law(), mu0=0.0)
        sweep = epsilon_residual_sweep(fam, target, [1e-1, 1e-2, 1e-3])
        res = [r for _, r in sweep]
        assert res[0] > res[1] > res[2]

    def test_constant_perturbation_linear_in_epsilon(self):
        fam, target = first_order(p="1")
        sweep = epsilon_residual_sweep(fam, target, [1e-2, 1e-3, 1e-4])
        C = fit_linear_constant(sweep)
        for eps, res in sweep:
            assert res <= 1.05 * C * eps
        assert C > 0

    @pytest.mark.parametrize("eps", [[1e-3, 1e-2], [1e-2, 1e-2], [-1e-3]])
    def test_requires_decreasing(self, eps):
        fam, target = first_order()
        with pytest.raises(ValueError):
            epsilon_residual_sweep(fam, target, eps)

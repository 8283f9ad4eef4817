"""Falsification searches for practical and semiglobal practical stability.

The stability notions quantify over every small ``epsilon`` and every initial
condition, so a simulation can only ever *refute* them.  Each search below
simulates a finite batch of perturbed trajectories and returns a
:class:`Verdict`: ``falsified`` together with a replayable witness, or
``not falsified within budget``.  A verdict is never ``not falsified`` when
a simulated trajectory violated the clause.

Distances to the target set are measured in the proof chart as
``sqrt(q**2 + p**2)``, with ``q = ln(x / x*)`` (first-order loop) or
``q = ln(r / r*)`` (oscillator, whose phase is free on the orbit) and
``p = mu - mu0``.  All members of a search share one adaptive step sequence;
a member is frozen once it leaves the largest ball of interest.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .dynamics import Perturbation
from .ode import integrate_adaptive
from .signals import Expr

DEFAULT_START_TIMES = (0.0, 1.0, 10.0, 100.0)


@dataclass(frozen=True)
class EpsilonFamily:
    """A closed loop plus a perturbation shape ``p``; ``epsilon`` is the family parameter."""

    loop: object
    p: Expr

    @classmethod
    def from_source(cls, loop, source):
        return cls(loop, Perturbation.parse(source, 0.0, loop.system).p)

    @property
    def admissible_set(self):
        return "x > 0" if self.loop.system == "first_order" else "(x, xdot) != (0, 0)"

    def member(self, epsilon):
        """The loop with perturbation ``epsilon * p`` (``epsilon`` may be an array)."""
        return self.loop.with_model(perturbation=Perturbation(epsilon, self.p))

    def default_start_times(self):
        period = self.p.period()
        if period is None:
            return DEFAULT_START_TIMES
        return tuple(period * k / 4 for k in range(4))


@dataclass(frozen=True)
class TargetSet:
    """The equilibrium (first-order) or periodic orbit (oscillator) where ``mu = mu0``."""

    loop: object
    star: float = field(default=None)

    def __post_init__(self):
        if self.star is None:
            object.__setattr__(self, "star", float(self.loop.x_star()))

    @property
    def description(self):
        if self.loop.system == "first_order":
            return f"equilibrium x = {self.star:.17g}, mu = {self.loop.mu0:.17g}"
        return f"periodic orbit r = {self.star:.17g}, mu = {self.loop.mu0:.17g}"

    def chart_qp(self, y):
        y = np.asarray(y, dtype=float)
        if self.loop.system == "first_order":
            amp = y[..., 0]
        else:
            amp = np.hypot(y[..., 0], y[..., 1] / self.loop.model.omega)
        with np.errstate(all="ignore"):
            q = np.where(amp > 0, np.log(np.where(amp > 0, amp, 1.0) / self.star), np.inf)
        return q, y[..., -1] - self.loop.mu0

    def distance(self, y):
        q, p = self.chart_qp(y)
        d = np.hypot(q, p)
        return np.where(np.isfinite(d), d, np.inf)

    def from_qp(self, q, p, phi=0.0):
        """Original-coordinate states at chart position ``(q, p)`` (and phase ``phi``)."""
        q, p, phi = np.broadcast_arrays(np.asarray(q, float), np.asarray(p, float),
                                        np.asarray(phi, float))
        amp = self.star * np.exp(q)
        mu = self.loop.mu0 + p
        if self.loop.system == "first_order":
            return np.stack([amp, mu], axis=-1)
        w = self.loop.model.omega
        return np.stack([amp * np.cos(phi), -amp * w * np.sin(phi), mu], axis=-1)

    def shell(self, radius, n, rng):
        """``n`` states at chart distance ``radius`` (random phase for the oscillator)."""
        theta = 2 * np.pi * (np.arange(n) + 0.5) / n
        phi = rng.uniform(0, 2 * np.pi, n) if self.loop.system == "oscillator" else 0.0
        return self.from_qp(radius * np.cos(theta), radius * np.sin(theta), phi)


@dataclass(frozen=True)
class Box:
    """Axis-aligned compact set in original coordinates."""

    low: tuple
    high: tuple

    def sample(self, n, rng, exclude_origin_radius=0.0):
        low, high = np.asarray(self.low, float), np.asarray(self.high, float)
        corners = np.array(list(itertools.product(*zip(low, high))))
        pts = [corners]
        while sum(len(p) for p in pts) < n + len(corners):
            draw = rng.uniform(low, high, size=(n, len(low)))
            if exclude_origin_radius > 0:
                draw = draw[np.hypot(draw[:, 0], draw[:, 1]) > exclude_origin_radius]
            pts.append(draw)
        allpts = np.concatenate(pts)
        if exclude_origin_radius > 0:
            allpts = allpts[np.hypot(allpts[:, 0], allpts[:, 1]) > exclude_origin_radius]
        return allpts[:n]


@dataclass(frozen=True)
class Budget:
    """Sampling budget of a falsification search.

    The default is 24 initial conditions per shell, 3 shells, 4 start times
    and 4 values of epsilon over a horizon of 500 time units.
    """

    epsilons: tuple = (1e-1, 3e-2, 1e-2, 3e-3)
    points_per_shell: int = 24
    shells: int = 3
    start_times: Optional[tuple] = None
    horizon: float = 500.0
    u1_fractions: tuple = (0.25,)
    k2_factors: tuple = (2.0, 5.0, 10.0)
    convergence_window: float = 0.25
    seed: int = 0
    abs_tol: float = 1e-9
    rel_tol: float = 1e-9

    def __post_init__(self):
        eps = tuple(float(e) for e in self.epsilons)
        if not eps or any(e < 0 for e in eps):
            raise ValueError("epsilons must be a non-empty list of non-negative numbers")
        object.__setattr__(self, "epsilons", eps)
        if self.points_per_shell < 1 or self.shells < 1 or not self.horizon > 0:
            raise ValueError("budget sizes and horizon must be positive")
        if not 0 < self.convergence_window <= 1:
            raise ValueError("convergence_window must lie in (0, 1]")


@dataclass
class Witness:
    """Everything needed to replay one violating trajectory."""

    state0: list
    epsilon: float
    t0: float
    exit_time: float
    distance: float
    radius: float
    excerpt_t: list = field(default_factory=list)
    excerpt_states: list = field(default_factory=list)


@dataclass
class Verdict:
    clause: str
    falsified: bool
    witness: Optional[Witness]
    epsilons: list
    radii: dict
    horizon: float
    n_trajectories: int
    budget_exhausted: bool = False
    report: str = ""
    details: dict = field(default_factory=dict)

    @property
    def outcome(self):
        return "falsified" if self.falsified else "not_falsified"

    def to_dict(self):
        out = asdict(self)
        out["outcome"] = self.outcome
        return out

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


@dataclass
class BatchResult:
    max_distance: np.ndarray
    window_distance: np.ndarray
    exit_time: np.ndarray
    final: np.ndarray
    n_steps: int


def simulate_batch(family, target, states0, eps, t0s, horizon, freeze_radius,
                   window_start=None, abs_tol=1e-9, rel_tol=1e-9):
    """Integrate many perturbed trajectories on one adaptive step sequence.

    Member ``i`` starts from ``states0[i]`` at time ``t0s[i]`` with parameter
    ``eps[i]`` and runs for ``horizon``.  Members whose distance to the target
    reaches ``freeze_radius`` are frozen from then on.
    """
    states0 = np.asarray(states0, dtype=float)
    eps = np.asarray(eps, dtype=float)
    t0s = np.asarray(t0s, dtype=float)
    loop = family.member(eps)
    active = np.ones(len(states0), dtype=bool)
    d0 = target.distance(states0)
    max_d = d0.copy()
    window_start = horizon if window_start is None else window_start
    win_d = np.where(window_start <= 0, d0, 0.0)
    exit_time = np.where(d0 >= freeze_radius, 0.0, np.inf)
    active &= d0 < freeze_radius
    steps = [0]

    def rhs(s, y):
        dy = loop.rhs(t0s + s, y)
        dy *= active[:, None]
        return dy

    def observe(s, y):
        steps[0] += 1
        d = target.distance(y)
        np.maximum(max_d, d, out=max_d)
        if s >= window_start:
            np.maximum(win_d, d, out=win_d)
        newly = active & (d >= freeze_radius)
        exit_time[newly] = s
        active[newly] = False

    traj = integrate_adaptive(rhs, states0, 0.0, horizon, abs_tol, rel_tol,
                              observer=observe, record=False)
    return BatchResult(max_d, win_d, exit_time, traj.final, steps[0])


def _excerpt(family, state0, eps, t0, until, tol, n_keep=200):
    loop = family.member(eps)
    traj = integrate_adaptive(lambda s, y: loop.rhs(t0 + s, y), state0, 0.0, until, tol[0], tol[1])
    idx = np.unique(np.linspace(0, len(traj) - 1, min(n_keep, len(traj))).astype(int))
    return (traj.times[idx] + t0).tolist(), traj.states[idx].tolist()


def replay_witness(family, target, witness: Witness, abs_tol=1e-9, rel_tol=1e-9):
    """Re-simulate a witness alone; returns the largest distance reached by ``exit_time``."""
    until = max(witness.exit_time, 1e-9)
    res = simulate_batch(family, target, [witness.state0], [witness.epsilon], [witness.t0],
                         until, np.inf, abs_tol=abs_tol, rel_tol=rel_tol)
    return float(res.max_distance[0])


def _grid(states, budget, start_times):
    """Cartesian product (state, epsilon, t0) flattened into batch arrays."""
    n = len(states)
    eps = np.repeat(np.array(budget.epsilons), n * len(start_times))
    t0s = np.tile(np.repeat(np.array(start_times, float), n), len(budget.epsilons))
    tiled = np.tile(states, (len(budget.epsilons) * len(start_times), 1))
    return tiled, eps, t0s


def _make_witness(family, budget, states, eps, t0s, idx, exit_time, distance, radius, horizon):
    until = min(horizon, exit_time) if np.isfinite(exit_time) else horizon
    ts, ys = _excerpt(family, states[idx], eps[idx], t0s[idx], max(until, 1e-9),
                      (budget.abs_tol, budget.rel_tol))
    return Witness(states[idx].tolist(), float(eps[idx]), float(t0s[idx]), float(until),
                   float(distance), float(radius), ts, ys)


def falsify_practical_stability(family, target, u2_radius, budget: Budget = Budget()) -> Verdict:
    """Search for trajectories starting near the target that leave the ``u2_radius`` ball.

    For each candidate ``U1`` radius (``u2_radius * budget.u1_fractions``),
    initial conditions lie on shells inside ``U1``.  The verdict is
    ``falsified`` iff, at the smallest tested epsilon, some trajectory escapes
    for every candidate ``U1``.
    """
    if not u2_radius > 0:
        raise ValueError("u2_radius must be positive")
    rng = np.random.default_rng(budget.seed)
    start_times = budget.start_times or family.default_start_times()
    eps_min = min(budget.epsilons)
    per_candidate = {}
    witness = None
    falsified = True
    n_total = 0
    for frac in sorted(budget.u1_fractions, reverse=True):
        u1 = frac * u2_radius
        shells = [target.shell(u1 * (k + 1) / budget.shells * 0.999, budget.points_per_shell, rng)
                  for k in range(budget.shells)]
        states, eps, t0s = _grid(np.concatenate(shells), budget, start_times)
        res = simulate_batch(family, target, states, eps, t0s, budget.horizon, u2_radius,
                             abs_tol=budget.abs_tol, rel_tol=budget.rel_tol)
        n_total += len(states)
        escaped = res.max_distance >= u2_radius
        by_eps = {repr(e): int(np.sum(escaped & (eps == e))) for e in budget.epsilons}
        at_min = np.flatnonzero(escaped & (eps == eps_min))
        per_candidate[repr(u1)] = {"escapes_by_epsilon": by_eps,
                                   "max_distance": float(np.max(res.max_distance)),
                                   "steps": res.n_steps}
        if len(at_min) == 0:
            falsified = False
            break
        i = int(at_min[0])
        witness = _make_witness(family, budget, states, eps, t0s, i, res.exit_time[i],
                                res.max_distance[i], u2_radius, budget.horizon)
    if not falsified:
        witness = None
    report = ("escape from U2 found for every candidate U1 at the smallest epsilon" if falsified
              else "no violation found within budget")
    return Verdict("practical_stability", falsified, witness, list(budget.epsilons),
                   {"U2": u2_radius, "U1_candidates": [f * u2_radius for f in budget.u1_fractions]},
                   budget.horizon, n_total, budget_exhausted=not falsified, report=report,
                   details={"per_U1": per_candidate, "start_times": list(start_times),
                            "target": target.description, "admissible_set": family.admissible_set})


def _compact_states(target, K, budget, rng):
    n = budget.points_per_shell * budget.shells
    if isinstance(K, Box):
        exclude = 1e-3 if target.loop.system == "oscillator" else 0.0
        pts = K.sample(n, rng, exclude)
        if target.loop.system == "first_order" and np.any(pts[:, 0] <= 0):
            raise ValueError("compact set must lie in x > 0")
        return pts
    radius = float(K)
    return np.concatenate([target.shell(radius * (k + 1) / budget.shells, budget.points_per_shell, rng)
                           for k in range(budget.shells)])


def falsify_semiglobal_practical(family, target, K, u_radius, budget: Budget = Budget()) -> Verdict:
    """Three falsification searches: practical stability, semiglobal boundedness, convergence.

    ``K`` is a :class:`Box` in original coordinates or a chart radius.
    Boundedness fails when a trajectory from ``K`` leaves every candidate
    ball of radius ``factor * max_K distance``; convergence fails when a
    trajectory from ``K`` is outside the ``u_radius`` ball during the final
    ``convergence_window`` of the horizon.  Both are judged at the smallest
    epsilon.
    """
    if not u_radius > 0:
        raise ValueError("u_radius must be positive")
    rng = np.random.default_rng(budget.seed)
    k_states = _compact_states(target, K, budget, rng)
    k_radius = float(np.max(target.distance(k_states)))
    if not k_radius > u_radius:
        raise ValueError("K must extend beyond the U neighbourhood")

    practical = falsify_practical_stability(family, target, u_radius, budget)

    start_times = budget.start_times or family.default_start_times()
    states, eps, t0s = _grid(k_states, budget, start_times)
    k2_radii = [k_radius * f for f in budget.k2_factors]
    window_start = (1 - budget.convergence_window) * budget.horizon
    res = simulate_batch(family, target, states, eps, t0s, budget.horizon, max(k2_radii),
                         window_start=window_start, abs_tol=budget.abs_tol, rel_tol=budget.rel_tol)
    eps_min = min(budget.epsilons)
    at_min = eps == eps_min

    unbounded = np.flatnonzero(at_min & (res.max_distance >= max(k2_radii)))
    bounded_falsified = len(unbounded) > 0
    b_witness = None
    if bounded_falsified:
        i = int(unbounded[0])
        b_witness = _make_witness(family, budget, states, eps, t0s, i, res.exit_time[i],
                                  res.max_distance[i], max(k2_radii), budget.horizon)
    boundedness = Verdict(
        "semiglobal_boundedness", bounded_falsified, b_witness, list(budget.epsilons),
        {"K": k_radius, "K2_candidates": k2_radii}, budget.horizon, len(states),
        budget_exhausted=not bounded_falsified,
        report=("trajectory from K left every candidate K2" if bounded_falsified
                else "no violation found within budget"),
        details={"max_distance": float(np.max(res.max_distance))})

    late = np.where(np.isfinite(res.exit_time), np.inf, res.window_distance)
    missed = np.flatnonzero(at_min & (late >= u_radius))
    conv_falsified = len(missed) > 0
    c_witness = None
    if conv_falsified:
        i = int(missed[0])
        c_witness = _make_witness(family, budget, states, eps, t0s, i, budget.horizon,
                                  late[i], u_radius, budget.horizon)
    convergence = Verdict(
        "convergence", conv_falsified, c_witness, list(budget.epsilons),
        {"K": k_radius, "U": u_radius, "T": window_start}, budget.horizon, len(states),
        budget_exhausted=not conv_falsified,
        report=("trajectory from K outside U after T" if conv_falsified
                else "no violation found within budget"),
        details={"max_late_distance_by_epsilon": {
            repr(e): float(np.max(late[eps == e])) for e in budget.epsilons}})

    clauses = {"practical_stability": practical, "semiglobal_boundedness": boundedness,
               "convergence": convergence}
    falsified = any(v.falsified for v in clauses.values())
    first = next((v for v in clauses.values() if v.falsified), None)
    return Verdict(
        "semiglobal_practical_asymptotic_stability", falsified,
        first.witness if first else None, list(budget.epsilons),
        {"K": k_radius, "U": u_radius, "T": window_start}, budget.horizon,
        practical.n_trajectories + len(states), budget_exhausted=not falsified,
        report=("falsified clauses: " + ", ".join(k for k, v in clauses.items() if v.falsified))
        if falsified else "no violation found within budget",
        details={k: v.to_dict() for k, v in clauses.items()})


def epsilon_residual_sweep(family, target, epsilons: Sequence[float], horizon=200.0,
                           start=None, abs_tol=1e-9, rel_tol=1e-9):
    """``[(epsilon, residual)]`` with residual the largest distance over the last quarter.

    ``start`` defaults to the chart point ``(q, p) = (0.5, 0)``.
    """
    eps = np.asarray(list(epsilons), dtype=float)
    if np.any(eps < 0) or np.any(np.diff(eps) >= 0):
        raise ValueError("epsilons must be non-negative and strictly decreasing")
    y0 = target.from_qp(0.5, 0.0) if start is None else np.asarray(start, dtype=float)
    states = np.tile(y0, (len(eps), 1))
    res = simulate_batch(family, target, states, eps, np.zeros(len(eps)), horizon, np.inf,
                         window_start=0.75 * horizon, abs_tol=abs_tol, rel_tol=rel_tol)
    return [(float(e), float(r)) for e, r in zip(eps, res.window_distance)]


def fit_linear_constant(sweep):
    """Least-squares ``C`` in ``residual ~ C * epsilon``."""
    e = np.array([s[0] for s in sweep])
    r = np.array([s[1] for s in sweep])
    return float(np.dot(e, r) / np.dot(e, e))

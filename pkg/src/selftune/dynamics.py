"""Right-hand sides of the self-tuning closed loops and their proof coordinates.

Two plants are modelled:

* the first-order system ``dx/dt = (mu - mu0) x + u(t) + eps p(x, mu, t)``
  on ``x > 0`` (the neural integrator picture), and
* the oscillator ``x'' + (mu0 - mu) x' + lam x'**3 + omega**2 x = u(t) + eps p``
  on ``(x, x') != (0, 0)`` (the hair-cell picture; ``lam = 0`` is the reduced
  model),

each closed by an adaptation law ``dmu/dt = f(amplitude) - g(mu)``.

Charts
------
``original``  the simulated state, ``(x, mu)`` or ``(x, xdot, mu)``
``log``       ``(q, p) = (ln x - ln x*, mu - mu0)`` for the first-order loop
``polar``     ``(r, phi, mu)`` with ``x = r cos(phi)``, ``xdot = -r omega sin(phi)``
``qphi_p``    ``(q, phi, p) = (ln r - ln r*, phi, mu - mu0)``

``x*`` / ``r*`` always come from :func:`selftune.adaptation.equilibrium_point`.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .adaptation import AdaptationLaw, equilibrium_point
from .errors import ChartMismatch, DomainViolation
from .ode import IntegratorConfig, Trajectory, integrate
from .signals import Expr, bounded_signal

TWO_PI = 2.0 * np.pi

CHART_LABELS = {
    ("first_order", "original"): ("x", "mu"),
    ("first_order", "log"): ("q", "p"),
    ("oscillator", "original"): ("x", "xdot", "mu"),
    ("oscillator", "polar"): ("r", "phi", "mu"),
    ("oscillator", "qphi_p"): ("q", "phi", "p"),
}


@dataclass(frozen=True)
class Perturbation:
    """Additive perturbation ``epsilon * p(state, mu, t)``.

    ``epsilon`` may be an array to evaluate a whole family at once.
    """

    epsilon: object
    p: Expr
    _active: bool = field(default=False, init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "_active", bool(np.any(np.asarray(self.epsilon) != 0)))

    @classmethod
    def parse(cls, source, epsilon, system="first_order"):
        if system == "first_order":
            expr = bounded_signal(source, positive_vars={"x"}, allowed={"x", "mu", "t"})
        else:
            expr = bounded_signal(source, allowed={"x", "xdot", "mu", "t"})
        if np.any(np.asarray(epsilon) < 0):
            raise ValueError("epsilon must be non-negative")
        return cls(epsilon, expr)

    @classmethod
    def constant(cls, value, epsilon, system="first_order"):
        return cls.parse(repr(float(value)), epsilon, system)

    @classmethod
    def sinusoid(cls, epsilon, amplitude=1.0, frequency=1.0, phase=0.0, system="first_order"):
        return cls.parse(f"{float(amplitude)!r}*sin({float(frequency)!r}*t + {float(phase)!r})",
                         epsilon, system)

    def active(self):
        return self._active

    def value(self, t, x, mu, xdot=None):
        env = {"t": t, "x": x, "mu": mu, "xdot": xdot}
        return self.epsilon * (np.asarray(self.p(**env), dtype=float) + 0 * x)

    def with_epsilon(self, epsilon):
        return replace(self, epsilon=epsilon)


def _forcing(source):
    if source is None or isinstance(source, Expr):
        return source
    return bounded_signal(source, allowed={"t"})


@dataclass(frozen=True)
class FirstOrderModel:
    mu0: float
    forcing: Optional[Expr] = None
    perturbation: Optional[Perturbation] = None

    def __post_init__(self):
        object.__setattr__(self, "forcing", _forcing(self.forcing))


@dataclass(frozen=True)
class OscillatorModel:
    mu0: float
    omega: float = 1.0
    lam: float = 0.0
    forcing: Optional[Expr] = None
    perturbation: Optional[Perturbation] = None

    def __post_init__(self):
        if not self.omega > 0:
            raise ValueError("omega must be positive")
        if self.lam < 0:
            raise ValueError("cubic damping lam must be non-negative")
        object.__setattr__(self, "forcing", _forcing(self.forcing))


def _input(model, t, x, mu, xdot=None):
    """``u(t) + eps p``; exactly zero when neither is present."""
    w = 0.0
    if model.forcing is not None:
        w = w + np.asarray(model.forcing(t=t), dtype=float)
    if model.perturbation is not None and model.perturbation.active():
        w = w + model.perturbation.value(t, x, mu, xdot)
    return w


def _first_order_field(model, x, mu, t):
    dx = (mu - model.mu0) * x
    if model.forcing is not None or model.perturbation is not None:
        dx = dx + _input(model, t, x, mu)
    return dx


def first_order_rhs(model: FirstOrderModel, x, mu, t=0.0):
    """``(mu - mu0) x + u(t) + eps p(x, mu, t)``; ``x`` must be positive."""
    x = np.asarray(x, dtype=float)
    if np.any(x <= 0):
        raise DomainViolation("first-order state x must be strictly positive")
    return _first_order_field(model, x, mu, t)


def _oscillator_field(model, x, xdot, mu, t):
    acc = -(model.mu0 - mu) * xdot - model.omega ** 2 * x
    if model.lam != 0:
        acc = acc - model.lam * xdot ** 3
    if model.forcing is not None or model.perturbation is not None:
        acc = acc + _input(model, t, x, mu, xdot)
    return acc


def oscillator_rhs(model: OscillatorModel, x, xdot, mu, t=0.0):
    """``(xdot, -(mu0 - mu) xdot - lam xdot**3 - omega**2 x + u + eps p)``."""
    return xdot, _oscillator_field(model, x, xdot, mu, t)


# -- closed loops --------------------------------------------------------------------


@dataclass(frozen=True)
class FirstOrderLoop:
    """First-order plant closed by an adaptation law; state ``(x, mu)``."""

    model: FirstOrderModel
    law: AdaptationLaw
    system: str = field(default="first_order", init=False)
    labels: tuple = field(default=("x", "mu"), init=False)

    @property
    def mu0(self):
        return self.model.mu0

    def x_star(self):
        return equilibrium_point(self.law, self.model.mu0)

    def rhs(self, t, y):
        x, mu = y[..., 0], y[..., 1]
        return np.stack([_first_order_field(self.model, x, mu, t),
                         self.law.f(x) - self.law.g(mu)], axis=-1)

    def domain(self, y):
        return bool(np.all(np.asarray(y)[..., 0] > 0))

    def with_model(self, **changes):
        return replace(self, model=replace(self.model, **changes))


@dataclass(frozen=True)
class OscillatorLoop:
    """Oscillator closed by an adaptation law of its polar radius; state ``(x, xdot, mu)``.

    ``frozen_mu`` holds ``mu`` at its initial value (a detuned control run).
    """

    model: OscillatorModel
    law: AdaptationLaw
    frozen_mu: bool = False
    system: str = field(default="oscillator", init=False)
    labels: tuple = field(default=("x", "xdot", "mu"), init=False)

    @property
    def mu0(self):
        return self.model.mu0

    def x_star(self):
        return equilibrium_point(self.law, self.model.mu0)

    r_star = x_star

    def radius(self, y):
        y = np.asarray(y)
        return np.hypot(y[..., 0], y[..., 1] / self.model.omega)

    def rhs(self, t, y):
        x, v, mu = y[..., 0], y[..., 1], y[..., 2]
        acc = _oscillator_field(self.model, x, v, mu, t)
        if self.frozen_mu:
            dmu = 0 * mu
        else:
            dmu = self.law.f(np.hypot(x, v / self.model.omega)) - self.law.g(mu)
        return np.stack([v, acc, dmu], axis=-1)

    def domain(self, y):
        return bool(np.all(self.radius(y) > 0))

    def with_model(self, **changes):
        return replace(self, model=replace(self.model, **changes))


# -- charts --------------------------------------------------------------------------


def log_chart(x, x_star):
    """``q = ln x - ln x_star``."""
    x = np.asarray(x, dtype=float)
    if np.any(x <= 0) or x_star <= 0:
        raise DomainViolation("log chart needs positive arguments")
    return np.log(x) - np.log(x_star)


def log_chart_inverse(q, x_star):
    if x_star <= 0:
        raise DomainViolation("log chart needs positive x_star")
    return x_star * np.exp(q)


def polar_chart(x, xdot, omega):
    """``(r, phi)`` with ``x = r cos(phi)``, ``xdot = -r omega sin(phi)``, ``phi`` in [0, 2 pi)."""
    x = np.asarray(x, dtype=float)
    xdot = np.asarray(xdot, dtype=float)
    r = np.hypot(x, xdot / omega)
    if np.any(r == 0):
        raise DomainViolation("polar chart is undefined at the origin")
    phi = np.mod(np.arctan2(-xdot / omega, x), TWO_PI)
    phi = np.where(phi >= TWO_PI, 0.0, phi)
    return r, phi


def polar_chart_inverse(r, phi, omega):
    return r * np.cos(phi), -r * omega * np.sin(phi)


@dataclass(frozen=True)
class ChartPoint:
    """A state expressed in one of the charts (``phi`` wrapped to [0, 2 pi))."""

    chart: str
    coords: tuple
    labels: tuple

    @classmethod
    def from_state(cls, loop, chart, y):
        z = to_chart(loop, chart, y)
        return cls(chart, tuple(float(c) for c in z), CHART_LABELS[(loop.system, chart)])

    def __getitem__(self, name):
        return self.coords[self.labels.index(name)]


def _check_chart(loop, chart):
    if (loop.system, chart) not in CHART_LABELS:
        raise ChartMismatch(f"chart {chart!r} does not apply to the {loop.system} loop")
    return CHART_LABELS[(loop.system, chart)]


def chart_labels(loop, chart):
    return _check_chart(loop, chart)


def to_chart(loop, chart, y):
    """Map original states ``y[..., :]`` into ``chart`` coordinates."""
    _check_chart(loop, chart)
    y = np.asarray(y, dtype=float)
    if chart == "original":
        return y.copy()
    if loop.system == "first_order":
        x_star = loop.x_star()
        return np.stack([log_chart(y[..., 0], x_star), y[..., 1] - loop.mu0], axis=-1)
    r, phi = polar_chart(y[..., 0], y[..., 1], loop.model.omega)
    if chart == "polar":
        return np.stack([r, phi, y[..., 2]], axis=-1)
    return np.stack([np.log(r) - np.log(loop.x_star()), phi, y[..., 2] - loop.mu0], axis=-1)


def from_chart(loop, chart, z):
    """Inverse of :func:`to_chart`."""
    _check_chart(loop, chart)
    z = np.asarray(z, dtype=float)
    if chart == "original":
        return z.copy()
    if loop.system == "first_order":
        return np.stack([log_chart_inverse(z[..., 0], loop.x_star()), z[..., 1] + loop.mu0], axis=-1)
    if chart == "polar":
        r, mu = z[..., 0], z[..., 2]
    else:
        r, mu = loop.x_star() * np.exp(z[..., 0]), z[..., 2] + loop.mu0
    x, v = polar_chart_inverse(r, z[..., 1], loop.model.omega)
    return np.stack([x, v, mu], axis=-1)


def chart_jacobian(loop, chart, y):
    """Analytic derivative ``DT(y)`` of the chart map at a single state."""
    _check_chart(loop, chart)
    y = np.asarray(y, dtype=float)
    if chart == "original":
        return np.eye(y.size)
    if loop.system == "first_order":
        return np.array([[1.0 / y[0], 0.0], [0.0, 1.0]])
    x, v = y[0], y[1]
    w = loop.model.omega
    r2 = x * x + (v / w) ** 2
    r = np.sqrt(r2)
    dphi = [(v / w) / r2, -x / (w * r2), 0.0]
    if chart == "polar":
        return np.array([[x / r, v / (w * w * r), 0.0], dphi, [0.0, 0.0, 1.0]])
    return np.array([[x / r2, v / (w * w * r2), 0.0], dphi, [0.0, 0.0, 1.0]])


def transformed_rhs(chart, loop):
    """Closed-loop vector field written in ``chart`` coordinates.

    The returned callable ``F(t, z)`` satisfies ``F(T(y)) = DT(y) rhs(y)``.
    ``phi`` is not wrapped, so integrating ``F`` gives an unwrapped phase.
    """
    _check_chart(loop, chart)
    if chart == "original":
        return loop.rhs
    law, model, mu0 = loop.law, loop.model, loop.mu0
    star = loop.x_star()

    if loop.system == "first_order":
        f_star = float(law.g(mu0))

        def log_field(t, z):
            q, p = z[..., 0], z[..., 1]
            x = star * np.exp(q)
            dq = p
            if model.forcing is not None or model.perturbation is not None:
                dq = dq + _input(model, t, x, p + mu0) / x
            # dp = -f~(q) - g~(p) with f~(q) = g(mu0) - f(x* e^q), g~(p) = g(p + mu0) - g(mu0)
            dp = -(f_star - law.f(x)) - (law.g(p + mu0) - f_star)
            return np.stack([dq, dp], axis=-1)

        return log_field

    w, lam = model.omega, model.lam

    def polar_parts(t, r, phi, mu):
        s, c = np.sin(phi), np.cos(phi)
        dmu_gap = mu - mu0
        dlogr = dmu_gap * s * s
        dphi = w + dmu_gap * s * c
        if lam != 0:
            dlogr = dlogr - lam * w * w * r * r * s ** 4
            dphi = dphi - lam * w * w * r * r * s ** 3 * c
        if model.forcing is not None or model.perturbation is not None:
            x, v = r * c, -r * w * s
            u = _input(model, t, x, mu, v)
            dlogr = dlogr - u * s / (w * r)
            dphi = dphi - u * c / (w * r)
        dmu = 0 * mu if loop.frozen_mu else law.f(r) - law.g(mu)
        return dlogr, dphi, dmu

    if chart == "polar":
        def polar_field(t, z):
            r, phi, mu = z[..., 0], z[..., 1], z[..., 2]
            dlogr, dphi, dmu = polar_parts(t, r, phi, mu)
            return np.stack([r * dlogr, dphi, dmu], axis=-1)

        return polar_field

    def qphi_p_field(t, z):
        q, phi, p = z[..., 0], z[..., 1], z[..., 2]
        dq, dphi, dp = polar_parts(t, star * np.exp(q), phi, p + mu0)
        return np.stack([dq, dphi, dp], axis=-1)

    return qphi_p_field


def chart_trajectory(loop, traj: Trajectory, chart) -> Trajectory:
    """Express a trajectory of ``loop`` (original coordinates) in ``chart``."""
    labels = _check_chart(loop, chart)
    if traj.labels and traj.labels != loop.labels:
        raise ChartMismatch(f"trajectory labelled {traj.labels} is not in original coordinates")
    return Trajectory(traj.times, to_chart(loop, chart, traj.states),
                      traj.n_accepted, traj.n_rejected, labels)


def simulate(loop, y0, horizon, config: IntegratorConfig = IntegratorConfig(), t0=0.0,
             chart="original") -> Trajectory:
    """Integrate ``loop`` from ``y0`` over ``[t0, t0 + horizon]``.

    In the original chart the domain guard of ``config`` applies.  Passing
    ``chart="log"`` (first-order) or ``"qphi_p"`` (oscillator) integrates in
    proof coordinates, where the domain is automatic, and maps back.
    """
    y0 = np.asarray(y0, dtype=float)
    if not loop.domain(y0):
        raise DomainViolation(f"initial state {y0.tolist()} is outside the domain ({loop.system})")
    if chart == "original":
        return integrate(loop.rhs, y0, t0, t0 + horizon, config, domain=loop.domain,
                         labels=loop.labels)
    _check_chart(loop, chart)
    traj = integrate(transformed_rhs(chart, loop), to_chart(loop, chart, y0), t0, t0 + horizon,
                     replace(config, domain_guard=False))
    return Trajectory(traj.times, from_chart(loop, chart, traj.states), traj.n_accepted,
                      traj.n_rejected, loop.labels)

"""Explicit Runge-Kutta integration for small (optionally batched) ODE systems.

Two integrators are provided: classic fixed-step RK4 for reproducible
reference runs, and the Dormand-Prince 5(4) embedded pair with PI step-size
control as the default.  Both accept states of any array shape; the vector
field maps ``(t, y) -> dy/dt`` with ``dy/dt.shape == y.shape``, which lets a
whole batch of initial conditions share one step sequence.

``integrate_with_variational`` integrates the state together with its
fundamental matrix, as needed for monodromy matrices.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DomainViolation, JacobianMismatch, NonFiniteState, StepUnderflow

VectorField = Callable[[float, np.ndarray], np.ndarray]

# Dormand-Prince 5(4) tableau
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
_E = _B5 - _B4

# PI controller exponents for a 5th order pair (Hairer, Wanner)
_ALPHA = 0.7 / 5
_BETA = 0.4 / 5
_SAFETY = 0.9
_MIN_FACTOR, _MAX_FACTOR = 0.2, 5.0
_UNDERFLOW = 1e-14


@dataclass(frozen=True)
class IntegratorConfig:
    """Integrator selection and tolerances.

    ``domain_guard`` switches the admissibility check on; the predicate itself
    is supplied by the caller (see ``dynamics.FirstOrderLoop.domain``).
    """

    mode: str = "adaptive"
    step: float = 1e-3
    abs_tol: float = 1e-9
    rel_tol: float = 1e-9
    max_steps: int = 5_000_000
    domain_guard: bool = True
    first_step: Optional[float] = None

    def __post_init__(self):
        if self.mode not in ("fixed", "adaptive"):
            raise ValueError(f"mode must be 'fixed' or 'adaptive', got {self.mode!r}")
        if not self.step > 0:
            raise ValueError("step must be positive")
        if not (self.abs_tol > 0 and self.rel_tol > 0):
            raise ValueError("tolerances must be positive")
        if self.max_steps < 1:
            raise ValueError("max_steps must be at least 1")
        if self.first_step is not None and not self.first_step > 0:
            raise ValueError("first_step must be positive")


@dataclass
class Trajectory:
    """Time samples and states of one integration run.

    ``states[k]`` is the state at ``times[k]``; for batched runs each sample
    has shape ``(batch, dim)``.  ``labels`` name the last state axis.
    """

    times: np.ndarray
    states: np.ndarray
    n_accepted: int = 0
    n_rejected: int = 0
    labels: tuple = ()

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.states = np.asarray(self.states, dtype=float)
        if self.times.ndim != 1 or len(self.times) != len(self.states):
            raise ValueError("times and states must have equal length")
        if len(self.times) > 1 and not np.all(np.diff(self.times) > 0):
            raise ValueError("times must be strictly increasing")
        if not (np.all(np.isfinite(self.times)) and np.all(np.isfinite(self.states))):
            raise NonFiniteState("trajectory contains non-finite values")
        self.labels = tuple(self.labels)

    def __len__(self):
        return len(self.times)

    @property
    def final(self):
        return self.states[-1]

    def component(self, name):
        return self.states[..., self.labels.index(name)]

    def tail(self, fraction):
        """Sub-trajectory covering the last ``fraction`` of the time span."""
        t_cut = self.times[-1] - fraction * (self.times[-1] - self.times[0])
        keep = self.times >= t_cut
        return Trajectory(self.times[keep], self.states[keep], labels=self.labels)


def _check_finite(y, t):
    if not np.all(np.isfinite(y)):
        raise NonFiniteState(f"non-finite state at t={t:.17g}")


def integrate_fixed(rhs: VectorField, y0, t0: float, t1: float, h: float, *,
                    domain=None, observer=None, record=True, labels=()) -> Trajectory:
    """Classic fourth-order Runge-Kutta with a fixed step.

    Samples are taken at ``t0 + k*h``; the last step is shortened to land
    exactly on ``t1``.
    """
    if not h > 0:
        raise ValueError("step must be positive")
    if t1 < t0:
        raise ValueError("t1 must not precede t0")
    y = np.array(y0, dtype=float)
    _check_finite(y, t0)
    n_full = int(math.floor((t1 - t0) / h + 1e-9))
    grid = t0 + h * np.arange(n_full + 1)
    if t1 - grid[-1] > 1e-9 * h:
        grid = np.append(grid, t1)
    else:
        grid[-1] = t1
    times, states = [t0], [y.copy()]
    with np.errstate(all="ignore"):
        for t, t_next in zip(grid[:-1], grid[1:]):
            dt = t_next - t
            k1 = rhs(t, y)
            k2 = rhs(t + dt / 2, y + dt / 2 * k1)
            k3 = rhs(t + dt / 2, y + dt / 2 * k2)
            k4 = rhs(t_next, y + dt * k3)
            y = y + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            _check_finite(y, t_next)
            if domain is not None and not domain(y):
                raise DomainViolation(f"state left the domain at t={t_next:.17g}")
            if observer is not None:
                observer(t_next, y)
            if record:
                times.append(t_next)
                states.append(y.copy())
    if not record and len(grid) > 1:
        times.append(grid[-1])
        states.append(y.copy())
    return Trajectory(np.array(times), np.array(states), n_accepted=len(grid) - 1, labels=labels)


def _error_norm(err, y, y_new, atol, rtol):
    scale = atol + rtol * np.maximum(np.abs(y), np.abs(y_new))
    return float(np.max(np.abs(err) / scale)) if err.size else 0.0


def _initial_step(rhs, t0, y0, f0, direction_span, atol, rtol):
    # Hairer, Norsett & Wanner, Solving ODEs I, II.4
    scale = atol + rtol * np.abs(y0)
    d0 = float(np.max(np.abs(y0) / scale)) if y0.size else 0.0
    d1 = float(np.max(np.abs(f0) / scale)) if y0.size else 0.0
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    h0 = min(h0, direction_span)
    f1 = rhs(t0 + h0, y0 + h0 * f0)
    d2 = float(np.max(np.abs(f1 - f0) / scale)) / h0 if y0.size else 0.0
    if not np.isfinite(d2):
        return h0 / 10
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1 / 5)
    return min(100 * h0, h1, direction_span)


def integrate_adaptive(rhs: VectorField, y0, t0: float, t1: float,
                       abs_tol: float = 1e-9, rel_tol: float = 1e-9, *,
                       first_step=None, max_steps=5_000_000, domain=None,
                       observer=None, record=True, labels=()) -> Trajectory:
    """Dormand-Prince 5(4) with PI step-size control.

    The scaled local error estimate ``max|err| / (abs_tol + rel_tol*|y|)`` of
    every accepted step is at most one.  Steps whose result is non-finite or
    fails the ``domain`` predicate are rejected and halved; if the step then
    underflows ``1e-14*|t1 - t0|`` the matching error is raised.

    ``observer(t, y)`` is called after every accepted step.  With
    ``record=False`` only the end points are stored.
    """
    if not (abs_tol > 0 and rel_tol > 0):
        raise ValueError("tolerances must be positive")
    if t1 < t0:
        raise ValueError("t1 must not precede t0")
    y = np.array(y0, dtype=float)
    _check_finite(y, t0)
    if domain is not None and not domain(y):
        raise DomainViolation(f"initial state outside the domain at t={t0:.17g}")
    times, states = [t0], [y.copy()]
    span = t1 - t0
    if span == 0:
        return Trajectory(np.array(times), np.array(states), labels=labels)

    h_min = _UNDERFLOW * span
    n_acc = n_rej = 0
    t = t0
    with np.errstate(all="ignore"):
        f = rhs(t, y)
        if first_step is None:
            h = _initial_step(rhs, t0, y, f, span, abs_tol, rel_tol)
        else:
            h = min(first_step, span)
        err_prev = 1e-4
        rejected_last = False
        reason = None
        ks = [None] * 7
        while t < t1:
            if n_acc + n_rej >= max_steps:
                raise StepUnderflow(f"max_steps={max_steps} exhausted at t={t:.17g}")
            last = t + h >= t1 - 1e-13 * span
            if last:
                h = t1 - t
            ks[0] = f
            for i in range(1, 7):
                acc = y.copy()
                for j, a in enumerate(_A[i]):
                    if a != 0.0:
                        acc += (h * a) * ks[j]
                ks[i] = rhs(t + _C[i] * h, acc)
            y_new = acc  # stage 7 point is the 5th order solution (FSAL)
            err_vec = h * sum(_E[i] * ks[i] for i in range(7) if _E[i] != 0.0)
            err = _error_norm(err_vec, y, y_new, abs_tol, rel_tol)

            ok = np.isfinite(err) and np.all(np.isfinite(y_new)) and np.all(np.isfinite(ks[6]))
            if not ok:
                reason = "nonfinite"
            elif domain is not None and not domain(y_new):
                ok = False
                reason = "domain"
            if not ok:
                n_rej += 1
                h *= 0.5
                rejected_last = True
            elif err <= 1.0:
                t_new = t1 if last else t + h
                t, y, f = t_new, y_new, ks[6]
                n_acc += 1
                if observer is not None:
                    observer(t, y)
                if record:
                    times.append(t)
                    states.append(y.copy())
                fac = _SAFETY * max(err, 1e-10) ** -_ALPHA * err_prev ** _BETA
                fac = min(_MAX_FACTOR, max(_MIN_FACTOR, fac))
                if rejected_last:
                    fac = min(fac, 1.0)
                h *= fac
                err_prev = max(err, 1e-4)
                rejected_last = False
                reason = None
                continue
            else:
                n_rej += 1
                reason = "error"
                h *= max(_MIN_FACTOR, _SAFETY * err ** -_ALPHA)
                rejected_last = True
            if h < h_min:
                if reason == "domain":
                    raise DomainViolation(f"state left the domain near t={t:.17g}")
                if reason == "nonfinite":
                    raise NonFiniteState(f"non-finite state near t={t:.17g}")
                raise StepUnderflow(f"step {h:.3g} below minimum {h_min:.3g} at t={t:.17g}")
    if not record:
        times.append(t)
        states.append(y.copy())
    return Trajectory(np.array(times), np.array(states), n_accepted=n_acc,
                      n_rejected=n_rej, labels=labels)


def integrate(rhs: VectorField, y0, t0: float, t1: float,
              config: IntegratorConfig = IntegratorConfig(), *, domain=None,
              observer=None, record=True, labels=()) -> Trajectory:
    """Dispatch to the integrator selected by ``config``."""
    guard = domain if config.domain_guard else None
    if config.mode == "fixed":
        return integrate_fixed(rhs, y0, t0, t1, config.step, domain=guard,
                               observer=observer, record=record, labels=labels)
    return integrate_adaptive(rhs, y0, t0, t1, config.abs_tol, config.rel_tol,
                              first_step=config.first_step, max_steps=config.max_steps,
                              domain=guard, observer=observer, record=record, labels=labels)


def finite_difference_jacobian(rhs: VectorField, t: float, y) -> np.ndarray:
    """Central-difference Jacobian with steps ``1e-6*(1 + |y_i|)``."""
    y = np.asarray(y, dtype=float)
    n = y.size
    jac = np.empty((n, n))
    for i in range(n):
        step = 1e-6 * (1 + abs(y[i]))
        up, down = y.copy(), y.copy()
        up[i] += step
        down[i] -= step
        jac[:, i] = (np.asarray(rhs(t, up)) - np.asarray(rhs(t, down))) / (2 * step)
    return jac


def check_jacobian(rhs: VectorField, jacobian, t: float, y, rtol: float = 1e-4):
    """Raise JacobianMismatch unless ``jacobian`` matches central differences."""
    y = np.asarray(y, dtype=float)
    analytic = np.asarray(jacobian(t, y), dtype=float)
    numeric = finite_difference_jacobian(rhs, t, y)
    if analytic.shape != numeric.shape:
        raise JacobianMismatch(f"jacobian shape {analytic.shape} != {numeric.shape}")
    gap = float(np.max(np.abs(analytic - numeric)))
    if gap > rtol * max(1.0, float(np.max(np.abs(numeric)))):
        raise JacobianMismatch(f"jacobian differs from finite differences by {gap:.3g}")


def integrate_with_variational(rhs: VectorField, jacobian, y0, t0: float, t1: float,
                               config: IntegratorConfig = IntegratorConfig(), *,
                               domain=None, labels=()):
    """Integrate ``y`` together with its fundamental matrix.

    Returns ``(trajectory, Phi)`` where ``Phi = Phi(t1, t0)`` solves
    ``dPhi/dt = J(t, y(t)) Phi`` with ``Phi(t0) = I``.  State and matrix share
    one step sequence since they are advanced as a single augmented system.
    """
    y0 = np.asarray(y0, dtype=float).ravel()
    n = y0.size
    check_jacobian(rhs, jacobian, t0, y0)

    def augmented(t, z):
        y = z[:n]
        phi = z[n:].reshape(n, n)
        dphi = np.asarray(jacobian(t, y), dtype=float) @ phi
        return np.concatenate([np.asarray(rhs(t, y), dtype=float).ravel(), dphi.ravel()])

    z0 = np.concatenate([y0, np.eye(n).ravel()])
    guard = None if domain is None else (lambda z: domain(z[:n]))
    traj = integrate(augmented, z0, t0, t1, config, domain=guard)
    base = Trajectory(traj.times, traj.states[:, :n], traj.n_accepted, traj.n_rejected, labels)
    return base, traj.states[-1, n:].reshape(n, n)


def observed_order(errors: Sequence[float], steps: Sequence[float]) -> np.ndarray:
    """Convergence orders between consecutive (step, error) pairs."""
    e = np.asarray(errors, dtype=float)
    h = np.asarray(steps, dtype=float)
    return np.log(e[:-1] / e[1:]) / np.log(h[:-1] / h[1:])

"""Numerical counterparts of the stability arguments.

* Lyapunov function of the first-order loop in the log chart and its
  monotonicity along simulated trajectories.
* Positive-real margin of ``H(s) + 1`` with ``H(s) = a / (s (s + b))`` and a
  quadratic storage function certifying ``dV/dt <= u p + u**2`` (KYP).
* The sector identity of the feedback ``u = -sin(phi)**2 p``.
* Linearization at the first-order equilibrium.
* Floquet multipliers of the ``(q, p)`` dynamics along the periodic orbit,
  which stand in for a converse Lyapunov function.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.optimize import minimize

from .adaptation import AdaptationLaw, equilibrium_point, effective_gains, validate_theorem3_4
from .dynamics import OscillatorLoop, OscillatorModel, transformed_rhs
from .errors import ChartMismatch, HypothesisViolation, Infeasible
from .ode import IntegratorConfig, finite_difference_jacobian, integrate_with_variational

SIMPSON_TOL = 1e-11
SIMPSON_DEPTH = 40
KYP_TOL = 1e-9


# -- quadrature ----------------------------------------------------------------------


def adaptive_simpson(func, a, b, tol=SIMPSON_TOL, max_depth=SIMPSON_DEPTH):
    """Integral of ``func`` over ``[a, b]`` by adaptive Simpson with Richardson correction."""
    if a == b:
        return 0.0

    def simpson(fa, fm, fb, h):
        return h / 6.0 * (fa + 4.0 * fm + fb)

    def recurse(a, b, fa, fm, fb, whole, tol, depth):
        m = 0.5 * (a + b)
        lm, rm = 0.5 * (a + m), 0.5 * (m + b)
        flm, frm = func(lm), func(rm)
        left = simpson(fa, flm, fm, m - a)
        right = simpson(fm, frm, fb, b - m)
        delta = left + right - whole
        if depth <= 0 or abs(delta) <= 15.0 * tol:
            return left + right + delta / 15.0
        return (recurse(a, m, fa, flm, fm, left, tol / 2, depth - 1)
                + recurse(m, b, fm, frm, fb, right, tol / 2, depth - 1))

    fa, fb = func(a), func(b)
    fm = func(0.5 * (a + b))
    return recurse(a, b, fa, fm, fb, simpson(fa, fm, fb, b - a), tol, max_depth)


# -- Lyapunov function of the first-order loop ---------------------------------------


def spring_force(law: AdaptationLaw, mu0: float):
    """``f~(q) = g(mu0) - f(exp(q) x*)``, the nonlinear spring of the log chart."""
    x_star = equilibrium_point(law, mu0)
    g0 = float(law.g(mu0))
    return lambda q: g0 - float(law.f(x_star * np.exp(q)))


def lyapunov_value(q, p, law: AdaptationLaw, mu0: float):
    """``V(q, p) = int_0^q f~(s) ds + p**2 / 2``."""
    force = spring_force(law, mu0)
    return adaptive_simpson(force, 0.0, float(q)) + 0.5 * float(p) ** 2


def lyapunov_increments(traj, law: AdaptationLaw, mu0: float):
    """``V(k+1) - V(k)`` between consecutive samples of a ``(q, p)`` trajectory.

    Each increment integrates ``f~`` over ``[q_k, q_{k+1}]`` directly, so no
    cancellation between large values of ``V`` occurs.
    """
    if tuple(traj.labels) != ("q", "p"):
        raise ChartMismatch(f"expected a (q, p) trajectory, got labels {traj.labels}")
    force = spring_force(law, mu0)
    q, p = traj.states[:, 0], traj.states[:, 1]
    potential = np.array([adaptive_simpson(force, q[k], q[k + 1]) for k in range(len(q) - 1)])
    return potential + 0.5 * (p[1:] ** 2 - p[:-1] ** 2)


def lyapunov_monotonicity(traj, law: AdaptationLaw, mu0: float) -> float:
    """Largest increase of ``V`` between consecutive samples (0 if none)."""
    if len(traj) < 2:
        return 0.0
    return max(0.0, float(np.max(lyapunov_increments(traj, law, mu0))))


# -- passivity -----------------------------------------------------------------------


def positive_real_margin(a: float, b: float) -> float:
    """``inf_w Re[H(jw) + 1] = 1 - a / b**2`` (attained at ``w = 0``)."""
    if not (a > 0 and b > 0):
        raise ValueError("a and b must be positive")
    return 1.0 - a / (b * b)


@dataclass(frozen=True)
class QuadraticForm:
    """``V(z) = z^T P z / 2`` for a symmetric 2x2 matrix ``P``."""

    P: np.ndarray

    def __post_init__(self):
        P = np.asarray(self.P, dtype=float)
        if P.shape != (2, 2) or not np.allclose(P, P.T, rtol=0, atol=1e-14):
            raise ValueError("P must be a symmetric 2x2 matrix")
        object.__setattr__(self, "P", 0.5 * (P + P.T))

    def __call__(self, q, p):
        P = self.P
        return 0.5 * (P[0, 0] * q * q + 2 * P[0, 1] * q * p + P[1, 1] * p * p)

    def leading_minors(self):
        return float(self.P[0, 0]), float(np.linalg.det(self.P))

    @property
    def positive_definite(self):
        return all(m > 0 for m in self.leading_minors())


# q' = -u, p' = -a q - b p, output p
def _plant(a, b):
    A = np.array([[0.0, 0.0], [-a, -b]])
    B = np.array([[-1.0], [0.0]])
    C = np.array([[0.0, 1.0]])
    return A, B, C


def kyp_block(P, a, b):
    """Symmetric matrix ``M`` with ``dV/dt - u p - u**2 = [z; u]^T M [z; u]``."""
    A, B, C = _plant(a, b)
    P = np.asarray(P, dtype=float)
    cross = 0.5 * (P @ B - C.T)
    return np.block([[0.5 * (P @ A + A.T @ P), cross], [cross.T, -np.ones((1, 1))]])


def storage_rate_gap(form: QuadraticForm, a, b, q, p, u):
    """``dV/dt - u p - u**2`` along ``q' = -u, p' = -a q - b p``."""
    P = form.P
    dq, dp = -u, -a * q - b * p
    vdot = (P[0, 0] * q + P[0, 1] * p) * dq + (P[0, 1] * q + P[1, 1] * p) * dp
    return vdot - u * p - u * u


def _kyp_objective(theta, a, b):
    P = np.array([[theta[0], theta[1]], [theta[1], theta[2]]])
    top = np.linalg.eigvalsh(kyp_block(P, a, b))[-1]
    return max(top, -np.linalg.eigvalsh(P)[0])


def kyp_storage(a: float, b: float, seed: int = 0, n_starts: int = 4, n_restarts: int = 3) -> QuadraticForm:
    """Positive definite ``P`` with ``dV/dt <= u p + u**2`` for all ``(q, p, u)``.

    Minimises the largest eigenvalue of :func:`kyp_block` over the three free
    entries of ``P`` (Nelder-Mead, restarted from its own optimum, from a few
    deterministic and seeded starts).  Feasibility is certified when that
    eigenvalue is at most ``1e-9`` and both leading minors of ``P`` are
    positive; otherwise :class:`Infeasible` is raised.
    """
    if not (a > 0 and b > 0):
        raise ValueError("a and b must be positive")
    rng = np.random.default_rng(seed)
    starts = [np.array([1.0, 0.0, 1.0]), np.array([2.0, 1.0, 1.0])]
    starts += [np.exp(rng.normal(size=3)) * [1.0, 0.5, 1.0] for _ in range(max(0, n_starts - 2))]
    best_x, best_f = None, np.inf
    for start in starts:
        x = start
        for _ in range(n_restarts):
            res = minimize(_kyp_objective, x, args=(a, b), method="Nelder-Mead",
                           options={"xatol": 1e-12, "fatol": 1e-14, "maxiter": 4000})
            x = res.x
            if res.fun <= 1e-12:
                break
        if res.fun < best_f:
            best_x, best_f = res.x, res.fun
        if best_f <= 1e-12:
            break
    form = QuadraticForm(np.array([[best_x[0], best_x[1]], [best_x[1], best_x[2]]]))
    top = float(np.linalg.eigvalsh(kyp_block(form.P, a, b))[-1])
    if top > KYP_TOL or not form.positive_definite:
        raise Infeasible(f"no storage function certified for a={a}, b={b} "
                         f"(best max eigenvalue {top:.3g})")
    return form


def storage_monotonicity(traj, form: QuadraticForm) -> float:
    """Largest increase of ``form(q, p)`` between samples of a ``q, p`` trajectory."""
    labels = tuple(traj.labels)
    if "q" not in labels or "p" not in labels:
        raise ChartMismatch(f"trajectory labelled {labels} has no q, p coordinates")
    v = form(traj.component("q"), traj.component("p"))
    return max(0.0, float(np.max(np.diff(v)))) if len(v) > 1 else 0.0


def sector_identity(phi, p):
    """Both sides of ``u p + u**2 = -(sin(phi) cos(phi) p)**2`` with ``u = -sin(phi)**2 p``."""
    s = np.sin(phi)
    u = -s * s * p
    return u * p + u * u, -(s * np.cos(phi) * p) ** 2


# -- linearization -------------------------------------------------------------------


def eig2(M):
    """Eigenvalues of a real 2x2 matrix from its trace and determinant."""
    M = np.asarray(M, dtype=float)
    half_tr = 0.5 * (M[0, 0] + M[1, 1])
    det = M[0, 0] * M[1, 1] - M[0, 1] * M[1, 0]
    disc = half_tr * half_tr - det
    if disc >= 0:
        root = np.sqrt(disc)
        big = half_tr + np.copysign(root, half_tr) if half_tr != 0 else root
        small = det / big if big != 0 else -big
        return np.array(sorted([big, small], key=lambda z: -abs(z)), dtype=complex)
    root = np.sqrt(-disc)
    return np.array([complex(half_tr, root), complex(half_tr, -root)])


@dataclass(frozen=True)
class Linearization:
    matrix: np.ndarray
    eigenvalues: np.ndarray
    x_star: float

    @property
    def stable(self):
        return bool(np.all(self.eigenvalues.real < 0))

    @property
    def slowest_rate(self):
        return float(np.max(self.eigenvalues.real))


def linearize_equilibrium(law: AdaptationLaw, mu0: float) -> Linearization:
    """Jacobian ``[[0, 1], [f'(x*) x*, -g'(mu0)]]`` of the log-chart loop at the origin."""
    x_star = equilibrium_point(law, mu0)
    M = np.array([[0.0, 1.0], [float(law.f_prime(x_star)) * x_star, -float(law.g_prime(mu0))]])
    return Linearization(M, eig2(M), x_star)


def fit_decay_rate(times, q, p=None):
    """Exponential rate fitted to a small decaying signal.

    With at least four extrema of ``|q|`` the log of the (parabola-refined)
    extreme values is regressed on their times; successive extrema of a
    damped linear oscillation decay exactly like ``exp(Re(lambda) t)``.
    Otherwise the log of ``|(q, p)|`` over the second half is regressed.
    """
    times = np.asarray(times, dtype=float)
    q = np.asarray(q, dtype=float)
    a = np.abs(q)
    idx = np.where((a[1:-1] > a[:-2]) & (a[1:-1] >= a[2:]))[0] + 1
    if len(idx) >= 4:
        tp, vp = [], []
        for i in idx:
            y0, y1, y2 = a[i - 1], a[i], a[i + 1]
            h = times[i + 1] - times[i]
            denom = y0 - 2 * y1 + y2
            shift = 0.5 * (y0 - y2) / denom if denom != 0 else 0.0
            tp.append(times[i] + shift * h)
            vp.append(y1 - 0.25 * (y0 - y2) * shift)
        return float(np.polyfit(tp, np.log(vp), 1)[0])
    norm = np.abs(q) if p is None else np.hypot(q, np.asarray(p, dtype=float))
    half = times >= times[0] + 0.5 * (times[-1] - times[0])
    return float(np.polyfit(times[half], np.log(norm[half]), 1)[0])


# -- Floquet -------------------------------------------------------------------------


@dataclass(frozen=True)
class FloquetResult:
    period: float
    monodromy: np.ndarray
    multipliers: np.ndarray
    a_eff: float
    b_eff: float
    omega: float
    mode: str = "reduced"

    @property
    def spectral_radius(self):
        return float(np.max(np.abs(self.multipliers)))

    @property
    def stable(self):
        return self.spectral_radius < 1.0

    def to_dict(self):
        return {
            "period": self.period,
            "mode": self.mode,
            "a_eff": self.a_eff,
            "b_eff": self.b_eff,
            "omega": self.omega,
            "monodromy": self.monodromy.tolist(),
            "multipliers": [[m.real, m.imag] for m in self.multipliers],
            "spectral_radius": self.spectral_radius,
            "determinant": float(np.linalg.det(self.monodromy)),
        }


def _monodromy(rhs, jac, period, config):
    _, phi = integrate_with_variational(rhs, jac, np.zeros(2), 0.0, period, config)
    return phi


def floquet_from_gains(a_eff: float, b_eff: float, omega: float,
                       config: IntegratorConfig = IntegratorConfig()) -> FloquetResult:
    """Multipliers of ``q' = sin(omega t)**2 p, p' = -a_eff q - b_eff p`` over one period."""
    if not omega > 0:
        raise ValueError("omega must be positive")

    def jac(t, y):
        s = np.sin(omega * t)
        return np.array([[0.0, s * s], [-a_eff, -b_eff]])

    def rhs(t, y):
        return jac(t, y) @ y

    period = 2 * np.pi / omega
    phi = _monodromy(rhs, jac, period, config)
    return FloquetResult(period, phi, eig2(phi), float(a_eff), float(b_eff), float(omega))


def floquet_multipliers(law: AdaptationLaw, mu0: float, omega: float, mode: str = "reduced",
                        config: IntegratorConfig = IntegratorConfig(), check: bool = True,
                        r_star: Optional[float] = None) -> FloquetResult:
    """Floquet multipliers of the periodic orbit of the reduced oscillator loop.

    ``reduced`` uses the gains ``a_eff = -f'(r*) r*`` and ``b_eff = g'(mu0)``;
    ``full`` differentiates the exact ``(q, phi, p)`` field numerically along
    ``q = p = 0, phi = omega t`` and keeps the ``(q, p)`` block.  With
    ``check`` the gain hypotheses are validated first.
    """
    report = validate_theorem3_4(law, mu0, omega, r_star)
    if check and not report.passed:
        raise HypothesisViolation(f"hypotheses fail: {', '.join(report.failed())}")
    a_eff, b_eff = report.values["a_eff"], report.values["b_eff"]
    if mode == "reduced":
        return floquet_from_gains(a_eff, b_eff, omega, config)
    if mode != "full":
        raise ValueError("mode must be 'reduced' or 'full'")

    loop = OscillatorLoop(OscillatorModel(mu0, omega=omega), law)
    field = transformed_rhs("qphi_p", loop)

    def rhs(t, y):
        z = field(t, np.array([y[0], omega * t, y[1]]))
        return np.array([z[0], z[2]])

    def jac(t, y):
        return finite_difference_jacobian(rhs, t, y)

    period = 2 * np.pi / omega
    phi = _monodromy(rhs, jac, period, config)
    return FloquetResult(period, phi, eig2(phi), a_eff, b_eff, float(omega), mode="full")


def averaged_multipliers(a_eff: float, b_eff: float, omega: float):
    """``exp(T * eig([[0, 1/2], [-a, -b]]))``, the fast-oscillation limit."""
    period = 2 * np.pi / omega
    return np.exp(period * eig2(np.array([[0.0, 0.5], [-a_eff, -b_eff]])))

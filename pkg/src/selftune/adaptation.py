"""Adaptation laws ``dmu/dt = f(amplitude) - g(mu)`` and checks of their hypotheses.

``amplitude`` is the state ``x`` of the first-order system or the polar
radius ``sqrt(x**2 + (xdot/omega)**2)`` of the oscillator.  Built-in laws carry
closed-form derivatives and inverses of ``f``; custom laws are parsed from the
expression grammar in :mod:`selftune.signals` and differentiated numerically.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import DomainViolation, ExpressionError, NotInImage
from .signals import Expr

# sampling grids used by the hypothesis validators
F_GRID = np.logspace(-6, 6, 400)
G_GRID = np.linspace(-20.0, 20.0, 401)
MU0_GRID = np.round(np.arange(-5.0, 5.0 + 1e-9, 0.1), 12)
BRACKET = (1e-12, 1e12)
BISECTION_TOL = 1e-12
EXPANSION = 10.0


def _central(fn, z, relative=False):
    h = 1e-6 * (1 + np.abs(z))
    if relative:
        # amplitudes live on x > 0: never step across 0
        h = np.minimum(h, 0.5 * np.abs(z))
    return (fn(z + h) - fn(z - h)) / (2 * h)


@dataclass(frozen=True)
class AdaptationLaw:
    """A pair ``(f, g)`` defining ``dmu/dt = f(amplitude) - g(mu)``."""

    f: Callable
    g: Callable
    variant: str = "custom"
    params: dict = field(default_factory=dict)
    df: Optional[Callable] = None
    dg: Optional[Callable] = None
    f_inverse: Optional[Callable] = None
    source: Optional[tuple] = None

    def rate(self, amplitude, mu):
        amplitude = np.asarray(amplitude, dtype=float)
        if np.any(amplitude <= 0):
            raise DomainViolation("adaptation law needs a strictly positive amplitude")
        return self.f(amplitude) - self.g(mu)

    def f_prime(self, x):
        x = np.asarray(x, dtype=float)
        return self.df(x) if self.df is not None else _central(self.f, x, relative=True)

    def g_prime(self, mu):
        mu = np.asarray(mu, dtype=float)
        return self.dg(mu) if self.dg is not None else _central(self.g, mu)

    @property
    def has_analytic_derivatives(self):
        return self.df is not None and self.dg is not None


def law_rate(law: AdaptationLaw, amplitude, mu):
    """``f(amplitude) - g(mu)``."""
    return law.rate(amplitude, mu)


def log_law(a=1.0, b=1.0):
    """``dmu/dt = -a ln(x) - b mu``, the unbounded law with a linear proof chart."""
    a, b = float(a), float(b)
    if not (a > 0 and b > 0):
        raise ValueError("log law needs a > 0 and b > 0")
    return AdaptationLaw(
        f=lambda x: -a * np.log(x),
        g=lambda mu: b * mu,
        df=lambda x: -a / x,
        dg=lambda mu: b + 0 * mu,
        f_inverse=lambda y: np.exp(-y / a),
        variant="log",
        params={"a": a, "b": b},
    )


def sigmoid_law():
    """``dmu/dt = 1/(1 + x**2) - 1/(1 + exp(-mu))``, a bounded law."""

    def g(mu):
        return 1.0 / (1.0 + np.exp(-mu))

    def dg(mu):
        e = np.exp(-np.abs(mu))
        return e / (1.0 + e) ** 2

    return AdaptationLaw(
        f=lambda x: 1.0 / (1.0 + x * x),
        g=g,
        df=lambda x: -2.0 * x / (1.0 + x * x) ** 2,
        dg=dg,
        f_inverse=lambda y: np.sqrt(1.0 / y - 1.0),
        variant="sigmoid",
    )


def bounded_osc_law(a=1.0, b=1.0):
    """``dmu/dt = 1/(1 + r**a) - b mu`` for the oscillator amplitude ``r``."""
    a, b = float(a), float(b)
    if not (a > 0 and b > 0):
        raise ValueError("bounded oscillator law needs a > 0 and b > 0")

    def f(r):
        return 1.0 / (1.0 + r ** a)

    def df(r):
        ra = r ** a
        return -a * ra / (r * (1.0 + ra) ** 2)

    return AdaptationLaw(
        f=f,
        g=lambda mu: b * mu,
        df=df,
        dg=lambda mu: b + 0 * mu,
        f_inverse=lambda y: (1.0 / y - 1.0) ** (1.0 / a),
        variant="bounded_osc",
        params={"a": a, "b": b},
    )


def custom_law(f_source: str, g_source: str):
    """Law from expressions: ``f`` in ``x`` (or ``r``), ``g`` in ``mu``."""
    f_expr = Expr(f_source, allowed={"x", "r"})
    g_expr = Expr(g_source, allowed={"mu"})
    if len(f_expr.variables) > 1:
        raise ExpressionError("f must use a single amplitude variable, x or r")

    def f(x):
        return np.asarray(f_expr(x=x, r=x), dtype=float) + 0 * x

    def g(mu):
        return np.asarray(g_expr(mu=mu), dtype=float) + 0 * mu

    return AdaptationLaw(f=f, g=g, variant="custom", source=(f_source, g_source))


def make_law(kind: str, a=1.0, b=1.0, f=None, g=None):
    if kind == "log":
        return log_law(a, b)
    if kind == "sigmoid":
        return sigmoid_law()
    if kind == "bounded_osc":
        return bounded_osc_law(a, b)
    if kind == "custom":
        if f is None or g is None:
            raise ExpressionError("custom law needs both f and g expressions")
        return custom_law(f, g)
    raise ValueError(f"unknown law kind {kind!r}")


# -- equilibrium ---------------------------------------------------------------


def equilibrium_point(law: AdaptationLaw, mu0: float, x_hint: Optional[float] = None) -> float:
    """Positive ``x*`` with ``f(x*) = g(mu0)``.

    Built-in laws use their closed-form inverse (accepted when the residual is
    within the bisection tolerance); otherwise the root is bracketed by
    geometric expansion from ``x_hint`` (default 1) by factors of 10 inside
    ``[1e-12, 1e12]`` and refined by bisection in ``log x``.
    """
    target = float(law.g(mu0))
    if law.f_inverse is not None:
        with np.errstate(all="ignore"):
            x = float(law.f_inverse(target))
        if np.isfinite(x) and x > 0 and abs(float(law.f(x)) - target) <= BISECTION_TOL:
            return x

    def h(z):
        return float(law.f(z)) - target

    lo = hi = 1.0 if x_hint is None else float(x_hint)
    h_lo = h_hi = h(lo)
    if h_lo == 0:
        return lo
    while h_lo * h_hi > 0:
        if lo <= BRACKET[0] and hi >= BRACKET[1]:
            raise NotInImage(f"g(mu0)={target:.6g} is not bracketed by f on [1e-12, 1e12]")
        lo, hi = max(lo / EXPANSION, BRACKET[0]), min(hi * EXPANSION, BRACKET[1])
        h_lo, h_hi = h(lo), h(hi)
        if h_lo == 0:
            return lo
        if h_hi == 0:
            return hi
    u_lo, u_hi = np.log(lo), np.log(hi)
    for _ in range(400):
        u_mid = 0.5 * (u_lo + u_hi)
        x_mid = float(np.exp(u_mid))
        h_mid = h(x_mid)
        if abs(h_mid) <= BISECTION_TOL or u_hi - u_lo < 4e-16:
            return x_mid
        if h_mid * h_lo < 0:
            u_hi = u_mid
        else:
            u_lo, h_lo = u_mid, h_mid
    return float(np.exp(0.5 * (u_lo + u_hi)))


# -- hypothesis reports ----------------------------------------------------------


@dataclass
class Condition:
    passed: bool
    margin: float
    witness: Optional[float] = None


@dataclass
class HypothesisReport:
    """Per-condition outcome of a hypothesis check.

    A failed condition carries a ``witness`` (the sample point where it
    fails); ``values`` holds derived quantities such as ``a_eff``.
    """

    theorem: str
    conditions: dict
    values: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    @property
    def passed(self):
        return all(c.passed for c in self.conditions.values())

    def failed(self):
        return [name for name, c in self.conditions.items() if not c.passed]

    def to_dict(self):
        return {
            "theorem": self.theorem,
            "passed": self.passed,
            "conditions": {k: {"passed": c.passed, "margin": c.margin, "witness": c.witness}
                           for k, c in self.conditions.items()},
            "values": self.values,
            "metadata": self.metadata,
        }


def _strict_monotone(values, grid, sign):
    """Check ``sign * diff(values) > 0``; margin is the worst scaled step."""
    steps = sign * np.diff(values)
    i = int(np.argmin(steps))
    margin = float(steps[i])
    return Condition(margin > 0, margin, None if margin > 0 else float(grid[i]))


def _derivative_sign(deriv, grid, sign):
    vals = sign * deriv
    i = int(np.argmin(vals))
    margin = float(vals[i])
    return Condition(margin > 0, margin, None if margin > 0 else float(grid[i]))


def validate_theorem1(law: AdaptationLaw, mu0_values=MU0_GRID) -> HypothesisReport:
    """Check f strictly decreasing, g strictly increasing, g(mu0) in the image of f.

    Monotonicity is checked by sign of sampled differences, the exponential
    stability variant by sign of the sampled derivatives.  The image
    condition is checked for every ``mu0`` in ``mu0_values`` against the
    range of ``f`` sampled over ``[1e-12, 1e12]``, widened to cover the
    closed-form preimages ``f^-1(g(mu0))`` when the law has one.
    """
    with np.errstate(all="ignore"):
        fx = np.asarray(law.f(F_GRID), dtype=float)
        gm = np.asarray(law.g(G_GRID), dtype=float)
        dfx = np.asarray(law.f_prime(F_GRID), dtype=float)
        dgm = np.asarray(law.g_prime(G_GRID), dtype=float)
    mu0_values = np.atleast_1d(np.asarray(mu0_values, dtype=float))
    targets = np.asarray(law.g(mu0_values), dtype=float)
    lo, hi = BRACKET
    if law.f_inverse is not None:
        # closed-form preimages may lie outside the bisection bracket (log law)
        with np.errstate(all="ignore"):
            pre = np.asarray(law.f_inverse(targets), dtype=float)
        pre = pre[np.isfinite(pre) & (pre > 0)]
        if pre.size:
            lo, hi = min(lo, pre.min() / 10), max(hi, pre.max() * 10)
    with np.errstate(all="ignore"):
        wide = np.logspace(np.log10(lo), np.log10(hi), 961)
        f_wide = np.asarray(law.f(wide), dtype=float)
    f_lo, f_hi = np.nanmin(f_wide), np.nanmax(f_wide)

    conditions = {
        "f_strictly_decreasing": _strict_monotone(fx, F_GRID, -1),
        "g_strictly_increasing": _strict_monotone(gm, G_GRID, +1),
        "df_strictly_negative": _derivative_sign(dfx, F_GRID, -1),
        "dg_strictly_positive": _derivative_sign(dgm, G_GRID, +1),
    }
    room = np.minimum(targets - f_lo, f_hi - targets)
    j = int(np.argmin(room))
    conditions["g_mu0_in_image_of_f"] = Condition(
        bool(room[j] > 0), float(room[j]), None if room[j] > 0 else float(mu0_values[j]))
    return HypothesisReport(
        "T1", conditions,
        metadata={"f_grid": "logspace(1e-6, 1e6, 400)", "g_grid": "linspace(-20, 20, 401)",
                  "mu0_range": [float(mu0_values.min()), float(mu0_values.max())],
                  "n_mu0": int(mu0_values.size), "image_grid": [float(lo), float(hi)],
                  "derivatives": "analytic" if law.has_analytic_derivatives else "central differences"},
    )


def effective_gains(law: AdaptationLaw, mu0: float, r_star: Optional[float] = None):
    """``(a_eff, b_eff, r*)`` with ``a_eff = -f'(r*) r*`` and ``b_eff = g'(mu0)``."""
    if r_star is None:
        r_star = equilibrium_point(law, mu0)
    a_eff = float(-law.f_prime(r_star) * r_star)
    b_eff = float(law.g_prime(mu0))
    return a_eff, b_eff, float(r_star)


def validate_theorem3_4(law: AdaptationLaw, mu0: float, omega: float = 1.0,
                        r_star: Optional[float] = None, rtol: float = 1e-12) -> HypothesisReport:
    """Check ``0 < a_eff <= b_eff**2`` and ``b_eff > 0`` at the equilibrium amplitude.

    The comparison ``a_eff <= b_eff**2`` allows a relative slack of ``rtol`` so
    boundary cases are not decided by rounding.
    """
    if not omega > 0:
        raise ValueError("omega must be positive")
    a_eff, b_eff, r_star = effective_gains(law, mu0, r_star)
    slack = rtol * max(1.0, b_eff * b_eff)
    gap = b_eff * b_eff - a_eff
    conditions = {
        "a_eff_positive": Condition(a_eff > 0, a_eff, None if a_eff > 0 else mu0),
        "a_eff_at_most_b_eff_squared": Condition(gap >= -slack, gap, None if gap >= -slack else mu0),
        "b_eff_positive": Condition(b_eff > 0, b_eff, None if b_eff > 0 else mu0),
    }
    return HypothesisReport(
        "T3" if law.variant == "log" else "T4", conditions,
        values={"a_eff": a_eff, "b_eff": b_eff, "r_star": r_star, "mu0": float(mu0), "omega": float(omega)},
        metadata={"derivatives": "analytic" if law.has_analytic_derivatives else "central differences",
                  "rtol": rtol},
    )

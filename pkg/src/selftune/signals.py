"""A small closed-form expression grammar for forcings, perturbations and custom laws.

Expressions are ordinary Python arithmetic over a fixed set of variables and
functions, e.g. ``"0.1*cos(t)"``, ``"sin(t) / (1 + x**2)"`` or ``"-2*ln(x)"``.
The parse tree is whitelisted before compilation, so evaluation never touches
anything outside the grammar.  Evaluation is numpy-vectorised.

Forcing and perturbation expressions must additionally be *bounded by
construction*: time may only enter through ``sin``/``cos`` and every
denominator, logarithm or negative power must act on a structurally positive
quantity.  That makes them bounded in ``t`` uniformly on compact state sets.
"""

from __future__ import annotations

import ast
import math
from fractions import Fraction

import numpy as np

from .errors import ExpressionError

FUNCTIONS = {
    "sin": np.sin,
    "cos": np.cos,
    "exp": np.exp,
    "ln": np.log,
    "log": np.log,
    "sqrt": np.sqrt,
    "abs": np.abs,
    "tanh": np.tanh,
}
CONSTANTS = {"pi": math.pi, "e": math.e}
STATE_VARIABLES = frozenset({"t", "x", "xdot", "mu", "r"})

_BINOPS = (ast.Add, ast.Sub, ast.Mult, ast.Div, ast.Pow)
_UNARYOPS = (ast.UAdd, ast.USub)


def _names(node):
    """Variable names referenced below ``node`` (function names excluded)."""
    callees = {id(n.func) for n in ast.walk(node) if isinstance(n, ast.Call)}
    return {n.id for n in ast.walk(node)
            if isinstance(n, ast.Name) and id(n) not in callees} - set(CONSTANTS)


def _const_value(node):
    """Numeric value of a constant subtree, or None if it depends on a variable."""
    if _names(node):
        return None
    code = compile(ast.Expression(body=node), "<const>", "eval")
    try:
        return float(eval(code, {"__builtins__": {}}, {**FUNCTIONS, **CONSTANTS}))
    except (ArithmeticError, ValueError):
        return None


class Expr:
    """Compiled expression over the variables ``t, x, xdot, mu, r``.

    Parameters
    ----------
    source : str
        Expression text.
    allowed : iterable of str, optional
        Variables the expression may reference.  Defaults to all of them.
    """

    def __init__(self, source, allowed=STATE_VARIABLES):
        self.source = str(source).strip()
        try:
            tree = ast.parse(self.source, mode="eval")
        except SyntaxError as exc:
            raise ExpressionError(f"cannot parse expression {self.source!r}: {exc.msg}") from None
        self._tree = tree
        allowed = frozenset(allowed)
        callees = {id(n.func) for n in ast.walk(tree.body) if isinstance(n, ast.Call)}
        for node in ast.walk(tree.body):
            if id(node) not in callees:
                self._check_node(node, allowed)
        self.variables = frozenset(_names(tree.body))
        self._code = compile(tree, "<expr>", "eval")

    @staticmethod
    def _check_node(node, allowed):
        if isinstance(node, ast.Constant):
            if isinstance(node.value, bool) or not isinstance(node.value, (int, float)):
                raise ExpressionError(f"unsupported literal {node.value!r}")
        elif isinstance(node, ast.Name):
            if node.id not in allowed and node.id not in CONSTANTS:
                raise ExpressionError(f"unknown variable {node.id!r}")
        elif isinstance(node, ast.BinOp):
            if not isinstance(node.op, _BINOPS):
                raise ExpressionError(f"unsupported operator {type(node.op).__name__}")
        elif isinstance(node, ast.UnaryOp):
            if not isinstance(node.op, _UNARYOPS):
                raise ExpressionError(f"unsupported operator {type(node.op).__name__}")
        elif isinstance(node, ast.Call):
            if not isinstance(node.func, ast.Name) or node.func.id not in FUNCTIONS:
                raise ExpressionError("only sin, cos, exp, ln, log, sqrt, abs, tanh may be called")
            if len(node.args) != 1 or node.keywords:
                raise ExpressionError(f"{node.func.id} takes exactly one argument")
        elif not isinstance(node, (ast.Load, ast.operator, ast.unaryop, ast.Expression)):
            raise ExpressionError(f"unsupported syntax {type(node).__name__}")

    def __call__(self, **env):
        scope = {**FUNCTIONS, **CONSTANTS}
        for name in self.variables:
            if name not in env:
                raise ExpressionError(f"expression {self.source!r} needs variable {name!r}")
            scope[name] = env[name]
        return eval(self._code, {"__builtins__": {}}, scope)

    def __repr__(self):
        return f"Expr({self.source!r})"

    def __eq__(self, other):
        return isinstance(other, Expr) and other.source == self.source

    def __hash__(self):
        return hash(self.source)

    @property
    def depends_on_time(self):
        return "t" in self.variables

    # -- boundedness ---------------------------------------------------------

    def check_bounded(self, positive_vars=frozenset()):
        """Raise ExpressionError unless the expression is bounded by construction.

        ``positive_vars`` names state variables known to be strictly positive
        on the domain (``x`` for the first-order system, ``r`` for the
        oscillator amplitude).
        """
        positive_vars = frozenset(positive_vars)
        self._bounded(self._tree.body, positive_vars, inside_trig=False)
        return self

    def _bounded(self, node, pos, inside_trig):
        if isinstance(node, ast.Name):
            if node.id == "t" and not inside_trig:
                raise ExpressionError(
                    f"{self.source!r}: time may only appear inside sin or cos")
            return
        if isinstance(node, ast.Call):
            fn = node.func.id
            arg = node.args[0]
            if fn in ("sin", "cos", "tanh"):
                self._bounded(arg, pos, inside_trig=True)
                return
            if fn in ("ln", "log") and not _positive(arg, pos):
                raise ExpressionError(f"{self.source!r}: logarithm of a quantity not positive by construction")
            if fn == "sqrt" and not _nonnegative(arg, pos):
                raise ExpressionError(f"{self.source!r}: square root of a possibly negative quantity")
            self._bounded(arg, pos, inside_trig)
            return
        if isinstance(node, ast.BinOp):
            if isinstance(node.op, ast.Div) and not _positive(node.right, pos):
                raise ExpressionError(f"{self.source!r}: denominator is not positive by construction")
            if isinstance(node.op, ast.Pow):
                exponent = _const_value(node.right)
                if exponent is None:
                    raise ExpressionError(f"{self.source!r}: exponents must be constants")
                if exponent < 0 and not _positive(node.left, pos):
                    raise ExpressionError(f"{self.source!r}: negative power of a quantity not positive by construction")
            self._bounded(node.left, pos, inside_trig)
            self._bounded(node.right, pos, inside_trig)
            return
        if isinstance(node, ast.UnaryOp):
            self._bounded(node.operand, pos, inside_trig)

    # -- periodicity ---------------------------------------------------------

    def period(self):
        """Common period in ``t`` of the trigonometric terms, or None.

        Only affine arguments ``c*t + d`` free of state variables count as
        periodic.  Frequencies with ratios that are not simple fractions
        yield None.
        """
        if not self.depends_on_time:
            return None
        freqs = []
        for node in ast.walk(self._tree.body):
            if isinstance(node, ast.Call) and node.func.id in ("sin", "cos"):
                arg = node.args[0]
                names = _names(arg)
                if "t" not in names:
                    continue
                if names != {"t"}:
                    return None
                code = compile(ast.Expression(body=arg), "<arg>", "eval")
                vals = [float(eval(code, {"__builtins__": {}}, {**FUNCTIONS, **CONSTANTS, "t": s}))
                        for s in (0.0, 1.0, 2.0)]
                slope = vals[1] - vals[0]
                if abs(vals[2] - 2 * vals[1] + vals[0]) > 1e-12 * (1 + abs(slope)) or slope == 0:
                    return None
                freqs.append(abs(slope))
        if not freqs:
            return None
        base = freqs[0]
        denominators = []
        for w in freqs:
            ratio = Fraction(w / base).limit_denominator(12)
            if abs(float(ratio) - w / base) > 1e-12:
                return None
            denominators.append(ratio.denominator)
        # all frequencies are integer multiples of base / lcm(denominators)
        lcm = math.lcm(*denominators)
        return 2 * math.pi * lcm / base


def _abs_bound(node):
    """Upper bound on ``|node|`` valid for every variable value, or None."""
    value = _const_value(node)
    if value is not None:
        return abs(value)
    if isinstance(node, ast.Call) and node.func.id in ("sin", "cos", "tanh"):
        return 1.0
    if isinstance(node, ast.UnaryOp):
        return _abs_bound(node.operand)
    if isinstance(node, ast.BinOp) and isinstance(node.op, (ast.Add, ast.Sub, ast.Mult)):
        left, right = _abs_bound(node.left), _abs_bound(node.right)
        if left is None or right is None:
            return None
        return left * right if isinstance(node.op, ast.Mult) else left + right
    return None


def _dominated(const_node, other):
    """True when ``const_node`` is a positive constant exceeding ``sup |other|``."""
    value = _const_value(const_node)
    bound = _abs_bound(other)
    return value is not None and bound is not None and value > bound


def _positive(node, pos):
    value = _const_value(node)
    if value is not None:
        return value > 0
    if isinstance(node, ast.BinOp) and isinstance(node.op, ast.Add):
        if _dominated(node.left, node.right) or _dominated(node.right, node.left):
            return True
    if isinstance(node, ast.BinOp) and isinstance(node.op, ast.Sub):
        return _dominated(node.left, node.right)
    if isinstance(node, ast.Name):
        return node.id in pos
    if isinstance(node, ast.Call):
        return node.func.id == "exp"
    if isinstance(node, ast.BinOp):
        if isinstance(node.op, ast.Add):
            return (_positive(node.left, pos) and _nonnegative(node.right, pos)) or (
                _nonnegative(node.left, pos) and _positive(node.right, pos))
        if isinstance(node.op, (ast.Mult, ast.Div)):
            return _positive(node.left, pos) and _positive(node.right, pos)
        if isinstance(node.op, ast.Pow):
            return _positive(node.left, pos)
    return False


def _nonnegative(node, pos):
    if _positive(node, pos):
        return True
    value = _const_value(node)
    if value is not None:
        return value >= 0
    if isinstance(node, ast.Call):
        return node.func.id in ("abs", "sqrt")
    if isinstance(node, ast.BinOp):
        if isinstance(node.op, ast.Pow):
            exponent = _const_value(node.right)
            return exponent is not None and exponent > 0 and exponent % 2 == 0
        if isinstance(node.op, ast.Add):
            return _nonnegative(node.left, pos) and _nonnegative(node.right, pos)
        if isinstance(node.op, ast.Mult):
            return _nonnegative(node.left, pos) and _nonnegative(node.right, pos)
    return False


def constant(value):
    return Expr(repr(float(value)))


def sinusoid(amplitude=1.0, frequency=1.0, phase=0.0, kind="sin"):
    if kind not in ("sin", "cos"):
        raise ExpressionError("kind must be 'sin' or 'cos'")
    return Expr(f"{float(amplitude)!r}*{kind}({float(frequency)!r}*t + {float(phase)!r})")


def bounded_signal(source, positive_vars=frozenset(), allowed=STATE_VARIABLES):
    """Parse ``source`` and verify it is bounded by construction."""
    return Expr(source, allowed=allowed).check_bounded(positive_vars)

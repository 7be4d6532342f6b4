"""Driver abstraction f(t, path-info, y, z) with declared constants.

A driver is evaluated at grid times t_{i+1} using path information known
through t_i (predictability).  Each spec declares the constants it promises
to honor:

* ``growth`` K and ``growth_exponent`` q:      |f| <= K(1 + |y| + |z|^q)
* ``y_lipschitz`` L_y:                          |f(y1) - f(y2)| <= L_y |y1 - y2|
* ``z_modulus`` L_z:   |f(z1) - f(z2)| <= L_z (1 + (|z1| v |z2|)^{q/2}) |z1 - z2|
* ``path_lipschitz`` L_w (optional):            sup-norm Lipschitz in the path

q = 2 is allowed only with the explicit ``quadratic`` flag; that flag also
switches off the a-priori bound check and all comparison claims downstream.

Drivers come from a small builtin catalog (exact constants) or from a text
expression over {t, y, z1..zd, w1..wd} validated against its declared
constants by seeded sampling.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from .errors import (
    ContractError,
    DriverValidationError,
    EvaluationError,
    ExpressionError,
    SubgradientError,
)

FENCHEL_TOL = 1e-8

# ---------------------------------------------------------------------------
# expression grammar
# ---------------------------------------------------------------------------
#
#   expr    := term (('+'|'-') term)*
#   term    := unary (('*'|'/') unary)*
#   unary   := '-' unary | power
#   power   := atom ('^' ['-'] NUMBER)?    -- literal exponent only
#   atom    := NUMBER | IDENT | IDENT '(' expr (',' expr)* ')' | '(' expr ')'
#
# Functions: abs, sqrt, exp, sign, norm (1-arg), min, max (2-arg).
# norm takes the bare vector name z or w and is the Euclidean norm.

_FUNCTIONS = {"abs": 1, "sqrt": 1, "exp": 1, "sign": 1, "norm": 1, "min": 2, "max": 2}

_TOKEN = re.compile(
    r"\s*(?:(?P<num>\d+(?:\.\d+)?(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?)"
    r"|(?P<ident>[A-Za-z_][A-Za-z0-9_]*)"
    r"|(?P<op>[-+*/^(),]))"
)

_VAR_COORD = re.compile(r"^([zw])([1-9]\d*)$")
_VAR_TIMED = re.compile(r"^w([1-9]\d*)_([1-9]\d*)$")


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class VecVar:
    name: str  # "z" or "w", only as argument of norm()


@dataclass(frozen=True)
class Neg:
    arg: object


@dataclass(frozen=True)
class Bin:
    op: str
    left: object
    right: object


@dataclass(frozen=True)
class Pow:
    base: object
    exponent: float


@dataclass(frozen=True)
class Call:
    fn: str
    args: tuple


def _tokenize(text: str) -> list[tuple[str, object, int]]:
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m or m.end() == pos:
            if text[pos:].strip() == "":
                break
            raise ExpressionError(
                f"unexpected character {text[pos]!r} at position {pos}"
            )
        if m.group("num") is not None:
            tokens.append(("num", float(m.group("num")), m.start("num")))
        elif m.group("ident") is not None:
            tokens.append(("ident", m.group("ident"), m.start("ident")))
        else:
            tokens.append(("op", m.group("op"), m.start("op")))
        pos = m.end()
    tokens.append(("end", None, len(text)))
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def next(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect_op(self, op: str):
        kind, val, pos = self.next()
        if kind != "op" or val != op:
            raise ExpressionError(f"expected {op!r} at position {pos} in {self.text!r}")

    def parse(self):
        node = self.expr()
        kind, val, pos = self.peek()
        if kind != "end":
            raise ExpressionError(
                f"unexpected token {val!r} at position {pos} in {self.text!r}"
            )
        return node

    def expr(self):
        node = self.term()
        while True:
            kind, val, _ = self.peek()
            if kind == "op" and val in "+-":
                self.next()
                node = Bin(val, node, self.term())
            else:
                return node

    def term(self):
        node = self.unary()
        while True:
            kind, val, _ = self.peek()
            if kind == "op" and val in "*/":
                self.next()
                node = Bin(val, node, self.unary())
            else:
                return node

    def unary(self):
        kind, val, _ = self.peek()
        if kind == "op" and val == "-":
            self.next()
            return Neg(self.unary())
        return self.power()

    def power(self):
        node = self.atom()
        kind, val, _ = self.peek()
        if kind == "op" and val == "^":
            self.next()
            sign = 1.0
            kind, val, pos = self.next()
            if kind == "op" and val == "-":
                sign = -1.0
                kind, val, pos = self.next()
            if kind != "num":
                raise ExpressionError(
                    f"exponent must be a numeric literal at position {pos}"
                )
            node = Pow(node, sign * val)
        return node

    def atom(self):
        kind, val, pos = self.next()
        if kind == "num":
            return Num(val)
        if kind == "ident":
            k2, v2, _ = self.peek()
            if k2 == "op" and v2 == "(":
                return self.call(val, pos)
            return Var(val)
        if kind == "op" and val == "(":
            node = self.expr()
            self.expect_op(")")
            return node
        raise ExpressionError(f"unexpected token {val!r} at position {pos}")

    def call(self, fn: str, pos: int):
        if fn not in _FUNCTIONS:
            raise ExpressionError(f"unknown function {fn!r} at position {pos}")
        self.expect_op("(")
        args = [self.expr()]
        while True:
            kind, val, _ = self.peek()
            if kind == "op" and val == ",":
                self.next()
                args.append(self.expr())
            else:
                break
        self.expect_op(")")
        if len(args) != _FUNCTIONS[fn]:
            raise ExpressionError(
                f"{fn} takes {_FUNCTIONS[fn]} argument(s), got {len(args)}"
            )
        if fn == "norm":
            arg = args[0]
            if not (isinstance(arg, Var) and arg.name in ("z", "w")):
                raise ExpressionError("norm() takes the bare vector name z or w")
            args = [VecVar(arg.name)]
        return Call(fn, tuple(args))


def parse_expression(text: str):
    """Parse expression text into an AST; raises ExpressionError with position."""
    return _Parser(text).parse()


_PREC = {"+": 1, "-": 1, "*": 2, "/": 2, "neg": 3, "^": 4, "atom": 5}


def expression_text(node, parent_prec: int = 0) -> str:
    """Render an AST back to text; parse(expression_text(e)) == e."""
    if isinstance(node, Num):
        return repr(node.value)
    if isinstance(node, (Var, VecVar)):
        return node.name
    if isinstance(node, Neg):
        s = "-" + expression_text(node.arg, _PREC["neg"])
        return f"({s})" if parent_prec > _PREC["neg"] else s
    if isinstance(node, Bin):
        p = _PREC[node.op]
        left = expression_text(node.left, p)
        # parsing is left-associative, so right-nested operands need parens
        right = expression_text(node.right, p + 1)
        s = f"{left} {node.op} {right}"
        return f"({s})" if parent_prec > p else s
    if isinstance(node, Pow):
        base = expression_text(node.base, _PREC["^"] + 1)
        s = f"{base}^{repr(node.exponent)}"
        return f"({s})" if parent_prec > _PREC["^"] else s
    if isinstance(node, Call):
        return f"{node.fn}({', '.join(expression_text(a) for a in node.args)})"
    raise TypeError(f"not an expression node: {node!r}")


def _resolve_var(name: str, env: dict):
    if name in ("t", "y"):
        if name not in env:
            raise EvaluationError(f"variable {name!r} not available in this context")
        return env[name]
    m = _VAR_TIMED.match(name)
    if m:
        c, j = int(m.group(1)), int(m.group(2))
        wt = env.get("w_times")
        if wt is None:
            raise EvaluationError(
                f"variable {name!r} needs declared intermediate times"
            )
        if j > wt.shape[1] or c > wt.shape[2]:
            raise EvaluationError(f"variable {name!r} out of range")
        return wt[:, j - 1, c - 1]
    m = _VAR_COORD.match(name)
    if m:
        vec, c = m.group(1), int(m.group(2))
        arr = env.get(vec)
        if arr is None:
            raise EvaluationError(f"variable {name!r} not available in this context")
        if c > arr.shape[-1]:
            raise EvaluationError(
                f"variable {name!r} exceeds dimension {arr.shape[-1]}"
            )
        return arr[..., c - 1]
    if name in ("z", "w"):
        raise EvaluationError(f"vector variable {name!r} is only valid inside norm()")
    raise EvaluationError(f"unknown variable {name!r}")


def evaluate_expression(node, env: dict):
    """Evaluate an AST on numpy-broadcastable ``env`` entries.

    Total on finite inputs except division by zero and domain violations
    (sqrt of a negative, fractional power of a negative base), which raise
    EvaluationError.
    """
    if isinstance(node, Num):
        return node.value
    if isinstance(node, Var):
        return _resolve_var(node.name, env)
    if isinstance(node, VecVar):
        arr = env.get(node.name)
        if arr is None:
            raise EvaluationError(f"vector {node.name!r} not available in this context")
        return arr
    if isinstance(node, Neg):
        return -evaluate_expression(node.arg, env)
    if isinstance(node, Bin):
        left = evaluate_expression(node.left, env)
        right = evaluate_expression(node.right, env)
        if node.op == "+":
            return left + right
        if node.op == "-":
            return left - right
        if node.op == "*":
            return left * right
        if np.any(np.asarray(right) == 0.0):
            raise EvaluationError("division by zero")
        return left / right
    if isinstance(node, Pow):
        base = evaluate_expression(node.base, env)
        e = node.exponent
        if not float(e).is_integer() and np.any(np.asarray(base) < 0.0):
            raise EvaluationError(f"fractional power {e} of a negative base")
        if e < 0 and np.any(np.asarray(base) == 0.0):
            raise EvaluationError("zero raised to a negative power")
        return np.power(base, e)
    if isinstance(node, Call):
        args = [evaluate_expression(a, env) for a in node.args]
        if node.fn == "abs":
            return np.abs(args[0])
        if node.fn == "sqrt":
            if np.any(np.asarray(args[0]) < 0.0):
                raise EvaluationError("sqrt of a negative value")
            return np.sqrt(args[0])
        if node.fn == "exp":
            return np.exp(args[0])
        if node.fn == "sign":
            return np.sign(args[0])
        if node.fn == "norm":
            return np.sqrt((np.asarray(args[0]) ** 2).sum(axis=-1))
        if node.fn == "min":
            return np.minimum(args[0], args[1])
        if node.fn == "max":
            return np.maximum(args[0], args[1])
    raise TypeError(f"not an expression node: {node!r}")


def expression_variables(node) -> set[str]:
    if isinstance(node, Var):
        return {node.name}
    if isinstance(node, VecVar):
        return {node.name}
    if isinstance(node, Neg):
        return expression_variables(node.arg)
    if isinstance(node, Bin):
        return expression_variables(node.left) | expression_variables(node.right)
    if isinstance(node, Pow):
        return expression_variables(node.base)
    if isinstance(node, Call):
        out: set[str] = set()
        for a in node.args:
            out |= expression_variables(a)
        return out
    return set()


# ---------------------------------------------------------------------------
# path information handed to drivers
# ---------------------------------------------------------------------------


@dataclass
class PathInfo:
    """Walk information through level i, for n nodes evaluated together.

    ``walk`` holds the walk values at t_i; ``history`` (full-tree engines
    only) holds the values at t_0..t_i.  ``interpolation(t)`` is the lagged
    piecewise-linear path, defined for t <= t_{i+1} = (i+1)*lag, so a driver
    evaluated at t_{i+1} may query it at its own time argument.
    """

    level: int
    walk: np.ndarray  # (n, d)
    lag: float  # h = T/N
    history: Optional[np.ndarray] = None  # (n, level+1, d)

    @property
    def n(self) -> int:
        return self.walk.shape[0]

    @property
    def d(self) -> int:
        return self.walk.shape[1]

    def interpolation(self, t: float) -> np.ndarray:
        if self.history is None:
            raise ContractError(
                "continuous interpolation needs path histories "
                "(full-tree engine required for path-dependent drivers)"
            )
        h = self.lag
        m = self.level
        if t < -1e-12 or t > (m + 1) * h * (1 + 1e-12):
            raise ValueError(f"interpolation query t={t} outside [0, {(m + 1) * h}]")
        if t <= h:
            return np.zeros((self.n, self.d))
        seg = min(int(t / h), m)
        frac = (t - seg * h) / h
        return self.history[:, seg - 1] + frac * (
            self.history[:, seg] - self.history[:, seg - 1]
        )

    def take(self, idx) -> "PathInfo":
        """Restrict to a subset of nodes."""
        return PathInfo(
            level=self.level,
            walk=np.atleast_2d(self.walk[idx]),
            lag=self.lag,
            history=None if self.history is None else np.atleast_3d(self.history[idx]),
        )


# ---------------------------------------------------------------------------
# driver specs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DriverConstants:
    growth: float  # K
    growth_exponent: float  # q in [1, 2]
    y_lipschitz: float  # L_y
    z_modulus: float  # L_z
    path_lipschitz: Optional[float] = None  # L_w

    def __post_init__(self):
        if not (1.0 <= self.growth_exponent <= 2.0):
            raise ValueError("growth exponent q must lie in [1, 2]")
        for name in ("growth", "y_lipschitz", "z_modulus"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


@dataclass(frozen=True)
class DriverSpec:
    name: str
    constants: DriverConstants
    convex_in_z: bool
    quadratic: bool
    path_dependent: bool
    evaluator: Callable  # (t, info, y (n,), z (n, d)) -> (n,)
    expression: object = None
    gradient_fn: Optional[Callable] = None  # analytic d f / d z, (n, d)
    conjugate_fn: Optional[Callable] = None  # (t, info, y, mu) -> (value, zstar)

    def __post_init__(self):
        if self.constants.growth_exponent == 2.0 and not self.quadratic:
            raise ContractError(
                f"driver {self.name!r}: growth exponent q = 2 requires the "
                "explicit quadratic opt-in flag"
            )

    def __call__(self, t: float, info: PathInfo, y, z) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        z = np.asarray(z, dtype=float)
        out = np.asarray(self.evaluator(t, info, y, z), dtype=float)
        if out.shape != y.shape:
            out = np.broadcast_to(out, y.shape)
        return out

    def scalar(self, t: float, info: PathInfo, y: float, z) -> float:
        z = np.atleast_2d(np.asarray(z, dtype=float))
        return float(self(t, info, np.atleast_1d(float(y)), z)[0])


def _znorm(z: np.ndarray) -> np.ndarray:
    if z.shape[-1] == 1:  # avoids intermediate overflow of z*z for d = 1
        return np.abs(z[..., 0])
    return np.sqrt((z * z).sum(axis=-1))


def _power_gradient(kappa: float, p: float):
    def grad(t, info, y, z):
        zn = _znorm(z)
        out = np.zeros_like(z)
        if kappa == 0.0:
            return out
        nz = zn > 0.0
        if p == 1.0:
            out[nz] = kappa * z[nz] / zn[nz, None]
        else:
            out[nz] = kappa * p * (zn[nz, None] ** (p - 2.0)) * z[nz]
        return out

    return grad


def _power_conjugate_parts(kappa: float, p: float, mu: np.ndarray):
    """sup_z {mu.z - kappa |z|^p}: (value, maximizer) for kappa >= 0, p in [1, 2]."""
    mn = _znorm(mu)
    if kappa == 0.0:
        value = np.where(mn == 0.0, 0.0, np.inf)
        return value, np.zeros_like(mu)
    if p == 1.0:
        value = np.where(mn <= kappa * (1.0 + 1e-9), 0.0, np.inf)
        return value, np.zeros_like(mu)
    s = (mn / (p * kappa)) ** (1.0 / (p - 1.0))
    value = mn * s - kappa * s**p
    with np.errstate(invalid="ignore", divide="ignore"):
        direction = np.where(mn[..., None] > 0.0, mu / np.where(mn == 0, 1, mn)[..., None], 0.0)
    return value, s[..., None] * direction


def _linear_power_conjugate(y_coeff_fn, kappa: float, p: float):
    """Conjugate of f = <y-part> + kappa |z|^p, where the y-part is z-free."""

    def conj(t, info, y, mu):
        value, zstar = _power_conjugate_parts(kappa, p, mu)
        return value - y_coeff_fn(np.asarray(y, dtype=float)), zstar

    return conj


_BUILTIN_NAMES = (
    "zero",
    "constant",
    "power_z",
    "quadratic_z",
    "linear_y_power_z",
    "bound_driver",
)


def builtin(name: str, **params) -> DriverSpec:
    """Catalog of drivers with exact declared constants.

    zero                          f = 0
    constant(c)                   f = c
    power_z(q)                    f = |z|^q,             q in [1, 2)
    quadratic_z                   f = |z|^2              (quadratic opt-in)
    linear_y_power_z(K1, K2, p)   f = K1 y + K2 |z|^p,   p in [1, 2]
    bound_driver(K, q)            f = K (1 + |y| + |z|^q)

    All are convex in z.
    """
    if name == "zero":
        return DriverSpec(
            name="zero",
            constants=DriverConstants(0.0, 1.0, 0.0, 0.0),
            convex_in_z=True,
            quadratic=False,
            path_dependent=False,
            evaluator=lambda t, info, y, z: np.zeros_like(y),
            gradient_fn=_power_gradient(0.0, 1.0),
            conjugate_fn=_linear_power_conjugate(lambda y: 0.0 * y, 0.0, 1.0),
        )
    if name == "constant":
        c = float(params["c"])
        return DriverSpec(
            name=f"constant({c!r})",
            constants=DriverConstants(abs(c), 1.0, 0.0, 0.0),
            convex_in_z=True,
            quadratic=False,
            path_dependent=False,
            evaluator=lambda t, info, y, z: np.full_like(y, c),
            gradient_fn=_power_gradient(0.0, 1.0),
            conjugate_fn=_linear_power_conjugate(lambda y: 0.0 * y + c, 0.0, 1.0),
        )
    if name == "power_z":
        q = float(params["q"])
        if not (1.0 <= q < 2.0):
            raise ValueError("power_z needs q in [1, 2); use quadratic_z for q = 2")
        return DriverSpec(
            name=f"power_z({q!r})",
            constants=DriverConstants(1.0, q, 0.0, q),
            convex_in_z=True,
            quadratic=False,
            path_dependent=False,
            evaluator=lambda t, info, y, z: _znorm(z) ** q,
            gradient_fn=_power_gradient(1.0, q),
            conjugate_fn=_linear_power_conjugate(lambda y: 0.0 * y, 1.0, q),
        )
    if name == "quadratic_z":
        return DriverSpec(
            name="quadratic_z",
            constants=DriverConstants(1.0, 2.0, 0.0, 2.0),
            convex_in_z=True,
            quadratic=True,
            path_dependent=False,
            evaluator=lambda t, info, y, z: (z * z).sum(axis=-1),
            gradient_fn=_power_gradient(1.0, 2.0),
            conjugate_fn=_linear_power_conjugate(lambda y: 0.0 * y, 1.0, 2.0),
        )
    if name == "linear_y_power_z":
        k1 = float(params["K1"])
        k2 = float(params["K2"])
        p = float(params["p"])
        if not (1.0 <= p <= 2.0):
            raise ValueError("linear_y_power_z needs p in [1, 2]")
        if k1 < 0 or k2 < 0:
            raise ValueError("linear_y_power_z needs K1, K2 >= 0")
        return DriverSpec(
            name=f"linear_y_power_z({k1!r}, {k2!r}, {p!r})",
            constants=DriverConstants(max(k1, k2), p, k1, k2 * p),
            convex_in_z=True,
            quadratic=(p == 2.0),
            path_dependent=False,
            evaluator=lambda t, info, y, z: k1 * y + k2 * _znorm(z) ** p,
            gradient_fn=_power_gradient(k2, p),
            conjugate_fn=_linear_power_conjugate(lambda y: k1 * y, k2, p),
        )
    if name == "bound_driver":
        k = float(params["K"])
        q = float(params["q"])
        if k < 0:
            raise ValueError("bound_driver needs K >= 0")
        return DriverSpec(
            name=f"bound_driver({k!r}, {q!r})",
            constants=DriverConstants(k, q, k, k * q),
            convex_in_z=True,
            quadratic=(q == 2.0),
            path_dependent=False,
            evaluator=lambda t, info, y, z: k * (1.0 + np.abs(y) + _znorm(z) ** q),
            gradient_fn=_power_gradient(k, q),
            conjugate_fn=_linear_power_conjugate(lambda y: k * (1.0 + np.abs(y)), k, q),
        )
    raise ValueError(f"unknown builtin driver {name!r}; choose from {_BUILTIN_NAMES}")


# ---------------------------------------------------------------------------
# user drivers from expression text
# ---------------------------------------------------------------------------

VALIDATION_SEED = 0  # fixed, documented: validation sampling is reproducible
VALIDATION_SAMPLES = 10_000


def parse_driver(
    text: str,
    constants: DriverConstants | dict,
    *,
    convex_in_z: bool = False,
    quadratic: bool = False,
    path_dependent: bool = False,
    validate: bool = True,
    validation_box: tuple[float, float, float] = (1.0, 10.0, 10.0),  # (t, y, z/w)
    samples: int = VALIDATION_SAMPLES,
    seed: int = VALIDATION_SEED,
) -> DriverSpec:
    """Compile expression text into a DriverSpec and validate its declarations.

    Validation draws ``samples`` seeded points in the declared box and checks
    the growth bound, the y-Lipschitz bound and the z-modulus bound to within
    1e-9 relative tolerance; any violation raises DriverValidationError naming
    the failing inequality and a witness point.
    """
    if isinstance(constants, dict):
        constants = DriverConstants(
            growth=float(constants["K"]),
            growth_exponent=float(constants["q"]),
            y_lipschitz=float(constants["L_y"]),
            z_modulus=float(constants["L_z"]),
            path_lipschitz=(
                float(constants["L_w"]) if constants.get("L_w") is not None else None
            ),
        )
    ast = parse_expression(text)

    def evaluate(t, info, y, z):
        env = {"t": t, "y": y, "z": z, "w": info.walk}
        return evaluate_expression(ast, env)

    spec = DriverSpec(
        name=text,
        constants=constants,
        convex_in_z=convex_in_z,
        quadratic=quadratic,
        path_dependent=path_dependent,
        evaluator=evaluate,
        expression=ast,
    )
    if validate:
        _validate_declarations(spec, validation_box, samples, seed)
    return spec


def _max_coord(ast) -> int:
    d = 1
    for name in expression_variables(ast):
        m = _VAR_COORD.match(name)
        if m:
            d = max(d, int(m.group(2)))
        if name in ("z", "w"):
            d = max(d, 1)
    return d


def _validate_declarations(spec: DriverSpec, box, samples: int, seed: int):
    t_box, y_box, z_box = box
    d = _max_coord(spec.expression) if spec.expression is not None else 1
    c = spec.constants
    rng = np.random.default_rng(seed)
    t_points = np.linspace(t_box / 8.0, t_box, 8)
    n = max(1, samples // len(t_points))
    rel = 1e-9
    for t in t_points:
        y1 = rng.uniform(-y_box, y_box, size=n)
        y2 = rng.uniform(-y_box, y_box, size=n)
        z1 = rng.uniform(-z_box, z_box, size=(n, d))
        z2 = rng.uniform(-z_box, z_box, size=(n, d))
        w = rng.uniform(-z_box, z_box, size=(n, d))
        info = PathInfo(level=0, walk=w, lag=t_box)
        f11 = spec(t, info, y1, z1)
        f21 = spec(t, info, y2, z1)
        f12 = spec(t, info, y1, z2)
        zn1 = _znorm(z1)
        zn2 = _znorm(z2)

        bound = c.growth * (1.0 + np.abs(y1) + zn1**c.growth_exponent)
        bad = np.abs(f11) > bound * (1.0 + rel) + 1e-12
        if np.any(bad):
            i = int(np.argmax(bad))
            raise DriverValidationError(
                f"driver {spec.name!r} violates its growth bound "
                f"|f| <= K(1+|y|+|z|^q) at t={t}, y={y1[i]}, z={z1[i].tolist()}: "
                f"|f|={abs(f11[i])} > {bound[i]}"
            )
        lip = c.y_lipschitz * np.abs(y1 - y2)
        bad = np.abs(f11 - f21) > lip * (1.0 + rel) + 1e-12
        if np.any(bad):
            i = int(np.argmax(bad))
            raise DriverValidationError(
                f"driver {spec.name!r} violates its y-Lipschitz bound "
                f"|f(y1)-f(y2)| <= L_y|y1-y2| at t={t}, y1={y1[i]}, y2={y2[i]}, "
                f"z={z1[i].tolist()}: gap={abs(f11[i] - f21[i])} > {lip[i]}"
            )
        mod = (
            c.z_modulus
            * (1.0 + np.maximum(zn1, zn2) ** (c.growth_exponent / 2.0))
            * _znorm(z1 - z2)
        )
        bad = np.abs(f11 - f12) > mod * (1.0 + rel) + 1e-12
        if np.any(bad):
            i = int(np.argmax(bad))
            raise DriverValidationError(
                f"driver {spec.name!r} violates its z-modulus bound "
                f"|f(z1)-f(z2)| <= L_z(1+(|z1| v |z2|)^(q/2))|z1-z2| at t={t}, "
                f"y={y1[i]}, z1={z1[i].tolist()}, z2={z2[i].tolist()}: "
                f"gap={abs(f11[i] - f12[i])} > {mod[i]}"
            )


# ---------------------------------------------------------------------------
# truncation (radial freeze beyond |z| = R)
# ---------------------------------------------------------------------------


def truncate(spec: DriverSpec, radius: float) -> DriverSpec:
    """Freeze the driver radially beyond |z| = R.

    Equal to the original for |z| <= R and constant along rays beyond, which
    makes the result globally Lipschitz in z with constant L_z(1 + R^{q/2}).
    Truncation is idempotent.  Convexity in z is not preserved, so the
    truncated spec opts out of the conjugate machinery.
    """
    if not radius > 0:
        raise ValueError("truncation radius must be positive")
    base = spec.evaluator

    def evaluate(t, info, y, z):
        zn = _znorm(z)
        with np.errstate(invalid="ignore", divide="ignore"):
            scale = np.where(zn > radius, radius / np.where(zn == 0, 1.0, zn), 1.0)
        return base(t, info, y, z * scale[..., None])

    return replace(
        spec,
        name=f"truncate({radius!r})[{spec.name}]",
        convex_in_z=False,
        evaluator=evaluate,
        gradient_fn=None,
        conjugate_fn=None,
    )


# ---------------------------------------------------------------------------
# convex conjugate g(t, y, mu) = sup_z { mu.z - f(t, y, z) }
# ---------------------------------------------------------------------------


@dataclass
class ConjugateResult:
    value: object  # float or (n,) array; +inf sentinel when unbounded
    zstar: object  # maximizer, (d,) / (n, d), or None when unattained


def conjugate(spec: DriverSpec, t: float, info: PathInfo, y, mu) -> ConjugateResult:
    """Convex conjugate in z, with the attaining z* when finite.

    Builtins use closed forms (vectorized over nodes); other convex drivers
    are maximized numerically by coordinate-wise golden-section inside a
    bracket grown by doubling until the concave objective decreases on both
    flanks.  Unbounded objectives return the +inf sentinel rather than
    raising: admissibility filtering happens downstream.
    """
    if not spec.convex_in_z:
        raise ContractError(
            f"driver {spec.name!r} is not declared convex in z; no conjugate"
        )
    mu = np.asarray(mu, dtype=float)
    if spec.conjugate_fn is not None:
        value, zstar = spec.conjugate_fn(t, info, y, mu)
        if mu.ndim == 1:
            return ConjugateResult(float(np.asarray(value)), np.asarray(zstar))
        return ConjugateResult(np.asarray(value, dtype=float), zstar)
    if mu.ndim != 1:
        raise ContractError("numeric conjugate evaluates one node at a time")
    return _numeric_conjugate(spec, t, info, float(y), mu)


_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


def _golden_max(psi, lo: float, hi: float, iters: int = 90) -> tuple[float, float]:
    a, b = lo, hi
    x1 = b - _GOLDEN * (b - a)
    x2 = a + _GOLDEN * (b - a)
    f1, f2 = psi(x1), psi(x2)
    for _ in range(iters):
        if b - a <= 1e-13 * (1.0 + abs(a) + abs(b)):
            break
        if f1 < f2:
            a, x1, f1 = x1, x2, f2
            x2 = a + _GOLDEN * (b - a)
            f2 = psi(x2)
        else:
            b, x2, f2 = x2, x1, f1
            x1 = b - _GOLDEN * (b - a)
            f1 = psi(x1)
    s = 0.5 * (a + b)
    return s, psi(s)


def _line_max(psi, h0: float) -> tuple[float, float, bool]:
    """Maximize a concave 1-d function; (argmax, max, unbounded flag)."""
    lo, mid, hi = -h0, 0.0, h0
    flo, fmid, fhi = psi(lo), psi(mid), psi(hi)
    for _ in range(200):
        if fhi > fmid:
            lo, flo = mid, fmid
            mid, fmid = hi, fhi
            hi = mid + 2.0 * (mid - lo)
            fhi = psi(hi)
        elif flo > fmid:
            hi, fhi = mid, fmid
            mid, fmid = lo, flo
            lo = mid - 2.0 * (hi - mid)
            flo = psi(lo)
        else:
            s, val = _golden_max(psi, lo, hi)
            if val < fmid:
                return mid, fmid, False
            return s, val, False
        if abs(hi) > 1e30 or abs(lo) > 1e30:
            return 0.0, math.inf, True
    return 0.0, math.inf, True


def _numeric_conjugate(
    spec: DriverSpec, t: float, info: PathInfo, y: float, mu: np.ndarray
) -> ConjugateResult:
    d = mu.shape[0]
    q = spec.constants.growth_exponent
    mu_norm = float(np.linalg.norm(mu))

    def phi(z: np.ndarray) -> float:
        return float(mu @ z) - spec.scalar(t, info, y, z)

    if q > 1.0:
        h0 = min((1.0 + mu_norm) ** (2.0 / (q - 1.0) + 1.0), 1e8)
    else:
        h0 = 1.0 + mu_norm
    z = np.zeros(d)
    best = phi(z)
    for _ in range(60):
        improved = False
        for c in range(d):
            e = np.zeros(d)
            e[c] = 1.0
            s, val, unbounded = _line_max(lambda s: phi(z + s * e), h0)
            if unbounded:
                return ConjugateResult(math.inf, None)
            if val > best + 1e-14 * (1.0 + abs(best)):
                improved = True
            z = z + s * e
            best = max(best, val)
        if not improved or d == 1:
            break
    return ConjugateResult(best, z)


# ---------------------------------------------------------------------------
# subgradients in z
# ---------------------------------------------------------------------------


def subgradient_in_z(spec: DriverSpec, t: float, info: PathInfo, y: float, z) -> np.ndarray:
    """A vector mu with f(z + h) - f(z) >= mu.h for all h.

    Differentiable builtins return the gradient; otherwise central finite
    differences with step 1e-6 (1 + |z|) are used, with the zero vector as
    the fallback at kinks.  Every candidate is verified through the
    conjugacy identity f(z) + g(mu) = mu.z to tolerance 1e-8; failure raises
    SubgradientError carrying the residual.
    """
    if not spec.convex_in_z:
        raise ContractError(
            f"driver {spec.name!r} is not declared convex in z; no subgradient"
        )
    z = np.asarray(z, dtype=float)
    if spec.gradient_fn is not None:
        mu = np.asarray(spec.gradient_fn(t, info, np.atleast_1d(y), np.atleast_2d(z)))[0]
        res = fenchel_residual(spec, t, info, y, z, mu)
        if res is None or abs(res[0]) <= FENCHEL_TOL * res[1]:
            return mu
        raise SubgradientError(
            f"analytic gradient of {spec.name!r} failed the conjugacy check "
            f"at z={z.tolist()}: residual {res[0]}"
        )
    fz = spec.scalar(t, info, y, z)
    h = 1e-6 * (1.0 + float(np.linalg.norm(z)))
    mu = np.zeros_like(z)
    for c in range(z.shape[0]):
        e = np.zeros_like(z)
        e[c] = h
        mu[c] = (spec.scalar(t, info, y, z + e) - spec.scalar(t, info, y, z - e)) / (
            2.0 * h
        )
    for candidate in (mu, np.zeros_like(z)):
        res = fenchel_residual(spec, t, info, y, z, candidate, fz=fz)
        if res is not None and abs(res[0]) <= FENCHEL_TOL * res[1]:
            return candidate
    res = fenchel_residual(spec, t, info, y, z, mu, fz=fz)
    raise SubgradientError(
        f"numeric subgradient of {spec.name!r} failed the conjugacy check at "
        f"z={z.tolist()}: residual {res[0] if res else math.inf}"
    )


def fenchel_residual(
    spec: DriverSpec, t: float, info: PathInfo, y: float, z, mu, fz: float | None = None
):
    """(f(z) + g(mu) - mu.z, scale) or None when g(mu) is the +inf sentinel."""
    z = np.asarray(z, dtype=float)
    mu = np.asarray(mu, dtype=float)
    if fz is None:
        fz = spec.scalar(t, info, y, z)
    g = conjugate(spec, t, info, y, mu).value
    if math.isinf(g):
        return None
    cross = float(mu @ z)
    return fz + g - cross, 1.0 + abs(fz) + abs(g) + abs(cross)

"""Exact backward induction for BSDEs on Bernoulli lattices.

Backward from the terminal level: the z-component at each parent node is the
exact conditional covariation of the children values with the increment,

    Z^k = E[Y_next dW^k | node] / dqv,

the y-component solves the implicit one-step equation

    y - f(t_next, path-info, y, Z) * dqv = E[Y_next | node],

and the orthogonal-martingale increment per branch is the residual

    dM_b = Y_child_b - E[Y_next | node] - Z . dw_b.

The implicit map A(y) = y - f(.., y, ..) dqv has slope within
[1 - L_y dqv, 1 + L_y dqv], so for L_y dqv < 1 it is strictly increasing and
the root is unique; the solver refuses to run outside this regime.  Roots are
found per level with a vectorized bracketed secant (Illinois) iteration,
safeguarded by the monotonicity bracket |y - x| <= |A(x) - x| / (1 - L_y dqv).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .driver import DriverSpec, PathInfo, evaluate_expression, parse_expression
from .errors import (
    AprioriBoundError,
    ContractError,
    NonSolvableError,
    StepSizeError,
    StructuralError,
)
from .lattice import (
    FULL_TREE,
    LEFT_CONSTANT,
    RECOMBINING,
    RIGHT_CONSTANT,
    AdaptedField,
    Lattice,
)

_MACHINE_REL = 1e-15


@dataclass(frozen=True)
class SolveConfig:
    """Solver knobs.

    ``bound_check`` asserts |Y_t| <= (C+1) e^{K(T-t)} while solving.  The
    envelope is guaranteed only once the grid is fine enough for the
    comparison thresholds, so the assertion is opt-in; the margin is always
    reported in the diagnostics (except for quadratic opt-in drivers, where
    no envelope holds at all).
    """

    root_tol: float = 1e-12  # relative residual contract for implicit steps
    max_root_iters: int = 200
    bound_check: bool = False
    engine: str = "auto"  # "recombining" | "full-tree" | "auto"

    def __post_init__(self):
        if not self.root_tol > 0:
            raise ValueError("root_tol must be positive")
        if self.max_root_iters < 1:
            raise ValueError("max_root_iters must be >= 1")
        if self.engine not in ("auto", RECOMBINING, FULL_TREE):
            raise ValueError(f"unknown engine {self.engine!r}")


@dataclass
class TerminalSpec:
    """Terminal condition with a declared sup-norm bound C.

    One of three payloads: an expression over the terminal walk values
    (variables w1..wd, plus w<c>_<j> for declared intermediate grid times),
    an explicit per-leaf value table, or a plain function of the walk.
    Every evaluated leaf must satisfy |xi| <= C.
    """

    bound: float
    expression: Optional[str] = None
    times: Optional[tuple[float, ...]] = None
    leaf_values: Optional[np.ndarray] = None
    fn: Optional[Callable] = None
    fn_path_dependent: bool = False

    @classmethod
    def from_expression(cls, text: str, bound: float, times=None) -> "TerminalSpec":
        return cls(bound=bound, expression=text, times=tuple(times) if times else None)

    @classmethod
    def from_function(cls, fn: Callable, bound: float, path_dependent: bool = False):
        return cls(bound=bound, fn=fn, fn_path_dependent=path_dependent)

    @classmethod
    def from_leaf_values(cls, values, bound: float) -> "TerminalSpec":
        return cls(bound=bound, leaf_values=np.asarray(values, dtype=float))

    def __post_init__(self):
        payloads = sum(
            x is not None for x in (self.expression, self.leaf_values, self.fn)
        )
        if payloads != 1:
            raise ValueError(
                "terminal needs exactly one of expression, leaf_values, fn"
            )
        if self.bound < 0:
            raise ValueError("terminal bound must be nonnegative")

    def requires_full_tree(self) -> bool:
        return bool(self.times) or self.fn_path_dependent

    def evaluate(self, lattice: Lattice) -> np.ndarray:
        """Leaf values in the lattice's level-N layout, checked against C."""
        n_level = lattice.n_steps
        shape = lattice.level_shape(n_level)
        if self.leaf_values is not None:
            vals = np.asarray(self.leaf_values, dtype=float)
            if vals.size != int(np.prod(shape)):
                raise StructuralError(
                    f"leaf table has {vals.size} entries, lattice level {n_level} "
                    f"has {int(np.prod(shape))} nodes"
                )
            vals = vals.reshape(shape)
        elif self.fn is not None:
            if self.fn_path_dependent:
                arg = lattice.histories(n_level)
            else:
                arg = lattice.walk_values(n_level).reshape(-1, lattice.d)
            vals = np.asarray(self.fn(arg), dtype=float).reshape(shape)
        else:
            env = {"w": lattice.walk_values(n_level).reshape(-1, lattice.d)}
            if self.times:
                hist = lattice.histories(n_level)
                idx = [_grid_index(lattice, s) for s in self.times]
                env["w_times"] = hist[:, idx, :]
            vals = np.asarray(
                evaluate_expression(parse_expression(self.expression), env),
                dtype=float,
            )
            vals = np.broadcast_to(vals, (int(np.prod(shape)),)).reshape(shape)
        sup = float(np.max(np.abs(vals), initial=0.0))
        if sup > self.bound * (1.0 + 1e-12) + 1e-12:
            raise ContractError(
                f"terminal violates its declared sup-norm bound: "
                f"max |xi| = {sup} > C = {self.bound}"
            )
        return vals


def _grid_index(lattice: Lattice, s: float) -> int:
    h = lattice.horizon / lattice.n_steps
    idx = int(round(s / h))
    if not (0 <= idx <= lattice.n_steps) or abs(s - idx * h) > 1e-9 * max(
        1.0, lattice.horizon
    ):
        raise ValueError(f"time {s} is not a grid time (grid step {h})")
    return idx


@dataclass
class SolveDiagnostics:
    root_iterations: list[int] = field(default_factory=list)  # max per level
    max_abs_dm: float = 0.0
    solvability_margin: float = 0.0  # 1 - K * max dqv
    bound_margin: Optional[float] = None  # min over levels of envelope - max|Y|


@dataclass
class SolveResult:
    lattice: Lattice
    y: AdaptedField  # left-constant scalar
    z: AdaptedField  # right-constant d-vector
    dm: list[np.ndarray]  # per-branch increments, level_shape(i) + (2^d,)
    diagnostics: SolveDiagnostics

    @property
    def y0(self) -> float:
        return float(np.ravel(self.y.values[0])[0])


def apriori_bound(bound_c: float, growth_k: float, t: float, horizon: float) -> float:
    """Deterministic envelope (C+1) exp(K (T - t)) dominating |Y_t|."""
    return (bound_c + 1.0) * math.exp(growth_k * (horizon - t))


def solvabil_margin_value(growth_k: float, dqv: float) -> float:
    return 1.0 - growth_k * dqv


def solvability_margin(driver: DriverSpec, lattice: Lattice) -> float:
    """1 - K max_i dqv(i); positive means the growth-based sufficient
    condition for one-step solvability holds at this step size."""
    return solvabil_margin_value(driver.constants.growth, lattice.dqv)


def deterministic_solution(bound_c: float, growth_k: float, lattice: Lattice) -> np.ndarray:
    """Closed-form solution for driver K(1+|y|+g(z)), g(0)=0, terminal C >= 0.

    With a deterministic terminal the z and orthogonal parts vanish and the
    backward recursion collapses to

        Y_N = C,   Y_i = (Y_{i+1} + K dqv) / (1 - K dqv),

    which converges uniformly to (C+1) e^{K(T-t)} - 1 as the grid refines.
    """
    if bound_c < 0 or growth_k < 0:
        raise ValueError("needs C >= 0 and K >= 0")
    dqv = lattice.dqv
    if growth_k * dqv >= 1.0:
        raise StepSizeError(
            f"step-size bound violated: K * dqv = {growth_k * dqv} >= 1; "
            f"the one-step equation y = y_next + K(1+y) dqv has no solution"
        )
    n = lattice.n_steps
    out = np.empty(n + 1)
    out[n] = bound_c
    for i in range(n - 1, -1, -1):
        out[i] = (out[i + 1] + growth_k * dqv) / (1.0 - growth_k * dqv)
    return out


# ---------------------------------------------------------------------------
# implicit one-step solve
# ---------------------------------------------------------------------------


def _vector_implicit(
    x: np.ndarray,
    z: np.ndarray,
    driver: DriverSpec,
    t_next: float,
    info: PathInfo,
    dqv: float,
    config: SolveConfig,
) -> tuple[np.ndarray, int]:
    """Solve y - f(t_next, info, y, z) dqv = x for every node of a level."""
    ly = driver.constants.y_lipschitz
    m_lo = 1.0 - ly * dqv

    def residual(y):
        # explosive instances may saturate to inf; the bracket logic treats
        # that as an ordinary one-sided value
        with np.errstate(over="ignore", invalid="ignore"):
            fterm = dqv * driver(t_next, info, y, z)
            return y - fterm - x, np.abs(y) + np.abs(fterm) + np.abs(x)

    scale = 1.0 + np.abs(x)
    r0, mag = residual(x)
    delta = np.abs(r0) / m_lo * (1.0 + 1e-9) + 1e-15 * scale
    lo, hi = x - delta, x + delta
    rlo, rhi = residual(lo)[0], residual(hi)[0]
    for _ in range(100):
        bad_lo = rlo > 0.0
        bad_hi = rhi < 0.0
        if not (bad_lo.any() or bad_hi.any()):
            break
        delta = delta * 2.0
        lo = np.where(bad_lo, x - delta, lo)
        hi = np.where(bad_hi, x + delta, hi)
        rlo = np.where(bad_lo, residual(lo)[0], rlo)
        rhi = np.where(bad_hi, residual(hi)[0], rhi)
    else:
        j = int(np.argmax(np.where(rlo > 0, rlo, -rhi)))
        raise NonSolvableError(
            f"one-step implicit equation has no root: the map "
            f"y - f(t={t_next}, y, z) dqv never crosses x = {x.flat[j]} "
            f"(node {j} of level {info.level})"
        )

    y = _secant(lo, hi, rlo, rhi)
    iters = 0
    stall = 0
    prev_max = math.inf
    eps = np.finfo(float).eps
    side = np.zeros_like(x)  # +1: last replaced hi, -1: last replaced lo
    ry = r0
    while iters < config.max_root_iters:
        ry, mag = residual(y)
        iters += 1
        # aim for machine-tight roots; mag floors what is representable
        aim = np.maximum(_MACHINE_REL * scale, 4.0 * eps * mag)
        cur_max = float(np.max(np.abs(ry) / np.maximum(aim, 1e-300), initial=0.0))
        if cur_max <= 1.0:
            break
        if cur_max >= prev_max:
            stall += 1
            if stall >= 3:
                break
        else:
            stall = 0
        prev_max = cur_max
        pos = ry > 0.0
        # Illinois weighting: halve the retained residual on a repeated side
        rlo = np.where(pos & (side > 0), 0.5 * rlo, rlo)
        rhi = np.where(~pos & (side < 0), 0.5 * rhi, rhi)
        hi = np.where(pos, y, hi)
        rhi = np.where(pos, ry, rhi)
        lo = np.where(~pos, y, lo)
        rlo = np.where(~pos, ry, rlo)
        side = np.where(pos, 1.0, -1.0)
        y = _secant(lo, hi, rlo, rhi)
    final, mag = residual(y)
    final = np.abs(final)
    allowed = np.maximum(config.root_tol * scale, 16.0 * eps * mag)
    bad = ~(final <= allowed)  # catches NaN residuals too
    if np.any(bad):
        j = int(np.argmax(np.where(np.isfinite(final), final / allowed, np.inf)))
        if not np.isfinite(final[j]):
            raise NonSolvableError(
                f"solution magnitude exceeds double-precision range at level "
                f"{info.level}, node {j}; the instance explodes at this step size"
            )
        raise NonSolvableError(
            f"implicit step failed to reach relative residual {config.root_tol} "
            f"within {config.max_root_iters} iterations: residual "
            f"{final[j] / scale[j]} at node {j} of level {info.level}"
        )
    return y, iters


def _secant(lo, hi, rlo, rhi) -> np.ndarray:
    with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
        mid = 0.5 * (lo + hi)
        # update form hi - r (hi - lo) / dr is stable at large |y|
        cand = hi - rhi * (hi - lo) / (rhi - rlo)
        cand = np.where(np.isfinite(cand), cand, mid)
        return np.clip(cand, np.minimum(lo, hi), np.maximum(lo, hi))


def implicit_step(
    x: float,
    z,
    driver: DriverSpec,
    t_next: float,
    info: PathInfo,
    dqv: float,
    config: Optional[SolveConfig] = None,
) -> float:
    """The unique y with y - f(t_next, path-info, y, z) dqv = x.

    Requires L_y dqv < 1 (strictly): the implicit map is then strictly
    increasing, so the root exists and is unique.  Residual is at most
    root_tol * (1 + |x|).
    """
    config = config or SolveConfig()
    ly = driver.constants.y_lipschitz
    if ly * dqv >= 1.0:
        raise StepSizeError(
            f"step-size bound violated: L_y * dqv = {ly * dqv} >= 1, so the "
            f"implicit map y - f(.., y, ..) dqv need not be increasing and the "
            f"one-step equation may have no solution; refine the grid so that "
            f"max_i dqv(i) < 1/L_y"
        )
    if not math.isfinite(x):
        raise ValueError("x must be finite")
    z = np.atleast_2d(np.asarray(z, dtype=float))
    y, _ = _vector_implicit(
        np.atleast_1d(float(x)), z, driver, t_next, info, dqv, config
    )
    return float(y[0])


# ---------------------------------------------------------------------------
# full backward solve
# ---------------------------------------------------------------------------


def solve(
    lattice: Lattice,
    driver: DriverSpec,
    terminal: TerminalSpec,
    config: Optional[SolveConfig] = None,
) -> SolveResult:
    """Backward induction producing (Y, Z, dM) plus per-step diagnostics.

    Path-dependent drivers or terminals require a full-tree lattice.  When
    ``bound_check`` is on (and the driver is not a quadratic opt-in), every
    level is asserted against the envelope (C+1) e^{K(T-t)}.
    """
    config = config or SolveConfig()
    if config.engine != "auto" and config.engine != lattice.mode:
        raise ContractError(
            f"engine {config.engine!r} requested on a {lattice.mode!r} lattice; "
            f"build the lattice in the matching mode"
        )
    needs_paths = driver.path_dependent or terminal.requires_full_tree()
    if needs_paths and lattice.mode != FULL_TREE:
        raise ContractError(
            "path-dependent driver or terminal requires a full-tree lattice"
        )
    dqv = lattice.dqv
    ly = driver.constants.y_lipschitz
    if ly * dqv >= 1.0:
        raise StepSizeError(
            f"step-size bound violated: L_y * dqv = {ly * dqv} >= 1; the "
            f"backward step is not guaranteed solvable (needs max_i dqv < 1/L_y)"
        )

    n = lattice.n_steps
    d = lattice.d
    h = lattice.horizon / n
    inc = lattice.branch_increments()  # (2^d, d)
    n_br = lattice.n_branches
    track_bound = not driver.quadratic
    c_bound = terminal.bound
    k_growth = driver.constants.growth

    y_levels: list[np.ndarray] = [None] * (n + 1)
    z_levels: list[np.ndarray] = [None] * n
    dm_levels: list[np.ndarray] = [None] * n
    diag = SolveDiagnostics(
        solvability_margin=solvabil_margin_value(k_growth, dqv)
    )
    bound_margin = math.inf

    y_levels[n] = terminal.evaluate(lattice)
    for i in range(n - 1, -1, -1):
        shape = lattice.level_shape(i)
        kids = lattice.child_take(i, y_levels[i + 1]).reshape(n_br, -1)
        x = kids.mean(axis=0)
        z = np.tensordot(kids, inc, axes=(0, 0)) / (n_br * dqv)
        info = PathInfo(
            level=i,
            walk=lattice.walk_values(i).reshape(-1, d),
            lag=h,
            history=lattice.histories(i) if needs_paths else None,
        )
        t_next = lattice.grid.t(i + 1)
        if ly == 0.0:
            # f does not depend on y: the step is explicit
            y = x + dqv * driver(t_next, info, x, z)
            iters = 0
        else:
            y, iters = _vector_implicit(x, z, driver, t_next, info, dqv, config)
        if not np.all(np.isfinite(y)):
            j = int(np.argmax(~np.isfinite(y)))
            raise NonSolvableError(
                f"solution magnitude exceeds double-precision range at level {i}, "
                f"node {j}; the instance explodes at this step size"
            )
        dm = kids.T - x[:, None] - z @ inc.T
        diag.root_iterations.append(iters)
        diag.max_abs_dm = max(diag.max_abs_dm, float(np.max(np.abs(dm), initial=0.0)))
        if track_bound:
            env = apriori_bound(c_bound, k_growth, lattice.grid.t(i), lattice.horizon)
            worst = float(np.max(np.abs(y), initial=0.0))
            if config.bound_check and worst > env * (1.0 + 1e-9):
                j = int(np.argmax(np.abs(y)))
                raise AprioriBoundError(
                    f"|Y| = {worst} exceeds the envelope (C+1)e^(K(T-t)) = {env} "
                    f"at level {i}, node {j}"
                )
            bound_margin = min(bound_margin, env - worst)
        y_levels[i] = y.reshape(shape)
        z_levels[i] = z.reshape(shape + (d,))
        dm_levels[i] = dm.reshape(shape + (n_br,))
    diag.root_iterations.reverse()
    if track_bound:
        diag.bound_margin = bound_margin

    return SolveResult(
        lattice=lattice,
        y=AdaptedField(lattice, LEFT_CONSTANT, y_levels),
        z=AdaptedField(lattice, RIGHT_CONSTANT, z_levels),
        dm=dm_levels,
        diagnostics=diag,
    )


def reconstruction_residual(result: SolveResult, driver: DriverSpec) -> float:
    """max |Y_child - (Y_parent - f dqv + Z.dw + dM)| over all nodes/branches.

    The one-step equation should hold exactly up to accumulated root-finding
    tolerance at every node and branch.
    """
    lat = result.lattice
    dqv = lat.dqv
    inc = lat.branch_increments()
    h = lat.horizon / lat.n_steps
    worst = 0.0
    for i in range(lat.n_steps):
        kids = lat.child_take(i, result.y.values[i + 1]).reshape(lat.n_branches, -1)
        y = result.y.values[i].reshape(-1)
        z = result.z.values[i].reshape(-1, lat.d)
        dm = result.dm[i].reshape(-1, lat.n_branches)
        info = PathInfo(
            level=i,
            walk=lat.walk_values(i).reshape(-1, lat.d),
            lag=h,
            history=lat.histories(i) if lat.mode == FULL_TREE else None,
        )
        f = driver(lat.grid.t(i + 1), info, y, z)
        recon = y[:, None] - (f * dqv)[:, None] + z @ inc.T + dm
        worst = max(worst, float(np.max(np.abs(kids.T - recon), initial=0.0)))
    return worst

"""Comparison, stability, explosion oracles, blowup and convergence studies.

The comparison principle for subquadratic drivers comes with constructive
step-size thresholds; this module evaluates them, runs ordered solves, checks
the stability estimate

    sup_t |Y_1 - Y_2| <= (e^{KT} + 1)(T + 1) (||f_1 - f_2||_inf + ||xi_1 - xi_2||_inf),

iterates the closed-form explosion recursions for superlinear and quadratic
z-growth, demonstrates the N^{1/4} blowup of Z for the square-root terminal,
and provides the discrete Gronwall utility.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .driver import DriverSpec, PathInfo, builtin
from .errors import StepSizeError
from .lattice import Lattice, build_lattice, cond_covariation
from .solver import SolveConfig, TerminalSpec, apriori_bound, solve

ORDER_TOL = 1e-10


# ---------------------------------------------------------------------------
# constructive comparison thresholds
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ComparisonThresholds:
    """Left-hand sides of the two step-size conditions licensing comparison.

    With D = 2(C+1)e^{KT} and Kt = K v L:

        y_feedback_lhs  = Kt (1 + d^{q/2} D^q dqv^{-q/2}) dqv          (< 1)
        z_increment_lhs = d q Kt (1 + d^{q/4} D^{q/2} dqv^{-q/4}) step (<= 1)

    The first keeps the implicit y-feedback of the ordered recursion a
    contraction; the second controls the z-increment term.  Both decay in N
    for q < 2 and degenerate for q = 2.
    """

    y_feedback_lhs: float
    z_increment_lhs: float
    ok: bool


def comparison_thresholds(
    bound_c: float, growth_k: float, q: float, lipschitz_l: float, lattice: Lattice
) -> ComparisonThresholds:
    if not (1.0 <= q <= 2.0):
        raise ValueError(f"q must lie in [1, 2], got {q}")
    kt = max(growth_k, lipschitz_l)
    dd = 2.0 * (bound_c + 1.0) * math.exp(growth_k * lattice.horizon)
    dqv = lattice.dqv
    d = lattice.d
    lhs1 = kt * (1.0 + d ** (q / 2.0) * dd**q * dqv ** (-q / 2.0)) * dqv
    lhs2 = (
        d
        * q
        * kt
        * (1.0 + d ** (q / 4.0) * dd ** (q / 2.0) * dqv ** (-q / 4.0))
        * lattice.step
    )
    return ComparisonThresholds(lhs1, lhs2, ok=(lhs1 < 1.0 and lhs2 <= 1.0))


# ---------------------------------------------------------------------------
# comparison runs
# ---------------------------------------------------------------------------


@dataclass
class ComparisonReport:
    min_gap: float  # min over nodes of Y1 - Y2
    bound_margin: float  # min over nodes of envelope - |Y_m|
    thresholds: ComparisonThresholds
    verdict: str  # "ordered" | "violated" | "thresholds-not-met"
    witness: Optional[tuple[int, int]] = None  # (level, flat node) of min gap
    dominance_ok: bool = True
    dominance_witness: Optional[dict] = None
    terminal_ordered: bool = True
    y1_root: float = math.nan
    y2_root: float = math.nan


def _driver_pair_constants(d1: DriverSpec, d2: DriverSpec, t1: TerminalSpec, t2: TerminalSpec):
    c = max(t1.bound, t2.bound)
    k = max(d1.constants.growth, d2.constants.growth)
    q = max(d1.constants.growth_exponent, d2.constants.growth_exponent)
    lip = max(
        d1.constants.y_lipschitz,
        d2.constants.y_lipschitz,
        d1.constants.z_modulus,
        d2.constants.z_modulus,
    )
    return c, k, q, lip


def _sample_dominance(
    lattice: Lattice,
    driver1: DriverSpec,
    driver2: DriverSpec,
    y_box: float,
    z_box: float,
    samples: int,
    seed: int,
):
    """Spot-check f1 >= f2 on a seeded box; returns (ok, witness or None)."""
    rng = np.random.default_rng(seed)
    d = lattice.d
    times = lattice.grid.times()[1:]
    t_probe = times[np.linspace(0, len(times) - 1, min(8, len(times)), dtype=int)]
    n = max(1, samples // len(t_probe))
    for t in t_probe:
        y = rng.uniform(-y_box, y_box, size=n)
        z = rng.uniform(-z_box, z_box, size=(n, d))
        w = rng.uniform(-z_box, z_box, size=(n, d))
        info = PathInfo(level=0, walk=w, lag=lattice.horizon / lattice.n_steps)
        gap = driver1(t, info, y, z) - driver2(t, info, y, z)
        bad = gap < -1e-12
        if np.any(bad):
            i = int(np.argmax(bad))
            return False, {
                "t": float(t),
                "y": float(y[i]),
                "z": z[i].tolist(),
                "gap": float(gap[i]),
            }
    return True, None


def compare(
    lattice: Lattice,
    driver1: DriverSpec,
    terminal1: TerminalSpec,
    driver2: DriverSpec,
    terminal2: TerminalSpec,
    config: Optional[SolveConfig] = None,
    samples: int = 2000,
    seed: int = 0,
) -> ComparisonReport:
    """Solve both instances and report whether Y1 >= Y2 at every node.

    Preconditions (f1 >= f2 by seeded sampling, xi1 >= xi2 per leaf) are
    reported with witnesses rather than raised.  An observed ordering failure
    is reported as "violated" when the quadratic opt-in is involved or the
    constructive thresholds hold; when the (subquadratic) thresholds fail, the
    verdict is "thresholds-not-met" since no ordering claim is licensed.
    """
    config = config or SolveConfig()
    c, k, q, lip = _driver_pair_constants(driver1, driver2, terminal1, terminal2)
    thresholds = comparison_thresholds(c, k, q, lip, lattice)
    y_box = apriori_bound(c, k, 0.0, lattice.horizon)
    dominance_ok, dom_witness = _sample_dominance(
        lattice, driver1, driver2, y_box, 10.0 * (1.0 + math.sqrt(lattice.d)), samples, seed
    )
    xi1 = terminal1.evaluate(lattice)
    xi2 = terminal2.evaluate(lattice)
    terminal_ordered = bool(np.all(xi1 >= xi2 - 1e-12))

    r1 = solve(lattice, driver1, terminal1, config)
    r2 = solve(lattice, driver2, terminal2, config)

    min_gap = math.inf
    witness = None
    bound_margin = math.inf
    for i in range(lattice.n_steps + 1):
        gap = (r1.y.values[i] - r2.y.values[i]).reshape(-1)
        j = int(np.argmin(gap))
        if gap[j] < min_gap:
            min_gap = float(gap[j])
            witness = (i, j)
        env = apriori_bound(c, k, lattice.grid.t(i), lattice.horizon)
        worst = max(
            float(np.max(np.abs(r1.y.values[i]))), float(np.max(np.abs(r2.y.values[i])))
        )
        bound_margin = min(bound_margin, env - worst)

    if min_gap >= -ORDER_TOL:
        verdict = "ordered"
    elif driver1.quadratic or driver2.quadratic or thresholds.ok:
        verdict = "violated"
    else:
        verdict = "thresholds-not-met"
    return ComparisonReport(
        min_gap=min_gap,
        bound_margin=bound_margin,
        thresholds=thresholds,
        verdict=verdict,
        witness=None if verdict == "ordered" else witness,
        dominance_ok=dominance_ok,
        dominance_witness=dom_witness,
        terminal_ordered=terminal_ordered,
        y1_root=r1.y0,
        y2_root=r2.y0,
    )


# ---------------------------------------------------------------------------
# stability in the driver and terminal
# ---------------------------------------------------------------------------


@dataclass
class StabilityReport:
    observed: float  # max over nodes/levels of |Y1 - Y2|
    bound: float  # D (||f1 - f2||_inf + ||xi1 - xi2||_inf)
    driver_gap_sup: float
    terminal_gap_sup: float
    stability_constant: float  # D = (e^{KT} + 1)(T + 1)


def stability_gap(
    lattice: Lattice,
    driver1: DriverSpec,
    terminal1: TerminalSpec,
    driver2: DriverSpec,
    terminal2: TerminalSpec,
    config: Optional[SolveConfig] = None,
    samples: int = 4000,
    seed: int = 0,
) -> StabilityReport:
    """Observed sup-gap of two solves against the stability estimate.

    ||f1 - f2||_inf is estimated by seeded sampling over the compact box the
    solves actually visit: |y| up to the a-priori envelope and |z| up to the
    uniform z bound D(C+K)d for Lipschitz terminals; values outside never
    enter the backward recursion.
    """
    config = config or SolveConfig()
    c = max(terminal1.bound, terminal2.bound)
    k = max(driver1.constants.growth, driver2.constants.growth)
    t_hor = lattice.horizon
    big_d = (math.exp(k * t_hor) + 1.0) * (t_hor + 1.0)
    y_box = apriori_bound(c, k, 0.0, t_hor)
    z_box = big_d * (c + k) * lattice.d

    rng = np.random.default_rng(seed)
    times = lattice.grid.times()[1:]
    t_probe = times[np.linspace(0, len(times) - 1, min(8, len(times)), dtype=int)]
    n = max(1, samples // len(t_probe))
    df = 0.0
    for t in t_probe:
        y = rng.uniform(-y_box, y_box, size=n)
        z = rng.uniform(-max(z_box, 1.0), max(z_box, 1.0), size=(n, lattice.d))
        w = rng.uniform(-y_box, y_box, size=(n, lattice.d))
        info = PathInfo(level=0, walk=w, lag=t_hor / lattice.n_steps)
        gap = np.abs(driver1(t, info, y, z) - driver2(t, info, y, z))
        df = max(df, float(gap.max()))
    dxi = float(
        np.max(np.abs(terminal1.evaluate(lattice) - terminal2.evaluate(lattice)))
    )

    r1 = solve(lattice, driver1, terminal1, config)
    r2 = solve(lattice, driver2, terminal2, config)
    observed = max(
        float(np.max(np.abs(r1.y.values[i] - r2.y.values[i])))
        for i in range(lattice.n_steps + 1)
    )
    return StabilityReport(
        observed=observed,
        bound=big_d * (df + dxi),
        driver_gap_sup=df,
        terminal_gap_sup=dxi,
        stability_constant=big_d,
    )


# ---------------------------------------------------------------------------
# explosion oracles
# ---------------------------------------------------------------------------


@dataclass
class ExplosionReport:
    closed_form_y0: float
    solver_y0: float
    threshold: float


def _top_indicator_terminal(n_steps: int, step: float, a: float) -> TerminalSpec:
    cut = (n_steps - 1.0) * step

    def fn(w):
        return a * (w[:, 0] > cut)

    return TerminalSpec.from_function(fn, bound=a)


def subquadratic_explosion(n_steps: int, q: float, a: float) -> ExplosionReport:
    """Explosion of Y_0 for driver |z|^q, q in (1,2), on the top-path terminal.

    Terminal a 1{walk at T = sqrt(N)} (d = 1, T = 1).  Backward from the top
    node the solution stays supported on the top path and its value iterates

        b <- b/2 + 2^{-q} N^{q/2 - 1} b^q,

    which is nondecreasing from the threshold a* = 2 N^{(1 - q/2)/(q - 1)}
    onward (a* is the recursion's fixed point), so Y_0 >= a.  The terminals
    vanish in every L^p, p < infinity, while Y_0 ~ 2 sqrt(N) diverges.
    """
    if not (1.0 < q < 2.0):
        raise ValueError(f"needs q in (1, 2), got {q}")
    threshold = 2.0 * n_steps ** ((1.0 - q / 2.0) / (q - 1.0))
    if a < threshold * (1.0 - 1e-12):
        raise ValueError(
            f"needs a >= 2 N^((1-q/2)/(q-1)) = {threshold} for monotone growth, "
            f"got a = {a}"
        )
    b = a
    coeff = 2.0 ** (-q) * n_steps ** (q / 2.0 - 1.0)
    for _ in range(n_steps):
        b = b / 2.0 + coeff * b**q
    lattice = build_lattice(n_steps, 1.0, 1)
    result = solve(
        lattice,
        builtin("power_z", q=q),
        _top_indicator_terminal(n_steps, lattice.step, a),
    )
    return ExplosionReport(closed_form_y0=b, solver_y0=result.y0, threshold=threshold)


@dataclass
class QuadraticExplosionReport:
    closed_form_y0: float
    solver_y0: float
    lower_bound: float  # a (1 + eps)^N with eps = (a - 2)/4
    comparison_violation: bool  # the constant solution a is below Y_0


def quadratic_explosion(n_steps: int, a: float) -> QuadraticExplosionReport:
    """Quadratic z-growth: explosion and ordering failure on the top terminal.

    Driver |z|^2, terminal a 1{top path} (d = 1, T = 1, a > 2).  The top-path
    value iterates b <- b/2 + (b/2)^2 >= b (1 + eps) with eps = (a - 2)/4, so
    Y_0 >= a (1 + eps)^N.  The pair (a, 0) solves the same equation with the
    larger terminal xi = a, yet its value a stays below Y_0: ordering fails.
    """
    if not a > 2.0:
        raise ValueError(f"needs a > 2, got {a}")
    eps = (a - 2.0) / 4.0
    b = a
    for _ in range(n_steps):
        b = b / 2.0 + (b / 2.0) ** 2
    lattice = build_lattice(n_steps, 1.0, 1)
    result = solve(
        lattice,
        builtin("quadratic_z"),
        _top_indicator_terminal(n_steps, lattice.step, a),
    )
    return QuadraticExplosionReport(
        closed_form_y0=b,
        solver_y0=result.y0,
        lower_bound=a * (1.0 + eps) ** n_steps,
        comparison_violation=bool(a < b),
    )


# ---------------------------------------------------------------------------
# z blowup for the square-root terminal
# ---------------------------------------------------------------------------

SQRT_CLIP = "sign(w1) * min(sqrt(abs(w1)), 1.0)"


def z_blowup(n_steps: int) -> float:
    """Z of the final step at the central node for the square-root terminal.

    phi(x) = sign(x)(sqrt|x| ^ 1) is bounded and continuous but not
    Lipschitz; the covariation quotient at the central level-(N-1) node
    (reachable only for odd N) evaluates to N^{1/4} exactly, so no uniform
    z bound can hold.  Computed through the conditional-covariation quotient
    on the lattice, not the closed formula.
    """
    if n_steps % 2 != 1:
        raise ValueError(f"needs odd N (central node at level N-1), got {n_steps}")
    lattice = build_lattice(n_steps, 1.0, 1)
    xi = TerminalSpec.from_expression(SQRT_CLIP, bound=1.0).evaluate(lattice)
    central = ((n_steps - 1) // 2,)
    return cond_covariation(lattice, n_steps - 1, xi, central, 0)


# ---------------------------------------------------------------------------
# convergence studies
# ---------------------------------------------------------------------------


@dataclass
class ConvergenceRow:
    n_steps: int
    y0: Optional[float]
    diff: Optional[float]  # |Y_0^N - Y_0^{previous N}|
    seconds: float
    error: Optional[str] = None


@dataclass
class ConvergenceTable:
    rows: list[ConvergenceRow]


def convergence_study(
    driver: DriverSpec,
    terminal: TerminalSpec,
    n_list: list[int],
    horizon: float = 1.0,
    d: int = 1,
    mode: str = "recombining",
    config: Optional[SolveConfig] = None,
) -> ConvergenceTable:
    """Solve the same instance over an increasing list of N.

    The terminal is re-evaluated on each lattice.  Successive differences of
    Y_0 give the Cauchy-style convergence diagnostic; per-N solver errors are
    recorded in their row and the study continues.
    """
    if any(b <= a for a, b in zip(n_list, n_list[1:])):
        raise ValueError("n_list must be strictly increasing")
    rows: list[ConvergenceRow] = []
    prev = None
    for n in n_list:
        t0 = time.perf_counter()
        try:
            lattice = build_lattice(n, horizon, d, mode)
            result = solve(lattice, driver, terminal, config)
            y0 = result.y0
            err = None
        except Exception as exc:  # per-row error, study continues
            y0 = None
            err = f"{type(exc).__name__}: {exc}"
        seconds = time.perf_counter() - t0
        diff = abs(y0 - prev) if (y0 is not None and prev is not None) else None
        rows.append(ConvergenceRow(n, y0, diff, seconds, err))
        if y0 is not None:
            prev = y0
    return ConvergenceTable(rows)


# ---------------------------------------------------------------------------
# discrete Gronwall bound
# ---------------------------------------------------------------------------


@dataclass
class GronwallReport:
    kind: str  # "pass" | "premise-fail" | "conclusion-fail"
    witness: Optional[int] = None  # first failing grid index

    @property
    def ok(self) -> bool:
        return self.kind == "pass"


def gronwall_extremal(a: float, b: float, lattice: Lattice) -> np.ndarray:
    """The extremal sequence H(t_i) = a (1 - b dqv)^{-(N - i)}.

    Satisfies the summation premise with equality and converges uniformly to
    a e^{b (T - t)}; it is the tight test case for the bound below.
    """
    dqv = lattice.dqv
    if b * dqv >= 1.0:
        raise StepSizeError(f"needs dqv < 1/b, got b * dqv = {b * dqv}")
    n = lattice.n_steps
    i = np.arange(n + 1)
    return a * (1.0 - b * dqv) ** (-(n - i).astype(float))


def gronwall_bound(h, a: float, b: float, lattice: Lattice) -> GronwallReport:
    """Check the discrete Gronwall implication on a grid sequence.

    Premise (verified first): |h(T)| <= a and, for every i,
    |h(t_i)| <= a + b sum_{j>i} |h(t_{j-1})| dqv.  Conclusion, valid once
    dqv < 1/b: |h(t_i)| <= 2a e^{b (T - t_i)}.  Premise violations are
    classified separately from conclusion violations, with the first witness
    index.
    """
    h = np.asarray(h, dtype=float)
    n = lattice.n_steps
    if h.shape != (n + 1,):
        raise ValueError(f"h must have one value per grid time ({n + 1}), got {h.shape}")
    dqv = lattice.dqv
    if b * dqv >= 1.0:
        raise StepSizeError(f"needs dqv < 1/b, got b * dqv = {b * dqv}")
    tol = 1e-12
    ah = np.abs(h)
    if ah[n] > a * (1.0 + tol) + tol:
        return GronwallReport("premise-fail", witness=n)
    # suffix[i] = sum_{j > i} |h(t_{j-1})| dqv = dqv * sum_{m=i}^{N-1} |h(t_m)|
    suffix = np.concatenate([np.cumsum(ah[:n][::-1])[::-1] * dqv, [0.0]])
    rhs = a + b * suffix
    bad = ah > rhs * (1.0 + tol) + tol
    if np.any(bad):
        return GronwallReport("premise-fail", witness=int(np.argmax(bad)))
    envelope = 2.0 * a * np.exp(b * (lattice.horizon - lattice.grid.times()))
    bad = ah > envelope * (1.0 + tol) + tol
    if np.any(bad):
        return GronwallReport("conclusion-fail", witness=int(np.argmax(bad)))
    return GronwallReport("pass")

"""Convex-dual certificates for solved equations.

For drivers convex in z, the solution admits the tilted-measure
representation: for every admissible control mu (a predictable d-vector
process with mu . dW > -1 at every branch), reweighting each branch by
2^{-d}(1 + mu . dw) defines an equivalent probability under which

    V_i(mu) = E^mu[ xi - sum_{j>i} g(t_j, Y_{t_{j-1}}, mu_{t_j}) dqv | node ]

never exceeds Y_i, with equality for the control built from subgradients of
the driver at (Y_parent, Z_node), where the conjugacy identity
f(Y, Z) + g(Y, mu) = mu . Z holds node by node.  This module certifies both
directions: weak duality on random admissible controls and strong duality on
the constructed maximizer, plus the relative-entropy estimate

    E[Lambda log Lambda] <= E^mu[ sum_j |mu_j|^2 dqv ]

and the uniform second-moment report for the maximizer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .driver import (
    DriverSpec,
    PathInfo,
    conjugate,
    fenchel_residual,
    subgradient_in_z,
    FENCHEL_TOL,
)
from .errors import AdmissibilityError, CertificateError, ContractError
from .lattice import FULL_TREE, RIGHT_CONSTANT, AdaptedField, Lattice
from .solver import SolveConfig, SolveResult, TerminalSpec, solve


# ---------------------------------------------------------------------------
# controls and tilted weights
# ---------------------------------------------------------------------------


def constant_control(lattice: Lattice, vec) -> AdaptedField:
    """The control identically equal to ``vec`` (stored predictably)."""
    vec = np.asarray(vec, dtype=float).reshape(lattice.d)
    values = [
        np.broadcast_to(vec, lattice.level_shape(i) + (lattice.d,)).copy()
        for i in range(lattice.n_steps)
    ]
    return AdaptedField(lattice, RIGHT_CONSTANT, values)


def random_admissible_control(
    lattice: Lattice, rng: np.random.Generator, scale: float = 0.9
) -> AdaptedField:
    """Per-node uniform control with sum_k |mu_k| step <= scale < 1.

    The l1 bound makes mu . dw > -scale > -1 on every branch, so the control
    is admissible with margin regardless of the drawn signs.
    """
    if not (0.0 < scale < 1.0):
        raise ValueError("scale must lie in (0, 1)")
    m = scale / (lattice.d * lattice.step)
    values = [
        rng.uniform(-m, m, size=lattice.level_shape(i) + (lattice.d,))
        for i in range(lattice.n_steps)
    ]
    return AdaptedField(lattice, RIGHT_CONSTANT, values)


def tilt_probabilities(lattice: Lattice, mu_vec) -> np.ndarray:
    """Branch weights 2^{-d}(1 + mu . dw_b) for one node's control value.

    Weights sum to 1 (the branch mean of dw is 0) and must all be strictly
    positive; mu . dw <= -1 on some branch is inadmissible.
    """
    mu_vec = np.asarray(mu_vec, dtype=float).reshape(lattice.d)
    w = (1.0 + lattice.branch_increments() @ mu_vec) / lattice.n_branches
    if np.any(w <= 0.0):
        b = int(np.argmin(w))
        raise AdmissibilityError(
            f"control {mu_vec.tolist()} gives mu . dw = "
            f"{float(lattice.branch_increments()[b] @ mu_vec)} <= -1 on branch {b}"
        )
    return w


def _level_weights(lattice: Lattice, mu_level: np.ndarray, level: int) -> np.ndarray:
    """(n, 2^d) tilted weights for every node of a level; checks admissibility."""
    mu = mu_level.reshape(-1, lattice.d)
    w = (1.0 + mu @ lattice.branch_increments().T) / lattice.n_branches
    if np.any(w <= 0.0):
        j, b = np.unravel_index(int(np.argmin(w)), w.shape)
        raise AdmissibilityError(
            f"control at level {level}, node {j} gives a nonpositive tilted "
            f"weight on branch {b} (mu . dw <= -1)"
        )
    return w


# ---------------------------------------------------------------------------
# dual value recursion
# ---------------------------------------------------------------------------


def dual_value(
    lattice: Lattice,
    driver: DriverSpec,
    terminal: TerminalSpec,
    y_field: AdaptedField,
    mu: AdaptedField,
) -> AdaptedField:
    """Tilted-measure value field V for an admissible control.

    V_N = xi and backward V_i = E^mu[V_{i+1} | node] - g(t_{i+1}, Y_i, mu) dqv,
    with g the driver's conjugate evaluated at the primal solution's Y at the
    same node (the representation is implicit in Y).  Where g is the +inf
    sentinel (the control charges a slope outside the driver's reach), the
    value is the -inf sentinel, which still certifies V <= Y.
    """
    if not driver.convex_in_z:
        raise ContractError(f"driver {driver.name!r} is not declared convex in z")
    n = lattice.n_steps
    dqv = lattice.dqv
    h = lattice.horizon / n
    values: list[np.ndarray] = [None] * (n + 1)
    values[n] = terminal.evaluate(lattice)
    for i in range(n - 1, -1, -1):
        shape = lattice.level_shape(i)
        mu_level = mu.values[i].reshape(-1, lattice.d)
        weights = _level_weights(lattice, mu_level, i)
        kids = lattice.child_take(i, values[i + 1]).reshape(lattice.n_branches, -1)
        tilted = np.einsum("nb,bn->n", weights, kids)
        info = PathInfo(
            level=i,
            walk=lattice.walk_values(i).reshape(-1, lattice.d),
            lag=h,
            history=lattice.histories(i) if lattice.mode == FULL_TREE else None,
        )
        y_here = y_field.values[i].reshape(-1)
        g = _conjugate_level(driver, lattice.grid.t(i + 1), info, y_here, mu_level)
        v = tilted - g * dqv
        v = np.where(np.isinf(g) | np.isneginf(tilted), -np.inf, v)
        values[i] = v.reshape(shape)
    return AdaptedField(lattice, y_field.timing, values)


def _conjugate_level(
    driver: DriverSpec, t: float, info: PathInfo, y: np.ndarray, mu: np.ndarray
) -> np.ndarray:
    if driver.conjugate_fn is not None:
        return np.asarray(conjugate(driver, t, info, y, mu).value, dtype=float)
    out = np.empty(mu.shape[0])
    for j in range(mu.shape[0]):
        out[j] = conjugate(driver, t, info.take(j), float(y[j]), mu[j]).value
    return out


# ---------------------------------------------------------------------------
# maximizer from subgradients
# ---------------------------------------------------------------------------


def maximizer(
    lattice: Lattice, driver: DriverSpec, result: SolveResult
) -> tuple[AdaptedField, float]:
    """Control from z-subgradients of the driver at (Y_parent, Z_node).

    Verifies the conjugacy identity f + g = mu . Z at every node (residual at
    most 1e-8 of scale) and strict admissibility at every branch; returns the
    control and the worst Fenchel residual seen.
    """
    if not driver.convex_in_z:
        raise ContractError(f"driver {driver.name!r} is not declared convex in z")
    n = lattice.n_steps
    h = lattice.horizon / n
    values: list[np.ndarray] = []
    worst = 0.0
    for i in range(n):
        shape = lattice.level_shape(i)
        y = result.y.values[i].reshape(-1)
        z = result.z.values[i].reshape(-1, lattice.d)
        info = PathInfo(
            level=i,
            walk=lattice.walk_values(i).reshape(-1, lattice.d),
            lag=h,
            history=lattice.histories(i) if lattice.mode == FULL_TREE else None,
        )
        t_next = lattice.grid.t(i + 1)
        if driver.gradient_fn is not None and driver.conjugate_fn is not None:
            mu = np.asarray(driver.gradient_fn(t_next, info, y, z), dtype=float)
            fv = driver(t_next, info, y, z)
            g = np.asarray(conjugate(driver, t_next, info, y, mu).value, dtype=float)
            cross = np.einsum("nd,nd->n", mu, z)
            res = np.abs(fv + g - cross)
            scale = 1.0 + np.abs(fv) + np.abs(g) + np.abs(cross)
            bad = ~(res <= FENCHEL_TOL * scale)
            if np.any(bad):
                j = int(np.argmax(bad))
                raise CertificateError(
                    f"conjugacy identity failed at level {i}, node {j}: "
                    f"residual {res[j]}"
                )
            worst = max(worst, float(np.max(res, initial=0.0)))
        else:
            mu = np.empty_like(z)
            for j in range(z.shape[0]):
                nodeinfo = info.take(j)
                mu[j] = subgradient_in_z(driver, t_next, nodeinfo, float(y[j]), z[j])
                res = fenchel_residual(driver, t_next, nodeinfo, float(y[j]), z[j], mu[j])
                if res is None:
                    raise CertificateError(
                        f"conjugate is unbounded at the subgradient (level {i}, "
                        f"node {j})"
                    )
                worst = max(worst, abs(res[0]))
        _level_weights(lattice, mu, i)  # admissibility with witness
        values.append(mu.reshape(shape + (lattice.d,)))
    return AdaptedField(lattice, RIGHT_CONSTANT, values), worst


# ---------------------------------------------------------------------------
# entropy inequality
# ---------------------------------------------------------------------------


def entropy_fields(
    lattice: Lattice, mu: AdaptedField
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Per-node sides of the entropy estimate, by backward recursion.

    lhs_i(node) = E[Lambda_i log Lambda_i | node] for the density
    Lambda_i = prod_{j>i}(1 + mu_j dW_j), and
    rhs_i(node) = E^mu[ sum_{j>i} |mu_j|^2 dqv | node ].  Both satisfy exact
    one-step recursions over the tilted weights, so every interior node is
    checkable at O(nodes * 2^d) total cost.
    """
    n = lattice.n_steps
    dqv = lattice.dqv
    lhs: list[np.ndarray] = [None] * (n + 1)
    rhs: list[np.ndarray] = [None] * (n + 1)
    lhs[n] = np.zeros(lattice.level_shape(n))
    rhs[n] = np.zeros(lattice.level_shape(n))
    for i in range(n - 1, -1, -1):
        shape = lattice.level_shape(i)
        mu_level = mu.values[i].reshape(-1, lattice.d)
        weights = _level_weights(lattice, mu_level, i)
        log_factor = np.log(lattice.n_branches * weights)
        kids_lhs = lattice.child_take(i, lhs[i + 1]).reshape(lattice.n_branches, -1)
        kids_rhs = lattice.child_take(i, rhs[i + 1]).reshape(lattice.n_branches, -1)
        lhs[i] = np.einsum("nb,bn->n", weights, kids_lhs + log_factor.T).reshape(shape)
        rhs[i] = (
            (mu_level**2).sum(axis=1) * dqv
            + np.einsum("nb,bn->n", weights, kids_rhs)
        ).reshape(shape)
    return lhs, rhs


def entropy_check(lattice: Lattice, mu: AdaptedField) -> tuple[float, float]:
    """(E[Lambda log Lambda], E^mu[sum |mu|^2 dqv]) at the root; lhs <= rhs."""
    lhs, rhs = entropy_fields(lattice, mu)
    return float(np.ravel(lhs[0])[0]), float(np.ravel(rhs[0])[0])


# ---------------------------------------------------------------------------
# step-size threshold and moment report
# ---------------------------------------------------------------------------


def duality_threshold(
    bound_c: float, growth_k: float, lipschitz_l: float, q: float, lattice: Lattice
) -> tuple[float, bool]:
    """Step-size condition guaranteeing admissibility of the maximizer.

    With Cb = (C+1)e^{KT} and a = sup ||dW||_inf / sqrt(dqv) (= 1 here):

        sqrt(d) L a dqv^{1/2} + d^{(2+q)/4} L Cb^{q/2} a dqv^{(2-q)/4} < 1.

    This combines the worst-case z bound Cb / sqrt(dqv) with the driver's
    z-modulus; it is conservative, so the maximizer itself verifies
    admissibility directly rather than requiring this flag.
    """
    if not (1.0 <= q < 2.0):
        raise ValueError(f"q must lie in [1, 2), got {q}")
    cb = (bound_c + 1.0) * math.exp(growth_k * lattice.horizon)
    dqv = lattice.dqv
    d = lattice.d
    a = 1.0
    lhs = math.sqrt(d) * lipschitz_l * a * dqv**0.5 + d ** (
        (2.0 + q) / 4.0
    ) * lipschitz_l * cb ** (q / 2.0) * a * dqv ** ((2.0 - q) / 4.0)
    return lhs, lhs < 1.0


@dataclass
class MomentReport:
    observed: float  # max over nodes of E^mu[sum_{j>i} |mu_j|^2 dqv | node]
    reported_bound: float  # (C + Cb + K(1+Cb) T) / C3, report-only
    coercivity: float  # numeric C3 = inf_{|mu|>=1} (g(t,0,mu) + K) / (1 + |mu|^2)


def moment_bound(
    lattice: Lattice, driver: DriverSpec, mu: AdaptedField, bound_c: float
) -> MomentReport:
    """Max conditional second moment of a control under its own tilt.

    The observed value reuses the entropy recursion's right side.  The
    reported bound divides the value budget C + Cb + K(1+Cb) T by a numeric
    coercivity constant of the conjugate; it is informational, not asserted.
    """
    _, rhs = entropy_fields(lattice, mu)
    observed = max(float(np.max(level, initial=0.0)) for level in rhs)
    k = driver.constants.growth
    cb = (bound_c + 1.0) * math.exp(k * lattice.horizon)
    c3 = _coercivity(driver, lattice)
    if c3 > 0.0 and math.isfinite(c3):
        reported = (bound_c + cb + k * (1.0 + cb) * lattice.horizon) / c3
    else:
        reported = math.inf
    return MomentReport(observed=observed, reported_bound=reported, coercivity=c3)


def _coercivity(driver: DriverSpec, lattice: Lattice) -> float:
    """inf over |mu| >= 1 of (g(t, 0, mu) + K) / (1 + |mu|^2), on a log grid."""
    info = PathInfo(
        level=0,
        walk=np.zeros((1, lattice.d)),
        lag=lattice.horizon / lattice.n_steps,
    )
    t = lattice.grid.t(1)
    k = driver.constants.growth
    best = math.inf
    directions = [np.eye(lattice.d)[c] for c in range(lattice.d)]
    directions += [-u for u in directions]
    directions.append(np.ones(lattice.d) / math.sqrt(lattice.d))
    for u in directions:
        for m in np.logspace(0.0, 6.0, 120):
            g = conjugate(driver, t, info, 0.0, m * u).value
            if math.isinf(g):
                continue
            best = min(best, (g + k) / (1.0 + m * m))
    return best


# ---------------------------------------------------------------------------
# end-to-end certificate
# ---------------------------------------------------------------------------


@dataclass
class DualCertificate:
    mu_hat: AdaptedField
    primal_root: float
    dual_root: float
    gap: float  # Y_0 - V_0(mu_hat), >= -1e-8 and ~0 at the maximizer
    max_node_gap: float  # max over nodes of |V(mu_hat) - Y|
    max_fenchel_residual: float
    entropy_lhs: float
    entropy_rhs: float
    moment: MomentReport
    threshold_lhs: float
    threshold_ok: bool
    weak_duality_max_excess: Optional[float] = None  # max over random controls


def certify(
    lattice: Lattice,
    driver: DriverSpec,
    terminal: TerminalSpec,
    config: Optional[SolveConfig] = None,
    n_random_controls: int = 0,
    seed: int = 0,
) -> DualCertificate:
    """Solve, build the maximizer, and certify the dual representation."""
    result = solve(lattice, driver, terminal, config)
    mu_hat, fenchel_worst = maximizer(lattice, driver, result)
    v = dual_value(lattice, driver, terminal, result.y, mu_hat)
    max_node_gap = max(
        float(np.max(np.abs(v.values[i] - result.y.values[i]), initial=0.0))
        for i in range(lattice.n_steps + 1)
    )
    lhs, rhs = entropy_check(lattice, mu_hat)
    lip = max(driver.constants.y_lipschitz, driver.constants.z_modulus)
    q = driver.constants.growth_exponent
    if q < 2.0:
        threshold_lhs, threshold_ok = duality_threshold(
            terminal.bound, driver.constants.growth, lip, q, lattice
        )
    else:
        threshold_lhs, threshold_ok = math.inf, False
    moment = moment_bound(lattice, driver, mu_hat, terminal.bound)

    weak_excess = None
    if n_random_controls > 0:
        rng = np.random.default_rng(seed)
        weak_excess = -math.inf
        for _ in range(n_random_controls):
            ctrl = random_admissible_control(lattice, rng)
            vr = dual_value(lattice, driver, terminal, result.y, ctrl)
            for i in range(lattice.n_steps + 1):
                excess = vr.values[i] - result.y.values[i]
                excess = excess[np.isfinite(excess)]
                if excess.size:
                    weak_excess = max(weak_excess, float(excess.max()))

    return DualCertificate(
        mu_hat=mu_hat,
        primal_root=result.y0,
        dual_root=float(np.ravel(v.values[0])[0]),
        gap=result.y0 - float(np.ravel(v.values[0])[0]),
        max_node_gap=max_node_gap,
        max_fenchel_residual=fenchel_worst,
        entropy_lhs=lhs,
        entropy_rhs=rhs,
        moment=moment,
        threshold_lhs=threshold_lhs,
        threshold_ok=threshold_ok,
        weak_duality_max_excess=weak_excess,
    )

"""d-dimensional Bernoulli random-walk lattices.

Time grid: t_i = i*T/N for i = 0..N with quadratic-variation step
dqv = T/N at every node, identical across coordinates.  Each coordinate of
the walk moves by +-step with step = sqrt(T/N), all 2^d sign combinations
being equally likely (probability 2^-d), so every increment coordinate has
conditional mean 0 and conditional second moment dqv.

Two node addressings are supported:

* ``recombining`` -- a node at level i is a d-vector k of up-move counts,
  0 <= k_j <= i, with walk value W_j = (2*k_j - i)*step.  Level i holds
  (i+1)^d nodes.  Only valid for Markovian use.
* ``full-tree`` -- a node is the full sign path, encoded as an integer with
  d*i bits (bit s*d + c is the sign of coordinate c at step s+1).  Level i
  holds 2^(d*i) nodes.  Required for path-dependent drivers or terminals.

All probabilities are exact dyadic rationals held in floating point, and all
expectations are exact sums over branches; nothing is sampled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import SizeError, StructuralError

RECOMBINING = "recombining"
FULL_TREE = "full-tree"

#: Cap on d*N for full-tree mode: keeps exhaustive enumeration under ~17M paths.
FULL_TREE_BIT_CAP = 24

LEFT_CONSTANT = "left-constant"
RIGHT_CONSTANT = "right-constant"


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid 0 = t_0 < ... < t_N = T with dqv(i) = T/N."""

    n_steps: int
    horizon: float

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")

    @property
    def dqv(self) -> float:
        """Quadratic-variation step, constant across levels and coordinates."""
        return self.horizon / self.n_steps

    def t(self, i: int) -> float:
        return i * self.horizon / self.n_steps

    def times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * (self.horizon / self.n_steps)


@dataclass(frozen=True)
class Lattice:
    grid: TimeGrid
    d: int
    mode: str
    _walk_cache: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def n_steps(self) -> int:
        return self.grid.n_steps

    @property
    def horizon(self) -> float:
        return self.grid.horizon

    @property
    def dqv(self) -> float:
        return self.grid.dqv

    @property
    def step(self) -> float:
        """Increment magnitude per coordinate, sqrt(T/N)."""
        return math.sqrt(self.grid.dqv)

    @property
    def n_branches(self) -> int:
        return 1 << self.d

    # -- node layout ---------------------------------------------------

    def level_shape(self, level: int) -> tuple[int, ...]:
        if self.mode == RECOMBINING:
            return (level + 1,) * self.d
        return (1 << (self.d * level),)

    def n_nodes(self, level: int) -> int:
        return int(np.prod(self.level_shape(level)))

    def nodes(self, level: int) -> Iterable:
        """Iterate node addresses: index tuples (recombining) or ints (full-tree)."""
        if self.mode == RECOMBINING:
            return np.ndindex(self.level_shape(level))
        return range(self.n_nodes(level))

    def branch_increments(self) -> np.ndarray:
        """(2^d, d) array of increments; bit c of branch b set means +step."""
        b = np.arange(self.n_branches)[:, None]
        bits = (b >> np.arange(self.d)[None, :]) & 1
        return (2.0 * bits - 1.0) * self.step

    def children(self, level: int, node) -> list:
        """Addresses of the 2^d children of ``node`` at ``level``."""
        if self.mode == RECOMBINING:
            k = np.asarray(node)
            bits = (np.arange(self.n_branches)[:, None] >> np.arange(self.d)[None, :]) & 1
            return [tuple(k + e) for e in bits]
        return [node | (b << (self.d * level)) for b in range(self.n_branches)]

    def walk_values(self, level: int) -> np.ndarray:
        """Walk values at every node of ``level``; shape level_shape + (d,)."""
        key = level
        if key in self._walk_cache:
            return self._walk_cache[key]
        if self.mode == RECOMBINING:
            axes = [
                (2 * np.arange(level + 1) - level).reshape(
                    (1,) * c + (level + 1,) + (1,) * (self.d - 1 - c)
                )
                for c in range(self.d)
            ]
            w = np.stack(np.broadcast_arrays(*axes), axis=-1) * self.step
        else:
            # from per-coordinate up-move counts, so the values agree bit for
            # bit with the recombining formula (2k - i) * step
            ids = np.arange(1 << (self.d * level), dtype=np.int64)
            counts = np.zeros((ids.shape[0], self.d), dtype=np.int64)
            for s in range(level):
                for c in range(self.d):
                    counts[:, c] += (ids >> (s * self.d + c)) & 1
            w = (2 * counts - level) * self.step
        w.setflags(write=False)
        self._walk_cache[key] = w
        return w

    def node_walk(self, level: int, node) -> np.ndarray:
        """Walk value (d,) at a single node."""
        return np.asarray(self.walk_values(level)[node], dtype=float)

    def node_path(self, level: int, node: int) -> np.ndarray:
        """Full-tree only: walk values (level+1, d) along the node's path."""
        if self.mode != FULL_TREE:
            raise StructuralError("node paths are only defined in full-tree mode")
        path = np.zeros((level + 1, self.d))
        for s in range(level):
            for c in range(self.d):
                bit = (node >> (s * self.d + c)) & 1
                path[s + 1 :, c] += (2 * bit - 1) * self.step
        return path

    def histories(self, level: int) -> np.ndarray:
        """Full-tree only: (n_nodes, level+1, d) walk values along every path."""
        if self.mode != FULL_TREE:
            raise StructuralError("path histories are only defined in full-tree mode")
        h = np.zeros((self.n_nodes(level), level + 1, self.d))
        for j in range(1, level + 1):
            # the level-j ancestor of node id is id mod 2^(d*j) (low sign bits)
            h[:, j] = np.tile(
                self.walk_values(j), (1 << (self.d * (level - j)), 1)
            )
        return h

    # -- level-vectorized branch access ---------------------------------

    def child_take(self, level: int, values: np.ndarray) -> np.ndarray:
        """Per-branch child values, shape (2^d,) + level_shape(level) + trailing.

        ``values`` must be laid out over level ``level + 1``; entry ``[b]`` of
        the result holds, for every parent node, the value at the child reached
        through branch ``b``.
        """
        values = np.asarray(values)
        child_shape = self.level_shape(level + 1)
        if values.shape[: len(child_shape)] != child_shape:
            raise StructuralError(
                f"field shape {values.shape} does not cover level {level + 1} "
                f"(expected leading {child_shape}): child values missing"
            )
        if self.mode == RECOMBINING:
            out = []
            for b in range(self.n_branches):
                ix = tuple(
                    slice((b >> c) & 1, ((b >> c) & 1) + level + 1)
                    for c in range(self.d)
                )
                out.append(values[ix])
            return np.stack(out)
        return values.reshape((self.n_branches, -1) + values.shape[1:])

    def level_expectation(self, level: int, values: np.ndarray) -> np.ndarray:
        """E[field at level+1 | node] for all nodes of ``level`` (weights 2^-d)."""
        return self.child_take(level, values).mean(axis=0)

    def level_covariation(self, level: int, values: np.ndarray) -> np.ndarray:
        """E[field * dW^k | node] / dqv for all nodes; appends a d-axis."""
        kids = self.child_take(level, values)
        inc = self.branch_increments()
        return np.tensordot(inc, kids, axes=(0, 0)).transpose(
            tuple(range(1, kids.ndim)) + (0,)
        ) / (self.n_branches * self.dqv)


def build_lattice(n_steps: int, horizon: float, d: int, mode: str = RECOMBINING) -> Lattice:
    """Build a d-dimensional Bernoulli walk lattice with N steps over [0, T].

    Full-tree mode enumerates all sign paths and is capped at
    d*N <= FULL_TREE_BIT_CAP sign bits.
    """
    if d < 1:
        raise ValueError("d must be >= 1")
    if mode not in (RECOMBINING, FULL_TREE):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == FULL_TREE and d * n_steps > FULL_TREE_BIT_CAP:
        raise SizeError(
            f"full-tree mode needs d*N <= {FULL_TREE_BIT_CAP} sign bits, "
            f"got d*N = {d * n_steps}"
        )
    return Lattice(grid=TimeGrid(n_steps, horizon), d=d, mode=mode)


# -- per-node conditional moments ---------------------------------------


def cond_expectation(lattice: Lattice, level: int, values: np.ndarray, node):
    """Exact conditional expectation of a level-(level+1) field at ``node``.

    Equal-weight (2^-d) average over the node's children; no sampling.
    """
    kids = lattice.child_take(level, values)
    if lattice.mode == RECOMBINING:
        return kids[(slice(None),) + tuple(np.atleast_1d(node))].mean(axis=0)
    return kids[:, node].mean(axis=0)


def cond_covariation(lattice: Lattice, level: int, values: np.ndarray, node, k: int):
    """E[field * dW^k | node] / dqv for coordinate k (0-based)."""
    kids = lattice.child_take(level, values)
    if lattice.mode == RECOMBINING:
        kidvals = kids[(slice(None),) + tuple(np.atleast_1d(node))]
    else:
        kidvals = kids[:, node]
    inc = lattice.branch_increments()[:, k]
    return float(np.dot(inc, kidvals)) / (lattice.n_branches * lattice.dqv)


# -- structural condition checks -----------------------------------------


def increment_ratio(lattice: Lattice, q: float) -> float:
    """max_{i,k} ||dW^k||_inf / dqv^{q/4} = (T/N)^{1/2 - q/4}.

    The comparison machinery for drivers of z-growth |z|^q needs this ratio
    to decay as N grows, which holds for every q in [1, 2) on these walks;
    the exponent degenerates to 0 as q -> 2.
    """
    if not (1.0 <= q < 2.0):
        raise ValueError(f"q must lie in [1, 2), got {q}")
    return lattice.dqv ** (0.5 - q / 4.0)


def cross_orthogonality(lattice: Lattice) -> tuple[bool, float]:
    """(cross-moment orthogonality flag, sup ||dW^k||_inf / sqrt(dqv)).

    Enumerates the 2^d equal-weight branches: E[dW^k dW^l] must vanish for
    k != l, and the sup ratio equals 1 exactly for Bernoulli walks.
    """
    inc = lattice.branch_increments()
    cross = inc.T @ inc / lattice.n_branches
    off = cross - np.diag(np.diag(cross))
    flag = bool(np.max(np.abs(off), initial=0.0) <= 1e-15 * lattice.dqv)
    return flag, lattice.step / math.sqrt(lattice.dqv)


# -- lagged continuous interpolation --------------------------------------


def continuous_interpolation(
    lattice: Lattice, path_values: Sequence
) -> Callable[[float], np.ndarray]:
    """Adapted piecewise-linear interpolation of a walk path.

    ``path_values`` holds the walk values at grid times t_0..t_m (shape
    (m+1, d); scalars are accepted for d = 1).  The interpolation is 0 on
    [0, h] with h = T/N, then linear from W_{t_{i-1}} to W_{t_i} over
    [t_{i-1}+h, t_i+h].  Its value at time t therefore depends only on walk
    values strictly before t, so drivers evaluated at t_{i+1} may query it
    at t_{i+1} using the path known through t_i.
    """
    pv = np.atleast_1d(np.asarray(path_values, dtype=float))
    if pv.ndim == 1:
        pv = pv[:, None]
    if pv.shape[1] != lattice.d:
        raise StructuralError(
            f"path has {pv.shape[1]} coordinates, lattice has {lattice.d}"
        )
    m = pv.shape[0] - 1
    h = lattice.horizon / lattice.n_steps

    def w_c(t: float) -> np.ndarray:
        if t < -1e-12 or t > (m + 1) * h * (1 + 1e-12):
            raise ValueError(
                f"interpolation query t={t} outside [0, {(m + 1) * h}] "
                f"(path known through t_{m})"
            )
        if t <= h:
            return np.zeros(lattice.d)
        seg = min(int(t / h), m)
        frac = (t - seg * h) / h
        return pv[seg - 1] + frac * (pv[seg] - pv[seg - 1])

    return w_c


# -- adapted fields --------------------------------------------------------


@dataclass
class AdaptedField:
    """Values attached to every lattice node at every time level.

    ``timing`` distinguishes processes constant on [t_i, t_{i+1}) (Y, M;
    ``left-constant``, one array per level 0..N) from processes constant on
    (t_i, t_{i+1}] (Z, mu; ``right-constant``, whose value attributed to
    t_{i+1} is stored at the level-i parent node, arrays for levels 0..N-1).
    """

    lattice: Lattice
    timing: str
    values: list[np.ndarray]

    def __post_init__(self):
        if self.timing not in (LEFT_CONSTANT, RIGHT_CONSTANT):
            raise ValueError(f"unknown timing tag {self.timing!r}")
        expected = self.lattice.n_steps + (1 if self.timing == LEFT_CONSTANT else 0)
        if len(self.values) != expected:
            raise StructuralError(
                f"{self.timing} field needs {expected} level arrays, "
                f"got {len(self.values)}"
            )
        for i, arr in enumerate(self.values):
            shape = self.lattice.level_shape(i)
            if np.asarray(arr).shape[: len(shape)] != shape:
                raise StructuralError(
                    f"level {i} array has shape {np.asarray(arr).shape}, "
                    f"expected leading {shape}"
                )

    def at_level(self, i: int) -> np.ndarray:
        return self.values[i]

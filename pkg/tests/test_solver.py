import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bsdelta import (
    AprioriBoundError,
    ContractError,
    NonSolvableError,
    PathInfo,
    SolveConfig,
    StepSizeError,
    StructuralError,
    TerminalSpec,
    apriori_bound,
    build_lattice,
    builtin,
    deterministic_solution,
    implicit_step,
    parse_driver,
    reconstruction_residual,
    solvability_margin,
    solve,
)

SQRT_CLIP = "sign(w1) * min(sqrt(abs(w1)), 1.0)"


def info1(n=1):
    return PathInfo(level=0, walk=np.zeros((n, 1)), lag=0.5)


def y_driver():
    return parse_driver("y", {"K": 1, "q": 1, "L_y": 1, "L_z": 0}, validate=False)


# ---------------------------------------------------------------------------
# implicit one-step solve
# ---------------------------------------------------------------------------


def test_implicit_step_linear():
    # y - 0.5 y = 1  ->  y = 2
    got = implicit_step(1.0, [0.0], y_driver(), 0.5, info1(), dqv=0.5)
    assert got == pytest.approx(2.0, rel=1e-12)


def test_implicit_step_identity_for_zero_driver():
    got = implicit_step(0.7, [0.0], builtin("zero"), 0.5, info1(), dqv=0.9)
    assert got == pytest.approx(0.7)


def test_implicit_step_step_size_error():
    with pytest.raises(StepSizeError, match="dqv"):
        implicit_step(1.0, [0.0], y_driver(), 1.0, info1(), dqv=1.0)


def test_implicit_step_flat_map_without_root():
    # honest L_y would forbid this; a lying declaration must surface as a
    # bracket failure, not silently return a value
    lying = parse_driver("2*y", {"K": 2, "q": 1, "L_y": 0.1, "L_z": 0}, validate=False)
    with pytest.raises(NonSolvableError):
        implicit_step(1.0, [0.0], lying, 0.5, info1(), dqv=0.9)


@given(st.floats(-50, 50), st.floats(0.01, 0.9), st.floats(0.1, 0.99))
@settings(max_examples=100, deadline=None)
def test_implicit_step_residual_contract(x, dqv, ly):
    spec = parse_driver(
        f"{ly}*y + 1.0",
        {"K": max(ly, 1.0), "q": 1.0, "L_y": ly, "L_z": 0.0},
        validate=False,
    )
    if ly * dqv >= 1.0:
        return
    y = implicit_step(x, [0.0], spec, 0.5, info1(), dqv=dqv)
    resid = y - dqv * (ly * y + 1.0) - x
    assert abs(resid) <= 1e-12 * (1 + abs(x)) + 1e-12


# ---------------------------------------------------------------------------
# closed forms and margins
# ---------------------------------------------------------------------------


def test_deterministic_solution_hand_values():
    lat = build_lattice(2, 1.0, 1)
    np.testing.assert_allclose(deterministic_solution(0.0, 1.0, lat), [3.0, 1.0, 0.0])


def test_deterministic_solution_zero_growth():
    lat = build_lattice(5, 1.0, 1)
    np.testing.assert_allclose(deterministic_solution(2.0, 0.0, lat), np.full(6, 2.0))


def test_deterministic_solution_converges_to_exponential():
    lat = build_lattice(400, 1.0, 1)
    got = deterministic_solution(1.0, 1.0, lat)[0]
    assert abs(got - (2 * math.e - 1)) / (2 * math.e - 1) < 0.01


def test_deterministic_solution_step_size():
    with pytest.raises(StepSizeError):
        deterministic_solution(1.0, 1.0, build_lattice(1, 1.0, 1))


def test_apriori_bound_values():
    assert apriori_bound(0.0, 0.0, 0.3, 1.0) == 1.0
    assert apriori_bound(1.0, 1.0, 1.0, 1.0) == 2.0
    assert apriori_bound(1.0, 1.0, 0.0, 1.0) == pytest.approx(2 * math.e)


def test_solvability_margin():
    assert solvability_margin(y_driver(), build_lattice(1, 1.0, 1)) == 0.0
    assert solvability_margin(builtin("zero"), build_lattice(3, 1.0, 1)) == 1.0
    lat = build_lattice(8, 1.0, 1)
    two = builtin("bound_driver", K=2.0, q=1.5)
    assert solvability_margin(two, lat) == pytest.approx(0.75)


# ---------------------------------------------------------------------------
# terminal specs
# ---------------------------------------------------------------------------


def test_terminal_bound_enforced():
    lat = build_lattice(4, 1.0, 1)
    with pytest.raises(ContractError, match="sup-norm"):
        TerminalSpec.from_expression("w1", bound=0.5).evaluate(lat)


def test_terminal_leaf_table():
    lat = build_lattice(1, 1.0, 1)
    vals = TerminalSpec.from_leaf_values([0.25, -0.25], bound=0.3).evaluate(lat)
    np.testing.assert_allclose(vals, [0.25, -0.25])
    with pytest.raises(StructuralError):
        TerminalSpec.from_leaf_values([1.0, 2.0, 3.0], bound=5.0).evaluate(lat)


def test_terminal_intermediate_times():
    lat = build_lattice(2, 1.0, 1, "full-tree")
    term = TerminalSpec.from_expression("w1_1", bound=1.0, times=[0.5])
    vals = term.evaluate(lat).reshape(-1)
    # value at t_1 is +-step depending on the first sign bit
    s = lat.step
    np.testing.assert_allclose(vals, [-s, s, -s, s])
    with pytest.raises(ContractError):
        solve(build_lattice(2, 1.0, 1), builtin("zero"), term)


def test_terminal_off_grid_time():
    lat = build_lattice(2, 1.0, 1, "full-tree")
    term = TerminalSpec.from_expression("w1_1", bound=1.0, times=[0.31])
    with pytest.raises(ValueError, match="grid"):
        term.evaluate(lat)


# ---------------------------------------------------------------------------
# full solves
# ---------------------------------------------------------------------------


def test_martingale_representation_of_walk():
    # zero driver, xi = W_T: Y is the walk itself, Z = 1, dM = 0
    lat = build_lattice(6, 1.0, 1)
    r = solve(lat, builtin("zero"), TerminalSpec.from_expression("w1", bound=3.0))
    for i in range(7):
        np.testing.assert_allclose(
            r.y.values[i], lat.walk_values(i)[..., 0], atol=1e-14
        )
    for i in range(6):
        np.testing.assert_allclose(r.z.values[i], 1.0, atol=1e-13)
    assert r.diagnostics.max_abs_dm <= 1e-13


def test_deterministic_terminal_matches_closed_form():
    lat = build_lattice(50, 1.0, 1)
    drv = builtin("bound_driver", K=1.0, q=1.5)
    r = solve(lat, drv, TerminalSpec.from_expression("1.0", bound=1.0))
    det = deterministic_solution(1.0, 1.0, lat)
    for i in range(51):
        np.testing.assert_allclose(r.y.values[i], det[i], atol=1e-11)
    assert max(float(np.max(np.abs(r.z.values[i]))) for i in range(50)) < 1e-12
    assert r.diagnostics.max_abs_dm < 1e-12


def test_quadratic_two_step_hand_value():
    # a = 3, N = 2: top-level value 3.75 after one step, 5.390625 at the root
    from bsdelta.analysis import quadratic_explosion

    rep = quadratic_explosion(2, 3.0)
    assert rep.closed_form_y0 == pytest.approx(5.390625)
    assert rep.solver_y0 == pytest.approx(5.390625, rel=1e-12)
    lat = build_lattice(2, 1.0, 1)
    r = solve(
        lat,
        builtin("quadratic_z"),
        TerminalSpec.from_function(lambda w: 3.0 * (w[:, 0] > lat.step), bound=3.0),
    )
    assert r.y.values[1][1] == pytest.approx(3.75)


def test_reconstruction_identity():
    lat = build_lattice(12, 1.0, 1)
    drv = builtin("linear_y_power_z", K1=1.0, K2=1.0, p=1.5)
    r = solve(lat, drv, TerminalSpec.from_expression(SQRT_CLIP, bound=1.0))
    assert reconstruction_residual(r, drv) <= 1e-10


def test_reconstruction_identity_d2_full_tree():
    lat = build_lattice(5, 1.0, 2, "full-tree")
    drv = builtin("linear_y_power_z", K1=0.5, K2=0.5, p=1.5)
    term = TerminalSpec.from_expression("max(min(w1 * w2, 1.0), -1.0)", bound=1.0)
    r = solve(lat, drv, term)
    assert reconstruction_residual(r, drv) <= 1e-10
    # d >= 2 product walks genuinely need the orthogonal part
    assert r.diagnostics.max_abs_dm > 1e-6
    # per-node branch means of dM and dM * dw^k vanish
    inc = lat.branch_increments()
    for i in range(5):
        dm = r.dm[i].reshape(-1, 4)
        np.testing.assert_allclose(dm.mean(axis=1), 0.0, atol=1e-12)
        for k in range(2):
            np.testing.assert_allclose(dm @ inc[:, k] / 4.0, 0.0, atol=1e-12)


def test_one_dimensional_dm_vanishes():
    lat = build_lattice(9, 1.0, 1)
    drv = builtin("linear_y_power_z", K1=1.0, K2=1.0, p=1.5)
    r = solve(lat, drv, TerminalSpec.from_expression(SQRT_CLIP, bound=1.0))
    assert r.diagnostics.max_abs_dm <= 1e-12


def test_solve_step_size_gate():
    lat = build_lattice(1, 1.0, 1)
    with pytest.raises(StepSizeError):
        solve(lat, y_driver(), TerminalSpec.from_expression("1.0", bound=1.0))


def test_bound_check_opt_in():
    # strongly superlinear driver at coarse N legitimately escapes the
    # envelope; with the check requested the solve must fail with a witness
    lat = build_lattice(5, 1.0, 1)
    drv = builtin("linear_y_power_z", K1=1.0, K2=5.0, p=1.5)
    term = TerminalSpec.from_expression(SQRT_CLIP, bound=1.0)
    solve(lat, drv, term)  # margin tracked, no assertion
    with pytest.raises(AprioriBoundError, match="envelope"):
        solve(lat, drv, term, SolveConfig(bound_check=True))


def test_bound_margin_positive_in_tame_regime():
    lat = build_lattice(64, 1.0, 1)
    drv = builtin("linear_y_power_z", K1=0.1, K2=0.1, p=1.5)
    r = solve(
        lat,
        drv,
        TerminalSpec.from_expression(SQRT_CLIP, bound=1.0),
        SolveConfig(bound_check=True),
    )
    assert r.diagnostics.bound_margin > 0


def test_engine_mismatch_rejected():
    lat = build_lattice(4, 1.0, 1)
    cfg = SolveConfig(engine="full-tree")
    with pytest.raises(ContractError, match="lattice"):
        solve(lat, builtin("zero"), TerminalSpec.from_expression("w1", bound=2.0), cfg)


def test_path_dependent_driver_needs_full_tree_and_runs():
    # running-interpolation driver exercises the adapted path accessor
    def running(t, info, y, z):
        return 0.5 * np.abs(info.interpolation(t)[:, 0])

    drv_constants = {
        "growth": 0.5 * 2.0,
        "growth_exponent": 1.0,
        "y_lipschitz": 0.0,
        "z_modulus": 0.0,
        "path_lipschitz": 0.5,
    }
    from bsdelta.driver import DriverConstants, DriverSpec

    drv = DriverSpec(
        name="half-abs-interpolated-path",
        constants=DriverConstants(**drv_constants),
        convex_in_z=False,
        quadratic=False,
        path_dependent=True,
        evaluator=running,
    )
    term = TerminalSpec.from_expression("max(min(w1, 1.0), -1.0)", bound=1.0)
    with pytest.raises(ContractError, match="full-tree"):
        solve(build_lattice(4, 1.0, 1), drv, term)
    lat = build_lattice(4, 1.0, 1, "full-tree")
    r = solve(lat, drv, term)
    # against a by-hand backward pass: f adds 0.5 |W^{N,c}(t_{i+1})| dqv,
    # and the interpolated value at t_{i+1} equals the walk at t_i
    expect = TerminalSpec.from_expression("max(min(w1, 1.0), -1.0)", bound=1.0)
    vals = expect.evaluate(lat).reshape(-1)
    for i in range(3, -1, -1):
        kids = lat.child_take(i, vals).reshape(2, -1)
        # lagged interpolation at t_{i+1} equals the walk value at t_i
        winterp = lat.walk_values(i).reshape(-1, 1) if i >= 1 else np.zeros((1, 1))
        vals = kids.mean(axis=0) + 0.25 * 0.5 * np.abs(winterp[:, 0])
    assert r.y0 == pytest.approx(float(vals[0]), rel=1e-12)


def test_engine_equivalence_small():
    drv = builtin("linear_y_power_z", K1=0.3, K2=0.3, p=1.5)
    term = TerminalSpec.from_expression(SQRT_CLIP, bound=1.0)
    for d, n in ((1, 8), (2, 5)):
        rec = solve(build_lattice(n, 1.0, d), drv, term)
        full = solve(build_lattice(n, 1.0, d, "full-tree"), drv, term)
        assert full.y0 == pytest.approx(rec.y0, abs=1e-13)

import math

import numpy as np
import pytest

from bsdelta import (
    SolveConfig,
    StepSizeError,
    TerminalSpec,
    build_lattice,
    builtin,
    compare,
    comparison_thresholds,
    convergence_study,
    gronwall_bound,
    gronwall_extremal,
    parse_driver,
    quadratic_explosion,
    stability_gap,
    subquadratic_explosion,
    z_blowup,
)

SQRT_CLIP = "sign(w1) * min(sqrt(abs(w1)), 1.0)"
CLIP = "max(min(w1, 1.0), -1.0)"


# ---------------------------------------------------------------------------
# thresholds
# ---------------------------------------------------------------------------


def test_thresholds_zero_driver():
    thr = comparison_thresholds(1.0, 0.0, 1.5, 0.0, build_lattice(4, 1.0, 1))
    assert thr.y_feedback_lhs == 0.0 and thr.z_increment_lhs == 0.0 and thr.ok


def test_thresholds_formula_and_decay():
    # exact formula with D = 2(C+1)e^{KT} and the K v L prefactor
    c, k, q, lip = 1.0, 1.0, 1.5, 1.0
    lat = build_lattice(10_000, 1.0, 1)
    thr = comparison_thresholds(c, k, q, lip, lat)
    dd = 2.0 * (c + 1.0) * math.e
    dqv = 1e-4
    want1 = (1.0 + dd**1.5 * dqv**-0.75) * dqv
    want2 = 1.5 * (1.0 + dd**0.75 * dqv**-0.375) * math.sqrt(dqv)
    assert thr.y_feedback_lhs == pytest.approx(want1, rel=1e-12)
    assert thr.z_increment_lhs == pytest.approx(want2, rel=1e-12)
    # C = K = L = 1 still fails at N = 1e4 (the level constant is ~35.9 and
    # the increment term decays only like dqv^{1/8}); both conditions clear
    # around N ~ 1e8
    assert not thr.ok
    assert comparison_thresholds(c, k, q, lip, build_lattice(10**8, 1.0, 1)).ok
    # the level condition scales like dqv^{1-q/2}: halves when N grows 16x
    r1 = comparison_thresholds(c, k, q, lip, build_lattice(100, 1.0, 1))
    r2 = comparison_thresholds(c, k, q, lip, build_lattice(1600, 1.0, 1))
    assert r2.y_feedback_lhs == pytest.approx(r1.y_feedback_lhs / 2.0, rel=2e-3)


def test_thresholds_quadratic_never_ok():
    # at q = 2 the decay exponent vanishes: the level term stays ~ K D^2
    for n in (10, 1_000, 100_000):
        thr = comparison_thresholds(1.0, 1.0, 2.0, 1.0, build_lattice(n, 1.0, 1))
        assert not thr.ok
        assert thr.y_feedback_lhs > 4.0


# ---------------------------------------------------------------------------
# comparison runs
# ---------------------------------------------------------------------------


def test_compare_identical_inputs():
    lat = build_lattice(16, 1.0, 1)
    drv = builtin("linear_y_power_z", K1=0.2, K2=0.2, p=1.5)
    term = TerminalSpec.from_expression(CLIP, bound=1.0)
    rep = compare(lat, drv, term, drv, term)
    assert rep.verdict == "ordered" and rep.min_gap == 0.0


def test_compare_constant_lift_strict():
    lat = build_lattice(64, 1.0, 1)
    f2 = parse_driver(
        "0.1*y + 0.1*norm(z)^1.5",
        {"K": 0.1, "q": 1.5, "L_y": 0.1, "L_z": 0.15},
        convex_in_z=True,
    )
    f1 = parse_driver(
        "0.1*y + 0.1*norm(z)^1.5 + 0.5",
        {"K": 0.5, "q": 1.5, "L_y": 0.1, "L_z": 0.15},
        convex_in_z=True,
    )
    term = TerminalSpec.from_expression(CLIP, bound=1.0)
    rep = compare(lat, f1, term, f2, term)
    assert rep.verdict == "ordered"
    assert rep.dominance_ok and rep.terminal_ordered
    # strict positivity away from the terminal level
    assert rep.y1_root > rep.y2_root + 0.3


def test_compare_quadratic_violation():
    # terminal a >= a 1{top} but the constant solution sits below the grown one
    n, a = 6, 3.0
    lat = build_lattice(n, 1.0, 1)
    drv = builtin("quadratic_z")
    top = TerminalSpec.from_function(
        lambda w: a * (w[:, 0] > (n - 1) * lat.step), bound=a
    )
    const = TerminalSpec.from_expression(repr(a), bound=a)
    rep = compare(lat, drv, const, drv, top)
    assert not rep.thresholds.ok
    assert rep.verdict == "violated"
    assert rep.min_gap < -ORDER_VIOLATION_SCALE(n, a)
    assert rep.witness is not None


def ORDER_VIOLATION_SCALE(n, a):
    return a * (1 + (a - 2) / 4) ** n - a - 1


def test_compare_subquadratic_below_threshold_regime():
    # ordering failure with thresholds unmet must not claim a violation
    n = 8
    lat = build_lattice(n, 1.0, 1)
    drv = builtin("linear_y_power_z", K1=1.0, K2=5.0, p=1.5)
    zero = builtin("linear_y_power_z", K1=1.0, K2=5.0, p=1.0)
    t_hi = TerminalSpec.from_expression(SQRT_CLIP, bound=1.0)
    t_lo = TerminalSpec.from_expression(f"{SQRT_CLIP} - 0.5", bound=1.5)
    rep = compare(lat, zero, t_hi, drv, t_lo)
    assert rep.verdict in ("ordered", "thresholds-not-met")
    if rep.verdict == "thresholds-not-met":
        assert not rep.thresholds.ok


# ---------------------------------------------------------------------------
# stability
# ---------------------------------------------------------------------------


def test_stability_identical():
    lat = build_lattice(16, 1.0, 1)
    drv = builtin("linear_y_power_z", K1=0.2, K2=0.2, p=1.5)
    term = TerminalSpec.from_expression(CLIP, bound=1.0)
    rep = stability_gap(lat, drv, term, drv, term)
    assert rep.observed == 0.0 and rep.bound == 0.0


def test_stability_terminal_shift():
    lat = build_lattice(32, 1.0, 1)
    drv = builtin("linear_y_power_z", K1=0.2, K2=0.2, p=1.5)
    t1 = TerminalSpec.from_expression(f"0.5 * ({CLIP})", bound=0.5)
    t2 = TerminalSpec.from_expression(f"0.5 * ({CLIP}) + 0.1", bound=0.6)
    rep = stability_gap(lat, drv, t1, drv, t2)
    assert rep.terminal_gap_sup == pytest.approx(0.1)
    assert rep.driver_gap_sup == 0.0
    assert rep.observed <= rep.bound
    assert rep.bound == pytest.approx(rep.stability_constant * 0.1)


def test_stability_driver_shift():
    lat = build_lattice(32, 1.0, 1)
    f1 = builtin("linear_y_power_z", K1=0.2, K2=0.2, p=1.5)
    f2 = parse_driver(
        "0.2*y + 0.2*norm(z)^1.5 + 0.05",
        {"K": 0.2, "q": 1.5, "L_y": 0.2, "L_z": 0.3},
        convex_in_z=True,
    )
    term = TerminalSpec.from_expression(f"0.5 * ({CLIP})", bound=0.5)
    rep = stability_gap(lat, f1, term, f2, term)
    assert rep.driver_gap_sup == pytest.approx(0.05)
    assert rep.observed <= rep.bound
    assert rep.observed > 0.0


# ---------------------------------------------------------------------------
# explosion oracles and z blowup
# ---------------------------------------------------------------------------


def test_subquadratic_explosion_fixed_point():
    rep = subquadratic_explosion(4, 1.5, 4.0)
    assert rep.threshold == pytest.approx(4.0)
    assert rep.closed_form_y0 == pytest.approx(4.0)
    assert rep.solver_y0 == pytest.approx(4.0, rel=1e-9)


def test_subquadratic_explosion_preconditions():
    with pytest.raises(ValueError, match="a >= 2"):
        subquadratic_explosion(4, 1.5, 1.0)
    with pytest.raises(ValueError, match="q in"):
        subquadratic_explosion(4, 1.0, 10.0)


def test_quadratic_explosion_report():
    rep = quadratic_explosion(1, 3.0)
    assert rep.closed_form_y0 == pytest.approx(3.75)
    assert rep.lower_bound == pytest.approx(3.75)
    rep = quadratic_explosion(10, 3.0)
    assert rep.lower_bound == pytest.approx(3 * 1.25**10)
    assert rep.closed_form_y0 >= rep.lower_bound
    assert rep.comparison_violation
    with pytest.raises(ValueError, match="a > 2"):
        quadratic_explosion(3, 2.0)


def test_z_blowup_values():
    assert z_blowup(1) == pytest.approx(1.0, abs=1e-12)
    assert z_blowup(81) == pytest.approx(3.0, abs=1e-12)
    for n in (9, 25, 49):
        assert z_blowup(n) / n**0.25 == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(ValueError, match="odd"):
        z_blowup(10)


# ---------------------------------------------------------------------------
# convergence studies
# ---------------------------------------------------------------------------


def test_convergence_zero_driver_equals_binomial_expectation():
    term = TerminalSpec.from_expression(SQRT_CLIP, bound=1.0)
    table = convergence_study(builtin("zero"), term, [4, 8, 16])
    for row in table.rows:
        lat = build_lattice(row.n_steps, 1.0, 1)
        vals = term.evaluate(lat)
        weights = np.array(
            [math.comb(row.n_steps, k) for k in range(row.n_steps + 1)],
            dtype=float,
        ) / 2.0**row.n_steps
        assert row.y0 == pytest.approx(float(weights @ vals), abs=1e-13)


def test_convergence_rows_record_errors():
    bad = parse_driver("y", {"K": 1, "q": 1, "L_y": 1, "L_z": 0}, validate=False)
    term = TerminalSpec.from_expression("0.5", bound=0.5)
    table = convergence_study(bad, term, [1, 4])
    assert table.rows[0].error is not None and "StepSize" in table.rows[0].error
    assert table.rows[1].error is None and table.rows[1].y0 is not None


def test_convergence_needs_increasing_n():
    with pytest.raises(ValueError):
        convergence_study(
            builtin("zero"),
            TerminalSpec.from_expression("0.1", bound=0.2),
            [4, 4],
        )


# ---------------------------------------------------------------------------
# discrete Gronwall
# ---------------------------------------------------------------------------


def test_gronwall_constant_and_zero():
    lat = build_lattice(10, 1.0, 1)
    assert gronwall_bound(np.full(11, 2.0), 2.0, 0.0, lat).ok
    assert gronwall_bound(np.zeros(11), 1.0, 3.0, lat).ok


def test_gronwall_extremal_is_tight():
    for n, bb in ((10, 0.5), (10, 2.0), (100, 2.0)):
        lat = build_lattice(n, 1.0, 1)
        h = gronwall_extremal(1.0, bb, lat)
        rep = gronwall_bound(h, 1.0, bb, lat)
        assert rep.ok, (n, bb, rep)
        # near-tight: the envelope is within factor ~2 of the sequence
        env0 = 2.0 * math.exp(bb)
        assert h[0] <= env0 and h[0] > env0 / 2.5


def test_gronwall_premise_fail_classified():
    lat = build_lattice(10, 1.0, 1)
    h = gronwall_extremal(1.0, 2.0, lat)
    h[0] *= 10.0
    rep = gronwall_bound(h, 1.0, 2.0, lat)
    assert rep.kind == "premise-fail" and rep.witness == 0


def test_gronwall_conclusion_fail_detectable():
    # at coarse steps the extremal sequence escapes the doubled exponential
    # envelope (the implication needs dqv small), and is classified as a
    # conclusion failure since it satisfies the premise with equality
    lat = build_lattice(4, 1.0, 1)
    h = gronwall_extremal(1.0, 3.5, lat)
    assert h[0] > 2.0 * math.exp(3.5)
    rep = gronwall_bound(h, 1.0, 3.5, lat)
    assert rep.kind == "conclusion-fail" and rep.witness == 0


def test_gronwall_step_gate():
    lat = build_lattice(2, 1.0, 1)
    with pytest.raises(StepSizeError):
        gronwall_bound(np.zeros(3), 1.0, 3.0, lat)

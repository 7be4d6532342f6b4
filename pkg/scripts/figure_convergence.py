#!/usr/bin/env python3
"""Convergence of Y_0 over grid refinements for the two driver families.

Solves the square-root-clipped terminal with drivers y + K2 |z|^{3/2} for
K2 = 1 (fast convergence, settled around N = 20) and K2 = 5 (still exploding
at coarse grids, settling only around N = 80), and writes one CSV per family.

Usage: python scripts/figure_convergence.py [outdir]
"""

import sys
from pathlib import Path

from bsdelta import TerminalSpec, builtin, convergence_study
from bsdelta.cli import emit

N_LIST = [5, 10, 20, 40, 80, 160]
TERMINAL = TerminalSpec.from_expression("sign(w1) * min(sqrt(abs(w1)), 1.0)", bound=1.0)


def main() -> int:
    outdir = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("out")
    outdir.mkdir(parents=True, exist_ok=True)
    for k2 in (1.0, 5.0):
        driver = builtin("linear_y_power_z", K1=1.0, K2=k2, p=1.5)
        table = convergence_study(driver, TERMINAL, N_LIST)
        header = ["N", "Y0", "diff", "seconds", "error"]
        rows = [[r.n_steps, r.y0, r.diff, r.seconds, r.error] for r in table.rows]
        path = outdir / f"convergence_k2_{k2:g}.csv"
        path.write_bytes(emit((header, rows), "csv"))
        print(f"K2 = {k2:g}  ->  {path}")
        for r in table.rows:
            tail = f"error: {r.error}" if r.error else f"Y0={r.y0}  diff={r.diff}"
            print(f"  N={r.n_steps:4d}  {tail}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())

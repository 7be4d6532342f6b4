"""Config-driven command line front end.

    bsdelta <command> --config <path> [--out <dir>] [--seed <u64>] [--format json|csv]

Commands: solve, compare, stability, converge, counterexample, duality,
checks.  Configs are JSON, schema-validated with unknown keys rejected.
Outputs are deterministic for identical config + seed: stable field order,
reals printed with 17 significant digits, CSV with comma separator, header
row and LF line endings.  (Exception: the wall-clock ``seconds`` column of
``converge`` tables is informational and excluded from the byte-determinism
contract.)  Exit codes: 0 ok, 1 numeric/contract error, 2 config error.

The environment variable BSDELTA_THREADS caps worker parallelism; the
current engine is vectorized single-threaded, so any positive cap is
honored trivially (invalid values are still rejected).
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from pathlib import Path

import jsonschema
import numpy as np

from . import analysis, duality
from .driver import DriverSpec, builtin, parse_driver
from .errors import BsdeltaError, ConfigError
from .lattice import Lattice, build_lattice, cross_orthogonality, increment_ratio
from .solver import SolveConfig, TerminalSpec, solve

COMMANDS = (
    "solve",
    "compare",
    "stability",
    "converge",
    "counterexample",
    "duality",
    "checks",
)

_worker_cap: int | None = None  # from BSDELTA_THREADS; engine is vectorized


# ---------------------------------------------------------------------------
# schemas
# ---------------------------------------------------------------------------

_NUM = {"type": "number"}
_POSINT = {"type": "integer", "minimum": 1}

_LATTICE_SCHEMA = {
    "type": "object",
    "properties": {
        "N": _POSINT,
        "T": {"type": "number", "exclusiveMinimum": 0},
        "d": _POSINT,
        "mode": {"enum": ["recombining", "full-tree"]},
    },
    "required": ["N", "T"],
    "additionalProperties": False,
}

_DRIVER_SCHEMA = {
    "type": "object",
    "properties": {
        "builtin": {"type": "string"},
        "params": {"type": "object"},
        "expression": {"type": "string"},
        "constants": {
            "type": "object",
            "properties": {"K": _NUM, "q": _NUM, "L_y": _NUM, "L_z": _NUM, "L_w": _NUM},
            "required": ["K", "q", "L_y", "L_z"],
            "additionalProperties": False,
        },
        "convex_in_z": {"type": "boolean"},
        "quadratic": {"type": "boolean"},
        "path_dependent": {"type": "boolean"},
        "truncate": {"type": "number", "exclusiveMinimum": 0},
    },
    "oneOf": [{"required": ["builtin"]}, {"required": ["expression", "constants"]}],
    "additionalProperties": False,
}

_TERMINAL_SCHEMA = {
    "type": "object",
    "properties": {
        "expression": {"type": "string"},
        "times": {"type": "array", "items": _NUM},
        "leaf_values": {"type": "array", "items": _NUM},
        "bound": {"type": "number", "minimum": 0},
    },
    "oneOf": [{"required": ["expression", "bound"]}, {"required": ["leaf_values", "bound"]}],
    "additionalProperties": False,
}

_SOLVER_SCHEMA = {
    "type": "object",
    "properties": {
        "root_tol": {"type": "number", "exclusiveMinimum": 0},
        "max_root_iters": _POSINT,
        "bound_check": {"type": "boolean"},
        "engine": {"enum": ["auto", "recombining", "full-tree"]},
    },
    "additionalProperties": False,
}


def _command_schema(command: str) -> dict:
    base = {
        "command": {"const": command},
        "seed": {"type": "integer", "minimum": 0},
        "out": {"type": "string"},
    }
    if command == "solve":
        props = {
            "lattice": _LATTICE_SCHEMA,
            "driver": _DRIVER_SCHEMA,
            "terminal": _TERMINAL_SCHEMA,
            "solver": _SOLVER_SCHEMA,
            "dump_nodes": {"type": "boolean"},
        }
        required = ["command", "lattice", "driver", "terminal"]
    elif command in ("compare", "stability"):
        props = {
            "lattice": _LATTICE_SCHEMA,
            "driver1": _DRIVER_SCHEMA,
            "terminal1": _TERMINAL_SCHEMA,
            "driver2": _DRIVER_SCHEMA,
            "terminal2": _TERMINAL_SCHEMA,
            "solver": _SOLVER_SCHEMA,
        }
        required = [
            "command",
            "lattice",
            "driver1",
            "terminal1",
            "driver2",
            "terminal2",
        ]
    elif command == "converge":
        props = {
            "N_list": {"type": "array", "items": _POSINT, "minItems": 1},
            "T": {"type": "number", "exclusiveMinimum": 0},
            "d": _POSINT,
            "mode": {"enum": ["recombining", "full-tree"]},
            "driver": _DRIVER_SCHEMA,
            "terminal": _TERMINAL_SCHEMA,
            "solver": _SOLVER_SCHEMA,
        }
        required = ["command", "N_list", "T", "driver", "terminal"]
    elif command == "counterexample":
        props = {
            "family": {"enum": ["subquadratic", "quadratic"]},
            "N": _POSINT,
            "a": _NUM,
            "q": _NUM,
        }
        required = ["command", "family", "N", "a"]
    elif command == "duality":
        props = {
            "lattice": _LATTICE_SCHEMA,
            "driver": _DRIVER_SCHEMA,
            "terminal": _TERMINAL_SCHEMA,
            "solver": _SOLVER_SCHEMA,
            "random_controls": {"type": "integer", "minimum": 0},
        }
        required = ["command", "lattice", "driver", "terminal"]
    elif command == "checks":
        props = {
            "lattice": _LATTICE_SCHEMA,
            "q": _NUM,
            "C": _NUM,
            "K": _NUM,
            "L": _NUM,
        }
        required = ["command", "lattice", "q", "C", "K", "L"]
    else:
        raise ConfigError(f"unknown command {command!r}")
    props.update(base)
    return {
        "type": "object",
        "properties": props,
        "required": required,
        "additionalProperties": False,
    }


def load_config(path: str, command: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path!r}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path!r} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict) or cfg.get("command") != command:
        raise ConfigError(
            f"config command {cfg.get('command')!r} does not match "
            f"invoked command {command!r}"
        )
    try:
        jsonschema.validate(cfg, _command_schema(command))
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"config schema violation: {exc.message}") from exc
    return cfg


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------


def _build_lattice(cfg: dict) -> Lattice:
    return build_lattice(
        cfg["N"], cfg["T"], cfg.get("d", 1), cfg.get("mode", "recombining")
    )


def _build_driver(cfg: dict, seed: int) -> DriverSpec:
    if "builtin" in cfg:
        spec = builtin(cfg["builtin"], **cfg.get("params", {}))
    else:
        spec = parse_driver(
            cfg["expression"],
            cfg["constants"],
            convex_in_z=cfg.get("convex_in_z", False),
            quadratic=cfg.get("quadratic", False),
            path_dependent=cfg.get("path_dependent", False),
            seed=seed,
        )
    if "truncate" in cfg:
        from .driver import truncate

        spec = truncate(spec, cfg["truncate"])
    return spec


def _build_terminal(cfg: dict) -> TerminalSpec:
    if "expression" in cfg:
        return TerminalSpec.from_expression(
            cfg["expression"], cfg["bound"], times=cfg.get("times")
        )
    return TerminalSpec.from_leaf_values(cfg["leaf_values"], cfg["bound"])


def _build_solver(cfg: dict | None) -> SolveConfig:
    cfg = cfg or {}
    return SolveConfig(
        root_tol=cfg.get("root_tol", 1e-12),
        max_root_iters=cfg.get("max_root_iters", 200),
        bound_check=cfg.get("bound_check", False),
        engine=cfg.get("engine", "auto"),
    )


# ---------------------------------------------------------------------------
# deterministic emission
# ---------------------------------------------------------------------------


def format_real(x: float) -> str:
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return format(float(x), ".17g")


def _json_render(obj, indent: int = 0) -> str:
    pad = "  " * indent
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [
            f'{pad}  {json.dumps(str(k))}: {_json_render(v, indent + 1)}'
            for k, v in obj.items()
        ]
        return "{\n" + ",\n".join(items) + f"\n{pad}}}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        items = [f"{pad}  {_json_render(v, indent + 1)}" for v in obj]
        return "[\n" + ",\n".join(items) + f"\n{pad}]"
    if isinstance(obj, bool) or isinstance(obj, np.bool_):
        return "true" if obj else "false"
    if obj is None:
        return "null"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if math.isnan(x) or math.isinf(x):
            return json.dumps(format_real(x))
        return format_real(x)
    if isinstance(obj, str):
        return json.dumps(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _csv_cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool) or isinstance(v, np.bool_):
        s = "true" if v else "false"
    elif isinstance(v, (float, np.floating)):
        s = format_real(float(v))
    elif isinstance(v, (int, np.integer)):
        s = str(int(v))
    else:
        s = str(v)
    if any(c in s for c in ',"\n'):
        s = '"' + s.replace('"', '""') + '"'
    return s


def emit(payload, fmt: str) -> bytes:
    """Serialize a result dict or (header, rows) table to stable bytes."""
    if isinstance(payload, tuple):
        header, rows = payload
        if fmt == "csv":
            lines = [",".join(header)]
            lines += [",".join(_csv_cell(v) for v in row) for row in rows]
            return ("\n".join(lines) + "\n").encode()
        return (
            _json_render([dict(zip(header, row)) for row in rows]) + "\n"
        ).encode()
    if fmt == "csv":
        lines = ["key,value"]
        lines += [f"{_csv_cell(k)},{_csv_cell(v)}" for k, v in _flatten(payload)]
        return ("\n".join(lines) + "\n").encode()
    return (_json_render(payload) + "\n").encode()


def _flatten(obj, prefix: str = ""):
    for k, v in obj.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            yield from _flatten(v, key + ".")
        elif isinstance(v, (list, tuple)):
            yield key, " ".join(_csv_cell(x) for x in v)
        else:
            yield key, v


# ---------------------------------------------------------------------------
# command handlers
# ---------------------------------------------------------------------------


def _cmd_solve(cfg: dict, seed: int):
    lattice = _build_lattice(cfg["lattice"])
    driver = _build_driver(cfg["driver"], seed)
    terminal = _build_terminal(cfg["terminal"])
    result = solve(lattice, driver, terminal, _build_solver(cfg.get("solver")))
    n = lattice.n_steps
    payload = {
        "command": "solve",
        "y0": result.y0,
        "max_abs_z": max(
            float(np.max(np.abs(result.z.values[i]), initial=0.0)) for i in range(n)
        ),
        "max_abs_dm": result.diagnostics.max_abs_dm,
        "solvability_margin": result.diagnostics.solvability_margin,
        "bound_margin": result.diagnostics.bound_margin,
        "max_root_iterations": max(result.diagnostics.root_iterations, default=0),
        "levels": n + 1,
        "nodes": sum(lattice.n_nodes(i) for i in range(n + 1)),
    }
    artifacts = [("solve", payload)]
    if cfg.get("dump_nodes"):
        header = (
            ["level", "node"]
            + [f"w{c + 1}" for c in range(lattice.d)]
            + ["y"]
            + [f"z{c + 1}" for c in range(lattice.d)]
            + [f"dm{b}" for b in range(lattice.n_branches)]
        )
        rows = []
        for i in range(n + 1):
            walks = lattice.walk_values(i).reshape(-1, lattice.d)
            ys = result.y.values[i].reshape(-1)
            zs = (
                result.z.values[i].reshape(-1, lattice.d)
                if i < n
                else np.full((len(ys), lattice.d), np.nan)
            )
            dms = (
                result.dm[i].reshape(-1, lattice.n_branches)
                if i < n
                else np.full((len(ys), lattice.n_branches), np.nan)
            )
            for j in range(len(ys)):
                rows.append(
                    [i, j]
                    + [float(w) for w in walks[j]]
                    + [float(ys[j])]
                    + [float(z) for z in zs[j]]
                    + [float(m) for m in dms[j]]
                )
        artifacts.append(("nodes", (header, rows)))
    return artifacts


def _cmd_converge(cfg: dict, seed: int):
    driver = _build_driver(cfg["driver"], seed)
    terminal = _build_terminal(cfg["terminal"])
    table = analysis.convergence_study(
        driver,
        terminal,
        list(cfg["N_list"]),
        horizon=cfg["T"],
        d=cfg.get("d", 1),
        mode=cfg.get("mode", "recombining"),
        config=_build_solver(cfg.get("solver")),
    )
    header = ["N", "Y0", "diff", "seconds", "error"]
    rows = [[r.n_steps, r.y0, r.diff, r.seconds, r.error] for r in table.rows]
    return [("converge", (header, rows))]


def _cmd_compare(cfg: dict, seed: int):
    lattice = _build_lattice(cfg["lattice"])
    report = analysis.compare(
        lattice,
        _build_driver(cfg["driver1"], seed),
        _build_terminal(cfg["terminal1"]),
        _build_driver(cfg["driver2"], seed),
        _build_terminal(cfg["terminal2"]),
        _build_solver(cfg.get("solver")),
        seed=seed,
    )
    payload = {
        "command": "compare",
        "verdict": report.verdict,
        "min_gap": report.min_gap,
        "bound_margin": report.bound_margin,
        "thresholds": {
            "y_feedback_lhs": report.thresholds.y_feedback_lhs,
            "z_increment_lhs": report.thresholds.z_increment_lhs,
            "ok": report.thresholds.ok,
        },
        "witness": list(report.witness) if report.witness else None,
        "dominance_ok": report.dominance_ok,
        "dominance_witness": report.dominance_witness,
        "terminal_ordered": report.terminal_ordered,
        "y1_root": report.y1_root,
        "y2_root": report.y2_root,
    }
    return [("compare", payload)]


def _cmd_stability(cfg: dict, seed: int):
    lattice = _build_lattice(cfg["lattice"])
    report = analysis.stability_gap(
        lattice,
        _build_driver(cfg["driver1"], seed),
        _build_terminal(cfg["terminal1"]),
        _build_driver(cfg["driver2"], seed),
        _build_terminal(cfg["terminal2"]),
        _build_solver(cfg.get("solver")),
        seed=seed,
    )
    payload = {
        "command": "stability",
        "observed": report.observed,
        "bound": report.bound,
        "driver_gap_sup": report.driver_gap_sup,
        "terminal_gap_sup": report.terminal_gap_sup,
        "stability_constant": report.stability_constant,
        "within_bound": bool(report.observed <= report.bound * (1 + 1e-12) + 1e-12),
    }
    return [("stability", payload)]


def _cmd_counterexample(cfg: dict, seed: int):
    if cfg["family"] == "subquadratic":
        if "q" not in cfg:
            raise ConfigError("subquadratic counterexample needs q in (1, 2)")
        rep = analysis.subquadratic_explosion(cfg["N"], cfg["q"], cfg["a"])
        payload = {
            "command": "counterexample",
            "family": "subquadratic",
            "N": cfg["N"],
            "q": cfg["q"],
            "a": cfg["a"],
            "threshold": rep.threshold,
            "closed_form_y0": rep.closed_form_y0,
            "solver_y0": rep.solver_y0,
            "relative_gap": abs(rep.solver_y0 - rep.closed_form_y0)
            / max(1.0, abs(rep.closed_form_y0)),
        }
    else:
        rep = analysis.quadratic_explosion(cfg["N"], cfg["a"])
        payload = {
            "command": "counterexample",
            "family": "quadratic",
            "N": cfg["N"],
            "a": cfg["a"],
            "closed_form_y0": rep.closed_form_y0,
            "solver_y0": rep.solver_y0,
            "lower_bound": rep.lower_bound,
            "comparison_violation": rep.comparison_violation,
            "relative_gap": abs(rep.solver_y0 - rep.closed_form_y0)
            / max(1.0, abs(rep.closed_form_y0)),
        }
    return [("counterexample", payload)]


def _cmd_duality(cfg: dict, seed: int):
    lattice = _build_lattice(cfg["lattice"])
    cert = duality.certify(
        lattice,
        _build_driver(cfg["driver"], seed),
        _build_terminal(cfg["terminal"]),
        _build_solver(cfg.get("solver")),
        n_random_controls=cfg.get("random_controls", 0),
        seed=seed,
    )
    payload = {
        "command": "duality",
        "primal_root": cert.primal_root,
        "dual_root": cert.dual_root,
        "gap": cert.gap,
        "max_node_gap": cert.max_node_gap,
        "max_fenchel_residual": cert.max_fenchel_residual,
        "entropy_lhs": cert.entropy_lhs,
        "entropy_rhs": cert.entropy_rhs,
        "threshold_lhs": cert.threshold_lhs,
        "threshold_ok": cert.threshold_ok,
        "moment": {
            "observed": cert.moment.observed,
            "reported_bound": cert.moment.reported_bound,
            "coercivity": cert.moment.coercivity,
        },
        "weak_duality_max_excess": cert.weak_duality_max_excess,
    }
    return [("duality", payload)]


def _cmd_checks(cfg: dict, seed: int):
    lattice = _build_lattice(cfg["lattice"])
    orth_flag, sup_ratio = cross_orthogonality(lattice)
    thr = analysis.comparison_thresholds(
        cfg["C"], cfg["K"], cfg["q"], cfg["L"], lattice
    )
    dual_lhs, dual_ok = duality.duality_threshold(
        cfg["C"], cfg["K"], cfg["L"], cfg["q"], lattice
    )
    payload = {
        "command": "checks",
        "increment_ratio": increment_ratio(lattice, cfg["q"]),
        "cross_orthogonal": orth_flag,
        "sup_increment_over_sqrt_dqv": sup_ratio,
        "comparison_thresholds": {
            "y_feedback_lhs": thr.y_feedback_lhs,
            "z_increment_lhs": thr.z_increment_lhs,
            "ok": thr.ok,
        },
        "duality_threshold": {"lhs": dual_lhs, "ok": dual_ok},
        "all_ok": bool(orth_flag and thr.ok and dual_ok),
    }
    return [("checks", payload)]


_HANDLERS = {
    "solve": _cmd_solve,
    "converge": _cmd_converge,
    "compare": _cmd_compare,
    "stability": _cmd_stability,
    "counterexample": _cmd_counterexample,
    "duality": _cmd_duality,
    "checks": _cmd_checks,
}

_DEFAULT_FORMAT = {"converge": "csv"}


def _read_worker_cap() -> int | None:
    raw = os.environ.get("BSDELTA_THREADS")
    if raw is None:
        return None
    try:
        cap = int(raw)
    except ValueError:
        raise ConfigError(f"BSDELTA_THREADS must be a positive integer, got {raw!r}")
    if cap < 1:
        raise ConfigError(f"BSDELTA_THREADS must be >= 1, got {cap}")
    return cap


def run(command: str, config_path: str, out_dir=None, seed=None, fmt=None) -> int:
    global _worker_cap
    _worker_cap = _read_worker_cap()
    cfg = load_config(config_path, command)
    if seed is None:
        seed = cfg.get("seed", 0)
    if out_dir is None:
        out_dir = cfg.get("out")
    fmt = fmt or _DEFAULT_FORMAT.get(command, "json")
    artifacts = _HANDLERS[command](cfg, seed)
    for stem, payload in artifacts:
        this_fmt = "csv" if isinstance(payload, tuple) and fmt == "csv" else fmt
        if isinstance(payload, tuple) and stem == "nodes":
            this_fmt = "csv"
        data = emit(payload, this_fmt)
        if out_dir is not None:
            path = Path(out_dir)
            path.mkdir(parents=True, exist_ok=True)
            (path / f"{stem}.{this_fmt}").write_bytes(data)
        else:
            sys.stdout.buffer.write(data)
            sys.stdout.buffer.flush()
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="bsdelta",
        description="Backward stochastic difference equations on Bernoulli lattices",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--out", default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--format", choices=["json", "csv"], default=None)
    args = parser.parse_args(argv)
    try:
        return run(args.command, args.config, args.out, args.seed, args.format)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except BsdeltaError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())

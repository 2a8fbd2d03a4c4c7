"""Configuration-driven command line front end.

Subcommands: list, converge, simulate, stationary, selftest.  Run configs are
JSON; outputs are CSV tables plus a JSON run manifest.  Exit codes: 0 success,
2 malformed config, 3 solver non-convergence.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .experiments import (CASE_ORDER, make_case, parse_tau_rule, registry,
                          run_convergence, run_simulation)
from .pdas import BoxBounds, PdasConfig, PdasFailure


class ConfigError(ValueError):
    def __init__(self, message, field_name=None):
        self.field_name = field_name
        super().__init__(message)


@dataclass
class RunConfig:
    case: str
    p: int = 0  # 0: use the case default
    k: int = 0
    mesh_sizes: list = field(default_factory=list)
    tau_rule: str = ""
    bounds: dict = field(default_factory=dict)
    tol_relax: float = -1.0  # negative: keep the case default
    pdas_c: float = 1e-2
    max_iter: int = 50
    seed: int = 7
    out_dir: str = "out"
    params: dict = field(default_factory=dict)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}", field_name=sorted(unknown)[0])
        if "case" not in data:
            raise ConfigError("missing required field 'case'", field_name="case")
        cfg = cls(**data)
        if cfg.case not in CASE_ORDER:
            raise ConfigError(f"unknown case {cfg.case!r}", field_name="case")
        if cfg.p and not 1 <= cfg.p <= 4:
            raise ConfigError(f"p must be in 1..4, got {cfg.p}", field_name="p")
        if cfg.k and not 1 <= cfg.k <= 5:
            raise ConfigError(f"k must be in 1..5, got {cfg.k}", field_name="k")
        if cfg.tau_rule:
            parse_tau_rule(cfg.tau_rule)
        return cfg


def _load_config(path):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}")
    if not isinstance(data, dict):
        raise ConfigError("config root must be a JSON object")
    return RunConfig.from_dict(data)


def _resolve_case(cfg):
    case = make_case(cfg.case, cfg.params)
    a = cfg.bounds.get("a", None)
    b = cfg.bounds.get("b", None)
    tol = case.bounds.tol_relax if cfg.tol_relax < 0 else cfg.tol_relax
    if a is not None or b is not None or tol != case.bounds.tol_relax:
        case.bounds = BoxBounds(case.bounds.a if a is None else float(a),
                                case.bounds.b if b is None else float(b),
                                tol_relax=tol)
    return case


def _fmt(x):
    if isinstance(x, float):
        return format(x, ".17g")
    return str(x)


def _write_csv(path, header, rows, no_timestamp):
    lines = []
    if not no_timestamp:
        lines.append(f"# generated {time.strftime('%Y-%m-%dT%H:%M:%S')}")
    lines.append(",".join(header))
    for row in rows:
        lines.append(",".join(_fmt(row.get(col, "")) for col in header))
    Path(path).write_text("\n".join(lines) + "\n")


def _write_manifest(out_dir, cfg, extra=None):
    manifest = {
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "versions": {"boxfem": __version__, "numpy": np.__version__, "scipy": scipy.__version__},
    }
    manifest.update(extra or {})
    path = Path(out_dir) / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _report_record(report):
    return {
        "iterations": report.iterations,
        "converged": report.converged,
        "kkt_residual": report.kkt_residual,
        "message": report.message,
        "final_active_lower": report.final_active_lower.tolist(),
        "final_active_upper": report.final_active_upper.tolist(),
    }


def _cmd_list(args):
    for case in registry():
        print(case.name)
    return 0


def _converge_rows(result):
    rows = []
    for i, row in enumerate(result.table):
        out = dict(row)
        out["eoc_l2"] = result.eoc_l2[i - 1] if i >= 1 and len(result.eoc_l2) >= i else float("nan")
        out["eoc_h1"] = result.eoc_h1[i - 1] if i >= 1 and len(result.eoc_h1) >= i else float("nan")
        rows.append(out)
    return rows


def _cmd_converge(args):
    cfg = _load_config(args.config)
    case = _resolve_case(cfg)
    out_dir = Path(args.out or cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pdas_cfg = PdasConfig(c=cfg.pdas_c, max_iter=cfg.max_iter)
    result = run_convergence(case, p=cfg.p or None, k=cfg.k or None,
                             mesh_sizes=cfg.mesh_sizes or None,
                             tau_rule=cfg.tau_rule or None, cfg=pdas_cfg,
                             seed=cfg.seed, jobs=args.jobs)
    header = ["h", "dofs", "l2_rel", "h1_rel", "eoc_l2", "eoc_h1", "pdas_max_iter"]
    _write_csv(out_dir / f"{case.name}_convergence.csv", header, _converge_rows(result),
               args.no_timestamp)
    _write_manifest(out_dir, cfg, {"failures": result.failures, "wall_time": result.wall_time})
    if result.failures:
        print(json.dumps({"error": "solver failure", "details": result.failures}), file=sys.stderr)
        return 3
    return 0


def _cmd_simulate(args):
    cfg = _load_config(args.config)
    case = _resolve_case(cfg)
    out_dir = Path(args.out or cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pdas_cfg = PdasConfig(c=cfg.pdas_c, max_iter=cfg.max_iter)
    tau = parse_tau_rule(cfg.tau_rule)(1.0) if cfg.tau_rule and "h" not in cfg.tau_rule else None
    try:
        result = run_simulation(case, p=cfg.p or None, k=cfg.k or None,
                                cells=(cfg.mesh_sizes or [None])[-1], tau=tau,
                                cfg=pdas_cfg, seed=cfg.seed)
    except PdasFailure as exc:
        print(json.dumps({"error": "pdas non-convergence", "report": _report_record(exc.report)}),
              file=sys.stderr)
        return 3
    header = ["t", "mass", "min_u", "max_u", "energy", "pdas_iters"]
    _write_csv(out_dir / f"{case.name}_trace.csv", header, result.steps, args.no_timestamp)
    _write_manifest(out_dir, cfg, {"pdas_max": result.pdas_max,
                                   "max_mass_drift": result.max_mass_drift,
                                   "bound_violations": result.bound_violations,
                                   "wall_time": result.wall_time})
    return 0


def _cmd_stationary(args):
    cfg = _load_config(args.config)
    case = _resolve_case(cfg)
    if case.kind not in ("stationary", "second-order-stationary"):
        print(json.dumps({"error": f"case {case.name} is not stationary"}), file=sys.stderr)
        return 2
    out_dir = Path(args.out or cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pdas_cfg = PdasConfig(c=cfg.pdas_c, max_iter=cfg.max_iter)
    try:
        result = run_simulation(case, p=cfg.p or None,
                                cells=(cfg.mesh_sizes or [None])[-1], cfg=pdas_cfg,
                                seed=cfg.seed)
    except PdasFailure as exc:
        print(json.dumps({"error": "pdas non-convergence", "report": _report_record(exc.report)}),
              file=sys.stderr)
        return 3
    u = result.extra["u"]
    w = result.extra["w"]
    coords = u.space.dof_coords
    axes = ["x", "y"][: coords.shape[1]]
    rows = []
    for i in range(coords.shape[0]):
        row = {ax: coords[i, j] for j, ax in enumerate(axes)}
        row["u"] = float(u.values[i])
        row["w"] = float(w.values[i])
        rows.append(row)
    _write_csv(out_dir / f"{case.name}_solution.csv", axes + ["u", "w"], rows, args.no_timestamp)
    _write_csv(out_dir / f"{case.name}_diagnostics.csv",
               ["t", "mass", "min_u", "max_u", "energy", "pdas_iters"], result.steps,
               args.no_timestamp)
    _write_manifest(out_dir, cfg, {"extra": {k: v for k, v in result.extra.items()
                                             if isinstance(v, (int, float, str))}})
    return 0


def _cmd_selftest(args):
    from .qp_oracle import selftest

    failures = selftest(n_problems=args.n, verbose=True)
    print(f"selftest: {args.n - failures}/{args.n} oracle checks passed")
    return 0 if failures == 0 else 1


def main(argv=None):
    parser = argparse.ArgumentParser(prog="boxfem",
                                     description="bound-preserving FEM experiment runner")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("list", help="print the registered case names")
    for name, help_text in [("converge", "run a refinement study"),
                            ("simulate", "run one simulation with per-step diagnostics"),
                            ("stationary", "solve a stationary case and dump the solution")]:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="JSON run config")
        p.add_argument("--out", default=None, help="output directory (default: config out_dir)")
        p.add_argument("--jobs", type=int, default=1, help="parallel refinement levels")
        p.add_argument("--no-timestamp", action="store_true", help="suppress the CSV timestamp header")
    p = sub.add_parser("selftest", help="run the PDAS-vs-oracle equivalence suite")
    p.add_argument("-n", type=int, default=10, help="number of randomized problems")

    args = parser.parse_args(argv)
    try:
        if args.command == "list":
            return _cmd_list(args)
        if args.command == "converge":
            return _cmd_converge(args)
        if args.command == "simulate":
            return _cmd_simulate(args)
        if args.command == "stationary":
            return _cmd_stationary(args)
        if args.command == "selftest":
            return _cmd_selftest(args)
    except ConfigError as exc:
        print(json.dumps({"error": str(exc), "field": exc.field_name}), file=sys.stderr)
        return 2
    except PdasFailure as exc:
        print(json.dumps({"error": "pdas non-convergence", "report": _report_record(exc.report)}),
              file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())

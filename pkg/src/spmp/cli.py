"""Command-line entry point: ``spmp <subcommand> [--config FILE] [--seed N] [--threads N] [--out DIR]``.

Every run writes plot-ready CSV tables, a JSON report, a generated CSV
schema and a manifest with SHA-256 checksums into the output directory.
The exit status is 0 when every gate of the invoked checks passes, 1 when a
gate fails, 2 for an invalid configuration and 3 for a numerical abort.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .acceptance import CheckResult, run_check
from .config import ConfigError, ExperimentConfig, load_config
from .engine import ConstantControl, SimulationError, map_chunks, path_costs, state_steps
from .stochastics import sample_increments

log = logging.getLogger("spmp")

SCHEMA_VERSION = 1

SUBCOMMANDS = {
    "simulate": [],
    "rates": ["rates"],
    "adjoint": ["duality", "adjoint-closed-form"],
    "second-adjoint": ["second-adjoint-closed-form", "flow", "final-duality"],
    "check-mp": ["maximum-principle"],
    "bdg": ["bdg"],
    "oracle": ["oracle"],
    "accept": ["rates", "duality", "adjoint-closed-form", "second-adjoint-closed-form", "flow",
               "final-duality", "maximum-principle", "bdg", "oracle"],
}

# Column descriptions for the generated schema file; unknown columns are listed undocumented.
COLUMN_DOCS = {
    "t": "time of the knot",
    "knot": "knot index",
    "epsilon": "spike width",
    "n_steps": "number of time steps",
    "dt": "time step",
    "mean_l2_sq": "sample mean of ||X_t||_2^2",
    "sd_l2_sq": "sample standard deviation of ||X_t||_2^2",
    "mean_mode_1": "sample mean of the first sine coefficient",
    "mean_midpoint": "sample mean of X_t at the grid point nearest x = 1/2",
    "norm_Y_4": "max_t (E||Y_t||_4^4)^(1/4)",
    "norm_Y_2": "max_t (E||Y_t||_2^2)^(1/2)",
    "norm_Z_2": "max_t (E||Z_t||_2^2)^(1/2)",
    "residual": "max_t (E||X^eps_t - X_t - Y_t - Z_t||_2^2)^(1/2)",
    "J_diff": "J(u^eps) - J(u) on common random numbers",
    "expansion": "second-order expansion of the cost difference",
    "expansion_gap": "J_diff minus expansion",
    "quantity": "name of the fitted quantity",
    "slope": "least-squares slope of log value against log epsilon",
    "intercept": "intercept of the log-log fit",
    "r2": "coefficient of determination of the log-log fit",
    "lhs": "left-hand side estimate",
    "rhs": "right-hand side estimate",
    "gap": "lhs - rhs (control-variate estimate where applicable)",
    "ratio": "lhs / rhs",
    "ratio_upper99": "bootstrap 99% upper confidence bound of the ratio",
    "ratio_fixed_time": "ratio with the fixed-time constant",
    "c_p": "moment inequality constant",
    "p": "integrability exponent",
    "integrand": "name of the test integrand",
    "label": "control candidate",
    "J": "estimated cost",
    "diff_to_best": "paired cost difference to the best candidate",
    "diff_se": "standard error of the paired difference",
    "sample_id": "outer sample index",
    "u": "action of the tested control",
    "v": "alternative action",
    "dH": "Hamiltonian difference H(v) - H(u)",
    "quad": "half the second-order form on the diffusion difference",
    "total": "dH + quad",
    "lag": "s - t",
    "growth_bound": "Gronwall bound on the moment ratio",
    "rel_l2_error": "relative L2 error against the closed form",
    "max_rel_error": "largest relative error over paths and knots",
    "d": "noise dimension",
    "action": "constant action",
}


def _doc(column: str) -> str:
    if column in COLUMN_DOCS:
        return COLUMN_DOCS[column]
    for suffix, text in (("_se", "standard error of "), ("_std_error", "standard error of ")):
        if column.endswith(suffix):
            return text + column[: -len(suffix)]
    if column.startswith("ratio_") or column.startswith("weighted_"):
        return "flow moment ratio (field index and eta in the name)"
    return ""


def _cell(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (list, tuple, np.ndarray)):
        return json.dumps(np.asarray(value).tolist())
    return str(value)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if np.isfinite(v) else str(v)
    return obj


def write_csv(path: Path, rows: list[dict]) -> list[str]:
    columns = []
    for row in rows:
        for key in row:
            if key not in columns:
                columns.append(key)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_cell(row.get(c, "")) for c in columns])
    return columns


def write_json(path: Path, data) -> None:
    path.write_text(json.dumps(_jsonable(data), indent=2, sort_keys=True) + "\n")


def sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# -- simulate -----------------------------------------------------------------


def simulate(cfg: ExperimentConfig) -> CheckResult:
    """Per-knot state summary and a cost estimate under the base control."""
    model, basis, seeds, grid = cfg.model(), cfg.basis(), cfg.seeds(), cfg.grid()
    control = ConstantControl(cfg.base_control)
    mid = int(np.argmin(np.abs(basis.points - 0.5)))
    n = grid.n_steps

    def run(a, b):
        dW = sample_increments(seeds, grid, model.d, b - a, start=a)
        stats = np.zeros((n + 1, 4))
        for k, X, u in state_steps(model, control, dW, grid, basis, np.arange(a, b)):
            sq = basis.lp_norm_pow(X, 2)
            stats[k] = [sq.sum(), (sq * sq).sum(), basis.to_modes(X)[:, 0].sum(), X[:, mid].sum()]
        costs = path_costs(model, control, dW, grid, basis, np.arange(a, b))
        return stats, costs

    parts = map_chunks(run, cfg.n_outer, cfg.chunk, cfg.threads, concat=False)
    stats = sum(p[0] for p in parts) / cfg.n_outer
    costs = np.concatenate([p[1] for p in parts])
    var = np.maximum(stats[:, 1] - stats[:, 0] ** 2, 0.0) * cfg.n_outer / max(cfg.n_outer - 1, 1)
    rows = [{"knot": k, "t": grid.time(k), "mean_l2_sq": stats[k, 0], "sd_l2_sq": float(np.sqrt(var[k])),
             "mean_mode_1": stats[k, 2], "mean_midpoint": stats[k, 3]} for k in range(n + 1)]
    J, se = float(costs.mean()), float(costs.std(ddof=1) / np.sqrt(len(costs)))
    return CheckResult(0, "simulate", bool(np.isfinite(J)),
                       {"J": J, "J_se": se, "control": cfg.base_control, "n_samples": cfg.n_outer},
                       {"state_summary": rows})


# -- orchestration ------------------------------------------------------------


def _determinism(out: Path, reference: Path, files: dict) -> CheckResult:
    ref = json.loads(Path(reference).read_text())["files"]
    mine = {k: v for k, v in files.items()}
    same = ref == mine
    diff = sorted(set(ref) ^ set(mine)) + sorted(k for k in set(ref) & set(mine) if ref[k] != mine[k])
    return CheckResult(13, "determinism", same, {"reference": str(reference), "differing_files": diff})


def execute(subcommand: str, cfg: ExperimentConfig, out: Path, compare: Path | None = None,
            stream=None) -> int:
    stream = sys.stdout if stream is None else stream
    out.mkdir(parents=True, exist_ok=True)
    wall = time.perf_counter()
    if subcommand == "simulate":
        results = [simulate(cfg)]
    else:
        results = []
        for name in SUBCOMMANDS[subcommand]:
            log.info("running %s", name)
            for res in run_check(name, cfg):
                results.append(res)
                print(res.line(), flush=True, file=stream)

    schema = {"schema_version": SCHEMA_VERSION, "tables": {}}
    for res in results:
        for table, rows in res.tables.items():
            if not rows:
                continue
            columns = write_csv(out / f"{table}.csv", rows)
            schema["tables"][f"{table}.csv"] = {c: _doc(c) for c in columns}
    write_json(out / "schema.json", schema)
    report = {
        "schema_version": SCHEMA_VERSION,
        "subcommand": subcommand,
        "checks": [{"criterion": r.criterion, "name": r.name, "passed": r.passed, "summary": r.summary}
                   for r in results],
    }
    write_json(out / "report.json", report)
    files = {p.name: sha256(p) for p in sorted(out.iterdir()) if p.is_file() and p.name != "manifest.json"}
    if compare is not None:
        det = _determinism(out, compare, files)
        print(det.line(), flush=True, file=stream)
        results.append(det)
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "version": __version__,
        "subcommand": subcommand,
        "config": cfg.to_dict(),
        "wall_time_seconds": time.perf_counter() - wall,
        "checks": {f"{r.criterion}:{r.name}": {"passed": r.passed, "seconds": r.seconds} for r in results},
        "passed": all(r.passed for r in results),
        "files": files,
    }
    write_json(out / "manifest.json", manifest)
    return 0 if manifest["passed"] else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spmp", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"spmp {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="YAML configuration file")
        p.add_argument("--seed", type=int, help="override master_seed")
        p.add_argument("--threads", type=int, help="worker threads (results do not depend on it)")
        p.add_argument("--out", type=Path, help="output directory (overrides out_dir)")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "accept":
            p.add_argument("--compare", type=Path,
                           help="manifest of an earlier run; checks byte-identical artifacts")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = load_config(args.config)
        overrides = {}
        if args.seed is not None:
            overrides["master_seed"] = args.seed
        if args.threads is not None:
            overrides["threads"] = args.threads
        if args.out is not None:
            overrides["out_dir"] = str(args.out)
        if overrides:
            cfg = cfg.replace(**overrides)
    except ConfigError as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"cannot read configuration: {exc}", file=sys.stderr)
        return 2
    try:
        return execute(args.subcommand, cfg, Path(cfg.out_dir), getattr(args, "compare", None))
    except SimulationError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())

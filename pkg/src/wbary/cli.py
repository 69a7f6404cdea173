"""Command-line entry point ``wbary``.

Every subcommand writes its outputs plus a run manifest next to the main
output. ``wbary replay --manifest m.json`` re-runs the recorded command and
compares output hashes.

Exit codes: 0 success, 1 usage or input error, 2 numerical failure. Errors
are reported as one JSON line on stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .experiments import RandomMeasureModel, decompose_error, rate_bias, rate_variance, run_stability, sample_empirical
from .io import (
    SchemaError,
    certificate_to_dict,
    dumps,
    format_float,
    read_json,
    read_measure,
    sha256_file,
    write_json,
    write_measure,
    write_trace,
)
from .measures import BoxDomain, DiscreteMeasure, GridDensity, grid_to_discrete, validate
from .parallel import resolve_threads
from .penalties import KINDS, DomainError, Penalty, bregman_nonsym, bregman_sym
from .solver import BarycenterProblem, SolverConfig, solve
from .transport import w2_1d, w2_exact

EXPERIMENTS = ("stability", "rate-variance", "rate-bias", "decompose")


class UsageError(Exception):
    def __init__(self, message: str, file=None, field=None):
        super().__init__(message)
        self.file = None if file is None else str(file)
        self.field = field


class NumericalFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _report_error(kind: str, message: str, file=None, field=None):
    rec = {"error": kind, "message": message}
    if file is not None:
        rec["file"] = file
    if field is not None:
        rec["field"] = field
    print(json.dumps(rec), file=sys.stderr)


# ---------------------------------------------------------------- config


def _flatten(data, prefix="") -> dict:
    out = {}
    for k, v in data.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def config_hash(params: dict) -> str:
    return hashlib.sha256(dumps(dict(sorted(params.items()))).encode()).hexdigest()


def _penalty(kind, alpha, k, base, file=None) -> Penalty:
    if kind not in KINDS:
        raise UsageError(f"unknown penalty kind {kind!r}", file, "penalty.kind")
    try:
        return Penalty(kind, None if alpha is None else float(alpha), int(k), base)
    except ValueError as exc:
        raise UsageError(str(exc), file, "penalty") from None


def _grid_shape(text: str, dim: int) -> tuple[int, ...]:
    try:
        parts = [int(s) for s in str(text).split(",")]
    except ValueError:
        raise UsageError(f"bad grid {text!r}", field="--grid") from None
    if len(parts) == 1:
        parts = parts * dim
    if len(parts) != dim or min(parts) < 1:
        raise UsageError(f"grid {text!r} does not fit a {dim}-d domain", field="--grid")
    return tuple(parts)


def _bounds(text: str | None, dim: int, default: float, flag: str) -> np.ndarray:
    if text is None:
        return np.full(dim, default)
    try:
        vals = [float(s) for s in text.split(",")]
    except ValueError:
        raise UsageError(f"bad bounds {text!r}", field=flag) from None
    if len(vals) == 1:
        vals = vals * dim
    if len(vals) != dim:
        raise UsageError(f"expected {dim} values", field=flag)
    return np.asarray(vals)


# ---------------------------------------------------------------- commands


def cmd_w2(args) -> tuple[int, list[Path], dict]:
    mu, nu = read_measure(args.mu), read_measure(args.nu)
    dim_mu = mu.dim if isinstance(mu, DiscreteMeasure) else mu.domain.dim
    dim_nu = nu.dim if isinstance(nu, DiscreteMeasure) else nu.domain.dim
    if dim_mu != dim_nu:
        raise UsageError(f"dimension mismatch: {dim_mu} vs {dim_nu}", args.nu, "dim")
    if args.method == "quantile":
        if dim_mu != 1:
            raise UsageError("the quantile method needs d = 1", args.mu, "dim")
        out = {"cost": w2_1d(mu, nu), "method": "quantile", "plan": None, "phi": None, "psi": None}
    else:
        a = grid_to_discrete(mu) if isinstance(mu, GridDensity) else mu
        b = grid_to_discrete(nu) if isinstance(nu, GridDensity) else nu
        out = certificate_to_dict(w2_exact(a, b), "lp")
    print(format_float(out["cost"]))
    outputs = [write_json(args.out, out)] if args.out else []
    return 0, outputs, {"method": args.method}


def _load_measure_dir(directory) -> list:
    directory = Path(directory)
    if not directory.is_dir():
        raise SchemaError("not a directory", directory)
    files = sorted(directory.glob("*.json"))
    if not files:
        raise SchemaError("no *.json measure files", directory)
    return [read_measure(f) for f in files]


def cmd_barycenter(args) -> tuple[int, list[Path], dict]:
    measures = _load_measure_dir(args.measures)
    discrete = []
    for m in measures:
        discrete.append(grid_to_discrete(m) if isinstance(m, GridDensity) else m)
    dims = {m.dim for m in discrete}
    if len(dims) != 1:
        raise UsageError("measures have different dimensions", args.measures)
    dim = dims.pop()
    domain = BoxDomain(_bounds(args.min, dim, 0.0, "--min"), _bounds(args.max, dim, 1.0, "--max"))
    penalty = _penalty(args.penalty, args.alpha, args.k, args.base)
    shape = _grid_shape(args.grid, dim)
    for i, m in enumerate(discrete):
        bad = validate(m, domain)
        if not bad:
            raise UsageError("; ".join(bad.violations), args.measures, f"measures[{i}]")
    if args.gamma <= 0:
        raise UsageError("gamma must be positive", field="--gamma")
    config = SolverConfig(
        max_iters=args.iters,
        step_rule=args.step_rule,
        step0=args.step0,
        tol=args.tol,
        seed=args.seed,
        init=args.init,
        threads=args.threads,
    )
    problem = BarycenterProblem(tuple(discrete), args.gamma, penalty, domain, shape)
    sol = solve(problem, config)
    out = Path(args.out)
    trace_path = out.with_name(out.stem + ".trace.csv")
    outputs = [
        write_measure(
            out,
            sol.density,
            converged=sol.converged,
            iterations=sol.iterations,
            objective=sol.objective,
            gamma=args.gamma,
            penalty={"kind": penalty.kind, "alpha": penalty.floor(domain), "k": penalty.k, "base": penalty.base},
        ),
        write_trace(trace_path, sol.objective_trace),
    ]
    params = {
        "gamma": args.gamma,
        "penalty.kind": penalty.kind,
        "penalty.alpha": penalty.floor(domain),
        "penalty.k": penalty.k,
        "penalty.base": penalty.base,
        "grid": list(shape),
        "iters": args.iters,
        "tol": args.tol,
        "step_rule": args.step_rule,
        "seed": args.seed,
    }
    if not sol.converged:
        _report_error("not_converged", f"no convergence within {args.iters} iterations", str(out), "converged")
        return 2, outputs, params
    return 0, outputs, params


def cmd_bregman(args) -> tuple[int, list[Path], dict]:
    f, g = read_measure(args.f), read_measure(args.g)
    for path, m in ((args.f, f), (args.g, g)):
        if not isinstance(m, GridDensity):
            raise UsageError("expected a grid density", path, "type")
    if f.shape != g.shape or f.domain != g.domain:
        raise UsageError("densities live on different grids", args.g, "shape")
    penalty = _penalty(args.penalty, args.alpha, args.k, args.base)
    out = {
        "penalty": penalty.kind,
        "sym": bregman_sym(penalty, f, g),
        "nonsym_fg": bregman_nonsym(penalty, f, g),
        "nonsym_gf": bregman_nonsym(penalty, g, f),
    }
    print(format_float(out["sym"]))
    outputs = [write_json(args.out, out)] if args.out else []
    return 0, outputs, {"penalty.kind": penalty.kind, "penalty.alpha": args.alpha, "penalty.k": args.k}


def cmd_sample(args) -> tuple[int, list[Path], dict]:
    nu = read_measure(args.measure)
    if not isinstance(nu, GridDensity):
        raise UsageError("expected a grid density", args.measure, "type")
    if args.p < 1:
        raise UsageError("p must be >= 1", field="--p")
    emp = sample_empirical(nu, args.p, args.seed)
    return 0, [write_measure(args.out, emp)], {"p": args.p, "seed": args.seed}


def cmd_validate(args) -> tuple[int, list[Path], dict]:
    m = read_measure(args.measure)
    domain = None
    if args.min is not None or args.max is not None:
        dim = m.dim if isinstance(m, DiscreteMeasure) else m.domain.dim
        domain = BoxDomain(_bounds(args.min, dim, 0.0, "--min"), _bounds(args.max, dim, 1.0, "--max"))
    res = validate(m, domain)
    if res.ok:
        print("ok")
        return 0, [], {}
    for v in res.violations:
        print(v)
    _report_error("invalid_measure", "; ".join(res.violations), str(args.measure), "measure")
    return 1, [], {}


_EXPERIMENT_KEYS = {
    "seed",
    "gamma",
    "gamma_list",
    "n",
    "n_list",
    "p_list",
    "replicates",
    "instances",
    "scales",
    "n_ref",
    "penalty.kind",
    "penalty.alpha",
    "penalty.k",
    "penalty.base",
    "solver.max_iters",
    "solver.tol",
    "solver.step_rule",
    "solver.step0",
    "model.dim",
    "model.shape",
    "model.center",
    "model.scale",
    "model.shift",
    "model.mix",
}


def experiment_from_config(name: str, cfg: dict, workers: int = 1, file=None):
    """Run one experiment from a flat (dotted-key) config dictionary."""
    unknown = sorted(set(cfg) - _EXPERIMENT_KEYS)
    if unknown:
        raise UsageError("unknown config key", file, unknown[0])
    seed = int(cfg.get("seed", 0))
    model = RandomMeasureModel(
        domain=BoxDomain.unit(int(cfg.get("model.dim", 1))),
        shape=int(cfg.get("model.shape", 128)),
        center=float(cfg.get("model.center", 0.5)),
        scale=float(cfg.get("model.scale", 0.12)),
        shift=float(cfg.get("model.shift", 0.1)),
        mix=float(cfg.get("model.mix", 0.05)),
        seed=seed,
    )
    default_kind = "sobolev" if name == "decompose" else "entropy"
    penalty = _penalty(
        cfg.get("penalty.kind", default_kind),
        cfg.get("penalty.alpha"),
        cfg.get("penalty.k", 1),
        cfg.get("penalty.base", "quadratic"),
        file,
    )
    try:
        config = SolverConfig(
            max_iters=int(cfg.get("solver.max_iters", 2000)),
            step_rule=cfg.get("solver.step_rule", "fixed"),
            step0=cfg.get("solver.step0"),
            tol=float(cfg.get("solver.tol", 1e-7)),
            seed=seed,
        )
    except ValueError as exc:
        raise UsageError(str(exc), file, "solver") from None
    gamma = float(cfg.get("gamma", 0.1))
    if name == "stability":
        return run_stability(
            model,
            gamma,
            penalty,
            config,
            n=int(cfg.get("n", 8)),
            instances=int(cfg.get("instances", 100)),
            scales=tuple(cfg.get("scales", (1e-3, 1e-2, 1e-1))),
            workers=workers,
        )
    if name == "rate-variance":
        return rate_variance(
            model,
            gamma,
            penalty,
            n_list=tuple(cfg.get("n_list", (4, 8, 16, 32, 64))),
            replicates=int(cfg.get("replicates", 50)),
            config=config,
            workers=workers,
        )
    if name == "rate-bias":
        return rate_bias(
            model,
            gamma_list=tuple(cfg.get("gamma_list", (1.0, 0.3, 0.1, 0.03, 0.01))),
            penalty=penalty,
            config=config,
            n_ref=int(cfg.get("n_ref", 640)),
            workers=workers,
        )
    if name == "decompose":
        return decompose_error(
            model,
            n=int(cfg.get("n", 16)),
            p_list=tuple(cfg.get("p_list", (25, 100, 400))),
            gamma=gamma,
            penalty=penalty,
            replicates=int(cfg.get("replicates", 50)),
            config=config,
            n_ref=cfg.get("n_ref"),
            workers=workers,
        )
    raise UsageError(f"unknown experiment {name!r}")


def cmd_experiment(args) -> tuple[int, list[Path], dict]:
    cfg = {}
    if args.config:
        raw = read_json(args.config)
        if not isinstance(raw, dict):
            raise UsageError("expected a JSON object", args.config, "")
        cfg = _flatten(raw)
    try:
        report = experiment_from_config(args.name, cfg, resolve_threads(args.threads), args.config)
    except (ValueError, TypeError) as exc:
        if isinstance(exc, (SchemaError, DomainError)):
            raise
        raise UsageError(str(exc), args.config, "config") from None
    out = Path(args.out)
    out.write_text(report.to_csv())
    for name, ok in report.checks.items():
        print(f"{'PASS' if ok else 'FAIL'} {name}")
    params = dict(sorted(cfg.items()))
    params["experiment"] = args.name
    return 0, [out], params


def cmd_replay(args) -> tuple[int, list[Path], dict]:
    manifest = read_json(args.manifest)
    for key in ("argv", "cwd", "outputs"):
        if key not in manifest:
            raise SchemaError("missing field", args.manifest, key)
    argv = list(manifest["argv"])
    cwd = os.getcwd()
    try:
        os.chdir(manifest["cwd"])
        code = main(argv)
        mismatched = []
        for rec in manifest["outputs"]:
            path = Path(rec["path"])
            if not path.exists() or sha256_file(path) != rec["sha256"]:
                mismatched.append(str(path))
    finally:
        os.chdir(cwd)
    if code != manifest.get("exit_code", 0):
        _report_error("replay_exit_code", f"exit code {code}, recorded {manifest.get('exit_code')}", str(args.manifest))
        return 2, [], {}
    if mismatched:
        _report_error("replay_mismatch", "output differs from the recorded hash", mismatched[0], "sha256")
        return 2, [], {}
    print("identical")
    return 0, [], {}


# ---------------------------------------------------------------- parser


def _penalty_flags(p):
    p.add_argument("--penalty", default="entropy", choices=KINDS)
    p.add_argument("--alpha", type=float, default=None, help="floor for entropy / Sobolev kinds")
    p.add_argument("--k", type=int, default=1, help="Sobolev order")
    p.add_argument("--base", default="quadratic", choices=("quadratic", "entropy"), help="Sobolev base penalty")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="wbary", description="Penalized Wasserstein barycenters.")
    parser.add_argument("--version", action="version", version=f"wbary {__version__}")
    parser.add_argument("--threads", type=int, default=None, help="cap on worker threads (default: WBARY_THREADS or all cores)")
    parser.add_argument("--manifest", default=None, help="manifest path (default: next to the main output)")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("w2", help="exact squared 2-Wasserstein distance")
    p.add_argument("--mu", required=True)
    p.add_argument("--nu", required=True)
    p.add_argument("--method", default="lp", choices=("lp", "quantile"))
    p.add_argument("--out")
    p.set_defaults(func=cmd_w2)

    p = sub.add_parser("barycenter", help="penalized barycenter on a grid")
    p.add_argument("--measures", required=True, help="directory of measure JSON files")
    p.add_argument("--gamma", type=float, required=True)
    _penalty_flags(p)
    p.add_argument("--grid", default="128", help="cells per axis, or a comma list")
    p.add_argument("--min", default=None, help="lower corner of the box (default 0)")
    p.add_argument("--max", default=None, help="upper corner of the box (default 1)")
    p.add_argument("--iters", type=int, default=2000)
    p.add_argument("--tol", type=float, default=1e-7)
    p.add_argument("--step-rule", default="fixed", choices=("fixed", "decaying"))
    p.add_argument("--step0", type=float, default=None)
    p.add_argument("--init", default="uniform", choices=("uniform", "random"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_barycenter)

    p = sub.add_parser("bregman", help="Bregman divergences between two grid densities")
    p.add_argument("--f", required=True)
    p.add_argument("--g", required=True)
    _penalty_flags(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bregman)

    p = sub.add_parser("experiment", help="Monte-Carlo experiment to a CSV report")
    p.add_argument("name", choices=EXPERIMENTS)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("sample", help="empirical measure drawn from a grid density")
    p.add_argument("--measure", required=True)
    p.add_argument("--p", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("validate", help="check measure invariants")
    p.add_argument("--measure", required=True)
    p.add_argument("--min", default=None)
    p.add_argument("--max", default=None)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("replay", help="re-run a manifest and compare output hashes")
    p.add_argument("--manifest", dest="replay_manifest", required=True)
    p.set_defaults(func=cmd_replay)
    return parser


def _write_manifest(args, argv, params, outputs, code, wall) -> Path | None:
    if not outputs:
        return None
    path = Path(args.manifest) if args.manifest else outputs[0].with_name(outputs[0].name + ".manifest.json")
    seed = getattr(args, "seed", params.get("seed"))
    manifest = {
        "argv": list(argv),
        "cwd": os.getcwd(),
        "command": args.command,
        "config_hash": config_hash(params),
        "seed": seed,
        "version": __version__,
        "wall_time": wall,
        "exit_code": code,
        "outputs": [{"path": str(p), "sha256": sha256_file(p)} for p in outputs],
    }
    return write_json(path, manifest)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    t0 = time.perf_counter()
    try:
        args = build_parser().parse_args(argv)
        if args.threads is not None and args.threads < 1:
            raise UsageError("--threads must be >= 1", field="--threads")
        if args.command == "replay":
            args.manifest = args.replay_manifest
            return cmd_replay(args)[0]
        if args.threads is not None:
            os.environ["WBARY_THREADS"] = str(args.threads)
        code, outputs, params = args.func(args)
        _write_manifest(args, argv, params, outputs, code, time.perf_counter() - t0)
        return code
    except UsageError as exc:
        _report_error("usage", str(exc), exc.file, exc.field)
        return 1
    except SchemaError as exc:
        _report_error("input", str(exc), exc.file, exc.field)
        return 1
    except DomainError as exc:
        _report_error("domain", str(exc))
        return 2
    except (RuntimeError, FloatingPointError, np.linalg.LinAlgError) as exc:
        _report_error("numerical", str(exc))
        return 2
    except ValueError as exc:
        _report_error("usage", str(exc))
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

"""Command-line entry point: ``dmpde <subcommand> --config cfg.json --out dir``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from contextlib import nullcontext
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import bench, gpdm, manifolds
from .errors import ConfigError, NumericalFailure

THREADS_ENV = "DMPDE_THREADS"
EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3


def _load_config(args) -> bench.ExperimentConfig:
    if not args.config:
        raise ConfigError("--config is required")
    cfg = bench.ExperimentConfig.load(args.config)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _out_dir(args, cfg=None) -> Path:
    out = args.out or (cfg.output_dir if cfg is not None else None)
    if not out:
        raise ConfigError("--out is required")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _print_json(blob) -> None:
    print(json.dumps(blob, indent=2, sort_keys=True))


def cmd_sample(args) -> None:
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    cloud = bench.sample(cfg)
    cfg.save(out / "config.json")
    manifolds.write_cloud_csv(cloud, out / "cloud.csv")
    print(f"{len(cloud)} points ({cloud.n_boundary} on the boundary) -> {out / 'cloud.csv'}")


def cmd_build_operator(args) -> None:
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    cloud = None
    if (out / "cloud.csv").exists():
        cloud = manifolds.read_cloud_csv(out / "cloud.csv")
    prob = bench.build_problem(cfg, cloud=cloud)
    bench._persist_problem(prob, out)
    fwd = bench.forward_error(prob.op, prob.u_exact, prob.f_rows, cfg.a, bench._row_points(prob))
    _print_json({"shape": list(prob.op.shape), "nnz": int(prob.op.matrix.nnz), "forward_error_inf": fwd})


def _solve(args, solver: str) -> None:
    cfg = _load_config(args)
    if cfg.solver != solver:
        cfg = cfg.replace(solver=solver)
    out = _out_dir(args, cfg)
    rep = bench.run(cfg, out)
    print(bench.format_table([rep]), end="")


def cmd_solve_direct(args) -> None:
    _solve(args, "direct")


def cmd_solve_nn(args) -> None:
    _solve(args, "nn")


def cmd_metrics(args) -> None:
    run_dir = args.run or args.out
    if not run_dir:
        raise ConfigError("metrics needs a run directory (--run or --out)")
    _print_json(bench.recompute_from_disk(run_dir))


def cmd_verify(args) -> None:
    run_dir = args.run or args.out
    if not run_dir:
        raise ConfigError("verify needs a run directory (--run or --out)")
    res = bench.verify(run_dir, args.tol)
    _print_json({"ok": res["ok"], "diffs": res["diffs"]})
    if not res["ok"]:
        raise NumericalFailure("recomputed metrics differ from the report", **res["diffs"])


def cmd_compare_activations(args) -> None:
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    N_list = [int(x) for x in args.N.split(",")] if args.N else None
    variants = args.variants.split(",") if args.variants else None
    table = bench.compare_activations(cfg, N_list, gd_lr=args.gd_lr, out_dir=out, variants=variants)
    print(bench.format_activation_table(table), end="")


def cmd_report(args) -> None:
    dirs = list(args.runs)
    if not dirs and args.out:
        dirs = sorted(p.parent for p in Path(args.out).glob("*/report.json"))
    if not dirs:
        raise ConfigError("no run directories given")
    print(bench.report(dirs), end="")


COMMANDS = {
    "sample": (cmd_sample, "sample the training point cloud"),
    "build-operator": (cmd_build_operator, "assemble the DM or GPDM estimator"),
    "solve-direct": (cmd_solve_direct, "regularised least-squares solve"),
    "solve-nn": (cmd_solve_nn, "train the network solver (all seeds)"),
    "metrics": (cmd_metrics, "recompute error metrics from a run directory"),
    "compare-activations": (cmd_compare_activations, "activation/optimiser comparison on Flat3DinR12"),
    "verify": (cmd_verify, "check a report against metrics recomputed from disk"),
    "report": (cmd_report, "tables from finished run directories"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config (JSON)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--threads", type=int,
                        help=f"BLAS thread count (default: ${THREADS_ENV}, else library default)")
    p = argparse.ArgumentParser(prog="dmpde", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        sp = sub.add_parser(name, parents=[common], help=help_text)
        if name in ("metrics", "verify"):
            sp.add_argument("--run", help="run directory (defaults to --out)")
        if name == "verify":
            sp.add_argument("--tol", type=float, default=1e-12)
        if name == "compare-activations":
            sp.add_argument("--N", help="comma-separated N list (default: the config N)")
            sp.add_argument("--gd-lr", type=float, help="learning rate for the GD variants")
            sp.add_argument("--variants", help="comma-separated subset, e.g. 'PolynomialSine,ReLU^3'")
        if name == "report":
            sp.add_argument("runs", nargs="*", help="run directories (default: */ under --out)")
    return p


def thread_count(flag) -> int | None:
    if flag is not None:
        return flag
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
    return None


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handler = COMMANDS[args.command][0]
    try:
        threads = thread_count(args.threads)
        if threads is not None and threads < 1:
            raise ConfigError("--threads must be >= 1")
        with threadpool_limits(limits=threads) if threads else nullcontext():
            handler(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ground-truth, train, compare, verify."""
from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from .experiment import (
    ENVIRONMENTS,
    LEARNERS,
    TASKS,
    ConfigError,
    ExperimentConfig,
    _parse_seeds,
    build_task,
    load_config_file,
    read_curve_csv,
    run_experiment,
)
from .gvf import RankDeficientError, SingularOperatorError, block_mu_norm
from .verify import verify_all

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG = 0, 1, 2

# flag name -> ExperimentConfig field
_CONFIG_FLAGS = {
    "env": "env",
    "task": "task",
    "features": "features",
    "learner": "learner",
    "iters": "iterations",
    "seeds": "seeds",
    "lr_theta": "lr_theta",
    "lr_ratio": "lr_ratio",
    "theta_offset": "theta_offset",
    "ratio_offset": "ratio_offset",
    "eval_every": "eval_every",
    "discount": "discount",
    "ratio_features": "ratio_features",
    "oracle_ratio": "oracle_ratio",
    "clip_ratio": "clip_ratio",
    "ratio_l2": "ratio_l2",
    "drop_column": "drop_column",
    "workers": "workers",
    "out": "out",
    "name": "name",
}


def _add_problem_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value file with an [experiment] section")
    p.add_argument("--env", choices=ENVIRONMENTS)
    p.add_argument("--task", choices=TASKS)
    p.add_argument("--features", choices=("cft", "incft"))
    p.add_argument("--discount", type=float)
    p.add_argument("--drop-column", type=int)


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--learner", choices=LEARNERS)
    p.add_argument("--iters", type=int)
    p.add_argument("--seeds", type=_parse_seeds, help="count (20), list (1,4,7) or range (0-9)")
    p.add_argument("--lr-theta", type=float)
    p.add_argument("--lr-ratio", type=float, help="ratio step (GenTD) or auxiliary step (GTD)")
    p.add_argument("--theta-offset", type=float, help="use base*offset/(t+offset) instead of a constant step")
    p.add_argument("--ratio-offset", type=float)
    p.add_argument("--eval-every", type=int)
    p.add_argument("--ratio-features", choices=("complete", "match"))
    p.add_argument("--oracle-ratio", action="store_true", default=None)
    p.add_argument("--clip-ratio", action="store_true", default=None)
    p.add_argument("--ratio-l2", type=float)
    p.add_argument("--workers", type=int)
    p.add_argument("--name")
    p.add_argument("--out")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gentd", description="General value function learning experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    gt = sub.add_parser("ground-truth", help="solve a task exactly and print the GVF")
    _add_problem_flags(gt)
    gt.add_argument("--out", help="write the stacked ground truth to this CSV file")

    tr = sub.add_parser("train", help="run a learner over seeds and write learning-curve CSVs")
    _add_problem_flags(tr)
    _add_train_flags(tr)

    cmp_ = sub.add_parser("compare", help="summarize learning-curve CSVs side by side")
    cmp_.add_argument("csv", nargs="+")
    cmp_.add_argument("--metric", default="estimation_error", choices=("estimation_error", "mspgbe", "ratio_error"))

    ver = sub.add_parser("verify", help="run the numerical self-checks")
    ver.add_argument("--specs", type=int, default=20, help="random systems per check")
    ver.add_argument("--seed", type=int, default=0)
    ver.add_argument("--json", help="also write the report as JSON to this path")
    return parser


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    """File values first, then any flag given on the command line."""
    values = load_config_file(args.config) if getattr(args, "config", None) else {}
    for flag, fieldname in _CONFIG_FLAGS.items():
        v = getattr(args, flag, None)
        if v is not None:
            values[fieldname] = v
    try:
        return ExperimentConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def _cmd_ground_truth(args) -> int:
    cfg = config_from_args(args)
    setup = build_task(cfg)
    g = setup.ground_truth
    spec = setup.case.spec
    n = spec.num_pairs
    print(f"{cfg.env}/{cfg.task}: {spec.k} block(s), dims {spec.dims}, discounts {spec.discounts}")
    for i, part in enumerate(setup.op.split(g)):
        nrm = float(block_mu_norm(part, setup.mu.mu, spec.dims[i]))
        print(f"block {i}: mu-norm {nrm:.6f}")
        print(np.array2string(part.reshape(n, spec.dims[i]), precision=6, max_line_width=120))
    if args.out:
        path = Path(args.out)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("block", "pair", "coordinate", "value"))
            for i, part in enumerate(setup.op.split(g)):
                for p, row in enumerate(part.reshape(n, spec.dims[i])):
                    for c, val in enumerate(row):
                        w.writerow((i, p, c, repr(float(val))))
        print(f"wrote {path}")
    return EXIT_OK


def _cmd_train(args) -> int:
    cfg = config_from_args(args)
    run = run_experiment(cfg)
    curve = run.mean_curve()
    est = curve["estimation_error"]
    print(f"{cfg.label}: {len(cfg.seeds)} seeds, {cfg.iterations} iterations, {run.wall_clock:.1f}s")
    print(f"estimation error {est[0]:.6g} -> {est[-1]:.6g}; mspgbe {curve['mspgbe'][-1]:.6g}")
    if "ratio_error" in curve:
        print(f"ratio error (sup norm) {curve['ratio_error'][-1]:.6g}")
    for kind, path in run.paths.items():
        print(f"wrote {path}")
    return EXIT_OK


def _cmd_compare(args) -> int:
    rows = []
    for path in args.csv:
        data = read_curve_csv(path)
        mask = data["seed"] == "mean"
        if not mask.any():
            # per-seed file: average it here
            its = np.unique(data["iteration"])
            vals = np.array([np.mean(data[args.metric][data["iteration"] == it]) for it in its])
        else:
            its, vals = data["iteration"][mask], data[args.metric][mask]
        rows.append((Path(path).name, int(its[-1]), vals[0], vals[-1], np.nanmin(vals)))
    width = max(len(r[0]) for r in rows)
    print(f"{'curve':<{width}}  {'iters':>8}  {'initial':>12}  {'final':>12}  {'best':>12}")
    for name, it, first, last, best in rows:
        print(f"{name:<{width}}  {it:>8d}  {first:>12.6g}  {last:>12.6g}  {best:>12.6g}")
    if len(rows) > 1:
        best_name = min(rows, key=lambda r: r[3])[0]
        print(f"lowest final {args.metric}: {best_name}")
    return EXIT_OK


def _cmd_verify(args) -> int:
    report = verify_all(num_specs=args.specs, seed=args.seed)
    print(report.to_text())
    if args.json:
        Path(args.json).write_text(report.to_json())
    return EXIT_OK if report.passed else EXIT_VERIFY


_COMMANDS = {
    "ground-truth": _cmd_ground_truth,
    "train": _cmd_train,
    "compare": _cmd_compare,
    "verify": _cmd_verify,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, FileNotFoundError, RankDeficientError, SingularOperatorError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

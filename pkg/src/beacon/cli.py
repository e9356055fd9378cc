"""Command-line entry point.

Exit codes: 0 success, 1 usage or config error, 2 numerical failure.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .sim import SimulationError
from .twin import TwinError, _replace, initial_state, run_experiment

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="flat key = value config file")
    common.add_argument("--seed", type=int, metavar="U64", help="overrides the config seed")
    common.add_argument("--out", metavar="DIR", help="output directory (overrides out_dir)")
    common.add_argument("--deterministic", action="store_true", help="single-threaded BLAS for bit-reproducible runs")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="beacon", description="Sequential well placement with a conditional flow digital twin.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, text in (("twin", "run the BEACON loop"), ("baseline", "run the random-well baseline")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--checkpoint", metavar="PATH", help="write a checkpoint after every iteration")
        p.add_argument("--resume", metavar="PATH", help="continue from a checkpoint")
    p = sub.add_parser("compare", parents=[common], help="paired seeds, both methods")
    p.add_argument("--n-seeds", type=int, default=10, help="seeds seed, seed+1, ... (default 10)")
    sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient audit")
    p = sub.add_parser("oracle", parents=[common], help="linear-Gaussian validation suite")
    p.add_argument("--runs", type=int, default=10, help="seeded runs of the design-ordering check")
    return parser


def load_run_config(args):
    cfg = io.parse_config(args.config) if args.config else io.parse_config_text("")
    if args.seed is not None:
        if args.seed < 0 or args.seed >= 2 ** 64:
            raise io.ConfigError("seed must be an unsigned 64-bit integer")
        cfg.twin = _replace(cfg.twin, seed=args.seed)
    if args.out:
        cfg.out_dir = args.out
    if args.deterministic:
        cfg.deterministic = True
    return cfg


def _blas_limit(deterministic):
    if not deterministic:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=1)


def _run_single(cfg, method, checkpoint=None, resume=None):
    twin = cfg.twin
    state = None
    if resume:
        state = io.state_from_checkpoint(io.load_checkpoint(resume), twin)

    def on_iteration(s):
        if checkpoint:
            io.save_checkpoint(io.checkpoint_from_state(s), checkpoint)
        last = s.history[-1]
        print(f"[{method} seed={twin.seed}] k={last.k} well={last.drilled_column} "
              f"rmse={last.rmse:.5f} std={last.mean_posterior_std:.5f}")

    report = run_experiment(twin, method, state or initial_state(twin), on_iteration)
    out = io.emit_report(report, cfg.out_dir, cfg)
    print(f"wrote {out / 'metrics.csv'}")
    return report


def cmd_run(args, cfg, method):
    _run_single(cfg, method, args.checkpoint, args.resume)
    return EXIT_OK


def cmd_compare(args, cfg):
    if args.n_seeds < 1:
        raise UsageError("--n-seeds must be >= 1")
    base = Path(cfg.out_dir)
    finals = {"beacon": [], "random": []}
    rows = []
    for seed in range(cfg.twin.seed, cfg.twin.seed + args.n_seeds):
        for method in ("beacon", "random"):
            run_cfg = io.RunConfig(_replace(cfg.twin, seed=seed), str(base / f"{method}_seed{seed}"),
                                   cfg.deterministic, cfg.label)
            report = _run_single(run_cfg, method)
            rows.extend(io.metrics_rows(report))
            finals[method].append(report.rows[-1].rmse)
    base.mkdir(parents=True, exist_ok=True)
    with open(base / "compare.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(io.METRICS_HEADER)
        writer.writerows(rows)
    summary = {m: {"median_final_rmse": float(np.median(v)), "final_rmse": v} for m, v in finals.items()}
    (base / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(f"median final rmse: beacon {summary['beacon']['median_final_rmse']:.5f}, "
          f"random {summary['random']['median_final_rmse']:.5f}")
    return EXIT_OK


def cmd_gradcheck(args, cfg):
    from .audit import gradient_audit

    checks = gradient_audit(cfg.twin.seed)
    for c in checks:
        print(c.line())
    return EXIT_OK if all(c.passed for c in checks) else EXIT_NUMERIC


def cmd_oracle(args, cfg):
    from .audit import eig_ordering_run, posterior_oracle

    seed = cfg.twin.seed
    ok = True
    post = posterior_oracle(seed)
    for name, err, tol in (("posterior mean", post.mean_rel_error, 0.10), ("posterior std", post.std_rel_error, 0.15)):
        passed = err < tol
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'} {name}: relative error {err:.4f} (tol {tol})")
    hits = 0
    for s in range(seed, seed + args.runs):
        r = eig_ordering_run(s)
        hits += r.ranked_first
        print(f"  seed {s}: eig {r.eig[0]:.3f}/{r.eig[1]:.3f} density {r.density[0]:.3f}/{r.density[1]:.3f}")
    need = int(np.ceil(0.8 * args.runs))
    ok &= hits >= need
    print(f"{'PASS' if hits >= need else 'FAIL'} design ordering: {hits}/{args.runs} (need {need})")
    return EXIT_OK if ok else EXIT_NUMERIC


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = load_run_config(args)
    except io.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        with _blas_limit(cfg.deterministic):
            if args.command == "twin":
                return cmd_run(args, cfg, "beacon")
            if args.command == "baseline":
                return cmd_run(args, cfg, "random")
            if args.command == "compare":
                return cmd_compare(args, cfg)
            if args.command == "gradcheck":
                return cmd_gradcheck(args, cfg)
            return cmd_oracle(args, cfg)
    except (UsageError, io.FormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FloatingPointError, TwinError, SimulationError, ArithmeticError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

"""Command-line interface: ``diffsampler {train,eval,sample,reference,selftest}``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
import traceback
from pathlib import Path

from .errors import ConfigError, DiffSamplerError


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _step_list(text):
    try:
        steps = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not steps or min(steps) < 1:
        raise argparse.ArgumentTypeError("step counts must be positive")
    return steps


def build_parser():
    p = _Parser(prog="diffsampler", description="Time-reversed diffusion sampler.")
    p.add_argument("--threads", type=int, default=None, help="cap on compute threads")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    t = sub.add_parser("train", help="train a control network")
    t.add_argument("--config", help="flat key = value config file")
    t.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    t.add_argument("--seed", type=int, help="overrides the config seed")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--log", help="CSV training log")
    t.add_argument("--small", action="store_true", help="width-32 network profile for quick runs")
    t.add_argument("--quiet", action="store_true")

    e = sub.add_parser("eval", help="estimate log Z and moments from a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--target", help="must match the checkpoint's target")
    e.add_argument("--steps", type=_step_list, default=[100, 200, 400, 800])
    e.add_argument("--samples", type=int, default=6000)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", required=True)
    e.add_argument("--dump-samples")

    s = sub.add_parser("sample", help="draw terminal samples from a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--steps", type=int, help="Euler-Maruyama steps (default: the final training N)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", help="CSV path (default: standard output)")

    r = sub.add_parser("reference", help="reference statistics of a target")
    r.add_argument("--target", required=True)
    r.add_argument("--out", help="CSV path (default: standard output)")

    sub.add_parser("selftest", help="run the fast invariant checks")
    return p


def set_threads(k):
    """Cap XLA and BLAS worker threads; effective only before the first computation."""
    if k is None:
        return
    if k < 1:
        raise UsageError("--threads must be positive")
    flags = os.environ.get("XLA_FLAGS", "")
    os.environ["XLA_FLAGS"] = (f"{flags} --xla_cpu_multi_thread_eigen={'true' if k > 1 else 'false'} "
                               f"intra_op_parallelism_threads={k}").strip()
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(k)


def _cmd_train(args):
    from .checkpoint import save_checkpoint
    from .config import parse_config
    from .train import train

    overrides = (["width=32"] if args.small else []) + list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    cfg = parse_config(args.config, overrides)
    if not args.quiet:
        for k, v in cfg.to_items():
            print(f"config {k} = {v}", file=sys.stderr)
    ckpt = train(cfg, log_path=args.log, progress=not args.quiet)
    save_checkpoint(ckpt, args.out)


def _cmd_eval(args):
    from .checkpoint import load_checkpoint
    from .evaluation import evaluate
    from .targets import parse_target

    ckpt = load_checkpoint(args.ckpt)
    target = parse_target(args.target) if args.target else None
    if args.samples < 2:
        raise UsageError("--samples must be at least 2")
    for r in evaluate(ckpt, target, args.steps, args.samples, args.seed, out=args.out,
                      dump_samples=args.dump_samples):
        print(f"N={r.n_steps} logz_bound {r.logz_bound:.5f} logz_is {r.logz_is:.5f} "
              f"+- {r.logz_is_stderr:.5f} ESS {r.ess:.1f}", file=sys.stderr)


def _open_out(path):
    return open(path, "w", newline="") if path else sys.stdout


def _cmd_sample(args):
    from .checkpoint import load_checkpoint
    from .evaluation import sample

    if args.n < 1:
        raise UsageError("--n must be positive")
    ckpt = load_checkpoint(args.ckpt)
    N = args.steps or ckpt.config.steps_schedule[-1][0]
    x = sample(ckpt.policy(), args.n, N, args.seed)
    fh = _open_out(args.out)
    try:
        w = csv.writer(fh)
        for row in x:
            w.writerow([f"{v:.17g}" for v in row])
    finally:
        if fh is not sys.stdout:
            fh.close()


def _cmd_reference(args):
    from .targets import parse_target

    ref = parse_target(args.target).reference_stats()
    rows = [("log_Z", ref.log_Z), ("expected_sq_norm", ref.expected_sq_norm),
            ("expected_l1_norm", ref.expected_l1_norm), ("avg_std", ref.avg_std)]
    rows += [(f"std_{i}", s) for i, s in enumerate(ref.per_dim_std)]
    fh = _open_out(args.out)
    try:
        w = csv.writer(fh)
        w.writerow(["stat", "value", "provenance"])
        for name, v in rows:
            w.writerow([name, f"{v:.17g}", ref.provenance])
    finally:
        if fh is not sys.stdout:
            fh.close()


def _cmd_selftest(args):
    from .selftest import run as run_checks

    if not run_checks():
        raise DiffSamplerError("one or more self-test checks failed")


COMMANDS = {"train": _cmd_train, "eval": _cmd_eval, "sample": _cmd_sample,
            "reference": _cmd_reference, "selftest": _cmd_selftest}


def _failing_module(exc):
    """Name of the innermost package module in the exception's traceback."""
    pkg = Path(__file__).parent
    name = "cli"
    for frame, _ in traceback.walk_tb(exc.__traceback__):
        path = Path(frame.f_code.co_filename)
        if path.parent == pkg:
            name = path.stem
    return name


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return 1
        set_threads(args.threads)
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"diffsampler {_failing_module(exc)}: configuration error: {exc}", file=sys.stderr)
        return 1
    except (DiffSamplerError, OSError, ValueError) as exc:
        print(f"diffsampler {_failing_module(exc)}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


def main():
    sys.exit(run())

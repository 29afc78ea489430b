"""Command-line entry point: ``rdwgd {sweep,deconv,oracle,convert}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
failure (partial outputs are still written).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import datasets
from .errors import ConfigError, DataError, NumericError, RDError
from .sweep import (METHODS, ORACLE_SOURCES, UNITS, SweepConfig, default_deconv_schedule, failure_exit_code,
                    run_deconv_benchmark, run_gap_study, run_oracle, run_sweep, write_deconv_trace_csv,
                    write_gap_csv, write_oracle_csv, write_sweep_outputs)
from .wgd import SCHEDULE_KINDS, StepSchedule

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
THREADS_ENV = "RDWGD_THREADS"

log = logging.getLogger("rdwgd")


def _floats(text):
    try:
        return [float(t) for t in str(text).split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text):
    try:
        return [int(t) for t in str(text).split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _words(text):
    return [t.strip() for t in str(text).split(",") if t.strip()]


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def _add_schedule(p, kind="inverse_decay", gamma0=None, decay=None):
    p.add_argument("--schedule", choices=SCHEDULE_KINDS, default=kind)
    p.add_argument("--gamma0", type=float, default=gamma0, help="initial step size")
    p.add_argument("--decay", type=float, default=decay, help="inverse-decay rate")


def build_parser() -> argparse.ArgumentParser:
    top = _Parser(prog="rdwgd", description="Rate-distortion upper bounds by particle methods.")
    top.add_argument("-v", "--verbose", action="store_true")
    sub = top.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("sweep", help="estimate R-D points over a lambda grid on a dataset")
    s.add_argument("--config", help="JSON file whose keys match flag names")
    s.add_argument("--data", help="sample file (csv or rdsamp1)")
    s.add_argument("--format", choices=datasets.FORMATS)
    s.add_argument("--method", choices=METHODS, default="wgd")
    s.add_argument("--lambdas", type=_floats, default=[10.0])
    s.add_argument("--n", type=int, default=20, help="particle count")
    s.add_argument("--iters", type=int, default=500)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--distortion", default="half_squared",
                   choices=["half_squared", "squared", "hamming"])
    s.add_argument("--units", choices=UNITS, default="nats")
    s.add_argument("--warm-start", action="store_true")
    s.add_argument("--ba-every", type=int, default=1)
    s.add_argument("--eval-size", type=int, default=10_000)
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--out", default="rd.csv")
    s.add_argument("--trace-dir")
    s.add_argument("--timing", action="store_true", help="record wall-clock time (output no longer reproducible)")
    _add_schedule(s, "adaptive_moment", 0.01, 0.0)

    d = sub.add_parser("deconv", help="deconvolution benchmark on the blurred circle or sphere")
    d.add_argument("--config")
    d.add_argument("--sigma2", type=float, default=0.1)
    d.add_argument("--lam", type=float, default=10.0)
    d.add_argument("--n", type=int, default=20)
    d.add_argument("--m", type=int, default=100_000)
    d.add_argument("--dim", type=int, default=2)
    d.add_argument("--iters", type=int, default=300)
    d.add_argument("--ba-iters", type=int, default=2000)
    d.add_argument("--methods", type=_words, default=["ba", "wgd", "hybrid"])
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--opt-m-eval", type=int, default=10_000)
    d.add_argument("--opt-n-eval", type=int, default=1_000_000)
    d.add_argument("--out-trace", default="deconv_trace.csv")
    d.add_argument("--gap-ns", type=_ints, help="run the particle-count study over these n")
    d.add_argument("--gap-dims", type=_ints, default=[2, 4])
    d.add_argument("--gap-seeds", type=int, default=5)
    d.add_argument("--gap-m", type=int, default=10_000)
    d.add_argument("--out-gap", default="deconv_gap.csv")
    _add_schedule(d)

    o = sub.add_parser("oracle", help="analytic R-D points for reference sources")
    o.add_argument("--config")
    o.add_argument("--source", choices=ORACLE_SOURCES, required=False, default="gaussian")
    o.add_argument("--sigma2", type=float, default=1.0)
    o.add_argument("--p", type=float, default=0.5)
    o.add_argument("--lambdas", type=_floats)
    o.add_argument("--distortions", type=_floats)
    o.add_argument("--units", choices=UNITS, default="nats")
    o.add_argument("--out", default="-")

    c = sub.add_parser("convert", help="convert between csv and rdsamp1")
    c.add_argument("src")
    c.add_argument("dst")
    c.add_argument("--from", dest="src_format", choices=datasets.FORMATS)
    c.add_argument("--to", dest="dst_format", choices=datasets.FORMATS)
    return top


def _apply_config(parser: argparse.ArgumentParser, argv):
    """Parse, then reparse with JSON config values as defaults so explicit flags win."""
    args = parser.parse_args(argv)
    path = getattr(args, "config", None)
    if not path:
        return args
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be an object")
    sub = parser._subparsers._group_actions[0].choices[args.command]
    actions = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, val in cfg.items():
        dest = key.replace("-", "_")
        if dest not in actions or dest in ("help", "config"):
            raise ConfigError(f"{path}: unknown key {key!r}")
        act = actions[dest]
        if isinstance(val, str) and act.type is not None:
            try:
                val = act.type(val)
            except (argparse.ArgumentTypeError, ValueError) as exc:
                raise ConfigError(f"{path}: key {key!r}: {exc}") from None
        elif isinstance(val, (int, float)) and act.type in (_floats, _ints):
            val = [val]
        if act.choices is not None and val not in act.choices:
            raise ConfigError(f"{path}: key {key!r} must be one of {sorted(act.choices)}")
        defaults[dest] = val
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def worker_cap(requested: int) -> int:
    raw = os.environ.get(THREADS_ENV)
    if raw is None or raw == "":
        return requested
    try:
        cap = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if cap < 1:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return min(requested, cap)


def _schedule(args, fallback: StepSchedule = None) -> StepSchedule:
    base = fallback or StepSchedule(args.schedule)
    return StepSchedule(args.schedule,
                        gamma0=base.gamma0 if args.gamma0 is None else args.gamma0,
                        decay=base.decay if args.decay is None else args.decay)


def cmd_sweep(args) -> int:
    if not args.data:
        raise ConfigError("sweep needs --data")
    data = datasets.read_dataset(args.data, args.format)
    cfg = SweepConfig(method=args.method, lambdas=list(args.lambdas), n=args.n, iters=args.iters,
                      batch_size=args.batch_size, schedule=_schedule(args), seed=args.seed,
                      distortion=args.distortion, units=args.units, warm_start=args.warm_start,
                      ba_every=args.ba_every, eval_size=args.eval_size, workers=worker_cap(args.workers))
    result = run_sweep(cfg, data)
    write_sweep_outputs(result, cfg, args.out, args.trace_dir, timing=args.timing)
    print(result.summary(), file=sys.stderr)
    return failure_exit_code(result)


def cmd_deconv(args) -> int:
    lam = args.lam
    sched = _schedule(args, default_deconv_schedule(lam))
    report = run_deconv_benchmark(sigma2=args.sigma2, lam=lam, n=args.n, m=args.m, iters=args.iters,
                                  methods=tuple(args.methods), seed=args.seed, dim=args.dim, schedule=sched,
                                  ba_iters=args.ba_iters, opt_m_eval=args.opt_m_eval,
                                  opt_n_eval=args.opt_n_eval)
    write_deconv_trace_csv(report, args.out_trace)
    print(report.gap_table())
    if args.gap_ns:
        rows = run_gap_study(dims=tuple(args.gap_dims), ns=tuple(args.gap_ns), seeds=tuple(range(args.gap_seeds)),
                             sigma2=args.sigma2, lam=lam, m=args.gap_m, iters=args.iters, schedule=sched)
        write_gap_csv(rows, args.out_gap)
        for r in rows:
            print(f"dim={r.dim} n={r.n} seed={r.seed} gap={r.gap:+.5f}")
    return EXIT_OK


def cmd_oracle(args) -> int:
    rows, notes = run_oracle(args.source, lambdas=args.lambdas, distortions=args.distortions,
                             sigma2=args.sigma2, p=args.p)
    for note in notes:
        print(f"note: {note}", file=sys.stderr)
    write_oracle_csv(rows, args.out, args.units)
    return EXIT_OK


def cmd_convert(args) -> int:
    rows = datasets.convert(args.src, args.dst, args.src_format, args.dst_format)
    print(f"wrote {rows} rows to {args.dst}", file=sys.stderr)
    return EXIT_OK


COMMANDS = {"sweep": cmd_sweep, "deconv": cmd_deconv, "oracle": cmd_oracle, "convert": cmd_convert}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except RDError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

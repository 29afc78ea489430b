"""Lambda sweeps, the deconvolution benchmark and analytic oracle curves.

Everything here returns plain Python records; the command-line layer only
parses arguments and writes files.
"""
from __future__ import annotations

import csv
import io
import logging
import math
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .ba import ba_solve
from .distortion import DistortionSpec
from .errors import ConfigError, DataError, NumericError, RDError
from .measures import DiscreteMeasure, RngSeed
from .ratefn import RDPoint, rd_point_from_nu
from .sources import (ConvolvedSourceSpec, UniformSphere, binary_rd_oracle, gaussian_rd_oracle, opt_loss_mc,
                      rd_segment, sample_convolved)
from .wgd import StepSchedule, WgdRun, initial_nu, hybrid_run, wgd_run

log = logging.getLogger(__name__)

METHODS = ("ba", "wgd", "hybrid", "wgd_eot")
UNITS = ("nats", "bits")
RD_HEADER = ["lambda", "distortion", "rate", "loss", "n_atoms", "method", "iterations", "wall_ms", "units"]
CEILING_MARGIN = 0.05


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return "%.17g" % float(x)


@dataclass
class SweepConfig:
    method: str = "wgd"
    lambdas: Sequence[float] = (10.0,)
    n: int = 20
    iters: int = 500
    batch_size: Optional[int] = None
    schedule: StepSchedule = field(default_factory=StepSchedule)
    seed: int = 0
    distortion: str = "half_squared"
    units: str = "nats"
    warm_start: bool = False
    ba_every: int = 1
    eval_size: Optional[int] = 10_000
    workers: int = 1

    def validate(self) -> "SweepConfig":
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if len(self.lambdas) == 0:
            raise ConfigError("empty lambda grid")
        for lam in self.lambdas:
            if not (math.isfinite(lam) and lam > 0):
                raise ConfigError(f"lambdas must be positive and finite, got {lam}")
        if int(self.n) < 1:
            raise ConfigError("n must be at least 1")
        if int(self.iters) < 1:
            raise ConfigError("iters must be at least 1")
        if self.units not in UNITS:
            raise ConfigError(f"units must be one of {UNITS}")
        if self.method == "hybrid" and self.batch_size is not None:
            raise ConfigError("method=hybrid is full-batch only; drop batch_size")
        if self.batch_size is not None and int(self.batch_size) < 1:
            raise ConfigError("batch_size must be at least 1")
        if int(self.workers) < 1:
            raise ConfigError("workers must be at least 1")
        DistortionSpec.named(self.distortion)
        return self

    @property
    def sorted_lambdas(self):
        return sorted({float(x) for x in self.lambdas}, reverse=True)


@dataclass
class LambdaOutcome:
    lam: float
    point: Optional[RDPoint] = None
    run: Optional[WgdRun] = None
    ba_trace: Optional[list] = None
    final_nu: Optional[DiscreteMeasure] = None
    error: Optional[str] = None
    error_type: Optional[type] = None


@dataclass
class SweepResult:
    outcomes: list
    warnings: list

    @property
    def points(self):
        return [o.point for o in self.outcomes if o.point is not None]

    @property
    def failures(self):
        return [o for o in self.outcomes if o.error is not None]

    def summary(self) -> str:
        lines = [f"{len(self.points)} point(s), {len(self.failures)} failure(s)"]
        lines += [f"warning: {w}" for w in self.warnings]
        lines += [f"failed lambda={o.lam!r}: {o.error}" for o in self.failures]
        return "\n".join(lines)


def _ba_support(data: DiscreteMeasure, n: int, rng) -> DiscreteMeasure:
    # A source with at most n distinct points gets all of them as atoms.
    uniq = np.unique(data.points, axis=0)
    if uniq.shape[0] <= n:
        return DiscreteMeasure(uniq)
    return initial_nu(data, n, rng, None)


def solve_lambda(cfg: SweepConfig, data: DiscreteMeasure, lam: float, seed: RngSeed,
                 nu0: Optional[DiscreteMeasure] = None) -> LambdaOutcome:
    """Run one method at one lambda and certify the result as an RDPoint."""
    spec = DistortionSpec.named(cfg.distortion)
    out = LambdaOutcome(lam=lam)
    t0 = time.perf_counter()
    if cfg.method == "ba":
        start = nu0 if nu0 is not None else _ba_support(data, int(cfg.n), seed.derive(0).generator())
        res = ba_solve(data, start, spec, lam, max_iters=int(cfg.iters))
        nu, iters, out.ba_trace = res.nu, res.iterations, res.trace
    elif cfg.method == "hybrid":
        out.run = hybrid_run(data, spec, lam, int(cfg.n), cfg.schedule, int(cfg.iters), seed,
                             ba_every=int(cfg.ba_every), eval_size=cfg.eval_size, nu0=nu0)
        nu, iters = out.run.final_nu, out.run.iterations
    else:
        out.run = wgd_run(data, spec, lam, int(cfg.n), cfg.schedule, int(cfg.iters), seed,
                          loss="eot" if cfg.method == "wgd_eot" else "ba", batch_size=cfg.batch_size,
                          eval_size=cfg.eval_size, nu0=nu0)
        nu, iters = out.run.final_nu, out.run.iterations
    wall = 1000 * (time.perf_counter() - t0)
    out.final_nu = nu
    out.point = rd_point_from_nu(data, nu, spec, lam, method=cfg.method, iterations=iters, wall_ms=wall)
    return out


def _guarded(fn, lam, *args):
    try:
        return fn(*args)
    except RDError as exc:
        log.warning("lambda=%r failed: %s", lam, exc)
        return LambdaOutcome(lam=lam, error=str(exc), error_type=type(exc))


def run_sweep(config: SweepConfig, data: DiscreteMeasure) -> SweepResult:
    """Estimate one RDPoint per lambda.

    Each lambda gets its own seed stream (its rank in the descending grid),
    so results do not depend on ``workers``. Failures are recorded and the
    sweep continues. With ``warm_start`` lambdas run in descending order and
    each starts from the previous solution, which forces sequential execution.
    """
    cfg = config.validate()
    lams = cfg.sorted_lambdas
    master = RngSeed(int(cfg.seed))
    seeds = [master.derive(k) for k in range(len(lams))]

    if cfg.warm_start:
        outcomes, prev = [], None
        for lam, s in zip(lams, seeds):
            o = _guarded(solve_lambda, lam, cfg, data, lam, s, prev)
            outcomes.append(o)
            if o.final_nu is not None:
                prev = o.final_nu
    elif int(cfg.workers) > 1 and len(lams) > 1:
        with ThreadPoolExecutor(max_workers=min(int(cfg.workers), len(lams))) as pool:
            futs = [pool.submit(_guarded, solve_lambda, lam, cfg, data, lam, s) for lam, s in zip(lams, seeds)]
            outcomes = [f.result() for f in futs]
    else:
        outcomes = [_guarded(solve_lambda, lam, cfg, data, lam, s) for lam, s in zip(lams, seeds)]

    warnings = []
    for o in outcomes:
        if o.point is not None and o.point.near_ceiling(CEILING_MARGIN):
            warnings.append(f"lambda={o.lam!r}: rate {o.point.rate:.6g} nats is within {CEILING_MARGIN} of "
                            f"ln(n)={math.log(o.point.n_atoms):.6g}; the estimate is capped by the particle count")
    return SweepResult(outcomes=outcomes, warnings=warnings)


def rd_rows(points: Sequence[RDPoint], units: str = "nats", timing: bool = False):
    """Rows for the R-D CSV, sorted by method then descending lambda.

    In bits, rate and loss are divided by ln 2. ``wall_ms`` is written as 0
    unless ``timing`` is set, so repeated runs produce identical files.
    """
    if units not in UNITS:
        raise ConfigError(f"units must be one of {UNITS}")
    scale = 1.0 / math.log(2.0) if units == "bits" else 1.0
    rows = []
    for p in sorted(points, key=lambda p: (p.method, -p.lam)):
        rows.append([_fmt(p.lam), _fmt(p.distortion), _fmt(p.rate * scale), _fmt(p.loss * scale),
                     _fmt(int(p.n_atoms)), p.method, _fmt(int(p.iterations)),
                     _fmt(p.wall_ms if timing else 0.0), units])
    return rows


def _write_table(path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    if str(path) == "-":
        sys.stdout.write(buf.getvalue())
        return
    try:
        with open(path, "w", newline="") as fh:
            fh.write(buf.getvalue())
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc.strerror}") from None


def write_rd_csv(points: Sequence[RDPoint], path, units: str = "nats", timing: bool = False) -> None:
    if not points:
        raise ConfigError("no RD points to write")
    _write_table(path, RD_HEADER, rd_rows(points, units, timing))


def write_trace_csv(outcome: LambdaOutcome, path) -> None:
    """Per-iteration loss (nats) and squared gradient norm for one lambda."""
    if outcome.ba_trace is not None:
        rows = [[i, _fmt(v), ""] for i, v in enumerate(outcome.ba_trace)]
    elif outcome.run is not None:
        gn = dict(outcome.run.grad_norm_trace)
        ls = dict(outcome.run.loss_trace)
        rows = [[i, _fmt(ls[i]) if i in ls else "", _fmt(gn[i]) if i in gn else ""]
                for i in sorted(set(gn) | set(ls))]
    else:
        return
    _write_table(path, ["iteration", "loss", "grad_norm_sq"], rows)


def trace_filename(method: str, lam: float) -> str:
    return f"trace_{method}_lambda_{_fmt(lam)}.csv"


def write_sweep_outputs(result: SweepResult, cfg: SweepConfig, out_path, trace_dir=None,
                        timing: bool = False) -> None:
    if result.points:
        write_rd_csv(result.points, out_path, cfg.units, timing)
    if trace_dir is not None:
        os.makedirs(trace_dir, exist_ok=True)
        for o in result.outcomes:
            if o.error is None:
                write_trace_csv(o, os.path.join(trace_dir, trace_filename(cfg.method, o.lam)))


# ---------------------------------------------------------------- deconvolution


def circle_source(sigma2: float = 0.1, dim: int = 2) -> ConvolvedSourceSpec:
    """Uniform unit sphere in R^dim blurred by N(0, sigma2 I); the circle when dim = 2."""
    return ConvolvedSourceSpec(UniformSphere(1.0, int(dim)), float(sigma2))


@dataclass
class MethodResult:
    method: str
    final_loss: float
    gap: float
    iterations: int
    iters_to_band: Optional[int]
    trace: list  # (iteration, loss)
    grad_norm_trace: list = field(default_factory=list)
    final_nu: Optional[DiscreteMeasure] = None


@dataclass
class DeconvReport:
    sigma2: float
    lam: float
    n: int
    m: int
    dim: int
    opt: float
    opt_stderr: float
    opt_analytic: float
    band: float
    methods: dict

    def gap_table(self) -> str:
        out = [f"OPT (Monte Carlo) = {self.opt:.6f} +/- {self.opt_stderr:.2g}, analytic {self.opt_analytic:.6f}"]
        for name, r in self.methods.items():
            hit = "never" if r.iters_to_band is None else str(r.iters_to_band)
            out.append(f"{name:8s} final {r.final_loss:.6f}  gap {r.gap:+.5f}  iters {r.iterations}  band at {hit}")
        return "\n".join(out)


def default_deconv_schedule(lam: float) -> StepSchedule:
    # gamma ~ 1/lam moves each particle to its responsibility-weighted mean.
    return StepSchedule("inverse_decay", gamma0=1.0 / lam, decay=0.01)


def _deconv_method(method, mu, spec, lam, n, iters, seed, schedule, ba_iters):
    if method == "ba":
        nu0 = initial_nu(mu, n, seed.derive(0).generator(), None)
        res = ba_solve(mu, nu0, spec, lam, max_iters=ba_iters)
        trace = list(enumerate(res.trace))
        return trace, [], res.nu
    if method == "hybrid":
        r = hybrid_run(mu, spec, lam, n, schedule, iters, seed)
    else:
        r = wgd_run(mu, spec, lam, n, schedule, iters, seed, loss="eot" if method == "wgd_eot" else "ba",
                    eval_size=None)
    return r.loss_trace, r.grad_norm_trace, r.final_nu


def run_deconv_benchmark(sigma2: float = 0.1, lam: float = 10.0, n: int = 20, m: int = 100_000,
                         iters: int = 300, methods=("ba", "wgd", "hybrid"), seed: int = 0, dim: int = 2,
                         schedule: Optional[StepSchedule] = None, ba_iters: int = 2000, band: float = 2e-2,
                         opt_m_eval: int = 10_000, opt_n_eval: int = 1_000_000, opt=None) -> DeconvReport:
    """Compare methods on the blurred-sphere source against the optimal loss.

    The source sample, every method's initial particles and the OPT estimate
    use separate streams of ``seed``. Every method starts from the same ``n``
    particles. ``final_loss`` is the rate functional of the final measure on
    the full sample, whatever objective the method descends. Pass ``opt`` as
    ``(mean, stderr)`` to reuse an earlier OPT estimate.
    """
    for mth in methods:
        if mth not in METHODS:
            raise ConfigError(f"unknown method {mth!r}")
    root = RngSeed(int(seed))
    src = circle_source(sigma2, dim)
    spec = DistortionSpec()
    mu = sample_convolved(src, int(m), root.derive(0))
    if opt is None:
        opt = opt_loss_mc(src, lam, opt_m_eval, opt_n_eval, seed=root.derive(1))
    opt_mean, opt_se = opt
    analytic = rd_segment(src, lam).loss
    schedule = schedule or default_deconv_schedule(lam)
    run_seed = root.derive(2)

    from .ratefn import evaluate_ba

    results = {}
    for mth in methods:
        trace, gn, nu = _deconv_method(mth, mu, spec, lam, int(n), int(iters), run_seed, schedule, ba_iters)
        final = evaluate_ba(mu, nu, spec, lam).loss
        hit = next((it for it, v in trace if v <= opt_mean + band), None) if mth != "wgd_eot" else None
        results[mth] = MethodResult(method=mth, final_loss=final, gap=final - opt_mean, iterations=trace[-1][0],
                                    iters_to_band=hit, trace=trace, grad_norm_trace=gn, final_nu=nu)
    return DeconvReport(sigma2=float(sigma2), lam=float(lam), n=int(n), m=int(m), dim=int(dim), opt=opt_mean,
                        opt_stderr=opt_se, opt_analytic=analytic, band=band, methods=results)


def write_deconv_trace_csv(report: DeconvReport, path) -> None:
    """Loss per iteration, one column per method; blank where a method has stopped."""
    names = list(report.methods)
    series = [dict(report.methods[k].trace) for k in names]
    its = sorted(set().union(*series))
    rows = [[i] + [_fmt(s[i]) if i in s else "" for s in series] for i in its]
    _write_table(path, ["iteration"] + names, rows)


@dataclass
class GapRow:
    dim: int
    n: int
    seed: int
    loss: float
    opt: float
    gap: float


def run_gap_study(dims=(2, 4), ns=(10, 20, 40), seeds=(0, 1, 2, 3, 4), sigma2: float = 0.1,
                  lam: Optional[float] = None, m: int = 10_000, iters: int = 300,
                  schedule: Optional[StepSchedule] = None, opt_source: str = "analytic",
                  opt_m_eval: int = 10_000, opt_n_eval: int = 1_000_000) -> list:
    """Optimality gap of WGD against particle count.

    For each (dim, seed) one source sample is shared by every ``n`` so the
    gaps are paired. ``lam`` defaults to ``1/sigma2``. The reference optimum
    is the closed-form segment loss (``opt_source="analytic"``) or the Monte
    Carlo estimate (``"mc"``).
    """
    lam = 1.0 / sigma2 if lam is None else float(lam)
    schedule = schedule or default_deconv_schedule(lam)
    spec = DistortionSpec()
    rows = []
    for d in dims:
        src = circle_source(sigma2, d)
        if opt_source == "analytic":
            opt = rd_segment(src, lam).loss
        elif opt_source == "mc":
            opt = opt_loss_mc(src, lam, opt_m_eval, opt_n_eval, seed=RngSeed(0, d))[0]
        else:
            raise ConfigError(f"opt_source must be 'analytic' or 'mc', got {opt_source!r}")
        for s in seeds:
            root = RngSeed(int(s), int(d))
            mu = sample_convolved(src, int(m), root.derive(0))
            for n in ns:
                r = wgd_run(mu, spec, lam, int(n), schedule, int(iters), root.derive(1), eval_size=None)
                rows.append(GapRow(dim=int(d), n=int(n), seed=int(s), loss=r.final_loss, opt=opt,
                                   gap=r.final_loss - opt))
    return rows


def write_gap_csv(rows, path) -> None:
    _write_table(path, ["dim", "n", "seed", "loss", "opt", "gap"],
                 [[r.dim, r.n, r.seed, _fmt(r.loss), _fmt(r.opt), _fmt(r.gap)] for r in rows])


# ---------------------------------------------------------------- oracles

ORACLE_SOURCES = ("gaussian", "binary", "gmm", "circle")


@dataclass
class OracleRow:
    source: str
    lam: Optional[float]
    distortion: float
    rate: float
    distortion_kind: str


def run_oracle(source: str, lambdas=None, distortions=None, sigma2: float = 1.0, p: float = 0.5):
    """Analytic (D, R) points in nats, plus notes for requests outside coverage.

    ``gaussian`` takes squared-error distortions directly; a lambda for the
    half-squared loss maps to ``D_sq = 1/lambda``. ``binary`` is Hamming
    distortion on Bernoulli(p), with ``D = 1/(1 + e^lambda)``. ``gmm``
    (atoms at +-1) and ``circle`` use the closed-form segment and accept
    lambdas with ``lambda * sigma2 >= 1`` only.
    """
    if source not in ORACLE_SOURCES:
        raise ConfigError(f"oracle source must be one of {ORACLE_SOURCES}")
    if (lambdas is None) == (distortions is None):
        raise ConfigError("give exactly one of a lambda list or a distortion list")
    rows, notes = [], []
    if source == "gaussian":
        if distortions is None:
            distortions = [1.0 / lam for lam in lambdas]
            lam_of = list(lambdas)
        else:
            lam_of = [1.0 / D if D > 0 else None for D in distortions]
        for lam, D in zip(lam_of, distortions):
            if not 0 < D <= sigma2:
                notes.append(f"D={D!r} outside (0, sigma2]; skipped")
                continue
            rows.append(OracleRow("gaussian", lam, float(D), gaussian_rd_oracle(sigma2, D), "squared"))
    elif source == "binary":
        if distortions is None:
            pairs = [(lam, 1.0 / (1.0 + math.exp(lam))) for lam in lambdas]
        else:
            pairs = [(math.log((1 - D) / D) if 0 < D < 0.5 else None, D) for D in distortions]
        for lam, D in pairs:
            if not 0 < D <= min(p, 1 - p):
                notes.append(f"D={D!r} outside (0, min(p, 1-p)]; skipped")
                continue
            rows.append(OracleRow("binary", lam, float(D), binary_rd_oracle(p, D), "hamming"))
    else:
        if lambdas is None:
            raise ConfigError(f"the {source} oracle is parameterized by lambda only")
        if source == "gmm":
            src = ConvolvedSourceSpec(DiscreteMeasure([[-1.0], [1.0]]), sigma2)
        else:
            src = circle_source(sigma2, 2)
        for lam in lambdas:
            if lam * sigma2 < 1:
                notes.append(f"lambda={lam!r} below 1/sigma2; no closed-form segment, skipped")
                continue
            seg = rd_segment(src, lam)
            rows.append(OracleRow(source, float(lam), seg.distortion, seg.rate, "half_squared"))
    return rows, notes


def write_oracle_csv(rows, path, units: str = "nats") -> None:
    if units not in UNITS:
        raise ConfigError(f"units must be one of {UNITS}")
    scale = 1.0 / math.log(2.0) if units == "bits" else 1.0
    _write_table(path, ["source", "lambda", "distortion", "rate", "units", "distortion_kind"],
                 [[r.source, "" if r.lam is None else _fmt(r.lam), _fmt(r.distortion), _fmt(r.rate * scale),
                   units, r.distortion_kind] for r in rows])



def failure_exit_code(result: SweepResult) -> int:
    """0 if every lambda succeeded, else the code of the most severe failure class."""
    kinds = [o.error_type for o in result.failures]
    if any(issubclass(k, NumericError) for k in kinds):
        return 4
    if any(issubclass(k, DataError) for k in kinds):
        return 3
    return 2 if kinds else 0

"""Synthetic sources with known R-D solutions and the classic closed-form oracles.

A source ``mu = alpha * N(0, sigma2 I)`` under distortion ``0.5 ||x - y||^2``
has, for every ``lam >= 1 / sigma2``, optimal reproduction
``alpha * N(0, sigma2 - 1/lam)`` with distortion ``d / (2 lam)`` and rate
``h(mu) - (d/2) log(2 pi e / lam)``. The differential entropy ``h(mu)`` is
the only non-trivial piece and is computed numerically here.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
from scipy import integrate
from scipy.special import gammaln, ive, logsumexp

from .errors import ConfigError
from .measures import DiscreteMeasure, RngSeed, as_generator, sample_indices

SEGMENT_TOL = 1e-12


@dataclass(frozen=True)
class UniformSphere:
    """Uniform measure on the sphere of the given radius in R^dim (a circle for dim=2)."""

    radius: float = 1.0
    dim: int = 2

    def sample(self, m: int, rng: np.random.Generator) -> np.ndarray:
        if self.dim == 2:
            theta = rng.uniform(0.0, 2 * np.pi, size=m)
            return self.radius * np.column_stack([np.cos(theta), np.sin(theta)])
        z = rng.standard_normal((m, self.dim))
        return self.radius * z / np.linalg.norm(z, axis=1, keepdims=True)


def uniform_circle(radius: float = 1.0) -> UniformSphere:
    return UniformSphere(radius, 2)


Alpha = Union[DiscreteMeasure, UniformSphere]


@dataclass(frozen=True, eq=False)
class ConvolvedSourceSpec:
    alpha: Alpha
    sigma2: float

    def __post_init__(self):
        if not self.sigma2 > 0:
            raise ConfigError("sigma2 must be positive")

    @property
    def dim(self) -> int:
        return self.alpha.dim

    def sample_alpha(self, m: int, rng: np.random.Generator) -> np.ndarray:
        if isinstance(self.alpha, DiscreteMeasure):
            return self.alpha.points[sample_indices(self.alpha.weights, m, rng)]
        return self.alpha.sample(m, rng)

    def sample(self, m: int, rng: np.random.Generator) -> np.ndarray:
        y = self.sample_alpha(m, rng)
        return y + math.sqrt(self.sigma2) * rng.standard_normal(y.shape)

    def log_density(self, x: np.ndarray) -> np.ndarray:
        """Log of the Lebesgue density of ``mu`` at the rows of ``x``."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        d, s2 = self.dim, self.sigma2
        norm = -0.5 * d * math.log(2 * math.pi * s2)
        if isinstance(self.alpha, DiscreteMeasure):
            a, w = self.alpha.points, self.alpha.weights
            sq = ((x[:, None, :] - a[None, :, :]) ** 2).sum(-1)
            with np.errstate(divide="ignore"):
                return norm + logsumexp(np.log(w)[None, :] - sq / (2 * s2), axis=1)
        r = np.linalg.norm(x, axis=1)
        return _sphere_log_density(r, self.alpha.radius, d, s2)


def _sphere_log_density(r, R, d, s2):
    # E_u exp(kappa u_1) over the unit sphere = Gamma(d/2) (kappa/2)^(1-d/2) I_{d/2-1}(kappa)
    r = np.asarray(r, dtype=np.float64)
    kappa = r * R / s2
    nu = d / 2 - 1
    with np.errstate(divide="ignore"):
        log_mgf = np.where(
            kappa > 1e-8,
            gammaln(d / 2) + (1 - d / 2) * np.log(np.maximum(kappa, 1e-300) / 2)
            + np.log(ive(nu, np.maximum(kappa, 1e-300))) + kappa,
            kappa ** 2 / (2 * d),
        )
    return -0.5 * d * math.log(2 * math.pi * s2) - (r ** 2 + R ** 2) / (2 * s2) + log_mgf


@dataclass(frozen=True, eq=False)
class AnalyticRDSegment:
    lam: float
    nu_star: Union[Alpha, ConvolvedSourceSpec]
    distortion: float
    rate: float
    how: str
    stderr: float = 0.0

    @property
    def loss(self) -> float:
        return self.rate + self.lam * self.distortion


def sample_convolved(spec: ConvolvedSourceSpec, m: int, seed) -> DiscreteMeasure:
    """Empirical measure of ``m`` draws ``X = Y + sqrt(sigma2) N``, ``Y ~ alpha``."""
    if int(m) < 1:
        raise ConfigError("m must be at least 1")
    return DiscreteMeasure(spec.sample(int(m), as_generator(seed)))


def _segment_excess(spec: ConvolvedSourceSpec, lam: float) -> float:
    excess = spec.sigma2 - 1.0 / lam
    if excess < -SEGMENT_TOL * spec.sigma2:
        raise ConfigError(
            f"lambda={lam} is below 1/sigma2={1 / spec.sigma2}: outside the analytic segment")
    return max(excess, 0.0) if abs(excess) > SEGMENT_TOL * spec.sigma2 else 0.0


def nu_star(spec: ConvolvedSourceSpec, lam: float):
    """Optimal reproduction measure ``alpha * N(0, sigma2 - 1/lam)``.

    Returns ``alpha`` itself at ``lam = 1/sigma2``.
    """
    excess = _segment_excess(spec, lam)
    if excess == 0.0:
        return spec.alpha
    return ConvolvedSourceSpec(spec.alpha, excess)


def sample_nu_star(spec: ConvolvedSourceSpec, lam: float, n: int, rng: np.random.Generator) -> np.ndarray:
    star = nu_star(spec, lam)
    if isinstance(star, ConvolvedSourceSpec):
        return star.sample(n, rng)
    if isinstance(star, DiscreteMeasure):
        return star.points[sample_indices(star.weights, n, rng)]
    return star.sample(n, rng)


def differential_entropy(spec: ConvolvedSourceSpec, mc_draws: int = 1_000_000, seed=0):
    """Differential entropy of ``mu`` in nats: ``(h, stderr, how)``.

    Adaptive quadrature in d=1, a tensor-product trapezoid grid in d=2, a
    radial integral for sphere sources in any dimension, and Monte Carlo
    with a reported standard error otherwise.
    """
    d, s2 = spec.dim, spec.sigma2
    s = math.sqrt(s2)
    if isinstance(spec.alpha, UniformSphere):
        R = spec.alpha.radius
        log_area = math.log(2) + 0.5 * d * math.log(math.pi) - gammaln(d / 2)

        def integrand(r):
            lp = _sphere_log_density(np.array([r]), R, d, s2)[0]
            if r == 0.0 and d > 1:
                return 0.0
            return -math.exp(lp + log_area + (d - 1) * math.log(r)) * lp

        hi = R + 12 * s + 6 * s * math.sqrt(d)
        pts = [p for p in (max(R - 4 * s, 0.0), R, R + 4 * s) if 0 < p < hi]
        h, _ = integrate.quad(integrand, 0.0, hi, points=pts, limit=500, epsabs=1e-13, epsrel=1e-12)
        return h, 0.0, "quadrature"

    a = spec.alpha.points
    if d == 1:
        spread = math.sqrt(s2 + float(spec.alpha.weights @ (a[:, 0] - spec.alpha.mean()[0]) ** 2))
        lo, hi = a.min() - 8 * spread, a.max() + 8 * spread

        def integrand(x):
            lp = spec.log_density(np.array([[x]]))[0]
            return -math.exp(lp) * lp

        pts = sorted(set(float(v) for v in a[:, 0]))[:100]
        h, _ = integrate.quad(integrand, lo, hi, points=pts, limit=2000, epsabs=1e-13, epsrel=1e-12)
        return h, 0.0, "quadrature"
    if d == 2:
        lo = a.min(axis=0) - 10 * s
        hi = a.max(axis=0) + 10 * s
        step = s / 25
        gx = np.arange(lo[0], hi[0] + step, step)
        gy = np.arange(lo[1], hi[1] + step, step)
        X, Y = np.meshgrid(gx, gy, indexing="ij")
        lp = spec.log_density(np.column_stack([X.ravel(), Y.ravel()])).reshape(X.shape)
        f = -np.exp(lp) * lp
        h = integrate.trapezoid(integrate.trapezoid(f, gy, axis=1), gx)
        return float(h), 0.0, "quadrature"

    rng = as_generator(seed)
    vals = []
    for lo in range(0, mc_draws, 100_000):
        x = spec.sample(min(100_000, mc_draws - lo), rng)
        vals.append(-spec.log_density(x))
    v = np.concatenate(vals)
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(len(v))), "monte_carlo"


def rd_segment(spec: ConvolvedSourceSpec, lam: float, mc_draws: int = 1_000_000, seed=0) -> AnalyticRDSegment:
    """Exact R-D point at slope ``-lam`` for ``lam >= 1/sigma2`` (half squared error)."""
    star = nu_star(spec, lam)
    d = spec.dim
    h, se, how = differential_entropy(spec, mc_draws=mc_draws, seed=seed)
    rate = h - 0.5 * d * math.log(2 * math.pi * math.e / lam)
    return AnalyticRDSegment(lam=float(lam), nu_star=star, distortion=d / (2 * lam), rate=rate, how=how, stderr=se)


def gaussian_rd_oracle(sigma2: float, D: float) -> float:
    """Shannon's ``R(D) = 0.5 log(sigma2 / D)`` for a Gaussian under squared error.

    For the half-squared convention pass ``D = 2 * D_half``.
    """
    if not sigma2 > 0 or not D > 0:
        raise ConfigError("sigma2 and D must be positive")
    if D >= sigma2:
        return 0.0
    return 0.5 * math.log(sigma2 / D)


def binary_entropy(p: float) -> float:
    if p <= 0.0 or p >= 1.0:
        return 0.0
    return -p * math.log(p) - (1 - p) * math.log(1 - p)


def binary_rd_oracle(p: float, D: float) -> float:
    """``h(p) - h(D)`` nats for a Bernoulli(p) source under Hamming distortion."""
    if not 0 < p < 1:
        raise ConfigError("p must lie in (0, 1)")
    if D < 0:
        raise ConfigError("D must be nonnegative")
    if D >= min(p, 1 - p):
        return 0.0
    return binary_entropy(p) - binary_entropy(D)


def opt_loss_mc(spec: ConvolvedSourceSpec, lam: float, m_eval: int = 10_000, n_eval: int = 1_000_000,
                seed=0, chunk_elems: int = 1 << 23):
    """Monte Carlo estimate of the optimal loss and its standard error.

    Draws ``m_eval`` source points and ``n_eval`` points from the optimal
    reproduction measure and averages ``-log mean_j exp(-lam ||x - y_j||^2 / 2)``.
    The inner plug-in makes the estimate biased upward; the bias shrinks as
    ``n_eval`` grows. The standard error covers only the outer average.
    """
    seed = seed if isinstance(seed, RngSeed) else RngSeed(int(seed))
    _segment_excess(spec, lam)
    xs = spec.sample(int(m_eval), seed.derive(0).generator())
    ys = sample_nu_star(spec, lam, int(n_eval), seed.derive(1).generator())
    phi = plugin_phi(xs, ys, lam, chunk_elems)
    return float(phi.mean()), float(phi.std(ddof=1) / math.sqrt(len(phi)))


def plugin_phi(xs: np.ndarray, ys: np.ndarray, lam: float, chunk_elems: int = 1 << 23) -> np.ndarray:
    """``-log (1/n) sum_j exp(-lam ||x_i - y_j||^2 / 2)`` for each row of ``xs``."""
    n = ys.shape[0]
    rows = max(1, chunk_elems // n)
    probe = min(n, 2048)
    ysq = 0.5 * lam * np.einsum("nd,nd->n", ys, ys)
    out = np.empty(xs.shape[0])
    for lo in range(0, xs.shape[0], rows):
        xb = xs[lo:lo + rows]
        # -lam/2 ||x - y||^2 = lam x.y - lam/2 ||y||^2 - lam/2 ||x||^2
        s = lam * (xb @ ys.T)
        s -= ysq[None, :]
        # shift by a max over a probe prefix; one pass cheaper than logsumexp
        shift = s[:, :probe].max(axis=1)
        s -= shift[:, None]
        np.exp(s, out=s)
        total = s.sum(axis=1)
        lse = np.log(total) + shift
        bad = ~np.isfinite(lse)
        if bad.any():
            sb = lam * (xb[bad] @ ys.T) - ysq[None, :]
            lse[bad] = logsumexp(sb, axis=1)
        out[lo:lo + rows] = -(lse - 0.5 * lam * np.einsum("md,md->m", xb, xb)) + math.log(n)
    return out

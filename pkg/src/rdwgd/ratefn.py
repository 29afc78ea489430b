"""The rate functional, its first variation and Wasserstein gradient, and R-D point estimates.

Everything here is exact for a discrete reproduction measure: the inner
integral over ``nu`` is a finite log-sum-exp. Source-side sums run over row
blocks so the m x n distortion matrix is never held in full.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .ba import _check_lambda, _log_weights, log_kernel
from .distortion import (CUSTOM, DEFAULT_BLOCK_ELEMS, DistortionSpec, block_rows, cost_transposed, grad_scale,
                         pairwise_distortion)
from .errors import NumericError, UnsupportedOperation
from .measures import DiscreteMeasure

IDENTITY_TOL = 1e-9
CEILING_SLACK = 1e-9
NEGATIVE_RATE_TOL = 1e-6


@dataclass(frozen=True, eq=False)
class PotentialVector:
    values: np.ndarray
    anchor: str  # "at_nu_atoms" or "at_mu_points"

    def __post_init__(self):
        if self.anchor not in ("at_nu_atoms", "at_mu_points"):
            raise ValueError(f"bad anchor {self.anchor!r}")
        if not np.all(np.isfinite(self.values)):
            i = int(np.argmax(~np.isfinite(self.values)))
            raise NumericError(f"non-finite potential at index {i}")

    def __len__(self):
        return len(self.values)


@dataclass
class RDPoint:
    """One estimated point on an R-D upper bound. Rates and losses in nats."""

    lam: float
    distortion: float
    rate: float
    loss: float
    n_atoms: int
    method: str = ""
    iterations: int = 0
    wall_ms: float = 0.0
    meta: dict = field(default_factory=dict)

    def check(self):
        if abs(self.loss - (self.rate + self.lam * self.distortion)) > IDENTITY_TOL * max(1.0, abs(self.loss)):
            raise NumericError(f"loss identity broken at lambda={self.lam}")
        if self.rate > math.log(self.n_atoms) + CEILING_SLACK:
            raise NumericError(f"rate {self.rate} exceeds log(n)={math.log(self.n_atoms)} at lambda={self.lam}")
        return self

    def near_ceiling(self, margin: float = 0.05) -> bool:
        return self.rate >= math.log(self.n_atoms) - margin


@dataclass
class BAEvaluation:
    loss: float
    psi: Optional[np.ndarray] = None
    grad: Optional[np.ndarray] = None
    distortion: Optional[float] = None
    phi: Optional[np.ndarray] = None
    marginal: Optional[np.ndarray] = None


def evaluate_ba(mu: DiscreteMeasure, nu: DiscreteMeasure, spec: DistortionSpec, lam: float, *,
                psi: bool = False, grad: bool = False, distortion: bool = False, phi: bool = False,
                marginal: bool = False,
                block_elems: int = DEFAULT_BLOCK_ELEMS) -> BAEvaluation:
    """One pass over mu computing the loss and whichever extras are requested.

    The per-row log-normalizer is shared between the loss, the first
    variation, the gradient and the kernel-based distortion.
    """
    _check_lambda(lam)
    if grad and not spec.differentiable:
        raise UnsupportedOperation(f"{spec.kind} distortion has no gradient")
    if spec.differentiable:
        return _evaluate_euclidean(mu, nu, spec, lam, psi, grad, distortion, phi, marginal, block_elems)
    return _evaluate_generic(mu, nu, spec, lam, psi, distortion, phi, marginal, block_elems)


def _finish(loss, n, psi_acc, grad_acc, dist_acc, phi_all, marg_acc, lam):
    if not math.isfinite(loss):
        raise NumericError("rate functional is not finite")
    out = BAEvaluation(loss=loss, psi=psi_acc, distortion=dist_acc, phi=phi_all, marginal=marg_acc)
    if grad_acc is not None:
        out.grad = lam * grad_acc
        if not np.all(np.isfinite(out.grad)):
            j = int(np.argmax(~np.all(np.isfinite(out.grad), axis=1)))
            raise NumericError(f"non-finite Wasserstein gradient at atom {j}")
    return out


def _evaluate_euclidean(mu, nu, spec, lam, psi, grad, distortion, phi, marginal, block_elems):
    # Atoms-major layout: every block is (n, b), reductions run along the long axis.
    Y, w = nu.points, nu.weights
    n, d = Y.shape
    log_w = _log_weights(w)
    pos = w > 0
    all_pos = bool(pos.all())
    if not pos.any():
        raise NumericError("degenerate support: every atom of nu has zero weight")
    step = block_rows(mu.n, n, d, block_elems)
    need_ratio = psi or grad

    loss = 0.0
    psi_acc = np.zeros(n) if need_ratio else None
    grad_acc = np.zeros((n, d)) if grad else None
    dist_acc = 0.0 if distortion else None
    phi_all = np.empty(mu.n) if phi else None
    marg_acc = np.zeros(n) if marginal else None

    for lo in range(0, mu.n, step):
        hi = min(lo + step, mu.n)
        Xb = mu.points[lo:hi]
        wb = mu.weights[lo:hi]
        Ct = cost_transposed(spec, Xb.T, Y)
        S = Ct * (-lam)
        S += log_w[:, None]
        mx = S.max(axis=0)
        if not np.all(np.isfinite(mx)):
            i = lo + int(np.argmax(~np.isfinite(mx)))
            raise NumericError(f"degenerate support: row {i} has no atom with positive mass")
        S -= mx
        np.exp(S, out=S)
        Z = S.sum(axis=0)
        S /= Z  # S now holds K.T
        lse = np.log(Z) + mx
        loss -= float(wb @ lse)
        if phi:
            phi_all[lo:hi] = -lse
        if need_ratio:
            if all_pos:
                kw = S @ wb
                col = kw / w
            else:
                R = np.exp(Ct * (-lam) - lse[None, :])
                col = R @ wb
            psi_acc -= col
            if grad:
                # sum_i mu_i ratio_ij (y_j - x_i), scaled by d rho / dy
                wx = wb[:, None] * Xb
                px = (S @ wx) / w[:, None] if all_pos else R @ wx
                grad_acc += grad_scale(spec) * (col[:, None] * Y - px)
        if marginal:
            marg_acc += S @ wb
        if distortion:
            S *= Ct
            dist_acc += float(S.sum(axis=0) @ wb)

    return _finish(loss, n, psi_acc if psi else None, grad_acc, dist_acc, phi_all, marg_acc, lam)


def _evaluate_generic(mu, nu, spec, lam, psi, distortion, phi, marginal, block_elems):
    X, Y, mw = mu.points, nu.points, mu.weights
    log_w = _log_weights(nu.weights)
    n, d = Y.shape
    step = mu.n if spec.kind == CUSTOM else block_rows(mu.n, n, d, block_elems)

    loss = 0.0
    psi_acc = np.zeros(n) if psi else None
    dist_acc = 0.0 if distortion else None
    phi_all = np.empty(mu.n) if phi else None
    marg_acc = np.zeros(n) if marginal else None

    for lo in range(0, mu.n, step):
        hi = min(lo + step, mu.n)
        C = pairwise_distortion(spec, X[lo:hi], Y) if spec.kind != CUSTOM else pairwise_distortion(spec, X, Y)
        log_rows, lse = log_kernel(log_w, C, lam)
        wb = mw[lo:hi]
        loss -= float(wb @ lse)
        if phi:
            phi_all[lo:hi] = -lse
        if psi:
            psi_acc -= wb @ np.exp(-lam * C - lse[:, None])
        if distortion or marginal:
            K = np.exp(log_rows)
            if distortion:
                dist_acc += float(wb @ np.sum(K * C, axis=1))
            if marginal:
                marg_acc += wb @ K

    return _finish(loss, n, psi_acc, None, dist_acc, phi_all, marg_acc, lam)


def rate_functional_eval(mu: DiscreteMeasure, nu: DiscreteMeasure, spec: DistortionSpec, lam: float):
    """Return ``(loss, phi)`` with ``phi(x) = -log sum_j w_j exp(-lam rho(x, y_j))``.

    ``loss`` is the mu-average of ``phi``.
    """
    ev = evaluate_ba(mu, nu, spec, lam, phi=True)
    return ev.loss, PotentialVector(ev.phi, "at_mu_points")


def first_variation_ba(mu: DiscreteMeasure, nu: DiscreteMeasure, spec: DistortionSpec, lam: float) -> PotentialVector:
    """First variation of the rate functional, evaluated at the atoms of ``nu``.

    ``psi(y) = -sum_i mu_i exp(-lam rho(x_i, y)) / sum_k w_k exp(-lam rho(x_i, y_k))``.
    Note ``sum_j w_j psi(y_j) = -1`` for any ``nu``.
    """
    return PotentialVector(evaluate_ba(mu, nu, spec, lam, psi=True).psi, "at_nu_atoms")


def wgd_gradient_ba(mu: DiscreteMeasure, nu: DiscreteMeasure, spec: DistortionSpec, lam: float) -> np.ndarray:
    """Wasserstein gradient of the rate functional at each atom, shape (n, d).

    Equals the Euclidean gradient of ``psi``; the partial derivative of the
    loss with respect to atom ``j`` is ``w_j`` times row ``j``.
    """
    return evaluate_ba(mu, nu, spec, lam, grad=True).grad


def rd_point_from_nu(mu: DiscreteMeasure, nu: DiscreteMeasure, spec: DistortionSpec, lam: float,
                     method: str = "", iterations: int = 0, wall_ms: float = 0.0) -> RDPoint:
    """Upper-bound (distortion, rate) pair certified by ``nu`` and its optimal kernel.

    The rate is taken as ``loss - lam * distortion``, which avoids the
    cancellation-prone double sum.
    """
    ev = evaluate_ba(mu, nu, spec, lam, distortion=True)
    rate = ev.loss - lam * ev.distortion
    if rate < -NEGATIVE_RATE_TOL:
        raise NumericError(f"negative rate estimate {rate} at lambda={lam}")
    n_atoms = int(np.count_nonzero(nu.weights > 0))
    point = RDPoint(lam=float(lam), distortion=ev.distortion, rate=rate, loss=ev.loss,
                    n_atoms=n_atoms, method=method, iterations=iterations, wall_ms=wall_ms)
    return point.check()

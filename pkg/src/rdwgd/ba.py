"""Blahut-Arimoto iterations on a fixed reproduction support."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .distortion import DistortionSpec, pairwise_distortion
from .errors import ConfigError, InvariantViolation, NumericError, ShapeError
from .measures import DiscreteMeasure

MONOTONE_SLACK = 1e-12


@dataclass(frozen=True, eq=False)
class ConditionalKernel:
    """Row-stochastic kernel ``K(x_i, .)`` over the atoms of a reproduction measure.

    Stored as log-probabilities; ``rows`` exponentiates on demand.
    """

    log_rows: np.ndarray
    support_x: np.ndarray
    support_y: np.ndarray

    def __post_init__(self):
        m, n = self.log_rows.shape
        if self.support_x.shape[0] != m or self.support_y.shape[0] != n:
            raise ShapeError("kernel shape does not match its supports")

    @property
    def rows(self) -> np.ndarray:
        return np.exp(self.log_rows)

    @property
    def shape(self):
        return self.log_rows.shape


def _log_weights(w: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(w)


def log_kernel(log_w: np.ndarray, cost: np.ndarray, lam: float):
    """Log-domain softmax over atoms of ``log w_j - lam * C[i, j]``.

    Returns ``(log_rows, lse)`` where ``lse[i] = -phi(x_i)`` is the row
    normalizer; the rate functional is the mu-average of ``-lse``.
    """
    scores = log_w[None, :] - lam * cost
    lse = logsumexp(scores, axis=1)
    if not np.all(np.isfinite(lse)):
        i = int(np.argmax(~np.isfinite(lse)))
        raise NumericError(f"degenerate support: row {i} has no atom with positive mass")
    return scores - lse[:, None], lse


def _check_lambda(lam):
    if not (np.isfinite(lam) and lam > 0):
        raise ConfigError(f"lambda must be positive and finite, got {lam}")


def ba_kernel_update(mu: DiscreteMeasure, nu: DiscreteMeasure, spec: DistortionSpec,
                     lam: float, cost: np.ndarray = None) -> ConditionalKernel:
    """Optimal kernel for fixed ``nu``: ``K(x, y_j) ∝ w_j exp(-lam rho(x, y_j))``."""
    _check_lambda(lam)
    if not np.any(nu.weights > 0):
        raise NumericError("degenerate support: every atom of nu has zero weight")
    if cost is None:
        cost = pairwise_distortion(spec, mu.points, nu.points)
    log_rows, _ = log_kernel(_log_weights(nu.weights), cost, lam)
    return ConditionalKernel(log_rows, mu.points, nu.points)


def ba_marginal_update(mu: DiscreteMeasure, kernel: ConditionalKernel) -> DiscreteMeasure:
    """Second marginal of ``mu ⊗ K``; atom locations are kept."""
    if kernel.shape[0] != mu.n:
        raise ShapeError(f"kernel has {kernel.shape[0]} rows but mu has {mu.n} points")
    w = mu.weights @ kernel.rows
    return DiscreteMeasure(kernel.support_y, w / w.sum())


@dataclass
class BAResult:
    nu: DiscreteMeasure
    kernel: ConditionalKernel
    trace: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False

    @property
    def loss(self) -> float:
        return self.trace[-1]


def ba_solve(mu: DiscreteMeasure, nu0: DiscreteMeasure, spec: DistortionSpec, lam: float,
             max_iters: int = 1000, tol: float = 1e-9) -> BAResult:
    """Alternate kernel and marginal updates until the loss stalls.

    ``trace[t]`` is the rate functional at ``nu^(t)`` (``trace[0]`` at
    ``nu0``). Stops once a step lowers the loss by less than ``tol`` nats.
    Raises ``InvariantViolation`` if the loss ever increases.
    """
    from .ratefn import evaluate_ba

    _check_lambda(lam)
    if max_iters < 1:
        raise ConfigError("max_iters must be at least 1")
    w = np.array(nu0.weights)
    trace = []
    converged = False
    it = 0
    while True:
        ev = evaluate_ba(mu, DiscreteMeasure(nu0.points, w), spec, lam, marginal=True)
        loss = ev.loss
        if trace:
            prev = trace[-1]
            if loss > prev + MONOTONE_SLACK * max(1.0, abs(prev)):
                raise InvariantViolation(f"BA loss increased at iteration {it}: {prev!r} -> {loss!r}")
        trace.append(loss)
        if len(trace) > 1 and trace[-2] - loss < tol:
            converged = True
            break
        if it >= max_iters:
            break
        w = ev.marginal / ev.marginal.sum()
        it += 1

    nu = DiscreteMeasure(nu0.points, w)
    return BAResult(nu=nu, kernel=ba_kernel_update(mu, nu, spec, lam), trace=trace,
                    iterations=it, converged=converged)

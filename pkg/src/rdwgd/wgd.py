"""Wasserstein gradient descent over particle locations, and the hybrid WGD + BA variant."""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Union

import numpy as np

from .distortion import DistortionSpec
from .eot import eot_cost, sinkhorn_solve, wgd_gradient_eot
from .errors import ConfigError, NumericError, UnsupportedOperation
from .measures import DiscreteMeasure, RngSeed, draw_minibatch, sample_indices
from .ratefn import evaluate_ba

Sampler = Callable[[int, np.random.Generator], np.ndarray]

SCHEDULE_KINDS = ("constant", "inverse_decay", "adaptive_moment")


@dataclass(frozen=True)
class StepSchedule:
    """Step sizes ``gamma_t`` for t = 0, 1, ...

    ``inverse_decay`` uses ``gamma0 / (1 + decay * t)``, which satisfies the
    usual sum-divergent / square-summable conditions when ``decay > 0``.
    ``adaptive_moment`` is Adam on the particle coordinates (``beta1``,
    ``beta2``, ``offset``), with the same optional inverse decay on gamma.
    """

    kind: str = "inverse_decay"
    gamma0: float = 0.1
    decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    offset: float = 1e-8

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ConfigError(f"unknown schedule {self.kind!r}")
        if not self.gamma0 > 0:
            raise ConfigError("gamma0 must be positive")
        if self.decay < 0:
            raise ConfigError("decay must be nonnegative")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError("moment coefficients must lie in (0, 1)")

    def gamma(self, t: int) -> float:
        if self.kind == "constant":
            return self.gamma0
        return self.gamma0 / (1.0 + self.decay * t)

    def stepper(self) -> "_Stepper":
        return _Stepper(self)


class _Stepper:
    def __init__(self, schedule: StepSchedule):
        self.s = schedule
        self.m = None
        self.v = None

    def __call__(self, t: int, grad: np.ndarray):
        """Return ``(direction, gamma)`` for step ``t``."""
        s = self.s
        if s.kind != "adaptive_moment":
            return grad, s.gamma(t)
        if self.m is None:
            self.m = np.zeros_like(grad)
            self.v = np.zeros_like(grad)
        self.m = s.beta1 * self.m + (1 - s.beta1) * grad
        self.v = s.beta2 * self.v + (1 - s.beta2) * grad * grad
        mhat = self.m / (1 - s.beta1 ** (t + 1))
        vhat = self.v / (1 - s.beta2 ** (t + 1))
        return mhat / (np.sqrt(vhat) + s.offset), s.gamma(t)


@dataclass
class WgdRun:
    final_nu: DiscreteMeasure
    loss_trace: list
    grad_norm_trace: list
    config: dict
    ba_steps: list = field(default_factory=list)
    wall_ms: float = 0.0

    @property
    def final_loss(self) -> float:
        return self.loss_trace[-1][1]

    @property
    def iterations(self) -> int:
        return self.loss_trace[-1][0]

    def first_iteration_below(self, level: float) -> Optional[int]:
        for it, loss in self.loss_trace:
            if loss <= level:
                return it
        return None


def wgd_step(nu: DiscreteMeasure, gradient, gamma: float) -> DiscreteMeasure:
    """Push ``nu`` forward under ``y -> y - gamma * gradient(y)``; weights are kept."""
    g = np.asarray(gradient, dtype=np.float64).reshape(nu.points.shape)
    if not gamma > 0:
        raise ConfigError("step size must be positive")
    bad = ~np.all(np.isfinite(g), axis=1)
    if bad.any():
        raise NumericError(f"non-finite gradient at atom {int(np.argmax(bad))}")
    if not g.any():
        return nu
    return nu.with_points(nu.points - gamma * g)


def grad_norm_sq(mu: DiscreteMeasure, nu: DiscreteMeasure, spec: DistortionSpec, lam: float) -> float:
    """``sum_j w_j ||grad psi(y_j)||^2``, the quantity driven to zero by WGD."""
    grad = evaluate_ba(mu, nu, spec, lam, grad=True).grad
    return _gns(nu, grad)


def _gns(nu, grad):
    return float(nu.weights @ np.einsum("nd,nd->n", grad, grad))


def _loss_and_grad(kind, batch, nu, spec, lam, sinkhorn_tol, sinkhorn_max_iters, need_grad=True):
    if kind == "ba":
        ev = evaluate_ba(batch, nu, spec, lam, grad=need_grad)
        return ev.loss, ev.grad
    eps = 1.0 / lam
    pot = sinkhorn_solve(batch, nu, spec, eps, tol=sinkhorn_tol, max_iters=sinkhorn_max_iters)
    if not pot.converged:
        raise NumericError(f"Sinkhorn did not converge (marginal violation {pot.marginal_violation:.3g})")
    loss = lam * eot_cost(batch, nu, spec, eps, pot)
    grad = lam * wgd_gradient_eot(batch, nu, spec, eps, potentials=pot) if need_grad else None
    return loss, grad


def initial_nu(mu, n, rng, sampler):
    if sampler is not None:
        return DiscreteMeasure(np.asarray(sampler(n, rng), dtype=np.float64))
    if mu.n >= n:
        if np.all(mu.weights == mu.weights[0]):
            idx = rng.permutation(mu.n)[:n]
        else:
            idx = rng.choice(mu.n, size=n, replace=False, p=mu.weights)
    else:
        idx = sample_indices(mu.weights, n, rng)
    return DiscreteMeasure(mu.points[idx])


def _setup(mu, spec, lam, n, iters, seed, loss, batch_size, eval_size):
    if int(n) < 1:
        raise ConfigError("particle count n must be at least 1")
    if int(iters) < 1:
        raise ConfigError("iteration count must be at least 1")
    if not (np.isfinite(lam) and lam > 0):
        raise ConfigError(f"lambda must be positive, got {lam}")
    if loss not in ("ba", "eot"):
        raise ConfigError(f"unknown loss {loss!r}")
    if not spec.differentiable:
        raise UnsupportedOperation(f"WGD needs a differentiable distortion, got {spec.kind}")
    seed = seed if isinstance(seed, RngSeed) else RngSeed(int(seed))
    sampler = None if isinstance(mu, DiscreteMeasure) else mu
    if sampler is not None and batch_size is None:
        raise ConfigError("a sampler source requires a batch size")
    full_batch = sampler is None and (batch_size is None or mu.n <= batch_size)

    init_rng = seed.derive(0).generator()
    eval_rng = seed.derive(2).generator()
    if sampler is not None:
        eval_mu = DiscreteMeasure(np.asarray(sampler(eval_size or 10_000, eval_rng), dtype=np.float64))
    elif eval_size is None or mu.n <= eval_size:
        eval_mu = mu
    else:
        eval_mu = draw_minibatch(mu, eval_size, eval_rng)
    return seed, sampler, full_batch, init_rng, eval_mu


def wgd_run(mu: Union[DiscreteMeasure, Sampler], spec: DistortionSpec, lam: float, n: int,
            schedule: StepSchedule, iters: int, seed, *, loss: str = "ba", batch_size: Optional[int] = None,
            eval_every: int = 1, eval_size: Optional[int] = 10_000, nu0: Optional[DiscreteMeasure] = None,
            sinkhorn_tol: float = 1e-9, sinkhorn_max_iters: int = 10_000) -> WgdRun:
    """Wasserstein gradient descent on the rate functional (``loss="ba"``) or on
    ``lam`` times the entropic OT cost (``loss="eot"``, eps = 1/lam).

    ``mu`` is either a DiscreteMeasure or a sampler ``f(m, rng) -> (m, d)``.
    Particles start at ``n`` draws from ``mu`` unless ``nu0`` is given. When
    ``batch_size`` is set and ``mu`` has more support points than that, each
    step uses a fresh minibatch. Losses in ``loss_trace`` are measured on a
    fixed evaluation set chosen at the start (``eval_size=None`` uses all of
    ``mu``); ``grad_norm_trace`` records the norm of the step gradient.
    """
    seed, sampler, full_batch, init_rng, eval_mu = _setup(mu, spec, lam, n, iters, seed, loss,
                                                          batch_size, eval_size)
    nu = nu0 if nu0 is not None else initial_nu(None if sampler else mu, int(n), init_rng, sampler)
    batch_rng = seed.derive(1).generator()
    stepper = schedule.stepper()
    eval_is_train = full_batch and eval_mu is mu

    loss_trace, gn_trace = [], []
    t0 = time.perf_counter()
    for t in range(int(iters)):
        if full_batch:
            batch = mu
        elif sampler is not None:
            batch = DiscreteMeasure(np.asarray(sampler(batch_size, batch_rng), dtype=np.float64))
        else:
            batch = draw_minibatch(mu, batch_size, batch_rng)
        train_loss, grad = _loss_and_grad(loss, batch, nu, spec, lam, sinkhorn_tol, sinkhorn_max_iters)
        gn_trace.append((t, _gns(nu, grad)))
        if t % eval_every == 0:
            val = train_loss if eval_is_train else _loss_and_grad(
                loss, eval_mu, nu, spec, lam, sinkhorn_tol, sinkhorn_max_iters, need_grad=False)[0]
            loss_trace.append((t, val))
        direction, gamma = stepper(t, grad)
        nu = wgd_step(nu, direction, gamma)

    grad_mu = mu if full_batch else eval_mu
    final_loss, final_grad = _loss_and_grad(loss, grad_mu, nu, spec, lam, sinkhorn_tol, sinkhorn_max_iters)
    if eval_mu is not grad_mu:
        final_loss = _loss_and_grad(loss, eval_mu, nu, spec, lam, sinkhorn_tol, sinkhorn_max_iters,
                                    need_grad=False)[0]
    loss_trace.append((int(iters), final_loss))
    gn_trace.append((int(iters), _gns(nu, final_grad)))
    wall = 1000 * (time.perf_counter() - t0)

    config = dict(method="wgd" if loss == "ba" else "wgd_eot", loss=loss, lam=float(lam), n=int(n),
                  iters=int(iters), batch_size=batch_size, eval_every=eval_every, eval_size=eval_size,
                  schedule=asdict(schedule), distortion=spec.kind, seed=[seed.master, seed.stream])
    return WgdRun(final_nu=nu, loss_trace=loss_trace, grad_norm_trace=gn_trace, config=config, wall_ms=wall)


def hybrid_run(mu: DiscreteMeasure, spec: DistortionSpec, lam: float, n: int, schedule: StepSchedule,
               iters: int, seed, *, ba_every: int = 1, batch_size: Optional[int] = None,
               eval_every: int = 1, eval_size: Optional[int] = None,
               nu0: Optional[DiscreteMeasure] = None) -> WgdRun:
    """WGD location steps alternating with BA reweighting of the particles.

    After every ``ba_every`` gradient steps the weights are replaced by the
    second marginal of the optimal kernel. Full-batch only. Each entry of
    ``ba_steps`` is ``(iteration, loss_before, loss_after)``.
    """
    if batch_size is not None:
        raise UnsupportedOperation("the hybrid algorithm is full-batch only; BA steps on minibatches can diverge")
    if int(ba_every) < 1:
        raise ConfigError("ba_every must be at least 1")
    if not isinstance(mu, DiscreteMeasure):
        raise ConfigError("the hybrid algorithm needs an explicit (empirical) source measure")
    seed, _, _, init_rng, eval_mu = _setup(mu, spec, lam, n, iters, seed, "ba", None, eval_size)
    nu = nu0 if nu0 is not None else initial_nu(mu, int(n), init_rng, None)
    stepper = schedule.stepper()
    eval_is_train = eval_mu is mu

    loss_trace, gn_trace, ba_steps = [], [], []
    pending = None  # (iteration, loss before BA) awaiting the post-BA loss
    t0 = time.perf_counter()
    for t in range(int(iters)):
        ev = evaluate_ba(mu, nu, spec, lam, grad=True)
        if pending is not None:
            ba_steps.append((pending[0], pending[1], ev.loss))
            pending = None
        gn_trace.append((t, _gns(nu, ev.grad)))
        if t % eval_every == 0:
            val = ev.loss if eval_is_train else evaluate_ba(eval_mu, nu, spec, lam).loss
            loss_trace.append((t, val))
        direction, gamma = stepper(t, ev.grad)
        nu = wgd_step(nu, direction, gamma)
        if (t + 1) % ba_every == 0:
            pre = evaluate_ba(mu, nu, spec, lam, marginal=True)
            nu = nu.with_weights(pre.marginal / pre.marginal.sum())
            pending = (t, pre.loss)

    ev = evaluate_ba(mu, nu, spec, lam, grad=True)
    if pending is not None:
        ba_steps.append((pending[0], pending[1], ev.loss))
    final = ev.loss if eval_is_train else evaluate_ba(eval_mu, nu, spec, lam).loss
    loss_trace.append((int(iters), final))
    gn_trace.append((int(iters), _gns(nu, ev.grad)))
    wall = 1000 * (time.perf_counter() - t0)

    config = dict(method="hybrid", loss="ba", lam=float(lam), n=int(n), iters=int(iters), batch_size=None,
                  ba_every=int(ba_every), eval_every=eval_every, eval_size=eval_size,
                  schedule=asdict(schedule), distortion=spec.kind, seed=[seed.master, seed.stream])
    return WgdRun(final_nu=nu, loss_trace=loss_trace, grad_norm_trace=gn_trace, config=config,
                  ba_steps=ba_steps, wall_ms=wall)

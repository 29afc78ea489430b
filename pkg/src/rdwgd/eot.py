"""Entropic optimal transport between two discrete measures.

Log-domain Sinkhorn with potentials ``(f, g)`` scaled so that the optimal
coupling reads ``pi_ij = mu_i w_j exp((f_i + g_j - C_ij) / eps)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.special import logsumexp

from .distortion import DistortionSpec, contract_grad_y, pairwise_distortion
from .errors import ConfigError, NumericError, StalePotentialError, UnsupportedOperation
from .measures import DiscreteMeasure
from .ratefn import rate_functional_eval


@dataclass
class SinkhornPotentials:
    f: np.ndarray
    g: np.ndarray
    epsilon: float
    iterations: int
    marginal_violation: float
    converged: bool
    tol: float
    violation_trace: list = field(default_factory=list)

    def coupling(self, mu: DiscreteMeasure, nu: DiscreteMeasure, cost: np.ndarray) -> np.ndarray:
        with np.errstate(divide="ignore"):
            logp = (np.log(mu.weights)[:, None] + np.log(nu.weights)[None, :]
                    + (self.f[:, None] + self.g[None, :] - cost) / self.epsilon)
        return np.exp(logp)


def _g_from_f(f, log_mu, cost, eps):
    return -eps * logsumexp(log_mu[:, None] + (f[:, None] - cost) / eps, axis=0)


def _f_from_g(g, log_w, cost, eps):
    return -eps * logsumexp(log_w[None, :] + (g[None, :] - cost) / eps, axis=1)


def _violation(f, g, log_mu, log_w, cost, eps):
    logp = log_mu[:, None] + log_w[None, :] + (f[:, None] + g[None, :] - cost) / eps
    p = np.exp(logp)
    rows = np.abs(p.sum(axis=1) - np.exp(log_mu)).sum()
    cols = np.abs(p.sum(axis=0) - np.exp(log_w)).sum()
    return float(max(rows, cols))


def sinkhorn_solve(mu: DiscreteMeasure, nu: DiscreteMeasure, spec: DistortionSpec, epsilon: float,
                   tol: float = 1e-9, max_iters: int = 10000, cost: np.ndarray = None,
                   eps_scaling: bool = False, scaling_stages: int = 10) -> SinkhornPotentials:
    """Log-domain Sinkhorn iterations until the L1 marginal violation is at most ``tol``.

    Zero-weight atoms are excluded from the iterations; their ``g`` value is
    filled in afterwards from the closed-form fixed point. A run that hits
    ``max_iters`` is returned with ``converged=False``.

    With ``eps_scaling`` the regularization starts large and decays
    geometrically to ``epsilon`` over ``scaling_stages`` warm-started stages.
    """
    if not (epsilon > 0 and np.isfinite(epsilon)):
        raise ConfigError(f"epsilon must be positive, got {epsilon}")
    if cost is None:
        cost = pairwise_distortion(spec, mu.points, nu.points)
    keep_x = mu.weights > 0
    keep_y = nu.weights > 0
    C = cost[np.ix_(keep_x, keep_y)]
    log_mu = np.log(mu.weights[keep_x])
    log_w = np.log(nu.weights[keep_y])

    eps_list = [epsilon]
    if eps_scaling:
        start = max(epsilon, float(C.max()) if C.size else epsilon)
        eps_list = list(np.geomspace(start, epsilon, scaling_stages))

    f = np.zeros(C.shape[0])
    g = np.zeros(C.shape[1])
    trace = []
    it = 0
    viol = np.inf
    for stage, eps in enumerate(eps_list):
        final = stage == len(eps_list) - 1
        stage_tol = tol if final else max(tol, 1e-3)
        while it < max_iters:
            f = _f_from_g(g, log_w, C, eps)
            g = _g_from_f(f, log_mu, C, eps)
            it += 1
            viol = _violation(f, g, log_mu, log_w, C, eps)
            if final:
                trace.append(viol)
            if viol <= stage_tol:
                break

    if not (np.all(np.isfinite(f)) and np.all(np.isfinite(g))):
        raise NumericError("Sinkhorn potentials became non-finite")

    f_full = np.zeros(mu.n)
    f_full[keep_x] = f
    # closed-form extensions to zero-mass points
    if not keep_x.all():
        f_full[~keep_x] = _f_from_g(g, log_w, cost[np.ix_(~keep_x, keep_y)], epsilon)
    g_full = _g_from_f(f, log_mu, cost[keep_x], epsilon)

    return SinkhornPotentials(f=f_full, g=g_full, epsilon=float(epsilon), iterations=it,
                              marginal_violation=viol, converged=bool(viol <= tol), tol=tol,
                              violation_trace=trace)


def eot_cost(mu: DiscreteMeasure, nu: DiscreteMeasure, spec: DistortionSpec, epsilon: float,
             potentials: SinkhornPotentials) -> float:
    """Entropic OT cost ``<pi, C> + eps * KL(pi | mu ⊗ nu)`` from converged potentials.

    At the fixed point this equals the dual value ``<mu, f> + <nu, g>``.
    """
    if not potentials.converged:
        raise StalePotentialError(
            f"potentials not converged (violation {potentials.marginal_violation:.3g} > {potentials.tol:.3g})")
    if abs(potentials.epsilon - epsilon) > 1e-15 * max(1.0, epsilon):
        raise StalePotentialError("potentials were computed for a different epsilon")
    if potentials.f.shape[0] != mu.n or potentials.g.shape[0] != nu.n:
        raise StalePotentialError("potentials do not match the measures")
    val = float(mu.weights @ potentials.f + nu.weights @ potentials.g)
    if not np.isfinite(val):
        raise NumericError("EOT cost is not finite")
    return val


def eot_value(mu, nu, spec, epsilon, tol=1e-12, max_iters=100000) -> float:
    pot = sinkhorn_solve(mu, nu, spec, epsilon, tol=tol, max_iters=max_iters)
    return eot_cost(mu, nu, spec, epsilon, pot)


def wgd_gradient_eot(mu: DiscreteMeasure, nu: DiscreteMeasure, spec: DistortionSpec, epsilon: float,
                     tol: float = 1e-9, max_iters: int = 10000, potentials: SinkhornPotentials = None,
                     cost: np.ndarray = None) -> np.ndarray:
    """Gradient of the nu-side Sinkhorn potential at each atom, shape (n, d).

    With ``g(y) = -eps log sum_i mu_i exp((f_i - rho(x_i, y)) / eps)``,
    ``grad g(y_j) = sum_i q_ij d rho(x_i, y_j)/dy`` where ``q_.j`` is the
    normalized column of the coupling. Multiply by ``1/eps`` to compare with
    the rate-functional gradient.
    """
    if not spec.differentiable:
        raise UnsupportedOperation(f"{spec.kind} distortion has no gradient")
    if cost is None:
        cost = pairwise_distortion(spec, mu.points, nu.points)
    if potentials is None:
        potentials = sinkhorn_solve(mu, nu, spec, epsilon, tol=tol, max_iters=max_iters, cost=cost)
    if not potentials.converged:
        raise NumericError(f"Sinkhorn did not converge (marginal violation {potentials.marginal_violation:.3g})")
    with np.errstate(divide="ignore"):
        log_mu = np.log(mu.weights)
    logq = log_mu[:, None] + (potentials.f[:, None] - cost) / epsilon
    logq -= logsumexp(logq, axis=0)[None, :]
    return contract_grad_y(spec, mu.points, nu.points, np.exp(logq))


def two_atom_measure(atoms, w: float) -> DiscreteMeasure:
    return DiscreteMeasure(atoms, [w, 1.0 - w])


def equivalence_check(mu: DiscreteMeasure, atoms, spec: DistortionSpec, lam: float,
                      grid_step: float = 1e-3, sinkhorn_tol: float = 1e-12) -> dict:
    """Minimize both objectives over the weight of the first of two fixed atoms.

    Scans a uniform grid over [0, 1], then polishes each minimum with a
    bounded scalar search inside the neighbouring grid cells. Returns the
    minimum of the EOT cost, ``eps`` times the minimum of the rate
    functional, and both argmins.
    """
    atoms = np.asarray(atoms, dtype=np.float64)
    if atoms.ndim == 1:
        atoms = atoms[:, None]
    eps = 1.0 / lam
    grid = np.linspace(0.0, 1.0, int(round(1.0 / grid_step)) + 1)

    def eot_at(w):
        return eot_value(mu, two_atom_measure(atoms, w), spec, eps, tol=sinkhorn_tol)

    def ba_at(w):
        return eps * rate_functional_eval(mu, two_atom_measure(atoms, w), spec, lam)[0]

    out = {}
    for name, fn in (("eot", eot_at), ("ba", ba_at)):
        vals = np.array([fn(w) for w in grid])
        k = int(np.argmin(vals))
        lo, hi = grid[max(k - 1, 0)], grid[min(k + 1, len(grid) - 1)]
        res = minimize_scalar(fn, bounds=(lo, hi), method="bounded", options={"xatol": 1e-10})
        if res.fun < vals[k]:
            out[name] = (float(res.fun), float(res.x))
        else:
            out[name] = (float(vals[k]), float(grid[k]))
        out[name + "_grid"] = (float(vals[k]), float(grid[k]))
    return {
        "min_eot": out["eot"][0], "argmin_eot": out["eot"][1],
        "min_ba_scaled": out["ba"][0], "argmin_ba": out["ba"][1],
        "grid_min_eot": out["eot_grid"][0], "grid_argmin_eot": out["eot_grid"][1],
        "grid_min_ba_scaled": out["ba_grid"][0], "grid_argmin_ba": out["ba_grid"][1],
    }

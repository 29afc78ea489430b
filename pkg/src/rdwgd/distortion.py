"""Distortion functions, pairwise distortion matrices and y-gradients."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError, NumericError, ShapeError, UnsupportedOperation

HALF_SQUARED = "half_squared_euclidean"
SQUARED = "squared_euclidean"
HAMMING = "hamming"
CUSTOM = "custom_matrix"

KINDS = (HALF_SQUARED, SQUARED, HAMMING, CUSTOM)

# d(rho)/dy = scale * (y - x) for the Euclidean kinds.
_GRAD_SCALE = {HALF_SQUARED: 1.0, SQUARED: 2.0}

# Upper bound on rows * n * d elements materialized per block.
DEFAULT_BLOCK_ELEMS = 1 << 22


@dataclass(frozen=True, eq=False)
class DistortionSpec:
    kind: str = HALF_SQUARED
    params: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown distortion kind {self.kind!r}; expected one of {KINDS}")
        if self.kind == CUSTOM:
            if self.params is None:
                raise ConfigError("custom_matrix distortion needs a cost matrix")
            mat = np.array(self.params, dtype=np.float64)
            if mat.ndim != 2 or not np.all(np.isfinite(mat)) or np.any(mat < 0):
                raise ConfigError("custom cost matrix must be 2-D, finite and nonnegative")
            mat.setflags(write=False)
            object.__setattr__(self, "params", mat)

    @property
    def differentiable(self) -> bool:
        return self.kind in _GRAD_SCALE

    @classmethod
    def named(cls, kind: str) -> "DistortionSpec":
        aliases = {"half_squared": HALF_SQUARED, "squared": SQUARED}
        return cls(aliases.get(kind, kind))

    def __repr__(self):
        return f"DistortionSpec({self.kind!r})"


def _as_points(a) -> np.ndarray:
    pts = getattr(a, "points", a)
    pts = np.asarray(pts, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[:, None]
    return pts


def block_rows(m: int, n: int, d: int, block_elems: int = DEFAULT_BLOCK_ELEMS) -> int:
    return max(1, min(m, block_elems // max(1, n * d)))


def _block(spec: DistortionSpec, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    if spec.kind == HAMMING:
        return np.any(xs[:, None, :] != ys[None, :, :], axis=-1).astype(np.float64)
    diff = xs[:, None, :] - ys[None, :, :]
    sq = np.einsum("mnd,mnd->mn", diff, diff)
    return 0.5 * sq if spec.kind == HALF_SQUARED else sq


def pairwise_distortion(spec: DistortionSpec, xs, ys, block_elems: int = DEFAULT_BLOCK_ELEMS) -> np.ndarray:
    """Matrix ``C[i, j] = rho(x_i, y_j)``, computed in row blocks."""
    xs, ys = _as_points(xs), _as_points(ys)
    m, n = xs.shape[0], ys.shape[0]
    if m == 0 or n == 0:
        raise ShapeError("pairwise_distortion needs nonempty point sets")
    if spec.kind == CUSTOM:
        if spec.params.shape != (m, n):
            raise ShapeError(f"custom cost matrix has shape {spec.params.shape}, expected {(m, n)}")
        return np.array(spec.params)
    if xs.shape[1] != ys.shape[1]:
        raise ShapeError(f"dimension mismatch: x has d={xs.shape[1]}, y has d={ys.shape[1]}")

    out = np.empty((m, n))
    step = block_rows(m, n, xs.shape[1], block_elems)
    for lo in range(0, m, step):
        out[lo:lo + step] = _block(spec, xs[lo:lo + step], ys)
    if not np.all(np.isfinite(out)):
        i, j = np.argwhere(~np.isfinite(out))[0]
        raise NumericError(f"distortion overflow at ({i}, {j})")
    return out


def distortion_grad_y(spec: DistortionSpec, x, y) -> np.ndarray:
    """Gradient of ``rho(x, y)`` with respect to ``y``."""
    if not spec.differentiable:
        raise UnsupportedOperation(f"{spec.kind} distortion is not differentiable")
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    if x.shape != y.shape:
        raise ShapeError(f"x has shape {x.shape}, y has shape {y.shape}")
    return _GRAD_SCALE[spec.kind] * (y - x)


def grad_scale(spec: DistortionSpec) -> float:
    """``c`` such that ``d rho(x, y) / dy = c (y - x)``."""
    if not spec.differentiable:
        raise UnsupportedOperation(f"{spec.kind} distortion is not differentiable")
    return _GRAD_SCALE[spec.kind]


def cost_transposed(spec: DistortionSpec, xs_t: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """``C.T`` for Euclidean kinds, from coordinate-major source points ``xs_t`` (d, m).

    Accumulates one coordinate at a time; cheaper than ``pairwise_distortion``
    when there are few atoms.
    """
    out = np.zeros((ys.shape[0], xs_t.shape[1]))
    tmp = np.empty_like(out)
    for k in range(ys.shape[1]):
        np.subtract(ys[:, k:k + 1], xs_t[k][None, :], out=tmp)
        tmp *= tmp
        out += tmp
    if spec.kind == HALF_SQUARED:
        out *= 0.5
    return out


def contract_grad_y(spec: DistortionSpec, xs: np.ndarray, ys: np.ndarray, P: np.ndarray) -> np.ndarray:
    """Row ``j`` is ``sum_i P[i, j] * d rho(x_i, y_j) / d y_j``.

    Uses the linear form of the Euclidean gradients so the (m, n, d) tensor
    of per-pair gradients is never built.
    """
    if not spec.differentiable:
        raise UnsupportedOperation(f"{spec.kind} distortion is not differentiable")
    colsum = P.sum(axis=0)
    # einsum rather than BLAS keeps the reduction order fixed.
    return _GRAD_SCALE[spec.kind] * (colsum[:, None] * ys - np.einsum("ij,id->jd", P, xs))

"""Finite weighted measures on R^d and seeded sampling from them."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, ShapeError

# Weight sums closer to one than this are renormalized silently.
RENORMALIZE_SLACK = 1e-9


@dataclass(frozen=True)
class RngSeed:
    """A (master, stream) pair identifying one reproducible random stream.

    Two seeds with equal fields produce bit-identical draws. ``derive`` makes
    a child stream for a sub-task (one per lambda, per method, ...) so that
    parallel tasks never share generator state.
    """

    master: int
    stream: int = 0

    def __post_init__(self):
        for name in ("master", "stream"):
            v = getattr(self, name)
            if not (0 <= int(v) < 2**64):
                raise ConfigError(f"{name} must be a 64-bit unsigned integer, got {v}")

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=int(self.master), spawn_key=(int(self.stream),))
        return np.random.Generator(np.random.PCG64(ss))

    def derive(self, key: int) -> "RngSeed":
        state = np.random.SeedSequence([int(self.stream), int(key)]).generate_state(1, np.uint64)
        return RngSeed(self.master, int(state[0]))


def as_generator(seed) -> np.random.Generator:
    """Accept an RngSeed, a plain int, or an existing Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    if isinstance(seed, RngSeed):
        return seed.generator()
    return RngSeed(int(seed)).generator()


@dataclass(frozen=True, eq=False)
class DiscreteMeasure:
    """Weighted point cloud ``sum_i w_i delta_{x_i}`` in R^d.

    ``points`` is an (n, d) float64 array and ``weights`` a length-n array on
    the simplex. Both are stored read-only; build a new measure instead of
    mutating one.
    """

    points: np.ndarray
    weights: np.ndarray = field(default=None)

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2:
            raise ShapeError(f"points must be an (n, d) array, got shape {pts.shape}")
        n, d = pts.shape
        if n < 1:
            raise DataError("a measure needs at least one point")
        if d < 1:
            raise ShapeError("points must have at least one coordinate")
        bad = np.argwhere(~np.isfinite(pts))
        if bad.size:
            i, j = bad[0]
            raise DataError(f"non-finite coordinate at row {i}, column {j}")

        if self.weights is None:
            w = np.full(n, 1.0 / n)
        else:
            w = np.array(self.weights, dtype=np.float64).reshape(-1)
            if w.shape != (n,):
                raise ShapeError(f"expected {n} weights, got {w.shape[0]}")
            if not np.all(np.isfinite(w)) or np.any(w < 0):
                raise DataError("weights must be finite and nonnegative")
            total = w.sum()
            if abs(total - 1.0) > RENORMALIZE_SLACK:
                raise DataError(f"weights sum to {total!r}, not 1")
            w = w / total

        pts.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def mean(self) -> np.ndarray:
        return self.weights @ self.points

    def with_points(self, points) -> "DiscreteMeasure":
        """Same weights (bitwise, no renormalization) at new locations."""
        out = DiscreteMeasure(points)
        if out.n != self.n:
            raise ShapeError(f"expected {self.n} points, got {out.n}")
        object.__setattr__(out, "weights", self.weights)
        return out

    def with_weights(self, weights) -> "DiscreteMeasure":
        return DiscreteMeasure(self.points, weights)

    def support(self) -> "DiscreteMeasure":
        """Drop zero-weight atoms."""
        keep = self.weights > 0
        if keep.all():
            return self
        return DiscreteMeasure(self.points[keep], self.weights[keep])

    def __len__(self):
        return self.n

    def __repr__(self):
        return f"DiscreteMeasure(n={self.n}, dim={self.dim})"


def empirical_from_samples(samples) -> DiscreteMeasure:
    """Uniformly weighted measure on the rows of an (m, d) sample matrix."""
    arr = np.asarray(samples, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.shape[0] == 0:
        raise DataError("empty dataset: no samples")
    return DiscreteMeasure(arr)


def draw_minibatch(mu: DiscreteMeasure, m: int, seed, full_batch: bool = False) -> DiscreteMeasure:
    """Draw ``m`` i.i.d. points from ``mu`` and return their empirical measure.

    Sampling uses inverse-CDF lookup on the weight prefix sums. When
    ``full_batch`` is set and ``mu`` has at most ``m`` atoms, ``mu`` itself is
    returned.
    """
    if int(m) < 1:
        raise ConfigError(f"invalid batch size {m}")
    m = int(m)
    if full_batch and mu.n <= m:
        return mu
    idx = sample_indices(mu.weights, m, as_generator(seed))
    return DiscreteMeasure(mu.points[idx])


def sample_indices(weights: np.ndarray, m: int, rng: np.random.Generator) -> np.ndarray:
    cdf = np.cumsum(weights)
    u = rng.random(m) * cdf[-1]
    idx = np.searchsorted(cdf, u, side="right")
    return np.minimum(idx, len(weights) - 1)

"""The per-step DP-SGD mechanism: Poisson sampling, clipping, Gaussian noise."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .linalg import RngStream, gaussian_vector


@dataclass(frozen=True)
class PrivacyParams:
    """Inputs of the mechanism and of the accountant.

    There is deliberately no clipping threshold here: with noise std
    ``sigma * C`` the per-step privacy cost depends on ``(q, sigma)`` only.
    """

    q: float
    sigma: float
    steps: int
    delta: float

    def __post_init__(self):
        if not 0.0 < self.q <= 1.0:
            raise ValueError(f"q must lie in (0, 1], got {self.q}")
        if not self.sigma > 0.0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if int(self.steps) != self.steps or self.steps < 1:
            raise ValueError(f"steps must be a positive integer, got {self.steps}")
        object.__setattr__(self, "steps", int(self.steps))
        if not 0.0 < self.delta < 1.0:
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")


@dataclass(frozen=True)
class NoisyUpdate:
    g_tilde: Optional[np.ndarray]

    @property
    def skipped(self) -> bool:
        return self.g_tilde is None


SKIPPED = NoisyUpdate(None)


def poisson_subsample(n: int, q: float, rng: RngStream) -> np.ndarray:
    """Ascending indices, each of ``0..n-1`` kept independently with probability ``q``.

    One uniform draw per index is consumed regardless of ``q``.
    """
    if n < 1:
        raise ValueError("dataset size must be positive")
    if not 0.0 <= q <= 1.0:
        raise ValueError("q must lie in [0, 1]")
    return np.flatnonzero(rng.uniform(n) < q)


def clip_factors(norms: np.ndarray, c: float) -> np.ndarray:
    return np.maximum(1.0, norms / c)


def clip_gradient(g, c: float) -> np.ndarray:
    """``g / max(1, |g| / c)``."""
    g = np.asarray(g, dtype=np.float64)
    return clip_rows(g.reshape(1, -1), c).reshape(g.shape)


def clip_rows(grads: np.ndarray, c: float) -> np.ndarray:
    """Row-wise :func:`clip_gradient` of an ``(|L|, d)`` matrix."""
    if not c > 0:
        raise ValueError("clipping threshold must be positive")
    grads = np.asarray(grads, dtype=np.float64)
    norms = np.sqrt(np.einsum("ij,ij->i", grads, grads))
    return grads / clip_factors(norms, c)[:, None]


def clipped_sum(grads: np.ndarray, c: float) -> np.ndarray:
    # numpy's pairwise reduction over axis 0 has a fixed topology for a given shape
    return clip_rows(grads, c).sum(axis=0)


def noisy_average(
    grads: np.ndarray,
    c: float,
    sigma: float,
    rng: RngStream,
    on_noise: Callable[[float, float], None] | None = None,
) -> NoisyUpdate:
    """Clip raw per-example gradients at ``c``, add N(0, (sigma c)^2 I) to the sum, divide by |L|.

    An empty batch returns :data:`SKIPPED` without touching ``rng``.
    ``on_noise(c, std)`` is an instrumentation hook called just before the
    noise is drawn.
    """
    grads = np.asarray(grads, dtype=np.float64)
    if grads.ndim != 2:
        raise ValueError("grads must be an (|L|, d) matrix")
    if grads.shape[0] == 0:
        return SKIPPED
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    total = clipped_sum(grads, c)
    std = sigma * c
    if on_noise is not None:
        on_noise(c, std)
    z = gaussian_vector(grads.shape[1], std, rng)
    return NoisyUpdate((total + z) / grads.shape[0])


def _removed_row(with_rows: np.ndarray, without_rows: np.ndarray) -> int:
    if with_rows.ndim != 2 or without_rows.ndim != 2 or with_rows.shape[1] != without_rows.shape[1]:
        raise ValueError("gradient sets must be matrices of equal width")
    if with_rows.shape[0] != without_rows.shape[0] + 1:
        raise ValueError("gradient sets must differ by exactly one row")
    n = without_rows.shape[0]
    i = 0
    while i < n and np.array_equal(with_rows[i], without_rows[i]):
        i += 1
    if np.array_equal(with_rows[i + 1:], without_rows[i:]):
        return i
    raise ValueError("gradient sets are not neighbours (no single removed row)")


def sensitivity_probe(grads_with, grads_without, c: float) -> float:
    """Norm of the change in the clipped sum when one example is removed.

    The two sets must coincide except for one extra row in ``grads_with``.
    """
    a = np.asarray(grads_with, dtype=np.float64)
    b = np.asarray(grads_without, dtype=np.float64)
    _removed_row(a, b)
    s_with = clipped_sum(a, c)
    s_without = clipped_sum(b, c) if b.shape[0] else np.zeros(a.shape[1])
    diff = s_with - s_without
    return float(np.sqrt(np.dot(diff, diff)))

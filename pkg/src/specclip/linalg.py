"""Small dense linear algebra and named random streams.

Matrices are plain 2-D float64 numpy arrays; :func:`as_matrix` is the
validation gate used wherever a matrix enters the package.
"""
from __future__ import annotations

import zlib
from functools import lru_cache

import numpy as np

_JACOBI_TOL = 1e-12
_MAX_SWEEPS = 80


def as_matrix(m) -> np.ndarray:
    """Return ``m`` as a C-contiguous float64 2-D array, rejecting NaN/Inf."""
    a = np.array(m, dtype=np.float64, copy=True, order="C")
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise ValueError(f"expected a non-empty 2-D matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix contains non-finite entries")
    return a


@lru_cache(maxsize=64)
def _round_robin(n: int) -> tuple[np.ndarray, np.ndarray]:
    # Tournament schedule: n-1 rounds of n/2 disjoint column pairs (n even).
    players = list(range(n))
    left, right = [], []
    for _ in range(n - 1):
        half = n // 2
        a = players[:half]
        b = players[::-1][:half]
        left.append(a)
        right.append(b)
        players = [players[0], players[-1]] + players[1:-1]
    return np.array(left, dtype=np.intp), np.array(right, dtype=np.intp)


def singular_values(m) -> np.ndarray:
    """Singular values of ``m`` in descending order (one-sided Jacobi).

    Columns of the (possibly transposed) matrix are orthogonalised by plane
    rotations until every pair satisfies ``|a_i . a_j| <= 1e-12 * |a_i| |a_j|``.
    Disjoint pairs are rotated together following a round-robin ordering, so
    each sweep is ``n - 1`` vectorised passes.  Tall inputs are first reduced
    to their triangular QR factor.  The singular values are the
    final column norms.
    """
    a = as_matrix(m)
    if a.shape[1] > a.shape[0]:
        a = a.T.copy()
    rows, n = a.shape
    k = n
    if rows > 2 * n:
        # QR preconditioning: R has the same singular values and is n x n.
        a = np.linalg.qr(a, mode="r")
        rows = n
    if n == 1:
        return np.array([np.sqrt(np.dot(a[:, 0], a[:, 0]))])
    if n % 2:
        a = np.hstack([a, np.zeros((rows, 1))])
        n += 1
    left, right = _round_robin(n)
    u = a.T.copy()  # one row per column of the working matrix
    for _ in range(_MAX_SWEEPS):
        rotated = False
        for i, j in zip(left, right):
            ui, uj = u[i], u[j]
            alpha = np.einsum("ij,ij->i", ui, ui)
            beta = np.einsum("ij,ij->i", uj, uj)
            gamma = np.einsum("ij,ij->i", ui, uj)
            scale = np.sqrt(alpha * beta)
            active = np.abs(gamma) > _JACOBI_TOL * scale
            if not active.any():
                continue
            rotated = True
            g = np.where(active, gamma, 1.0)
            zeta = (beta - alpha) / (2.0 * g)
            t = np.copysign(1.0, zeta) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            c = np.where(active, c, 1.0)[:, None]
            s = np.where(active, s, 0.0)[:, None]
            u[i] = c * ui - s * uj
            u[j] = s * ui + c * uj
        if not rotated:
            break
    sv = np.sqrt(np.einsum("ij,ij->i", u, u))
    return np.sort(sv)[::-1][:k].copy()


def l2_norm(v) -> float:
    """Euclidean norm of a real vector, scaled so tiny or huge entries neither underflow nor overflow."""
    v = np.asarray(v, dtype=np.float64).ravel()
    if v.size == 0:
        return 0.0
    top = float(np.max(np.abs(v)))
    if top == 0.0 or not np.isfinite(top):
        return top
    w = v / top
    return top * float(np.sqrt(np.dot(w, w)))


class RngStream:
    """A named, reproducible stream of random numbers.

    Backed by the counter-based Philox generator keyed with
    ``(seed, crc32(stream_id))``; the same pair gives the same sequence on every
    platform, and distinct stream ids give independent keys.
    """

    def __init__(self, seed: int, stream_id: str):
        self.seed = int(seed)
        self.stream_id = str(stream_id)
        key = np.array(
            [self.seed % 2**64, zlib.crc32(self.stream_id.encode("utf-8"))],
            dtype=np.uint64,
        )
        self.generator = np.random.Generator(np.random.Philox(key=key))

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id!r})"

    def standard_normal(self, n: int) -> np.ndarray:
        return self.generator.standard_normal(n)

    def uniform(self, n: int) -> np.ndarray:
        return self.generator.random(n)


def gaussian_vector(length: int, std: float, rng: RngStream) -> np.ndarray:
    """``length`` i.i.d. draws from N(0, std^2).

    Always consumes exactly ``length`` standard-normal draws (numpy ziggurat,
    in index order) and scales them, so ``std = 0`` advances the stream the
    same way as any other std.
    """
    if std < 0:
        raise ValueError("std must be non-negative")
    z = rng.standard_normal(int(length))
    if std == 0:
        return np.zeros(int(length))
    return std * z

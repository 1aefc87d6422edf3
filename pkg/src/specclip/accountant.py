"""Renyi-DP accounting for the Poisson-subsampled Gaussian mechanism.

For integer order ``a`` the per-step RDP is ``log(A_a) / (a - 1)`` with

    A_a = sum_{k=0}^{a} binom(a, k) (1-q)^(a-k) q^k exp((k^2 - k) / (2 sigma^2)),

accumulated in the log domain.  ``log A`` is convex in the order, so
fractional orders use the linear interpolation of ``log A`` between the two
neighbouring integers (``log A_1 = 0``), which upper-bounds the exact value;
the result is capped by the full-batch Gaussian value ``a / (2 sigma^2)``,
another valid bound.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

from .dp import PrivacyParams

DEFAULT_ORDERS = (
    1.25, 1.5, 1.75, 2, 2.5, 3, 4, 5, 6, 8, 10, 12, 16, 20, 24, 32, 48, 64, 128, 256, 512,
)


@dataclass(frozen=True)
class RdpCurve:
    orders: tuple[float, ...]
    values: tuple[float, ...]

    def __post_init__(self):
        orders = tuple(float(a) for a in self.orders)
        values = tuple(float(v) for v in self.values)
        if len(orders) != len(values) or not orders:
            raise ValueError("orders and values must be non-empty and of equal length")
        if any(a <= 1 for a in orders):
            raise ValueError("RDP orders must exceed 1")
        if any(not v >= 0 for v in values):
            raise ValueError("RDP values must be non-negative")
        object.__setattr__(self, "orders", orders)
        object.__setattr__(self, "values", values)


def _logsumexp(xs: Sequence[float]) -> float:
    m = max(xs)
    if m == -math.inf:
        return m
    return m + math.log(math.fsum(math.exp(x - m) for x in xs))


def _log_a_int(q: float, sigma: float, alpha: int) -> float:
    if alpha <= 1:
        return 0.0
    log_q, log_1mq = math.log(q), math.log1p(-q)
    lg_a = math.lgamma(alpha + 1)
    terms = []
    for k in range(alpha + 1):
        log_binom = lg_a - math.lgamma(k + 1) - math.lgamma(alpha - k + 1)
        terms.append(
            log_binom + k * log_q + (alpha - k) * log_1mq + (k * k - k) / (2.0 * sigma * sigma)
        )
    # A_a >= 1 mathematically; clip rounding below zero
    return max(0.0, _logsumexp(terms))


def rdp_subsampled_gaussian(q: float, sigma: float, order: float) -> float:
    """Per-step RDP at ``order`` of the Poisson-subsampled Gaussian mechanism."""
    if not order > 1:
        raise ValueError(f"RDP order must exceed 1, got {order}")
    if not 0.0 <= q <= 1.0:
        raise ValueError("q must lie in [0, 1]")
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    if q == 0:
        return 0.0
    if q == 1:
        return order / (2.0 * sigma * sigma)
    if float(order).is_integer():
        return _log_a_int(q, sigma, int(order)) / (order - 1)
    lo = math.floor(order)
    hi = lo + 1
    t = order - lo
    log_a = (1 - t) * _log_a_int(q, sigma, lo) + t * _log_a_int(q, sigma, hi)
    # the unsubsampled Gaussian bound also holds and can be tighter when sigma is small
    return min(log_a / (order - 1), order / (2.0 * sigma * sigma))


def rdp_curve(q: float, sigma: float, orders: Sequence[float] = DEFAULT_ORDERS) -> RdpCurve:
    return RdpCurve(tuple(orders), tuple(rdp_subsampled_gaussian(q, sigma, a) for a in orders))


def compose(curve: RdpCurve, steps: int) -> RdpCurve:
    if steps < 1:
        raise ValueError("steps must be positive")
    return RdpCurve(curve.orders, tuple(v * steps for v in curve.values))


def candidate_epsilons(curve: RdpCurve, delta: float) -> list[tuple[float, float, float]]:
    """``(order, rdp, eps)`` for every order, with ``eps = rdp + ln(1/delta)/(order-1)``."""
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    log_inv_delta = math.log(1.0 / delta)
    return [(a, v, v + log_inv_delta / (a - 1)) for a, v in zip(curve.orders, curve.values)]


def rdp_to_dp(curve: RdpCurve, delta: float) -> tuple[float, float]:
    """Smallest ``eps`` over the curve's orders and the order achieving it.

    Ties go to the smallest order.
    """
    best_eps, best_order = math.inf, math.inf
    for a, _, eps in candidate_epsilons(curve, delta):
        if eps < best_eps or (eps == best_eps and a < best_order):
            best_eps, best_order = eps, a
    return best_eps, best_order


def epsilon_of(p: PrivacyParams, orders: Sequence[float] = DEFAULT_ORDERS) -> float:
    return rdp_to_dp(compose(rdp_curve(p.q, p.sigma, orders), p.steps), p.delta)[0]


def sigma_for_epsilon(
    target_eps: float,
    q: float,
    steps: int,
    delta: float,
    tol: float = 1e-3,
    orders: Sequence[float] = DEFAULT_ORDERS,
) -> float:
    """Smallest noise multiplier (to bisection tolerance) whose epsilon is at most ``target_eps``.

    The returned sigma satisfies ``target_eps - tol <= eps(sigma) <= target_eps``.
    """
    if not target_eps > 0:
        raise ValueError("target epsilon must be positive")

    def eps(s):
        return epsilon_of(PrivacyParams(q, s, steps, delta), orders)

    lo, hi = 1e-2, 1.0
    while eps(hi) > target_eps:
        lo, hi = hi, hi * 2
        if hi > 1e7:
            raise ValueError("target epsilon unreachable")
    if eps(lo) <= target_eps:
        raise ValueError("target epsilon is met by every sigma above 0.01; nothing to calibrate")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        e = eps(mid)
        if e > target_eps:
            lo = mid
        else:
            hi = mid
            if target_eps - e <= tol:
                break
    return hi

"""Heavy-tailed spectral exponent of weight matrices.

The eigenvalues of ``W^T W`` are the squared singular values of ``W``; the
upper tail is fitted with a Hill estimator, reported in the density
convention ``p(lambda) ~ lambda^-zeta`` (``zeta = 1 + tail index``).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .linalg import singular_values
from .model import probe_matrix

RANK_CUTOFF = 1e-12
TAIL_MODES = ("top_k", "xmin_threshold")


class DegenerateSpectrumError(ValueError):
    """The spectrum does not support a tail fit (too short, zero, or flat)."""


class ProbeFailedError(RuntimeError):
    """Every layer of a probe set produced a degenerate spectrum."""


@dataclass(frozen=True)
class TailFitRule:
    """Which eigenvalues enter the Hill fit.

    ``top_k`` with ``k=None`` uses ``k = max(min_tail_size, ceil(r_eff / 4))``
    where ``r_eff`` counts eigenvalues above the numerical rank cutoff.
    """

    mode: str = "top_k"
    k: Optional[int] = None
    lambda_min: Optional[float] = None
    min_tail_size: int = 8

    def __post_init__(self):
        if self.mode not in TAIL_MODES:
            raise ValueError(f"unknown tail-fit mode {self.mode!r}")
        if self.min_tail_size < 5:
            raise ValueError("min_tail_size must be at least 5")
        if self.k is not None and self.k < 1:
            raise ValueError("k must be positive")
        if self.mode == "xmin_threshold" and not (self.lambda_min and self.lambda_min > 0):
            raise ValueError("xmin_threshold mode needs a positive lambda_min")


@dataclass(frozen=True)
class ProbeSpec:
    layer_refs: tuple[Union[str, int], ...] = ("fc1",)

    def __post_init__(self):
        refs = tuple(self.layer_refs)
        if not refs:
            raise ValueError("a probe set needs at least one layer")
        object.__setattr__(self, "layer_refs", refs)


@dataclass(frozen=True)
class SpectralReading:
    zeta: float
    tail_size: int
    layer_ref: Union[str, int, None] = None


def eigenvalues(w) -> np.ndarray:
    """Eigenvalues of ``W^T W`` (squared singular values), descending."""
    s = singular_values(w)
    return s * s


def _tail_size(positive: np.ndarray, rule: TailFitRule) -> int:
    if rule.mode == "top_k":
        if rule.k is not None:
            return rule.k
        return max(rule.min_tail_size, math.ceil(positive.size / 4))
    return int(np.count_nonzero(positive > rule.lambda_min))


def fit_tail_exponent(lambdas, rule: TailFitRule = TailFitRule(), layer_ref=None) -> SpectralReading:
    """Hill fit ``zeta = 1 + k / sum_{i<=k} ln(lambda_i / lambda_{k+1})``.

    Raises :class:`DegenerateSpectrumError` when fewer than
    ``rule.min_tail_size`` eigenvalues sit strictly above the cut, when the
    reference eigenvalue ``lambda_{k+1}`` is missing or zero, or when the tail
    is flat.
    """
    lam = np.sort(np.asarray(lambdas, dtype=np.float64).ravel())[::-1]
    if lam.size == 0 or not lam[0] > 0:
        raise DegenerateSpectrumError("spectrum has no positive eigenvalue")
    if not np.all(np.isfinite(lam)):
        raise DegenerateSpectrumError("spectrum contains non-finite values")
    positive = lam[lam > RANK_CUTOFF * lam[0]]
    k = _tail_size(positive, rule)
    if k < rule.min_tail_size:
        raise DegenerateSpectrumError(f"tail of {k} eigenvalues is below the minimum {rule.min_tail_size}")
    if k + 1 > positive.size:
        raise DegenerateSpectrumError(
            f"need {k + 1} positive eigenvalues for a {k}-point tail, have {positive.size}"
        )
    log_ratios = np.log(positive[:k] / positive[k])
    total = float(log_ratios.sum())
    if not total > 0:
        raise DegenerateSpectrumError("flat tail: all log-ratios are zero")
    return SpectralReading(1.0 + k / total, k, layer_ref)


def layer_readings(p, spec: ProbeSpec, rule: TailFitRule = TailFitRule()) -> list[SpectralReading]:
    """Per-layer fits; degenerate layers are dropped."""
    out = []
    for ref in spec.layer_refs:
        w = probe_matrix(p, ref)
        try:
            out.append(fit_tail_exponent(eigenvalues(w), rule, layer_ref=ref))
        except DegenerateSpectrumError:
            continue
    return out


def median(values: Sequence[float]) -> float:
    v = sorted(values)
    n = len(v)
    if n == 0:
        raise ValueError("median of an empty sequence")
    mid = n // 2
    return float(v[mid]) if n % 2 else 0.5 * (v[mid - 1] + v[mid])


def ww_probe(p, spec: ProbeSpec, rule: TailFitRule = TailFitRule()) -> float:
    """Spectral exponent of the probe set: the single layer's value, or the median."""
    readings = layer_readings(p, spec, rule)
    if not readings:
        raise ProbeFailedError(f"all probe layers {list(spec.layer_refs)} were degenerate")
    return median([r.zeta for r in readings])

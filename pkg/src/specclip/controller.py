"""Log-domain saturated regulation of the clipping threshold.

State is ``u = log C`` and the smoothed exponent ``zeta_hat``.  One control
step is::

    zeta_hat <- beta * zeta_hat + (1 - beta) * zeta
    phi      =  sat((zeta_hat - zeta_star) / r)
    u        <- u + kappa * phi
    C        =  exp(u), optionally clamped to [c_min, c_max]

After a binding clamp ``u`` is reset to ``log C`` so it never winds up
outside the clamp interval.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace


@dataclass(frozen=True)
class ControllerConfig:
    zeta_star: float = 4.0
    r: float = 2.0
    kappa: float = 0.1
    beta: float = 0.98
    probe_period: int = 50
    c_min: float = 0.3
    c_max: float = 5.0
    clamp_enabled: bool = True

    def __post_init__(self):
        if not self.r > 0:
            raise ValueError("zone radius r must be positive")
        if self.kappa < 0:
            raise ValueError("kappa must be non-negative")
        if not 0.0 <= self.beta < 1.0:
            raise ValueError("beta must lie in [0, 1)")
        if int(self.probe_period) != self.probe_period or self.probe_period < 1:
            raise ValueError("probe_period must be a positive integer")
        if not 0 < self.c_min <= self.c_max:
            raise ValueError("need 0 < c_min <= c_max")

    @property
    def zone(self) -> tuple[float, float]:
        return self.zeta_star - self.r, self.zeta_star + self.r


@dataclass(frozen=True)
class ClipControllerState:
    u: float
    zeta_hat: float
    clamp_hits_min: int = 0
    clamp_hits_max: int = 0

    @property
    def c(self) -> float:
        return math.exp(self.u)


def init_state(cfg: ControllerConfig, c0: float) -> ClipControllerState:
    if not c0 > 0:
        raise ValueError(f"initial clipping threshold must be positive, got {c0}")
    return ClipControllerState(u=math.log(c0), zeta_hat=cfg.zeta_star)


def sat(x: float) -> float:
    return max(-1.0, min(1.0, x))


def clamp(c: float, c_min: float, c_max: float) -> float:
    return min(c_max, max(c_min, c))


def ema_update(state: ClipControllerState, zeta_new: float, beta: float) -> ClipControllerState:
    return replace(state, zeta_hat=beta * state.zeta_hat + (1.0 - beta) * zeta_new)


def control_step(
    state: ClipControllerState, zeta_new: float, cfg: ControllerConfig
) -> tuple[ClipControllerState, float]:
    """Fold a fresh probe reading into the state and return the next threshold."""
    if not math.isfinite(zeta_new):
        raise ValueError("zeta_new must be finite")
    state = ema_update(state, zeta_new, cfg.beta)
    phi = sat((state.zeta_hat - cfg.zeta_star) / cfg.r)
    u = state.u + cfg.kappa * phi
    c_next = math.exp(u)
    hits_min, hits_max = state.clamp_hits_min, state.clamp_hits_max
    if cfg.clamp_enabled:
        clamped = clamp(c_next, cfg.c_min, cfg.c_max)
        if clamped != c_next:
            if clamped == cfg.c_max:
                hits_max += 1
            else:
                hits_min += 1
            c_next = clamped
            u = math.log(c_next)
    return replace(state, u=u, clamp_hits_min=hits_min, clamp_hits_max=hits_max), c_next

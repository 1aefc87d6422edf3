"""DP-SGD training loop with a spectrally regulated clipping threshold.

Every step: Poisson-sample a batch, clip per-example gradients at the current
``C``, add Gaussian noise of std ``sigma * C`` to the sum, average and step.
Every ``K`` steps (when the controller is enabled) the probe layer(s) of the
updated weights are read and the controller proposes the next ``C``; in
between ``C`` and ``zeta_hat`` are carried over unchanged.  An empty batch
skips the whole step, controller included.
"""
from __future__ import annotations

import logging
import math
import os
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from . import accountant
from .controller import ClipControllerState, ControllerConfig, control_step, init_state
from .dp import PrivacyParams, noisy_average, poisson_subsample
from .linalg import RngStream
from .model import Batch, MlpConfig, MlpParams, apply_update, evaluate, init_params, per_example_grads
from .spectral import ProbeFailedError, ProbeSpec, TailFitRule, ww_probe

log = logging.getLogger(__name__)

THREADS_ENV = "SPECCLIP_THREADS"


class ConfigError(ValueError):
    """A configuration is invalid or a sweep block is not privacy-matched."""


@dataclass(frozen=True)
class LrSchedule:
    """Constant learning rate, or step decay by ``gamma`` every ``step_size`` steps."""

    lr: float = 0.1
    kind: str = "constant"
    step_size: int = 0
    gamma: float = 1.0

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.kind not in ("constant", "step"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.kind == "step" and self.step_size < 1:
            raise ValueError("step decay needs step_size >= 1")

    def __call__(self, t: int) -> float:
        if self.kind == "constant":
            return self.lr
        return self.lr * self.gamma ** (t // self.step_size)


@dataclass(frozen=True)
class Seeds:
    init: int = 0
    subsample: int = 1
    noise: int = 2
    data: int = 3

    def shifted(self, offset: int) -> "Seeds":
        return Seeds(self.init + offset, self.subsample + offset, self.noise + offset, self.data + offset)


@dataclass(frozen=True)
class TrainConfig:
    privacy: PrivacyParams
    model: MlpConfig
    controller: ControllerConfig = ControllerConfig()
    c0: float = 1.0
    lr_schedule: LrSchedule = LrSchedule()
    probe: ProbeSpec = ProbeSpec()
    tail_rule: TailFitRule = TailFitRule()
    seeds: Seeds = Seeds()
    controller_enabled: bool = True
    eval_every: Optional[int] = None  # None: once per epoch-equivalent; 0: final only

    def __post_init__(self):
        if not self.c0 > 0:
            raise ConfigError("c0 must be positive")
        if self.eval_every is not None and self.eval_every < 0:
            raise ConfigError("eval_every must be non-negative")


@dataclass
class StepRecord:
    step: int
    c: float  # threshold used to clip (and scale noise) at this step
    zeta_raw: Optional[float]  # probe reading taken after this step, if any
    zeta_hat: float  # smoothed exponent after this step
    batch_size: int
    loss: float
    skipped: bool
    clamp_min: bool = False
    clamp_max: bool = False


@dataclass
class RunLog:
    records: list[StepRecord] = field(default_factory=list)
    c_final: float = math.nan
    epsilon: float = math.nan
    delta: float = math.nan
    accuracy: float = math.nan
    test_loss: float = math.nan
    t_train: float = 0.0
    t_eval: float = 0.0
    t_probe: float = 0.0
    probe_failures: int = 0
    clamp_hits_min: int = 0
    clamp_hits_max: int = 0
    aborted: Optional[str] = None

    @property
    def t_total(self) -> float:
        return self.t_train + self.t_eval

    def c_series(self) -> np.ndarray:
        return np.array([r.c for r in self.records])

    def median_c(self) -> float:
        return float(np.median(self.c_series())) if self.records else math.nan

    def mean_c(self) -> float:
        return float(np.mean(self.c_series())) if self.records else math.nan

    def probe_steps(self) -> list[int]:
        return [r.step for r in self.records if r.zeta_raw is not None]


def _eval_period(cfg: TrainConfig) -> int:
    if cfg.eval_every is None:
        return max(1, math.ceil(1.0 / cfg.privacy.q))
    return cfg.eval_every


def train(
    cfg: TrainConfig,
    data: Batch,
    test: Batch,
    on_noise: Callable[[int, float, float], None] | None = None,
    params: MlpParams | None = None,
) -> tuple[MlpParams, RunLog]:
    """Run WW-DP-SGD (or fixed-C DP-SGD with the controller disabled).

    ``on_noise(t, c, std)`` is called at every non-empty step with the
    threshold used for clipping and the noise std actually drawn.
    """
    if len(data) == 0:
        raise ConfigError("training set is empty")
    priv, ctrl = cfg.privacy, cfg.controller
    sub_rng = RngStream(cfg.seeds.subsample, "subsample")
    noise_rng = RngStream(cfg.seeds.noise, "noise")
    if params is None:
        params = init_params(cfg.model, RngStream(cfg.seeds.init, "init"))
    state: ClipControllerState = init_state(ctrl, cfg.c0)
    c = cfg.c0
    run = RunLog(delta=priv.delta)
    eval_period = _eval_period(cfg)
    n = len(data)

    for t in range(priv.steps):
        t0 = time.perf_counter()
        idx = poisson_subsample(n, priv.q, sub_rng)
        if idx.size == 0:
            run.records.append(StepRecord(t, c, None, state.zeta_hat, 0, math.nan, True))
            run.t_train += time.perf_counter() - t0
            continue
        grads, losses = per_example_grads(params, data.subset(idx))
        hook = None if on_noise is None else (lambda cc, std, _t=t: on_noise(_t, cc, std))
        update = noisy_average(grads, c, priv.sigma, noise_rng, on_noise=hook)
        params = apply_update(params, update.g_tilde, cfg.lr_schedule(t))
        loss = float(np.mean(losses))
        rec = StepRecord(t, c, None, state.zeta_hat, int(idx.size), loss, False)
        run.records.append(rec)
        if not math.isfinite(loss) or not np.all(np.isfinite(update.g_tilde)):
            run.aborted = f"non-finite training loss at step {t}"
            log.error(run.aborted)
            run.t_train += time.perf_counter() - t0
            break

        if cfg.controller_enabled and (t + 1) % ctrl.probe_period == 0:
            tp = time.perf_counter()
            try:
                zeta = ww_probe(params, cfg.probe, cfg.tail_rule)
            except ProbeFailedError as exc:
                run.probe_failures += 1
                log.warning("probe failed at step %d: %s", t, exc)
            else:
                prev = state
                state, c = control_step(state, zeta, ctrl)
                rec.zeta_raw = zeta
                rec.zeta_hat = state.zeta_hat
                rec.clamp_min = state.clamp_hits_min > prev.clamp_hits_min
                rec.clamp_max = state.clamp_hits_max > prev.clamp_hits_max
            run.t_probe += time.perf_counter() - tp
        run.t_train += time.perf_counter() - t0

        if eval_period and (t + 1) % eval_period == 0 and t + 1 < priv.steps:
            te = time.perf_counter()
            evaluate(params, test)
            run.t_eval += time.perf_counter() - te

    run.c_final = c
    run.clamp_hits_min = state.clamp_hits_min
    run.clamp_hits_max = state.clamp_hits_max
    if run.aborted is None:
        te = time.perf_counter()
        run.accuracy, run.test_loss = evaluate(params, test)
        run.t_eval += time.perf_counter() - te
    run.epsilon = accountant.epsilon_of(priv)
    return params, run


def timing_report(run: RunLog, baseline: RunLog | None = None) -> dict:
    """Wall-clock totals, probe share of training time, and overhead vs a baseline run."""
    report = {
        "total": run.t_total,
        "train": run.t_train,
        "eval": run.t_eval,
        "probe": run.t_probe,
        "probe_share_pct": 100.0 * run.t_probe / run.t_train if run.t_train > 0 else 0.0,
        "overhead_pct": None,
    }
    if baseline is not None and baseline.t_total > 0:
        report["overhead_pct"] = 100.0 * (run.t_total / baseline.t_total - 1.0)
    return report


@dataclass
class RunResult:
    label: str
    repeat: int
    cfg: TrainConfig
    log: RunLog


@dataclass
class SummaryRow:
    label: str
    epsilon: float
    acc_mean: float
    acc_std: float
    n_runs: int
    median_c: float
    final_c: float
    mean_c: float
    clamp_hits_min: float
    clamp_hits_max: float
    controller_enabled: bool

    @property
    def single_sample(self) -> bool:
        return self.n_runs == 1


@dataclass
class SweepResult:
    runs: list[RunResult]
    rows: list[SummaryRow]


def check_matched_privacy(cfgs: Sequence[TrainConfig]) -> float:
    """Raise :class:`ConfigError` unless every config shares ``(q, sigma, T, delta)``; return the common epsilon."""
    if not cfgs:
        raise ConfigError("empty sweep block")
    first = cfgs[0].privacy
    for c in cfgs[1:]:
        if c.privacy != first:
            raise ConfigError(f"privacy mismatch in matched block: {c.privacy} vs {first}")
    eps = {accountant.epsilon_of(c.privacy) for c in cfgs}
    if len(eps) != 1:
        raise ConfigError(f"accountant epsilons differ within block: {sorted(eps)}")
    return eps.pop()


def default_workers() -> int:
    raw = os.environ.get(THREADS_ENV)
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    return os.cpu_count() or 1


def _summarise(label: str, runs: list[RunResult]) -> SummaryRow:
    accs = [r.log.accuracy for r in runs]
    return SummaryRow(
        label=label,
        epsilon=runs[0].log.epsilon,
        acc_mean=float(np.mean(accs)),
        acc_std=float(statistics.stdev(accs)) if len(accs) > 1 else 0.0,
        n_runs=len(runs),
        median_c=float(np.mean([r.log.median_c() for r in runs])),
        final_c=float(np.mean([r.log.c_final for r in runs])),
        mean_c=float(np.mean([r.log.mean_c() for r in runs])),
        clamp_hits_min=float(np.mean([r.log.clamp_hits_min for r in runs])),
        clamp_hits_max=float(np.mean([r.log.clamp_hits_max for r in runs])),
        controller_enabled=runs[0].cfg.controller_enabled,
    )


def sweep(
    cfgs: Sequence[tuple[str, TrainConfig]],
    repeats: int,
    data_factory: Callable[[str, TrainConfig], tuple[Batch, Batch]],
    matched: bool = True,
    workers: int | None = None,
) -> SweepResult:
    """Run every labelled config ``repeats`` times (seeds shifted by the repeat index).

    ``data_factory(label, cfg)`` builds the train/test split for a run (``cfg``
    carries the shifted seeds).  A matched block is checked before anything runs.
    """
    if repeats < 1:
        raise ConfigError("repeats must be positive")
    labels = [lbl for lbl, _ in cfgs]
    if len(set(labels)) != len(labels):
        raise ConfigError("sweep labels must be unique")
    if matched:
        check_matched_privacy([c for _, c in cfgs])
    jobs = [
        (label, r, replace(cfg, seeds=cfg.seeds.shifted(r)))
        for label, cfg in cfgs
        for r in range(repeats)
    ]

    def run_one(job):
        label, r, cfg = job
        train_b, test_b = data_factory(label, cfg)
        _, run = train(cfg, train_b, test_b)
        return RunResult(label, r, cfg, run)

    n_workers = workers or default_workers()
    if n_workers == 1 or len(jobs) == 1:
        results = [run_one(j) for j in jobs]
    else:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            results = list(pool.map(run_one, jobs))
    rows = [_summarise(label, [r for r in results if r.label == label]) for label in labels]
    return SweepResult(results, rows)

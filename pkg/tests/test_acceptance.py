"""Acceptance gate: nine end-to-end criteria at their stated tolerances.

Each test records one pass/fail line; the lines are printed in the pytest
terminal summary (and by running this file directly).
"""
import math
import time
from dataclasses import replace

import mpmath as mp
import numpy as np
import pytest
from scipy.stats import ortho_group

from conftest import record_acceptance
from specclip.accountant import epsilon_of, rdp_subsampled_gaussian
from specclip.controller import ClipControllerState, ControllerConfig, clamp, control_step, init_state
from specclip.dp import PrivacyParams, clipped_sum, noisy_average, poisson_subsample, sensitivity_probe
from specclip.harness.config import ExperimentConfig
from specclip.harness.data import DatasetSpec, build_dataset
from specclip.harness.experiments import C_GRID, run_block
from specclip.linalg import RngStream
from specclip.model import MlpConfig, MlpParams, init_params, per_example_grads
from specclip.spectral import ProbeSpec, TailFitRule, fit_tail_exponent, ww_probe
from specclip.trainer import LrSchedule, Seeds, TrainConfig, train

pytestmark = pytest.mark.acceptance


def replay_dpsgd(cfg, train_b, c_schedule=None):
    """Plain DP-SGD from the primitives; ``c_schedule[t]`` overrides the threshold per step.

    Returns the final parameters and the per-step losses (NaN on empty batches).
    Noise is drawn only for non-empty batches.
    """
    sub = RngStream(cfg.seeds.subsample, "subsample")
    noise = RngStream(cfg.seeds.noise, "noise")
    p = init_params(cfg.model, RngStream(cfg.seeds.init, "init"))
    losses = []
    for t in range(cfg.privacy.steps):
        c = cfg.c0 if c_schedule is None else c_schedule[t]
        idx = poisson_subsample(len(train_b), cfg.privacy.q, sub)
        if idx.size == 0:
            losses.append(math.nan)
            continue
        g, l = per_example_grads(p, train_b.subset(idx))
        z = (cfg.privacy.sigma * c) * noise.standard_normal(cfg.model.dim)
        p = MlpParams.unflatten(cfg.model, p.flatten() - cfg.lr_schedule(t) * ((clipped_sum(g, c) + z) / idx.size))
        losses.append(float(np.mean(l)))
    return p, losses


def _same_losses(a, b):
    return len(a) == len(b) and all(x == y or (math.isnan(x) and math.isnan(y)) for x, y in zip(a, b))


# 1 -------------------------------------------------------------------------

def test_criterion_1_exact_reduction():
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    checked, failures = 0, []
    for i in range(3):
        n_classes = int(rng.integers(2, 6))
        dim = int(rng.integers(9, 25))
        spec = DatasetSpec(n_train=int(rng.integers(300, 900)), n_test=100, n_classes=n_classes,
                           feature_dim=dim, separation=float(rng.uniform(1, 4)))
        train_b, test_b = build_dataset(spec, i)
        hidden = tuple(int(h) for h in rng.integers(10, 40, size=int(rng.integers(1, 3))))
        steps = int(rng.integers(40, 90))
        base = TrainConfig(
            privacy=PrivacyParams(float(rng.uniform(0.01, 0.1)), float(rng.uniform(0.6, 2.0)), steps, 1e-5),
            model=MlpConfig((dim, *hidden, n_classes), str(rng.choice(["relu", "tanh"]))),
            controller=ControllerConfig(probe_period=int(rng.integers(3, 10)), beta=0.5, kappa=0.3),
            c0=float(rng.uniform(0.2, 4.0)),
            lr_schedule=LrSchedule(float(rng.uniform(0.05, 0.5))),
            seeds=Seeds(*(int(s) for s in rng.integers(0, 2**31, size=4))),
        )
        ref_p, ref_losses = replay_dpsgd(base, train_b)
        variants = {
            "disabled": replace(base, controller_enabled=False),
            "K>T": replace(base, controller=replace(base.controller, probe_period=steps + 1)),
            "kappa=0": replace(base, controller=replace(base.controller, kappa=0.0)),
        }
        for name, cfg in variants.items():
            p, log = train(cfg, train_b, test_b)
            ok = (
                p.flatten().tobytes() == ref_p.flatten().tobytes()
                and _same_losses([r.loss for r in log.records], ref_losses)
                and np.all(log.c_series() == base.c0)
            )
            checked += 1
            if not ok:
                failures.append(f"config {i} {name}")
    elapsed = time.perf_counter() - t0
    passed = not failures and elapsed < 60
    record_acceptance(1, "exact reduction", passed,
                      f"{checked} trajectories bit-identical to plain DP-SGD; failures={failures}; {elapsed:.1f}s")
    assert passed


# 2 -------------------------------------------------------------------------

def test_criterion_2_sensitivity_bound():
    t0 = time.perf_counter()
    rng = np.random.default_rng(202)
    worst = -math.inf
    for i in range(1000):
        d = 10_000 if i % 100 == 0 else int(rng.integers(1, 2000))
        n = int(rng.integers(0, 8))
        c = float(10 ** rng.uniform(-2, 1))
        rows = rng.normal(size=(n, d)) * 10 ** rng.uniform(-3, 2)
        extra = rng.normal(size=(1, d)) * 10 ** rng.uniform(-3, 2)
        pos = int(rng.integers(0, n + 1))
        s = sensitivity_probe(np.vstack([rows[:pos], extra, rows[pos:]]), rows, c)
        worst = max(worst, s - c)
    bound_ok = worst <= 1e-9
    max_rel = 0.0
    for trial in range(20):
        d = int(rng.integers(1, 10_001))
        n = int(rng.integers(1, 20))
        c, k = float(10 ** rng.uniform(-2, 1)), float(rng.uniform(0.1, 10))
        g = rng.normal(size=(n, d))
        g *= (max(c, k * c) * rng.uniform(1, 50, size=n) / np.linalg.norm(g, axis=1))[:, None]
        a = noisy_average(g, c, 1.1, RngStream(trial, "noise")).g_tilde
        b = noisy_average(g, k * c, 1.1, RngStream(trial, "noise")).g_tilde
        max_rel = max(max_rel, float(np.max(np.abs(b - k * a) / np.maximum(np.abs(k * a), 1e-300))))
    equiv_ok = max_rel <= 1e-9
    elapsed = time.perf_counter() - t0
    passed = bound_ok and equiv_ok and elapsed < 60
    record_acceptance(2, "clipping sensitivity bound", passed,
                      f"max(sens - C) = {worst:.3e} over 1000 neighbour pairs; scale-equivariance max rel err "
                      f"{max_rel:.2e}; {elapsed:.1f}s")
    assert passed


# 3 -------------------------------------------------------------------------

def test_criterion_3_noise_calibration():
    t0 = time.perf_counter()
    details, passed = [], True
    for sigma, c, batch in [(1.1, 2.0, 16), (0.5, 0.3, 64), (3.0, 1.0, 1)]:
        grads = np.random.default_rng(batch).normal(size=(batch, 6)) * 2
        rng = RngStream(int(batch * 10 + sigma * 7), "noise")
        draws = np.empty((100_000, 6))
        for i in range(100_000):
            draws[i] = noisy_average(grads, c, sigma, rng).g_tilde
        target = sigma * c / batch
        err = float(np.max(np.abs(draws.std(axis=0, ddof=1) / target - 1)))
        passed &= err <= 0.02
        details.append(f"(s={sigma},C={c},|L|={batch}) max rel err {err:.4f}")
    elapsed = time.perf_counter() - t0
    passed &= elapsed < 120
    record_acceptance(3, "noise calibration", passed, "; ".join(details) + f"; {elapsed:.1f}s")
    assert passed


# 4 -------------------------------------------------------------------------

def _quadrature_rdp(q, sigma, alpha):
    with mp.workdps(40):
        q, s = mp.mpf(q), mp.mpf(sigma)

        def f(z):
            return mp.npdf(z, 0, s) * ((1 - q + q * mp.exp((2 * z - 1) / (2 * s * s))) ** alpha - 1)

        pts = sorted({-mp.inf, -20 * s, mp.mpf(0), mp.mpf(0.5), mp.mpf(alpha) / 2, mp.mpf(alpha), alpha + 20 * s, mp.inf})
        return float(mp.log1p(mp.quad(f, pts)) / (alpha - 1))


def test_criterion_4_accountant():
    from specclip.accountant import DEFAULT_ORDERS

    t0 = time.perf_counter()
    closed = max(abs(rdp_subsampled_gaussian(1.0, s, a) - a / (2 * s * s)) for s in (0.5, 1.1, 2, 4) for a in DEFAULT_ORDERS)
    a_ok = closed <= 1e-9
    worst = 0.0
    for q in (0.004, 0.01, 0.05):
        for sigma in (1.1, 2.0):
            for alpha in range(2, 65):
                ref = _quadrature_rdp(q, sigma, alpha)
                worst = max(worst, abs(rdp_subsampled_gaussian(q, sigma, alpha) / ref - 1))
    b_ok = worst <= 1e-4
    qs, sigmas, ts = (0.001, 0.004, 0.01, 0.05), (0.8, 1.1, 2, 4), (100, 1875, 10000)
    eps = {(q, s, t): epsilon_of(PrivacyParams(q, s, t, 1e-5)) for q in qs for s in sigmas for t in ts}
    violations = 0
    for (q, s, t), e in eps.items():
        for q2 in qs:
            violations += q2 > q and eps[q2, s, t] < e
        for s2 in sigmas:
            violations += s2 > s and eps[q, s2, t] > e
        for t2 in ts:
            violations += t2 > t and eps[q, s, t2] < e
    c_ok = violations == 0
    elapsed = time.perf_counter() - t0
    passed = a_ok and b_ok and c_ok and elapsed < 300
    record_acceptance(4, "accountant correctness", passed,
                      f"closed-form max err {closed:.1e}; quadrature max rel err {worst:.2e} over 378 cases; "
                      f"monotonicity violations {violations}/48 grid points; {elapsed:.1f}s")
    assert passed


# 5 -------------------------------------------------------------------------

def test_criterion_5_tail_exponent():
    t0 = time.perf_counter()
    errs = {}
    for z in (2.5, 4.0, 5.5):
        i = np.arange(1, 2001)
        lams = (i / 2001.0) ** (-1.0 / (z - 1.0))
        errs[z] = abs(fit_tail_exponent(lams, TailFitRule(k=100)).zeta - z)
    rec_ok = max(errs.values()) <= 0.15
    rng = np.random.default_rng(5)
    scale_err = 0.0
    for _ in range(100):
        lams = rng.lognormal(0, 2, size=int(rng.integers(40, 500)))
        base = fit_tail_exponent(lams).zeta
        for c in (1e-3, 1.0, 1e3):
            scale_err = max(scale_err, abs(fit_tail_exponent(c * lams).zeta / base - 1))
    orth_err = 0.0
    for trial in range(10):
        m, n = int(rng.integers(30, 80)), int(rng.integers(30, 60))
        w = rng.standard_t(3, size=(m, n))
        base = ww_probe({"w": w}, ProbeSpec(("w",)))
        left, right = ortho_group.rvs(m, random_state=trial), ortho_group.rvs(n, random_state=100 + trial)
        for rotated in (left @ w, w @ right, left @ w @ right):
            orth_err = max(orth_err, abs(ww_probe({"w": rotated}, ProbeSpec(("w",))) / base - 1))
    elapsed = time.perf_counter() - t0
    passed = rec_ok and scale_err <= 1e-12 and orth_err <= 1e-9 and elapsed < 60
    record_acceptance(5, "tail-exponent recovery", passed,
                      "|err| " + ", ".join(f"z={z}: {e:.4f}" for z, e in errs.items())
                      + f"; scale rel err {scale_err:.1e}; orthogonal rel err {orth_err:.1e}; {elapsed:.1f}s")
    assert passed


# 6 -------------------------------------------------------------------------

def test_criterion_6_controller_dynamics():
    t0 = time.perf_counter()
    growth_err = 0.0
    for kappa, c0, c_max in [(0.1, 1.0, 5.0), (0.05, 0.3, 3.0), (0.3, 0.5, 40.0)]:
        cfg = ControllerConfig(kappa=kappa, beta=0.98, c_min=0.01, c_max=c_max)
        s = ClipControllerState(math.log(c0), cfg.zeta_star + cfg.r)
        for m in range(1, 101):
            s, c = control_step(s, cfg.zeta_star + cfg.r, cfg)
            growth_err = max(growth_err, abs(c / min(c_max, c0 * math.exp(kappa * m)) - 1))
    rng = np.random.default_rng(6)
    bad = 0
    for _ in range(10_000):
        cfg = ControllerConfig(zeta_star=float(rng.uniform(1, 8)), r=float(rng.uniform(0.1, 4)),
                               kappa=float(rng.uniform(0, 0.5)), beta=float(rng.uniform(0, 0.999)),
                               c_min=0.3, c_max=5.0, clamp_enabled=bool(rng.random() < 0.8))
        state = ClipControllerState(float(rng.uniform(-2, 2)), float(rng.uniform(-5, 15)))
        zs = np.sort(rng.uniform(-20, 30, size=3))
        outs = [control_step(state, float(z), cfg) for z in zs]
        for s2, c in outs:
            bad += not (c > 0 and math.isfinite(c))
            bad += abs(s2.u - state.u) > cfg.kappa + 1e-12 and not (cfg.clamp_enabled and c in (cfg.c_min, cfg.c_max))
            bad += clamp(clamp(c, cfg.c_min, cfg.c_max), cfg.c_min, cfg.c_max) != clamp(c, cfg.c_min, cfg.c_max)
            if cfg.clamp_enabled:
                bad += not cfg.c_min <= c <= cfg.c_max
        bad += not all(a[1] <= b[1] for a, b in zip(outs, outs[1:]))
    # bounded step from inside the clamp interval holds unconditionally
    cfg = ControllerConfig()
    s = init_state(cfg, 1.0)
    for _ in range(10_000):
        prev = s
        s, c = control_step(s, float(rng.uniform(-10, 20)), cfg)
        bad += abs(s.u - prev.u) > cfg.kappa + 1e-12
    elapsed = time.perf_counter() - t0
    passed = growth_err <= 1e-12 and bad == 0 and elapsed < 60
    record_acceptance(6, "controller dynamics", passed,
                      f"geometric law max rel err {growth_err:.1e}; property violations {bad} over 2x10^4 fuzzed steps; "
                      f"{elapsed:.1f}s")
    assert passed


# 7 -------------------------------------------------------------------------

DESK_WW = ControllerConfig(probe_period=10, beta=0.9, kappa=0.1)


@pytest.mark.slow
def test_criterion_7_desk_robustness():
    t0 = time.perf_counter()
    base = ExperimentConfig(dataset=DatasetSpec(n_train=8000, n_test=2000), controller=DESK_WW)
    assert base.privacy == PrivacyParams(256 / 8000, 1.1, 250, 1e-5)
    block = [(f"dpsgd_C={c:g}", replace(base, controller_enabled=False, c0=c)) for c in C_GRID]
    block += [(f"ww_C0={c:g}", replace(base, controller_enabled=True, c0=c)) for c in C_GRID]
    result = run_block(block, repeats=3)
    rows = {r.label: r for r in result.rows}
    fixed = [rows[f"dpsgd_C={c:g}"].acc_mean for c in C_GRID]
    ww = [rows[f"ww_C0={c:g}"].acc_mean for c in C_GRID]
    fixed_range, ww_range = max(fixed) - min(fixed), max(ww) - min(ww)
    eps = {r.log.epsilon for r in result.runs}
    elapsed = time.perf_counter() - t0
    passed = ww_range <= fixed_range and len(eps) == 1 and elapsed < 1800
    record_acceptance(7, "desk-scale robustness", passed,
                      f"accuracy range WW {ww_range:.4f} vs fixed {fixed_range:.4f} "
                      f"(fixed {[round(a, 4) for a in fixed]}, WW {[round(a, 4) for a in ww]}); "
                      f"epsilon values in block {sorted(eps)}; {elapsed:.0f}s")
    assert passed


# 8 -------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_8_runtime_overhead():
    from specclip.trainer import timing_report

    t0 = time.perf_counter()
    base = ExperimentConfig()
    assert base.controller.probe_period == 50
    train_b, test_b = build_dataset(base.dataset, base.seeds.data)
    fixed_cfg = replace(base, controller_enabled=False).train_config()
    ww_cfg = base.train_config()
    fixed_logs, ww_logs = [], []
    for _ in range(3):  # interleaved so both see the same machine state
        fixed_logs.append(train(fixed_cfg, train_b, test_b)[1])
        ww_logs.append(train(ww_cfg, train_b, test_b)[1])
    best_fixed = min(fixed_logs, key=lambda r: r.t_total)
    best_ww = min(ww_logs, key=lambda r: r.t_total)
    rep = timing_report(best_ww, best_fixed)
    shares = [timing_report(r)["probe_share_pct"] for r in ww_logs]
    elapsed = time.perf_counter() - t0
    passed = max(shares) < 10 and rep["overhead_pct"] < 10 and elapsed < 600
    record_acceptance(8, "runtime overhead", passed,
                      f"probe share {max(shares):.2f}% (max of 3); overhead {rep['overhead_pct']:.2f}% "
                      f"(best of 3 each); {elapsed:.0f}s")
    assert passed


# 9 -------------------------------------------------------------------------

def _check_log(cfg, log):
    K, T = cfg.controller.probe_period, cfg.privacy.steps
    problems = []
    if len(log.records) != T:
        problems.append("length")
    for prev, cur in zip(log.records, log.records[1:]):
        if prev.zeta_raw is None and cur.c != prev.c:
            problems.append(f"C changed after non-probe step {prev.step}")
    for r in log.records:
        due = (r.step + 1) % K == 0 and not r.skipped
        if (r.zeta_raw is not None) != due:
            problems.append(f"zeta_raw at step {r.step}")
    return problems


def test_criterion_9_carry_over_and_logging():
    t0 = time.perf_counter()
    spec = DatasetSpec(n_train=600, n_test=200, n_classes=4, feature_dim=16)
    train_b, test_b = build_dataset(spec, 9)
    problems, skipped_total, runs = [], 0, 0
    for i, (q, steps, k) in enumerate([(0.05, 120, 10), (0.004, 200, 7), (0.003, 150, 3), (0.1, 100, 25)]):
        cfg = TrainConfig(
            privacy=PrivacyParams(q, 1.1, steps, 1e-5),
            model=MlpConfig((16, 32, 16, 4)),
            controller=ControllerConfig(probe_period=k, beta=0.5, kappa=0.3),
            lr_schedule=LrSchedule(0.3),
            seeds=Seeds(i, i + 10, i + 20, i + 30),
        )
        p, log = train(cfg, train_b, test_b)
        runs += 1
        skipped_total += sum(r.skipped for r in log.records)
        problems += [f"run {i}: {m}" for m in _check_log(cfg, log)]
        ref_p, ref_losses = replay_dpsgd(cfg, train_b, c_schedule=[r.c for r in log.records])
        if p.flatten().tobytes() != ref_p.flatten().tobytes() or not _same_losses(ref_losses, [r.loss for r in log.records]):
            problems.append(f"run {i}: replay mismatch")
    elapsed = time.perf_counter() - t0
    passed = not problems and skipped_total > 0 and elapsed < 120
    record_acceptance(9, "carry-over and logging", passed,
                      f"{runs} WW runs, {skipped_total} skipped steps, replay bit-identical; problems={problems[:5]}; "
                      f"{elapsed:.1f}s")
    assert passed


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q"]))

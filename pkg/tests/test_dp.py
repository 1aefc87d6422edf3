import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from specclip.dp import (
    SKIPPED,
    PrivacyParams,
    clip_gradient,
    clip_rows,
    clipped_sum,
    noisy_average,
    poisson_subsample,
    sensitivity_probe,
)
from specclip.linalg import RngStream


def test_privacy_params_validation():
    PrivacyParams(1.0, 0.5, 1, 0.5)
    for bad in [(0.0, 1, 1, 0.1), (1.1, 1, 1, 0.1), (0.1, 0, 1, 0.1), (0.1, 1, 0, 0.1), (0.1, 1, 1, 1.0), (0.1, 1, 1, 0.0)]:
        with pytest.raises(ValueError):
            PrivacyParams(*bad)


def test_privacy_params_carry_no_threshold():
    names = set(PrivacyParams.__dataclass_fields__)
    assert names == {"q", "sigma", "steps", "delta"}


def test_subsample_extremes():
    assert poisson_subsample(100, 0.0, RngStream(0, "subsample")).size == 0
    np.testing.assert_array_equal(poisson_subsample(100, 1.0, RngStream(0, "subsample")), np.arange(100))


def test_subsample_is_sorted_and_in_range():
    idx = poisson_subsample(1000, 0.3, RngStream(5, "subsample"))
    assert np.all(np.diff(idx) > 0) and idx.min() >= 0 and idx.max() < 1000


def test_subsample_binomial_moments():
    rng = RngStream(11, "subsample")
    sizes = np.array([poisson_subsample(10_000, 0.01, rng).size for _ in range(10_000)])
    assert abs(sizes.mean() - 100) <= 3
    assert abs(sizes.var(ddof=1) / (100 * 0.99) - 1) <= 0.10


def test_subsample_marginal_inclusion():
    rng = RngStream(2, "subsample")
    counts = np.zeros(50)
    for _ in range(4000):
        counts[poisson_subsample(50, 0.2, rng)] += 1
    freq = counts / 4000
    assert np.all(np.abs(freq - 0.2) < 5 * math.sqrt(0.2 * 0.8 / 4000))


def test_clip_examples():
    np.testing.assert_allclose(clip_gradient([3.0, 4.0], 1.0), [0.6, 0.8], rtol=1e-15)
    np.testing.assert_array_equal(clip_gradient([0.3, 0.4], 1.0), [0.3, 0.4])
    np.testing.assert_array_equal(clip_gradient(np.zeros(4), 1.0), np.zeros(4))
    with pytest.raises(ValueError):
        clip_gradient([1.0], 0.0)


def test_clip_bound_fuzz_10k():
    rng = np.random.default_rng(0)
    for _ in range(10_000):
        d = int(rng.integers(1, 10_001)) if rng.random() < 0.02 else int(rng.integers(1, 200))
        g = rng.normal(size=d) * 10 ** rng.uniform(-3, 3)
        c = 10 ** rng.uniform(-2, 2)
        out = clip_gradient(g, c)
        n, no = np.linalg.norm(g), np.linalg.norm(out)
        assert no <= c + 1e-9
        if n <= c:
            assert no == pytest.approx(n, rel=1e-12)
        assert np.dot(out, g) >= 0


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=30), st.floats(1e-3, 1e3))
def test_clip_direction_and_norm(g, c):
    g = np.array(g)
    out = clip_gradient(g, c)
    n = np.linalg.norm(g)
    assert np.linalg.norm(out) == pytest.approx(min(n, c), rel=1e-12, abs=1e-300)
    if n > 0:
        np.testing.assert_allclose(out * max(1.0, n / c), g, rtol=1e-12, atol=1e-12)


def test_clip_rows_matches_row_wise():
    g = np.random.default_rng(1).normal(size=(7, 5)) * 3
    np.testing.assert_array_equal(clip_rows(g, 1.5), np.array([clip_gradient(r, 1.5) for r in g]))


def test_noisy_average_no_noise_plain_mean():
    out = noisy_average(np.array([[1.0, 0.0], [0.0, 1.0]]), 10.0, 0.0, RngStream(0, "noise"))
    np.testing.assert_array_equal(out.g_tilde, [0.5, 0.5])
    assert not out.skipped


def test_noisy_average_empty_batch_does_not_touch_rng():
    rng, ref = RngStream(3, "noise"), RngStream(3, "noise")
    out = noisy_average(np.zeros((0, 4)), 1.0, 1.0, rng)
    assert out is SKIPPED and out.skipped
    np.testing.assert_array_equal(rng.standard_normal(6), ref.standard_normal(6))


def test_noise_added_to_sum_then_divided():
    g = np.ones((4, 3))
    rng, ref = RngStream(9, "noise"), RngStream(9, "noise")
    out = noisy_average(g, 100.0, 0.5, rng)
    z = ref.standard_normal(3) * 50.0
    np.testing.assert_allclose(out.g_tilde, (g.sum(axis=0) + z) / 4, rtol=1e-15)


def test_noise_hook_reports_std():
    seen = []
    noisy_average(np.ones((2, 2)), 2.5, 1.1, RngStream(0, "noise"), on_noise=lambda c, s: seen.append((c, s)))
    assert seen == [(2.5, 1.1 * 2.5)]


def test_noise_std_monte_carlo():
    rng_g = np.random.default_rng(0)
    grads = rng_g.normal(size=(16, 8))
    rng = RngStream(4, "noise")
    draws = np.array([noisy_average(grads, 2.0, 1.1, rng).g_tilde for _ in range(100_000)])
    target = 1.1 * 2.0 / 16
    assert np.all(np.abs(draws.std(axis=0) / target - 1) < 0.02)
    np.testing.assert_allclose(draws.mean(axis=0), clipped_sum(grads, 2.0) / 16, atol=5 * target / math.sqrt(1e5))


def test_sensitivity_examples():
    base = np.random.default_rng(0).normal(size=(5, 4)) * 0.1
    big = np.array([[30.0, 40.0, 0.0, 0.0]])
    assert sensitivity_probe(np.vstack([base[:2], big, base[2:]]), base, 1.0) == pytest.approx(1.0, abs=1e-12)
    assert sensitivity_probe(np.vstack([base, np.zeros((1, 4))]), base, 1.0) == 0.0
    assert sensitivity_probe(big, np.zeros((0, 4)), 2.0) == pytest.approx(2.0, rel=1e-15)


def test_sensitivity_rejects_non_neighbours():
    a = np.zeros((3, 2))
    with pytest.raises(ValueError):
        sensitivity_probe(a, a, 1.0)
    with pytest.raises(ValueError):
        sensitivity_probe(np.ones((3, 2)), np.zeros((2, 2)), 1.0)
    with pytest.raises(ValueError):
        sensitivity_probe(np.ones((3, 2)), np.ones((2, 3)), 1.0)


def test_sensitivity_bound_fuzz():
    rng = np.random.default_rng(7)
    for _ in range(1000):
        d = int(rng.integers(1, 300))
        n = int(rng.integers(0, 12))
        c = 10 ** rng.uniform(-2, 1)
        rows = rng.normal(size=(n, d)) * 10 ** rng.uniform(-2, 2)
        extra = rng.normal(size=(1, d)) * 10 ** rng.uniform(-2, 2)
        pos = int(rng.integers(0, n + 1))
        with_rows = np.vstack([rows[:pos], extra, rows[pos:]])
        assert sensitivity_probe(with_rows, rows, c) <= c + 1e-9


def test_scale_equivariance_saturated():
    rng = np.random.default_rng(3)
    c, k = 0.5, 3.0
    g = rng.normal(size=(10, 50))
    g *= (10 * k * c / np.linalg.norm(g, axis=1))[:, None]
    a = noisy_average(g, c, 1.3, RngStream(1, "noise")).g_tilde
    b = noisy_average(g, k * c, 1.3, RngStream(1, "noise")).g_tilde
    np.testing.assert_allclose(b, k * a, rtol=1e-9)

import math

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st

from fqgan.datasets import ring_mixture, sample
from fqgan.gan import FqDiscriminator, Mlp
from fqgan.metrics import (
    frechet_2d,
    median_bandwidth,
    mmd2_unbiased,
    mmd_permutation_test,
    mode_coverage,
    per_mode_frechet,
    quantized_feature_mmd,
)
from fqgan.quantizer import init_codebook

SPEC = ring_mixture(8, 2.0, 0.02)


# --- mode coverage --------------------------------------------------------


def test_coverage_of_true_samples():
    rep = mode_coverage(sample(SPEC, 10_000, seed=0), SPEC)
    assert rep.modes_covered == 8
    assert rep.high_quality_fraction >= 0.95
    # radial 3-sigma mass of a 2-D Gaussian is 1 - exp(-4.5)
    assert rep.high_quality_fraction == pytest.approx(1 - math.exp(-4.5), abs=0.005)
    assert rep.per_mode_counts.sum() == round(rep.high_quality_fraction * 10_000)


def test_coverage_collapsed():
    x = np.tile(SPEC.mean_array[3], (100, 1))
    rep = mode_coverage(x, SPEC)
    assert rep.modes_covered == 1 and rep.high_quality_fraction == 1.0


def test_coverage_far_away():
    rep = mode_coverage(np.full((50, 2), 40.0), SPEC)
    assert rep.modes_covered == 0 and rep.high_quality_fraction == 0.0


def test_coverage_empty():
    with pytest.raises(ValueError):
        mode_coverage(np.zeros((0, 2)), SPEC)


def test_coverage_permutation_invariant():
    x = sample(SPEC, 1000, seed=1).data[:300]
    x[:150] += 0.3
    perm = np.random.default_rng(0).permutation(len(x))
    a, b = mode_coverage(x, SPEC), mode_coverage(x[perm], SPEC)
    assert a.modes_covered == b.modes_covered
    assert a.high_quality_fraction == b.high_quality_fraction
    assert np.array_equal(a.per_mode_counts, b.per_mode_counts)


def test_coverage_minimum_count():
    # 1000 samples over 8 modes: a mode needs ceil(0.01 * 1000 / 8) = 2 hits
    x = np.tile(SPEC.mean_array[0], (999, 1))
    x = np.vstack([x, SPEC.mean_array[1]])
    assert mode_coverage(x, SPEC).modes_covered == 1


# --- MMD ------------------------------------------------------------------


def test_mmd_identical_sets_non_positive():
    x = np.random.default_rng(1).standard_normal((40, 3))
    assert mmd2_unbiased(x, x.copy(), 1.0) <= 1e-12


def test_mmd_point_masses_limit():
    d = 1.5
    n = 400
    a = np.zeros((n, 2))
    b = np.tile([d, 0.0], (n, 1))
    expected = 2 * (1 - math.exp(-d * d / 2))
    assert mmd2_unbiased(a, b, 1.0) == pytest.approx(expected, rel=1e-12)


def test_mmd_same_gaussian_envelope():
    rng = np.random.default_rng(2)
    n = 1000
    a, b = rng.standard_normal((n, 2)), rng.standard_normal((n, 2))
    assert abs(mmd2_unbiased(a, b, median_bandwidth(a, b))) <= 3 * math.sqrt(2 / n)


def test_mmd_symmetric_and_order_invariant():
    rng = np.random.default_rng(3)
    a, b = rng.standard_normal((30, 2)), rng.standard_normal((25, 2)) + 0.5
    v = mmd2_unbiased(a, b, 0.8)
    assert mmd2_unbiased(b, a, 0.8) == pytest.approx(v, abs=1e-14)
    assert mmd2_unbiased(a[::-1], b[rng.permutation(25)], 0.8) == pytest.approx(v, abs=1e-14)


def test_mmd_brute_force():
    rng = np.random.default_rng(4)
    a, b = rng.standard_normal((6, 2)), rng.standard_normal((5, 2))

    def k(x, y):
        return math.exp(-((x - y) ** 2).sum() / (2 * 0.7**2))

    saa = sum(k(a[i], a[j]) for i in range(6) for j in range(6) if i != j) / 30
    sbb = sum(k(b[i], b[j]) for i in range(5) for j in range(5) if i != j) / 20
    sab = sum(k(x, y) for x in a for y in b) / 30
    assert mmd2_unbiased(a, b, 0.7) == pytest.approx(saa + sbb - 2 * sab, rel=1e-12)


def test_mmd_errors():
    with pytest.raises(ValueError):
        mmd2_unbiased(np.zeros((3, 2)), np.zeros((3, 3)), 1.0)
    with pytest.raises(ValueError):
        mmd2_unbiased(np.zeros((1, 2)), np.zeros((3, 2)), 1.0)


def test_permutation_observed_matches_estimator():
    rng = np.random.default_rng(5)
    a, b = rng.standard_normal((20, 2)), rng.standard_normal((30, 2))
    obs, _ = mmd_permutation_test(a, b, 1.1, n_perm=10)
    assert obs == pytest.approx(mmd2_unbiased(a, b, 1.1), rel=1e-12)


def test_permutation_test_detects_shift():
    rng = np.random.default_rng(6)
    a, b = rng.standard_normal((100, 2)), rng.standard_normal((100, 2)) + 1.0
    _, p = mmd_permutation_test(a, b, median_bandwidth(a, b), n_perm=200)
    assert p < 0.01


# --- Frechet ----------------------------------------------------------------


def _oracle_frechet(a, b):
    mu1, mu2 = a.mean(0), b.mean(0)
    s1, s2 = np.cov(a, rowvar=False), np.cov(b, rowvar=False)
    covmean = scipy.linalg.sqrtm(s1 @ s2).real
    return float(((mu1 - mu2) ** 2).sum() + np.trace(s1 + s2 - 2 * covmean))


def test_frechet_identical_exact_zero():
    x = np.random.default_rng(7).standard_normal((100, 2))
    assert frechet_2d(x, x).value == 0.0
    assert frechet_2d(x, x.copy()).value == 0.0


def test_frechet_matches_sqrtm_oracle():
    rng = np.random.default_rng(8)
    for _ in range(100):
        a = rng.standard_normal((50, 2)) @ rng.standard_normal((2, 2)) + rng.standard_normal(2)
        b = rng.standard_normal((60, 2)) @ rng.standard_normal((2, 2))
        assert frechet_2d(a, b).value == pytest.approx(_oracle_frechet(a, b), rel=1e-8, abs=1e-10)


def test_frechet_mean_gap():
    rng = np.random.default_rng(9)
    d = 2.0
    a = rng.standard_normal((10_000, 2))
    b = rng.standard_normal((10_000, 2)) + [d, 0.0]
    assert frechet_2d(a, b).value == pytest.approx(d * d, rel=0.05)


def test_frechet_variance_ratio():
    rng = np.random.default_rng(10)
    a = rng.standard_normal((20_000, 2))
    b = 2.0 * rng.standard_normal((20_000, 2))
    # per axis 1 + 4 - 2*2 = 1, two axes
    assert frechet_2d(a, b).value == pytest.approx(2.0, rel=0.05)


def test_frechet_symmetric():
    rng = np.random.default_rng(11)
    a, b = rng.standard_normal((40, 2)), 1.5 * rng.standard_normal((30, 2)) + 1
    assert frechet_2d(a, b).value == pytest.approx(frechet_2d(b, a).value, rel=1e-12)


def test_frechet_degenerate_regularized():
    a = np.column_stack([np.linspace(0, 1, 10), np.zeros(10)])
    b = np.random.default_rng(12).standard_normal((10, 2))
    score = frechet_2d(a, b)
    assert score.regularized and score.value >= 0


def test_frechet_errors():
    with pytest.raises(ValueError):
        frechet_2d(np.zeros((2, 2)), np.zeros((5, 2)))
    with pytest.raises(ValueError):
        frechet_2d(np.zeros((5, 3)), np.zeros((5, 3)))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_frechet_non_negative(seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((rng.integers(3, 30), 2)) * rng.uniform(0.01, 5)
    b = rng.standard_normal((rng.integers(3, 30), 2)) * rng.uniform(0.01, 5)
    assert frechet_2d(a, b).value >= -1e-8


def test_per_mode_frechet_skips_sparse_modes():
    real = sample(SPEC, 4000, seed=13).data
    fake = sample(SPEC, 4000, seed=14).data
    fake = fake[np.linalg.norm(fake - SPEC.mean_array[0], axis=1) > 0.5]
    scores = per_mode_frechet(fake, real, SPEC)
    assert 0 not in scores and len(scores) == 7
    assert all(v < 1e-3 for v in scores.values())


# --- quantized-feature MMD ------------------------------------------------


def _model(seed=0, K=4, D=4):
    net = Mlp([2, 8, 8, 1], seed=seed)
    return FqDiscriminator(net, {1: init_codebook(K, D, seed=seed, scale=1.0)})


def test_qmmd_identical_batches():
    x = sample(SPEC, 64, seed=1).data
    assert quantized_feature_mmd(_model(), x, x, 1) <= 1e-12


def test_qmmd_positive_when_code_histograms_differ():
    from fqgan.metrics import quantized_features

    checked = 0
    for seed in range(20):
        model = _model(seed)
        real = sample(SPEC, 64, seed=100 + seed).data
        fake = sample(SPEC, 64, seed=200 + seed).data * 0.1 + 3.0
        qa = quantized_features(model, real, 1)
        qb = quantized_features(model, fake, 1)
        ua, ca = np.unique(qa, axis=0, return_counts=True)
        ub, cb = np.unique(qb, axis=0, return_counts=True)
        same = ua.shape == ub.shape and np.array_equal(ua, ub) and np.array_equal(ca, cb)
        v = quantized_feature_mmd(model, real, fake, 1)
        if same:
            assert abs(v) < 1e-12
        else:
            assert v > 0
            checked += 1
    assert checked >= 15


def test_qmmd_order_invariant():
    model = _model(3)
    real = sample(SPEC, 32, seed=5).data
    fake = sample(SPEC, 32, seed=6).data + 0.5
    v = quantized_feature_mmd(model, real, fake, 1)
    assert quantized_feature_mmd(model, real[::-1], fake[np.roll(np.arange(32), 5)], 1) == pytest.approx(v, abs=1e-13)


def test_qmmd_requires_codebook():
    with pytest.raises(ValueError):
        quantized_feature_mmd(_model(), np.zeros((4, 2)), np.zeros((4, 2)), 2)

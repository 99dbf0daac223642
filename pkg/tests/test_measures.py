import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import ndtr

from ecfm.measures import (GaussianMixture, ModeSet, ParticleEnsemble, TimeGrid,
                           differential_entropy, entropy_exact_mixture, fisher_information,
                           hoeffding_radius, knn_entropy_terms, mode_mass, sample, w2)

H_STD = 0.5 * math.log(2 * math.pi * math.e)


def test_sample_is_deterministic():
    mix = GaussianMixture.gaussian([0.0], 1.0)
    a = sample(mix, 4, 7)
    b = sample(mix, 4, 7)
    assert a.size == 4
    np.testing.assert_array_equal(a.points, b.points)


def test_sample_symmetric_mixture_mean():
    ens = sample(GaussianMixture.two_mode(2.0, 1.0), 100_000, 1)
    x = ens.points[:, 0]
    assert abs(x.mean()) < 3 * x.std() / math.sqrt(x.size)


def test_sample_variance():
    x = sample(GaussianMixture.gaussian([3.0], 4.0), 100_000, 2).points[:, 0]
    assert 3.9 <= x.var() <= 4.1


def test_mixture_validation():
    with pytest.raises(ValueError):
        GaussianMixture(np.array([0.6, 0.6]), np.zeros((2, 1)), np.ones((2, 1, 1)))
    with pytest.raises(ValueError):
        GaussianMixture(np.array([1.0]), np.zeros((1, 1)), -np.ones((1, 1, 1)))


def test_mixture_json_round_trip():
    mix = GaussianMixture(np.array([0.3, 0.7]), np.array([[-1.0, 0.5], [2.0, 0.0]]),
                          np.array([np.eye(2), [[2.0, 0.3], [0.3, 1.0]]]))
    back = GaussianMixture.from_json(mix.to_json())
    np.testing.assert_array_equal(back.weights, mix.weights)
    np.testing.assert_array_equal(back.means, mix.means)
    np.testing.assert_array_equal(back.covs, mix.covs)


def test_single_gaussian_score():
    g = GaussianMixture.gaussian([0.0], 1.0)
    assert g.score(np.array([[2.0]]))[0, 0] == pytest.approx(-2.0)
    assert GaussianMixture.gaussian([3.0], 4.0).score(np.array([[3.0]]))[0, 0] == 0.0
    assert GaussianMixture.two_mode(2.0, 1.0).score(np.array([[0.0]]))[0, 0] == pytest.approx(0.0)


def test_score_is_gradient_of_logpdf():
    mix = GaussianMixture(np.array([0.4, 0.6]), np.array([[-1.0, 0.0], [1.5, 1.0]]),
                          np.array([np.eye(2), [[1.5, 0.2], [0.2, 0.7]]]))
    x = np.random.default_rng(0).normal(size=(20, 2))
    h = 1e-6
    fd = np.stack([(mix.logpdf(x + h * e) - mix.logpdf(x - h * e)) / (2 * h)
                   for e in np.eye(2)], axis=1)
    np.testing.assert_allclose(mix.score(x), fd, rtol=1e-6, atol=1e-7)


def test_ensemble_csv_round_trip():
    ens = ParticleEnsemble(np.array([[0.1, 2.0], [3.0, -1.0]]), np.array([0.25, 0.75]))
    back = ParticleEnsemble.from_csv(ens.to_csv())
    np.testing.assert_array_equal(back.points, ens.points)
    np.testing.assert_array_equal(back.weights, ens.weights)


def test_ensemble_rejects_bad_weights():
    with pytest.raises(ValueError):
        ParticleEnsemble(np.zeros((3, 1)), np.array([0.5, 0.5, 0.5]))


def test_time_grid_invariants():
    g = TimeGrid.uniform(2.0, 5)
    assert g.horizon == 2.0 and g.n_steps == 4 and g.max_step == pytest.approx(0.5)
    assert g.trapezoid_weights().sum() == pytest.approx(2.0)
    with pytest.raises(ValueError):
        TimeGrid(np.array([0.0, 0.5, 0.5]))
    with pytest.raises(ValueError):
        TimeGrid(np.array([0.1, 0.5]))


def test_knn_entropy_standard_normal():
    ens = sample(GaussianMixture.gaussian([0.0], 1.0), 100_000, 3)
    assert differential_entropy(ens, 5) == pytest.approx(H_STD, abs=0.02)


def test_knn_entropy_uniform():
    x = np.random.default_rng(4).uniform(size=(100_000, 1))
    assert differential_entropy(ParticleEnsemble(x), 5) == pytest.approx(0.0, abs=0.02)


def test_knn_entropy_scaled_gaussian():
    ens = sample(GaussianMixture.gaussian([0.0], math.e ** 2), 100_000, 5)
    assert differential_entropy(ens, 5) == pytest.approx(H_STD + 1, abs=0.02)


def test_knn_entropy_scaling_property():
    d, alpha = 2, 1.7
    diffs = []
    for seed in range(20):
        x = np.random.default_rng(seed).normal(size=(2000, d))
        diffs.append(knn_entropy_terms(alpha * x).mean() - knn_entropy_terms(x).mean())
    diffs = np.array(diffs)
    assert abs(diffs.mean() - d * math.log(alpha)) < 3 * max(diffs.std(ddof=1), 1e-9) / math.sqrt(20) + 1e-9


def test_knn_duplicates_are_jittered():
    x = np.zeros((50, 1))
    x[25:] = 1.0
    assert np.all(np.isfinite(knn_entropy_terms(x, 5, seed=0)))


def test_exact_entropy_single_gaussian_closed_form():
    value, se = entropy_exact_mixture(GaussianMixture.gaussian([0.0], 1.0))
    assert value == pytest.approx(H_STD, abs=1e-12)
    assert se == 0.0


def test_exact_entropy_merged_modes():
    value, se = entropy_exact_mixture(GaussianMixture.two_mode(1e-9, 1.0), 50_000, 0)
    assert abs(value - H_STD) < 3 * se + 1e-6


def test_exact_entropy_separated_modes():
    value, se = entropy_exact_mixture(GaussianMixture.two_mode(5.0, 1.0), 100_000, 0)
    assert abs(value - (H_STD + math.log(2))) < 3 * se + 1e-4


def test_entropy_decomposition_by_region():
    # -H = m log m + (1-m) log(1-m) + m Ht_A + (1-m) Ht_Ac, where Ht is the
    # integral of r log r for the normalised restriction r; each side is
    # estimated from independent samples
    mix = GaussianMixture(np.array([0.3, 0.7]), np.array([[-1.0], [1.5]]), np.ones((2, 1, 1)))
    m = float(0.3 * ndtr(-1.0) + 0.7 * ndtr(1.5))
    neg = mix.logpdf(sample(mix, 200_000, 11).points)
    x = sample(mix, 400_000, 12).points
    inside = x[:, 0] > 0
    ra = mix.logpdf(x[inside]) - math.log(m)
    rc = mix.logpdf(x[~inside]) - math.log(1 - m)
    decomposed = (m * math.log(m) + (1 - m) * math.log(1 - m) + m * ra.mean()
                  + (1 - m) * rc.mean())
    se = math.sqrt(neg.var() / neg.size + m ** 2 * ra.var() / ra.size
                   + (1 - m) ** 2 * rc.var() / rc.size)
    assert abs(neg.mean() - decomposed) < 3 * se


@pytest.mark.parametrize("var, d, expected", [(1.0, 1, 1.0), (4.0, 1, 0.25), (1.0, 3, 3.0)])
def test_fisher_information_gaussian(var, d, expected):
    mix = GaussianMixture.gaussian(np.zeros(d), var * np.eye(d))
    assert fisher_information(mix, 200_000, 0) == pytest.approx(expected, rel=0.02)


def test_w2_identical_is_zero():
    ens = sample(GaussianMixture.gaussian([0.0], 1.0), 500, 0)
    assert w2(ens, ens) == 0.0


def test_w2_shifted_gaussians():
    a = sample(GaussianMixture.gaussian([-2.0], 1.0), 100_000, 1)
    b = sample(GaussianMixture.gaussian([2.0], 1.0), 100_000, 2)
    assert w2(a, b) == pytest.approx(4.0, abs=0.05)


def test_w2_scaled_gaussians():
    a = sample(GaussianMixture.gaussian([0.0], 1.0), 100_000, 3)
    b = sample(GaussianMixture.gaussian([0.0], 4.0), 100_000, 4)
    assert w2(a, b) == pytest.approx(1.0, abs=0.05)


def test_w2_multidimensional_limit():
    big = ParticleEnsemble(np.zeros((2001, 2)))
    with pytest.raises(ValueError):
        w2(big, big)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.sampled_from([1, 2]))
def test_w2_symmetry_and_triangle(seed, d):
    rng = np.random.default_rng(seed)
    a, b, c = (ParticleEnsemble(rng.normal(size=(30, d)) + rng.normal(size=d)) for _ in range(3))
    assert w2(a, b) == pytest.approx(w2(b, a), abs=1e-12)
    assert w2(a, c) <= w2(a, b) + w2(b, c) + 1e-9


def test_hoeffding_radius_value():
    assert hoeffding_radius(2000, 0.05, 2, 10) == pytest.approx(math.sqrt(math.log(800) / 4000))
    assert hoeffding_radius(2000, 0.05, 2, 10) == pytest.approx(0.0409, abs=1e-4)


def test_mode_mass_symmetric():
    ens = sample(GaussianMixture.two_mode(3.0, 1.0), 100_000, 6)
    A = ModeSet("half-space", {"normal": [1.0], "offset": 0.0})
    assert mode_mass(ens, A).mass == pytest.approx(0.5, abs=0.01)


def test_mode_mass_empty_ball():
    ens = sample(GaussianMixture.gaussian([0.0], 1.0), 100, 0)
    assert mode_mass(ens, ModeSet("ball", {"center": [0.0], "radius": 0.0})).mass == 0.0


def test_mode_set_round_trip_and_kinds():
    A = ModeSet("interval", {"lo": -1.0, "hi": 1.0}, "core")
    assert ModeSet.from_dict(A.to_dict()) == A
    assert list(A.contains(np.array([[0.0], [2.0]]))) == [True, False]
    with pytest.raises(ValueError):
        ModeSet("cube", {})


def test_hoeffding_coverage():
    mix = GaussianMixture.two_mode(1.0, 1.0)
    A = ModeSet("half-space", {"normal": [1.0], "offset": 0.5})
    truth = float(0.5 * ndtr(-1.5) + 0.5 * ndtr(0.5))
    misses = 0
    for seed in range(1000):
        mm = mode_mass(sample(mix, 500, seed), A)
        misses += abs(mm.mass - truth) > mm.radius(0.05)
    # 5% plus three binomial standard deviations
    assert misses <= 50 + 3 * math.sqrt(1000 * 0.05 * 0.95)

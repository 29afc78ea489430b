import math

import numpy as np
import pytest

from rdwgd.distortion import DistortionSpec
from rdwgd.errors import ConfigError
from rdwgd.measures import DiscreteMeasure, RngSeed, empirical_from_samples
from rdwgd.ratefn import rate_functional_eval
from rdwgd.sources import (ConvolvedSourceSpec, UniformSphere, binary_rd_oracle, differential_entropy,
                          gaussian_rd_oracle, nu_star, opt_loss_mc, plugin_phi, rd_segment, sample_convolved,
                          uniform_circle)

POINT = DiscreteMeasure([[0.0]])
GMM = DiscreteMeasure([[-1.0], [1.0]])
# frozen from the independent trapezoid oracle below (step 1e-4 on [-4, 4])
GMM_RATE_LAM10 = 0.6908988384515732
CIRCLE_ENTROPY = 2.0759224538731016


def gmm_entropy_trapezoid(s2, step=1e-4):
    x = np.arange(-4.0, 4.0 + step, step)
    p = 0.5 * (np.exp(-(x - 1) ** 2 / (2 * s2)) + np.exp(-(x + 1) ** 2 / (2 * s2))) / math.sqrt(2 * math.pi * s2)
    f = np.where(p > 0, -p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return float(np.sum((f[1:] + f[:-1]) * 0.5 * step))


def test_gaussian_samples_moments():
    mu = sample_convolved(ConvolvedSourceSpec(POINT, 1.0), 200_000, RngSeed(0))
    x = mu.points[:, 0]
    se = 1 / math.sqrt(len(x))
    assert abs(x.mean()) < 5 * se
    assert abs(x.var() - 1.0) < 5 * math.sqrt(2) * se
    assert abs(np.mean(x ** 3)) < 5 * math.sqrt(15) * se


def test_circle_samples_radius():
    mu = sample_convolved(ConvolvedSourceSpec(uniform_circle(), 0.1), 100_000, RngSeed(0))
    assert mu.n == 100_000 and mu.dim == 2
    r2 = (mu.points ** 2).sum(axis=1)
    assert r2.mean() == pytest.approx(1.0 + 2 * 0.1, abs=0.01)


def test_two_point_is_bimodal():
    x = sample_convolved(ConvolvedSourceSpec(GMM, 0.1), 50_000, RngSeed(3)).points[:, 0]
    left, mid, right = (np.sum(np.abs(x - c) < 0.1) for c in (-1.0, 0.0, 1.0))
    # density ratio mode / center is about e^5 / 2
    assert left > 20 * mid and right > 20 * mid
    assert abs((x > 0).mean() - 0.5) < 0.01


def test_sampling_reproducible():
    spec = ConvolvedSourceSpec(uniform_circle(), 0.1)
    a = sample_convolved(spec, 1000, RngSeed(5, 2))
    b = sample_convolved(spec, 1000, RngSeed(5, 2))
    assert np.array_equal(a.points, b.points)


def test_segment_pure_gaussian():
    seg = rd_segment(ConvolvedSourceSpec(POINT, 1.0), 1.0)
    assert seg.distortion == 0.5
    assert seg.rate == pytest.approx(0.0, abs=1e-9)


@pytest.mark.parametrize("lam", [1.0, 2.0, 10.0])
def test_segment_agrees_with_gaussian_oracle(lam):
    seg = rd_segment(ConvolvedSourceSpec(POINT, 1.0), lam)
    assert seg.rate == pytest.approx(gaussian_rd_oracle(1.0, 2 * seg.distortion), abs=1e-6)


def test_segment_gmm_against_trapezoid_oracle():
    seg = rd_segment(ConvolvedSourceSpec(GMM, 0.1), 10.0)
    assert seg.distortion == pytest.approx(0.05, abs=1e-15)
    oracle = gmm_entropy_trapezoid(0.1) - 0.5 * math.log(2 * math.pi * math.e / 10)
    assert oracle == pytest.approx(GMM_RATE_LAM10, abs=1e-8)
    assert seg.rate == pytest.approx(oracle, abs=1e-8)
    assert seg.how == "quadrature"


def test_segment_boundary_is_alpha():
    spec = ConvolvedSourceSpec(GMM, 0.1)
    assert nu_star(spec, 10.0) is GMM
    assert rd_segment(spec, 10.0).nu_star is GMM
    inner = nu_star(spec, 20.0)
    assert inner.alpha is GMM and inner.sigma2 == pytest.approx(0.05)


def test_segment_out_of_range():
    with pytest.raises(ConfigError):
        rd_segment(ConvolvedSourceSpec(GMM, 0.1), 5.0)


def test_circle_entropy_matches_monte_carlo():
    spec = ConvolvedSourceSpec(uniform_circle(), 0.1)
    h, _, how = differential_entropy(spec)
    assert how == "quadrature"
    assert h == pytest.approx(CIRCLE_ENTROPY, abs=1e-9)
    x = spec.sample(200_000, np.random.default_rng(0))
    v = -spec.log_density(x)
    assert abs(v.mean() - h) < 4 * v.std() / math.sqrt(len(v))


def test_sphere_density_normalized_4d():
    spec = ConvolvedSourceSpec(UniformSphere(1.0, 4), 0.1)
    rng = np.random.default_rng(1)
    # importance check: E_q[p/q] = 1 with q = N(0, 1.5 I)
    q_s2 = 1.5
    z = rng.normal(size=(400_000, 4)) * math.sqrt(q_s2)
    logq = -0.5 * (z ** 2).sum(axis=1) / q_s2 - 2 * math.log(2 * math.pi * q_s2)
    w = np.exp(spec.log_density(z) - logq)
    assert abs(w.mean() - 1.0) < 5 * w.std() / math.sqrt(len(w))


def test_gaussian_oracle_values():
    assert gaussian_rd_oracle(1.0, 0.25) == pytest.approx(0.693147180559945309, abs=1e-15)
    assert gaussian_rd_oracle(1.0, 1.0) == 0.0
    assert gaussian_rd_oracle(1.0, 3.0) == 0.0
    assert gaussian_rd_oracle(2.0, 2e-2) == pytest.approx(2.30258509299404568, abs=1e-14)


def test_binary_oracle_values():
    assert binary_rd_oracle(0.5, 0.1) == pytest.approx(0.368064207168497070, abs=1e-15)
    assert binary_rd_oracle(0.3, 0.0) == pytest.approx(-0.3 * math.log(0.3) - 0.7 * math.log(0.7))
    assert binary_rd_oracle(0.5, 0.5) == 0.0


def test_plugin_phi_matches_logsumexp():
    from scipy.special import logsumexp

    rng = np.random.default_rng(2)
    xs, ys = rng.normal(size=(50, 2)), rng.normal(size=(3000, 2)) * 3
    want = -(logsumexp(-10 * 0.5 * ((xs[:, None] - ys[None]) ** 2).sum(-1), axis=1) - math.log(3000))
    np.testing.assert_allclose(plugin_phi(xs, ys, 10.0, chunk_elems=7000), want, rtol=1e-12)


def test_opt_mc_point_alpha_matches_rate_functional():
    spec = ConvolvedSourceSpec(POINT, 1.0)
    est, se = opt_loss_mc(spec, 1.0, m_eval=5000, n_eval=10, seed=RngSeed(3))
    # nu* = delta_0, so every plug-in draw sits at 0 and phi(x) = x^2 / 2 exactly
    xs = spec.sample(5000, RngSeed(3).derive(0).generator())
    exact = rate_functional_eval(empirical_from_samples(xs), POINT, DistortionSpec(), 1.0)[0]
    assert est == pytest.approx(exact, rel=1e-12)
    population = 0.5
    assert abs(est - population) < 3 * se


def test_opt_mc_bias_shrinks_with_n_eval():
    spec = ConvolvedSourceSpec(uniform_circle(), 0.1)
    small, big = [], []
    for k in range(40):
        small.append(opt_loss_mc(spec, 20.0, m_eval=200, n_eval=20, seed=RngSeed(k, 1))[0])
        big.append(opt_loss_mc(spec, 20.0, m_eval=200, n_eval=40, seed=RngSeed(k, 2))[0])
    diff = np.mean(big) - np.mean(small)
    se = math.sqrt(np.var(big, ddof=1) / 40 + np.var(small, ddof=1) / 40)
    assert diff <= 1.645 * se


def test_opt_mc_rejects_off_segment():
    with pytest.raises(ConfigError):
        opt_loss_mc(ConvolvedSourceSpec(GMM, 0.1), 1.0, m_eval=10, n_eval=10)

import math

import numpy as np
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rdwgd.ba import ba_solve
from rdwgd.datasets import decode_rdsamp1, encode_rdsamp1
from rdwgd.distortion import DistortionSpec, pairwise_distortion
from rdwgd.measures import DiscreteMeasure, RngSeed, draw_minibatch
from rdwgd.ratefn import evaluate_ba, first_variation_ba, rate_functional_eval, rd_point_from_nu
from rdwgd.wgd import StepSchedule, wgd_run, wgd_step

PROFILE = settings(max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
HALF = DistortionSpec()
coord = st.floats(-4, 4, allow_nan=False, allow_subnormal=False)
lams = st.floats(0.05, 30.0)


@st.composite
def measures(draw, max_n=8, d=None, uniform=False):
    d = d or draw(st.integers(1, 3))
    n = draw(st.integers(1, max_n))
    pts = draw(arrays(np.float64, (n, d), elements=coord))
    if uniform:
        return DiscreteMeasure(pts)
    raw = draw(arrays(np.float64, n, elements=st.floats(0.01, 1.0)))
    return DiscreteMeasure(pts, raw / raw.sum())


@st.composite
def pairs(draw, uniform_nu=False):
    d = draw(st.integers(1, 3))
    return draw(measures(12, d)), draw(measures(6, d, uniform=uniform_nu))


@PROFILE
@given(measures(max_n=30))
def test_weights_sum_to_one(mu):
    assert abs(mu.weights.sum() - 1.0) <= 1e-12


@PROFILE
@given(measures(max_n=10), st.integers(1, 50), st.integers(0, 2**32 - 1))
def test_minibatch_weights_exact(mu, m, s):
    b = draw_minibatch(mu, m, RngSeed(s))
    assert np.all(b.weights == 1.0 / m)


@PROFILE
@given(pairs(), lams, st.randoms(use_true_random=False))
def test_rate_functional_permutation_invariant(pair, lam, r):
    mu, nu = pair
    base, _ = rate_functional_eval(mu, nu, HALF, lam)
    pm = list(range(mu.n))
    pn = list(range(nu.n))
    r.shuffle(pm)
    r.shuffle(pn)
    mu2 = DiscreteMeasure(mu.points[pm], mu.weights[pm])
    nu2 = DiscreteMeasure(nu.points[pn], nu.weights[pn])
    other, _ = rate_functional_eval(mu2, nu2, HALF, lam)
    assert abs(base - other) <= 1e-12 * max(1.0, abs(base))


@PROFILE
@given(pairs(), lams, st.floats(0.1, 0.9))
def test_rate_functional_merge_invariant(pair, lam, frac):
    mu, nu = pair
    base, _ = rate_functional_eval(mu, nu, HALF, lam)
    # split atom 0 into two coincident copies
    pts = np.vstack([nu.points, nu.points[:1]])
    w = np.append(nu.weights, nu.weights[0] * (1 - frac))
    w[0] *= frac
    split, _ = rate_functional_eval(mu, DiscreteMeasure(pts, w), HALF, lam)
    assert abs(base - split) <= 1e-12 * max(1.0, abs(base))


@PROFILE
@given(pairs(), lams)
def test_first_variation_weighted_sum(pair, lam):
    mu, nu = pair
    psi = first_variation_ba(mu, nu, HALF, lam).values
    assert abs(nu.weights @ psi + 1.0) <= 1e-12


@PROFILE
@given(pairs(uniform_nu=True), lams)
def test_loss_identity_and_ceiling(pair, lam):
    mu, nu = pair
    p = rd_point_from_nu(mu, nu, HALF, lam)
    assert abs(p.loss - (p.rate + lam * p.distortion)) <= 1e-9 * max(1.0, abs(p.loss))
    assert p.rate <= math.log(p.n_atoms) + 1e-9
    assert p.rate >= -1e-9


@PROFILE
@given(pairs(), lams)
def test_ba_monotone(pair, lam):
    mu, nu = pair
    res = ba_solve(mu, nu, HALF, lam, max_iters=40, tol=0.0)
    diffs = np.diff(res.trace)
    assert np.all(diffs <= 1e-12 * np.maximum(1.0, np.abs(res.trace[:-1])))
    assert res.nu.points.tobytes() == nu.points.tobytes()


@PROFILE
@given(pairs(), lams)
def test_ba_fixed_point_respects_ceiling(pair, lam):
    mu, nu = pair
    res = ba_solve(mu, nu, HALF, lam, max_iters=200)
    p = rd_point_from_nu(mu, res.nu, HALF, lam)
    assert p.rate <= math.log(nu.n) + 1e-9


@PROFILE
@given(measures(max_n=6), measures(max_n=6))
def test_distortion_nonnegative_zero_diagonal(a, b):
    if a.dim != b.dim:
        b = DiscreteMeasure(np.resize(b.points, (b.n, a.dim)))
    for kind in ("half_squared_euclidean", "squared_euclidean"):
        spec = DistortionSpec(kind)
        C = pairwise_distortion(spec, a.points, b.points)
        assert np.all(C >= 0)
        assert np.all(np.diag(pairwise_distortion(spec, a.points, a.points)) == 0)
        np.testing.assert_allclose(C.T, pairwise_distortion(spec, b.points, a.points), rtol=0, atol=0)


@PROFILE
@given(measures(max_n=5, d=2), st.floats(-1, 1), st.floats(1e-3, 1.0))
def test_wgd_step_conserves_weights(nu, g, gamma):
    out = wgd_step(nu, np.full(nu.points.shape, g), gamma)
    assert out.weights.tobytes() == nu.weights.tobytes()
    np.testing.assert_allclose(out.points, nu.points - gamma * g)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["constant", "inverse_decay", "adaptive_moment"]))
def test_wgd_deterministic(s, kind):
    mu = DiscreteMeasure(np.random.default_rng(7).normal(size=(60, 2)))
    sched = StepSchedule(kind, 0.05)
    runs = [wgd_run(mu, HALF, 3.0, 4, sched, iters=5, seed=RngSeed(s), batch_size=20, eval_size=None)
            for _ in range(2)]
    assert runs[0].loss_trace == runs[1].loss_trace
    assert runs[0].final_nu.points.tobytes() == runs[1].final_nu.points.tobytes()


@PROFILE
@given(st.integers(1, 5).flatmap(lambda d: arrays(np.float64, st.tuples(st.integers(1, 30), st.just(d)),
                                                  elements=st.floats(allow_nan=True, allow_infinity=True))))
def test_rdsamp1_round_trip(x):
    assert decode_rdsamp1(encode_rdsamp1(x)).tobytes() == x.tobytes()


@PROFILE
@given(pairs(), lams)
def test_evaluate_marginal_is_probability(pair, lam):
    mu, nu = pair
    marg = evaluate_ba(mu, nu, HALF, lam, marginal=True).marginal
    assert np.all(marg >= 0) and abs(marg.sum() - 1.0) <= 1e-12

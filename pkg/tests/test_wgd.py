import math

import numpy as np
import pytest

from rdwgd.distortion import HAMMING, DistortionSpec
from rdwgd.errors import ConfigError, NumericError, UnsupportedOperation
from rdwgd.measures import DiscreteMeasure, RngSeed, empirical_from_samples
from rdwgd.ratefn import evaluate_ba, rd_point_from_nu, wgd_gradient_ba
from rdwgd.sources import ConvolvedSourceSpec, sample_convolved, uniform_circle
from rdwgd.wgd import StepSchedule, grad_norm_sq, hybrid_run, wgd_run, wgd_step

HALF = DistortionSpec()


@pytest.fixture(scope="module")
def small_circle():
    return sample_convolved(ConvolvedSourceSpec(uniform_circle(), 0.1), 3000, RngSeed(8))


def test_step_hand_example():
    mu, nu = DiscreteMeasure([[0.0]]), DiscreteMeasure([[2.0]])
    g = wgd_gradient_ba(mu, nu, HALF, 1.0)
    np.testing.assert_allclose(g, [[2.0]])
    assert wgd_step(nu, g, 0.1).points[0, 0] == pytest.approx(1.8, abs=1e-15)


def test_step_zero_gradient_returns_same():
    nu = DiscreteMeasure([[1.0, 2.0], [3.0, 4.0]], [0.3, 0.7])
    assert wgd_step(nu, np.zeros((2, 2)), 0.5) is nu


def test_step_keeps_coincident_atoms():
    nu = DiscreteMeasure([[0.0], [1.0]], [0.25, 0.75])
    out = wgd_step(nu, [[-1.0], [0.0]], 1.0)
    np.testing.assert_array_equal(out.points, [[1.0], [1.0]])
    np.testing.assert_array_equal(out.weights, nu.weights)


def test_step_rejects_nonfinite():
    nu = DiscreteMeasure([[0.0], [1.0], [2.0]])
    with pytest.raises(NumericError, match="atom 2"):
        wgd_step(nu, [[0.0], [1.0], [np.nan]], 0.1)


def test_schedule_values():
    s = StepSchedule("inverse_decay", 0.5, 2.0)
    assert [s.gamma(t) for t in range(3)] == [0.5, 0.5 / 3, 0.1]
    assert StepSchedule("constant", 0.3, 5.0).gamma(100) == 0.3


def test_schedule_validation():
    with pytest.raises(ConfigError):
        StepSchedule("sgd")
    with pytest.raises(ConfigError):
        StepSchedule(gamma0=0.0)
    with pytest.raises(ConfigError):
        StepSchedule(decay=-1.0)
    with pytest.raises(ConfigError):
        StepSchedule("adaptive_moment", beta1=1.0)


def test_adaptive_moment_first_step_is_sign():
    stepper = StepSchedule("adaptive_moment", 0.01).stepper()
    d, gamma = stepper(0, np.array([[3.0, -0.5]]))
    np.testing.assert_allclose(d, [[1.0, -1.0]], rtol=1e-6)
    assert gamma == 0.01


def test_grad_norm_examples():
    assert grad_norm_sq(DiscreteMeasure([[1.0]]), DiscreteMeasure([[1.0]]), HALF, 3.0) == 0.0
    assert grad_norm_sq(DiscreteMeasure([[0.0]]), DiscreteMeasure([[2.0]]), HALF, 1.0) == pytest.approx(4.0)


def test_single_particle_converges_to_data_point():
    mu = DiscreteMeasure([[0.5, -1.5]])
    run = wgd_run(mu, HALF, 2.0, 1, StepSchedule("constant", 0.25), 60, 0, nu0=DiscreteMeasure([[3.0, 3.0]]))
    np.testing.assert_allclose(run.final_nu.points, mu.points, atol=1e-12)
    assert run.final_loss == pytest.approx(0.0, abs=1e-12)


def test_run_is_deterministic(small_circle):
    sch = StepSchedule("inverse_decay", 0.1, 0.01)
    a = wgd_run(small_circle, HALF, 10.0, 8, sch, 15, RngSeed(3), batch_size=256, eval_size=500)
    b = wgd_run(small_circle, HALF, 10.0, 8, sch, 15, RngSeed(3), batch_size=256, eval_size=500)
    assert a.loss_trace == b.loss_trace and a.grad_norm_trace == b.grad_norm_trace
    assert np.array_equal(a.final_nu.points, b.final_nu.points)
    c = wgd_run(small_circle, HALF, 10.0, 8, sch, 15, RngSeed(4), batch_size=256, eval_size=500)
    assert c.loss_trace != a.loss_trace


def test_run_config_errors(small_circle):
    sch = StepSchedule()
    with pytest.raises(ConfigError):
        wgd_run(small_circle, HALF, 1.0, 0, sch, 5, 0)
    with pytest.raises(ConfigError):
        wgd_run(small_circle, HALF, 1.0, 3, sch, 0, 0)
    with pytest.raises(UnsupportedOperation):
        wgd_run(small_circle, DistortionSpec(HAMMING), 1.0, 3, sch, 5, 0)


def test_sampler_source_runs():
    def sampler(m, rng):
        return rng.normal(size=(m, 2))

    run = wgd_run(sampler, HALF, 2.0, 5, StepSchedule("inverse_decay", 0.3, 0.05), 30, 1, batch_size=128,
                  eval_size=2000)
    assert run.iterations == 30
    assert run.final_loss < run.loss_trace[0][1]


def test_trace_shapes(small_circle):
    run = wgd_run(small_circle, HALF, 10.0, 6, StepSchedule("constant", 0.1), 20, 0, eval_every=5, eval_size=None)
    assert [it for it, _ in run.loss_trace] == [0, 5, 10, 15, 20]
    assert len(run.grad_norm_trace) == 21
    assert run.config["seed"] == [0, 0] and run.config["n"] == 6


def test_weights_never_change_under_wgd(small_circle):
    nu0 = DiscreteMeasure(small_circle.points[:5], [0.1, 0.2, 0.3, 0.2, 0.2])
    run = wgd_run(small_circle, HALF, 10.0, 5, StepSchedule("constant", 0.1), 10, 0, nu0=nu0, eval_size=None)
    assert np.array_equal(run.final_nu.weights, nu0.weights)


def test_eot_loss_decreases():
    rng = np.random.default_rng(1)
    mu = empirical_from_samples(rng.normal(size=(60, 2)))
    run = wgd_run(mu, HALF, 2.0, 4, StepSchedule("constant", 0.2), 25, 0, loss="eot", eval_size=None)
    assert run.config["method"] == "wgd_eot"
    assert run.final_loss < run.loss_trace[0][1]
    # the EOT value upper-bounds the BA value at the same measure
    assert evaluate_ba(mu, run.final_nu, HALF, 2.0).loss <= run.final_loss + 1e-9


def test_ceiling_on_final_nu(small_circle):
    run = wgd_run(small_circle, HALF, 200.0, 4, StepSchedule("constant", 0.005), 30, 0, eval_size=None)
    p = rd_point_from_nu(small_circle, run.final_nu, HALF, 200.0)
    assert p.rate <= math.log(4) + 1e-9


def test_hybrid_rejects_minibatch(small_circle):
    with pytest.raises(UnsupportedOperation):
        hybrid_run(small_circle, HALF, 10.0, 5, StepSchedule(), 5, 0, batch_size=100)
    with pytest.raises(ConfigError):
        hybrid_run(small_circle, HALF, 10.0, 5, StepSchedule(), 5, 0, ba_every=0)


def test_hybrid_ba_steps_monotone(small_circle):
    run = hybrid_run(small_circle, HALF, 10.0, 10, StepSchedule("inverse_decay", 0.1, 0.01), 40, 2, ba_every=2)
    assert len(run.ba_steps) == 20
    for _, before, after in run.ba_steps:
        assert after <= before + 1e-12 * max(1.0, abs(before))


def test_hybrid_ba_step_on_converged_nu(small_circle):
    first = hybrid_run(small_circle, HALF, 10.0, 6, StepSchedule("constant", 0.1), 100, 0)
    again = hybrid_run(small_circle, HALF, 10.0, 6, StepSchedule("constant", 0.1), 5, 0, nu0=first.final_nu)
    for _, before, after in again.ba_steps:
        assert after - before <= 0.0 or abs(after - before) <= 1e-12


def test_hybrid_fixes_weights_on_optimal_atoms():
    mu = empirical_from_samples([[-1.0], [1.0]])
    nu0 = DiscreteMeasure([[-1.0], [1.0]], [0.8, 0.2])
    lam = 10.0
    g0 = grad_norm_sq(mu, nu0, HALF, lam)
    run = hybrid_run(mu, HALF, lam, 2, StepSchedule("constant", 0.01), 1, 0, nu0=nu0)
    np.testing.assert_allclose(run.final_nu.weights, [0.5, 0.5], atol=1e-8)
    np.testing.assert_allclose(run.final_nu.points, nu0.points, atol=1e-8)
    assert all(v <= g0 + 1e-15 for _, v in run.grad_norm_trace)
    assert run.final_loss == pytest.approx(math.log(2), abs=1e-7)


@pytest.mark.slow
def test_constant_step_descent_on_circle():
    mu = sample_convolved(ConvolvedSourceSpec(uniform_circle(), 0.1), 100_000, RngSeed(0))
    lam, n = 10.0, 20
    nu0 = DiscreteMeasure(mu.points[RngSeed(1).generator().permutation(mu.n)[:n]])
    # backtracking probe: largest gamma whose first step passes an Armijo test, then halved
    ev = evaluate_ba(mu, nu0, HALF, lam, grad=True)
    slope = float(nu0.weights @ (ev.grad ** 2).sum(axis=1))
    gamma = 1.0
    while evaluate_ba(mu, wgd_step(nu0, ev.grad, gamma), HALF, lam).loss > ev.loss - 0.5 * gamma * slope:
        gamma /= 2
    run = wgd_run(mu, HALF, lam, n, StepSchedule("constant", gamma / 2), 100, 0, nu0=nu0, eval_size=None)
    losses = np.array([v for _, v in run.loss_trace])
    assert np.all(np.diff(losses) <= 1e-10)

"""Euler-Maruyama rollouts: increments, steps, reproducibility, convergence."""

import numpy as np
import pytest

from pacsde import bnn, priors, sde
from pacsde import diffcore as dc


def _linear_bnn(weight: float, bias: float, dim: int = 1) -> bnn.PosteriorNodes:
    """A one-layer net that computes weight*h + bias almost deterministically."""
    arch = bnn.MlpArch((dim, dim))
    post = bnn.init_posterior(arch, 0)
    lp = post.layers[0]
    lp.weight_mean[:] = weight * np.eye(dim)
    lp.bias_mean[:] = bias
    lp.weight_logvar[:] = -60.0
    lp.bias_logvar[:] = -60.0
    return bnn.lift(post)


def test_time_grid_validation():
    with pytest.raises(ValueError):
        sde.TimeGrid(np.array([0.0, 0.1, 0.1]))
    grid = sde.TimeGrid(np.array([0.0, 0.2, 0.5]))
    assert grid.n_steps == 2
    assert np.allclose(grid.dts, [0.2, 0.3])


def test_diffusion_spec_requires_positive_scale():
    with pytest.raises(ValueError):
        sde.DiffusionSpec(np.array([1.0, 0.0]))
    spec = sde.DiffusionSpec.isotropic(2.0, 3)
    assert np.array_equal(spec.variance, np.full(3, 4.0))


def test_wiener_increment_moments():
    grid = sde.TimeGrid(0.01 * np.arange(11))  # 10 steps of dt = 0.01
    draws = sde.wiener_increments(grid, 10_000, 10, seed=5)
    assert draws.shape == (10_000, 10, 10)
    std = float(draws.std())
    assert abs(std - 0.1) / 0.1 < 0.005


def test_wiener_increments_deterministic_per_seed():
    grid = sde.TimeGrid(np.array([0.0, 0.5, 1.5]))
    a = sde.wiener_increments(grid, 4, 2, seed=9)
    b = sde.wiener_increments(grid, 4, 2, seed=9)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, sde.wiener_increments(grid, 4, 2, seed=10))


def test_wiener_increments_degenerate_grid():
    grid = sde.TimeGrid(np.array([1.0]))
    draws = sde.wiener_increments(grid, 3, 2, seed=0)
    assert draws.shape == (3, 0, 2)


def test_wiener_samples_are_nested_across_sample_counts():
    grid = sde.TimeGrid(np.linspace(0.0, 1.0, 6))
    small = sde.wiener_increments(grid, 2, 3, seed=4)
    big = sde.wiener_increments(grid, 5, 3, seed=4)
    assert np.array_equal(small, big[:2])


def test_em_step_hand_arithmetic():
    # drift 2, no prior, g=1, h=1, dt=0.01, dW=0.05 -> h' = 1.07
    drift = sde.HybridDriftSpec(neural=_linear_bnn(0.0, 2.0))
    h = dc.constant(np.array([[1.0]]))
    h_next, f_k = sde.em_step(h, 0.0, 0.01, drift, sde.DiffusionSpec(np.array([1.0])),
                              np.array([[0.05]]), [np.zeros((1, 1))])
    assert abs(float(h_next.value[0, 0]) - 1.07) < 1e-12
    assert abs(float(f_k.value[0, 0]) - 2.0) < 1e-12


def test_em_step_zero_drift_zero_noise_is_identity():
    drift = sde.HybridDriftSpec(neural=_linear_bnn(0.0, 0.0, dim=2))
    h0 = np.array([[1.5, -2.0]])
    h_next, _ = sde.em_step(dc.constant(h0), 0.0, 0.1, drift,
                            sde.DiffusionSpec(np.array([1.0, 1.0])),
                            np.zeros((1, 2)), [np.zeros((1, 2))])
    assert np.array_equal(h_next.value, h0)


def test_em_step_prior_only_reduces_to_prior_sde():
    ode = priors.PriorOde("lorenz", (10.0, 28.0, 2.67))
    drift = sde.HybridDriftSpec(prior=ode, gamma=priors.GammaMask([1.0, 1.0, 1.0]))
    h0 = np.array([[1.0, 2.0, 3.0]])
    dW = np.array([[0.1, -0.2, 0.3]])
    h_next, f_k = sde.em_step(dc.constant(h0), 0.0, 0.01, drift,
                              sde.DiffusionSpec(np.ones(3)), dW)
    assert f_k is None
    want = h0 + priors.lorenz_drift(h0) * 0.01 + dW
    assert np.allclose(h_next.value, want, rtol=1e-15)


def test_simulate_constant_drift_zero_noise_is_exact_quadrature():
    drift = sde.HybridDriftSpec(neural=_linear_bnn(0.0, 1.7))
    grid = sde.TimeGrid(np.array([0.0, 0.1, 0.35, 0.5, 1.0]))
    K, S = grid.n_steps, 3
    path = sde.simulate(np.array([2.0]), grid, drift, sde.DiffusionSpec(np.array([1.0])),
                        S, wiener=np.zeros((S, K, 1)),
                        layer_noise=[np.zeros((S, K, 1))])
    want = 2.0 + 1.7 * (grid.times - grid.times[0])
    assert np.allclose(path.states[:, :, 0], want[None, :], rtol=1e-13, atol=1e-13)


def test_simulate_initial_state_is_preserved():
    drift = sde.HybridDriftSpec(neural=_linear_bnn(-1.0, 0.0))
    grid = sde.TimeGrid(np.linspace(0.0, 1.0, 5))
    path = sde.simulate(np.array([3.0]), grid, drift,
                        sde.DiffusionSpec(np.array([1.0])), 4, seed=0)
    assert np.all(path.states[:, 0, 0] == 3.0)


def test_simulate_reproducible_and_nested():
    drift = sde.HybridDriftSpec(neural=_linear_bnn(-1.0, 0.0))
    grid = sde.TimeGrid(np.linspace(0.0, 1.0, 11))
    G = sde.DiffusionSpec(np.array([1.0]))
    a = sde.simulate(np.array([1.0]), grid, drift, G, 2, seed=7)
    b = sde.simulate(np.array([1.0]), grid, drift, G, 2, seed=7)
    assert np.array_equal(a.states, b.states)
    # first sample of a larger bundle coincides with the smaller bundle
    c = sde.simulate(np.array([1.0]), grid, drift, G, 1, seed=7)
    assert np.array_equal(c.states[0], a.states[0])


def test_simulate_ou_terminal_variance():
    # dh = -h dt + dW from h0 = 0: Var[h_1] ~= (1 - e^-2)/2
    drift = sde.HybridDriftSpec(neural=_linear_bnn(-1.0, 0.0))
    grid = sde.TimeGrid(np.linspace(0.0, 1.0, 1001))
    path = sde.simulate(np.array([0.0]), grid, drift,
                        sde.DiffusionSpec(np.array([1.0])), 10_000, seed=123)
    term = path.states[:, -1, 0]
    want = (1.0 - np.exp(-2.0)) / 2.0
    stderr = want * np.sqrt(2.0 / term.size)
    assert abs(term.var() - want) < 3.0 * stderr


def test_retained_drift_values_match_replay():
    arch = bnn.MlpArch((2, 5, 2))
    post = bnn.init_posterior(arch, 21)
    lift = bnn.lift(post)
    prior = priors.PriorOde("lotka_volterra", (2.0, 1.0, 4.0, 1.0))
    drift = sde.HybridDriftSpec(neural=lift, prior=prior,
                                gamma=priors.GammaMask([1.0, 0.5]))
    grid = sde.TimeGrid(np.array([0.0, 0.1, 0.3, 0.4]))
    path = sde.simulate(np.array([3.0, 1.5]), grid, drift,
                        sde.DiffusionSpec(np.array([0.2, 0.3])), 4, seed=11)
    for k in range(grid.n_steps):
        noise_k = [ln[:, k, :] for ln in path.layer_noise]
        replay = bnn.drift_forward(dc.constant(path.states[:, k, :]), float(grid.times[k]),
                                   lift, noise_k)
        assert np.array_equal(replay.value, path.drift_values[:, k, :])


def test_divergence_error_carries_location():
    # blow up through the bilinear prior from a huge initial state
    prior = priors.PriorOde("lorenz", (10.0, 28.0, 2.67))
    drift = sde.HybridDriftSpec(prior=prior, gamma=priors.GammaMask(np.ones(3)))
    grid = sde.TimeGrid(np.linspace(0.0, 1.0, 101))
    with pytest.raises(sde.DivergenceError) as exc:
        sde.simulate(np.array([9e5, 9e5, 9e5]), grid, drift,
                     sde.DiffusionSpec(np.ones(3)), 2, seed=0)
    assert exc.value.step is not None and exc.value.sample is not None


def test_hybrid_spec_validation():
    with pytest.raises(ValueError):
        sde.HybridDriftSpec()
    ode = priors.PriorOde("lorenz", (10.0, 28.0, 2.67))
    with pytest.raises(ValueError, match="gamma"):
        sde.HybridDriftSpec(prior=ode, gamma=priors.GammaMask([1.0]))
    spec = sde.HybridDriftSpec(prior=ode)
    assert spec.gamma.dim == 3 and spec.state_dim == 3


def test_convergence_study_requires_three_step_sizes():
    with pytest.raises(ValueError):
        sde.convergence_study(sde.OrnsteinUhlenbeckOracle(), [0.1, 0.05], 8)


def test_convergence_error_decreases_with_dt():
    report = sde.convergence_study(sde.OrnsteinUhlenbeckOracle(),
                                   [0.1, 0.05, 0.025, 0.0125], 64, seed=3)
    assert report.errors[0] > report.errors[-1]
    assert report.slope > 0.5


def test_deterministic_linear_halving_ratio():
    # zero noise, linear drift: halving dt halves the error (order 1)
    report = sde.convergence_study(sde.DeterministicLinearOracle(),
                                   [0.1, 0.05, 0.025], 1, seed=0)
    ratio = report.errors[0] / report.errors[1]
    assert abs(ratio - 2.0) < 0.2

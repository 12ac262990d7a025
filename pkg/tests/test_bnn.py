"""Bayesian drift net: init, local reparameterization, weight-space KL."""

import math

import numpy as np
import pytest

from pacsde import bnn
from pacsde import diffcore as dc


def _oracle_param_count(widths):
    weights = sum(a * b for a, b in zip(widths[:-1], widths[1:]))
    biases = sum(widths[1:])
    return 2 * (weights + biases)


def test_parameter_count_matches_architecture():
    arch = bnn.MlpArch((3, 100, 100, 3))
    post = bnn.init_posterior(arch, 0)
    assert post.n_parameters == _oracle_param_count((3, 100, 100, 3)) == 21606


def test_same_seed_gives_bit_identical_posterior():
    arch = bnn.MlpArch((2, 5, 2))
    a = bnn.init_posterior(arch, 11)
    b = bnn.init_posterior(arch, 11)
    for la, lb in zip(a.layers, b.layers):
        assert np.array_equal(la.weight_mean, lb.weight_mean)
        assert np.array_equal(la.bias_logvar, lb.bias_logvar)
    c = bnn.init_posterior(arch, 12)
    assert not np.array_equal(a.layers[0].weight_mean, c.layers[0].weight_mean)


def test_initial_weight_std():
    arch = bnn.MlpArch((3, 4, 3))
    post = bnn.init_posterior(arch, 0)
    std = math.exp(-6.0 / 2.0)
    assert abs(std - 0.049787068367863944) < 1e-15
    for lp in post.layers:
        assert np.all(np.exp(lp.weight_logvar / 2.0) == std)


def test_init_mean_variance_is_xavier():
    arch = bnn.MlpArch((50, 200))
    post = bnn.init_posterior(arch, 5)
    sampled = post.layers[0].weight_mean
    want_var = 2.0 / (50 + 200)
    assert abs(sampled.var() - want_var) / want_var < 0.05


def test_layer_output_with_zero_input_is_bias_term():
    arch = bnn.MlpArch((2, 3))
    post = bnn.init_posterior(arch, 0)
    lp = post.layers[0]
    lift = bnn.lift(post)
    noise = np.random.default_rng(0).standard_normal((4, 3))
    out = bnn.sample_layer_output(dc.constant(np.zeros((4, 2))), lift.layers[0], noise)
    want = lp.bias_mean + np.exp(lp.bias_logvar / 2.0) * noise
    assert np.allclose(out.value, want, rtol=1e-14)


def test_layer_output_with_zero_noise_is_mean_preactivation():
    arch = bnn.MlpArch((3, 2))
    post = bnn.init_posterior(arch, 1)
    lp = post.layers[0]
    lift = bnn.lift(post)
    x = np.random.default_rng(1).normal(size=(5, 3))
    out = bnn.sample_layer_output(dc.constant(x), lift.layers[0], np.zeros((5, 2)))
    assert np.allclose(out.value, x @ lp.weight_mean + lp.bias_mean, rtol=1e-14)


def test_local_reparameterization_moments():
    # empirical mean/variance of sampled outputs vs analytic moments
    rng = np.random.default_rng(7)
    arch = bnn.MlpArch((3, 2))
    post = bnn.init_posterior(arch, 7)
    lp = post.layers[0]
    lp.weight_mean[:] = rng.uniform(0.5, 1.5, size=(3, 2))
    lp.bias_mean[:] = rng.uniform(0.5, 1.5, size=2)
    lp.weight_logvar[:] = rng.uniform(-2.0, 0.0, size=(3, 2))
    lp.bias_logvar[:] = rng.uniform(-2.0, 0.0, size=2)
    lift = bnn.lift(post)
    x = np.array([1.0, 0.5, 1.5])
    n = 100_000
    noise = rng.standard_normal((n, 2))
    out = bnn.sample_layer_output(
        dc.constant(np.broadcast_to(x, (n, 3)).copy()), lift.layers[0], noise
    ).value
    mean_exact = x @ lp.weight_mean + lp.bias_mean
    var_exact = x**2 @ np.exp(lp.weight_logvar) + np.exp(lp.bias_logvar)
    assert np.all(np.abs(out.mean(axis=0) - mean_exact) / np.abs(mean_exact) < 0.01)
    assert np.all(np.abs(out.var(axis=0) - var_exact) / var_exact < 0.01)


def test_drift_forward_zero_network_outputs_zero():
    arch = bnn.MlpArch((2, 4, 2))
    post = bnn.init_posterior(arch, 0)
    for lp in post.layers:
        lp.weight_mean[:] = 0.0
        lp.bias_mean[:] = 0.0
    lift = bnn.lift(post)
    h = dc.constant(np.random.default_rng(0).normal(size=(3, 2)))
    noise = [np.zeros((3, 4)), np.zeros((3, 2))]
    out = bnn.drift_forward(h, 0.0, lift, noise)
    assert np.array_equal(out.value, np.zeros((3, 2)))


def test_drift_forward_distinct_noise_distinct_outputs():
    arch = bnn.MlpArch((2, 4, 2))
    post = bnn.init_posterior(arch, 3)
    lift = bnn.lift(post)
    rng = np.random.default_rng(0)
    h = dc.constant(np.ones((2, 2)))
    noise = [rng.standard_normal((2, 4)), rng.standard_normal((2, 2))]
    out = bnn.drift_forward(h, 0.0, lift, noise).value
    assert not np.allclose(out[0], out[1])


def test_drift_forward_reproducible():
    arch = bnn.MlpArch((2, 4, 2))
    post = bnn.init_posterior(arch, 3)
    lift = bnn.lift(post)
    noise = [np.random.default_rng(9).standard_normal((2, 4)),
             np.random.default_rng(10).standard_normal((2, 2))]
    h = np.random.default_rng(11).normal(size=(2, 2))
    a = bnn.drift_forward(dc.constant(h), 0.0, lift, noise).value
    b = bnn.drift_forward(dc.constant(h), 0.0, lift, noise).value
    assert np.array_equal(a, b)


def test_time_input_appends_column():
    arch = bnn.MlpArch((3, 4, 2), time_input=True)
    arch.validate_state_dim(2)
    post = bnn.init_posterior(arch, 0)
    lift = bnn.lift(post)
    out = bnn.drift_forward(dc.constant(np.zeros((2, 2))), 1.5, lift,
                            [np.zeros((2, 4)), np.zeros((2, 2))])
    assert out.value.shape == (2, 2)


def test_weight_kl_zero_iff_posterior_equals_prior():
    arch = bnn.MlpArch((2, 3))
    post = bnn.init_posterior(arch, 0)
    lp = post.layers[0]
    lp.weight_mean[:] = 0.0
    lp.weight_logvar[:] = 0.0
    lp.bias_mean[:] = 0.0
    lp.bias_logvar[:] = 0.0
    assert bnn.weight_kl(post) == 0.0
    lp.weight_mean[0, 0] = 0.1
    assert bnn.weight_kl(post) > 0.0
    lp.weight_mean[0, 0] = 0.0
    lp.bias_logvar[1] = -0.3
    assert bnn.weight_kl(post) > 0.0


def test_weight_kl_closed_form_values():
    arch = bnn.MlpArch((1, 1))
    post = bnn.init_posterior(arch, 0)
    lp = post.layers[0]
    lp.weight_mean[:] = 1.0
    lp.weight_logvar[:] = 0.0
    lp.bias_mean[:] = 0.0
    lp.bias_logvar[:] = 0.0
    assert abs(bnn.weight_kl(post) - 0.5) < 1e-15

    lp.weight_mean[:] = 0.0
    lp.weight_logvar[:] = -6.0
    want = 0.5 * (math.exp(-6.0) - 1.0 + 6.0)
    assert abs(want - 2.5012393760883332) < 1e-15
    assert abs(bnn.weight_kl(post) - want) < 1e-14


def test_weight_kl_nonnegative_under_random_perturbations():
    rng = np.random.default_rng(5)
    arch = bnn.MlpArch((3, 4, 2))
    for _ in range(50):
        post = bnn.init_posterior(arch, rng.integers(2**31))
        for lp in post.layers:
            lp.weight_mean += rng.normal(scale=0.5, size=lp.weight_mean.shape)
            lp.weight_logvar += rng.normal(scale=0.5, size=lp.weight_logvar.shape)
        assert bnn.weight_kl(post) >= 0.0


def _central_diff(eval_at, base: np.ndarray, step: float) -> np.ndarray:
    """Central finite differences of a scalar function of one array."""
    flat = base.ravel()
    out = np.empty_like(flat)
    for i in range(flat.size):
        up = flat.copy()
        up[i] += step
        dn = flat.copy()
        dn[i] -= step
        out[i] = (eval_at(up.reshape(base.shape)) - eval_at(dn.reshape(base.shape))) / (2 * step)
    return out.reshape(base.shape)


def test_weight_kl_node_matches_float_and_finite_differences():
    arch = bnn.MlpArch((2, 3))
    post = bnn.init_posterior(arch, 9)
    lift = bnn.lift(post)
    node = bnn.weight_kl_node(lift)
    assert abs(float(node.value) - bnn.weight_kl(post)) < 1e-12

    grads = dc.backward(node)
    lp = post.layers[0]
    for attr, leaf in (("weight_mean", lift.layers[0].M), ("weight_logvar", lift.layers[0].L)):
        base = getattr(lp, attr).copy()

        def kl_at(x, attr=attr, base=base):
            getattr(lp, attr)[...] = x
            val = bnn.weight_kl(post)
            getattr(lp, attr)[...] = base
            return val

        fd = _central_diff(kl_at, base, 1e-5)
        rel = np.abs(grads[leaf] - fd) / np.maximum(1.0, np.abs(grads[leaf]))
        assert rel.max() < 1e-6


def test_drift_forward_gradient_matches_finite_differences():
    # frozen noise; gradient w.r.t. the first layer's weight means
    arch = bnn.MlpArch((2, 3, 2))
    post = bnn.init_posterior(arch, 4)
    rng = np.random.default_rng(4)
    noise = [rng.standard_normal((3, 3)), rng.standard_normal((3, 2))]
    h = rng.normal(size=(3, 2))
    probe = rng.normal(size=(3, 2))
    lp = post.layers[0]
    base = lp.weight_mean.copy()

    lifted = bnn.lift(post)
    out = dc.sum(dc.mul(bnn.drift_forward(dc.constant(h), 0.0, lifted, noise),
                        dc.constant(probe)))
    analytic = dc.backward(out)[lifted.layers[0].M]

    def loss_at(x):
        lp.weight_mean[...] = x
        lifted = bnn.lift(post)
        val = float(dc.sum(dc.mul(bnn.drift_forward(dc.constant(h), 0.0, lifted, noise),
                                  dc.constant(probe))).value)
        lp.weight_mean[...] = base
        return val

    fd = _central_diff(loss_at, base, 1e-5)
    rel = np.abs(analytic - fd) / np.maximum(1.0, np.abs(analytic))
    assert rel.max() < 1e-4


def test_flat_dict_round_trip():
    arch = bnn.MlpArch((2, 4, 2))
    post = bnn.init_posterior(arch, 8)
    flat = post.to_flat_dict()
    assert set(flat) == {f"layer{i}.{k}" for i in range(2) for k in "MLbc"}
    rebuilt = bnn.WeightPosterior.from_flat_dict(arch, flat)
    for a, b in zip(post.layers, rebuilt.layers):
        assert np.array_equal(a.weight_mean, b.weight_mean)
        assert np.array_equal(a.bias_logvar, b.bias_logvar)


def test_arch_validation():
    with pytest.raises(ValueError):
        bnn.MlpArch((3,))
    with pytest.raises(ValueError):
        bnn.MlpArch((3, 0, 3))
    with pytest.raises(ValueError):
        bnn.MlpArch((3, 4, 3), hidden_activation="tanh")
    arch = bnn.MlpArch((4, 8, 3), time_input=True)
    arch.validate_state_dim(3)
    with pytest.raises(ValueError):
        arch.validate_state_dim(4)

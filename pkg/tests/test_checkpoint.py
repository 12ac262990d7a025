"""Checkpoint container format and training-state round trips."""

import numpy as np
import pytest

from pacsde import bnn, checkpoint, optim


def test_array_round_trip_with_meta(tmp_path):
    path = tmp_path / "x.ckpt"
    arrays = {
        "a": np.random.default_rng(0).normal(size=(3, 4)),
        "b": np.arange(5.0),
        "scalar": np.asarray(3.25),
    }
    checkpoint.write_arrays(path, arrays, meta={"note": "hello", "n": 7})
    back, meta = checkpoint.read_arrays(path)
    assert meta == {"note": "hello", "n": 7}
    assert set(back) == set(arrays)
    for key in arrays:
        assert np.array_equal(back[key], arrays[key])
        assert back[key].dtype == np.float64


def test_bad_magic_raises(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"NOTACKPT" + b"\x00" * 32)
    with pytest.raises(checkpoint.CheckpointError, match="magic"):
        checkpoint.read_arrays(path)


def test_training_state_round_trip(tmp_path):
    arch = bnn.MlpArch((2, 6, 2))
    post = bnn.init_posterior(arch, 3)
    params = post.to_flat_dict()
    adam = optim.init_adam(params, lr=2e-3)
    # take a step so the optimizer state is non-trivial
    grads = {k: np.random.default_rng(1).normal(size=v.shape) for k, v in params.items()}
    optim.adam_step(params, grads, adam)

    path = tmp_path / "state.ckpt"
    checkpoint.save_training_state(path, post, adam, meta={"variant": "e_bayes"})
    post2, adam2, meta = checkpoint.load_training_state(path)

    assert meta["variant"] == "e_bayes"
    assert post2.arch == arch
    for a, b in zip(post.layers, post2.layers):
        assert np.array_equal(a.weight_mean, b.weight_mean)
        assert np.array_equal(a.weight_logvar, b.weight_logvar)
        assert np.array_equal(a.bias_mean, b.bias_mean)
        assert np.array_equal(a.bias_logvar, b.bias_logvar)
    assert adam2.tau == 1 and adam2.lr == 2e-3
    for key in params:
        assert np.array_equal(adam.m[key], adam2.m[key])
        assert np.array_equal(adam.v[key], adam2.v[key])


def test_posterior_only_checkpoint_has_no_adam(tmp_path):
    arch = bnn.MlpArch((1, 3, 1))
    post = bnn.init_posterior(arch, 0)
    path = tmp_path / "post.ckpt"
    checkpoint.save_training_state(path, post)
    _, adam, _ = checkpoint.load_training_state(path)
    assert adam is None

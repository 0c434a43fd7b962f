import numpy as np
import pytest

import oracles
from stvo import autodiff as ad
from stvo.lie import pixel_grid
from stvo.update import Revision, apply_revision, update_specs, update_step

D_H, C_F, C_C, C_M, C_R = 3, 2, 2, 3, 2
C_IN = C_F + C_C + C_M + C_R


def make_weights(seed=0, d_h=D_H, c_in=C_IN):
    return ad.WeightStore.initialize(update_specs(c_in, d_h), seed=seed)


def inputs(rng, H=4, W=4):
    return (rng.normal(size=(D_H, H, W)), rng.normal(size=(C_F, H, W)), rng.normal(size=(C_C, H, W)),
            rng.normal(size=(C_M, H, W)), rng.normal(size=(C_R, H, W)))


def test_zero_weights_zero_revision_half_confidence():
    w = make_weights()
    for n in w.names():
        w[n] = np.zeros_like(w[n])
    _, rev = update_step(*inputs(np.random.default_rng(0)), w)
    np.testing.assert_array_equal(rev.delta, 0.0)
    np.testing.assert_array_equal(rev.weight, 0.5)


def test_head_bias_gives_constant_revision():
    w = make_weights()
    for n in w.names():
        if n.startswith("head.flow"):
            w[n] = np.zeros_like(w[n])
    w["head.flow.conv2.bias"] = np.array([1.5, -0.25])
    _, rev = update_step(*inputs(np.random.default_rng(1)), w)
    np.testing.assert_array_equal(rev.delta[0], 1.5)
    np.testing.assert_array_equal(rev.delta[1], -0.25)


@pytest.mark.parametrize("seed", range(3))
def test_matches_composed_naive_oracles(seed):
    rng = np.random.default_rng(seed)
    w = make_weights(seed)
    for n in w.names():
        if n.endswith("bias"):
            w[n] = rng.normal(size=w[n].shape)
    h, f, c, m, r = inputs(rng, 3, 4)
    h_new, rev = update_step(h, f, c, m, r, w)
    x = np.concatenate([f, c, m, r])
    h_ref = oracles.gru_loops(h, x, dict(w.items()))

    def head(name):
        a = np.maximum(oracles.conv2d_loops(h_ref, w[f"head.{name}.conv1.weight"],
                                            w[f"head.{name}.conv1.bias"], pad=1), 0)
        return oracles.conv2d_loops(a, w[f"head.{name}.conv2.weight"], w[f"head.{name}.conv2.bias"], pad=1)

    np.testing.assert_allclose(h_new, h_ref, atol=1e-12)
    np.testing.assert_allclose(rev.delta, head("flow"), atol=1e-12)
    np.testing.assert_allclose(rev.weight, 1 / (1 + np.exp(-head("conf"))), atol=1e-12)


def test_confidence_strictly_inside_unit_interval():
    for seed in range(5):
        rng = np.random.default_rng(seed)
        w = make_weights(seed)
        _, rev = update_step(*[a * 3 for a in inputs(rng)], w)
        assert (rev.weight > 0).all() and (rev.weight < 1).all()


def test_deterministic():
    rng = np.random.default_rng(7)
    args = inputs(rng)
    a = update_step(*args, make_weights(3))
    b = update_step(*args, make_weights(3))
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1].delta, b[1].delta)


@pytest.mark.parametrize("seed", range(5))
def test_gradients_wrt_all_weights(seed):
    rng = np.random.default_rng(seed)
    w = make_weights(seed, d_h=2, c_in=4)
    names = w.names()
    h = rng.normal(size=(2, 4, 4))
    f, c, m, r = rng.normal(size=(4, 1, 4, 4))

    def fn(*ws):
        _, rev = update_step(h, f, c, m, r, dict(zip(names, ws)))
        return ad.concat([rev.delta, rev.weight])

    assert ad.gradient_check(fn, [w[n] for n in names], seed=seed) < 1e-4


def test_apply_revision_examples():
    flow = np.random.default_rng(8).normal(size=(2, 3, 4))
    grid = pixel_grid(3, 4)
    np.testing.assert_array_equal(apply_revision(flow, Revision(np.zeros((2, 3, 4)), None)), grid + flow)
    shift = np.zeros((2, 3, 4))
    shift[0] = 1.0
    out = apply_revision(np.zeros((2, 3, 4)), Revision(shift, None))
    np.testing.assert_array_equal(out[0], grid[0] + 1)
    np.testing.assert_array_equal(out[1], grid[1])

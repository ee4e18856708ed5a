"""Dense-net building block: forward/backward exactness, Adam, checkpoints.

The gradient tests compare reverse-mode results against central finite
differences; the forward tests compare against straight-line (loop-free)
evaluations written out by hand so a transcription bug in one place cannot
hide in the other.
"""

import io

import numpy as np
import pytest
from hypothesis import given, settings
import hypothesis.strategies as st

from linerf.errors import ConfigurationError, TrainingError
from linerf.net import (
    ACTIVATIONS,
    AdamState,
    LayerSpec,
    NetParams,
    adam_step,
    adam_update_arrays,
    apply_activation,
    init_net,
    load_net,
    net_backward,
    net_blob_bytes,
    net_forward,
    save_net,
    zero_grads,
)


def rng_for(seed):
    return np.random.Generator(np.random.PCG64(seed))


def random_net(seed, specs=None, skips=()):
    if specs is None:
        specs = [LayerSpec(4, 8), LayerSpec(8, 8), LayerSpec(8, 3, "identity")]
    return init_net(rng_for(seed), specs, skips=skips)


# ---------------------------------------------------------------- activations


class TestActivations:
    def test_relu(self):
        z = np.array([-1.0, 0.0, 2.0])
        np.testing.assert_array_equal(apply_activation("relu", z), [0.0, 0.0, 2.0])

    def test_sigmoid_bounds_and_symmetry(self):
        z = np.linspace(-30, 30, 101)
        s = apply_activation("sigmoid", z)
        assert np.all(s > 0) and np.all(s < 1)
        np.testing.assert_allclose(s + apply_activation("sigmoid", -z), 1.0, atol=1e-12)

    def test_softplus_positive_and_asymptotic(self):
        z = np.array([-700.0, -5.0, 0.0, 5.0, 700.0])
        s = apply_activation("softplus", z)
        assert np.all(s > 0)
        # ln(2) at zero, identity for large positive arguments
        assert abs(s[2] - np.log(2.0)) < 1e-12
        assert abs(s[4] - 700.0) < 1e-9
        assert np.all(np.isfinite(s))

    def test_identity(self):
        z = np.array([-3.0, 9.0])
        np.testing.assert_array_equal(apply_activation("identity", z), z)

    def test_unknown_name_rejected(self):
        with pytest.raises(ConfigurationError):
            apply_activation("tanh", np.zeros(2))

    @given(st.floats(-50, 50))
    def test_softplus_derivative_is_sigmoid(self, z):
        z = np.array([z])
        h = 1e-5
        num = (apply_activation("softplus", z + h) - apply_activation("softplus", z - h)) / (2 * h)
        assert abs(num[0] - apply_activation("sigmoid", z)[0]) < 1e-7


# -------------------------------------------------------------------- forward


class TestForward:
    def test_zero_net_annihilates(self):
        p = NetParams(
            input_dim=3,
            weights=[np.zeros((2, 3))],
            biases=[np.zeros(2)],
            activations=["identity"],
        )
        out, _ = net_forward(p, np.array([5.0, -1.0, 2.0]))
        np.testing.assert_array_equal(out, np.zeros(2))

    def test_identity_relu_layer(self):
        p = NetParams(2, [np.eye(2)], [np.zeros(2)], ["relu"])
        out, _ = net_forward(p, np.array([-1.0, 2.0]))
        np.testing.assert_array_equal(out, [0.0, 2.0])

    def test_three_layer_against_straight_line(self):
        p = random_net(7)
        x = rng_for(8).normal(size=4)
        out, _ = net_forward(p, x)
        # same chain, written out with no loop
        a1 = np.maximum(p.weights[0] @ x + p.biases[0], 0.0)
        a2 = np.maximum(p.weights[1] @ a1 + p.biases[1], 0.0)
        a3 = p.weights[2] @ a2 + p.biases[2]
        np.testing.assert_allclose(out, a3, rtol=0, atol=1e-12)

    def test_skip_concatenates_original_input(self):
        specs = [LayerSpec(3, 5), LayerSpec(5 + 3, 2, "identity")]
        p = random_net(3, specs, skips=(1,))
        x = rng_for(4).normal(size=3)
        out, _ = net_forward(p, x)
        a1 = np.maximum(p.weights[0] @ x + p.biases[0], 0.0)
        a2 = p.weights[1] @ np.concatenate([a1, x]) + p.biases[1]
        np.testing.assert_allclose(out, a2, atol=1e-12)

    def test_batched_matches_rowwise(self):
        p = random_net(11, skips=())
        xs = rng_for(12).normal(size=(6, 4))
        batched, _ = net_forward(p, xs)
        rows = np.stack([net_forward(p, x)[0] for x in xs])
        np.testing.assert_allclose(batched, rows, atol=1e-12)

    def test_dimension_mismatch_rejected(self):
        p = random_net(0)
        with pytest.raises(ConfigurationError):
            net_forward(p, np.zeros(5))

    def test_skip_index_zero_rejected(self):
        with pytest.raises(ConfigurationError):
            NetParams(2, [np.zeros((2, 2))], [np.zeros(2)], ["relu"], skips=(0,))

    def test_bad_chain_rejected(self):
        with pytest.raises(ConfigurationError):
            NetParams(
                2,
                [np.zeros((3, 2)), np.zeros((2, 5))],
                [np.zeros(3), np.zeros(2)],
                ["relu", "identity"],
            )


# ------------------------------------------------------------------- backward


def fd_param_grads(params, x, grad_out, step=1e-4):
    """Central finite differences of <output, grad_out> in every parameter."""
    grads = []
    for arr in params.arrays():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + step
            up = float(np.vdot(net_forward(params, x)[0], grad_out))
            flat[i] = keep - step
            dn = float(np.vdot(net_forward(params, x)[0], grad_out))
            flat[i] = keep
            gflat[i] = (up - dn) / (2 * step)
        grads.append(g)
    return grads


class TestBackward:
    def test_linear_layer_closed_form(self):
        w = rng_for(1).normal(size=(3, 4))
        p = NetParams(4, [w.copy()], [np.zeros(3)], ["identity"])
        x = rng_for(2).normal(size=4)
        g = rng_for(3).normal(size=3)
        out, tape = net_forward(p, x)
        grads, gx = net_backward(p, tape, g)
        np.testing.assert_allclose(grads.weights[0], np.outer(g, x), atol=1e-12)
        np.testing.assert_allclose(grads.biases[0], g, atol=1e-12)
        np.testing.assert_allclose(gx, w.T @ g, atol=1e-12)

    def test_zero_grad_out_gives_zero_grads(self):
        p = random_net(5)
        _, tape = net_forward(p, rng_for(6).normal(size=4))
        grads, gx = net_backward(p, tape, np.zeros(3))
        for arr in grads.arrays():
            np.testing.assert_array_equal(arr, np.zeros_like(arr))
        np.testing.assert_array_equal(gx, np.zeros(4))

    @pytest.mark.parametrize("seed", range(8))
    def test_matches_finite_differences(self, seed):
        specs = [LayerSpec(3, 6), LayerSpec(6, 5, "sigmoid"), LayerSpec(5, 2, "identity")]
        p = init_net(rng_for(seed), specs)
        x = rng_for(seed + 100).normal(size=3)
        g = rng_for(seed + 200).normal(size=2)
        _, tape = net_forward(p, x)
        grads, _ = net_backward(p, tape, g)
        fd = fd_param_grads(p, x, g)
        for got, want in zip(grads.arrays(), fd):
            denom = np.maximum(np.abs(want), 1e-3)
            assert np.max(np.abs(got - want) / denom) < 1e-4

    @pytest.mark.parametrize("seed", range(4))
    def test_skip_net_matches_finite_differences(self, seed):
        specs = [LayerSpec(3, 6), LayerSpec(6 + 3, 6), LayerSpec(6, 2, "identity")]
        p = init_net(rng_for(seed + 50), specs, skips=(1,))
        x = rng_for(seed + 150).normal(size=3)
        g = rng_for(seed + 250).normal(size=2)
        _, tape = net_forward(p, x)
        grads, gx = net_backward(p, tape, g)
        fd = fd_param_grads(p, x, g)
        for got, want in zip(grads.arrays(), fd):
            denom = np.maximum(np.abs(want), 1e-3)
            assert np.max(np.abs(got - want) / denom) < 1e-4
        # input grad includes both the chain path and the skip path
        step = 1e-5
        fdx = np.zeros(3)
        for i in range(3):
            e = np.zeros(3)
            e[i] = step
            fdx[i] = (
                float(np.vdot(net_forward(p, x + e)[0], g))
                - float(np.vdot(net_forward(p, x - e)[0], g))
            ) / (2 * step)
        np.testing.assert_allclose(gx, fdx, rtol=1e-5, atol=1e-7)

    def test_input_grad_batch_shape(self):
        p = random_net(9)
        xs = rng_for(10).normal(size=(5, 4))
        out, tape = net_forward(p, xs)
        _, gx = net_backward(p, tape, np.ones_like(out))
        assert gx.shape == xs.shape

    def test_param_grads_sum_over_batch(self):
        p = random_net(13)
        xs = rng_for(14).normal(size=(4, 4))
        g = rng_for(15).normal(size=(4, 3))
        _, tape = net_forward(p, xs)
        grads, _ = net_backward(p, tape, g)
        acc = zero_grads(p)
        for x, go in zip(xs, g):
            _, tape1 = net_forward(p, x)
            g1, _ = net_backward(p, tape1, go)
            for a, b in zip(acc.arrays(), g1.arrays()):
                a += b
        for got, want in zip(grads.arrays(), acc.arrays()):
            np.testing.assert_allclose(got, want, atol=1e-10)


# ----------------------------------------------------------------------- adam


class TestAdam:
    def test_first_step_moves_by_lr(self):
        # bias-corrected m/sqrt(v) equals sign(g) on step one
        theta = [np.array([2.0])]
        state = AdamState.for_arrays(theta, lr=0.1)
        adam_update_arrays(theta, [np.array([1.0])], state)
        assert abs(theta[0][0] - (2.0 - 0.1)) < 1e-8

    def test_zero_gradient_is_noop(self):
        theta = [np.array([1.5, -2.0])]
        state = AdamState.for_arrays(theta, lr=0.1)
        adam_update_arrays(theta, [np.zeros(2)], state)
        np.testing.assert_array_equal(theta[0], [1.5, -2.0])

    def test_two_steps_match_hand_recursion(self):
        lr, b1, b2, eps = 0.05, 0.9, 0.999, 1e-8
        g = 3.0
        theta = [np.array([1.0])]
        state = AdamState.for_arrays(theta, lr=lr, beta1=b1, beta2=b2, eps=eps)
        adam_update_arrays(theta, [np.array([g])], state)
        adam_update_arrays(theta, [np.array([g])], state)
        x = 1.0
        m = v = 0.0
        for t in (1, 2):
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            x -= lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
        assert abs(theta[0][0] - x) < 1e-12
        assert state.t == 2

    def test_nonfinite_gradient_names_array(self):
        theta = [np.zeros(2), np.zeros(3)]
        state = AdamState.for_arrays(theta)
        bad = [np.zeros(2), np.array([0.0, np.nan, 0.0])]
        with pytest.raises(TrainingError, match="array 1"):
            adam_update_arrays(theta, bad, state)

    def test_adam_step_wraps_net(self):
        p = random_net(21)
        x = rng_for(22).normal(size=4)
        _, tape = net_forward(p, x)
        grads, _ = net_backward(p, tape, np.ones(3))
        state = AdamState.for_net(p, lr=1e-3)
        before = [a.copy() for a in p.arrays()]
        adam_step(p, grads, state)
        moved = any(np.any(a != b) for a, b in zip(p.arrays(), before))
        assert moved and state.t == 1

    def test_determinism_across_reruns(self):
        def run():
            p = random_net(33)
            state = AdamState.for_net(p, lr=1e-2)
            for k in range(5):
                x = rng_for(1000 + k).normal(size=4)
                _, tape = net_forward(p, x)
                grads, _ = net_backward(p, tape, np.ones(3))
                adam_step(p, grads, state)
            return [a.copy() for a in p.arrays()]

        a, b = run(), run()
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)


# ----------------------------------------------------------------- checkpoint


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        p = random_net(40, skips=())
        path = tmp_path / "net.ckpt"
        save_net(path, p)
        q = load_net(path)
        assert q.input_dim == p.input_dim
        assert q.activations == list(p.activations)
        assert q.skips == p.skips
        for a, b in zip(p.arrays(), q.arrays()):
            np.testing.assert_array_equal(a, b)

    def test_round_trip_with_skips(self, tmp_path):
        specs = [LayerSpec(3, 6), LayerSpec(6 + 3, 4, "identity")]
        p = init_net(rng_for(41), specs, skips=(1,))
        path = tmp_path / "net.ckpt"
        save_net(path, p)
        q = load_net(path)
        assert q.skips == frozenset({1})
        for a, b in zip(p.arrays(), q.arrays()):
            np.testing.assert_array_equal(a, b)

    def test_magic_header(self):
        blob = net_blob_bytes(random_net(42))
        assert blob[:4] == b"LNRF"

    def test_identical_params_identical_bytes(self):
        a = net_blob_bytes(random_net(43))
        b = net_blob_bytes(random_net(43))
        assert a == b

    def test_truncated_blob_rejected(self, tmp_path):
        p = random_net(44)
        path = tmp_path / "net.ckpt"
        save_net(path, p)
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) // 2])
        from linerf.errors import FormatError

        with pytest.raises(FormatError):
            load_net(path)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "net.ckpt"
        path.write_bytes(b"XXXX" + b"\x00" * 64)
        from linerf.errors import FormatError

        with pytest.raises(FormatError):
            load_net(path)


# ----------------------------------------------------------- init properties


class TestInit:
    def test_seeded_init_reproducible(self):
        a, b = random_net(3), random_net(3)
        for x, y in zip(a.arrays(), b.arrays()):
            np.testing.assert_array_equal(x, y)

    def test_biases_start_zero(self):
        p = random_net(4)
        for b in p.biases:
            np.testing.assert_array_equal(b, np.zeros_like(b))

    @settings(max_examples=20)
    @given(st.integers(1, 64), st.integers(1, 64), st.sampled_from(ACTIVATIONS))
    def test_any_single_layer_evaluates(self, din, dout, act):
        p = init_net(rng_for(1), [LayerSpec(din, dout, act)])
        out, _ = net_forward(p, np.zeros(din))
        assert out.shape == (dout,)
        assert np.all(np.isfinite(out))

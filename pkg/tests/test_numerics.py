import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clmuce.numerics import (
    AdamState,
    ConfigurationError,
    ConvNetArch,
    ConvSpec,
    DimensionError,
    ModelParams,
    Tensor,
    UsageError,
    activation_forward,
    adam_step,
    conv1d_forward,
    conv1d_output_length,
    conv_specs,
    dense_forward,
    forward,
    init_params,
    load_params,
    logsumexp,
    save_params,
    stream,
)
from clmuce.numerics.gradcheck import check_params, numeric_grad, relative_error


def naive_conv1d(x, W, b, stride, pad):
    """Loop-based reference: explicit zero padding and window sums."""
    in_ch, n = x.shape
    out_ch, _, k = W.shape
    xp = np.zeros((in_ch, n + 2 * pad))
    xp[:, pad : pad + n] = x
    n_out = (n + 2 * pad - k) // stride + 1
    y = np.zeros((out_ch, n_out))
    for o in range(out_ch):
        for t in range(n_out):
            acc = b[o]
            for c in range(in_ch):
                for j in range(k):
                    acc += W[o, c, j] * xp[c, t * stride + j]
            y[o, t] = acc
    return y


class TestDense:
    def test_identity(self):
        y = dense_forward([3.0, -1.0], np.eye(2), np.zeros(2))
        np.testing.assert_array_equal(y.data, [3.0, -1.0])

    def test_zero_input_returns_bias(self):
        W = np.arange(6.0).reshape(2, 3)
        y = dense_forward(np.zeros(3), W, [1.0, 2.0])
        np.testing.assert_array_equal(y.data, [1.0, 2.0])

    def test_affine_value(self):
        # 1*1 + 2*1 + 0.5 = 3.5 ; 3*1 + 4*1 - 0.5 = 6.5
        y = dense_forward([1.0, 1.0], [[1.0, 2.0], [3.0, 4.0]], [0.5, -0.5])
        np.testing.assert_allclose(y.data, [3.5, 6.5], rtol=0, atol=0)

    def test_shape_mismatch_names_operands(self):
        with pytest.raises(DimensionError, match="W"):
            dense_forward(np.ones(3), np.ones((2, 2)), np.ones(2))


class TestConv1d:
    def test_zero_input_gives_bias(self):
        spec = ConvSpec(kernel=3, stride=1, pad=1, out_ch=1)
        y = conv1d_forward(np.zeros((1, 5)), spec, np.ones((1, 1, 3)), [2.5])
        np.testing.assert_array_equal(y.data, np.full((1, 5), 2.5))

    def test_window_sum(self):
        spec = ConvSpec(kernel=2, stride=1, pad=0, out_ch=1)
        y = conv1d_forward([[1.0, 2.0, 3.0, 4.0]], spec, np.ones((1, 1, 2)), [0.0])
        np.testing.assert_array_equal(y.data, [[3.0, 5.0, 7.0]])

    def test_stride_and_padding(self):
        spec = ConvSpec(kernel=4, stride=2, pad=1, out_ch=1)
        y = conv1d_forward([[1.0, 2.0, 3.0, 4.0]], spec, np.ones((1, 1, 4)), [0.0])
        np.testing.assert_array_equal(y.data, [[6.0, 9.0]])

    def test_invalid_configuration(self):
        spec = ConvSpec(kernel=5, stride=1, pad=0, out_ch=1)
        with pytest.raises(ConfigurationError):
            conv1d_forward(np.ones((1, 3)), spec, np.ones((1, 1, 5)), [0.0])

    def test_matches_loop_reference(self):
        rng = np.random.default_rng(3)
        for k, s, p in [(1, 2, 1), (3, 2, 1), (2, 1, 0), (4, 2, 1), (2, 1, 1)]:
            x = rng.standard_normal((3, 11))
            W = rng.standard_normal((4, 3, k))
            b = rng.standard_normal(4)
            y = conv1d_forward(x, ConvSpec(k, s, p, 4), W, b)
            np.testing.assert_allclose(y.data, naive_conv1d(x, W, b, s, p), rtol=1e-13, atol=1e-13)

    def test_output_length_exhaustive(self):
        rng = np.random.default_rng(0)
        for n, k, s, p in itertools.product(range(1, 65), range(1, 9), range(1, 5), range(0, 4)):
            expected = (n + 2 * p - k) // s + 1
            if n + 2 * p < k:
                continue
            assert conv1d_output_length(n, k, s, p) == expected
            if n % 9 == 0 and k % 3 == 1:  # spot-check the actual op on a subset
                y = conv1d_forward(rng.standard_normal((1, n)), ConvSpec(k, s, p, 1), np.ones((1, 1, k)), [0.0])
                assert y.shape == (1, expected)


class TestActivation:
    def test_leaky_relu(self):
        np.testing.assert_allclose(activation_forward([2.0, 0.0, -2.0]).data, [2.0, 0.0, -0.02])

    def test_positive_unchanged(self):
        x = np.array([0.5, 3.0, 7.25])
        np.testing.assert_array_equal(activation_forward(x).data, x)

    def test_negative_slope_gradient(self):
        x = Tensor([-1.0], requires_grad=True)
        activation_forward(x).sum().backward()
        assert x.grad[0] == pytest.approx(0.01)

    def test_output_layer_is_identity(self):
        x = np.array([-3.0, 4.0])
        np.testing.assert_array_equal(activation_forward(x, output_layer=True).data, x)

    def test_kink_aware_probe(self):
        x = np.array([3e-7, -4e-7])
        fn = lambda: float(activation_forward(Tensor(x)).sum().data)  # noqa: E731
        naive = numeric_grad(fn, x, step=1e-6)
        np.testing.assert_allclose(naive, [0.6535, 0.307])  # probes straddle the kink
        np.testing.assert_allclose(numeric_grad(fn, x, step=1e-6, kink_aware=True), [1.0, 0.01], rtol=1e-9)
        np.testing.assert_array_equal(x, [3e-7, -4e-7])


class TestBackward:
    def test_quadratic(self):
        w = Tensor([1.0, -2.0], requires_grad=True)
        (w * w).sum().backward()
        np.testing.assert_array_equal(w.grad, [2.0, -4.0])

    def test_unused_parameter_has_zero_gradient(self):
        params = ModelParams()
        a = params.add("a", np.array([1.0, 2.0]))
        params.add("unused", np.array([5.0]))
        (a.square().sum()).backward()
        grads = params.grads()
        np.testing.assert_array_equal(grads["unused"], [0.0])

    def test_non_scalar_loss_rejected(self):
        w = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(UsageError):
            (w * 2.0).backward()

    def test_shared_subexpression_accumulates(self):
        x = Tensor([3.0], requires_grad=True)
        y = x * 2.0
        (y * y + y).sum().backward()
        # d/dx (4x^2 + 2x) = 8x + 2
        np.testing.assert_allclose(x.grad, [26.0])

    @pytest.mark.parametrize("trial", range(5))
    def test_random_network_matches_finite_differences(self, trial):
        rng = stream(100, "gradcheck", trial)
        arch = ConvNetArch(
            in_len=int(rng.integers(10, 20)),
            convs=conv_specs([3, 2], [2, 1], [1, 1], [3, 4]),
            dense=(6, 5),
            prefix="t",
        )
        params = init_params(arch, rng)
        x = rng.standard_normal((4, arch.in_len))
        target = rng.standard_normal((4, 5))
        err = check_params(lambda p: (forward(arch, p, x) - Tensor(target)).square().sum(), params)
        assert err < 1e-5

    def test_logsumexp_gradient(self):
        rng = np.random.default_rng(1)
        x0 = rng.standard_normal((3, 5)) * 4
        x = Tensor(x0.copy(), requires_grad=True)
        w = rng.standard_normal(3)
        (logsumexp(x, axis=1) * Tensor(w)).sum().backward()

        def f():
            return float(np.sum(w * np.log(np.exp(x0).sum(axis=1))))

        num = numeric_grad(f, x0)
        assert relative_error(x.grad, num) < 1e-7


class TestAdam:
    def _params(self):
        p = ModelParams()
        p.add("w", np.array([1.0, -2.0, 0.5]))
        return p

    def test_zero_grad_no_decay_is_noop(self):
        p = self._params()
        before = p["w"].data.copy()
        adam_step(p, {"w": np.zeros(3)}, AdamState.for_params(p, weight_decay=0.0))
        np.testing.assert_array_equal(p["w"].data, before)

    def test_decay_only(self):
        p = self._params()
        before = p["w"].data.copy()
        adam_step(p, {"w": np.zeros(3)}, AdamState.for_params(p, lr=1e-4, weight_decay=0.01))
        np.testing.assert_allclose(p["w"].data, before * (1 - 1e-6), rtol=1e-15)

    def test_first_step_value(self):
        p = ModelParams()
        p.add("w", np.zeros(1))
        state = AdamState.for_params(p, lr=1e-4, weight_decay=0.0)
        adam_step(p, {"w": np.ones(1)}, state)
        # m_hat = 1, v_hat = 1  ->  -lr / (1 + eps)
        assert p["w"].data[0] == pytest.approx(-1e-4 / (1 + 1e-8), rel=1e-14)
        assert state.step == 1

    def test_reference_recurrence_several_steps(self):
        rng = np.random.default_rng(5)
        p = ModelParams()
        p.add("w", rng.standard_normal(4))
        state = AdamState.for_params(p, lr=3e-3, weight_decay=0.02)
        theta = p["w"].data.copy()
        m = np.zeros(4)
        v = np.zeros(4)
        for t in range(1, 6):
            g = rng.standard_normal(4)
            adam_step(p, {"w": g}, state)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            theta = theta * (1 - 3e-3 * 0.02) - 3e-3 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        np.testing.assert_allclose(p["w"].data, theta, rtol=1e-12)
        assert state.step == 5

    @settings(max_examples=50, deadline=None)
    @given(st.floats(min_value=-6, max_value=6), st.integers(min_value=0, max_value=2**31))
    def test_first_update_bounded_by_lr(self, log_scale, seed):
        rng = np.random.default_rng(seed)
        p = ModelParams()
        p.add("w", rng.standard_normal(8))
        before = p["w"].data.copy()
        lr = 1e-3
        adam_step(p, {"w": rng.standard_normal(8) * 10.0**log_scale}, AdamState.for_params(p, lr=lr, weight_decay=0.0))
        assert np.all(np.abs(p["w"].data - before) <= lr * (1 + 1e-6))


class TestDeterminismAndStorage:
    def test_forward_bit_identical(self):
        arch = ConvNetArch(48, conv_specs([4, 2, 2, 2], [2, 1, 1, 1], [1, 1, 1, 0], [8, 16, 16, 32]), (32, 12), "c")
        p1 = init_params(arch, stream(9, "init"))
        p2 = init_params(arch, stream(9, "init"))
        x = stream(9, "x").standard_normal((7, 48))
        assert np.array_equal(forward(arch, p1, x).data, forward(arch, p2, x).data)

    def test_init_bounds(self):
        arch = ConvNetArch(20, conv_specs([3], [1], [0], [5]), (7,), "c")
        params = init_params(arch, stream(1))
        w = params["c.fc0.W"].data
        assert np.all(np.abs(w) <= np.sqrt(1.0 / (18 * 5)))

    def test_param_round_trip(self, tmp_path):
        arch = ConvNetArch(20, conv_specs([3], [1], [0], [5]), (7,), "c")
        params = init_params(arch, stream(1))
        save_params(tmp_path / "m", params, {"arch": arch.to_meta()})
        loaded, meta = load_params(tmp_path / "m")
        assert list(loaded) == list(params)
        for name in params:
            assert np.array_equal(loaded[name].data, params[name].data)
        assert ConvNetArch.from_meta(meta["arch"]) == arch

    def test_streams_independent_and_reproducible(self):
        a = stream(42, "noise", 3).standard_normal(5)
        b = stream(42, "noise", 3).standard_normal(5)
        c = stream(42, "noise", 4).standard_normal(5)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)

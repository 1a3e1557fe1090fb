"""Core tensor-engine tests: frozen forward oracles, gradient checks against
central finite differences, and tape discipline."""

import numpy as np
import pytest

from ahstn.diffcore import (
    BatchNormState,
    Tape,
    Tensor,
    absval,
    add,
    add_channel_bias,
    batch_mean,
    batchnorm,
    channel_map,
    concat_channels,
    conv1d_time,
    glu,
    grad_check,
    hadamard,
    matmul,
    node_mix,
    regularized_pinv,
    relu,
    reshape,
    scale,
    sigmoid,
    slice_time,
    softmax_rows,
    sub,
    sum_all,
    sym_normalize,
    transpose2d,
)
from ahstn.errors import NumericalError, ParameterError, ShapeError

SEEDS = range(10)


def _rand(seed, *shape, lo=-1.5, hi=1.5):
    rng = np.random.default_rng(seed)
    # keep values away from relu/abs kinks relative to the fd step
    vals = rng.uniform(lo, hi, size=shape)
    vals += 0.05 * np.sign(vals)
    return vals


class TestMatmul:
    def test_identity(self):
        b = np.array([[3.0, 4.0], [5.0, 6.0]])
        out = matmul(Tensor(np.eye(2)), Tensor(b))
        np.testing.assert_array_equal(out.data, b)

    def test_hand_dot_product(self):
        out = matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        np.testing.assert_allclose(out.data, [[11.0]])

    def test_gradient_of_sum(self):
        # d sum(a@b) / da at a=[[1,2]], b=[[3],[4]] is [[3,4]]
        a = Tensor([[1.0, 2.0]], requires_grad=True)
        b = Tensor([[3.0], [4.0]])
        with Tape() as tape:
            tape.backward(sum_all(matmul(a, b)))
        np.testing.assert_allclose(a.grad, [[3.0, 4.0]])
        rep = grad_check(lambda a: sum_all(matmul(a, b)), [a])
        assert rep.passed, rep

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


class TestConv1dTime:
    def test_direct_convolution_oracle(self):
        x = Tensor(np.array([1.0, 2.0, 3.0]).reshape(1, 3, 1))
        w = Tensor(np.ones((2, 1, 1)))
        out = conv1d_time(x, w, Tensor(np.zeros(1)))
        np.testing.assert_allclose(out.data.ravel(), [3.0, 5.0])

    def test_single_tap_identity(self, rng):
        x = rng.standard_normal((2, 4, 6, 3))
        w = np.eye(3).reshape(1, 3, 3)
        out = conv1d_time(Tensor(x), Tensor(w), Tensor(np.zeros(3)))
        np.testing.assert_allclose(out.data, x)

    def test_paper_shape_rule(self, rng):
        # N=5, T=12, K=2, C_out=128 -> 5 x 11 x 128
        x = Tensor(rng.standard_normal((5, 12, 1)))
        w = Tensor(rng.standard_normal((2, 1, 128)))
        out = conv1d_time(x, w, Tensor(np.zeros(128)))
        assert out.shape == (5, 11, 128)

    @pytest.mark.parametrize("t,k", [(4, 4), (7, 3), (5, 1)])
    def test_output_length_is_t_minus_k_plus_1(self, rng, t, k):
        x = Tensor(rng.standard_normal((3, t, 2)))
        w = Tensor(rng.standard_normal((k, 2, 4)))
        assert conv1d_time(x, w, Tensor(np.zeros(4))).shape == (3, t - k + 1, 4)

    def test_too_short_for_kernel(self, rng):
        x = Tensor(rng.standard_normal((3, 2, 1)))
        w = Tensor(rng.standard_normal((3, 1, 1)))
        with pytest.raises(ShapeError, match="temporal length too short"):
            conv1d_time(x, w, Tensor(np.zeros(1)))

    def test_naive_loop_oracle(self, rng):
        x = rng.standard_normal((2, 3, 6, 2))
        w = rng.standard_normal((3, 2, 4))
        b = rng.standard_normal(4)
        out = conv1d_time(Tensor(x), Tensor(w), Tensor(b)).data
        expected = np.zeros((2, 3, 4, 4))
        for bb in range(2):
            for n in range(3):
                for t in range(4):
                    for o in range(4):
                        acc = b[o]
                        for k in range(3):
                            for i in range(2):
                                acc += x[bb, n, t + k, i] * w[k, i, o]
                        expected[bb, n, t, o] = acc
        np.testing.assert_allclose(out, expected, atol=1e-12)


class TestGlu:
    def test_half_gate(self):
        out = glu(Tensor(np.array([2.0, 0.0]).reshape(1, 1, 2)))
        np.testing.assert_allclose(out.data.ravel(), [1.0])

    def test_saturated_gate(self):
        out = glu(Tensor(np.array([1.0, 50.0]).reshape(1, 1, 2)))
        np.testing.assert_allclose(out.data.ravel(), [1.0], atol=1e-12)

    def test_scalar_sigmoid_value(self):
        out = glu(Tensor(np.array([3.0, 1.0]).reshape(1, 1, 2)))
        np.testing.assert_allclose(out.data.ravel(), [3.0 / (1.0 + np.exp(-1.0))], rtol=1e-12)
        np.testing.assert_allclose(out.data.ravel(), [2.193175], atol=1e-6)

    def test_odd_channels_rejected(self):
        with pytest.raises(ShapeError):
            glu(Tensor(np.ones((2, 2, 3))))


class TestSoftmaxRows:
    def test_symmetry(self):
        out = softmax_rows(Tensor([[0.0, 0.0]]), tau=1.0)
        np.testing.assert_allclose(out.data, [[0.5, 0.5]])

    def test_temperature_scaling(self):
        # [1,0] at tau=0.5 -> e^2/(e^2+1)
        out = softmax_rows(Tensor([[1.0, 0.0]]), tau=0.5)
        e2 = np.exp(2.0)
        np.testing.assert_allclose(out.data, [[e2 / (e2 + 1.0), 1.0 / (e2 + 1.0)]], rtol=1e-12)
        np.testing.assert_allclose(out.data[0, 0], 0.880797, atol=1e-6)

    def test_large_logits_stay_finite(self):
        out = softmax_rows(Tensor([[1000.0, 999.0]]), tau=1.0)
        assert np.all(np.isfinite(out.data))
        e = np.exp(1.0)
        np.testing.assert_allclose(out.data, [[e / (1 + e), 1 / (1 + e)]], rtol=1e-12)

    def test_rows_sum_to_one(self, rng):
        for seed in SEEDS:
            m = Tensor(np.random.default_rng(seed).uniform(-50, 50, (6, 9)))
            for tau in (0.05, 1.0, 10.0):
                out = softmax_rows(m, tau=tau)
                np.testing.assert_allclose(out.data.sum(axis=1), 1.0, atol=1e-12)

    def test_nonpositive_temperature_rejected(self):
        with pytest.raises(ParameterError):
            softmax_rows(Tensor([[1.0, 2.0]]), tau=0.0)


class TestRegularizedPinv:
    def test_identity(self):
        out = regularized_pinv(Tensor(np.eye(3)), eps=1e-9)
        np.testing.assert_allclose(out.data, np.eye(3), atol=1e-8)

    def test_two_rows_one_column(self):
        # (M^T M)^-1 M^T of [[1],[1]] is [1/2, 1/2] as eps -> 0
        out = regularized_pinv(Tensor([[1.0], [1.0]]), eps=1e-12)
        np.testing.assert_allclose(out.data, [[0.5, 0.5]], atol=1e-10)

    def test_defining_property(self):
        eps = 1e-9
        for seed in SEEDS:
            rng = np.random.default_rng(seed)
            m = rng.uniform(0.0, 1.0, (7, 3))
            m /= m.sum(axis=1, keepdims=True)
            pinv = regularized_pinv(Tensor(m), eps=eps).data
            err = np.max(np.abs(m @ pinv @ m - m))
            assert err <= 10.0 * eps * np.max(np.abs(m))

    def test_requires_tall_matrix(self):
        with pytest.raises(ShapeError):
            regularized_pinv(Tensor(np.ones((2, 3))), eps=1e-6)


class TestSymNormalize:
    def test_matches_plain_helper(self, rng):
        from ahstn.diffcore import sym_normalize_np

        a = rng.uniform(0.0, 1.0, (5, 5))
        a = (a + a.T) / 2.0
        np.fill_diagonal(a, 0.0)
        np.testing.assert_array_equal(sym_normalize(Tensor(a)).data, sym_normalize_np(a))


class TestBatchnorm:
    def test_training_standardizes(self, rng):
        x = Tensor(rng.standard_normal((4, 3, 5, 2)) * 3.0 + 7.0)
        state = BatchNormState.create(2)
        out = batchnorm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), state, training=True).data
        np.testing.assert_allclose(out.mean(axis=(0, 1, 2)), 0.0, atol=1e-6)
        np.testing.assert_allclose(out.var(axis=(0, 1, 2)), 1.0, atol=1e-4)

    def test_constant_input_zeroed(self):
        x = Tensor(np.full((2, 3, 4, 1), 5.0))
        state = BatchNormState.create(1)
        out = batchnorm(x, Tensor(np.ones(1)), Tensor(np.zeros(1)), state, training=True)
        np.testing.assert_allclose(out.data, 0.0, atol=1e-12)

    def test_inference_formula(self):
        state = BatchNormState(np.array([2.0]), np.array([1.0]))
        out = batchnorm(Tensor(np.full((1, 1, 1, 1), 3.0)), Tensor([3.0]), Tensor([1.0]),
                        state, training=False)
        expected = 3.0 * (3.0 - 2.0) / np.sqrt(1.0 + 1e-5) + 1.0
        np.testing.assert_allclose(out.data.ravel(), [expected], rtol=1e-12)
        np.testing.assert_allclose(out.data.ravel(), [3.99998], atol=1e-5)

    def test_running_stats_update(self, rng):
        x = Tensor(rng.standard_normal((8, 2, 3, 2)) + 4.0)
        state = BatchNormState.create(2)
        batchnorm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), state, training=True)
        mean = x.data.mean(axis=(0, 1, 2))
        np.testing.assert_allclose(state.running_mean, 0.9 * 0.0 + 0.1 * mean, rtol=1e-12)

    def test_empty_batch_rejected(self):
        state = BatchNormState.create(2)
        with pytest.raises(ShapeError, match="empty batch"):
            batchnorm(Tensor(np.empty((0, 3, 4, 2))), Tensor(np.ones(2)), Tensor(np.zeros(2)),
                      state, training=True)


class TestElementwiseSuite:
    def test_relu(self):
        out = relu(Tensor([-1.0, 0.0, 2.0]))
        np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])

    def test_slice_time_keeps_tail(self):
        x = np.arange(8.0).reshape(1, 8, 1)
        out = slice_time(Tensor(x), last_k=6)
        np.testing.assert_array_equal(out.data.ravel(), np.arange(2.0, 8.0))

    def test_concat_channels_width(self, rng):
        parts = [Tensor(rng.standard_normal((3, 4, 64))) for _ in range(3)]
        assert concat_channels(parts).shape == (3, 4, 192)

    def test_concat_shape_mismatch(self, rng):
        with pytest.raises(ShapeError):
            concat_channels([Tensor(np.ones((2, 3, 4))), Tensor(np.ones((2, 2, 4)))])

    def test_add_shape_mismatch(self):
        with pytest.raises(ShapeError, match=r"\(2,\).*\(3,\)"):
            add(Tensor(np.ones(2)), Tensor(np.ones(3)))


class TestGradientsAgainstFiniteDifferences:
    """Every operation's reverse-mode gradient vs central differences, 10 seeds."""

    @pytest.mark.parametrize("seed", SEEDS)
    def test_elementwise_chain(self, seed):
        a = Tensor(_rand(seed, 3, 4), requires_grad=True)
        b = Tensor(_rand(seed + 100, 3, 4), requires_grad=True)

        def f(a, b):
            h = hadamard(add(relu(a), sigmoid(b)), sub(a, scale(b, 0.5)))
            return sum_all(absval(h))

        rep = grad_check(f, [a, b])
        assert rep.passed, rep

    @pytest.mark.parametrize("seed", SEEDS)
    def test_matmul(self, seed):
        a = Tensor(_rand(seed, 3, 4), requires_grad=True)
        b = Tensor(_rand(seed + 1, 4, 2), requires_grad=True)
        rep = grad_check(lambda a, b: sum_all(sigmoid(matmul(a, b))), [a, b])
        assert rep.passed, rep

    @pytest.mark.parametrize("seed", SEEDS)
    def test_conv_glu(self, seed):
        x = Tensor(_rand(seed, 2, 3, 5, 2), requires_grad=True)
        w = Tensor(_rand(seed + 1, 2, 2, 4), requires_grad=True)
        b = Tensor(_rand(seed + 2, 4), requires_grad=True)
        rep = grad_check(lambda x, w, b: sum_all(glu(conv1d_time(x, w, b))), [x, w, b])
        assert rep.passed, rep

    @pytest.mark.parametrize("seed", SEEDS)
    def test_softmax_rows(self, seed):
        m = Tensor(_rand(seed, 4, 3), requires_grad=True)
        c = Tensor(_rand(seed + 1, 4, 3))
        rep = grad_check(lambda m: sum_all(hadamard(softmax_rows(m, tau=0.7), c)), [m])
        assert rep.passed, rep

    @pytest.mark.parametrize("seed", SEEDS)
    def test_sigmoid_sum(self, seed):
        x = Tensor(_rand(seed, 5, 4), requires_grad=True)
        rep = grad_check(lambda x: sum_all(sigmoid(x)), [x], tol=1e-6)
        assert rep.passed, rep

    @pytest.mark.parametrize("seed", SEEDS)
    def test_regularized_pinv(self, seed):
        m = Tensor(np.random.default_rng(seed).uniform(0.2, 1.0, (6, 2)), requires_grad=True)
        rep = grad_check(lambda m: sum_all(regularized_pinv(m, eps=1e-6)), [m], tol=1e-5)
        assert rep.passed, rep

    @pytest.mark.parametrize("seed", SEEDS)
    def test_batchnorm_training(self, seed):
        state = BatchNormState.create(3)
        x = Tensor(_rand(seed, 3, 2, 4, 3), requires_grad=True)
        g = Tensor(_rand(seed + 1, 3), requires_grad=True)
        b = Tensor(_rand(seed + 2, 3), requires_grad=True)

        def f(x, g, b):
            out = batchnorm(x, g, b, state, training=True, update_running=False)
            return sum_all(sigmoid(out))

        rep = grad_check(f, [x, g, b])
        assert rep.passed, rep

    @pytest.mark.parametrize("seed", SEEDS)
    def test_mix_map_norm(self, seed):
        m = Tensor(_rand(seed, 3, 5), requires_grad=True)
        x = Tensor(_rand(seed + 1, 2, 5, 3, 2), requires_grad=True)
        w = Tensor(_rand(seed + 2, 2, 3), requires_grad=True)
        rep = grad_check(lambda m, x, w: sum_all(sigmoid(channel_map(node_mix(m, x), w))),
                         [m, x, w])
        assert rep.passed, rep

    @pytest.mark.parametrize("seed", SEEDS)
    def test_sym_normalize(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.uniform(0.0, 1.0, (5, 5))
        a = (a + a.T) / 2.0
        np.fill_diagonal(a, 0.0)
        at = Tensor(a, requires_grad=True)
        c = Tensor(rng.standard_normal((5, 5)))
        rep = grad_check(lambda a: sum_all(hadamard(sym_normalize(a), c)), [at])
        assert rep.passed, rep

    @pytest.mark.parametrize("seed", SEEDS)
    def test_structural_ops(self, seed):
        x = Tensor(_rand(seed, 2, 4, 6, 3), requires_grad=True)
        b = Tensor(_rand(seed + 1, 3), requires_grad=True)

        def f(x, b):
            h = add_channel_bias(x, b)
            h = slice_time(h, 4)
            h = concat_channels([h, scale(h, 2.0)])
            h = reshape(h, (2, 4, 24))
            return sum_all(sigmoid(batch_mean(h)))

        rep = grad_check(f, [x, b])
        assert rep.passed, rep

    @pytest.mark.parametrize("seed", SEEDS)
    def test_transpose(self, seed):
        m = Tensor(_rand(seed, 3, 5), requires_grad=True)
        c = Tensor(_rand(seed + 1, 5, 3))
        rep = grad_check(lambda m: sum_all(hadamard(transpose2d(m), c)), [m])
        assert rep.passed, rep

    def test_constant_function_zero_gradient(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        c = Tensor(np.full((1,), 3.0))
        with Tape() as tape:
            out = sum_all(c)
            tape.backward(out)
        assert x.grad is None  # constant path leaves no gradient at all
        rep = grad_check(lambda x: sum_all(hadamard(x, Tensor(np.zeros((2, 2))))), [x])
        assert rep.passed and rep.max_rel_err == 0.0


class TestTapeDiscipline:
    def test_backward_twice_is_an_error(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            out = sum_all(sigmoid(x))
        tape.backward(out)
        with pytest.raises(RuntimeError, match="backward"):
            tape.backward(out)

    def test_backward_never_mutates_forward_values(self, rng):
        x = Tensor(rng.standard_normal((3, 4, 5, 2)), requires_grad=True)
        w = Tensor(rng.standard_normal((2, 2, 6)), requires_grad=True)
        b = Tensor(np.zeros(6), requires_grad=True)
        with Tape() as tape:
            mid = glu(conv1d_time(x, w, b))
            out = sum_all(absval(mid))
            mid_before = mid.data.copy()
            out_before = out.data.copy()
            tape.backward(out)
        np.testing.assert_array_equal(mid.data, mid_before)
        np.testing.assert_array_equal(out.data, out_before)

    def test_scalar_loss_required(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            out = sigmoid(x)
            with pytest.raises(ShapeError):
                tape.backward(out)

    def test_no_tape_means_no_recording(self):
        x = Tensor(np.ones(3), requires_grad=True)
        out = sum_all(sigmoid(x))
        assert out.grad is None and x.grad is None

    def test_gradients_accumulate_over_shared_inputs(self):
        x = Tensor(np.array([3.0]), requires_grad=True)
        with Tape() as tape:
            y = add(hadamard(x, x), x)  # x^2 + x
            tape.backward(sum_all(y))
        np.testing.assert_allclose(x.grad, [7.0])


class TestDebugChecks:
    def test_nonfinite_output_raises(self):
        big = Tensor(np.array([1e308]), requires_grad=True)
        with np.errstate(over="ignore"):
            with pytest.raises(NumericalError):
                hadamard(big, Tensor(np.array([1e308])))


class TestGradCheckHarness:
    def test_h_bounds_enforced(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with pytest.raises(ParameterError):
            grad_check(lambda x: sum_all(x), [x], h=1e-2)

    def test_report_flags_wrong_gradient(self):
        # deliberately wrong rule: treat identity as if it doubled the input
        from ahstn.diffcore import record_op

        def bad_double(x):
            return record_op((x,), x.data.copy(), lambda g: (2.0 * g,))

        x = Tensor(np.ones(3), requires_grad=True)
        rep = grad_check(lambda x: sum_all(bad_double(x)), [x])
        assert not rep.passed

"""Tensor engine: forward semantics, gradients vs finite differences, Adam."""

import math

import numpy as np
import pytest

from lwm import tensor as T
from lwm.errors import ContractError, ShapeError
from lwm.optim import AdamState, adam_step
from lwm.tensor import Tensor, backward

from conftest import fd_gradient, rel_err


class TestMatmul:
    def test_identity(self):
        eye = Tensor([[1.0, 0.0], [0.0, 1.0]])
        m = Tensor([[5.0, 6.0], [7.0, 8.0]])
        assert np.array_equal(T.matmul(eye, m).data, m.data)

    def test_hand_checkable_1x1(self):
        out = T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        assert out.data.shape == (1, 1)
        assert out.data[0, 0] == 11.0

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError) as err:
            T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))
        assert "(2, 3)" in str(err.value) and "(4, 2)" in str(err.value)

    def test_gradient_of_sum_vs_finite_differences(self, rng):
        a = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
        b = Tensor(rng.standard_normal((3, 2)), requires_grad=True)

        def loss():
            return T.sum_all(T.matmul(a, b))

        backward(loss())
        assert rel_err(a.grad, fd_gradient(loss, a)) < 1e-6
        assert rel_err(b.grad, fd_gradient(loss, b)) < 1e-6

    def test_batched_and_bias_gradients(self, rng):
        a = Tensor(rng.standard_normal((3, 4, 5)), requires_grad=True)
        w = Tensor(rng.standard_normal((5, 6)), requires_grad=True)
        bias = Tensor(rng.standard_normal(6), requires_grad=True)

        def loss():
            return T.sum_all(T.mul(T.matmul(a, w, alpha=0.7, bias=bias),
                                   T.matmul(a, w, alpha=0.7, bias=bias)))

        backward(loss())
        for p in (a, w, bias):
            assert rel_err(p.grad, fd_gradient(loss, p)) < 1e-5

    def test_batched_both_sides(self, rng):
        a = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
        b = Tensor(rng.standard_normal((2, 4, 3)), requires_grad=True)

        def loss():
            return T.sum_all(T.mul(T.matmul(a, b), T.matmul(a, b)))

        backward(loss())
        assert rel_err(a.grad, fd_gradient(loss, a)) < 1e-5
        assert rel_err(b.grad, fd_gradient(loss, b)) < 1e-5


class TestSoftmax:
    def test_uniform_row(self):
        out = T.softmax_rows(Tensor([[0.0, 0.0, 0.0, 0.0]]))
        assert np.allclose(out.data, 0.25, atol=1e-15)

    def test_closed_form(self):
        out = T.softmax_rows(Tensor([[math.log(1.0), math.log(3.0)]]))
        assert np.allclose(out.data, [[0.25, 0.75]], atol=1e-12)

    def test_rows_sum_to_one_and_nonnegative(self, rng):
        x = rng.standard_normal((5, 7)) * 10
        out = T.softmax_rows(Tensor(x))
        assert np.all(np.abs(out.data.sum(axis=-1) - 1.0) < 1e-12)
        assert np.all(out.data >= 0.0)

    def test_overflow_safe(self):
        out = T.softmax_rows(Tensor([[1e308, 1e308 - 1.0]]))
        assert np.all(np.isfinite(out.data))


class TestLayernorm:
    def test_constant_row_collapses_to_zero(self):
        out = T.layernorm_rows(Tensor([[3.0, 3.0, 3.0, 3.0]]))
        assert np.array_equal(out.data, np.zeros((1, 4)))

    def test_symmetric_pair(self):
        out = T.layernorm_rows(Tensor([[-1.0, 1.0]]))
        expected = 1.0 / math.sqrt(1.0 + T.LAYERNORM_EPS)
        assert np.allclose(out.data, [[-expected, expected]], atol=1e-15)

    def test_moments(self, rng):
        out = T.layernorm_rows(Tensor(rng.standard_normal((6, 8))))
        assert np.all(np.abs(out.data.mean(axis=-1)) < 1e-10)
        assert np.all(np.abs(out.data.var(axis=-1) - 1.0) < 1e-4)

    def test_rejects_single_column(self):
        with pytest.raises(ContractError):
            T.layernorm_rows(Tensor(np.zeros((3, 1))))


class TestRelu:
    def test_elementwise(self):
        out = T.relu(Tensor([-2.0, 0.0, 3.0]))
        assert np.array_equal(out.data, [0.0, 0.0, 3.0])

    def test_all_negative(self):
        out = T.relu(Tensor([[-1.0, -5.0], [-0.1, -2.0]]))
        assert np.array_equal(out.data, np.zeros((2, 2)))

    def test_gradient_mask_matches_fd_away_from_zero(self, rng):
        x = Tensor(rng.standard_normal((4, 4)) + np.sign(rng.standard_normal((4, 4))) * 0.5,
                   requires_grad=True)

        def loss():
            return T.sum_all(T.relu(x))

        backward(loss())
        assert np.array_equal(x.grad, (x.data > 0).astype(float))
        assert rel_err(x.grad, fd_gradient(loss, x)) < 1e-6


class TestDropout:
    def test_rate_zero_identity(self, rng):
        x = Tensor(rng.standard_normal((3, 3)))
        out = T.dropout(x, 0.0, training=True, rng=rng)
        assert out is x

    def test_inference_identity(self, rng):
        x = Tensor(rng.standard_normal((3, 3)))
        assert T.dropout(x, 0.1, training=False) is x

    def test_training_mean_preserved(self):
        rng = np.random.default_rng(99)
        x = Tensor(np.ones(1_000_000))
        out = T.dropout(x, 0.1, training=True, rng=rng)
        # survivor count is Binomial(n, 0.9); mean of out is within 3 sigma of 1
        sigma = math.sqrt(0.1 * 0.9 / 1_000_000) / 0.9
        assert abs(out.data.mean() - 1.0) < 3 * sigma

    def test_rejects_rate_one(self, rng):
        with pytest.raises(ContractError):
            T.dropout(Tensor([1.0]), 1.0, training=True, rng=rng)

    def test_gradient(self, rng):
        x = Tensor(rng.standard_normal((5, 5)), requires_grad=True)

        def loss():
            r = np.random.default_rng(7)  # same mask on every call
            return T.sum_all(T.mul(T.dropout(x, 0.3, True, r), Tensor(np.ones((5, 5)))))

        backward(loss())
        assert rel_err(x.grad, fd_gradient(loss, x)) < 1e-6


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = Tensor(rng.standard_normal((3, 5)), requires_grad=True)
        backward(T.sum_all(x))
        assert np.array_equal(x.grad, np.ones((3, 5)))

    def test_sum_of_squares_gives_2x(self, rng):
        x = Tensor(rng.standard_normal((4, 2)), requires_grad=True)
        backward(T.sum_all(T.mul(x, x)))
        assert np.allclose(x.grad, 2 * x.data, atol=1e-14)

    def test_non_scalar_loss_rejected(self, rng):
        x = Tensor(rng.standard_normal((2, 2)), requires_grad=True)
        with pytest.raises(ContractError):
            backward(T.mul(x, x))

    def test_double_backward_accumulates_exactly_2x(self, rng):
        x = Tensor(rng.standard_normal((3, 3)), requires_grad=True)
        loss = T.sum_all(T.mul(x, x))
        backward(loss)
        once = x.grad.copy()
        backward(loss)
        assert np.array_equal(x.grad, 2 * once)


OPS_UNDER_TEST = [
    ("matmul", lambda p, c: T.sum_all(T.mul(T.matmul(p, c), T.matmul(p, c))), (4, 3), (3, 5)),
    ("softmax", lambda p, c: T.sum_all(T.mul(T.softmax_rows(p), c)), (4, 6), (4, 6)),
    ("layernorm", lambda p, c: T.sum_all(T.mul(T.layernorm_rows(p), c)), (4, 6), (4, 6)),
    ("relu", lambda p, c: T.sum_all(T.mul(T.relu(p), c)), (4, 6), (4, 6)),
    ("add", lambda p, c: T.sum_all(T.mul(T.add(p, c), T.add(p, c))), (4, 6), (4, 6)),
    ("sub", lambda p, c: T.sum_all(T.mul(T.sub(p, c), T.sub(p, c))), (4, 6), (4, 6)),
    ("scale", lambda p, c: T.sum_all(T.mul(T.scale(p, -1.7), c)), (4, 6), (4, 6)),
    ("transpose", lambda p, c: T.sum_all(T.mul(T.transpose(p), c)), (4, 6), (6, 4)),
    ("reshape", lambda p, c: T.sum_all(T.mul(T.reshape(p, (2, 12)), c)), (4, 6), (2, 12)),
    ("mean_penultimate", lambda p, c: T.sum_all(T.mul(T.mean_penultimate(p), c)), (3, 5, 4), (3, 4)),
]


@pytest.mark.parametrize("name,build,p_shape,c_shape", OPS_UNDER_TEST, ids=lambda v: v if isinstance(v, str) else "")
def test_op_gradients_match_fd_across_seeds(name, build, p_shape, c_shape):
    # property: analytic gradients track central finite differences on
    # randomly sampled points, >= 20 seeds
    for seed in range(20):
        rng = np.random.default_rng(1000 + seed)
        p = Tensor(rng.standard_normal(p_shape), requires_grad=True)
        c = Tensor(rng.standard_normal(c_shape))

        def loss():
            return build(p, c)

        p.zero_grad()
        backward(loss())
        assert rel_err(p.grad, fd_gradient(loss, p)) < 1e-4, f"{name} seed {seed}"


def test_gather_and_concat_and_prepend_gradients(rng):
    x = Tensor(rng.standard_normal((3, 6, 4)), requires_grad=True)
    row = Tensor(rng.standard_normal(4), requires_grad=True)
    idx = np.array([[0, 2], [1, 1], [5, 3]])
    c = Tensor(rng.standard_normal((3, 2, 4)))

    def loss():
        stacked = T.prepend_row(row, x)
        picked = T.gather_rows(stacked, idx)
        return T.sum_all(T.mul(picked, c))

    backward(loss())
    assert rel_err(x.grad, fd_gradient(loss, x)) < 1e-5
    assert rel_err(row.grad, fd_gradient(loss, row)) < 1e-5


def test_concat_last_and_swap_axes_gradients(rng):
    a = Tensor(rng.standard_normal((2, 3, 2)), requires_grad=True)
    b = Tensor(rng.standard_normal((2, 3, 3)), requires_grad=True)
    c = Tensor(rng.standard_normal((2, 5, 3)))

    def loss():
        merged = T.concat_last([a, b])
        return T.sum_all(T.mul(T.swap_axes(merged, 1, 2), c))

    backward(loss())
    assert rel_err(a.grad, fd_gradient(loss, a)) < 1e-5
    assert rel_err(b.grad, fd_gradient(loss, b)) < 1e-5


def test_batchnorm_training_gradients_and_buffers(rng):
    x = Tensor(rng.standard_normal((8, 5)), requires_grad=True)
    gamma = Tensor(np.ones(5) * 1.3, requires_grad=True)
    beta = Tensor(rng.standard_normal(5), requires_grad=True)
    c = Tensor(rng.standard_normal((8, 5)))

    def loss():
        state = T.BatchNormState(5)  # fresh buffers so fd calls do not drift
        return T.sum_all(T.mul(T.batchnorm(x, gamma, beta, state, training=True), c))

    backward(loss())
    for p in (x, gamma, beta):
        assert rel_err(p.grad, fd_gradient(loss, p)) < 1e-4

    state = T.BatchNormState(5)
    T.batchnorm(x, gamma, beta, state, training=True)
    assert np.allclose(state.mean, 0.1 * x.data.mean(axis=0), atol=1e-12)
    out_eval = T.batchnorm(x, gamma, beta, state, training=False)
    expected = (x.data - state.mean) / np.sqrt(state.var + 1e-5) * gamma.data + beta.data
    assert np.allclose(out_eval.data, expected, atol=1e-12)


def test_unfold1d_matches_explicit_windows(rng):
    x = Tensor(rng.standard_normal((2, 7, 3)), requires_grad=True)
    out = T.unfold1d(x, kernel=3, stride=2, pad=1)
    padded = np.pad(x.data, ((0, 0), (1, 1), (0, 0)))
    assert out.shape == (2, 4, 9)
    for t in range(4):
        # taps occupy columns [k*C, (k+1)*C)
        manual = np.concatenate([padded[:, 2 * t + k, :] for k in range(3)], axis=1)
        assert np.array_equal(out.data[:, t, :], manual)

    c = Tensor(rng.standard_normal((2, 4, 9)))

    def loss():
        return T.sum_all(T.mul(T.unfold1d(x, 3, 2, 1), c))

    x.zero_grad()
    backward(loss())
    assert rel_err(x.grad, fd_gradient(loss, x)) < 1e-5


def test_cross_entropy_logits_value_and_gradient(rng):
    logits = Tensor(rng.standard_normal((6, 4)), requires_grad=True)
    labels = np.array([0, 1, 2, 3, 1, 0])

    def loss():
        return T.cross_entropy_logits(logits, labels)

    out = loss()
    z = logits.data
    manual = np.mean([-z[i, labels[i]] + math.log(np.exp(z[i]).sum()) for i in range(6)])
    assert abs(out.item() - manual) < 1e-12
    backward(out)
    assert rel_err(logits.grad, fd_gradient(loss, logits)) < 1e-5


class TestAdam:
    def test_zero_gradients_leave_parameters(self):
        p = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
        p.grad = np.zeros(3)
        state = AdamState.for_params([p], lr=0.1)
        before = p.data.copy()
        adam_step([p], state)
        assert np.array_equal(p.data, before)
        assert state.step == 1 and p.grad is None

    def test_first_step_moves_by_lr(self):
        p = Tensor(np.array([0.5]), requires_grad=True)
        p.grad = np.ones(1)
        state = AdamState.for_params([p], lr=0.1)
        adam_step([p], state)
        # bias-corrected m_hat / (sqrt(v_hat) + eps) == 1 / (1 + 1e-8)
        assert abs(p.data[0] - (0.5 - 0.1)) < 1e-8

    def test_three_step_trajectory_matches_scalar_reference(self):
        # independent reference: plain-float Adam on the quadratic x^2 / 2
        lr, b1, b2, eps = 0.05, 0.9, 0.999, 1e-8
        theta, m, v = 1.7, 0.0, 0.0
        trace = []
        for t in range(1, 4):
            g = theta  # d/dx of x^2/2
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            theta -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
            trace.append(theta)

        p = Tensor(np.array([1.7]), requires_grad=True)
        state = AdamState.for_params([p], lr=lr, beta1=b1, beta2=b2, eps=eps)
        got = []
        for _ in range(3):
            backward(T.scale(T.sum_all(T.mul(p, p)), 0.5))
            adam_step([p], state)
            got.append(p.data[0])
        assert np.allclose(got, trace, atol=1e-12)

    def test_lr_zero_is_bit_identical(self, rng):
        p = Tensor(rng.standard_normal(16), requires_grad=True)
        before = p.data.copy()
        state = AdamState.for_params([p], lr=0.0, weight_decay=1e-5)
        p.grad = rng.standard_normal(16)
        adam_step([p], state)
        assert np.array_equal(p.data, before)

    def test_missing_grad_is_contract_error(self):
        p = Tensor(np.ones(2), requires_grad=True)
        state = AdamState.for_params([p], lr=0.1)
        with pytest.raises(ContractError):
            adam_step([p], state)

    def test_weight_decay_enters_gradient(self):
        # with g = 0 and decay, the effective gradient is wd * theta
        p = Tensor(np.array([2.0]), requires_grad=True)
        p.grad = np.zeros(1)
        state = AdamState.for_params([p], lr=0.1, weight_decay=0.5)
        adam_step([p], state)
        assert p.data[0] < 2.0

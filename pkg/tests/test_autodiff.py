import math

import numpy as np
import pytest

from setn.autodiff import (Adam, Tensor, activation, backward, cross_entropy,
                           dropout, grad_check, grad_check_params, leaky_relu,
                           linear, matmul, mean_rows, relu, softmax_rows,
                           stack_rows, sum_all, take_rows)
from setn.errors import ContractError, LabelError, ShapeError


def test_tensor_rejects_non_finite():
    with pytest.raises(ValueError):
        Tensor([1.0, float("nan")])
    with pytest.raises(ValueError):
        Tensor([float("inf")])


def test_tensor_shape_and_item():
    t = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert t.shape == (2, 2)
    assert Tensor(3.5).item() == 3.5
    with pytest.raises(ShapeError):
        t.item()


# ---------------------------------------------------------------------------
# linear


def test_linear_identity_weight():
    out = linear(Tensor([[1.0, 2.0]]), Tensor(np.eye(2)), Tensor([0.0, 0.0]))
    assert np.array_equal(out.data, [[1.0, 2.0]])


def test_linear_hand_sum():
    out = linear(Tensor([[1.0, 1.0]]), Tensor([[2.0], [3.0]]), Tensor([1.0]))
    assert np.array_equal(out.data, [[6.0]])


def _naive_linear(x, w, b):
    n, d = x.shape
    _, k = w.shape
    out = np.zeros((n, k))
    for i in range(n):
        for j in range(k):
            acc = b[j]
            for m in range(d):
                acc += x[i, m] * w[m, j]
            out[i, j] = acc
    return out


def test_linear_matches_naive_triple_loop():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(3, 4))
    w = rng.normal(size=(4, 2))
    b = rng.normal(size=2)
    out = linear(Tensor(x), Tensor(w), Tensor(b))
    assert np.max(np.abs(out.data - _naive_linear(x, w, b))) < 1e-12


def test_linear_shape_mismatch_names_both_shapes():
    with pytest.raises(ShapeError) as exc:
        linear(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))), Tensor(np.ones(2)))
    assert "(2, 3)" in str(exc.value) and "(4, 2)" in str(exc.value)


# ---------------------------------------------------------------------------
# activations


def test_relu_negative():
    assert activation(Tensor([-3.0]), "relu").data[0] == 0.0


def test_leaky_relu_slope():
    assert activation(Tensor([-1.0]), "leaky_relu").data[0] == pytest.approx(-0.2)


def test_softmax_symmetry():
    out = activation(Tensor([[0.0, 0.0]]), "softmax_rows")
    assert np.allclose(out.data, [[0.5, 0.5]])


def test_softmax_requires_rank_2():
    with pytest.raises(ShapeError):
        softmax_rows(Tensor([1.0, 2.0]))


def test_activation_rejects_empty_and_unknown():
    with pytest.raises(ContractError):
        activation(Tensor(np.zeros((0, 2))), "relu")
    with pytest.raises(ValueError):
        activation(Tensor([1.0]), "sigmoid")


def test_softmax_rows_sum_to_one_and_lie_in_unit_interval():
    # scale kept moderate: a dominant logit saturates float64 to exactly 1.0
    rng = np.random.default_rng(11)
    for _ in range(20):
        x = rng.normal(scale=rng.uniform(0.1, 2.0), size=(4, 7))
        y = softmax_rows(Tensor(x)).data
        assert np.max(np.abs(y.sum(axis=1) - 1.0)) < 1e-12
        assert np.all(y > 0) and np.all(y < 1)


# ---------------------------------------------------------------------------
# dropout


def test_dropout_rate_zero_is_identity():
    x = Tensor([[1.0, 2.0]])
    assert dropout(x, 0.0, training=True, rng=np.random.default_rng(0)) is x


def test_dropout_eval_mode_is_identity():
    x = Tensor([[1.0, 2.0]])
    assert dropout(x, 0.2, training=False) is x


def test_dropout_preserves_mean_at_scale():
    rng = np.random.default_rng(5)
    x = Tensor(np.ones(10000))
    out = dropout(x, 0.5, training=True, rng=rng)
    assert abs(out.data.mean() - 1.0) < 0.05


def test_dropout_rejects_bad_rate():
    for rate in (-0.1, 1.0, 1.5):
        with pytest.raises(ValueError):
            dropout(Tensor([1.0]), rate, training=True, rng=np.random.default_rng(0))


def test_dropout_gradient_uses_same_mask():
    x = Tensor(np.ones(1000), requires_grad=True)
    out = dropout(x, 0.3, training=True, rng=np.random.default_rng(9))
    kept = out.data > 0
    backward(sum_all(out))
    assert np.allclose(x.grad[kept], 1.0 / 0.7)
    assert np.all(x.grad[~kept] == 0.0)


# ---------------------------------------------------------------------------
# cross entropy


def test_cross_entropy_uniform_logits():
    assert cross_entropy(Tensor([[0.0, 0.0]]), [0]).item() == pytest.approx(math.log(2), abs=1e-12)
    assert cross_entropy(Tensor(np.zeros((1, 17))), [4]).item() == pytest.approx(math.log(17), abs=1e-12)


def test_cross_entropy_confident_correct():
    assert cross_entropy(Tensor([[10.0, -10.0]]), [0]).item() < 1e-4


def test_cross_entropy_label_out_of_range():
    with pytest.raises(LabelError) as exc:
        cross_entropy(Tensor([[0.0, 0.0]]), [2])
    assert "2" in str(exc.value)


def test_cross_entropy_non_negative():
    rng = np.random.default_rng(3)
    for _ in range(25):
        logits = rng.normal(scale=5, size=(4, 6))
        targets = rng.integers(0, 6, size=4)
        assert cross_entropy(Tensor(logits), targets).item() >= 0.0


# ---------------------------------------------------------------------------
# backward


def test_backward_of_sum_gives_ones():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    backward(sum_all(x))
    assert np.array_equal(x.grad, np.ones((2, 3)))


def test_backward_matmul_matches_finite_differences():
    rng = np.random.default_rng(2)
    x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    w = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    err = grad_check_params(lambda: sum_all(matmul(x, w)), [x, w])
    assert err < 1e-6


def test_backward_skips_frozen_leaves():
    x = Tensor([[1.0, 2.0]], requires_grad=True)
    w = Tensor(np.eye(2), requires_grad=False)
    backward(sum_all(matmul(x, w)))
    assert x.grad is not None
    assert w.grad is None


def test_double_backward_rejected():
    x = Tensor([1.0, 2.0], requires_grad=True)
    loss = sum_all(x)
    backward(loss)
    with pytest.raises(ContractError):
        backward(loss)


def test_backward_requires_scalar():
    x = Tensor([[1.0, 2.0]], requires_grad=True)
    with pytest.raises(ContractError):
        backward(relu(x))


def test_backward_requires_recorded_loss():
    with pytest.raises(ContractError):
        backward(Tensor(1.0))


def test_composite_gradient_linear_activation_cross_entropy():
    rng = np.random.default_rng(8)
    x = Tensor(rng.normal(size=(2, 5)), requires_grad=True)
    w = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
    b = Tensor(rng.normal(size=3), requires_grad=True)

    def f():
        return cross_entropy(linear(relu(linear(x, w, b)), Tensor(np.eye(3)), Tensor(np.zeros(3))), [0, 2])

    err = grad_check_params(f, [x, w, b])
    assert err < 1e-4


def test_gradients_accumulate_when_tensor_reused():
    x = Tensor([2.0], requires_grad=True)
    backward(sum_all(x + x))
    assert np.array_equal(x.grad, [2.0])


def test_take_and_stack_roundtrip_gradients():
    x = Tensor(np.arange(12.0).reshape(4, 3), requires_grad=True)
    rows = [take_rows(x, [i]) for i in (0, 2, 2)]
    stacked = stack_rows([mean_rows(r) for r in rows])
    backward(sum_all(stacked))
    expected = np.zeros((4, 3))
    expected[0] = 1.0
    expected[2] = 2.0
    assert np.array_equal(x.grad, expected)


# ---------------------------------------------------------------------------
# Adam


def test_adam_first_step_is_learning_rate_sized():
    theta = Tensor(np.zeros(3), requires_grad=True)
    theta.grad = np.full(3, 0.5)
    Adam([theta], lr=0.001).step()
    assert np.all(np.abs(theta.data + 0.001) < 1e-6)


def test_adam_zero_gradient_leaves_parameters_unchanged():
    theta = Tensor([1.0, -2.0], requires_grad=True)
    opt = Adam([theta])
    theta.grad = np.zeros(2)
    opt.step()
    assert np.array_equal(theta.data, [1.0, -2.0])


def test_adam_converges_on_quadratic():
    theta = Tensor(0.0, requires_grad=True)
    opt = Adam([theta], lr=0.1)
    for _ in range(100):
        grad = 2.0 * (theta.data - 3.0)
        opt.step([grad])
    assert abs(theta.item() - 3.0) < 0.1


def test_adam_is_deterministic():
    results = []
    for _ in range(2):
        theta = Tensor([0.3, -0.7], requires_grad=True)
        opt = Adam([theta], lr=0.01)
        for step in range(10):
            opt.step([np.array([0.1 * step, -0.2])])
        results.append(theta.data.copy())
    assert np.array_equal(results[0], results[1])


def test_adam_shape_mismatch():
    theta = Tensor(np.zeros(3), requires_grad=True)
    with pytest.raises(ShapeError):
        Adam([theta]).step([np.zeros(4)])


# ---------------------------------------------------------------------------
# grad_check


def test_grad_check_relu_away_from_kinks():
    x = Tensor([[0.5, -0.3], [1.2, -2.0]], requires_grad=True)
    assert grad_check(lambda t: sum_all(relu(t)), x) < 1e-6


def test_grad_check_constant_function():
    x = Tensor([1.0, 2.0], requires_grad=True)
    assert grad_check(lambda t: Tensor(4.0), x) == 0.0


def test_grad_check_rejects_nondeterministic_function():
    rng = np.random.default_rng(0)
    x = Tensor(np.ones(4), requires_grad=True)

    def noisy(t):
        return sum_all(dropout(t, 0.5, training=True, rng=rng))

    with pytest.raises(ContractError):
        grad_check(noisy, x)

import numpy as np
import pytest

from coldrank.numgrad import (
    Dense,
    ShapeError,
    affine_backward,
    affine_forward,
    concat_backward,
    concat_forward,
    finite_difference_check,
    numeric_gradient,
    relu_backward,
    relu_forward,
    sigmoid_backward,
    sigmoid_forward,
    softmax_backward,
    softmax_forward,
)


def scalar_loop_affine(x, w, b):
    out = [[0.0] * len(b) for _ in x]
    for r, row in enumerate(x):
        for j in range(len(b)):
            acc = b[j]
            for i, xi in enumerate(row):
                acc += xi * w[i][j]
            out[r][j] = acc
    return out


def test_affine_identity():
    out, _ = affine_forward([[1.0, 2.0]], np.eye(2), np.zeros(2))
    np.testing.assert_array_equal(out, [[1.0, 2.0]])


def test_affine_zero_input_passes_bias():
    w = np.random.default_rng(0).standard_normal((2, 2))
    out, _ = affine_forward([[0.0, 0.0]], w, [3.0, -1.0])
    np.testing.assert_array_equal(out, [[3.0, -1.0]])


def test_affine_hand_case_matches_scalar_loop():
    x, w, b = [[1.0, 1.0]], [[2.0, 0.0], [0.0, 3.0]], [1.0, 1.0]
    out, _ = affine_forward(x, w, b)
    np.testing.assert_array_equal(out, [[3.0, 4.0]])
    np.testing.assert_array_equal(out, scalar_loop_affine(x, w, b))


def test_affine_random_matches_scalar_loop():
    rng = np.random.default_rng(3)
    x, w, b = rng.standard_normal((4, 3)), rng.standard_normal((3, 5)), rng.standard_normal(5)
    out, _ = affine_forward(x, w, b)
    np.testing.assert_allclose(out, scalar_loop_affine(x.tolist(), w.tolist(), b.tolist()), rtol=1e-13)


def test_affine_shape_error_names_dimensions():
    with pytest.raises(ShapeError, match="d_in=3"):
        affine_forward(np.ones((1, 3)), np.ones((2, 2)), np.zeros(2))
    with pytest.raises(ShapeError, match="bias"):
        affine_forward(np.ones((1, 2)), np.ones((2, 2)), np.zeros(3))


def test_affine_backward_zero_upstream():
    rng = np.random.default_rng(1)
    _, tr = affine_forward(rng.standard_normal((3, 4)), rng.standard_normal((4, 2)), np.zeros(2))
    g = affine_backward(tr, np.zeros((3, 2)))
    assert not g.weight_grads["W"].any()
    assert not g.weight_grads["b"].any()
    assert not g.input_grad.any()


def test_affine_backward_identity_jacobian():
    _, tr = affine_forward([[0.3, -0.7]], np.eye(2), np.zeros(2))
    g = affine_backward(tr, [[1.0, 0.0]])
    np.testing.assert_array_equal(g.input_grad, [[1.0, 0.0]])


def test_affine_backward_shape_mismatch():
    _, tr = affine_forward(np.ones((2, 2)), np.eye(2), np.zeros(2))
    with pytest.raises(ShapeError):
        affine_backward(tr, np.ones((2, 3)))


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("activation", [None, "relu", "sigmoid"])
def test_dense_layer_matches_finite_differences(seed, activation):
    rng = np.random.default_rng(seed)
    layer = Dense(rng.standard_normal((3, 4)), rng.standard_normal(4), activation)
    report = finite_difference_check(layer, rng.uniform(-2, 2, size=(5, 3)), 1e-5, 1e-4, seed=seed)
    assert report.passed, report.errors
    assert report.max_relative_error == max(report.errors.values())


def test_gradcheck_zero_layer_exact():
    layer = Dense(np.zeros((3, 2)), np.zeros(2))
    report = finite_difference_check(layer, np.zeros((2, 3)), 1e-5, 1e-4)
    assert report.max_relative_error < 1e-12  # exact up to round-off


def test_gradcheck_sigmoid_at_zero_is_quarter():
    layer = Dense([[1.0]], [0.0], activation="sigmoid")
    out, tr = layer.forward([[0.0]])
    assert out[0, 0] == 0.5
    g = layer.backward(tr, [[1.0]])
    assert g.input_grad[0, 0] == pytest.approx(0.25, abs=1e-12)
    assert finite_difference_check(layer, [[0.0]], 1e-5, 1e-4, upstream=[[1.0]]).passed


def test_gradcheck_rejects_bad_epsilon():
    with pytest.raises(ValueError):
        finite_difference_check(Dense(np.eye(2), np.zeros(2)), np.ones((1, 2)), epsilon=0.0)


def test_gradcheck_reports_failure_instead_of_raising():
    class Broken(Dense):
        def backward(self, trace, upstream):
            g = super().backward(trace, upstream)
            g.weight_grads["W"] = g.weight_grads["W"] * 2.0
            return g

    rng = np.random.default_rng(0)
    report = finite_difference_check(Broken(rng.standard_normal((2, 2)), np.zeros(2)), rng.standard_normal((3, 2)))
    assert not report.passed
    assert report.errors["W"] > 0.1


def test_relu_definition():
    out, mask = relu_forward([[-1.0, 2.0]])
    np.testing.assert_array_equal(out, [[0.0, 2.0]])
    np.testing.assert_array_equal(relu_backward(mask, [[5.0, 7.0]]), [[0.0, 7.0]])


def test_sigmoid_symmetry_and_range():
    out, tr = sigmoid_forward([[0.0, -10.0, 10.0, -800.0]])
    assert out[0, 0] == 0.5
    assert out[0, 1] == pytest.approx(1 - out[0, 2])
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(sigmoid_backward(tr, np.ones((1, 4)))[0, 0], 0.25)


def test_concat_forward_backward():
    out, widths = concat_forward([np.array([[1.0, 2.0]]), np.array([[3.0]])])
    np.testing.assert_array_equal(out, [[1.0, 2.0, 3.0]])
    a, b = concat_backward(widths, [[10.0, 20.0, 30.0]])
    np.testing.assert_array_equal(a, [[10.0, 20.0]])
    np.testing.assert_array_equal(b, [[30.0]])


def test_concat_batch_mismatch():
    with pytest.raises(ShapeError):
        concat_forward([np.ones((2, 1)), np.ones((3, 1))])


def test_softmax_backward_matches_finite_differences():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((3, 4))
    up = rng.standard_normal((3, 4))
    out, tr = softmax_forward(x)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)
    analytic = softmax_backward(tr, up)
    numeric = numeric_gradient(lambda: float(np.sum(softmax_forward(x)[0] * up)), x)
    np.testing.assert_allclose(analytic, numeric, rtol=1e-6, atol=1e-9)


def test_two_layer_composition_matches_scalar_loss():
    rng = np.random.default_rng(7)
    l1 = Dense(rng.standard_normal((3, 4)), rng.standard_normal(4), "relu")
    l2 = Dense(rng.standard_normal((4, 1)), rng.standard_normal(1), "sigmoid")
    x = rng.standard_normal((6, 3))

    def loss():
        return float(np.sum(l2.forward(l1.forward(x)[0])[0]))

    h, t1 = l1.forward(x)
    y, t2 = l2.forward(h)
    g2 = l2.backward(t2, np.ones_like(y))
    g1 = l1.backward(t1, g2.input_grad)
    np.testing.assert_allclose(g1.weight_grads["W"], numeric_gradient(loss, l1.params["W"]), rtol=1e-5, atol=1e-8)
    np.testing.assert_allclose(g1.input_grad, numeric_gradient(loss, x), rtol=1e-5, atol=1e-8)


def test_no_nan_on_bounded_inputs():
    rng = np.random.default_rng(0)
    x = rng.uniform(-10, 10, size=(50, 6))
    for act in (None, "relu", "sigmoid"):
        layer = Dense(rng.uniform(-10, 10, size=(6, 3)), rng.uniform(-10, 10, size=3), act)
        out, tr = layer.forward(x)
        g = layer.backward(tr, np.ones_like(out))
        assert np.all(np.isfinite(out)) and np.all(np.isfinite(g.input_grad))

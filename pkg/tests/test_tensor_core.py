import numpy as np
import pytest

from app.utils.tensor_core import (
    NonFiniteError,
    ShapeError,
    Tape,
    TapeError,
    Tensor,
    add,
    affine,
    backward,
    concat,
    finite_diff_check,
    hflip,
    log_softmax,
    matmul,
    mean,
    mul,
    no_grad,
    reshape,
    silu,
    slice_,
    sqrt,
    square,
    stop_gradient,
    sum_,
    take_rows,
    tanh,
)


def test_matmul_forward():
    out = matmul(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[1.0], [1.0]]))
    assert np.array_equal(out.data, np.array([[3.0], [7.0]]))


def test_add_zeros_is_identity():
    x = np.array([[0.1, -2.5, 3.0]])
    assert np.array_equal(add(x, np.zeros_like(x)).data, x)


def test_mean_square():
    assert mean(square(np.array([3.0, 4.0]))).item() == 12.5


def test_shape_mismatch_names_op_and_shapes():
    with pytest.raises(ShapeError) as exc:
        matmul(np.ones((2, 3)), np.ones((2, 3)))
    assert exc.value.op == "matmul"
    assert exc.value.shapes == ((2, 3), (2, 3))


def test_backward_mean_square():
    x = Tensor.parameter(np.array([3.0, 4.0]), "x")
    with Tape() as tape:
        y = mean(square(x))
    grads = backward(tape, y, [x])
    assert np.allclose(grads["x"], [3.0, 4.0])


def test_stop_gradient_blocks_its_branch():
    x = Tensor.parameter(np.array([1.5, -0.5]), "x")
    y = Tensor.parameter(np.array([2.0, 3.0]), "y")
    with Tape() as tape:
        out = sum_(mul(stop_gradient(y), x))
    grads = backward(tape, out, [x, y])
    assert np.array_equal(grads["y"], np.zeros(2))
    assert np.allclose(grads["x"], [2.0, 3.0])


def test_stop_gradient_forward_is_bitwise_identity():
    x = np.array([1.0, 2.0, np.pi])
    assert stop_gradient(x).data.tobytes() == Tensor(x).data.tobytes()


def test_one_live_branch_through_stop_gradient():
    x = Tensor.parameter(np.array([0.3, 0.7, -1.1]), "x")
    with Tape() as tape:
        out = sum_(add(x, stop_gradient(x)))
    assert np.array_equal(backward(tape, out, [x])["x"], np.ones(3))


def test_backward_needs_scalar_output():
    x = Tensor.parameter(np.ones(3), "x")
    with Tape() as tape:
        y = square(x)
    with pytest.raises(TapeError):
        backward(tape, y, [x])


def test_backward_rejects_output_from_another_tape():
    x = Tensor.parameter(np.ones(3), "x")
    with Tape():
        y = sum_(square(x))
    with Tape() as other:
        pass
    with pytest.raises(TapeError):
        backward(other, y, [x])


def test_every_requested_parameter_is_present():
    x = Tensor.parameter(np.ones(2), "x")
    unused = Tensor.parameter(np.ones((3, 3)), "unused")
    with Tape() as tape:
        y = sum_(square(x))
    grads = backward(tape, y, [x, unused])
    assert set(grads) == {"x", "unused"}
    assert grads["unused"].shape == (3, 3)
    assert not grads["unused"].any()


def test_no_grad_ops_are_not_taped():
    x = Tensor.parameter(np.ones(2), "x")
    with Tape() as tape:
        with no_grad():
            y = square(x)
        z = sum_(y)
    assert len(tape.nodes) == 1
    assert tape.skipped == 1
    assert not backward(tape, z, [x])["x"].any()


def test_non_finite_value_raises():
    with pytest.raises(NonFiniteError) as exc:
        mul(np.array([1e300]), np.array([1e300]))
    assert "gradient explosion" in str(exc.value)


@pytest.mark.parametrize("f", [
    lambda x: sum_(square(x)),
    lambda x: mean(tanh(x)),
    lambda x: sum_(silu(mul(x, 1.7))),
    lambda x: sum_(sqrt(add(square(x), 1.0))),
    lambda x: sum_(mul(hflip(x), x)),
    lambda x: mean(square(concat([x, mul(x, 2.0)], axis=1))),
    lambda x: sum_(square(slice_(x, (slice(None), slice(1, 3))))),
    lambda x: sum_(mul(log_softmax(x, axis=1), np.array([[1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]]))),
    lambda x: mean(square(reshape(x, (4, 2)))),
    lambda x: sum_(mean(square(x), axis=0)),
])
def test_op_gradients_match_finite_differences(f):
    point = np.array([[0.3, -1.2, 0.8, 1.5], [-0.7, 0.4, 2.1, -0.9]])
    assert finite_diff_check(f, point) < 1e-4


def test_quadratic_error_is_tiny():
    assert finite_diff_check(lambda x: sum_(square(x)), np.array([1.0, -2.0, 0.5])) < 1e-6


def test_constant_function_has_zero_error():
    assert finite_diff_check(lambda x: sum_(mul(x, 0.0)), np.array([1.0, 2.0])) == 0.0


def test_floor_ignores_coordinates_below_difference_resolution():
    # the 1e6 offset swallows the perturbation, so the numeric slope reads 0
    def f(x):
        return sum_(add(mul(x, 1e-12), Tensor(np.full(2, 5e5))))

    point = np.array([1.0, 2.0])
    assert finite_diff_check(f, point) > 1e-5
    assert finite_diff_check(f, point, floor=1e-6) == 0.0


def test_floor_keeps_large_coordinates():
    assert finite_diff_check(lambda x: sum_(square(x)), np.array([1.0, -2.0]), floor=1e-6) < 1e-6


def test_random_mlp_matches_finite_differences():
    rng = np.random.default_rng(7)
    w1, b1 = rng.standard_normal((3, 8)), rng.standard_normal(8)
    w2, b2 = rng.standard_normal((8, 8)) / 3, rng.standard_normal(8)
    w3, b3 = rng.standard_normal((8, 1)), rng.standard_normal(1)

    def f(x):
        h = silu(affine(x, w1, b1))
        h = tanh(affine(h, w2, b2))
        return mean(affine(h, w3, b3))

    assert finite_diff_check(f, rng.standard_normal((4, 3))) < 1e-4


def test_take_rows_accumulates_repeated_rows():
    table = Tensor.parameter(np.arange(6.0).reshape(3, 2), "table")
    with Tape() as tape:
        out = sum_(take_rows(table, np.array([0, 0, 2])))
    grads = backward(tape, out, [table])
    assert np.array_equal(grads["table"], np.array([[2.0, 2.0], [0.0, 0.0], [1.0, 1.0]]))


def test_backward_is_linear():
    rng = np.random.default_rng(3)
    x = Tensor.parameter(rng.standard_normal(5), "x")

    def grad_of(build):
        with Tape() as tape:
            out = build()
        return backward(tape, out, [x])["x"]

    g_f = grad_of(lambda: sum_(tanh(x)))
    g_g = grad_of(lambda: mean(square(x)))
    g_sum = grad_of(lambda: add(mul(sum_(tanh(x)), 2.0), mul(mean(square(x)), -3.0)))
    assert np.allclose(g_sum, 2.0 * g_f - 3.0 * g_g, atol=1e-10)


def test_tape_replay_is_deterministic():
    def run():
        rng = np.random.default_rng(11)
        w = Tensor.parameter(rng.standard_normal((4, 3)), "w")
        x = rng.standard_normal((5, 4))
        with Tape() as tape:
            out = mean(square(silu(matmul(x, w))))
        return backward(tape, out, [w])["w"].tobytes()

    assert run() == run()

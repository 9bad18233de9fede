"""Tests for the tape-based tensor engine."""

import unittest

import numpy as np
import pytest

from traffic_forecaster import tensor as tc
from traffic_forecaster.errors import DimensionError, TapeError
from traffic_forecaster.tensor import DiffTensor, Tape


def _scalar_loss(build):
    """Evaluate ``build(params) -> scalar DiffTensor`` without a tape."""

    def loss_fn(params):
        return build({k: DiffTensor(v) for k, v in params.items()}).item()

    return loss_fn


def _check_gradients(build, params, tol=1e-6):
    tape = Tape()
    bound = {k: tape.parameter(k, v) for k, v in params.items()}
    grads = tc.backward(tape, build(bound))
    loss_fn = _scalar_loss(build)
    for name in params:
        numeric = tc.numerical_gradient(loss_fn, params, name)
        assert tc.max_relative_error(grads[name], numeric) < tol, name


class TestForwardValues(unittest.TestCase):
    """Forward results of the primitives."""

    def test_matmul(self):
        out = tc.matmul(DiffTensor([[1, 2], [3, 4]]), DiffTensor([[1], [1]]))
        np.testing.assert_array_equal(out.values, [[3], [7]])

        x = np.arange(6.0).reshape(2, 3)
        np.testing.assert_array_equal(tc.matmul(np.eye(2), x).values, x)

    def test_matmul_shape_mismatch(self):
        with self.assertRaises(DimensionError):
            tc.matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_pointwise(self):
        np.testing.assert_array_equal(tc.relu(DiffTensor([-1.0, 0.0, 2.0])).values, [0, 0, 2])
        self.assertEqual(tc.sigmoid(DiffTensor([0.0])).values[0], 0.5)
        self.assertEqual(tc.tanh(DiffTensor([0.0])).values[0], 0.0)
        np.testing.assert_array_equal(tc.absolute(DiffTensor([-3.0, 2.0])).values, [3, 2])
        np.testing.assert_array_equal(tc.square(DiffTensor([-3.0, 2.0])).values, [9, 4])

    def test_sigmoid_is_finite_for_large_inputs(self):
        out = tc.sigmoid(DiffTensor([-1000.0, 1000.0])).values
        np.testing.assert_array_equal(out, [0.0, 1.0])
        self.assertTrue(np.isfinite(out).all())

    def test_unknown_pointwise_op(self):
        with self.assertRaises(ValueError):
            tc.pointwise("softplus", DiffTensor([1.0]))

    def test_combine(self):
        np.testing.assert_array_equal(
            tc.combine("add", DiffTensor([1.0, 2.0]), DiffTensor([3.0, 4.0])).values, [4, 6]
        )
        joined = tc.combine("concat-columns", np.ones((4, 3)), np.zeros((4, 2)))
        self.assertEqual(joined.shape, (4, 5))
        self.assertEqual(tc.combine("reduce-mean", DiffTensor([2.0, 4.0, 6.0])).item(), 4.0)
        self.assertEqual(tc.combine("reduce-sum", DiffTensor([2.0, 4.0, 6.0])).item(), 12.0)
        np.testing.assert_array_equal(
            tc.combine("scale-by-scalar", DiffTensor([1.0, -2.0]), factor=3.0).values, [3, -6]
        )

    def test_row_vector_added_to_every_row(self):
        out = tc.add(np.zeros((3, 2)), np.array([1.0, 2.0]))
        np.testing.assert_array_equal(out.values, [[1, 2]] * 3)
        single = tc.add(np.zeros((1, 2)), np.array([1.0, 2.0]))
        np.testing.assert_array_equal(single.values, [[1, 2]])

    def test_shape_errors(self):
        with self.assertRaises(DimensionError):
            tc.add(np.ones((2, 2)), np.ones((3, 2)))
        with self.assertRaises(DimensionError):
            tc.hadamard(np.ones((2, 2)), np.ones((2, 1)))
        with self.assertRaises(DimensionError):
            tc.concat_columns(np.ones((2, 2)), np.ones((3, 2)))
        with self.assertRaises(DimensionError):
            tc.reshape(np.ones((2, 3)), (4, 2))


class TestBackward(unittest.TestCase):
    """Reverse-mode gradients."""

    def test_square_at_three(self):
        tape = Tape()
        x = tape.parameter("x", [3.0])
        grads = tc.backward(tape, tc.reduce_sum(tc.square(x)))
        np.testing.assert_array_equal(grads["x"], [6.0])

    def test_sum_of_relu(self):
        tape = Tape()
        x = tape.parameter("x", [-1.0, 2.0])
        grads = tc.backward(tape, tc.reduce_sum(tc.relu(x)))
        np.testing.assert_array_equal(grads["x"], [0.0, 1.0])

    def test_relu_and_abs_gradient_at_zero(self):
        tape = Tape()
        x = tape.parameter("x", [0.0])
        y = tape.parameter("y", [0.0])
        out = tc.add(tc.reduce_sum(tc.relu(x)), tc.reduce_sum(tc.absolute(y)))
        grads = tc.backward(tape, out)
        self.assertEqual(grads["x"][0], 0.0)
        self.assertEqual(grads["y"][0], 0.0)

    def test_two_branches_accumulate(self):
        rng = np.random.default_rng(1)
        a = rng.uniform(-2, 2, (3, 3))

        def grad_of(branches):
            tape = Tape()
            x = tape.parameter("x", a)
            parts = {
                "tanh": tc.reduce_sum(tc.tanh(x)),
                "square": tc.reduce_sum(tc.square(x)),
            }
            out = parts[branches[0]]
            for name in branches[1:]:
                out = tc.add(out, parts[name])
            return tc.backward(tape, out)["x"]

        np.testing.assert_allclose(
            grad_of(["tanh", "square"]), grad_of(["tanh"]) + grad_of(["square"]), rtol=1e-14
        )

    def test_unused_parameter_gets_zeros(self):
        tape = Tape()
        x = tape.parameter("x", [1.0, 2.0])
        tape.parameter("unused", np.ones((2, 2)))
        grads = tc.backward(tape, tc.reduce_sum(x))
        np.testing.assert_array_equal(grads["unused"], np.zeros((2, 2)))

    def test_non_scalar_output(self):
        tape = Tape()
        x = tape.parameter("x", [1.0, 2.0])
        with self.assertRaises(TapeError):
            tc.backward(tape, tc.square(x))

    def test_output_from_another_tape(self):
        first, second = Tape(), Tape()
        out = tc.reduce_sum(first.parameter("x", [1.0]))
        with self.assertRaises(TapeError):
            tc.backward(second, out)
        with self.assertRaises(TapeError):
            tc.backward(first, tc.reduce_sum(DiffTensor([1.0])))

    def test_mixing_tapes_is_rejected(self):
        a = Tape().parameter("a", [1.0])
        b = Tape().parameter("b", [1.0])
        with self.assertRaises(TapeError):
            tc.add(a, b)


@pytest.mark.parametrize("op", ["relu", "sigmoid", "tanh", "abs", "square"])
def test_pointwise_gradients_match_finite_differences(op):
    rng = np.random.default_rng(7)
    params = {"x": rng.uniform(-2, 2, (3, 4))}
    _check_gradients(
        lambda p: tc.reduce_sum(tc.hadamard(tc.pointwise(op, p["x"]), p["x"])), params
    )


def test_matmul_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    params = {"a": rng.uniform(-2, 2, (3, 4)), "b": rng.uniform(-2, 2, (4, 2))}
    _check_gradients(lambda p: tc.reduce_sum(tc.matmul(p["a"], p["b"])), params)


def test_combine_gradients_match_finite_differences():
    rng = np.random.default_rng(4)
    params = {
        "a": rng.uniform(-2, 2, (3, 2)),
        "b": rng.uniform(-2, 2, (3, 2)),
        "row": rng.uniform(-2, 2, 2),
    }

    def build(p):
        diff = tc.subtract(tc.hadamard(p["a"], p["b"]), p["row"])
        joined = tc.concat_columns(tc.add(p["a"], p["row"]), tc.scale(diff, 1.5))
        return tc.add(tc.reduce_mean(tc.square(joined)), tc.reduce_sum(tc.tanh(joined)))

    _check_gradients(build, params)


def test_structural_gradients_match_finite_differences():
    rng = np.random.default_rng(5)
    params = {"x": rng.uniform(-2, 2, (4, 3)), "w": rng.uniform(-2, 2, (5, 6))}

    def build(p):
        r = tc.reshape(p["x"], (2, 6))
        s = tc.reshape(tc.tile_rows(r, 2), (6, 4))
        return tc.reduce_sum(tc.square(tc.matmul(p["w"], s)))

    _check_gradients(build, params)


def test_replay_is_bit_exact():
    rng = np.random.default_rng(11)
    tape = Tape()
    x = tape.parameter("x", rng.standard_normal((4, 3)))
    w = tape.parameter("w", rng.standard_normal((3, 2)))
    out = tc.reduce_mean(tc.sigmoid(tc.matmul(tc.tanh(x), w)))
    replayed = tape.replay()
    recorded = [tape.tensors[e.output].values for e in tape.entries]
    assert len(replayed) == len(tape)
    for a, b in zip(replayed, recorded):
        np.testing.assert_array_equal(a, b)
    assert replayed[-1] == out.values


def test_forward_backward_is_deterministic():
    rng = np.random.default_rng(12)
    a, b = rng.standard_normal((5, 4)), rng.standard_normal((4, 3))

    def run():
        tape = Tape()
        pa, pb = tape.parameter("a", a), tape.parameter("b", b)
        out = tc.reduce_sum(tc.relu(tc.matmul(pa, pb)))
        return out.item(), tc.backward(tape, out)

    (v1, g1), (v2, g2) = run(), run()
    assert v1 == v2
    for name in g1:
        np.testing.assert_array_equal(g1[name], g2[name])


def test_item_needs_single_element():
    with pytest.raises(TapeError):
        DiffTensor([1.0, 2.0]).item()

import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from esrf.errors import InputError
from esrf.numerics import (
    AdamState,
    Tape,
    adam_step,
    grad_check,
    gumbel_from_uniform,
    gumbel_sample,
    value_and_grad,
)

from oracles import central_differences


class TestValueAndGrad:
    def test_quadratic(self):
        tape = Tape()
        x = tape.param("x", np.array(3.0))
        value, grads = value_and_grad(tape, x * x)
        assert value == 9.0
        assert grads["x"] == 6.0

    def test_sigmoid_at_zero(self):
        tape = Tape()
        x = tape.param("x", np.array(0.0))
        value, grads = value_and_grad(tape, tape.sigmoid(x))
        assert value == 0.5
        assert grads["x"] == 0.25

    def test_non_scalar_loss_rejected(self):
        tape = Tape()
        x = tape.param("x", np.ones(3))
        with pytest.raises(InputError):
            value_and_grad(tape, x * 2.0)

    def test_backward_is_repeatable_and_pure(self):
        rng = np.random.default_rng(0)
        tape = Tape()
        a = tape.param("a", rng.normal(size=(4, 3)))
        b = tape.param("b", rng.normal(size=(3, 2)))
        loss = tape.sum(tape.softmax(tape.sigmoid(a @ b), axis=1) * tape.const(rng.normal(size=(4, 2))))
        snapshot = [v.copy() for v in tape._values]
        _, g1 = value_and_grad(tape, loss)
        _, g2 = value_and_grad(tape, loss)
        for k in g1:
            np.testing.assert_array_equal(g1[k], g2[k])
        for before, after in zip(snapshot, tape._values):
            np.testing.assert_array_equal(before, after)

    def test_unused_param_gets_zero_grad(self):
        tape = Tape()
        x = tape.param("x", np.array(2.0))
        tape.param("unused", np.ones(3))
        _, grads = value_and_grad(tape, x * x)
        np.testing.assert_array_equal(grads["unused"], np.zeros(3))


def _check_against_fd(build, arrays, tol=1e-7):
    """Compare tape gradients with an external central-difference oracle."""
    tape = Tape()
    leaves = {k: tape.param(k, v) for k, v in arrays.items()}
    loss = build(tape, leaves)
    _, grads = value_and_grad(tape, loss)
    for name, value in arrays.items():

        def f(x, name=name):
            t = Tape()
            ls = {k: t.param(k, x if k == name else v) for k, v in arrays.items()}
            return float(build(t, ls).value)

        fd = central_differences(f, value)
        np.testing.assert_allclose(grads[name], fd, rtol=tol, atol=tol, err_msg=name)


class TestPrimitiveGradients:
    rng = np.random.default_rng(42)

    def test_matmul_batched(self):
        arrays = {"a": self.rng.normal(size=(3, 2, 4)), "w": self.rng.normal(size=(4, 5))}
        _check_against_fd(lambda t, p: tape_sum_sq(t, p["a"] @ p["w"]), arrays)

    def test_matmul_vector(self):
        arrays = {"a": self.rng.normal(size=(3, 4)), "q": self.rng.normal(size=4)}
        _check_against_fd(lambda t, p: tape_sum_sq(t, p["a"] @ p["q"]), arrays)

    def test_spmm_and_transpose(self):
        m = sp.random(5, 4, density=0.5, random_state=1, format="csr")
        arrays = {"x": self.rng.normal(size=(4, 3))}
        _check_against_fd(lambda t, p: tape_sum_sq(t, t.spmm(m, p["x"]).T), arrays)

    def test_gather_with_repeats(self):
        idx = np.array([[0, 2], [2, 2], [1, 0]])
        arrays = {"x": self.rng.normal(size=(3, 2))}
        _check_against_fd(lambda t, p: tape_sum_sq(t, t.gather(p["x"], idx) * 1.5), arrays)

    def test_masked_softmax(self):
        mask = np.array([[True, True, False], [False, False, False], [True, True, True]])
        w = self.rng.normal(size=(3, 3))
        arrays = {"x": self.rng.normal(size=(3, 3))}
        _check_against_fd(
            lambda t, p: t.sum(t.softmax(p["x"], axis=1, mask=mask) * t.const(w)), arrays
        )

    def test_elementwise_chain(self):
        arrays = {"x": self.rng.uniform(0.5, 2.0, size=(2, 3)), "y": self.rng.normal(size=(1, 3))}

        def build(t, p):
            z = t.log(p["x"]) * t.exp(p["y"]) - t.relu(p["y"] - 0.1) / p["x"]
            z = t.concat([z, t.sigmoid(p["x"]) + p["y"]], axis=0)
            return t.sum(t.log_sigmoid(z)) + t.mean(t.square(p["y"]))

        _check_against_fd(build, arrays)

    def test_log_softmax_clip_and_fill(self):
        w = self.rng.normal(size=(2, 4))
        mask = np.array([[False, True, False, False], [False, False, False, True]])
        arrays = {"x": self.rng.normal(size=(2, 4)) * 3}

        def build(t, p):
            z = t.fill(t.clip_below(t.log_softmax(p["x"], axis=1), -2.5), mask, -9.0)
            return t.sum(z * t.const(w))

        _check_against_fd(build, arrays)

    def test_log_softmax_matches_log_of_softmax(self):
        x = self.rng.normal(size=(3, 5)) * 4
        t = Tape()
        direct = t.log_softmax(t.const(x), axis=1).value
        np.testing.assert_allclose(direct, np.log(t.softmax(t.const(x), axis=1).value), rtol=1e-12)

    def test_softmax_rows_sum_to_one_and_empty_rows_zero(self):
        t = Tape()
        out = t.softmax(t.const(np.zeros((2, 3))), mask=np.array([[1, 0, 1], [0, 0, 0]], bool))
        np.testing.assert_allclose(out.value, [[0.5, 0, 0.5], [0, 0, 0]])


def tape_sum_sq(t, v):
    return t.sum(t.square(v))


class TestGradCheck:
    def test_linear_is_exact(self):
        tape = Tape()
        x = tape.param("x", np.array([1.0, -2.0, 3.0]))
        tape.dot(x, tape.const(np.array([2.0, 0.5, -1.0])))
        assert grad_check(tape, "x", eps=1e-5) < 1e-10

    def test_square_at_one(self):
        tape = Tape()
        x = tape.param("x", np.array(1.0))
        tape.square(x)
        assert grad_check(tape, x, eps=1e-5) < 1e-8

    def test_detects_one_percent_error_at_large_loss(self):
        tape = Tape()
        x = tape.param("x", np.array([0.5, 2.0]))
        loss = tape.sum(tape.square(x)) + 1e3
        true_grad = tape.backward(loss)["x"]
        tape.backward = lambda _: {"x": true_grad * np.array([1.0, 1.01])}
        assert grad_check(tape, x, loss) > 1e-3

    def test_replay_does_not_mutate(self):
        tape = Tape()
        x = tape.param("x", np.array([1.0, 2.0]))
        loss = tape.sum(tape.exp(x))
        before = float(loss.value)
        vals = tape.replay({x: np.array([0.0, 0.0])})
        assert vals[loss.index] == pytest.approx(2.0)
        assert float(loss.value) == before


class TestAdam:
    def test_first_step_is_learning_rate_sized(self):
        params = {"w": np.array([1.0, -1.0, 0.5])}
        state = AdamState(learning_rate=0.01)
        adam_step(params, {"w": np.array([3.0, -0.2, 1e-3])}, state)
        np.testing.assert_allclose(params["w"], [0.99, -0.99, 0.49], atol=1e-6)
        assert state.step_count == 1

    def test_zero_gradient_leaves_params(self):
        params = {"w": np.array([1.0, 2.0])}
        adam_step(params, {"w": np.zeros(2)}, AdamState())
        np.testing.assert_array_equal(params["w"], [1.0, 2.0])

    def test_two_steps_match_hand_recurrence(self):
        params = {"w": np.array([0.0])}
        state = AdamState(learning_rate=0.1)
        for _ in range(2):
            adam_step(params, {"w": np.array([1.0])}, state)
        # hand-rolled: m_t = 1 - 0.9^t, v_t = 1 - 0.999^t, bias corrected both equal 1
        w = 0.0
        m = v = 0.0
        for t in (1, 2):
            m = 0.9 * m + 0.1
            v = 0.999 * v + 0.001
            w -= 0.1 * (m / (1 - 0.9**t)) / (math.sqrt(v / (1 - 0.999**t)) + 1e-8)
        np.testing.assert_allclose(params["w"], [w], rtol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(InputError):
            adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, AdamState())


class TestGumbel:
    def test_closed_forms(self):
        assert gumbel_from_uniform(1 / math.e) == pytest.approx(0.0, abs=1e-15)
        assert gumbel_from_uniform(math.exp(-math.e)) == pytest.approx(-1.0, abs=1e-12)

    def test_mean_is_euler_mascheroni(self):
        g = gumbel_sample(1_000_000, np.random.default_rng(0))
        assert abs(g.mean() - 0.5772156649) < 0.01

    def test_deterministic_under_seed(self):
        a = gumbel_sample((50, 7), np.random.default_rng(9))
        b = gumbel_sample((50, 7), np.random.default_rng(9))
        np.testing.assert_array_equal(a, b)

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=20, deadline=None)
    def test_always_finite(self, seed):
        assert np.all(np.isfinite(gumbel_sample(1000, np.random.default_rng(seed))))

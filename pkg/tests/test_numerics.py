import math

import numpy as np
import pytest

from suptlab.gradcheck import primitive_programs, run_programs
from suptlab.numerics import (
    FROZEN,
    TUNABLE,
    AdamState,
    ContractError,
    GradTape,
    ParamGroup,
    ShapeError,
    Tensor,
    adam_step,
    backward,
    elementwise,
    finite_diff_check,
    matmul,
    reduce,
    relu,
    rng,
    row_softmax,
    segment_col_softmax,
    sigmoid,
)


def t(values):
    return Tensor(np.array(values, dtype=np.float64), requires_grad=True)


class TestMatmul:
    def test_identity(self):
        out = matmul(t([[1, 2], [3, 4]]), Tensor(np.eye(2)))
        np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])

    def test_hand_product(self):
        assert matmul(t([[1, 2]]), t([[3], [4]])).data.tolist() == [[11.0]]

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 2))))


class TestElementwise:
    def test_sigmoid_zero(self):
        assert sigmoid(Tensor([[0.0]])).item() == 0.5

    def test_sigmoid_extremes_stay_finite(self):
        out = sigmoid(Tensor([[-1000.0, 1000.0]])).data
        assert np.all(np.isfinite(out))
        assert out[0, 0] == 0.0 and out[0, 1] == 1.0

    def test_relu(self):
        np.testing.assert_array_equal(relu(Tensor([[-1.0, 2.0]])).data, [[0.0, 2.0]])

    def test_row_broadcast_add(self):
        out = elementwise("add", t([[1, 1], [2, 2]]), t([[10, 20]]))
        np.testing.assert_array_equal(out.data, [[11, 21], [12, 22]])

    def test_incompatible_shapes(self):
        with pytest.raises(ShapeError):
            elementwise("add", Tensor(np.ones((2, 2))), Tensor(np.ones((3, 2))))


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_array_equal(row_softmax(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])

    def test_ln2(self):
        np.testing.assert_allclose(row_softmax(Tensor([[math.log(2), 0.0]])).data, [[2 / 3, 1 / 3]], atol=1e-15)

    def test_large_logits(self):
        np.testing.assert_allclose(row_softmax(Tensor([[1000.0, 0.0]])).data, [[1.0, 0.0]], atol=1e-12)

    @pytest.mark.parametrize("seed", range(20))
    def test_rows_sum_to_one(self, seed):
        gen = rng(seed, "softmax")
        x = gen.uniform(-1e3, 1e3, size=(int(gen.integers(1, 9)), int(gen.integers(1, 9))))
        out = row_softmax(Tensor(x)).data
        assert np.abs(out.sum(axis=1) - 1.0).max() <= 1e-12

    def test_segment_column_softmax(self):
        x = rng(0, "seg").standard_normal((5, 3))
        out = segment_col_softmax(Tensor(x), np.array([0, 2, 5])).data
        np.testing.assert_allclose(out[:2].sum(axis=0), 1.0, atol=1e-12)
        np.testing.assert_allclose(out[2:].sum(axis=0), 1.0, atol=1e-12)


class TestReduce:
    def test_frobenius_identity(self):
        assert reduce("frobenius", Tensor(np.eye(2))).item() == pytest.approx(math.sqrt(2), abs=1e-15)

    def test_sum_all_zeros(self):
        assert reduce("sum_all", Tensor(np.zeros((3, 3)))).item() == 0.0

    def test_sum_rows_collapses_columns(self):
        np.testing.assert_array_equal(reduce("sum_rows", t([[1, 2], [3, 4]])).data, [[3], [7]])

    def test_sum_cols(self):
        np.testing.assert_array_equal(reduce("sum_cols", t([[1, 2], [3, 4]])).data, [[4, 6]])


class TestBackward:
    def test_sum_gradient_is_ones(self):
        x = t(np.ones((2, 2)))
        with GradTape() as tape:
            loss = reduce("sum_all", x)
        np.testing.assert_array_equal(backward(tape, loss, [x])[x], np.ones((2, 2)))

    def test_square(self):
        x = t([[3.0]])
        with GradTape() as tape:
            loss = reduce("sum_all", elementwise("mul", x, x))
        assert backward(tape, loss, [x])[x].tolist() == [[6.0]]

    def test_untouched_tensor_gets_zero(self):
        x, w = t([[1.0, 2.0]]), t([[5.0], [6.0]])
        with GradTape() as tape:
            loss = reduce("sum_all", x)
        np.testing.assert_array_equal(backward(tape, loss, [x, w])[w], np.zeros((2, 1)))

    def test_non_scalar_loss(self):
        x = t(np.ones((2, 2)))
        with GradTape() as tape:
            out = elementwise("mul", x, x)
        with pytest.raises(ContractError):
            backward(tape, out, [x])

    def test_deterministic(self):
        gen = rng(3, "det")
        a, b = t(gen.standard_normal((4, 3))), t(gen.standard_normal((3, 2)))

        def grads():
            with GradTape() as tape:
                loss = reduce("frobenius", relu(matmul(a, b)))
            g = backward(tape, loss, [a, b])
            return g[a].tobytes(), g[b].tobytes()

        assert grads() == grads()


class TestFiniteDiff:
    def test_linear_is_exact(self):
        w = Tensor(rng(0, "lin").standard_normal((3, 2)), requires_grad=True)
        c = Tensor(rng(1, "lin").standard_normal((3, 2)))
        group = ParamGroup([("w", w, TUNABLE)])
        rep = finite_diff_check(lambda: reduce("sum_all", elementwise("mul", w, c)), group)
        assert rep.passed and rep.max_rel_error <= 1e-10

    def test_sigmoid_at_zero(self):
        x = Tensor([[0.0]], requires_grad=True)
        with GradTape() as tape:
            loss = reduce("sum_all", sigmoid(x))
        assert backward(tape, loss, [x])[x][0, 0] == 0.25
        h = 1e-5
        numeric = (1 / (1 + math.exp(-h)) - 1 / (1 + math.exp(h))) / (2 * h)
        assert abs(numeric - 0.25) <= 1e-6

    def test_injected_fault_is_named(self):
        w = Tensor(np.ones((2, 2)), requires_grad=True)
        group = ParamGroup([("weights", w, TUNABLE)])

        def loss():
            return reduce("sum_all", elementwise("mul", w, w))

        with GradTape() as tape:
            out = loss()
        corrupted = {w: backward(tape, out, [w])[w] + 0.1}
        rep = finite_diff_check(loss, group, analytic=corrupted)
        assert not rep.passed
        assert "weights" in rep.worst

    def test_step_range_enforced(self):
        w = Tensor(np.ones((1, 1)), requires_grad=True)
        with pytest.raises(ContractError):
            finite_diff_check(lambda: reduce("sum_all", w), ParamGroup([("w", w, TUNABLE)]), step=1e-2)

    def test_non_finite_probe_is_reported(self):
        w = Tensor(np.ones((1, 1)), requires_grad=True)

        def loss():
            if w.data[0, 0] > 1.0:
                return Tensor([[np.nan]])
            return reduce("sum_all", w)

        rep = finite_diff_check(loss, ParamGroup([("w", w, TUNABLE)]))
        assert not rep.passed and "w" in rep.message

    @pytest.mark.parametrize("seed", range(100))
    def test_primitives_pass(self, seed):
        for name, rep in run_programs(primitive_programs(seed)):
            assert rep.passed, f"{name}: {rep.message}"


class TestAdam:
    def _group(self, value, role=TUNABLE):
        x = Tensor(np.array([[value]]), requires_grad=role == TUNABLE)
        return x, ParamGroup([("x", x, role)])

    def test_zero_grad_no_change(self):
        x, group = self._group(1.5)
        adam_step(AdamState(lr=0.1), group, {x: np.zeros((1, 1))})
        assert x.data[0, 0] == 1.5

    def test_first_step_moves_by_lr(self):
        x, group = self._group(1.0)
        adam_step(AdamState(lr=0.1), group, {x: np.ones((1, 1))})
        assert x.data[0, 0] == pytest.approx(0.9, abs=1e-7)

    def test_frozen_untouched(self):
        x, group = self._group(2.0, FROZEN)
        before = x.data.tobytes()
        for _ in range(3):
            adam_step(AdamState(lr=0.1, weight_decay=0.1), group, {x: np.full((1, 1), 7.0)})
        assert x.data.tobytes() == before

    def test_weight_decay_is_l2(self):
        # decay enters the gradient, so a zero gradient still moves the weight
        x, group = self._group(1.0)
        adam_step(AdamState(lr=0.1, weight_decay=0.5), group, {x: np.zeros((1, 1))})
        assert x.data[0, 0] == pytest.approx(0.9, abs=1e-7)

    def test_decoupled_flag(self):
        x, group = self._group(1.0)
        adam_step(AdamState(lr=0.1, weight_decay=0.5, decoupled=True), group, {x: np.zeros((1, 1))})
        assert x.data[0, 0] == pytest.approx(1.0 - 0.1 * 0.5, abs=1e-12)

    def test_shape_mismatch(self):
        x, group = self._group(1.0)
        with pytest.raises(ContractError):
            adam_step(AdamState(lr=0.1), group, {x: np.zeros((2, 1))})


class TestParamGroup:
    def test_unique_names(self):
        a = Tensor(np.ones((1, 1)))
        with pytest.raises(ValueError):
            ParamGroup([("a", a, TUNABLE), ("a", Tensor(np.ones((1, 1))), TUNABLE)])

    def test_counts(self):
        group = ParamGroup(
            [("a", Tensor(np.ones((2, 3))), TUNABLE), ("b", Tensor(np.ones((4, 1))), FROZEN)]
        )
        assert (group.count("all"), group.count("tunable"), group.count("frozen")) == (10, 6, 4)


def test_named_streams_are_independent_and_reproducible():
    a1 = rng(7, "alpha").random(4)
    a2 = rng(7, "alpha").random(4)
    b = rng(7, "beta").random(4)
    np.testing.assert_array_equal(a1, a2)
    assert not np.array_equal(a1, b)

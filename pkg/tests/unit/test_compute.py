"""Tests for compute — tensors, tape, primitives, gradient checking, containers."""

import math

import numpy as np
import pytest

from scanloop.common.exceptions import (
    CheckpointError,
    ContractError,
    DimensionError,
    OracleError,
    StaleTapeError,
)
from scanloop.compute import ops
from scanloop.compute.gradcheck import finite_diff_check
from scanloop.compute.optim import Adam, step_decay
from scanloop.compute.params import MAGIC, ParameterStore
from scanloop.compute.tensor import Tensor, backward, fresh_tape, no_grad

ONES_2X4 = np.arange(8.0).reshape(2, 4) / 4.0


class TestTensor:
    def test_shape_and_values(self):
        t = Tensor(np.arange(6.0).reshape(2, 3))
        assert t.shape == (2, 3)
        assert len(t.values) == 6

    def test_non_finite_rejected(self):
        with pytest.raises(ContractError):
            Tensor([1.0, float("nan")])

    def test_data_is_read_only(self):
        t = Tensor([1.0, 2.0])
        with pytest.raises(ValueError):
            t.data[0] = 5.0

    def test_broadcast_row_vector(self):
        out = Tensor(np.ones((3, 2))) + Tensor(np.array([[1.0, 2.0]]))
        assert np.allclose(out.data, [[2, 3], [2, 3], [2, 3]])

    def test_broadcast_column_vector(self):
        out = Tensor(np.ones((3, 2))) * Tensor(np.array([[1.0], [2.0], [3.0]]))
        assert np.allclose(out.data[:, 0], [1, 2, 3])

    def test_general_broadcast_rejected(self):
        with pytest.raises(DimensionError):
            Tensor(np.ones((2, 3))) + Tensor(np.ones((3, 2)))

    def test_matmul_shape_mismatch(self):
        with pytest.raises(DimensionError):
            Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


class TestLinear:
    def test_zero_input_rows_equal_bias(self):
        b = Tensor([1.0, -2.0])
        W = Tensor(np.random.default_rng(0).normal(size=(4, 2)))
        y = ops.linear(Tensor(np.zeros((3, 4))), W, b)
        assert np.allclose(y.data, np.tile([1.0, -2.0], (3, 1)))

    def test_identity_weights(self):
        x = Tensor(np.random.default_rng(1).normal(size=(3, 4)))
        y = ops.linear(x, Tensor(np.eye(4)), Tensor(np.zeros(4)))
        assert np.array_equal(y.data, x.data)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            ops.linear(Tensor(np.ones((3, 4))), Tensor(np.ones((3, 2))), Tensor(np.zeros(2)))

    def test_weight_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        x = Tensor(rng.normal(size=(3, 4)))
        b = Tensor(rng.normal(size=2))
        W = Tensor(rng.normal(size=(4, 2)))
        err = finite_diff_check(lambda w: ops.reduce_sum(ops.square(ops.linear(x, w, b))), W)
        assert err < 1e-4

    def test_bias_gradient_is_column_sum(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.normal(size=(5, 3)))
        W = Tensor(rng.normal(size=(3, 2)))
        b = Tensor(np.zeros(2), requires_grad=True)
        with fresh_tape():
            backward(ops.reduce_sum(ops.linear(x, W, b)))
        assert np.allclose(b.grad, [5.0, 5.0])


class TestSoftmaxRows:
    def test_constant_row_uniform(self):
        y = ops.softmax_rows(Tensor(np.full((1, 4), 3.0)))
        assert np.allclose(y.data, 0.25)

    def test_hand_case(self):
        y = ops.softmax_rows(Tensor([[0.0, math.log(3.0)]]))
        assert np.allclose(y.data, [[0.25, 0.75]], atol=1e-12)

    def test_dominant_entry(self):
        y = ops.softmax_rows(Tensor([[50.0, 0.0, 0.0]]))
        assert y.data[0, 0] > 1 - 1e-9

    def test_row_stochastic(self):
        y = ops.softmax_rows(Tensor(np.random.default_rng(4).normal(size=(6, 9)) * 20))
        assert np.all(y.data >= 0)
        assert np.allclose(y.data.sum(axis=1), 1.0, atol=1e-9)


class TestLogSumExpRows:
    def test_single_column_is_identity(self):
        x = np.array([[1.5], [-2.0], [7.0]])
        assert np.array_equal(ops.log_sum_exp_rows(Tensor(x)).data, x[:, 0])

    def test_zero_row(self):
        out = ops.log_sum_exp_rows(Tensor(np.zeros((1, 5))))
        assert out.data[0] == pytest.approx(math.log(5.0), abs=1e-12)

    def test_against_naive(self):
        x = np.random.default_rng(5).normal(size=(5, 7))
        naive = np.log(np.exp(x).sum(axis=1))
        assert np.allclose(ops.log_sum_exp_rows(Tensor(x)).data, naive, atol=1e-10)

    def test_output_is_one_dimensional(self):
        assert ops.log_sum_exp_rows(Tensor(np.zeros((4, 2)))).shape == (4,)


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.random.default_rng(6).normal(size=(3, 2)), requires_grad=True)
        with fresh_tape():
            backward(ops.reduce_sum(x))
        assert np.array_equal(x.grad, np.ones((3, 2)))

    def test_squared_norm(self):
        x = Tensor([1.0, -2.0, 3.0], requires_grad=True)
        with fresh_tape():
            backward(ops.reduce_sum(x * x))
        assert np.allclose(x.grad, [2.0, -4.0, 6.0])

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with fresh_tape():
            with pytest.raises(ContractError):
                backward(x * 2.0)

    def test_second_backward_is_stale(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with fresh_tape():
            loss = ops.reduce_sum(x * x)
            backward(loss)
            with pytest.raises(StaleTapeError):
                backward(loss)

    def test_stale_tape_is_a_contract_error(self):
        assert issubclass(StaleTapeError, ContractError)

    def test_composite_mlp_softmax(self):
        rng = np.random.default_rng(7)
        W1, b1 = Tensor(rng.normal(size=(4, 6))), Tensor(rng.normal(size=6))
        W2, b2 = Tensor(rng.normal(size=(6, 5))), Tensor(rng.normal(size=5))
        target = Tensor(rng.random(size=(3, 5)))

        def f(x):
            h = ops.relu(ops.linear(x, W1, b1))
            return ops.reduce_sum(ops.softmax_rows(ops.linear(h, W2, b2)) * target)

        err = finite_diff_check(f, Tensor(rng.normal(size=(3, 4))), samples=20)
        assert err < 1e-4

    def test_deterministic_gradients(self):
        data = np.random.default_rng(8).normal(size=(4, 4))
        grads = []
        for _ in range(2):
            x = Tensor(data, requires_grad=True)
            with fresh_tape():
                backward(ops.reduce_sum(ops.softmax_rows(x @ x.T) * x))
            grads.append(x.grad.tobytes())
        assert grads[0] == grads[1]

    def test_no_grad_records_nothing(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with fresh_tape() as tape:
            with no_grad():
                y = ops.reduce_sum(x * x)
            assert len(tape) == 0
            assert not y.requires_grad


class TestFiniteDiffCheck:
    def test_sum_is_exact(self):
        x = Tensor(np.random.default_rng(9).normal(size=(3, 3)))
        err = finite_diff_check(ops.reduce_sum, x)
        assert err < 1e-8

    def test_sigmoid_sum_at_zero(self):
        x = Tensor(np.zeros(4), requires_grad=True)
        with fresh_tape():
            backward(ops.reduce_sum(ops.sigmoid(x)))
        assert np.allclose(x.grad, 0.25)
        err = finite_diff_check(lambda t: ops.reduce_sum(ops.sigmoid(t)), Tensor(np.zeros(4)))
        assert err < 1e-8

    def test_eps_out_of_range(self):
        with pytest.raises(ContractError):
            finite_diff_check(ops.reduce_sum, Tensor(np.ones(2)), eps=1e-2)

    def test_non_deterministic_function(self):
        calls = iter(range(1000))

        def f(x):
            return ops.reduce_sum(x) + float(next(calls))

        with pytest.raises(OracleError):
            finite_diff_check(f, Tensor(np.ones(2)))


def _primitive_cases():
    """(name, scalar function of x, input shape) for every differentiable primitive."""
    mask = np.array([[True, False, True], [False, True, True]])
    theta = np.array([[0.3, -1.1], [2.0, 0.4]])
    weights = np.random.default_rng(99).normal(size=(2, 3, 2))

    def kconv(x):
        from scipy import sparse

        A = [
            sparse.csr_matrix([[0.5, 0.0], [0.2, 0.9]]),
            sparse.csr_matrix([[0.0, 1.0], [0.3, 0.0]]),
        ]
        return ops.reduce_sum(ops.square(ops.kernel_conv(x, Tensor(weights), A)))

    return [
        ("relu", lambda x: ops.reduce_sum(ops.relu(x) * x), (2, 3)),
        ("sigmoid", lambda x: ops.reduce_sum(ops.sigmoid(x)), (2, 3)),
        ("tanh", lambda x: ops.reduce_sum(ops.tanh(x) * x), (2, 3)),
        ("abs", lambda x: ops.reduce_sum(ops.abs_(x) * x), (2, 3)),
        ("exp_log", lambda x: ops.reduce_sum(ops.log(ops.exp(x) + 1.0)), (2, 3)),
        ("softmax", lambda x: ops.reduce_sum(ops.square(ops.softmax_rows(x))), (2, 3)),
        ("lse_rows", lambda x: ops.reduce_sum(ops.log_sum_exp_rows(x)), (2, 3)),
        ("lse_cols", lambda x: ops.reduce_sum(ops.square(ops.log_sum_exp_cols(x))), (2, 3)),
        ("layer_norm", lambda x: ops.reduce_sum(ops.layer_norm_rows(x) * x), (2, 3)),
        ("row_norms", lambda x: ops.reduce_sum(ops.row_norms(x)), (2, 3)),
        ("mean_axis", lambda x: ops.reduce_sum(ops.square(ops.reduce_mean(x, axis=0))), (2, 3)),
        ("masked_max", lambda x: ops.reduce_sum(ops.masked_max_rows(x, mask)), (2, 3)),
        ("transpose", lambda x: ops.reduce_sum(ops.square(x.T @ x)), (2, 3)),
        ("concat", lambda x: ops.reduce_sum(ops.square(ops.concat([x, x * 2.0], axis=1))), (2, 3)),
        ("take_rows", lambda x: ops.reduce_sum(ops.square(ops.take_rows(x, [1, 1, 0]))), (2, 3)),
        (
            "take_elements",
            lambda x: ops.reduce_sum(ops.square(ops.take_elements(x, [0, 1, 1], [2, 0, 2]))),
            (2, 3),
        ),
        ("reshape", lambda x: ops.reduce_sum(ops.square(ops.reshape(x, (3, 2)) @ x)), (2, 3)),
        ("rotate", lambda x: ops.reduce_sum(ops.rotate_pairs(x, Tensor(theta)) * x), (2, 4)),
        (
            "rotate_theta",
            lambda t: ops.reduce_sum(ops.square(ops.rotate_pairs(Tensor(ONES_2X4), t) + 1.0)),
            (2, 2),
        ),
        ("dustbin", lambda x: ops.reduce_sum(ops.square(ops.pad_dustbin(x, Tensor(0.7)))), (2, 3)),
        ("kernel_conv", kconv, (2, 3)),
    ]


class TestPrimitiveGradients:
    @pytest.mark.parametrize("seed", range(10))
    @pytest.mark.parametrize("case", _primitive_cases(), ids=lambda c: c[0])
    def test_finite_differences(self, case, seed):
        _, f, shape = case
        x = Tensor(np.random.default_rng(seed).normal(size=shape))
        assert finite_diff_check(f, x, seed=seed) < 1e-4


class TestParameterStore:
    def _store(self):
        store = ParameterStore()
        rng = np.random.default_rng(10)
        store.add("backbone.level0.W", rng.normal(size=(15, 1, 4)))
        store.add("matching.alpha", np.array(1.0))
        store.add("retrieval.gate.b", rng.normal(size=3))
        return store

    def test_container_round_trip_is_bit_identical(self, tmp_path):
        store = self._store()
        loaded = ParameterStore.load(store.save(tmp_path / "model.bin"))
        assert list(loaded) == list(store)
        for name in store:
            assert loaded[name].data.tobytes() == store[name].data.tobytes()
            assert loaded[name].shape == store[name].shape

    def test_container_starts_with_magic(self):
        assert self._store().to_bytes().startswith(MAGIC)

    def test_bad_magic(self):
        with pytest.raises(CheckpointError):
            ParameterStore.from_bytes(b"NOTMAGIC" + b"\x00" * 16)

    def test_truncated_container(self):
        blob = self._store().to_bytes()
        with pytest.raises(CheckpointError):
            ParameterStore.from_bytes(blob[:-5])

    def test_duplicate_name(self):
        store = self._store()
        with pytest.raises(ContractError):
            store.add("matching.alpha", np.array(0.0))

    def test_freeze_all_except(self):
        store = self._store()
        store.freeze_all_except(["retrieval."])
        assert store.trainable() == ["retrieval.gate.b"]
        assert not store["backbone.level0.W"].requires_grad


class TestOptimizer:
    def test_schedule_epoch_zero(self):
        assert step_decay(1e-4, 0) == pytest.approx(1e-4)

    def test_schedule_epoch_four(self):
        assert step_decay(1e-4, 4) == pytest.approx(1e-4 * 0.95)

    def test_schedule_holds_within_period(self):
        assert step_decay(1e-4, 3) == step_decay(1e-4, 0)

    def test_adam_descends_quadratic(self):
        store = ParameterStore()
        store.add("w", np.array([3.0, -2.0]))
        opt = Adam(store, lr=0.1)
        for _ in range(200):
            store.zero_grad()
            w = store["w"]
            with fresh_tape():
                backward(ops.reduce_sum(w * w))
            opt.step()
        assert np.all(np.abs(store["w"].data) < 0.1)

    def test_adam_skips_frozen(self):
        store = ParameterStore()
        store.add("a", np.array([1.0]))
        store.add("b", np.array([1.0]))
        store.freeze(["b"])
        with fresh_tape():
            backward(ops.reduce_sum(store["a"] * store["b"]))
        assert store["b"].grad is None
        Adam(store, lr=0.5).step()
        assert store["b"].data[0] == 1.0
        assert store["a"].data[0] != 1.0

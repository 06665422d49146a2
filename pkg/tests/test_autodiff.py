"""Autodiff engine: gradients against finite differences, error contracts, optimiser, checkpoints."""

import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eisderm.autodiff import (
    Adam,
    AdamState,
    BatchNorm1d,
    ContractError,
    DimensionError,
    Linear,
    NumericError,
    Tensor,
    adam_step,
    load_checkpoint,
    ops,
    save_checkpoint,
)
from eisderm.autodiff.gradcheck import check_gradients, numeric_grad, relative_error
from op_cases import CHECKED_INPUTS, GRAD_TOL, OP_CASES


@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_op_gradients_match_finite_differences(name, seed):
    op, build = OP_CASES[name]
    rng = np.random.default_rng(1000 * seed + len(name))
    arrays = build(rng)
    errors = check_gradients(op, arrays, rng, wrt=CHECKED_INPUTS.get(name))
    assert max(errors) < GRAD_TOL, f"{name}: relative errors {errors}"


@pytest.mark.parametrize("seed", range(5))
def test_linear_layer_gradients(seed):
    rng = np.random.default_rng(seed)
    layer = Linear(4, 3, rng)
    x = rng.standard_normal((5, 4))
    loss = ops.sum(ops.tanh(layer(Tensor(x))))
    loss.backward()

    def f(w):
        return float(np.tanh(x @ w + layer.bias.data).sum())

    assert relative_error(layer.weight.grad, numeric_grad(f, [layer.weight.data], 0)) < GRAD_TOL


def test_shared_node_gradients_accumulate():
    x = Tensor(np.array([1.5, -2.0]), requires_grad=True)
    y = x * x + x  # x used three times
    ops.sum(y).backward()
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def test_leaf_gradients_accumulate_across_backward_calls():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    ops.sum(x * 3.0).backward()
    ops.sum(x * 3.0).backward()
    np.testing.assert_allclose(x.grad, [6.0, 6.0])


def test_constant_inputs_receive_no_gradient():
    x = Tensor(np.ones(3), requires_grad=True)
    c = Tensor(np.full(3, 2.0))
    ops.sum(x * c).backward()
    assert c.grad is None


class TestErrors:
    def test_matmul_shape_mismatch(self):
        with pytest.raises(DimensionError):
            ops.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))

    def test_broadcast_mismatch(self):
        with pytest.raises(DimensionError):
            ops.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))

    @pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
    def test_non_finite_input_rejected(self, bad):
        with pytest.raises(NumericError):
            ops.sigmoid(Tensor(np.array([0.0, bad])))

    def test_backward_on_non_scalar(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ContractError):
            (x * 2.0).backward()

    def test_backward_without_graph(self):
        with pytest.raises(ContractError):
            Tensor(np.array(1.0)).backward()

    def test_conv_channel_mismatch(self):
        with pytest.raises(DimensionError):
            ops.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((3, 1, 3, 3))))

    def test_maxpool_indivisible(self):
        with pytest.raises(DimensionError):
            ops.maxpool2d(Tensor(np.ones((1, 1, 5, 4))))

    def test_sequence_length_out_of_range(self):
        with pytest.raises(DimensionError):
            ops.seq_max_pool(Tensor(np.ones((2, 3, 1))), [0, 3])

    def test_gru_projection_width(self):
        with pytest.raises(DimensionError):
            ops.gru_recurrence(Tensor(np.ones((1, 2, 7))), *[Tensor(np.eye(2))] * 3)


class TestKnownValues:
    def test_sigmoid_extremes_are_finite(self):
        out = ops.sigmoid(Tensor(np.array([-800.0, 0.0, 800.0]))).data
        np.testing.assert_allclose(out, [0.0, 0.5, 1.0])

    def test_bce_matches_closed_form(self):
        z = np.array([0.3, -1.2, 4.0])
        y = np.array([1.0, 0.0, 1.0])
        expected = np.mean(-(y * np.log(1 / (1 + np.exp(-z))) + (1 - y) * np.log(1 - 1 / (1 + np.exp(-z)))))
        assert ops.bce_with_logits(Tensor(z), Tensor(y)).item() == pytest.approx(expected, rel=1e-12)

    def test_conv_identity_kernel(self):
        x = np.random.default_rng(0).standard_normal((1, 1, 4, 4))
        w = np.zeros((1, 1, 3, 3))
        w[0, 0, 1, 1] = 1.0
        np.testing.assert_array_equal(ops.conv2d(Tensor(x), Tensor(w)).data, x)

    def test_conv_layouts_agree(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((2, 3, 5, 5))
        w = rng.standard_normal((4, 3, 3, 3))
        nchw = ops.conv2d(Tensor(x), Tensor(w)).data
        cnhw = ops.conv2d(Tensor(x.transpose(1, 0, 2, 3)), Tensor(w), layout="CNHW").data
        np.testing.assert_allclose(cnhw.transpose(1, 0, 2, 3), nchw, atol=1e-12)

    def test_maxpool_tie_goes_to_first_position(self):
        x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
        ops.sum(ops.maxpool2d(x)).backward()
        np.testing.assert_array_equal(x.grad[0, 0], [[1, 0], [0, 0]])

    def test_seq_max_pool_respects_lengths(self):
        h = np.array([[[1.0], [5.0]], [[2.0], [9.0]]])
        out = ops.seq_max_pool(Tensor(h), [1, 2]).data
        np.testing.assert_array_equal(out, [[1.0], [9.0]])


class TestBatchNorm:
    def test_training_output_is_standardised(self):
        rng = np.random.default_rng(0)
        # large spread so eps=1e-5 is negligible next to the batch variance
        x = 50.0 * rng.standard_normal((64, 4)) + 7.0
        bn = BatchNorm1d(4)
        out = bn(Tensor(x)).data
        np.testing.assert_allclose(out.mean(axis=0), 0.0, atol=1e-10)
        np.testing.assert_allclose(out.var(axis=0), 1.0, atol=1e-8)

    def test_running_statistics_update(self):
        x = np.array([[1.0, 2.0], [3.0, 6.0]])
        bn = BatchNorm1d(2)
        bn(Tensor(x))
        np.testing.assert_allclose(bn.running_mean, 0.1 * x.mean(axis=0))
        unbiased = x.var(axis=0, ddof=1)
        np.testing.assert_allclose(bn.running_var, 0.9 + 0.1 * unbiased)

    def test_eval_mode_uses_running_statistics(self):
        bn = BatchNorm1d(2)
        bn.running_mean[:] = [1.0, -1.0]
        bn.running_var[:] = [4.0, 9.0]
        bn.eval()
        out = bn(Tensor(np.array([[3.0, 2.0]]))).data
        np.testing.assert_allclose(out, [[2.0 / np.sqrt(4 + 1e-5), 3.0 / np.sqrt(9 + 1e-5)]])


class TestAdam:
    def test_first_step_moves_by_learning_rate(self):
        p = Tensor(np.array([1.0, -1.0]), requires_grad=True)
        p.grad = np.array([0.5, -2.0])
        state = adam_step([p], AdamState(lr=0.1))
        # bias-corrected first step is lr * sign(g) up to epsilon
        np.testing.assert_allclose(p.data, [0.9, -0.9], atol=1e-7)
        assert state.t == 1

    def test_matches_reference_update_over_steps(self):
        rng = np.random.default_rng(1)
        p = Tensor(rng.standard_normal(3), requires_grad=True)
        ref = p.data.copy()
        m = np.zeros(3)
        v = np.zeros(3)
        state = AdamState(lr=0.01)
        for t in range(1, 6):
            g = rng.standard_normal(3)
            p.grad = g.copy()
            adam_step([p], state)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            ref = ref - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        np.testing.assert_allclose(p.data, ref, rtol=1e-12)

    def test_missing_gradient_is_contract_error(self):
        with pytest.raises(ContractError):
            adam_step([Tensor(np.ones(2), requires_grad=True)], AdamState())

    def test_minimises_quadratic(self):
        p = Tensor(np.array([3.0, -2.0]), requires_grad=True)
        opt = Adam([p], lr=0.1)
        for _ in range(300):
            opt.zero_grad()
            ops.sum(p * p).backward()
            opt.step()
        assert np.abs(p.data).max() < 1e-2


class TestCheckpoint:
    def test_round_trip_is_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        state = {"a.weight": rng.standard_normal((3, 2)), "b": rng.standard_normal(4),
                 "scalar": np.array(2.5)}
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, state)
        loaded = load_checkpoint(path)
        assert set(loaded) == set(state)
        for k in state:
            np.testing.assert_array_equal(loaded[k], state[k])

    def test_header_layout(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, {"w": np.array([1.0, 2.0])})
        blob = path.read_bytes()
        assert blob[:4] == b"EDCK"
        assert struct.unpack_from("<II", blob, 4) == (1, 1)
        assert struct.unpack_from("<I", blob, 12) == (1,)
        assert blob[16:17] == b"w"
        assert struct.unpack_from("<IQ", blob, 17) == (1, 2)
        assert struct.unpack_from("<2d", blob, 29) == (1.0, 2.0)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOPE" + bytes(8))
        with pytest.raises(ValueError):
            load_checkpoint(path)

    def test_module_state_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        layer, bn = Linear(3, 2, rng), BatchNorm1d(2)
        bn.running_mean[:] = [0.5, 1.5]
        save_checkpoint(tmp_path / "l.ckpt", layer.state_dict())
        save_checkpoint(tmp_path / "bn.ckpt", bn.state_dict())
        other, bn2 = Linear(3, 2, np.random.default_rng(9)), BatchNorm1d(2)
        other.load_state_dict(load_checkpoint(tmp_path / "l.ckpt"))
        bn2.load_state_dict(load_checkpoint(tmp_path / "bn.ckpt"))
        np.testing.assert_array_equal(other.weight.data, layer.weight.data)
        np.testing.assert_array_equal(bn2.running_mean, [0.5, 1.5])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
def test_sigmoid_in_unit_interval_and_monotone(values):
    x = np.sort(np.array(values))
    s = ops.sigmoid(Tensor(x)).data
    assert ((s >= 0) & (s <= 1)).all()
    assert (np.diff(s) >= 0).all()


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 2 ** 31 - 1))
def test_reshape_transpose_preserve_gradient_mass(rows, cols, seed):
    x = Tensor(np.random.default_rng(seed).standard_normal((rows, cols)), requires_grad=True)
    ops.sum(ops.transpose(ops.reshape(x, (cols, rows)))).backward()
    np.testing.assert_array_equal(x.grad, np.ones((rows, cols)))

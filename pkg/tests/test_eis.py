"""EIS models: normalisation, GRU recurrence and pooling, heads, FC-NN, permuted inference."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eisderm.autodiff import ContractError, DimensionError, NumericError, Tensor, ops
from eisderm.autodiff.gradcheck import numeric_grad, relative_error
from eisderm.data import N_FEATURES, Lesion
from eisderm.eis import (
    EisHead,
    FcnnClassifier,
    GruCell,
    GruClassifier,
    eis_head,
    fcnn_predict_lesion,
    gru_encode,
    max_aggregate,
    normalize_features,
    permuted_inference,
    train_eis,
)
from eisderm.training import PAPER_EIS, TrainConfig


def _zero(module):
    for p in module.parameters():
        p.data[...] = 0.0


@pytest.fixture
def small_cell():
    return GruCell(5, 4, np.random.default_rng(7))


def _separable_lesions(n=40, seed=0):
    rng = np.random.default_rng(seed)
    lesions = []
    for i in range(n):
        y = i % 2
        eis = rng.normal(0.0, 1.0, (2, N_FEATURES))
        eis[:, :10] += 3.0 if y else -3.0
        lesions.append(Lesion(f"S{i:03d}", np.zeros((8, 8, 3)), eis, y, "melanoma" if y else "nevus", 0))
    return lesions


class TestNormalize:
    def test_two_point_feature(self):
        train = np.array([[1.0], [3.0]])
        out, mean, std = normalize_features(train, np.array([[3.0], [2.0]]))
        assert mean[0] == 2.0 and std[0] == 1.0
        np.testing.assert_array_equal(out[:, 0], [1.0, 0.0])

    def test_train_set_is_centred(self):
        train = np.random.default_rng(0).normal(5, 3, (50, 6))
        out, _, _ = normalize_features(train, train)
        np.testing.assert_allclose(out.mean(axis=0), 0.0, atol=1e-10)

    def test_constant_feature_uses_floor(self):
        train = np.array([[2.0, 1.0], [2.0, 3.0]])
        out, _, std = normalize_features(train, np.array([[2.0, 2.0], [2.5, 2.0]]))
        assert std[0] == 1e-8
        assert np.isfinite(out).all()
        assert out[0, 0] == 0.0


class TestGruEncode:
    def test_recurrence_by_hand(self):
        """Single step with 2-d hidden state against scalar arithmetic."""
        rng = np.random.default_rng(11)
        cell = GruCell(3, 2, rng)
        x = np.array([0.4, -1.1, 0.7])
        h0 = np.array([0.3, -0.2])  # non-zero previous state exercises the M_* terms

        def sig(v):
            return 1.0 / (1.0 + math.exp(-v))

        M = {k: getattr(cell, f"M_{k}").data for k in "zrc"}
        L = {k: getattr(cell, f"L_{k}").data for k in "zrc"}
        expect = []
        for k in range(2):
            z = sig(sum(M["z"][k, j] * h0[j] for j in range(2)) + sum(L["z"][k, j] * x[j] for j in range(3)))
            rs = [sig(sum(M["r"][i, j] * h0[j] for j in range(2)) + sum(L["r"][i, j] * x[j] for j in range(3)))
                  for i in range(2)]
            c = math.tanh(sum(M["c"][k, j] * rs[j] * h0[j] for j in range(2))
                          + sum(L["c"][k, j] * x[j] for j in range(3)))
            expect.append(z * c + (1 - z) * h0[k])
        got = cell.step(Tensor(h0[None]), Tensor(x[None])).data[0]
        np.testing.assert_allclose(got, expect, rtol=0, atol=1e-12)

    def test_zero_weights_give_zero_states(self, small_cell):
        _zero(small_cell)
        seq = np.random.default_rng(0).standard_normal((4, 5))
        for mode in ("last", "mean", "max"):
            enc = gru_encode(seq, small_cell, mode)
            np.testing.assert_array_equal(enc.H, 0.0)
            np.testing.assert_array_equal(enc.o.data, 0.0)

    def test_single_measurement_pools_identically(self, small_cell):
        seq = np.random.default_rng(1).standard_normal((1, 5))
        outs = [gru_encode(seq, small_cell, m).o.data for m in ("last", "mean", "max")]
        assert outs[0].tobytes() == outs[1].tobytes() == outs[2].tobytes()

    def test_max_matches_stepwise_reimplementation(self, small_cell):
        seq = np.random.default_rng(2).standard_normal((4, 5))
        h = np.zeros(4)
        states = []
        for x in seq:
            z = 1 / (1 + np.exp(-(small_cell.M_z.data @ h + small_cell.L_z.data @ x)))
            r = 1 / (1 + np.exp(-(small_cell.M_r.data @ h + small_cell.L_r.data @ x)))
            c = np.tanh(small_cell.M_c.data @ (r * h) + small_cell.L_c.data @ x)
            h = z * c + (1 - z) * h
            states.append(h)
        enc = gru_encode(seq, small_cell, "max")
        np.testing.assert_allclose(enc.H.T, states, atol=1e-12)
        np.testing.assert_allclose(enc.o.data, np.max(states, axis=0), atol=1e-12)

    def test_fused_recurrence_matches_composed_ops(self, small_cell):
        x = Tensor(np.random.default_rng(3).standard_normal((3, 4, 5)))
        np.testing.assert_allclose(small_cell.states(x).data, small_cell.states_stepwise(x).data,
                                   atol=1e-13)

    def test_empty_sequence_rejected(self, small_cell):
        with pytest.raises(ContractError):
            gru_encode(np.zeros((0, 5)), small_cell)

    def test_wrong_feature_count(self, small_cell):
        with pytest.raises(DimensionError):
            small_cell.states(Tensor(np.zeros((1, 2, 6))))


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 8), st.integers(0, 10_000))
def test_max_pool_dominates_and_attains(n, seed):
    cell = GruCell(5, 4, np.random.default_rng(seed))
    seq = np.random.default_rng(seed + 1).standard_normal((n, 5))
    enc = gru_encode(seq, cell, "max")
    assert (enc.o.data[:, None] >= enc.H).all()
    assert (enc.H == enc.o.data[:, None]).any(axis=1).all()


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 7), st.integers(0, 10_000))
def test_max_pool_over_prefix_never_exceeds_full(n, seed):
    cell = GruCell(5, 3, np.random.default_rng(seed))
    seq = np.random.default_rng(seed + 1).standard_normal((n + 1, 5))
    full = gru_encode(seq, cell, "max")
    prefix = gru_encode(seq[:n], cell, "max")
    # appending leaves prefix states unchanged (up to BLAS rounding)
    np.testing.assert_allclose(full.H[:, :n], prefix.H, rtol=0, atol=1e-14)
    assert (full.o.data >= full.H[:, :n].max(axis=1)).all()


class TestHead:
    def test_zero_head_gives_half(self):
        head = EisHead(6, 4, np.random.default_rng(0))
        _zero(head)
        head.eval()
        logit = eis_head(Tensor(np.random.default_rng(1).standard_normal(6)), head)
        assert logit.item() == 0.0
        assert ops.sigmoid(logit).item() == 0.5

    def test_shape_mismatch(self):
        head = EisHead(6, 4, np.random.default_rng(0))
        with pytest.raises(DimensionError):
            head(Tensor(np.zeros((2, 5))))

    def test_inference_is_deterministic(self):
        head = EisHead(6, 4, np.random.default_rng(0)).eval()
        o = Tensor(np.random.default_rng(2).standard_normal((3, 6)))
        assert head(o).data.tobytes() == head(o).data.tobytes()

    def test_output_weight_gradient(self):
        rng = np.random.default_rng(4)
        head = EisHead(6, 4, rng)
        o = rng.standard_normal((5, 6))
        y = np.array([1.0, 0, 1, 0, 1])

        def loss_for(w):
            head.out.weight.data[...] = w
            return ops.bce_with_logits(head(Tensor(o)), Tensor(y)).item()

        w0 = head.out.weight.data.copy()
        num = numeric_grad(loss_for, [w0], 0)
        head.out.weight.data[...] = w0
        head.zero_grad()
        ops.bce_with_logits(head(Tensor(o)), Tensor(y)).backward()
        assert relative_error(head.out.weight.grad, num) < 1e-4


class TestFcnn:
    def test_max_aggregation(self):
        assert max_aggregate([0.2, 0.9, 0.4]) == 0.9

    def test_single_measurement_and_invariances(self):
        model = FcnnClassifier(np.random.default_rng(0))
        model.eval()
        rows = np.random.default_rng(1).standard_normal((3, N_FEATURES))
        single = fcnn_predict_lesion(rows[:1], model)
        assert single.p == pytest.approx(model.measurement_proba(rows[:1])[0], abs=0)
        base = fcnn_predict_lesion(rows, model).p
        assert fcnn_predict_lesion(rows[::-1], model).p == base
        assert fcnn_predict_lesion(np.vstack([rows, rows[1:2]]), model).p == base


class TestPermutedInference:
    @pytest.fixture
    def model(self):
        return GruClassifier(np.random.default_rng(0), mode="max", n_hidden=8, head_hidden=4).eval()

    def test_single_measurement_equals_single_pass(self, model):
        seq = np.random.default_rng(0).standard_normal((1, N_FEATURES))
        one = model.predict_proba([seq])[0]
        assert permuted_inference(seq, model, 5, np.random.default_rng(1)) == pytest.approx(one, abs=1e-15)

    def test_order_free_gru(self, model):
        # zero recurrent matrices alone still leak h_{j-1} through (1 - z); a
        # saturated update gate (z == 1 exactly) removes it, so h_j = c(x_j)
        for m in (model.cell.M_z, model.cell.M_r, model.cell.M_c):
            m.data[...] = 0.0
        model.cell.L_z.data[...] = 0.0
        model.cell.L_z.data[:, 0] = 50.0
        model.scaler.mean[0] = -1.0  # feature 0 normalises to a constant 1
        seq = np.random.default_rng(0).standard_normal((4, N_FEATURES))
        seq[:, 0] = 0.0
        single = model.predict_proba([seq])[0]
        for p in (seq[::-1], seq[[2, 0, 3, 1]]):
            assert model.predict_proba([p])[0] == single
        assert permuted_inference(seq, model, 5, np.random.default_rng(3)) == pytest.approx(single, abs=1e-15)

    def test_replays_external_permutations(self, model):
        seq = np.random.default_rng(0).standard_normal((4, N_FEATURES))
        ref_rng = np.random.default_rng(42)
        perms = [ref_rng.permutation(4) for _ in range(5)]
        brute = np.mean([model.predict_proba([seq[p]])[0] for p in perms])
        got = permuted_inference(seq, model, 5, np.random.default_rng(42))
        assert got == pytest.approx(brute, abs=1e-14)

    def test_classifier_predict_matches_per_lesion(self, model):
        lesions = _separable_lesions(6)
        batch = model.predict(lesions, np.random.default_rng(5), n_perm=3)
        rng = np.random.default_rng(5)
        perms = [[rng.permutation(2) for _ in range(3)] for _ in lesions]
        each = [np.mean([model.predict_proba([l.eis[p]])[0] for p in ps]) for l, ps in zip(lesions, perms)]
        np.testing.assert_allclose(batch, each, atol=1e-14)


class TestTraining:
    def test_clinical_scale_preset(self):
        assert (PAPER_EIS.epochs, PAPER_EIS.batch_size, PAPER_EIS.lr) == (200, 10, 2e-5)

    def test_gru_learns_separable_set(self):
        lesions = _separable_lesions()
        rng = np.random.default_rng(0)
        model = GruClassifier(rng, mode="max", n_hidden=16, head_hidden=8)
        train_eis(model, lesions, TrainConfig(50, 10, 1e-3), rng)
        p = model.predict(lesions, np.random.default_rng(1), n_perm=1)
        acc = np.mean((p > 0.5) == np.array([l.label for l in lesions]))
        assert acc > 0.95

    def test_fcnn_learns_separable_set(self):
        lesions = _separable_lesions()
        rng = np.random.default_rng(0)
        model = FcnnClassifier(rng, n_hidden=16)
        train_eis(model, lesions, TrainConfig(20, 10, 1e-3), rng)
        acc = np.mean((model.predict(lesions) > 0.5) == np.array([l.label for l in lesions]))
        assert acc > 0.95

    def test_same_seed_same_parameters(self):
        lesions = _separable_lesions(12)
        finals = []
        for _ in range(2):
            rng = np.random.default_rng(9)
            model = GruClassifier(rng, n_hidden=8, head_hidden=4)
            train_eis(model, lesions, TrainConfig(2, 4, 1e-3), rng)
            finals.append(model.state_dict())
        for k in finals[0]:
            assert finals[0][k].tobytes() == finals[1][k].tobytes()

    def test_divergence_raises_numeric_error(self):
        class Diverging(GruClassifier):
            def loss(self, batch, rng):
                return super().loss(batch, rng) * float("inf")

        lesions = _separable_lesions(8)
        rng = np.random.default_rng(0)
        model = Diverging(rng, n_hidden=4, head_hidden=2)
        with pytest.raises(NumericError):
            train_eis(model, lesions, TrainConfig(1, 4, 1e-3), rng)

    def test_scaler_fitted_on_training_lesions_only(self):
        lesions = _separable_lesions(10)
        rng = np.random.default_rng(0)
        model = GruClassifier(rng, n_hidden=4, head_hidden=2)
        train_eis(model, lesions[:6], TrainConfig(1, 3, 1e-3), rng)
        np.testing.assert_allclose(model.scaler.mean, np.vstack([l.eis for l in lesions[:6]]).mean(axis=0))

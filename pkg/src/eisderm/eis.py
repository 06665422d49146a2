"""EIS classifiers: per-measurement FC-NN with max aggregation, and a GRU
encoder whose hidden states are pooled over the measurement sequence.

The recurrence is

    z_j = sigmoid(M_z h_{j-1} + L_z x_j)
    r_j = sigmoid(M_r h_{j-1} + L_r x_j)
    c_j = tanh(M_c (r_j * h_{j-1}) + L_c x_j)
    h_j = z_j * c_j + (1 - z_j) * h_{j-1}

with ``h_0 = 0``. Note that ``z`` weights the candidate, the mirror image of
the more common convention.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import ContractError, DenseBlock, DimensionError, Linear, Module, Tensor, ops
from .data import N_FEATURES, Lesion
from .training import DESK_EIS, TrainConfig, fit

POOLING_MODES = ("last", "mean", "max")
MAX_SEQUENCE = 16
STD_FLOOR = 1e-8


# -- normalisation -------------------------------------------------------------

class FeatureScaler(Module):
    """Per-feature standardisation with statistics from the training fold only."""

    def __init__(self, n_features: int = N_FEATURES):
        self.mean = np.zeros(n_features)
        self.std = np.ones(n_features)

    def fit(self, rows: np.ndarray) -> "FeatureScaler":
        rows = np.asarray(rows, dtype=np.float64)
        if rows.ndim != 2 or len(rows) == 0:
            raise ContractError("scaler needs a non-empty (n, features) training block")
        self.mean[...] = rows.mean(axis=0)
        self.std[...] = np.maximum(rows.std(axis=0), STD_FLOOR)
        return self

    def __call__(self, rows: np.ndarray) -> np.ndarray:
        return (np.asarray(rows) - self.mean) / self.std


def normalize_features(train_set: np.ndarray, apply_to: np.ndarray):
    """Standardise ``apply_to`` with mean/std of ``train_set``.

    Returns ``(normalised, mean, std)``; std is floored at 1e-8.
    """
    scaler = FeatureScaler(np.asarray(train_set).shape[1]).fit(train_set)
    return scaler(apply_to), scaler.mean.copy(), scaler.std.copy()


# -- GRU ---------------------------------------------------------------------------

class GruCell(Module):
    """Weights stored in the (out, in) orientation of the recurrence above."""

    def __init__(self, n_in: int, n_hidden: int, rng: np.random.Generator):
        bound = 1.0 / np.sqrt(n_hidden)

        def mat(rows, cols):
            return Tensor(rng.uniform(-bound, bound, (rows, cols)), requires_grad=True)

        self.n_in, self.n_hidden = n_in, n_hidden
        self.M_z, self.M_r, self.M_c = (mat(n_hidden, n_hidden) for _ in range(3))
        self.L_z, self.L_r, self.L_c = (mat(n_hidden, n_in) for _ in range(3))

    def step(self, h: Tensor, x: Tensor) -> Tensor:
        """One update for a batch: ``h`` is (B, d_h), ``x`` is (B, d_in)."""
        z = ops.sigmoid(h @ self.M_z.T + x @ self.L_z.T)
        r = ops.sigmoid(h @ self.M_r.T + x @ self.L_r.T)
        c = ops.tanh((r * h) @ self.M_c.T + x @ self.L_c.T)
        return z * c + (1.0 - z) * h

    def states(self, x: Tensor) -> Tensor:
        """All hidden states for a padded batch ``x`` of shape (B, T, d_in) -> (B, T, d_h)."""
        if x.ndim != 3 or x.shape[2] != self.n_in:
            raise DimensionError(f"GRU expects (B, T, {self.n_in}) input, got {x.shape}")
        b, t, _ = x.shape
        # input projections for all steps at once
        l_all = ops.concat([self.L_z, self.L_r, self.L_c], axis=0)
        proj = (x.reshape(b * t, self.n_in) @ l_all.T).reshape(b, t, 3 * self.n_hidden)
        return ops.gru_recurrence(proj, self.M_z, self.M_r, self.M_c)

    def states_stepwise(self, x: Tensor) -> Tensor:
        """Same as ``states`` but chained from elementwise ops via ``step``."""
        b, t, _ = x.shape
        h = Tensor(np.zeros((b, self.n_hidden)))
        hs = []
        for j in range(t):
            h = self.step(h, x[:, j, :])
            hs.append(h)
        return ops.stack(hs, axis=1)


def pool_states(states: Tensor, lengths, mode: str) -> Tensor:
    if mode == "max":
        return ops.seq_max_pool(states, lengths)
    if mode == "mean":
        return ops.seq_mean_pool(states, lengths)
    if mode == "last":
        return ops.seq_last(states, lengths)
    raise ValueError(f"unknown pooling mode {mode!r}; expected one of {POOLING_MODES}")


@dataclass
class SequenceEncoding:
    H: np.ndarray  # (d_h, N): column j is h_j
    o: Tensor  # (d_h,)
    mode: str


def pad_sequences(seqs: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([len(s) for s in seqs])
    if (lengths < 1).any():
        raise ContractError("every EIS sequence needs at least one measurement")
    if lengths.max() > MAX_SEQUENCE:
        raise ContractError(f"sequences longer than {MAX_SEQUENCE} are not supported")
    out = np.zeros((len(seqs), lengths.max(), seqs[0].shape[1]))
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
    return out, lengths


def gru_encode(seq: np.ndarray, cell: GruCell, mode: str = "max") -> SequenceEncoding:
    """Run one measurement sequence (N, d_in) through ``cell`` and pool."""
    seq = np.asarray(seq, dtype=np.float64)
    if seq.ndim != 2 or len(seq) == 0:
        raise ContractError("gru_encode needs a non-empty (N, d_in) sequence")
    states = cell.states(Tensor(seq[None]))
    o = pool_states(states, [len(seq)], mode)
    return SequenceEncoding(H=states.data[0].T.copy(), o=o[0], mode=mode)


class EisHead(Module):
    """Hidden FC layer with batchnorm and ReLU, then a scalar output layer."""

    def __init__(self, n_in: int, n_hidden: int, rng: np.random.Generator):
        self.hidden = DenseBlock(n_in, n_hidden, rng)
        self.out = Linear(n_hidden, 1, rng)

    def __call__(self, o: Tensor) -> Tensor:
        if o.ndim != 2 or o.shape[1] != self.hidden.fc.weight.shape[0]:
            raise DimensionError(
                f"head expects (B, {self.hidden.fc.weight.shape[0]}) features, got {o.shape}")
        return self.out(self.hidden(o)).reshape(o.shape[0])


def eis_head(o: Tensor, head: EisHead) -> Tensor:
    """Logits for a batch of pooled encodings (or a single (d_h,) vector)."""
    if o.ndim == 1:
        return head(o.reshape(1, o.shape[0]))[0]
    return head(o)


class GruClassifier(Module):
    def __init__(self, rng: np.random.Generator, mode: str = "max", n_hidden: int = 64,
                 head_hidden: int = 32, n_in: int = N_FEATURES):
        if mode not in POOLING_MODES:
            raise ValueError(f"unknown pooling mode {mode!r}")
        self.mode = mode
        self.scaler = FeatureScaler(n_in)
        self.cell = GruCell(n_in, n_hidden, rng)
        self.head = EisHead(n_hidden, head_hidden, rng)

    def trainable_parameters(self) -> list[Tensor]:
        return self.parameters()

    def encode(self, seqs: Sequence[np.ndarray]) -> Tensor:
        x, lengths = pad_sequences([self.scaler(s) for s in seqs])
        return pool_states(self.cell.states(Tensor(x)), lengths, self.mode)

    def logits(self, seqs: Sequence[np.ndarray]) -> Tensor:
        return self.head(self.encode(seqs))

    def loss(self, batch: Sequence[Lesion], rng: np.random.Generator) -> Tensor:
        seqs = [l.eis[rng.permutation(len(l.eis))] for l in batch]
        y = np.array([l.label for l in batch], dtype=np.float64)
        return ops.bce_with_logits(self.logits(seqs), y)

    def predict_proba(self, seqs: Sequence[np.ndarray]) -> np.ndarray:
        self.eval()
        return ops.sigmoid(self.logits(seqs)).data.copy()

    def predict(self, lesions: Sequence[Lesion], rng: np.random.Generator, n_perm: int = 5,
                batch_size: int = 64) -> np.ndarray:
        """Mean probability over ``n_perm`` random orderings per lesion."""
        if n_perm < 1:
            raise ContractError("n_perm must be >= 1")
        perms = [[rng.permutation(len(l.eis)) for _ in range(n_perm)] for l in lesions]
        out = np.zeros(len(lesions))
        for start in range(0, len(lesions), batch_size):
            chunk = range(start, min(start + batch_size, len(lesions)))
            for p in range(n_perm):
                seqs = [lesions[i].eis[perms[i][p]] for i in chunk]
                out[start:start + len(chunk)] += self.predict_proba(seqs)
        return out / n_perm


def permuted_inference(seq: np.ndarray, model: GruClassifier, n_perm: int = 5,
                       rng: np.random.Generator | None = None) -> float:
    """Average probability over ``n_perm`` random permutations of one sequence.

    Draws one ``rng.permutation(N)`` per repetition, in order.
    """
    if n_perm < 1:
        raise ContractError("n_perm must be >= 1")
    rng = rng if rng is not None else np.random.default_rng()
    seq = np.asarray(seq)
    seqs = [seq[rng.permutation(len(seq))] for _ in range(n_perm)]
    return float(model.predict_proba(seqs).mean())


# -- FC-NN baseline -------------------------------------------------------------

class FcnnClassifier(Module):
    """One hidden layer (width 64, batchnorm, ReLU) applied per measurement."""

    def __init__(self, rng: np.random.Generator, n_hidden: int = 64, n_in: int = N_FEATURES):
        self.scaler = FeatureScaler(n_in)
        self.hidden = DenseBlock(n_in, n_hidden, rng)
        self.out = Linear(n_hidden, 1, rng)

    def trainable_parameters(self) -> list[Tensor]:
        return self.parameters()

    def logits(self, rows: np.ndarray) -> Tensor:
        x = Tensor(self.scaler(rows))
        return self.out(self.hidden(x)).reshape(len(rows))

    def loss(self, batch, rng) -> Tensor:
        rows = np.vstack([r for r, _ in batch])
        y = np.array([lab for _, lab in batch], dtype=np.float64)
        return ops.bce_with_logits(self.logits(rows), y)

    def measurement_proba(self, rows: np.ndarray) -> np.ndarray:
        self.eval()
        return ops.sigmoid(self.logits(np.atleast_2d(rows))).data.copy()

    def predict(self, lesions: Sequence[Lesion], rng=None, **_) -> np.ndarray:
        return np.array([fcnn_predict_lesion(l.eis, self).p for l in lesions])


@dataclass
class LesionPrediction:
    lesion_id: str
    p: float
    per_measurement: np.ndarray | None = None
    p_head_cnn: float | None = None
    p_head_eis: float | None = None


def max_aggregate(per_measurement) -> float:
    """Lesion probability as the maximum over its measurements."""
    per_measurement = np.asarray(per_measurement, dtype=np.float64)
    if per_measurement.size == 0:
        raise ContractError("need at least one measurement probability")
    return float(per_measurement.max())


def fcnn_predict_lesion(measurements: np.ndarray, model: FcnnClassifier,
                        lesion_id: str = "") -> LesionPrediction:
    probs = model.measurement_proba(measurements)
    return LesionPrediction(lesion_id, max_aggregate(probs), per_measurement=probs)


# -- training ----------------------------------------------------------------------

def train_eis(model: GruClassifier | FcnnClassifier, lesions: Sequence[Lesion],
              config: TrainConfig = DESK_EIS, rng: np.random.Generator | None = None) -> list[float]:
    """Fit the scaler on the training lesions, then train with Adam.

    GRU models see a fresh random ordering of each lesion's measurements every
    time it is drawn; the FC-NN trains on individual measurements labelled
    with their lesion's diagnosis.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    model.scaler.fit(np.vstack([l.eis for l in lesions]))
    if isinstance(model, FcnnClassifier):
        items = [(row, l.label) for l in lesions for row in l.eis]
    else:
        items = list(lesions)
    return fit(model, items, config, rng)

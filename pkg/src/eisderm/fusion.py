"""EIS + dermoscopy combination strategies.

``ensemble``         max of two independently trained models' probabilities
``linear``           one linear layer on the concatenated features
``fc``               hidden FC layer (batchnorm, ReLU) on the concatenation
``cross_attention``  each modality's features are gated by a sigmoid of a
                     linear map of the other's; one output head per modality,
                     prediction = max of the two head probabilities
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import ContractError, DenseBlock, DimensionError, Linear, Module, Tensor, ops
from .data import N_FEATURES, Lesion
from .derm import AugmentConfig, CnnBackbone, CropPlan, augment, crop, make_crop_plan, to_input
from .eis import FeatureScaler, GruCell, LesionPrediction, pad_sequences, pool_states
from .training import DESK_JOINT, TrainConfig, fit

FUSION_MODES = ("ensemble", "linear", "fc", "cross_attention")


@dataclass(frozen=True)
class FusionConfig:
    mode: str = "cross_attention"
    d_f: int = 32
    d_h: int = 64
    fusion_hidden: int = 64

    def __post_init__(self):
        if self.mode not in FUSION_MODES:
            raise ValueError(f"unknown fusion mode {self.mode!r}; expected one of {FUSION_MODES}")


def ensemble_max(p_eis, p_cnn):
    """Elementwise maximum of two probability arrays (or scalars)."""
    a = np.asarray(p_eis, dtype=np.float64)
    b = np.asarray(p_cnn, dtype=np.float64)
    if not (((a >= 0) & (a <= 1)).all() and ((b >= 0) & (b <= 1)).all()):  # also rejects NaN
        raise ContractError("ensemble inputs must be probabilities in [0, 1]")
    out = np.maximum(a, b)
    return float(out) if out.ndim == 0 else out


def _as_batch(f) -> tuple[Tensor, bool]:
    f = f if isinstance(f, Tensor) else Tensor(f)
    if f.ndim == 1:
        return f.reshape(1, f.shape[0]), True
    return f, False


def _check_dims(f_cnn: Tensor, f_eis: Tensor, d_f: int, d_h: int) -> None:
    if f_cnn.shape[-1] != d_f or f_eis.shape[-1] != d_h or f_cnn.shape[0] != f_eis.shape[0]:
        raise DimensionError(
            f"fusion expects CNN features (B, {d_f}) and EIS features (B, {d_h}); "
            f"got {f_cnn.shape} and {f_eis.shape}")


class LinearFusion(Module):
    def __init__(self, d_f: int, d_h: int, rng: np.random.Generator):
        self.d_f, self.d_h = d_f, d_h
        self.out = Linear(d_f + d_h, 1, rng)

    def __call__(self, f_cnn, f_eis) -> list[Tensor]:
        return [fuse_linear(f_cnn, f_eis, self)]


class FcFusion(Module):
    def __init__(self, d_f: int, d_h: int, hidden: int, rng: np.random.Generator):
        self.d_f, self.d_h = d_f, d_h
        self.hidden = DenseBlock(d_f + d_h, hidden, rng)
        self.out = Linear(hidden, 1, rng)

    def __call__(self, f_cnn, f_eis) -> list[Tensor]:
        return [fuse_fc(f_cnn, f_eis, self)]


class CrossAttentionBlock(Module):
    """``gate_cnn`` maps EIS features to CNN gates, ``gate_eis`` the reverse."""

    def __init__(self, d_f: int, d_h: int, rng: np.random.Generator):
        self.d_f, self.d_h = d_f, d_h
        self.gate_cnn = Linear(d_h, d_f, rng)
        self.gate_eis = Linear(d_f, d_h, rng)
        self.head_cnn = Linear(d_f, 1, rng)
        self.head_eis = Linear(d_h, 1, rng)

    def gates(self, f_cnn: Tensor, f_eis: Tensor) -> tuple[Tensor, Tensor]:
        return ops.sigmoid(self.gate_cnn(f_eis)), ops.sigmoid(self.gate_eis(f_cnn))

    def __call__(self, f_cnn, f_eis) -> list[Tensor]:
        return list(cross_attention(f_cnn, f_eis, self))


def fuse_linear(f_cnn, f_eis, layer: LinearFusion) -> Tensor:
    """``w . concat(f_cnn, f_eis) + b``; shape (B,) or scalar for 1-d inputs."""
    fc, single = _as_batch(f_cnn)
    fe, _ = _as_batch(f_eis)
    _check_dims(fc, fe, layer.d_f, layer.d_h)
    logit = layer.out(ops.concat([fc, fe], axis=1)).reshape(fc.shape[0])
    return logit[0] if single else logit


def fuse_fc(f_cnn, f_eis, block: FcFusion) -> Tensor:
    fc, single = _as_batch(f_cnn)
    fe, _ = _as_batch(f_eis)
    _check_dims(fc, fe, block.d_f, block.d_h)
    logit = block.out(block.hidden(ops.concat([fc, fe], axis=1))).reshape(fc.shape[0])
    return logit[0] if single else logit


def cross_attention(f_cnn, f_eis, block: CrossAttentionBlock) -> tuple[Tensor, Tensor]:
    """Symmetric sigmoid gating; both gates read the un-gated features.

    Returns ``(logit_cnn_path, logit_eis_path)``.
    """
    fc, single = _as_batch(f_cnn)
    fe, _ = _as_batch(f_eis)
    _check_dims(fc, fe, block.d_f, block.d_h)
    g_cnn, g_eis = block.gates(fc, fe)
    l_cnn = block.head_cnn(fc * g_cnn).reshape(fc.shape[0])
    l_eis = block.head_eis(fe * g_eis).reshape(fe.shape[0])
    if single:
        return l_cnn[0], l_eis[0]
    return l_cnn, l_eis


def combine_heads(head_probs: Sequence[np.ndarray]) -> np.ndarray:
    """Final probability from one or more head probabilities (max rule)."""
    out = np.asarray(head_probs[0], dtype=np.float64)
    for p in head_probs[1:]:
        out = np.maximum(out, p)
    return out


class JointModel(Module):
    """GRU (state-max-pooling) + CNN backbone + a fusion block, trained end to end."""

    def __init__(self, rng: np.random.Generator, config: FusionConfig = FusionConfig(),
                 crop_size: int = 32, channels: Sequence[int] = (8, 16, 32),
                 augment_config: AugmentConfig = AugmentConfig(), pooling: str = "max"):
        if config.mode == "ensemble":
            raise ValueError("ensembles combine separately trained models; see ensemble_max")
        if channels[-1] != config.d_f:
            raise DimensionError(f"backbone width {channels[-1]} != d_f {config.d_f}")
        self.config = config
        self.pooling = pooling
        self.scaler = FeatureScaler(N_FEATURES)
        self.cell = GruCell(N_FEATURES, config.d_h, rng)
        self.backbone = CnnBackbone(rng, channels)
        if config.mode == "linear":
            self.fusion = LinearFusion(config.d_f, config.d_h, rng)
        elif config.mode == "fc":
            self.fusion = FcFusion(config.d_f, config.d_h, config.fusion_hidden, rng)
        else:
            self.fusion = CrossAttentionBlock(config.d_f, config.d_h, rng)
        self.crop_size = crop_size
        self.augment_config = augment_config
        self.frozen: tuple[str, ...] = ()

    @property
    def n_heads(self) -> int:
        return 2 if self.config.mode == "cross_attention" else 1

    def freeze(self, *parts: str) -> None:
        """Exclude ``"eis"`` and/or ``"cnn"`` encoder weights from training."""
        unknown = set(parts) - {"eis", "cnn"}
        if unknown:
            raise ValueError(f"unknown parts {sorted(unknown)}")
        self.frozen = tuple(parts)

    def trainable_parameters(self) -> list[Tensor]:
        params = list(self.fusion.parameters())
        if "eis" not in self.frozen:
            params = self.cell.parameters() + params
        if "cnn" not in self.frozen:
            params = self.backbone.parameters() + params
        return params

    def param_groups(self, config: TrainConfig) -> list[tuple[list[Tensor], float]]:
        """``(params, lr)`` pairs: the GRU encoder may step at ``config.eis_lr``."""
        eis = self.cell.parameters() if "eis" not in self.frozen else []
        ids = {id(p) for p in eis}
        rest = [p for p in self.trainable_parameters() if id(p) not in ids]
        eis_lr = config.lr if config.eis_lr is None else config.eis_lr
        return [(eis, eis_lr), (rest, config.lr)]

    def features(self, crops: Sequence[np.ndarray], seqs: Sequence[np.ndarray]) -> tuple[Tensor, Tensor]:
        f_cnn = self.backbone(Tensor(to_input(crops)))
        x, lengths = pad_sequences([self.scaler(s) for s in seqs])
        f_eis = pool_states(self.cell.states(Tensor(x)), lengths, self.pooling)
        return f_cnn, f_eis

    def head_logits(self, crops, seqs) -> list[Tensor]:
        f_cnn, f_eis = self.features(crops, seqs)
        return self.fusion(f_cnn, f_eis)

    def loss(self, batch: Sequence[Lesion], rng: np.random.Generator) -> Tensor:
        s = self.crop_size
        crops, seqs = [], []
        for l in batch:
            h, w = l.image.shape[:2]
            top = int(rng.integers(0, h - s + 1))
            left = int(rng.integers(0, w - s + 1))
            crops.append(augment(crop(l.image, top, left, (s, s)), rng, self.augment_config))
            seqs.append(l.eis[rng.permutation(len(l.eis))])
        y = np.array([l.label for l in batch], dtype=np.float64)
        heads = self.head_logits(crops, seqs)
        # dual-head models: unweighted sum of per-head losses
        total = ops.bce_with_logits(heads[0], y)
        for logit in heads[1:]:
            total = total + ops.bce_with_logits(logit, y)
        return total

    def head_proba(self, crops, seqs) -> list[np.ndarray]:
        self.eval()
        return [ops.sigmoid(l).data.copy() for l in self.head_logits(crops, seqs)]

    def predict_detailed(self, lesions: Sequence[Lesion], rng: np.random.Generator,
                         plan: CropPlan | None = None, n_crops: int = 9,
                         chunk: int = 16) -> tuple[np.ndarray, list[np.ndarray]]:
        """Multi-crop inference with a fresh EIS permutation per crop.

        Permutations are drawn lesion by lesion, crop by crop, so predicting a
        set equals predicting each lesion alone with the same stream.
        Returns the final probabilities and the per-head crop-averaged ones.
        """
        plans = [plan or make_crop_plan(l.image.shape[:2], self.crop_size, n_crops) for l in lesions]
        perms = [[rng.permutation(len(l.eis)) for _ in p.offsets] for l, p in zip(lesions, plans)]
        final = np.empty(len(lesions))
        heads = [np.empty(len(lesions)) for _ in range(self.n_heads)]
        for start in range(0, len(lesions), chunk):
            idx = range(start, min(start + chunk, len(lesions)))
            crops, seqs, owner = [], [], []
            for i in idx:
                l, p = lesions[i], plans[i]
                for k, (t, left) in enumerate(p.offsets):
                    crops.append(crop(l.image, t, left, p.crop))
                    seqs.append(l.eis[perms[i][k]])
                    owner.append(i)
            probs = self.head_proba(crops, seqs)
            per_crop = combine_heads(probs)
            owner = np.array(owner)
            for i in idx:
                sel = owner == i
                final[i] = per_crop[sel].mean()
                for hp, acc in zip(probs, heads):
                    acc[i] = hp[sel].mean()
        return final, heads

    def predict(self, lesions: Sequence[Lesion], rng: np.random.Generator, **kw) -> np.ndarray:
        return self.predict_detailed(lesions, rng, **kw)[0]


def joint_forward(lesion: Lesion, model: JointModel, rng: np.random.Generator,
                  plan: CropPlan | None = None, n_crops: int = 9) -> LesionPrediction:
    """Per-lesion multi-crop prediction; see ``JointModel.predict_detailed``."""
    final, heads = model.predict_detailed([lesion], rng, plan=plan, n_crops=n_crops)
    pred = LesionPrediction(lesion.lesion_id, float(final[0]))
    if len(heads) == 2:
        pred.p_head_cnn, pred.p_head_eis = float(heads[0][0]), float(heads[1][0])
    return pred


def train_joint(model: JointModel, lesions: Sequence[Lesion], config: TrainConfig = DESK_JOINT,
                rng: np.random.Generator | None = None) -> list[float]:
    """End-to-end training: one random crop and one random EIS ordering per lesion per step."""
    rng = rng if rng is not None else np.random.default_rng(0)
    model.scaler.fit(np.vstack([l.eis for l in lesions]))
    return fit(model, list(lesions), config, rng, groups=model.param_groups(config))

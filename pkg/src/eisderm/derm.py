"""Dermoscopy preprocessing, a small CNN backbone and multi-crop inference."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .autodiff import ContractError, Conv2d, Linear, Module, Tensor, ops
from .data import Lesion
from .training import DESK_CNN, TrainConfig, fit

# fixed input scaling; no statistics are fitted on the images
PIXEL_CENTER = 0.5
PIXEL_SCALE = 4.0


@dataclass(frozen=True)
class CropPreset:
    image_hw: tuple[int, int]
    crop: int
    n_crops: int


DESK_CROPS = CropPreset(image_hw=(64, 64), crop=32, n_crops=9)
# clinical image size with the crop size and count used for inference there
PAPER_CROPS = CropPreset(image_hw=(450, 600), crop=224, n_crops=36)


def shades_of_gray(img: np.ndarray, p: float = 6.0) -> np.ndarray:
    """Shades-of-Gray colour constancy with Minkowski norm ``p``.

    Each channel's illuminant is its p-norm mean; channels are rescaled so all
    illuminants match their average, then clamped to [0, 1]. A channel that
    is zero everywhere keeps a scale of 1.
    """
    if p < 1:
        raise ContractError("Minkowski norm order must be >= 1")
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3 or img.size == 0:
        raise ContractError(f"expected a non-empty (H, W, 3) image, got {img.shape}")
    illum = np.power(np.power(img, p).mean(axis=(0, 1)), 1.0 / p)
    live = illum > 0
    if not live.any():
        return img.copy()
    target = illum[live].mean()
    scale = np.ones(3)
    scale[live] = target / illum[live]
    return np.clip(img * scale, 0.0, 1.0)


@dataclass(frozen=True)
class CropPlan:
    crop: tuple[int, int]  # (height, width)
    offsets: tuple[tuple[int, int], ...]  # (top, left)

    @property
    def n_crops(self) -> int:
        return len(self.offsets)


def _grid_shape(n: int, height: int, width: int) -> tuple[int, int]:
    """Factor ``n`` into rows x cols closest to the image aspect ratio."""
    best = None
    for rows in range(1, n + 1):
        if n % rows:
            continue
        cols = n // rows
        err = abs(math.log(rows / cols) - math.log(height / width))
        if best is None or err < best[0] - 1e-12:
            best = (err, rows, cols)
    return best[1], best[2]


def make_crop_plan(image_hw: tuple[int, int], crop: int | tuple[int, int], n_crops: int) -> CropPlan:
    """Evenly spread crop offsets covering the whole image.

    Offsets along each axis run from 0 to ``dim - crop`` inclusive; an axis
    where the crop spans the full image collapses to the single offset 0.
    """
    h, w = image_hw
    ch, cw = (crop, crop) if isinstance(crop, int) else crop
    if ch > h or cw > w:
        raise ContractError(f"crop {ch}x{cw} larger than image {h}x{w}")
    if n_crops < 1:
        raise ContractError("n_crops must be >= 1")
    rows, cols = _grid_shape(n_crops, h, w)
    ys = sorted({int(round(v)) for v in np.linspace(0, h - ch, rows)})
    xs = sorted({int(round(v)) for v in np.linspace(0, w - cw, cols)})
    return CropPlan((ch, cw), tuple((y, x) for y in ys for x in xs))


def crop(img: np.ndarray, top: int, left: int, size: tuple[int, int]) -> np.ndarray:
    return img[top:top + size[0], left:left + size[1]]


@dataclass(frozen=True)
class AugmentConfig:
    flip_prob: float = 0.5
    brightness: float = 0.1  # additive delta drawn from [-b, b]
    contrast: tuple[float, float] = (0.9, 1.1)


NO_AUGMENT = AugmentConfig(flip_prob=0.0, brightness=0.0, contrast=(1.0, 1.0))


def augment(img: np.ndarray, rng: np.random.Generator, config: AugmentConfig = AugmentConfig()) -> np.ndarray:
    """Random flips, brightness shift and contrast scaling, clamped to [0, 1].

    Always consumes four draws (h-flip, v-flip, brightness, contrast) so the
    random stream stays aligned regardless of configuration.
    """
    hflip, vflip = rng.random(2) < config.flip_prob
    delta = rng.uniform(-config.brightness, config.brightness)
    factor = rng.uniform(*config.contrast)
    out = img
    if hflip:
        out = out[:, ::-1]
    if vflip:
        out = out[::-1]
    if delta == 0.0 and factor == 1.0:
        return np.ascontiguousarray(out)
    mean = out.mean()
    return np.clip((out - mean) * factor + mean + delta, 0.0, 1.0)


def to_input(crops: Sequence[np.ndarray]) -> np.ndarray:
    """Stack (H, W, 3) crops into a channel-major (3, B, H, W) network input."""
    batch = np.stack(crops).transpose(3, 0, 1, 2)
    return (batch - PIXEL_CENTER) * PIXEL_SCALE


class CnnBackbone(Module):
    """Conv(3x3) -> ReLU -> 2x2 max-pool blocks, then global average pooling."""

    def __init__(self, rng: np.random.Generator, channels: Sequence[int] = (8, 16, 32), kernel: int = 3):
        widths = [3] + list(channels)
        self.convs = [Conv2d(widths[i], widths[i + 1], kernel, rng) for i in range(len(channels))]

    @property
    def feature_dim(self) -> int:
        return self.convs[-1].weight.shape[0]

    def __call__(self, x) -> Tensor:
        """``x`` is channel-major (3, B, H, W); returns (B, d_f)."""
        h = x
        for conv in self.convs:
            h = ops.maxpool2d(ops.relu(ops.conv2d(h, conv.weight, conv.bias, layout="CNHW")))
        return ops.global_avg_pool(h).T


class CnnClassifier(Module):
    def __init__(self, rng: np.random.Generator, crop_size: int = 32,
                 augment_config: AugmentConfig = AugmentConfig(), channels=(8, 16, 32)):
        self.backbone = CnnBackbone(rng, channels)
        self.out = Linear(self.backbone.feature_dim, 1, rng)
        self.crop_size = crop_size
        self.augment_config = augment_config

    def trainable_parameters(self) -> list[Tensor]:
        return self.parameters()

    def logits(self, crops: Sequence[np.ndarray]) -> Tensor:
        feats = self.backbone(Tensor(to_input(crops)))
        return self.out(feats).reshape(len(crops))

    def random_crop(self, img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        h, w = img.shape[:2]
        s = self.crop_size
        top = int(rng.integers(0, h - s + 1))
        left = int(rng.integers(0, w - s + 1))
        return augment(crop(img, top, left, (s, s)), rng, self.augment_config)

    def loss(self, batch: Sequence[Lesion], rng: np.random.Generator) -> Tensor:
        crops = [self.random_crop(l.image, rng) for l in batch]
        y = np.array([l.label for l in batch], dtype=np.float64)
        return ops.bce_with_logits(self.logits(crops), y)

    def crop_proba(self, crops: Sequence[np.ndarray]) -> np.ndarray:
        self.eval()
        return ops.sigmoid(self.logits(crops)).data.copy()

    def predict(self, lesions: Sequence[Lesion], rng=None, plan: CropPlan | None = None,
                n_crops: int = 9, **_) -> np.ndarray:
        out = np.empty(len(lesions))
        for i, l in enumerate(lesions):
            p = plan or make_crop_plan(l.image.shape[:2], self.crop_size, n_crops)
            out[i] = multicrop_predict(l.image, self, p)
        return out


def multicrop_predict(img: np.ndarray, model, plan: CropPlan) -> float:
    """Mean of the model's per-crop probabilities over ``plan``."""
    h, w = img.shape[:2]
    ch, cw = plan.crop
    if any(t + ch > h or l + cw > w for t, l in plan.offsets):
        raise ContractError("crop plan does not fit the image")
    crops = [crop(img, t, l, plan.crop) for t, l in plan.offsets]
    return float(np.mean(model.crop_proba(crops)))


def preprocess_lesions(lesions: Sequence[Lesion], p: float = 6.0) -> list[Lesion]:
    """Colour-constancy corrected copies; purely per-image, so fold-safe."""
    return [replace(l, image=shades_of_gray(l.image, p)) for l in lesions]


def train_cnn(model: CnnClassifier, lesions: Sequence[Lesion], config: TrainConfig = DESK_CNN,
              rng: np.random.Generator | None = None) -> list[float]:
    """Adam training with one random crop plus augmentation per lesion per step."""
    rng = rng if rng is not None else np.random.default_rng(0)
    return fit(model, list(lesions), config, rng)

"""Lesion records and the on-disk dataset layout.

A dataset directory holds::

    manifest.csv    lesion_id,image_path,label,subtype,fold
    eis.csv         lesion_id,measurement_index,f000..f699
    images/         one binary PPM (P6) per lesion
    generator.json  generator parameters and per-lesion latents (optional)
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

N_DEPTHS = 10
N_FREQS = 35
N_FEATURES = N_DEPTHS * N_FREQS * 2
FEATURE_NAMES = [f"f{i:03d}" for i in range(N_FEATURES)]

SUBTYPES = ("nevus", "melanoma", "other_malignant", "dysplastic")
BENIGN_SUBTYPES = ("nevus",)


@dataclass
class Lesion:
    lesion_id: str
    image: np.ndarray  # (H, W, 3) in [0, 1]
    eis: np.ndarray  # (N_i, 700)
    label: int  # 1 = malignant
    subtype: str
    fold: int

    def __post_init__(self):
        if self.eis.ndim != 2 or self.eis.shape[1] != N_FEATURES or len(self.eis) < 1:
            raise ValueError(f"{self.lesion_id}: EIS block must be (N>=1, {N_FEATURES}), got {self.eis.shape}")

    @property
    def n_measurements(self) -> int:
        return len(self.eis)

    @property
    def in_eval_subset(self) -> bool:
        """Benign lesions and melanomas; other malignancies are train-only."""
        return self.label == 0 or self.subtype == "melanoma"


@dataclass
class Dataset:
    lesions: list[Lesion]
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.lesions)

    def __iter__(self):
        return iter(self.lesions)

    @property
    def labels(self) -> np.ndarray:
        return np.array([l.label for l in self.lesions])

    @property
    def folds(self) -> np.ndarray:
        return np.array([l.fold for l in self.lesions])

    def in_folds(self, folds: Iterable[int]) -> list[Lesion]:
        wanted = set(folds)
        return [l for l in self.lesions if l.fold in wanted]


def feature_index(depth: int, freq: int, part: int) -> int:
    """Column of (depth, frequency, part) with part 0 = log|Z|, 1 = phase."""
    return (depth * N_FREQS + freq) * 2 + part


# -- PPM ---------------------------------------------------------------------

def write_ppm(path, image: np.ndarray) -> None:
    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    h, w, _ = arr.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + arr.tobytes())


def read_ppm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            pos = blob.index(b"\n", pos) + 1
            continue
        end = pos
        while not blob[end:end + 1].isspace():
            end += 1
        tokens.append(blob[pos:end])
        pos = end
    pos += 1  # single whitespace before raster
    if tokens[0] != b"P6":
        raise ValueError(f"{path}: only binary P6 PPM is supported")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"{path}: maxval {maxval} unsupported")
    raw = np.frombuffer(blob, dtype=np.uint8, count=w * h * 3, offset=pos)
    return raw.reshape(h, w, 3).astype(np.float64) / 255.0


def read_image(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        return read_ppm(path)
    from PIL import Image  # optional, for PNG and friends

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def quantize(image: np.ndarray) -> np.ndarray:
    """Round to the 8-bit grid so in-memory and on-disk images agree."""
    return np.clip(np.rint(image * 255.0), 0, 255) / 255.0


# -- CSV -----------------------------------------------------------------------

def write_eis_csv(path, lesions: Sequence[Lesion]) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(",".join(["lesion_id", "measurement_index"] + FEATURE_NAMES) + "\n")
        for l in lesions:
            for j, row in enumerate(l.eis):
                fh.write(f"{l.lesion_id},{j}," + ",".join(repr(float(v)) for v in row) + "\n")


def read_eis_csv(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        header = fh.readline().strip().split(",")
        if header[:2] != ["lesion_id", "measurement_index"] or header[2:] != FEATURE_NAMES:
            raise ValueError(f"{path}: unexpected EIS header")
        ids, idx, rows = [], [], []
        for line in fh:
            parts = line.rstrip("\n").split(",")
            ids.append(parts[0])
            idx.append(int(parts[1]))
            rows.append(np.array(parts[2:], dtype=np.float64))
    out: dict[str, list] = {}
    for lid, j, row in sorted(zip(ids, idx, rows), key=lambda t: (t[0], t[1])):
        out.setdefault(lid, []).append(row)
    return {lid: np.vstack(r) for lid, r in out.items()}


def write_dataset(root, dataset: Dataset, sidecar: dict | None = None) -> Path:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    with open(root / "manifest.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lesion_id", "image_path", "label", "subtype", "fold"])
        for l in dataset.lesions:
            rel = f"images/{l.lesion_id}.ppm"
            write_ppm(root / rel, l.image)
            w.writerow([l.lesion_id, rel, l.label, l.subtype, l.fold])
    write_eis_csv(root / "eis.csv", dataset.lesions)
    if sidecar is not None:
        (root / "generator.json").write_text(json.dumps(sidecar, indent=1, sort_keys=True) + "\n")
    return root


def read_dataset(root) -> Dataset:
    root = Path(root)
    eis = read_eis_csv(root / "eis.csv")
    lesions = []
    with open(root / "manifest.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            lid = row["lesion_id"]
            if lid not in eis:
                raise ValueError(f"lesion {lid} has no EIS measurements")
            lesions.append(Lesion(
                lesion_id=lid,
                image=read_image(root / row["image_path"]),
                eis=eis[lid],
                label=int(row["label"]),
                subtype=row["subtype"],
                fold=int(row["fold"]),
            ))
    meta = {}
    seed = None
    side = root / "generator.json"
    if side.exists():
        meta = json.loads(side.read_text())
        seed = meta.get("config", {}).get("seed")
    return Dataset(lesions=lesions, seed=seed, meta=meta)

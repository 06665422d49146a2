"""Per-lesion prediction records and their CSV format."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .autodiff import ContractError
from .stats import ScoredSet

COLUMNS = ("lesion_id", "label", "subtype", "p", "p_head_cnn", "p_head_eis", "model_tag", "fold")


@dataclass(frozen=True)
class PredictionRow:
    lesion_id: str
    label: int
    subtype: str
    p: float
    model_tag: str
    fold: int
    p_head_cnn: float | None = None
    p_head_eis: float | None = None

    @property
    def in_eval_subset(self) -> bool:
        return self.label == 0 or self.subtype == "melanoma"


def _fmt(v: float | None) -> str:
    # repr round-trips float64 exactly, keeping files byte-stable
    return "" if v is None else repr(float(v))


def predictions_to_csv(rows: Iterable[PredictionRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for r in sorted(rows, key=lambda r: r.lesion_id):
        w.writerow([r.lesion_id, r.label, r.subtype, _fmt(r.p), _fmt(r.p_head_cnn),
                    _fmt(r.p_head_eis), r.model_tag, r.fold])
    return buf.getvalue()


def write_predictions(path, rows: Iterable[PredictionRow]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(predictions_to_csv(rows))
    return path


def read_predictions(path) -> list[PredictionRow]:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"lesion_id", "label", "p", "model_tag", "fold"} - set(reader.fieldnames or ())
        if missing:
            raise ContractError(f"{path}: missing columns {sorted(missing)}")
        for rec in reader:
            rows.append(PredictionRow(
                lesion_id=rec["lesion_id"],
                label=int(rec["label"]),
                subtype=rec.get("subtype") or ("nevus" if rec["label"] == "0" else "melanoma"),
                p=float(rec["p"]),
                model_tag=rec["model_tag"],
                fold=int(rec["fold"]),
                p_head_cnn=float(rec["p_head_cnn"]) if rec.get("p_head_cnn") else None,
                p_head_eis=float(rec["p_head_eis"]) if rec.get("p_head_eis") else None,
            ))
    return rows


def to_scored(rows: Sequence[PredictionRow], eval_subset: bool = True) -> ScoredSet:
    """Scores for evaluation; by default only benign lesions and melanomas."""
    keep = [r for r in rows if r.in_eval_subset or not eval_subset]
    return ScoredSet(
        np.array([r.lesion_id for r in keep]),
        np.array([r.label for r in keep]),
        np.array([r.p for r in keep]),
    )

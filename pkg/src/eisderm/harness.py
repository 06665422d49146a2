"""Cross-validated experiments: model registry, fold protocol, comparisons and tables."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import time
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .autodiff import ContractError, NumericError, save_checkpoint
from .data import Dataset, Lesion, read_dataset, write_dataset
from .derm import CnnClassifier, preprocess_lesions, train_cnn
from .eis import FcnnClassifier, GruClassifier, train_eis
from .fusion import FusionConfig, JointModel, ensemble_max, train_joint
from .predictions import PredictionRow, predictions_to_csv, to_scored, write_predictions
from .stats import (EvalReport, StatsConfig, confusion_rates, evaluate, paired_permutation_test,
                    threshold_at_sensitivity)
from .synth import GeneratorConfig, gen_dataset
from .training import DESK_CNN, DESK_EIS, DESK_JOINT, PAPER_CNN, PAPER_EIS, PAPER_JOINT, TrainConfig

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Invalid experiment configuration (CLI exit code 2)."""


class LeakageError(RuntimeError):
    """Evaluation data reached a model's training or preprocessing (exit code 4)."""


# -- registry ----------------------------------------------------------------------

GROUPS = ("EIS", "Derm.", "Ensemble", "Combined")


@dataclass(frozen=True)
class ModelSpec:
    tag: str
    group: str
    name: str
    members: tuple[str, ...] = ()  # ensembles: independently trained member tags

    @property
    def is_ensemble(self) -> bool:
        return bool(self.members)


_SPECS = (
    ModelSpec("fcnn", "EIS", "FC-NN, max over measurements"),
    ModelSpec("gru-last", "EIS", "GRU, last state"),
    ModelSpec("gru-mean", "EIS", "GRU, state-mean-pooling"),
    ModelSpec("gru-max", "EIS", "GRU, state-max-pooling"),
    ModelSpec("cnn", "Derm.", "CNN, multi-crop"),
    ModelSpec("ensemble-gru-cnn", "Ensemble", "max(GRU, CNN)", ("gru-max", "cnn")),
    ModelSpec("ensemble-cnn-cnn", "Ensemble", "max(CNN, CNN)", ("cnn", "cnn-b")),
    ModelSpec("ensemble-gru-fcnn", "Ensemble", "max(GRU, FC-NN)", ("gru-max", "fcnn")),
    ModelSpec("fused-lin", "Combined", "joint, linear fusion"),
    ModelSpec("fused-fc", "Combined", "joint, FC fusion"),
    ModelSpec("fused-ca", "Combined", "joint, cross-attention fusion"),
)
REGISTRY: dict[str, ModelSpec] = {s.tag: s for s in _SPECS}
MODEL_TAGS = tuple(REGISTRY)
# second CNN for the CNN+CNN ensemble; only reachable as an ensemble member
_MEMBER_ONLY = {"cnn-b": ModelSpec("cnn-b", "Derm.", "CNN, second seed")}
EXCLUDED = {
    "svm": "the SVM baseline is not implemented: the EIS feature extraction it relied on "
           "is not described in enough detail to rebuild it",
}
_FUSION_MODE = {"fused-lin": "linear", "fused-fc": "fc", "fused-ca": "cross_attention"}


def model_spec(tag: str) -> ModelSpec:
    if tag in EXCLUDED:
        raise ConfigError(f"model {tag!r} is excluded: {EXCLUDED[tag]}")
    spec = REGISTRY.get(tag) or _MEMBER_ONLY.get(tag)
    if spec is None:
        raise ConfigError(f"unknown model tag {tag!r}; known: {', '.join(MODEL_TAGS)}")
    return spec


# -- configuration ----------------------------------------------------------------

TRAIN_PRESETS = {
    "desk": (DESK_EIS, DESK_CNN, DESK_JOINT),
    "paper": (PAPER_EIS, PAPER_CNN, PAPER_JOINT),
}
MODES = ("test", "validate")


@dataclass
class ExperimentConfig:
    model_tag: str = "fused-ca"
    data_path: str | None = None  # None: generate from ``generator``
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    eis_train: TrainConfig = DESK_EIS
    cnn_train: TrainConfig = DESK_CNN
    joint_train: TrainConfig = DESK_JOINT
    n_crops: int = 9
    n_perm: int = 5  # EIS orderings averaged at inference
    crop_size: int = 32
    stats: StatsConfig = field(default_factory=StatsConfig)
    seed: int = 0
    mode: str = "test"

    def validate(self) -> "ExperimentConfig":
        model_spec(self.model_tag)
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.data_path is not None and not Path(self.data_path, "manifest.csv").exists():
            raise ConfigError(f"no dataset manifest under {self.data_path}")
        if min(self.n_crops, self.n_perm, self.crop_size) < 1:
            raise ConfigError("n_crops, n_perm and crop_size must be positive")
        if self.crop_size > self.generator.image_size and self.data_path is None:
            raise ConfigError("crop larger than the generated images")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        return json.loads(json.dumps(d, sort_keys=True))

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def _parse_value(section: str, key: str, raw: str, kind):
    try:
        return kind(raw)
    except ValueError as exc:
        raise ConfigError(f"{section}.{key}: cannot parse {raw!r} as {kind.__name__}") from exc


_GEN_KEYS = {"n_lesions": int, "n_benign": int, "seed": int, "complementarity": float,
             "separation": float, "signal_mode": str, "image_size": int}
_TRAIN_KEYS = {f"{m}_{k}": t for m in ("eis", "cnn", "joint")
               for k, t in (("epochs", int), ("batch_size", int), ("lr", float))}
_TRAIN_KEYS["joint_eis_lr"] = float
_STATS_KEYS = {"target_sensitivity": float, "n_ci": int, "n_perm": int, "alpha": float, "seed": int}


def config_from_sections(sections: Mapping[str, Mapping[str, str]]) -> ExperimentConfig:
    """Build a config from INI-style ``{section: {key: value}}`` strings.

    Sections: ``run`` (model, seed, mode), ``data`` (path plus generator keys),
    ``train`` (preset, ``<eis|cnn|joint>_<epochs|batch_size|lr>``, ``joint_eis_lr``),
    ``inference`` (n_crops, n_perm, crop_size), ``stats``.
    """
    known = {"run", "data", "train", "inference", "stats"}
    unknown = set(sections) - known - {"DEFAULT"}
    if unknown:
        raise ConfigError(f"unknown config sections {sorted(unknown)}")

    def section(name, allowed):
        vals = dict(sections.get(name, {}))
        bad = set(vals) - set(allowed)
        if bad:
            raise ConfigError(f"unknown keys in [{name}]: {sorted(bad)}")
        return vals

    run = section("run", {"model", "seed", "mode"})
    seed = _parse_value("run", "seed", run.get("seed", "0"), int)
    cfg = ExperimentConfig(model_tag=run.get("model", "fused-ca"), seed=seed,
                           mode=run.get("mode", "test"))

    data = section("data", {"path"} | set(_GEN_KEYS))
    cfg.data_path = data.pop("path", None) or None
    gen = {"seed": seed}
    gen.update({k: _parse_value("data", k, v, _GEN_KEYS[k]) for k, v in data.items()})
    try:
        cfg.generator = GeneratorConfig(**gen)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    if cfg.generator.signal_mode not in ("all", "single"):
        raise ConfigError("data.signal_mode must be 'all' or 'single'")

    train = section("train", {"preset"} | set(_TRAIN_KEYS))
    preset = train.pop("preset", "desk")
    if preset not in TRAIN_PRESETS:
        raise ConfigError(f"train.preset must be one of {sorted(TRAIN_PRESETS)}")
    eis, cnn, joint = TRAIN_PRESETS[preset]
    parsed = {k: _parse_value("train", k, v, _TRAIN_KEYS[k]) for k, v in train.items()}
    try:
        cfg.eis_train = replace(eis, **{k[4:]: v for k, v in parsed.items() if k.startswith("eis_")})
        cfg.cnn_train = replace(cnn, **{k[4:]: v for k, v in parsed.items() if k.startswith("cnn_")})
        cfg.joint_train = replace(joint, **{k[6:]: v for k, v in parsed.items() if k.startswith("joint_")})
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    inf = section("inference", {"n_crops", "n_perm", "crop_size"})
    for k, v in inf.items():
        setattr(cfg, k, _parse_value("inference", k, v, int))

    st = section("stats", set(_STATS_KEYS))
    stats = {"seed": seed}
    stats.update({k: _parse_value("stats", k, v, _STATS_KEYS[k]) for k, v in st.items()})
    try:
        cfg.stats = StatsConfig(**stats)
    except ContractError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg.validate()


# -- data and fold protocol ----------------------------------------------------------

def load_dataset(config: ExperimentConfig) -> Dataset:
    if config.data_path is not None:
        return read_dataset(config.data_path)
    return gen_dataset(config.generator)[0]


@dataclass(frozen=True)
class FoldSplit:
    index: int
    train_folds: tuple[int, ...]
    eval_fold: int
    held_out: int | None = None  # validate mode: the untouched test fold


def fold_splits(n_folds: int, mode: str = "test") -> list[FoldSplit]:
    """Test mode trains on all but fold k and predicts fold k.

    Validate mode leaves fold k out entirely, validates on fold k+1 and
    trains on the remaining folds.
    """
    splits = []
    for k in range(n_folds):
        if mode == "test":
            splits.append(FoldSplit(k, tuple(f for f in range(n_folds) if f != k), k))
        elif mode == "validate":
            v = (k + 1) % n_folds
            splits.append(FoldSplit(k, tuple(f for f in range(n_folds) if f not in (k, v)), v, k))
        else:
            raise ConfigError(f"unknown mode {mode!r}")
    return splits


def fold_seed(master: int, fold: int, tag: str, stage: int) -> np.random.SeedSequence:
    """Independent stream per (fold, model tag, stage): 0 builds, 1 trains, 2 predicts."""
    return np.random.SeedSequence(master, spawn_key=(fold, zlib.crc32(tag.encode()), stage))


def check_no_leakage(train: Sequence[Lesion], held: Sequence[Lesion]) -> None:
    overlap = {l.lesion_id for l in train} & {l.lesion_id for l in held}
    if overlap:
        raise LeakageError(f"{len(overlap)} lesions in both training and evaluation, "
                           f"e.g. {sorted(overlap)[0]}")


def check_scaler(model, train: Sequence[Lesion]) -> None:
    """Feature normalisation must be fitted on exactly the training lesions."""
    scaler = getattr(model, "scaler", None)
    if scaler is None:
        return
    expected = np.vstack([l.eis for l in train]).mean(axis=0)
    if not np.allclose(scaler.mean, expected, rtol=1e-9, atol=1e-12):
        raise LeakageError("normalisation statistics do not match the training folds")


# -- per-tag training and inference --------------------------------------------------

def build_model(tag: str, rng: np.random.Generator, config: ExperimentConfig):
    if tag == "fcnn":
        return FcnnClassifier(rng)
    if tag.startswith("gru-"):
        return GruClassifier(rng, mode=tag.split("-", 1)[1])
    if tag in ("cnn", "cnn-b"):
        return CnnClassifier(rng, crop_size=config.crop_size)
    if tag in _FUSION_MODE:
        return JointModel(rng, FusionConfig(mode=_FUSION_MODE[tag]), crop_size=config.crop_size)
    raise ConfigError(f"{tag!r} is not a trainable model")


def train_model(tag: str, model, train: Sequence[Lesion], rng, config: ExperimentConfig) -> list[float]:
    if isinstance(model, (FcnnClassifier, GruClassifier)):
        return train_eis(model, train, config.eis_train, rng)
    if isinstance(model, CnnClassifier):
        return train_cnn(model, train, config.cnn_train, rng)
    return train_joint(model, train, config.joint_train, rng)


def predict_model(model, lesions: Sequence[Lesion], rng, config: ExperimentConfig):
    """Returns ``(p, p_head_cnn, p_head_eis)``; head arrays are None for single-head models."""
    heads = (None, None)
    if isinstance(model, GruClassifier):
        p = model.predict(lesions, rng, n_perm=config.n_perm)
    elif isinstance(model, FcnnClassifier):
        p = model.predict(lesions)
    elif isinstance(model, CnnClassifier):
        p = model.predict(lesions, n_crops=config.n_crops)
    else:
        p, hs = model.predict_detailed(lesions, rng, n_crops=config.n_crops)
        if len(hs) == 2:
            heads = (hs[0], hs[1])
    if not np.isfinite(p).all():
        raise NumericError("non-finite predicted probability")
    return p, heads[0], heads[1]


# -- runs ---------------------------------------------------------------------------

@dataclass
class RunRecord:
    model_tag: str
    config_hash: str
    seed: int
    mode: str
    predictions: list[PredictionRow]
    report: EvalReport
    wall_clock: float = 0.0
    artifacts: dict[str, str] = field(default_factory=dict)

    def predictions_csv(self) -> str:
        return predictions_to_csv(self.predictions)

    def report_json(self) -> str:
        return json.dumps(self.report.to_dict(), indent=1, sort_keys=True) + "\n"

    def record_hash(self) -> str:
        """Content hash over config, predictions and report (wall clock excluded)."""
        h = hashlib.sha256()
        for part in (self.config_hash, self.predictions_csv(), self.report_json()):
            h.update(part.encode())
        return h.hexdigest()

    def write(self, out_dir) -> dict[str, str]:
        out = Path(out_dir)
        pred = write_predictions(out / "predictions" / f"{self.model_tag}.csv", self.predictions)
        rep = out / "reports" / f"{self.model_tag}.json"
        rep.parent.mkdir(parents=True, exist_ok=True)
        rep.write_text(self.report_json())
        self.artifacts.update(predictions=str(pred), report=str(rep))
        return self.artifacts


class Experiment:
    """One dataset plus configuration; member predictions are cached across tags.

    Ensembles reuse their members' cross-validated predictions, which are
    identical to running the member tags on their own because every
    (fold, tag) pair owns its random stream.
    """

    def __init__(self, config: ExperimentConfig, dataset: Dataset | None = None,
                 checkpoint_dir=None):
        self.config = config.validate()
        self.dataset = dataset if dataset is not None else load_dataset(config)
        self.lesions = preprocess_lesions(self.dataset.lesions)
        self.checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir else None
        self._cache: dict[str, list[PredictionRow]] = {}
        n_folds = int(max(self.dataset.folds)) + 1
        self.splits = fold_splits(n_folds, config.mode)

    def _fit_predict(self, tag: str) -> list[PredictionRow]:
        cfg = self.config
        rows = []
        for split in self.splits:
            train = [l for l in self.lesions if l.fold in split.train_folds]
            held = [l for l in self.lesions if l.fold == split.eval_fold]
            check_no_leakage(train, held)
            model = build_model(tag, np.random.default_rng(fold_seed(cfg.seed, split.index, tag, 0)), cfg)
            train_model(tag, model, train, np.random.default_rng(fold_seed(cfg.seed, split.index, tag, 1)), cfg)
            check_scaler(model, train)
            if self.checkpoint_dir is not None:
                save_checkpoint(self.checkpoint_dir / tag / f"fold{split.index}.ckpt", model.state_dict())
            p, hc, he = predict_model(model, held, np.random.default_rng(fold_seed(cfg.seed, split.index, tag, 2)), cfg)
            for i, l in enumerate(held):
                rows.append(PredictionRow(
                    l.lesion_id, l.label, l.subtype, float(p[i]), tag, split.eval_fold,
                    None if hc is None else float(hc[i]), None if he is None else float(he[i])))
            log.info("%s fold %d done", tag, split.index)
        return rows

    def predictions(self, tag: str) -> list[PredictionRow]:
        spec = model_spec(tag)
        if tag not in self._cache:
            if spec.is_ensemble:
                a, b = (self.predictions(m) for m in spec.members)
                pb = {r.lesion_id: r.p for r in b}
                self._cache[tag] = [replace(r, p=ensemble_max(r.p, pb[r.lesion_id]), model_tag=tag,
                                            p_head_cnn=None, p_head_eis=None) for r in a]
            else:
                self._cache[tag] = self._fit_predict(tag)
        return self._cache[tag]

    def run(self, tag: str | None = None) -> RunRecord:
        tag = tag or self.config.model_tag
        start = time.perf_counter()
        rows = sorted(self.predictions(tag), key=lambda r: r.lesion_id)
        ids = [r.lesion_id for r in rows]
        if len(set(ids)) != len(ids):
            raise LeakageError("a lesion was predicted by more than one fold")
        if self.config.mode == "test" and set(ids) != {l.lesion_id for l in self.lesions}:
            raise ContractError("pooled test predictions must cover every lesion once")
        report = evaluate(to_scored(rows), tag, self.config.stats)
        cfg = replace(self.config, model_tag=tag)
        return RunRecord(tag, cfg.config_hash(), cfg.seed, cfg.mode, rows, report,
                         wall_clock=time.perf_counter() - start)


def run_cv(config: ExperimentConfig, dataset: Dataset | None = None, checkpoint_dir=None) -> RunRecord:
    return Experiment(config, dataset, checkpoint_dir).run()


# -- comparison -------------------------------------------------------------------

@dataclass
class Comparison:
    tag_a: str
    tag_b: str
    sensitivity_a: float
    specificity_a: float
    sensitivity_b: float
    specificity_b: float
    statistic: float  # specificity_a - specificity_b
    p_value: float
    alpha: float
    n_perm: int

    @property
    def significant(self) -> bool:
        return self.p_value < self.alpha

    def to_dict(self) -> dict:
        return {**asdict(self), "significant": self.significant}

    def format(self) -> str:
        flag = "significant" if self.significant else "not significant"
        return (f"{'model':<20}{'sensitivity':>12}{'specificity':>12}\n"
                f"{self.tag_a:<20}{100 * self.sensitivity_a:>12.1f}{100 * self.specificity_a:>12.1f}\n"
                f"{self.tag_b:<20}{100 * self.sensitivity_b:>12.1f}{100 * self.specificity_b:>12.1f}\n"
                f"difference {100 * self.statistic:+.1f} points, p = {self.p_value:.4g} "
                f"({flag} at alpha = {self.alpha})\n")


def _rows_of(run) -> list[PredictionRow]:
    return run.predictions if isinstance(run, RunRecord) else list(run)


def compare(run_a, run_b, stats: StatsConfig | None = None) -> Comparison:
    """Paired permutation test on specificity at the target sensitivity."""
    stats = stats or StatsConfig()
    ra, rb = _rows_of(run_a), _rows_of(run_b)
    folds_a = {r.lesion_id: r.fold for r in ra}
    folds_b = {r.lesion_id: r.fold for r in rb}
    if folds_a != folds_b:
        raise ContractError("runs were not made on the same lesions and folds")
    a, b = to_scored(ra), to_scored(rb)
    t, p = paired_permutation_test(a, b, stats)
    def point(s):
        thr = threshold_at_sensitivity(s.labels, s.scores, stats.target_sensitivity)
        return confusion_rates(s.labels, s.scores, thr)

    (sa, pa), (sb, pb) = point(a), point(b)
    tag_a = ra[0].model_tag if ra else "a"
    tag_b = rb[0].model_tag if rb else "b"
    return Comparison(tag_a, tag_b, sa, pa, sb, pb, t, p, stats.alpha, stats.n_perm)


# -- tables -------------------------------------------------------------------------

_METRICS = ("sensitivity", "specificity", "auc")
_HEADER = ("Group", "Model", "Sensitivity", "Specificity", "AUC")


def _group_of(tag: str) -> str:
    spec = REGISTRY.get(tag) or _MEMBER_ONLY.get(tag)
    return spec.group if spec else "Other"


def _ordered(reports: Iterable[EvalReport]) -> list[EvalReport]:
    order = {g: i for i, g in enumerate(GROUPS + ("Other",))}
    tag_pos = {t: i for i, t in enumerate(MODEL_TAGS)}
    return sorted(reports, key=lambda r: (order[_group_of(r.model_tag)],
                                         tag_pos.get(r.model_tag, len(tag_pos)), r.model_tag))


def _cell(m) -> str:
    return f"{100 * m.value:.1f} ({100 * m.lo:.1f}-{100 * m.hi:.1f})"


def emit_table(reports: Sequence[EvalReport], fmt: str = "text") -> str:
    """Results grouped EIS / Derm. / Ensemble / Combined.

    ``text`` prints percentages with the interval in brackets; ``csv`` keeps
    full-precision fractions so it round-trips exactly through ``parse_table``.
    """
    if not reports:
        raise ContractError("emit_table needs at least one report")
    rows = _ordered(reports)
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["group", "model_tag"] + [f"{m}{s}" for m in _METRICS for s in ("", "_lo", "_hi")])
        for r in rows:
            vals = []
            for m in _METRICS:
                met = getattr(r, m)
                vals += [repr(met.value), repr(met.lo), repr(met.hi)]
            w.writerow([_group_of(r.model_tag), r.model_tag] + vals)
        return buf.getvalue()
    if fmt != "text":
        raise ContractError(f"unknown table format {fmt!r}")
    widths = (10, 20, 20, 20, 20)
    lines = ["".join(h.ljust(w) for h, w in zip(_HEADER, widths)).rstrip()]
    prev = None
    for r in rows:
        group = _group_of(r.model_tag)
        label = group if group != prev else ""
        prev = group
        cells = (label, r.model_tag) + tuple(_cell(getattr(r, m)) for m in _METRICS)
        lines.append("".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip())
    return "\n".join(lines) + "\n"


def parse_table(text: str, fmt: str = "text") -> list[dict]:
    """Inverse of ``emit_table``: one dict per row with (value, lo, hi) fractions."""
    out = []
    if fmt == "csv":
        for rec in csv.DictReader(io.StringIO(text)):
            row = {"group": rec["group"], "model_tag": rec["model_tag"]}
            for m in _METRICS:
                row[m] = (float(rec[m]), float(rec[f"{m}_lo"]), float(rec[f"{m}_hi"]))
            out.append(row)
        return out
    group = None
    for line in text.splitlines()[1:]:
        if not line.strip():
            continue
        head = line[:10].strip()
        group = head or group
        parts = line[10:].split()
        row = {"group": group, "model_tag": parts[0]}
        for m, (val, ci) in zip(_METRICS, zip(parts[1::2], parts[2::2])):
            lo, hi = ci.strip("()").split("-")
            row[m] = (float(val) / 100, float(lo) / 100, float(hi) / 100)
        out.append(row)
    return out


# -- full matrix ------------------------------------------------------------------

DEFAULT_COMPARISONS = tuple((t, ref) for t in MODEL_TAGS if _group_of(t) in ("Ensemble", "Combined")
                            for ref in ("cnn", "gru-max")) + (("gru-max", "gru-last"),)


def reproduce(config: ExperimentConfig, out_dir, tags: Sequence[str] = MODEL_TAGS,
              dataset: Dataset | None = None,
              comparisons: Sequence[tuple[str, str]] = DEFAULT_COMPARISONS) -> dict[str, RunRecord]:
    """Run every model tag on one dataset and write predictions, reports and tables.

    Layout under ``out_dir``: ``predictions/<tag>.csv``, ``reports/<tag>.json``,
    ``table.txt``, ``table.csv``, ``comparisons.json`` and ``timing.json``.
    Everything except ``timing.json`` is byte-identical for a fixed seed.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for t in tags:
        model_spec(t)
    if dataset is None and config.data_path is None:
        dataset, sidecar = gen_dataset(config.generator)
        write_dataset(out / "data", dataset, sidecar)
    exp = Experiment(config, dataset)
    runs: dict[str, RunRecord] = {}
    timing = {}
    for t in tags:
        start = time.perf_counter()
        runs[t] = exp.run(t)
        timing[t] = time.perf_counter() - start
        log.info("%s: auc %.3f, specificity %.3f (%.0fs)", t, runs[t].report.auc.value,
                 runs[t].report.specificity.value, timing[t])
    results = []
    for a, b in comparisons:
        if a in runs and b in runs:
            c = compare(runs[a], runs[b], config.stats)
            runs[a].report.comparisons[b] = c.p_value
            results.append(c.to_dict())
    for r in runs.values():
        r.write(out)
    reports = [r.report for r in runs.values()]
    (out / "table.txt").write_text(emit_table(reports, "text"))
    (out / "table.csv").write_text(emit_table(reports, "csv"))
    (out / "comparisons.json").write_text(json.dumps(results, indent=1, sort_keys=True) + "\n")
    (out / "timing.json").write_text(json.dumps(timing, indent=1, sort_keys=True) + "\n")
    return runs

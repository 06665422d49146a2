"""Command-line entry point: ``eisderm <subcommand> ...``.

Settings come from an optional INI file (``--config``), then ``--set
section.key=value`` overrides, then the dedicated flags of each subcommand.
Exit codes: 0 success, 2 configuration error, 3 numeric failure, 4 leakage.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .autodiff import ContractError, NumericError, load_checkpoint
from .data import read_dataset, write_dataset
from .derm import preprocess_lesions
from .harness import (
    MODEL_TAGS,
    ConfigError,
    Experiment,
    LeakageError,
    build_model,
    compare,
    config_from_sections,
    emit_table,
    fold_seed,
    fold_splits,
    model_spec,
    predict_model,
    reproduce,
)
from .predictions import PredictionRow, read_predictions, to_scored, write_predictions
from .stats import EvalReport, StatsConfig, evaluate
from .synth import gen_dataset

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_LEAKAGE = 0, 2, 3, 4


def _sections(args) -> dict[str, dict[str, str]]:
    parser = configparser.ConfigParser()
    if args.config:
        if not Path(args.config).exists():
            raise ConfigError(f"config file {args.config} not found")
        parser.read(args.config)
    sections = {s: dict(parser[s]) for s in parser.sections()}
    for item in args.set or ():
        key, sep, value = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot or not name:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        sections.setdefault(section, {})[name] = value.strip()
    # dedicated flags win over file and --set
    flag_map = {"seed": ("run", "seed"), "model": ("run", "model"), "mode": ("run", "mode"),
                "data": ("data", "path"), "knob": ("data", "complementarity"),
                "n_lesions": ("data", "n_lesions"), "signal_mode": ("data", "signal_mode"),
                "preset": ("train", "preset"), "n_ci": ("stats", "n_ci"),
                "n_perm": ("stats", "n_perm")}
    for attr, (section, name) in flag_map.items():
        value = getattr(args, attr, None)
        if value is not None:
            sections.setdefault(section, {})[name] = str(value)
    return sections


def _stats_config(args) -> StatsConfig:
    cfg = config_from_sections(_sections(args))
    return cfg.stats


# -- subcommands ---------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = config_from_sections(_sections(args))
    dataset, sidecar = gen_dataset(cfg.generator)
    root = write_dataset(args.out, dataset, sidecar)
    n_pos = int(dataset.labels.sum())
    print(f"wrote {len(dataset)} lesions ({len(dataset) - n_pos} benign, {n_pos} malignant) to {root}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = config_from_sections(_sections(args))
    out = Path(args.out)
    exp = Experiment(cfg, checkpoint_dir=out / "checkpoints")
    run = exp.run()
    run.write(out)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n")
    r = run.report
    print(f"{run.model_tag}: sensitivity {r.sensitivity.value:.3f}, specificity "
          f"{r.specificity.value:.3f}, AUC {r.auc.value:.3f}; outputs in {out}")
    return EXIT_OK


def cmd_predict(args) -> int:
    """Re-run fold inference from saved checkpoints."""
    run_dir = Path(args.run)
    cfg = config_from_sections(_sections(args))
    spec = model_spec(cfg.model_tag)
    if spec.is_ensemble:
        raise ConfigError("predict works on trained single models; ensembles are combined post hoc")
    dataset = read_dataset(cfg.data_path) if cfg.data_path else gen_dataset(cfg.generator)[0]
    lesions = preprocess_lesions(dataset.lesions)
    n_folds = max(l.fold for l in lesions) + 1
    rows = []
    for split in fold_splits(n_folds, cfg.mode):
        ckpt = run_dir / "checkpoints" / cfg.model_tag / f"fold{split.index}.ckpt"
        if not ckpt.exists():
            raise ConfigError(f"missing checkpoint {ckpt}")
        model = build_model(cfg.model_tag, np.random.default_rng(0), cfg)
        model.load_state_dict(load_checkpoint(ckpt))
        held = [l for l in lesions if l.fold == split.eval_fold]
        rng = np.random.default_rng(fold_seed(cfg.seed, split.index, cfg.model_tag, 2))
        p, hc, he = predict_model(model, held, rng, cfg)
        for i, l in enumerate(held):
            rows.append(PredictionRow(l.lesion_id, l.label, l.subtype, float(p[i]), cfg.model_tag,
                                      split.eval_fold, None if hc is None else float(hc[i]),
                                      None if he is None else float(he[i])))
    path = write_predictions(args.out, rows)
    print(f"wrote {len(rows)} predictions to {path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    stats = _stats_config(args)
    reports = []
    for pred in args.predictions:
        rows = read_predictions(pred)
        if not rows:
            raise ConfigError(f"{pred} holds no predictions")
        report = evaluate(to_scored(rows), rows[0].model_tag, stats)
        reports.append(report)
        if args.out:
            out = Path(args.out)
            out.mkdir(parents=True, exist_ok=True)
            (out / f"{report.model_tag}.json").write_text(
                json.dumps(report.to_dict(), indent=1, sort_keys=True) + "\n")
    print(emit_table(reports, "text"), end="")
    return EXIT_OK


def cmd_compare(args) -> int:
    stats = _stats_config(args)
    result = compare(read_predictions(args.a), read_predictions(args.b), stats)
    print(result.format(), end="")
    if args.out:
        Path(args.out).write_text(json.dumps(result.to_dict(), indent=1, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_reproduce(args) -> int:
    cfg = config_from_sections(_sections(args))
    tags = args.models.split(",") if args.models else MODEL_TAGS
    runs = reproduce(cfg, args.out, tags=tags)
    print((Path(args.out) / "table.txt").read_text(), end="")
    print(f"{len(runs)} runs written to {args.out}")
    return EXIT_OK


def cmd_emit_table(args) -> int:
    paths = []
    for p in args.reports:
        p = Path(p)
        paths.extend(sorted(p.glob("*.json")) if p.is_dir() else [p])
    if not paths:
        raise ConfigError("no report files given")
    reports = [EvalReport.from_dict(json.loads(p.read_text())) for p in paths]
    text = emit_table(reports, args.format)
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return EXIT_OK


# -- parser --------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI file with [run] [data] [train] [inference] [stats] sections")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                   help="override one config entry (repeatable)")
    p.add_argument("--seed", type=int, help="master seed")


def _data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", help="dataset directory (omit to generate one in memory)")
    p.add_argument("--knob", type=float, help="complementarity of the generated modalities, 0..1")
    p.add_argument("--n-lesions", dest="n_lesions", type=int)
    p.add_argument("--signal-mode", dest="signal_mode", choices=("all", "single"))


def _stats_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--n-ci", dest="n_ci", type=int, help="bootstrap resamples")
    p.add_argument("--n-perm", dest="n_perm", type=int, help="permutation-test resamples")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="eisderm", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    _common(p)
    _data_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="cross-validate one model and save checkpoints")
    _common(p)
    _data_flags(p)
    _stats_flags(p)
    p.add_argument("--model", help=f"one of {', '.join(MODEL_TAGS)}")
    p.add_argument("--mode", choices=("test", "validate"))
    p.add_argument("--preset", choices=("desk", "paper"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="predict held-out folds from saved checkpoints")
    _common(p)
    _data_flags(p)
    p.add_argument("--model")
    p.add_argument("--mode", choices=("test", "validate"))
    p.add_argument("--run", required=True, help="output directory of a previous train")
    p.add_argument("--out", required=True, help="prediction CSV to write")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="evaluate prediction CSVs at the target sensitivity")
    _common(p)
    _stats_flags(p)
    p.add_argument("predictions", nargs="+")
    p.add_argument("--out", help="directory for report JSON files")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="paired permutation test on specificity")
    _common(p)
    _stats_flags(p)
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--out", help="JSON file for the comparison")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("reproduce", help="run the full model matrix on one dataset")
    _common(p)
    _data_flags(p)
    _stats_flags(p)
    p.add_argument("--preset", choices=("desk", "paper"))
    p.add_argument("--models", help="comma-separated subset of model tags")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_reproduce)

    p = sub.add_parser("emit-table", help="results table from report JSON files")
    p.add_argument("reports", nargs="+", help="report files or directories")
    p.add_argument("--format", choices=("text", "csv"), default="text")
    p.add_argument("--out")
    p.set_defaults(func=cmd_emit_table)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ContractError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except LeakageError as exc:
        print(f"leakage: {exc}", file=sys.stderr)
        return EXIT_LEAKAGE


if __name__ == "__main__":
    sys.exit(main())

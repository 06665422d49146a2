"""Acceptance criteria 1-10, each reported as one PASS/FAIL line.

Criteria 5-8 train every model over five master seeds on 988-lesion datasets
and take roughly an hour on one CPU core.  Select the fast ones with
``pytest tests/test_acceptance.py -m "not slow"``.
"""

import math
import time

import numpy as np
import pytest

from eisderm.autodiff import Tensor
from eisderm.autodiff.gradcheck import check_gradients
from eisderm.eis import GruCell, gru_encode
from eisderm.harness import Experiment, ExperimentConfig, compare, emit_table, parse_table, reproduce
from eisderm.predictions import to_scored
from eisderm.stats import StatsConfig, auc, bca_interval, confusion_rates, threshold_at_sensitivity
from eisderm.synth import GeneratorConfig
from eisderm.training import TrainConfig
from op_cases import CHECKED_INPUTS, GRAD_TOL, OP_CASES

SEEDS = range(5)
SINGLES = ("gru-max", "cnn")
COMBINED = ("fused-lin", "fused-fc", "fused-ca")
SWEEP_TAGS = SINGLES + COMBINED
# point estimates drive criteria 5-8, so the report intervals can stay small
SWEEP_CI = 200


@pytest.fixture
def verdict(capsys):
    """Print one PASS/FAIL line for a criterion, then assert it."""
    def emit(number: int, ok: bool, detail: str):
        with capsys.disabled():
            print(f"\n[criterion {number:>2}] {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, detail
    return emit


def _sweep(knob: float, signal_mode: str = "all", tags=SWEEP_TAGS):
    start = time.process_time()
    runs = {}
    for seed in SEEDS:
        cfg = ExperimentConfig(
            seed=seed,
            generator=GeneratorConfig(seed=seed, complementarity=knob, signal_mode=signal_mode),
            stats=StatsConfig(seed=seed, n_ci=SWEEP_CI),
        )
        exp = Experiment(cfg)
        runs[seed] = {tag: exp.run(tag) for tag in tags}
        if "gru-max" in tags and "cnn" in tags:
            runs[seed]["ensemble-gru-cnn"] = exp.run("ensemble-gru-cnn")
    return runs, time.process_time() - start


@pytest.fixture(scope="session")
def complementary_sweep():
    return _sweep(1.0)


@pytest.fixture(scope="session")
def redundant_sweep():
    return _sweep(0.0)


def _auc(run):
    return run.report.auc.value


def _spec(run):
    return run.report.specificity.value


# -- 1-4: engine and statistics ------------------------------------------------------

def test_criterion_1_gradient_suite(verdict):
    start = time.perf_counter()
    worst = {}
    for name, (op, build) in sorted(OP_CASES.items()):
        for seed in range(20):
            rng = np.random.default_rng(1000 * seed + len(name))
            errors = check_gradients(op, build(rng), rng, wrt=CHECKED_INPUTS.get(name))
            worst[name] = max(worst.get(name, 0.0), max(errors))
    elapsed = time.perf_counter() - start
    name, err = max(worst.items(), key=lambda kv: kv[1])
    ok = err < GRAD_TOL and elapsed < 60
    verdict(1, ok, f"{len(OP_CASES)} ops x 20 seeds, worst rel. error {err:.2e} ({name}), {elapsed:.1f}s")


def test_criterion_2_single_gru_step(verdict):
    cell = GruCell(2, 2, np.random.default_rng(0))
    cell.M_z.data[...] = [[0.5, -0.3], [0.2, 0.1]]
    cell.M_r.data[...] = [[-0.4, 0.6], [0.3, -0.2]]
    cell.M_c.data[...] = [[0.7, 0.1], [-0.5, 0.4]]
    cell.L_z.data[...] = [[0.3, 0.8], [-0.6, 0.2]]
    cell.L_r.data[...] = [[0.1, -0.7], [0.5, 0.9]]
    cell.L_c.data[...] = [[-0.2, 0.4], [0.6, -0.8]]
    h_prev, x = [0.25, -0.5], [1.0, -2.0]

    def sig(v):
        return 1.0 / (1.0 + math.exp(-v))

    def row(m, k, v):
        return m[k][0] * v[0] + m[k][1] * v[1]

    Mz, Mr, Mc = (getattr(cell, n).data.tolist() for n in ("M_z", "M_r", "M_c"))
    Lz, Lr, Lc = (getattr(cell, n).data.tolist() for n in ("L_z", "L_r", "L_c"))
    r = [sig(row(Mr, k, h_prev) + row(Lr, k, x)) for k in range(2)]
    rh = [r[0] * h_prev[0], r[1] * h_prev[1]]
    expect, mirrored = [], []
    for k in range(2):
        z = sig(row(Mz, k, h_prev) + row(Lz, k, x))
        c = math.tanh(row(Mc, k, rh) + row(Lc, k, x))
        expect.append(z * c + (1 - z) * h_prev[k])
        mirrored.append((1 - z) * c + z * h_prev[k])

    stepped = cell.step(Tensor(np.array([h_prev])), Tensor(np.array([x]))).data[0]
    # the fused sequence path starts from h_0 = 0, where the step reduces to z * c
    seq_state = cell.states(Tensor(np.array([[x]]))).data[0, 0]
    z0 = [sig(row(Lz, k, x)) for k in range(2)]
    from_zero = [z0[k] * math.tanh(row(Lc, k, x)) for k in range(2)]

    err_step = float(np.max(np.abs(stepped - expect)))
    err_seq = float(np.max(np.abs(seq_state - from_zero)))
    gap = float(np.max(np.abs(np.array(expect) - mirrored)))
    ok = err_step <= 1e-12 and err_seq <= 1e-12 and gap > 1e-3
    verdict(2, ok, f"step error {err_step:.1e}, sequence error {err_seq:.1e}, "
                   f"mirrored convention differs by {gap:.3f}")


def test_criterion_3_pooling_equivalence(verdict):
    rng = np.random.default_rng(3)
    cell = GruCell(6, 5, rng)
    bitwise = True
    for _ in range(20):
        seq = rng.standard_normal((1, 6))
        outs = [gru_encode(seq, cell, m).o.data.tobytes() for m in ("last", "mean", "max")]
        bitwise &= outs[0] == outs[1] == outs[2]
    dominated = attained = 0
    for _ in range(100):
        seq = rng.standard_normal((int(rng.integers(2, 9)), 6))
        enc = gru_encode(seq, cell, "max")
        o = enc.o.data[:, None]
        dominated += bool((o >= enc.H).all())
        attained += bool((o == enc.H).any(axis=1).all())
    ok = bitwise and dominated == attained == 100
    verdict(3, ok, f"N=1 bitwise identical: {bitwise}; max dominates {dominated}/100, "
                   f"attained {attained}/100")


def _mann_whitney(labels, scores):
    pos, neg = scores[labels == 1], scores[labels == 0]
    wins = sum((p > n) + 0.5 * (p == n) for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def _brute_threshold(labels, scores, target):
    best = None
    for t in np.concatenate([[-np.inf], scores]):
        sens, _ = confusion_rates(labels, scores, t)
        if sens >= target and (best is None or t > best):
            best = t
    return best


def test_criterion_4_statistics_oracles(verdict):
    rng = np.random.default_rng(4)
    auc_exact = 0
    for _ in range(30):
        n = int(rng.integers(10, 120))
        labels = rng.integers(0, 2, n)
        labels[:2] = (0, 1)
        scores = np.round(rng.uniform(0, 1, n), 1)  # coarse grid forces ties
        auc_exact += auc(labels, scores) == _mann_whitney(labels, scores)

    thr_ok = thr_total = 0
    for _ in range(60):
        n = int(rng.integers(2, 201))
        labels = rng.integers(0, 2, n)
        labels[:2] = (0, 1)
        scores = np.round(rng.normal(labels, 1.0), int(rng.integers(1, 4)))
        for target in (0.5, 0.9, 0.98, 1.0):
            thr_total += 1
            thr_ok += threshold_at_sensitivity(labels, scores, target) == _brute_threshold(labels, scores, target)

    start = time.perf_counter()
    hits = 0
    for _ in range(500):
        x = rng.normal(size=200)
        iv = bca_interval(x, lambda v: v.mean(axis=-1), n_boot=1000, rng=rng, vectorized=True)
        hits += iv.lo <= 0.0 <= iv.hi
    elapsed = time.perf_counter() - start
    coverage = hits / 500
    ok = auc_exact == 30 and thr_ok == thr_total and 0.90 <= coverage <= 0.98 and elapsed < 120
    verdict(4, ok, f"AUC exact {auc_exact}/30; thresholds {thr_ok}/{thr_total}; "
                   f"BCa coverage {coverage:.3f} in {elapsed:.1f}s")


# -- 5-8: seeded experiments ---------------------------------------------------------

@pytest.mark.slow
def test_criterion_5_fusion_ordering(verdict, complementary_sweep):
    runs, cpu = complementary_sweep
    lines, passed = [], 0
    for seed, by_tag in runs.items():
        best_single = max(_auc(by_tag[t]) for t in SINGLES)
        auc_ok = all(_auc(by_tag[t]) >= best_single + 0.02 for t in COMBINED)
        spec_gap = _spec(by_tag["fused-ca"]) - max(_spec(by_tag[t]) for t in SINGLES)
        ok = auc_ok and spec_gap >= 0.05
        passed += ok
        lines.append(f"seed {seed}: min AUC gap {min(_auc(by_tag[t]) for t in COMBINED) - best_single:+.3f}, "
                     f"fused-ca spec gap {spec_gap:+.3f}")
    ok = passed >= 4 and cpu < 30 * 60
    verdict(5, ok, f"{passed}/5 seeds, {cpu / 60:.1f} CPU-min; " + "; ".join(lines))


@pytest.mark.slow
def test_criterion_6_redundancy_control(verdict, redundant_sweep):
    runs, _ = redundant_sweep
    gaps = {}
    for seed, by_tag in runs.items():
        gaps[seed] = max(_auc(by_tag[t]) for t in COMBINED) - max(_auc(by_tag[t]) for t in SINGLES)
    passed = sum(g < 0.02 for g in gaps.values())
    verdict(6, passed >= 4, f"{passed}/5 seeds below 0.02; gaps "
                            + ", ".join(f"{g:+.3f}" for g in gaps.values()))


@pytest.mark.slow
def test_criterion_7_state_max_pooling(verdict):
    runs, _ = _sweep(1.0, signal_mode="single", tags=("gru-max", "gru-last"))
    pairs = [(_auc(r["gru-max"]), _auc(r["gru-last"])) for r in runs.values()]
    passed = sum(m >= l for m, l in pairs)
    verdict(7, passed >= 4, f"{passed}/5 seeds; max vs last AUC "
                            + ", ".join(f"{m:.3f}/{l:.3f}" for m, l in pairs))


@pytest.mark.slow
def test_criterion_8_significance(verdict, complementary_sweep):
    runs, _ = complementary_sweep
    default = runs[ExperimentConfig().seed]
    stats = StatsConfig()
    fused = compare(default["fused-ca"], default["cnn"], stats)
    itself = compare(default["cnn"], default["cnn"], stats)
    ok = fused.p_value < 0.05 and itself.p_value == 1.0
    verdict(8, ok, f"fused-ca vs cnn: spec {fused.specificity_a:.3f} vs {fused.specificity_b:.3f}, "
                   f"p = {fused.p_value:.4f}; cnn vs itself p = {itself.p_value}")


# -- 9-10: harness contracts ---------------------------------------------------------

def test_criterion_9_determinism(verdict, tmp_path):
    one = TrainConfig(epochs=2, batch_size=10, lr=1e-3)
    cfg = ExperimentConfig(
        generator=GeneratorConfig(n_lesions=60, seed=9, image_size=16),
        eis_train=one, cnn_train=one, joint_train=one,
        n_crops=4, n_perm=2, crop_size=8, stats=StatsConfig(n_ci=100, n_perm=100, seed=9), seed=9,
    )
    a, b = tmp_path / "a", tmp_path / "b"
    reproduce(cfg, a)
    reproduce(cfg, b)
    files = sorted(p.relative_to(a) for p in a.rglob("*")
                   if p.is_file() and p.suffix in (".csv", ".json") and p.name != "timing.json")
    differ = [str(f) for f in files if (a / f).read_bytes() != (b / f).read_bytes()]
    n_pred = sum(f.parts[0] == "predictions" for f in files)
    n_rep = sum(f.parts[0] == "reports" for f in files)
    ok = not differ and n_pred > 0 and n_pred == n_rep
    verdict(9, ok, f"{len(files)} files compared ({n_pred} prediction CSVs, {n_rep} reports), "
                   f"differing: {differ or 'none'}")


@pytest.mark.slow
def test_criterion_10_operating_point(verdict, complementary_sweep):
    runs, _ = complementary_sweep
    reports = [r.report for by_tag in runs.values() for r in by_tag.values()]
    low = []
    for by_tag in runs.values():
        for tag, run in by_tag.items():
            scored = to_scored(run.predictions)
            sens, _ = confusion_rates(scored.labels, scored.scores, run.report.threshold)
            if sens < 0.98 or run.report.sensitivity.value < 0.98:
                low.append(tag)
    emitted = [row for by_tag in runs.values()
               for row in parse_table(emit_table([r.report for r in by_tag.values()], "csv"), "csv")]
    low += [row["model_tag"] for row in emitted if row["sensitivity"][0] < 0.98]
    ok = not low and len(emitted) == len(reports)
    verdict(10, ok, f"{len(reports)} reports / {len(emitted)} table rows at sensitivity >= 0.98; "
                    f"below: {low or 'none'}")

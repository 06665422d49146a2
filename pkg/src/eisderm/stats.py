"""Fixed-sensitivity evaluation: operating point, AUC, BCa intervals, paired permutation test.

Call rule throughout: a lesion is called malignant iff ``score > threshold``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.special import ndtr, ndtri
from scipy.stats import rankdata

from .autodiff import ContractError


@dataclass
class StatsConfig:
    target_sensitivity: float = 0.98
    n_ci: int = 10000
    n_perm: int = 10000
    alpha: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.target_sensitivity <= 1:
            raise ContractError("target sensitivity must lie in (0, 1]")
        if self.n_ci < 1 or self.n_perm < 1:
            raise ContractError("resample counts must be >= 1")


@dataclass
class ScoredSet:
    lesion_ids: np.ndarray
    labels: np.ndarray
    scores: np.ndarray

    def __post_init__(self):
        self.lesion_ids = np.asarray(self.lesion_ids)
        self.labels = np.asarray(self.labels, dtype=int)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        n = len(self.lesion_ids)
        if len(self.labels) != n or len(self.scores) != n:
            raise ContractError("lesion_ids, labels and scores must have equal length")
        if len(np.unique(self.lesion_ids)) != n:
            raise ContractError("duplicate lesion ids")
        if not np.isin(self.labels, (0, 1)).all():
            raise ContractError("labels must be 0 or 1")

    @classmethod
    def from_arrays(cls, labels, scores) -> "ScoredSet":
        labels = np.asarray(labels)
        return cls(np.arange(len(labels)).astype(str), labels, scores)

    def __len__(self) -> int:
        return len(self.labels)

    def sorted_by_id(self) -> "ScoredSet":
        order = np.argsort(self.lesion_ids, kind="stable")
        return ScoredSet(self.lesion_ids[order], self.labels[order], self.scores[order])


@dataclass
class Interval:
    lo: float
    hi: float
    degenerate: bool = False


@dataclass
class Metric:
    value: float
    lo: float
    hi: float
    degenerate: bool = False


@dataclass
class EvalReport:
    model_tag: str
    n_lesions: int
    n_positive: int
    threshold: float
    target_sensitivity: float
    sensitivity: Metric
    specificity: Metric
    auc: Metric
    comparisons: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        if math.isinf(d["threshold"]):
            d["threshold"] = "-inf"
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        d = dict(d)
        thr = d["threshold"]
        d["threshold"] = -math.inf if thr == "-inf" else float(thr)
        for key in ("sensitivity", "specificity", "auc"):
            d[key] = Metric(**d[key])
        return cls(**d)


# -- operating point ---------------------------------------------------------------

def _required_hits(n_pos: int, target: float) -> int:
    # tolerance guards products like 0.98 * 50 landing a hair above 49
    return max(int(math.ceil(target * n_pos - 1e-9)), 0)


def threshold_at_sensitivity(labels, scores, target: float = 0.98) -> float:
    """Largest observed-score threshold whose sensitivity is still >= ``target``.

    Candidates are the observed scores plus ``-inf``. Because sensitivity only
    drops as the threshold rises, this maximises specificity under the
    sensitivity constraint.
    """
    if target > 1:
        raise ContractError(f"target sensitivity {target} > 1 is unreachable")
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    pos = np.sort(scores[labels == 1])[::-1]
    if len(pos) == 0:
        raise ContractError("threshold_at_sensitivity needs at least one positive")
    k = _required_hits(len(pos), target)
    if k == 0:
        return float(scores.max())
    cut = pos[k - 1]  # the k-th highest positive must stay above the threshold
    below = scores[scores < cut]
    return float(below.max()) if len(below) else -math.inf


def confusion_rates(labels, scores, threshold: float) -> tuple[float, float]:
    """(sensitivity, specificity); a rate whose class is absent is NaN."""
    labels = np.asarray(labels)
    called = np.asarray(scores) > threshold
    pos, neg = labels == 1, labels == 0
    sens = float(called[pos].mean()) if pos.any() else math.nan
    spec = float((~called[neg]).mean()) if neg.any() else math.nan
    return sens, spec


def specificity_at_sensitivity(labels, scores, target: float = 0.98) -> float:
    t = threshold_at_sensitivity(labels, scores, target)
    return confusion_rates(labels, scores, t)[1]


def auc(labels, scores) -> float:
    """Mann-Whitney form of the ROC area: P(pos > neg) + P(tie) / 2."""
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ContractError("AUC needs both classes present")
    ranks = rankdata(np.asarray(scores, dtype=np.float64))
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc_rows(labels, scores) -> np.ndarray:
    """Row-wise AUC for stacked resamples shaped (R, n)."""
    labels = np.atleast_2d(labels)
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    ranks = rankdata(scores, axis=-1)
    pos = labels == 1
    n_pos = pos.sum(axis=-1)
    n_neg = labels.shape[-1] - n_pos
    u = (ranks * pos).sum(axis=-1) - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


# -- bootstrap ---------------------------------------------------------------

def _stratified_indices(rng: np.random.Generator, strata: Optional[np.ndarray], n: int,
                        n_boot: int) -> np.ndarray:
    if strata is None:
        return rng.integers(0, n, size=(n_boot, n))
    out = np.empty((n_boot, n), dtype=np.int64)
    col = 0
    for s in np.unique(strata):
        members = np.flatnonzero(strata == s)
        draw = rng.integers(0, len(members), size=(n_boot, len(members)))
        out[:, col:col + len(members)] = members[draw]
        col += len(members)
    return out


def jackknife_acceleration(jack: np.ndarray) -> float:
    d = jack.mean() - jack
    denom = 6.0 * (d ** 2).sum() ** 1.5
    if denom == 0 or not np.isfinite(denom):
        return 0.0
    return float((d ** 3).sum() / denom)


def bca_from_replicates(theta_hat: float, boot: np.ndarray, accel: float,
                        level: float = 0.95, z0: Optional[float] = None) -> Interval:
    """BCa interval from bootstrap replicates and a known acceleration.

    ``z0`` may be injected; otherwise it is estimated from the share of
    replicates strictly below ``theta_hat``.
    """
    boot = np.asarray(boot, dtype=np.float64)
    if np.all(boot == boot[0]):
        return Interval(theta_hat, theta_hat, degenerate=True)
    if z0 is None:
        share = np.count_nonzero(boot < theta_hat) / len(boot)
        # keep z0 finite when theta_hat sits outside the replicate range
        share = min(max(share, 0.5 / len(boot)), 1.0 - 0.5 / len(boot))
        z0 = float(ndtri(share))
    tail = (1.0 - level) / 2.0
    quantiles = []
    for z_alpha in (ndtri(tail), ndtri(1.0 - tail)):
        zz = z0 + z_alpha
        quantiles.append(float(ndtr(z0 + zz / (1.0 - accel * zz))))
    lo, hi = np.quantile(boot, quantiles)
    return Interval(float(lo), float(hi))


def bca_interval(data, statistic: Callable, n_boot: int = 10000,
                 rng: Optional[np.random.Generator] = None, strata=None,
                 level: float = 0.95, vectorized: bool = False) -> Interval:
    """Bias-corrected and accelerated bootstrap interval.

    ``data`` is a sequence of equal-length arrays (one row per observation);
    ``statistic(*arrays)`` returns a float. With ``vectorized=True`` the
    statistic instead receives arrays with a leading resample axis and returns
    one value per resample. ``strata`` resamples within groups (e.g. labels).
    """
    arrays = [np.asarray(a) for a in (data if isinstance(data, (list, tuple)) else [data])]
    n = len(arrays[0])
    if n < 2:
        raise ContractError("bootstrap needs at least 2 observations")
    rng = rng if rng is not None else np.random.default_rng(0)
    strata = None if strata is None else np.asarray(strata)

    theta_hat = float(statistic(*arrays)) if not vectorized else float(
        statistic(*[a[None] for a in arrays])[0])
    idx = _stratified_indices(rng, strata, n, n_boot)
    if vectorized:
        boot = np.asarray(statistic(*[a[idx] for a in arrays]), dtype=np.float64)
    else:
        boot = np.array([statistic(*[a[i] for a in arrays]) for i in idx], dtype=np.float64)

    if np.all(boot == boot[0]):
        warnings.warn("degenerate bootstrap distribution; interval collapsed", RuntimeWarning)
        return Interval(theta_hat, theta_hat, degenerate=True)

    if vectorized:
        loo = np.array([np.delete(np.arange(n), i) for i in range(n)])
        jack = np.asarray(statistic(*[a[loo] for a in arrays]), dtype=np.float64)
    else:
        keep = np.ones(n, dtype=bool)
        jack = np.empty(n)
        for i in range(n):
            keep[i] = False
            jack[i] = statistic(*[a[keep] for a in arrays])
            keep[i] = True
    accel = jackknife_acceleration(jack)
    return bca_from_replicates(theta_hat, boot, accel, level=level)


# -- paired permutation test ---------------------------------------------------------

def _spec_at_sens_rows(labels: np.ndarray, score_rows: np.ndarray, target: float) -> np.ndarray:
    """Specificity at the fixed-sensitivity threshold, one value per row.

    With the threshold chosen as the largest observed score below the k-th
    highest positive, a negative is called benign iff it is below that
    positive, so no explicit threshold search is needed.
    """
    pos = score_rows[:, labels == 1]
    neg = score_rows[:, labels == 0]
    k = _required_hits(pos.shape[1], target)
    if k == 0:
        return np.ones(len(score_rows))
    kth = -np.partition(-pos, k - 1, axis=1)[:, k - 1]
    return (neg < kth[:, None]).mean(axis=1)


def paired_permutation_test(a: ScoredSet, b: ScoredSet, config: StatsConfig | None = None,
                            rng: Optional[np.random.Generator] = None) -> tuple[float, float]:
    """Two-sided paired permutation test on the specificity difference.

    Returns ``(T, p)`` where ``T = spec_A - spec_B`` at each model's own
    fixed-sensitivity threshold. The null swaps the two models' scores per
    lesion with probability 1/2 and refits both thresholds.
    """
    config = config or StatsConfig()
    a, b = a.sorted_by_id(), b.sorted_by_id()
    if not np.array_equal(a.lesion_ids, b.lesion_ids):
        raise ContractError("permutation test needs predictions on identical lesions")
    if not np.array_equal(a.labels, b.labels):
        raise ContractError("label mismatch between paired score sets")
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    labels = a.labels
    target = config.target_sensitivity
    t_obs = float(
        _spec_at_sens_rows(labels, a.scores[None], target)[0]
        - _spec_at_sens_rows(labels, b.scores[None], target)[0]
    )
    hits = 0
    done = 0
    chunk = 500
    while done < config.n_perm:
        m = min(chunk, config.n_perm - done)
        swap = rng.random((m, len(labels))) < 0.5
        sa = np.where(swap, b.scores, a.scores)
        sb = np.where(swap, a.scores, b.scores)
        t_null = _spec_at_sens_rows(labels, sa, target) - _spec_at_sens_rows(labels, sb, target)
        # small tolerance so exact ties in |T| are not lost to rounding
        hits += int(np.count_nonzero(np.abs(t_null) >= abs(t_obs) - 1e-12))
        done += m
    p = (hits + 1) / (config.n_perm + 1)
    return t_obs, float(p)


# -- full report ---------------------------------------------------------------------

def _metric(point: float, interval: Interval) -> Metric:
    return Metric(value=float(point), lo=float(interval.lo), hi=float(interval.hi),
                  degenerate=bool(interval.degenerate))


def evaluate(scored: ScoredSet, model_tag: str, config: StatsConfig | None = None) -> EvalReport:
    """Sensitivity, specificity and AUC with BCa intervals.

    The threshold is fitted once on the full set and held fixed inside the
    bootstrap, so the sensitivity/specificity intervals reflect sampling of
    lesions at that operating point.
    """
    config = config or StatsConfig()
    s = scored.sorted_by_id()
    labels, scores = s.labels, s.scores
    thr = threshold_at_sensitivity(labels, scores, config.target_sensitivity)
    sens, spec = confusion_rates(labels, scores, thr)
    ss = np.random.SeedSequence(config.seed).spawn(3)

    def sens_rows(lab, sc):
        return ((sc > thr) & (lab == 1)).sum(axis=-1) / (lab == 1).sum(axis=-1)

    def spec_rows(lab, sc):
        return ((sc <= thr) & (lab == 0)).sum(axis=-1) / (lab == 0).sum(axis=-1)

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        sens_ci = bca_interval([labels, scores], sens_rows, config.n_ci,
                               np.random.default_rng(ss[0]), strata=labels, vectorized=True)
        spec_ci = bca_interval([labels, scores], spec_rows, config.n_ci,
                               np.random.default_rng(ss[1]), strata=labels, vectorized=True)
        auc_ci = bca_interval([labels, scores], auc_rows, config.n_ci,
                              np.random.default_rng(ss[2]), strata=labels, vectorized=True)
    return EvalReport(
        model_tag=model_tag,
        n_lesions=len(labels),
        n_positive=int(labels.sum()),
        threshold=thr,
        target_sensitivity=config.target_sensitivity,
        sensitivity=_metric(sens, sens_ci),
        specificity=_metric(spec, spec_ci),
        auc=_metric(auc(labels, scores), auc_ci),
    )

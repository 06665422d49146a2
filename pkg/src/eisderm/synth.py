"""Seeded generator of paired synthetic lesions.

Each lesion carries two latent severities drawn from class-conditional
normals, ``u1`` and ``u2``. EIS spectra are driven by ``u1``; the dermoscopy
rendering is driven by ``cos(t) * u1 + sin(t) * u2`` with
``t = complementarity * pi / 2``. At complementarity 0 both modalities see
the same signal, at 1 they see independent signals, so the gain available
from fusing them is a dial.

EIS spectra follow a Cole-Cole dispersion per electrode depth, with the
severity acting mostly on the deep depths.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import norm

from .autodiff import ContractError
from .data import N_DEPTHS, N_FEATURES, N_FREQS, Dataset, Lesion, quantize

FREQUENCIES = np.logspace(np.log10(1e3), np.log10(2.5e6), N_FREQS)

SKIN = np.array([0.87, 0.68, 0.58])
LESION_BROWN = np.array([0.55, 0.36, 0.25])
LESION_DARK = np.array([0.22, 0.20, 0.30])

# severity sensitivity of the per-depth dispersion parameters
_DR_SLOPE = 0.35
_FC_SLOPE = 0.40


@dataclass
class GeneratorConfig:
    n_lesions: int = 988
    n_benign: int | None = None  # default keeps the 631:357 ratio
    seed: int = 0
    complementarity: float = 1.0
    separation: float = 1.7  # class mean gap of each latent, in within-class sd
    signal_mode: str = "all"  # "all" or "single" informative measurement
    min_measurements: int = 1
    max_measurements: int = 8
    mean_measurements: float = 3131 / 988
    measurement_jitter: float = 0.15
    mag_noise: float = 0.01
    phase_noise: float = 0.005
    image_size: int = 64
    pixel_noise: float = 0.01
    melanoma_share: float = 0.6
    other_share: float = 0.25
    n_folds: int = 5

    def resolved_benign(self) -> int:
        if self.n_benign is not None:
            return self.n_benign
        return int(round(self.n_lesions * 631 / 988))


@dataclass
class LesionSpec:
    label: int
    subtype: str
    eis_severity: float
    image_severity: float
    # dispersion, per depth where arrays
    r_inf: float
    delta_r: np.ndarray
    f_c: np.ndarray
    alpha: float
    measurement_offsets: np.ndarray  # severity offset of each measurement
    # rendering
    asymmetry: float
    irregularity: float
    color_variance: float
    darkness: float
    radius: float = 0.26  # fraction of image size
    center: tuple[float, float] = (0.0, 0.0)  # pixel offset from image centre
    illuminant: np.ndarray = field(default_factory=lambda: np.ones(3))
    mag_noise: float = 0.0
    phase_noise: float = 0.0
    pixel_noise: float = 0.0
    image_size: int = 64

    @property
    def n_measurements(self) -> int:
        return len(self.measurement_offsets)


def cole_cole(f, r_inf: float, delta_r: float, f_c: float, alpha: float) -> np.ndarray:
    """Complex impedance ``r_inf + delta_r / (1 + (i f / f_c) ** alpha)``."""
    f = np.asarray(f, dtype=np.float64)
    return r_inf + delta_r / (1.0 + (1j * f / f_c) ** alpha)


def depth_weight(depth: int) -> float:
    """0 at the shallowest electrode pair, 1 at the deepest."""
    return depth / (N_DEPTHS - 1)


def gen_eis_spectrum(spec: LesionSpec, depth: int, rng: np.random.Generator,
                     offset: float = 0.0) -> np.ndarray:
    """70 features for one depth: (log|Z|, arg Z) interleaved over frequency.

    ``offset`` shifts the severity seen by this measurement relative to the
    lesion's own; it acts on the deep depths through the same slopes used to
    build ``spec.delta_r`` and ``spec.f_c``.
    """
    if not 0 <= depth < N_DEPTHS:
        raise ContractError(f"depth must be in [0, {N_DEPTHS}), got {depth}")
    w = depth_weight(depth)
    delta_r = spec.delta_r[depth] * math.exp(-_DR_SLOPE * w * offset)
    f_c = spec.f_c[depth] * math.exp(_FC_SLOPE * w * offset)
    z = cole_cole(FREQUENCIES, spec.r_inf, delta_r, f_c, spec.alpha)
    log_mag = np.log(np.abs(z))
    phase = np.angle(z)
    if spec.mag_noise > 0:
        log_mag = log_mag + rng.normal(0.0, spec.mag_noise, N_FREQS)
    if spec.phase_noise > 0:
        phase = phase + rng.normal(0.0, spec.phase_noise, N_FREQS)
    out = np.empty(2 * N_FREQS)
    out[0::2] = log_mag
    out[1::2] = phase
    return out


def gen_measurement(spec: LesionSpec, rng: np.random.Generator, offset: float = 0.0) -> np.ndarray:
    return np.concatenate([gen_eis_spectrum(spec, d, rng, offset) for d in range(N_DEPTHS)])


def _smooth_field(rng: np.random.Generator, yy, xx, scale: float, n_waves: int = 3) -> np.ndarray:
    acc = np.zeros_like(xx)
    for _ in range(n_waves):
        theta = rng.uniform(0, 2 * np.pi)
        k = rng.uniform(0.5, 1.5) * 2 * np.pi / scale
        acc += np.cos(k * (np.cos(theta) * xx + np.sin(theta) * yy) + rng.uniform(0, 2 * np.pi))
    return acc / n_waves


def gen_lesion_image(spec: LesionSpec, rng: np.random.Generator) -> np.ndarray:
    """Procedural lesion on a skin-toned background, (size, size, 3) in [0, 1]."""
    n = spec.image_size
    coords = np.arange(n) + 0.5 - n / 2
    yy, xx = np.meshgrid(coords - spec.center[1], coords - spec.center[0], indexing="ij")
    rho = np.hypot(xx, yy)
    phi = np.arctan2(yy, xx)
    r0 = spec.radius * n

    boundary = np.ones_like(rho)
    harmonics = range(3, 7)
    amps = rng.uniform(0.5, 1.0, len(harmonics))
    phases = rng.uniform(0, 2 * np.pi, len(harmonics))
    for k, a, p in zip(harmonics, amps, phases):
        boundary += spec.irregularity * a / math.sqrt(k) * np.cos(k * phi + p)
    mask = 1.0 / (1.0 + np.exp(-(r0 * boundary - rho) / 0.8))

    dk = spec.darkness
    color = LESION_BROWN * (1.0 - dk) + LESION_DARK * dk
    lesion = np.broadcast_to(color, (n, n, 3)).copy()
    # one side darker than the other
    shade = 1.0 - 0.5 * spec.asymmetry * np.clip(xx / r0, -1.0, 1.0)
    lesion *= shade[..., None]
    if spec.color_variance > 0:
        for ch in range(3):
            lesion[..., ch] += spec.color_variance * _smooth_field(rng, yy, xx, r0)

    skin = SKIN + 0.02 * np.stack([_smooth_field(rng, yy, xx, n) for _ in range(3)], axis=-1)
    img = skin * (1.0 - mask[..., None]) + lesion * mask[..., None]
    img = img * spec.illuminant
    if spec.pixel_noise > 0:
        img = img + rng.normal(0.0, spec.pixel_noise, img.shape)
    return quantize(np.clip(img, 0.0, 1.0))


def _truncated_geometric_p(mean: float, lo: int, hi: int) -> float:
    ks = np.arange(lo, hi + 1)

    def mean_for(p):
        w = (1 - p) ** (ks - lo)
        return float((ks * w).sum() / w.sum())

    a, b = 1e-6, 1 - 1e-6  # mean_for decreases in p
    if not mean_for(b) <= mean <= mean_for(a):
        raise ContractError(f"mean {mean} not reachable on [{lo}, {hi}]")
    for _ in range(100):
        mid = 0.5 * (a + b)
        if mean_for(mid) > mean:
            a = mid
        else:
            b = mid
    return 0.5 * (a + b)


def _severity_to_unit(s: float) -> float:
    return 1.0 / (1.0 + math.exp(-1.2 * s))


def sample_spec(label: int, subtype: str, u1: float, u2: float, cfg: GeneratorConfig,
                rng: np.random.Generator) -> LesionSpec:
    theta = cfg.complementarity * math.pi / 2
    eis_sev = u1
    img_sev = math.cos(theta) * u1 + math.sin(theta) * u2

    if cfg.signal_mode == "all":
        n = _sample_count(cfg, rng)
        offsets = rng.normal(0.0, cfg.measurement_jitter, n)
    elif cfg.signal_mode == "single":
        n = _sample_count(cfg, rng)
        # healthy-skin readings everywhere except one informative position
        healthy = rng.normal(-cfg.separation / 2 - 1.0, 0.5, n)
        offsets = healthy - eis_sev
        offsets[rng.integers(n)] = 0.0
    else:
        raise ContractError(f"unknown signal_mode {cfg.signal_mode!r}")

    depth = np.arange(N_DEPTHS)
    w = depth / (N_DEPTHS - 1)
    r_inf = 200.0 * math.exp(rng.normal(0, 0.05))
    dr_base = 3000.0 * math.exp(rng.normal(0, 0.05))
    fc_base = 2e4 * math.exp(rng.normal(0, 0.05))
    delta_r = dr_base * (1 + 0.15 * depth) * np.exp(-_DR_SLOPE * w * eis_sev)
    f_c = fc_base * (1 + 0.1 * depth) * np.exp(_FC_SLOPE * w * eis_sev)
    alpha = float(np.clip(rng.normal(0.75, 0.03), 0.5, 1.0))

    s = _severity_to_unit(img_sev)
    return LesionSpec(
        label=label,
        subtype=subtype,
        eis_severity=eis_sev,
        image_severity=img_sev,
        r_inf=r_inf,
        delta_r=delta_r,
        f_c=f_c,
        alpha=alpha,
        measurement_offsets=offsets,
        asymmetry=0.02 + 0.5 * s,
        irregularity=0.02 + 0.25 * s,
        color_variance=0.01 + 0.12 * s,
        darkness=0.1 + 0.8 * s,
        radius=float(rng.uniform(0.22, 0.30)),
        center=(float(rng.uniform(-3, 3)), float(rng.uniform(-3, 3))),
        illuminant=rng.uniform(0.9, 1.1, 3),
        mag_noise=cfg.mag_noise,
        phase_noise=cfg.phase_noise,
        pixel_noise=cfg.pixel_noise,
        image_size=cfg.image_size,
    )


def _sample_count(cfg: GeneratorConfig, rng: np.random.Generator) -> int:
    lo, hi = cfg.min_measurements, cfg.max_measurements
    mean = min(max(cfg.mean_measurements, lo + 1e-3), hi - 1e-3)
    p = _truncated_geometric_p(mean, lo, hi)
    ks = np.arange(lo, hi + 1)
    w = (1 - p) ** (ks - lo)
    return int(rng.choice(ks, p=w / w.sum()))


def stratified_folds(labels: np.ndarray, n_folds: int, rng: np.random.Generator) -> np.ndarray:
    folds = np.empty(len(labels), dtype=int)
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        rng.shuffle(idx)
        folds[idx] = np.arange(len(idx)) % n_folds
    return folds


def _subtype(label: int, rng: np.random.Generator, cfg: GeneratorConfig) -> str:
    if label == 0:
        return "nevus"
    u = rng.uniform()
    if u < cfg.melanoma_share:
        return "melanoma"
    if u < cfg.melanoma_share + cfg.other_share:
        return "other_malignant"
    return "dysplastic"


def gen_dataset(cfg: GeneratorConfig) -> tuple[Dataset, dict]:
    """Build a dataset in memory plus the JSON-able generator sidecar."""
    if cfg.n_lesions < 10:
        raise ContractError("need at least 10 lesions")
    n_benign = cfg.resolved_benign()
    n_malig = cfg.n_lesions - n_benign
    if n_benign < cfg.n_folds or n_malig < cfg.n_folds:
        raise ContractError(
            f"class counts {n_benign}:{n_malig} cannot fill {cfg.n_folds} stratified folds"
        )
    if not 0.0 <= cfg.complementarity <= 1.0:
        raise ContractError("complementarity must lie in [0, 1]")

    root = np.random.SeedSequence(cfg.seed)
    top = np.random.default_rng(root.spawn(1)[0])
    labels = np.array([0] * n_benign + [1] * n_malig)
    top.shuffle(labels)
    folds = stratified_folds(labels, cfg.n_folds, top)

    half = cfg.separation / 2
    lesions, records = [], []
    for i, (y, child) in enumerate(zip(labels, root.spawn(cfg.n_lesions))):
        rng = np.random.default_rng(child)
        mu = half if y == 1 else -half
        u1, u2 = rng.normal(mu, 1.0, 2)
        subtype = _subtype(int(y), rng, cfg)
        spec = sample_spec(int(y), subtype, float(u1), float(u2), cfg, rng)
        image = gen_lesion_image(spec, rng)
        eis = np.vstack([gen_measurement(spec, rng, off) for off in spec.measurement_offsets])
        lid = f"L{i:04d}"
        lesions.append(Lesion(lid, image, eis, int(y), subtype, int(folds[i])))
        records.append({
            "lesion_id": lid,
            "label": int(y),
            "subtype": subtype,
            "fold": int(folds[i]),
            "u1": float(u1),
            "u2": float(u2),
            "eis_severity": spec.eis_severity,
            "image_severity": spec.image_severity,
            "asymmetry": spec.asymmetry,
            "irregularity": spec.irregularity,
            "color_variance": spec.color_variance,
            "darkness": spec.darkness,
            "n_measurements": spec.n_measurements,
            "informative_index": int(np.flatnonzero(spec.measurement_offsets == 0.0)[0])
            if cfg.signal_mode == "single" else None,
        })
    sidecar = {"config": asdict(cfg), "lesions": records}
    return Dataset(lesions=lesions, seed=cfg.seed, meta=sidecar), sidecar


# -- Bayes oracles on the generating latents -----------------------------------

def oracle_scores(sidecar: dict, which: str) -> tuple[np.ndarray, np.ndarray]:
    """Bayes-optimal scores from the latents for ``eis``, ``image`` or ``fused``."""
    recs = sidecar["lesions"]
    y = np.array([r["label"] for r in recs])
    e = np.array([r["eis_severity"] for r in recs])
    g = np.array([r["image_severity"] for r in recs])
    if which == "eis":
        return y, e
    if which == "image":
        return y, g
    if which != "fused":
        raise ValueError(which)
    theta = sidecar["config"]["complementarity"] * math.pi / 2
    # equal-covariance Gaussians: the linear discriminant is optimal
    cov = np.array([[1.0, math.cos(theta)], [math.cos(theta), 1.0]])
    diff = np.array([1.0, math.cos(theta) + math.sin(theta)])
    w = np.linalg.pinv(cov) @ diff
    return y, w[0] * e + w[1] * g


def analytic_single_auc(separation: float) -> float:
    """AUC of one latent alone: P(N(d/2,1) > N(-d/2,1))."""
    return float(norm.cdf(separation / math.sqrt(2)))

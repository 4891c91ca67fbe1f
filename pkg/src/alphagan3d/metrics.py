"""Quantitative evaluation: MS-SSIM, NCC, MAE, MMD and Dice, plus the
batched comparison protocols that report mean/stddev per metric.

All metrics operate on plain numpy volumes (evaluation is post-hoc, no
gradients).  Protocol sizes default to desk scale; the full-scale
protocol used 21000 random pairings for NCC/MAE/MMD and 2100 MS-SSIM
comparisons (75 trials of a batch of 8, i.e. 28 unordered pairs each).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.spatial.distance import cdist

from .errors import ContractError, DomainError
from .rng import SeedStream

MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
PAIRS_PER_BATCH_OF_8 = 28


# ---------------------------------------------------------------------------
# pairwise metrics
# ---------------------------------------------------------------------------

def _check_same_shape(x, y, what):
    if x.shape != y.shape:
        raise ContractError(f"{what}: shape mismatch {x.shape} vs {y.shape}")


def _ssim_maps(x, y, sigma, truncate, c1, c2):
    mu1 = gaussian_filter(x, sigma, truncate=truncate)
    mu2 = gaussian_filter(y, sigma, truncate=truncate)
    s11 = gaussian_filter(x * x, sigma, truncate=truncate) - mu1 * mu1
    s22 = gaussian_filter(y * y, sigma, truncate=truncate) - mu2 * mu2
    s12 = gaussian_filter(x * y, sigma, truncate=truncate) - mu1 * mu2
    cs_map = (2.0 * s12 + c2) / (s11 + s22 + c2)
    ssim_map = ((2.0 * mu1 * mu2 + c1) / (mu1 * mu1 + mu2 * mu2 + c1)) * cs_map
    return float(ssim_map.mean()), float(cs_map.mean())


def _downsample2(x):
    d, h, w = (e - e % 2 for e in x.shape)
    x = x[:d, :h, :w]
    return 0.125 * (x[0::2, 0::2, 0::2] + x[1::2, 0::2, 0::2]
                    + x[0::2, 1::2, 0::2] + x[0::2, 0::2, 1::2]
                    + x[1::2, 1::2, 0::2] + x[1::2, 0::2, 1::2]
                    + x[0::2, 1::2, 1::2] + x[1::2, 1::2, 1::2])


def ms_ssim_3d(x, y, scales: int = 3, window: int = 7, sigma: float = 1.5,
               data_range: float | None = None) -> float:
    """Multi-scale structural similarity with Gaussian windows in 3-D.

    The standard five scale weights are renormalized over the configured
    scale count; negative luminance/contrast responses are clamped to
    zero, so the result lies in [0, 1].
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _check_same_shape(x, y, "ms_ssim_3d")
    if not 1 <= scales <= len(MSSSIM_WEIGHTS):
        raise DomainError(f"scales must be in [1, {len(MSSSIM_WEIGHTS)}]")
    smallest = min(x.shape) // (2 ** (scales - 1))
    if smallest < window:
        raise DomainError(
            f"{scales} scales reduce extent {min(x.shape)} below window {window}")
    if data_range is None:
        data_range = float(max(x.max(), y.max()) - min(x.min(), y.min()))
    if data_range == 0.0:
        return 1.0  # both volumes are the same constant
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    truncate = ((window - 1) // 2) / sigma
    weights = np.asarray(MSSSIM_WEIGHTS[:scales])
    weights = weights / weights.sum()
    mcs = []
    ssim_last = 0.0
    for level in range(scales):
        ssim_val, cs_val = _ssim_maps(x, y, sigma, truncate, c1, c2)
        if level < scales - 1:
            mcs.append(max(cs_val, 0.0))
            x, y = _downsample2(x), _downsample2(y)
        else:
            ssim_last = max(ssim_val, 0.0)
    value = float(np.prod(np.power(mcs, weights[:-1])) *
                  ssim_last ** weights[-1])
    return float(np.clip(value, 0.0, 1.0))


def ncc(x, y) -> float:
    """Pearson-form normalized cross-correlation of two volumes."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if x.shape != y.shape:
        raise ContractError(f"ncc: size mismatch {x.size} vs {y.size}")
    xc = x - x.mean()
    yc = y - y.mean()
    nx, ny = np.linalg.norm(xc), np.linalg.norm(yc)
    if nx == 0.0 or ny == 0.0:
        raise DomainError("ncc: constant input volume")
    return float(np.clip(np.dot(xc, yc) / (nx * ny), -1.0, 1.0))


def mae(x, y) -> float:
    """Mean absolute voxel difference."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _check_same_shape(x, y, "mae")
    return float(np.abs(x - y).mean())


def _flatten_set(volumes) -> np.ndarray:
    return np.stack([np.asarray(v, dtype=np.float64).reshape(-1)
                     for v in volumes])


def mmd(set_a, set_b, kernel: str = "linear",
        bandwidth: float | None = None) -> float:
    """Biased squared maximum-mean-discrepancy estimate between two sets
    of volumes (flattened), linear kernel by default."""
    a = _flatten_set(set_a)
    b = _flatten_set(set_b)
    if len(a) < 2 or len(b) < 2:
        raise ContractError("mmd needs at least 2 volumes per set")
    if a.shape[1] != b.shape[1]:
        raise ContractError("mmd: volumes have different voxel counts")
    if kernel == "linear":
        kaa, kbb, kab = a @ a.T, b @ b.T, a @ b.T
    elif kernel == "gaussian":
        if bandwidth is None:
            pooled = np.concatenate([a, b])
            dists = cdist(pooled, pooled)
            positive = dists[dists > 0]
            bandwidth = float(np.median(positive)) if positive.size else 1.0
        g = -0.5 / bandwidth ** 2
        kaa = np.exp(g * cdist(a, a, "sqeuclidean"))
        kbb = np.exp(g * cdist(b, b, "sqeuclidean"))
        kab = np.exp(g * cdist(a, b, "sqeuclidean"))
    else:
        raise ContractError(f"unknown mmd kernel {kernel!r}")
    value = kaa.mean() + kbb.mean() - 2.0 * kab.mean()
    return float(max(value, 0.0))


@dataclass
class DiceResult:
    per_class: dict
    global_dice: float | None


def dice(mask_a, mask_b, classes=None) -> DiceResult:
    """Per-class and pooled-foreground Dice overlap of two label volumes.

    A class absent from both masks is reported as None and excluded from
    the global score.
    """
    a = np.asarray(mask_a)
    b = np.asarray(mask_b)
    _check_same_shape(a, b, "dice")
    if classes is None:
        classes = sorted(set(np.unique(a)) | set(np.unique(b)) - {0})
        classes = [c for c in classes if c != 0]
    else:
        classes = list(classes)
        allowed = set(classes) | {0}
        present = set(np.unique(a)) | set(np.unique(b))
        if not present <= allowed:
            raise ContractError(
                f"labels {sorted(present - allowed)} outside class set")
    per_class = {}
    inter_sum = 0
    size_sum = 0
    for cls in classes:
        in_a = a == cls
        in_b = b == cls
        sa, sb = int(in_a.sum()), int(in_b.sum())
        if sa + sb == 0:
            per_class[cls] = None
            continue
        inter = int((in_a & in_b).sum())
        per_class[cls] = 2.0 * inter / (sa + sb)
        inter_sum += inter
        size_sum += sa + sb
    global_dice = 2.0 * inter_sum / size_sum if size_sum else None
    return DiceResult(per_class=per_class, global_dice=global_dice)


# ---------------------------------------------------------------------------
# comparison protocols
# ---------------------------------------------------------------------------

@dataclass
class ProtocolResult:
    mean: float
    std: float
    comparisons: int


def _draw_batch(source, batch: int, stream: SeedStream):
    if callable(source):
        return source(batch, stream)
    if len(source) < batch:
        raise ContractError(
            f"need {batch} volumes per trial, source has {len(source)}")
    idx = stream.permutation(len(source))[:batch]
    return [source[int(i)] for i in idx]


def ms_ssim_batch_protocol(source, n_trials: int, batch: int = 8, seed: int = 0,
                           **msssim_kwargs) -> ProtocolResult:
    """Per trial, draw ``batch`` volumes and average MS-SSIM over all
    unordered pairs; report mean/stddev over trials.

    ``source`` is either a sequence of volumes (sampled without
    replacement per trial) or a callable ``(count, stream) -> volumes``.
    """
    if n_trials < 1:
        raise ContractError("n_trials must be positive")
    stream = SeedStream(seed)
    trial_means = []
    pairs = batch * (batch - 1) // 2
    for _ in range(n_trials):
        vols = _draw_batch(source, batch, stream)
        vals = [ms_ssim_3d(vols[i], vols[j], **msssim_kwargs)
                for i in range(batch) for j in range(i + 1, batch)]
        trial_means.append(float(np.mean(vals)))
    return ProtocolResult(mean=float(np.mean(trial_means)),
                          std=float(np.std(trial_means)),
                          comparisons=pairs * n_trials)


@dataclass
class ProtocolConfig:
    """Comparison counts, scaled down from the full-scale protocol."""

    n_generated: int = 32
    pair_comparisons: int = 200
    msssim_trials: int = 5
    msssim_batch: int = 8
    msssim_scales: int = 3
    msssim_window: int = 7
    msssim_sigma: float = 1.5
    mmd_trials: int = 5
    mmd_subset: int = 16
    mmd_kernel: str = "linear"
    seed: int = 0


@dataclass
class MetricEntry:
    mean: float
    std: float
    comparisons: int


TABLE_COLUMNS = ("MS-SSIM", "NCC", "MAE", "MMD")


@dataclass
class MetricReport:
    model: str
    entries: dict[str, MetricEntry] = field(default_factory=dict)
    real_ms_ssim: MetricEntry | None = None

    def to_csv(self) -> str:
        header = ["model"]
        for col in TABLE_COLUMNS:
            header += [f"{col} mean", f"{col} std"]
        rows = [",".join(header)]
        cells = [self.model]
        for col in TABLE_COLUMNS:
            e = self.entries[col]
            cells += [f"{e.mean:.6g}", f"{e.std:.6g}"]
        rows.append(",".join(cells))
        if self.real_ms_ssim is not None:
            real = ["real", f"{self.real_ms_ssim.mean:.6g}",
                    f"{self.real_ms_ssim.std:.6g}"] + [""] * 6
            rows.append(",".join(real))
        return "\n".join(rows) + "\n"

    def to_text(self) -> str:
        width = 22
        lines = ["".ljust(10) + "".join(c.ljust(width) for c in TABLE_COLUMNS)]
        cells = []
        for col in TABLE_COLUMNS:
            e = self.entries[col]
            cells.append(f"{e.mean:.4f} ±{e.std:.4f}".ljust(width))
        lines.append(self.model[:9].ljust(10) + "".join(cells))
        if self.real_ms_ssim is not None:
            e = self.real_ms_ssim
            lines.append("real".ljust(10) + f"{e.mean:.4f} ±{e.std:.4f}")
        return "\n".join(lines) + "\n"


def evaluate_sets(real_set, generated_set, config: ProtocolConfig | None = None,
                  model_name: str = "model") -> MetricReport:
    """Table-shaped report comparing a generated set against a real set.

    NCC/MAE run over uniform random real-generated pairings (with
    replacement), MMD over sampled subsets, MS-SSIM via the batch
    protocol on both sets.
    """
    cfg = config or ProtocolConfig()
    if len(real_set) == 0 or len(generated_set) == 0:
        raise ContractError("evaluate_sets: empty volume set")
    pair_stream, mmd_stream = SeedStream(cfg.seed).spawn(2)
    report = MetricReport(model=model_name)

    ncc_vals, mae_vals = [], []
    for _ in range(cfg.pair_comparisons):
        gi = int(pair_stream.integers(0, len(generated_set)))
        ri = int(pair_stream.integers(0, len(real_set)))
        ncc_vals.append(ncc(generated_set[gi], real_set[ri]))
        mae_vals.append(mae(generated_set[gi], real_set[ri]))
    report.entries["NCC"] = MetricEntry(float(np.mean(ncc_vals)),
                                        float(np.std(ncc_vals)), len(ncc_vals))
    report.entries["MAE"] = MetricEntry(float(np.mean(mae_vals)),
                                        float(np.std(mae_vals)), len(mae_vals))

    mmd_vals = []
    for _ in range(cfg.mmd_trials):
        k = min(cfg.mmd_subset, len(real_set), len(generated_set))
        if k < 2:
            raise ContractError("mmd protocol needs >= 2 volumes per set")
        # without replacement: identical sets with a covering subset give 0
        gi = mmd_stream.permutation(len(generated_set))[:k]
        ri = mmd_stream.permutation(len(real_set))[:k]
        mmd_vals.append(mmd([generated_set[int(i)] for i in gi],
                            [real_set[int(i)] for i in ri],
                            kernel=cfg.mmd_kernel))
    report.entries["MMD"] = MetricEntry(float(np.mean(mmd_vals)),
                                        float(np.std(mmd_vals)),
                                        cfg.mmd_trials)

    ms_kwargs = dict(scales=cfg.msssim_scales, window=cfg.msssim_window,
                     sigma=cfg.msssim_sigma)
    gen = ms_ssim_batch_protocol(generated_set, cfg.msssim_trials,
                                 cfg.msssim_batch, seed=cfg.seed + 1,
                                 **ms_kwargs)
    report.entries["MS-SSIM"] = MetricEntry(gen.mean, gen.std, gen.comparisons)
    real = ms_ssim_batch_protocol(real_set, cfg.msssim_trials, cfg.msssim_batch,
                                  seed=cfg.seed + 2, **ms_kwargs)
    report.real_ms_ssim = MetricEntry(real.mean, real.std, real.comparisons)
    return report


def evaluate_model(bundle, real_set, config: ProtocolConfig | None = None) -> MetricReport:
    """Generate volumes from the bundle and compare them to the real set."""
    from .training import generate_volumes

    cfg = config or ProtocolConfig()
    if len(real_set) == 0:
        raise ContractError("evaluate_model: real set is empty")
    generated = generate_volumes(bundle, cfg.n_generated, SeedStream(cfg.seed))
    return evaluate_sets(real_set, generated, cfg, model_name=bundle.preset)

"""
Validation metrics: L1 / PSNR / SSIM against ground truth, per-tissue
intensity histograms, and cortical-thickness-change error statistics.
"""

from __future__ import annotations

import csv
import itertools
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage, stats

from .volume import Tissue, _as_array, check_same_shape

PSNR_CAP = 100.0
L1_REPORT_SCALE = 100.0


@dataclass
class MetricsReport:
    l1: float
    psnr: float
    ssim: float
    region: str = "whole"
    l1_scale: float = L1_REPORT_SCALE
    psnr_capped: bool = False

    @property
    def l1_scaled(self) -> float:
        return self.l1 * self.l1_scale

    def as_dict(self) -> dict:
        return {**asdict(self), "l1_scaled": self.l1_scaled}


def ssim_map(x: np.ndarray, y: np.ndarray, win: int = 7, data_range: float = 1.0,
             k1: float = 0.01, k2: float = 0.03) -> np.ndarray:
    """Voxelwise SSIM with a uniform ``win``-cube window and sample covariances."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = win ** x.ndim
    cov_norm = n / (n - 1)
    f = lambda a: ndimage.uniform_filter(a, size=win, mode="reflect")  # noqa: E731
    ux, uy = f(x), f(y)
    vx = cov_norm * (f(x * x) - ux * ux)
    vy = cov_norm * (f(y * y) - uy * uy)
    vxy = cov_norm * (f(x * y) - ux * uy)
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    return ((2 * ux * uy + c1) * (2 * vxy + c2)) / ((ux ** 2 + uy ** 2 + c1) * (vx + vy + c2))


def ssim(x, y, mask=None, win: int = 7, data_range: float = 1.0) -> float:
    """
    Mean SSIM. Without a mask the mean is over voxels whose window lies
    fully inside the volume; with a mask it is over mask voxels.
    """
    smap = ssim_map(x, y, win, data_range)
    if mask is not None:
        return float(smap[np.asarray(mask, dtype=bool)].mean())
    pad = (win - 1) // 2
    return float(smap[tuple(slice(pad, n - pad) for n in smap.shape)].mean())


def psnr(mse: float, cap: float = PSNR_CAP) -> tuple[float, bool]:
    if mse <= 0:
        return cap, True
    value = 10.0 * math.log10(1.0 / mse)
    return (cap, True) if value > cap else (value, False)


def compute_metrics(orig, pred, mask=None, win: int = 7) -> MetricsReport:
    """
    L1 (mean |diff|, reported also x100), PSNR on the [0, 1] scale and 3D
    SSIM, restricted to ``mask`` voxels when one is given.
    """
    o = _as_array(orig).astype(np.float64)
    p = _as_array(pred).astype(np.float64)
    check_same_shape(o, p)
    if mask is not None:
        m = _as_array(mask).astype(bool)
        check_same_shape(o, m)
        if not m.any():
            raise ValueError("empty evaluation mask")
        diff = (o - p)[m]
        region = "mask"
    else:
        m = None
        diff = (o - p).ravel()
        region = "whole"
    l1 = float(np.abs(diff).mean())
    value, capped = psnr(float(np.mean(diff ** 2)))
    return MetricsReport(l1, value, ssim(o, p, m, win), region, psnr_capped=capped)


# ---------------------------------------------------------------------------
# tissue histograms
# ---------------------------------------------------------------------------

@dataclass
class TissueHistogram:
    tissue: int
    edges: np.ndarray
    counts: np.ndarray
    n_voxels: int

    @property
    def empty(self) -> bool:
        return self.n_voxels == 0


def tissue_histograms(img, tis, classes: Sequence[int] = (Tissue.CORTICAL_GM, Tissue.WM, Tissue.CSF),
                      bins: int = 50, value_range=(0.0, 1.0), mask=None) -> list[TissueHistogram]:
    """Normalized intensity histogram of ``img`` over each tissue class (optionally within ``mask``)."""
    x, t = _as_array(img), _as_array(tis)
    check_same_shape(x, t)
    sel = np.ones(x.shape, dtype=bool) if mask is None else _as_array(mask).astype(bool)
    edges = np.linspace(value_range[0], value_range[1], bins + 1)
    out = []
    for c in classes:
        vals = np.clip(x[(t == c) & sel], *value_range)
        counts, _ = np.histogram(vals, bins=edges)
        total = counts.sum()
        norm = counts / total if total else np.zeros(bins)
        out.append(TissueHistogram(int(c), edges, norm, int(vals.size)))
    return out


def histogram_distance(a: TissueHistogram, b: TissueHistogram) -> float:
    """L1 distance between normalized counts."""
    if len(a.counts) != len(b.counts):
        raise ValueError("histograms have different bin counts")
    return float(np.abs(a.counts - b.counts).sum())


def plot_histograms(groups: dict[str, list[TissueHistogram]], path: os.PathLike | str) -> None:
    """One panel per tissue, one line per named group (e.g. original / base / fine-tuned)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    first = next(iter(groups.values()))
    fig, axes = plt.subplots(1, len(first), figsize=(4 * len(first), 3), squeeze=False)
    for i, ref in enumerate(first):
        ax = axes[0, i]
        centres = (ref.edges[:-1] + ref.edges[1:]) / 2
        for name, hists in groups.items():
            ax.plot(centres, hists[i].counts, label=name)
        ax.set_title(Tissue(ref.tissue).name)
        ax.set_xlabel("intensity")
    axes[0, 0].legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


# ---------------------------------------------------------------------------
# cortical thickness change errors
# ---------------------------------------------------------------------------

@dataclass
class CtChangeRecord:
    subject: str
    region: str
    method: str
    induced_mm: float
    measured_mm: float

    @property
    def error(self) -> float:
        return abs(self.induced_mm - self.measured_mm)


@dataclass
class PairedTest:
    region: str
    method_a: str
    method_b: str
    n: int
    mean_diff: float
    t: float
    p: float
    degenerate: bool = False
    significant: bool = False
    significant_bonferroni: bool = False


@dataclass
class CtChangeSummary:
    mean_error: dict[str, dict[str, float]]
    tests: list[PairedTest]
    alpha: float
    n_comparisons: int
    bonferroni_threshold: float = field(init=False)

    def __post_init__(self):
        self.bonferroni_threshold = self.alpha / self.n_comparisons


def read_ct_records(path: os.PathLike | str) -> list[CtChangeRecord]:
    """CSV with header ``subject,region,method,induced_mm,measured_mm``."""
    with open(path, newline="") as f:
        return [CtChangeRecord(r["subject"], r["region"], r["method"], float(r["induced_mm"]),
                               float(r["measured_mm"])) for r in csv.DictReader(f)]


def paired_t(a: Sequence[float], b: Sequence[float]) -> tuple[float, float, bool]:
    """
    Two-sided paired t-test of ``a - b``. Zero-variance differences (to
    rounding) are flagged degenerate: p = 1 when all differences are zero, else p = 0.
    """
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    if d.size < 2:
        raise ValueError("unpaired/insufficient data: need at least 2 pairs")
    mean = float(d.mean())
    # spread at rounding level counts as zero variance
    if np.ptp(d) <= 1e-12 * max(1.0, abs(mean)):
        if abs(mean) <= 1e-12:
            return 0.0, 1.0, True
        return math.copysign(math.inf, mean), 0.0, True
    res = stats.ttest_rel(a, b)
    return float(res.statistic), float(res.pvalue), False


def ct_change_error(records: Iterable[CtChangeRecord], alpha: float = 0.05,
                    n_comparisons: int | None = None) -> CtChangeSummary:
    """
    Per-region mean absolute CT-change error for each method, and paired
    t-tests between every method pair within each region (paired by
    subject). Bonferroni threshold is ``alpha / n_comparisons``, defaulting
    to the number of tests run.
    """
    table: dict[str, dict[str, dict[str, float]]] = {}
    for r in records:
        table.setdefault(r.region, {}).setdefault(r.method, {})[r.subject] = r.error
    if not table:
        raise ValueError("unpaired/insufficient data: no records")
    means = {region: {m: float(np.mean(list(v.values()))) for m, v in methods.items()}
             for region, methods in table.items()}
    tests = []
    for region, methods in sorted(table.items()):
        for ma, mb in itertools.combinations(sorted(methods), 2):
            subj_a, subj_b = set(methods[ma]), set(methods[mb])
            if subj_a != subj_b:
                raise ValueError(f"unpaired data in region {region!r}: {sorted(subj_a ^ subj_b)}")
            subjects = sorted(subj_a)
            a = [methods[ma][s] for s in subjects]
            b = [methods[mb][s] for s in subjects]
            t, p, degenerate = paired_t(a, b)
            tests.append(PairedTest(region, ma, mb, len(subjects), float(np.mean(np.subtract(a, b))),
                                    t, p, degenerate))
    if not tests:
        raise ValueError("unpaired/insufficient data: fewer than two methods per region")
    n = len(tests) if n_comparisons is None else n_comparisons
    summary = CtChangeSummary(means, tests, alpha, n)
    for t in tests:
        t.significant = t.p < alpha
        t.significant_bonferroni = t.p < summary.bonferroni_threshold
    return summary

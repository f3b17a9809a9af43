"""Evaluation metrics: PSNR, SSIM, and the Wilcoxon signed-rank test.

Both image metrics operate on intensities normalized to [0, 1]; CT volumes
are mapped with the fixed window [-1024, 3071] HU (hu_to_unit) so reported
values do not depend on per-dataset scaling. 3D inputs are scored slice by
slice and averaged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage, stats

from .errors import InsufficientDataError, shape_error
from .volume import CtVolume

HU_WINDOW = (-1024.0, 3071.0)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def hu_to_unit(values: np.ndarray) -> np.ndarray:
    """Map HU to [0, 1] with the fixed evaluation window, clamping outliers."""
    lo, hi = HU_WINDOW
    return np.clip((np.asarray(values, dtype=np.float64) - lo) / (hi - lo), 0.0, 1.0)


def psnr(reference: np.ndarray, test: np.ndarray) -> float:
    """10 * log10(1 / MSE) on unit-range images; inf when MSE is zero."""
    reference = np.asarray(reference, dtype=np.float64)
    test = np.asarray(test, dtype=np.float64)
    if reference.shape != test.shape:
        raise shape_error("metrics", f"psnr shapes differ: {reference.shape} vs {test.shape}")
    mse = float(np.mean((reference - test) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * math.log10(1.0 / mse)


def ssim(reference: np.ndarray, test: np.ndarray) -> float:
    """Mean local SSIM, 11x11 Gaussian window (sigma 1.5), unit dynamic range.

    Local statistics are Gaussian-weighted; the map is averaged over the
    valid region (window fully inside the image). 3D inputs are averaged
    slice-wise over z.
    """
    reference = np.asarray(reference, dtype=np.float64)
    test = np.asarray(test, dtype=np.float64)
    if reference.shape != test.shape:
        raise shape_error("metrics", f"ssim shapes differ: {reference.shape} vs {test.shape}")
    if reference.ndim == 3:
        return float(np.mean([ssim(r, t) for r, t in zip(reference, test)]))
    if reference.ndim != 2:
        raise shape_error("metrics", f"ssim expects 2D or 3D arrays, got {reference.ndim}D")
    if min(reference.shape) < SSIM_WINDOW:
        raise shape_error(
            "metrics", f"image {reference.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )
    win = _ssim_kernel()
    r = SSIM_WINDOW // 2

    def local_mean(img):
        return ndimage.correlate(img, win, mode="constant")[r:-r, r:-r]

    mu1 = local_mean(reference)
    mu2 = local_mean(test)
    m11 = local_mean(reference * reference)
    m22 = local_mean(test * test)
    m12 = local_mean(reference * test)
    var1 = m11 - mu1 * mu1
    var2 = m22 - mu2 * mu2
    cov = m12 - mu1 * mu2
    num = (2.0 * mu1 * mu2 + SSIM_C1) * (2.0 * cov + SSIM_C2)
    den = (mu1 * mu1 + mu2 * mu2 + SSIM_C1) * (var1 + var2 + SSIM_C2)
    return float(np.mean(num / den))


def wilcoxon_signed_rank(differences) -> tuple[float, float]:
    """Signed-rank test with mid-rank ties, zeros dropped.

    Returns (W, p) where W is the smaller of the two signed rank sums and p
    is two-sided from the normal approximation without continuity correction:
    z = (W - n(n+1)/4) / sqrt(n(n+1)(2n+1)/24).
    """
    d = np.asarray(differences, dtype=np.float64)
    d = d[d != 0.0]
    n = d.size
    if n < 5:
        raise InsufficientDataError(
            f"signed-rank test needs >= 5 nonzero differences, got {n}"
        )
    ranks = stats.rankdata(np.abs(d))
    w_pos = float(ranks[d > 0].sum())
    w_neg = float(ranks[d < 0].sum())
    w = min(w_pos, w_neg)
    mean = n * (n + 1) / 4.0
    sd = math.sqrt(n * (n + 1) * (2 * n + 1) / 24.0)
    z = (w - mean) / sd
    p = min(1.0, 2.0 * _phi(z))
    return w, p


def wilcoxon_exact_p(differences) -> float:
    """Two-sided exact p by enumerating all 2^n sign assignments (small n).

    Retained as a cross-check of the normal approximation's small-n gap.
    """
    d = np.asarray(differences, dtype=np.float64)
    d = d[d != 0.0]
    n = d.size
    if n < 1 or n > 20:
        raise InsufficientDataError(f"exact enumeration supports 1..20 differences, got {n}")
    ranks = stats.rankdata(np.abs(d))
    w_obs, _ = wilcoxon_signed_rank(d)
    total = ranks.sum()
    count = 0
    for mask in range(1 << n):
        w_pos = sum(ranks[i] for i in range(n) if mask >> i & 1)
        if min(w_pos, total - w_pos) <= w_obs:
            count += 1
    return count / (1 << n)


@dataclass
class CaseResult:
    name: str
    psnr: float
    ssim: float

    @property
    def psnr_infinite(self) -> bool:
        return math.isinf(self.psnr)


@dataclass
class EvalReport:
    """Per-case metrics plus aggregates and optional paired tests."""

    cases: list[CaseResult]
    psnr_mean: float
    psnr_std: float
    ssim_mean: float
    ssim_std: float
    single_case: bool
    wilcoxon_psnr: tuple[float, float] | None = None
    wilcoxon_ssim: tuple[float, float] | None = None
    label: str = ""
    notes: list[str] = field(default_factory=list)

    def to_text(self) -> str:
        lines = []
        if self.label:
            lines.append(f"variant {self.label}")
        for c in self.cases:
            p = "inf" if c.psnr_infinite else f"{c.psnr:.4f}"
            lines.append(f"case {c.name} psnr {p} ssim {c.ssim:.6f}")
        lines.append(
            f"aggregate n {len(self.cases)} psnr {self.psnr_mean:.4f} +- {self.psnr_std:.4f} "
            f"ssim {self.ssim_mean:.6f} +- {self.ssim_std:.6f}"
            + (" (single case, std undefined)" if self.single_case else "")
        )
        if self.wilcoxon_psnr is not None:
            w, p = self.wilcoxon_psnr
            lines.append(f"wilcoxon psnr-vs-baseline W {w:.3f} p {p:.4f}")
        if self.wilcoxon_ssim is not None:
            w, p = self.wilcoxon_ssim
            lines.append(f"wilcoxon ssim-vs-baseline W {w:.3f} p {p:.4f}")
        lines.extend(f"note {n}" for n in self.notes)
        return "\n".join(lines)


def evaluate(
    pairs,
    baseline=None,
    names: list[str] | None = None,
    label: str = "",
) -> EvalReport:
    """Score (reference, test) pairs; volumes are window-normalized first.

    With a baseline sequence (same references), a Wilcoxon signed-rank test is
    run on the per-case metric deltas test - baseline.
    """
    pairs = list(pairs)
    if not pairs:
        raise InsufficientDataError("evaluate needs at least one (reference, test) pair")
    if baseline is not None:
        baseline = list(baseline)
        if len(baseline) != len(pairs):
            raise InsufficientDataError(
                f"baseline count {len(baseline)} != pair count {len(pairs)}"
            )
    if names is None:
        names = [f"{i:02d}" for i in range(len(pairs))]

    cases = []
    base_metrics = []
    for i, (ref, test) in enumerate(pairs):
        ref_u = hu_to_unit(_values(ref))
        test_u = hu_to_unit(_values(test))
        cases.append(CaseResult(names[i], psnr(ref_u, test_u), ssim(ref_u, test_u)))
        if baseline is not None:
            base_u = hu_to_unit(_values(baseline[i]))
            base_metrics.append((psnr(ref_u, base_u), ssim(ref_u, base_u)))

    psnrs = np.array([c.psnr for c in cases])
    ssims = np.array([c.ssim for c in cases])
    single = len(cases) == 1
    finite = np.isfinite(psnrs)
    notes = [] if finite.all() else [f"{int((~finite).sum())} case(s) with zero error: psnr infinite, aggregated over finite cases"]
    pvals = psnrs[finite] if finite.any() else np.array([np.inf])
    report = EvalReport(
        cases=cases,
        psnr_mean=float(pvals.mean()),
        psnr_std=0.0 if pvals.size < 2 else float(pvals.std(ddof=1)),
        ssim_mean=float(ssims.mean()),
        ssim_std=0.0 if single else float(ssims.std(ddof=1)),
        single_case=single,
        label=label,
        notes=notes,
    )
    if baseline is not None:
        dp = [c.psnr - b[0] for c, b in zip(cases, base_metrics)]
        ds = [c.ssim - b[1] for c, b in zip(cases, base_metrics)]
        report.wilcoxon_psnr = wilcoxon_signed_rank(dp)
        report.wilcoxon_ssim = wilcoxon_signed_rank(ds)
    return report


_ssim_win_cache: np.ndarray | None = None


def _ssim_kernel() -> np.ndarray:
    global _ssim_win_cache
    if _ssim_win_cache is None:
        r = SSIM_WINDOW // 2
        yy, xx = np.meshgrid(np.arange(-r, r + 1), np.arange(-r, r + 1), indexing="ij")
        win = np.exp(-(xx**2 + yy**2) / (2.0 * SSIM_SIGMA**2))
        _ssim_win_cache = win / win.sum()
    return _ssim_win_cache


def _phi(z: float) -> float:
    return 0.5 * math.erfc(-z / math.sqrt(2.0))


def _values(obj) -> np.ndarray:
    return obj.data if isinstance(obj, CtVolume) else np.asarray(obj)

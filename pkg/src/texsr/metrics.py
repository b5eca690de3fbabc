"""Evaluation metrics: PSNR, SSIM, and the Wilcoxon signed-rank test.

SSIM follows the common convention: 11x11 Gaussian window (sigma 1.5),
K1 = 0.01, K2 = 0.03, dynamic range 1.0, mean over all fully-valid
window positions. Both metrics expect [0, 1] images; PSNR uses peak 1.0
unless told otherwise.

The signed-rank test ranks |differences| with midranks for ties, drops
zero differences, and reports a two-sided p-value: exact (full
enumeration of sign assignments, via the rank-sum count polynomial) for
n <= 20, a tie- and continuity-corrected normal approximation above.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
WILCOXON_EXACT_LIMIT = 20


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE) in dB; +inf for identical images."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"image dims differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    x = np.arange(size) - half
    g = np.exp(-0.5 * (x / sigma) ** 2)
    return g / g.sum()


def _filter_valid(img: np.ndarray, window: np.ndarray) -> np.ndarray:
    """Separable 'valid' correlation with a 1D window along both axes."""
    size = window.size
    h, w = img.shape
    rows = np.zeros((h - size + 1, w))
    for k in range(size):
        rows += window[k] * img[k:k + h - size + 1, :]
    out = np.zeros((h - size + 1, w - size + 1))
    for k in range(size):
        out += window[k] * rows[:, k:k + w - size + 1]
    return out


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean local structural similarity over valid 11x11 windows."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"image dims differ: {a.shape} vs {b.shape}")
    if min(a.shape) < SSIM_WINDOW:
        raise ShapeError(f"images must be at least {SSIM_WINDOW}px per side")
    win = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA)
    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2
    mu_a = _filter_valid(a, win)
    mu_b = _filter_valid(b, win)
    var_a = _filter_valid(a * a, win) - mu_a * mu_a
    var_b = _filter_valid(b * b, win) - mu_b * mu_b
    cov = _filter_valid(a * b, win) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


# ---------------------------------------------------------------------------
# Wilcoxon signed-rank test
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PairedScores:
    """Per-image metric values of two methods, aligned by image."""

    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.a, dtype=np.float64)
        b = np.asarray(self.b, dtype=np.float64)
        if a.shape != b.shape or a.ndim != 1:
            raise ShapeError("paired score vectors must be 1D of equal length")
        if np.isnan(a).any() or np.isnan(b).any():
            raise ShapeError("paired scores must not be NaN")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    @property
    def diffs(self) -> np.ndarray:
        # equal values (including two +inf PSNRs) count as zero difference
        out = np.zeros_like(self.a)
        unequal = self.a != self.b
        out[unequal] = self.a[unequal] - self.b[unequal]
        return out


@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float          # min(W+, W-)
    p_two_sided: float        # NaN when no decision is possible
    significant_at_0_05: bool
    n_used: int               # pairs left after dropping zero differences
    method: str               # "exact", "normal", or "no-decision"


def _midranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.size, dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def _exact_p(doubled_ranks: np.ndarray, doubled_w: int) -> float:
    """Two-sided exact p over all sign assignments of the given ranks.

    Counts subsets by their doubled-rank sum with a shift-add polynomial,
    then doubles the smaller tail of W+ (capped at 1).
    """
    total = int(doubled_ranks.sum())
    counts = np.zeros(total + 1, dtype=np.float64)
    counts[0] = 1.0
    for r in doubled_ranks:
        r = int(r)
        counts[r:] += counts[:counts.size - r].copy()
    n_assignments = 2.0 ** len(doubled_ranks)
    p_low = counts[:doubled_w + 1].sum() / n_assignments
    p_high = counts[doubled_w:].sum() / n_assignments
    return min(1.0, 2.0 * min(p_low, p_high))


def _normal_p(ranks: np.ndarray, w_plus: float) -> float:
    n = ranks.size
    mean = n * (n + 1) / 4.0
    var = n * (n + 1) * (2 * n + 1) / 24.0
    # tie correction: subtract sum(t^3 - t)/48 over tie groups
    _, tie_counts = np.unique(ranks, return_counts=True)
    var -= float(np.sum(tie_counts.astype(np.float64) ** 3 - tie_counts)) / 48.0
    if var <= 0:
        return 1.0
    d = w_plus - mean
    # continuity correction shrinks |d| by 0.5
    d -= 0.5 * np.sign(d)
    z = d / math.sqrt(var)
    return math.erfc(abs(z) / math.sqrt(2.0))


def wilcoxon_signed_rank(scores: PairedScores,
                         alpha: float = 0.05) -> WilcoxonResult:
    """Paired two-sided signed-rank test on scores.a - scores.b."""
    diffs = scores.diffs
    diffs = diffs[diffs != 0.0]
    n = diffs.size
    if n == 0:
        return WilcoxonResult(statistic=math.nan, p_two_sided=math.nan,
                              significant_at_0_05=False, n_used=0,
                              method="no-decision")
    ranks = _midranks(np.abs(diffs))
    w_plus = float(ranks[diffs > 0].sum())
    w_minus = float(ranks.sum()) - w_plus
    statistic = min(w_plus, w_minus)
    if n <= WILCOXON_EXACT_LIMIT:
        doubled = np.rint(2.0 * ranks).astype(np.int64)
        p = _exact_p(doubled, int(round(2.0 * w_plus)))
        method = "exact"
    else:
        p = _normal_p(ranks, w_plus)
        method = "normal"
    return WilcoxonResult(statistic=statistic, p_two_sided=p,
                          significant_at_0_05=bool(p < alpha), n_used=n,
                          method=method)

"""Image quality metrics: PSNR, SSIM (global statistics), CNR, GCNR, CR."""

from __future__ import annotations

import numpy as np

from .core import Image, Roi


class MetricError(ValueError):
    pass


def _values(img) -> np.ndarray:
    v = img.values if isinstance(img, Image) else np.asarray(img)
    return v.astype(np.float64)


def psnr(f, f_prime, mode: str = "standard") -> float:
    """Peak signal-to-noise ratio of f' against the reference f, in dB.

    standard: 20*log10(sqrt(n*m) * v_max / ||f - f'||_2), i.e. v_max over RMSE.
    paper:    20*log10(n*m * v_max / ||f - f'||_2) (verbatim written formula,
              an extra sqrt(n*m) relative to standard).
    v_max is the maximum value of the reference f.
    """
    if mode not in ("standard", "paper"):
        raise MetricError(f"unknown psnr mode {mode!r}")
    a, b = _values(f), _values(f_prime)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch {a.shape} vs {b.shape}")
    diff = np.linalg.norm(a - b)
    if diff == 0.0:
        raise MetricError("identical images give infinite PSNR")
    n_pix = a.size
    v_max = a.max()
    scale = n_pix if mode == "paper" else np.sqrt(n_pix)
    return float(20.0 * np.log10(scale * v_max / diff))


def ssim(f, f_prime, kappa1: float = 0.01, kappa2: float = 0.03) -> float:
    """Structural similarity from whole-image (population) statistics.

    c1 = (kappa1 * v_max)^2 and c2 = (kappa2 * v_max)^2 with v_max the maximum
    of the reference f. No sliding window: the statistics are global.
    """
    a, b = _values(f), _values(f_prime)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch {a.shape} vs {b.shape}")
    v_max = a.max()
    c1 = (kappa1 * v_max) ** 2
    c2 = (kappa2 * v_max) ** 2
    mu_a, mu_b = a.mean(), b.mean()
    var_a, var_b = a.var(), b.var()
    cov = ((a - mu_a) * (b - mu_b)).mean()
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(num / den)


def _roi_values(img, roi) -> np.ndarray:
    v = _values(img)
    if isinstance(roi, Roi):
        return roi.extract(v).ravel()
    return np.asarray(roi, dtype=np.float64).ravel()


def cnr(img, roi_s, roi_b) -> float:
    """|mu_S - mu_B| / sqrt(var_S + var_B) with population statistics."""
    s = _roi_values(img, roi_s)
    b = _roi_values(img, roi_b)
    if s.size < 4 or b.size < 4:
        raise MetricError("ROIs must hold at least 4 pixels")
    denom = np.sqrt(s.var() + b.var())
    if denom == 0.0:
        raise MetricError("degenerate regions: both ROIs are constant")
    return float(abs(s.mean() - b.mean()) / denom)


def gcnr(img, roi_s, roi_b, bins: int = 256) -> float:
    """1 - sum_b min(p_S, p_B) over a shared histogram spanning both ROIs."""
    if bins < 8:
        raise MetricError("gcnr needs at least 8 bins")
    s = _roi_values(img, roi_s)
    b = _roi_values(img, roi_b)
    if s.size == 0 or b.size == 0:
        raise MetricError("empty ROI")
    lo = min(s.min(), b.min())
    hi = max(s.max(), b.max())
    if hi == lo:
        hi = lo + 1.0  # all values identical: one shared bin, full overlap
    edges = np.linspace(lo, hi, bins + 1)
    p_s, _ = np.histogram(s, edges)
    p_b, _ = np.histogram(b, edges)
    overlap = np.minimum(p_s / s.size, p_b / b.size).sum()
    return float(1.0 - overlap)


def cr(img, roi_s, roi_b) -> float:
    """Contrast ratio |mu_S - mu_B| (noise-free contrast)."""
    s = _roi_values(img, roi_s)
    b = _roi_values(img, roi_b)
    return float(abs(s.mean() - b.mean()))


def mean_gradient_magnitude(img) -> float:
    """Sharpness proxy: mean magnitude of the image gradient."""
    v = _values(img)
    gy, gx = np.gradient(v)
    return float(np.hypot(gy, gx).mean())

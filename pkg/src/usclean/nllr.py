"""Non-local low-rank despeckling.

A guidance image (Gaussian blur of the input) drives patch similarity; groups
of similar patches are decomposed into low-rank + sparse parts by ADMM, and
the low-rank columns are scattered back with uniform overlap averaging.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.ndimage import gaussian_filter

from .core import Image, normalize_intensity


class NllrError(ValueError):
    pass


@dataclass
class NllrConfig:
    patch: int = 8                 # patch side p
    search: int = 21               # search window side s
    group: int = 32                # patches per group K
    lam_l: float = 1.0             # low-rank weight (singular-value threshold lam_l/rho)
    lam_s: float = 0.125           # sparse weight (soft threshold lam_s/rho), default 1/sqrt(p^2)
    rho: float | str = "auto"      # ADMM penalty; "auto" = 1.25 / sigma_1(M)
    admm_iters: int = 60
    sigma_g: float = 1.5           # guidance blur width
    stride: int | None = None      # reference grid stride, default p // 2

    def __post_init__(self):
        if self.patch > self.search:
            raise NllrError(f"patch {self.patch} larger than search window {self.search}")
        if self.group < 2:
            raise NllrError("group size must be >= 2")
        if self.sigma_g < 0:
            raise NllrError("sigma_g must be >= 0")

    @property
    def grid_stride(self) -> int:
        return self.stride if self.stride is not None else max(1, self.patch // 2)

    def to_dict(self) -> dict:
        return {
            "patch": self.patch, "search": self.search, "group": self.group,
            "lam_l": self.lam_l, "lam_s": self.lam_s, "rho": self.rho,
            "admm_iters": self.admm_iters, "sigma_g": self.sigma_g, "stride": self.stride,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NllrConfig":
        return cls(**d)


@dataclass
class PatchGroup:
    """Vectorized similar patches (p^2 x K) and their top-left coordinates."""

    matrix: np.ndarray
    coords: list[tuple[int, int]]

    def __post_init__(self):
        if self.matrix.shape[1] != len(self.coords):
            raise NllrError("column count does not match coordinate count")


@dataclass
class RpcaResult:
    low_rank: np.ndarray
    sparse: np.ndarray
    residual: float
    iterations: int
    converged: bool


def guidance(y: np.ndarray | Image, sigma_g: float) -> np.ndarray:
    """Gaussian-blurred reference used only for patch similarity."""
    if sigma_g < 0:
        raise NllrError("sigma_g must be >= 0")
    v = y.values if isinstance(y, Image) else np.asarray(y, dtype=np.float64)
    return gaussian_filter(v.astype(np.float64), sigma_g)


def group_patches(guide: np.ndarray, ref: tuple[int, int], cfg: NllrConfig,
                  source: np.ndarray | None = None) -> PatchGroup:
    """K most similar patches to the reference within the search window.

    Distances are evaluated on the guidance image; the group matrix is built
    from ``source`` (the noisy image) when given, else from the guidance.
    The reference patch is always column 0; remaining columns are the best
    candidates ordered by (distance, raster index), so selection is canonical
    under ties. Windows are truncated at borders; short groups are padded by
    repeating the nearest patch.
    """
    guide = np.asarray(guide, dtype=np.float64)
    src = guide if source is None else np.asarray(source, dtype=np.float64)
    p = cfg.patch
    h, w = guide.shape
    ry, rx = ref
    if not (0 <= ry <= h - p and 0 <= rx <= w - p):
        raise NllrError(f"reference patch {ref} outside bounds for {h}x{w} image")
    half = (cfg.search - p) // 2
    r0, r1 = max(0, ry - half), min(h - p, ry + half)
    c0, c1 = max(0, rx - half), min(w - p, rx + half)
    windows = sliding_window_view(guide, (p, p))
    cand = windows[r0 : r1 + 1, c0 : c1 + 1]
    dist = ((cand - windows[ry, rx]) ** 2).sum(axis=(2, 3)).ravel()
    ncols = c1 - c0 + 1
    ref_flat = (ry - r0) * ncols + (rx - c0)
    order = np.argsort(dist, kind="stable")
    picked = [ref_flat]
    for idx in order:
        if len(picked) >= cfg.group:
            break
        if idx != ref_flat:
            picked.append(int(idx))
    while len(picked) < cfg.group:
        picked.append(picked[1] if len(picked) > 1 else picked[0])
    coords = [(r0 + q // ncols, c0 + q % ncols) for q in picked]
    src_windows = sliding_window_view(src, (p, p))
    matrix = np.stack([src_windows[a, b].reshape(-1) for a, b in coords], axis=1)
    return PatchGroup(matrix=matrix, coords=coords)


def _svt(m: np.ndarray, tau: float) -> np.ndarray:
    u, s, vt = np.linalg.svd(m, full_matrices=False)
    s = np.maximum(s - tau, 0.0)
    return (u * s) @ vt


def _soft(m: np.ndarray, tau: float) -> np.ndarray:
    return np.sign(m) * np.maximum(np.abs(m) - tau, 0.0)


def rpca_admm(
    m: np.ndarray,
    lam_s: float,
    rho: float | str = "auto",
    iters: int = 500,
    lam_l: float = 1.0,
    tol: float = 1e-6,
) -> RpcaResult:
    """Low-rank + sparse split of ``m`` under the constraint m = L + S.

    Alternates singular-value thresholding on L (threshold lam_l/rho), soft
    thresholding on S (threshold lam_s/rho) and a dual ascent on the
    multiplier. Stops at ``iters`` or relative residual below ``tol``;
    non-convergence is reported through the returned residual, not an error.
    """
    m = np.asarray(m, dtype=np.float64)
    if not np.isfinite(m).all():
        raise NllrError("rpca input contains non-finite values")
    norm_m = np.linalg.norm(m)
    if norm_m == 0.0:
        z = np.zeros_like(m)
        return RpcaResult(z, z.copy(), 0.0, 0, True)
    if rho == "auto":
        rho_val = 1.25 / np.linalg.svd(m, compute_uv=False)[0]
    else:
        rho_val = float(rho)
    low = np.zeros_like(m)
    sparse = np.zeros_like(m)
    dual = np.zeros_like(m)
    resid = np.inf
    it = 0
    for it in range(1, iters + 1):
        low = _svt(m - sparse + dual / rho_val, lam_l / rho_val)
        sparse = _soft(m - low + dual / rho_val, lam_s / rho_val)
        gap = m - low - sparse
        dual += rho_val * gap
        resid = float(np.linalg.norm(gap) / norm_m)
        if resid < tol:
            break
    return RpcaResult(low, sparse, resid, it, resid < tol)


def despeckle_nllr(img: Image, cfg: NllrConfig, info: dict | None = None) -> Image:
    """Despeckle by non-local low-rank filtering; output re-normalized.

    Reference patches sit on a stride-p/2 grid (clamped to cover the borders);
    every group's low-rank columns are scattered back and averaged with
    uniform weights, which reconstructs unmodified groups exactly.
    """
    y = img.values.astype(np.float64)
    p = cfg.patch
    h, w = y.shape
    if p > min(h, w):
        raise NllrError(f"patch {p} larger than image {h}x{w}")
    guide = guidance(y, cfg.sigma_g)
    stride = cfg.grid_stride
    rows = sorted(set(list(range(0, h - p + 1, stride)) + [h - p]))
    cols = sorted(set(list(range(0, w - p + 1, stride)) + [w - p]))
    acc = np.zeros_like(y)
    weight = np.zeros_like(y)
    worst_resid = 0.0
    unconverged = 0
    for ry in rows:
        for rx in cols:
            grp = group_patches(guide, (ry, rx), cfg, source=y)
            res = rpca_admm(grp.matrix, cfg.lam_s, cfg.rho, cfg.admm_iters, cfg.lam_l)
            worst_resid = max(worst_resid, res.residual)
            unconverged += 0 if res.converged else 1
            for j, (a, b) in enumerate(grp.coords):
                acc[a : a + p, b : b + p] += res.low_rank[:, j].reshape(p, p)
                weight[a : a + p, b : b + p] += 1.0
    if (weight == 0).any():
        raise NllrError("reference grid left uncovered pixels")
    out = acc / weight
    if info is not None:
        info["worst_residual"] = worst_resid
        info["unconverged_groups"] = unconverged
    return normalize_intensity(out, *img.range)

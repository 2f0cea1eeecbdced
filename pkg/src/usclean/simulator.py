"""Synthetic B-mode ultrasound simulator.

The chain is deliberately simple: random point scatterers, a separable
Gaussian-modulated-cosine point spread function, per-channel decorrelation
noise, channel averaging (delay-and-sum with perfect delay correction), and an
envelope + log-compression display step. It reproduces the two artifact
classes the rest of the package removes: blur from the finite-bandwidth PSF
and speckle from interference.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.signal import fftconvolve, hilbert

from .core import (
    CoreError,
    DOMAIN_DIRS,
    Image,
    Roi,
    RngState,
    normalize_intensity,
    save_image,
    save_rois,
)

LOG_FLOOR_DB = -60.0


class SimulatorError(ValueError):
    pass


@dataclass(frozen=True)
class Psf:
    """Separable Gaussian-modulated-cosine kernel, energy-normalized."""

    f0: float          # axial center frequency, cycles/sample
    sigma_ax: float    # axial Gaussian width, samples
    sigma_lat: float   # lateral Gaussian width, samples

    def __post_init__(self):
        if self.sigma_ax <= 0 or self.sigma_lat <= 0:
            raise SimulatorError("psf widths must be positive")
        if self.f0 < 0 or self.f0 >= 0.5:
            raise SimulatorError(f"f0={self.f0} outside [0, 0.5) cycles/sample (aliasing)")

    @property
    def half_ax(self) -> int:
        return int(np.ceil(3 * self.sigma_ax))

    @property
    def half_lat(self) -> int:
        return int(np.ceil(3 * self.sigma_lat))

    def kernel(self) -> np.ndarray:
        a = np.arange(-self.half_ax, self.half_ax + 1, dtype=np.float64)[:, None]
        b = np.arange(-self.half_lat, self.half_lat + 1, dtype=np.float64)[None, :]
        k = (
            np.exp(-(a ** 2) / (2 * self.sigma_ax ** 2))
            * np.cos(2 * np.pi * self.f0 * a)
            * np.exp(-(b ** 2) / (2 * self.sigma_lat ** 2))
        )
        return k / np.sqrt((k ** 2).sum())


def make_psf(f0: float, sigma_ax: float, sigma_lat: float) -> Psf:
    return Psf(f0=float(f0), sigma_ax=float(sigma_ax), sigma_lat=float(sigma_lat))


@dataclass(frozen=True)
class Ellipse:
    """Elliptic inclusion; contrast multiplies scatterer amplitudes inside."""

    cy: float
    cx: float
    ry: float
    rx: float
    contrast: float

    def __post_init__(self):
        if self.contrast < 0:
            raise SimulatorError("inclusion contrast must be >= 0")

    def mask(self, h: int, w: int) -> np.ndarray:
        yy, xx = np.mgrid[0:h, 0:w]
        return ((yy - self.cy) / self.ry) ** 2 + ((xx - self.cx) / self.rx) ** 2 <= 1.0


@dataclass
class PhantomSpec:
    """Everything needed to simulate one phantom deterministically."""

    height: int = 64
    width: int = 64
    density: float = 0.25                  # scatterer probability per pixel
    amplitude: dict = field(default_factory=lambda: {"kind": "rayleigh", "scale": 1.0})
    inclusions: list[Ellipse] = field(default_factory=list)
    channels: int = 64                     # receive aperture size N
    rho_ch: float = 0.5                    # per-channel decorrelation in [0, 1]
    psf: Psf = field(default_factory=lambda: make_psf(0.25, 2.0, 3.0))

    def __post_init__(self):
        if not 0 < self.density <= 1:
            raise SimulatorError(f"density must be in (0, 1], got {self.density}")
        if self.channels < 2:
            raise SimulatorError("need at least 2 channels")
        if not 0 <= self.rho_ch <= 1:
            raise SimulatorError(f"rho_ch must be in [0, 1], got {self.rho_ch}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["psf"] = {"f0": self.psf.f0, "sigma_ax": self.psf.sigma_ax, "sigma_lat": self.psf.sigma_lat}
        d["inclusions"] = [asdict(e) for e in self.inclusions]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        d = dict(d)
        if "psf" in d:
            d["psf"] = Psf(**d["psf"])
        d["inclusions"] = [Ellipse(**e) for e in d.get("inclusions", [])]
        return cls(**d)


@dataclass
class ReflectivityMap:
    """Tissue reflectivity (non-negative scatter amplitudes) with ROI annotations."""

    values: np.ndarray
    rois: list[Roi]

    def __post_init__(self):
        if (self.values < 0).any():
            raise SimulatorError("reflectivity amplitudes must be non-negative")


@dataclass
class ChannelData:
    """Per-channel delay-corrected samples, shape (N, H, W)."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 3 or v.shape[0] < 2:
            raise SimulatorError(f"channel data must be (N>=2, H, W), got {v.shape}")
        if not np.isfinite(v).all():
            raise SimulatorError("channel data contains non-finite values")

    @property
    def n_channels(self) -> int:
        return self.values.shape[0]


def _draw_amplitudes(amplitude: dict, shape, gen: np.random.Generator) -> np.ndarray:
    kind = amplitude.get("kind", "rayleigh")
    if kind == "rayleigh":
        return gen.rayleigh(amplitude.get("scale", 1.0), shape)
    if kind == "uniform":
        return gen.uniform(amplitude.get("lo", 0.5), amplitude.get("hi", 1.5), shape)
    if kind == "constant":
        return np.full(shape, amplitude.get("value", 1.0))
    raise SimulatorError(f"unknown amplitude distribution {kind!r}")


def generate_scatterers(spec: PhantomSpec, rng: RngState) -> ReflectivityMap:
    """Bernoulli scatterer placement with inclusion contrast applied.

    Emits a structure ROI inside each inclusion plus one background ROI of
    matching size placed clear of every inclusion.
    """
    gen = rng.generator()
    h, w = spec.height, spec.width
    placed = gen.random((h, w)) < spec.density
    amps = _draw_amplitudes(spec.amplitude, (h, w), gen)
    refl = np.where(placed, np.abs(amps), 0.0)
    occupied = np.zeros((h, w), dtype=bool)
    rois: list[Roi] = []
    for i, inc in enumerate(spec.inclusions):
        m = inc.mask(h, w)
        refl[m] *= inc.contrast
        occupied |= m
        rois.append(_structure_roi(inc, i, h, w))
    for i, inc in enumerate(spec.inclusions):
        rois.append(_background_roi(rois[i], inc, i, occupied, spec))
    return ReflectivityMap(values=refl, rois=rois)


def _structure_roi(inc: Ellipse, idx: int, h: int, w: int) -> Roi:
    # rectangle inscribed in the ellipse, shrunk for a safety margin
    rw = max(2, int(2 * inc.rx / np.sqrt(2) * 0.85))
    rh = max(2, int(2 * inc.ry / np.sqrt(2) * 0.85))
    x = int(round(inc.cx - rw / 2))
    y = int(round(inc.cy - rh / 2))
    x = min(max(x, 0), w - rw)
    y = min(max(y, 0), h - rh)
    return Roi(name=f"structure_{idx}", x=x, y=y, w=rw, h=rh, role="structure")


def _background_roi(sroi: Roi, inc: Ellipse, idx: int, occupied: np.ndarray, spec: PhantomSpec) -> Roi:
    """Same-size rectangle at the same rows, laterally clear of all inclusions."""
    h, w = occupied.shape
    margin = int(np.ceil(2 * spec.psf.sigma_lat)) + 2
    for x in list(range(0, w - sroi.w + 1)):
        cand = Roi(name=f"background_{idx}", x=x, y=sroi.y, w=sroi.w, h=sroi.h, role="background")
        xlo, xhi = max(0, x - margin), min(w, x + sroi.w + margin)
        if not occupied[sroi.y : sroi.y + sroi.h, xlo:xhi].any():
            return cand
    # fall back to the farthest corner if the image is crowded
    x = 0 if inc.cx > w / 2 else w - sroi.w
    y = 0 if inc.cy > h / 2 else h - sroi.h
    return Roi(name=f"background_{idx}", x=x, y=y, w=sroi.w, h=sroi.h, role="background")


def simulate_channels(refl: ReflectivityMap, psf: Psf, spec: PhantomSpec, rng: RngState) -> ChannelData:
    """Per-channel RF: blur of a multiplicatively perturbed reflectivity.

    Channel c sees conv(refl * (1 + rho_ch * g_c), psf) with g_c iid standard
    normal, i.e. a unit-mean noise field convolved with the same psf, so that
    averaging leaves interference-like residual speckle.
    """
    k = psf.kernel()
    if k.shape[0] > spec.height or k.shape[1] > spec.width:
        raise SimulatorError(
            f"psf kernel {k.shape} does not fit inside image {spec.height}x{spec.width}"
        )
    gen = rng.generator()
    rf = fftconvolve(refl.values, k, mode="same")
    if spec.rho_ch == 0.0:
        chans = np.broadcast_to(rf, (spec.channels,) + rf.shape).copy()
        return ChannelData(values=chans)
    chans = np.empty((spec.channels,) + rf.shape)
    for c in range(spec.channels):
        noise = 1.0 + spec.rho_ch * gen.standard_normal(rf.shape)
        chans[c] = fftconvolve(refl.values * noise, k, mode="same")
    return ChannelData(values=chans)


def das(ch: ChannelData) -> np.ndarray:
    """Delay-and-sum with perfect delay correction: the channel mean."""
    return ch.values.mean(axis=0)


def bmode(rf: np.ndarray, floor_db: float = LOG_FLOOR_DB) -> Image:
    """Envelope (axial analytic signal), log compression, clip, normalize to (-1, 1)."""
    rf = np.asarray(rf, dtype=np.float64)
    if not np.isfinite(rf).all():
        raise SimulatorError("rf contains non-finite values")
    env = np.abs(hilbert(rf, axis=0))
    peak = env.max()
    if peak == 0.0:
        raise SimulatorError("all-zero rf field (log compression undefined)")
    db = 20.0 * np.log10(np.maximum(env, peak * 1e-12) / peak)
    return normalize_intensity(np.maximum(db, floor_db))


def simulate_bmode(spec: PhantomSpec, rng: RngState) -> tuple[Image, list[Roi]]:
    """Full chain: scatterers -> channels -> DAS -> B-mode display."""
    refl = generate_scatterers(spec, rng)
    ch = simulate_channels(refl, spec.psf, spec, rng)
    return bmode(das(ch)), refl.rois


# ---------------------------------------------------------------------------
# random phantom population + dataset builder
# ---------------------------------------------------------------------------

@dataclass
class PopulationSpec:
    """Distribution over PhantomSpec used to build dataset pools."""

    base: PhantomSpec = field(default_factory=PhantomSpec)
    hyper_fraction: float = 0.35           # probability an inclusion is hyperechoic
    hyper_contrast: tuple[float, float] = (2.5, 3.5)
    hypo_contrast: tuple[float, float] = (0.15, 0.35)
    radius_y: tuple[float, float] = (7.0, 10.0)
    radius_x: tuple[float, float] = (6.0, 9.0)
    center_jitter: float = 5.0

    def sample(self, gen: np.random.Generator) -> PhantomSpec:
        h, w = self.base.height, self.base.width
        ry = gen.uniform(*self.radius_y)
        rx = gen.uniform(*self.radius_x)
        cy = h / 2 + gen.uniform(-self.center_jitter, self.center_jitter)
        cx = w / 2 + gen.uniform(-self.center_jitter, self.center_jitter)
        if gen.random() < self.hyper_fraction:
            contrast = gen.uniform(*self.hyper_contrast)
        else:
            contrast = gen.uniform(*self.hypo_contrast)
        inc = Ellipse(cy=float(cy), cx=float(cx), ry=float(ry), rx=float(rx), contrast=float(contrast))
        spec = PhantomSpec(
            height=h,
            width=w,
            density=self.base.density,
            amplitude=dict(self.base.amplitude),
            inclusions=[inc],
            channels=self.base.channels,
            rho_ch=self.base.rho_ch,
            psf=self.base.psf,
        )
        return spec

    def to_dict(self) -> dict:
        return {
            "base": self.base.to_dict(),
            "hyper_fraction": self.hyper_fraction,
            "hyper_contrast": list(self.hyper_contrast),
            "hypo_contrast": list(self.hypo_contrast),
            "radius_y": list(self.radius_y),
            "radius_x": list(self.radius_x),
            "center_jitter": self.center_jitter,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PopulationSpec":
        d = dict(d)
        d["base"] = PhantomSpec.from_dict(d["base"])
        for key in ("hyper_contrast", "hypo_contrast", "radius_y", "radius_x"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def build_dataset(
    population: PopulationSpec,
    count: int,
    seed: int,
    out_dir: str | os.PathLike,
    overwrite: bool = False,
) -> dict:
    """Simulate ``count`` source images into the dataset layout.

    Stream 2*i derives the phantom spec for image i, stream 2*i+1 drives its
    simulation, so images are independent and rebuildable one by one.
    """
    if count < 1:
        raise SimulatorError(f"count must be >= 1, got {count}")
    out_dir = str(out_dir)
    if os.path.isdir(out_dir) and os.listdir(out_dir) and not overwrite:
        raise CoreError(f"output directory {out_dir} is not empty (pass overwrite to replace)")
    src_dir = os.path.join(out_dir, DOMAIN_DIRS["source"])
    os.makedirs(src_dir, exist_ok=True)
    records = []
    for i in range(count):
        spec = population.sample(RngState(seed, 2 * i).generator())
        img, rois = simulate_bmode(spec, RngState(seed, 2 * i + 1))
        name = f"img_{i:05d}"
        save_image(os.path.join(src_dir, name), img)
        save_rois(os.path.join(src_dir, name + ".rois.json"), rois)
        records.append(
            {
                "name": name,
                "seed": seed,
                "spec_stream": 2 * i,
                "sim_stream": 2 * i + 1,
                "spec": spec.to_dict(),
                "rois": [r.to_dict() for r in rois],
            }
        )
    manifest = {
        "kind": "usclean-dataset",
        "seed": seed,
        "count": count,
        "population": population.to_dict(),
        "source_images": records,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2)
    return manifest

"""Shared data model: images, domain masks, ROIs, datasets, file formats, RNG streams.

Conventions used across the package:
  * images are 2-D float32 arrays, row-major, with a declared intensity range
    (default (-1, 1));
  * image files are raw 32-bit little-endian floats (``<name>.f32``) next to a
    JSON sidecar ``<name>.json`` holding shape and range;
  * randomness is counter-based (Philox) keyed by (seed, stream) so every
    consumer owns an independent, replayable stream.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

DEFAULT_RANGE = (-1.0, 1.0)

# dataset sub-directory per domain, in mask-bit order
DOMAIN_DIRS = {
    "source": "domain1",
    "deconv": "domain2_deconv",
    "despeckle": "domain3_despeckle",
    "both": "domain4_both",
}


class CoreError(ValueError):
    """Raised on contract violations in core data handling."""


@dataclass(frozen=True)
class Image:
    """A single-channel picture with a declared intensity range."""

    values: np.ndarray
    range: tuple[float, float] = DEFAULT_RANGE

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim != 2:
            raise CoreError(f"image must be 2-D, got shape {v.shape}")
        if v.shape[0] < 8 or v.shape[1] < 8:
            raise CoreError(f"image must be at least 8x8, got {v.shape}")
        bad = np.argwhere(~np.isfinite(v))
        if bad.size:
            r, c = bad[0]
            raise CoreError(f"non-finite value at (row={r}, col={c})")
        lo, hi = self.range
        if not hi > lo:
            raise CoreError(f"invalid range ({lo}, {hi})")
        eps = 1e-5 * (hi - lo)
        if v.min() < lo - eps or v.max() > hi + eps:
            raise CoreError(
                f"values [{v.min():.6g}, {v.max():.6g}] outside declared range ({lo}, {hi})"
            )
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "range", (float(lo), float(hi)))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class DomainMask:
    """Binary vector selecting the generator's target domain(s)."""

    bits: tuple[int, ...]

    def __post_init__(self):
        bits = tuple(int(b) for b in self.bits)
        if len(bits) not in (2, 3):
            raise CoreError(f"mask length must be 2 or 3, got {len(bits)}")
        if any(b not in (0, 1) for b in bits):
            raise CoreError(f"mask bits must be 0/1, got {bits}")
        if not any(bits):
            raise CoreError("mask must have at least one bit set")
        object.__setattr__(self, "bits", bits)

    def __len__(self) -> int:
        return len(self.bits)

    def __iter__(self):
        return iter(self.bits)


# legal mask sets per domain mode; "3domain-2bit" reuses two bits for three
# domains ([1,1] selects the combined deconv+despeckle domain)
DOMAIN_MODES = {
    "2domain": ((1, 0), (0, 1)),
    "3domain-2bit": ((1, 0), (0, 1), (1, 1)),
    "3domain-3bit": ((1, 0, 0), (0, 1, 0), (0, 0, 1)),
}

# domain key order shared by masks, pools and the classifier label layout
DOMAIN_ORDER = {
    "2domain": ("deconv", "despeckle"),
    "3domain-2bit": ("deconv", "despeckle", "both"),
    "3domain-3bit": ("deconv", "despeckle", "both"),
}


def legal_masks(mode: str) -> tuple[DomainMask, ...]:
    if mode not in DOMAIN_MODES:
        raise CoreError(f"unknown domain mode {mode!r}; expected one of {sorted(DOMAIN_MODES)}")
    return tuple(DomainMask(bits) for bits in DOMAIN_MODES[mode])


def mask_for_domain(mode: str, domain: str) -> DomainMask:
    order = DOMAIN_ORDER[mode]
    if domain not in order:
        raise CoreError(f"domain {domain!r} not available in mode {mode!r}")
    return legal_masks(mode)[order.index(domain)]


@dataclass(frozen=True)
class Roi:
    """Rectangular region of interest (x, y = top-left corner in pixels)."""

    name: str
    x: int
    y: int
    w: int
    h: int
    role: str  # "structure" or "background"

    def __post_init__(self):
        if self.role not in ("structure", "background"):
            raise CoreError(f"roi role must be structure/background, got {self.role!r}")
        if self.w * self.h < 4:
            raise CoreError(f"roi {self.name!r} smaller than 4 pixels")
        if self.x < 0 or self.y < 0:
            raise CoreError(f"roi {self.name!r} has negative origin")

    def check_inside(self, height: int, width: int) -> None:
        if self.y + self.h > height or self.x + self.w > width:
            raise CoreError(f"roi {self.name!r} exceeds image bounds {height}x{width}")

    def extract(self, values: np.ndarray) -> np.ndarray:
        self.check_inside(*values.shape)
        return values[self.y : self.y + self.h, self.x : self.x + self.w]

    def to_dict(self) -> dict:
        return {"name": self.name, "x": self.x, "y": self.y, "w": self.w, "h": self.h, "role": self.role}

    @classmethod
    def from_dict(cls, d: dict) -> "Roi":
        return cls(name=d["name"], x=int(d["x"]), y=int(d["y"]), w=int(d["w"]), h=int(d["h"]), role=d["role"])


def save_rois(path: str | os.PathLike, rois: list[Roi]) -> None:
    with open(path, "w") as f:
        json.dump([r.to_dict() for r in rois], f, indent=2)


def load_rois(path: str | os.PathLike) -> list[Roi]:
    with open(path) as f:
        return [Roi.from_dict(d) for d in json.load(f)]


# ---------------------------------------------------------------------------
# deterministic randomness
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RngState:
    """Key of a counter-based random stream: (seed, stream id)."""

    seed: int
    stream: int = 0

    def generator(self) -> np.random.Generator:
        key = np.array([self.seed & 0xFFFFFFFFFFFFFFFF, self.stream & 0xFFFFFFFFFFFFFFFF],
                       dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))


def rng_state_dict(gen: np.random.Generator) -> dict:
    """JSON-serializable snapshot of a generator's position."""
    state = gen.bit_generator.state
    return {
        "bit_generator": state["bit_generator"],
        "state": {
            "counter": [int(x) for x in state["state"]["counter"]],
            "key": [int(x) for x in state["state"]["key"]],
        },
        "buffer": [int(x) for x in state["buffer"]],
        "buffer_pos": int(state["buffer_pos"]),
        "has_uint32": int(state["has_uint32"]),
        "uinteger": int(state["uinteger"]),
    }


def rng_from_state_dict(d: dict) -> np.random.Generator:
    if d["bit_generator"] != "Philox":
        raise CoreError(f"unsupported bit generator {d['bit_generator']!r}")
    bg = np.random.Philox()
    bg.state = {
        "bit_generator": "Philox",
        "state": {
            "counter": np.array(d["state"]["counter"], dtype=np.uint64),
            "key": np.array(d["state"]["key"], dtype=np.uint64),
        },
        "buffer": np.array(d["buffer"], dtype=np.uint64),
        "buffer_pos": d["buffer_pos"],
        "has_uint32": d["has_uint32"],
        "uinteger": d["uinteger"],
    }
    return np.random.Generator(bg)


# ---------------------------------------------------------------------------
# intensity handling
# ---------------------------------------------------------------------------

def normalize_intensity(values: np.ndarray | Image, lo: float = -1.0, hi: float = 1.0) -> Image:
    """Affinely map min(values)->lo and max(values)->hi.

    Constant inputs map to the midpoint (lo+hi)/2 instead of erroring, so that
    degenerate simulator tiles cannot abort a pipeline.
    """
    if hi <= lo:
        raise CoreError(f"normalize range requires hi > lo, got ({lo}, {hi})")
    v = values.values if isinstance(values, Image) else np.asarray(values, dtype=np.float64)
    bad = np.argwhere(~np.isfinite(v))
    if bad.size:
        r, c = bad[0]
        raise CoreError(f"non-finite value at (row={r}, col={c})")
    mn, mx = float(v.min()), float(v.max())
    if mx == mn:
        out = np.full(v.shape, (lo + hi) / 2.0, dtype=np.float32)
    else:
        out = ((v - mn) / (mx - mn) * (hi - lo) + lo).astype(np.float32)
        # guard float32 rounding at the端 points
        out = np.clip(out, lo, hi)
    return Image(out, (lo, hi))


def mask_planes(mask: DomainMask, h: int, w: int) -> np.ndarray:
    """Broadcast mask bits to constant channel planes of shape (len(mask), h, w)."""
    if h < 8 or w < 8:
        raise CoreError(f"plane size must be at least 8x8, got {h}x{w}")
    bits = np.asarray(mask.bits, dtype=np.float32)
    return np.broadcast_to(bits[:, None, None], (len(bits), h, w)).copy()


# ---------------------------------------------------------------------------
# image files
# ---------------------------------------------------------------------------

def save_image(path: str | os.PathLike, img: Image) -> None:
    """Write ``<path>.f32`` (raw little-endian float32, row-major) + JSON sidecar."""
    base = _strip_f32(path)
    values = np.ascontiguousarray(img.values, dtype="<f4")
    with open(base + ".f32", "wb") as f:
        f.write(values.tobytes())
    with open(base + ".json", "w") as f:
        json.dump({"shape": [img.height, img.width], "range": list(img.range)}, f)


def load_image(path: str | os.PathLike) -> Image:
    base = _strip_f32(path)
    sidecar = base + ".json"
    if not os.path.exists(sidecar):
        raise CoreError(f"missing sidecar {sidecar}")
    with open(sidecar) as f:
        meta = json.load(f)
    h, w = (int(x) for x in meta["shape"])
    lo, hi = (float(x) for x in meta["range"])
    payload = np.fromfile(base + ".f32", dtype="<f4")
    if payload.size != h * w:
        raise CoreError(
            f"payload {base}.f32 holds {payload.size} values, sidecar declares shape [{h}, {w}]"
        )
    return Image(payload.reshape(h, w), (lo, hi))


def export_png(path: str | os.PathLike, img: Image) -> None:
    """8-bit PNG for viewing only (linear map from the declared range)."""
    from PIL import Image as PilImage

    lo, hi = img.range
    u8 = np.clip((img.values - lo) / (hi - lo) * 255.0, 0, 255).astype(np.uint8)
    PilImage.fromarray(u8, mode="L").save(path)


def _strip_f32(path: str | os.PathLike) -> str:
    p = str(path)
    return p[:-4] if p.endswith(".f32") else p


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

@dataclass
class UnpairedDataset:
    """Source pool plus one target pool per domain; no pairing is stored."""

    source: list[Image]
    targets: dict[str, list[Image]] = field(default_factory=dict)
    manifest: dict = field(default_factory=dict)

    def domains(self) -> list[str]:
        return sorted(self.targets)


def save_dataset(root: str | os.PathLike, ds: UnpairedDataset, overwrite: bool = False) -> None:
    root = str(root)
    if os.path.isdir(root) and os.listdir(root) and not overwrite:
        raise CoreError(f"output directory {root} is not empty (pass overwrite to replace)")
    os.makedirs(root, exist_ok=True)
    _write_pool(os.path.join(root, DOMAIN_DIRS["source"]), ds.source)
    for domain, pool in ds.targets.items():
        _write_pool(os.path.join(root, DOMAIN_DIRS[domain]), pool)
    with open(os.path.join(root, "manifest.json"), "w") as f:
        json.dump(ds.manifest, f, indent=2)


def load_dataset(root: str | os.PathLike) -> UnpairedDataset:
    root = str(root)
    manifest_path = os.path.join(root, "manifest.json")
    if not os.path.exists(manifest_path):
        raise CoreError(f"missing dataset manifest {manifest_path}")
    with open(manifest_path) as f:
        manifest = json.load(f)
    source = _read_pool(os.path.join(root, DOMAIN_DIRS["source"]))
    targets = {}
    for domain in ("deconv", "despeckle", "both"):
        pool_dir = os.path.join(root, DOMAIN_DIRS[domain])
        if os.path.isdir(pool_dir):
            targets[domain] = _read_pool(pool_dir)
    return UnpairedDataset(source=source, targets=targets, manifest=manifest)


def _write_pool(pool_dir: str, pool: list[Image]) -> None:
    os.makedirs(pool_dir, exist_ok=True)
    for i, img in enumerate(pool):
        save_image(os.path.join(pool_dir, f"img_{i:05d}"), img)


def _read_pool(pool_dir: str) -> list[Image]:
    names = sorted(n[:-4] for n in os.listdir(pool_dir) if n.endswith(".f32"))
    return [load_image(os.path.join(pool_dir, n)) for n in names]


def shuffled_order(n: int, gen: np.random.Generator) -> np.ndarray:
    """Epoch ordering; reproducible for a fixed generator state."""
    return gen.permutation(n)

"""Manufacture unpaired target pools from a source pool with the classical solvers."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .core import CoreError, DOMAIN_DIRS, RngState, UnpairedDataset, save_image
from .deconv import DeconvConfig, deconvolve, estimate_psf
from .nllr import NllrConfig, despeckle_nllr


@dataclass
class TargetConfig:
    n_deconv: int
    n_despeckle: int
    n_both: int = 0
    disjoint: bool = False
    seed: int = 0


def _draw_subsets(n_source: int, tcfg: TargetConfig) -> dict[str, np.ndarray]:
    """Index subsets per domain; disjoint mode slices one permutation."""
    wanted = {"deconv": tcfg.n_deconv, "despeckle": tcfg.n_despeckle, "both": tcfg.n_both}
    wanted = {k: v for k, v in wanted.items() if v > 0}
    if not wanted:
        raise CoreError("no target counts requested")
    for k, v in wanted.items():
        if v > n_source:
            raise CoreError(f"requested {v} {k} targets from a pool of {n_source}")
    gen = RngState(tcfg.seed, 900).generator()
    if tcfg.disjoint:
        total = sum(wanted.values())
        if total > n_source:
            raise CoreError(
                f"disjoint subsets need {total} sources but the pool holds {n_source}"
            )
        perm = gen.permutation(n_source)
        subsets, pos = {}, 0
        for k, v in wanted.items():
            subsets[k] = np.sort(perm[pos : pos + v])
            pos += v
        return subsets
    return {k: np.sort(gen.choice(n_source, size=v, replace=False)) for k, v in wanted.items()}


def generate_targets(
    dataset: UnpairedDataset,
    dcfg: DeconvConfig,
    ncfg: NllrConfig,
    tcfg: TargetConfig,
) -> UnpairedDataset:
    """Fill the target pools by running the classical solvers on source subsets.

    Subsets are drawn independently per domain (or disjointly when requested),
    so target pools carry no pairing relation to the training sources. The
    combined domain composes despeckle after deconvolution.
    """
    if not dataset.source:
        raise CoreError("source pool is empty")
    subsets = _draw_subsets(len(dataset.source), tcfg)
    records: dict[str, dict] = {}
    warnings: list[dict] = []

    def deconv_one(idx: int):
        img = dataset.source[idx]
        rec: dict = {"source_index": int(idx)}
        psf = estimate_psf(img, dcfg, rec)
        out = deconvolve(img, psf, dcfg)
        if "warning" in rec:
            warnings.append(rec)
        return out

    if "deconv" in subsets:
        dataset.targets["deconv"] = [deconv_one(i) for i in subsets["deconv"]]
    if "despeckle" in subsets:
        dataset.targets["despeckle"] = [
            despeckle_nllr(dataset.source[i], ncfg) for i in subsets["despeckle"]
        ]
    if "both" in subsets:
        dataset.targets["both"] = [
            despeckle_nllr(deconv_one(i), ncfg) for i in subsets["both"]
        ]
    for domain, idx in subsets.items():
        records[domain] = {"source_indices": [int(i) for i in idx]}
    dataset.manifest.setdefault("targets", {}).update(
        {
            "subsets": records,
            "disjoint": tcfg.disjoint,
            "seed": tcfg.seed,
            "deconv_config": dcfg.to_dict(),
            "nllr_config": ncfg.to_dict(),
            "psf_warnings": warnings,
        }
    )
    return dataset


def write_targets(root: str | os.PathLike, dataset: UnpairedDataset) -> None:
    """Write target pools + updated manifest into an existing dataset directory."""
    import json

    root = str(root)
    for domain, pool in dataset.targets.items():
        pool_dir = os.path.join(root, DOMAIN_DIRS[domain])
        os.makedirs(pool_dir, exist_ok=True)
        for i, img in enumerate(pool):
            save_image(os.path.join(pool_dir, f"img_{i:05d}"), img)
    with open(os.path.join(root, "manifest.json"), "w") as f:
        json.dump(dataset.manifest, f, indent=2)

"""Metric reports over a test set: per-image rows for the raw input, classical
label, and generated output in each target domain, plus box plots.

PSNR/SSIM are computed against the classical outputs (the "label" images), so
label rows carry "X" in those columns. The classical labels for a test set are
computed once and cached next to it under ``labels_<domain>/``.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

from .core import DOMAIN_DIRS, Image, Roi, load_dataset, load_image, mask_for_domain, save_image
from .deconv import DeconvConfig, deconvolve, estimate_psf
from .metrics import cnr, cr, gcnr, psnr, ssim
from .nllr import NllrConfig, despeckle_nllr
from .train import Checkpoint, infer

REPORT_HEADER = ["method", "domain", "image_id", "psnr", "ssim", "cnr", "gcnr", "cr"]
METHODS = ("input", "label", "proposed")
ABSENT = "X"


@dataclass
class MetricsRow:
    method: str
    domain: str
    image_id: str
    psnr: float | None
    ssim: float | None
    cnr: float
    gcnr: float
    cr: float

    def as_csv(self) -> list:
        fmt = lambda v: ABSENT if v is None else repr(v)
        return [self.method, self.domain, self.image_id,
                fmt(self.psnr), fmt(self.ssim), repr(self.cnr), repr(self.gcnr), repr(self.cr)]


def roi_pair(rois: list[Roi]) -> tuple[Roi, Roi]:
    """First structure ROI and its matching background."""
    structures = [r for r in rois if r.role == "structure"]
    backgrounds = [r for r in rois if r.role == "background"]
    if not structures or not backgrounds:
        raise ValueError("test image lacks a structure/background ROI pair")
    return structures[0], backgrounds[0]


def ensure_labels(
    testset_dir: str | os.PathLike,
    dcfg: DeconvConfig,
    ncfg: NllrConfig,
) -> dict[str, list[Image]]:
    """Classical reference outputs per test image, cached under the test set."""
    testset_dir = str(testset_dir)
    ds = load_dataset(testset_dir)
    labels: dict[str, list[Image]] = {}
    for domain in ("deconv", "despeckle"):
        label_dir = os.path.join(testset_dir, f"labels_{domain}")
        names = [f"img_{i:05d}" for i in range(len(ds.source))]
        if os.path.isdir(label_dir) and all(
            os.path.exists(os.path.join(label_dir, n + ".f32")) for n in names
        ):
            labels[domain] = [load_image(os.path.join(label_dir, n)) for n in names]
            continue
        os.makedirs(label_dir, exist_ok=True)
        pool = []
        for i, img in enumerate(ds.source):
            if domain == "deconv":
                out = deconvolve(img, estimate_psf(img, dcfg), dcfg)
            else:
                out = despeckle_nllr(img, ncfg)
            save_image(os.path.join(label_dir, names[i]), out)
            pool.append(out)
        labels[domain] = pool
    return labels


def evaluate(
    checkpoint: Checkpoint | str | os.PathLike,
    testset_dir: str | os.PathLike,
    out_dir: str | os.PathLike,
    dcfg: DeconvConfig | None = None,
    ncfg: NllrConfig | None = None,
    psnr_mode: str = "standard",
) -> list[MetricsRow]:
    """Per-image metric rows for every (method, domain); writes report.csv."""
    ck = checkpoint if isinstance(checkpoint, Checkpoint) else Checkpoint.load(checkpoint)
    testset_dir = str(testset_dir)
    ds = load_dataset(testset_dir)
    if "source_images" not in ds.manifest:
        raise ValueError("test set manifest lacks ROI annotations")
    dcfg = dcfg or DeconvConfig()
    ncfg = ncfg or NllrConfig()
    labels = ensure_labels(testset_dir, dcfg, ncfg)
    mode = ck.config.domain_mode
    rows: list[MetricsRow] = []
    for i, img in enumerate(ds.source):
        rec = ds.manifest["source_images"][i]
        rois = [Roi.from_dict(d) for d in rec["rois"]]
        s_roi, b_roi = roi_pair(rois)
        image_id = rec.get("name", f"img_{i:05d}")
        for domain in ("deconv", "despeckle"):
            label = labels[domain][i]
            generated, _ = infer(ck, img, mask_for_domain(mode, domain))
            for method, picture in (("input", img), ("label", label), ("proposed", generated)):
                if method == "label":
                    p = s = None
                else:
                    p = psnr(label, picture, psnr_mode)
                    s = ssim(label, picture)
                rows.append(
                    MetricsRow(
                        method=method, domain=domain, image_id=image_id,
                        psnr=p, ssim=s,
                        cnr=cnr(picture, s_roi, b_roi),
                        gcnr=gcnr(picture, s_roi, b_roi),
                        cr=cr(picture, s_roi, b_roi),
                    )
                )
    out_dir = str(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    write_report(os.path.join(out_dir, "report.csv"), rows, psnr_mode)
    return rows


def write_report(path: str | os.PathLike, rows: list[MetricsRow], psnr_mode: str) -> None:
    with open(path, "w", newline="") as f:
        out = csv.writer(f)
        out.writerow(REPORT_HEADER)
        for row in rows:
            out.writerow(row.as_csv())
    with open(str(path) + ".meta", "w") as f:
        f.write(f"psnr_mode={psnr_mode}\n")


def read_report(path: str | os.PathLike) -> list[MetricsRow]:
    rows = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        for r in reader:
            conv = lambda v: None if v == ABSENT else float(v)
            rows.append(MetricsRow(
                method=r["method"], domain=r["domain"], image_id=r["image_id"],
                psnr=conv(r["psnr"]), ssim=conv(r["ssim"]),
                cnr=float(r["cnr"]), gcnr=float(r["gcnr"]), cr=float(r["cr"]),
            ))
    return rows


def plot_report(rows: list[MetricsRow], out_dir: str | os.PathLike) -> list[str]:
    """Box plots per metric per domain comparing methods; returns file paths."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = str(out_dir)
    plots_dir = os.path.join(out_dir, "plots")
    os.makedirs(plots_dir, exist_ok=True)
    paths = []
    for metric in ("psnr", "ssim", "cnr", "gcnr", "cr"):
        for domain in sorted({r.domain for r in rows}):
            series, labels_ = [], []
            for method in METHODS:
                vals = [getattr(r, metric) for r in rows
                        if r.method == method and r.domain == domain
                        and getattr(r, metric) is not None]
                if vals:
                    series.append(vals)
                    labels_.append(method)
            if not series:
                continue
            fig, ax = plt.subplots(figsize=(4, 3))
            ax.boxplot(series, tick_labels=labels_)
            ax.set_title(f"{metric.upper()} ({domain})")
            ax.grid(True, alpha=0.3)
            path = os.path.join(plots_dir, f"{metric}_{domain}.png")
            fig.tight_layout()
            fig.savefig(path, dpi=100)
            plt.close(fig)
            paths.append(path)
    return paths

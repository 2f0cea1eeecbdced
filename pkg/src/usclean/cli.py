"""Command-line entry point wiring the pipeline:
simulate -> make-targets -> train -> infer -> evaluate -> plot, plus selftest.

One JSON config drives every verb; dotted-key overrides (``--set a.b=c``) and
the dedicated flags adjust it per run. Every run writes ``run_manifest.json``
(resolved config, seeds, package version, fallback events) into its output
directory, which is protected by a lock file while the verb runs.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import __version__

DEFAULT_CONFIG: dict = {
    "simulate": {"out": "dataset", "count": 200, "seed": 0, "population": {}},
    "targets": {
        "dataset": "dataset", "n_deconv": 150, "n_despeckle": 150, "n_both": 0,
        "disjoint": False, "seed": 0, "deconv": {}, "nllr": {},
    },
    "train": {"dataset": "dataset", "out": "run", "resume": None},
    "infer": {"checkpoint": None, "input": None, "mask": "1,0", "out": "inferred"},
    "evaluate": {
        "checkpoint": None, "testset": None, "out": "eval",
        "psnr_mode": "standard", "deconv": {}, "nllr": {},
    },
    "plot": {"report": "eval/report.csv", "out": "eval"},
}


class CliError(Exception):
    pass


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(config: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = config
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise CliError(f"override path {dotted!r} crosses a non-object key {k!r}")
    node[keys[-1]] = value


def load_config(path: str | None, overrides: list[str]) -> dict:
    config = json.loads(json.dumps(DEFAULT_CONFIG))  # deep copy
    if path:
        with open(path) as f:
            user = json.load(f)
        for section, content in user.items():
            if isinstance(content, dict):
                config.setdefault(section, {}).update(content)
            else:
                config[section] = content
    for item in overrides:
        if "=" not in item:
            raise CliError(f"override {item!r} is not key=value")
        key, _, raw = item.partition("=")
        apply_override(config, key.strip(), _parse_value(raw.strip()))
    return config


def parse_mask(text: str):
    from .core import DomainMask

    bits = tuple(int(b) for b in text.replace(" ", "").split(","))
    return DomainMask(bits)


class _OutputLock:
    def __init__(self, out_dir: str):
        self.path = os.path.join(out_dir, ".usclean.lock")
        os.makedirs(out_dir, exist_ok=True)

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise CliError(f"output directory is locked by another run: {self.path}")
        os.close(fd)
        return self

    def __exit__(self, *exc):
        if os.path.exists(self.path):
            os.remove(self.path)


def write_run_manifest(out_dir: str, verb: str, config: dict, events: list | None = None) -> None:
    manifest = {
        "verb": verb,
        "version": __version__,
        "config": config,
        "fallback_events": events or [],
    }
    with open(os.path.join(out_dir, "run_manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2)


# ---------------------------------------------------------------------------
# verbs
# ---------------------------------------------------------------------------

def cmd_simulate(config: dict) -> int:
    from .simulator import PopulationSpec, build_dataset

    section = config["simulate"]
    population = PopulationSpec.from_dict(section["population"]) if section["population"] else PopulationSpec()
    out = section["out"]
    with _OutputLock(out):
        build_dataset(population, int(section["count"]), int(section["seed"]), out,
                      overwrite=bool(section.get("overwrite", False)))
        write_run_manifest(out, "simulate", config)
    print(f"simulate: wrote {section['count']} source images to {out}")
    return 0


def cmd_make_targets(config: dict) -> int:
    from .core import load_dataset
    from .deconv import DeconvConfig
    from .nllr import NllrConfig
    from .targets import TargetConfig, generate_targets, write_targets

    section = config["targets"]
    root = section["dataset"]
    dcfg = DeconvConfig.from_dict(section["deconv"]) if section["deconv"] else DeconvConfig()
    ncfg = NllrConfig.from_dict(section["nllr"]) if section["nllr"] else NllrConfig()
    tcfg = TargetConfig(
        n_deconv=int(section["n_deconv"]), n_despeckle=int(section["n_despeckle"]),
        n_both=int(section.get("n_both", 0)), disjoint=bool(section.get("disjoint", False)),
        seed=int(section.get("seed", 0)),
    )
    with _OutputLock(root):
        ds = load_dataset(root)
        ds = generate_targets(ds, dcfg, ncfg, tcfg)
        write_targets(root, ds)
        events = ds.manifest.get("targets", {}).get("psf_warnings", [])
        write_run_manifest(root, "make-targets", config, events)
    counts = {d: len(p) for d, p in ds.targets.items()}
    print(f"make-targets: wrote pools {counts} under {root}")
    return 0


def cmd_train(config: dict) -> int:
    from .core import load_dataset
    from .train import TrainConfig, train

    section = dict(config["train"])
    root = section.pop("dataset")
    out = section.pop("out")
    resume = section.pop("resume", None)
    tcfg = TrainConfig.from_dict(section)
    with _OutputLock(out):
        write_run_manifest(out, "train", config)
        ds = load_dataset(root)
        ck = train(tcfg, ds, out, resume_from=resume)
    print(f"train: finished epoch {ck.epoch}, checkpoints under {out}")
    return 0


def cmd_infer(config: dict) -> int:
    from .core import export_png, load_image, save_image
    from .train import infer

    section = config["infer"]
    if not section.get("checkpoint") or not section.get("input"):
        raise CliError("infer needs infer.checkpoint and infer.input")
    mask = parse_mask(section["mask"])
    out = section["out"]
    with _OutputLock(out):
        img = load_image(section["input"])
        result, seconds = infer(section["checkpoint"], img, mask)
        stem = os.path.join(out, "output")
        save_image(stem, result)
        export_png(stem + ".png", result)
        write_run_manifest(out, "infer", config)
    print(f"infer: mask {section['mask']} in {seconds * 1e3:.1f} ms -> {stem}.f32")
    return 0


def cmd_evaluate(config: dict) -> int:
    from .deconv import DeconvConfig
    from .nllr import NllrConfig
    from .report import evaluate

    section = config["evaluate"]
    if not section.get("checkpoint") or not section.get("testset"):
        raise CliError("evaluate needs evaluate.checkpoint and evaluate.testset")
    dcfg = DeconvConfig.from_dict(section["deconv"]) if section["deconv"] else DeconvConfig()
    ncfg = NllrConfig.from_dict(section["nllr"]) if section["nllr"] else NllrConfig()
    out = section["out"]
    with _OutputLock(out):
        rows = evaluate(section["checkpoint"], section["testset"], out,
                        dcfg, ncfg, section.get("psnr_mode", "standard"))
        write_run_manifest(out, "evaluate", config)
    print(f"evaluate: {len(rows)} rows -> {os.path.join(out, 'report.csv')}")
    return 0


def cmd_plot(config: dict) -> int:
    from .report import plot_report, read_report

    section = config["plot"]
    rows = read_report(section["report"])
    out = section["out"]
    with _OutputLock(out):
        paths = plot_report(rows, out)
        write_run_manifest(out, "plot", config)
    print(f"plot: wrote {len(paths)} figures under {os.path.join(out, 'plots')}")
    return 0


def cmd_selftest(config: dict) -> int:
    """Quick oracle checks of the metric and solver stacks."""
    import numpy as np

    from .metrics import cnr, cr, gcnr, psnr, ssim
    from .nllr import rpca_admm
    from .deconv import DeconvConfig, ista_l1

    failures = []

    def check(name, ok):
        print(f"  {'PASS' if ok else 'FAIL'}  {name}")
        if not ok:
            failures.append(name)

    gen = np.random.default_rng(0)
    a = gen.random((16, 16))
    b = gen.random((16, 16))
    rmse = np.sqrt(((a - b) ** 2).mean())
    check("psnr standard vs naive", abs(psnr(a, b) - 20 * np.log10(a.max() / rmse)) < 1e-9)
    mu_a, mu_b = a.mean(), b.mean()
    cov = ((a - mu_a) * (b - mu_b)).mean()
    c1, c2 = (0.01 * a.max()) ** 2, (0.03 * a.max()) ** 2
    naive = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
        (mu_a ** 2 + mu_b ** 2 + c1) * (a.var() + b.var() + c2))
    check("ssim vs naive", abs(ssim(a, b) - naive) < 1e-9)
    s, bg = a[:8, :8].ravel(), b[:8, :8].ravel()
    naive_cnr = abs(s.mean() - bg.mean()) / np.sqrt(s.var() + bg.var())
    check("cnr vs naive", abs(cnr(None, s, bg) - naive_cnr) < 1e-9)
    check("cr symmetry", abs(cr(None, s, bg) - cr(None, bg, s)) < 1e-12)
    check("gcnr identical -> 0", gcnr(None, s, s.copy()) == 0.0)

    y = gen.standard_normal((1, 32))
    delta = np.ones((1, 1))
    x, trace = ista_l1(y, delta, DeconvConfig(lam=0.0, max_iters=3, display_decode=False))
    check("ista delta identity", np.abs(x - y).max() < 1e-9)
    objs = [t[1] for t in trace]
    check("ista objective monotone", all(objs[i + 1] <= objs[i] + 1e-9 for i in range(len(objs) - 1)))

    u = gen.standard_normal(32)
    u /= np.linalg.norm(u)
    v = gen.standard_normal(32)
    v /= np.linalg.norm(v)
    m = 10 * np.outer(u, v)
    res = rpca_admm(m, lam_s=1 / np.sqrt(32), iters=500)
    check("rpca rank-1 recovery", np.linalg.norm(res.low_rank - m) / np.linalg.norm(m) < 1e-3)

    if failures:
        print(f"selftest: {len(failures)} failure(s)")
        return 1
    print("selftest: all checks passed")
    return 0


VERBS = {
    "simulate": cmd_simulate,
    "make-targets": cmd_make_targets,
    "train": cmd_train,
    "infer": cmd_infer,
    "evaluate": cmd_evaluate,
    "plot": cmd_plot,
    "selftest": cmd_selftest,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="usclean",
        description="Multi-domain unsupervised ultrasound artifact removal pipeline.",
    )
    parser.add_argument("verb", choices=sorted(VERBS))
    parser.add_argument("--config", help="JSON config file (defaults are built in)")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="dotted-key config override")
    parser.add_argument("--seed", type=int, help="override the verb's seed")
    parser.add_argument("--epochs", type=int, help="override train.epochs")
    parser.add_argument("--mask", help="override infer.mask, e.g. 1,0")
    parser.add_argument("--psnr-mode", choices=["standard", "paper"],
                        help="override evaluate.psnr_mode")
    parser.add_argument("--domain-mode",
                        choices=["2domain", "3domain-2bit", "3domain-3bit"],
                        help="override train.domain_mode")
    return parser


def dispatch(argv: list[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        config = load_config(args.config, args.overrides)
        if args.seed is not None:
            for section in ("simulate", "targets", "train"):
                config[section]["seed"] = args.seed
        if args.epochs is not None:
            config["train"]["epochs"] = args.epochs
        if args.mask is not None:
            config["infer"]["mask"] = args.mask
        if args.psnr_mode is not None:
            config["evaluate"]["psnr_mode"] = args.psnr_mode
        if args.domain_mode is not None:
            config["train"]["domain_mode"] = args.domain_mode
        return VERBS[args.verb](config)
    except Exception as exc:  # single-line machine-parsable failure
        print(f"error: verb={args.verb} type={type(exc).__name__} detail={exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))

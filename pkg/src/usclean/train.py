"""Alternating adversarial training loop, optimizer, checkpointing, inference.

Per step: ``n_critic`` critic updates (target critic + classifier real branch,
and the source critic) followed by one generator update (mask-conditioned
generator, return generator, and the classifier through the fake branch).

Randomness protocol (one Philox stream per run, documented order):
  * at each epoch start: source order, then one order per target domain;
  * within each step: per-element domain draws, then the alpha block for all
    critic sub-steps (alphas are drawn before augmentation), then per-image
    augmentation draws;
  * target pools reshuffle from the same stream when they wrap mid-epoch.
Checkpoints store the stream state, sampler positions and optimizer moments,
so a resumed run replays the uninterrupted one bit for bit.
"""

from __future__ import annotations

import csv
import json
import os
import time
from dataclasses import dataclass, field, asdict

import numpy as np
import torch

from .core import (
    CoreError,
    DOMAIN_ORDER,
    DomainMask,
    Image,
    RngState,
    UnpairedDataset,
    legal_masks,
    rng_from_state_dict,
    rng_state_dict,
)
from .losses import (
    LossBreakdown,
    LossError,
    LossWeights,
    classification_loss,
    critic_losses,
    cycle_loss,
    gradient_penalty,
    total_losses,
)
from .nets import (
    Discriminator,
    Generator,
    NetError,
    init_discriminator,
    init_generator,
    load_arrays,
    named_arrays,
    tensor_to_image,
    image_to_tensor,
    with_mask_planes,
)

LOG_HEADER = ["epoch", "step", "cycle", "adv_G", "adv_D_t", "adv_D_s",
              "gp", "cls_real", "cls_fake", "total_G", "total_D", "lr"]
CHECKPOINT_FORMAT = 1


class TrainError(RuntimeError):
    def __init__(self, message: str, breakdown: LossBreakdown | None = None):
        super().__init__(message)
        self.breakdown = breakdown


@dataclass
class TrainConfig:
    epochs: int = 200
    batch: int = 4
    lr0: float = 1e-4
    decay_start: int | None = None          # default epochs // 2
    beta1: float = 0.5
    beta2: float = 0.999
    eps_adam: float = 1e-8
    n_critic: int = 5
    weights: LossWeights = field(default_factory=LossWeights)
    flip: bool = True
    rotate: bool = True
    scale: bool = True
    scale_range: tuple[float, float] = (0.9, 1.1)
    seed: int = 0
    domain_mode: str = "2domain"
    width: int = 64
    disc_width: int | None = None
    res_blocks: int = 6
    checkpoint_interval: int = 0            # 0 = final checkpoint only

    def __post_init__(self):
        if self.batch < 1:
            raise TrainError("batch must be >= 1")
        if self.decay_start is not None and self.decay_start > self.epochs:
            raise TrainError("decay_start must be <= epochs")
        if self.domain_mode not in DOMAIN_ORDER:
            raise TrainError(f"unknown domain mode {self.domain_mode!r}")

    @property
    def decay_epoch(self) -> int:
        return self.epochs // 2 if self.decay_start is None else self.decay_start

    @property
    def multihot(self) -> bool:
        return self.domain_mode == "3domain-2bit"

    @property
    def disc_width_eff(self) -> int:
        return self.width if self.disc_width is None else self.disc_width

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weights"] = asdict(self.weights)
        d["scale_range"] = list(self.scale_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if isinstance(d.get("weights"), dict):
            d["weights"] = LossWeights(**d["weights"])
        if "scale_range" in d:
            d["scale_range"] = tuple(d["scale_range"])
        return cls(**d)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """lr0 until the decay epoch, then linear to zero at ``epochs`` (exclusive)."""
    if not 0 <= epoch < cfg.epochs:
        raise TrainError(f"epoch {epoch} outside [0, {cfg.epochs})")
    decay = cfg.decay_epoch
    if epoch <= decay:
        return cfg.lr0
    return cfg.lr0 * (cfg.epochs - epoch) / (cfg.epochs - decay)


# ---------------------------------------------------------------------------
# Adam over named parameters (moments serializable as f32 blobs)
# ---------------------------------------------------------------------------

class Adam:
    def __init__(self, params: dict[str, torch.nn.Parameter],
                 beta1: float = 0.5, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: torch.zeros_like(p) for k, p in params.items()}
        self.v = {k: torch.zeros_like(p) for k, p in params.items()}

    @torch.no_grad()
    def step(self, grads: dict[str, torch.Tensor | None], lr: float) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                g = torch.zeros_like(p)
            m = self.m[name].mul_(self.beta1).add_(g, alpha=1.0 - self.beta1)
            v = self.v[name].mul_(self.beta2).addcmul_(g, g, value=1.0 - self.beta2)
            p.addcdiv_(m / bc1, (v / bc2).sqrt().add_(self.eps), value=-lr)

    def state_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        out = {}
        for name in self.params:
            out[f"{prefix}.m.{name}"] = self.m[name].numpy().astype("<f4")
            out[f"{prefix}.v.{name}"] = self.v[name].numpy().astype("<f4")
        return out

    def load_state_arrays(self, prefix: str, arrays: dict[str, np.ndarray], t: int) -> None:
        self.t = t
        for name in self.params:
            self.m[name] = torch.from_numpy(np.array(arrays[f"{prefix}.m.{name}"], dtype=np.float32))
            self.v[name] = torch.from_numpy(np.array(arrays[f"{prefix}.v.{name}"], dtype=np.float32))


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def augment(values: np.ndarray, gen: np.random.Generator, cfg: TrainConfig) -> np.ndarray:
    """Flips, right-angle rotation, intensity scaling (clipped to (-1, 1)).

    Non-square images only rotate by multiples of 180 degrees (the draw is
    consumed either way so the stream position does not depend on shape).
    """
    out = values
    if cfg.flip:
        if gen.random() < 0.5:
            out = out[:, ::-1]
        if gen.random() < 0.5:
            out = out[::-1, :]
    if cfg.rotate:
        k = int(gen.integers(0, 4))
        if out.shape[0] != out.shape[1]:
            k = (k % 2) * 2
        out = np.rot90(out, k)
    if cfg.scale:
        factor = gen.uniform(*cfg.scale_range)
        out = np.clip(out * factor, -1.0, 1.0)
    return np.ascontiguousarray(out, dtype=np.float32)


# ---------------------------------------------------------------------------
# unpaired sampling
# ---------------------------------------------------------------------------

class PoolCursor:
    """Sequential walk over a shuffled index order; wraps with a reshuffle."""

    def __init__(self, size: int):
        self.size = size
        self.order = np.arange(size)
        self.pos = 0

    def reshuffle(self, gen: np.random.Generator) -> None:
        self.order = gen.permutation(self.size)
        self.pos = 0

    def next_index(self, gen: np.random.Generator) -> int:
        if self.pos >= self.size:
            self.reshuffle(gen)
        idx = int(self.order[self.pos])
        self.pos += 1
        return idx

    def state(self) -> dict:
        return {"order": [int(i) for i in self.order], "pos": self.pos}

    def restore(self, d: dict) -> None:
        self.order = np.array(d["order"], dtype=int)
        self.pos = int(d["pos"])


class BatchSampler:
    """Unpaired batches: epoch-ordered sources, uniform domain draws, and an
    independently shuffled cursor per target pool."""

    def __init__(self, dataset: UnpairedDataset, cfg: TrainConfig):
        self.dataset = dataset
        self.cfg = cfg
        self.domains = DOMAIN_ORDER[cfg.domain_mode]
        missing = [d for d in self.domains if d not in dataset.targets or not dataset.targets[d]]
        if missing:
            raise TrainError(f"dataset lacks target domains {missing} for mode {cfg.domain_mode!r}")
        if not dataset.source:
            raise TrainError("dataset has no source images")
        self.masks = {d: m for d, m in zip(self.domains, legal_masks(cfg.domain_mode))}
        self.source = PoolCursor(len(dataset.source))
        self.pools = {d: PoolCursor(len(dataset.targets[d])) for d in self.domains}

    def start_epoch(self, gen: np.random.Generator) -> None:
        self.source.reshuffle(gen)
        for d in self.domains:
            self.pools[d].reshuffle(gen)

    def sample_batch(self, gen: np.random.Generator) -> dict:
        """One batch: y (source), per-element target domain, x (real target), labels."""
        n = self.cfg.batch
        domain_idx = gen.integers(0, len(self.domains), size=n)
        ys, xs, masks, domains = [], [], [], []
        for i in range(n):
            d = self.domains[int(domain_idx[i])]
            ys.append(self.dataset.source[self.source.next_index(gen)].values)
            xs.append(self.dataset.targets[d][self.pools[d].next_index(gen)].values)
            masks.append(self.masks[d])
            domains.append(d)
        return {"y": ys, "x": xs, "masks": masks, "domains": domains}

    def state(self) -> dict:
        return {"source": self.source.state(),
                "pools": {d: c.state() for d, c in self.pools.items()}}

    def restore(self, d: dict) -> None:
        self.source.restore(d["source"])
        for name, c in self.pools.items():
            c.restore(d["pools"][name])


def sample_step(sampler: BatchSampler, gen: np.random.Generator) -> dict:
    return sampler.sample_batch(gen)


class _QueuedUniforms:
    """Pre-drawn uniform blocks, replayed in order (alphas precede augmentation)."""

    def __init__(self, blocks: list[np.ndarray]):
        self.blocks = blocks

    def random(self, n: int) -> np.ndarray:
        block = self.blocks.pop(0)
        if block.size != n:
            raise TrainError(f"alpha block size {block.size} != requested {n}")
        return block


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    config: TrainConfig
    gen_g: Generator
    gen_f: Generator
    disc_t: Discriminator
    disc_s: Discriminator
    adam_d: Adam
    adam_gf: Adam
    adam_k: Adam
    epoch: int
    rng_state: dict
    sampler_state: dict

    @property
    def mask_bits(self) -> int:
        return len(legal_masks(self.config.domain_mode)[0])

    def save(self, out_dir: str | os.PathLike) -> str:
        out_dir = str(out_dir)
        os.makedirs(out_dir, exist_ok=True)
        arrays: dict[str, np.ndarray] = {}
        for tag, module in (("G", self.gen_g), ("F", self.gen_f),
                            ("Dt", self.disc_t), ("Ds", self.disc_s)):
            for name, arr in named_arrays(module).items():
                arrays[f"{tag}.{name}"] = arr
        arrays.update(self.adam_d.state_arrays("adam_d"))
        arrays.update(self.adam_gf.state_arrays("adam_gf"))
        arrays.update(self.adam_k.state_arrays("adam_k"))
        for name, arr in arrays.items():
            arr.tofile(os.path.join(out_dir, name + ".f32"))
        manifest = {
            "format_version": CHECKPOINT_FORMAT,
            "epoch": self.epoch,
            "config": self.config.to_dict(),
            "rng_state": self.rng_state,
            "sampler_state": self.sampler_state,
            "adam_t": {"adam_d": self.adam_d.t, "adam_gf": self.adam_gf.t, "adam_k": self.adam_k.t},
            "params": {name: list(arr.shape) for name, arr in arrays.items()},
            "arch": {
                "width": self.config.width,
                "disc_width": self.config.disc_width_eff,
                "res_blocks": self.config.res_blocks,
                "domain_mode": self.config.domain_mode,
                "mask_bits": self.mask_bits,
            },
        }
        with open(os.path.join(out_dir, "manifest.json"), "w") as f:
            json.dump(manifest, f, indent=2)
        return out_dir

    @classmethod
    def load(cls, ckpt_dir: str | os.PathLike) -> "Checkpoint":
        ckpt_dir = str(ckpt_dir)
        with open(os.path.join(ckpt_dir, "manifest.json")) as f:
            manifest = json.load(f)
        if manifest["format_version"] != CHECKPOINT_FORMAT:
            raise TrainError(f"unsupported checkpoint format {manifest['format_version']}")
        cfg = TrainConfig.from_dict(manifest["config"])
        arrays: dict[str, np.ndarray] = {}
        for name, shape in manifest["params"].items():
            arr = np.fromfile(os.path.join(ckpt_dir, name + ".f32"), dtype="<f4")
            arrays[name] = arr.reshape(shape)
        ck = build_networks(cfg)
        for tag, module in (("G", ck.gen_g), ("F", ck.gen_f), ("Dt", ck.disc_t), ("Ds", ck.disc_s)):
            sub = {name[len(tag) + 1:]: arr for name, arr in arrays.items()
                   if name.startswith(tag + ".") and not name.startswith("adam")}
            load_arrays(module, sub)
        for prefix, adam in (("adam_d", ck.adam_d), ("adam_gf", ck.adam_gf), ("adam_k", ck.adam_k)):
            adam.load_state_arrays(prefix, arrays, manifest["adam_t"][prefix])
        ck.epoch = manifest["epoch"]
        ck.rng_state = manifest["rng_state"]
        ck.sampler_state = manifest["sampler_state"]
        return ck


def build_networks(cfg: TrainConfig) -> Checkpoint:
    """Fresh networks + optimizers, deterministically initialized from cfg.seed."""
    bits = len(legal_masks(cfg.domain_mode)[0])
    domains = bits
    gen_g = init_generator(1 + bits, cfg.width, RngState(cfg.seed, 1), cfg.res_blocks)
    gen_f = init_generator(1, cfg.width, RngState(cfg.seed, 2), cfg.res_blocks)
    disc_t = init_discriminator(cfg.disc_width_eff, RngState(cfg.seed, 3), domains=domains)
    disc_s = init_discriminator(cfg.disc_width_eff, RngState(cfg.seed, 4), domains=None)
    d_params = {f"Dt.{n}": p for n, p in disc_t.named_parameters()}
    d_params.update({f"Ds.{n}": p for n, p in disc_s.named_parameters()})
    gf_params = {f"G.{n}": p for n, p in gen_g.named_parameters()}
    gf_params.update({f"F.{n}": p for n, p in gen_f.named_parameters()})
    k_params = {f"Dt.trunk.{n}": p for n, p in disc_t.trunk.named_parameters()}
    k_params.update({f"Dt.head_cls.{n}": p for n, p in disc_t.head_cls.named_parameters()})
    mk = lambda params: Adam(params, cfg.beta1, cfg.beta2, cfg.eps_adam)
    return Checkpoint(
        config=cfg, gen_g=gen_g, gen_f=gen_f, disc_t=disc_t, disc_s=disc_s,
        adam_d=mk(d_params), adam_gf=mk(gf_params), adam_k=mk(k_params),
        epoch=-1, rng_state={}, sampler_state={},
    )


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def _stack(values: list[np.ndarray]) -> torch.Tensor:
    return torch.from_numpy(np.stack(values)[:, None, :, :])


def _mask_tensor(masks: list[DomainMask], h: int, w: int) -> torch.Tensor:
    bits = torch.tensor([m.bits for m in masks], dtype=torch.float32)
    return bits[:, :, None, None].expand(len(masks), bits.shape[1], h, w)


def _grad_dict(loss, params: dict[str, torch.nn.Parameter],
               retain: bool = False) -> dict[str, torch.Tensor]:
    names = list(params)
    grads = torch.autograd.grad(loss, [params[n] for n in names],
                                retain_graph=retain, allow_unused=True)
    return dict(zip(names, grads))


def train(
    cfg: TrainConfig,
    dataset: UnpairedDataset,
    out_dir: str | os.PathLike,
    resume_from: str | os.PathLike | None = None,
) -> Checkpoint:
    """Run the alternating optimization; returns the final checkpoint.

    Writes ``training_log.csv`` (one row per step) and ``ckpt_<epoch>/``
    directories under ``out_dir``. Aborts on non-finite losses after dumping
    the last good checkpoint.
    """
    torch.use_deterministic_algorithms(True)
    out_dir = str(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    if resume_from is not None:
        ck = Checkpoint.load(resume_from)
        if ck.config.to_dict() != cfg.to_dict():
            raise TrainError("resume config differs from checkpoint config")
        rng = rng_from_state_dict(ck.rng_state)
        start_epoch = ck.epoch + 1
        log_mode = "a"
    else:
        ck = build_networks(cfg)
        rng = RngState(cfg.seed, 10).generator()
        start_epoch = 0
        log_mode = "w"
    sampler = BatchSampler(dataset, cfg)
    if resume_from is not None:
        sampler.restore(ck.sampler_state)

    weights = cfg.weights
    bits = len(legal_masks(cfg.domain_mode)[0])
    steps_per_epoch = max(1, len(dataset.source) // cfg.batch)
    log_path = os.path.join(out_dir, "training_log.csv")
    log_file = open(log_path, log_mode, newline="")
    log = csv.writer(log_file)
    if log_mode == "w":
        log.writerow(LOG_HEADER)

    d_params = dict(ck.adam_d.params)
    gf_params = dict(ck.adam_gf.params)
    k_params = dict(ck.adam_k.params)

    try:
        for epoch in range(start_epoch, cfg.epochs):
            lr = lr_at(epoch, cfg)
            sampler.start_epoch(rng)
            for step in range(steps_per_epoch):
                batch = sampler.sample_batch(rng)
                # alphas for every critic sub-step are drawn before augmentation
                alpha_blocks = [rng.random(cfg.batch) for _ in range(2 * cfg.n_critic)]
                ys = [augment(v, rng, cfg) for v in batch["y"]]
                xs = [augment(v, rng, cfg) for v in batch["x"]]
                y = _stack(ys)
                x = _stack(xs)
                h, w = y.shape[2], y.shape[3]
                mask_pl = _mask_tensor(batch["masks"], h, w)
                labels = torch.tensor([m.bits for m in batch["masks"]], dtype=torch.float32)

                with torch.no_grad():
                    fake_x = ck.gen_g(torch.cat([y, mask_pl], dim=1))
                    fake_y = ck.gen_f(x)

                alpha_queue = _QueuedUniforms(alpha_blocks)
                breakdown = LossBreakdown()
                for _ in range(cfg.n_critic):
                    real_scores_t, logits_real = ck.disc_t(x)
                    fake_scores_t, _ = ck.disc_t(fake_x)
                    adv_d_t, _ = critic_losses(real_scores_t, fake_scores_t)
                    gp_t = gradient_penalty(ck.disc_t, x, fake_x, alpha_queue)
                    real_scores_s, _ = ck.disc_s(y)
                    fake_scores_s, _ = ck.disc_s(fake_y)
                    adv_d_s, _ = critic_losses(real_scores_s, fake_scores_s)
                    gp_s = gradient_penalty(ck.disc_s, y, fake_y, alpha_queue)
                    cls_real = classification_loss(logits_real, labels, cfg.multihot)
                    loss_d = (adv_d_t + adv_d_s + weights.lam_gp * (gp_t + gp_s)
                              + weights.lam_cls * cls_real)
                    if not torch.isfinite(loss_d):
                        raise LossError("non-finite critic loss", breakdown)
                    ck.adam_d.step(_grad_dict(loss_d, d_params), lr)
                breakdown.adv_d_target = adv_d_t.detach().item()
                breakdown.adv_d_source = adv_d_s.detach().item()
                breakdown.gp = (gp_t + gp_s).detach().item()
                breakdown.cls_real = cls_real.detach().item()

                # generator update (fresh graphs; critics evaluated, not updated,
                # except the classifier branch which learns from cls_fake)
                fake_x = ck.gen_g(torch.cat([y, mask_pl], dim=1))
                fake_y = ck.gen_f(x)
                x_rec = ck.gen_g(torch.cat([fake_y, mask_pl], dim=1))
                y_rec = ck.gen_f(fake_x)
                cyc = cycle_loss(x, x_rec, y, y_rec)
                fake_scores_t, logits_fake = ck.disc_t(fake_x)
                fake_scores_s, _ = ck.disc_s(fake_y)
                adv_g = -fake_scores_t.mean() - fake_scores_s.mean()
                cls_fake = classification_loss(logits_fake, labels, cfg.multihot)
                loss_gf = weights.lam_cyc * cyc + adv_g
                loss_cls = weights.lam_cls * cls_fake
                if not (torch.isfinite(loss_gf) and torch.isfinite(loss_cls)):
                    raise LossError("non-finite generator loss", breakdown)
                grads_gf = _grad_dict(loss_gf, gf_params, retain=True)
                both = dict(gf_params)
                both.update(k_params)
                grads_cls = _grad_dict(loss_cls, both)
                gf_total = {n: _add_opt(grads_gf.get(n), grads_cls.get(n)) for n in gf_params}
                ck.adam_gf.step(gf_total, lr)
                ck.adam_k.step({n: grads_cls.get(n) for n in k_params}, lr)

                breakdown.cycle = cyc.detach().item()
                breakdown.adv_g = adv_g.detach().item()
                breakdown.cls_fake = cls_fake.detach().item()
                breakdown = total_losses(weights, breakdown)
                log.writerow([epoch, step] + [repr(v) for v in breakdown.as_row()] + [repr(lr)])
            log_file.flush()
            ck.epoch = epoch
            ck.rng_state = rng_state_dict(rng)
            ck.sampler_state = sampler.state()
            if cfg.checkpoint_interval and (epoch + 1) % cfg.checkpoint_interval == 0:
                ck.save(os.path.join(out_dir, f"ckpt_{epoch:05d}"))
    except LossError as err:
        if ck.epoch >= 0:
            ck.save(os.path.join(out_dir, f"ckpt_{ck.epoch:05d}_lastgood"))
        raise TrainError(f"aborted: {err}", err.breakdown) from err
    finally:
        log_file.close()
    ck.save(os.path.join(out_dir, f"ckpt_{cfg.epochs - 1:05d}"))
    return ck


def _add_opt(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return a + b


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

def infer(checkpoint: Checkpoint | str | os.PathLike, img: Image, mask: DomainMask) -> tuple[Image, float]:
    """Single forward of the mask-conditioned generator; returns (image, seconds)."""
    ck = checkpoint if isinstance(checkpoint, Checkpoint) else Checkpoint.load(checkpoint)
    legal = {m.bits for m in legal_masks(ck.config.domain_mode)}
    if tuple(mask.bits) not in legal:
        raise TrainError(f"mask {mask.bits} not legal for domain mode {ck.config.domain_mode!r}")
    x = image_to_tensor(img)
    x = with_mask_planes(x, mask)
    with torch.no_grad():
        t0 = time.perf_counter()
        out = ck.gen_g(x)
        elapsed = time.perf_counter() - t0
    return tensor_to_image(out), elapsed

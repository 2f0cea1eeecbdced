"""Network architectures: mask-conditioned generator, maskless return generator,
and patch critics (the target-space critic carries a domain-classifier head on
the shared trunk).

All parameters are initialized from a counter-based numpy stream so that two
inits with the same key are bit-identical regardless of torch's global RNG.
Forward passes are pure; gradients (including the second-order path needed by
the gradient penalty) come from torch autograd.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import DomainMask, Image, RngState

INSTANCE_NORM_EPS = 1e-5
LEAKY_SLOPE = 0.01
INIT_STD = 0.02
DISC_LAYERS = 6
MIN_DISC_SIZE = 64


class NetError(ValueError):
    pass


class ResidualBlock(nn.Module):
    def __init__(self, channels: int, kernel: int = 3):
        super().__init__()
        pad = kernel // 2
        self.conv1 = nn.Conv2d(channels, channels, kernel, 1, pad, padding_mode="reflect")
        self.norm1 = nn.InstanceNorm2d(channels, affine=True, eps=INSTANCE_NORM_EPS)
        self.conv2 = nn.Conv2d(channels, channels, kernel, 1, pad, padding_mode="reflect")
        self.norm2 = nn.InstanceNorm2d(channels, affine=True, eps=INSTANCE_NORM_EPS)

    def forward(self, x):
        h = torch.relu(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        return x + h


class Generator(nn.Module):
    """Encoder (2 stride-2 stages), 6 residual blocks, decoder, tanh output.

    Input spatial size must be divisible by 4; the output recovers the input
    shape exactly and lies strictly inside (-1, 1).
    """

    def __init__(self, in_channels: int, width: int = 64, res_blocks: int = 6,
                 in_kernel: int = 7, kernel: int = 3):
        super().__init__()
        self.in_channels = in_channels
        self.width = width
        w = width
        self.head = nn.Conv2d(in_channels, w, in_kernel, 1, in_kernel // 2, padding_mode="reflect")
        self.head_norm = nn.InstanceNorm2d(w, affine=True, eps=INSTANCE_NORM_EPS)
        self.down1 = nn.Conv2d(w, 2 * w, kernel, 2, kernel // 2)
        self.down1_norm = nn.InstanceNorm2d(2 * w, affine=True, eps=INSTANCE_NORM_EPS)
        self.down2 = nn.Conv2d(2 * w, 4 * w, kernel, 2, kernel // 2)
        self.down2_norm = nn.InstanceNorm2d(4 * w, affine=True, eps=INSTANCE_NORM_EPS)
        self.blocks = nn.ModuleList(ResidualBlock(4 * w, kernel) for _ in range(res_blocks))
        self.up1 = nn.ConvTranspose2d(4 * w, 2 * w, kernel, 2, kernel // 2, output_padding=1)
        self.up1_norm = nn.InstanceNorm2d(2 * w, affine=True, eps=INSTANCE_NORM_EPS)
        self.up2 = nn.ConvTranspose2d(2 * w, w, kernel, 2, kernel // 2, output_padding=1)
        self.up2_norm = nn.InstanceNorm2d(w, affine=True, eps=INSTANCE_NORM_EPS)
        self.tail = nn.Conv2d(w, 1, in_kernel, 1, in_kernel // 2, padding_mode="reflect")

    def forward(self, x):
        if x.shape[1] != self.in_channels:
            raise NetError(f"expected {self.in_channels} input channels, got {x.shape[1]}")
        if x.shape[2] % 4 or x.shape[3] % 4:
            raise NetError(f"spatial size {tuple(x.shape[2:])} not divisible by 4")
        h = torch.relu(self.head_norm(self.head(x)))
        h = torch.relu(self.down1_norm(self.down1(h)))
        h = torch.relu(self.down2_norm(self.down2(h)))
        for block in self.blocks:
            h = block(h)
        h = torch.relu(self.up1_norm(self.up1(h)))
        h = torch.relu(self.up2_norm(self.up2(h)))
        return torch.tanh(self.tail(h))


class Discriminator(nn.Module):
    """PatchGAN-style Wasserstein critic: 6 4x4 stride-2 convolutions.

    Per-layer padding keeps the ceil(n/2) size recursion, so a HxW input maps
    to a ceil(H/64) x ceil(W/64) patch-score grid with no output nonlinearity.
    ``domains`` adds the classifier head on the shared trunk.
    """

    def __init__(self, width: int = 64, domains: int | None = None):
        super().__init__()
        self.width = width
        self.domains = domains
        chans = [1] + [width * 2 ** i for i in range(DISC_LAYERS)]
        self.trunk = nn.ModuleList(
            nn.Conv2d(chans[i], chans[i + 1], 4, 2, 0) for i in range(DISC_LAYERS)
        )
        self.head_patch = nn.Conv2d(chans[-1], 1, 3, 1, 1)
        self.head_cls = nn.Conv2d(chans[-1], domains, 1) if domains else None

    def trunk_forward(self, x):
        if x.shape[2] < MIN_DISC_SIZE or x.shape[3] < MIN_DISC_SIZE:
            raise NetError(
                f"discriminator needs at least {MIN_DISC_SIZE} pixels per axis, got {tuple(x.shape[2:])}"
            )
        h = x
        for conv in self.trunk:
            h = conv(_pad_ceil(h))
            h = F.leaky_relu(h, LEAKY_SLOPE)
        return h

    def forward(self, x):
        h = self.trunk_forward(x)
        scores = self.head_patch(h)
        logits = self.head_cls(h).mean(dim=(2, 3)) if self.head_cls is not None else None
        return scores, logits

    def classifier_parameters(self):
        """Parameters of the domain classifier: shared trunk + class head."""
        if self.head_cls is None:
            raise NetError("discriminator has no classifier head")
        return list(self.trunk.parameters()) + list(self.head_cls.parameters())


def _pad_ceil(x):
    """Pad so a 4x4 stride-2 convolution yields ceil(n/2) per axis."""
    h, w = x.shape[2], x.shape[3]
    ph = 2 if h % 2 == 0 else 3
    pw = 2 if w % 2 == 0 else 3
    return F.pad(x, (1, pw - 1, 1, ph - 1))


def patch_grid_shape(h: int, w: int) -> tuple[int, int]:
    """Patch-score grid size: six halvings with ceil rounding."""
    for _ in range(DISC_LAYERS):
        h = (h + 1) // 2
        w = (w + 1) // 2
    return h, w


# ---------------------------------------------------------------------------
# deterministic initialization
# ---------------------------------------------------------------------------

def init_params(module: nn.Module, rng: RngState) -> None:
    """Zero-mean init: N(0, 0.02) conv weights, zero biases, identity norms."""
    gen = rng.generator()
    for name, p in module.named_parameters():
        with torch.no_grad():
            if name.endswith("weight") and ("norm" in name or p.ndim == 1):
                p.fill_(1.0)
            elif name.endswith("bias"):
                p.zero_()
            else:
                w = gen.normal(0.0, INIT_STD, size=tuple(p.shape))
                p.copy_(torch.from_numpy(w.astype(np.float32)))


def init_generator(in_channels: int, width: int, rng: RngState, res_blocks: int = 6) -> Generator:
    g = Generator(in_channels, width, res_blocks)
    init_params(g, rng)
    return g


def init_discriminator(width: int, rng: RngState, domains: int | None = None) -> Discriminator:
    d = Discriminator(width, domains)
    init_params(d, rng)
    return d


# ---------------------------------------------------------------------------
# image-level wrappers
# ---------------------------------------------------------------------------

def image_to_tensor(img: Image) -> torch.Tensor:
    return torch.from_numpy(img.values).reshape(1, 1, img.height, img.width)


def tensor_to_image(t: torch.Tensor) -> Image:
    v = t.detach().squeeze().cpu().numpy().astype(np.float32)
    return Image(np.clip(v, -1.0, 1.0))


def with_mask_planes(x: torch.Tensor, mask: DomainMask) -> torch.Tensor:
    planes = torch.tensor(mask.bits, dtype=x.dtype).reshape(1, len(mask), 1, 1)
    planes = planes.expand(x.shape[0], len(mask), x.shape[2], x.shape[3])
    return torch.cat([x, planes], dim=1)


def generator_forward(gen: Generator, img: Image, mask: DomainMask | None = None) -> Image:
    """Single-image forward; the mask must match the generator's conditioning."""
    x = image_to_tensor(img)
    if mask is not None:
        if gen.in_channels != 1 + len(mask):
            raise NetError(f"generator expects {gen.in_channels} channels, mask has {len(mask)} bits")
        x = with_mask_planes(x, mask)
    elif gen.in_channels != 1:
        raise NetError("generator is mask-conditioned but no mask was given")
    with torch.no_grad():
        y = gen(x)
    return tensor_to_image(y)


def discriminator_forward(disc: Discriminator, img: Image):
    """Single-image forward: (patch score grid, domain logits or None)."""
    with torch.no_grad():
        scores, logits = disc(image_to_tensor(img))
    scores = scores.squeeze(0).squeeze(0).numpy()
    return scores, (logits.squeeze(0).numpy() if logits is not None else None)


def input_gradient(disc: Discriminator, x: torch.Tensor) -> torch.Tensor:
    """d(sum of patch scores)/d(input), used by the gradient penalty."""
    x = x.detach().requires_grad_(True)
    scores, _ = disc(x)
    (grad,) = torch.autograd.grad(scores.sum(), x, create_graph=False)
    return grad


# ---------------------------------------------------------------------------
# parameter blobs (checkpoint building blocks)
# ---------------------------------------------------------------------------

def named_arrays(module: nn.Module) -> dict[str, np.ndarray]:
    return {
        name: p.detach().cpu().numpy().astype("<f4")
        for name, p in module.named_parameters()
    }


def load_arrays(module: nn.Module, arrays: dict[str, np.ndarray]) -> None:
    params = dict(module.named_parameters())
    if set(params) != set(arrays):
        missing = set(params) ^ set(arrays)
        raise NetError(f"parameter name mismatch: {sorted(missing)}")
    for name, p in params.items():
        a = np.asarray(arrays[name], dtype=np.float32)
        if tuple(a.shape) != tuple(p.shape):
            raise NetError(f"shape mismatch for {name}: {a.shape} vs {tuple(p.shape)}")
        with torch.no_grad():
            p.copy_(torch.from_numpy(a))

"""Training objective: cycle consistency, Wasserstein critic terms, gradient
penalty, and the domain-classification terms, plus the weighted totals.

Sign conventions are fixed so that both totals are minimized: the critics
minimize ``total_d`` (equivalently maximize the dual objective) while the
generators and the classifier's fake branch minimize ``total_g``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .core import DomainMask


class LossError(RuntimeError):
    def __init__(self, message: str, breakdown: "LossBreakdown | None" = None):
        super().__init__(message)
        self.breakdown = breakdown


@dataclass(frozen=True)
class LossWeights:
    lam_cyc: float = 20.0
    lam_gp: float = 30.0
    lam_cls: float = 1.0

    def __post_init__(self):
        if min(self.lam_cyc, self.lam_gp, self.lam_cls) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class LossBreakdown:
    cycle: float = 0.0
    adv_g: float = 0.0
    adv_d_target: float = 0.0
    adv_d_source: float = 0.0
    gp: float = 0.0
    cls_real: float = 0.0
    cls_fake: float = 0.0
    total_g: float = 0.0
    total_d: float = 0.0

    def as_row(self) -> list[float]:
        return [self.cycle, self.adv_g, self.adv_d_target, self.adv_d_source,
                self.gp, self.cls_real, self.cls_fake, self.total_g, self.total_d]


def cycle_loss(x, x_rec, y, y_rec):
    """Mean absolute reconstruction error summed over the two cycle legs."""
    if x.shape != x_rec.shape or y.shape != y_rec.shape:
        raise LossError("cycle loss shape mismatch")
    return (x - x_rec).abs().mean() + (y - y_rec).abs().mean()


def critic_losses(real_scores, fake_scores):
    """Wasserstein patch-critic losses: (critic minimizes, generator minimizes)."""
    loss_d = fake_scores.mean() - real_scores.mean()
    loss_g = -fake_scores.mean()
    return loss_d, loss_g


def gradient_penalty(disc, real: torch.Tensor, fake: torch.Tensor,
                     rng: np.random.Generator) -> torch.Tensor:
    """Mean (||grad of patch-score sum at the interpolate|| - 1)^2.

    One alpha is drawn per batch element from ``rng`` (the training stream),
    so the penalty is reproducible for a fixed stream position. The graph is
    kept so the penalty can be differentiated w.r.t. critic parameters.
    """
    if real.shape != fake.shape:
        raise LossError("gradient penalty shape mismatch")
    alpha_np = rng.random(real.shape[0])
    alpha = torch.from_numpy(alpha_np.astype(np.float32)).to(real.dtype)
    alpha = alpha.reshape(-1, *([1] * (real.ndim - 1)))
    interp = (alpha * real + (1.0 - alpha) * fake.detach()).requires_grad_(True)
    scores, _ = disc(interp)
    (grad,) = torch.autograd.grad(scores.sum(), interp, create_graph=True)
    norms = grad.flatten(1).norm(2, dim=1)
    return ((norms - 1.0) ** 2).mean()


def _label_tensor(labels, n_domains: int) -> torch.Tensor:
    if isinstance(labels, DomainMask):
        labels = [labels]
    if isinstance(labels, (list, tuple)) and labels and isinstance(labels[0], DomainMask):
        arr = np.array([m.bits for m in labels], dtype=np.float32)
        labels = torch.from_numpy(arr)
    if labels.ndim == 1:
        labels = labels.unsqueeze(0)
    if labels.shape[1] != n_domains:
        raise LossError(f"label width {labels.shape[1]} != logit width {n_domains}")
    if (labels.sum(dim=1) == 0).any():
        raise LossError("all-zero domain label")
    return labels


def classification_loss(logits: torch.Tensor, labels, multihot: bool = False):
    """Negative log-likelihood of the labeled domain(s).

    One-hot labels use the multinomial form (softmax cross-entropy); multi-hot
    labels treat the head as independent per-bit binary classifiers and
    average the per-bit binary cross-entropy, since a normalized exponential
    over two logits cannot express [1, 1].
    """
    if logits.ndim == 1:
        logits = logits.unsqueeze(0)
    labels = _label_tensor(labels, logits.shape[1]).to(logits.dtype)
    if multihot:
        return F.binary_cross_entropy_with_logits(logits, labels, reduction="mean")
    if (labels.sum(dim=1) != 1).any():
        raise LossError("one-hot mode requires exactly one bit per label")
    log_probs = F.log_softmax(logits, dim=1)
    return -(labels * log_probs).sum(dim=1).mean()


def total_losses(weights: LossWeights, parts: LossBreakdown) -> LossBreakdown:
    """Fill the weighted totals; abort on NaN with the breakdown attached."""
    values = parts.as_row()[:7]
    if any(not np.isfinite(v) for v in values):
        raise LossError("non-finite loss part", parts)
    total_g = weights.lam_cyc * parts.cycle + parts.adv_g + weights.lam_cls * parts.cls_fake
    total_d = (parts.adv_d_target + parts.adv_d_source
               + weights.lam_gp * parts.gp + weights.lam_cls * parts.cls_real)
    return LossBreakdown(
        cycle=parts.cycle, adv_g=parts.adv_g,
        adv_d_target=parts.adv_d_target, adv_d_source=parts.adv_d_source,
        gp=parts.gp, cls_real=parts.cls_real, cls_fake=parts.cls_fake,
        total_g=float(total_g), total_d=float(total_d),
    )

"""Losses of the self-adversarial framework.

Images are tensors of shape (B, C, H, W) with values in [0, 1]; gaze labels
are (B, 2) tensors of (pitch, yaw). Image losses reduce by the mean over
batch, channels and pixels so that the loss weights do not depend on the
resolution.

The per-location squared difference used by the backbone's adversarial term
is the channel mean of the squared differences, so its spatial mean is
exactly the reconstruction loss and the truncation gate is a single bit per
pixel location.
"""
from dataclasses import asdict, dataclass

import torch

from .errors import DomainError


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 1.0
    k: float = 0.75

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise DomainError("alpha and beta must be non-negative")
        if not 0 <= self.k < 1:
            raise DomainError(f"k must lie in [0, 1), got {self.k}")


@dataclass
class LossReport:
    """Scalar values of one training step.

    ``adv_loss`` is the plain ``1 - rec_loss``; ``adv_term`` is the attention
    weighted and truncated version that actually drives the backbone.
    """

    gaze_loss: float
    rec_loss: float = float("nan")
    adv_loss: float = float("nan")
    adv_term: float = float("nan")
    backbone_loss: float = float("nan")
    sa_loss: float = float("nan")
    mlp_loss: float = float("nan")
    gated_fraction: float = float("nan")

    def to_dict(self):
        return asdict(self)


def _check_pair(original, reconstructed):
    if original.shape != reconstructed.shape:
        raise DomainError(
            f"image shapes differ: {tuple(original.shape)} vs {tuple(reconstructed.shape)}")


def gaze_loss(pred: torch.Tensor, truth: torch.Tensor) -> torch.Tensor:
    """L1 distance between (pitch, yaw) pairs, averaged over the batch."""
    if pred.shape != truth.shape or pred.shape[-1] != 2:
        raise DomainError(f"gaze shapes must match and end in 2: {tuple(pred.shape)} vs {tuple(truth.shape)}")
    return (pred - truth).abs().sum(dim=-1).mean()


def reconstruction_loss(original: torch.Tensor, reconstructed: torch.Tensor) -> torch.Tensor:
    _check_pair(original, reconstructed)
    return ((original - reconstructed) ** 2).mean()


def adversarial_loss(original: torch.Tensor, reconstructed: torch.Tensor) -> torch.Tensor:
    return 1.0 - reconstruction_loss(original, reconstructed)


# The SA-Module is trained on the plain reconstruction loss; attention and
# truncation only ever apply to the backbone's adversarial term.
sa_module_loss = reconstruction_loss


def pixel_sq_diff(original: torch.Tensor, reconstructed: torch.Tensor) -> torch.Tensor:
    """Per-location squared difference, shape (B, H, W)."""
    _check_pair(original, reconstructed)
    return ((original - reconstructed) ** 2).mean(dim=1)


def truncation_gate(sq_diff: torch.Tensor, k: float) -> torch.Tensor:
    """1 where the pixel still counts as reconstructed, i.e. ``1 - d^2 > k``.

    The gate is piecewise constant and carries no gradient.
    """
    return ((1.0 - sq_diff) > k).to(sq_diff.dtype).detach()


def adversarial_term(original, reconstructed, attention=None, k: float = 0.0):
    """Attention-weighted, truncated adversarial term and the active fraction.

    ``attention`` is (B, H, W) or (H, W); ``None`` means uniform weight 1.
    """
    sq = pixel_sq_diff(original, reconstructed)
    if attention is not None:
        attention = attention.to(sq.dtype)
        if attention.shape[-2:] != sq.shape[-2:]:
            raise DomainError(
                f"attention map {tuple(attention.shape)} does not match image {tuple(sq.shape[-2:])}")
    gate = truncation_gate(sq, k)
    weighted = gate * (1.0 - sq)
    if attention is not None:
        weighted = attention * weighted
    return weighted.mean(), gate.mean()


def backbone_loss(original, reconstructed, pred, truth, attention=None,
                  weights: LossWeights = LossWeights()) -> torch.Tensor:
    """alpha * E[M * gate * (1 - d^2)] + beta * L_gaze."""
    term, _ = adversarial_term(original, reconstructed, attention, weights.k)
    return weights.alpha * term + weights.beta * gaze_loss(pred, truth)

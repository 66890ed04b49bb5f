"""Mixed-Gaussian attention maps centred on the eyes.

Each eye contributes an unnormalized isotropic Gaussian with unit peak and the
map is their pointwise maximum, so weights stay in [0, 1] whatever the
resolution or the number of eyes.
"""
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import DomainError

DEFAULT_SIGMA_SQ = 20.0
# Resolution (pixels, square input) at which DEFAULT_SIGMA_SQ is expressed.
REFERENCE_RESOLUTION = 224


@dataclass(frozen=True)
class AttentionMap:
    weights: np.ndarray
    sigma_sq: float
    eye_centers: tuple = field(default=())

    @property
    def shape(self):
        return self.weights.shape


def scaled_sigma_sq(sigma_sq: float, resolution: int,
                    reference_resolution: int = REFERENCE_RESOLUTION) -> float:
    """Rescale a variance given at ``reference_resolution`` to ``resolution``."""
    if sigma_sq <= 0:
        raise DomainError("sigma_sq must be positive")
    return sigma_sq * (resolution / reference_resolution) ** 2


def _validate(height, width, eye_centers, sigma_sq):
    if height <= 0 or width <= 0:
        raise DomainError(f"image size must be positive, got {height}x{width}")
    if not sigma_sq > 0:
        raise DomainError(f"sigma_sq must be positive, got {sigma_sq}")
    centers = np.asarray(eye_centers, dtype=np.float64).reshape(-1, 2)
    if len(centers) == 0:
        raise DomainError("at least one eye center is required")
    rows, cols = centers[:, 0], centers[:, 1]
    if np.any(rows < 0) or np.any(rows > height - 1) or np.any(cols < 0) or np.any(cols > width - 1):
        raise DomainError(f"eye centers {centers.tolist()} fall outside a {height}x{width} image")
    return centers


def build_attention_map(height: int, width: int, eye_centers, sigma_sq: float) -> AttentionMap:
    """Build the (height, width) attention map for ``eye_centers`` given as (row, col)."""
    centers = _validate(height, width, eye_centers, sigma_sq)
    rows = np.arange(height, dtype=np.float64)[:, None, None]
    cols = np.arange(width, dtype=np.float64)[None, :, None]
    dist_sq = (rows - centers[:, 0]) ** 2 + (cols - centers[:, 1]) ** 2
    weights = np.exp(-dist_sq / (2.0 * sigma_sq)).max(axis=-1)
    weights.setflags(write=False)
    return AttentionMap(weights, float(sigma_sq), tuple(map(tuple, centers.tolist())))


def batch_attention_maps(eye_centers: torch.Tensor, height: int, width: int,
                         sigma_sq) -> torch.Tensor:
    """Attention maps for a batch, shape (B, H, W).

    ``eye_centers`` has shape (B, E, 2). ``sigma_sq=None`` disables the
    weighting and returns all ones.
    """
    batch = eye_centers.shape[0]
    if sigma_sq is None:
        return torch.ones(batch, height, width, dtype=eye_centers.dtype)
    if not sigma_sq > 0:
        raise DomainError(f"sigma_sq must be positive, got {sigma_sq}")
    rows = torch.arange(height, dtype=eye_centers.dtype).view(1, height, 1, 1)
    cols = torch.arange(width, dtype=eye_centers.dtype).view(1, 1, width, 1)
    r = eye_centers[..., 0].view(batch, 1, 1, -1)
    c = eye_centers[..., 1].view(batch, 1, 1, -1)
    dist_sq = (rows - r) ** 2 + (cols - c) ** 2
    return torch.exp(-dist_sq / (2.0 * sigma_sq)).amax(dim=-1)


def save_attention_png(attention: AttentionMap, path) -> None:
    """Write the map as an 8-bit grayscale PNG."""
    from PIL import Image

    pixels = np.round(np.clip(attention.weights, 0, 1) * 255).astype(np.uint8)
    Image.fromarray(pixels, mode="L").save(path)

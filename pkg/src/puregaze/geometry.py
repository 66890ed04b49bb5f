"""Gaze direction representations and the angular-error metric.

Convention (normalized camera space, camera looks along +z, x right, y down)::

    x = -cos(pitch) * sin(yaw)
    y = -sin(pitch)
    z = -cos(pitch) * cos(yaw)

so (pitch, yaw) = (0, 0) points straight back at the camera, positive pitch
looks up and positive yaw looks towards the subject's left (image left).
All functions broadcast over leading axes: labels are ``(..., 2)`` arrays of
(pitch, yaw) and vectors are ``(..., 3)`` arrays.
"""
from typing import NamedTuple

import numpy as np

from .errors import DomainError

_TOL = 1e-12


class GazeLabel(NamedTuple):
    pitch: float
    yaw: float

    def validate(self) -> "GazeLabel":
        _check_label_range(np.asarray(self, dtype=np.float64))
        return self


class GazeVector(NamedTuple):
    x: float
    y: float
    z: float


def _check_label_range(labels: np.ndarray) -> None:
    if labels.shape[-1] != 2:
        raise DomainError(f"labels must have a trailing axis of 2, got shape {labels.shape}")
    if not np.all(np.isfinite(labels)):
        raise DomainError("labels contain non-finite values")
    pitch, yaw = labels[..., 0], labels[..., 1]
    if np.any(np.abs(pitch) > np.pi / 2 + _TOL) or np.any(np.abs(yaw) > np.pi + _TOL):
        raise DomainError("pitch must lie in [-pi/2, pi/2] and yaw in [-pi, pi]")


def _norms(vectors: np.ndarray) -> np.ndarray:
    if vectors.shape[-1] != 3:
        raise DomainError(f"vectors must have a trailing axis of 3, got shape {vectors.shape}")
    norms = np.linalg.norm(vectors, axis=-1)
    if np.any(~np.isfinite(norms)) or np.any(norms <= _TOL):
        raise DomainError("gaze vector has zero or non-finite norm")
    return norms


def pitchyaw_to_vector(labels) -> np.ndarray:
    """Convert (pitch, yaw) radians to unit gaze vectors."""
    labels = np.asarray(labels, dtype=np.float64)
    _check_label_range(labels)
    pitch, yaw = labels[..., 0], labels[..., 1]
    cp = np.cos(pitch)
    return np.stack([-cp * np.sin(yaw), -np.sin(pitch), -cp * np.cos(yaw)], axis=-1)


def vector_to_pitchyaw(vectors) -> np.ndarray:
    """Inverse of :func:`pitchyaw_to_vector`; input is renormalized first."""
    vectors = np.asarray(vectors, dtype=np.float64)
    unit = vectors / _norms(vectors)[..., None]
    pitch = np.arcsin(np.clip(-unit[..., 1], -1.0, 1.0))
    # + 0.0 turns -0.0 into 0.0 so the poles map to yaw 0, not -pi.
    yaw = np.arctan2(-unit[..., 0] + 0.0, -unit[..., 2] + 0.0)
    return np.stack([pitch, yaw], axis=-1)


def angular_error(a, b) -> np.ndarray:
    """Angle in degrees between gaze vectors ``a`` and ``b``.

    This is arccos of the cosine similarity, evaluated as
    ``atan2(|a x b|, a . b)`` on the normalized vectors, which stays accurate
    for nearly parallel vectors where arccos loses half the digits. The
    result is always in [0, 180].
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    a = a / _norms(a)[..., None]
    b = b / _norms(b)[..., None]
    sin = np.linalg.norm(np.cross(a, b), axis=-1)
    cos = np.sum(a * b, axis=-1)
    return np.degrees(np.arctan2(sin, cos))


def pitchyaw_angular_error(pred, truth) -> np.ndarray:
    """Angular error in degrees between two sets of (pitch, yaw) labels."""
    return angular_error(pitchyaw_to_vector(pred), pitchyaw_to_vector(truth))

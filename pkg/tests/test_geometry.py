import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from puregaze.errors import DomainError
from puregaze.geometry import (GazeLabel, GazeVector, angular_error, pitchyaw_angular_error,
                               pitchyaw_to_vector, vector_to_pitchyaw)

# Frozen from tests/oracles.py (mpmath, 50 digits).
VEC_01_02 = (-0.19767681165408387442, -0.09983341664682815783, -0.97517032720181589013)
ANGLE_01_02__015_025 = 4.0354274049962270392

pitches = st.floats(-math.pi / 2 + 1e-3, math.pi / 2 - 1e-3)
yaws = st.floats(-math.pi + 1e-3, math.pi - 1e-3)
unit_vectors = st.tuples(pitches, yaws).map(lambda py: pitchyaw_to_vector(py))


def test_identity_direction():
    np.testing.assert_allclose(pitchyaw_to_vector(GazeLabel(0.0, 0.0)), [0, 0, -1], atol=1e-15)


def test_pole():
    np.testing.assert_allclose(pitchyaw_to_vector((math.pi / 2, 0.0)), [0, -1, 0], atol=1e-15)


def test_vector_matches_oracle():
    np.testing.assert_allclose(pitchyaw_to_vector((0.1, 0.2)), VEC_01_02, rtol=0, atol=1e-15)


def test_inverse_examples():
    np.testing.assert_allclose(vector_to_pitchyaw(GazeVector(0, 0, -1)), [0, 0], atol=1e-15)
    np.testing.assert_allclose(vector_to_pitchyaw((0, -1, 0)), [math.pi / 2, 0], atol=1e-15)
    np.testing.assert_allclose(vector_to_pitchyaw(VEC_01_02), [0.1, 0.2], atol=1e-12)


def test_angular_error_examples():
    assert angular_error((0, 0, -1), (0, 0, -1)) == 0.0
    assert angular_error((0, 0, -1), (-1, 0, 0)) == pytest.approx(90.0, abs=1e-12)
    assert pitchyaw_angular_error((0.1, 0.2), (0.15, 0.25)) == pytest.approx(ANGLE_01_02__015_025, abs=1e-9)


def test_batched_shapes():
    labels = np.zeros((4, 5, 2))
    assert pitchyaw_to_vector(labels).shape == (4, 5, 3)
    assert pitchyaw_angular_error(labels, labels).shape == (4, 5)


@pytest.mark.parametrize("label", [(2.0, 0.0), (0.0, 3.5), (float("nan"), 0.0)])
def test_out_of_range_label(label):
    with pytest.raises(DomainError):
        pitchyaw_to_vector(label)


def test_zero_vectors_rejected():
    with pytest.raises(DomainError):
        vector_to_pitchyaw((0, 0, 0))
    with pytest.raises(DomainError):
        angular_error((0, 0, 0), (0, 0, -1))


@settings(max_examples=300, deadline=None)
@given(pitches, yaws)
def test_round_trip(pitch, yaw):
    back = vector_to_pitchyaw(pitchyaw_to_vector((pitch, yaw)))
    np.testing.assert_allclose(back, [pitch, yaw], atol=1e-9)


@settings(max_examples=200, deadline=None)
@given(unit_vectors, unit_vectors, st.floats(0.01, 100), st.floats(0.01, 100))
def test_angular_error_properties(a, b, sa, sb):
    assert angular_error(a, a) == pytest.approx(0.0, abs=2e-6)
    ab = angular_error(a, b)
    assert ab == angular_error(b, a)
    assert 0.0 <= ab <= 180.0
    assert angular_error(sa * a, sb * b) == pytest.approx(ab, abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(pitches, yaws)
def test_unit_norm(pitch, yaw):
    assert np.linalg.norm(pitchyaw_to_vector((pitch, yaw))) == pytest.approx(1.0, abs=1e-12)

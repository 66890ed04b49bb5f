import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from puregaze.attention import (DEFAULT_SIGMA_SQ, batch_attention_maps, build_attention_map,
                                save_attention_png, scaled_sigma_sq)
from puregaze.errors import DomainError


def test_peak_at_center():
    m = build_attention_map(32, 40, [(10, 12), (10, 28)], 4.0)
    assert m.weights[10, 12] == 1.0 and m.weights[10, 28] == 1.0
    assert m.weights.max() == 1.0
    assert np.all((m.weights >= 0) & (m.weights <= 1))


def test_value_at_one_sigma():
    # sigma^2 = 9 puts a pixel exactly sigma = 3 away along the row.
    m = build_attention_map(20, 20, [(10, 10)], 9.0)
    assert m.weights[10, 13] == pytest.approx(math.exp(-0.5), abs=1e-12)
    assert m.weights[13, 10] == pytest.approx(0.60653066, abs=1e-8)


def test_default_sigma_sq():
    assert DEFAULT_SIGMA_SQ == 20.0
    assert scaled_sigma_sq(20.0, 224) == 20.0
    assert scaled_sigma_sq(20.0, 112) == pytest.approx(5.0)


def test_coincident_centers_idempotent():
    a = build_attention_map(16, 16, [(5, 6)], 3.0)
    b = build_attention_map(16, 16, [(5, 6), (5, 6)], 3.0)
    np.testing.assert_array_equal(a.weights, b.weights)


def test_monotone_along_ray():
    m = build_attention_map(64, 64, [(30, 20), (30, 44)], 20.0)
    row = m.weights[30, 20::-1]
    assert np.all(np.diff(row) <= 0)
    col = m.weights[30:, 44]
    assert np.all(np.diff(col) <= 0)


@pytest.mark.parametrize("kwargs", [
    dict(height=10, width=10, eye_centers=[(10, 2)], sigma_sq=1.0),
    dict(height=10, width=10, eye_centers=[(-1, 2)], sigma_sq=1.0),
    dict(height=10, width=10, eye_centers=[], sigma_sq=1.0),
    dict(height=10, width=10, eye_centers=[(2, 2)], sigma_sq=0.0),
    dict(height=0, width=10, eye_centers=[(0, 2)], sigma_sq=1.0),
])
def test_invalid_inputs(kwargs):
    with pytest.raises(DomainError):
        build_attention_map(**kwargs)


@settings(max_examples=50, deadline=None)
@given(st.floats(8, 40), st.floats(8, 20), st.integers(-6, 6), st.integers(-6, 6), st.floats(1, 30))
def test_translation_covariance(r, c, dr, dc, sigma_sq):
    centers = [(r, c), (r, c + 20)]
    a = build_attention_map(64, 64, centers, sigma_sq).weights
    b = build_attention_map(64, 64, [(y + dr, x + dc) for y, x in centers], sigma_sq).weights
    shifted = np.roll(a, (dr, dc), axis=(0, 1))
    inner = (slice(max(dr, 0), 64 + min(dr, 0)), slice(max(dc, 0), 64 + min(dc, 0)))
    np.testing.assert_allclose(b[inner], shifted[inner], atol=1e-12)


def test_batch_maps_match_single():
    centers = np.array([[[10.5, 12.0], [10.0, 30.25]], [[20.0, 5.0], [22.0, 40.0]]])
    maps = batch_attention_maps(torch.from_numpy(centers), 32, 48, 6.0)
    for i in range(2):
        np.testing.assert_allclose(maps[i].numpy(), build_attention_map(32, 48, centers[i], 6.0).weights,
                                   atol=1e-12)
    ones = batch_attention_maps(torch.from_numpy(centers), 32, 48, None)
    assert torch.all(ones == 1)


def test_png_export(tmp_path):
    from PIL import Image

    m = build_attention_map(16, 16, [(8, 8)], 4.0)
    save_attention_png(m, tmp_path / "m.png")
    pixels = np.asarray(Image.open(tmp_path / "m.png"))
    assert pixels.shape == (16, 16) and pixels[8, 8] == 255

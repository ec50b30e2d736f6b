import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from anomaly_bench.data import GroundTruth
from anomaly_bench.errors import DegenerateSliceError, EmptyDatasetError
from anomaly_bench.preprocess import (
    BoundingBox,
    PreprocessConfig,
    crop,
    crop_labels,
    fingerprint,
    max_bounding_box,
    normalize,
    preprocess_dataset,
    is_normalizable,
    remove_degenerate,
    remove_empty,
    resize_labels,
    resize_nearest,
)

from .conftest import make_slice


def test_normalize_two_values():
    s = make_slice([[1.0, 3.0], [7.0, 0.0]], [[True, True], [False, False]])
    out = normalize(s)
    assert out.pixels.tolist() == [[-1.0, 1.0], [0.0, 0.0]]


def test_normalize_needs_spread():
    with pytest.raises(DegenerateSliceError):
        normalize(make_slice([[2.0, 2.0]]))
    with pytest.raises(DegenerateSliceError):
        normalize(make_slice([[2.0, 5.0]], [[True, False]]))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (6, 6), elements=st.floats(-100, 100)), st.integers(0, 2**31 - 1))
def test_normalized_mask_has_zero_mean_unit_std(values, seed):
    mask = np.random.default_rng(seed).random((6, 6)) < 0.7
    inside = values[mask]
    if mask.sum() < 2 or np.ptp(inside) < 1e-3:
        return
    out = normalize(make_slice(values, mask))
    z = out.pixels[mask].astype(np.float64)
    assert abs(z.mean()) < 1e-5
    assert abs(z.std() - 1.0) < 1e-4
    assert (out.pixels[~mask] == 0).all()


def test_resize_index_rule():
    s = make_slice(np.arange(16, dtype=np.float32).reshape(4, 4))
    assert resize_nearest(s, 2).pixels.tolist() == [[0, 2], [8, 10]]
    up = resize_nearest(make_slice([[1.0, 2.0], [3.0, 4.0]]), 4)
    assert up.pixels.tolist() == [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]]


def test_labels_resize_like_pixels():
    labels = np.zeros((4, 4), dtype=bool)
    labels[2, 2] = True
    assert resize_labels(GroundTruth(labels), 2).labels.tolist() == [[False, False], [False, True]]


def test_bounding_box_covers_union():
    a = np.zeros((8, 8), dtype=bool)
    b = np.zeros((8, 8), dtype=bool)
    a[1:3, 2:4] = True
    b[5, 6] = True
    box = max_bounding_box([make_slice(np.ones((8, 8)), a), make_slice(np.ones((8, 8)), b)])
    assert box == BoundingBox(1, 6, 2, 7)
    cropped = crop(make_slice(np.ones((8, 8)), a), box)
    assert cropped.shape == (5, 5)
    assert crop_labels(GroundTruth(b), box).labels[4, 4]


def test_remove_empty():
    empty = make_slice(np.zeros((3, 3)), np.zeros((3, 3), dtype=bool))
    full = make_slice(np.ones((3, 3)))
    assert remove_empty([empty, full]) == [full]
    with pytest.raises(EmptyDatasetError):
        remove_empty([empty])


def test_pipeline_output(healthy32):
    config = PreprocessConfig(target_size=16)
    processed, box, digest = preprocess_dataset(healthy32, config)
    assert all(s.shape == (16, 16) for s in processed)
    assert digest == fingerprint(config, box)
    assert digest != fingerprint(PreprocessConfig(target_size=32), box)
    _, _, again = preprocess_dataset(healthy32, config)
    assert again == digest


def test_shared_box_keeps_geometry(healthy32):
    config = PreprocessConfig(target_size=32)
    _, box, _ = preprocess_dataset(healthy32[:10], config)
    other, other_box, _ = preprocess_dataset(healthy32[10:], config, box)
    assert other_box == box
    assert len(other) == len(healthy32) - 10


def test_normalize_is_idempotent(healthy32):
    for s in healthy32[:6]:
        once = normalize(s)
        assert np.allclose(normalize(once).pixels, once.pixels, rtol=0, atol=1e-6)


def _single_pixel(shape, index=5):
    mask = np.zeros(shape, dtype=bool)
    mask[shape[0] // 2, shape[1] // 2] = True
    pixels = np.where(mask, 1.0, 0.0)
    return make_slice(pixels, mask, subject_id="edge", index=index)


def test_degenerate_slices(healthy32):
    flat = healthy32[0].replace(pixels=np.where(healthy32[0].mask, 0.5, 0.0))
    assert is_normalizable(healthy32[0])
    assert not is_normalizable(flat)
    assert not is_normalizable(_single_pixel(healthy32[0].shape))
    assert remove_degenerate([flat, healthy32[1]]) == [healthy32[1]]
    with pytest.raises(EmptyDatasetError):
        remove_degenerate([flat])


def test_pipeline_drops_degenerate_slices(healthy32, caplog):
    good = list(healthy32[:5])
    flat = good[0].replace(pixels=np.where(good[0].mask, 0.5, 0.0), slice_index=9)
    with caplog.at_level(logging.WARNING, logger="anomaly_bench.preprocess"):
        slices = good + [_single_pixel(good[0].shape), flat]
        processed, _, _ = preprocess_dataset(slices, PreprocessConfig(target_size=32))
    assert len(processed) == len(good)
    assert [str(s) for s in processed] == [str(s) for s in good]
    assert "Dropping edge[5]" in caplog.text
    assert f"Dropping {flat}" in caplog.text

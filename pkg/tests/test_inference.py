import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from localization.attention import grad_cam
from localization.errors import DomainError, ShapeError
from localization.inference import (
    AnomalyMap,
    attention_saliency,
    disentangled_attention_saliency,
    inverted_attention_saliency,
    operating_point,
    residual_map,
    residual_saliency,
    save_saliency,
    threshold_fixed,
    threshold_operating_point,
    threshold_percentile,
)


def amap(values) -> AnomalyMap:
    return AnomalyMap(values=np.asarray(values, dtype=np.float64), provenance="attention")


def brute_force_operating_point(scores: np.ndarray, labels: np.ndarray):
    """Scan every distinct score as a threshold; keep the smallest threshold among the best."""
    positives = labels.sum()
    best_thr, best_dice = None, -1.0
    for thr in sorted(set(scores.tolist())):
        predicted = scores >= thr
        dice = 2.0 * np.logical_and(predicted, labels).sum() / (predicted.sum() + positives)
        if dice > best_dice:
            best_thr, best_dice = thr, dice
    return best_thr, best_dice


def test_threshold_fixed_examples():
    assert threshold_fixed(amap([[0.2, 0.7]]), 0.5).values.tolist() == [[False, True]]
    assert threshold_fixed(amap(np.random.default_rng(0).random((4, 4))), 0.0).values.all()
    mask = threshold_fixed(amap([[0.5]]), 0.5)
    assert mask.values.tolist() == [[True]] and mask.threshold == 0.5
    with pytest.raises(DomainError):
        threshold_fixed(amap([[0.5]]), 1.0 + 1e-9)


@given(st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_threshold_fixed_is_monotone(tau1, tau2):
    values = amap(np.linspace(0.0, 1.0, 49).reshape(7, 7))
    lo, hi = min(tau1, tau2), max(tau1, tau2)
    assert (threshold_fixed(values, hi).values <= threshold_fixed(values, lo).values).all()


def test_operating_point_examples():
    assert operating_point(np.array([0.9, 0.6, 0.4, 0.1]), np.array([1, 1, 0, 0])) == (0.6, 1.0)
    thr, dice = operating_point(np.array([0.9, 0.2, 0.6, 0.1]), np.array([1, 0, 0, 0]))
    assert (thr, dice) == (0.9, 1.0)


def test_operating_point_with_perfect_scores_picks_smallest_candidate():
    labels = np.array([0, 1, 1, 0, 1], dtype=float)
    thr, dice = operating_point(labels, labels)
    assert (thr, dice) == (1.0, 1.0)


def test_operating_point_needs_both_classes():
    with pytest.raises(DomainError):
        operating_point(np.array([0.1, 0.5]), np.array([1, 1]))
    with pytest.raises(DomainError):
        threshold_operating_point([amap([[0.1, 0.5]])], [np.zeros((1, 2))])


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 500), st.integers(0, 2**32 - 1), st.booleans())
def test_operating_point_matches_brute_force(n, seed, coarse):
    rng = np.random.default_rng(seed)
    scores = rng.random(n)
    if coarse:
        scores = np.round(scores, 1)
    labels = rng.random(n) < 0.3
    labels[0], labels[1] = True, False
    thr, dice = operating_point(scores, labels)
    expected_thr, expected_dice = brute_force_operating_point(scores, labels)
    assert thr == expected_thr
    assert abs(dice - expected_dice) <= 1e-12


def test_threshold_operating_point_pools_pixels_across_images():
    maps = [amap([[0.9, 0.1]]), amap([[0.6, 0.4]])]
    gts = [np.array([[1, 0]]), np.array([[1, 0]])]
    assert threshold_operating_point(maps, gts) == 0.6


def test_percentile_examples():
    assert threshold_percentile([amap(np.full((4, 4), 0.3))], 95) == pytest.approx(0.3)
    ramp = amap(np.linspace(0.0, 1.0, 100).reshape(10, 10))
    assert threshold_percentile([ramp], 90) == pytest.approx(0.9, abs=0.01)
    low = amap(np.concatenate([np.zeros(95), np.full(5, 0.4)]).reshape(10, 10))
    high = amap(np.concatenate([np.zeros(95), np.full(5, 0.6)]).reshape(10, 10))
    assert threshold_percentile([low, high], 96) == pytest.approx(0.5)


def test_percentile_domain():
    with pytest.raises(DomainError):
        threshold_percentile([], 95)
    with pytest.raises(DomainError):
        threshold_percentile([amap([[0.1]])], 100)


def test_residual_map_examples():
    x = np.random.default_rng(2).random((8, 8))
    full = np.ones((8, 8), dtype=bool)
    assert not residual_map(x, x, full).values.any()
    assert not residual_map(x, 1.0 - x, np.zeros((8, 8), dtype=bool)).values.any()
    xhat = x.copy()
    xhat[3, 4] += 0.5
    values = residual_map(x, xhat, full).values
    assert values[3, 4] == 1.0
    values[3, 4] = 0.0
    assert not values.any()


def test_residual_map_rejects_mismatched_mask():
    with pytest.raises(ShapeError):
        residual_map(np.zeros((8, 8)), np.zeros((8, 8)), np.ones((4, 4), dtype=bool))


def test_residual_saliency_is_zero_outside_eroded_brain(tiny_model, tiny_images):
    brain = np.zeros((8, 8), dtype=bool)
    brain[1:7, 1:7] = True
    maps = residual_saliency(tiny_model, tiny_images, [brain] * len(tiny_images), erosion_radius=1)
    assert len(maps) == len(tiny_images)
    for m in maps:
        assert m.provenance == "residual"
        assert not m.values[~brain].any()
        assert not m.values[[1, 6], :].any()
    with pytest.raises(ShapeError):
        residual_saliency(tiny_model, tiny_images, [brain])


def test_attention_saliency_is_never_inverted(tiny_model, tiny_images):
    maps = attention_saliency(tiny_model, tiny_images)
    raw = grad_cam(tiny_model, tiny_images).raw.detach()
    for i, m in enumerate(maps):
        assert m.provenance == "attention"
        assert m.values.shape == (8, 8)
        peak = np.unravel_index(int(torch.argmax(raw[i, 0])), (8, 8))
        assert m.values[peak] == 1.0
        assert m.values.min() >= 0.0 and m.values.max() <= 1.0


def test_baseline_saliencies(tiny_model, tiny_images):
    inverted = inverted_attention_saliency(tiny_model, tiny_images)
    squashed = grad_cam(tiny_model, tiny_images).values.detach().double().numpy()
    assert np.allclose(inverted[0].values, 1.0 - squashed[0, 0], atol=1e-6)
    assert inverted[0].provenance == "inverted_attention"
    disentangled = disentangled_attention_saliency(tiny_model, tiny_images)
    assert disentangled[0].provenance == "attention_disentangled"
    assert disentangled[0].values.max() == 1.0


def test_save_saliency_writes_map_mask_and_sidecar(tmp_path):
    m = amap(np.linspace(0.0, 1.0, 16).reshape(4, 4))
    sidecar = save_saliency(m, threshold_fixed(m, 0.5), tmp_path / "img0", "fixed:0.5")
    assert json.loads(sidecar.read_text()) == {"provenance": "attention", "regime": "fixed:0.5", "threshold": 0.5}
    with Image.open(tmp_path / "img0_saliency.png") as saliency:
        pixels = np.asarray(saliency)
        assert pixels.max() == 65535 and pixels.min() == 0
    with Image.open(tmp_path / "img0_mask.png") as mask:
        assert mask.mode == "1"
        assert np.asarray(mask).sum() == 8

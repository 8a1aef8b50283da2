import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import ortho_group

from _images import disk_image
from nucuap import spectral
from nucuap.detector import BlobDetector, Detection
from nucuap.losses import (
    FrameGradientOracle,
    GroundTruthPartition,
    LossWeights,
    RegularizerConfig,
    averaged_gradient,
    averaged_loss,
    build_partition,
    confidence_loss,
    cross_entropy_split,
    regularizer_value,
)
from nucuap.scene import FrameSequence


def _det(score, mask, box=(0, 0, 1, 1)):
    return Detection(box, score, mask)


def _square_mask(shape, y0, x0, size, value=0.8):
    m = np.zeros(shape)
    m[y0:y0 + size, x0:x0 + size] = value
    return m


def test_partition_empty():
    p = build_partition([_det(0.4, _square_mask((6, 6), 0, 0, 2))], 0.5, (6, 6))
    assert p.n_fg == 0 and p.n_bg == 36 and not p.y.any()


def test_partition_four_pixels():
    p = build_partition([_det(0.9, _square_mask((6, 6), 1, 1, 2))], 0.5, (6, 6))
    assert p.n_fg == 4
    assert len(p.foreground) == 4 and len(p.background) == 32


def test_partition_union():
    a, b = _square_mask((8, 8), 0, 0, 3), _square_mask((8, 8), 2, 2, 3)
    p = build_partition([_det(0.9, a), _det(0.7, b)], 0.5, (8, 8))
    assert np.array_equal(p.y, (a > 0) | (b > 0))
    assert p.n_fg + p.n_bg == 64


def test_ce_half():
    y = np.zeros((4, 4), bool)
    y[:2] = True
    l_fg, l_bg = cross_entropy_split(np.full((4, 4), 0.5), GroundTruthPartition(y))
    assert l_fg == pytest.approx(math.log(2)) and l_bg == pytest.approx(math.log(2))


def test_ce_confident_correct():
    y = np.eye(4, dtype=bool)
    l_fg, l_bg = cross_entropy_split(y.astype(float), GroundTruthPartition(y))
    bound = -math.log(1 - 1e-7)
    assert l_fg <= bound + 1e-15 and l_bg <= bound + 1e-15


def test_ce_empty_foreground(rng):
    p = rng.uniform(0.1, 0.9, (3, 3))
    l_fg, l_bg = cross_entropy_split(p, GroundTruthPartition(np.zeros((3, 3), bool)))
    assert l_fg == 0.0 and l_bg == pytest.approx(-np.log(1 - p).mean())


def test_ce_permutation_invariant(rng):
    y = rng.uniform(size=(6, 6)) > 0.5
    p = rng.uniform(0.05, 0.95, (6, 6))
    base = cross_entropy_split(p, GroundTruthPartition(y))
    q = p.copy()
    q[y] = rng.permutation(p[y])
    q[~y] = rng.permutation(p[~y])
    np.testing.assert_allclose(cross_entropy_split(q, GroundTruthPartition(y)), base, rtol=1e-13)


@pytest.mark.parametrize("scores, expected", [((0.9, 0.6, 0.4), 1.5), ((), 0.0), ((0.3, 0.5), 0.0)])
def test_confidence_loss(scores, expected):
    dets = [_det(s, np.zeros((2, 2))) for s in scores]
    assert confidence_loss(dets, 0.5) == pytest.approx(expected)


def test_regularizer_examples():
    assert regularizer_value(np.zeros((4, 4, 2)), RegularizerConfig(1, 2)) == 0.0
    d = np.zeros((3, 3, 1))
    d[0, 0, 0] = d[1, 1, 0] = 2.0
    assert regularizer_value(d, RegularizerConfig(1.0, 2.0)) == pytest.approx(12.0)


def test_regularizer_recomputation(rng):
    d = rng.normal(size=(5, 6, 3))
    cfg = RegularizerConfig(0.3, 0.7)
    expected = sum(
        cfg.lambda1 * np.linalg.norm(d[:, :, c], "nuc") + cfg.lambda2 / 2 * np.sum(d[:, :, c] ** 2)
        for c in range(3)
    )
    assert regularizer_value(d, cfg) == pytest.approx(expected, rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_regularizer_unitary_invariance(seed):
    rng = np.random.default_rng(seed)
    d = rng.normal(size=(5, 4, 2))
    q1 = ortho_group.rvs(5, random_state=seed)
    q2 = ortho_group.rvs(4, random_state=seed + 1)
    rot = np.stack([q1 @ d[:, :, c] @ q2 for c in range(2)], axis=2)
    cfg = RegularizerConfig(0.4, 1.3)
    assert abs(regularizer_value(rot, cfg) - regularizer_value(d, cfg)) <= 1e-8


def test_regularizer_rejects_negative():
    with pytest.raises(ValueError):
        RegularizerConfig(-1.0, 0.0)


def _seq_and_parts(frames, det, tau=0.5):
    seq = FrameSequence(np.asarray(frames, np.float32))
    parts = [build_partition(det.forward(x)[1], tau, x.shape[:2]) for x in seq.frames]
    return seq, parts


def test_weight_linearity(rng):
    det = BlobDetector()
    x = disk_image(32, 32, [(12, 14)], 6, fg=0.9, bg=0.2)
    seq, parts = _seq_and_parts([x], det)
    delta = rng.normal(0, 0.05, x.shape)
    unit = [averaged_loss(seq, delta, det, parts, LossWeights(*w))
            for w in ((1, 0, 0), (0, 1, 0), (0, 0, 1))]
    b = averaged_loss(seq, delta, det, parts, LossWeights(2.0, 3.0, 5.0))
    assert b.l_total == pytest.approx(2 * unit[0].l_total + 3 * unit[1].l_total
                                      + 5 * unit[2].l_total, rel=1e-13)
    assert b.l_total == pytest.approx(2 * b.l_fg + 3 * b.l_bg + 5 * b.l_conf, rel=1e-13)


def test_averaged_gradient_single_frame_and_duplicates(rng):
    det = BlobDetector()
    x = disk_image(32, 32, [(12, 14)], 6, fg=0.9, bg=0.2)
    delta = rng.normal(0, 0.02, x.shape)
    seq1, parts1 = _seq_and_parts([x], det)
    seq3, parts3 = _seq_and_parts([x, x, x], det)
    _, g1 = averaged_gradient(seq1, delta, det, parts1)
    xa = np.clip(x.astype(np.float32).astype(np.float64) + delta, 0, 1)
    single = det.loss_gradient(parts1[0].detections, xa, LossWeights(), 0.5,
                               partition=parts1[0]).grad
    raw = x.astype(np.float32).astype(np.float64) + delta
    single = np.where((raw >= 0) & (raw <= 1), single, 0.0)
    np.testing.assert_array_equal(g1, single)
    _, g3 = averaged_gradient(seq3, delta, det, parts3)
    np.testing.assert_allclose(g3, g1, rtol=1e-14, atol=1e-18)


def test_averaged_gradient_is_mean_of_frames(small_scene, detector, rng):
    seq, _ = small_scene
    parts = [build_partition(detector.forward(x)[1], 0.5, x.shape[:2]) for x in seq.frames]
    delta = rng.normal(0, 0.03, seq.frame_shape)
    _, g = averaged_gradient(seq, delta, detector, parts)
    singles = []
    for b in range(len(seq)):
        sb = FrameSequence(seq.frames[b:b + 1])
        singles.append(averaged_gradient(sb, delta, detector, parts[b:b + 1])[1])
    expected = np.zeros_like(delta)
    for s in singles:
        expected += s
    np.testing.assert_array_equal(g, expected / len(singles))


def test_averaged_gradient_threads_match(small_scene, detector, rng):
    seq, _ = small_scene
    parts = [build_partition(detector.forward(x)[1], 0.5, x.shape[:2]) for x in seq.frames]
    delta = rng.normal(0, 0.03, seq.frame_shape)
    _, g1 = averaged_gradient(seq, delta, detector, parts, workers=1)
    _, g4 = averaged_gradient(seq, delta, detector, parts, workers=4)
    assert np.array_equal(g1, g4)


def test_averaged_gradient_clip_zeroes_gradient():
    det = BlobDetector()
    x = disk_image(24, 24, [(12, 12)], 5, fg=0.9, bg=0.2)
    seq, parts = _seq_and_parts([x], det)
    delta = np.zeros(x.shape)
    delta[:, :12] = 2.0  # pushes the left half far past 1
    _, g = averaged_gradient(seq, delta, det, parts)
    assert not g[:, :12].any() and g[:, 12:].any()


def test_averaged_gradient_shape_mismatch(small_scene, detector):
    seq, _ = small_scene
    with pytest.raises(ValueError):
        averaged_gradient(seq, np.zeros((3, 3, 3)), detector, [])


def test_averaged_gradient_finite_differences(small_scene, detector, rng):
    seq, _ = small_scene
    seq = FrameSequence(seq.frames[:3])
    oracle = FrameGradientOracle(seq, detector, LossWeights(1.0, 0.5, 0.5))
    delta = rng.normal(0, 0.02, seq.frame_shape)
    g = oracle(delta).grad
    base = [[d.support.tobytes() for d in detector.forward(np.clip(x + delta, 0, 1))[1]]
            for x in seq.frames.astype(np.float64)]
    h, checked = 1e-4, 0
    while checked < 10:
        i, j, c = rng.integers(32), rng.integers(32), rng.integers(3)
        dp, dm = delta.copy(), delta.copy()
        dp[i, j, c] += h
        dm[i, j, c] -= h
        same = all(
            [d.support.tobytes() for d in detector.forward(np.clip(x + dd, 0, 1))[1]] == base[b]
            for dd in (dp, dm) for b, x in enumerate(seq.frames.astype(np.float64))
        )
        if not same:
            continue
        num = (oracle.loss(dp).l_total - oracle.loss(dm).l_total) / (2 * h)
        assert abs(num - g[i, j, c]) <= 1e-4 * max(abs(num), abs(g[i, j, c]), 1e-12)
        checked += 1

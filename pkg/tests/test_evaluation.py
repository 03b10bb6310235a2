"""mIoU and DAS metric behavior."""

import numpy as np
import pytest

from keygrid.evaluation import DEFAULT_THRESHOLD, EvalError, EvalRecord, das, miou


def grid_points(k, spread=1.0):
    rng = np.random.default_rng(99)
    return (rng.random((k, 3)) - 0.5) * spread


def test_miou_perfect_match():
    pts = grid_points(10)
    assert miou(pts, pts) == pytest.approx(100.0)


def test_miou_no_match():
    pts = grid_points(10)
    assert miou(pts, pts + 5.0) == pytest.approx(0.0)


def test_miou_partial_match_arithmetic():
    # K=10 predictions, G=8 annotations, exactly 6 within threshold
    ann = np.array([[i * 1.0, 0, 0] for i in range(8)])
    pred = np.zeros((10, 3))
    pred[:6] = ann[:6] + [0.05, 0, 0]   # 6 matches
    pred[6:] = [[50, 50, 50]] * 4       # far away
    assert miou(pred, ann) == pytest.approx(100.0 * 6 / (10 + 8 - 6))


def test_miou_threshold_boundary_inclusive():
    pred = np.array([[0.1, 0.0, 0.0]])
    ann = np.array([[0.0, 0.0, 0.0]])
    # distance exactly 0.1 counts as matched
    assert miou(pred, ann, threshold=0.1) == pytest.approx(100.0)
    assert miou(pred * (1 - 1e-9), ann, threshold=0.1) == pytest.approx(100.0)
    assert miou(pred * 1.01, ann, threshold=0.1) == pytest.approx(0.0)


def test_miou_large_threshold_limit():
    pred = grid_points(10)
    ann = grid_points(7) + 3.0
    k, g = 10, 7
    want = 100.0 * min(k, g) / (k + g - min(k, g))
    assert miou(pred, ann, threshold=1e9) == pytest.approx(want)


def test_miou_optimal_at_least_greedy():
    rng = np.random.default_rng(5)
    for _ in range(20):
        pred = rng.random((6, 3))
        ann = rng.random((6, 3))
        assert miou(pred, ann, optimal=True) >= miou(pred, ann) - 1e-9


def test_miou_empty_annotation():
    with pytest.raises(EvalError):
        miou(grid_points(3), np.zeros((0, 3)))


# --- DAS with labeled references ------------------------------------------------------

def labeled_record(shape_id, keypoints, labels):
    return EvalRecord(shape_id=shape_id, keypoints=keypoints,
                      labels=[(l, np.asarray(p, float)) for l, p in labels])


def test_das_identical_shapes():
    kp = grid_points(4)
    labels = [(f"l{i}", kp[i]) for i in range(4)]
    a = labeled_record("a", kp, labels)
    b = labeled_record("b", kp, labels)
    assert das([(a, b)]) == pytest.approx(100.0)


def test_das_permuted_keypoints():
    kp = grid_points(4, spread=2.0)
    labels = [(f"l{i}", kp[i]) for i in range(4)]
    perm = np.array([1, 0, 3, 2])  # no fixed points
    a = labeled_record("a", kp, labels)
    b = labeled_record("b", kp[perm], labels)
    assert das([(a, b)]) == pytest.approx(0.0)


def test_das_self_pair_with_labels_in_radius():
    kp = grid_points(5)
    labels = [(f"l{i}", kp[i] + 0.01) for i in range(5)]
    rec = labeled_record("a", kp, labels)
    assert das([(rec, rec)]) == pytest.approx(100.0)


def test_das_unlabeled_keypoint_is_inconsistent():
    kp = np.array([[0.0, 0, 0], [5.0, 0, 0]])
    labels = [("x", np.array([0.0, 0, 0]))]  # nothing near the second keypoint
    rec = labeled_record("a", kp, labels)
    assert das([(rec, rec)]) == pytest.approx(50.0)


# --- DAS with dense correspondences -----------------------------------------------------

def corr_record(shape_id, keypoints, cloud, corr):
    return EvalRecord(shape_id=shape_id, keypoints=np.asarray(keypoints, float),
                      cloud=np.asarray(cloud, float), corr=np.asarray(corr))


def test_das_tracked_through_known_correspondence():
    rng = np.random.default_rng(3)
    cloud_a = rng.random((50, 3))
    shift = np.array([0.0, 0.0, 0.3])
    cloud_b = cloud_a + shift  # frame 2 of a rigid "deformation"
    idx = np.array([4, 17, 33])
    a = corr_record("f0", cloud_a[idx], cloud_a, np.arange(50))
    b = corr_record("f1", cloud_b[idx], cloud_b, np.arange(50))
    assert das([(a, b)]) == pytest.approx(100.0)


def test_das_correspondence_mismatch():
    cloud = np.array([[float(i), 0, 0] for i in range(10)])
    a = corr_record("f0", cloud[[0, 9]], cloud, np.arange(10))
    b = corr_record("f1", cloud[[9, 0]], cloud, np.arange(10))  # swapped keypoints
    assert das([(a, b)]) == pytest.approx(0.0)


def test_das_requires_pairs():
    with pytest.raises(EvalError):
        das([])


def test_das_requires_matching_reference_kind():
    kp = grid_points(2)
    a = labeled_record("a", kp, [("x", kp[0]), ("y", kp[1])])
    b = corr_record("b", kp, grid_points(10), np.arange(10))
    with pytest.raises(EvalError):
        das([(a, b)])


def test_metrics_range():
    rng = np.random.default_rng(11)
    for _ in range(10):
        v = miou(rng.random((5, 3)), rng.random((4, 3)))
        assert 0.0 <= v <= 100.0

import numpy as np
import pytest

from clustile import saliency
from clustile.errors import ValidationError


def gradcam_oracle(act, grad):
    """Scalar triple-loop re-derivation of the saliency formula."""
    h, w, c = act.shape
    alpha = [sum(grad[i, j, q] for i in range(h) for j in range(w)) / (h * w)
             for q in range(c)]
    out = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            s = sum(alpha[q] * act[i, j, q] for q in range(c))
            out[i, j] = max(s, 0.0)
    return out


def test_gradcam_zero_gradients():
    act = np.random.default_rng(0).random((4, 4, 3))
    out = saliency.gradcam(act, np.zeros_like(act))
    assert np.array_equal(out, np.zeros((4, 4), dtype=np.float32))


def test_gradcam_hand_cases():
    act = np.array([[[2.0, 3.0]]])
    assert saliency.gradcam(act, np.array([[[1.0, -1.0]]]))[0, 0] == 0.0
    assert saliency.gradcam(act, np.array([[[2.0, 1.0]]]))[0, 0] == 7.0


def test_gradcam_matches_scalar_oracle():
    rng = np.random.default_rng(1)
    for _ in range(10):
        shape = tuple(rng.integers(1, 9, size=2)) + (int(rng.integers(1, 17)),)
        act = rng.random(shape)
        grad = rng.standard_normal(shape)
        np.testing.assert_allclose(
            saliency.gradcam(act, grad), gradcam_oracle(act, grad), atol=1e-6
        )


def test_gradcam_validation():
    with pytest.raises(ValidationError):
        saliency.gradcam(np.ones((2, 2, 3)), np.ones((2, 2, 4)))
    with pytest.raises(ValidationError):
        saliency.gradcam(-np.ones((2, 2, 3)), np.ones((2, 2, 3)))


def iou_oracle(wmask, smask):
    inter = sum(1 for a, b in zip(wmask.ravel(), smask.ravel()) if a and b)
    union = sum(1 for a, b in zip(wmask.ravel(), smask.ravel()) if a or b)
    return inter / union if union else 0.0


def test_iou_basic_cases():
    a = np.array([[1.0, 1.0], [0.0, 0.0]])
    assert saliency.iou_positive(a, a) == 1.0
    b = np.array([[0.0, 0.0], [1.0, 1.0]])
    assert saliency.iou_positive(a, b) == 0.0
    # masks of size 4 and 4 overlapping in 2 cells -> 2/6
    w = np.array([1.0, 1, 1, 1, 0, 0, 0]).reshape(1, -1)
    s = np.array([0.0, 0, 1, 1, 1, 1, 0]).reshape(1, -1)
    assert saliency.iou_positive(w, s) == pytest.approx(2 / 6)
    assert saliency.iou_positive(np.zeros((2, 2)), np.zeros((2, 2))) == 0.0


def test_iou_matches_brute_force_and_symmetry():
    rng = np.random.default_rng(2)
    for _ in range(20):
        w = rng.random((5, 5)) * (rng.random((5, 5)) > 0.5)
        s = rng.random((5, 5)) * (rng.random((5, 5)) > 0.5)
        expect = iou_oracle(w > 0, s > 0)
        assert saliency.iou_positive(w, s) == pytest.approx(expect, abs=1e-12)
        assert saliency.iou_positive(w, s) == saliency.iou_positive(s, w)


def test_iou_respects_present_mask():
    w = np.array([[1.0, 0.0], [1.0, 0.0]])
    s = np.array([[1.0, 1.0], [0.0, 0.0]])
    present = np.array([[True, True], [False, False]])
    assert saliency.iou_positive(w, s, present=present) == pytest.approx(0.5)


def test_saliency_correlation_identical_maps():
    rng = np.random.default_rng(3)
    weights, sals, labels = [], [], []
    for t in range(6):
        wmap = rng.random((4, 4, 2))
        weights.append(wmap)
        sals.append(wmap[:, :, 0].copy())
        labels.append(t % 2)
    report = saliency.saliency_correlation(weights, sals, labels)
    assert report.corr_benign[0].mean == pytest.approx(1.0, abs=1e-12)
    assert report.corr_cancer[0].mean == pytest.approx(1.0, abs=1e-12)
    assert report.corr_benign[0].std == pytest.approx(0.0, abs=1e-9)


def test_saliency_correlation_antimonotone_map():
    rng = np.random.default_rng(4)
    wmap = rng.random((4, 4, 1))
    sal = 2.0 - 1.5 * wmap[:, :, 0]
    report = saliency.saliency_correlation([wmap], [sal], [1])
    assert report.corr_cancer[0].mean == pytest.approx(-1.0, abs=1e-12)


def test_saliency_correlation_skips_constant_maps():
    wmap = np.ones((3, 3, 1))
    sal = np.random.default_rng(5).random((3, 3))
    report = saliency.saliency_correlation([wmap], [sal], [0])
    assert report.corr_benign[0].count == 0
    assert report.corr_benign[0].skipped == 1


def test_saliency_correlation_validation():
    with pytest.raises(ValidationError):
        saliency.saliency_correlation([], [], [])
    with pytest.raises(ValidationError):
        saliency.saliency_correlation([np.ones((1, 1, 1))], [np.ones((1, 1))], [0])


def test_format_report_shape():
    rng = np.random.default_rng(6)
    weights = [rng.random((4, 4, 3)) for _ in range(4)]
    sals = [rng.random((4, 4)) for _ in range(4)]
    text = saliency.format_report(
        saliency.saliency_correlation(weights, sals, [0, 1, 0, 1])
    )
    lines = text.strip().split("\n")
    assert len(lines) == 4  # header + one row per class
    assert lines[0].startswith("class\t")
    assert lines[1].split("\t")[0] == "1"
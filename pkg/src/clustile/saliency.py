"""GradCAM maps from stored activations/gradients and class-vs-saliency metrics.

The saliency map weights each activation channel by the spatial mean of the
prediction gradient in that channel, sums over channels and rectifies.  No
neural network runs here: gradients arrive pre-computed through the
manifest's gradient file references.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .stats import RunningStats, pearson


def gradcam(activations: np.ndarray, gradients: np.ndarray) -> np.ndarray:
    """Rectified channel-weighted activation sum, one value per spatial cell.

    alpha_c is the spatial mean of the gradient in channel c; the output is
    max(0, sum_c alpha_c * A_c) with no normalization applied.
    """
    act = np.asarray(activations, dtype=np.float64)
    grad = np.asarray(gradients, dtype=np.float64)
    if act.shape != grad.shape:
        raise ValidationError(f"shape mismatch: activations {act.shape}, gradients {grad.shape}")
    if act.ndim != 3:
        raise ValidationError(f"expected (h, w, C) tensors, got shape {act.shape}")
    if (act < 0).any():
        raise ValidationError("activations must be non-negative")
    alpha = grad.mean(axis=(0, 1))
    return np.maximum(act @ alpha, 0.0).astype(np.float32)


def iou_positive(
    class_weights: np.ndarray,
    saliency: np.ndarray,
    present: np.ndarray | None = None,
    eps: float = 0.0,
) -> float:
    """IoU of {cells with class weight > eps} and {cells with saliency > eps}.

    Only cells flagged in ``present`` participate (all, when omitted).
    An empty union yields the defined sentinel 0.0.
    """
    w = np.asarray(class_weights, dtype=np.float64)
    s = np.asarray(saliency, dtype=np.float64)
    if w.shape != s.shape:
        raise ValidationError(f"misaligned shapes: weights {w.shape}, saliency {s.shape}")
    wmask = w > eps
    smask = s > eps
    if present is not None:
        present = np.asarray(present, dtype=bool)
        if present.shape != w.shape:
            raise ValidationError(f"present mask shape {present.shape} != {w.shape}")
        wmask &= present
        smask &= present
    union = int(np.count_nonzero(wmask | smask))
    if union == 0:
        return 0.0
    return float(np.count_nonzero(wmask & smask) / union)


@dataclass
class GroupStats:
    """Mean/std accumulator plus the number of skipped constant-map tiles."""

    stats: RunningStats = field(default_factory=RunningStats)
    skipped: int = 0

    @property
    def mean(self) -> float:
        return self.stats.mean

    @property
    def std(self) -> float:
        return self.stats.std

    @property
    def count(self) -> int:
        return self.stats.count


@dataclass
class ClassSaliencyReport:
    """Per-class IoU and label-split correlation against GradCAM, over tiles."""

    k: int
    iou: list[RunningStats]
    corr_benign: list[GroupStats]
    corr_cancer: list[GroupStats]


def saliency_correlation(
    tile_weights: list[np.ndarray],
    tile_saliency: list[np.ndarray],
    labels: list[int],
    *,
    iou_eps: float = 0.0,
) -> ClassSaliencyReport:
    """Per-tile Pearson correlation of class-weight maps against saliency.

    ``tile_weights[t]`` holds the (h, w, K) weight map of tile t and
    ``tile_saliency[t]`` the aligned (h, w) saliency map; ``labels[t]`` is
    the tile's predicted label (0 benign, 1 cancer).  Correlations are
    aggregated as mean +- std within each label group; tiles where either
    map is constant are skipped and counted.  Per-tile IoU of positive
    regions is accumulated alongside (all labels pooled).
    """
    if not (len(tile_weights) == len(tile_saliency) == len(labels)):
        raise ValidationError("tile_weights, tile_saliency, labels must have equal length")
    if not tile_weights:
        raise ValidationError("no tiles to compare")
    k = tile_weights[0].shape[2]
    report = ClassSaliencyReport(
        k=k,
        iou=[RunningStats() for _ in range(k)],
        corr_benign=[GroupStats() for _ in range(k)],
        corr_cancer=[GroupStats() for _ in range(k)],
    )
    for weights, sal, label in zip(tile_weights, tile_saliency, labels):
        weights = np.asarray(weights, dtype=np.float64)
        sal = np.asarray(sal, dtype=np.float64)
        if weights.shape[:2] != sal.shape or weights.shape[2] != k:
            raise ValidationError(
                f"misaligned tile maps: weights {weights.shape}, saliency {sal.shape}"
            )
        if sal.size < 2:
            raise ValidationError("fewer than 2 cells in a tile")
        if label not in (0, 1):
            raise ValidationError(f"labels must be 0 or 1, got {label}")
        groups = report.corr_cancer if label == 1 else report.corr_benign
        for c in range(k):
            wmap = weights[:, :, c]
            report.iou[c].add(iou_positive(wmap, sal, eps=iou_eps))
            corr = pearson(wmap, sal)
            if corr is None:
                groups[c].skipped += 1
            else:
                groups[c].stats.add(corr)
    return report


def format_report(report: ClassSaliencyReport) -> str:
    """Tab-separated comparison table: class, IoU, corr benign, corr cancer."""
    lines = ["class\tiou_mean\tiou_std\tcorr_benign_mean\tcorr_benign_std\t"
             "corr_cancer_mean\tcorr_cancer_std\tskipped_benign\tskipped_cancer"]
    for c in range(report.k):
        lines.append(
            "\t".join(
                [
                    str(c + 1),
                    f"{report.iou[c].mean:.4f}",
                    f"{report.iou[c].std:.4f}",
                    f"{report.corr_benign[c].mean:.4f}",
                    f"{report.corr_benign[c].std:.4f}",
                    f"{report.corr_cancer[c].mean:.4f}",
                    f"{report.corr_cancer[c].std:.4f}",
                    str(report.corr_benign[c].skipped),
                    str(report.corr_cancer[c].skipped),
                ]
            )
        )
    return "\n".join(lines) + "\n"

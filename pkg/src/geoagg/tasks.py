"""Zero-shot evaluation: multi-view fusion, classification, segmentation and
the accuracy / mIoU metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .superpoints import unit_rows


class TaskError(ValueError):
    pass


@dataclass
class TextFeatures:
    """C x b text embeddings, one row per class name."""

    values: np.ndarray
    class_names: list[str] | None = None

    def __post_init__(self):
        self.values = unit_rows(np.atleast_2d(self.values))
        if self.class_names is None:
            self.class_names = [str(i) for i in range(self.values.shape[0])]
        if len(self.class_names) != self.values.shape[0]:
            raise TaskError("class_names length differs from the number of text rows")
        if len(set(self.class_names)) != len(self.class_names):
            raise TaskError("duplicate class names")

    @property
    def n_classes(self) -> int:
        return self.values.shape[0]


def _text(text) -> np.ndarray:
    return text.values if isinstance(text, TextFeatures) else unit_rows(np.atleast_2d(text))


@dataclass
class ViewProjection:
    """Features one view back-projects onto the points it sees."""

    point_index: np.ndarray
    features: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        self.point_index = np.asarray(self.point_index, dtype=np.int64).ravel()
        self.features = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        if self.weights is None:
            self.weights = np.ones(self.point_index.size)
        self.weights = np.asarray(self.weights, dtype=np.float64).ravel()
        if not (self.point_index.size == self.features.shape[0] == self.weights.size):
            raise TaskError("view indices, features and weights differ in length")
        if np.any(self.weights < 0) or not np.all(np.isfinite(self.weights)):
            raise TaskError("view weights must be finite and nonnegative")


def fuse_views(views, n: int):
    """Weighted average of all view features per point, L2-normalized.

    Returns ``(features, valid)``; points no view sees get a zero row and
    ``valid = False``.
    """
    views = list(views)
    if not views:
        raise TaskError("fuse_views needs at least one view")
    b = views[0].features.shape[1]
    acc = np.zeros((n, b))
    mass = np.zeros(n)
    for v in views:
        if v.features.shape[1] != b:
            raise TaskError("views disagree on the feature dimension")
        if v.point_index.size and (v.point_index.max() >= n or v.point_index.min() < 0):
            raise TaskError(f"view references point {v.point_index.max()} but N={n}")
        np.add.at(acc, v.point_index, v.weights[:, None] * v.features)
        np.add.at(mass, v.point_index, v.weights)
    valid = mass > 0
    acc[valid] /= mass[valid, None]
    out = unit_rows(acc)
    valid &= np.any(out != 0, axis=1)
    return out, valid


def classify(features, text, valid=None, aux_global=None):
    """Max-pool valid point features into one global feature and score it.

    Optional ``aux_global`` vectors (e.g. per-view global features) are
    averaged with the pooled feature. Returns ``(class_index, scores)``.
    """
    f = np.asarray(features, dtype=np.float64)
    if valid is None:
        valid = np.any(f != 0, axis=1)
    valid = np.asarray(valid, dtype=bool)
    if not valid.any():
        raise TaskError("no valid feature rows to classify")
    glob = unit_rows(f[valid].max(axis=0, keepdims=True))[0]
    if aux_global is not None:
        aux = np.atleast_2d(np.asarray(aux_global, dtype=np.float64))
        glob = unit_rows(np.vstack([glob, aux]).mean(axis=0, keepdims=True))[0]
    scores = _text(text) @ glob
    return int(np.argmax(scores)), scores


def segment(features, text) -> np.ndarray:
    """Per-point argmax class; all-zero rows get the unlabeled index C."""
    f = np.asarray(features, dtype=np.float64)
    t = _text(text)
    labels = np.argmax(f @ t.T, axis=1)
    labels[~np.any(f != 0, axis=1)] = t.shape[0]
    return labels


@dataclass
class SegmentationResult:
    pred: np.ndarray
    per_class_iou: np.ndarray  # NaN for classes absent from both gt and pred
    miou: float


def miou(pred, gt, n_classes: int) -> SegmentationResult:
    """Mean IoU over classes present in the ground truth or the prediction.

    Ground-truth entries equal to ``n_classes`` (unlabeled) are ignored.
    """
    pred = np.asarray(pred, dtype=np.int64).ravel()
    gt = np.asarray(gt, dtype=np.int64).ravel()
    if pred.shape != gt.shape:
        raise TaskError(f"pred has {pred.size} labels, gt has {gt.size}")
    for name, arr in (("pred", pred), ("gt", gt)):
        if arr.size and (arr.min() < 0 or arr.max() > n_classes):
            raise TaskError(f"{name} labels must lie in [0, {n_classes}]")
    keep = gt != n_classes
    p, g = pred[keep], gt[keep]
    ious = np.full(n_classes, np.nan)
    for c in range(n_classes):
        union = np.count_nonzero((p == c) | (g == c))
        if union:
            ious[c] = np.count_nonzero((p == c) & (g == c)) / union
    present = ~np.isnan(ious)
    value = float(ious[present].mean()) if present.any() else float("nan")
    return SegmentationResult(pred, ious, value)


def accuracy(preds, gt) -> float:
    preds = np.asarray(preds).ravel()
    gt = np.asarray(gt).ravel()
    if preds.shape != gt.shape or preds.size == 0:
        raise TaskError(f"accuracy needs equal, non-empty lengths; got {preds.size} and {gt.size}")
    return float(np.mean(preds == gt))

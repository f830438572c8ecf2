"""Classification AP, point-in-box localization AP, and center distance error.

AP is the area under the precision-recall curve with the all-point
precision envelope (PASCAL VOC 2010+). Ranking ties keep input order.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import InputError

log = logging.getLogger(__name__)


@dataclass
class PRCurve:
    confidences: np.ndarray  # ranked, descending
    hits: np.ndarray         # ranked 0/1
    precision: np.ndarray
    recall: np.ndarray
    ap: float


def pr_curve(confidences, hits, num_positives: int | None = None) -> PRCurve:
    """Rank by confidence and accumulate precision/recall at every rank.

    ``num_positives`` is the recall denominator; it defaults to ``hits.sum()``.
    """
    conf = np.asarray(confidences, dtype=np.float64)
    hits = np.asarray(hits).astype(np.int64)
    if conf.shape != hits.shape or conf.ndim != 1:
        raise InputError(f"confidences {conf.shape} and hits {hits.shape} must be equal-length vectors")
    npos = int(hits.sum()) if num_positives is None else int(num_positives)
    if npos <= 0:
        return PRCurve(conf, hits, np.array([]), np.array([]), float("nan"))
    order = np.argsort(-conf, kind="stable")
    ranked = hits[order]
    tp = np.cumsum(ranked)
    fp = np.cumsum(1 - ranked)
    precision = tp / np.maximum(tp + fp, 1)
    recall = tp / npos
    return PRCurve(conf[order], ranked, precision, recall, voc_ap(recall, precision))


def voc_ap(recall, precision) -> float:
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    i = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[i + 1] - mrec[i]) * mpre[i + 1]))


def _mean_defined(values, names, what):
    vals = np.asarray(values, dtype=np.float64)
    undefined = [n for n, v in zip(names, vals) if math.isnan(v)]
    if undefined:
        log.warning("%s undefined for classes without positives, excluded from the mean: %s",
                    what, ", ".join(undefined))
    defined = vals[~np.isnan(vals)]
    return float(defined.mean()) if defined.size else float("nan")


def classification_ap(scores, labels, class_names=None):
    """Per-class AP over images plus its mean (mAP).

    ``scores`` and ``labels`` are (images, classes). A class with no positive
    image gets AP ``nan`` and is left out of the mean with a warning.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 2:
        raise InputError(f"scores {scores.shape} and labels {labels.shape} must be equal 2-D arrays")
    names = class_names or [str(c) for c in range(scores.shape[1])]
    curves = [pr_curve(scores[:, c], labels[:, c]) for c in range(scores.shape[1])]
    aps = np.array([cv.ap for cv in curves])
    return aps, _mean_defined(aps, names, "classification AP"), curves


def point_box_distance(x, y, bbox) -> float:
    x0, y0, x1, y1 = bbox
    dx = max(x0 - x, 0.0, x - x1)
    dy = max(y0 - y, 0.0, y - y1)
    return math.hypot(dx, dy)


def closest_box(peak, boxes):
    """Index of the box nearest to ``peak`` (0 inside a box); ties go to the
    nearer center, then to the earlier box."""
    x, y = peak
    best, best_key = None, None
    for i, b in enumerate(boxes):
        bbox = b.bbox if hasattr(b, "bbox") else b
        cx, cy = (b.center if hasattr(b, "center") else ((bbox[0] + bbox[2]) / 2, (bbox[1] + bbox[3]) / 2))
        key = (point_box_distance(x, y, bbox), math.hypot(x - cx, y - cy))
        if best_key is None or key < best_key:
            best, best_key = i, key
    return best


def localization_match(peak, boxes, tolerance: float) -> tuple[bool, int | None]:
    """TP if ``peak`` lies in the closest same-class box grown by ``tolerance``
    pixels on every side. Returns ``(is_tp, matched_index)``."""
    if tolerance < 0:
        raise InputError(f"tolerance must be non-negative, got {tolerance}")
    if not boxes:
        return False, None
    i = closest_box(peak, boxes)
    b = boxes[i]
    x0, y0, x1, y1 = b.bbox if hasattr(b, "bbox") else b
    x, y = peak
    inside = (x0 - tolerance <= x <= x1 + tolerance) and (y0 - tolerance <= y <= y1 + tolerance)
    return inside, i


def localization_ap(confidences, peaks, present, boxes, tolerance: float, class_names=None):
    """Per-class localization AP over the frames where each class is present.

    ``confidences`` is (images, classes); ``peaks[i][c]`` is the predicted
    (x, y); ``present`` the ground-truth presence matrix; ``boxes[i]`` the
    list of SpatialAnnotation of image ``i``. Frames where the class is
    absent are ignored. Recall is relative to the number of present frames.
    """
    confidences = np.asarray(confidences, dtype=np.float64)
    present = np.asarray(present)
    n_img, n_cls = confidences.shape
    names = class_names or [str(c) for c in range(n_cls)]
    aps, curves = [], []
    for c in range(n_cls):
        idx = np.flatnonzero(present[:, c])
        hits = np.zeros(idx.size, dtype=np.int64)
        for j, i in enumerate(idx):
            same = [b for b in boxes[i] if b.class_id == c]
            hits[j] = localization_match(peaks[i][c], same, tolerance)[0]
        cv = pr_curve(confidences[idx, c], hits, num_positives=idx.size)
        curves.append(cv)
        aps.append(cv.ap)
    aps = np.array(aps)
    return aps, _mean_defined(aps, names, "localization AP"), curves


def distance_error(peak, center, image_dims) -> float:
    """Distance from peak to center as a percentage of the image diagonal."""
    h, w = image_dims
    return 100.0 * math.hypot(peak[0] - center[0], peak[1] - center[1]) / math.hypot(h, w)


def mean_distance_errors(peaks, present, boxes, image_dims, n_cls):
    """Per-class mean distance error over present frames, using the closest box's center."""
    out = np.full(n_cls, np.nan)
    for c in range(n_cls):
        errs = []
        for i in np.flatnonzero(np.asarray(present)[:, c]):
            same = [b for b in boxes[i] if b.class_id == c]
            if not same:
                continue
            b = same[closest_box(peaks[i][c], same)]
            errs.append(distance_error(peaks[i][c], b.center, image_dims))
        if errs:
            out[c] = float(np.mean(errs))
    return out


# ---------------------------------------------------------------------------
# reports

@dataclass
class EvalReport:
    class_names: list[str]
    classification_ap: np.ndarray
    localization_ap: np.ndarray
    mean_distance_pct: np.ndarray
    classification_map: float
    localization_map: float
    mean_distance: float
    classification_curves: list[PRCurve]
    localization_curves: list[PRCurve]


def _fmt(v) -> str:
    return "nan" if v is None or (isinstance(v, float) and math.isnan(v)) else repr(float(v))


def write_report(report: EvalReport, path):
    with open(path, "w", newline="") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(["class", "classification_ap", "localization_ap", "mean_distance_pct"])
        for i, name in enumerate(report.class_names):
            wr.writerow([name, _fmt(report.classification_ap[i]), _fmt(report.localization_ap[i]),
                         _fmt(report.mean_distance_pct[i])])
        wr.writerow(["mAP", _fmt(report.classification_map), _fmt(report.localization_map),
                     _fmt(report.mean_distance)])


def write_pr_curves(curves, class_names, path):
    with open(path, "w", newline="") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(["class", "rank", "confidence", "precision", "recall"])
        for name, cv in zip(class_names, curves):
            for r in range(cv.precision.size):
                wr.writerow([name, r + 1, _fmt(cv.confidences[r]), _fmt(cv.precision[r]),
                             _fmt(cv.recall[r])])


def read_report(path) -> dict[str, dict[str, float]]:
    with open(path, newline="") as f:
        return {row["class"]: {k: float(v) for k, v in row.items() if k != "class"}
                for row in csv.DictReader(f)}

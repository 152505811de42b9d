"""Evaluation metrics: confusion counts, ROC/AUC, PR/AP, detection matching,
mean average precision, and Dice overlap.

Conventions fixed here (and echoed in every report):
  * a score counts as positive when score >= threshold;
  * undefined ratios (zero denominator) are reported as 0 and flagged;
  * detection accuracy is ground-truth recall at IoU >= 0.5 and score >= 0.5;
  * mAP uses a single IoU threshold and all-point step interpolation;
  * Dice of two empty masks is 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataio import BoundingBox, ValidationError
from .models.anchors import Detection


@dataclass(frozen=True)
class ClassificationMetrics:
    threshold: float
    accuracy: float
    sensitivity: float
    specificity: float
    precision: float
    f1: float
    tp: int
    fp: int
    tn: int
    fn: int
    undefined: tuple[str, ...] = ()

    def as_dict(self) -> dict:
        return {
            "threshold": self.threshold, "accuracy": self.accuracy,
            "sensitivity": self.sensitivity, "specificity": self.specificity,
            "precision": self.precision, "f1": self.f1,
            "tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn,
            "undefined": list(self.undefined),
        }


@dataclass(frozen=True)
class CurveResult:
    points: tuple[tuple[float, float], ...]
    summary: float                          # AUC for ROC, AP for PR


@dataclass
class MatchResult:
    """Greedy matching of one image's detections against its GT boxes."""
    tp: int
    fp: int
    fn: int
    matches: list[tuple[int, int]]          # (pred index, gt index) pairs
    ordered_preds: list[int]                # pred indices in match order
    pred_is_tp: list[bool]                  # aligned with ordered_preds


@dataclass
class DetectionEvalResult:
    per_image: list[MatchResult]
    tp: int
    fp: int
    fn: int
    detection_accuracy: float
    map: float
    iou_threshold: float
    score_threshold: float


def _check_scores(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(np.int64)
    if scores.size == 0:
        raise ValidationError("empty input")
    if scores.shape != labels.shape:
        raise ValidationError("scores and labels differ in length")
    if not np.isin(labels, (0, 1)).all():
        raise ValidationError("labels must be binary")
    return scores, labels


def confusion_metrics(scores, labels, threshold: float) -> ClassificationMetrics:
    scores, labels = _check_scores(scores, labels)
    pred = scores >= threshold
    tp = int(np.sum(pred & (labels == 1)))
    fp = int(np.sum(pred & (labels == 0)))
    fn = int(np.sum(~pred & (labels == 1)))
    tn = int(np.sum(~pred & (labels == 0)))

    undefined = []

    def ratio(num, den, name):
        if den == 0:
            undefined.append(name)
            return 0.0
        return num / den

    accuracy = (tp + tn) / scores.size
    sensitivity = ratio(tp, tp + fn, "sensitivity")
    specificity = ratio(tn, tn + fp, "specificity")
    precision = ratio(tp, tp + fp, "precision")
    f1 = ratio(2 * tp, 2 * tp + fp + fn, "f1")
    return ClassificationMetrics(float(threshold), accuracy, sensitivity, specificity,
                                 precision, f1, tp, fp, tn, fn, tuple(undefined))


def _grouped_counts(scores, labels):
    """Cumulative tp/fp after each distinct score, descending."""
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    l = labels[order]
    # group boundaries: last index of each distinct score
    boundary = np.nonzero(np.diff(s))[0]
    ends = np.concatenate([boundary, [s.size - 1]])
    cum_tp = np.cumsum(l == 1)[ends]
    cum_fp = np.cumsum(l == 0)[ends]
    return cum_tp.astype(np.float64), cum_fp.astype(np.float64)


def roc_auc(scores, labels) -> CurveResult:
    """ROC over all distinct thresholds; trapezoidal AUC (ties handled as groups)."""
    scores, labels = _check_scores(scores, labels)
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0 or n_neg == 0:
        raise ValidationError("roc_auc requires both classes")
    cum_tp, cum_fp = _grouped_counts(scores, labels)
    tpr = np.concatenate([[0.0], cum_tp / n_pos])
    fpr = np.concatenate([[0.0], cum_fp / n_neg])
    auc = float(np.trapezoid(tpr, fpr))
    points = tuple((float(x), float(y)) for x, y in zip(fpr, tpr))
    return CurveResult(points, auc)


def pr_ap(scores, labels) -> CurveResult:
    """Precision-recall with AP = sum (R_i - R_{i-1}) * P_i over tie groups."""
    scores, labels = _check_scores(scores, labels)
    n_pos = int(np.sum(labels == 1))
    if n_pos == 0:
        raise ValidationError("pr_ap requires at least one positive")
    cum_tp, cum_fp = _grouped_counts(scores, labels)
    recall = cum_tp / n_pos
    precision = cum_tp / (cum_tp + cum_fp)
    prev_r = np.concatenate([[0.0], recall[:-1]])
    ap = float(np.sum((recall - prev_r) * precision))
    points = tuple((float(r), float(p)) for r, p in zip(recall, precision))
    return CurveResult(points, ap)


def threshold_candidates(scores) -> np.ndarray:
    """Midpoints between adjacent distinct sorted scores, plus extremes.

    The low extreme (the minimum score itself) predicts everything positive;
    the high extreme (max + 1) predicts everything negative.
    """
    u = np.unique(np.asarray(scores, dtype=np.float64))
    mids = (u[:-1] + u[1:]) / 2.0
    return np.concatenate([[u[0]], mids, [u[-1] + 1.0]])


def optimal_threshold(scores, labels) -> tuple[float, float]:
    """Threshold maximizing sqrt(sensitivity * specificity); ties -> smaller."""
    scores, labels = _check_scores(scores, labels)
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0 or n_neg == 0:
        raise ValidationError("optimal_threshold requires both classes")
    pos_sorted = np.sort(scores[labels == 1])
    neg_sorted = np.sort(scores[labels == 0])
    best_t, best_g = None, -1.0
    for t in threshold_candidates(scores):
        tp = n_pos - np.searchsorted(pos_sorted, t, side="left")
        tn = np.searchsorted(neg_sorted, t, side="left")
        g = float(np.sqrt((tp / n_pos) * (tn / n_neg)))
        if g > best_g + 1e-15:
            best_t, best_g = float(t), g
    return best_t, best_g


def threshold_sweep(scores, labels) -> list[ClassificationMetrics]:
    return [confusion_metrics(scores, labels, t) for t in threshold_candidates(scores)]


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union under the half-open pixel convention."""
    ix = max(0, min(a.x_max, b.x_max) - max(a.x_min, b.x_min))
    iy = max(0, min(a.y_max, b.y_max) - max(a.y_min, b.y_min))
    inter = ix * iy
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def _pred_order(preds: list[Detection]) -> list[int]:
    return sorted(range(len(preds)), key=lambda i: (-preds[i].score, preds[i].box.as_tuple()))


def match_detections(preds: list[Detection], gts: list[BoundingBox],
                     iou_threshold: float = 0.5, score_threshold: float = 0.5) -> MatchResult:
    """Greedy single-match assignment in descending score order."""
    order = [i for i in _pred_order(preds) if preds[i].score >= score_threshold]
    gt_taken = [False] * len(gts)
    matches: list[tuple[int, int]] = []
    flags: list[bool] = []
    for i in order:
        best_j, best_iou = -1, 0.0
        for j, gt in enumerate(gts):
            if gt_taken[j]:
                continue
            v = iou(preds[i].box, gt)
            if v > best_iou:
                best_j, best_iou = j, v
        if best_j >= 0 and best_iou >= iou_threshold:
            gt_taken[best_j] = True
            matches.append((i, best_j))
            flags.append(True)
        else:
            flags.append(False)
    tp = sum(flags)
    return MatchResult(tp=tp, fp=len(flags) - tp, fn=len(gts) - tp,
                       matches=matches, ordered_preds=order, pred_is_tp=flags)


def mean_average_precision(detections_per_image: list[list[Detection]],
                           gts_per_image: list[list[BoundingBox]],
                           iou_threshold: float = 0.5) -> float:
    """Single-class AP over pooled detections, all-point interpolation."""
    if len(detections_per_image) != len(gts_per_image):
        raise ValidationError("per-image lists differ in length")
    n_gt = sum(len(g) for g in gts_per_image)
    if n_gt == 0:
        raise ValidationError("mean_average_precision requires at least one GT box")
    scored: list[tuple[float, bool]] = []
    for preds, gts in zip(detections_per_image, gts_per_image):
        res = match_detections(preds, gts, iou_threshold=iou_threshold, score_threshold=0.0)
        for i, flag in zip(res.ordered_preds, res.pred_is_tp):
            scored.append((preds[i].score, flag))
    if not scored:
        return 0.0
    scores = np.array([s for s, _ in scored])
    flags = np.array([f for _, f in scored], dtype=np.int64)
    cum_tp, cum_fp = _grouped_counts(scores, flags)
    recall = cum_tp / n_gt
    precision = cum_tp / (cum_tp + cum_fp)
    prev_r = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev_r) * precision))


def evaluate_detections(detections_per_image, gts_per_image,
                        iou_threshold: float = 0.5,
                        score_threshold: float = 0.5) -> DetectionEvalResult:
    """Recall-based detection accuracy plus mAP over a set of images."""
    if len(detections_per_image) != len(gts_per_image):
        raise ValidationError("per-image lists differ in length")
    per_image = [
        match_detections(p, g, iou_threshold=iou_threshold, score_threshold=score_threshold)
        for p, g in zip(detections_per_image, gts_per_image)
    ]
    tp = sum(m.tp for m in per_image)
    fp = sum(m.fp for m in per_image)
    fn = sum(m.fn for m in per_image)
    accuracy = tp / (tp + fn) if tp + fn > 0 else 0.0
    ap = mean_average_precision(detections_per_image, gts_per_image, iou_threshold)
    return DetectionEvalResult(per_image, tp, fp, fn, accuracy, ap,
                               iou_threshold, score_threshold)


def dice(pred: np.ndarray, gt: np.ndarray) -> float:
    """2|P&G| / (|P| + |G|); 1 when both masks are empty."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValidationError(f"dice shape mismatch: {pred.shape} vs {gt.shape}")
    p = pred != 0
    g = gt != 0
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / total


# ---------------------------------------------------------------------------
# CSV exports (9 significant digits, one row per point)

def _write_csv(path: Path, header: list[str], rows) -> Path:
    path = Path(path)
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(f"{v:.9g}" if isinstance(v, float) else str(v) for v in row))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def write_threshold_sweep_csv(path: Path, sweep: list[ClassificationMetrics]) -> Path:
    header = ["threshold", "accuracy", "sensitivity", "specificity", "precision", "f1"]
    rows = [
        (m.threshold, m.accuracy, m.sensitivity, m.specificity, m.precision, m.f1)
        for m in sweep
    ]
    return _write_csv(path, header, rows)


def write_roc_csv(path: Path, curve: CurveResult) -> Path:
    return _write_csv(path, ["fpr", "tpr"], curve.points)


def write_pr_csv(path: Path, curve: CurveResult) -> Path:
    return _write_csv(path, ["recall", "precision"], curve.points)

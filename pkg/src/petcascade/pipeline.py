"""Cascade wiring, stage/end-to-end evaluation, and the evaluation report.

Stage wrappers own all preprocessing, so the cascade logic reads at native
slice resolution: classify every axial slice, detect boxes on slices that
pass the classifier gate, segment each detected ROI, and OR the pasted
patch masks into the output volume. Oracle variants of each stage return
ground truth through the same interface; with margin 0 they reproduce the
ground-truth mask exactly. Every wrapper method accepts an optional
case_id so oracles can serve whole manifests.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import metrics as M
from .dataio import (BoundingBox, DatasetManifest, MaskVolume, ValidationError, Volume3D,
                     _json_bytes, read_annotations, read_case)
from .losses import LossConfig
from .models import (Baseline3DNet, ClassifierNet, Detection, DetectorNet, SegmentorNet,
                     baseline_predict, classifier_predict_batch, detections_from_outputs,
                     detector_raw_outputs, load_model, preprocess_baseline_volume,
                     preprocess_classifier_batch, save_model, segmentor_predict)
from .models.nets import CLASSIFIER_INPUT
from .models.training import preprocess_roi
from .phantom import derive_slice_annotations
from .preprocess import (box_round_out, crop_roi, paste_mask, resize_stack, scale_box,
                         upsample_volume_nearest, zscore_stack)

ORACLE_SCORE = 1.0 - 1e-6  # Detection scores live in the open interval (0,1)
MASK_PROB_THRESHOLD = 0.5

PROVENANCE = {
    "positive_rule": "a score counts as positive when score >= threshold",
    "detection_accuracy": ("fraction of ground-truth boxes matched at IoU >= 0.5 by "
                           "detections with score >= 0.5; false positives reported alongside"),
    "map": "single-class AP at one IoU threshold, all-point interpolation, pooled over images",
    "detector_eval_space": ("detector evaluated in its 224x224 working frame; ground-truth "
                            "boxes mapped with the same affine used for training targets"),
    "anchor_reduction": "objectness BCE averages over all non-ignored anchors (no sampling)",
    "preprocess_order": "slices are resized first, then z-score normalized",
    "resize_convention": "half-pixel-center alignment; nearest neighbor rounds half up",
    "box_mapping": "box edges scale by target/source size and round outward",
    "roi_combination": "overlapping ROI mask predictions combine by logical OR",
    "mask_threshold": f"segmentor probabilities binarize at {MASK_PROB_THRESHOLD}",
    "dice_empty": "Dice of two empty masks is 1",
    "dice_3d": ("per-case Dice over whole volumes including background slices; "
                "reported as per-case mean +/- std with the voxel-pooled value alongside"),
    "std": "population standard deviation (ddof = 0)",
    "classifier_threshold": ("maximizes the geometric mean of sensitivity and specificity "
                             "on the validation split"),
}


def stat_block(values, ids=None) -> dict:
    values = [float(v) for v in values]
    block = {
        "n": len(values),
        "mean": float(np.mean(values)) if values else 0.0,
        "std": float(np.std(values)) if values else 0.0,
        "values": values,
    }
    if ids is not None:
        block["ids"] = list(ids)
    return block


def _case_table(per_case, what: str) -> dict:
    return per_case if isinstance(per_case, dict) else {None: per_case}


def _case_lookup(table: dict, case_id, what: str):
    if case_id in table:
        return table[case_id]
    if None in table:
        return table[None]
    raise ValidationError(f"{what} oracle has no entry for case {case_id!r}")


# ---------------------------------------------------------------------------
# stage wrappers

class TrainedSliceClassifier:
    def __init__(self, net: ClassifierNet):
        self.net = net

    def scores_for_volume(self, voxels: np.ndarray, case_id=None) -> np.ndarray:
        return classifier_predict_batch(self.net, preprocess_classifier_batch(voxels).numpy())


class OracleSliceClassifier:
    """Scores straight from ground truth: 1.0 foreground, 0.0 background."""

    def __init__(self, gt_masks):
        self.masks = _case_table(gt_masks, "classifier")

    def scores_for_volume(self, voxels: np.ndarray, case_id=None) -> np.ndarray:
        mask = _case_lookup(self.masks, case_id, "classifier")
        return mask.voxels.reshape(mask.dims[0], -1).any(axis=1).astype(np.float64)


class TrainedTumorDetector:
    def __init__(self, net: DetectorNet):
        self.net = net
        self.input_size = net.anchor_grid.image_size

    def detect_frame_stack(self, slices: np.ndarray, slice_indices=None,
                           case_id=None) -> list[list[Detection]]:
        """Detections in the detector's working frame for a (N, H, W) stack."""
        size = (self.input_size, self.input_size)
        pre = zscore_stack(resize_stack(np.asarray(slices), size, "bilinear"))
        probs, deltas = detector_raw_outputs(self.net, pre)
        return [detections_from_outputs(self.net, p, d) for p, d in zip(probs, deltas)]

    def detect_native(self, slice_index: int, image: np.ndarray, case_id=None) -> list[Detection]:
        h, w = image.shape
        size = self.input_size
        out = []
        for det in self.detect_frame_stack(image[None])[0]:
            edges = scale_box(det.box.as_tuple(), (size, size), (h, w))
            out.append(Detection(box_round_out(edges, (h, w)), det.score))
        return out

    def gt_boxes_in_frame(self, boxes, native_hw) -> list[BoundingBox]:
        size = self.input_size
        return [box_round_out(scale_box(b.as_tuple(), native_hw, (size, size)), (size, size))
                for b in boxes]


class OracleTumorDetector:
    """Returns each slice's tight ground-truth boxes at near-unit score."""

    def __init__(self, gt_masks, frame_size: int = CLASSIFIER_INPUT):
        self.annotations = {cid: derive_slice_annotations(m)
                            for cid, m in _case_table(gt_masks, "detector").items()}
        self.native_hw = {cid: m.dims[1:] for cid, m in _case_table(gt_masks, "detector").items()}
        self.input_size = frame_size

    def detect_native(self, slice_index: int, image: np.ndarray, case_id=None) -> list[Detection]:
        anns = _case_lookup(self.annotations, case_id, "detector")
        return [Detection(b, ORACLE_SCORE) for b in anns[slice_index].boxes]

    def detect_frame_stack(self, slices: np.ndarray, slice_indices=None,
                           case_id=None) -> list[list[Detection]]:
        anns = _case_lookup(self.annotations, case_id, "detector")
        native_hw = _case_lookup(self.native_hw, case_id, "detector")
        if slice_indices is None:
            slice_indices = range(len(slices))
        size = self.input_size
        out = []
        for z in slice_indices:
            out.append([
                Detection(box_round_out(scale_box(b.as_tuple(), native_hw, (size, size)),
                                        (size, size)), ORACLE_SCORE)
                for b in anns[z].boxes
            ])
        return out

    def gt_boxes_in_frame(self, boxes, native_hw) -> list[BoundingBox]:
        size = self.input_size
        return [box_round_out(scale_box(b.as_tuple(), native_hw, (size, size)), (size, size))
                for b in boxes]


class TrainedROISegmentor:
    def __init__(self, net: SegmentorNet, margin_px: int = 2,
                 prob_threshold: float = MASK_PROB_THRESHOLD):
        self.net = net
        self.margin_px = int(margin_px)
        self.prob_threshold = float(prob_threshold)

    def predict_patch(self, image_patch: np.ndarray) -> np.ndarray:
        """Binary mask at the patch's own resolution."""
        probs = segmentor_predict(self.net, preprocess_roi(image_patch))
        binary = (probs >= self.prob_threshold).astype(np.uint8)
        return resize_stack(binary[None], image_patch.shape, "nearest")[0]

    def predict_mask_for_box(self, slice_index: int, image: np.ndarray, box: BoundingBox,
                             case_id=None):
        patch, eff = crop_roi(image, box, self.margin_px)
        return self.predict_patch(patch), eff


class OracleROISegmentor:
    def __init__(self, gt_masks, margin_px: int = 0):
        self.masks = _case_table(gt_masks, "segmentor")
        self.margin_px = int(margin_px)
        self.prob_threshold = MASK_PROB_THRESHOLD

    def predict_mask_for_box(self, slice_index: int, image: np.ndarray, box: BoundingBox,
                             case_id=None):
        gt = _case_lookup(self.masks, case_id, "segmentor").voxels
        patch, eff = crop_roi(gt[slice_index], box, self.margin_px)
        return patch.copy(), eff


class BaselineSegmentor3D:
    """Whole-volume 3D U-Net wrapper; emits native-resolution masks."""

    def __init__(self, net: Baseline3DNet):
        self.net = net

    def predict_mask_native(self, volume: Volume3D) -> MaskVolume:
        x = preprocess_baseline_volume(volume.voxels, self.net.grid)
        probs = baseline_predict(self.net, x)
        small = (probs >= MASK_PROB_THRESHOLD).astype(np.uint8)
        return MaskVolume(upsample_volume_nearest(small, volume.dims))


@dataclass
class CascadeModels:
    classifier: object
    detector: object
    segmentor: object
    classifier_threshold: float
    threshold_provenance: str = "unset"

    def __post_init__(self):
        if not 0.0 < self.classifier_threshold < 1.0:
            raise ValidationError("classifier_threshold must be in (0,1)")


def oracle_cascade(gt_masks, margin_px: int = 0,
                   classifier_threshold: float = 0.5) -> CascadeModels:
    """All three stages replaced by ground-truth oracles."""
    return CascadeModels(
        classifier=OracleSliceClassifier(gt_masks),
        detector=OracleTumorDetector(gt_masks),
        segmentor=OracleROISegmentor(gt_masks, margin_px=margin_px),
        classifier_threshold=classifier_threshold,
        threshold_provenance="oracle",
    )


# ---------------------------------------------------------------------------
# cascade inference

def run_cascade(volume: Volume3D, models: CascadeModels, case_id=None):
    """3D mask plus per-slice detections for the gated slices."""
    voxels = volume.voxels
    depth, h, w = voxels.shape
    scores = models.classifier.scores_for_volume(voxels, case_id=case_id)
    if len(scores) != depth:
        raise ValidationError("classifier returned wrong number of slice scores")
    out = np.zeros_like(voxels, dtype=np.uint8)
    detections: dict[int, list[Detection]] = {}
    for z in range(depth):
        if scores[z] < models.classifier_threshold:
            continue
        dets = models.detector.detect_native(z, voxels[z], case_id=case_id)
        detections[z] = dets
        for det in dets:
            patch, eff = models.segmentor.predict_mask_for_box(z, voxels[z], det.box,
                                                               case_id=case_id)
            out[z] |= paste_mask(patch, eff, (h, w))
    return MaskVolume(out), detections


# ---------------------------------------------------------------------------
# evaluation blocks

def _split_scores_and_labels(models: CascadeModels, manifest: DatasetManifest, split: str):
    entries = manifest.entries_for(split)
    if not entries:
        raise ValidationError(f"split {split!r} is empty")
    scores, labels = [], []
    for entry in entries:
        case = read_case(manifest.root, entry.case_id)
        anns = read_annotations(manifest.root, entry.case_id)
        case_scores = models.classifier.scores_for_volume(case.volume.voxels,
                                                          case_id=entry.case_id)
        scores.extend(float(s) for s in case_scores)
        labels.extend(int(a.label == "foreground") for a in anns)
    return np.array(scores), np.array(labels)


def evaluate_stage_classification(models: CascadeModels, manifest: DatasetManifest,
                                  split: str) -> dict:
    """Threshold sweep, ROC/AUC, PR/AP and the chosen operating point."""
    scores, labels = _split_scores_and_labels(models, manifest, split)
    roc = M.roc_auc(scores, labels)
    pr = M.pr_ap(scores, labels)
    sweep = M.threshold_sweep(scores, labels)
    operating = M.confusion_metrics(scores, labels, models.classifier_threshold)
    return {
        "n_slices": int(labels.size),
        "n_foreground": int(labels.sum()),
        "auc": roc.summary,
        "ap": pr.summary,
        "chosen_threshold": models.classifier_threshold,
        "threshold_provenance": models.threshold_provenance,
        "operating_point": operating.as_dict(),
        "sweep": [m.as_dict() for m in sweep],
        "roc_points": [list(p) for p in roc.points],
        "pr_points": [list(p) for p in pr.points],
    }


def choose_classifier_threshold(classifier, manifest: DatasetManifest,
                                split: str = "valid") -> tuple[float, float]:
    """Operating threshold from the validation split (no test leakage)."""
    probe = CascadeModels(classifier, None, None, 0.5, "probe")
    scores, labels = _split_scores_and_labels(probe, manifest, split)
    threshold, gmean = M.optimal_threshold(scores, labels)
    threshold = float(min(max(threshold, 1e-9), 1.0 - 1e-9))
    return threshold, gmean


def evaluate_stage_detection(models: CascadeModels, manifest: DatasetManifest, split: str,
                             iou_threshold: float = 0.5) -> tuple[M.DetectionEvalResult, dict]:
    """Detector scored on ground-truth foreground slices only."""
    entries = manifest.entries_for(split)
    if not entries:
        raise ValidationError(f"split {split!r} is empty")
    all_dets: list[list[Detection]] = []
    all_gts: list[list[BoundingBox]] = []
    for entry in entries:
        case = read_case(manifest.root, entry.case_id)
        anns = read_annotations(manifest.root, entry.case_id)
        fg = [a for a in anns if a.label == "foreground"]
        if not fg:
            continue
        native_hw = case.volume.dims[1:]
        stack = np.stack([case.volume.voxels[a.slice_index] for a in fg])
        all_dets.extend(models.detector.detect_frame_stack(
            stack, slice_indices=[a.slice_index for a in fg], case_id=entry.case_id))
        all_gts.extend(models.detector.gt_boxes_in_frame(a.boxes, native_hw) for a in fg)
    if not all_gts:
        raise ValidationError(f"split {split!r} has no foreground slices")
    score_threshold = getattr(getattr(models.detector, "net", None), "score_threshold", 0.5)
    result = M.evaluate_detections(all_dets, all_gts, iou_threshold=iou_threshold,
                                   score_threshold=score_threshold)
    block = {
        "n_foreground_slices": len(all_gts),
        "n_gt_boxes": int(sum(len(g) for g in all_gts)),
        "tp": result.tp, "fp": result.fp, "fn": result.fn,
        "detection_accuracy": result.detection_accuracy,
        "map": result.map,
        "iou_threshold": result.iou_threshold,
        "score_threshold": result.score_threshold,
    }
    return result, block


def evaluate_stage_segmentation(models: CascadeModels, manifest: DatasetManifest, split: str,
                                mode: str = "gt_boxes") -> dict:
    """gt_boxes: segmentor alone on ground-truth ROIs. predicted_boxes: the
    full cascade, scored per detected slice and per case."""
    entries = manifest.entries_for(split)
    if not entries:
        raise ValidationError(f"split {split!r} is empty")
    if mode == "gt_boxes":
        dice_values, ids = [], []
        for entry in entries:
            case = read_case(manifest.root, entry.case_id)
            anns = read_annotations(manifest.root, entry.case_id)
            mask = case.gt_mask.voxels
            for ann in anns:
                if ann.label != "foreground":
                    continue
                image = case.volume.voxels[ann.slice_index]
                for box in ann.boxes:
                    pred, eff = models.segmentor.predict_mask_for_box(
                        ann.slice_index, image, box, case_id=entry.case_id)
                    gt_patch, _ = crop_roi(mask[ann.slice_index], box,
                                           models.segmentor.margin_px)
                    dice_values.append(M.dice(pred, gt_patch))
                    ids.append(f"{entry.case_id}[{ann.slice_index}]{box.as_tuple()}")
        if not dice_values:
            raise ValidationError(f"split {split!r} has no ROIs")
        return {"mode": mode, "roi_dice": stat_block(dice_values, ids)}
    if mode != "predicted_boxes":
        raise ValidationError(f"unknown segmentation mode {mode!r}")

    slice_dice, slice_ids = [], []
    case_dice, case_ids = [], []
    pooled_inter = pooled_pred = pooled_gt = 0
    for entry in entries:
        case = read_case(manifest.root, entry.case_id)
        pred_mask, detections = run_cascade(case.volume, models, case_id=entry.case_id)
        gt = case.gt_mask.voxels
        pred = pred_mask.voxels
        for z, dets in sorted(detections.items()):
            if dets:
                slice_dice.append(M.dice(pred[z], gt[z]))
                slice_ids.append(f"{entry.case_id}[{z}]")
        case_dice.append(M.dice(pred, gt))
        case_ids.append(entry.case_id)
        pooled_inter += int(((pred != 0) & (gt != 0)).sum())
        pooled_pred += int((pred != 0).sum())
        pooled_gt += int((gt != 0).sum())
    pooled = 1.0 if pooled_pred + pooled_gt == 0 else 2.0 * pooled_inter / (pooled_pred + pooled_gt)
    return {
        "mode": mode,
        "slice_dice": stat_block(slice_dice, slice_ids),
        "case_dice": stat_block(case_dice, case_ids),
        "pooled_3d_dice": pooled,
    }


def compare_with_baseline(cascade_segmentation_block: dict, baseline: BaselineSegmentor3D,
                          manifest: DatasetManifest, split: str) -> dict:
    """Paired per-case 3D Dice of the cascade against the single-step net."""
    case_block = cascade_segmentation_block.get("case_dice")
    if not case_block or "ids" not in case_block:
        raise ValidationError("cascade block lacks per-case dice values")
    cascade_case_dice = dict(zip(case_block["ids"], case_block["values"]))
    entries = manifest.entries_for(split)
    split_ids = [e.case_id for e in entries]
    if sorted(split_ids) != sorted(cascade_case_dice):
        raise ValidationError("cascade report covers a different case set than the split")
    base_values, diffs = [], []
    for entry in entries:
        case = read_case(manifest.root, entry.case_id)
        pred = baseline.predict_mask_native(case.volume)
        b = M.dice(pred.voxels, case.gt_mask.voxels)
        base_values.append(b)
        diffs.append(cascade_case_dice[entry.case_id] - b)
    cascade_values = [cascade_case_dice[cid] for cid in split_ids]
    return {
        "cascade_case_dice": stat_block(cascade_values, split_ids),
        "baseline_case_dice": stat_block(base_values, split_ids),
        "paired_diff": stat_block(diffs, split_ids),
    }


# ---------------------------------------------------------------------------
# report

@dataclass
class EvaluationReport:
    split: str
    classification: dict | None = None
    detection: dict | None = None
    segmentation_gt_boxes: dict | None = None
    segmentation_predicted: dict | None = None
    baseline_comparison: dict | None = None
    configs: dict = dataclasses.field(default_factory=dict)
    provenance: dict = dataclasses.field(default_factory=lambda: dict(PROVENANCE))

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)

    def save(self, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(_json_bytes(self.as_dict()))
        return path

    @classmethod
    def load(cls, path: Path) -> "EvaluationReport":
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        known = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in payload.items() if k in known})

    def check_self_consistency(self, tol: float = 1e-9) -> None:
        """Every stored mean/std must recompute from its stored values."""
        def walk(node):
            if isinstance(node, dict):
                if "values" in node and "mean" in node:
                    vals = np.asarray(node["values"], dtype=np.float64)
                    if vals.size != node["n"]:
                        raise ValidationError("stat block n does not match stored values")
                    if vals.size and (abs(vals.mean() - node["mean"]) > tol
                                      or abs(vals.std() - node["std"]) > tol):
                        raise ValidationError("stat block mean/std do not recompute")
                for v in node.values():
                    walk(v)
            elif isinstance(node, list):
                for v in node:
                    walk(v)
        walk(self.as_dict())


def default_configs_echo(loss_config: LossConfig, train_config, roi_margin_px: int) -> dict:
    return {
        "loss": dataclasses.asdict(loss_config),
        "train": train_config.as_dict(),
        "roi_margin_px": int(roi_margin_px),
        "mask_prob_threshold": MASK_PROB_THRESHOLD,
    }


# ---------------------------------------------------------------------------
# cascade persistence

CASCADE_META = "cascade.json"


def save_cascade(directory: Path, models: CascadeModels, train_config=None, seed=None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    echo = train_config.as_dict() if train_config is not None else None
    save_model(directory / "classifier", models.classifier.net, echo, seed)
    save_model(directory / "detector", models.detector.net, echo, seed)
    save_model(directory / "segmentor", models.segmentor.net, echo, seed)
    meta = {
        "format": "petcascade-cascade/1",
        "classifier_threshold": models.classifier_threshold,
        "threshold_provenance": models.threshold_provenance,
        "roi_margin_px": models.segmentor.margin_px,
        "mask_prob_threshold": models.segmentor.prob_threshold,
    }
    (directory / CASCADE_META).write_bytes(_json_bytes(meta))
    return directory


def load_cascade(directory: Path) -> CascadeModels:
    directory = Path(directory)
    meta_path = directory / CASCADE_META
    if not meta_path.exists():
        raise ValidationError(f"no cascade metadata at {meta_path}")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    clf, _ = load_model(directory / "classifier")
    det, _ = load_model(directory / "detector")
    seg, _ = load_model(directory / "segmentor")
    return CascadeModels(
        classifier=TrainedSliceClassifier(clf),
        detector=TrainedTumorDetector(det),
        segmentor=TrainedROISegmentor(seg, margin_px=meta["roi_margin_px"],
                                      prob_threshold=meta["mask_prob_threshold"]),
        classifier_threshold=meta["classifier_threshold"],
        threshold_provenance=meta["threshold_provenance"],
    )

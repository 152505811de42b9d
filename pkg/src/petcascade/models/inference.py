"""Deterministic forward passes for the trained networks.

Inputs are expected already preprocessed (resized and z-score normalized);
the pipeline wrappers own that step.
"""

from __future__ import annotations

import numpy as np
import torch

from ..dataio import ValidationError
from ..preprocess import box_round_out
from .anchors import Detection, nms
from .nets import Baseline3DNet, ClassifierNet, DetectorNet, SegmentorNet

PRE_NMS_TOP_K = 200


def _to_batch(x: np.ndarray | torch.Tensor) -> tuple[torch.Tensor, bool]:
    t = torch.as_tensor(np.asarray(x, dtype=np.float32))
    if t.dim() == 2:
        return t[None], True
    if t.dim() == 3:
        return t, False
    raise ValidationError(f"expected a 2D image or (N,H,W) stack, got shape {tuple(t.shape)}")


@torch.no_grad()
def classifier_predict(model: ClassifierNet, image) -> float:
    """Foreground probability for one preprocessed 224x224 slice."""
    batch, _ = _to_batch(image)
    model.eval()
    return float(model(batch)[0])


@torch.no_grad()
def classifier_predict_batch(model: ClassifierNet, images) -> np.ndarray:
    batch, _ = _to_batch(images)
    model.eval()
    return model(batch).numpy().astype(np.float64)


@torch.no_grad()
def detector_raw_outputs(model: DetectorNet, images) -> tuple[np.ndarray, np.ndarray]:
    batch, _ = _to_batch(images)
    model.eval()
    probs, deltas = model(batch)
    return probs.numpy().astype(np.float64), deltas.numpy().astype(np.float64)


def detections_from_outputs(model: DetectorNet, probs: np.ndarray,
                            deltas: np.ndarray) -> list[Detection]:
    """Decode, clip, filter by score threshold, round out, NMS."""
    grid = model.anchor_grid
    keep = probs >= model.score_threshold
    if not keep.any():
        return []
    indices = np.nonzero(keep)[0]
    # cap the candidates entering the quadratic NMS loop; order is stable
    # (score descending, then anchor index)
    if indices.size > PRE_NMS_TOP_K:
        order = np.argsort(-probs[indices], kind="stable")[:PRE_NMS_TOP_K]
        indices = indices[order]
    boxes = grid.decode(deltas[indices])
    scores = probs[indices]
    size = grid.image_size
    dets = []
    for (x0, y0, x1, y1), s in zip(boxes, scores):
        if x1 - x0 < 1e-6 or y1 - y0 < 1e-6:
            continue  # degenerate after clipping at the border
        s = float(np.clip(s, 1e-12, 1.0 - 1e-12))  # float32 sigmoid can hit 1.0
        dets.append(Detection(box_round_out((x0, y0, x1, y1), (size, size)), s))
    return nms(dets, model.nms_iou_threshold)


@torch.no_grad()
def detector_predict(model: DetectorNet, image) -> list[Detection]:
    """Detections for one preprocessed 224x224 slice, sorted by score desc."""
    probs, deltas = detector_raw_outputs(model, image)
    return detections_from_outputs(model, probs[0], deltas[0])


@torch.no_grad()
def segmentor_predict(model: SegmentorNet, roi) -> np.ndarray:
    """Per-pixel probabilities for one preprocessed 128x128 ROI."""
    batch, single = _to_batch(roi)
    model.eval()
    out = model(batch).numpy().astype(np.float64)
    return out[0] if single else out


@torch.no_grad()
def baseline_predict(model: Baseline3DNet, volume) -> np.ndarray:
    """Voxel probabilities for one preprocessed volume at the baseline grid."""
    t = torch.as_tensor(np.asarray(volume, dtype=np.float32))
    if t.dim() == 3:
        t = t[None]
    model.eval()
    return model(t).numpy().astype(np.float64)[0]

"""Anchor grid, box encoding, IoU-based target assignment, and greedy NMS.

Anchors live on a single stride-s feature level over the detector input.
Box deltas use the anchor-relative parameterization: center offsets scaled
by anchor width/height, log-scaled width/height ratios. Assignment labels
an anchor positive at IoU >= 0.5 with any ground-truth box, negative below
0.3, ignore in between; the best anchor for every ground-truth box is
always forced positive.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..dataio import BoundingBox, ValidationError
from ..losses import ANCHOR_IGNORE, ANCHOR_NEGATIVE, ANCHOR_POSITIVE

POSITIVE_IOU = 0.5
NEGATIVE_IOU = 0.3


@dataclass(frozen=True)
class Detection:
    box: BoundingBox
    score: float

    def __post_init__(self):
        if not 0.0 < self.score < 1.0:
            raise ValidationError(f"detection score must be in (0,1), got {self.score}")


def boxes_xyxy_to_cwh(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    cx = (boxes[:, 0] + boxes[:, 2]) / 2.0
    cy = (boxes[:, 1] + boxes[:, 3]) / 2.0
    w = boxes[:, 2] - boxes[:, 0]
    h = boxes[:, 3] - boxes[:, 1]
    return np.stack([cx, cy, w, h], axis=1)


def boxes_cwh_to_xyxy(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    half_w = boxes[:, 2] / 2.0
    half_h = boxes[:, 3] / 2.0
    return np.stack([boxes[:, 0] - half_w, boxes[:, 1] - half_h,
                     boxes[:, 0] + half_w, boxes[:, 1] + half_h], axis=1)


def pairwise_iou_xyxy(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """IoU matrix for continuous (float-edge) boxes, shape (len(a), len(b))."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ix = np.clip(np.minimum(a[:, None, 2], b[None, :, 2])
                 - np.maximum(a[:, None, 0], b[None, :, 0]), 0.0, None)
    iy = np.clip(np.minimum(a[:, None, 3], b[None, :, 3])
                 - np.maximum(a[:, None, 1], b[None, :, 1]), 0.0, None)
    inter = ix * iy
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / union, 0.0)


class AnchorGrid:
    """Fixed anchor tiling: one cell per stride step, sizes x ratios per cell.

    Anchor order matches the detector head layout: row-major cells, then the
    per-cell anchor index (size-major, ratio-minor).
    """

    def __init__(self, image_size: int = 224, stride: int = 8,
                 sizes: tuple[float, ...] = (10.0, 17.0, 28.0),
                 ratios: tuple[float, ...] = (0.75, 4.0 / 3.0)):
        if image_size % stride != 0:
            raise ValidationError("image_size must be a multiple of stride")
        self.image_size = int(image_size)
        self.stride = int(stride)
        self.sizes = tuple(float(s) for s in sizes)
        self.ratios = tuple(float(r) for r in ratios)
        self.cells = self.image_size // self.stride
        self.per_cell = len(self.sizes) * len(self.ratios)

        shapes = []
        for s in self.sizes:
            for r in self.ratios:  # r = height / width
                shapes.append((s / np.sqrt(r), s * np.sqrt(r)))
        shapes = np.asarray(shapes, dtype=np.float64)            # (per_cell, 2) w,h

        centers = (np.arange(self.cells, dtype=np.float64) + 0.5) * self.stride
        cy, cx = np.meshgrid(centers, centers, indexing="ij")
        cx = np.repeat(cx.reshape(-1), self.per_cell)
        cy = np.repeat(cy.reshape(-1), self.per_cell)
        wh = np.tile(shapes, (self.cells * self.cells, 1))
        self.anchors_xyxy = boxes_cwh_to_xyxy(np.stack([cx, cy, wh[:, 0], wh[:, 1]], axis=1))
        # derive cwh from the corner form so encode() of a ground-truth box
        # that equals an anchor yields exactly zero deltas
        self.anchors_cwh = boxes_xyxy_to_cwh(self.anchors_xyxy)

    def __len__(self) -> int:
        return self.anchors_cwh.shape[0]

    def encode(self, boxes_cwh: np.ndarray, anchor_indices: np.ndarray | None = None) -> np.ndarray:
        """Deltas that decode the given boxes from (selected) anchors."""
        anchors = self.anchors_cwh if anchor_indices is None else self.anchors_cwh[anchor_indices]
        boxes_cwh = np.asarray(boxes_cwh, dtype=np.float64)
        dx = (boxes_cwh[:, 0] - anchors[:, 0]) / anchors[:, 2]
        dy = (boxes_cwh[:, 1] - anchors[:, 1]) / anchors[:, 3]
        dw = np.log(boxes_cwh[:, 2] / anchors[:, 2])
        dh = np.log(boxes_cwh[:, 3] / anchors[:, 3])
        return np.stack([dx, dy, dw, dh], axis=1)

    def decode(self, deltas: np.ndarray, anchor_indices: np.ndarray | None = None) -> np.ndarray:
        """Boxes (float xyxy) for per-anchor deltas, clipped to image bounds."""
        anchors = self.anchors_cwh if anchor_indices is None else self.anchors_cwh[anchor_indices]
        deltas = np.asarray(deltas, dtype=np.float64)
        cx = anchors[:, 0] + deltas[:, 0] * anchors[:, 2]
        cy = anchors[:, 1] + deltas[:, 1] * anchors[:, 3]
        w = anchors[:, 2] * np.exp(deltas[:, 2])
        h = anchors[:, 3] * np.exp(deltas[:, 3])
        xyxy = boxes_cwh_to_xyxy(np.stack([cx, cy, w, h], axis=1))
        return np.clip(xyxy, 0.0, self.image_size)

    def assign(self, gt_xyxy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Labels (1/0/-1) and box-delta targets for float ground-truth boxes."""
        gt_xyxy = np.asarray(gt_xyxy, dtype=np.float64).reshape(-1, 4)
        if gt_xyxy.shape[0] == 0:
            raise ValidationError("anchor assignment needs at least one ground-truth box")
        iou_mat = pairwise_iou_xyxy(self.anchors_xyxy, gt_xyxy)     # (N, M)
        best_gt = np.argmax(iou_mat, axis=1)
        best_iou = iou_mat[np.arange(len(self)), best_gt]

        labels = np.full(len(self), ANCHOR_IGNORE, dtype=np.int8)
        labels[best_iou < NEGATIVE_IOU] = ANCHOR_NEGATIVE
        labels[best_iou >= POSITIVE_IOU] = ANCHOR_POSITIVE
        assigned = best_gt.copy()
        # guarantee: the best anchor of every GT box is positive for that box
        for j in range(gt_xyxy.shape[0]):
            a = int(np.argmax(iou_mat[:, j]))
            labels[a] = ANCHOR_POSITIVE
            assigned[a] = j

        targets = np.zeros((len(self), 4), dtype=np.float64)
        pos = labels == ANCHOR_POSITIVE
        if pos.any():
            gt_cwh = boxes_xyxy_to_cwh(gt_xyxy[assigned[pos]])
            targets[pos] = self.encode(gt_cwh, anchor_indices=np.nonzero(pos)[0])
        return labels, targets.astype(np.float32)


def nms(detections: list[Detection], iou_threshold: float = 0.5) -> list[Detection]:
    """Greedy NMS; keeps score order, breaks ties lexicographically by box."""
    from ..metrics import iou  # deferred: metrics imports Detection from here

    pending = sorted(detections, key=lambda d: (-d.score, d.box.as_tuple()))
    kept: list[Detection] = []
    while pending:
        head = pending.pop(0)
        kept.append(head)
        pending = [d for d in pending if iou(head.box, d.box) <= iou_threshold]
    return kept

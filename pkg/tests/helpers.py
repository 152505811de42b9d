"""Independent brute-force oracles used to pin expected values.

Everything here is deliberately written with plain loops, separate from the
library code paths it checks.
"""

from __future__ import annotations

import math
from collections import deque

import numpy as np
import torch

from petcascade.phantom import PhantomConfig


def tiny_phantom_config(**overrides) -> PhantomConfig:
    base = dict(
        grid_dims=(24, 32, 32),
        voxel_spacing_mm=(4.0, 3.6, 3.6),
        tumor_count_range=(1, 3),
        tumor_radius_range_mm=(8.0, 12.0),
        organ_count_range=(1, 2),
        background_uptake=1.0,
        organ_uptake_range=(1.8, 3.2),
        tumor_uptake_range=(4.0, 8.0),
        noise_sigma=0.2,
        target_fg_slice_fraction=0.10,
    )
    base.update(overrides)
    return PhantomConfig(**base)


# ---------------------------------------------------------------------------
# connected components by BFS

def bfs_components_2d(mask: np.ndarray) -> list[set[tuple[int, int]]]:
    """8-connected components of a 2D binary mask."""
    mask = np.asarray(mask) != 0
    seen = np.zeros_like(mask, dtype=bool)
    comps = []
    h, w = mask.shape
    for sy in range(h):
        for sx in range(w):
            if not mask[sy, sx] or seen[sy, sx]:
                continue
            comp = set()
            queue = deque([(sy, sx)])
            seen[sy, sx] = True
            while queue:
                y, x = queue.popleft()
                comp.add((y, x))
                for dy in (-1, 0, 1):
                    for dx in (-1, 0, 1):
                        ny, nx = y + dy, x + dx
                        if 0 <= ny < h and 0 <= nx < w and mask[ny, nx] and not seen[ny, nx]:
                            seen[ny, nx] = True
                            queue.append((ny, nx))
            comps.append(comp)
    return comps


def bfs_components_3d(mask: np.ndarray) -> list[int]:
    """Voxel counts of 26-connected components of a 3D binary mask."""
    mask = np.asarray(mask) != 0
    seen = np.zeros_like(mask, dtype=bool)
    counts = []
    d, h, w = mask.shape
    offsets = [(dz, dy, dx) for dz in (-1, 0, 1) for dy in (-1, 0, 1) for dx in (-1, 0, 1)
               if (dz, dy, dx) != (0, 0, 0)]
    for sz in range(d):
        for sy in range(h):
            for sx in range(w):
                if not mask[sz, sy, sx] or seen[sz, sy, sx]:
                    continue
                n = 0
                queue = deque([(sz, sy, sx)])
                seen[sz, sy, sx] = True
                while queue:
                    z, y, x = queue.popleft()
                    n += 1
                    for dz, dy, dx in offsets:
                        nz, ny, nx = z + dz, y + dy, x + dx
                        if (0 <= nz < d and 0 <= ny < h and 0 <= nx < w
                                and mask[nz, ny, nx] and not seen[nz, ny, nx]):
                            seen[nz, ny, nx] = True
                            queue.append((nz, ny, nx))
                counts.append(n)
    return counts


# ---------------------------------------------------------------------------
# scalar loss references

def scalar_bce(probs, targets, eps=1e-7) -> float:
    total = 0.0
    for p, t in zip(probs, targets):
        p = min(max(p, eps), 1 - eps)
        total += -(t * math.log(p) + (1 - t) * math.log(1 - p))
    return total / len(probs)


def scalar_focal(probs, targets, alpha=0.25, gamma=2.0, eps=1e-7) -> float:
    total = 0.0
    for p, t in zip(probs, targets):
        p = min(max(p, eps), 1 - eps)
        p_t = p if t == 1 else 1 - p
        a_t = alpha if t == 1 else 1 - alpha
        total += -a_t * (1 - p_t) ** gamma * math.log(p_t)
    return total / len(probs)


def scalar_gdl(probs, targets) -> float:
    num = 0.0
    den = 0.0
    for r_list, p_list in (
        (list(targets), list(probs)),
        ([1 - t for t in targets], [1 - p for p in probs]),
    ):
        w = 1.0 / max(sum(r_list), 1.0) ** 2
        num += w * sum(r * p for r, p in zip(r_list, p_list))
        den += w * sum(r + p for r, p in zip(r_list, p_list))
    return 1.0 - 2.0 * num / den


# ---------------------------------------------------------------------------
# metric oracles

def auc_by_rank_statistic(scores, labels) -> float:
    """P(random positive outranks random negative), ties counted 1/2."""
    pos = [s for s, l in zip(scores, labels) if l == 1]
    neg = [s for s, l in zip(scores, labels) if l == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                total += 1.0
            elif p == n:
                total += 0.5
    return total / (len(pos) * len(neg))


def ap_brute_force(scores, labels) -> float:
    """Step AP over distinct descending thresholds."""
    n_pos = sum(labels)
    thresholds = sorted(set(scores), reverse=True)
    ap = 0.0
    prev_recall = 0.0
    for t in thresholds:
        tp = sum(1 for s, l in zip(scores, labels) if s >= t and l == 1)
        fp = sum(1 for s, l in zip(scores, labels) if s >= t and l == 0)
        recall = tp / n_pos
        precision = tp / (tp + fp)
        ap += (recall - prev_recall) * precision
        prev_recall = recall
    return ap


def optimal_threshold_brute_force(scores, labels) -> tuple[float, float]:
    u = sorted(set(scores))
    candidates = [u[0]] + [(a + b) / 2 for a, b in zip(u[:-1], u[1:])] + [u[-1] + 1.0]
    n_pos = sum(labels)
    n_neg = len(labels) - n_pos
    best = None
    for t in candidates:
        tp = sum(1 for s, l in zip(scores, labels) if s >= t and l == 1)
        tn = sum(1 for s, l in zip(scores, labels) if s < t and l == 0)
        g = math.sqrt((tp / n_pos) * (tn / n_neg))
        if best is None or g > best[1] + 1e-15:
            best = (t, g)
    return best


def iou_int(a, b) -> float:
    ix = max(0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    area = lambda t: (t[2] - t[0]) * (t[3] - t[1])
    union = area(a) + area(b) - inter
    return inter / union if union else 0.0


def greedy_match_brute_force(pred_boxes, scores, gt_boxes, iou_thr, score_thr):
    """Same greedy rule, re-derived with tuples and explicit sorting."""
    order = sorted(range(len(pred_boxes)),
                   key=lambda i: (-scores[i], tuple(pred_boxes[i])))
    order = [i for i in order if scores[i] >= score_thr]
    taken = set()
    flags = []
    pairs = []
    for i in order:
        best_j, best_v = None, 0.0
        for j, g in enumerate(gt_boxes):
            if j in taken:
                continue
            v = iou_int(pred_boxes[i], g)
            if v > best_v:
                best_j, best_v = j, v
        if best_j is not None and best_v >= iou_thr:
            taken.add(best_j)
            flags.append(True)
            pairs.append((i, best_j))
        else:
            flags.append(False)
    tp = sum(flags)
    return tp, len(flags) - tp, len(gt_boxes) - tp, pairs, order, flags


def map_brute_force(images, iou_thr=0.5) -> float:
    """images: list of (pred_boxes, scores, gt_boxes)."""
    pooled = []
    n_gt = 0
    for pred_boxes, scores, gt_boxes in images:
        n_gt += len(gt_boxes)
        _, _, _, _, order, flags = greedy_match_brute_force(
            pred_boxes, scores, gt_boxes, iou_thr, score_thr=0.0)
        pooled.extend((scores[i], f) for i, f in zip(order, flags))
    thresholds = sorted({s for s, _ in pooled}, reverse=True)
    ap = 0.0
    prev_recall = 0.0
    for t in thresholds:
        tp = sum(1 for s, f in pooled if s >= t and f)
        fp = sum(1 for s, f in pooled if s >= t and not f)
        recall = tp / n_gt
        precision = tp / (tp + fp) if tp + fp else 0.0
        ap += (recall - prev_recall) * precision
        prev_recall = recall
    return ap


# ---------------------------------------------------------------------------
# finite differences

def finite_difference_check(fn, tensors, step=1e-5, rel_tol=1e-4):
    """Compare autograd gradients of scalar fn(*tensors) with central differences.

    tensors are float64 leaf tensors with requires_grad=True. Returns the
    worst relative error observed.
    """
    value = fn(*tensors)
    grads = torch.autograd.grad(value, tensors)
    worst = 0.0
    for tensor, grad in zip(tensors, grads):
        flat = tensor.detach().reshape(-1)
        gflat = grad.reshape(-1)
        for k in range(flat.numel()):
            orig = flat[k].item()
            flat[k] = orig + step
            up = fn(*tensors).item()
            flat[k] = orig - step
            down = fn(*tensors).item()
            flat[k] = orig
            numeric = (up - down) / (2 * step)
            analytic = gflat[k].item()
            denom = max(abs(numeric), abs(analytic))
            if denom < 1e-7:
                continue
            rel = abs(numeric - analytic) / denom
            worst = max(worst, rel)
            assert rel < rel_tol, (
                f"gradient mismatch at element {k}: analytic {analytic}, numeric {numeric}, rel {rel}"
            )
    return worst

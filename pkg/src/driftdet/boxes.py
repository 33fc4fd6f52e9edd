"""Array-level box utilities: IoU matrices, NMS, anchors, delta coding.

Boxes are (N, 4) float arrays in (x1, y1, x2, y2) pixel convention.
"""

from __future__ import annotations

import numpy as np

LOG_SCALE_CLAMP = 4.0


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (N,4) and (M,4) boxes; zeros for degenerate boxes."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ix = np.clip(np.minimum(a[:, None, 2], b[None, :, 2])
                 - np.maximum(a[:, None, 0], b[None, :, 0]), 0, None)
    iy = np.clip(np.minimum(a[:, None, 3], b[None, :, 3])
                 - np.maximum(a[:, None, 1], b[None, :, 1]), 0, None)
    inter = ix * iy
    area_a = np.clip(a[:, 2] - a[:, 0], 0, None) * np.clip(a[:, 3] - a[:, 1], 0, None)
    area_b = np.clip(b[:, 2] - b[:, 0], 0, None) * np.clip(b[:, 3] - b[:, 1], 0, None)
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        iou = np.where(union > 0, inter / union, 0.0)
    return iou


def nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> list[int]:
    """Greedy NMS; returns kept indices in descending score order.

    Ties are broken by the lower original index, which makes the result
    invariant to the input ordering of distinct-score lists.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64)
    order = np.lexsort((np.arange(len(scores)), -scores))
    keep: list[int] = []
    suppressed = np.zeros(len(scores), dtype=bool)
    ious = iou_matrix(boxes, boxes)
    for idx in order:
        if suppressed[idx]:
            continue
        keep.append(int(idx))
        suppressed |= ious[idx] > iou_threshold
        suppressed[idx] = True
    return keep


def clip_boxes(boxes: np.ndarray, height: float, width: float) -> np.ndarray:
    out = np.array(boxes, dtype=np.float64).reshape(-1, 4)
    out[:, 0::2] = np.clip(out[:, 0::2], 0, width)
    out[:, 1::2] = np.clip(out[:, 1::2], 0, height)
    return out


def anchor_grid(image_size: int, stride: int, scales: tuple[float, ...]) -> np.ndarray:
    """Square anchors, one per (cell, scale), centered on feature cells.

    Returns (cells * len(scales), 4), ordered row-major by cell then scale.
    """
    n = image_size // stride
    centers = (np.arange(n) + 0.5) * stride
    cy, cx = np.meshgrid(centers, centers, indexing="ij")
    anchors = []
    for yc, xc in zip(cy.ravel(), cx.ravel()):
        for s in scales:
            h = s / 2.0
            anchors.append([xc - h, yc - h, xc + h, yc + h])
    return np.array(anchors, dtype=np.float64)


def encode_deltas(anchors: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    """Target deltas (dx/w, dy/h, log w ratio, log h ratio) for matched boxes."""
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    acx = anchors[:, 0] + aw / 2
    acy = anchors[:, 1] + ah / 2
    gw = boxes[:, 2] - boxes[:, 0]
    gh = boxes[:, 3] - boxes[:, 1]
    gcx = boxes[:, 0] + gw / 2
    gcy = boxes[:, 1] + gh / 2
    return np.stack([(gcx - acx) / aw, (gcy - acy) / ah,
                     np.log(gw / aw), np.log(gh / ah)], axis=1)


def decode_deltas(anchors: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    """Inverse of encode_deltas, with clamped log-scale terms."""
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    acx = anchors[:, 0] + aw / 2
    acy = anchors[:, 1] + ah / 2
    cx = acx + deltas[:, 0] * aw
    cy = acy + deltas[:, 1] * ah
    w = aw * np.exp(np.clip(deltas[:, 2], -LOG_SCALE_CLAMP, LOG_SCALE_CLAMP))
    h = ah * np.exp(np.clip(deltas[:, 3], -LOG_SCALE_CLAMP, LOG_SCALE_CLAMP))
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)

"""Compact two-stage detector: conv encoder, RPN, and ROI head.

The network is intentionally small (stride-8 encoder, 3 square anchors per
cell, 4x4 bilinear crop-resize for ROI pooling) so that a full adaptation
experiment trains on a laptop CPU in minutes. Classification heads use
per-class sigmoids; background is the all-zeros target.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from . import boxes as B
from .data import AnnotatedImage, BoundingBox, Detection
from .errors import NumericalError

EPS = 1e-7


@dataclass(frozen=True)
class ArchConfig:
    image_size: int = 64
    num_classes: int = 3
    stem_channels: tuple[int, ...] = (32, 48, 64, 64)
    stride: int = 8
    anchor_scales: tuple[float, ...] = (8.0, 16.0, 32.0)
    rpn_hidden: int = 64
    roi_size: int = 4
    roi_hidden: int = 128
    rpn_pos_iou: float = 0.7
    rpn_neg_iou: float = 0.3
    roi_pos_iou: float = 0.5
    rpn_pre_nms: int = 64
    rpn_post_nms: int = 16
    rpn_nms_iou: float = 0.7
    roi_sample_size: int = 64
    roi_pos_fraction: float = 0.25

    def fingerprint(self) -> str:
        import hashlib
        import json

        blob = json.dumps(self.__dict__, sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def micro_arch(num_classes: int = 2) -> ArchConfig:
    """Tiny configuration (<5k parameters) for finite-difference checks."""
    return ArchConfig(image_size=32, num_classes=num_classes,
                      stem_channels=(4, 6, 8, 8), rpn_hidden=8, roi_hidden=16,
                      anchor_scales=(8.0, 16.0), rpn_pre_nms=16, rpn_post_nms=8,
                      roi_sample_size=16)


def to_tensor(pixels: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(pixels.transpose(2, 0, 1))).to(dtype)


def _he_init(module: nn.Module, gen: torch.Generator) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            fan_in = m.weight[0].numel()
            bound = math.sqrt(6.0 / fan_in)
            with torch.no_grad():
                m.weight.uniform_(-bound, bound, generator=gen)
                if m.bias is not None:
                    m.bias.zero_()


def crop_resize(features: torch.Tensor, rois: np.ndarray, stride: int,
                out_size: int) -> torch.Tensor:
    """Bilinear crop-resize of (C,H,W) features to (N,C,S,S) for image-space rois.

    Sampling points sit at the centers of an S x S grid of bins inside each
    roi; feature values are treated as samples at cell centers (offset 0.5).
    """
    C, H, W = features.shape
    n = rois.shape[0]
    if n == 0:
        return features.new_zeros((0, C, out_size, out_size))
    fb = torch.as_tensor(rois, dtype=features.dtype) / stride
    steps = (torch.arange(out_size, dtype=features.dtype) + 0.5) / out_size
    xs = fb[:, 0:1] + steps[None, :] * (fb[:, 2:3] - fb[:, 0:1])  # (N,S)
    ys = fb[:, 1:2] + steps[None, :] * (fb[:, 3:4] - fb[:, 1:2])
    px = xs - 0.5
    py = ys - 0.5
    x0 = torch.floor(px)
    y0 = torch.floor(py)
    wx = (px - x0).clamp(0.0, 1.0)
    wy = (py - y0).clamp(0.0, 1.0)
    x0c = x0.long().clamp(0, W - 1)
    x1c = (x0.long() + 1).clamp(0, W - 1)
    y0c = y0.long().clamp(0, H - 1)
    y1c = (y0.long() + 1).clamp(0, H - 1)
    # broadcast to (N,S,S) index grids
    y0g = y0c[:, :, None].expand(n, out_size, out_size)
    y1g = y1c[:, :, None].expand(n, out_size, out_size)
    x0g = x0c[:, None, :].expand(n, out_size, out_size)
    x1g = x1c[:, None, :].expand(n, out_size, out_size)
    f = features.permute(1, 2, 0)  # (H,W,C)
    v00 = f[y0g, x0g]
    v01 = f[y0g, x1g]
    v10 = f[y1g, x0g]
    v11 = f[y1g, x1g]
    wyg = wy[:, :, None, None]
    wxg = wx[:, None, :, None]
    out = (v00 * (1 - wyg) * (1 - wxg) + v01 * (1 - wyg) * wxg
           + v10 * wyg * (1 - wxg) + v11 * wyg * wxg)
    return out.permute(0, 3, 1, 2)


class TwoStageDetector(nn.Module):
    def __init__(self, arch: ArchConfig = ArchConfig(), seed: int = 0,
                 dtype: torch.dtype = torch.float32):
        super().__init__()
        self.arch = arch
        c0, c1, c2, c3 = arch.stem_channels
        self.encoder = nn.Sequential(
            nn.Conv2d(3, c0, 3, padding=1), nn.GELU(),
            nn.Conv2d(c0, c1, 3, stride=2, padding=1), nn.GELU(),
            nn.Conv2d(c1, c2, 3, stride=2, padding=1), nn.GELU(),
            nn.Conv2d(c2, c3, 3, stride=2, padding=1), nn.GELU(),
        )
        a = len(arch.anchor_scales)
        self.rpn_conv = nn.Conv2d(c3, arch.rpn_hidden, 3, padding=1)
        self.rpn_obj = nn.Conv2d(arch.rpn_hidden, a, 1)
        self.rpn_reg = nn.Conv2d(arch.rpn_hidden, 4 * a, 1)
        roi_in = c3 * arch.roi_size * arch.roi_size
        self.roi_fc = nn.Linear(roi_in, arch.roi_hidden)
        self.roi_cls = nn.Linear(arch.roi_hidden, arch.num_classes)
        self.roi_reg = nn.Linear(arch.roi_hidden, 4)

        gen = torch.Generator().manual_seed(seed)
        _he_init(self, gen)
        with torch.no_grad():  # rare-positive prior keeps early training stable
            self.rpn_obj.bias.fill_(-2.0)
            self.roi_cls.bias.fill_(-2.0)
        self.to(dtype)
        self._anchors = B.anchor_grid(arch.image_size, arch.stride, arch.anchor_scales)

    @property
    def anchors(self) -> np.ndarray:
        return self._anchors

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        """(B,3,H,W) -> (B,C,H/stride,W/stride)."""
        if images.dim() == 3:
            images = images[None]
        return self.encoder(images)

    def rpn_forward(self, features: torch.Tensor):
        """Per-image flattened objectness logits (N_anchors,) and deltas (N_anchors,4)."""
        h = nn.functional.gelu(self.rpn_conv(features))
        a = len(self.arch.anchor_scales)
        obj = self.rpn_obj(h)   # (B,A,Hf,Wf)
        reg = self.rpn_reg(h)   # (B,4A,Hf,Wf)
        bsz, _, hf, wf = obj.shape
        obj = obj.permute(0, 2, 3, 1).reshape(bsz, hf * wf * a)
        reg = reg.reshape(bsz, a, 4, hf, wf).permute(0, 3, 4, 1, 2)
        reg = reg.reshape(bsz, hf * wf * a, 4)
        return obj, reg

    def rpn_propose(self, features: torch.Tensor, top_n: int | None = None,
                    nms_iou: float | None = None):
        """Proposals for one image: (boxes (N,4) ndarray, objectness scores (N,))."""
        arch = self.arch
        top_n = arch.rpn_post_nms if top_n is None else top_n
        nms_iou = arch.rpn_nms_iou if nms_iou is None else nms_iou
        if top_n <= 0:
            return np.zeros((0, 4)), np.zeros(0)
        obj, reg = self.rpn_forward(features)
        scores = torch.sigmoid(obj[0]).detach().double().numpy()
        deltas = reg[0].detach().double().numpy()
        decoded = B.decode_deltas(self._anchors, deltas)
        decoded = B.clip_boxes(decoded, arch.image_size, arch.image_size)
        order = np.lexsort((np.arange(len(scores)), -scores))[:arch.rpn_pre_nms]
        keep = B.nms(decoded[order], scores[order], nms_iou)[:top_n]
        idx = order[keep]
        return decoded[idx], scores[idx]

    def roi_forward(self, features: torch.Tensor, rois: np.ndarray):
        """Class logits (N,K) and refinement deltas (N,4) for image-space rois."""
        if features.dim() == 4:
            features = features[0]
        pooled = crop_resize(features, rois, self.arch.stride, self.arch.roi_size)
        flat = pooled.reshape(pooled.shape[0], -1)
        h = nn.functional.gelu(self.roi_fc(flat))
        return self.roi_cls(h), self.roi_reg(h)

    def roi_head(self, features: torch.Tensor, rois: np.ndarray):
        """Per-roi class probabilities and deltas, detached numpy view."""
        logits, deltas = self.roi_forward(features, rois)
        return (torch.sigmoid(logits).detach().double().numpy(),
                deltas.detach().double().numpy())

    @torch.no_grad()
    def detect(self, image: np.ndarray, score_threshold: float = 0.5,
               nms_iou: float = 0.5) -> list[Detection]:
        """Full inference: proposals -> ROI head -> per-class NMS -> threshold."""
        dtype = next(self.parameters()).dtype
        features = self.encode(to_tensor(image, dtype))
        rois, _ = self.rpn_propose(features)
        probs, deltas = self.roi_head(features, rois)
        return decode_detections(rois, probs, deltas, self.arch.image_size,
                                 score_threshold, nms_iou)


def decode_detections(rois: np.ndarray, probs: np.ndarray, deltas: np.ndarray,
                      image_size: int, score_threshold: float,
                      nms_iou: float) -> list[Detection]:
    """Greedy per-class suppression then score threshold over ROI head outputs."""
    if rois.shape[0] == 0:
        return []
    refined = B.clip_boxes(B.decode_deltas(rois, deltas), image_size, image_size)
    out: list[Detection] = []
    num_classes = probs.shape[1]
    for cls in range(num_classes):
        scores = probs[:, cls]
        valid = (refined[:, 2] - refined[:, 0] > 1e-6) & (refined[:, 3] - refined[:, 1] > 1e-6)
        idx = np.nonzero(valid)[0]
        keep = B.nms(refined[idx], scores[idx], nms_iou)
        for k in keep:
            i = idx[k]
            if scores[i] >= score_threshold:
                out.append(Detection(
                    box=BoundingBox(*refined[i]), label=cls, score=float(scores[i])))
    out.sort(key=lambda d: (-d.score, d.label))
    return out


# ---------------------------------------------------------------------------
# target assignment and losses


def bce_with_logits(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    return nn.functional.binary_cross_entropy_with_logits(
        logits, targets, reduction="none")


def assign_rpn_targets(anchors: np.ndarray, gt_boxes: np.ndarray,
                       pos_iou: float, neg_iou: float):
    """Per-anchor labels: 1 positive, 0 negative, -1 ignore; matched GT index.

    Every GT additionally claims its best-overlapping anchor so that small
    objects always own at least one positive.
    """
    n = anchors.shape[0]
    labels = np.zeros(n, dtype=np.int64)
    matched = np.full(n, -1, dtype=np.int64)
    if gt_boxes.shape[0] == 0:
        return labels, matched
    ious = B.iou_matrix(anchors, gt_boxes)
    best_gt = ious.argmax(axis=1)
    best_iou = ious.max(axis=1)
    labels[best_iou >= pos_iou] = 1
    labels[(best_iou < pos_iou) & (best_iou >= neg_iou)] = -1
    for g in range(gt_boxes.shape[0]):
        col = ious[:, g]
        if col.max() > 0:
            labels[int(col.argmax())] = 1
    matched[labels == 1] = best_gt[labels == 1]
    # a force-matched anchor keeps its own best gt
    for g in range(gt_boxes.shape[0]):
        col = ious[:, g]
        if col.max() > 0:
            matched[int(col.argmax())] = g
    return labels, matched


def sample_rois(proposals: np.ndarray, scores: np.ndarray, gt_boxes: np.ndarray,
                gt_labels: np.ndarray, arch: ArchConfig):
    """Append GTs as proposals, assign classes, and take a capped 1:3 sample.

    Selection is deterministic: positives then negatives by descending score,
    ties by index.
    """
    if gt_boxes.shape[0] > 0:
        rois = np.concatenate([proposals, gt_boxes], axis=0)
        scores = np.concatenate([scores, np.ones(gt_boxes.shape[0])])
    else:
        rois = proposals
    n = rois.shape[0]
    if n == 0:
        return rois, np.zeros(0, dtype=np.int64), np.full(0, -1, dtype=np.int64)
    cls = np.full(n, -1, dtype=np.int64)  # -1 = background
    matched = np.full(n, -1, dtype=np.int64)
    if gt_boxes.shape[0] > 0:
        ious = B.iou_matrix(rois, gt_boxes)
        best = ious.argmax(axis=1)
        best_iou = ious.max(axis=1)
        pos = best_iou >= arch.roi_pos_iou
        cls[pos] = gt_labels[best[pos]]
        matched[pos] = best[pos]
    order = np.lexsort((np.arange(n), -scores))
    pos_idx = [i for i in order if cls[i] >= 0]
    neg_idx = [i for i in order if cls[i] < 0]
    max_pos = max(1, int(round(arch.roi_sample_size * arch.roi_pos_fraction)))
    pos_idx = pos_idx[:max_pos]
    neg_cap = min(len(neg_idx), max(len(pos_idx) * 3, 4),
                  arch.roi_sample_size - len(pos_idx))
    neg_idx = neg_idx[:neg_cap]
    sel = np.array(pos_idx + neg_idx, dtype=np.int64)
    return rois[sel], cls[sel], matched[sel]


def _balanced_bce(losses: torch.Tensor, positive: torch.Tensor) -> torch.Tensor:
    """Average positive and negative BCE terms with equal weight.

    Falls back to the plain mean of whichever side exists.
    """
    pos = positive.bool()
    has_pos = pos.any()
    has_neg = (~pos).any()
    if has_pos and has_neg:
        return 0.5 * losses[pos].mean() + 0.5 * losses[~pos].mean()
    return losses.mean()


def detection_loss(model: TwoStageDetector, batch: list[AnnotatedImage],
                   classification_only: bool = False,
                   override_annotations: list[list[tuple[BoundingBox, int]]] | None = None,
                   fixed_proposals: list[tuple[np.ndarray, np.ndarray]] | None = None):
    """Detector loss over a batch; returns (scalar, component dict).

    With classification_only=True the regression terms are dropped, so the
    regression heads receive exactly zero gradient (the pseudo-label path).

    Proposals are constants of the objective (no gradient flows through their
    coordinates); pass fixed_proposals to pin them explicitly, e.g. for
    finite-difference checks.
    """
    dtype = next(model.parameters()).dtype
    images = torch.stack([to_tensor(img.pixels, dtype) for img in batch])
    features = model.encode(images)
    obj_all, reg_all = model.rpn_forward(features)
    anchors = model.anchors
    arch = model.arch
    zero = features.sum() * 0.0
    rpn_cls_terms, rpn_reg_terms, roi_cls_terms, roi_reg_terms = [], [], [], []
    for i, img in enumerate(batch):
        annotations = (override_annotations[i] if override_annotations is not None
                       else img.annotations)
        gt_boxes = np.array([b.as_tuple() for b, _ in annotations]).reshape(-1, 4)
        gt_labels = np.array([c for _, c in annotations], dtype=np.int64)

        labels, matched = assign_rpn_targets(anchors, gt_boxes,
                                             arch.rpn_pos_iou, arch.rpn_neg_iou)
        keep = labels >= 0
        logits = obj_all[i][torch.from_numpy(np.nonzero(keep)[0])]
        targets = torch.as_tensor(labels[keep], dtype=dtype)
        losses = bce_with_logits(logits, targets)
        rpn_cls_terms.append(_balanced_bce(losses, targets))

        pos = np.nonzero(labels == 1)[0]
        if not classification_only:
            if len(pos) > 0:
                t = B.encode_deltas(anchors[pos], gt_boxes[matched[pos]])
                pred = reg_all[i][torch.from_numpy(pos)]
                rpn_reg_terms.append(
                    (pred - torch.as_tensor(t, dtype=dtype)).abs().mean())
            else:
                rpn_reg_terms.append(zero)

        if classification_only and gt_boxes.shape[0] == 0:
            continue  # empty pseudo set: RPN background term only
        if fixed_proposals is not None:
            props, scores = fixed_proposals[i]
        else:
            props, scores = model.rpn_propose(features[i:i + 1])
        rois, roi_cls, roi_matched = sample_rois(props, scores, gt_boxes,
                                                 gt_labels, arch)
        if rois.shape[0] == 0:
            continue
        cls_logits, reg_pred = model.roi_forward(features[i], rois)
        onehot = torch.zeros_like(cls_logits)
        pos_mask = torch.as_tensor(roi_cls >= 0)
        for j, c in enumerate(roi_cls):
            if c >= 0:
                onehot[j, c] = 1.0
        losses = bce_with_logits(cls_logits, onehot).mean(dim=1)
        roi_cls_terms.append(_balanced_bce(losses, pos_mask))
        if not classification_only:
            pos_j = np.nonzero(roi_cls >= 0)[0]
            if len(pos_j) > 0:
                t = B.encode_deltas(rois[pos_j], gt_boxes[roi_matched[pos_j]])
                roi_reg_terms.append(
                    (reg_pred[torch.from_numpy(pos_j)]
                     - torch.as_tensor(t, dtype=dtype)).abs().mean())
            else:
                roi_reg_terms.append(zero)

    def avg(terms):
        return torch.stack(terms).mean() if terms else zero

    components = {
        "rpn_cls": avg(rpn_cls_terms),
        "rpn_reg": avg(rpn_reg_terms) if not classification_only else zero,
        "roi_cls": avg(roi_cls_terms),
        "roi_reg": avg(roi_reg_terms) if not classification_only else zero,
    }
    total = components["rpn_cls"] + components["rpn_reg"] \
        + components["roi_cls"] + components["roi_reg"]
    return total, components


def supervised_loss(model: TwoStageDetector, batch: list[AnnotatedImage]):
    """Labeled-source loss: RPN/ROI classification + regression (all four terms)."""
    return detection_loss(model, batch, classification_only=False)


def sgd_step(params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor],
             state: dict[str, torch.Tensor], lr: float, momentum: float = 0.9,
             weight_decay: float = 0.0005) -> None:
    """In-place momentum SGD: d = g + wd*p; buf = m*buf + d; p -= lr*buf."""
    with torch.no_grad():
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                continue
            if not torch.isfinite(g).all():
                raise NumericalError(f"non-finite gradient in {name}")
            d = g + weight_decay * p
            buf = state.get(name)
            if buf is None:
                buf = torch.zeros_like(p)
                state[name] = buf
            buf.mul_(momentum).add_(d)
            p.sub_(lr * buf)

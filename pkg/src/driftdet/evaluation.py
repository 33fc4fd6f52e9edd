"""VOC-style average precision, pseudo-label quality metrics, and curves."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .data import BoundingBox, Dataset, Detection, box_iou
from .errors import DataError


@dataclass
class EvalResult:
    per_class: dict[int, float | None]
    mean_ap: float
    num_detections: int
    num_ground_truth: int
    split_fingerprint: str = ""
    which_model: str = ""

    def defined_aps(self) -> list[float]:
        return [v for v in self.per_class.values() if v is not None]


def _sort_detections(detections):
    # deterministic order: score desc, then image id and geometry as tie-breaks
    return sorted(detections, key=lambda t: (
        -t[1].score, t[0], t[1].box.x1, t[1].box.y1, t[1].box.x2, t[1].box.y2))


def average_precision(detections: list[tuple[int, Detection]],
                      ground_truth: list[tuple[int, BoundingBox, int]],
                      cls: int, iou_threshold: float = 0.5) -> float | None:
    """Continuous (all-point) AP for one class with greedy score-ordered matching.

    Each ground-truth box is matched at most once. Returns None (with a
    warning) for classes without any ground truth.
    """
    gts = [(img, box) for img, box, c in ground_truth if c == cls]
    if not gts:
        warnings.warn(f"class {cls} has no ground-truth instances; AP undefined")
        return None
    dets = _sort_detections([(img, d) for img, d in detections if d.label == cls])
    matched = [False] * len(gts)
    tp = np.zeros(len(dets))
    fp = np.zeros(len(dets))
    for i, (img, det) in enumerate(dets):
        best_iou, best_j = 0.0, -1
        for j, (gimg, gbox) in enumerate(gts):
            if gimg != img or matched[j]:
                continue
            iou = box_iou(det.box, gbox)
            if iou > best_iou:
                best_iou, best_j = iou, j
        if best_j >= 0 and best_iou >= iou_threshold:
            matched[best_j] = True
            tp[i] = 1
        else:
            fp[i] = 1
    if len(dets) == 0:
        return 0.0
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(fp)
    recall = cum_tp / len(gts)
    precision = cum_tp / np.maximum(cum_tp + cum_fp, 1e-12)
    # monotone precision envelope, then area under the PR curve
    r = np.concatenate([[0.0], recall, [recall[-1]]])
    p = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(p) - 2, -1, -1):
        p[i] = max(p[i], p[i + 1])
    steps = np.nonzero(r[1:] != r[:-1])[0]
    return float(np.sum((r[steps + 1] - r[steps]) * p[steps + 1]))


def mean_ap(per_class: dict[int, float | None]) -> float:
    defined = [v for v in per_class.values() if v is not None]
    if not defined:
        raise DataError("no class has a defined AP")
    return float(np.mean(defined))


def evaluate_detector(model, dataset: Dataset, iou_threshold: float = 0.5,
                      score_threshold: float = 0.05, nms_iou: float = 0.5,
                      which: str = "") -> EvalResult:
    """Run inference over a dataset and compute per-class AP and mAP."""
    from .data import dataset_fingerprint

    detections: list[tuple[int, Detection]] = []
    ground_truth: list[tuple[int, BoundingBox, int]] = []
    for img_id, img in enumerate(dataset.items):
        for det in model.detect(img.pixels, score_threshold, nms_iou):
            detections.append((img_id, det))
        for box, c in img.annotations:
            ground_truth.append((img_id, box, c))
    classes = sorted({c for _, _, c in ground_truth} | set(range(model.arch.num_classes)))
    per_class = {c: average_precision(detections, ground_truth, c, iou_threshold)
                 for c in classes}
    return EvalResult(per_class=per_class, mean_ap=mean_ap(per_class),
                      num_detections=len(detections),
                      num_ground_truth=len(ground_truth),
                      split_fingerprint=dataset_fingerprint(dataset),
                      which_model=which)


def false_positive_ratio(pseudo: list[list[Detection]],
                         ground_truth: list[list[tuple[BoundingBox, int]]],
                         iou_threshold: float = 0.5) -> tuple[float, bool]:
    """(unmatched pseudo boxes) / (pseudo boxes), greedy same-class matching.

    Returns (ratio, empty_flag); an empty pseudo set yields (0.0, True).
    """
    total = 0
    unmatched = 0
    for dets, gts in zip(pseudo, ground_truth):
        total += len(dets)
        taken = [False] * len(gts)
        for det in sorted(dets, key=lambda d: -d.score):
            best_iou, best_j = 0.0, -1
            for j, (gbox, gcls) in enumerate(gts):
                if taken[j] or gcls != det.label:
                    continue
                iou = box_iou(det.box, gbox)
                if iou > best_iou:
                    best_iou, best_j = iou, j
            if best_j >= 0 and best_iou >= iou_threshold:
                taken[best_j] = True
            else:
                unmatched += 1
    if total == 0:
        return 0.0, True
    return unmatched / total, False


@dataclass
class AblationReport:
    rows: dict[str, EvalResult] = field(default_factory=dict)
    curves: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)
    failures: dict[str, str] = field(default_factory=dict)
    split_fingerprint: str = ""


def extract_curves(metrics_records: list[dict],
                   eval_records: list[dict] | None = None) -> dict[str, np.ndarray]:
    """Turn log records into aligned named series.

    Loss series reproduce the logged values exactly; the eval series (one
    entry per periodic-eval hook) is appended when eval records are given.
    """
    if not metrics_records:
        return {}
    keys = ("iteration", "rpn_cls", "rpn_reg", "roi_cls", "roi_reg",
            "l_sup", "l_unsup", "l_dis", "total", "pseudo_count")
    series = {}
    for k in keys:
        try:
            series[k] = np.array([rec[k] for rec in metrics_records], dtype=float)
        except KeyError as exc:
            idx = next(i for i, rec in enumerate(metrics_records) if k not in rec)
            raise DataError(f"metrics record {idx} missing field {k}") from exc
    fp = [rec.get("pseudo_fp_ratio") for rec in metrics_records]
    if any(v is not None for v in fp):
        series["pseudo_fp_ratio"] = np.array(
            [np.nan if v is None else v for v in fp], dtype=float)
    if eval_records:
        series["eval_iteration"] = np.array(
            [rec["iteration"] for rec in eval_records], dtype=float)
        series["eval_map"] = np.array(
            [rec["mean_ap"] for rec in eval_records], dtype=float)
    return series

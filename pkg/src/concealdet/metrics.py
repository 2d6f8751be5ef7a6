"""Detection evaluation: greedy matching, precision/recall/F1, interpolated AP.

Matching follows the standard protocol: detections in descending score order
each claim the highest-IoU unmatched ground-truth box; a claim counts as a
true positive only when the IoU clears the threshold, and duplicates are
false positives. AP uses all-point interpolation of the precision envelope.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .data import BoundingBox
from .decode import Detection

DEFAULT_IOU_THRESHOLD = 0.5


@dataclass(frozen=True)
class EvalResult:
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float
    ap: float
    iou_threshold: float

    def to_dict(self) -> dict:
        return {
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "ap": self.ap,
            "iou_threshold": self.iou_threshold,
        }

    @staticmethod
    def from_dict(doc: dict) -> "EvalResult":
        return EvalResult(**doc)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True, indent=1))


def _prf(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return precision, recall, f1


def match_detections(
    detections: list[Detection],
    gt: list[BoundingBox],
    iou_threshold: float = DEFAULT_IOU_THRESHOLD,
) -> tuple[list[bool], int]:
    """Per-detection TP flags plus the count of unmatched ground-truth boxes.

    ``detections`` must already be sorted by descending score.
    """
    scores = [d.score for d in detections]
    if scores != sorted(scores, reverse=True):
        raise ValueError("detections must be sorted by descending score")
    matched = [False] * len(gt)
    flags = []
    for det in detections:
        best_iou = 0.0
        best_idx = -1
        for idx, box in enumerate(gt):
            if matched[idx]:
                continue
            iou = det.box.iou(box)
            if iou > best_iou:
                best_iou = iou
                best_idx = idx
        if best_idx >= 0 and best_iou >= iou_threshold:
            matched[best_idx] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags, matched.count(False)


def _ordered_flags(
    detections: dict[str, list[Detection]],
    gt: dict[str, list[BoundingBox]],
    iou_threshold: float,
) -> tuple[list[bool], int]:
    """Dataset-wide TP flags in (score desc, image id, index) order."""
    pool = []
    for image_id, dets in detections.items():
        for idx, det in enumerate(dets):
            pool.append((-det.score, image_id, idx, det))
    pool.sort(key=lambda rec: rec[:3])
    consumed: dict[str, list[bool]] = {i: [False] * len(b) for i, b in gt.items()}
    flags = []
    for _, image_id, _, det in pool:
        boxes = gt.get(image_id, [])
        taken = consumed.setdefault(image_id, [False] * len(boxes))
        best_iou = 0.0
        best_idx = -1
        for idx, box in enumerate(boxes):
            if taken[idx]:
                continue
            iou = det.box.iou(box)
            if iou > best_iou:
                best_iou = iou
                best_idx = idx
        if best_idx >= 0 and best_iou >= iou_threshold:
            taken[best_idx] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags, sum(len(b) for b in gt.values())


def precision_recall_curve(
    detections: dict[str, list[Detection]],
    gt: dict[str, list[BoundingBox]],
    iou_threshold: float = DEFAULT_IOU_THRESHOLD,
) -> tuple[list[float], list[float]]:
    """Cumulative (recalls, precisions) along descending detection score.

    Raises when there is no ground truth at all (the curve is undefined then).
    """
    flags, n_gt = _ordered_flags(detections, gt, iou_threshold)
    if n_gt == 0:
        raise ValueError("curve undefined: dataset contains no ground-truth boxes")
    recalls = []
    precisions = []
    tp = 0
    for k, flag in enumerate(flags, start=1):
        tp += int(flag)
        recalls.append(tp / n_gt)
        precisions.append(tp / k)
    return recalls, precisions


def average_precision(
    detections: dict[str, list[Detection]],
    gt: dict[str, list[BoundingBox]],
    iou_threshold: float = DEFAULT_IOU_THRESHOLD,
) -> float:
    """All-point interpolated AP over the whole dataset."""
    recalls, precisions = precision_recall_curve(detections, gt, iou_threshold)
    mrec = [0.0, *recalls, 1.0]
    mpre = [0.0, *precisions, 0.0]
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    ap = 0.0
    for i in range(len(mrec) - 1):
        if mrec[i + 1] != mrec[i]:
            ap += (mrec[i + 1] - mrec[i]) * mpre[i + 1]
    return ap


def evaluate(
    detections: dict[str, list[Detection]],
    gt: dict[str, list[BoundingBox]],
    iou_threshold: float = DEFAULT_IOU_THRESHOLD,
    score_threshold: float | None = None,
) -> EvalResult:
    """Aggregate P/R/F1 at a score threshold plus AP over all detections.

    When ``score_threshold`` is given, the confusion counts consider only
    detections at or above it; AP always uses every detection provided.
    """
    missing = set(detections) - set(gt)
    if missing:
        raise ValueError(f"detections reference unknown image ids: {sorted(missing)}")
    tp = fp = fn = 0
    for image_id in sorted(gt):
        dets = sorted(detections.get(image_id, []), key=lambda d: -d.score)
        if score_threshold is not None:
            dets = [d for d in dets if d.score >= score_threshold]
        flags, unmatched = match_detections(dets, gt[image_id], iou_threshold)
        tp += sum(flags)
        fp += len(flags) - sum(flags)
        fn += unmatched
    precision, recall, f1 = _prf(tp, fp, fn)
    ap = average_precision(detections, gt, iou_threshold)
    return EvalResult(tp, fp, fn, precision, recall, f1, ap, iou_threshold)

"""IoU-guided sample re-weighting: mining between the two training stages.

Each training image gets a quality score ``s`` (its inference IoU) and an
importance weight ``alpha = max(1 - s, weight_floor)`` that scales its stage-2
detection loss, so poorly detected images dominate fine-tuning.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.stats import spearmanr

from .data import AugmentConfig, BoundingBox, ImageSample, normalize_pixels, resize_sample
from .decode import DEFAULT_SCORE_THRESHOLD, DEFAULT_TOP_K, Detection, decode_boxes
from .model import Detector, load_checkpoint


@dataclass
class WeightTable:
    """Per-image (s, alpha) records, persisted as human-readable JSON."""

    entries: dict[str, tuple[float, float]] = field(default_factory=dict)
    weight_floor: float = 0.0

    def __contains__(self, image_id: str) -> bool:
        return image_id in self.entries

    def alpha(self, image_id: str) -> float:
        if image_id not in self.entries:
            raise KeyError(f"no mined weight for image {image_id!r}")
        return self.entries[image_id][1]

    def score(self, image_id: str) -> float:
        if image_id not in self.entries:
            raise KeyError(f"no mined weight for image {image_id!r}")
        return self.entries[image_id][0]

    @property
    def mean_alpha(self) -> float:
        if not self.entries:
            return 0.0
        return float(np.mean([a for _, a in self.entries.values()]))

    def require_cover(self, image_ids) -> None:
        missing = sorted(set(image_ids) - set(self.entries))
        if missing:
            raise KeyError(f"weight table missing ids: {missing}")

    def save(self, path: str | Path) -> None:
        doc = {
            "weight_floor": self.weight_floor,
            "entries": {
                image_id: {"s": s, "alpha": a}
                for image_id, (s, a) in sorted(self.entries.items())
            },
        }
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(doc, sort_keys=True, indent=1))

    @staticmethod
    def load(path: str | Path) -> "WeightTable":
        doc = json.loads(Path(path).read_text())
        table = WeightTable(weight_floor=float(doc.get("weight_floor", 0.0)))
        for image_id, rec in doc["entries"].items():
            table.entries[image_id] = (float(rec["s"]), float(rec["alpha"]))
        return table


def image_iou_score(detections: list[Detection], gt: list[BoundingBox]) -> float:
    """Mean matched IoU over ground-truth boxes (greedy, score-ordered).

    Images with no ground truth score 1 when clean and 0 when any detection
    fires, so clean negatives are not re-weighted upward.
    """
    if not gt:
        return 1.0 if not detections else 0.0
    matched = [False] * len(gt)
    total = 0.0
    for det in sorted(detections, key=lambda d: -d.score):
        best_iou = 0.0
        best_idx = -1
        for idx, box in enumerate(gt):
            if matched[idx]:
                continue
            iou = det.box.iou(box)
            if iou > best_iou:
                best_iou = iou
                best_idx = idx
        if best_idx >= 0:
            matched[best_idx] = True
            total += best_iou
    return total / len(gt)


def sample_weight(s: float, weight_floor: float = 0.0) -> float:
    return max(1.0 - s, weight_floor)


def mine_weights(
    model: Detector | str | Path,
    train_set: list[ImageSample],
    image_size: int,
    augment_cfg: AugmentConfig | None = None,
    score_threshold: float = DEFAULT_SCORE_THRESHOLD,
    top_k: int = DEFAULT_TOP_K,
    weight_floor: float = 0.0,
) -> WeightTable:
    """Score every training image with frozen weights; no augmentation.

    Accepts a live model or a checkpoint path. Images are resized to the
    training resolution and normalized with the training statistics only.
    """
    if not train_set:
        raise ValueError("cannot mine weights from an empty training set")
    if not isinstance(model, Detector):
        model, _ = load_checkpoint(model)
    cfg = augment_cfg or AugmentConfig(out_size=image_size)
    model.eval()
    table = WeightTable(weight_floor=weight_floor)
    with torch.no_grad():
        for sample in train_set:
            resized, sx, sy = resize_sample(sample, image_size)
            pixels = normalize_pixels(resized.pixels, cfg.mean, cfg.std)
            image = torch.from_numpy(pixels.transpose(2, 0, 1).copy()).unsqueeze(0)
            outputs = model(image)
            detections = decode_boxes(
                outputs, (image_size, image_size), top_k, score_threshold
            )
            s = image_iou_score(detections, resized.boxes)
            table.entries[sample.id] = (s, sample_weight(s, weight_floor))
    return table


@dataclass
class ScatterData:
    """(iou, loss) pairs with their Spearman rank correlation."""

    image_ids: list[str]
    ious: list[float]
    losses: list[float]
    spearman: float


def iou_loss_scatter(table: WeightTable, losses: dict[str, float]) -> ScatterData:
    """Join mined IoU scores with per-image losses for the mining diagnostic."""
    missing = sorted(set(table.entries) ^ set(losses))
    if missing:
        raise ValueError(f"iou/loss id mismatch: {missing}")
    ids = sorted(table.entries)
    ious = [table.entries[i][0] for i in ids]
    vals = [losses[i] for i in ids]
    if len(ids) < 2 or len(set(ious)) == 1 or len(set(vals)) == 1:
        rho = 0.0
    else:
        rho = float(spearmanr(ious, vals).statistic)
    return ScatterData(ids, ious, vals, rho)


def abnormal_fraction(scatter: ScatterData, high_iou: float = 0.7,
                      low_iou: float = 0.3) -> float:
    """Fraction of samples that are well-detected yet high-loss, or poorly
    detected yet low-loss (the off-diagonal mass the mining stage should shrink)."""
    n = len(scatter.ious)
    if n == 0:
        return 0.0
    losses = np.asarray(scatter.losses)
    q75 = float(np.quantile(losses, 0.75))
    q25 = float(np.quantile(losses, 0.25))
    abnormal = 0
    for iou, loss in zip(scatter.ious, scatter.losses):
        if iou > high_iou and loss >= q75:
            abnormal += 1
        elif iou < low_iou and loss <= q25:
            abnormal += 1
    return abnormal / n

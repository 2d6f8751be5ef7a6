"""Turn head outputs into scored boxes; JSON-lines prediction IO.

Peak picking happens on the ensembled heatmap (arithmetic mean of every
intermediate plus the main heatmap). External box coordinates are always
``(x1, y1, x2, y2)`` with x = column; heatmap cells are ``(row, col)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import torch

from .data import BoundingBox
from .model import HeadOutputs
from .targets import STRIDE

DEFAULT_TOP_K = 10
DEFAULT_SCORE_THRESHOLD = 0.3


@dataclass(frozen=True)
class Detection:
    box: BoundingBox
    score: float

    def __post_init__(self) -> None:
        if not (0.0 < self.score < 1.0):
            raise ValueError(f"score {self.score} outside (0, 1)")


def ensemble_heatmap(outputs: HeadOutputs) -> torch.Tensor:
    """Arithmetic mean of intermediate and main heatmaps, shape (B, 1, Hs, Ws)."""
    return torch.stack(outputs.all_heatmaps).mean(dim=0)


def find_peaks(heatmap: torch.Tensor) -> list[tuple[int, int, float]]:
    """Cells that are 3x3-neighborhood maxima, as (row, col, value).

    A cell loses a tie when any equal-valued neighbor precedes it in (row,
    col) lexicographic order, so every flat plateau yields exactly one peak.
    """
    if heatmap.dim() != 2:
        raise ValueError(f"expected (Hs, Ws) heatmap, got {tuple(heatmap.shape)}")
    h = heatmap.detach()
    pooled = torch.nn.functional.max_pool2d(
        h[None, None], kernel_size=3, stride=1, padding=1
    )[0, 0]
    is_max = h == pooled
    values = h.tolist()
    hs, ws = h.shape
    peaks = []
    earlier = ((-1, -1), (-1, 0), (-1, 1), (0, -1))
    for row in range(hs):
        for col in range(ws):
            if not is_max[row, col]:
                continue
            v = values[row][col]
            tied_earlier = any(
                0 <= row + dr < hs and 0 <= col + dc < ws
                and values[row + dr][col + dc] == v
                for dr, dc in earlier
            )
            if not tied_earlier:
                peaks.append((row, col, v))
    return peaks


def decode_boxes(
    outputs: HeadOutputs,
    image_size: tuple[int, int],
    top_k: int = DEFAULT_TOP_K,
    score_threshold: float = DEFAULT_SCORE_THRESHOLD,
) -> list[Detection]:
    """Decode one sample: peak cells -> boxes via offset/size regressions.

    Centers are ``stride * (cell + offset)``; sizes ``stride * size``. Boxes
    are clipped to the image; no NMS beyond the 3x3 peak rule. The result is
    sorted by descending score (ties by cell order) and capped at ``top_k``.
    """
    if outputs.batch_size != 1:
        raise ValueError("decode_boxes handles one sample; use decode_batch")
    img_h, img_w = image_size
    heat = ensemble_heatmap(outputs)[0, 0]
    offset = outputs.offset_pred[0].detach()
    size = outputs.size_pred[0].detach()
    peaks = find_peaks(heat)
    peaks.sort(key=lambda p: (-p[2], p[0], p[1]))
    kept = [p for p in peaks if p[2] >= score_threshold][:top_k]
    detections = []
    for row, col, score in kept:
        center_row = STRIDE * (row + float(offset[0, row, col]))
        center_col = STRIDE * (col + float(offset[1, row, col]))
        w = STRIDE * float(size[0, row, col])
        h = STRIDE * float(size[1, row, col])
        raw = BoundingBox(center_col - w / 2, center_row - h / 2,
                          center_col + w / 2, center_row + h / 2)
        clipped = raw.clip(img_w, img_h)
        if clipped is None:
            continue
        detections.append(Detection(box=clipped, score=min(max(score, 1e-9), 1 - 1e-9)))
    return detections


def decode_batch(
    outputs: HeadOutputs,
    image_size: tuple[int, int],
    top_k: int = DEFAULT_TOP_K,
    score_threshold: float = DEFAULT_SCORE_THRESHOLD,
) -> list[list[Detection]]:
    return [
        decode_boxes(outputs.select(i), image_size, top_k, score_threshold)
        for i in range(outputs.batch_size)
    ]


def save_predictions(path: str | Path, predictions: dict[str, list[Detection]]) -> None:
    """One JSON document per line: {"id", "detections": [{"box", "score"}]}."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    for image_id in sorted(predictions):
        doc = {
            "id": image_id,
            "detections": [
                {"box": list(d.box.as_tuple()), "score": d.score}
                for d in predictions[image_id]
            ],
        }
        lines.append(json.dumps(doc, sort_keys=True))
    path.write_text("\n".join(lines) + ("\n" if lines else ""))


def load_predictions(path: str | Path) -> dict[str, list[Detection]]:
    predictions: dict[str, list[Detection]] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            doc = json.loads(line)
            dets = [
                Detection(box=BoundingBox(*d["box"]), score=float(d["score"]))
                for d in doc["detections"]
            ]
            predictions[doc["id"]] = dets
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"{path}:{lineno}: malformed prediction line: {exc}") from exc
    return predictions

"""Synthetic dataset generation, COCO-style annotation IO, and training-time augmentation.

Coordinate conventions used throughout the package:

* images are ``(H, W, 3)`` float arrays, row-major, pixel values in ``[0, 1]``
  for raw samples (normalized samples produced by :func:`augment` may leave
  that range);
* boxes are ``(x_lt, y_lt, x_rb, y_rb)`` with ``x`` = column and ``y`` = row,
  measured in pixels of the image they belong to.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter


class DatasetError(ValueError):
    """Raised for malformed annotation documents or invalid dataset state."""


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box ``(x_lt, y_lt, x_rb, y_rb)`` in image pixels."""

    x_lt: float
    y_lt: float
    x_rb: float
    y_rb: float

    def __post_init__(self) -> None:
        if not (self.x_lt < self.x_rb and self.y_lt < self.y_rb):
            raise ValueError(f"degenerate box {self.as_tuple()}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_lt, self.y_lt, self.x_rb, self.y_rb)

    @property
    def width(self) -> float:
        return self.x_rb - self.x_lt

    @property
    def height(self) -> float:
        return self.y_rb - self.y_lt

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return ((self.x_lt + self.x_rb) / 2.0, (self.y_lt + self.y_rb) / 2.0)

    def clip(self, width: float, height: float) -> "BoundingBox | None":
        """Intersect with ``[0, width] x [0, height]``; None if empty."""
        x1 = max(self.x_lt, 0.0)
        y1 = max(self.y_lt, 0.0)
        x2 = min(self.x_rb, float(width))
        y2 = min(self.y_rb, float(height))
        if x1 >= x2 or y1 >= y2:
            return None
        return BoundingBox(x1, y1, x2, y2)

    def iou(self, other: "BoundingBox") -> float:
        ix1 = max(self.x_lt, other.x_lt)
        iy1 = max(self.y_lt, other.y_lt)
        ix2 = min(self.x_rb, other.x_rb)
        iy2 = min(self.y_rb, other.y_rb)
        if ix1 >= ix2 or iy1 >= iy2:
            return 0.0
        inter = (ix2 - ix1) * (iy2 - iy1)
        return inter / (self.area + other.area - inter)


@dataclass
class ImageSample:
    """One image with its ground-truth boxes (possibly none)."""

    id: str
    pixels: np.ndarray  # (H, W, 3) float32
    boxes: list[BoundingBox] = field(default_factory=list)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def validate(self) -> None:
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError(f"{self.id}: pixels must be (H, W, 3)")
        if self.height <= 0 or self.width <= 0:
            raise ValueError(f"{self.id}: empty image")
        for box in self.boxes:
            if box.clip(self.width, self.height) is None:
                raise ValueError(f"{self.id}: box {box.as_tuple()} outside image")


@dataclass(frozen=True)
class SynthConfig:
    """Controls the deterministic synthetic dataset generator.

    ``size_distribution`` entries are ``((lo, hi), prob)`` where ``(lo, hi)``
    is a range of box-area-over-image-area fractions. Defaults put 65% of the
    blobs below 1% of the image area, so small targets dominate.
    """

    image_size: int = 128
    n_train: int = 64
    n_test: int = 16
    size_distribution: tuple[tuple[tuple[float, float], float], ...] = (
        ((0.002, 0.01), 0.65),
        ((0.01, 0.05), 0.25),
        ((0.05, 0.15), 0.10),
    )
    contrast_range: tuple[float, float] = (0.18, 0.42)
    texture_seed: int = 0
    negative_rate: float = 0.2
    max_blobs: int = 3

    def __post_init__(self) -> None:
        if self.image_size <= 0 or self.image_size % 4 != 0:
            raise ValueError("image_size must be positive and divisible by 4")
        if self.n_train < 0 or self.n_test < 0:
            raise ValueError("sample counts must be non-negative")
        total = sum(p for _, p in self.size_distribution)
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"size_distribution probabilities sum to {total}, not 1")
        for (lo, hi), _ in self.size_distribution:
            if not (0.0 < lo < hi <= 1.0):
                raise ValueError(f"bad size fraction range ({lo}, {hi})")
        lo, hi = self.contrast_range
        if not (0.0 < lo <= hi <= 1.0):
            raise ValueError("contrast_range must lie within (0, 1]")
        if not (0.0 <= self.negative_rate < 1.0):
            raise ValueError("negative_rate must be in [0, 1)")

    def to_dict(self) -> dict:
        return {
            "image_size": self.image_size,
            "n_train": self.n_train,
            "n_test": self.n_test,
            "size_distribution": [[list(rng), p] for rng, p in self.size_distribution],
            "contrast_range": list(self.contrast_range),
            "texture_seed": self.texture_seed,
            "negative_rate": self.negative_rate,
            "max_blobs": self.max_blobs,
        }

    @staticmethod
    def from_dict(doc: dict) -> "SynthConfig":
        kwargs = dict(doc)
        if "size_distribution" in kwargs:
            kwargs["size_distribution"] = tuple(
                ((float(rng[0]), float(rng[1])), float(p))
                for rng, p in kwargs["size_distribution"]
            )
        if "contrast_range" in kwargs:
            kwargs["contrast_range"] = tuple(kwargs["contrast_range"])
        return SynthConfig(**kwargs)


def _smooth_noise(rng: np.random.Generator, h: int, w: int, sigma: float) -> np.ndarray:
    noise = gaussian_filter(rng.standard_normal((h, w)), sigma=sigma, mode="reflect")
    std = noise.std()
    if std < 1e-12:
        return np.zeros((h, w))
    return (noise - noise.mean()) / std


def _background(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    size = cfg.image_size
    coarse = _smooth_noise(rng, size, size, sigma=size / 16)
    fine = _smooth_noise(rng, size, size, sigma=2.0)
    base = 0.5 + 0.10 * coarse + 0.04 * fine
    channels = [base + 0.03 * _smooth_noise(rng, size, size, sigma=size / 8) for _ in range(3)]
    img = np.stack(channels, axis=-1)
    return np.clip(img, 0.05, 0.95)


def ellipse_tight_box(cx: float, cy: float, a: float, b: float, theta: float) -> BoundingBox:
    """Tight axis-aligned box of an ellipse with semi-axes (a, b) rotated by theta."""
    hw = math.sqrt((a * math.cos(theta)) ** 2 + (b * math.sin(theta)) ** 2)
    hh = math.sqrt((a * math.sin(theta)) ** 2 + (b * math.cos(theta)) ** 2)
    return BoundingBox(cx - hw, cy - hh, cx + hw, cy + hh)


def _sample_blob_geometry(
    cfg: SynthConfig, rng: np.random.Generator, existing: list[BoundingBox]
) -> tuple[float, float, float, float, float, BoundingBox] | None:
    """One ellipse (cx, cy, a, b, theta) with a tight box that fits the canvas.

    The size distribution governs the tight-box area fraction, and the box must
    keep a small margin from the border and from already-placed blobs.
    """
    size = cfg.image_size
    ranges = [rng_ for rng_, _ in cfg.size_distribution]
    probs = np.array([p for _, p in cfg.size_distribution])
    for _ in range(40):
        lo, hi = ranges[rng.choice(len(ranges), p=probs)]
        frac = math.exp(rng.uniform(math.log(lo), math.log(hi)))
        aspect = math.exp(rng.uniform(-math.log(2.0), math.log(2.0)))
        theta = rng.uniform(0.0, math.pi)
        # unit-area ellipse, then scale so the tight box covers frac of the canvas
        a0 = math.sqrt(aspect / math.pi)
        b0 = math.sqrt(1.0 / (math.pi * aspect))
        hw0 = math.sqrt((a0 * math.cos(theta)) ** 2 + (b0 * math.sin(theta)) ** 2)
        hh0 = math.sqrt((a0 * math.sin(theta)) ** 2 + (b0 * math.cos(theta)) ** 2)
        scale = math.sqrt(frac * size * size / (4.0 * hw0 * hh0))
        a, b, hw, hh = a0 * scale, b0 * scale, hw0 * scale, hh0 * scale
        margin = 2.0
        if 2 * hw >= size - 2 * margin or 2 * hh >= size - 2 * margin:
            continue
        cx = rng.uniform(hw + margin, size - hw - margin)
        cy = rng.uniform(hh + margin, size - hh - margin)
        box = ellipse_tight_box(cx, cy, a, b, theta)
        gap = 8.0
        padded = BoundingBox(box.x_lt - gap, box.y_lt - gap, box.x_rb + gap, box.y_rb + gap)
        if any(padded.iou(other) > 0.0 for other in existing):
            continue
        if any(
            max(abs(box.center[0] - o.center[0]), abs(box.center[1] - o.center[1])) < 16.0
            for o in existing
        ):
            continue
        return cx, cy, a, b, theta, box
    return None


def _render_blob(
    pixels: np.ndarray,
    cfg: SynthConfig,
    rng: np.random.Generator,
    cx: float,
    cy: float,
    a: float,
    b: float,
    theta: float,
) -> None:
    size = cfg.image_size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dx = xx + 0.5 - cx
    dy = yy + 0.5 - cy
    xr = dx * math.cos(theta) + dy * math.sin(theta)
    yr = -dx * math.sin(theta) + dy * math.cos(theta)
    d = (xr / a) ** 2 + (yr / b) ** 2
    alpha = np.clip(1.0 - d, 0.0, 1.0) ** 0.6
    sign = 1.0 if rng.random() < 0.5 else -1.0
    contrast = rng.uniform(*cfg.contrast_range)
    tint = 1.0 + 0.15 * rng.standard_normal(3)
    texture = 0.05 * _smooth_noise(rng, size, size, sigma=1.5)
    delta = (sign * contrast * alpha + texture * alpha)[:, :, None] * tint[None, None, :]
    np.clip(pixels + delta, 0.0, 1.0, out=pixels)


def _make_sample(sample_id: str, cfg: SynthConfig, rng: np.random.Generator) -> ImageSample:
    pixels = _background(cfg, rng)
    boxes: list[BoundingBox] = []
    if rng.random() >= cfg.negative_rate:
        n_blobs = int(rng.integers(1, cfg.max_blobs + 1))
        for _ in range(n_blobs):
            geom = _sample_blob_geometry(cfg, rng, boxes)
            if geom is None:
                continue
            cx, cy, a, b, theta, box = geom
            _render_blob(pixels, cfg, rng, cx, cy, a, b, theta)
            boxes.append(box)
    # snap to the 8-bit grid so a PNG round trip reproduces pixels bitwise
    quantized = np.clip(np.rint(pixels * 255.0), 0, 255).astype(np.uint8)
    return ImageSample(
        id=sample_id, pixels=quantized.astype(np.float32) / 255.0, boxes=boxes
    )


def generate_synthetic(cfg: SynthConfig) -> tuple[list[ImageSample], list[ImageSample]]:
    """Deterministic (train, test) split of procedurally generated samples."""
    rng = np.random.default_rng(cfg.texture_seed)
    train = [_make_sample(f"train_{i:04d}", cfg, rng) for i in range(cfg.n_train)]
    test = [_make_sample(f"test_{i:04d}", cfg, rng) for i in range(cfg.n_test)]
    return train, test


# ---------------------------------------------------------------------------
# COCO-style annotation IO
# ---------------------------------------------------------------------------

def save_coco(
    samples: Sequence[ImageSample],
    annotation_path: str | Path,
    image_root: str | Path,
    write_images: bool = True,
) -> None:
    """Write samples as a COCO detection document plus lossless PNG images.

    ``file_name`` is ``images/<sample.id>.png`` relative to ``image_root``;
    sample ids round-trip through the file name stem.
    """
    annotation_path = Path(annotation_path)
    image_root = Path(image_root)
    images = []
    annotations = []
    ann_id = 1
    for idx, sample in enumerate(samples):
        file_name = f"images/{sample.id}.png"
        if write_images:
            out = image_root / file_name
            out.parent.mkdir(parents=True, exist_ok=True)
            arr = np.clip(np.rint(sample.pixels * 255.0), 0, 255).astype(np.uint8)
            Image.fromarray(arr).save(out, format="PNG")
        images.append(
            {
                "id": idx + 1,
                "file_name": file_name,
                "width": sample.width,
                "height": sample.height,
            }
        )
        for box in sample.boxes:
            annotations.append(
                {
                    "id": ann_id,
                    "image_id": idx + 1,
                    "bbox": [box.x_lt, box.y_lt, box.width, box.height],
                    "area": box.area,
                    "category_id": 1,
                    "iscrowd": 0,
                }
            )
            ann_id += 1
    doc = {
        "images": images,
        "annotations": annotations,
        "categories": [{"id": 1, "name": "target"}],
    }
    annotation_path.parent.mkdir(parents=True, exist_ok=True)
    annotation_path.write_text(json.dumps(doc, indent=1, sort_keys=True))


def load_coco(annotation_path: str | Path, image_root: str | Path) -> list[ImageSample]:
    """Load a COCO detection document into samples (single-class, xyxy boxes).

    Category ids are discarded. Images listed without annotations are kept
    with an empty box list.
    """
    annotation_path = Path(annotation_path)
    image_root = Path(image_root)
    try:
        doc = json.loads(annotation_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetError(f"cannot parse {annotation_path}: {exc}") from exc
    if not isinstance(doc, dict) or "images" not in doc:
        raise DatasetError(f"{annotation_path}: not a COCO detection document")

    boxes_by_image: dict[int, list[BoundingBox]] = {}
    for record in doc.get("annotations", []):
        try:
            image_id = record["image_id"]
            x, y, w, h = (float(v) for v in record["bbox"])
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"malformed annotation record {record!r}") from exc
        if w <= 0 or h <= 0:
            raise DatasetError(f"non-positive bbox in annotation record {record!r}")
        boxes_by_image.setdefault(image_id, []).append(BoundingBox(x, y, x + w, y + h))

    samples = []
    for record in doc["images"]:
        try:
            image_id = record["id"]
            file_name = record["file_name"]
        except (KeyError, TypeError) as exc:
            raise DatasetError(f"malformed image record {record!r}") from exc
        path = image_root / file_name
        if not path.exists():
            raise DatasetError(f"missing image file {path}")
        pixels = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
        sample = ImageSample(
            id=Path(file_name).stem,
            pixels=pixels,
            boxes=boxes_by_image.get(image_id, []),
        )
        sample.validate()
        samples.append(sample)
    return samples


def save_dataset(
    cfg: SynthConfig,
    train: Sequence[ImageSample],
    test: Sequence[ImageSample],
    out_dir: str | Path,
) -> None:
    """Persist a generated dataset: PNGs, two COCO files, and a manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_coco(train, out_dir / "train.json", out_dir)
    save_coco(test, out_dir / "test.json", out_dir)
    manifest = {
        "config": cfg.to_dict(),
        "n_train": len(train),
        "n_test": len(test),
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AugmentConfig:
    out_size: int = 128
    scale_range: tuple[float, float] = (0.6, 1.0)
    rotate: bool = True  # right-angle rotations only, so boxes stay axis-tight
    hflip: bool = True
    vflip: bool = True
    mean: tuple[float, float, float] = (0.5, 0.5, 0.5)
    std: tuple[float, float, float] = (0.25, 0.25, 0.25)
    min_visible_frac: float = 0.25
    max_crop_retries: int = 10
    normalize: bool = True


@dataclass(frozen=True)
class GeomTransform:
    """Crop -> scale -> quarter-rotation -> flips, on box/point coordinates."""

    crop_x: int
    crop_y: int
    crop_size: int
    out_size: int
    quarter_turns: int  # counter-clockwise image rotations (np.rot90 steps)
    hflip: bool
    vflip: bool

    @property
    def scale(self) -> float:
        return self.out_size / self.crop_size

    def apply_point(self, x: float, y: float) -> tuple[float, float]:
        s = self.out_size
        x = (x - self.crop_x) * self.scale
        y = (y - self.crop_y) * self.scale
        for _ in range(self.quarter_turns % 4):
            x, y = y, s - x  # np.rot90 (counter-clockwise) on image coords
        if self.hflip:
            x = s - x
        if self.vflip:
            y = s - y
        return x, y

    def invert_point(self, x: float, y: float) -> tuple[float, float]:
        s = self.out_size
        if self.vflip:
            y = s - y
        if self.hflip:
            x = s - x
        for _ in range(self.quarter_turns % 4):
            x, y = s - y, x
        return x / self.scale + self.crop_x, y / self.scale + self.crop_y

    def apply_box(self, box: BoundingBox) -> BoundingBox:
        xs, ys = zip(*(self.apply_point(x, y) for x, y in
                       [(box.x_lt, box.y_lt), (box.x_rb, box.y_rb)]))
        return BoundingBox(min(xs), min(ys), max(xs), max(ys))

    def invert_box(self, box: BoundingBox) -> BoundingBox:
        xs, ys = zip(*(self.invert_point(x, y) for x, y in
                       [(box.x_lt, box.y_lt), (box.x_rb, box.y_rb)]))
        return BoundingBox(min(xs), min(ys), max(xs), max(ys))


def _resize_bilinear(pixels: np.ndarray, out_size: int) -> np.ndarray:
    import torch
    import torch.nn.functional as tf

    t = torch.from_numpy(np.ascontiguousarray(pixels.transpose(2, 0, 1)))[None]
    out = tf.interpolate(t, size=(out_size, out_size), mode="bilinear", align_corners=False)
    return out[0].numpy().transpose(1, 2, 0)


def _visible_part(box: BoundingBox, tf: GeomTransform) -> BoundingBox | None:
    x1 = max(box.x_lt, float(tf.crop_x))
    y1 = max(box.y_lt, float(tf.crop_y))
    x2 = min(box.x_rb, float(tf.crop_x + tf.crop_size))
    y2 = min(box.y_rb, float(tf.crop_y + tf.crop_size))
    if x1 >= x2 or y1 >= y2:
        return None
    return BoundingBox(x1, y1, x2, y2)


def _transform_boxes(
    boxes: Iterable[BoundingBox], tf: GeomTransform, min_visible_frac: float
) -> list[BoundingBox]:
    kept = []
    for box in boxes:
        visible = _visible_part(box, tf)
        if visible is None or visible.area < min_visible_frac * box.area:
            continue
        kept.append(tf.apply_box(visible))
    return kept


def augment_with_transform(
    sample: ImageSample, rng_seed: int, cfg: AugmentConfig | None = None
) -> tuple[ImageSample, GeomTransform]:
    """Random crop/resize/rotate/flip plus normalization; returns the transform.

    Crops that would drop every box of a positive sample are re-drawn up to
    ``max_crop_retries`` times, then a plain center crop is used.
    """
    cfg = cfg or AugmentConfig()
    rng = np.random.default_rng(rng_seed)
    h, w = sample.pixels.shape[:2]
    base = min(h, w)

    chosen: GeomTransform | None = None
    min_frac = cfg.min_visible_frac
    for _ in range(cfg.max_crop_retries):
        size = int(round(base * rng.uniform(*cfg.scale_range)))
        size = min(base, max(8, size))
        cx = int(rng.integers(0, w - size + 1))
        cy = int(rng.integers(0, h - size + 1))
        quarter = int(rng.integers(0, 4)) if cfg.rotate else 0
        hflip = bool(rng.random() < 0.5) if cfg.hflip else False
        vflip = bool(rng.random() < 0.5) if cfg.vflip else False
        tf = GeomTransform(cx, cy, size, cfg.out_size, quarter, hflip, vflip)
        if sample.boxes and not _transform_boxes(sample.boxes, tf, min_frac):
            continue
        chosen = tf
        break
    if chosen is None:
        # every retry dropped all boxes: fall back to a center crop and keep
        # every box with any visible area
        chosen = GeomTransform(
            (w - base) // 2, (h - base) // 2, base, cfg.out_size, 0, False, False
        )
        min_frac = 0.0

    crop = sample.pixels[
        chosen.crop_y : chosen.crop_y + chosen.crop_size,
        chosen.crop_x : chosen.crop_x + chosen.crop_size,
    ]
    pixels = _resize_bilinear(crop.astype(np.float32), cfg.out_size)
    pixels = np.rot90(pixels, k=chosen.quarter_turns, axes=(0, 1))
    if chosen.hflip:
        pixels = pixels[:, ::-1]
    if chosen.vflip:
        pixels = pixels[::-1, :]
    pixels = np.ascontiguousarray(pixels, dtype=np.float32)
    if cfg.normalize:
        pixels = normalize_pixels(pixels, cfg.mean, cfg.std)

    boxes = _transform_boxes(sample.boxes, chosen, min_frac)
    return ImageSample(id=sample.id, pixels=pixels, boxes=boxes), chosen


def augment(sample: ImageSample, rng_seed: int, cfg: AugmentConfig | None = None) -> ImageSample:
    return augment_with_transform(sample, rng_seed, cfg)[0]


def normalize_pixels(
    pixels: np.ndarray,
    mean: tuple[float, float, float] = (0.5, 0.5, 0.5),
    std: tuple[float, float, float] = (0.25, 0.25, 0.25),
) -> np.ndarray:
    return ((pixels - np.asarray(mean, dtype=np.float32))
            / np.asarray(std, dtype=np.float32)).astype(np.float32)


def resize_sample(sample: ImageSample, out_size: int) -> tuple[ImageSample, float, float]:
    """Resize to a square canvas; returns (sample, sx, sy) scale factors applied."""
    h, w = sample.pixels.shape[:2]
    sx = out_size / w
    sy = out_size / h
    if (h, w) == (out_size, out_size):
        return sample, 1.0, 1.0
    pixels = _resize_bilinear(sample.pixels.astype(np.float32), out_size)
    boxes = [
        BoundingBox(b.x_lt * sx, b.y_lt * sy, b.x_rb * sx, b.y_rb * sy)
        for b in sample.boxes
    ]
    return ImageSample(id=sample.id, pixels=pixels, boxes=boxes), sx, sy

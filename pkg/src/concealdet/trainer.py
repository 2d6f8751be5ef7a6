"""Two-stage training orchestration, evaluation, and the run-directory layout.

Stage 1 trains detection plus the contrastive branch; mining then scores every
training image with the frozen stage-1 weights; stage 2 re-trains from the
stage-1 checkpoint with per-image loss weights ``alpha`` and no contrastive
term. Every random choice derives from the config seed, so a run reproduces
its checkpoints and evaluation byte-for-byte on one platform.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .bcl import build_contrastive_batch, contrastive_loss
from .data import (
    AugmentConfig,
    BoundingBox,
    ImageSample,
    SynthConfig,
    augment,
    generate_synthetic,
    normalize_pixels,
    resize_sample,
    save_dataset,
)
from .decode import decode_boxes
from .isr import WeightTable, mine_weights
from .losses import LossReport, LossWeights, total_loss
from .metrics import EvalResult, evaluate
from .model import Detector, ModelConfig, build_detector, load_checkpoint, save_checkpoint
from .targets import TargetMaps, encode_targets

SIZE_BINS = ((0.0, 0.1), (0.1, 0.2), (0.2, 0.3), (0.3, 0.4), (0.4, 1.0))

LOSS_LOG_FIELDS = (
    "stage", "epoch", "step", "lr",
    "l_hm_main", "l_hm_inter", "l_o", "l_s", "l_cl", "total",
)


class TrainingError(RuntimeError):
    """Raised when training aborts (non-finite loss, missing weights, ...)."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    stage2_epochs: int | None = None  # defaults to epochs
    batch_size: int = 8
    lr: float = 2e-3
    lr_floor: float = 0.0
    grad_clip: float = 35.0
    seed: int = 0
    image_size: int = 128
    score_threshold: float = 0.3
    top_k: int = 10
    iou_threshold: float = 0.5
    weight_floor: float = 0.0
    use_bcl: bool = True
    run_stage2: bool = True
    model: ModelConfig = field(default_factory=ModelConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self) -> None:
        if self.epochs < 1 or (self.stage2_epochs is not None and self.stage2_epochs < 1):
            raise ValueError("epochs must be at least 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        if self.lr <= 0 or self.lr_floor < 0 or self.lr_floor > self.lr:
            raise ValueError("need lr > 0 and 0 <= lr_floor <= lr")
        if self.image_size % 32:
            raise ValueError("image_size must be divisible by 32")
        if self.augment.out_size != self.image_size:
            raise ValueError("augment.out_size must equal image_size")

    def to_dict(self) -> dict:
        doc = {
            "epochs": self.epochs,
            "stage2_epochs": self.stage2_epochs,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "lr_floor": self.lr_floor,
            "grad_clip": self.grad_clip,
            "seed": self.seed,
            "image_size": self.image_size,
            "score_threshold": self.score_threshold,
            "top_k": self.top_k,
            "iou_threshold": self.iou_threshold,
            "weight_floor": self.weight_floor,
            "use_bcl": self.use_bcl,
            "run_stage2": self.run_stage2,
            "model": self.model.to_dict(),
            "weights": self.weights.to_dict(),
            "augment": asdict(self.augment),
        }
        return doc

    @staticmethod
    def from_dict(doc: dict) -> "TrainConfig":
        kwargs = dict(doc)
        if "model" in kwargs:
            kwargs["model"] = ModelConfig.from_dict(kwargs["model"])
        if "weights" in kwargs:
            kwargs["weights"] = LossWeights.from_dict(kwargs["weights"])
        if "augment" in kwargs:
            aug = dict(kwargs["augment"])
            for key in ("scale_range", "mean", "std"):
                if key in aug:
                    aug[key] = tuple(aug[key])
            kwargs["augment"] = AugmentConfig(**aug)
        return TrainConfig(**kwargs)


def desk_preset(seed: int = 0) -> TrainConfig:
    """Minutes-scale CPU training on 128 px synthetic data.

    Learning rate, cosine floor, re-weighting floor, and crop strength are
    calibrated for the 20+20 epoch budget; quarter-turn rotations hurt at
    this schedule length, and the weight floor keeps easy images
    contributing when stage-1 IoU is already high on clean data.
    """
    return TrainConfig(
        seed=seed,
        lr=1.5e-3,
        lr_floor=1.5e-4,
        weight_floor=0.3,
        augment=AugmentConfig(scale_range=(0.8, 1.0), rotate=False),
    )


def paper_preset(seed: int = 0) -> TrainConfig:
    """The published training schedule (512 px, batch 16, lr 1e-4)."""
    return TrainConfig(
        epochs=20,
        batch_size=16,
        lr=1e-4,
        seed=seed,
        image_size=512,
        model=ModelConfig(backbone_channels=(32, 64, 128, 256), fpn_channels=128),
        augment=AugmentConfig(out_size=512),
    )


def desk_synth_config(seed: int = 0) -> SynthConfig:
    return SynthConfig(image_size=128, n_train=64, n_test=16, texture_seed=seed)


def cosine_lr(step: int, total_steps: int, lr: float, lr_floor: float = 0.0) -> float:
    """Cosine annealing from ``lr`` (step 0) to exactly ``lr_floor`` (last step)."""
    if total_steps <= 1:
        return lr
    t = step / (total_steps - 1)
    return lr_floor + (lr - lr_floor) * 0.5 * (1.0 + math.cos(math.pi * t))


def _derived_seed(*entropy: int) -> int:
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])


def sample_to_tensor(
    sample: ImageSample, image_size: int, aug: AugmentConfig
) -> tuple[torch.Tensor, list[BoundingBox]]:
    """Inference-path preprocessing: resize + normalize, no augmentation."""
    resized, _, _ = resize_sample(sample, image_size)
    pixels = normalize_pixels(resized.pixels, aug.mean, aug.std)
    return torch.from_numpy(pixels.transpose(2, 0, 1).copy()), resized.boxes


def _batched_indices(n: int, batch_size: int, order: np.ndarray) -> list[list[int]]:
    return [list(order[i : i + batch_size]) for i in range(0, n, batch_size)]


@dataclass
class _Batch:
    ids: list[str]
    images: torch.Tensor
    targets: list[TargetMaps]
    boxes: list[list[BoundingBox]]


def _build_batch(
    samples: list[ImageSample], cfg: TrainConfig, epoch: int, indices: list[int]
) -> _Batch:
    ids, tensors, targets, boxes = [], [], [], []
    size = cfg.image_size
    for idx in indices:
        seed = _derived_seed(cfg.seed, epoch, 2, idx)
        aug = augment(samples[idx], seed, cfg.augment)
        tensors.append(torch.from_numpy(aug.pixels.transpose(2, 0, 1).copy()))
        targets.append(encode_targets(aug.boxes, (size, size)))
        boxes.append(aug.boxes)
        ids.append(aug.id)
    return _Batch(ids, torch.stack(tensors), targets, boxes)


def _aggregate_reports(reports: list[LossReport], l_cl: float) -> dict[str, float]:
    parts = [r.to_floats() for r in reports]
    agg = {
        key: sum(p[key] for p in parts) / len(parts)
        for key in ("l_hm_main", "l_hm_inter", "l_o", "l_s")
    }
    agg["l_cl"] = l_cl
    return agg


def _train_loop(
    model: Detector,
    cfg: TrainConfig,
    train_set: list[ImageSample],
    stage: int,
    epochs: int,
    alphas: dict[str, float] | None,
) -> list[dict]:
    """Shared optimization loop; stage 2 is signalled by ``alphas`` not None."""
    stage2 = alphas is not None
    model.train()
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    n = len(train_set)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = epochs * steps_per_epoch
    size = cfg.image_size
    log_rows: list[dict] = []
    step = 0
    for epoch in range(epochs):
        order = np.random.default_rng(_derived_seed(cfg.seed, epoch, 1)).permutation(n)
        for indices in _batched_indices(n, cfg.batch_size, order):
            lr_now = cosine_lr(step, total_steps, cfg.lr, cfg.lr_floor)
            for group in optimizer.param_groups:
                group["lr"] = lr_now
            batch = _build_batch(train_set, cfg, epoch, indices)
            outputs, fused = model.forward_with_features(batch.images)

            if stage2 or not cfg.use_bcl or cfg.weights.lambda_cl == 0.0:
                l_cl = torch.zeros((), dtype=batch.images.dtype)
            else:
                cbatch = build_contrastive_batch(
                    [fused[i] for i in range(len(indices))], batch.boxes, (size, size)
                )
                l_cl = contrastive_loss(
                    cbatch, rng_seed=_derived_seed(cfg.seed, epoch, 3, step)
                )

            reports = []
            for i, image_id in enumerate(batch.ids):
                alpha = alphas[image_id] if stage2 else 1.0
                reports.append(
                    total_loss(
                        outputs.select(i), batch.targets[i], 0.0,
                        cfg.weights, alpha_sample=alpha, stage2=stage2,
                    )
                )
            detection_total = torch.stack([r.total for r in reports]).mean()
            batch_total = detection_total
            if not stage2:
                batch_total = batch_total + cfg.weights.lambda_cl * l_cl

            if not torch.isfinite(batch_total):
                parts = _aggregate_reports(reports, float(l_cl.detach()))
                raise TrainingError(
                    f"non-finite loss at stage {stage} epoch {epoch} step {step}; "
                    f"batch ids {batch.ids}; parts {parts}"
                )

            optimizer.zero_grad()
            batch_total.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            optimizer.step()

            row = {"stage": stage, "epoch": epoch, "step": step, "lr": lr_now}
            row.update(_aggregate_reports(reports, float(l_cl.detach())))
            row["total"] = float(batch_total.detach())
            log_rows.append(row)
            step += 1
    return log_rows


def train_stage1(
    cfg: TrainConfig, train_set: list[ImageSample]
) -> tuple[Detector, list[dict]]:
    """First learning stage: detection plus contrastive objective, fresh model."""
    if not train_set:
        raise ValueError("empty training set")
    model = build_detector(cfg.model, seed=cfg.seed)
    rows = _train_loop(model, cfg, train_set, stage=1, epochs=cfg.epochs, alphas=None)
    return model, rows


def train_stage2(
    cfg: TrainConfig,
    train_set: list[ImageSample],
    weight_table: WeightTable,
    stage1_model: Detector | str | Path,
) -> tuple[Detector, list[dict]]:
    """Second learning stage: re-weighted detection-only fine-tuning."""
    if not isinstance(stage1_model, Detector):
        stage1_model, _ = load_checkpoint(stage1_model)
    weight_table.require_cover([s.id for s in train_set])
    alphas = {s.id: weight_table.alpha(s.id) for s in train_set}
    epochs = cfg.stage2_epochs if cfg.stage2_epochs is not None else cfg.epochs
    rows = _train_loop(stage1_model, cfg, train_set, stage=2, epochs=epochs, alphas=alphas)
    return stage1_model, rows


def predict_dataset(
    model: Detector,
    samples: list[ImageSample],
    cfg: TrainConfig,
    score_threshold: float = 0.0,
) -> tuple[dict, dict]:
    """Decode every sample (resize/normalize only) -> (predictions, ground truth)."""
    model.eval()
    predictions: dict[str, list] = {}
    gt: dict[str, list[BoundingBox]] = {}
    with torch.no_grad():
        for sample in samples:
            image, boxes = sample_to_tensor(sample, cfg.image_size, cfg.augment)
            outputs = model(image.unsqueeze(0))
            predictions[sample.id] = decode_boxes(
                outputs, (cfg.image_size, cfg.image_size),
                top_k=cfg.top_k, score_threshold=score_threshold,
            )
            gt[sample.id] = boxes
    return predictions, gt


def evaluate_model(
    model: Detector, test_set: list[ImageSample], cfg: TrainConfig
) -> tuple[EvalResult, dict]:
    """EvalResult on a held-out set; AP from all decoded peaks, P/R/F1 at the
    configured score threshold."""
    predictions, gt = predict_dataset(model, test_set, cfg, score_threshold=0.0)
    result = evaluate(
        predictions, gt,
        iou_threshold=cfg.iou_threshold,
        score_threshold=cfg.score_threshold,
    )
    return result, predictions


def evaluate_by_size(
    model: Detector,
    test_set: list[ImageSample],
    cfg: TrainConfig,
    bins: tuple[tuple[float, float], ...] = SIZE_BINS,
) -> dict[str, dict]:
    """F1 per relative-object-size bin; images binned by mean GT area ratio.

    Images without ground truth are skipped. Empty bins are absent from the
    result rather than reported as zero.
    """
    groups: dict[int, list[ImageSample]] = {}
    for sample in test_set:
        if not sample.boxes:
            continue
        ratio = float(np.mean([
            b.area / (sample.width * sample.height) for b in sample.boxes
        ]))
        for b_idx, (lo, hi) in enumerate(bins):
            if lo < ratio <= hi:
                groups.setdefault(b_idx, []).append(sample)
                break
    table = {}
    for b_idx, members in sorted(groups.items()):
        lo, hi = bins[b_idx]
        result, _ = evaluate_model(model, members, cfg)
        table[f"({lo},{hi}]"] = {
            "n_images": len(members),
            "f1": result.f1,
            "precision": result.precision,
            "recall": result.recall,
            "ap": result.ap,
        }
    return table


def per_image_detection_losses(
    model: Detector, samples: list[ImageSample], cfg: TrainConfig
) -> dict[str, float]:
    """Unweighted per-image detection loss with frozen weights (no augmentation)."""
    model.eval()
    out: dict[str, float] = {}
    size = cfg.image_size
    with torch.no_grad():
        for sample in samples:
            image, boxes = sample_to_tensor(sample, size, cfg.augment)
            outputs = model(image.unsqueeze(0))
            maps = encode_targets(boxes, (size, size))
            report = total_loss(outputs, maps, 0.0, cfg.weights, 1.0, stage2=True)
            out[sample.id] = float(report.total)
    return out


@dataclass
class RunManifest:
    config_hash: str
    stage1_checkpoint: str
    weight_table: str | None
    stage2_checkpoint: str | None
    eval_result: dict
    final_checkpoint: str

    def to_dict(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "stage1_checkpoint": self.stage1_checkpoint,
            "weight_table": self.weight_table,
            "stage2_checkpoint": self.stage2_checkpoint,
            "eval_result": self.eval_result,
            "final_checkpoint": self.final_checkpoint,
        }


def _config_hash(cfg: TrainConfig) -> str:
    blob = json.dumps(cfg.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def _write_loss_log(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOSS_LOG_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in LOSS_LOG_FIELDS})


def run_pipeline(
    cfg: TrainConfig,
    train_set: list[ImageSample],
    test_set: list[ImageSample],
    out_dir: str | Path,
) -> RunManifest:
    """Full recipe: stage 1 -> mining -> stage 2 -> evaluation, all persisted.

    The run directory holds config.json, stage1.ckpt, weights.table,
    stage2.ckpt, loss_log.csv, eval.json, manifest.json plus per-image loss
    snapshots used by the mining diagnostic. With ``run_stage2`` off, mining
    and stage 2 are skipped and evaluation uses the stage-1 model.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), sort_keys=True, indent=1))

    model, rows = train_stage1(cfg, train_set)
    save_checkpoint(model, out / "stage1.ckpt", extra={"stage": 1})
    losses1 = per_image_detection_losses(model, train_set, cfg)
    (out / "losses_stage1.json").write_text(json.dumps(losses1, sort_keys=True, indent=1))

    table_path = None
    stage2_path = None
    if cfg.run_stage2:
        table = mine_weights(
            model, train_set, cfg.image_size, cfg.augment,
            score_threshold=cfg.score_threshold, top_k=cfg.top_k,
            weight_floor=cfg.weight_floor,
        )
        table.save(out / "weights.table")
        table_path = "weights.table"
        model, rows2 = train_stage2(cfg, train_set, table, model)
        rows += rows2
        save_checkpoint(model, out / "stage2.ckpt", extra={"stage": 2})
        stage2_path = "stage2.ckpt"
        losses2 = per_image_detection_losses(model, train_set, cfg)
        (out / "losses_stage2.json").write_text(
            json.dumps(losses2, sort_keys=True, indent=1)
        )

    _write_loss_log(out / "loss_log.csv", rows)
    result, predictions = evaluate_model(model, test_set, cfg)
    result.save(out / "eval.json")
    by_size = evaluate_by_size(model, test_set, cfg)
    (out / "eval_by_size.json").write_text(json.dumps(by_size, sort_keys=True, indent=1))

    manifest = RunManifest(
        config_hash=_config_hash(cfg),
        stage1_checkpoint="stage1.ckpt",
        weight_table=table_path,
        stage2_checkpoint=stage2_path,
        eval_result=result.to_dict(),
        final_checkpoint=stage2_path or "stage1.ckpt",
    )
    (out / "manifest.json").write_text(
        json.dumps(manifest.to_dict(), sort_keys=True, indent=1)
    )
    return manifest


def _time_models(models: list[Detector], image_size: int, n_images: int = 16,
                 repeats: int = 5) -> list[float]:
    """Best per-image forward seconds for each model, interleaving repeats.

    One batched forward per measurement amortizes call overhead, round-robin
    order cancels load drift when comparing variants, and the min over
    repeats is the least contaminated estimate of intrinsic cost.
    """
    images = torch.from_numpy(
        np.random.default_rng(0).standard_normal(
            (n_images, 3, image_size, image_size)
        ).astype(np.float32)
    )
    best = [math.inf] * len(models)
    with torch.no_grad():
        for model in models:
            model.eval()
            model(images[:1])  # warm up allocator and kernels
        for _ in range(repeats):
            for k, model in enumerate(models):
                start = time.perf_counter()
                model(images)
                best[k] = min(best[k], (time.perf_counter() - start) / n_images)
    return best


def time_inference(model: Detector, cfg: TrainConfig, n_images: int = 16,
                   repeats: int = 5) -> float:
    """Best per-image forward seconds on a fixed random batch."""
    return _time_models([model], cfg.image_size, n_images, repeats)[0]


def hp_stage_sweep(
    base_cfg: TrainConfig,
    train_set: list[ImageSample],
    test_set: list[ImageSample],
    out_dir: str | Path,
    stages: tuple[int, ...] = (1, 2, 3, 4),
) -> list[dict]:
    """Train/evaluate the cascade at several depths; report F1 and latency."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    models = []
    for n_stages in stages:
        cfg = replace(base_cfg, model=replace(base_cfg.model, n_stages=n_stages))
        manifest = run_pipeline(cfg, train_set, test_set, out / f"stages_{n_stages}")
        model, _ = load_checkpoint(out / f"stages_{n_stages}" / manifest.final_checkpoint)
        models.append(model)
        rows.append({
            "n_stages": n_stages,
            "f1": manifest.eval_result["f1"],
            "ap": manifest.eval_result["ap"],
        })
    timings = _time_models(models, base_cfg.image_size, n_images=24, repeats=7)
    for row, seconds in zip(rows, timings):
        row["seconds_per_image"] = seconds
    (out / "stage_sweep.json").write_text(json.dumps(rows, indent=1))
    return rows


def run_pipeline_synthetic(
    cfg: TrainConfig, synth: SynthConfig, out_dir: str | Path
) -> RunManifest:
    """Generate the synthetic dataset, persist it, and run the full pipeline."""
    train_set, test_set = generate_synthetic(synth)
    out = Path(out_dir)
    save_dataset(synth, train_set, test_set, out / "data")
    return run_pipeline(cfg, train_set, test_set, out)

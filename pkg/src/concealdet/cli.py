"""Command-line entry point for the detection pipeline.

Sub-commands mirror the training recipe (gen-data, train, mine, finetune,
eval, infer) plus two diagnostic plots. Every command accepts --seed,
--config, and --out; option precedence is CLI flag > config file > preset.
Runtime failures print one machine-parsable line ``ERROR <code> <message>``
on standard error and exit 1; usage problems exit 2.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import yaml

from .data import (
    DatasetError,
    SynthConfig,
    generate_synthetic,
    load_coco,
    save_dataset,
)
from .decode import decode_boxes, load_predictions, save_predictions
from .isr import WeightTable, iou_loss_scatter, mine_weights
from .metrics import evaluate, precision_recall_curve
from .model import CheckpointError, load_checkpoint, save_checkpoint
from .trainer import (
    TrainConfig,
    TrainingError,
    desk_preset,
    evaluate_by_size,
    evaluate_model,
    paper_preset,
    per_image_detection_losses,
    predict_dataset,
    train_stage1,
    train_stage2,
    _config_hash,
    _write_loss_log,
    LOSS_LOG_FIELDS,
)

_ERROR_CODES = (
    (DatasetError, "DATA"),
    (CheckpointError, "CKPT"),
    (TrainingError, "TRAIN"),
    (FileNotFoundError, "IO"),
    (OSError, "IO"),
    (KeyError, "KEY"),
    (ValueError, "VALUE"),
)

_PRESETS = {"desk": desk_preset, "paper": paper_preset}


def _fail_code(exc: Exception) -> str:
    for cls, code in _ERROR_CODES:
        if isinstance(exc, cls):
            return code
    return "RUNTIME"


def _deep_update(base: dict, overlay: dict) -> dict:
    for key, value in overlay.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _deep_update(base[key], value)
        else:
            base[key] = value
    return base


def _resolve_train_config(args: argparse.Namespace) -> TrainConfig:
    doc = _PRESETS[args.preset]().to_dict()
    if args.config:
        loaded = yaml.safe_load(Path(args.config).read_text())
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ValueError(f"config file {args.config} must hold a mapping")
        _deep_update(doc, loaded)
    overrides = {
        "seed": args.seed,
        "epochs": getattr(args, "epochs", None),
        "batch_size": getattr(args, "batch_size", None),
        "lr": getattr(args, "lr", None),
        "image_size": getattr(args, "image_size", None),
        "score_threshold": getattr(args, "score_threshold", None),
    }
    for key, value in overrides.items():
        if value is not None:
            doc[key] = value
    if getattr(args, "image_size", None) is not None:
        doc["augment"]["out_size"] = args.image_size
    if getattr(args, "no_bcl", False):
        doc["use_bcl"] = False
    if getattr(args, "zero_flow", False):
        doc["model"]["zero_flow"] = True
    if getattr(args, "n_stages", None) is not None:
        doc["model"]["n_stages"] = args.n_stages
    return TrainConfig.from_dict(doc)


def _load_split(data_dir: str | Path, split: str):
    data_dir = Path(data_dir)
    return load_coco(data_dir / f"{split}.json", data_dir)


def _update_manifest(run_dir: Path, **fields) -> None:
    path = run_dir / "manifest.json"
    doc = json.loads(path.read_text()) if path.exists() else {}
    doc.update(fields)
    path.write_text(json.dumps(doc, sort_keys=True, indent=1))


def _run_config(run_dir: Path) -> TrainConfig:
    cfg_path = run_dir / "config.json"
    if not cfg_path.exists():
        raise FileNotFoundError(f"{cfg_path} missing; run `train` first")
    return TrainConfig.from_dict(json.loads(cfg_path.read_text()))


# ---------------------------------------------------------------------------
# Sub-command handlers
# ---------------------------------------------------------------------------

def _cmd_gen_data(args: argparse.Namespace) -> int:
    cfg = SynthConfig(
        image_size=args.image_size or 128,
        n_train=args.n_train,
        n_test=args.n_test,
        texture_seed=args.seed if args.seed is not None else 0,
        negative_rate=args.negative_rate,
    )
    train, test = generate_synthetic(cfg)
    save_dataset(cfg, train, test, args.out)
    print(f"wrote {len(train)} train / {len(test)} test samples to {args.out}")
    return 0


def _cmd_train(args: argparse.Namespace) -> int:
    cfg = _resolve_train_config(args)
    train_set = _load_split(args.data, "train")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), sort_keys=True, indent=1))
    model, rows = train_stage1(cfg, train_set)
    save_checkpoint(model, out / "stage1.ckpt", extra={"stage": 1})
    _write_loss_log(out / "loss_log.csv", rows)
    losses = per_image_detection_losses(model, train_set, cfg)
    (out / "losses_stage1.json").write_text(json.dumps(losses, sort_keys=True, indent=1))
    _update_manifest(out, config_hash=_config_hash(cfg),
                     stage1_checkpoint="stage1.ckpt", final_checkpoint="stage1.ckpt")
    print(f"stage 1 done: {len(rows)} steps, final loss {rows[-1]['total']:.4f}")
    return 0


def _cmd_mine(args: argparse.Namespace) -> int:
    run_dir = Path(args.run)
    cfg = _run_config(run_dir)
    train_set = _load_split(args.data, "train")
    model, _ = load_checkpoint(run_dir / "stage1.ckpt")
    table = mine_weights(
        model, train_set, cfg.image_size, cfg.augment,
        score_threshold=cfg.score_threshold, top_k=cfg.top_k,
        weight_floor=cfg.weight_floor,
    )
    out = Path(args.out) if args.out else run_dir / "weights.table"
    table.save(out)
    _update_manifest(run_dir, weight_table=str(out.name))
    print(f"mined {len(table.entries)} weights, mean alpha {table.mean_alpha:.3f}")
    return 0


def _cmd_finetune(args: argparse.Namespace) -> int:
    run_dir = Path(args.run)
    cfg = _run_config(run_dir)
    train_set = _load_split(args.data, "train")
    table = WeightTable.load(args.weights or run_dir / "weights.table")
    model, rows = train_stage2(cfg, train_set, table, run_dir / "stage1.ckpt")
    save_checkpoint(model, run_dir / "stage2.ckpt", extra={"stage": 2})
    log_path = run_dir / "loss_log.csv"
    existing: list[dict] = []
    if log_path.exists():
        with open(log_path, newline="") as fh:
            existing = list(csv.DictReader(fh))
    _write_loss_log(log_path, existing + rows)
    losses = per_image_detection_losses(model, train_set, cfg)
    (run_dir / "losses_stage2.json").write_text(
        json.dumps(losses, sort_keys=True, indent=1)
    )
    _update_manifest(run_dir, stage2_checkpoint="stage2.ckpt",
                     final_checkpoint="stage2.ckpt")
    print(f"stage 2 done: {len(rows)} steps, final loss {rows[-1]['total']:.4f}")
    return 0


def _print_result(result) -> None:
    print(f"precision {result.precision:.3f}")
    print(f"recall {result.recall:.3f}")
    print(f"F1 {result.f1:.3f}")
    print(f"AP {result.ap:.3f}")


def _cmd_eval(args: argparse.Namespace) -> int:
    if args.pred:
        if not args.gt:
            raise ValueError("--pred requires --gt")
        predictions = load_predictions(args.pred)
        gt_samples = load_coco(args.gt, Path(args.gt).parent)
        gt = {s.id: s.boxes for s in gt_samples}
        result = evaluate(predictions, gt, iou_threshold=args.iou_threshold,
                          score_threshold=args.score_threshold)
        _print_result(result)
        if args.out:
            result.save(args.out)
        return 0
    if not args.run or not args.data:
        raise ValueError("provide either --pred/--gt or --run/--data")
    run_dir = Path(args.run)
    cfg = _run_config(run_dir)
    test_set = _load_split(args.data, "test")
    manifest_path = run_dir / "manifest.json"
    final = "stage2.ckpt" if (run_dir / "stage2.ckpt").exists() else "stage1.ckpt"
    if manifest_path.exists():
        final = json.loads(manifest_path.read_text()).get("final_checkpoint", final)
    model, _ = load_checkpoint(run_dir / final)
    result, predictions = evaluate_model(model, test_set, cfg)
    result.save(run_dir / "eval.json")
    save_predictions(run_dir / "predictions.jsonl", predictions)
    by_size = evaluate_by_size(model, test_set, cfg)
    (run_dir / "eval_by_size.json").write_text(
        json.dumps(by_size, sort_keys=True, indent=1)
    )
    _update_manifest(run_dir, eval_result=result.to_dict())
    _print_result(result)
    return 0


def _cmd_infer(args: argparse.Namespace) -> int:
    import torch

    from .data import normalize_pixels, resize_sample

    model, _ = load_checkpoint(args.ckpt)
    samples = load_coco(args.gt, args.image_root or Path(args.gt).parent)
    image_size = args.image_size or 128
    aug_mean, aug_std = (0.5, 0.5, 0.5), (0.25, 0.25, 0.25)
    predictions = {}
    model.eval()
    with torch.no_grad():
        for sample in samples:
            resized, _, _ = resize_sample(sample, image_size)
            pixels = normalize_pixels(resized.pixels, aug_mean, aug_std)
            image = torch.from_numpy(pixels.transpose(2, 0, 1).copy()).unsqueeze(0)
            outputs = model(image)
            predictions[sample.id] = decode_boxes(
                outputs, (image_size, image_size),
                top_k=args.top_k, score_threshold=args.score_threshold,
            )
    out = Path(args.out or "predictions.jsonl")
    save_predictions(out, predictions)
    n = sum(len(v) for v in predictions.values())
    print(f"wrote {n} detections over {len(predictions)} images to {out}")
    return 0


def _cmd_plot_iou_loss(args: argparse.Namespace) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    run_dir = Path(args.run)
    table = WeightTable.load(run_dir / "weights.table")
    panels = []
    for stage in (1, 2):
        path = run_dir / f"losses_stage{stage}.json"
        if path.exists():
            losses = json.loads(path.read_text())
            panels.append((stage, iou_loss_scatter(table, losses)))
    if not panels:
        raise FileNotFoundError(f"no losses_stage*.json under {run_dir}")
    out = Path(args.out) if args.out else run_dir
    out.mkdir(parents=True, exist_ok=True)
    fig, axes = plt.subplots(1, len(panels), figsize=(5 * len(panels), 4), squeeze=False)
    with open(out / "iou_loss.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["stage", "image_id", "iou", "loss", "spearman"])
        for ax, (stage, scatter) in zip(axes[0], panels):
            ax.scatter(scatter.ious, scatter.losses, s=12)
            ax.set_xlabel("inference IoU")
            ax.set_ylabel("detection loss")
            ax.set_title(f"stage {stage} (spearman {scatter.spearman:.3f})")
            for image_id, iou, loss in zip(scatter.image_ids, scatter.ious, scatter.losses):
                writer.writerow([stage, image_id, iou, loss, scatter.spearman])
    fig.tight_layout()
    fig.savefig(out / "iou_loss.png", dpi=120)
    plt.close(fig)
    print(f"wrote {out / 'iou_loss.png'} and {out / 'iou_loss.csv'}")
    return 0


def _cmd_plot_pr(args: argparse.Namespace) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    predictions = load_predictions(args.pred)
    gt_samples = load_coco(args.gt, Path(args.gt).parent)
    gt = {s.id: s.boxes for s in gt_samples}
    recalls, precisions = precision_recall_curve(
        predictions, gt, iou_threshold=args.iou_threshold
    )
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "pr_curve.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["recall", "precision"])
        writer.writerows(zip(recalls, precisions))
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(recalls, precisions, marker=".")
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1.02)
    ax.set_ylim(0, 1.02)
    fig.tight_layout()
    fig.savefig(out / "pr_curve.png", dpi=120)
    plt.close(fig)
    print(f"wrote {out / 'pr_curve.png'} and {out / 'pr_curve.csv'}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--config", default=None, help="YAML/JSON config file")
    p.add_argument("--out", default=None, help="output file or directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="concealdet",
        description="Train and evaluate the low-contrast center-point detector.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic dataset")
    _add_common(p)
    p.add_argument("--n-train", type=int, default=64)
    p.add_argument("--n-test", type=int, default=16)
    p.add_argument("--image-size", type=int, default=None)
    p.add_argument("--negative-rate", type=float, default=0.2)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="stage-1 training")
    _add_common(p)
    p.add_argument("--data", required=True, help="dataset directory from gen-data")
    p.add_argument("--preset", choices=sorted(_PRESETS), default="desk")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--image-size", type=int, default=None)
    p.add_argument("--score-threshold", type=float, default=None)
    p.add_argument("--no-bcl", action="store_true", help="disable the contrastive branch")
    p.add_argument("--zero-flow", action="store_true", help="zero the alignment flow")
    p.add_argument("--n-stages", type=int, default=None, help="heatmap cascade depth")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("mine", help="score training images with the stage-1 model")
    _add_common(p)
    p.add_argument("--run", required=True, help="run directory from train")
    p.add_argument("--data", required=True)
    p.set_defaults(func=_cmd_mine)

    p = sub.add_parser("finetune", help="stage-2 re-weighted training")
    _add_common(p)
    p.add_argument("--run", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--weights", default=None, help="weight table (default: run dir)")
    p.set_defaults(func=_cmd_finetune)

    p = sub.add_parser("eval", help="evaluate predictions or a finished run")
    _add_common(p)
    p.add_argument("--pred", default=None, help="predictions JSONL file")
    p.add_argument("--gt", default=None, help="COCO ground-truth file")
    p.add_argument("--run", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--iou-threshold", type=float, default=0.5)
    p.add_argument("--score-threshold", type=float, default=0.3)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("infer", help="run a checkpoint over a dataset")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--gt", required=True, help="COCO file listing the images")
    p.add_argument("--image-root", default=None)
    p.add_argument("--image-size", type=int, default=None)
    p.add_argument("--top-k", type=int, default=10)
    p.add_argument("--score-threshold", type=float, default=0.3)
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("plot-iou-loss", help="IoU vs loss scatter from a run")
    _add_common(p)
    p.add_argument("--run", required=True)
    p.set_defaults(func=_cmd_plot_iou_loss)

    p = sub.add_parser("plot-pr", help="precision-recall curve from predictions")
    _add_common(p)
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--iou-threshold", type=float, default=0.5)
    p.set_defaults(func=_cmd_plot_pr)

    return parser


def main(argv: list[str] | None = None) -> int:
    threads = os.environ.get("ECC_DET_THREADS")
    if threads:
        try:
            import torch

            torch.set_num_threads(max(1, int(threads)))
        except ValueError as exc:
            print(f"ERROR CONFIG bad ECC_DET_THREADS: {exc}", file=sys.stderr)
            return 1
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "gen-data" and not args.out:
        parser.error("gen-data requires --out")
    if args.command in ("train",) and not args.out:
        parser.error("train requires --out")
    try:
        return args.func(args)
    except Exception as exc:  # one-line machine-parsable failure contract
        message = str(exc).replace("\n", " ")
        print(f"ERROR {_fail_code(exc)} {message}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

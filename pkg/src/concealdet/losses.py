"""Detection objective: focal heatmap terms, center L1 terms, weighted total.

All operations work on a single sample (the trainer averages across the batch,
which keeps per-sample re-weighting exact). Predictions are torch tensors in
model layout; targets come from :class:`~concealdet.targets.TargetMaps`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .model import HeadOutputs
from .targets import TargetMaps

PRED_EPS = 1e-6


@dataclass(frozen=True)
class LossWeights:
    lambda_inter: float = 0.3
    lambda_offset: float = 1.0
    lambda_size: float = 0.1
    lambda_cl: float = 0.3
    a_focal: float = 2.0
    b_focal: float = 4.0

    def __post_init__(self) -> None:
        for name in ("lambda_inter", "lambda_offset", "lambda_size", "lambda_cl"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0.0:
                raise ValueError(f"{name} must be finite and non-negative, got {v}")
        if self.a_focal <= 0 or self.b_focal <= 0:
            raise ValueError("focal exponents must be positive")

    def to_dict(self) -> dict:
        return {
            "lambda_inter": self.lambda_inter,
            "lambda_offset": self.lambda_offset,
            "lambda_size": self.lambda_size,
            "lambda_cl": self.lambda_cl,
            "a_focal": self.a_focal,
            "b_focal": self.b_focal,
        }

    @staticmethod
    def from_dict(doc: dict) -> "LossWeights":
        return LossWeights(**doc)


@dataclass
class LossReport:
    """Scalar loss terms (0-dim tensors so ``total`` stays differentiable)."""

    l_hm_main: torch.Tensor
    l_hm_inter: torch.Tensor
    l_o: torch.Tensor
    l_s: torch.Tensor
    l_cl: torch.Tensor
    total: torch.Tensor

    def to_floats(self) -> dict[str, float]:
        return {
            "l_hm_main": float(self.l_hm_main.detach()),
            "l_hm_inter": float(self.l_hm_inter.detach()),
            "l_o": float(self.l_o.detach()),
            "l_s": float(self.l_s.detach()),
            "l_cl": float(self.l_cl.detach()),
            "total": float(self.total.detach()),
        }


def _plane(t: torch.Tensor) -> torch.Tensor:
    """Accept (Hs, Ws), (1, Hs, Ws) or (1, 1, Hs, Ws) and return (Hs, Ws)."""
    while t.dim() > 2 and t.shape[0] == 1:
        t = t[0]
    if t.dim() != 2:
        raise ValueError(f"expected a single heatmap plane, got shape {tuple(t.shape)}")
    return t


def _channels(t: torch.Tensor) -> torch.Tensor:
    """Accept (2, Hs, Ws) or (1, 2, Hs, Ws) and return (2, Hs, Ws)."""
    if t.dim() == 4 and t.shape[0] == 1:
        t = t[0]
    if t.dim() != 3 or t.shape[0] != 2:
        raise ValueError(f"expected a (2, Hs, Ws) map, got shape {tuple(t.shape)}")
    return t


def focal_heatmap_loss(
    pred: torch.Tensor,
    target: torch.Tensor | "TargetMaps",
    a_focal: float = 2.0,
    b_focal: float = 4.0,
) -> torch.Tensor:
    """Penalty-reduced pixel-wise focal loss on a center heatmap.

    At cells where the target is exactly 1: ``(1-p)^a log p``; everywhere
    else: ``(1-y)^b p^a log(1-p)``. The negated sum is divided by the number
    of exact-1 cells, floored at one so background-only frames keep a signal.
    """
    if isinstance(target, TargetMaps):
        target = target.heatmap
    pred = _plane(pred)
    y = torch.as_tensor(target, dtype=pred.dtype, device=pred.device)
    y = _plane(y)
    if y.shape != pred.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(y.shape)}")
    p = pred.clamp(PRED_EPS, 1.0 - PRED_EPS)
    pos = y == 1.0
    pos_term = torch.where(pos, (1.0 - p) ** a_focal * torch.log(p), torch.zeros_like(p))
    neg_term = torch.where(
        pos,
        torch.zeros_like(p),
        (1.0 - y) ** b_focal * p ** a_focal * torch.log(1.0 - p),
    )
    n = int(pos.sum())
    return -(pos_term.sum() + neg_term.sum()) / max(1, n)


def _center_l1(pred: torch.Tensor, target_array, centers) -> torch.Tensor:
    pred = _channels(pred)
    if not centers:
        return pred.sum() * 0.0
    t = torch.as_tensor(target_array, dtype=pred.dtype, device=pred.device)
    total = pred.new_zeros(())
    for row, col in centers:
        total = total + (pred[:, row, col] - t[row, col]).abs().sum()
    return total / len(centers)


def offset_loss(offset_pred: torch.Tensor, targets: TargetMaps) -> torch.Tensor:
    """Mean over objects of the component-summed L1 center-offset error."""
    return _center_l1(offset_pred, targets.offset_target, targets.center_indices)


def size_loss(size_pred: torch.Tensor, targets: TargetMaps) -> torch.Tensor:
    """Mean over objects of the component-summed L1 box-size error."""
    return _center_l1(size_pred, targets.size_target, targets.center_indices)


def total_loss(
    outputs: HeadOutputs,
    targets: TargetMaps,
    l_cl: torch.Tensor | float,
    weights: LossWeights | None = None,
    alpha_sample: float = 1.0,
    stage2: bool = False,
) -> LossReport:
    """Weighted single-sample objective.

    Stage 1 (``stage2=False``): main focal + weighted intermediate focal,
    offset, size, and contrastive terms. Stage 2: the detection terms are
    multiplied by ``alpha_sample`` and the contrastive term is dropped.
    """
    if outputs.batch_size != 1:
        raise ValueError("total_loss scores one sample; slice the batch first")
    if not (0.0 <= alpha_sample <= 1.0):
        raise ValueError(f"alpha_sample must lie in [0, 1], got {alpha_sample}")
    w = weights or LossWeights()
    l_main = focal_heatmap_loss(outputs.main_heatmap, targets, w.a_focal, w.b_focal)
    if outputs.intermediate_heatmaps:
        inter_terms = [
            focal_heatmap_loss(hm, targets, w.a_focal, w.b_focal)
            for hm in outputs.intermediate_heatmaps
        ]
        l_inter = sum(inter_terms) / len(inter_terms)
    else:
        l_inter = l_main.new_zeros(())
    l_o = offset_loss(outputs.offset_pred, targets)
    l_s = size_loss(outputs.size_pred, targets)
    detection = l_main + w.lambda_inter * l_inter + w.lambda_offset * l_o + w.lambda_size * l_s
    if stage2:
        l_cl_t = l_main.new_zeros(())
        total = alpha_sample * detection
    else:
        l_cl_t = torch.as_tensor(l_cl, dtype=l_main.dtype, device=l_main.device)
        total = alpha_sample * detection + w.lambda_cl * l_cl_t
    return LossReport(l_main, l_inter, l_o, l_s, l_cl_t, total)

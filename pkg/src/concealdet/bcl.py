"""Box-guided contrastive branch: pooled fg/bg embeddings and their InfoNCE loss.

Foreground and background embeddings are masked spatial means of the fused
feature upsampled to input resolution, L2-normalized. Each foreground
embedding queries one other foreground as its positive against every
background embedding in the batch as negatives.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as tnf

from .data import BoundingBox
from .targets import foreground_background_masks

DEFAULT_TEMPERATURE = 0.07
_NORM_EPS = 1e-12


class EmptyMaskError(ValueError):
    """Raised when pooling is requested over an all-zero mask."""


def masked_average_pool(features: torch.Tensor, mask) -> torch.Tensor:
    """Mean feature vector over mask-1 positions; features are (C, H, W)."""
    if features.dim() != 3:
        raise ValueError(f"expected (C, H, W) features, got {tuple(features.shape)}")
    m = torch.as_tensor(np.asarray(mask), dtype=features.dtype, device=features.device)
    if m.shape != features.shape[-2:]:
        raise ValueError(f"mask shape {tuple(m.shape)} does not match features")
    count = m.sum()
    if count.item() == 0:
        raise EmptyMaskError("mask has no active positions")
    return (features * m).sum(dim=(-2, -1)) / count


@dataclass
class ContrastiveBatch:
    """Unit-length pooled embeddings for one training batch."""

    fg_embeddings: list[torch.Tensor] = field(default_factory=list)
    bg_embeddings: list[torch.Tensor] = field(default_factory=list)
    temperature: float = DEFAULT_TEMPERATURE

    def validate(self) -> None:
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        for v in [*self.fg_embeddings, *self.bg_embeddings]:
            norm = float(v.detach().norm())
            if abs(norm - 1.0) > 1e-5:
                raise ValueError(f"embedding norm {norm} not unit length")


def _normalized(vec: torch.Tensor) -> torch.Tensor | None:
    norm = vec.norm()
    if float(norm.detach()) < _NORM_EPS:
        return None
    return vec / norm


def build_contrastive_batch(
    features_list: list[torch.Tensor],
    boxes_list: list[list[BoundingBox]],
    image_size: tuple[int, int],
    temperature: float = DEFAULT_TEMPERATURE,
) -> ContrastiveBatch:
    """Pool per-image fg/bg embeddings from fused stride-4 features.

    Each feature map is bilinearly upsampled to ``image_size`` before pooling;
    images without boxes contribute only a background embedding. Images whose
    fg or bg mask is empty (or pools to a zero vector) skip that embedding.
    """
    if len(features_list) != len(boxes_list):
        raise ValueError("features and boxes lists differ in length")
    batch = ContrastiveBatch(temperature=temperature)
    for features, boxes in zip(features_list, boxes_list):
        if features.dim() != 3:
            raise ValueError(f"expected (C, Hs, Ws) features, got {tuple(features.shape)}")
        up = tnf.interpolate(
            features.unsqueeze(0), size=image_size, mode="bilinear", align_corners=False
        )[0]
        fg_mask, bg_mask = foreground_background_masks(boxes, image_size)
        if boxes:
            try:
                fg = _normalized(masked_average_pool(up, fg_mask))
            except EmptyMaskError:
                fg = None
            if fg is not None:
                batch.fg_embeddings.append(fg)
        try:
            bg = _normalized(masked_average_pool(up, bg_mask))
        except EmptyMaskError:
            bg = None
        if bg is not None:
            batch.bg_embeddings.append(bg)
    return batch


def pair_positives(n_fg: int, rng_seed: int) -> list[int]:
    """For each foreground index, pick a distinct partner index, seeded."""
    rng = np.random.default_rng(rng_seed)
    pairs = []
    for i in range(n_fg):
        j = int(rng.integers(0, n_fg - 1))
        pairs.append(j if j < i else j + 1)
    return pairs


def contrastive_loss(
    batch: ContrastiveBatch,
    rng_seed: int = 0,
    pairs: list[int] | None = None,
) -> torch.Tensor:
    """Mean InfoNCE over foreground queries; zero when the batch is degenerate.

    Requires at least two foreground and one background embedding, otherwise
    returns 0. ``pairs`` overrides the seeded positive choice (pairs[i] is the
    positive index for query i), which keeps the loss reproducible for tests.
    """
    n_fg = len(batch.fg_embeddings)
    n_bg = len(batch.bg_embeddings)
    if n_fg < 2 or n_bg < 1:
        if batch.fg_embeddings or batch.bg_embeddings:
            anchor = (batch.fg_embeddings or batch.bg_embeddings)[0]
            return anchor.sum() * 0.0
        return torch.zeros(())
    if pairs is None:
        pairs = pair_positives(n_fg, rng_seed)
    if len(pairs) != n_fg or any(p == i or not 0 <= p < n_fg for i, p in enumerate(pairs)):
        raise ValueError("pairs must map every query to a distinct fg index")
    tau = batch.temperature
    negatives = torch.stack(batch.bg_embeddings)
    losses = []
    for i, j in enumerate(pairs):
        q = batch.fg_embeddings[i]
        pos_logit = (q * batch.fg_embeddings[j]).sum() / tau
        neg_logits = negatives @ q / tau
        logits = torch.cat([pos_logit.reshape(1), neg_logits])
        losses.append(torch.logsumexp(logits, dim=0) - pos_logit)
    return torch.stack(losses).mean()

"""The detector network and its checkpoint format.

A plain four-stage strided backbone feeds a top-down pyramid whose levels are
fused by flow-guided alignment; the fused stride-4 feature drives a cascade of
heatmap stages followed by heatmap/offset/size branches.

Tensor conventions: images are ``(B, 3, H, W)`` with ``H, W`` divisible by 32;
offset channels are ``(row, col)`` fractions and size channels ``(w, h)`` in
stride-4 units; flow channels are ``(dx, dy)`` pixel displacements.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as tnf
from torch import nn

HEATMAP_PRIOR_BIAS = -2.1972245773362196  # logit of 0.1: heatmaps start near the target prior
SIZE_PRIOR_BIAS = 0.8  # log-size init: e^0.8 is about two stride-4 cells, a typical object
SIZE_LOG_CLAMP = 10.0


class CheckpointError(ValueError):
    """Raised for unreadable or mismatched checkpoint files."""


@dataclass(frozen=True)
class ModelConfig:
    backbone_channels: tuple[int, int, int, int] = (16, 32, 64, 128)
    fpn_channels: int = 64
    n_stages: int = 2
    head_kernel: int = 3
    zero_flow: bool = False

    def __post_init__(self) -> None:
        if len(self.backbone_channels) != 4:
            raise ValueError("backbone_channels needs exactly four stage widths")
        if any(c <= 0 for c in self.backbone_channels) or self.fpn_channels <= 0:
            raise ValueError("channel counts must be positive")
        if self.n_stages < 1:
            raise ValueError("n_stages must be at least 1")
        if self.head_kernel < 1 or self.head_kernel % 2 == 0:
            raise ValueError("head_kernel must be odd")

    def to_dict(self) -> dict:
        return {
            "backbone_channels": list(self.backbone_channels),
            "fpn_channels": self.fpn_channels,
            "n_stages": self.n_stages,
            "head_kernel": self.head_kernel,
            "zero_flow": self.zero_flow,
        }

    @staticmethod
    def from_dict(doc: dict) -> "ModelConfig":
        kwargs = dict(doc)
        if "backbone_channels" in kwargs:
            kwargs["backbone_channels"] = tuple(kwargs["backbone_channels"])
        return ModelConfig(**kwargs)


class RunningNorm(nn.Module):
    """Per-channel affine normalization by running statistics.

    Inputs are always normalized with the running mean/variance as of the
    start of the call, so per-sample outputs never depend on the rest of the
    batch and eval-mode forwards are pure. Train-mode forwards additionally
    fold the batch statistics into the running buffers afterwards.
    """

    def __init__(self, num_channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(num_channels))
        self.bias = nn.Parameter(torch.zeros(num_channels))
        self.register_buffer("running_mean", torch.zeros(num_channels))
        self.register_buffer("running_var", torch.ones(num_channels))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        shape = (1, -1) + (1,) * (x.dim() - 2)
        mean = self.running_mean.to(x.dtype).view(shape)
        var = self.running_var.to(x.dtype).view(shape)
        out = (x - mean) / torch.sqrt(var + self.eps)
        out = out * self.weight.view(shape) + self.bias.view(shape)
        if self.training:
            with torch.no_grad():
                dims = [d for d in range(x.dim()) if d != 1]
                batch_mean = x.mean(dim=dims).to(self.running_mean.dtype)
                batch_var = x.var(dim=dims, unbiased=False).to(self.running_var.dtype)
                self.running_mean.mul_(1 - self.momentum).add_(self.momentum * batch_mean)
                self.running_var.mul_(1 - self.momentum).add_(self.momentum * batch_var)
        return out


class ConvNormAct(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int = 3, stride: int = 1,
                 act: bool = True):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, kernel, stride=stride,
                              padding=kernel // 2, bias=False)
        self.norm = RunningNorm(out_ch)
        self.act = nn.ReLU(inplace=True) if act else nn.Identity()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.act(self.norm(self.conv(x)))


@dataclass
class FeaturePyramid:
    """Backbone features at strides 4, 8, 16, 32."""

    f1: torch.Tensor
    f2: torch.Tensor
    f3: torch.Tensor
    f4: torch.Tensor

    def as_tuple(self) -> tuple[torch.Tensor, ...]:
        return (self.f1, self.f2, self.f3, self.f4)

    def validate(self, image_hw: tuple[int, int]) -> None:
        h, w = image_hw
        for i, f in enumerate(self.as_tuple(), start=1):
            stride = 2 ** (i + 1)
            if f.shape[-2:] != (h // stride, w // stride):
                raise ValueError(f"level {i} has shape {tuple(f.shape)}, "
                                 f"expected spatial {(h // stride, w // stride)}")
            if not torch.isfinite(f).all():
                raise ValueError(f"level {i} contains non-finite values")


class Backbone(nn.Module):
    """Four stages of two 3x3 convolutions each; output strides 4/8/16/32."""

    def __init__(self, channels: tuple[int, int, int, int] = (16, 32, 64, 128)):
        super().__init__()
        c1, c2, c3, c4 = channels
        self.stage1 = nn.Sequential(ConvNormAct(3, c1, stride=2),
                                    ConvNormAct(c1, c1, stride=2))
        self.stage2 = nn.Sequential(ConvNormAct(c1, c2, stride=2), ConvNormAct(c2, c2))
        self.stage3 = nn.Sequential(ConvNormAct(c2, c3, stride=2), ConvNormAct(c3, c3))
        self.stage4 = nn.Sequential(ConvNormAct(c3, c4, stride=2), ConvNormAct(c4, c4))

    def forward(self, images: torch.Tensor) -> FeaturePyramid:
        if images.dim() != 4 or images.shape[1] != 3:
            raise ValueError(f"expected (B, 3, H, W) input, got {tuple(images.shape)}")
        h, w = images.shape[-2:]
        if h % 32 or w % 32:
            raise ValueError(f"input {h}x{w} not divisible by 32")
        f1 = self.stage1(images)
        f2 = self.stage2(f1)
        f3 = self.stage3(f2)
        f4 = self.stage4(f3)
        return FeaturePyramid(f1, f2, f3, f4)


def flow_warp(feature: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Bilinear-sample ``feature`` at ``grid + flow``.

    ``flow`` is ``(B, 2, H, W)`` with channels ``(dx, dy)`` in pixels of the
    output grid, so a constant flow of (1, 0) reads one column to the right.
    Out-of-range positions clamp to the border.
    """
    b, _, h, w = feature.shape
    ys = torch.arange(h, dtype=feature.dtype, device=feature.device)
    xs = torch.arange(w, dtype=feature.dtype, device=feature.device)
    grid_y, grid_x = torch.meshgrid(ys, xs, indexing="ij")
    px = grid_x.unsqueeze(0) + flow[:, 0]
    py = grid_y.unsqueeze(0) + flow[:, 1]
    nx = 2.0 * px / max(w - 1, 1) - 1.0
    ny = 2.0 * py / max(h - 1, 1) - 1.0
    grid = torch.stack((nx, ny), dim=-1)
    return tnf.grid_sample(feature, grid, mode="bilinear",
                           padding_mode="border", align_corners=True)


class FlowAlign(nn.Module):
    """Warp an upsampled coarse feature into alignment with a fine one, then sum.

    The two-channel flow field comes from a 3x3 convolution over the
    concatenated features. ``zero_flow`` multiplies the field by zero, which
    reduces the module to a plain upsample-and-add pyramid step while keeping
    the parameter set (and so checkpoint compatibility) unchanged.
    """

    def __init__(self, channels: int, zero_flow: bool = False):
        super().__init__()
        self.flow_conv = nn.Conv2d(2 * channels, 2, 3, padding=1, bias=False)
        self.flow_norm = RunningNorm(2)
        self.zero_flow = zero_flow

    def forward(self, high: torch.Tensor, low: torch.Tensor) -> torch.Tensor:
        up = tnf.interpolate(low, size=high.shape[-2:], mode="bilinear",
                             align_corners=False)
        flow = self.flow_norm(self.flow_conv(torch.cat((high, up), dim=1)))
        if self.zero_flow:
            flow = flow * 0.0
        return flow_warp(up, flow) + high


class FusionPyramid(nn.Module):
    """Top-down fusion of the backbone pyramid into one stride-4 feature.

    Every level is first compressed to a common width by a 1x1 convolution
    with normalization, then coarser levels are repeatedly flow-aligned onto
    the next finer one.
    """

    def __init__(self, in_channels: tuple[int, int, int, int],
                 out_channels: int = 64, zero_flow: bool = False):
        super().__init__()
        self.laterals = nn.ModuleList(
            ConvNormAct(c, out_channels, kernel=1, act=False) for c in in_channels
        )
        self.aligns = nn.ModuleList(
            FlowAlign(out_channels, zero_flow=zero_flow) for _ in range(3)
        )

    def forward(self, pyr: FeaturePyramid) -> torch.Tensor:
        l1, l2, l3, l4 = (lat(f) for lat, f in zip(self.laterals, pyr.as_tuple()))
        p = self.aligns[2](l3, l4)
        p = self.aligns[1](l2, p)
        return self.aligns[0](l1, p)


@dataclass
class HeadOutputs:
    """Batched head tensors; heatmaps are already through the sigmoid.

    Shapes: heatmaps ``(B, 1, Hs, Ws)``, offset ``(B, 2, Hs, Ws)`` with
    channels (row, col), size ``(B, 2, Hs, Ws)`` with channels (w, h) in
    stride-4 units, strictly positive.
    """

    intermediate_heatmaps: list[torch.Tensor]
    main_heatmap: torch.Tensor
    offset_pred: torch.Tensor
    size_pred: torch.Tensor

    @property
    def batch_size(self) -> int:
        return self.main_heatmap.shape[0]

    @property
    def all_heatmaps(self) -> list[torch.Tensor]:
        return [*self.intermediate_heatmaps, self.main_heatmap]

    def select(self, index: int) -> "HeadOutputs":
        """Single-sample view (batch dim kept) sharing the same storage."""
        s = slice(index, index + 1)
        return HeadOutputs(
            [h[s] for h in self.intermediate_heatmaps],
            self.main_heatmap[s], self.offset_pred[s], self.size_pred[s],
        )

    def detached(self) -> "HeadOutputs":
        return HeadOutputs(
            [h.detach() for h in self.intermediate_heatmaps],
            self.main_heatmap.detach(),
            self.offset_pred.detach(),
            self.size_pred.detach(),
        )


class _TwoConv(nn.Module):
    """Two k x k convolutions: conv+norm+relu, then a plain conv to out_ch."""

    def __init__(self, channels: int, out_ch: int, kernel: int, bias_init: float = 0.0):
        super().__init__()
        self.block = ConvNormAct(channels, channels, kernel)
        self.out = nn.Conv2d(channels, out_ch, kernel, padding=kernel // 2)
        nn.init.constant_(self.out.bias, bias_init)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.out(self.block(x))


class HeatmapCascadeHead(nn.Module):
    """Cascade of heatmap stages feeding final heatmap/offset/size branches.

    Each of the first ``n_stages - 1`` stages predicts an intermediate heatmap
    whose pre-sigmoid logits are projected back into the feature stream by a
    1x1 convolution and added pixel-wise; the last stage runs the three
    prediction branches. The size branch is exponentiated (with a clamped
    argument) so decoded sizes are always positive.
    """

    def __init__(self, channels: int, n_stages: int = 2, kernel: int = 3):
        super().__init__()
        if n_stages < 1:
            raise ValueError("n_stages must be at least 1")
        self.inter_blocks = nn.ModuleList(
            _TwoConv(channels, 1, kernel, HEATMAP_PRIOR_BIAS) for _ in range(n_stages - 1)
        )
        self.inter_proj = nn.ModuleList(
            nn.Conv2d(1, channels, 1) for _ in range(n_stages - 1)
        )
        self.heatmap_branch = _TwoConv(channels, 1, kernel, HEATMAP_PRIOR_BIAS)
        self.offset_branch = _TwoConv(channels, 2, kernel)
        self.size_branch = _TwoConv(channels, 2, kernel, SIZE_PRIOR_BIAS)

    def forward(self, fused: torch.Tensor) -> HeadOutputs:
        x = fused
        intermediates = []
        for block, proj in zip(self.inter_blocks, self.inter_proj):
            logits = block(x)
            intermediates.append(torch.sigmoid(logits))
            x = x + proj(logits)
        main = torch.sigmoid(self.heatmap_branch(x))
        offset = self.offset_branch(x)
        size = torch.exp(torch.clamp(self.size_branch(x),
                                     -SIZE_LOG_CLAMP, SIZE_LOG_CLAMP))
        return HeadOutputs(intermediates, main, offset, size)


class Detector(nn.Module):
    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        self.config = config or ModelConfig()
        self.backbone = Backbone(self.config.backbone_channels)
        self.fpn = FusionPyramid(self.config.backbone_channels,
                                 self.config.fpn_channels,
                                 zero_flow=self.config.zero_flow)
        self.head = HeatmapCascadeHead(self.config.fpn_channels,
                                       self.config.n_stages,
                                       self.config.head_kernel)

    def forward_with_features(self, images: torch.Tensor) -> tuple[HeadOutputs, torch.Tensor]:
        """Head outputs plus the fused stride-4 feature (for contrastive pooling)."""
        fused = self.fpn(self.backbone(images))
        return self.head(fused), fused

    def forward(self, images: torch.Tensor) -> HeadOutputs:
        return self.forward_with_features(images)[0]


def build_detector(config: ModelConfig | None = None, seed: int = 0) -> Detector:
    """Construct a detector with reproducible parameter initialization."""
    generator_state = torch.random.get_rng_state()
    try:
        torch.manual_seed(seed)
        return Detector(config)
    finally:
        torch.random.set_rng_state(generator_state)


# ---------------------------------------------------------------------------
# Checkpoint format: magic, version, JSON header, raw little-endian arrays.
# Arrays are written in sorted state-dict order so files are byte-stable.
# ---------------------------------------------------------------------------

_MAGIC = b"CDET"
_VERSION = 1


def save_checkpoint(model: Detector, path: str | Path, extra: dict | None = None) -> None:
    entries = []
    blobs = []
    for name, tensor in sorted(model.state_dict().items()):
        arr = np.ascontiguousarray(tensor.detach().cpu().numpy())
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        data = le.tobytes()
        entries.append({
            "name": name,
            "dtype": str(arr.dtype),
            "shape": list(arr.shape),
            "nbytes": len(data),
        })
        blobs.append(data)
    header = {
        "config": model.config.to_dict(),
        "arrays": entries,
        "extra": extra or {},
    }
    payload = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IQ", _VERSION, len(payload)))
        fh.write(payload)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path: str | Path) -> tuple[Detector, dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, header_len = struct.unpack_from("<IQ", raw, 4)
    if version != _VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    start = 4 + struct.calcsize("<IQ")
    try:
        header = json.loads(raw[start : start + header_len])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from exc
    model = Detector(ModelConfig.from_dict(header["config"]))
    state = {}
    offset = start + header_len
    for entry in header["arrays"]:
        n = entry["nbytes"]
        chunk = raw[offset : offset + n]
        if len(chunk) != n:
            raise CheckpointError(f"{path}: truncated array {entry['name']}")
        dtype = np.dtype(entry["dtype"]).newbyteorder("<")
        arr = np.frombuffer(chunk, dtype=dtype).reshape(entry["shape"])
        state[entry["name"]] = torch.from_numpy(
            arr.astype(arr.dtype.newbyteorder("="), copy=True)
        )
        offset += n
    try:
        model.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: state does not match model config: {exc}") from exc
    return model, header.get("extra", {})

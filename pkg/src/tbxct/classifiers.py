"""Prediction models for each input configuration, and the training loss.

Two compact architectures cover the experiment matrix: a multi-view 2D
network (one small convolutional encoder per view, mean fusion of the view
embeddings, linear head - tolerates a missing view) and a slice-stack
network that treats thin stacks (<= 4 planes) as channels of a 2D net and
thick stacks as the depth axis of a 3D net. Losses are binary cross entropy
on logits in the overflow-safe form max(z,0) - z*t + log(1 + exp(-|z|)).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from scipy.special import expit
from torch import nn

from .checkpoint import read_checkpoint, write_checkpoint
from .preprocessing import SliceMode

MAX_CHANNELS_FOR_2D = 4
EMBED_DIM = 64


class ModalityTag(str, Enum):
    XRAY_PA = "xray_pa"
    XRAY_PA_L = "xray_pa_l"
    CT_SV = "ct_sv"
    CT_B = "ct_b"
    CT_SV_XRAY = "ct_sv+xray"
    CT_B_XRAY = "ct_b+xray"

    @property
    def is_xray_2d(self) -> bool:
        return self in (ModalityTag.XRAY_PA, ModalityTag.XRAY_PA_L)

    @property
    def uses_ct(self) -> bool:
        return not self.is_xray_2d

    @property
    def fuses_xray(self) -> bool:
        return self in (ModalityTag.CT_SV_XRAY, ModalityTag.CT_B_XRAY)

    @property
    def n_views(self) -> int:
        return 2 if self is ModalityTag.XRAY_PA_L else 1


class ArchitectureKind(str, Enum):
    MULTIVIEW_2D = "multiview_2d"
    SLICESTACK_3D = "slicestack_3d"


@dataclass(frozen=True)
class ModelInput:
    """One sample: either a channel stack (CT / fusion paths) or view tensors."""

    modality_tag: ModalityTag
    planes: Optional[np.ndarray] = None
    views: Optional[tuple[np.ndarray, ...]] = None
    slice_mode: Optional[SliceMode] = None

    def __post_init__(self) -> None:
        tag = ModalityTag(self.modality_tag)
        if tag.is_xray_2d:
            if self.views is None or self.planes is not None:
                raise ValueError(f"{tag.value} input must carry view tensors only")
            if len(self.views) != tag.n_views:
                raise ValueError(
                    f"{tag.value} expects {tag.n_views} view(s), got {len(self.views)}"
                )
            for v in self.views:
                if np.asarray(v).ndim != 2:
                    raise ValueError("each view must be a 2D tensor")
        else:
            if self.planes is None or self.views is not None:
                raise ValueError(f"{tag.value} input must carry a channel stack only")
            arr = np.asarray(self.planes)
            if arr.ndim != 3:
                raise ValueError(f"channel stack must be (C, H, W), got {arr.shape}")
            minimum = 3 if tag.fuses_xray else 2
            if arr.shape[0] < minimum:
                raise ValueError(
                    f"{tag.value} needs at least {minimum} channels, got {arr.shape[0]}"
                )
            if self.slice_mode is SliceMode.TWO_SLICE and arr.shape[0] != minimum:
                raise ValueError(
                    f"{tag.value} with two-slice CT must have {minimum} channels,"
                    f" got {arr.shape[0]}"
                )

    @property
    def n_channels(self) -> int:
        return len(self.views) if self.views is not None else self.planes.shape[0]


def fuse_inputs(
    ct_slices: np.ndarray,
    xray: np.ndarray,
    modality_tag: ModalityTag = ModalityTag.CT_B_XRAY,
    slice_mode: Optional[SliceMode] = None,
) -> ModelInput:
    """Concatenate CT slices and an X-ray plane along the channel axis.

    CT slices come first, the X-ray last; values are passed through untouched.
    """
    ct = np.asarray(ct_slices, dtype=np.float32)
    xr = np.asarray(xray, dtype=np.float32)
    if ct.ndim != 3 or xr.ndim != 2:
        raise ValueError(
            f"expected (S, H, W) CT slices and (H, W) X-ray, got {ct.shape} and {xr.shape}"
        )
    if ct.shape[1:] != xr.shape:
        raise ValueError(f"spatial mismatch: CT {ct.shape[1:]} vs X-ray {xr.shape}")
    stacked = np.concatenate([ct, xr[None]], axis=0)
    return ModelInput(modality_tag=modality_tag, planes=stacked, slice_mode=slice_mode)


def _check_loss_args(logits, targets) -> tuple[np.ndarray, np.ndarray]:
    z = np.asarray(logits, dtype=np.float64).ravel()
    t = np.asarray(targets, dtype=np.float64).ravel()
    if z.shape != t.shape:
        raise ValueError(f"logits and targets differ in length: {z.shape} vs {t.shape}")
    if z.size == 0:
        raise ValueError("empty logits")
    if not np.all(np.isfinite(z)):
        raise ValueError("non-finite logits")
    if not np.all((t == 0.0) | (t == 1.0)):
        raise ValueError("targets must be binary")
    return z, t


def bce_with_logits(logits, targets) -> float:
    """Mean binary cross entropy on logits, numerically stable at any scale."""
    z, t = _check_loss_args(logits, targets)
    per_element = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    return float(per_element.mean())


def bce_with_logits_grad(logits, targets) -> np.ndarray:
    """Analytic gradient of bce_with_logits w.r.t. logits: (sigmoid(z) - t)/n."""
    z, t = _check_loss_args(logits, targets)
    return (expit(z) - t) / z.size


def bce_with_logits_torch(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Differentiable twin of bce_with_logits for the training loops."""
    z = logits
    t = targets.to(z.dtype)
    per_element = z.clamp(min=0) - z * t + torch.log1p(torch.exp(-z.abs()))
    return per_element.mean()


class _AvgMaxPool2d(nn.Module):
    """Global average and max pooling, concatenated.

    The max branch keeps small localized findings from being diluted away;
    the average branch carries global shape cues.
    """

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.cat([x.mean(dim=(2, 3)), x.amax(dim=(2, 3))], dim=1)


class _ViewEncoder(nn.Module):
    """320x320 single-view encoder to a fixed-size embedding.

    Two branches: a small convolutional stack for texture, and a direct
    linear readout of a pooled image. The linear branch conditions the
    optimization well when classes differ by a small local deviation on an
    otherwise shared anatomy.
    """

    def __init__(self, embed_dim: int = EMBED_DIM):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(1, 8, 3, stride=2, padding=1),
            nn.GroupNorm(2, 8),
            nn.ReLU(),
            nn.Conv2d(8, 16, 3, stride=2, padding=1),
            nn.GroupNorm(4, 16),
            nn.ReLU(),
            nn.Conv2d(16, 32, 3, stride=2, padding=1),
            nn.GroupNorm(8, 32),
            nn.ReLU(),
            nn.Conv2d(32, 32, 3, stride=2, padding=1),
            nn.GroupNorm(8, 32),
            nn.ReLU(),
            _AvgMaxPool2d(),
        )
        self.project = nn.Linear(64, embed_dim)
        self.pool_direct = nn.AdaptiveAvgPool2d(32)
        self.direct = nn.Linear(32 * 32, embed_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        conv_embed = self.project(self.features(x))
        direct_embed = self.direct(self.pool_direct(x).flatten(1))
        return conv_embed + direct_embed


class MultiViewNet(nn.Module):
    """Per-view encoder branches fused by the mean of their embeddings.

    The mean fusion tolerates absent views: pass `present` to restrict the
    branches that contribute.
    """

    def __init__(self, n_views: int, n_outputs: int):
        super().__init__()
        self.encoders = nn.ModuleList(_ViewEncoder() for _ in range(n_views))
        self.head = nn.Linear(EMBED_DIM, n_outputs)

    def forward(
        self, views: torch.Tensor, present: Optional[Sequence[int]] = None
    ) -> torch.Tensor:
        # views: (B, V, 1, H, W)
        branch_ids = list(range(views.shape[1])) if present is None else list(present)
        if not branch_ids:
            raise ValueError("at least one view must be present")
        embeddings = torch.stack(
            [self.encoders[i](views[:, i]) for i in branch_ids], dim=0
        )
        return self.head(torch.relu(embeddings.mean(dim=0)))


class SliceStack2DNet(nn.Module):
    """Thin slice stacks (channels) into a small 2D convolutional net."""

    def __init__(self, in_channels: int, n_outputs: int):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(in_channels, 16, 3, stride=2, padding=1),
            nn.GroupNorm(4, 16),
            nn.ReLU(),
            nn.Conv2d(16, 32, 3, stride=2, padding=1),
            nn.GroupNorm(8, 32),
            nn.ReLU(),
            nn.Conv2d(32, 32, 3, stride=2, padding=1),
            nn.GroupNorm(8, 32),
            nn.ReLU(),
            _AvgMaxPool2d(),
        )
        self.hidden = nn.Linear(64, EMBED_DIM)
        self.pool_direct = nn.AdaptiveAvgPool2d(16)
        self.direct = nn.Linear(in_channels * 16 * 16, EMBED_DIM)
        self.head = nn.Linear(EMBED_DIM, n_outputs)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        conv_embed = self.hidden(self.features(x))
        direct_embed = self.direct(self.pool_direct(x).flatten(1))
        return self.head(torch.relu(conv_embed + direct_embed))


class SliceStack3DNet(nn.Module):
    """Thick slice stacks as the depth axis of a small 3D convolutional net.

    The stem downsamples aggressively (stride 4): 3D convolutions dominate
    CPU cost, and the coarse volume context they contribute survives the
    stride.
    """

    def __init__(self, n_outputs: int):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv3d(1, 8, 3, stride=4, padding=1),
            nn.GroupNorm(2, 8),
            nn.ReLU(),
            nn.Conv3d(8, 16, 3, stride=2, padding=1),
            nn.GroupNorm(4, 16),
            nn.ReLU(),
            nn.Conv3d(16, 32, 3, stride=2, padding=1),
            nn.GroupNorm(8, 32),
            nn.ReLU(),
        )
        self.hidden = nn.Linear(64, EMBED_DIM)
        self.pool_direct = nn.AdaptiveAvgPool3d((8, 16, 16))
        self.direct = nn.Linear(8 * 16 * 16, EMBED_DIM)
        self.head = nn.Linear(EMBED_DIM, n_outputs)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        f = self.features(x)
        pooled = torch.cat([f.mean(dim=(2, 3, 4)), f.amax(dim=(2, 3, 4))], dim=1)
        conv_embed = self.hidden(pooled)
        direct_embed = self.direct(self.pool_direct(x).flatten(1))
        return self.head(torch.relu(conv_embed + direct_embed))


class ClassifierModel:
    """A classification function g: model input -> logit vector."""

    def __init__(
        self, kind: ArchitectureKind, n_outputs: int, input_channels: int, net: nn.Module
    ):
        self.kind = ArchitectureKind(kind)
        self.n_outputs = int(n_outputs)
        self.input_channels = int(input_channels)
        self.net = net
        self.net.eval()

    def batch_logits(self, samples: Sequence[ModelInput]) -> torch.Tensor:
        """Forward a batch of samples; gradients flow when the net is in
        train mode."""
        if not samples:
            raise ValueError("empty batch")
        if self.kind is ArchitectureKind.MULTIVIEW_2D:
            views = torch.from_numpy(
                np.stack([np.stack(s.views).astype(np.float32) for s in samples])
            )[:, :, None]
            if views.shape[1] != self.input_channels:
                raise ValueError(
                    f"model expects {self.input_channels} view(s), got {views.shape[1]}"
                )
            return self.net(views)
        planes = torch.from_numpy(
            np.stack([np.asarray(s.planes, dtype=np.float32) for s in samples])
        )
        if planes.shape[1] != self.input_channels:
            raise ValueError(
                f"model expects {self.input_channels} channels, got {planes.shape[1]}"
            )
        if isinstance(self.net, SliceStack3DNet):
            planes = planes[:, None]
        return self.net(planes)

    def logits(self, sample: ModelInput) -> np.ndarray:
        was_training = self.net.training
        self.net.eval()
        try:
            with torch.no_grad():
                out = self.batch_logits([sample])[0]
        finally:
            self.net.train(was_training)
        return out.numpy().astype(np.float64)

    def parameters(self):
        return self.net.parameters()

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.detach().numpy().copy() for k, v in self.net.state_dict().items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        state = {k: torch.from_numpy(np.asarray(v, dtype=np.float32)) for k, v in arrays.items()}
        self.net.load_state_dict(state)


def build_classifier(
    kind: ArchitectureKind, n_outputs: int, input_channels: int, seed: int = 0
) -> ClassifierModel:
    """Construct an initialized model; initialization is a pure function of
    the seed."""
    kind = ArchitectureKind(kind)
    if n_outputs not in (1, 3):
        raise ValueError(f"n_outputs must be 1 or 3, got {n_outputs}")
    torch.manual_seed(seed)
    if kind is ArchitectureKind.MULTIVIEW_2D:
        if input_channels not in (1, 2):
            raise ValueError(
                f"multiview_2d supports 1 or 2 views, got input_channels={input_channels}"
            )
        net: nn.Module = MultiViewNet(input_channels, n_outputs)
    else:
        if input_channels < 2:
            raise ValueError(
                f"slicestack_3d needs at least 2 channels, got {input_channels}"
            )
        if input_channels <= MAX_CHANNELS_FOR_2D:
            net = SliceStack2DNet(input_channels, n_outputs)
        else:
            net = SliceStack3DNet(n_outputs)
    return ClassifierModel(kind, n_outputs, input_channels, net)


def predict(model: ClassifierModel, sample: ModelInput) -> tuple[np.ndarray, np.ndarray]:
    """Probabilities (sigmoid of logits) and hard labels (1 iff p >= 0.5)."""
    logits = model.logits(sample)
    if not np.all(np.isfinite(logits)):
        warnings.warn("non-finite logits in predict")
    probs = expit(logits)
    hard = (probs >= 0.5).astype(np.int64)
    return probs, hard


def save_classifier(model: ClassifierModel, path: Path | str) -> Path:
    header = {
        "kind": model.kind.value,
        "n_outputs": model.n_outputs,
        "input_channels": model.input_channels,
    }
    return write_checkpoint(header, model.state_arrays(), path)


def load_classifier(path: Path | str) -> ClassifierModel:
    header, tensors = read_checkpoint(path)
    model = build_classifier(
        ArchitectureKind(header["kind"]),
        int(header["n_outputs"]),
        int(header["input_channels"]),
        seed=0,
    )
    model.load_state_arrays(tensors)
    return model

"""Volume generators: X-ray(s) in, CT volume out.

Two interchangeable implementations back the generator contract: a small
trainable encoder-decoder (2D strided-convolution encoders into a latent
code, decoded by upsampling stages that carry the depth axis as channels;
biplanar mode concatenates the two view encodings) and a disk-backed adapter
serving precomputed volumes keyed by patient id, for users who already ran a
full-scale synthesis model.
"""

from __future__ import annotations

import warnings
from abc import ABC, abstractmethod
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from .checkpoint import read_checkpoint, write_checkpoint
from .data_model import ImagePlane2D, Provenance, Volume3D, read_volume
from .phantom import ProjectionAxis, drr_project
from .preprocessing import min_max_normalize, resize_bilinear

DEFAULT_OUTPUT_DIMS = (64, 128, 128)
DEFAULT_LATENT_DIM = 128


class GeneratorMode(str, Enum):
    SV = "SV"  # single view: consumes the PA image only
    B = "B"    # biplanar: consumes PA and lateral

    @property
    def provenance(self) -> Provenance:
        return Provenance.GENERATED_SV if self is GeneratorMode.SV else Provenance.GENERATED_B


class CTGenerator(ABC):
    """Contract for anything that can stand in for the synthesis functions:
    deterministic volumes of fixed dims with voxels in [0, 1]."""

    mode: Optional[GeneratorMode]
    output_dims: tuple[int, int, int]

    @abstractmethod
    def generate(
        self,
        pa=None,
        lateral=None,
        patient_id: Optional[str] = None,
    ) -> Volume3D:
        """Produce the volume for one subject."""


def synthesize_ct(
    gen: CTGenerator,
    pa,
    lateral=None,
    patient_id: Optional[str] = None,
) -> Volume3D:
    """Run a generator on prepared view(s); biplanar mode requires a lateral."""
    if gen.mode is GeneratorMode.B and lateral is None:
        raise ValueError("biplanar generator requires lateral view")
    return gen.generate(pa, lateral, patient_id=patient_id)


def prepare_generator_input(img, size: tuple[int, int]) -> np.ndarray:
    """Resize a view to the generator's input resolution and min-max it to
    [0, 1]."""
    arr = img.pixels if isinstance(img, ImagePlane2D) else np.asarray(img, dtype=np.float64)
    resized = resize_bilinear(arr, size)
    return min_max_normalize(resized)


class _GenEncoder(nn.Module):
    def __init__(self, latent_dim: int):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(1, 8, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(8, 16, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(16, 32, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.AdaptiveAvgPool2d(4),
        )
        self.project = nn.Linear(32 * 4 * 4, latent_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.project(self.features(x).flatten(1))


class _SepConv2d(nn.Module):
    """Depthwise 3x3 plus pointwise 1x1; the cheap convolution on CPU."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.depthwise = nn.Conv2d(in_channels, in_channels, 3, padding=1, groups=in_channels)
        self.pointwise = nn.Conv2d(in_channels, out_channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.pointwise(self.depthwise(x))


class _GenDecoder(nn.Module):
    """Latent code to a (D, H, W) volume through 2x upsampling stages.

    The depth axis rides along as channels (every channel of the final layer
    is one axial slice); full 3D convolutions are prohibitively slow on a
    CPU-only box at this resolution.
    """

    def __init__(self, latent_dim: int, output_dims: tuple[int, int, int]):
        super().__init__()
        d, h, w = output_dims
        self.start = (h // 16, w // 16)
        self.expand = nn.Linear(latent_dim, 128 * self.start[0] * self.start[1])
        self.blocks = nn.Sequential(
            nn.Upsample(scale_factor=2, mode="nearest"),
            _SepConv2d(128, 64),
            nn.ReLU(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            _SepConv2d(64, 64),
            nn.ReLU(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            _SepConv2d(64, 64),
            nn.ReLU(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            _SepConv2d(64, d),
        )
        self.output_dims = output_dims

    def forward(self, latent: torch.Tensor) -> torch.Tensor:
        x = self.expand(latent).reshape(latent.shape[0], 128, *self.start)
        return torch.sigmoid(self.blocks(x))


class _ToyGeneratorNet(nn.Module):
    def __init__(self, mode: GeneratorMode, output_dims, latent_dim: int):
        super().__init__()
        self.mode = mode
        n_views = 2 if mode is GeneratorMode.B else 1
        self.encoders = nn.ModuleList(_GenEncoder(latent_dim) for _ in range(n_views))
        self.fuse = nn.Linear(n_views * latent_dim, latent_dim)
        self.decoder = _GenDecoder(latent_dim, output_dims)

    def forward(self, pa: torch.Tensor, lateral: Optional[torch.Tensor] = None) -> torch.Tensor:
        codes = [self.encoders[0](pa)]
        if self.mode is GeneratorMode.B:
            codes.append(self.encoders[1](lateral))
        latent = torch.relu(self.fuse(torch.cat(codes, dim=1)))
        return self.decoder(latent)


class ToyCTGenerator(CTGenerator):
    """Desk-scale trainable generator; voxels bounded in (0, 1) by the output
    sigmoid for any input."""

    def __init__(
        self,
        mode: GeneratorMode,
        output_dims: tuple[int, int, int] = DEFAULT_OUTPUT_DIMS,
        latent_dim: int = DEFAULT_LATENT_DIM,
        seed: int = 0,
    ):
        self.mode = GeneratorMode(mode)
        dims = tuple(int(x) for x in output_dims)
        if (
            len(dims) != 3
            or dims[0] < 2
            or any(x < 16 or x % 16 for x in dims[1:])
        ):
            raise ValueError(
                "output_dims must be (D >= 2, H, W) with H and W divisible by 16,"
                f" got {dims}"
            )
        self.output_dims = dims
        self.latent_dim = int(latent_dim)
        self.seed = int(seed)
        torch.manual_seed(self.seed)
        self.net = _ToyGeneratorNet(self.mode, dims, self.latent_dim)
        self.net.eval()
        self.train_log: Optional[dict] = None

    @property
    def input_size(self) -> tuple[int, int]:
        return (self.output_dims[1], self.output_dims[2])

    def _to_input_tensor(self, img, name: str) -> torch.Tensor:
        arr = img.pixels if isinstance(img, ImagePlane2D) else np.asarray(img)
        arr = np.asarray(arr, dtype=np.float32)
        if arr.shape != self.input_size:
            raise ValueError(
                f"{name} view must be pre-sized to {self.input_size}, got {arr.shape};"
                " run prepare_generator_input first"
            )
        return torch.from_numpy(arr)[None, None]

    def generate(self, pa=None, lateral=None, patient_id: Optional[str] = None) -> Volume3D:
        if pa is None:
            raise ValueError("generator requires a PA view")
        pa_t = self._to_input_tensor(pa, "PA")
        lat_t = None
        if self.mode is GeneratorMode.B:
            if lateral is None:
                raise ValueError("biplanar generator requires lateral view")
            lat_t = self._to_input_tensor(lateral, "lateral")
        with torch.no_grad():
            out = self.net(pa_t, lat_t)[0]
        return Volume3D(out.numpy(), self.mode.provenance)


class DiskVolumeAdapter(CTGenerator):
    """Serves `<patient_id>.vol` files from a directory.

    Stands in for either synthesis function when volumes were produced
    elsewhere; provenance is whatever the sidecar recorded at creation, not
    relabeled.
    """

    def __init__(self, root: Path | str, mode: Optional[GeneratorMode] = None):
        self.root = Path(root)
        if not self.root.is_dir():
            raise FileNotFoundError(f"volume directory not found: {self.root}")
        self.mode = GeneratorMode(mode) if mode is not None else None
        self._dims: Optional[tuple[int, int, int]] = None

    @property
    def output_dims(self) -> tuple[int, int, int]:
        if self._dims is None:
            candidates = sorted(self.root.glob("*.vol"))
            if not candidates:
                raise FileNotFoundError(f"no .vol files under {self.root}")
            self._dims = read_volume(candidates[0]).dims
        return self._dims

    def has(self, patient_id: str) -> bool:
        return (self.root / f"{patient_id}.vol").exists()

    def generate(self, pa=None, lateral=None, patient_id: Optional[str] = None) -> Volume3D:
        if patient_id is None:
            raise ValueError("disk-backed adapter needs a patient_id to key volumes")
        volume = read_volume(self.root / f"{patient_id}.vol")
        if self._dims is None:
            self._dims = volume.dims
        elif volume.dims != self._dims:
            raise ValueError(
                f"volume dims {volume.dims} for {patient_id!r} differ from {self._dims}"
            )
        return volume


@dataclass(frozen=True)
class GenTrainConfig:
    epochs: int = 30
    learning_rate: float = 1e-3
    batch_size: int = 8
    projection_weight: float = 0.1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.learning_rate <= 0 or self.projection_weight < 0:
            raise ValueError("learning_rate must be > 0 and projection_weight >= 0")


def train_toy_generator(
    pairs: Sequence[tuple],
    mode: GeneratorMode,
    config: GenTrainConfig = GenTrainConfig(),
) -> ToyCTGenerator:
    """Fit the toy generator on (pa, lateral, ground-truth volume) pairs.

    Minimizes per-voxel squared reconstruction error plus a projection
    consistency term: squared difference between the mean-depth projection of
    the prediction and the PA input. Deterministic given (pairs, config).
    """
    mode = GeneratorMode(mode)
    if len(pairs) < 16:
        raise ValueError(f"at least 16 training pairs required, got {len(pairs)}")
    volumes = []
    for i, (_, lateral, gt) in enumerate(pairs):
        if mode is GeneratorMode.B and lateral is None:
            raise ValueError(f"pair {i}: biplanar training needs a lateral view")
        volumes.append(gt.voxels if isinstance(gt, Volume3D) else np.asarray(gt))
    dims = tuple(volumes[0].shape)
    if any(tuple(v.shape) != dims for v in volumes):
        raise ValueError("all ground-truth volumes must share the same dims")

    gen = ToyCTGenerator(mode, output_dims=dims, seed=config.seed)
    size = gen.input_size
    pa_in = np.stack([prepare_generator_input(p, size) for p, _, _ in pairs])
    lat_in = None
    if mode is GeneratorMode.B:
        lat_in = np.stack([prepare_generator_input(l, size) for _, l, _ in pairs])

    pa_t = torch.from_numpy(pa_in.astype(np.float32))[:, None]
    lat_t = torch.from_numpy(lat_in.astype(np.float32))[:, None] if lat_in is not None else None
    gt_t = torch.from_numpy(np.stack(volumes).astype(np.float32))

    def recon_mse() -> float:
        with torch.no_grad():
            total = 0.0
            for start in range(0, len(pairs), config.batch_size):
                sl = slice(start, start + config.batch_size)
                pred = gen.net(pa_t[sl], lat_t[sl] if lat_t is not None else None)
                total += float(((pred - gt_t[sl]) ** 2).sum())
            return total / gt_t.numel()

    gen.net.train()
    optimizer = torch.optim.Adam(gen.net.parameters(), lr=config.learning_rate)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x6E6]))
    initial_mse = recon_mse()
    epoch_losses: list[float] = []
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(pairs))
        running, seen = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            idx = torch.from_numpy(order[start : start + config.batch_size].copy())
            optimizer.zero_grad()
            pred = gen.net(pa_t[idx], lat_t[idx] if lat_t is not None else None)
            recon = ((pred - gt_t[idx]) ** 2).mean()
            proj = ((pred.mean(dim=1) - pa_t[idx, 0]) ** 2).mean()
            loss = recon + config.projection_weight * proj
            if not torch.isfinite(loss):
                raise RuntimeError(
                    f"non-finite generator loss at epoch {epoch}, batch {start // config.batch_size}"
                )
            loss.backward()
            optimizer.step()
            running += float(loss.detach()) * len(idx)
            seen += len(idx)
        epoch_losses.append(running / seen)
    gen.net.eval()
    gen.train_log = {
        "initial_mse": initial_mse,
        "final_mse": recon_mse(),
        "epoch_losses": epoch_losses,
    }
    return gen


def projection_consistency(volume: Volume3D, pa) -> float:
    """Pearson correlation between a volume's PA projection and an X-ray."""
    proj = drr_project(volume, ProjectionAxis.PA).pixels.ravel()
    arr = (pa.pixels if isinstance(pa, ImagePlane2D) else np.asarray(pa, dtype=np.float64)).ravel()
    if proj.size != arr.size:
        raise ValueError(
            f"projection and image differ in size: {proj.size} vs {arr.size}"
        )
    if proj.std() < 1e-12 or arr.std() < 1e-12:
        warnings.warn("zero-variance image in projection consistency; defined as 0")
        return 0.0
    r = float(np.corrcoef(proj, arr)[0, 1])
    return max(-1.0, min(1.0, r))


def save_generator(gen: ToyCTGenerator, path: Path | str) -> Path:
    header = {
        "mode": gen.mode.value,
        "output_dims": list(gen.output_dims),
        "latent_dim": gen.latent_dim,
    }
    tensors = {k: v.detach().numpy().copy() for k, v in gen.net.state_dict().items()}
    return write_checkpoint(header, tensors, path)


def load_generator(path: Path | str) -> ToyCTGenerator:
    header, tensors = read_checkpoint(path)
    gen = ToyCTGenerator(
        GeneratorMode(header["mode"]),
        output_dims=tuple(header["output_dims"]),
        latent_dim=int(header["latent_dim"]),
        seed=0,
    )
    state = {k: torch.from_numpy(np.asarray(v, dtype=np.float32)) for k, v in tensors.items()}
    gen.net.load_state_dict(state)
    gen.net.eval()
    return gen

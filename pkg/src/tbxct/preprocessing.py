"""X-ray and CT preprocessing paths feeding the classifiers.

Two X-ray routes exist: the 2D-classifier route (364 resize, 320 crop,
standardization) and the fusion route (128 resize, [0,1] min-max, light
Gaussian blur). CT volumes are min-max normalized with the volume's global
range, sliced (full stack or the two central slices) and resized to 128x128;
training adds one shared in-plane rotation per sample.
"""

from __future__ import annotations

import math
import warnings
from enum import Enum
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .data_model import ImagePlane2D, Volume3D

XRAY_RESIZE = 364
XRAY_CROP = 320
CROP_SCALE_RANGE = (0.8, 1.0)
CROP_ASPECT_RANGE = (3.0 / 4.0, 4.0 / 3.0)
FLIP_PROBABILITY = 0.5
FUSION_SIZE = 128
BLUR_SIGMA = 1.0
BLUR_TRUNCATE = 2.0  # radius 2 taps -> 5x5 kernel at sigma 1
ROTATION_RANGE_DEG = 15.0


class SliceMode(str, Enum):
    FULL = "full"
    TWO_SLICE = "two_slice"


def _as_array(img) -> np.ndarray:
    if isinstance(img, ImagePlane2D):
        return np.asarray(img.pixels, dtype=np.float64)
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 2 or arr.size == 0:
        raise ValueError(f"expected a non-empty 2D image, got shape {arr.shape}")
    return arr


def resize_bilinear(arr: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of one plane (H, W) or a stack (S, H, W)."""
    arr = np.asarray(arr, dtype=np.float32)
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[None]
    t = torch.from_numpy(np.ascontiguousarray(arr))[:, None]
    out = F.interpolate(t, size=size, mode="bilinear", align_corners=False)
    res = out[:, 0].numpy()
    return res[0] if squeeze else res


def _standardize(arr: np.ndarray) -> np.ndarray:
    mean = float(arr.mean())
    std = float(arr.std())
    if std < 1e-8:
        warnings.warn("zero-variance image: standardization yields all zeros")
    return ((arr - mean) / max(std, 1e-8)).astype(np.float32)


def _sample_resized_crop(
    rng: np.random.Generator, height: int, width: int
) -> tuple[int, int, int, int]:
    """Sample (top, left, h, w) for a random resized crop; area scale in
    CROP_SCALE_RANGE, aspect log-uniform in CROP_ASPECT_RANGE."""
    area = height * width
    log_ratio = (math.log(CROP_ASPECT_RANGE[0]), math.log(CROP_ASPECT_RANGE[1]))
    for _ in range(10):
        target_area = area * rng.uniform(*CROP_SCALE_RANGE)
        aspect = math.exp(rng.uniform(*log_ratio))
        w = int(round(math.sqrt(target_area * aspect)))
        h = int(round(math.sqrt(target_area / aspect)))
        if 0 < w <= width and 0 < h <= height:
            top = int(rng.integers(0, height - h + 1))
            left = int(rng.integers(0, width - w + 1))
            return top, left, h, w
    # fallback: largest crop with an in-range aspect, centered
    in_ratio = width / height
    if in_ratio < CROP_ASPECT_RANGE[0]:
        w = width
        h = int(round(w / CROP_ASPECT_RANGE[0]))
    elif in_ratio > CROP_ASPECT_RANGE[1]:
        h = height
        w = int(round(h * CROP_ASPECT_RANGE[1]))
    else:
        w, h = width, height
    return (height - h) // 2, (width - w) // 2, h, w


def preprocess_xray_2d(
    img, train_mode: bool = False, rng: Optional[np.random.Generator] = None
) -> np.ndarray:
    """X-ray route for the 2D classifiers: 320x320, zero mean, unit variance.

    Training applies a random resized crop and a horizontal flip; evaluation
    center-crops and is rng-free.
    """
    arr = _as_array(img)
    resized = resize_bilinear(arr, (XRAY_RESIZE, XRAY_RESIZE))
    if train_mode:
        if rng is None:
            raise ValueError("train-mode preprocessing requires an rng")
        top, left, h, w = _sample_resized_crop(rng, XRAY_RESIZE, XRAY_RESIZE)
        crop = resized[top : top + h, left : left + w]
        crop = resize_bilinear(crop, (XRAY_CROP, XRAY_CROP))
        if rng.random() < FLIP_PROBABILITY:
            crop = crop[:, ::-1].copy()
    else:
        offset = (XRAY_RESIZE - XRAY_CROP) // 2
        crop = resized[offset : offset + XRAY_CROP, offset : offset + XRAY_CROP]
    return _standardize(crop)


def min_max_normalize(arr: np.ndarray, what: str = "image") -> np.ndarray:
    lo = float(arr.min())
    hi = float(arr.max())
    if hi - lo < 1e-12:
        warnings.warn(f"constant {what}: min-max normalization yields all zeros")
        return np.zeros_like(arr, dtype=np.float32)
    return ((arr - lo) / (hi - lo)).astype(np.float32)


def preprocess_xray_fusion(img) -> np.ndarray:
    """X-ray route for fusion with CT slices: 128x128 in [0, 1], denoised."""
    arr = _as_array(img)
    resized = resize_bilinear(arr, (FUSION_SIZE, FUSION_SIZE))
    normalized = min_max_normalize(resized)
    blurred = ndimage.gaussian_filter(
        normalized.astype(np.float64), sigma=BLUR_SIGMA, truncate=BLUR_TRUNCATE
    )
    return blurred.astype(np.float32)


def central_slices(depth: int, k: int = 2) -> tuple[int, ...]:
    """Indices of the k consecutive central slices; k=2 gives
    (depth//2 - 1, depth//2)."""
    if depth < 1 or k < 1:
        raise ValueError(f"depth and k must be positive, got depth={depth}, k={k}")
    if depth < k:
        raise ValueError(f"cannot take {k} central slices from depth {depth}")
    start = depth // 2 - k // 2
    return tuple(range(start, start + k))


def ct_slice_stack(volume: Volume3D, slice_mode: SliceMode) -> np.ndarray:
    """Deterministic part of the CT route: global min-max normalization,
    central-slice selection, per-slice 128x128 resize."""
    slice_mode = SliceMode(slice_mode)
    voxels = np.asarray(volume.voxels, dtype=np.float64)
    normalized = min_max_normalize(voxels, what="volume")
    depth = normalized.shape[0]
    if slice_mode is SliceMode.TWO_SLICE:
        indices = central_slices(depth, 2)
        stack = normalized[list(indices)]
    else:
        stack = normalized
    if stack.shape[1:] != (FUSION_SIZE, FUSION_SIZE):
        stack = resize_bilinear(stack, (FUSION_SIZE, FUSION_SIZE))
    return stack.astype(np.float32)


def rotate_stack(stack: np.ndarray, angle_deg: float) -> np.ndarray:
    """In-plane rotation of a slice stack about its center: one shared angle,
    bilinear resampling, zero fill outside the frame."""
    t = torch.from_numpy(np.ascontiguousarray(stack, dtype=np.float32))[None]
    a = math.radians(angle_deg)
    theta = torch.tensor(
        [[[math.cos(a), -math.sin(a), 0.0], [math.sin(a), math.cos(a), 0.0]]],
        dtype=torch.float32,
    )
    grid = F.affine_grid(theta, list(t.shape), align_corners=False)
    rotated = F.grid_sample(
        t, grid, mode="bilinear", padding_mode="zeros", align_corners=False
    )
    return rotated[0].numpy()


def augment_ct_stack(stack: np.ndarray, rng: Optional[np.random.Generator]) -> np.ndarray:
    """Train-time CT augmentation: one rotation angle shared by all slices."""
    if rng is None:
        raise ValueError("train-mode preprocessing requires an rng")
    angle = float(rng.uniform(-ROTATION_RANGE_DEG, ROTATION_RANGE_DEG))
    return rotate_stack(stack, angle)


def preprocess_ct(
    volume: Volume3D,
    slice_mode: SliceMode,
    train_mode: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    """CT route: normalized, sliced, resized stack (S x 128 x 128);
    training rotates all slices of the sample by one random angle."""
    stack = ct_slice_stack(volume, slice_mode)
    if train_mode:
        stack = augment_ct_stack(stack, rng)
    return stack

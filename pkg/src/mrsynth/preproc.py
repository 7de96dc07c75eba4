"""Three-channel inputs (intensity + two gradients), normalization, brain masks."""

from __future__ import annotations

import dataclasses

import numpy as np

from .dataio import Volume
from .tensor import Tensor, concat, conv2d

MASK_EPS = 1e-6


def _gradient_kernel(dtype) -> np.ndarray:
    k = np.zeros((2, 1, 3, 3), dtype=dtype)
    # horizontal: (x[i, j+1] - x[i, j-1]) / 2
    k[0, 0, 1, 0], k[0, 0, 1, 2] = -0.5, 0.5
    # vertical: (x[i+1, j] - x[i-1, j]) / 2
    k[1, 0, 0, 1], k[1, 0, 2, 1] = -0.5, 0.5
    return k


GRADIENT_KERNEL = _gradient_kernel(np.float64)


def gradient_channels(intensity) -> Tensor:
    """Stack ``[x, Dx x, Dy x]`` along the channel axis.

    ``intensity`` is ``(1, H, W)`` or ``(N, 1, H, W)``.  Dx and Dy are central
    differences applied as fixed zero-padded 3x3 convolutions; the result is
    differentiable w.r.t. ``intensity`` so the loss can expand network output
    with exactly the same operator.
    """
    x = intensity if isinstance(intensity, Tensor) else Tensor(intensity)
    if x.shape[-3] != 1:
        raise ValueError(f"gradient_channels expects one intensity channel, got shape {x.shape}")
    kernel = Tensor(GRADIENT_KERNEL.astype(x.dtype), dtype=x.dtype)
    grads = conv2d(x, kernel, None, stride=1, pad=1)
    return concat([x, grads], axis=x.ndim - 3)


def gradient_channels_np(intensity: np.ndarray) -> np.ndarray:
    return gradient_channels(Tensor(intensity)).data


def normalize_volume(vol: Volume) -> Volume:
    """Divide by the volume-wide maximum so intensities span ``[0, 1]``."""
    peak = float(vol.voxels.max())
    if np.any(vol.voxels < 0):
        raise ValueError("normalize_volume expects nonnegative intensities")
    if peak <= 0:
        raise ValueError("cannot normalize an all-zero volume")
    if peak == 1.0:
        return dataclasses.replace(vol, voxels=vol.voxels.copy())
    return dataclasses.replace(vol, voxels=vol.voxels / np.float32(peak), scale=vol.scale * peak)


def denormalize_volume(vol: Volume) -> Volume:
    return dataclasses.replace(vol, voxels=vol.voxels * np.float32(vol.scale), scale=1.0)


def nonzero_mask(target) -> np.ndarray:
    """Binary float mask, 1 where ``|target| > 1e-6``; same shape as ``target``."""
    arr = target.data if isinstance(target, Tensor) else np.asarray(target)
    return (np.abs(arr) > MASK_EPS).astype(np.float32)

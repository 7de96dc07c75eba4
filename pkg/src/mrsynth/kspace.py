"""Retrospective Cartesian k-space undersampling.

Slices are taken to a centered, unitary 2D spectrum, all phase-encode rows
outside a central band are zeroed, and the zero-filled magnitude image is
returned as the degraded T2 prior.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .tensor import Tensor


@dataclass(frozen=True)
class KSpaceGrid:
    """Centered complex spectrum of one ``height x width`` slice (DC at ``[H//2, W//2]``)."""

    data: np.ndarray

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class UndersampleSpec:
    """Keep ``fraction`` of the phase-encode rows around DC."""

    fraction: Fraction
    scheme: str = "central-band"

    def __post_init__(self):
        frac = parse_fraction(self.fraction)
        if not 0 < frac <= 1:
            raise ValueError(f"undersampling fraction must lie in (0, 1], got {frac}")
        if self.scheme != "central-band":
            raise ValueError(f"unknown sampling scheme {self.scheme!r}")
        object.__setattr__(self, "fraction", frac)

    def retained_rows(self, height: int) -> int:
        # round-half-up, never fewer than one line
        return max(1, min(height, math.floor(self.fraction * height + Fraction(1, 2))))

    def label(self) -> str:
        return f"{self.fraction.numerator}/{self.fraction.denominator}"


def parse_fraction(value) -> Fraction:
    """Accept ``"1/8"``, ``0.125``, ``Fraction(1, 8)`` and the like."""
    if isinstance(value, Fraction):
        return value
    if isinstance(value, str):
        return Fraction(value.strip())
    return Fraction(value).limit_denominator(1 << 16)


def _slice_array(slice_) -> np.ndarray:
    arr = slice_.data if isinstance(slice_, Tensor) else np.asarray(slice_)
    if arr.ndim == 3:
        if arr.shape[0] != 1:
            raise ValueError(f"expected a single-channel slice, got shape {arr.shape}")
        arr = arr[0]
    if arr.ndim != 2:
        raise ValueError(f"expected (1,H,W) or (H,W) slice, got shape {arr.shape}")
    return arr.astype(np.float64)


def to_kspace(slice_) -> KSpaceGrid:
    """Unitary, center-shifted 2D DFT of a real slice."""
    arr = _slice_array(slice_)
    spec = np.fft.fftshift(np.fft.fft2(np.fft.ifftshift(arr), norm="ortho"))
    return KSpaceGrid(spec)


def band_mask(height: int, spec: UndersampleSpec) -> np.ndarray:
    """Boolean per-row mask of the retained central band."""
    n = spec.retained_rows(height)
    start = height // 2 - n // 2
    mask = np.zeros(height, dtype=bool)
    mask[start : start + n] = True
    return mask


def undersample(grid: KSpaceGrid, spec: UndersampleSpec) -> KSpaceGrid:
    """Zero every row outside the central band; the input grid is left untouched."""
    rows = band_mask(grid.height, spec)
    out = np.zeros_like(grid.data)
    out[rows] = grid.data[rows]
    return KSpaceGrid(out)


def zero_filled_recon(grid: KSpaceGrid) -> Tensor:
    """Magnitude of the inverse transform, shape ``(1, H, W)``."""
    img = np.fft.fftshift(np.fft.ifft2(np.fft.ifftshift(grid.data), norm="ortho"))
    return Tensor(np.abs(img)[None], dtype=np.float64)


def undersample_slice(slice_, spec: UndersampleSpec) -> np.ndarray:
    """Convenience: forward transform, band-limit, zero-filled magnitude ``(H, W)``."""
    return zero_filled_recon(undersample(to_kspace(slice_), spec)).data[0]


def undersample_volume(voxels: np.ndarray, spec: UndersampleSpec) -> np.ndarray:
    """Apply :func:`undersample_slice` to every axial slice of a ``(S, H, W)`` array."""
    voxels = np.asarray(voxels)
    out = np.empty(voxels.shape, dtype=np.float32)
    for s in range(voxels.shape[0]):
        out[s] = undersample_slice(voxels[s], spec)
    return out

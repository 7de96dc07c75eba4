"""Volumes, the MVOL container, and the paired T1/T2 brain phantom."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MVOL_MAGIC = b"MVOL1\n"
_MAX_DIM = 1 << 20

MODALITIES = ("T1W", "T2W", "synthetic")


class FormatError(ValueError):
    """Malformed MVOL or checkpoint file."""


@dataclass
class Volume:
    """``(slices, height, width)`` float32 image with a modality tag.

    ``scale`` is the factor that was divided out by normalization
    (1.0 for raw volumes); ``voxels * scale`` recovers the original.
    """

    voxels: np.ndarray
    modality: str = "synthetic"
    scale: float = 1.0

    def __post_init__(self):
        self.voxels = np.ascontiguousarray(self.voxels, dtype=np.float32)
        if self.voxels.ndim != 3:
            raise ValueError(f"volume must be 3D (slices, height, width), got {self.voxels.shape}")
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.voxels.shape)

    def validate(self) -> None:
        if not np.all(np.isfinite(self.voxels)):
            raise ValueError("volume contains non-finite voxels")
        if np.any(self.voxels < 0):
            raise ValueError("volume contains negative voxels")


# ------------------------------------------------------------------------ MVOL


def mvol_bytes(vol: Volume) -> bytes:
    s, h, w = vol.dims
    header = MVOL_MAGIC + f"{s} {h} {w}\n".encode("ascii")
    return header + vol.voxels.astype("<f4").tobytes(order="C")


def mvol_write(vol: Volume, path) -> None:
    """Write ``vol`` as MVOL: magic line, ``"slices height width"`` line, LE f32 voxels."""
    Path(path).write_bytes(mvol_bytes(vol))


def mvol_parse(raw: bytes, modality: str = "synthetic") -> Volume:
    if not raw.startswith(MVOL_MAGIC):
        raise FormatError(f"bad magic at offset 0: expected {MVOL_MAGIC!r}, found {raw[:len(MVOL_MAGIC)]!r}")
    offset = len(MVOL_MAGIC)
    end = raw.find(b"\n", offset)
    if end < 0:
        raise FormatError(f"unterminated dims line starting at offset {offset}")
    fields = raw[offset:end].split()
    try:
        dims = tuple(int(f) for f in fields)
    except ValueError:
        raise FormatError(f"non-integer dims line at offset {offset}: {raw[offset:end]!r}") from None
    if len(dims) != 3:
        raise FormatError(f"dims line at offset {offset} has {len(dims)} fields, expected 3")
    if any(d <= 0 for d in dims):
        raise FormatError(f"empty dims {dims} at offset {offset}")
    if any(d > _MAX_DIM for d in dims):
        raise FormatError(f"dims {dims} at offset {offset} exceed limit {_MAX_DIM}")
    payload_start = end + 1
    expected = dims[0] * dims[1] * dims[2] * 4
    actual = len(raw) - payload_start
    if actual != expected:
        kind = "truncated" if actual < expected else "oversized"
        raise FormatError(
            f"{kind} payload at offset {payload_start}: expected {expected} bytes, found {actual}"
        )
    voxels = np.frombuffer(raw, dtype="<f4", offset=payload_start).reshape(dims)
    return Volume(voxels.astype(np.float32), modality=modality)


def mvol_read(path, modality: str = "synthetic") -> Volume:
    return mvol_parse(Path(path).read_bytes(), modality=modality)


# --------------------------------------------------------------------- phantom


@dataclass(frozen=True)
class Tissue:
    name: str
    t1: float
    t2: float
    radius_scale: float


# nested shells, outermost first; T1 and T2 orderings deliberately disagree
DEFAULT_TISSUES = (
    Tissue("csf_shell", 0.25, 1.00, 1.00),
    Tissue("gray_matter", 0.60, 0.70, 0.88),
    Tissue("white_matter", 0.90, 0.40, 0.66),
    Tissue("ventricle", 0.20, 0.95, 0.22),
)


@dataclass(frozen=True)
class PhantomSpec:
    """Parameters of a paired T1/T2 ellipsoid phantom.

    Lesions are small ellipsoids inside the white matter; ``lesion_t1_delta``
    and ``lesion_t2`` set their near-invisible T1 contrast and bright T2
    signal, so the lesion is mostly recoverable from T2 information.
    """

    seed: int = 0
    dims: tuple[int, int, int] = (32, 64, 64)
    tissues: tuple[Tissue, ...] = DEFAULT_TISSUES
    lesion_count: int = 3
    lesion_radius: tuple[float, float] = (2.0, 4.0)
    lesion_t1_delta: float = -0.08
    lesion_t2: float = 0.85


@dataclass
class PhantomPair:
    t1: Volume
    t2: Volume
    support: np.ndarray
    tissue_labels: np.ndarray = field(repr=False)
    lesions: list = field(default_factory=list)


def _grid(dims):
    s, h, w = dims
    zz, yy, xx = np.meshgrid(
        np.arange(s, dtype=np.float64) + 0.5,
        np.arange(h, dtype=np.float64) + 0.5,
        np.arange(w, dtype=np.float64) + 0.5,
        indexing="ij",
    )
    return zz, yy, xx


def make_phantom_pair(spec: PhantomSpec = PhantomSpec()) -> PhantomPair:
    """Build a deterministic T1/T2 pair from ``spec.seed``.

    Returns the two volumes (raw intensities in ``[0, 1]``), the analytic
    brain support and the integer tissue label map (0 background, 1.. tissues,
    ``len(tissues) + 1`` lesion).
    """
    rng = np.random.default_rng(spec.seed)
    s, h, w = spec.dims
    zz, yy, xx = _grid(spec.dims)

    center = np.array([s / 2, h / 2, w / 2]) + rng.uniform(-1.0, 1.0, size=3)
    radii = np.array([s, h, w]) * 0.5 * rng.uniform(0.78, 0.86, size=3)
    tilt = rng.uniform(-0.25, 0.25)
    cy, sy = np.cos(tilt), np.sin(tilt)
    dy, dx = yy - center[1], xx - center[2]
    ry = cy * dy - sy * dx
    rx = sy * dy + cy * dx
    dz = zz - center[0]

    def inside(scale):
        return ((dz / (radii[0] * scale)) ** 2 + (ry / (radii[1] * scale)) ** 2 + (rx / (radii[2] * scale)) ** 2) <= 1.0

    labels = np.zeros(spec.dims, dtype=np.int16)
    for k, tissue in enumerate(spec.tissues, start=1):
        labels[inside(tissue.radius_scale)] = k
    support = labels > 0

    lesions = []
    lesion_label = len(spec.tissues) + 1
    host = len(spec.tissues) - 1 if len(spec.tissues) > 1 else 1
    outer = spec.tissues[host - 1].radius_scale
    inner = spec.tissues[host].radius_scale if host < len(spec.tissues) else 0.0
    shortest = float(radii.min()) * outer
    for _ in range(spec.lesion_count):
        r = rng.uniform(*spec.lesion_radius)
        if r >= shortest:
            raise ValueError(f"lesion radius {r:.2f} exceeds the brain support (semi-axis {shortest:.2f})")
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        # a ball fits if its centre is at least r from the host shell boundary
        hi = 1.0 - r / shortest
        t = rng.uniform(min(inner / outer, hi), hi)
        pos = direction * radii * outer * t
        blob = (dz - pos[0]) ** 2 + (ry - pos[1]) ** 2 + (rx - pos[2]) ** 2 <= r * r
        labels[blob & support] = lesion_label
        # back from the tilted frame to voxel coordinates
        offset = np.array([pos[0], cy * pos[1] + sy * pos[2], -sy * pos[1] + cy * pos[2]])
        lesions.append({"center": tuple(float(p) for p in offset + center), "radius": float(r)})

    t1 = np.zeros(spec.dims, dtype=np.float32)
    t2 = np.zeros(spec.dims, dtype=np.float32)
    for k, tissue in enumerate(spec.tissues, start=1):
        t1[labels == k] = tissue.t1
        t2[labels == k] = tissue.t2
    if lesions:
        host_t1 = spec.tissues[host - 1].t1
        t1[labels == lesion_label] = host_t1 + spec.lesion_t1_delta
        t2[labels == lesion_label] = spec.lesion_t2

    return PhantomPair(
        t1=Volume(t1, modality="T1W"),
        t2=Volume(t2, modality="T2W"),
        support=support,
        tissue_labels=labels,
        lesions=lesions,
    )


# ------------------------------------------------------------- subject layout

T1_NAME = "t1.mvol"
T2_NAME = "t2.mvol"
SUPPORT_NAME = "support.mvol"


def write_subject(pair: PhantomPair, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    mvol_write(pair.t1, directory / T1_NAME)
    mvol_write(pair.t2, directory / T2_NAME)
    mvol_write(Volume(pair.support.astype(np.float32)), directory / SUPPORT_NAME)


def subject_files(directory) -> dict[str, Path]:
    directory = Path(directory)
    files = {"t1": directory / T1_NAME, "t2": directory / T2_NAME}
    for key, path in files.items():
        if not path.exists():
            raise FileNotFoundError(f"subject {os.fspath(directory)} lacks {path.name}")
    return files

"""PSNR / MAE, slice-wise consistency profiles, leave-one-out folds and ablation grids."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from .dataio import Volume

INPUT_MODES = ("T1-only", "T1+1/8T2", "T1+1/16T2")
ABLATION_ROWS = (("DAM", 0), ("DAM+1HG", 1), ("DAM+2HG", 2))
ABLATION_COLUMNS = ("T1-only", "T1+1/8T2")


def _voxels(v) -> np.ndarray:
    return np.asarray(v.voxels if isinstance(v, Volume) else v, dtype=np.float64)


def _pair(a, b, mask=None):
    x, y = _voxels(a), _voxels(b)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        if m.shape != x.shape:
            raise ValueError(f"mask shape {m.shape} does not match volumes {x.shape}")
        if not m.any():
            raise ValueError("empty evaluation mask")
        x, y = x[m], y[m]
    return x, y


@dataclass(frozen=True)
class PSNR:
    """PSNR in dB; ``exact`` marks identical inputs, where ``db`` is ``inf``."""

    db: float
    exact: bool = False

    def __float__(self) -> float:
        return self.db

    def __str__(self) -> str:
        return "exact" if self.exact else f"{self.db:.4f}"


def psnr(a, b, max_val: float = 1.0, mask=None) -> PSNR:
    """``20 log10(max_val / RMSE)`` over all voxels (or those in ``mask``)."""
    x, y = _pair(a, b, mask)
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return PSNR(math.inf, exact=True)
    return PSNR(20.0 * math.log10(max_val / math.sqrt(mse)))


def mae(a, b, mask=None) -> float:
    x, y = _pair(a, b, mask)
    return float(np.mean(np.abs(x - y)))


def per_slice_psnr(a, b, max_val: float = 1.0) -> list[PSNR]:
    x, y = _pair(a, b)
    return [psnr(x[s], y[s], max_val) for s in range(x.shape[0])]


@dataclass
class MetricsReport:
    psnr_db: PSNR
    mae: float
    per_slice_psnr: list[PSNR]
    config_hash: str = ""
    input_mode: str = "T1-only"
    masked: bool = False

    def rows(self) -> list[tuple[str, str]]:
        out = [
            ("input_mode", self.input_mode),
            ("psnr_db", str(self.psnr_db)),
            ("mae", f"{self.mae:.6g}"),
            ("masked", str(self.masked).lower()),
            ("config_hash", self.config_hash),
        ]
        out += [(f"slice_{i}_psnr_db", str(p)) for i, p in enumerate(self.per_slice_psnr)]
        return out


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:12]


def evaluate(pred, truth, input_mode: str = "T1-only", masked: bool = False, mask=None, config: dict | None = None) -> MetricsReport:
    """Volume-level metrics; with ``masked`` only voxels where the truth is nonzero count."""
    if input_mode not in INPUT_MODES:
        raise ValueError(f"unknown input mode {input_mode!r}; choose from {INPUT_MODES}")
    if masked and mask is None:
        mask = np.abs(_voxels(truth)) > 1e-6
    m = mask if masked else None
    return MetricsReport(
        psnr_db=psnr(pred, truth, mask=m),
        mae=mae(pred, truth, mask=m),
        per_slice_psnr=per_slice_psnr(pred, truth),
        config_hash=config_hash(config or {}),
        input_mode=input_mode,
        masked=masked,
    )


# ----------------------------------------------------------------- profiles


@dataclass
class ConsistencyProfile:
    pixel: tuple[int, int]
    series: np.ndarray
    reference: np.ndarray


def slice_profile(pred, truth, pixel: tuple[int, int]) -> ConsistencyProfile:
    """Intensity of one axial pixel traced through every slice of both volumes."""
    p, t = _pair(pred, truth)
    r, c = pixel
    _, h, w = p.shape
    if not (0 <= r < h and 0 <= c < w):
        raise ValueError(f"pixel {pixel} outside the {h}x{w} axial plane")
    return ConsistencyProfile((r, c), p[:, r, c].copy(), t[:, r, c].copy())


# --------------------------------------------------------- cross-validation


def leave_one_out(subjects: Sequence) -> Iterator[tuple[list, object]]:
    """Yield ``(train_subjects, test_subject)``, each subject tested exactly once."""
    subjects = list(subjects)
    if len(subjects) < 2:
        raise ValueError("leave-one-out needs at least two subjects")
    for i, test in enumerate(subjects):
        yield subjects[:i] + subjects[i + 1 :], test


# ----------------------------------------------------------------- ablation


@dataclass
class AblationTable:
    """Rows DAM / DAM+1HG / DAM+2HG by columns T1-only / T1+1/8T2."""

    cells: dict[tuple[str, str], MetricsReport | None] = field(default_factory=dict)
    baselines: dict[str, PSNR | None] = field(default_factory=dict)

    @property
    def shape(self) -> tuple[int, int]:
        return len(ABLATION_ROWS), len(ABLATION_COLUMNS)

    def value(self, row: str, column: str) -> float | None:
        cell = self.cells.get((row, column))
        return None if cell is None else float(cell.psnr_db)

    def csv_rows(self) -> list[list[str]]:
        out = [["module"] + list(ABLATION_COLUMNS)]
        for row, _ in ABLATION_ROWS:
            vals = []
            for col in ABLATION_COLUMNS:
                cell = self.cells.get((row, col))
                vals.append("absent" if cell is None else str(cell.psnr_db))
            out.append([row] + vals)
        if self.baselines:
            out.append(
                ["zero-filled"] + [str(self.baselines[c]) if self.baselines.get(c) else "n/a" for c in ABLATION_COLUMNS]
            )
        return out

    def render(self) -> str:
        rows = self.csv_rows()
        widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
        lines = ["  ".join(cell.ljust(w) for cell, w in zip(r, widths)) for r in rows]
        lines.insert(1, "  ".join("-" * w for w in widths))
        return "\n".join(lines)


def run_ablation(
    predict: Callable[[int, str], Volume | None],
    truth: Volume,
    baselines: dict[str, Volume] | None = None,
) -> AblationTable:
    """Fill the 3x2 grid.

    ``predict(sbm_count, column)`` returns the predicted test volume for that
    cell, or None when its checkpoint is missing (the cell is then marked
    absent and the run continues).  ``baselines`` maps a column to the
    zero-filled input it should be compared against.
    """
    table = AblationTable()
    for row, sbm_count in ABLATION_ROWS:
        for col in ABLATION_COLUMNS:
            pred = predict(sbm_count, col)
            table.cells[(row, col)] = None if pred is None else evaluate(pred, truth, input_mode=col)
    for col in ABLATION_COLUMNS:
        base = (baselines or {}).get(col)
        table.baselines[col] = None if base is None else psnr(base, truth)
    return table


def loss_roughness(history: Sequence[float], window: int = 10) -> float:
    """Std of step-to-step loss changes after a moving-average detrend (convergence smoothness)."""
    h = np.asarray(history, dtype=np.float64)
    if h.size < window + 2:
        return float("nan")
    trend = np.convolve(h, np.ones(window) / window, mode="valid")
    resid = h[window - 1 :] - trend
    return float(np.std(np.diff(resid)))

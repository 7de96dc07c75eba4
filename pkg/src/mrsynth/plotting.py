"""Matplotlib figures written next to the CSV reports.

All functions render to a file and close their figure; the Agg backend is
selected so the CLI works without a display.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}


def _save(fig, path) -> None:
    fig.savefig(path)
    plt.close(fig)


def plot_profile(profile, path, title: str | None = None) -> None:
    """Predicted vs reference intensity of one pixel across slices."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6, 2.6))
        idx = np.arange(len(profile.series))
        ax.plot(idx, profile.reference, color="0.2", lw=1.4, label="ground truth T2")
        ax.plot(idx, profile.series, color="tab:red", lw=1.1, ls="--", label="reconstructed T2")
        ax.set_xlabel("slice index")
        ax.set_ylabel("intensity")
        ax.set_title(title or f"pixel {profile.pixel}")
        ax.legend(frameon=False)
        _save(fig, path)


def plot_loss_history(histories: dict, path) -> None:
    """Per-stage loss curves laid end to end, stage boundaries marked."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6, 2.8))
        offset = 0
        for stage in sorted(histories):
            h = np.asarray(histories[stage], dtype=float)
            ax.plot(np.arange(offset, offset + h.size), h, lw=0.9, label=f"stage {stage}")
            offset += h.size
            ax.axvline(offset, color="0.8", lw=0.6)
        ax.set_yscale("log")
        ax.set_xlabel("step")
        ax.set_ylabel("masked 3-channel RMSE")
        ax.legend(frameon=False)
        _save(fig, path)


def plot_slice_psnr(report, path) -> None:
    vals = [p.db if not p.exact else np.nan for p in report.per_slice_psnr]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6, 2.4))
        ax.plot(vals, marker=".", lw=0.8, color="tab:blue")
        ax.axhline(report.psnr_db.db, color="0.4", lw=0.8, ls=":", label=f"volume {report.psnr_db} dB")
        ax.set_xlabel("slice index")
        ax.set_ylabel("PSNR [dB]")
        ax.legend(frameon=False)
        _save(fig, path)


def plot_comparison(slices: dict[str, np.ndarray], path, vmax: float = 1.0) -> None:
    """Side-by-side axial slices, e.g. T1 / zero-filled / prediction / truth."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(slices), figsize=(2.2 * len(slices), 2.4))
        axes = np.atleast_1d(axes)
        for ax, (name, img) in zip(axes, slices.items()):
            ax.imshow(img, cmap="gray", vmin=0.0, vmax=vmax)
            ax.set_title(name)
            ax.axis("off")
        _save(fig, path)


def plot_ablation(table, path) -> None:
    from .evaluate import ABLATION_COLUMNS, ABLATION_ROWS

    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 2.8))
        width = 0.38
        x = np.arange(len(ABLATION_ROWS))
        for k, col in enumerate(ABLATION_COLUMNS):
            vals = [table.value(row, col) for row, _ in ABLATION_ROWS]
            vals = [np.nan if v is None else v for v in vals]
            ax.bar(x + (k - 0.5) * width, vals, width, label=col)
            base = table.baselines.get(col)
            if base is not None:
                ax.axhline(base.db, lw=0.8, ls=":", color=f"C{k}", label=f"zero-filled {col}")
        ax.set_xticks(x, [row for row, _ in ABLATION_ROWS])
        ax.set_ylabel("PSNR [dB]")
        values = [table.value(r, c) for r, _ in ABLATION_ROWS for c in ABLATION_COLUMNS]
        values += [b.db for b in table.baselines.values() if b is not None]
        finite = [v for v in values if v is not None and np.isfinite(v)]
        if finite:
            ax.set_ylim(min(finite) - 3, max(finite) + 1.5)
        ax.legend(frameon=False, loc="best")
        _save(fig, path)

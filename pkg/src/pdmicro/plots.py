"""Deterministic static plots from experiment CSV files.

Two schemas are understood: the sweep aggregate table (residual wavefront
error vs axis value, one errorbar line per estimator, plus a wall-time
panel) and the correction comparison table (SSIM of each correction
approach vs photon level, with RWE on a right-hand scale).  Rendering the
same CSV twice produces byte-identical images.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be pinned first)
import numpy as np  # noqa: E402

__all__ = ["render_correction_plot", "render_plots", "render_sweep_plot"]

_SWEEP_COLUMNS = {"axis_value", "estimator", "trials", "mean_rwe", "stderr",
                  "mean_wall_time"}
_CORRECTION_COLUMNS = {"seed", "axis_value", "photons_per_pixel",
                       "ssim_deconvolved", "ssim_reacquired",
                       "ssim_uncorrected", "rwe_used", "dose_factor"}

_COLORS = {"gaussian": "tab:blue", "poisson": "tab:orange",
           "gaussian-downscaled": "tab:cyan", "poisson-downscaled": "tab:red"}
_PNG_METADATA = {"Software": "pdmicro"}


def _read_rows(path: Path) -> tuple[list[dict], set[str]]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ValueError(f"{path} is empty; nothing to plot")
        rows = list(reader)
    if not rows:
        raise ValueError(f"{path} has a header but no data rows")
    return rows, set(reader.fieldnames)


def _save(fig, out_path: Path) -> Path:
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, dpi=150, metadata=_PNG_METADATA)
    plt.close(fig)
    return out_path


def render_sweep_plot(csv_path, out_path, xlabel: str = "axis value",
                      logx: bool = False) -> Path:
    """Mean RWE (with standard-error bars) and wall time vs the sweep axis."""
    csv_path = Path(csv_path)
    rows, columns = _read_rows(csv_path)
    if not _SWEEP_COLUMNS <= columns:
        raise ValueError(
            f"{csv_path} does not match the sweep aggregate schema; "
            f"missing {sorted(_SWEEP_COLUMNS - columns)}"
        )
    estimators = sorted({r["estimator"] for r in rows})
    fig, (ax_rwe, ax_time) = plt.subplots(
        1, 2, figsize=(9.0, 3.6), constrained_layout=True
    )
    for name in estimators:
        pts = sorted((float(r["axis_value"]), float(r["mean_rwe"]),
                      float(r["stderr"]), float(r["mean_wall_time"]))
                     for r in rows if r["estimator"] == name)
        x, mean, err, wall = (np.array(col) for col in zip(*pts))
        color = _COLORS.get(name)
        ax_rwe.errorbar(x, mean, yerr=err, marker="o", capsize=3,
                        label=name, color=color)
        ax_time.plot(x, wall, marker="s", label=name, color=color)
    for ax, ylabel in ((ax_rwe, "residual wavefront error (waves)"),
                       (ax_time, "mean wall time (s)")):
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        if logx:
            ax.set_xscale("log")
        ax.grid(True, alpha=0.3)
    ax_rwe.legend()
    return _save(fig, Path(out_path))


def render_correction_plot(csv_path, out_path) -> Path:
    """Mean SSIM per correction approach vs photon level, RWE on the right."""
    csv_path = Path(csv_path)
    rows, columns = _read_rows(csv_path)
    if not _CORRECTION_COLUMNS <= columns:
        raise ValueError(
            f"{csv_path} does not match the correction schema; "
            f"missing {sorted(_CORRECTION_COLUMNS - columns)}"
        )
    levels = sorted({float(r["photons_per_pixel"]) for r in rows})

    def mean_of(column: str) -> np.ndarray:
        return np.array([
            np.mean([float(r[column]) for r in rows
                     if float(r["photons_per_pixel"]) == level])
            for level in levels
        ])

    fig, ax = plt.subplots(figsize=(6.0, 4.0), constrained_layout=True)
    x = np.array(levels)
    for column, label, color in (
        ("ssim_reacquired", "re-acquired", "tab:green"),
        ("ssim_deconvolved", "deconvolved", "tab:purple"),
        ("ssim_uncorrected", "uncorrected", "tab:gray"),
    ):
        ax.plot(x, mean_of(column), marker="o", label=label, color=color)
    ax.set_xlabel("photons per pixel")
    ax.set_ylabel("SSIM vs ideal correction")
    if len(levels) > 1:
        ax.set_xscale("log")
    ax.grid(True, alpha=0.3)
    ax_rwe = ax.twinx()
    ax_rwe.plot(x, mean_of("rwe_used"), marker="^", linestyle="--",
                color="tab:orange", label="RWE")
    ax_rwe.set_ylabel("residual wavefront error (waves)")
    handles, labels = ax.get_legend_handles_labels()
    h2, l2 = ax_rwe.get_legend_handles_labels()
    ax.legend(handles + h2, labels + l2, loc="best")
    return _save(fig, Path(out_path))


def render_plots(csv_paths, out_dir) -> list[Path]:
    """Render every CSV with the renderer its header matches."""
    out_dir = Path(out_dir)
    written = []
    for csv_path in csv_paths:
        csv_path = Path(csv_path)
        _, columns = _read_rows(csv_path)
        stem = csv_path.stem
        if _SWEEP_COLUMNS <= columns:
            written.append(render_sweep_plot(csv_path, out_dir / f"{stem}_rwe.png"))
        elif _CORRECTION_COLUMNS <= columns:
            written.append(render_correction_plot(csv_path, out_dir / f"{stem}_ssim.png"))
        else:
            raise ValueError(f"{csv_path}: unrecognized CSV schema {sorted(columns)}")
    return written

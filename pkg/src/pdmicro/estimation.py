"""Shared machinery for the two maximum-likelihood wavefront estimators."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.fft as sfft

from pdmicro.optics import OpticalConfig, defocus_phase, downscale_image, make_frequency_grid
from pdmicro.simulate import DiversityStack
from pdmicro.zernike import ZernikeVector, normalized_norms, rwe, zernike_basis

__all__ = ["TracePoint", "EstimationResult", "StackModel", "write_report"]


@dataclass(frozen=True)
class TracePoint:
    iteration: int
    objective: float
    grad_norm: float
    coeffs: dict[int, float]


@dataclass
class EstimationResult:
    """Outcome of one estimator run.

    ``coeffs`` are radians on the estimated Noll indices.  ``object_estimate``
    is a nonnegative field at the grid the estimator actually ran on (half
    size when ``downscaled``).  ``trace`` records (objective, gradient norm,
    coefficients) per accepted iteration, starting from the initial state.
    """

    estimator: str
    coeffs: ZernikeVector
    object_estimate: np.ndarray
    trace: list[TracePoint]
    converged: bool
    reason: str
    iterations: int
    wall_time: float
    config: OpticalConfig
    downscaled: bool = False


class StackModel:
    """Precomputed pupil geometry for a diversity scheme.

    Holds the frequency grid, per-plane defocus phases and the Zernike basis
    of the estimated indices, and turns coefficient vectors into pupils,
    amplitude spreads and unit-sum PSFs.
    """

    def __init__(self, config: OpticalConfig, diversity_z, indices):
        self.config = config
        self.indices = tuple(int(j) for j in indices)
        self.grid = make_frequency_grid(config)
        self.mask = self.grid.inside_pupil
        self.pupil_count = self.grid.pupil_sample_count
        self.theta = np.stack([defocus_phase(z, self.grid, config) for z in diversity_z])
        self.zbasis = zernike_basis(self.indices, self.grid)
        self.zflat = self.zbasis.reshape(len(self.indices), -1)
        self._theta_in = self.theta[:, self.mask]
        self._zin = self.zbasis[:, self.mask]

    @property
    def k(self) -> int:
        return self.theta.shape[0]

    @property
    def n(self) -> int:
        return self.config.grid_size

    def phase_in_pupil(self, c_arr: np.ndarray) -> np.ndarray:
        """Aberration phase on pupil samples only, shape (P,)."""
        return c_arr @ self._zin

    def pupils_from_phase_samples(self, phase_in: np.ndarray) -> np.ndarray:
        """Pupils for an aberration phase given on pupil samples, shape (P,)."""
        tot = phase_in[None, :] + self._theta_in
        H = np.zeros((self.k, self.n, self.n), dtype=complex)
        H[:, self.mask] = np.exp(1j * tot)
        return H

    def pupils(self, c_arr: np.ndarray) -> np.ndarray:
        """Generalized pupils exp(i(phase + theta_k)), shape (K, N, N)."""
        return self.pupils_from_phase_samples(self.phase_in_pupil(c_arr))

    def amplitudes(self, H: np.ndarray) -> np.ndarray:
        return sfft.fft2(H, norm="ortho", axes=(-2, -1))

    def psfs_from_amplitudes(self, a: np.ndarray) -> np.ndarray:
        return (a.real ** 2 + a.imag ** 2) / self.pupil_count

    def psfs(self, c_arr: np.ndarray) -> np.ndarray:
        return self.psfs_from_amplitudes(self.amplitudes(self.pupils(c_arr)))


def validate_estimation_stack(stack: DiversityStack) -> None:
    if stack.k < 2:
        raise ValueError("estimation needs at least two diversity planes")
    if len(set(stack.diversity_z)) != stack.k:
        raise ValueError("diversity offsets must be pairwise distinct")


def prepare_images(stack: DiversityStack, downscale: bool, reducer: str):
    """Return (images, config) the estimator will run on, optionally pooled 2x2.

    Pooling uses block means for the Gaussian path and block sums for the
    Poisson path (preserving count statistics).  Allowed only when the camera
    sampling satisfies the Nyquist bound of the optical config.
    """
    if not downscale:
        return stack.images, stack.config
    if not stack.config.nyquist_ok:
        raise ValueError(
            "downscaling requires pixel_pitch <= wavelength / (4 na); "
            "the camera must sample at the incoherent Nyquist rate"
        )
    pooled = np.stack([downscale_image(im, reducer) for im in stack.images])
    return pooled, stack.config.downscaled()


def coeffs_in_waves(coeffs: ZernikeVector, config: OpticalConfig) -> dict[int, float]:
    """Signed per-coefficient amplitudes converted from radians to waves."""
    grid = make_frequency_grid(config)
    norms = normalized_norms(coeffs.indices, grid) if len(coeffs) else {}
    return {j: c / (2.0 * math.pi * math.sqrt(norms[j])) for j, c in coeffs.items()}


def write_report(result: EstimationResult, directory: str | Path,
                 truth: ZernikeVector | None = None) -> Path:
    """Write ``report.txt`` and ``trace.csv`` for a result; returns the dir."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    waves = coeffs_in_waves(result.coeffs, result.config)
    lines = [
        f"estimator: {result.estimator}",
        f"converged: {result.converged} ({result.reason})",
        f"iterations: {result.iterations}",
        f"wall_time_s: {result.wall_time:.3f}",
        f"downscaled: {result.downscaled}",
    ]
    if truth is not None:
        grid = make_frequency_grid(result.config)
        norms = normalized_norms(sorted(set(truth.indices) | set(result.coeffs.indices)), grid)
        lines.append(f"rwe_waves: {rwe(result.coeffs, truth, norms):.6f}")
    lines.append("")
    lines.append(f"{'noll_j':>6}  {'c_radians':>14}  {'c_waves':>14}")
    for j, c in result.coeffs.items():
        lines.append(f"{j:>6}  {c:>14.6e}  {waves[j]:>14.6e}")
    (directory / f"report_{result.estimator}.txt").write_text("\n".join(lines) + "\n")

    with open(directory / f"trace_{result.estimator}.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        idx = list(result.coeffs.indices)
        writer.writerow(["iteration", "objective", "grad_norm"] + [f"c{j}" for j in idx])
        for pt in result.trace:
            writer.writerow([pt.iteration, repr(pt.objective), repr(pt.grad_norm)]
                            + [repr(pt.coeffs.get(j, 0.0)) for j in idx])
    return directory

"""Pupil-plane model of a widefield fluorescence microscope.

Lengths are in microns throughout.  Fields live on square grids in DFT
ordering (DC / image center at sample [0, 0]); use ``np.fft.fftshift`` only
for display.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
import scipy.fft as sfft

__all__ = [
    "OpticalConfig",
    "FrequencyGrid",
    "make_frequency_grid",
    "defocus_phase",
    "generalized_pupil",
    "psf_from_phase",
    "downscale_image",
]


@dataclass(frozen=True)
class OpticalConfig:
    """Imaging geometry: objective NA, emission wavelength, immersion index,
    camera pixel pitch and image grid size.

    ``pixel_pitch`` is the object-space sampling interval.  The grid must be
    even so factor-2 pooling and DFT-centered crops stay aligned.
    """

    na: float = 1.2
    wavelength: float = 0.6
    medium_index: float = 1.33
    pixel_pitch: float = 0.1
    grid_size: int = 512

    def __post_init__(self):
        for name in ("na", "wavelength", "medium_index", "pixel_pitch"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be a positive finite number, got {v!r}")
        if self.na >= self.medium_index:
            raise ValueError(
                f"na ({self.na}) must be smaller than the immersion index "
                f"({self.medium_index})"
            )
        if not isinstance(self.grid_size, int) or self.grid_size < 2:
            raise ValueError(f"grid_size must be an integer >= 2, got {self.grid_size!r}")
        if self.grid_size % 2:
            raise ValueError(f"grid_size must be even, got {self.grid_size}")

    @property
    def cutoff(self) -> float:
        """Pupil radius in frequency space, na / wavelength (cycles / micron)."""
        return self.na / self.wavelength

    @property
    def nyquist_ok(self) -> bool:
        """True when the camera samples the incoherent bandlimit, i.e.
        pixel_pitch <= wavelength / (4 na).  Required before downscaling."""
        return self.pixel_pitch <= self.wavelength / (4.0 * self.na)

    def downscaled(self) -> "OpticalConfig":
        """Config seen by an estimator after 2x2 pixel pooling."""
        if self.grid_size % 4:
            raise ValueError("grid_size must be divisible by 4 to downscale")
        return replace(self, grid_size=self.grid_size // 2,
                       pixel_pitch=self.pixel_pitch * 2.0)


@dataclass(frozen=True, eq=False)
class FrequencyGrid:
    """DFT-ordered pupil-plane frequency coordinates for a config.

    ``ux``/``uy`` are in cycles / micron, ``inside_pupil`` marks samples with
    |u| <= na / wavelength.
    """

    size: int
    du: float
    cutoff: float
    ux: np.ndarray
    uy: np.ndarray
    u_norm: np.ndarray
    inside_pupil: np.ndarray

    @property
    def pupil_sample_count(self) -> int:
        return int(np.count_nonzero(self.inside_pupil))


def make_frequency_grid(config: OpticalConfig) -> FrequencyGrid:
    """Build the frequency grid for a config. Rejects odd grid sizes."""
    n = config.grid_size
    if n % 2:
        raise ValueError(f"grid_size must be even, got {n}")
    f = sfft.fftfreq(n, d=config.pixel_pitch)
    ux = np.broadcast_to(f[None, :], (n, n)).copy()
    uy = np.broadcast_to(f[:, None], (n, n)).copy()
    u_norm = np.hypot(ux, uy)
    cutoff = config.cutoff
    grid = FrequencyGrid(
        size=n,
        du=1.0 / (n * config.pixel_pitch),
        cutoff=cutoff,
        ux=ux,
        uy=uy,
        u_norm=u_norm,
        inside_pupil=u_norm <= cutoff,
    )
    if grid.pupil_sample_count == 0:
        raise ValueError("grid does not contain any pupil samples")
    return grid


def defocus_phase(z: float, grid: FrequencyGrid, config: OpticalConfig) -> np.ndarray:
    """Phase (radians) of an axial displacement ``z`` (microns), zero outside
    the pupil.

    phase(u) = z * (2 pi n_med / wavelength) * sqrt(1 - (wavelength |u| / n_med)^2)
    """
    inside = grid.inside_pupil
    arg = 1.0 - (config.wavelength * grid.u_norm[inside] / config.medium_index) ** 2
    if arg.min() < 0.0:
        raise ValueError(
            "defocus square root is negative inside the pupil; "
            "na exceeds the immersion index for this grid"
        )
    field = np.zeros(grid.u_norm.shape)
    field[inside] = z * (2.0 * math.pi * config.medium_index / config.wavelength) * np.sqrt(arg)
    return field


def generalized_pupil(phase: np.ndarray, grid: FrequencyGrid) -> np.ndarray:
    """Unit-modulus pupil function exp(i phase) inside the mask, 0 outside."""
    H = np.zeros(phase.shape, dtype=complex)
    inside = grid.inside_pupil
    H[inside] = np.exp(1j * phase[inside])
    return H


def psf_from_phase(
    aberration_phase: np.ndarray,
    diversity_phase: np.ndarray | None,
    grid: FrequencyGrid,
    unit_sum: bool = True,
) -> np.ndarray:
    """Incoherent PSF |F{P exp(i phase)}|^2 in DFT ordering.

    With ``unit_sum`` the PSF is divided by the pupil sample count so it sums
    to exactly 1 (the unitary transform preserves pupil energy for any phase).
    """
    total = aberration_phase if diversity_phase is None else aberration_phase + diversity_phase
    H = generalized_pupil(total, grid)
    a = sfft.fft2(H, norm="ortho")
    s = a.real ** 2 + a.imag ** 2
    if unit_sum:
        s /= grid.pupil_sample_count
    return s


def downscale_image(image: np.ndarray, mode: str = "mean") -> np.ndarray:
    """Pool 2x2 pixel blocks by mean or sum. Requires even dimensions."""
    if image.ndim != 2:
        raise ValueError(f"expected a 2-d image, got shape {image.shape}")
    h, w = image.shape
    if h % 2 or w % 2:
        raise ValueError(f"image dimensions must be even to downscale, got {image.shape}")
    blocks = image.reshape(h // 2, 2, w // 2, 2)
    if mode == "mean":
        return blocks.mean(axis=(1, 3))
    if mode == "sum":
        return blocks.sum(axis=(1, 3))
    raise ValueError(f"mode must be 'mean' or 'sum', got {mode!r}")

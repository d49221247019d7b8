"""Forward simulation: aberration sampling, image formation and camera noise.

The image of each diversity plane is the object convolved with the incoherent
PSF of the aberrated pupil plus that plane's defocus, computed on a canvas at
least twice the image size and cropped centrally, so the finite field of view
does not wrap object energy into the image.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.fft as sfft

from pdmicro.objects import ObjectSpec, generate_object
from pdmicro.optics import (
    OpticalConfig,
    defocus_phase,
    make_frequency_grid,
    psf_from_phase,
)
from pdmicro.zernike import ZernikeVector, normalized_norms, phase_from_coeffs, wrms

__all__ = [
    "NoiseParams",
    "AberrationSample",
    "DiversityStack",
    "SpatialVarianceParams",
    "PhaseNoiseParams",
    "LOW_ORDER_INDICES",
    "HIGH_ORDER_INDICES",
    "sample_aberration",
    "default_diversity_z",
    "convolve_cropped",
    "apply_noise",
    "simulate_stack",
    "simulate_spatially_variant_stack",
    "apply_phase_noise",
]

# estimated block and the unmodelled higher orders of the 42-term expansion
LOW_ORDER_INDICES = tuple(range(4, 16))
HIGH_ORDER_INDICES = tuple(range(16, 46))


@dataclass(frozen=True)
class NoiseParams:
    """sCMOS-style camera model.

    The expected photon image is rescaled to a mean of ``photons_per_pixel``,
    then: counts = QE * Poisson(photons) + Poisson(dark_mean) + N(0, read_sigma^2).
    """

    photons_per_pixel: float = 500.0
    quantum_efficiency: float = 0.6
    dark_mean: float = 1.0
    read_sigma: float = 2.0

    def __post_init__(self):
        if not self.photons_per_pixel > 0:
            raise ValueError("photons_per_pixel must be positive")
        if not 0.0 < self.quantum_efficiency <= 1.0:
            raise ValueError("quantum_efficiency must be in (0, 1]")
        if self.dark_mean < 0 or self.read_sigma < 0:
            raise ValueError("dark_mean and read_sigma must be >= 0")

    @classmethod
    def low_additive(cls, photons_per_pixel: float = 500.0) -> "NoiseParams":
        return cls(photons_per_pixel=photons_per_pixel, dark_mean=1.0, read_sigma=2.0)

    @classmethod
    def high_additive(cls, photons_per_pixel: float = 500.0) -> "NoiseParams":
        return cls(photons_per_pixel=photons_per_pixel, dark_mean=100.0, read_sigma=20.0)


@dataclass(frozen=True)
class AberrationSample:
    """A drawn ground-truth aberration: 42 coefficients over Noll 4..45."""

    coeffs: ZernikeVector
    target_wrms: float

    def __post_init__(self):
        if self.coeffs.indices != tuple(range(4, 46)):
            raise ValueError("aberration sample must carry exactly Noll indices 4..45")
        if self.target_wrms < 0:
            raise ValueError("target_wrms must be >= 0")


@dataclass
class DiversityStack:
    """K noisy images of one object at known axial diversity offsets.

    ``diversity_z`` is in microns (same length unit as the wavelength).
    ``truth`` carries the generating aberration when known.  Estimators
    require K >= 2 with distinct offsets; a single-image stack is allowed
    here so one-plane objective identities remain expressible.
    """

    images: np.ndarray
    diversity_z: tuple[float, ...]
    config: OpticalConfig
    noise: NoiseParams | None = None
    truth: ZernikeVector | None = None
    seed: int | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=float)
        self.diversity_z = tuple(float(z) for z in self.diversity_z)
        k = len(self.diversity_z)
        if k < 1:
            raise ValueError("stack needs at least one diversity plane")
        n = self.config.grid_size
        if self.images.shape != (k, n, n):
            raise ValueError(
                f"images shape {self.images.shape} does not match "
                f"{k} planes of {n}x{n}"
            )
        if not np.isfinite(self.images).all():
            raise ValueError("stack images contain non-finite values")

    @property
    def k(self) -> int:
        return len(self.diversity_z)


@dataclass(frozen=True)
class SpatialVarianceParams:
    """Tiled anisoplanatism: per-tile random wavefront components.

    ``correlation`` picks the tile pitch ('low-frequency' = 2x2 tiles over the
    field, 'high-frequency' = 8x8); ``magnitude`` scales the per-tile random
    component relative to the isoplanatic aberration's wavefront RMS.
    """

    correlation: str = "low-frequency"
    magnitude: float = 0.5
    tiles_per_side: int | None = None

    def __post_init__(self):
        if self.correlation not in ("low-frequency", "high-frequency"):
            raise ValueError("correlation must be 'low-frequency' or 'high-frequency'")
        if self.magnitude < 0:
            raise ValueError("magnitude must be >= 0")

    @property
    def tiles(self) -> int:
        if self.tiles_per_side is not None:
            return self.tiles_per_side
        return 2 if self.correlation == "low-frequency" else 8


@dataclass(frozen=True)
class PhaseNoiseParams:
    """Zero-mean Gaussian perturbation (sigma radians per coefficient) applied
    independently to each diversity plane's wavefront."""

    sigma: float = 0.0

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")


def sample_aberration(target_wrms: float, rng: np.random.Generator,
                      norms: dict[int, float]) -> AberrationSample:
    """Draw 42 uniform coefficients and scale them blockwise.

    Noll 4..15 are scaled to exactly ``target_wrms`` waves of RMS wavefront
    error; Noll 16..45 to half that.  ``norms`` must cover indices 4..45
    (see :func:`pdmicro.zernike.normalized_norms`).
    """
    if target_wrms < 0:
        raise ValueError("target_wrms must be >= 0")
    raw = rng.uniform(-1.0, 1.0, 42)
    coeffs = dict(zip(range(4, 46), raw))
    if target_wrms == 0.0:
        return AberrationSample(ZernikeVector({j: 0.0 for j in range(4, 46)}), 0.0)
    scaled: dict[int, float] = {}
    for indices, block_target in ((LOW_ORDER_INDICES, target_wrms),
                                  (HIGH_ORDER_INDICES, target_wrms / 2.0)):
        block = ZernikeVector({j: coeffs[j] for j in indices})
        w = wrms(block, norms)
        if w == 0.0:
            raise RuntimeError("degenerate zero draw in aberration sampling")
        for j in indices:
            scaled[j] = coeffs[j] * (block_target / w)
    return AberrationSample(ZernikeVector(scaled), float(target_wrms))


def default_diversity_z(config: OpticalConfig) -> tuple[float, float, float]:
    """The standard three-plane scheme: +3, 0, -3 wavelengths of defocus."""
    return (3.0 * config.wavelength, 0.0, -3.0 * config.wavelength)


def convolve_cropped(canvas: np.ndarray, psf: np.ndarray,
                     out_size: int | None = None) -> np.ndarray:
    """Convolve an object canvas with a DFT-ordered PSF and crop the center.

    The PSF (size N) is embedded on the canvas (size M) with its peak kept at
    the DFT origin; the cyclic product is cropped to ``out_size`` (default N).
    Requires M >= out_size + N so no wrapped energy reaches the crop from
    content inside the canvas.  Output is clamped at 0 against FFT round-off.
    """
    m = canvas.shape[0]
    if canvas.shape != (m, m):
        raise ValueError(f"canvas must be square, got {canvas.shape}")
    n = psf.shape[0]
    if psf.shape != (n, n):
        raise ValueError(f"psf must be square, got {psf.shape}")
    out = n if out_size is None else int(out_size)
    if m < out + n:
        raise ValueError(
            f"canvas size {m} too small for a clean {out}-pixel crop with a "
            f"{n}-pixel psf (needs at least {out + n})"
        )
    ker = np.zeros((m, m))
    ker[:n, :n] = sfft.fftshift(psf)
    ker = np.roll(ker, (-(n // 2), -(n // 2)), axis=(0, 1))
    conv = sfft.irfft2(sfft.rfft2(canvas) * sfft.rfft2(ker), s=(m, m))
    lo = m // 2 - out // 2
    return np.clip(conv[lo:lo + out, lo:lo + out], 0.0, None)


def apply_noise(image: np.ndarray, noise: NoiseParams,
                rng: np.random.Generator) -> np.ndarray:
    """Rescale an expected-photon image to the configured mean photon count
    and draw one camera realization (may contain negatives from read noise)."""
    image = np.asarray(image, dtype=float)
    if image.min() < 0:
        raise ValueError("expected photon image must be nonnegative")
    mean = image.mean()
    if mean <= 0:
        raise ValueError("expected photon image has no signal (zero mean)")
    photons = image * (noise.photons_per_pixel / mean)
    out = noise.quantum_efficiency * rng.poisson(photons).astype(float)
    out += rng.poisson(noise.dark_mean, size=image.shape)
    out += rng.normal(0.0, noise.read_sigma, size=image.shape)
    return out


def _truth_vector(aberration) -> ZernikeVector:
    if isinstance(aberration, AberrationSample):
        return aberration.coeffs
    if isinstance(aberration, ZernikeVector):
        return aberration
    raise TypeError(f"expected AberrationSample or ZernikeVector, got {type(aberration)!r}")


def _canvas_of(obj, config: OpticalConfig) -> np.ndarray:
    canvas = generate_object(obj) if isinstance(obj, ObjectSpec) else np.asarray(obj, dtype=float)
    if canvas.shape[0] < 2 * config.grid_size:
        raise ValueError(
            f"object canvas ({canvas.shape[0]}) must be at least twice the "
            f"image size ({config.grid_size})"
        )
    return canvas


def simulate_stack(obj, aberration, diversity_z, noise: NoiseParams | None,
                   config: OpticalConfig, rng: np.random.Generator,
                   per_image_coeffs: list[ZernikeVector] | None = None,
                   seed: int | None = None) -> DiversityStack:
    """Simulate one diversity stack.

    ``obj`` is an :class:`ObjectSpec` or a prerendered canvas; ``aberration``
    an :class:`AberrationSample` or bare coefficient vector.  With
    ``per_image_coeffs`` each plane uses its own wavefront (phase noise);
    ``truth`` still records the nominal aberration.  ``noise`` of None yields
    the noiseless expected images.
    """
    truth = _truth_vector(aberration)
    canvas = _canvas_of(obj, config)
    if per_image_coeffs is not None and len(per_image_coeffs) != len(tuple(diversity_z)):
        raise ValueError("per_image_coeffs must match the number of diversity planes")
    grid = make_frequency_grid(config)
    n = config.grid_size
    images = np.empty((len(tuple(diversity_z)), n, n))
    iso_phase = phase_from_coeffs(truth, grid)
    for k, z in enumerate(diversity_z):
        phase = iso_phase if per_image_coeffs is None else phase_from_coeffs(per_image_coeffs[k], grid)
        psf = psf_from_phase(phase, defocus_phase(z, grid, config), grid)
        img = convolve_cropped(canvas, psf, n)
        if noise is not None:
            img = apply_noise(img, noise, rng)
        images[k] = img
    return DiversityStack(images=images, diversity_z=tuple(diversity_z), config=config,
                          noise=noise, truth=truth, seed=seed)


def _tile_windows(n: int, tiles: int) -> np.ndarray:
    """Raised-cosine partition of unity, shape (tiles, tiles, n, n)."""
    pitch = n / tiles
    x = np.arange(n)
    bumps = np.zeros((tiles, n))
    for t in range(tiles):
        center = (t + 0.5) * pitch
        d = np.abs(x - center)
        inside = d < pitch
        bumps[t, inside] = np.cos(math.pi * d[inside] / (2.0 * pitch)) ** 2
    w = bumps[:, None, :, None] * bumps[None, :, None, :]
    total = w.sum(axis=(0, 1))
    return w / total


def draw_tile_perturbations(tiles: int, scale_wrms: float, rng: np.random.Generator,
                            norms: dict[int, float]) -> list[list[ZernikeVector]]:
    """Per-tile random wavefront components, re-centered to exact zero mean.

    Each tile draws an independent 42-term vector scaled (blockwise, like
    :func:`sample_aberration`) to ``scale_wrms`` waves before re-centering.
    """
    raw = np.empty((tiles, tiles, 42))
    for ty in range(tiles):
        for tx in range(tiles):
            raw[ty, tx] = sample_aberration(scale_wrms, rng, norms).coeffs.to_array(range(4, 46))
    raw -= raw.mean(axis=(0, 1), keepdims=True)
    return [[ZernikeVector(dict(zip(range(4, 46), raw[ty, tx]))) for tx in range(tiles)]
            for ty in range(tiles)]


def simulate_spatially_variant_stack(obj, aberration, diversity_z,
                                     noise: NoiseParams | None, config: OpticalConfig,
                                     sv: SpatialVarianceParams, rng: np.random.Generator,
                                     seed: int | None = None) -> DiversityStack:
    """Simulate a stack whose wavefront varies across the field of view.

    The field is split into tiles; each tile's image forms under the
    isoplanatic aberration plus a zero-mean per-tile random component, and the
    tile images are blended with a raised-cosine partition of unity.  With
    ``magnitude`` 0 this defers to :func:`simulate_stack` exactly.
    """
    if sv.magnitude == 0.0:
        return simulate_stack(obj, aberration, diversity_z, noise, config, rng, seed=seed)
    truth = _truth_vector(aberration)
    canvas = _canvas_of(obj, config)
    grid = make_frequency_grid(config)
    n = config.grid_size
    tiles = sv.tiles
    if n // tiles < 32:
        raise ValueError(
            f"tile size {n // tiles} px is too small to contain the psf; "
            f"use fewer tiles or a larger image"
        )
    norms = normalized_norms(range(4, 46), grid)
    scale = sv.magnitude * wrms(truth, norms)
    perturb = draw_tile_perturbations(tiles, scale, rng, norms)
    windows = _tile_windows(n, tiles)
    images = np.zeros((len(tuple(diversity_z)), n, n))
    for ty in range(tiles):
        for tx in range(tiles):
            phase = phase_from_coeffs(truth + perturb[ty][tx], grid)
            for k, z in enumerate(diversity_z):
                psf = psf_from_phase(phase, defocus_phase(z, grid, config), grid)
                images[k] += windows[ty, tx] * convolve_cropped(canvas, psf, n)
    if noise is not None:
        for k in range(images.shape[0]):
            images[k] = apply_noise(images[k], noise, rng)
    return DiversityStack(images=images, diversity_z=tuple(diversity_z), config=config,
                          noise=noise, truth=truth, seed=seed)


def apply_phase_noise(aberration, k_planes: int, pn: PhaseNoiseParams,
                      rng: np.random.Generator) -> list[ZernikeVector]:
    """Per-plane wavefronts: the aberration plus zero-mean Gaussian jitter.

    Draws one N(0, sigma) offset per coefficient per plane, re-centered so
    the mean over planes is exactly zero for every coefficient.
    """
    if k_planes < 1:
        raise ValueError("k_planes must be >= 1")
    truth = _truth_vector(aberration)
    idx = truth.indices
    draws = rng.normal(0.0, pn.sigma, (k_planes, len(idx))) if pn.sigma > 0 else np.zeros((k_planes, len(idx)))
    draws -= draws.mean(axis=0, keepdims=True)
    return [truth + ZernikeVector(dict(zip(idx, draws[k]))) for k in range(k_planes)]

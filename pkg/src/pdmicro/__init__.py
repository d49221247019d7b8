"""pdmicro: phase-diversity wavefront estimation for widefield microscopy.

Simulates diversity image stacks of synthetic fluorescence objects, estimates
pupil aberrations from them with Gaussian or Poisson maximum-likelihood
solvers, and applies corrections by multi-image deconvolution or simulated
re-acquisition.
"""

from pdmicro.correct import (
    CorrectionReport,
    compare_corrections,
    rl_deconvolve_multi,
    simulate_reacquisition,
    ssim,
)
from pdmicro.estimation import EstimationResult, coeffs_in_waves
from pdmicro.gaussian import GaussianOptions, estimate_gaussian
from pdmicro.objects import ObjectSpec, generate_object
from pdmicro.optics import (
    FrequencyGrid,
    OpticalConfig,
    defocus_phase,
    downscale_image,
    make_frequency_grid,
    psf_from_phase,
)
from pdmicro.poisson import PoissonOptions, estimate_poisson
from pdmicro.simulate import (
    AberrationSample,
    DiversityStack,
    NoiseParams,
    PhaseNoiseParams,
    SpatialVarianceParams,
    default_diversity_z,
    sample_aberration,
    simulate_stack,
)
from pdmicro.zernike import (
    ZernikeVector,
    noll_to_nm,
    normalized_norms,
    phase_from_coeffs,
    rwe,
    wrms,
    zernike_basis,
    zernike_eval,
    zernike_norm,
)

__version__ = "0.1.0"

__all__ = [
    "AberrationSample",
    "CorrectionReport",
    "DiversityStack",
    "EstimationResult",
    "FrequencyGrid",
    "GaussianOptions",
    "NoiseParams",
    "ObjectSpec",
    "OpticalConfig",
    "PhaseNoiseParams",
    "PoissonOptions",
    "SpatialVarianceParams",
    "ZernikeVector",
    "coeffs_in_waves",
    "compare_corrections",
    "default_diversity_z",
    "defocus_phase",
    "downscale_image",
    "estimate_gaussian",
    "estimate_poisson",
    "generate_object",
    "make_frequency_grid",
    "noll_to_nm",
    "normalized_norms",
    "phase_from_coeffs",
    "psf_from_phase",
    "rl_deconvolve_multi",
    "rwe",
    "sample_aberration",
    "simulate_reacquisition",
    "simulate_stack",
    "ssim",
    "wrms",
    "zernike_basis",
    "zernike_eval",
    "zernike_norm",
    "__version__",
]

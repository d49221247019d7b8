"""Gaussian-noise maximum-likelihood phase-diversity estimator.

The least-squares data term over all diversity planes is reduced by
maximizing over the unknown object in closed form per spatial frequency,
leaving an objective in the Zernike coefficients alone.  That reduced
objective is maximized by Gauss-Newton steps with a variable-projection
pseudo-Hessian and Armijo backtracking.

Data and PSF spectra use the plain DFT convention, under which a unit-sum
PSF has transfer function 1 at zero frequency; the regularizer that keeps
the per-frequency object division finite is therefore measured against an
A(0) of K.  The Fourier-domain sum is divided by the pixel count so the
objective value equals the negated spatial sum of squared residuals at the
profiled-out object.  Each image has its spatial mean removed before
entering the data spectra.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np
import scipy.fft as sfft

from pdmicro.estimation import (
    EstimationResult,
    StackModel,
    TracePoint,
    prepare_images,
    validate_estimation_stack,
)
from pdmicro.simulate import DiversityStack
from pdmicro.zernike import ZernikeVector, phase_from_coeffs

__all__ = [
    "GaussianOptions",
    "reduced_objective",
    "closed_form_object",
    "gaussian_gradient",
    "gaussian_pseudo_hessian",
    "estimate_gaussian",
]


@dataclass(frozen=True)
class GaussianOptions:
    estimated_indices: tuple[int, ...] = tuple(range(4, 16))
    max_iterations: int = 200
    gradient_tol_rel: float = 1e-6
    object_regularization: float = 1e-10
    armijo_c1: float = 1e-4
    backtrack_factor: float = 0.5
    max_backtracks: int = 30
    init_value: float = 1e-10
    downscale: bool = False

    def __post_init__(self):
        idx = tuple(int(j) for j in self.estimated_indices)
        if len(idx) == 0 or len(set(idx)) != len(idx) or min(idx) < 1:
            raise ValueError("estimated_indices must be distinct Noll indices >= 1")
        object.__setattr__(self, "estimated_indices", idx)
        if self.max_iterations < 1 or self.max_backtracks < 1:
            raise ValueError("iteration limits must be >= 1")
        if not 0 < self.backtrack_factor < 1:
            raise ValueError("backtrack_factor must be in (0, 1)")
        if self.object_regularization <= 0 or self.gradient_tol_rel <= 0:
            raise ValueError("tolerances must be positive")


def _data_spectra(images: np.ndarray) -> np.ndarray:
    # plain (unnormalized) spectra: the OTF then has S(0) = 1 per plane, so
    # the object_regularization floor is measured against A(0) = K
    d = images - images.mean(axis=(-2, -1), keepdims=True)
    return sfft.fft2(d, axes=(-2, -1))


class _GaussianCore:
    """Objective/gradient/Hessian evaluations for fixed data spectra."""

    def __init__(self, model: StackModel, D: np.ndarray, eps: float):
        self.model = model
        self.D = D
        self.eps = eps
        self.n2 = model.n * model.n
        self.sum_dd = float(np.sum(D.real ** 2 + D.imag ** 2))

    def state_from_pupils(self, H: np.ndarray) -> dict:
        m = self.model
        a = m.amplitudes(H)
        s = m.psfs_from_amplitudes(a)
        S = sfft.fft2(s, axes=(-2, -1))
        A = np.sum(S.real ** 2 + S.imag ** 2, axis=0) + self.eps
        B = np.sum(self.D * S.conj(), axis=0)
        objective = float(np.sum((B.real ** 2 + B.imag ** 2) / A) - self.sum_dd) / self.n2
        return {"H": H, "a": a, "s": s, "S": S, "A": A, "B": B, "objective": objective}

    def state(self, c_arr: np.ndarray) -> dict:
        return self.state_from_pupils(self.model.pupils(c_arr))

    def objective(self, c_arr: np.ndarray) -> float:
        return self.state(c_arr)["objective"]

    def gradient(self, st: dict) -> np.ndarray:
        m = self.model
        A, B, S = st["A"], st["B"], st["S"]
        BA = B / A
        Q = (B.real ** 2 + B.imag ** 2) / (A * A)
        V = BA[None] * self.D.conj() - Q[None] * S.conj()
        # adjoint of s -> S under the plain DFT is the forward DFT again
        # (V is Hermitian, so the result is real); the objective's Parseval
        # division contributes the 1/n^2
        w = (2.0 / self.n2) * sfft.fft2(V, axes=(-2, -1)).real
        inner = sfft.fft2(w * st["a"].conj(), norm="ortho", axes=(-2, -1))
        T = np.sum(st["H"] * inner, axis=0)
        return -(2.0 / m.pupil_count) * (m.zflat @ T.imag.ravel())

    def psf_spectrum_jacobian(self, st: dict) -> np.ndarray:
        """dS_k / dc_j, shape (K, J, N, N) complex."""
        m = self.model
        H, a = st["H"], st["a"]
        k, j = m.k, len(m.indices)
        out = np.empty((k, j, m.n, m.n), dtype=complex)
        for ki in range(k):
            dHk = (1j * H[ki])[None] * m.zbasis
            dak = sfft.fft2(dHk, norm="ortho", axes=(-2, -1))
            dsk = (2.0 / m.pupil_count) * (a[ki].conj()[None] * dak).real
            out[ki] = sfft.fft2(dsk, axes=(-2, -1))
        return out

    def pseudo_hessian(self, st: dict, dS: np.ndarray | None = None) -> np.ndarray:
        """Variable-projection Gauss-Newton curvature; symmetric PSD."""
        m = self.model
        if dS is None:
            dS = self.psf_spectrum_jacobian(st)
        A, B = st["A"], st["B"]
        w = (B.real ** 2 + B.imag ** 2) / (A * A)  # |closed-form object spectrum|^2
        j = len(m.indices)
        hess = np.zeros((j, j))
        for ki in range(m.k):
            E = dS[ki].reshape(j, -1) * np.sqrt(w).ravel()[None, :]
            hess += 2.0 * (E @ E.conj().T).real
        return hess / self.n2


def _core_for(stack: DiversityStack, options: GaussianOptions):
    images, config = prepare_images(stack, options.downscale, "mean")
    if not images.any():
        raise ValueError("image stack is identically zero; objective is undefined")
    model = StackModel(config, stack.diversity_z, options.estimated_indices)
    core = _GaussianCore(model, _data_spectra(images),
                         options.object_regularization)
    return core, images, config


def _full_phase_state(core: _GaussianCore, coeffs: ZernikeVector):
    """State for a coefficient vector that may extend beyond the estimated set."""
    m = core.model
    extra = ZernikeVector({j: c for j, c in coeffs.items() if j not in m.indices})
    c_arr = coeffs.to_array(m.indices)
    if len(extra):
        phase = m.phase_in_pupil(c_arr) + phase_from_coeffs(extra, m.grid)[m.mask]
        return core.state_from_pupils(m.pupils_from_phase_samples(phase))
    return core.state(c_arr)


def reduced_objective(coeffs: ZernikeVector, stack: DiversityStack,
                      options: GaussianOptions | None = None) -> float:
    """Least-squares likelihood with the object profiled out; always <= 0,
    and 0 exactly when the data are consistent with the coefficients."""
    options = options or GaussianOptions()
    core, _, _ = _core_for(stack, options)
    return _full_phase_state(core, coeffs)["objective"]


def closed_form_object(coeffs: ZernikeVector, stack: DiversityStack,
                       options: GaussianOptions | None = None) -> np.ndarray:
    """Least-squares object for fixed coefficients (raw images, no mean
    subtraction): IDFT of sum_k D_k conj(S_k) / (sum_k |S_k|^2 + eps)."""
    options = options or GaussianOptions()
    images, config = prepare_images(stack, options.downscale, "mean")
    model = StackModel(config, stack.diversity_z, options.estimated_indices)
    core = _GaussianCore(model, sfft.fft2(images, axes=(-2, -1)),
                         options.object_regularization)
    st = _full_phase_state(core, coeffs)
    f_hat = st["B"] / st["A"]
    return sfft.ifft2(f_hat).real


def gaussian_gradient(coeffs: ZernikeVector, stack: DiversityStack,
                      options: GaussianOptions | None = None) -> np.ndarray:
    """Analytic gradient of the reduced objective on the estimated indices."""
    options = options or GaussianOptions()
    core, _, _ = _core_for(stack, options)
    return core.gradient(_full_phase_state(core, coeffs))


def gaussian_pseudo_hessian(coeffs: ZernikeVector, stack: DiversityStack,
                            options: GaussianOptions | None = None) -> np.ndarray:
    options = options or GaussianOptions()
    core, _, _ = _core_for(stack, options)
    return core.pseudo_hessian(_full_phase_state(core, coeffs))


def estimate_gaussian(stack: DiversityStack,
                      options: GaussianOptions | None = None) -> EstimationResult:
    """Maximize the reduced objective by damped Gauss-Newton ascent."""
    t0 = time.perf_counter()
    options = options or GaussianOptions()
    validate_estimation_stack(stack)
    core, images, config = _core_for(stack, options)
    idx = core.model.indices

    c = np.full(len(idx), options.init_value)
    st = core.state(c)
    trace = [TracePoint(0, st["objective"], math.nan,
                        dict(zip(idx, c.tolist())))]
    converged = False
    reason = "max_iterations"
    grad0 = None
    it = 0
    for it in range(1, options.max_iterations + 1):
        g = core.gradient(st)
        gnorm = float(np.linalg.norm(g))
        trace[-1] = TracePoint(trace[-1].iteration, trace[-1].objective, gnorm,
                               trace[-1].coeffs)
        if grad0 is None:
            grad0 = gnorm
        if gnorm <= options.gradient_tol_rel * grad0 or gnorm == 0.0:
            converged, reason = True, "gradient_tolerance"
            break
        hess = core.pseudo_hessian(st)
        lam = 1e-12 * max(float(np.trace(hess)) / len(idx), 1.0)
        try:
            step = np.linalg.solve(hess + lam * np.eye(len(idx)), g)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(hess, g, rcond=None)[0]
        slope = float(g @ step)
        if slope <= 0.0:  # curvature model failed; fall back to steepest ascent
            step, slope = g, float(g @ g)
        t = 1.0
        accepted = None
        for _ in range(options.max_backtracks):
            cand = c + t * step
            cand_st = core.state(cand)
            if cand_st["objective"] >= st["objective"] + options.armijo_c1 * t * slope:
                accepted = (cand, cand_st)
                break
            t *= options.backtrack_factor
        if accepted is None:
            reason = "line_search_failed"
            break
        c, st = accepted
        trace.append(TracePoint(it, st["objective"], math.nan,
                                dict(zip(idx, c.tolist()))))

    # final object from the raw (not mean-subtracted) images
    coeffs = ZernikeVector(dict(zip(idx, c.tolist())))
    D_raw = sfft.fft2(images, axes=(-2, -1))
    B = np.sum(D_raw * st["S"].conj(), axis=0)
    obj = sfft.ifft2(B / st["A"]).real
    return EstimationResult(
        estimator="gaussian",
        coeffs=coeffs,
        object_estimate=np.clip(obj, 0.0, None),
        trace=trace,
        converged=converged,
        reason=reason,
        iterations=it,
        wall_time=time.perf_counter() - t0,
        config=config,
        downscaled=options.downscale,
    )

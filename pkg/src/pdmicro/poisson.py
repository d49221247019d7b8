"""Poisson maximum-likelihood phase-diversity estimator.

Alternates between the Zernike coefficients and the object: each outer
iteration runs one golden-section line search jointly along the coefficient
gradient of the Poisson likelihood, then a fixed number of multiplicative
(expectation-maximization) object updates.  PSFs keep unit sum for any phase,
so the linear term of the likelihood is constant in the coefficients and the
multiplicative update leaves the object flux pinned to the mean data flux
before normalization.

The coefficient gradient is the exact adjoint of the discrete PSF pipeline
used throughout (unitary transforms, unit-sum PSFs); finite differences of
the likelihood are the authority its tests hold it to.
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
    "PoissonOptions",
    "poisson_likelihood",
    "poisson_gradient",
    "object_update",
    "estimate_poisson",
]

_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class PoissonOptions:
    estimated_indices: tuple[int, ...] = tuple(range(4, 16))
    max_outer_iterations: int = 100
    object_inner_iterations: int = 5
    gradient_norm_tol: float = 1e-3
    data_floor: float = 1e-8
    line_search_iterations: int = 25
    line_search_initial_step: float = 1.0
    downscale: bool = False
    init_value: float = 1e-10

    def __post_init__(self):
        idx = tuple(int(j) for j in self.estimated_indices)
        if len(idx) == 0 or len(set(idx)) != len(idx) or min(idx) < 1:
            raise ValueError("estimated_indices must be distinct Noll indices >= 1")
        object.__setattr__(self, "estimated_indices", idx)
        if self.max_outer_iterations < 1 or self.object_inner_iterations < 1:
            raise ValueError("iteration counts must be >= 1")
        if self.data_floor <= 0 or self.gradient_norm_tol <= 0:
            raise ValueError("data_floor and gradient_norm_tol must be positive")
        if self.line_search_initial_step <= 0:
            raise ValueError("line_search_initial_step must be positive")


class _PoissonCore:
    """Likelihood pieces for clamped data and a fixed diversity model."""

    def __init__(self, model: StackModel, data: np.ndarray, floor: float):
        self.model = model
        self.d = np.maximum(data, floor)
        self.floor = floor
        self.D_r = sfft.rfft2(self.d, axes=(-2, -1))  # cached for object updates

    def blurred(self, f_spec_r: np.ndarray, S_r: np.ndarray) -> np.ndarray:
        """Cyclic convolutions f * s_k from spectral halves, shape (K, N, N)."""
        n = self.model.n
        return sfft.irfft2(f_spec_r[None] * S_r, s=(n, n), axes=(-2, -1))

    def likelihood_from_blurred(self, g: np.ndarray) -> float:
        return float(np.sum(self.d * np.log(np.maximum(g, self.floor))) - g.sum())

    def likelihood(self, s: np.ndarray, f: np.ndarray) -> float:
        S_r = sfft.rfft2(s, axes=(-2, -1))
        return self.likelihood_from_blurred(self.blurred(sfft.rfft2(f), S_r))

    def gradient(self, H: np.ndarray, a: np.ndarray, f: np.ndarray,
                 g: np.ndarray | None = None,
                 s: np.ndarray | None = None) -> np.ndarray:
        """dL/dc_j on the estimated indices, object held fixed."""
        m = self.model
        n = m.n
        f_spec_r = sfft.rfft2(f)
        if g is None:
            if s is None:
                s = m.psfs_from_amplitudes(a)
            g = self.blurred(f_spec_r, sfft.rfft2(s, axes=(-2, -1)))
        ratio = self.d / np.maximum(g, self.floor)
        # q_k = (flipped f) correlated in: irfft2(conj(F) * R_k)
        R_r = sfft.rfft2(ratio, axes=(-2, -1))
        q = sfft.irfft2(f_spec_r.conj()[None] * R_r, s=(n, n), axes=(-2, -1))
        inner = sfft.fft2(q * a.conj(), norm="ortho", axes=(-2, -1))
        T = np.sum(H * inner, axis=0)
        return -(2.0 / m.pupil_count) * (m.zflat @ T.imag.ravel())

    def rl_step(self, f: np.ndarray, S_r: np.ndarray) -> np.ndarray:
        """One raw multiplicative update (no normalization).

        f <- f * (1 / sum_k sum_x s_k) * sum_k s~_k (*) (d_k / (f * s_k));
        with unit-sum PSFs the leading factor is 1/K.
        """
        n = self.model.n
        g = self.blurred(sfft.rfft2(f), S_r)
        ratio = self.d / np.maximum(g, self.floor)
        R_r = sfft.rfft2(ratio, axes=(-2, -1))
        corr = sfft.irfft2(np.sum(S_r.conj() * R_r, axis=0), s=(n, n))
        return f * np.clip(corr, 0.0, None) / self.model.k


def _core_for(stack: DiversityStack, options: PoissonOptions):
    images, config = prepare_images(stack, options.downscale, "sum")
    model = StackModel(config, stack.diversity_z, options.estimated_indices)
    return _PoissonCore(model, images, options.data_floor), config


def _pupils_for(core: _PoissonCore, coeffs: ZernikeVector) -> np.ndarray:
    m = core.model
    extra = ZernikeVector({j: c for j, c in coeffs.items() if j not in m.indices})
    phase = m.phase_in_pupil(coeffs.to_array(m.indices))
    if len(extra):
        phase = phase + phase_from_coeffs(extra, m.grid)[m.mask]
    return m.pupils_from_phase_samples(phase)


def poisson_likelihood(coeffs: ZernikeVector, obj: np.ndarray, stack: DiversityStack,
                       options: PoissonOptions | None = None) -> float:
    """sum_k sum_x [d ln(f * s_k) - f * s_k], with the data clamped at the
    floor and the log argument floored likewise."""
    options = options or PoissonOptions()
    core, _ = _core_for(stack, options)
    s = core.model.psfs_from_amplitudes(core.model.amplitudes(_pupils_for(core, coeffs)))
    return core.likelihood(s, np.asarray(obj, dtype=float))


def poisson_gradient(coeffs: ZernikeVector, obj: np.ndarray, stack: DiversityStack,
                     options: PoissonOptions | None = None) -> np.ndarray:
    """Analytic likelihood gradient on the estimated indices, object fixed."""
    options = options or PoissonOptions()
    core, _ = _core_for(stack, options)
    H = _pupils_for(core, coeffs)
    a = core.model.amplitudes(H)
    return core.gradient(H, a, np.asarray(obj, dtype=float))


def object_update(coeffs: ZernikeVector, obj: np.ndarray, stack: DiversityStack,
                  options: PoissonOptions | None = None) -> np.ndarray:
    """One multiplicative object update, normalized to unit sum."""
    options = options or PoissonOptions()
    core, _ = _core_for(stack, options)
    s = core.model.psfs_from_amplitudes(core.model.amplitudes(_pupils_for(core, coeffs)))
    S_r = sfft.rfft2(s, axes=(-2, -1))
    new = core.rl_step(np.asarray(obj, dtype=float), S_r)
    total = new.sum()
    if total <= 0:
        raise ValueError("object update collapsed to zero; data may be degenerate")
    return new / total


def estimate_poisson(stack: DiversityStack,
                     options: PoissonOptions | None = None) -> EstimationResult:
    """Alternating maximization of the Poisson likelihood."""
    t0 = time.perf_counter()
    options = options or PoissonOptions()
    validate_estimation_stack(stack)
    core, config = _core_for(stack, options)
    m = core.model
    idx = m.indices
    n = m.n

    c = np.full(len(idx), options.init_value)
    f = np.full((n, n), 1.0 / (n * n))

    def full_eval(c_arr):
        H = m.pupils(c_arr)
        a = m.amplitudes(H)
        s = m.psfs_from_amplitudes(a)
        return H, a, s, sfft.rfft2(s, axes=(-2, -1))

    H, a, s, S_r = full_eval(c)
    objective = core.likelihood_from_blurred(core.blurred(sfft.rfft2(f), S_r))
    trace = [TracePoint(0, objective, math.nan, dict(zip(idx, c.tolist())))]
    converged = False
    reason = "max_outer_iterations"
    step_scale = options.line_search_initial_step
    it = 0
    for it in range(1, options.max_outer_iterations + 1):
        grad = core.gradient(H, a, f, s=s)
        gnorm = float(np.linalg.norm(grad))
        trace[-1] = TracePoint(trace[-1].iteration, trace[-1].objective, gnorm,
                               trace[-1].coeffs)
        # at the uniform start the coefficient gradient vanishes identically
        # (a flat object correlates every ratio to a constant), so a small
        # gradient only signals convergence once the object carries structure
        if gnorm <= options.gradient_norm_tol:
            if it > 1:
                converged, reason = True, "gradient_tolerance"
                break
        else:
            direction = grad / gnorm
            f_spec_r = sfft.rfft2(f)

            def phi(t):
                if t == 0.0:
                    return objective
                _, _, s_t, S_t = full_eval(c + t * direction)
                return core.likelihood_from_blurred(core.blurred(f_spec_r, S_t))

            # expand the bracket while the likelihood keeps rising at its end
            hi = step_scale
            f_hi = phi(hi)
            for _ in range(12):
                f_2hi = phi(2.0 * hi)
                if f_2hi <= f_hi:
                    break
                hi, f_hi = 2.0 * hi, f_2hi
            lo, b = 0.0, hi
            x1 = b - _GOLDEN * b
            x2 = _GOLDEN * b
            f1, f2 = phi(x1), phi(x2)
            for _ in range(options.line_search_iterations):
                if f1 < f2:
                    lo, x1, f1 = x1, x2, f2
                    x2 = lo + _GOLDEN * (b - lo)
                    f2 = phi(x2)
                else:
                    b, x2, f2 = x2, x1, f1
                    x1 = lo + (1.0 - _GOLDEN) * (b - lo)
                    f1 = phi(x1)
            t_best, f_best = (x1, f1) if f1 >= f2 else (x2, f2)
            if f_hi > f_best:
                t_best, f_best = hi, f_hi
            if not (f_best > objective) or t_best == 0.0:
                reason = "line_search_failed"
                break
            c = c + t_best * direction
            step_scale = max(t_best, 1e-12)
            H, a, s, S_r = full_eval(c)
        for _ in range(options.object_inner_iterations):
            f = core.rl_step(f, S_r)
            total = f.sum()
            if total <= 0:
                raise RuntimeError("object iterate collapsed to zero")
            f /= total
        objective = core.likelihood_from_blurred(core.blurred(sfft.rfft2(f), S_r))
        trace.append(TracePoint(it, objective, math.nan, dict(zip(idx, c.tolist()))))

    if math.isnan(trace[-1].grad_norm):
        gnorm = float(np.linalg.norm(core.gradient(H, a, f, s=s)))
        trace[-1] = TracePoint(trace[-1].iteration, trace[-1].objective, gnorm,
                               trace[-1].coeffs)

    return EstimationResult(
        estimator="poisson",
        coeffs=ZernikeVector(dict(zip(idx, c.tolist()))),
        object_estimate=f,
        trace=trace,
        converged=converged,
        reason=reason,
        iterations=it,
        wall_time=time.perf_counter() - t0,
        config=config,
        downscaled=options.downscale,
    )

"""Zernike polynomials over the microscope pupil, Noll indexing and normalization.

Polynomials are evaluated on pupil-plane frequency grids where the radial
coordinate is ``rho = |u| / (na / wavelength)``, i.e. rho = 1 on the pupil
edge.  Normalization follows Noll: unit RMS over the unit disk, so a wavefront
coefficient of ``c`` radians on any single polynomial contributes ``c / (2 pi)``
waves of RMS wavefront error.
"""

from __future__ import annotations

import math
from typing import Iterable, Mapping

import numpy as np

__all__ = [
    "noll_to_nm",
    "zernike_eval",
    "zernike_basis",
    "zernike_norm",
    "normalized_norms",
    "ZernikeVector",
    "phase_from_coeffs",
    "wrms",
    "rwe",
]


def noll_to_nm(j: int) -> tuple[int, int]:
    """Map a Noll index ``j`` (1-based) to radial order ``n`` and azimuthal
    frequency ``m``.

    Negative ``m`` denotes the sine term, positive the cosine term.  Follows
    the standard convention where even ``j`` maps to cosine terms.
    """
    if j < 1:
        raise ValueError(f"Noll index must be >= 1, got {j}")
    n = int((-1.0 + math.sqrt(8.0 * (j - 1) + 1.0)) / 2.0)
    p = j - n * (n + 1) // 2
    k = n % 2
    m = ((p + k) // 2) * 2 - k
    if m != 0:
        m = m if j % 2 == 0 else -m
    return n, m


def _radial(n: int, m_abs: int, rho: np.ndarray) -> np.ndarray:
    # R_n^m as a polynomial in rho^2, times rho^m.  Exact integer coefficients.
    s = (n - m_abs) // 2
    rho2 = rho * rho
    out = np.zeros_like(rho)
    for k in range(s + 1):
        c = (-1) ** k * math.factorial(n - k) // (
            math.factorial(k)
            * math.factorial((n + m_abs) // 2 - k)
            * math.factorial((n - m_abs) // 2 - k)
        )
        out = out * rho2 + float(c)
    if m_abs > 0:
        out = out * rho ** m_abs
    return out


def zernike_eval(j: int, grid) -> np.ndarray:
    """Evaluate Noll polynomial ``Z_j`` on a frequency grid.

    Returns a real field in DFT ordering, zero outside the pupil.  The grid's
    frequency coordinates are rescaled so the pupil edge is at rho = 1.
    """
    n, m = noll_to_nm(j)
    inside = grid.inside_pupil
    rho = grid.u_norm[inside] / grid.cutoff
    r = _radial(n, abs(m), rho)
    if m == 0:
        vals = math.sqrt(n + 1.0) * r
    else:
        theta = np.arctan2(grid.uy[inside], grid.ux[inside])
        ang = np.cos(m * theta) if m > 0 else np.sin(-m * theta)
        vals = math.sqrt(2.0 * (n + 1.0)) * r * ang
    field = np.zeros(grid.u_norm.shape)
    field[inside] = vals
    return field


def zernike_basis(indices: Iterable[int], grid) -> np.ndarray:
    """Stack ``Z_j`` fields for the given indices, shape (len(indices), N, N)."""
    idx = list(indices)
    out = np.empty((len(idx),) + grid.u_norm.shape)
    for row, j in enumerate(idx):
        out[row] = zernike_eval(j, grid)
    return out


def zernike_norm(j: int, grid) -> float:
    """Discrete integral of Z_j^2 over the pupil (one grid sample = unit area).

    For j = 1 (piston) this equals the pupil pixel count; for Noll-normalized
    polynomials the ratio to the pupil area tends to 1 as the grid refines.
    """
    z = zernike_eval(j, grid)
    return float(np.sum(z[grid.inside_pupil] ** 2))


def normalized_norms(indices: Iterable[int], grid) -> dict[int, float]:
    """Per-index squared norms divided by the discrete pupil area.

    These are the ``A_j`` values used by :func:`wrms` and :func:`rwe`; with
    this normalization a lone coefficient ``c_j`` (radians) has a wavefront
    RMS error of ``c_j / (2 pi)`` waves, up to discretization error.
    """
    area = float(np.count_nonzero(grid.inside_pupil))
    if area == 0:
        raise ValueError("pupil mask is empty; grid does not resolve the pupil")
    return {int(j): zernike_norm(j, grid) / area for j in indices}


class ZernikeVector:
    """Sparse wavefront coefficient vector keyed by Noll index, in radians.

    Aberration sampling and estimation work with indices j >= 4 (piston, tip
    and tilt carry no image information in this model); the container itself
    accepts any j >= 1 so that piston-invariance properties can be expressed.
    """

    __slots__ = ("_c",)

    def __init__(self, coeffs: Mapping[int, float] | None = None):
        store: dict[int, float] = {}
        for j, v in (coeffs or {}).items():
            j = int(j)
            if j < 1:
                raise ValueError(f"Noll index must be >= 1, got {j}")
            v = float(v)
            if not math.isfinite(v):
                raise ValueError(f"coefficient c_{j} is not finite: {v}")
            store[j] = v
        self._c = dict(sorted(store.items()))

    @classmethod
    def from_arrays(cls, indices: Iterable[int], values: Iterable[float]) -> "ZernikeVector":
        return cls(dict(zip(list(indices), list(values), strict=True)))

    @property
    def indices(self) -> tuple[int, ...]:
        return tuple(self._c)

    def get(self, j: int, default: float = 0.0) -> float:
        return self._c.get(j, default)

    def __getitem__(self, j: int) -> float:
        return self._c[j]

    def __len__(self) -> int:
        return len(self._c)

    def items(self):
        return self._c.items()

    def as_dict(self) -> dict[int, float]:
        return dict(self._c)

    def to_array(self, indices: Iterable[int]) -> np.ndarray:
        return np.array([self._c.get(int(j), 0.0) for j in indices])

    def scaled(self, factor: float) -> "ZernikeVector":
        return ZernikeVector({j: v * factor for j, v in self._c.items()})

    def __add__(self, other: "ZernikeVector") -> "ZernikeVector":
        keys = set(self._c) | set(other._c)
        return ZernikeVector({j: self.get(j) + other.get(j) for j in keys})

    def __sub__(self, other: "ZernikeVector") -> "ZernikeVector":
        keys = set(self._c) | set(other._c)
        return ZernikeVector({j: self.get(j) - other.get(j) for j in keys})

    def __eq__(self, other) -> bool:
        return isinstance(other, ZernikeVector) and self._c == other._c

    def __repr__(self) -> str:
        inner = ", ".join(f"{j}: {v:.6g}" for j, v in self._c.items())
        return f"ZernikeVector({{{inner}}})"


def phase_from_coeffs(coeffs: ZernikeVector | Mapping[int, float], grid) -> np.ndarray:
    """Pupil phase field (radians) from a coefficient vector; empty -> zeros."""
    items = coeffs.items() if hasattr(coeffs, "items") else dict(coeffs).items()
    phase = np.zeros(grid.u_norm.shape)
    for j, c in items:
        if c != 0.0:
            phase += c * zernike_eval(j, grid)
    return phase


def wrms(coeffs: ZernikeVector | Mapping[int, float], norms: Mapping[int, float]) -> float:
    """RMS wavefront error in waves: (1 / 2 pi) * sqrt(sum_j c_j^2 / A_j).

    ``norms`` must hold an area-normalized ``A_j`` (see
    :func:`normalized_norms`) for every index present in ``coeffs``.
    """
    items = coeffs.items() if hasattr(coeffs, "items") else dict(coeffs).items()
    acc = 0.0
    for j, c in items:
        try:
            a = norms[j]
        except KeyError:
            raise KeyError(f"missing squared norm A_j for Noll index {j}") from None
        acc += c * c / a
    return math.sqrt(acc) / (2.0 * math.pi)


def rwe(estimate: ZernikeVector, truth: ZernikeVector, norms: Mapping[int, float]) -> float:
    """Residual wavefront error in waves between two coefficient vectors.

    Indices missing from either side are treated as zero, so unestimated
    true aberration content counts in full.
    """
    return wrms(truth - estimate, norms)

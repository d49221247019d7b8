"""Synthetic fluorescence objects used as ground truth for simulations.

Four qualitative classes: dense cell fields, sparse cell fields, filament
networks and broad texture.  Estimation results must not hinge on the exact
form of any generator, only on gross statistics (support density, contrast),
so the implementations favor simplicity over biological fidelity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

__all__ = ["ObjectSpec", "generate_object", "OBJECT_KINDS"]

OBJECT_KINDS = ("cells-dense", "cells-sparse", "filaments", "texture")

_DEFAULT_COUNTS = {"cells-dense": 40, "cells-sparse": 10, "filaments": 14, "texture": 0}


@dataclass(frozen=True)
class ObjectSpec:
    """Recipe for a deterministic synthetic object canvas.

    ``canvas_size`` should be at least twice the simulated image size so the
    crop-convolution has a clean margin.  ``margin_fraction`` forces an empty
    border band of that relative width (useful when an exactly cyclic image
    model is wanted inside the field of view).  ``cell_count`` of None picks
    a per-kind default; 0 gives an empty canvas.
    """

    kind: str = "cells-dense"
    canvas_size: int = 512
    cell_count: int | None = None
    feature_scale: float = 1.0
    texture_strength: float = 0.5
    margin_fraction: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in OBJECT_KINDS:
            raise ValueError(f"unknown object kind {self.kind!r}, expected one of {OBJECT_KINDS}")
        if self.canvas_size < 16:
            raise ValueError(f"canvas_size too small: {self.canvas_size}")
        if self.cell_count is not None and self.cell_count < 0:
            raise ValueError("cell_count must be >= 0")
        if not 0.0 <= self.margin_fraction < 0.5:
            raise ValueError("margin_fraction must be in [0, 0.5)")
        if self.feature_scale <= 0:
            raise ValueError("feature_scale must be positive")

    @property
    def count(self) -> int:
        c = self.cell_count
        return _DEFAULT_COUNTS[self.kind] if c is None else c


def _smooth_noise(rng: np.random.Generator, n: int, sigma: float) -> np.ndarray:
    x = gaussian_filter(rng.standard_normal((n, n)), sigma=sigma, mode="wrap")
    sd = x.std()
    return x / sd if sd > 0 else x


def _cells(spec: ObjectSpec, rng: np.random.Generator) -> np.ndarray:
    n = spec.canvas_size
    field = np.zeros((n, n))
    dense = spec.kind == "cells-dense"
    base_r = (n / 18.0 if dense else n / 30.0) * spec.feature_scale
    yy, xx = np.mgrid[0:n, 0:n].astype(float)
    lo = spec.margin_fraction * n
    hi = n - lo
    for _ in range(spec.count):
        a = base_r * rng.uniform(0.6, 1.4)
        b = base_r * rng.uniform(0.6, 1.4)
        ext = 1.8 * max(a, b)
        cy = rng.uniform(min(lo + ext, n / 2), max(hi - ext, n / 2))
        cx = rng.uniform(min(lo + ext, n / 2), max(hi - ext, n / 2))
        ang = rng.uniform(0.0, math.pi)
        amp = rng.uniform(0.4, 1.0)
        dy, dx = yy - cy, xx - cx
        ca, sa = math.cos(ang), math.sin(ang)
        q = ((dx * ca + dy * sa) / a) ** 2 + ((-dx * sa + dy * ca) / b) ** 2
        field += amp * np.exp(-(q ** 3))  # flat-top soft ellipse
    if field.max() > 0 and spec.texture_strength > 0:
        tex = 1.0 + spec.texture_strength * _smooth_noise(rng, n, 3.0 * spec.feature_scale)
        field *= np.clip(tex, 0.05, None)
    return field


def _filaments(spec: ObjectSpec, rng: np.random.Generator) -> np.ndarray:
    n = spec.canvas_size
    field = np.zeros((n, n))
    lo = spec.margin_fraction * n + 2.0
    hi = n - lo
    steps = int(2.2 * n)
    for _ in range(spec.count):
        y = rng.uniform(lo, hi)
        x = rng.uniform(lo, hi)
        heading = rng.uniform(0.0, 2.0 * math.pi)
        amp = rng.uniform(0.5, 1.0)
        turns = rng.normal(0.0, 0.15, steps)
        for t in range(steps):
            heading += turns[t]
            y += math.sin(heading)
            x += math.cos(heading)
            if not (lo <= y < hi and lo <= x < hi):
                break
            field[int(y), int(x)] += amp
    field = gaussian_filter(field, sigma=1.3 * spec.feature_scale)
    if field.max() > 0 and spec.texture_strength > 0:
        tex = 1.0 + 0.5 * spec.texture_strength * _smooth_noise(rng, n, 4.0 * spec.feature_scale)
        field *= np.clip(tex, 0.05, None)
    return field


def _texture(spec: ObjectSpec, rng: np.random.Generator) -> np.ndarray:
    n = spec.canvas_size
    coarse = _smooth_noise(rng, n, n / 14.0 * spec.feature_scale)
    fine = _smooth_noise(rng, n, n / 48.0 * spec.feature_scale)
    field = coarse + (0.3 + 0.7 * spec.texture_strength) * fine
    field -= field.min()
    return field


def _margin_window(n: int, margin_fraction: float) -> np.ndarray:
    if margin_fraction <= 0:
        return np.ones((n, n))
    m = int(round(margin_fraction * n))
    ramp = np.ones(n)
    ramp[:m] = 0.0
    ramp[n - m:] = 0.0
    # raised-cosine shoulder over an extra band of the same width
    w = min(m, n // 2 - m)
    if w > 0:
        t = 0.5 - 0.5 * np.cos(math.pi * np.arange(1, w + 1) / (w + 1))
        ramp[m:m + w] = t
        ramp[n - m - w:n - m] = t[::-1]
    return np.outer(ramp, ramp)


def generate_object(spec: ObjectSpec) -> np.ndarray:
    """Render a canvas in [0, 1]. Deterministic in ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    if spec.kind in ("cells-dense", "cells-sparse"):
        field = _cells(spec, rng)
    elif spec.kind == "filaments":
        field = _filaments(spec, rng)
    else:
        field = _texture(spec, rng)
    if spec.kind != "texture" and spec.count == 0:
        return np.zeros((spec.canvas_size, spec.canvas_size))
    field *= _margin_window(spec.canvas_size, spec.margin_fraction)
    field = np.clip(field, 0.0, None)
    peak = field.max()
    if peak > 0:
        field /= peak
    return field

"""Disk format for diversity stacks: float32 TIFFs plus a YAML sidecar.

A stack directory holds one grayscale TIFF per diversity plane and a
``stack.yaml`` with the imaging geometry, diversity offsets, noise model,
ground-truth coefficients and seed when known.  The format is plain enough
to assemble by hand for externally acquired data.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np
import tifffile
import yaml

from pdmicro.optics import OpticalConfig
from pdmicro.simulate import DiversityStack, NoiseParams
from pdmicro.zernike import ZernikeVector

__all__ = ["save_stack", "load_stack", "METADATA_NAME"]

METADATA_NAME = "stack.yaml"
_FORMAT = "pdmicro-stack-v1"


def _atomic_write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def save_stack(stack: DiversityStack, directory: str | Path) -> Path:
    """Write a stack to ``directory`` (created if needed); returns the path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = []
    for k in range(stack.k):
        name = f"plane_{k:02d}.tif"
        tifffile.imwrite(directory / name, stack.images[k].astype(np.float32))
        names.append(name)
    cfg = stack.config
    meta = {
        "format": _FORMAT,
        "optics": {
            "na": cfg.na,
            "wavelength_um": cfg.wavelength,
            "medium_index": cfg.medium_index,
            "pixel_pitch_um": cfg.pixel_pitch,
            "grid_size": cfg.grid_size,
        },
        "diversity_z_um": [float(z) for z in stack.diversity_z],
        "images": names,
        "noise": None if stack.noise is None else {
            "photons_per_pixel": stack.noise.photons_per_pixel,
            "quantum_efficiency": stack.noise.quantum_efficiency,
            "dark_mean": stack.noise.dark_mean,
            "read_sigma": stack.noise.read_sigma,
        },
        "truth_coefficients_rad": None if stack.truth is None else {
            int(j): float(c) for j, c in stack.truth.items()
        },
        "seed": stack.seed,
    }
    _atomic_write_text(directory / METADATA_NAME,
                       yaml.safe_dump(meta, sort_keys=True, default_flow_style=False))
    return directory


def load_stack(directory: str | Path) -> DiversityStack:
    """Read a stack directory written by :func:`save_stack` (or by hand)."""
    directory = Path(directory)
    meta_path = directory / METADATA_NAME
    if not meta_path.is_file():
        raise FileNotFoundError(f"no {METADATA_NAME} in {directory}")
    meta = yaml.safe_load(meta_path.read_text())
    if meta.get("format") != _FORMAT:
        raise ValueError(f"unrecognized stack format {meta.get('format')!r}")
    o = meta["optics"]
    config = OpticalConfig(
        na=float(o["na"]),
        wavelength=float(o["wavelength_um"]),
        medium_index=float(o["medium_index"]),
        pixel_pitch=float(o["pixel_pitch_um"]),
        grid_size=int(o["grid_size"]),
    )
    images = []
    for name in meta["images"]:
        path = directory / name
        if not path.is_file():
            raise FileNotFoundError(f"stack image missing: {path}")
        images.append(tifffile.imread(path).astype(float))
    noise = None
    if meta.get("noise"):
        nz = meta["noise"]
        noise = NoiseParams(
            photons_per_pixel=float(nz["photons_per_pixel"]),
            quantum_efficiency=float(nz["quantum_efficiency"]),
            dark_mean=float(nz["dark_mean"]),
            read_sigma=float(nz["read_sigma"]),
        )
    truth = None
    if meta.get("truth_coefficients_rad"):
        truth = ZernikeVector({int(j): float(c)
                               for j, c in meta["truth_coefficients_rad"].items()})
    return DiversityStack(
        images=np.stack(images),
        diversity_z=tuple(float(z) for z in meta["diversity_z_um"]),
        config=config,
        noise=noise,
        truth=truth,
        seed=meta.get("seed"),
    )

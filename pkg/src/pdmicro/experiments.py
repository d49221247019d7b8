"""Seeded sweep experiments over the simulation/estimation pipeline.

One experiment runs many independent trials across an axis of sweep values
and aggregates residual wavefront error per (axis value, estimator).  With
an output directory it leaves a reproducible audit trail: a manifest echoing
the resolved configuration, one JSON file per completed trial (interrupted
runs resume from these), the raw per-trial CSV, the derived aggregate CSV
and plot images.  Trial ``i`` of the experiment always runs from seed
``base_seed + i``, so results are independent of worker count and of which
trials were resumed from disk.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .correct import correction_trial
from .gaussian import GaussianOptions, estimate_gaussian
from .objects import ObjectSpec, generate_object
from .optics import OpticalConfig, make_frequency_grid
from .poisson import PoissonOptions, estimate_poisson
from .simulate import (
    NoiseParams,
    PhaseNoiseParams,
    SpatialVarianceParams,
    apply_phase_noise,
    default_diversity_z,
    sample_aberration,
    simulate_spatially_variant_stack,
    simulate_stack,
)
from .zernike import normalized_norms, rwe

__all__ = [
    "ESTIMATOR_CHOICES",
    "EXPERIMENT_KINDS",
    "ExperimentConfig",
    "PointSummary",
    "SweepResult",
    "TooManyTrialFailures",
    "TrialFailure",
    "TrialRecord",
    "experiment_config_from_dict",
    "run_experiment",
]

EXPERIMENT_KINDS = (
    "abmag-sweep",
    "noise-sweep",
    "imsize-sweep",
    "sv-study",
    "phase-noise-sweep",
    "correction-compare",
    "single",
)
ESTIMATOR_CHOICES = ("gaussian", "poisson", "both")

RAW_CSV_FIELDS = ("seed", "axis_value", "estimator", "rwe", "wall_time",
                  "converged", "iterations")
AGGREGATE_CSV_FIELDS = ("axis_value", "estimator", "trials", "mean_rwe",
                        "stderr", "mean_wall_time")
CORRECTION_CSV_FIELDS = ("seed", "axis_value", "photons_per_pixel",
                         "ssim_deconvolved", "ssim_reacquired",
                         "ssim_uncorrected", "rwe_used", "dose_factor")

# at most this fraction of trials may fail before the experiment aborts
FAILURE_BUDGET = 0.10


class TooManyTrialFailures(RuntimeError):
    """More than the failure budget of trials raised; aggregates would lie."""


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to reproduce one sweep.

    ``axis`` meaning depends on ``kind``: aberration magnitude in waves
    (abmag-sweep), photons per pixel (noise-sweep, correction-compare),
    even image sizes in pixels (imsize-sweep), per-tile magnitude relative
    to the isoplanatic wavefront (sv-study), per-coefficient jitter sigma in
    radians (phase-noise-sweep), or a single label value (single).  Other
    kinds take their aberration level from ``target_wrms`` and their photon
    budget from ``noise``.  ``downscale`` adds a "-downscaled" run of every
    selected estimator alongside the full-resolution one so the two can be
    compared pairwise.
    """

    kind: str
    axis: tuple[float, ...] = (0.0,)
    trials: int = 20
    estimator: str = "both"
    object_spec: ObjectSpec = field(default_factory=lambda: ObjectSpec(margin_fraction=0.35))
    optical: OpticalConfig = field(default_factory=lambda: OpticalConfig(grid_size=128))
    noise: NoiseParams | None = field(default_factory=NoiseParams.low_additive)
    target_wrms: float = 1.0
    sv_correlation: str = "low-frequency"
    imsize_paradigm: str = "crop"
    dose_factor: float = 4.0 / 3.0
    rl_iterations: int = 50
    gaussian_options: GaussianOptions = field(default_factory=GaussianOptions)
    poisson_options: PoissonOptions = field(default_factory=PoissonOptions)
    base_seed: int = 0
    output_dir: str | None = None
    downscale: bool = False
    workers: int = 1

    def __post_init__(self):
        if self.kind not in EXPERIMENT_KINDS:
            raise ValueError(f"unknown experiment kind {self.kind!r}, "
                             f"expected one of {EXPERIMENT_KINDS}")
        if self.estimator not in ESTIMATOR_CHOICES:
            raise ValueError(f"estimator must be one of {ESTIMATOR_CHOICES}, "
                             f"got {self.estimator!r}")
        axis = tuple(float(v) for v in self.axis)
        object.__setattr__(self, "axis", axis)
        if not axis:
            raise ValueError("axis must hold at least one sweep value")
        if not all(np.isfinite(axis)):
            raise ValueError(f"axis values must be finite, got {axis}")
        if self.trials < 1:
            raise ValueError(f"trials must be >= 1, got {self.trials}")
        if self.workers < 1:
            raise ValueError(f"workers must be >= 1, got {self.workers}")
        if self.imsize_paradigm not in ("crop", "magnify"):
            raise ValueError("imsize_paradigm must be 'crop' or 'magnify'")
        if self.target_wrms < 0:
            raise ValueError("target_wrms must be >= 0")
        if self.rl_iterations < 1:
            raise ValueError("rl_iterations must be >= 1")
        if self.dose_factor <= 0:
            raise ValueError("dose_factor must be positive")
        if self.kind == "single" and len(axis) != 1:
            raise ValueError("kind 'single' takes exactly one axis value")
        if self.kind in ("noise-sweep", "correction-compare"):
            if self.noise is None:
                raise ValueError(f"{self.kind} needs a noise model to scale")
            if any(v <= 0 for v in axis):
                raise ValueError("photon axis values must be positive")
        if self.kind == "correction-compare" and self.estimator == "gaussian":
            raise ValueError("correction-compare runs the poisson estimator")
        if self.kind == "imsize-sweep":
            sizes = [int(v) for v in axis]
            if any(v != int(v) for v in axis) or any(s < 32 or s % 2 for s in sizes):
                raise ValueError("imsize axis values must be even integers >= 32")
            ref = max(sizes)
            if self.object_spec.canvas_size < 2 * ref:
                raise ValueError("object canvas must be at least twice the "
                                 "largest image size")
            if self.imsize_paradigm == "magnify":
                if self.object_spec.canvas_size != 2 * ref:
                    raise ValueError("magnify paradigm needs canvas_size == "
                                     "2 * max(axis) so pooled canvases stay "
                                     "twice the image size")
                if any(ref % s for s in sizes):
                    raise ValueError("magnify paradigm needs sizes that "
                                     "divide the largest size")
        if self.kind == "phase-noise-sweep" and any(v < 0 for v in axis):
            raise ValueError("phase noise sigmas must be >= 0")
        if self.kind == "sv-study" and any(v < 0 for v in axis):
            raise ValueError("spatial variance magnitudes must be >= 0")


@dataclass(frozen=True)
class TrialRecord:
    seed: int
    axis_value: float
    estimator: str
    rwe: float
    wall_time: float
    converged: bool
    iterations: int


@dataclass(frozen=True)
class TrialFailure:
    seed: int
    axis_value: float
    reason: str


@dataclass(frozen=True)
class PointSummary:
    """Aggregate over the completed trials of one (axis value, estimator)."""

    axis_value: float
    estimator: str
    rwes: tuple[float, ...]
    mean_rwe: float
    stderr: float
    mean_wall_time: float

    @property
    def trials(self) -> int:
        return len(self.rwes)


@dataclass
class SweepResult:
    config: ExperimentConfig
    records: list[TrialRecord]
    failures: list[TrialFailure]
    points: list[PointSummary]
    corrections: list[dict]

    def point(self, axis_value: float, estimator: str) -> PointSummary:
        for p in self.points:
            if p.axis_value == axis_value and p.estimator == estimator:
                return p
        raise KeyError(f"no aggregate for axis={axis_value}, estimator={estimator!r}")

    def rwes(self, axis_value: float, estimator: str) -> tuple[float, ...]:
        return self.point(axis_value, estimator).rwes


def _estimator_jobs(cfg: ExperimentConfig):
    names = ("gaussian", "poisson") if cfg.estimator == "both" else (cfg.estimator,)
    jobs = []
    for name in names:
        opts = cfg.gaussian_options if name == "gaussian" else cfg.poisson_options
        jobs.append((name, dataclasses.replace(opts, downscale=False)))
        if cfg.downscale:
            jobs.append((f"{name}-downscaled", dataclasses.replace(opts, downscale=True)))
    return jobs


def _block_pool(canvas: np.ndarray, factor: int) -> np.ndarray:
    """Mean-pool square blocks; models re-imaging at coarser magnification."""
    if factor == 1:
        return canvas
    m = canvas.shape[0]
    if m % factor:
        raise ValueError(f"canvas size {m} not divisible by pool factor {factor}")
    return canvas.reshape(m // factor, factor, m // factor, factor).mean(axis=(1, 3))


def _optical_for(cfg: ExperimentConfig, axis_value: float) -> OpticalConfig:
    if cfg.kind != "imsize-sweep":
        return cfg.optical
    size = int(axis_value)
    if cfg.imsize_paradigm == "crop":
        return dataclasses.replace(cfg.optical, grid_size=size)
    ref = int(max(cfg.axis))
    return dataclasses.replace(cfg.optical, grid_size=size,
                               pixel_pitch=cfg.optical.pixel_pitch * ref / size)


def _canvas_for(cfg: ExperimentConfig, spec: ObjectSpec, axis_value: float) -> np.ndarray:
    canvas = generate_object(spec)
    if cfg.kind == "imsize-sweep" and cfg.imsize_paradigm == "magnify":
        canvas = _block_pool(canvas, int(max(cfg.axis)) // int(axis_value))
    return canvas


def _noise_for(cfg: ExperimentConfig, axis_value: float) -> NoiseParams | None:
    if cfg.kind in ("noise-sweep", "correction-compare"):
        return dataclasses.replace(cfg.noise, photons_per_pixel=axis_value)
    return cfg.noise


def _run_trial(cfg: ExperimentConfig, axis_value: float, seed: int):
    """All records for one seeded trial; every estimator sees the same stack."""
    rng = np.random.default_rng(seed)
    optical = _optical_for(cfg, axis_value)
    spec = dataclasses.replace(cfg.object_spec, seed=cfg.object_spec.seed + seed)
    canvas = _canvas_for(cfg, spec, axis_value)
    norms = normalized_norms(range(4, 46), make_frequency_grid(optical))
    target = axis_value if cfg.kind == "abmag-sweep" else cfg.target_wrms
    truth = sample_aberration(target, rng, norms)
    noise = _noise_for(cfg, axis_value)
    diversity_z = default_diversity_z(optical)

    if cfg.kind == "correction-compare":
        report, est = correction_trial(
            canvas, truth, noise, optical, rng,
            options=cfg.poisson_options, rl_iterations=cfg.rl_iterations,
            dose_factor=cfg.dose_factor,
        )
        record = TrialRecord(seed=seed, axis_value=axis_value, estimator="poisson",
                             rwe=report.rwe_used, wall_time=est.wall_time,
                             converged=est.converged, iterations=est.iterations)
        row = {"seed": seed, "axis_value": axis_value, **dataclasses.asdict(report)}
        return [record], [row]

    if cfg.kind == "sv-study":
        sv = SpatialVarianceParams(correlation=cfg.sv_correlation, magnitude=axis_value)
        stack = simulate_spatially_variant_stack(canvas, truth, diversity_z, noise,
                                                 optical, sv, rng, seed=seed)
    elif cfg.kind == "phase-noise-sweep":
        per_image = apply_phase_noise(truth, len(diversity_z),
                                      PhaseNoiseParams(sigma=axis_value), rng)
        stack = simulate_stack(canvas, truth, diversity_z, noise, optical, rng,
                               per_image_coeffs=per_image, seed=seed)
    else:
        stack = simulate_stack(canvas, truth, diversity_z, noise, optical, rng,
                               seed=seed)

    records = []
    for name, opts in _estimator_jobs(cfg):
        estimate = estimate_gaussian if name.startswith("gaussian") else estimate_poisson
        result = estimate(stack, opts)
        records.append(TrialRecord(
            seed=seed, axis_value=axis_value, estimator=name,
            rwe=rwe(result.coeffs, truth.coeffs, norms),
            wall_time=result.wall_time, converged=result.converged,
            iterations=result.iterations,
        ))
    return records, []


def _trial_task(cfg: ExperimentConfig, axis_value: float, seed: int):
    """Pool-safe wrapper: never raises, returns an error string instead."""
    try:
        records, corrections = _run_trial(cfg, axis_value, seed)
        return seed, axis_value, records, corrections, None
    except Exception as exc:  # noqa: BLE001 - trial failures are data here
        return seed, axis_value, [], [], f"{type(exc).__name__}: {exc}"


def config_hash(cfg: ExperimentConfig) -> str:
    """Hash of everything that affects trial results (not location/parallelism)."""
    d = dataclasses.asdict(cfg)
    d.pop("output_dir")
    d.pop("workers")
    blob = json.dumps(d, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def _atomic_write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _trial_path(out: Path, seed: int, digest: str) -> Path:
    return out / "trials" / f"trial_{seed:08d}_{digest}.json"


def _save_trial(path: Path, axis_value: float, records, corrections) -> None:
    payload = {
        "axis_value": axis_value,
        "records": [dataclasses.asdict(r) for r in records],
        "corrections": corrections,
    }
    _atomic_write_text(path, json.dumps(payload, sort_keys=True))


def _load_trial(path: Path):
    payload = json.loads(path.read_text())
    records = [TrialRecord(**r) for r in payload["records"]]
    return records, payload["corrections"]


def _aggregate(cfg: ExperimentConfig, records: list[TrialRecord]) -> list[PointSummary]:
    by_key: dict[tuple[float, str], list[TrialRecord]] = {}
    for r in records:
        by_key.setdefault((r.axis_value, r.estimator), []).append(r)
    estimator_order = [name for name, _ in _estimator_jobs(cfg)]
    if cfg.kind == "correction-compare":
        estimator_order = ["poisson"]
    points = []
    for v in cfg.axis:
        for name in estimator_order:
            group = by_key.get((v, name))
            if not group:
                continue
            rwes = tuple(r.rwe for r in group)
            mean = float(np.mean(rwes))
            stderr = (float(np.std(rwes, ddof=1) / np.sqrt(len(rwes)))
                      if len(rwes) > 1 else 0.0)
            points.append(PointSummary(
                axis_value=v, estimator=name, rwes=rwes, mean_rwe=mean,
                stderr=stderr,
                mean_wall_time=float(np.mean([r.wall_time for r in group])),
            ))
    return points


def _write_manifest(out: Path, cfg: ExperimentConfig, digest: str,
                    completed: int, failures: list[TrialFailure]) -> None:
    manifest = {
        "config": dataclasses.asdict(cfg),
        "config_hash": digest,
        "expected_trials": len(cfg.axis) * cfg.trials,
        "completed_trials": completed,
        "failed_trials": len(failures),
        "failures": [dataclasses.asdict(f) for f in failures],
    }
    _atomic_write_text(out / "manifest.json",
                       json.dumps(manifest, sort_keys=True, indent=2, default=str))


def _write_csv(path: Path, fieldnames, rows) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(fieldnames))
        writer.writeheader()
        writer.writerows(rows)
    os.replace(tmp, path)


def _write_outputs(out: Path, cfg: ExperimentConfig, result: SweepResult) -> None:
    _write_csv(out / "raw.csv", RAW_CSV_FIELDS,
               [dataclasses.asdict(r) for r in result.records])
    _write_csv(out / "aggregate.csv", AGGREGATE_CSV_FIELDS,
               [{"axis_value": p.axis_value, "estimator": p.estimator,
                 "trials": p.trials, "mean_rwe": p.mean_rwe,
                 "stderr": p.stderr, "mean_wall_time": p.mean_wall_time}
                for p in result.points])
    if result.corrections:
        _write_csv(out / "corrections.csv", CORRECTION_CSV_FIELDS,
                   result.corrections)
    from .plots import render_plots  # matplotlib import deferred until needed

    csvs = [out / "aggregate.csv"]
    if result.corrections:
        csvs.append(out / "corrections.csv")
    render_plots(csvs, out)


def run_experiment(cfg: ExperimentConfig) -> SweepResult:
    """Run (or resume) every trial of ``cfg`` and aggregate the results.

    Trial ``i`` (counting across axis points, ``trials`` per point) uses seed
    ``base_seed + i``; both estimators inside a trial see the same simulated
    stack.  Trials that raise are recorded as failures and kept out of the
    aggregates; more than ``FAILURE_BUDGET`` of them aborts the experiment.
    """
    digest = config_hash(cfg)
    out = Path(cfg.output_dir) if cfg.output_dir else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "trials").mkdir(exist_ok=True)
        manifest_path = out / "manifest.json"
        if manifest_path.exists():
            previous = json.loads(manifest_path.read_text())
            if previous.get("config_hash") != digest:
                raise ValueError(
                    "output directory belongs to a different experiment "
                    f"(manifest hash {previous.get('config_hash')!r} != {digest!r}); "
                    "pick a fresh directory"
                )
        _write_manifest(out, cfg, digest, completed=0, failures=[])

    tasks = []
    for ai, axis_value in enumerate(cfg.axis):
        for t in range(cfg.trials):
            tasks.append((axis_value, cfg.base_seed + ai * cfg.trials + t))

    records: list[TrialRecord] = []
    corrections: list[dict] = []
    failures: list[TrialFailure] = []
    todo = []
    for axis_value, seed in tasks:
        path = _trial_path(out, seed, digest) if out is not None else None
        if path is not None and path.exists():
            recs, corrs = _load_trial(path)
            records.extend(recs)
            corrections.extend(corrs)
        else:
            todo.append((axis_value, seed))

    def consume(outcome):
        seed, axis_value, recs, corrs, error = outcome
        if error is not None:
            failures.append(TrialFailure(seed=seed, axis_value=axis_value, reason=error))
            return
        records.extend(recs)
        corrections.extend(corrs)
        if out is not None:
            _save_trial(_trial_path(out, seed, digest), axis_value, recs, corrs)

    if cfg.workers > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            futures = [pool.submit(_trial_task, cfg, v, s) for v, s in todo]
            for fut in futures:
                consume(fut.result())
    else:
        for axis_value, seed in todo:
            consume(_trial_task(cfg, axis_value, seed))

    records.sort(key=lambda r: (r.seed, r.estimator))
    corrections.sort(key=lambda row: row["seed"])

    if out is not None:
        _write_manifest(out, cfg, digest, completed=len(tasks) - len(failures),
                        failures=failures)
    if len(failures) > FAILURE_BUDGET * len(tasks):
        summary = "; ".join(f"seed {f.seed}: {f.reason}" for f in failures[:3])
        raise TooManyTrialFailures(
            f"{len(failures)} of {len(tasks)} trials failed "
            f"(budget {FAILURE_BUDGET:.0%}); first failures: {summary}"
        )

    result = SweepResult(config=cfg, records=records, failures=failures,
                         points=_aggregate(cfg, records), corrections=corrections)
    if out is not None:
        _write_outputs(out, cfg, result)
    return result


def experiment_config_from_dict(data: dict) -> ExperimentConfig:
    """Build a validated config from plain dict/YAML data."""
    if not isinstance(data, dict):
        raise ValueError(f"experiment config must be a mapping, got {type(data).__name__}")
    d = dict(data)
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ValueError(f"unknown experiment config keys: {unknown}")
    nested = {
        "object_spec": ObjectSpec,
        "optical": OpticalConfig,
        "noise": NoiseParams,
        "gaussian_options": GaussianOptions,
        "poisson_options": PoissonOptions,
    }
    for key, cls in nested.items():
        if key in d and isinstance(d[key], dict):
            try:
                d[key] = cls(**d[key])
            except TypeError as exc:
                raise ValueError(f"bad {key!r} section: {exc}") from None
    for key in ("axis",):
        if key in d and not isinstance(d[key], (list, tuple)):
            raise ValueError(f"{key!r} must be a list of numbers")
    if "axis" in d:
        d["axis"] = tuple(d["axis"])
    for key, cls in nested.items():
        if key in d and d[key] is not None and not isinstance(d[key], cls):
            raise ValueError(f"{key!r} must be a mapping or null")
    try:
        return ExperimentConfig(**d)
    except TypeError as exc:
        raise ValueError(str(exc)) from None

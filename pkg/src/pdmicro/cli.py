"""Command-line front end.

Verbs:

``simulate``
    Draw a random aberration, render a diversity stack through the full
    camera model and save it as a TIFF-plus-YAML directory.
``estimate``
    Run one or both estimators on a saved stack directory and write
    per-estimator reports (coefficients in radians and waves) and traces.
``sweep``
    Run a multi-trial experiment described by a YAML config and write
    per-trial CSV, aggregate CSV and plots.
``correct``
    Shorthand for a correction-compare experiment.
``plot``
    Re-render plot images from previously written CSV tables.

Exit codes: 0 success, 1 config error, 2 runtime failure, 3 too many
trial failures.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml

from pdmicro.estimation import write_report
from pdmicro.experiments import (
    TooManyTrialFailures,
    experiment_config_from_dict,
    run_experiment,
)
from pdmicro.gaussian import GaussianOptions, estimate_gaussian
from pdmicro.objects import ObjectSpec
from pdmicro.optics import OpticalConfig, make_frequency_grid
from pdmicro.plots import render_plots
from pdmicro.poisson import PoissonOptions, estimate_poisson
from pdmicro.simulate import NoiseParams, default_diversity_z, sample_aberration, simulate_stack
from pdmicro.stack_io import load_stack, save_stack
from pdmicro.zernike import normalized_norms

__all__ = ["main"]

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2
EXIT_TRIAL_FAILURES = 3

_SIMULATE_KEYS = {"object", "optical", "noise", "target_wrms", "diversity_z", "seed"}
_ESTIMATE_KEYS = {"gaussian_options", "poisson_options"}


class _UsageError(ValueError):
    """Bad command line; reported as a config error (exit 1)."""


class _Parser(argparse.ArgumentParser):
    # argparse's default error() exits with status 2, which this CLI
    # reserves for runtime failures
    def error(self, message):
        raise _UsageError(message)


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", type=Path, help="YAML config file")
    sub.add_argument("--seed", type=int, help="override the config seed")
    sub.add_argument("--out", type=Path, help="output directory")
    sub.add_argument("--workers", type=int, help="parallel trial workers")
    sub.add_argument("--estimator", choices=("gaussian", "poisson", "both"),
                     help="which estimator(s) to run")
    sub.add_argument("--downscale", action="store_true",
                     help="estimate on 2x downscaled images")


def _build_parser() -> _Parser:
    parser = _Parser(prog="pdmicro",
                     description="Phase-diversity wavefront estimation toolkit")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("simulate", help="render a synthetic diversity stack")
    _add_common(p)

    p = sub.add_parser("estimate", help="estimate aberrations from a stack directory")
    _add_common(p)
    p.add_argument("stack", type=Path,
                   help="directory holding plane_*.tif and stack.yaml")

    p = sub.add_parser("sweep", help="run a multi-trial experiment")
    _add_common(p)

    p = sub.add_parser("correct", help="run a correction-compare experiment")
    _add_common(p)

    p = sub.add_parser("plot", help="re-render plots from CSV tables")
    _add_common(p)
    p.add_argument("csvs", nargs="+", type=Path, help="CSV tables to plot")

    return parser


def _load_yaml(path: Path | None, *, required: bool) -> dict:
    if path is None:
        if required:
            raise ValueError("--config is required for this verb")
        return {}
    with open(path) as fh:
        data = yaml.safe_load(fh)
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ValueError(f"config {path} must be a YAML mapping")
    return data


def _check_keys(data: dict, allowed: set[str], context: str) -> None:
    unknown = set(data) - allowed
    if unknown:
        raise ValueError(f"unknown {context} config keys: {sorted(unknown)}")


def _cmd_simulate(args) -> None:
    cfg = _load_yaml(args.config, required=True)
    _check_keys(cfg, _SIMULATE_KEYS, "simulate")
    if args.out is None:
        raise ValueError("--out is required for simulate")
    optical = OpticalConfig(**(cfg.get("optical") or {}))
    spec = ObjectSpec(**(cfg.get("object") or {}))
    noise_cfg = cfg.get("noise")
    noise = None if noise_cfg is None else NoiseParams(**noise_cfg)
    target = float(cfg.get("target_wrms", 2.0))
    z = tuple(float(v) for v in cfg["diversity_z"]) if "diversity_z" in cfg \
        else default_diversity_z(optical)
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))

    rng = np.random.default_rng(seed)
    norms = normalized_norms(range(4, 46), make_frequency_grid(optical))
    sample = sample_aberration(target, rng, norms)
    stack = simulate_stack(spec, sample, z, noise, optical, rng, seed=seed)
    path = save_stack(stack, args.out)
    print(f"wrote {stack.k}-plane stack to {path}")


def _selected_estimators(choice: str | None) -> tuple[str, ...]:
    if choice in (None, "both"):
        return ("gaussian", "poisson")
    return (choice,)


def _cmd_estimate(args) -> None:
    cfg = _load_yaml(args.config, required=False)
    _check_keys(cfg, _ESTIMATE_KEYS, "estimate")
    stack = load_stack(args.stack)
    gopts = GaussianOptions(**(cfg.get("gaussian_options") or {}))
    popts = PoissonOptions(**(cfg.get("poisson_options") or {}))
    if args.downscale:
        gopts = replace(gopts, downscale=True)
        popts = replace(popts, downscale=True)
    out = args.out if args.out is not None else args.stack
    for name in _selected_estimators(args.estimator):
        if name == "gaussian":
            result = estimate_gaussian(stack, gopts)
        else:
            result = estimate_poisson(stack, popts)
        write_report(result, out, truth=stack.truth)
        print(f"{name}: converged={result.converged} "
              f"iterations={result.iterations} "
              f"wall_time={result.wall_time:.1f}s -> "
              f"{Path(out) / f'report_{name}.txt'}")


def _cmd_experiment(args, forced_kind: str | None = None) -> None:
    data = _load_yaml(args.config, required=True)
    if forced_kind is not None:
        data.setdefault("kind", forced_kind)
        if data["kind"] != forced_kind:
            raise ValueError(
                f"this verb runs kind={forced_kind!r}, config says {data['kind']!r}")
    if args.seed is not None:
        data["base_seed"] = args.seed
    if args.out is not None:
        data["output_dir"] = str(args.out)
    if args.workers is not None:
        data["workers"] = args.workers
    if args.estimator is not None:
        data["estimator"] = args.estimator
    if args.downscale:
        data["downscale"] = True
    config = experiment_config_from_dict(data)
    if config.output_dir is None:
        raise ValueError("an output directory is required (--out or output_dir)")
    result = run_experiment(config)
    for point in result.points:
        print(f"axis={point.axis_value:g} estimator={point.estimator} "
              f"trials={point.trials} mean_rwe={point.mean_rwe:.4f} "
              f"stderr={point.stderr:.4f}")
    print(f"outputs in {config.output_dir}")


def _cmd_plot(args) -> None:
    out = args.out if args.out is not None else Path(".")
    for path in render_plots([str(c) for c in args.csvs], out):
        print(f"wrote {path}")


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.verb == "simulate":
            _cmd_simulate(args)
        elif args.verb == "estimate":
            _cmd_estimate(args)
        elif args.verb == "sweep":
            _cmd_experiment(args)
        elif args.verb == "correct":
            _cmd_experiment(args, forced_kind="correction-compare")
        else:
            _cmd_plot(args)
    except TooManyTrialFailures as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_TRIAL_FAILURES
    except (ValueError, OSError, yaml.YAMLError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # pragma: no cover - defensive
        print(f"unexpected failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

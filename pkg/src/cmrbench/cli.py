"""Command-line interface.

One subcommand per pipeline stage plus ``all``. Every value can come from
three places with the precedence flag > environment > config file; the
environment variables are CMRBENCH_CONFIG, CMRBENCH_SEED, CMRBENCH_OUT,
CMRBENCH_WORKERS and CMRBENCH_RESOLUTION.

Exit codes: 0 success, 2 usage error, 3 configuration error, 4 stage error.
Errors print one machine-readable line ``cmrbench: <category> error: <msg>``.
"""

import argparse
import os
import sys
from dataclasses import replace

from .config import ExperimentConfig, load_config
from .errors import ConfigError, StageError, UsageError
from .pipeline import Pipeline

STAGES = (
    "gen-data",
    "train-mask",
    "train-image",
    "sample",
    "eval-fidelity",
    "eval-shape",
    "eval-utility",
    "eval-privacy",
    "report",
    "all",
)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="experiment TOML file")
    common.add_argument("--seed", type=int, metavar="INT", help="override the master seed")
    common.add_argument("--out", metavar="DIR", help="override the run output directory")
    common.add_argument("--workers", type=int, metavar="INT", help="thread pool size for grid jobs")
    common.add_argument(
        "--resolution", type=int, metavar="INT", help="override the training resolution"
    )
    parser = argparse.ArgumentParser(
        prog="cmrbench",
        description="Two-stage synthetic cardiac MRI benchmark: generation, "
        "fidelity, segmentation utility and privacy.",
    )
    sub = parser.add_subparsers(dest="command", metavar="command", required=True)
    helps = {
        "gen-data": "generate the phantom dataset",
        "train-mask": "train the mask-generating diffusion model",
        "train-image": "train one image generator",
        "sample": "draw synthetic evaluation sets from the trained generators",
        "eval-fidelity": "embedding-space fidelity metrics (FID, KID)",
        "eval-shape": "mask shape-plausibility statistics",
        "eval-utility": "downstream segmentation grid",
        "eval-privacy": "memorization scan and membership inference",
        "report": "merge evaluation fragments, emit CSV/JSON and figures",
        "all": "run every stage in order",
    }
    for name in STAGES:
        stage = sub.add_parser(name, parents=[common], help=helps[name])
        if name == "train-image":
            stage.add_argument("kind", choices=("ddpm", "ldm", "fm"))
    return parser


def _env_int(name: str):
    raw = os.environ.get(name)
    if raw is None:
        return None
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"environment variable {name}={raw!r} is not an integer") from None


def resolve_settings(args) -> tuple:
    """Apply flag/env/config precedence; returns (config, out_dir, workers)."""
    config_path = args.config or os.environ.get("CMRBENCH_CONFIG")
    config = load_config(config_path) if config_path else ExperimentConfig()
    seed = args.seed if args.seed is not None else _env_int("CMRBENCH_SEED")
    if seed is not None:
        config = replace(config, seed=seed)
    resolution = (
        args.resolution if args.resolution is not None else _env_int("CMRBENCH_RESOLUTION")
    )
    if resolution is not None:
        config = replace(config, data=replace(config.data, resolution=resolution))
    out_dir = args.out or os.environ.get("CMRBENCH_OUT") or config.out_dir
    workers = args.workers if args.workers is not None else _env_int("CMRBENCH_WORKERS")
    if workers is not None and workers < 1:
        raise UsageError(f"--workers must be >= 1, got {workers}")
    return config, out_dir, workers or 1


def _dispatch(pipeline: Pipeline, args) -> str:
    command = args.command
    if command == "gen-data":
        dataset = pipeline.gen_data()
        return f"wrote {len(dataset.items)} items to {pipeline.paths.data}"
    if command == "train-mask":
        pipeline.train_mask()
        return f"saved {pipeline.paths.checkpoint('mask_ddpm')}"
    if command == "train-image":
        params = pipeline.train_image(args.kind)
        return f"saved {args.kind} generator ({params.content_hash()[:12]})"
    if command == "sample":
        made = pipeline.sample()
        return f"sampled {len(made)} synthetic set(s): {', '.join(sorted(made))}"
    if command.startswith("eval-"):
        stage = {
            "eval-fidelity": pipeline.eval_fidelity,
            "eval-shape": pipeline.eval_shape,
            "eval-utility": pipeline.eval_utility,
            "eval-privacy": pipeline.eval_privacy,
        }[command]
        report = stage()
        return f"{command}: {len(report.rows)} metric rows"
    if command == "report":
        manifest = pipeline.report()
        return f"emitted {len(manifest['files'])} files ({manifest['row_count']} rows)"
    manifest = pipeline.run_all()
    return f"run complete: {manifest['row_count']} metric rows in {pipeline.paths.report}"


def run_command(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse prints usage itself
        return int(exc.code or 0)
    try:
        config, out_dir, workers = resolve_settings(args)
    except UsageError as exc:
        print(f"cmrbench: usage error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, OSError) as exc:
        print(f"cmrbench: config error: {exc}", file=sys.stderr)
        return 3
    pipeline = Pipeline(config, out_dir=out_dir, workers=workers)
    try:
        message = _dispatch(pipeline, args)
    except UsageError as exc:
        print(f"cmrbench: usage error: {exc}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"cmrbench: config error: {exc}", file=sys.stderr)
        return 3
    except StageError as exc:
        print(f"cmrbench: stage error: {exc}", file=sys.stderr)
        return 4
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"cmrbench: stage error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 4
    print(message)
    return 0


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()

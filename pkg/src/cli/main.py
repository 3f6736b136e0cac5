import argparse
import json
import logging
import sys
from typing import Any

from pydantic import ValidationError

from assets.manifest import parse_manifest
from cli.pipeline import COMMANDS, run_pipeline
from core.config import PipelineConfig, load_config, merge_overrides
from core.errors import SoarError, ValidationFailure
from core.logger import logger, set_level

EPILOG = """
Stages run in order and each reads its predecessor's checkpoint from --out:
  refine-pose -> init -> reconstruct -> sds-refine

Config precedence (lowest first): defaults, the manifest's "config"
object, --config FILE, command-line flags.

Exit codes:
  0  success
  1  unexpected failure
  2  invalid input (manifest, template, config, missing checkpoint)
  3  numerical abort (non-finite loss, diverging field, bad denoiser output)

Examples:
  soar refine-pose --manifest scene/manifest.json --out runs/a
  soar reconstruct --manifest scene/manifest.json --out runs/a --seed 3
  soar render --manifest scene/manifest.json --out runs/a --orbit 8 --rest-pose
  soar evaluate --manifest scene/manifest.json --out runs/a --checkpoint reconstruct
"""


def parse_args(argv: list[str] | None = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(
        prog="soar",
        description="Reconstruct an animatable surfel avatar from a monocular video",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=EPILOG,
    )
    parser.add_argument("command", choices=COMMANDS, help="Pipeline stage to run")
    parser.add_argument("-m", "--manifest", required=True, help="Scene manifest (JSON)")
    parser.add_argument("-c", "--config", help="Config file (JSON) layered over the manifest's config")
    parser.add_argument("--seed", type=int, help="Random seed (default: 0)")
    parser.add_argument("-o", "--out", help="Output directory for checkpoints, curves and renders")
    parser.add_argument(
        "--checkpoint",
        choices=["init", "reconstruct", "sds-refine"],
        help="Checkpoint used by render/evaluate (default: most advanced available)",
    )
    parser.add_argument("--orbit", type=int, metavar="N", help="Render N views on a circle around the body")
    parser.add_argument("--rest-pose", action="store_true", help="Render the canonical (unposed) avatar")
    parser.add_argument(
        "--channels",
        nargs="+",
        choices=["rgb", "mask", "depth", "normal", "back_normal", "occlusion"],
        help="Channels written by render",
    )
    parser.add_argument("--threads", type=int, help="Torch CPU threads (also SOAR_NUM_THREADS)")
    parser.add_argument("-v", "--verbose", action="store_true", help="Debug logging")
    return parser.parse_args(argv)


def flag_overrides(args: argparse.Namespace) -> dict[str, Any]:
    overrides: dict[str, Any] = {"manifest": args.manifest}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out_dir"] = args.out
    if args.threads is not None:
        overrides["threads"] = args.threads
    render: dict[str, Any] = {}
    if args.checkpoint is not None:
        render["checkpoint"] = args.checkpoint
    if args.orbit is not None:
        render["orbit_views"] = args.orbit
    if args.rest_pose:
        render["rest_pose"] = True
    if args.channels:
        render["channels"] = args.channels
    if render:
        overrides["render"] = render
    return overrides


def resolve_config(args: argparse.Namespace) -> PipelineConfig:
    manifest = parse_manifest(args.manifest)
    try:
        base = load_config(args.config, manifest.config)
        merged = merge_overrides(base.model_dump(), flag_overrides(args))
        return PipelineConfig.model_validate(merged)
    except FileNotFoundError as e:
        raise ValidationFailure(f"config file not found: {e.filename}") from e
    except json.JSONDecodeError as e:
        raise ValidationFailure(f"config file {args.config} is not valid JSON: {e}") from e
    except ValidationError as e:
        raise ValidationFailure(f"invalid configuration:\n{e}") from e


def main(argv: list[str] | None = None) -> int:
    args = parse_args(argv)
    if args.verbose:
        set_level(logging.DEBUG)
    try:
        config = resolve_config(args)
        result = run_pipeline(args.command, args.manifest, config)
        logger.info(f"{args.command} finished: {result}")
        return 0
    except SoarError as e:
        logger.error(str(e))
        return e.exit_code
    except Exception as e:
        logger.error(f"Fatal error during {args.command}: {e}", exc_info=True)
        return 1


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()

"""
rigidtrack command line.

Subcommands: synth, fit, eval, export, check-grads.
"""

import argparse
import logging
import sys
from dataclasses import fields
from typing import Dict, List, Optional

from core.config import FitConfig, resolve_config
from core.errors import RigidTrackError, ValidationError
from core.geometry import Intrinsics
from core.trackdata import SceneSpec
from resources.formats import get_config_format, get_run_layout
from services.runs import RunService
from utils.helpers import format_error_message, log_level_from_env, setup_logging

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

_CONFIG_PREFIX = "config_"


def _config_flags() -> argparse.ArgumentParser:
    """
    Parent parser with --config and one override flag per config key.

    Shared by the top-level parser and every subcommand; all defaults are
    suppressed so a flag given after the subcommand overrides one given before.
    """
    parent = argparse.ArgumentParser(add_help=False)
    group = parent.add_argument_group("configuration")
    group.add_argument("--config", default=argparse.SUPPRESS, help="key=value config file")
    for f in fields(FitConfig):
        flags = [f"--{f.name.replace('_', '-')}"]
        if "_" in f.name:
            flags.append(f"--{f.name}")
        kwargs = {"dest": _CONFIG_PREFIX + f.name, "default": argparse.SUPPRESS,
                  "metavar": f.name.upper(), "help": f"override {f.name} (default {f.default})"}
        if f.type is bool:
            kwargs.update(nargs="?", const="true")
        group.add_argument(*flags, **kwargs)
    return parent


def build_parser() -> argparse.ArgumentParser:
    config = _config_flags()
    parser = argparse.ArgumentParser(
        prog="rigidtrack",
        parents=[config],
        description="Lift 2D point tracks to per-track SE(3) motion with learned rigidity.",
        epilog=get_run_layout(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", parents=[config], help="write a synthetic scene")
    synth.add_argument("--out", required=True, help="output directory")
    synth.add_argument("--n-bodies", type=int, default=2)
    synth.add_argument("--tracks-per-body", type=int, default=64)
    synth.add_argument("--n-static-tracks", type=int, default=128)
    synth.add_argument("--frames", type=int, default=10)
    synth.add_argument("--motion-magnitude", type=float, default=0.1)
    synth.add_argument("--body-speed", type=float, default=2.0)
    synth.add_argument("--noise", type=float, default=0.0, help="pixel noise sigma")
    synth.add_argument("--width", type=int, default=320)
    synth.add_argument("--height", type=int, default=240)
    synth.add_argument("--fx", type=float, default=256.0)
    synth.add_argument("--fy", type=float, default=256.0)
    synth.add_argument("--cx", type=float, default=160.0)
    synth.add_argument("--cy", type=float, default=120.0)

    fit = sub.add_parser("fit", parents=[config], help="fit a tracks file",
                         epilog=get_config_format(),
                         formatter_class=argparse.RawDescriptionHelpFormatter)
    fit.add_argument("tracks", help="tracks file")
    fit.add_argument("--out", required=True, help="run directory")
    fit.add_argument("--static", action="store_true", help="fit with rigidity fixed at one")
    fit.add_argument("--depth-sidecar", help="ground-truth sidecar supplying depth targets")
    fit.add_argument("--no-export", action="store_true", help="skip the exported artifacts")

    evaluate = sub.add_parser("eval", parents=[config], help="score a run against ground truth")
    evaluate.add_argument("run_dir")
    evaluate.add_argument("sidecar", help="ground-truth sidecar (gt.json)")

    export = sub.add_parser("export", parents=[config], help="write a run's artifacts")
    export.add_argument("run_dir")
    export.add_argument("--grid", type=int, nargs=2, default=[3, 3], metavar=("ROWS", "COLS"))

    grads = sub.add_parser("check-grads", parents=[config],
                           help="compare analytic and finite-difference gradients")
    grads.add_argument("--tracks", help="tracks file (default: a small seeded scene)")
    return parser


def _overrides(args: argparse.Namespace) -> Dict[str, str]:
    return {key[len(_CONFIG_PREFIX):]: value for key, value in vars(args).items()
            if key.startswith(_CONFIG_PREFIX)}


def _resolve(args: argparse.Namespace) -> FitConfig:
    overrides = _overrides(args)
    if getattr(args, "static", False):
        overrides["static_mode"] = "true"
    return resolve_config(getattr(args, "config", None), overrides)


def cmd_synth(args: argparse.Namespace, service: RunService) -> int:
    config = _resolve(args)
    spec = SceneSpec(
        n_bodies=args.n_bodies,
        tracks_per_body=args.tracks_per_body,
        n_static_tracks=args.n_static_tracks,
        n_frames=args.frames,
        intrinsics=Intrinsics(args.fx, args.fy, args.cx, args.cy),
        image_size=(args.width, args.height),
        motion_magnitude=args.motion_magnitude,
        body_speed=args.body_speed,
        pixel_noise_sigma=args.noise,
        rng_seed=config.seed,
    )
    print(service.synth(spec, args.out).summary())
    return EXIT_OK


def cmd_fit(args: argparse.Namespace, service: RunService) -> int:
    config = _resolve(args)
    run = service.fit(args.tracks, args.out, config, depth_sidecar=args.depth_sidecar,
                      export=not args.no_export)
    print(run.summary())
    return EXIT_OK


def cmd_eval(args: argparse.Namespace, service: RunService) -> int:
    report = service.evaluate(args.run_dir, args.sidecar)
    print(report.to_text(), end="")
    return EXIT_OK


def cmd_export(args: argparse.Namespace, service: RunService) -> int:
    for path in service.export(args.run_dir, tuple(args.grid)):
        print(path)
    return EXIT_OK


def cmd_check_grads(args: argparse.Namespace, service: RunService) -> int:
    report = service.gradient_check_instance(_resolve(args), args.tracks)
    print(report.summary())
    for name, analytic, numeric in report.failures:
        print(f"  {name}: analytic={analytic:.6e} numeric={numeric:.6e}")
    return EXIT_OK if report.passed else EXIT_FAILURE


COMMANDS = {
    "synth": cmd_synth,
    "fit": cmd_fit,
    "eval": cmd_eval,
    "export": cmd_export,
    "check-grads": cmd_check_grads,
}


def main(argv: Optional[List[str]] = None) -> int:
    setup_logging(log_level_from_env())
    args = build_parser().parse_args(argv)
    service = RunService()
    try:
        return COMMANDS[args.command](args, service)
    except (ValidationError, FileNotFoundError) as e:
        logger.error(f"Invalid input for {args.command}: {e}")
        print(format_error_message(args.command, e), file=sys.stderr)
        return EXIT_USAGE
    except RigidTrackError as e:
        logger.error(f"Error running {args.command}: {e}")
        print(format_error_message(args.command, e), file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())

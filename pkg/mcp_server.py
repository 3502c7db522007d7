"""
rigidtrack MCP Server
Runs scene synthesis, fitting, evaluation and gradient checks through Model Context Protocol.
"""

import logging
import os
import sys

from fastmcp import FastMCP

# Add current directory to Python path for module imports
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from core.config import get_current_config, resolve_config
from core.geometry import Intrinsics
from core.trackdata import SceneSpec
from resources.formats import get_format_reference
from services.runs import RunService
from utils.helpers import format_error_message, log_level_from_env, setup_logging

# Initialize logging
setup_logging(log_level_from_env())
logger = logging.getLogger(__name__)

# Initialize MCP server
fastmcp_server = FastMCP("rigidtrack MCP Server")

# Initialize services
run_service = RunService()


@fastmcp_server.tool()
def synth_scene(
    out_dir: str,
    n_bodies: int = 2,
    tracks_per_body: int = 64,
    n_static_tracks: int = 128,
    n_frames: int = 10,
    motion_magnitude: float = 0.1,
    pixel_noise_sigma: float = 0.0,
    seed: int = 0
) -> str:
    """
    Generates a synthetic multi-body scene with ground truth.

    Writes tracks.rtrk, the gt.json ground-truth sidecar and spec.json into
    out_dir. The camera is 256 px focal length on a 320x240 image.

    Args:
        out_dir: Directory to write the scene into
        n_bodies: Number of independently moving rigid bodies
        tracks_per_body: Tracks sampled on each body (at least 4)
        n_static_tracks: Tracks on the static background (at least 8)
        n_frames: Number of frames (at least 2)
        motion_magnitude: Scale of the smooth camera and body motion
        pixel_noise_sigma: Gaussian pixel noise added to the tracks
        seed: Generator seed

    Returns:
        Paths of the written files, or an error message
    """
    try:
        spec = SceneSpec(n_bodies=n_bodies, tracks_per_body=tracks_per_body,
                         n_static_tracks=n_static_tracks, n_frames=n_frames,
                         intrinsics=Intrinsics(256.0, 256.0, 160.0, 120.0),
                         motion_magnitude=motion_magnitude,
                         pixel_noise_sigma=pixel_noise_sigma, rng_seed=seed)
        return run_service.synth(spec, out_dir).summary()
    except Exception as e:
        logger.error(f"Error synthesizing scene: {e}")
        return format_error_message("synth_scene", e)


@fastmcp_server.tool()
def fit_tracks(
    tracks_path: str,
    out_dir: str,
    config_path: str = None,
    iterations: int = None,
    static_mode: bool = None,
    depth_sidecar: str = None
) -> str:
    """
    Fits per-track SE(3) motion and rigidity to a tracks file.

    The run directory receives the resolved config, parameters, solved
    field, clusters, loss history, reports and exported artifacts (see the
    rigidtrack://format/run resource).

    Args:
        tracks_path: Tracks file (RTRK 1 or RTRKB1)
        out_dir: Run directory to write
        config_path: Optional key=value config file
        iterations: Override of the iteration count
        static_mode: Override to fix every rigidity weight at one
        depth_sidecar: Optional gt.json supplying depth targets

    Returns:
        Final loss, mean residual and cluster table, or an error message
    """
    try:
        overrides = {}
        if iterations is not None:
            overrides["iterations"] = iterations
        if static_mode is not None:
            overrides["static_mode"] = static_mode
        config = resolve_config(config_path, overrides)
        return run_service.fit(tracks_path, out_dir, config, depth_sidecar=depth_sidecar).summary()
    except Exception as e:
        logger.error(f"Error fitting {tracks_path}: {e}")
        return format_error_message("fit_tracks", e)


@fastmcp_server.tool()
def evaluate_run(run_dir: str, sidecar_path: str) -> str:
    """
    Scores a fitted run against a synthetic scene's ground truth.

    Args:
        run_dir: Run directory written by fit_tracks
        sidecar_path: gt.json of the scene the run was fitted on

    Returns:
        key=value metrics (also written to metrics.txt and metrics.csv)
    """
    try:
        return run_service.evaluate(run_dir, sidecar_path).to_text()
    except Exception as e:
        logger.error(f"Error evaluating {run_dir}: {e}")
        return format_error_message("evaluate_run", e)


@fastmcp_server.tool()
def check_run_gradients(tracks_path: str = None, seed: int = 0) -> str:
    """
    Compares analytic gradients of the scene loss with central finite differences.

    Args:
        tracks_path: Tracks file to check on; a small seeded scene when omitted
        seed: Seed of the parameter point (and of the scene when generated)

    Returns:
        PASS/FAIL summary with the worst coordinate
    """
    try:
        report = run_service.gradient_check_instance(resolve_config(overrides={"seed": seed}),
                                                     tracks_path)
        return report.summary()
    except Exception as e:
        logger.error(f"Error checking gradients: {e}")
        return format_error_message("check_run_gradients", e)


@fastmcp_server.tool()
def get_current_settings() -> str:
    """
    Retrieves the environment-level configuration.

    Returns:
        Log level, thread count and server address
    """
    try:
        config = get_current_config()
        return "\n".join(f"{key}: {value}" for key, value in config.items())
    except Exception as e:
        logger.error(f"Error getting configuration: {e}")
        return format_error_message("get_current_settings", e)


@fastmcp_server.resource("rigidtrack://format/{name}")
def format_reference(name: str) -> str:
    """File format reference: tracks, config, run or artifacts."""
    return get_format_reference(name)


if __name__ == "__main__":
    config = get_current_config()
    logger.info("Starting rigidtrack MCP Server...")
    logger.info(f"Server will be available at: http://{config['mcp_host']}:{config['mcp_port']}/mcp/")
    fastmcp_server.run(transport="streamable-http", host=config["mcp_host"],
                       port=config["mcp_port"])

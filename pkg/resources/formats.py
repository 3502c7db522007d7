"""Reference text for the files rigidtrack reads and writes."""

from core.errors import ValidationError


def get_tracks_format():
    """
    Get the tracks file reference.

    Returns:
        str: ASCII and binary tracks file layout
    """
    return """
# Tracks file

## ASCII (`RTRK 1`)
```
RTRK 1
N T width height fx fy cx cy
i t x y v        (N·T rows, i-major then t)
```
- `v` is 1 for visible, 0 for invisible; invisible rows may carry `nan nan`.
- Visible points must lie inside [0, width) × [0, height).
- N ≥ 4, T ≥ 2.

## Binary (`RTRKB1`)
- 6-byte magic `RTRKB1`.
- Header: little-endian int64 N, T, width, height, then float64 fx, fy, cx, cy.
- N·T·2 float32 positions (i-major), then N·T uint8 visibility flags.
"""


def get_config_format():
    """
    Get the fit configuration reference.

    Returns:
        str: Config file syntax and keys
    """
    return """
# Fit configuration

Plain `key=value` lines; `#` starts a comment. Every key is also a CLI flag
(`--lambda-depth 0.1` or `--lambda_depth 0.1`). Precedence: defaults < file < flags.

| key | default |
|-----|---------|
| lambda_depth | 0.0 |
| robust_delta | 4.0 (px; `inf` for a squared loss) |
| use_static_override | false |
| sampson_threshold | 2.0 (px²) |
| lr | 0.01 |
| iterations | 5000 |
| seed | 0 |
| embedding_dim | 16 |
| pretrain_iterations | 0 |
| static_mode | false |
| n_clusters | 4 |
| threads | 1 (or RIGIDTRACK_THREADS) |
| check_grads | false |
| grad_check_coordinates | 64 (0 checks every coordinate) |

The resolved configuration is written to `<run_dir>/config.txt`.
"""


def get_run_layout():
    """
    Get the run directory reference.

    Returns:
        str: Files written by fit, eval and export
    """
    return """
# Run directory

Written by `fit`:
- `config.txt`: resolved configuration
- `tracks.rtrk`: the fitted tracks
- `theta.npz`: log_depths, embeddings, confidence_logits
- `field.npz`: rotations, translations, valid, residuals
- `clusters.json`: assignment, centroid transforms, inlier losses
- `loss.csv`: `iteration,loss`
- `report.txt`: final loss, mean residual, skipped pairs
- `camera_tum.txt`: camera-to-world poses of the camera cluster (TUM)

Written by `export` (and by `fit` unless `--no-export`):
- `pointcloud.ply`, `rigidity_grid/r<row>_c<col>.pgm`, `feature_pca.ppm`, `se3_components.csv`

Written by `eval`:
- `metrics.txt` (key=value) and `metrics.csv` (header and one row, same keys)
"""


def get_artifact_formats():
    """
    Get the exported artifact reference.

    Returns:
        str: TUM, PLY, PGM/PPM and CSV layouts
    """
    return """
# Artifacts

## TUM trajectory
`timestamp tx ty tz qx qy qz qw`, one pose per line; Hamilton quaternion,
scalar last, qw ≥ 0.

## PLY point cloud
ASCII PLY, one `vertex` element with double x, y, z, uchar red, green, blue and
int frame. Points are expressed in the first camera's coordinates.

## Rigidity maps
Binary 8-bit PGM (`P5`, width, height, 255). Each track paints a 3×3 patch of
round(255·w) at its pixel; the background is 0.

## Feature PCA
Binary PPM (`P6`); each track's top-3 embedding PCA coordinates, min-max
scaled to 0..255, painted as 3×3 patches.

## SE(3) components
CSV `track,pair,tx,ty,tz,rx,ry,rz` with XYZ Euler angles in radians.
"""


FORMATS = {
    "tracks": get_tracks_format,
    "config": get_config_format,
    "run": get_run_layout,
    "artifacts": get_artifact_formats,
}


def get_format_reference(name: str) -> str:
    """
    Look up one format reference by name.

    Raises:
        ValidationError: Unknown name
    """
    try:
        return FORMATS[name]()
    except KeyError as e:
        raise ValidationError(
            f"unknown format {name!r}; available: {', '.join(sorted(FORMATS))}") from e

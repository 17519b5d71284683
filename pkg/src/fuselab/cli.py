"""``fuselab`` command group.

Exit codes for every subcommand: 0 on success, 1 on usage or validation
errors (including a missing ``--seed`` on randomized commands), 2 on I/O
errors. Error messages go to stderr prefixed with ``error:``.
"""
import json
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import click
import pandas as pd
import yaml

from .calib import load_rig, perturb_extrinsics, project_camera, sample_disturbance, save_rig
from .convert import convert_kitti_scan
from .errors import InvalidInputError
from .evaluation import (
    DISTURBANCE_MODES,
    DEFAULT_DISTURBANCE_MODE,
    ConfusionMatrix,
    accumulate,
    ground_truth_predictor,
    load_frames,
    miou,
    save_frame,
    weak_calib_benchmark,
)
from .fusion import image_augmented_features, load_feature_map
from .overlay import DEFAULT_DOT_RADIUS, render_overlay, write_ppm
from .pointcloud import load_cloud
from .toytrain import (
    CLASS_NAMES,
    DEFAULT_CAMERAS,
    DEFAULT_EPOCHS,
    DEFAULT_KD_WARMUP_FRACTION,
    DEFAULT_LEARNING_RATE,
    DEFAULT_SEGMENTATION_PASS,
    DEFAULT_TRAIN_LEVEL,
    SEGMENTATION_PASSES,
    STRATEGIES,
    TrainConfig,
    gen_scenes,
    load_model,
    save_model,
    train,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_IO = 2
DEFAULT_TRAIN_SCENES = 4

FilePath = click.Path(dir_okay=False)
DirPath = click.Path(file_okay=False)
LevelOption = click.IntRange(0, 3)


def _fail(message: str, code: int):
    logger.error(message)
    click.echo(f"error: {message}", err=True)
    raise click.exceptions.Exit(code)


class FuselabGroup(click.Group):
    """Maps library exceptions raised by subcommands onto the documented exit codes."""

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except click.UsageError as e:
            if e.ctx is not None:
                click.echo(e.ctx.get_usage(), err=True)
            _fail(e.format_message(), EXIT_VALIDATION)
        except (click.exceptions.Exit, click.Abort):
            raise
        except click.ClickException as e:
            _fail(e.format_message(), EXIT_VALIDATION)
        except OSError as e:
            _fail(str(e), EXIT_IO)
        except (ValueError, RuntimeError) as e:
            _fail(str(e), EXIT_VALIDATION)


def _require_seed(seed: Optional[int], level: int):
    if level > 0 and seed is None:
        raise click.UsageError("--seed is required when --level > 0", ctx=click.get_current_context())


def _parse_levels(ctx, param, value: str) -> List[int]:
    try:
        levels = [int(part) for part in value.split(',') if part.strip()]
    except ValueError:
        raise click.BadParameter(f"expected a comma-separated list of levels, got {value!r}")
    if not levels or any(level not in (0, 1, 2, 3) for level in levels):
        raise click.BadParameter(f"levels must be drawn from 0,1,2,3, got {value!r}")
    return levels


def _write_text(path: str, text: str):
    with open(path, 'w', encoding='utf-8') as handle:
        handle.write(text)
        handle.write('\n')


@click.group(cls=FuselabGroup)
def main():
    """LiDAR-camera fusion geometry, weak-calibration benchmark and toy training."""


@main.command()
@click.option('--rig', 'rig_path', required=True, type=FilePath, help='Rig YAML file.')
@click.option('--points', 'points_path', required=True, type=FilePath, help='FLPC point file.')
@click.option('--camera', type=int, default=None, help='Camera index (default: every camera).')
@click.option('--level', type=LevelOption, default=0, show_default=True, help='Weak calibration level.')
@click.option('--seed', type=int, default=None, help='Disturbance seed (required when --level > 0).')
@click.option('--frame-id', type=click.IntRange(min=0), default=0, show_default=True, help='Frame id for the disturbance draw.')
@click.option('--out', type=FilePath, default=None, help='Also write the table as CSV.')
def project(rig_path, points_path, camera, level, seed, frame_id, out):
    """Print one 'camera index u v depth valid' line per point and camera.

    With --camera the camera column is left out.
    """
    _require_seed(seed, level)
    cloud, _ = load_cloud(points_path)
    rig = load_rig(rig_path).perturbed(level, seed or 0, frame_id)
    cameras = range(rig.m) if camera is None else [camera]
    tables = []
    for camera_id in cameras:
        if not 0 <= camera_id < rig.m:
            raise InvalidInputError(f"camera {camera_id} not in a rig of {rig.m} cameras")
        table = project_camera(cloud, rig, camera_id).to_dataframe()
        table.insert(0, 'camera', camera_id)
        tables.append(table)
    table = pd.concat(tables, ignore_index=True)
    if camera is not None:
        table = table.drop(columns='camera')
    for *head, u, v, depth, valid in table.itertuples(index=False, name=None):
        ids = ' '.join(str(value) for value in head)
        click.echo(f"{ids} {u:.6f} {v:.6f} {depth:.6f} {int(valid)}")
    if out:
        table.to_csv(out, index=False)


@main.command()
@click.option('--rig', 'rig_path', required=True, type=FilePath, help='Rig YAML file.')
@click.option('--level', type=LevelOption, required=True, help='Weak calibration level.')
@click.option('--seed', type=int, required=True, help='Disturbance seed.')
@click.option('--frame-id', type=click.IntRange(min=0), default=0, show_default=True, help='Frame id for the disturbance draw.')
@click.option('--out', type=FilePath, required=True, help='Perturbed rig YAML to write.')
def perturb(rig_path, level, seed, frame_id, out):
    """Write a weakly calibrated copy of a rig and print the sampled angles."""
    rig = load_rig(rig_path)
    extrinsics = []
    for camera_id, camera in enumerate(rig.cameras):
        spec = sample_disturbance(level, seed, frame_id, camera_id)
        extrinsics.append(perturb_extrinsics(camera.extrinsics, spec))
        click.echo(f"{camera_id} {spec.rx:.9f} {spec.ry:.9f} {spec.rz:.9f}")
    save_rig(rig.with_extrinsics(extrinsics), out)


@main.command()
@click.option('--rig', 'rig_path', required=True, type=FilePath, help='Rig YAML file.')
@click.option('--points', 'points_path', required=True, type=FilePath, help='FLPC point file.')
@click.option('--map', 'map_paths', required=True, multiple=True, type=FilePath, help='FLFM feature map, once per camera in rig order.')
@click.option('--level', type=LevelOption, default=0, show_default=True, help='Weak calibration level.')
@click.option('--seed', type=int, default=None, help='Disturbance seed (required when --level > 0).')
@click.option('--frame-id', type=click.IntRange(min=0), default=0, show_default=True, help='Frame id for the disturbance draw.')
@click.option('--out', type=FilePath, required=True, help='CSV of image-augmented point features.')
def sample(rig_path, points_path, map_paths, level, seed, frame_id, out):
    """Project, bilinearly sample every camera and write x,y,z,intensity plus camera features."""
    _require_seed(seed, level)
    cloud, _ = load_cloud(points_path)
    rig = load_rig(rig_path).perturbed(level, seed or 0, frame_id)
    maps = [load_feature_map(path) for path in map_paths]
    fused = image_augmented_features(cloud, rig, maps, cloud.features())
    columns = ['x', 'y', 'z', 'intensity'] + [
        f'cam{camera_id}_c{channel}' for camera_id, m in enumerate(maps) for channel in range(m.channels)
    ]
    pd.DataFrame(fused.data, columns=columns).to_csv(out, index=False)
    click.echo(f"{fused.n} points x {fused.dims} features written to {out}")


@main.command(name='eval')
@click.option('--gt', 'gt_path', required=True, type=FilePath, help='FLPC file carrying ground-truth labels.')
@click.option('--pred', 'pred_path', required=True, type=FilePath, help='FLPC file carrying predicted labels.')
@click.option('--n-cls', type=click.IntRange(min=1), required=True, help='Number of classes.')
@click.option('--out', type=FilePath, default=None, help='Write the JSON report here instead of stdout.')
def eval_command(gt_path, pred_path, n_cls, out):
    """Per-class IoU and mIoU of one labeled prediction."""
    _, gt = load_cloud(gt_path, n_cls)
    _, pred = load_cloud(pred_path, n_cls)
    if gt is None or pred is None:
        raise InvalidInputError("both --gt and --pred files must carry labels")
    report = miou(accumulate(ConfusionMatrix(n_cls), gt, pred))
    text = json.dumps(report.to_dict(), indent=2, sort_keys=True)
    if out:
        _write_text(out, text)
    else:
        click.echo(text)


@main.command()
@click.option('--frames', 'frames_dir', required=True, type=DirPath, help='Directory of frame_<id> folders.')
@click.option('--rig', 'rig_path', type=FilePath, default=None, help='Rig YAML overriding the per-frame rig files.')
@click.option('--levels', default='0,1,2,3', show_default=True, callback=_parse_levels, help='Comma-separated levels.')
@click.option('--seed', type=int, required=True, help='Disturbance seed.')
@click.option('--mode', type=click.Choice(DISTURBANCE_MODES), default=DEFAULT_DISTURBANCE_MODE, show_default=True,
              help='Disturbance per frame and camera, or one shared by every frame.')
@click.option('--model', 'model_path', type=FilePath, default=None, help='FLMD toy model used as the predictor.')
@click.option('--oracle', is_flag=True, help='Use the ground-truth labels as the predictor.')
@click.option('--threads', type=click.IntRange(min=0), default=None, help='Worker threads (default: FUSELAB_THREADS).')
@click.option('--out', type=FilePath, default=None, help='Write the JSON report here instead of stdout.')
@click.option('--csv', 'csv_path', type=FilePath, default=None, help='Also write the per-level table as CSV.')
def bench(frames_dir, rig_path, levels, seed, mode, model_path, oracle, threads, out, csv_path):
    """Weak-calibration benchmark over the given levels."""
    if bool(model_path) == bool(oracle):
        raise click.UsageError("pass exactly one of --model or --oracle", ctx=click.get_current_context())
    rig = load_rig(rig_path) if rig_path else None
    frames = load_frames(frames_dir, rig)
    if oracle:
        predict = ground_truth_predictor(frames)
        class_names = None
    else:
        predict = load_model(model_path).predict
        class_names = CLASS_NAMES if frames[0].labels.n_cls == len(CLASS_NAMES) else None
    run = weak_calib_benchmark(predict, frames, levels, seed, mode, class_names, threads)
    if csv_path:
        run.export_to_csv(csv_path)
    if out:
        _write_text(out, run.to_json())
        for level in run.levels:
            click.echo(f"level {level}: mIoU {run.reports[level].miou:.6f}")
    else:
        click.echo(run.to_json())


@main.command()
@click.option('--seed', type=int, required=True, help='Scene seed.')
@click.option('--scenes', type=click.IntRange(min=1), default=1, show_default=True, help='Number of scenes.')
@click.option('--cameras', type=click.IntRange(1, 2), default=DEFAULT_CAMERAS, show_default=True, help='Cameras per scene.')
@click.option('--out-dir', required=True, type=DirPath, help='Directory receiving frame_<id> folders.')
def synth(seed, scenes, cameras, out_dir):
    """Generate synthetic scenes and write them as benchmark frames."""
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    for frame_id, scene in enumerate(gen_scenes(seed, scenes, cameras)):
        directory = save_frame(scene.to_frame(frame_id), out_dir)
        click.echo(f"{directory} {scene.cloud.n} points")


@main.command(name='train-toy')
@click.option('--strategy', type=click.Choice(STRATEGIES), default='baseline', show_default=True, help='Training regime.')
@click.option('--scenes', type=click.IntRange(min=1), default=DEFAULT_TRAIN_SCENES, show_default=True, help='Number of training scenes.')
@click.option('--cameras', type=click.IntRange(1, 2), default=DEFAULT_CAMERAS, show_default=True, help='Cameras per scene.')
@click.option('--seed', type=int, required=True, help='Scene and training-noise seed.')
@click.option('--epochs', type=click.IntRange(min=1), default=DEFAULT_EPOCHS, show_default=True, help='Training epochs.')
@click.option('--lr', type=float, default=DEFAULT_LEARNING_RATE, show_default=True, help='Learning rate.')
@click.option('--train-level', type=LevelOption, default=DEFAULT_TRAIN_LEVEL, show_default=True, help='Perturbation level for da/kd.')
@click.option('--kd-seg-pass', type=click.Choice(SEGMENTATION_PASSES), default=DEFAULT_SEGMENTATION_PASS,
              show_default=True,
              help='Pass that carries the segmentation term under kd (teacher is the opt-in variant).')
@click.option('--kd-warmup', type=click.FloatRange(0.0, 1.0, max_open=True), default=DEFAULT_KD_WARMUP_FRACTION,
              show_default=True, help='Share of kd epochs trained on well-calibrated features first.')
@click.option('--lidar-only', is_flag=True, help='Train on LiDAR point features only.')
@click.option('--out', type=FilePath, required=True, help='FLMD model file to write.')
def train_toy(strategy, scenes, cameras, seed, epochs, lr, train_level, kd_seg_pass, kd_warmup, lidar_only, out):
    """Train the toy per-point classifier on synthetic scenes."""
    cfg = TrainConfig(strategy=strategy, train_level=train_level, epochs=epochs, learning_rate=lr, seed=seed,
                      kd_segmentation_pass=kd_seg_pass, kd_warmup_fraction=kd_warmup, lidar_only=lidar_only)
    training_scenes = gen_scenes(seed, scenes, cameras)
    model = train(training_scenes, cfg)
    save_model(model, out)
    frames = [scene.to_frame(index) for index, scene in enumerate(training_scenes)]
    report = weak_calib_benchmark(model.predict, frames, [0], seed, class_names=CLASS_NAMES).reports[0]
    click.echo(f"{strategy}{' (lidar-only)' if lidar_only else ''}: training mIoU {report.miou:.6f}, model written to {out}")


@main.command()
@click.option('--rig', 'rig_path', required=True, type=FilePath, help='Rig YAML file.')
@click.option('--points', 'points_path', required=True, type=FilePath, help='FLPC point file (labels color the dots).')
@click.option('--camera', type=click.IntRange(min=0), default=0, show_default=True, help='Camera index.')
@click.option('--level', type=LevelOption, default=0, show_default=True, help='Weak calibration level.')
@click.option('--seed', type=int, default=None, help='Disturbance seed (required when --level > 0).')
@click.option('--frame-id', type=click.IntRange(min=0), default=0, show_default=True, help='Frame id for the disturbance draw.')
@click.option('--map', 'map_path', type=FilePath, default=None, help='FLFM map whose first channel is the background.')
@click.option('--dot-radius', type=click.IntRange(min=0), default=DEFAULT_DOT_RADIUS, show_default=True, help='Dot half-size in pixels.')
@click.option('--out', type=FilePath, required=True, help='PPM image to write.')
def overlay(rig_path, points_path, camera, level, seed, frame_id, map_path, dot_radius, out):
    """Render projected points over a checkerboard or feature map."""
    _require_seed(seed, level)
    cloud, labels = load_cloud(points_path)
    feature_map = load_feature_map(map_path) if map_path else None
    image = render_overlay(cloud, load_rig(rig_path), camera, labels, level, seed or 0, frame_id,
                           feature_map, dot_radius)
    write_ppm(image.pixels, out)
    click.echo(f"{len(image.point_index)} points drawn to {out}")


def _load_remap(path: str) -> Dict[int, int]:
    with open(path, 'r', encoding='utf-8') as handle:
        document = yaml.safe_load(handle)
    if not isinstance(document, dict):
        raise InvalidInputError(f"{path}: remap file must map semantic ids to training ids")
    try:
        return {int(k): int(v) for k, v in document.items()}
    except (TypeError, ValueError):
        raise InvalidInputError(f"{path}: remap keys and values must be integers")


@main.command()
@click.option('--scan', 'scan_path', required=True, type=FilePath, help='Raw float32 x,y,z,intensity .bin scan.')
@click.option('--labels', 'label_path', type=FilePath, default=None, help='Matching uint32 .label file.')
@click.option('--remap', 'remap_path', type=FilePath, default=None, help='YAML mapping of semantic id to training id.')
@click.option('--n-cls', type=click.IntRange(min=1), default=None, help='Number of classes (default: max label + 1).')
@click.option('--out', type=FilePath, required=True, help='FLPC point file to write.')
def convert(scan_path, label_path, remap_path, n_cls, out):
    """Convert a KITTI-style raw scan into an FLPC point file."""
    remap = _load_remap(remap_path) if remap_path else None
    path = convert_kitti_scan(scan_path, out, label_path, remap, n_cls)
    click.echo(f"{scan_path} converted to {path}")


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Run the command group without letting click call ``sys.exit``; returns the exit code."""
    try:
        result = main.main(args=list(argv) if argv is not None else None, prog_name='fuselab', standalone_mode=False)
    except click.exceptions.Exit as e:
        return e.exit_code
    except click.UsageError as e:
        if e.ctx is not None:
            click.echo(e.ctx.get_usage(), err=True)
        click.echo(f"error: {e.format_message()}", err=True)
        return EXIT_VALIDATION
    except click.ClickException as e:
        click.echo(f"error: {e.format_message()}", err=True)
        return EXIT_VALIDATION
    except click.Abort:
        click.echo("error: aborted", err=True)
        return EXIT_VALIDATION
    # Exits raised inside a command come back as the return value.
    return result if isinstance(result, int) else EXIT_OK

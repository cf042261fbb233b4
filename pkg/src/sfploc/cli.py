"""Command-line interface.

Configuration precedence is defaults < config file < explicit flags.
The config file is YAML with one section per subcommand, keys matching
the long option names with dashes replaced by underscores:

    extract:
      tau: 0.6
    localize:
      top_k: 5

Exit codes: 0 success, 2 usage error, 3 I/O or format error,
4 pipeline failure.
"""

from __future__ import annotations

import functools
import json
import math
import sys
from pathlib import Path

import click
import numpy as np
import yaml

from . import autoencoder as ae
from . import datasets, evaluation, extraction, localization, mapping, synthetic
from .errors import DivergenceError, FormatError, GeometryError
from .geometry import Pose
from .pyramid import LevelSpec

EXIT_USAGE = 2
EXIT_IO = 3
EXIT_PIPELINE = 4


def _fail(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except click.ClickException:
            raise
        except FormatError as exc:
            _fail(EXIT_IO, str(exc))
        except FileNotFoundError as exc:
            _fail(EXIT_IO, f"missing file: {exc.filename or exc}")
        except OSError as exc:
            _fail(EXIT_IO, str(exc))
        except (GeometryError, DivergenceError) as exc:
            _fail(EXIT_PIPELINE, str(exc))
        except (ValueError, RuntimeError, np.linalg.LinAlgError) as exc:
            _fail(EXIT_PIPELINE, str(exc))

    return wrapper


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        payload = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as exc:
        raise FormatError(f"{path}: bad YAML ({exc})") from exc
    if not isinstance(payload, dict):
        raise FormatError(f"{path}: config must be a mapping of sections")
    return payload


def _settings(config: dict, section: str, flags: dict, defaults: dict) -> dict:
    """Merge defaults, a config-file section, and explicitly set flags."""
    section_cfg = config.get(section, {}) or {}
    if not isinstance(section_cfg, dict):
        raise FormatError(f"config section {section!r} must be a mapping")
    unknown = set(section_cfg) - set(defaults)
    if unknown:
        raise click.UsageError(
            f"unknown config keys in section {section!r}: {', '.join(sorted(unknown))}"
        )
    merged = dict(defaults)
    merged.update(section_cfg)
    merged.update({k: v for k, v in flags.items() if v is not None})
    return merged


def _parse_levels(text: str) -> tuple[int, ...]:
    try:
        levels = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise click.UsageError(f"bad level list {text!r}; expected e.g. '1,2,3'")
    if not levels or len(set(levels)) != len(levels):
        raise click.UsageError(f"levels must be distinct and nonempty, got {text!r}")
    return levels


def _parse_dims(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise click.UsageError(f"bad dimension list {text!r}; expected e.g. '32,64,128'")


def _parse_ids(text: str | None) -> list[int] | None:
    if text is None:
        return None
    try:
        return [int(v) for v in text.split(",")]
    except ValueError:
        raise click.UsageError(f"bad id list {text!r}; expected e.g. '0,1,2'")


def _parse_radii(text: str) -> tuple[float, ...]:
    out = []
    for part in text.split(","):
        part = part.strip().lower()
        out.append(math.inf if part in ("inf", "infinity") else float(part))
    return tuple(out)


def _load_images(images_dir: str) -> list[tuple[str, np.ndarray]]:
    """Grayscale float images in [0, 1], shape (H, W, 1), sorted by name."""
    from PIL import Image

    paths = sorted(
        p
        for p in Path(images_dir).iterdir()
        if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".pgm", ".ppm", ".bmp")
    )
    if not paths:
        raise FormatError(f"{images_dir}: no image files found")
    out = []
    for p in paths:
        img = np.asarray(Image.open(p).convert("L"), dtype=np.float64) / 255.0
        out.append((p.stem, img[:, :, None]))
    return out


def _crop_to_multiple(img: np.ndarray, multiple: int) -> np.ndarray:
    h = (img.shape[0] // multiple) * multiple
    w = (img.shape[1] // multiple) * multiple
    if h == 0 or w == 0:
        raise ValueError(f"image {img.shape[:2]} smaller than one {multiple}px tile")
    return img[:h, :w]


@click.group(name="sfploc")
def main():
    """Sparse-feature-pyramid localization toolkit."""


# -- training --------------------------------------------------------------


@main.command("train-toy")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--images", "images_dir", type=click.Path(exists=True, file_okay=False), default=None,
              help="Directory of training images (default: synthetic blobs).")
@click.option("--out", "out_path", required=True, type=click.Path(), help="Checkpoint output path.")
@click.option("--trace", "trace_path", type=click.Path(), default=None, help="Loss trace JSONL output.")
@click.option("--steps", type=int, default=None)
@click.option("--lr", type=float, default=None)
@click.option("--lambda", "lam", type=float, default=None, help="Compression loss weight.")
@click.option("--dims", type=str, default=None, help="Per-level feature dims, e.g. '32,64,128'.")
@click.option("--seed", type=int, default=None)
@handle_errors
def train_toy(config_path, images_dir, out_path, trace_path, steps, lr, lam, dims, seed):
    """Train the toy sparsifying autoencoder and save a checkpoint."""
    cfg = _settings(
        _load_config(config_path),
        "train-toy",
        {"steps": steps, "lr": lr, "lambda": lam, "dims": dims, "seed": seed},
        {"steps": 300, "lr": 3e-4, "lambda": 1e-3, "dims": "32,64,128", "seed": 0},
    )
    dims_t = _parse_dims(str(cfg["dims"]))
    net_cfg = ae.NetConfig(level_dims=dims_t, image_channels=1, lam=float(cfg["lambda"]))
    if images_dir is None:
        images = synthetic.synth_images(int(cfg["seed"]), count=4, size=32)
    else:
        div = 2 ** len(dims_t)
        loaded = [_crop_to_multiple(img, div) for _, img in _load_images(images_dir)]
        shapes = {im.shape for im in loaded}
        if len(shapes) != 1:
            raise click.UsageError(f"training images must share one size, got {sorted(shapes)}")
        images = np.stack(loaded)
    net = ae.build_network(net_cfg, seed=int(cfg["seed"]))
    batch = ae.TrainBatch(images=images)
    net, trace = ae.train(
        batch, net, steps=int(cfg["steps"]), learning_rate=float(cfg["lr"]),
        rng_seed=int(cfg["seed"]),
    )
    ae.save_checkpoint(net, out_path)
    if trace_path:
        with open(trace_path, "w", encoding="utf-8") as fh:
            for i, rep in enumerate(trace):
                fh.write(json.dumps({
                    "step": i, "total": rep.total, "reconstruction": rep.reconstruction,
                    "compression": rep.compression,
                    "mean_keypoints_per_level": rep.mean_keypoints_per_level,
                }) + "\n")
    click.echo(
        f"trained {int(cfg['steps'])} steps: loss {trace[0].total:.4f} -> {trace[-1].total:.4f}; "
        f"checkpoint written to {out_path}"
    )


# -- extraction ------------------------------------------------------------


@main.command("extract")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--images", "images_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out-dir", required=True, type=click.Path())
@click.option("--tau", type=float, default=None)
@click.option("--levels", type=str, default=None)
@click.option("--nms-radius", type=int, default=None)
@click.option("--max-keypoints", type=int, default=None)
@click.option("--mode", type=click.Choice(["full", "short"]), default=None)
@handle_errors
def extract_cmd(config_path, checkpoint, images_dir, out_dir, tau, levels, nms_radius, max_keypoints, mode):
    """Run the encoder on images and write keypoint + global-descriptor files."""
    cfg = _settings(
        _load_config(config_path),
        "extract",
        {"tau": tau, "levels": levels, "nms_radius": nms_radius,
         "max_keypoints": max_keypoints, "mode": mode},
        {"tau": 0.5, "levels": "1,2,3", "nms_radius": 2, "max_keypoints": None, "mode": "full"},
    )
    net = ae.load_checkpoint(checkpoint)
    levels_t = _parse_levels(str(cfg["levels"]))
    ex_cfg = extraction.ExtractConfig(
        levels=levels_t,
        tau=float(cfg["tau"]),
        nms_radius=int(cfg["nms_radius"]),
        max_keypoints=cfg["max_keypoints"],
        mode=str(cfg["mode"]),
    )
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    div = 2 ** net.config.n_levels
    count = 0
    for stem, img in _load_images(images_dir):
        img = _crop_to_multiple(img, div)
        pyramid = ae.encode(img, net)
        kps = extraction.extract(pyramid, ex_cfg)
        extraction.write_keypoints(out / f"{stem}.sfpk", kps)
        np.save(out / f"{stem}.global.npy", localization.global_descriptor(pyramid))
        count += 1
        click.echo(f"{stem}: {sum(len(v) for v in kps.values())} keypoints")
    click.echo(f"extracted {count} images into {out}")


# -- map building ----------------------------------------------------------


@main.command("build-map")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--frames", "frames_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--frame-ids", type=str, default=None, help="Comma-separated subset, e.g. '0,1,2'.")
@click.option("--dims", type=str, default=None)
@click.option("--merge-radius", type=float, default=None)
@handle_errors
def build_map_cmd(config_path, frames_dir, out_path, frame_ids, dims, merge_radius):
    """Lift posed keypoint frames into a landmark map file."""
    cfg = _settings(
        _load_config(config_path),
        "build-map",
        {"frame_ids": frame_ids, "dims": dims, "merge_radius": merge_radius},
        {"frame_ids": None, "dims": "32,64,128", "merge_radius": 0.01},
    )
    ids = _parse_ids(cfg["frame_ids"])
    intr, frames = datasets.load_posed_directory(frames_dir, ids)
    dims_t = _parse_dims(str(cfg["dims"]))
    specs = [LevelSpec(i + 1, 2 ** (i + 1), d) for i, d in enumerate(dims_t)]
    obs = datasets.frames_to_observations(frames, intr)
    built = mapping.build_map(
        obs, specs, mapping.MapConfig(merge_radius=float(cfg["merge_radius"]))
    )
    mapping.save_map(built, out_path)
    click.echo(
        f"built map: {len(built.landmarks)} landmarks from {len(frames)} frames -> {out_path}"
    )


@main.command("map-stats")
@click.option("--map", "map_path", required=True, type=click.Path(exists=True))
@handle_errors
def map_stats_cmd(map_path):
    """Print exact byte accounting for a map file."""
    m = mapping.load_map(map_path)
    stats = mapping.map_stats(m)
    file_size = Path(map_path).stat().st_size
    click.echo(f"mode:             {m.mode}")
    click.echo(f"landmarks:        {len(m.landmarks)}")
    click.echo(f"frames:           {len(m.frames)}")
    click.echo(f"header bytes:     {stats.header_bytes}")
    click.echo(f"position bytes:   {stats.position_bytes}")
    click.echo(f"record overhead:  {stats.record_overhead_bytes}")
    for lvl in sorted(stats.descriptor_bytes_per_level):
        click.echo(f"descriptor bytes (level {lvl}): {stats.descriptor_bytes_per_level[lvl]}")
    click.echo(f"descriptor bytes: {stats.descriptor_bytes}")
    click.echo(f"frame index:      {stats.frame_index_bytes}")
    click.echo(f"total bytes:      {stats.total_bytes}")
    click.echo(f"file bytes:       {file_size}")
    if file_size != stats.total_bytes:
        raise FormatError(
            f"{map_path}: file size {file_size} != accounted total {stats.total_bytes}"
        )


@main.command("shorten")
@click.option("--map", "map_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@handle_errors
def shorten_cmd(map_path, out_path):
    """Rewrite a full-descriptor map with halved descriptors."""
    m = mapping.load_map(map_path)
    short = mapping.shorten_descriptors(m)
    mapping.save_map(short, out_path)
    before = mapping.map_stats(m).descriptor_bytes
    after = mapping.map_stats(short).descriptor_bytes
    click.echo(f"descriptor payload: {before} -> {after} bytes (ratio {before / after:.3f})")


# -- localization ----------------------------------------------------------


@main.command("localize")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--map", "map_path", required=True, type=click.Path(exists=True))
@click.option("--queries", "queries_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--frame-ids", type=str, default=None)
@click.option("--top-k", type=int, default=None)
@click.option("--floor", type=float, default=None, help="Similarity floor for matches.")
@click.option("--radii", type=str, default=None, help="Gating radii deep->shallow, e.g. 'inf,8,4'.")
@click.option("--ransac-iters", type=int, default=None)
@click.option("--threshold-px", type=float, default=None)
@click.option("--min-inliers", type=int, default=None)
@click.option("--mode", type=click.Choice(["full", "short"]), default=None)
@click.option("--seed", type=int, default=None)
@handle_errors
def localize_cmd(config_path, map_path, queries_dir, out_path, frame_ids, top_k, floor,
                 radii, ransac_iters, threshold_px, min_inliers, mode, seed):
    """Localize query frames against a map; write a JSONL report."""
    cfg = _settings(
        _load_config(config_path),
        "localize",
        {"frame_ids": frame_ids, "top_k": top_k, "floor": floor, "radii": radii,
         "ransac_iters": ransac_iters, "threshold_px": threshold_px,
         "min_inliers": min_inliers, "mode": mode, "seed": seed},
        {"frame_ids": None, "top_k": 3, "floor": 0.5, "radii": "inf,8,4",
         "ransac_iters": 1000, "threshold_px": 3.0, "min_inliers": 6,
         "mode": "full", "seed": 0},
    )
    m = mapping.load_map(map_path)
    intr, frames = datasets.load_posed_directory(queries_dir, _parse_ids(cfg["frame_ids"]))
    from .pnp import RansacConfig

    loc_cfg = localization.LocalizerConfig(
        top_k=int(cfg["top_k"]),
        similarity_floor=float(cfg["floor"]),
        gating_radius_px=_parse_radii(str(cfg["radii"])),
        ransac=RansacConfig(
            max_iterations=int(cfg["ransac_iters"]),
            inlier_threshold_px=float(cfg["threshold_px"]),
            seed=int(cfg["seed"]),
        ),
        min_inliers=int(cfg["min_inliers"]),
        descriptor_mode=str(cfg["mode"]),
    )
    results = []
    for f in frames:
        if f.global_descriptor is None:
            raise FormatError(
                f"frame {f.frame_id} in {queries_dir} has no .global.npy descriptor"
            )
        kps = f.keypoints
        if loc_cfg.descriptor_mode == "short":
            kps = {
                lvl: [
                    extraction.Keypoint(
                        k.level, k.pixel, k.score, extraction.shorten_descriptor(k.descriptor)
                    )
                    for k in lst
                ]
                for lvl, lst in kps.items()
            }
        res = localization.localize(
            f.frame_id, kps, f.global_descriptor.astype(np.float64), m, intr, loc_cfg
        )
        results.append(res)
        status = "ok" if res.success else "FAILED"
        click.echo(f"query {f.frame_id}: {status} ({len(res.trace)} levels)")
    localization.write_report(results, out_path)
    n_ok = sum(r.success for r in results)
    click.echo(f"localized {n_ok}/{len(results)} queries -> {out_path}")
    if n_ok == 0:
        raise RuntimeError("no query could be localized")


# -- evaluation ------------------------------------------------------------


@main.command("evaluate")
@click.option("--report", "report_path", required=True, type=click.Path(exists=True))
@click.option("--gt", "gt_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--map", "map_path", type=click.Path(exists=True), default=None,
              help="Optional map file, reported as MB in the table.")
@click.option("--label", type=str, default="sfp")
@click.option("--out", "out_path", type=click.Path(), default=None)
@handle_errors
def evaluate_cmd(report_path, gt_dir, map_path, label, out_path):
    """Compare a localization report against ground-truth poses."""
    records = localization.read_report(report_path)
    errors = []
    skipped = 0
    for rec in records:
        if not rec.get("success") or "final" not in rec:
            skipped += 1
            continue
        gt_pose = datasets.load_pose(Path(gt_dir) / f"frame-{rec['query_id']:03d}.pose.txt")
        est = localization.record_to_pose(rec["final"])
        errors.append(evaluation.pose_error(est, gt_pose))
    if not errors:
        raise RuntimeError("no successful queries to evaluate")
    med_t, med_r = evaluation.median_errors(errors)
    map_mb = Path(map_path).stat().st_size / 1e6 if map_path else 0.0
    table = evaluation.format_results_table(
        [evaluation.ResultRow(label, map_mb, med_t, med_r)]
    )
    click.echo(table, nl=False)
    if skipped:
        click.echo(f"({skipped} failed queries excluded)")
    if out_path:
        Path(out_path).write_text(table, encoding="utf-8")


# -- synthetic data --------------------------------------------------------


@main.command("synth")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--seed", type=int, default=0)
@click.option("--n-landmarks", type=int, default=200)
@click.option("--n-frames", type=int, default=12)
@click.option("--noise-px", type=float, default=0.0)
@click.option("--outlier-rate", type=float, default=0.0)
@click.option("--desc-noise", type=float, default=0.0)
@handle_errors
def synth_cmd(out_dir, seed, n_landmarks, n_frames, noise_px, outlier_rate, desc_noise):
    """Generate a synthetic posed-frame directory with exact ground truth."""
    scene = synthetic.synth_scene(
        seed, n_landmarks=n_landmarks, n_frames=n_frames, noise_px=noise_px,
        outlier_rate=outlier_rate, descriptor_noise=desc_noise,
    )
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    datasets.save_intrinsics(scene.intrinsics, out / "intrinsics.yaml")
    np.save(out / "landmarks.npy", scene.landmarks)
    for f in scene.frames:
        stem = out / f"frame-{f.frame_id:03d}"
        datasets.save_pose(f.pose, stem.with_suffix(".pose.txt"))
        extraction.write_keypoints(stem.with_suffix(".sfpk"), f.keypoints)
        np.savez(
            stem.with_suffix(".depth.npz"),
            **{f"level_{lvl}": f.depths[lvl] for lvl in sorted(f.depths)},
        )
        np.save(stem.with_suffix(".global.npy"), f.global_descriptor)
    click.echo(
        f"wrote {len(scene.frames)} frames, {n_landmarks} landmarks to {out} "
        f"(noise {noise_px}px, outliers {outlier_rate:.0%})"
    )


# -- matching accuracy -----------------------------------------------------


@main.command("mma")
@click.option("--seed", type=int, default=0)
@click.option("--pairs", "n_pairs", type=int, default=20)
@click.option("--points", "n_points", type=int, default=100)
@click.option("--noise-px", type=float, default=0.5)
@click.option("--out", "out_path", type=click.Path(), default=None)
@handle_errors
def mma_cmd(seed, n_pairs, n_points, noise_px, out_path):
    """Matching accuracy on synthetic homography pairs (planted matches)."""
    pairs = synthetic.synth_homography_pairs(
        seed, n_pairs=n_pairs, n_points=n_points, noise_px=noise_px
    )
    thresholds = evaluation.DEFAULT_THRESHOLDS
    curve = evaluation.mma(pairs, synthetic.planted_matcher, thresholds)
    text = evaluation.format_mma_curve(thresholds, curve)
    click.echo(text, nl=False)
    if out_path:
        Path(out_path).write_text(text, encoding="utf-8")


if __name__ == "__main__":
    main()

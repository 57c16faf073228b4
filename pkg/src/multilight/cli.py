"""Command-line entry point: ``multilight <command> [options]``."""

from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import logging
import os
import shutil
import sys
import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .field import FieldModel, load_checkpoint, save_checkpoint
from .imageio import read_png, write_png16
from .metrics import MetricReport
from .renderer import DatasetManifest, render_dataset
from .scene import Camera, PointLight, SdfScene, fixed_lights, hemisphere_points, load_scene, look_at, \
    orbit_cameras, reference_scene

log = logging.getLogger("multilight")


class CliError(Exception):
    pass


# ---------------------------------------------------------------- helpers


@contextlib.contextmanager
def staged_dir(out):
    """Yield a temp directory next to ``out``; rename it into place on
    success and delete it on failure."""
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}-", dir=out.parent))
    try:
        yield tmp
        if out.exists():
            shutil.rmtree(out)
        os.replace(tmp, out)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise


def _load_cfg(args) -> cfgmod.ExperimentConfig:
    cfg = cfgmod.load_config(args.config) if args.config else cfgmod.ExperimentConfig()
    if args.seed is not None:
        s = args.seed
        cfg = replace(cfg, seed=s, model=replace(cfg.model, seed=s), stage1=replace(cfg.stage1, seed=s),
                      stage2=replace(cfg.stage2, seed=s))
    return cfg


def _manifest(path) -> DatasetManifest:
    if path is None:
        raise CliError("--dataset is required")
    p = Path(path)
    if not (p / "manifest.json").exists():
        raise CliError(f"{p} is not a dataset directory (no manifest.json); run render-dataset first")
    return DatasetManifest.load(p)


def _digest(man) -> str:
    # content hash rather than a path keeps checkpoints byte-identical across output locations
    return hashlib.sha256((Path(man.root) / "manifest.json").read_bytes()).hexdigest()


def _checkpoint(path, want_stage=None):
    if path is None:
        raise CliError("--checkpoint is required")
    if not Path(path).exists():
        hint = " (run train-stage1 first)" if want_stage == 1 else ""
        raise CliError(f"checkpoint not found: {path}{hint}")
    model, extra = load_checkpoint(path)
    stage = extra.get("stage")
    if want_stage is not None and stage != want_stage:
        raise CliError(f"{path} is a stage {stage} checkpoint; this command needs stage {want_stage}")
    return model, extra


def scene_from_config(cfg) -> SdfScene:
    if cfg.scene:
        if not Path(cfg.scene).exists():
            raise CliError(f"scene file not found: {cfg.scene}")
        scene = load_scene(cfg.scene)
        return scene.with_lambertian() if cfg.lambertian else scene
    return reference_scene(cfg.lambertian)


def lights_from_config(cfg) -> tuple[list, str]:
    """Light list and camera/light pairing for the configured setting."""
    d = cfg.dataset
    n = d.light_count
    if d.light_setting in ("single", "multiple"):
        return fixed_lights(n, d.light_radius), "grid"
    rng = np.random.default_rng(cfg.seed + 7)
    pts = hemisphere_points(n, d.light_radius, rng, np.radians(20.0), np.radians(80.0))
    lights = [PointLight(tuple(p)) for p in pts]
    return lights, ("grid" if d.light_setting == "all-grid" else "random")


def _vec(text, n=3):
    try:
        v = [float(x) for x in text.split(",")]
    except ValueError:
        raise CliError(f"expected {n} comma-separated numbers, got {text!r}") from None
    if len(v) != n:
        raise CliError(f"expected {n} comma-separated numbers, got {text!r}")
    return v


# ---------------------------------------------------------------- commands


def cmd_render_dataset(args):
    cfg = _load_cfg(args)
    d = cfg.dataset
    scene = scene_from_config(cfg)
    cams = orbit_cameras(d.views, d.camera_radius, d.resolution, d.fov_deg, seed=cfg.seed)
    cams += orbit_cameras(d.test_views, d.camera_radius, d.resolution, d.fov_deg, seed=cfg.seed + 1)
    splits = ["train"] * d.views + ["test"] * d.test_views
    lights, pairing = lights_from_config(cfg)
    out = Path(args.out or Path(cfg.output_root) / "dataset")
    render_dataset(scene, cams, lights, pairing, d.gamma, out, seed=cfg.seed, splits=splits,
                   frames_per_camera=d.frames_per_view)
    log.info("dataset written to %s", out)
    return out


def cmd_train_stage1(args):
    from .training import load_ray_data, train_stage1

    cfg = _load_cfg(args)
    man = _manifest(args.dataset)
    data = load_ray_data(man)
    model = FieldModel(cfg.model)
    out = Path(args.out or Path(cfg.output_root) / "stage1.mlif")
    out.parent.mkdir(parents=True, exist_ok=True)
    _, rows, state = train_stage1(data, model, cfg.stage1, cfg.loss)
    _write_curve_atomic(rows, out.with_suffix(".loss.csv"))
    save_checkpoint(model, out, {"stage": 1, "skipped_steps": state.skipped, "dataset_sha256": _digest(man)})
    log.info("stage 1 checkpoint written to %s (%d skipped steps)", out, state.skipped)
    return out


def _write_curve_atomic(rows, path):
    from .training import write_curve

    tmp = Path(str(path) + ".tmp")
    write_curve(rows, tmp)
    os.replace(tmp, path)


def cmd_pseudo_labels(args):
    from .pseudo import generate_pseudo_labels

    cfg = _load_cfg(args)
    man = _manifest(args.dataset)
    if args.oracle:
        source = SdfScene.from_dict(man.scene)
    else:
        source, _ = _checkpoint(args.checkpoint, want_stage=1)
    out = Path(args.out or Path(cfg.output_root) / "labels")
    p = cfg.pseudo
    generate_pseudo_labels(source, man, out, policy=p.policy or None, n_random=p.n_random, seed=cfg.seed,
                           eps_s=p.eps_s, k=p.k, n_samples=cfg.render.n_samples,
                           n_importance=cfg.render.n_importance)
    log.info("pseudo labels written to %s", out)
    return out


def load_label_dir(path) -> dict:
    from .pseudo import read_labels

    p = Path(path)
    index = p / "labels.json"
    if not index.exists():
        raise CliError(f"{p} is not a label directory (no labels.json); run pseudo-labels first")
    views = json.loads(index.read_text())["views"]
    return {int(v): read_labels(p / f"view_{int(v):04d}") for v in views}


def cmd_train_stage2(args):
    from .training import label_arrays, load_ray_data, train_stage2

    cfg = _load_cfg(args)
    man = _manifest(args.dataset)
    model, _ = _checkpoint(args.checkpoint, want_stage=1)
    if args.labels is None:
        raise CliError("--labels is required")
    data = load_ray_data(man)
    labels = label_arrays(data, load_label_dir(args.labels))
    out = Path(args.out or Path(cfg.output_root) / "stage2.mlif")
    out.parent.mkdir(parents=True, exist_ok=True)
    _, rows, state = train_stage2(data, labels, model, cfg.stage2, cfg.loss)
    _write_curve_atomic(rows, out.with_suffix(".loss.csv"))
    save_checkpoint(model, out, {"stage": 2, "skipped_steps": state.skipped, "dataset_sha256": _digest(man)})
    log.info("stage 2 checkpoint written to %s", out)
    return out


def cmd_evaluate(args):
    from .volume import render_image

    cfg = _load_cfg(args)
    man = _manifest(args.dataset)
    frames = man.frames_in(args.split)
    if not frames:
        raise CliError(f"dataset has no {args.split!r} frames")
    if (args.checkpoint is None) == (args.predictions is None):
        raise CliError("give exactly one of --checkpoint or --predictions")
    reports = {"rgb": MetricReport()}
    model = None
    if args.checkpoint is not None:
        model, extra = _checkpoint(args.checkpoint)
        if extra.get("stage") == 2:
            reports.update(reflectance=MetricReport(), shading=MetricReport())
    cams = [Camera.from_dict(c) for c in man.cameras]
    root = Path(man.root)
    for f in frames:
        name = f"{f['index']:05d}"
        gt = {k: read_png(root / f[f"{k}_path"]) for k in reports}
        if model is not None:
            pred = render_image(model, cams[f["camera_index"]], f["light_position"], intrinsic=len(reports) > 1,
                                n_samples=cfg.render.n_samples, n_importance=cfg.render.n_importance)
        else:
            pdir = Path(args.predictions)
            pred = {k: read_png(pdir / f[f"{k}_path"]) for k in reports}
        for k, rep in reports.items():
            rep.add(name, np.clip(pred[k], 0.0, 1.0), gt[k])
    out = Path(args.out or Path(cfg.output_root) / f"eval_{args.split}")
    with staged_dir(out) as tmp:
        for k, rep in reports.items():
            rep.write_json(tmp / f"report_{k}.json")
            rep.write_csv(tmp / f"report_{k}.csv")
    for k, rep in reports.items():
        m = rep.mean
        print(f"{k}: psnr {m['psnr']:.3f} dB  ssim {m['ssim']:.4f}  mse {m['mse']:.6g}")
    return out


def cmd_decompose(args):
    from .volume import render_image

    cfg = _load_cfg(args)
    model, extra = _checkpoint(args.checkpoint, want_stage=2)
    if args.camera_index is not None:
        man = _manifest(args.dataset)
        if not 0 <= args.camera_index < len(man.cameras):
            raise CliError(f"camera index {args.camera_index} out of range")
        cam = Camera.from_dict(man.cameras[args.camera_index])
    elif args.eye is not None:
        d = cfg.dataset
        focal = 0.5 * d.resolution / np.tan(np.radians(d.fov_deg) / 2)
        cam = Camera(look_at(_vec(args.eye)), focal, (d.resolution / 2, d.resolution / 2), d.resolution,
                     d.resolution)
    else:
        raise CliError("give --camera-index (with --dataset) or --eye")
    if args.light is None:
        raise CliError("--light is required")
    light = _vec(args.light)
    out = render_image(model, cam, light, intrinsic=True, n_samples=cfg.render.n_samples,
                       n_importance=cfg.render.n_importance)
    dst = Path(args.out or Path(cfg.output_root) / "decompose")
    with staged_dir(dst) as tmp:
        for k in ("rgb", "reflectance", "shading"):
            write_png16(tmp / f"{k}.png", out[k])
        # the residual can be negative; previews map [-0.5, 0.5] to [0, 1]
        write_png16(tmp / "residual.png", out["residual"] + 0.5)
        np.savez(tmp / "decomposition.npz", **{k: out[k] for k in ("rgb", "reflectance", "shading", "residual")},
                 camera_to_world=cam.camera_to_world, light_position=np.asarray(light))
    return dst


COMMANDS = {
    "render-dataset": cmd_render_dataset,
    "train-stage1": cmd_train_stage1,
    "pseudo-labels": cmd_pseudo_labels,
    "train-stage2": cmd_train_stage2,
    "evaluate": cmd_evaluate,
    "decompose": cmd_decompose,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment TOML file")
    common.add_argument("--out", help="output path")
    common.add_argument("--seed", type=int, help="override every seed in the config")
    common.add_argument("--threads", type=int, default=None, help="cap BLAS / numba threads")
    common.add_argument("--deterministic", action="store_true", help="single thread, fixed reduction order")

    p = argparse.ArgumentParser(prog="multilight", description="Multi-light intrinsic decomposition pipeline.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("render-dataset", parents=[common], help="render a synthetic multi-light dataset")
    s = sub.add_parser("train-stage1", parents=[common], help="train geometry and light-conditioned color")
    s.add_argument("--dataset")
    s = sub.add_parser("pseudo-labels", parents=[common], help="pseudo reflectance/shading labels")
    s.add_argument("--dataset")
    s.add_argument("--checkpoint")
    s.add_argument("--oracle", action="store_true", help="use exact scene geometry instead of a checkpoint")
    s = sub.add_parser("train-stage2", parents=[common], help="train the intrinsic heads")
    s.add_argument("--dataset")
    s.add_argument("--checkpoint")
    s.add_argument("--labels")
    s = sub.add_parser("evaluate", parents=[common], help="PSNR / SSIM / MSE against a dataset split")
    s.add_argument("--dataset")
    s.add_argument("--checkpoint")
    s.add_argument("--predictions", help="directory of predicted images named like the dataset's")
    s.add_argument("--split", default="test")
    s = sub.add_parser("decompose", parents=[common], help="render rgb, reflectance, shading and residual")
    s.add_argument("--checkpoint")
    s.add_argument("--dataset")
    s.add_argument("--camera-index", type=int)
    s.add_argument("--eye", help="camera position x,y,z looking at the origin")
    s.add_argument("--light", help="light position x,y,z")
    return p


def _setup_logging():
    level = os.environ.get("MLI_LOG", "WARNING").upper()
    if level not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
        level = "WARNING"
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    threads = 1 if args.deterministic else args.threads
    if threads is not None and threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return 2
    try:
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=threads):
            if threads is not None:
                import numba

                numba.set_num_threads(min(threads, numba.config.NUMBA_NUM_THREADS))
            COMMANDS[args.command](args)
    except (CliError, cfgmod.ConfigError, FileNotFoundError, ValueError, PermissionError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

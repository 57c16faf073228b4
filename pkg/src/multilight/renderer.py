"""Ground-truth renderer: sphere tracing, normals, shadow rays, and
intrinsic composition ``rgb = reflectance * shading + residual``."""

from __future__ import annotations

import json
import logging
import os
import shutil
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .imageio import write_png8, write_png16
from .scene import Camera, PointLight, SdfScene, scene_albedo, scene_specular

log = logging.getLogger(__name__)

DistanceFn = Callable[[np.ndarray], np.ndarray]

DEPTH_SCALE = 8.0  # world units mapped to full 16-bit range


@dataclass(frozen=True)
class SphereTraceParams:
    max_steps: int = 256
    convergence_eps: float = 1e-4
    t_max: float = 100.0
    step_scale: float = 0.9

    def __post_init__(self):
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if not self.convergence_eps > 0:
            raise ValueError("convergence_eps must be > 0")
        if not self.t_max > 0:
            raise ValueError("t_max must be > 0")
        if not 0 < self.step_scale <= 1:
            raise ValueError("step_scale must be in (0, 1]")


@dataclass
class IntrinsicFrame:
    rgb: np.ndarray  # (H, W, 3)
    reflectance: np.ndarray  # (H, W, 3)
    shading: np.ndarray  # (H, W, 1)
    residual: np.ndarray  # (H, W, 3)
    normal: np.ndarray  # (H, W, 3)
    depth: np.ndarray  # (H, W, 1)
    mask: np.ndarray  # (H, W, 1)
    visibility: np.ndarray | None = None  # (H, W, 1)

    def closure_error(self) -> float:
        m = self.mask[..., 0] > 0
        if not m.any():
            return 0.0
        err = np.abs(self.rgb - (self.reflectance * self.shading + self.residual))
        return float(err[m].max())


def sphere_trace(sdf: DistanceFn, origins, directions, params: SphereTraceParams = SphereTraceParams(),
                 t_min=0.0, t_max=None):
    """March rays by ``step_scale * max(sdf, 0)`` until ``|sdf| <= eps``.

    Works on a single ray (3-vectors) or batches (R, 3). ``t_max`` may be a
    per-ray array and overrides ``params.t_max``. If a step lands inside the
    surface (possible for fields that are not exactly 1-Lipschitz) the last
    bracket is bisected so a reported hit always satisfies the tolerance.
    Returns ``(hit, t, point)``.
    """
    o = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    d = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    n = o.shape[0]
    eps = params.convergence_eps
    t = np.broadcast_to(np.asarray(t_min, dtype=np.float64), (n,)).copy()
    limit = np.broadcast_to(np.asarray(params.t_max if t_max is None else t_max, dtype=np.float64), (n,))
    hit = np.zeros(n, dtype=bool)
    active = t <= limit
    t_prev = t.copy()
    inside = np.zeros(n, dtype=bool)
    for _ in range(params.max_steps):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        dist = sdf(o[idx] + t[idx, None] * d[idx])
        done = np.abs(dist) <= eps
        hit[idx[done]] = True
        over = dist < -eps
        inside[idx[over]] = True
        go = ~done & ~over
        gi = idx[go]
        t_prev[gi] = t[gi]
        t[gi] += params.step_scale * np.maximum(dist[go], 0.0)
        escaped = t[gi] > limit[gi]
        active[idx[done | over]] = False
        active[gi[escaped]] = False
    bis = np.flatnonzero(inside)
    if bis.size:
        lo, hi = t_prev[bis].copy(), t[bis].copy()
        tb = t[bis].copy()
        ok = np.zeros(bis.size, dtype=bool)
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            dist = sdf(o[bis] + mid[:, None] * d[bis])
            newly = ~ok & (np.abs(dist) <= eps)
            tb[newly] = mid[newly]
            ok |= newly
            if ok.all():
                break
            pos = dist > 0
            lo = np.where(pos, mid, lo)
            hi = np.where(pos, hi, mid)
        t[bis] = tb
        hit[bis[ok]] = True
    hit &= t <= limit
    points = o + t[:, None] * d
    if np.ndim(origins) == 1:
        return bool(hit[0]), float(t[0]), points[0]
    return hit, t, points


def analytic_normal(sdf: DistanceFn, points, fd_eps: float = 1e-4):
    """Central-difference SDF gradient, normalized.

    Returns ``(normals, degenerate)``; degenerate points (gradient norm
    < 1e-8) get (0, 0, 1).
    """
    p = np.atleast_2d(np.asarray(points, dtype=np.float64))
    g = np.empty_like(p)
    for k in range(3):
        e = np.zeros(3)
        e[k] = fd_eps
        g[:, k] = (sdf(p + e) - sdf(p - e)) / (2 * fd_eps)
    norm = np.linalg.norm(g, axis=-1)
    degenerate = norm < 1e-8
    n = np.where(degenerate[:, None], np.array([0.0, 0.0, 1.0]), g / np.where(degenerate, 1.0, norm)[:, None])
    if np.ndim(points) == 1:
        return n[0], bool(degenerate[0])
    return n, degenerate


def light_visibility(sdf: DistanceFn, points, normals, light: PointLight,
                     params: SphereTraceParams = SphereTraceParams()):
    """1 where a shadow ray from the (normal-offset) point reaches the light."""
    p = np.atleast_2d(np.asarray(points, dtype=np.float64))
    nrm = np.atleast_2d(np.asarray(normals, dtype=np.float64))
    start = p + 3.0 * params.convergence_eps * nrm
    to_light = light.pos - start
    dist = np.linalg.norm(to_light, axis=-1)
    dirs = to_light / dist[:, None]
    hit, _, _ = sphere_trace(sdf, start, dirs, params, t_max=dist)
    vis = (~hit).astype(np.float64)
    if np.ndim(points) == 1:
        return float(vis[0])
    return vis


def shade_lambert(normal, light_dir, visibility, gamma: float):
    """``(max(N.L, 0) * V) ** gamma``; broadcasts over leading axes."""
    if not gamma > 0:
        raise ValueError("gamma must be > 0")
    ndl = np.sum(np.asarray(normal) * np.asarray(light_dir), axis=-1)
    return (np.maximum(ndl, 0.0) * np.asarray(visibility)) ** gamma


def render_ground_truth(scene: SdfScene, camera: Camera, light: PointLight, gamma: float = 1 / 2.2,
                        params: SphereTraceParams = SphereTraceParams(), fd_eps: float = 1e-4) -> IntrinsicFrame:
    h, w = camera.height, camera.width
    o, d = camera.pixel_rays()
    o, d = o.reshape(-1, 3), d.reshape(-1, 3)
    sdf = scene.distance
    hit, t, pts = sphere_trace(sdf, o, d, params)
    n_pix = h * w
    bg = np.asarray(scene.background_color)
    rgb = np.tile(bg, (n_pix, 1))
    refl = np.zeros((n_pix, 3))
    shading = np.zeros(n_pix)
    residual = np.tile(bg, (n_pix, 1))
    normal = np.zeros((n_pix, 3))
    depth = np.zeros(n_pix)
    vis_all = np.zeros(n_pix)
    idx = np.flatnonzero(hit)
    if idx.size:
        p = pts[idx]
        nrm, _ = analytic_normal(sdf, p, fd_eps)
        vis = light_visibility(sdf, p, nrm, light, params)
        ldir = light.pos - p
        ldir /= np.linalg.norm(ldir, axis=-1, keepdims=True)
        s = shade_lambert(nrm, ldir, vis, gamma)
        alb = scene_albedo(scene, p)
        strength, exponent = scene_specular(scene, p)
        half = ldir - d[idx]
        # light exactly behind the surface seen head-on: no highlight anyway
        half /= np.maximum(np.linalg.norm(half, axis=-1, keepdims=True), 1e-12)
        lit = vis * (np.sum(nrm * ldir, axis=-1) > 0)
        spec = light.intensity * strength * np.maximum(np.sum(nrm * half, axis=-1), 0.0) ** exponent * lit
        res = spec[:, None] + scene.ambient_level * alb
        diffuse = alb * s[:, None]
        color = np.clip(diffuse + res, 0.0, 1.0)
        # clipping is folded into the residual so the decomposition stays exact
        rgb[idx] = color
        residual[idx] = color - diffuse
        refl[idx] = alb
        shading[idx] = s
        normal[idx] = nrm
        depth[idx] = t[idx]
        vis_all[idx] = vis
    return IntrinsicFrame(
        rgb=rgb.reshape(h, w, 3),
        reflectance=refl.reshape(h, w, 3),
        shading=shading.reshape(h, w, 1),
        residual=residual.reshape(h, w, 3),
        normal=normal.reshape(h, w, 3),
        depth=depth.reshape(h, w, 1),
        mask=hit.astype(np.float64).reshape(h, w, 1),
        visibility=vis_all.reshape(h, w, 1),
    )


CHANNELS = ("rgb", "reflectance", "shading", "residual", "normal", "depth", "mask")


def write_frame(frame: IntrinsicFrame, directory: Path, stem: str) -> dict:
    """Write one frame's channels; returns the manifest path entries."""
    paths = {}
    for ch in CHANNELS:
        name = f"{stem}_{ch}.png"
        img = getattr(frame, ch)
        if ch == "rgb":
            write_png8(directory / name, img)
        elif ch == "normal":
            write_png16(directory / name, (img + 1.0) / 2.0)
        elif ch == "depth":
            write_png16(directory / name, img / DEPTH_SCALE)
        else:
            write_png16(directory / name, img)
        paths[f"{ch}_path"] = name
    return paths


@dataclass
class DatasetManifest:
    frames: list
    gamma: float
    resolution: tuple
    seed: int | None
    scene: dict
    cameras: list
    lights: list
    pairing: str
    root: Path | None = None

    def to_dict(self) -> dict:
        return {
            "frames": self.frames,
            "gamma": self.gamma,
            "resolution": list(self.resolution),
            "seed": self.seed,
            "pairing": self.pairing,
            "depth_scale": DEPTH_SCALE,
            "scene": self.scene,
            "cameras": self.cameras,
            "lights": self.lights,
            "conventions": "right-handed world; camera looks down -z, +y up; pixel centers at +0.5",
        }

    @classmethod
    def load(cls, directory) -> "DatasetManifest":
        directory = Path(directory)
        path = directory / "manifest.json"
        if not path.exists():
            raise FileNotFoundError(f"no manifest.json in {directory}")
        d = json.loads(path.read_text())
        return cls(d["frames"], d["gamma"], tuple(d["resolution"]), d.get("seed"), d["scene"],
                   d["cameras"], d["lights"], d.get("pairing", "grid"), directory)

    def frames_in(self, split: str) -> list:
        return [f for f in self.frames if f["split"] == split]


def _pairs(n_cams: int, n_lights: int, pairing: str, seed, frames_per_camera: int):
    if pairing == "grid":
        return [(c, l) for c in range(n_cams) for l in range(n_lights)]
    if pairing == "random":
        if seed is None:
            raise ValueError("random pairing needs a seed")
        rng = np.random.default_rng(seed)
        return [(c, int(rng.integers(n_lights))) for c in range(n_cams) for _ in range(frames_per_camera)]
    raise ValueError(f"unknown pairing {pairing!r}")


def render_dataset(scene: SdfScene, cameras: Sequence[Camera], lights: Sequence[PointLight], pairing: str = "grid",
                   gamma: float = 1 / 2.2, output_dir=None, seed: int | None = None, splits: Sequence[str] | None = None,
                   frames_per_camera: int = 1, params: SphereTraceParams = SphereTraceParams()) -> DatasetManifest:
    """Render every (camera, light) frame and write PNGs plus ``manifest.json``.

    ``splits`` assigns each camera to train/val/test (default: all train).
    Output is staged in a temporary sibling directory and renamed into
    place, so a failure never leaves a partial dataset behind.
    """
    if not cameras or not lights:
        raise ValueError("need at least one camera and one light")
    splits = list(splits) if splits is not None else ["train"] * len(cameras)
    if len(splits) != len(cameras) or any(s not in ("train", "val", "test") for s in splits):
        raise ValueError("splits must give train/val/test for every camera")
    pairs = _pairs(len(cameras), len(lights), pairing, seed, frames_per_camera)
    res = (cameras[0].width, cameras[0].height)

    out = Path(output_dir) if output_dir is not None else None
    stage = None
    if out is not None:
        out.parent.mkdir(parents=True, exist_ok=True)
        if not os.access(out.parent, os.W_OK):
            raise PermissionError(f"cannot write to {out.parent}")
        stage = Path(tempfile.mkdtemp(prefix=f".{out.name}-", dir=out.parent))

    frames = []
    try:
        for i, (ci, li) in enumerate(pairs):
            cam, light = cameras[ci], lights[li]
            frame = render_ground_truth(scene, cam, light, gamma, params)
            entry = {
                "index": i,
                "camera_index": ci,
                "light_index": li,
                "camera_to_world": [float(x) for x in cam.camera_to_world.reshape(-1)],
                "light_position": list(light.position),
                "light_intensity": light.intensity,
                "split": splits[ci],
            }
            if stage is not None:
                entry.update(write_frame(frame, stage, f"{i:05d}"))
            frames.append(entry)
            log.debug("rendered frame %d (camera %d, light %d)", i, ci, li)
        manifest = DatasetManifest(frames, gamma, res, seed, scene.to_dict(), [c.to_dict() for c in cameras],
                                   [{"position": list(l.position), "intensity": l.intensity} for l in lights],
                                   pairing, out)
        if stage is not None:
            (stage / "manifest.json").write_text(json.dumps(manifest.to_dict(), indent=1))
            if out.exists():
                shutil.rmtree(out)
            os.replace(stage, out)
            stage = None
    finally:
        if stage is not None:
            shutil.rmtree(stage, ignore_errors=True)
    return manifest

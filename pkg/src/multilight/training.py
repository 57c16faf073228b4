"""Two-stage optimization: losses, AdamW, and the training loops."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .field import GEOMETRY_PREFIXES, FieldModel
from .volume import importance, ray_sphere_bounds, render_samples, sample_rays, stratified

log = logging.getLogger(__name__)

CURVE_COLUMNS = ("iteration", "total", "rgb", "eik", "curv", "intrinsic_R", "intrinsic_S", "reg")
HEAD_PREFIXES = ("color.", "refl.", "shade.")


@dataclass
class LossWeights:
    w_rgb: float = 1.0
    w_eik: float = 0.1
    w_curv: float = 5e-4
    w_intrinsic: float = 1.0
    w_reg: float = 1.0

    def __post_init__(self):
        for k, v in vars(self).items():
            if v < 0:
                raise ValueError(f"{k} must be >= 0")


@dataclass
class TrainConfig:
    batch_size: int = 2048
    iterations: int = 20000
    lr: float = 1e-3
    weight_decay: float = 1e-2
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    stage: int = 1
    freeze_geometry: bool = False
    n_samples: int = 64
    n_importance: int = 64
    eik_points_per_ray: int = 1  # uniform along the ray
    eik_surface_points_per_ray: int = 1  # drawn from the rendering weights
    fd_step: float = 1e-2
    log_every: int = 100

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.stage not in (1, 2):
            raise ValueError("stage must be 1 or 2")
        if self.stage == 2:
            self.freeze_geometry = True
        if self.batch_size < 1 or self.iterations < 0:
            raise ValueError("batch_size must be >= 1 and iterations >= 0")


@dataclass
class LossResult:
    total: float
    terms: dict
    grads: dict = field(default_factory=dict)


def _check_finite(terms: dict) -> None:
    for k, v in terms.items():
        if not np.isfinite(v):
            raise FloatingPointError(f"non-finite loss term {k!r}")


# ---------------------------------------------------------------- losses


def fd_gradient_laplacian(fn, points: np.ndarray, h: float):
    """Central-difference gradient (M, 3) and 7-point Laplacian (M,) of a
    scalar field ``fn`` at ``points``. Also returns the stacked stencil
    values for callers that need to backpropagate."""
    pts = np.asarray(points)
    m = pts.shape[0]
    offsets = np.concatenate([np.zeros((1, 3)), np.eye(3) * h, -np.eye(3) * h])  # center, +x+y+z, -x-y-z
    stencil = (pts[None] + offsets[:, None, :].astype(pts.dtype)).reshape(-1, 3)
    f = np.asarray(fn(stencil)).reshape(7, m)
    grad = (f[1:4] - f[4:7]).T / (2 * h)
    lap = (f[1:4] + f[4:7] - 2 * f[0]).sum(axis=0) / h**2
    return grad, lap, stencil


def loss_stage1(pred_rgb, gt_rgb, fd_grad, laplacian, weights: LossWeights = LossWeights()) -> LossResult:
    """w_rgb * L1 + w_eik * E[(|grad f| - 1)^2] + w_curv * E[|lap f|].

    ``grads`` holds d(total)/d(pred_rgb, fd_grad, laplacian).
    """
    diff = np.asarray(pred_rgb) - np.asarray(gt_rgb)
    l_rgb = float(np.mean(np.abs(diff)))
    gnorm = np.linalg.norm(fd_grad, axis=-1)
    m = max(len(gnorm), 1)
    l_eik = float(np.mean((gnorm - 1.0) ** 2)) if len(gnorm) else 0.0
    l_curv = float(np.mean(np.abs(laplacian))) if len(gnorm) else 0.0
    terms = {
        "rgb": weights.w_rgb * l_rgb,
        "eik": weights.w_eik * l_eik,
        "curv": weights.w_curv * l_curv,
        "intrinsic_R": 0.0,
        "intrinsic_S": 0.0,
        "reg": 0.0,
    }
    _check_finite(terms)
    total = terms["rgb"] + terms["eik"] + terms["curv"]
    grads = {
        "rgb": weights.w_rgb * np.sign(diff) / diff.size,
        "fd_grad": weights.w_eik * (2.0 * (gnorm - 1.0) / np.maximum(gnorm, 1e-12))[:, None] * fd_grad / m,
        "laplacian": weights.w_curv * np.sign(laplacian) / m,
    }
    return LossResult(total, terms, grads)


def loss_stage2(pred: dict, gt_rgb, pseudo: dict, weight_maps: dict, weights: LossWeights = LossWeights()) -> LossResult:
    """w_rgb * L1(rgb) + w_intrinsic * (W_R |R - R*| + W_S |S - S*|) + w_reg * |Re|.

    ``pred`` holds rgb (B,3), reflectance (B,3), shading (B,1) and
    residual (B,3); ``pseudo`` holds reflectance (B,3) and shading (B,1);
    ``weight_maps`` holds w_r (B,) and w_s (B,). Weights multiply per pixel
    before averaging. ``grads`` are w.r.t. rgb, reflectance and shading,
    with the residual's dependence already folded in.
    """
    rgb, refl, shade, res = (np.asarray(pred[k]) for k in ("rgb", "reflectance", "shading", "residual"))
    r_star, s_star = np.asarray(pseudo["reflectance"]), np.asarray(pseudo["shading"])
    w_r, w_s = np.asarray(weight_maps["w_r"]), np.asarray(weight_maps["w_s"])
    gt = np.asarray(gt_rgb)
    if not (rgb.shape == gt.shape == refl.shape == r_star.shape == res.shape):
        raise ValueError("rgb / reflectance / residual / targets must share a shape")
    if shade.shape != s_star.shape or w_r.shape != rgb.shape[:1] or w_s.shape != rgb.shape[:1]:
        raise ValueError("shading or weight-map shape does not match the batch")
    b = rgb.shape[0]
    d_rgb = rgb - gt
    d_r = refl - r_star
    d_s = shade - s_star
    terms = {
        "rgb": weights.w_rgb * float(np.mean(np.abs(d_rgb))),
        "eik": 0.0,
        "curv": 0.0,
        "intrinsic_R": weights.w_intrinsic * float(np.mean(w_r[:, None] * np.abs(d_r))),
        "intrinsic_S": weights.w_intrinsic * float(np.mean(w_s[:, None] * np.abs(d_s))),
        "reg": weights.w_reg * float(np.mean(np.abs(res))),
    }
    _check_finite(terms)
    total = terms["rgb"] + terms["intrinsic_R"] + terms["intrinsic_S"] + terms["reg"]
    g_res = weights.w_reg * np.sign(res) / res.size
    g_rgb = weights.w_rgb * np.sign(d_rgb) / d_rgb.size + g_res
    g_refl = weights.w_intrinsic * w_r[:, None] * np.sign(d_r) / d_r.size - g_res * shade
    g_shade = weights.w_intrinsic * w_s[:, None] * np.sign(d_s) / d_s.size - np.sum(g_res * refl, axis=1, keepdims=True)
    del b
    return LossResult(total, terms, {"rgb": g_rgb, "reflectance": g_refl, "shading": g_shade})


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    step: int = 0
    skipped: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: dict, grads: dict, state: AdamState, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
               weight_decay: float = 1e-2, names=None) -> bool:
    """One decoupled-weight-decay Adam update, in place.

    Returns False (and bumps ``state.skipped``) when any gradient is
    non-finite; the parameters are then left untouched.
    """
    names = list(params) if names is None else list(names)
    for k in names:
        if k in state.m and state.m[k].shape != params[k].shape:
            raise ValueError(f"optimizer state for {k} does not match the parameter shape")
    if not all(np.all(np.isfinite(grads[k])) for k in names):
        state.skipped += 1
        return False
    state.step += 1
    b1, b2 = betas
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for k in names:
        p, g = params[k], grads[k]
        m = state.m.setdefault(k, np.zeros_like(p))
        v = state.v.setdefault(k, np.zeros_like(p))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if weight_decay:
            p *= 1.0 - lr * weight_decay
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
    return True


# ---------------------------------------------------------------- data


@dataclass
class RayData:
    """Training rays for a set of frames, flattened per frame."""

    rgb: np.ndarray  # (F, P, 3)
    origins: np.ndarray  # (F, P, 3)
    dirs: np.ndarray  # (F, P, 3)
    light_positions: np.ndarray  # (F, 3)
    camera_index: np.ndarray  # (F,)
    light_index: np.ndarray  # (F,)
    frame_ids: list
    resolution: tuple

    @property
    def n_frames(self) -> int:
        return self.rgb.shape[0]


def load_ray_data(manifest, split: str = "train") -> RayData:
    from .imageio import read_png
    from .scene import Camera

    frames = manifest.frames_in(split)
    if not frames:
        raise ValueError(f"dataset has no {split!r} frames")
    cams = [Camera.from_dict(c) for c in manifest.cameras]
    rgb, o, d = [], [], []
    for f in frames:
        rgb.append(read_png(Path(manifest.root) / f["rgb_path"], 3).reshape(-1, 3))
        oo, dd = cams[f["camera_index"]].pixel_rays()
        o.append(oo.reshape(-1, 3))
        d.append(dd.reshape(-1, 3))
    return RayData(np.stack(rgb), np.stack(o), np.stack(d), np.array([f["light_position"] for f in frames]),
                   np.array([f["camera_index"] for f in frames]), np.array([f["light_index"] for f in frames]),
                   [f["index"] for f in frames], tuple(manifest.resolution))


def _names(model: FieldModel, stage: int, freeze_geometry: bool):
    if stage == 2 or freeze_geometry:
        return [k for k in model.params if k.startswith(HEAD_PREFIXES)]
    return [k for k in model.params if k.startswith(GEOMETRY_PREFIXES) or k.startswith("color.")]


def write_curve(rows: list, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CURVE_COLUMNS)
        for r in rows:
            w.writerow([r[0]] + [repr(float(x)) for x in r[1:]])


def _batch(data: RayData, cfg: TrainConfig, rng):
    fi = rng.integers(data.n_frames, size=cfg.batch_size)
    pi = rng.integers(data.rgb.shape[1], size=cfg.batch_size)
    return fi, pi


def stage1_step(model: FieldModel, o, d, gt, codes, cfg: TrainConfig, weights: LossWeights, rng):
    """Loss and gradients for one Stage 1 ray batch."""
    dt = model.dtype
    near, far, hit = ray_sphere_bounds(o, d, model.config.bound)
    sel = np.flatnonzero(hit)
    bg = np.asarray(model.config.background, dtype=dt)
    pred = np.tile(bg, (len(o), 1))
    grads = model.zero_grads()
    rp = None
    if sel.size:
        t = sample_rays(model, o[sel], d[sel], near[sel], far[sel], cfg.n_samples, cfg.n_importance, rng)
        rp = render_samples(model, o[sel], d[sel], t, codes[sel])
        pred[sel] = rp.rgb
        te = stratified(near[sel], far[sel], cfg.eik_points_per_ray, rng)
        if cfg.eik_surface_points_per_ray > 0:
            # uniform points leave the thin shell around the surface almost unconstrained
            ts = importance(t, rp.weights.astype(np.float64), cfg.eik_surface_points_per_ray, rng)
            te = np.concatenate([te, ts], axis=1)
        xe = (o[sel, None, :] + te[..., None] * d[sel, None, :]).reshape(-1, 3).astype(dt)
    else:
        xe = np.zeros((0, 3), dtype=dt)
    geo_cache = {}

    def fn(x):
        g = model.geometry(x)
        geo_cache["g"] = g
        return g.sdf

    fd_grad, lap, _ = fd_gradient_laplacian(fn, xe, cfg.fd_step)
    loss = loss_stage1(pred, gt, fd_grad, lap, weights)
    if rp is not None:
        rp.backward(grads, d_rgb=loss.grads["rgb"][sel].astype(dt))
        m = xe.shape[0]
        h = cfg.fd_step
        df = np.zeros((7, m), dtype=dt)
        gg = loss.grads["fd_grad"] / (2 * h)
        df[1:4] += gg.T
        df[4:7] -= gg.T
        gl = loss.grads["laplacian"] / h**2
        df[1:7] += gl
        df[0] -= 6 * gl
        model.geometry_backward(geo_cache["g"], df.reshape(-1), None, grads)
    return loss, grads


def train_stage1(data: RayData, model: FieldModel, config: TrainConfig, weights: LossWeights = LossWeights(),
                 curve_path=None, checkpoint_path=None, progress=None):
    """Optimize geometry, hash grid and color head on multi-light images.

    Returns ``(model, curve_rows, optimizer_state)``; the model is updated
    in place.
    """
    rng = np.random.default_rng(config.seed)
    state = AdamState()
    names = _names(model, 1, config.freeze_geometry)
    codes_all = np.stack([model.light_code(p) for p in data.light_positions])
    rows = []
    t0 = time.time()
    for it in range(1, config.iterations + 1):
        fi, pi = _batch(data, config, rng)
        o, d, gt = data.origins[fi, pi], data.dirs[fi, pi], data.rgb[fi, pi]
        loss, grads = stage1_step(model, o, d, gt, codes_all[fi], config, weights, rng)
        if not adamw_step(model.params, grads, state, config.lr, config.betas, config.eps, config.weight_decay, names):
            bad = [k for k in names if not np.all(np.isfinite(grads[k]))]
            log.warning("iteration %d: non-finite gradients in %s; step skipped", it, bad)
        rows.append([it, loss.total] + [loss.terms[k] for k in CURVE_COLUMNS[2:]])
        if progress is not None:
            progress(it, loss)
        if it % config.log_every == 0:
            log.info("stage1 it %d loss %.5f rgb %.5f eik %.5f inv_std %.1f (%.1fs)", it, loss.total,
                     loss.terms["rgb"], loss.terms["eik"], model.inv_std, time.time() - t0)
    if curve_path is not None:
        write_curve(rows, curve_path)
    if checkpoint_path is not None:
        from .field import save_checkpoint
        save_checkpoint(model, checkpoint_path, {"stage": 1, "skipped_steps": state.skipped})
    return model, rows, state


@dataclass
class LabelArrays:
    """Pseudo labels aligned with :class:`RayData` frames, flattened."""

    reflectance: np.ndarray  # (F, P, 3)
    shading: np.ndarray  # (F, P, 1)
    w_r: np.ndarray  # (F, P)
    w_s: np.ndarray  # (F, P)


def label_arrays(data: RayData, labels: dict) -> LabelArrays:
    """Align per-view pseudo labels (``{camera_index: PseudoLabelSet}``)
    with the training frames; raises listing every frame without labels."""
    missing = []
    n, p = data.rgb.shape[:2]
    out = LabelArrays(np.zeros((n, p, 3)), np.zeros((n, p, 1)), np.zeros((n, p)), np.zeros((n, p)))
    for i in range(n):
        lab = labels.get(int(data.camera_index[i]))
        lid = int(data.light_index[i])
        if lab is None or lid not in list(lab.light_ids):
            missing.append(data.frame_ids[i])
            continue
        j = list(lab.light_ids).index(lid)
        out.reflectance[i] = lab.reflectance.reshape(-1, 3)
        out.shading[i] = lab.shading[j].reshape(-1, 1)
        out.w_r[i] = lab.w_r.reshape(-1)
        out.w_s[i] = lab.w_s[j].reshape(-1)
    if missing:
        raise ValueError(f"no pseudo labels for training frames {missing}")
    return out


def stage2_step(model: FieldModel, o, d, gt, codes, labels: dict, cfg: TrainConfig, weights: LossWeights, rng):
    dt = model.dtype
    near, far, hit = ray_sphere_bounds(o, d, model.config.bound)
    sel = np.flatnonzero(hit)
    n = len(o)
    bg = np.asarray(model.config.background, dtype=dt)
    pred = {
        "rgb": np.tile(bg, (n, 1)),
        "reflectance": np.zeros((n, 3), dtype=dt),
        "shading": np.zeros((n, 1), dtype=dt),
        "residual": np.tile(bg, (n, 1)),
    }
    grads = model.zero_grads()
    rp = None
    if sel.size:
        t = sample_rays(model, o[sel], d[sel], near[sel], far[sel], cfg.n_samples, cfg.n_importance, rng)
        rp = render_samples(model, o[sel], d[sel], t, codes[sel], intrinsic=True)
        for k in pred:
            pred[k][sel] = getattr(rp, k)
    loss = loss_stage2(pred, gt, {"reflectance": labels["reflectance"], "shading": labels["shading"]},
                       {"w_r": labels["w_r"], "w_s": labels["w_s"]}, weights)
    if rp is not None:
        g = loss.grads
        rp.backward(grads, d_rgb=g["rgb"][sel].astype(dt), d_reflectance=g["reflectance"][sel].astype(dt),
                    d_shading=g["shading"][sel].astype(dt), train_geometry=False)
    return loss, grads


def train_stage2(data: RayData, labels: LabelArrays, model: FieldModel, config: TrainConfig,
                 weights: LossWeights = LossWeights(), curve_path=None, checkpoint_path=None, progress=None):
    """Optimize the color, reflectance and shading heads against pseudo
    labels with geometry, hash grid and inv_std frozen."""
    if labels.reflectance.shape[:2] != data.rgb.shape[:2]:
        raise ValueError("pseudo labels do not match the training frames")
    rng = np.random.default_rng(config.seed)
    state = AdamState()
    names = _names(model, 2, True)
    codes_all = np.stack([model.light_code(p) for p in data.light_positions])
    rows = []
    t0 = time.time()
    for it in range(1, config.iterations + 1):
        fi, pi = _batch(data, config, rng)
        lab = {
            "reflectance": labels.reflectance[fi, pi],
            "shading": labels.shading[fi, pi],
            "w_r": labels.w_r[fi, pi],
            "w_s": labels.w_s[fi, pi],
        }
        loss, grads = stage2_step(model, data.origins[fi, pi], data.dirs[fi, pi], data.rgb[fi, pi], codes_all[fi],
                                  lab, config, weights, rng)
        if not adamw_step(model.params, grads, state, config.lr, config.betas, config.eps, config.weight_decay, names):
            log.warning("iteration %d: non-finite gradients; step skipped", it)
        rows.append([it, loss.total] + [loss.terms[k] for k in CURVE_COLUMNS[2:]])
        if progress is not None:
            progress(it, loss)
        if it % config.log_every == 0:
            log.info("stage2 it %d loss %.5f rgb %.5f R %.5f S %.5f reg %.5f (%.1fs)", it, loss.total,
                     loss.terms["rgb"], loss.terms["intrinsic_R"], loss.terms["intrinsic_S"], loss.terms["reg"],
                     time.time() - t0)
    if curve_path is not None:
        write_curve(rows, curve_path)
    if checkpoint_path is not None:
        from .field import save_checkpoint
        save_checkpoint(model, checkpoint_path, {"stage": 2, "skipped_steps": state.skipped})
    return model, rows, state

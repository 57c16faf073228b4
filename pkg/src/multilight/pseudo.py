"""Pseudo labels for reflectance and shading from multi-light observations.

Geometry (normals, surface points) comes either from a trained field or,
in oracle mode, from the exact scene. Shading labels are Lambertian with
sphere-traced visibility; reflectance candidates are I / S per light and
get merged per pixel with a weighted K-means.
"""

from __future__ import annotations

import json
import logging
import os
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .field import FieldModel
from .imageio import read_png, write_png16
from .renderer import SphereTraceParams, analytic_normal, light_visibility, render_ground_truth, shade_lambert, \
    sphere_trace
from .scene import Camera, PointLight, SdfScene
from .volume import render_image, trace_field_surface

log = logging.getLogger(__name__)

FILL_WEIGHTS = (0.2, 0.4, 0.4)  # spatial, normal, color


@dataclass
class GeometryMaps:
    normal: np.ndarray  # (H, W, 3)
    points: np.ndarray  # (H, W, 3)
    mask: np.ndarray  # (H, W) bool


@dataclass
class PseudoLabelSet:
    reflectance: np.ndarray  # (H, W, 3)
    shading: np.ndarray  # (N, H, W)
    w_r: np.ndarray  # (H, W)
    w_s: np.ndarray  # (N, H, W)
    holes: np.ndarray  # (H, W) bool
    light_ids: list
    mask: np.ndarray | None = None
    stats: dict = field(default_factory=dict)


def _distance(source):
    if isinstance(source, SdfScene):
        return source.distance
    if isinstance(source, FieldModel):
        return source.sdf
    raise TypeError("geometry source must be an SdfScene or a FieldModel")


def extract_geometry_maps(source, camera: Camera, params: SphereTraceParams | None = None,
                          fd_eps: float = 1e-4) -> GeometryMaps:
    """Sphere trace every pixel of ``camera`` against the scene or field."""
    h, w = camera.height, camera.width
    o, d = camera.pixel_rays()
    o, d = o.reshape(-1, 3), d.reshape(-1, 3)
    normal = np.zeros((h * w, 3))
    if isinstance(source, SdfScene):
        params = params or SphereTraceParams()
        hit, _, pts = sphere_trace(source.distance, o, d, params)
        idx = np.flatnonzero(hit)
        if idx.size:
            normal[idx] = analytic_normal(source.distance, pts[idx], fd_eps)[0]
    else:
        _distance(source)
        hit, pts, nrm, _ = trace_field_surface(source, o, d, params)
        normal[hit] = nrm[hit]
    pts = np.where(hit[:, None], pts, 0.0)
    return GeometryMaps(normal.reshape(h, w, 3), pts.reshape(h, w, 3), hit.reshape(h, w))


def pseudo_shading(maps: GeometryMaps, light: PointLight, source, gamma: float = 1 / 2.2,
                   params: SphereTraceParams | None = None):
    """``(max(N.L, 0) * V) ** gamma`` on hit pixels, 0 elsewhere.

    Returns ``(shading, visibility)``, both (H, W).
    """
    params = params or SphereTraceParams()
    sdf = _distance(source)
    h, w = maps.mask.shape
    s = np.zeros(h * w)
    vis = np.zeros(h * w)
    idx = np.flatnonzero(maps.mask.reshape(-1))
    if idx.size:
        p = maps.points.reshape(-1, 3)[idx]
        n = maps.normal.reshape(-1, 3)[idx]
        v = light_visibility(sdf, p, n, light, params)
        ldir = light.pos - p
        ldir /= np.linalg.norm(ldir, axis=-1, keepdims=True)
        s[idx] = shade_lambert(n, ldir, v, gamma)
        vis[idx] = v
    return s.reshape(h, w), vis.reshape(h, w)


def per_light_reflectance(image, shading, eps_s: float = 0.05):
    """Candidate reflectance ``clip(I / S, 0, 1)`` and its validity mask.

    Pixels with ``S < eps_s`` are invalid and set to 0.
    """
    if not eps_s > 0:
        raise ValueError("eps_s must be > 0")
    img = np.asarray(image, dtype=np.float64)
    s = np.asarray(shading, dtype=np.float64)
    if s.ndim == img.ndim:
        s = s[..., 0]
    if s.shape != img.shape[:-1]:
        raise ValueError("image and shading are not aligned")
    valid = s >= eps_s
    r = np.where(valid[..., None], np.clip(img / np.where(valid, s, 1.0)[..., None], 0.0, 1.0), 0.0)
    return r, valid


# ---------------------------------------------------------------- merge


def _kmeanspp(x, w, k, rng):
    p, n, _ = x.shape
    centers = np.empty((p, k, 3))
    rows = np.arange(p)

    def draw(prob):
        tot = prob.sum(axis=1)
        cdf = np.cumsum(prob, axis=1)
        u = rng.random(p) * tot
        idx = np.minimum((cdf <= u[:, None]).sum(axis=1), n - 1)
        # fall back to the heaviest candidate where every probability is 0
        return np.where(tot > 0, idx, np.argmax(w, axis=1))

    centers[:, 0] = x[rows, draw(w)]
    d2 = np.sum((x - centers[:, :1]) ** 2, axis=-1)
    for j in range(1, k):
        centers[:, j] = x[rows, draw(w * d2)]
        d2 = np.minimum(d2, np.sum((x - centers[:, j:j + 1]) ** 2, axis=-1))
    return centers


def _lloyd(x, w, centers, iterations):
    k = centers.shape[1]
    ar = np.arange(k)
    for _ in range(iterations + 1):
        d2 = np.sum((x[:, :, None, :] - centers[:, None, :, :]) ** 2, axis=-1)
        lab = np.argmin(d2, axis=2)
        onehot = (lab[..., None] == ar) * w[..., None]
        cw = onehot.sum(axis=1)
        cs = np.einsum("pnk,pnc->pkc", onehot, x)
        centers = np.where(cw[..., None] > 0, cs / np.where(cw > 0, cw, 1.0)[..., None], centers)
    return _hartigan(x, w, lab, k)


def _hartigan(x, w, lab, k, max_passes: int = 50):
    """Single-point transfer refinement of a Lloyd partition.

    A weighted SSE optimum need not be a nearest-centroid fixed point; a
    point moves from cluster a to b whenever
    ``w W_b/(W_b+w) |x-c_b|^2 < w W_a/(W_a-w) |x-c_a|^2``.
    """
    p, n, _ = x.shape
    rows = np.arange(p)
    ar = np.arange(k)
    onehot = (lab[..., None] == ar) * w[..., None]
    cw = onehot.sum(axis=1)
    cs = np.einsum("pnk,pnc->pkc", onehot, x)
    for _ in range(max_passes):
        moved = False
        for i in range(n):
            wi, xi, a = w[:, i], x[:, i], lab[:, i]
            wa = cw[rows, a]
            rest = wa - wi
            ok = (wi > 0) & (rest > 1e-12 * np.maximum(wa, 1.0))
            ca = cs[rows, a] / np.where(wa > 0, wa, 1.0)[:, None]
            remove = wi * wa / np.where(ok, rest, 1.0) * np.sum((xi - ca) ** 2, axis=-1)
            c = cs / np.where(cw > 0, cw, 1.0)[..., None]
            tot = cw + wi[:, None]
            add = wi[:, None] * cw / np.where(tot > 0, tot, 1.0) * np.sum((xi[:, None] - c) ** 2, axis=-1)
            add[rows, a] = np.inf
            b = np.argmin(add, axis=1)
            go = ok & (add[rows, b] < remove * (1 - 1e-12) - 1e-15)
            if go.any():
                moved = True
                g = np.flatnonzero(go)
                cw[g, a[g]] -= wi[g]
                cs[g, a[g]] -= wi[g, None] * xi[g]
                cw[g, b[g]] += wi[g]
                cs[g, b[g]] += wi[g, None] * xi[g]
                lab[g, i] = b[g]
        if not moved:
            break
    # recompute from scratch to shed accumulated rounding
    onehot = (lab[..., None] == ar) * w[..., None]
    cw = onehot.sum(axis=1)
    cs = np.einsum("pnk,pnc->pkc", onehot, x)
    centers = cs / np.where(cw > 0, cw, 1.0)[..., None]
    d2 = np.sum((x[:, :, None, :] - centers[:, None, :, :]) ** 2, axis=-1)
    inertia = np.sum(np.take_along_axis(d2, lab[..., None], 2)[..., 0] * w, axis=1)
    return centers, cw, inertia


def weighted_kmeans(x, w, k: int = 2, iterations: int = 20, seed: int = 0, n_init: int = 20):
    """Batched weighted K-means over P independent point sets.

    ``x`` is (P, N, 3), ``w`` is (P, N) with zero weight for padding.
    Each restart is seeded with k-means++; the restart with the lowest
    weighted inertia wins. Returns ``(centers (P,k,3), cluster_weight (P,k))``.
    """
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    rng = np.random.default_rng(seed)
    best_c = best_w = best_i = None
    for _ in range(max(n_init, 1)):
        c, cw, inertia = _lloyd(x, w, _kmeanspp(x, w, k, rng), iterations)
        if best_c is None:
            best_c, best_w, best_i = c, cw, inertia
            continue
        better = inertia < best_i - 1e-15
        best_c = np.where(better[:, None, None], c, best_c)
        best_w = np.where(better[:, None], cw, best_w)
        best_i = np.where(better, inertia, best_i)
    return best_c, best_w


def merge_reflectance_kmeans(candidates, valid, weights, k: int = 2, seed: int = 0, iterations: int = 20,
                             n_init: int = 20):
    """Merge per-light reflectance candidates into one map.

    ``candidates`` (N, H, W, 3), ``valid`` (N, H, W), ``weights`` (N, H, W),
    usually the pseudo shading. Pixels with no valid candidate are holes;
    pixels with fewer than ``k`` use the weighted mean; the rest take the
    centroid of the heaviest K-means cluster. Returns ``(merged, holes)``.
    """
    cand = np.asarray(candidates, dtype=np.float64)
    if cand.ndim != 4 or cand.shape[0] < 1:
        raise ValueError("candidates must be (N, H, W, 3) with N >= 1")
    n, h, wd, _ = cand.shape
    val = np.asarray(valid, dtype=bool)
    wt = np.where(val, np.asarray(weights, dtype=np.float64), 0.0)
    count = val.sum(axis=0)
    holes = count == 0
    x = np.moveaxis(cand, 0, 2).reshape(h * wd, n, 3)
    w = np.moveaxis(wt, 0, 2).reshape(h * wd, n)
    cnt = count.reshape(-1)
    out = np.zeros((h * wd, 3))
    few = (cnt > 0) & (cnt < k)
    if few.any():
        ws = w[few]
        out[few] = np.einsum("pn,pnc->pc", ws, x[few]) / ws.sum(axis=1, keepdims=True)
    many = cnt >= k
    if many.any():
        centers, cw = weighted_kmeans(x[many], w[many], k, iterations, seed, n_init)
        out[many] = centers[np.arange(centers.shape[0]), np.argmax(cw, axis=1)]
    return out.reshape(h, wd, 3), holes


# ---------------------------------------------------------------- holes


def fill_holes(reflectance, holes, normal, rgb, alphas=FILL_WEIGHTS, window: int = 32, donors=None):
    """Give each hole pixel the reflectance of its closest donor under
    ``a_s * dist / diag + a_n * angle / pi + a_c * |rgb_a - rgb_b|``.

    Donors default to every non-hole pixel and are searched in a square
    window of radius ``window``; if the window holds none, the spatially
    nearest donor is used instead.
    """
    r = np.array(reflectance, dtype=np.float64, copy=True)
    holes = np.asarray(holes, dtype=bool)
    if not holes.any():
        return r
    donors = ~holes if donors is None else (np.asarray(donors, dtype=bool) & ~holes)
    if not donors.any():
        raise ValueError("every pixel is a hole; nothing to fill from")
    a_s, a_n, a_c = alphas
    h, w = holes.shape
    diag = np.hypot(h, w)
    nrm = np.asarray(normal, dtype=np.float64)
    img = np.asarray(rgb, dtype=np.float64)
    src = r.copy()
    for y, x in zip(*np.nonzero(holes)):
        y0, y1 = max(y - window, 0), min(y + window + 1, h)
        x0, x1 = max(x - window, 0), min(x + window + 1, w)
        dy, dx = np.nonzero(donors[y0:y1, x0:x1])
        if dy.size == 0:
            gy, gx = np.nonzero(donors)
            j = np.argmin((gy - y) ** 2 + (gx - x) ** 2)
            r[y, x] = src[gy[j], gx[j]]
            continue
        dy, dx = dy + y0, dx + x0
        dist = np.hypot(dy - y, dx - x) / diag
        cos = np.clip(nrm[dy, dx] @ nrm[y, x], -1.0, 1.0)
        ang = np.arccos(cos) / np.pi
        col = np.linalg.norm(img[dy, dx] - img[y, x], axis=-1)
        j = np.argmin(a_s * dist + a_n * ang + a_c * col)
        r[y, x] = src[dy[j], dx[j]]
    return r


# ---------------------------------------------------------------- weights


def visibility_edges(visibility, mask=None):
    """Pixels whose 4-neighborhood (self included) holds both V=0 and V=1.

    Pixels outside ``mask`` are ignored as neighbors.
    """
    v = np.asarray(visibility) > 0.5
    m = np.ones(v.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    lit = v & m
    dark = ~v & m
    cross = ndimage.generate_binary_structure(2, 1)
    near_lit = ndimage.binary_dilation(lit, cross)
    near_dark = ndimage.binary_dilation(dark, cross)
    return near_lit & near_dark & m


def weight_maps(shadings, visibilities, holes=None, mask=None, d_sat: float = 4.0, hole_scale: float = 0.25):
    """Confidence maps ``(W_R (H,W), W_S (N,H,W))``.

    W_S is the clamped shading times ``min(d_edge / d_sat, 1)`` with
    ``d_edge`` the chessboard distance to the nearest visibility edge.
    W_R is the max of W_S over lights, scaled by ``hole_scale`` on holes.
    """
    s = np.asarray(shadings, dtype=np.float64)
    v = np.asarray(visibilities, dtype=np.float64)
    if s.ndim == 2:
        s, v = s[None], v[None]
    if s.shape != v.shape:
        raise ValueError("shading and visibility maps are not aligned")
    w_s = np.empty_like(s)
    for i in range(s.shape[0]):
        edges = visibility_edges(v[i], mask)
        if edges.any():
            d = ndimage.distance_transform_cdt(~edges, metric="chessboard").astype(np.float64)
            factor = np.minimum(d / d_sat, 1.0)
        else:
            factor = np.ones(edges.shape)
        w_s[i] = np.clip(s[i], 0.0, 1.0) * factor
    w_r = w_s.max(axis=0)
    if holes is not None:
        w_r = np.where(np.asarray(holes, dtype=bool), hole_scale * w_r, w_r)
    return w_r, w_s


# ---------------------------------------------------------------- pipeline


def labels_for_view(source, camera: Camera, images, lights, gamma: float = 1 / 2.2, eps_s: float = 0.05,
                    k: int = 2, seed: int = 0, params: SphereTraceParams | None = None, light_ids=None,
                    geometry: GeometryMaps | None = None, extra=()) -> PseudoLabelSet:
    """Steps A to C for one camera given its images under ``lights``.

    ``extra`` lists ``(light_id, PointLight)`` pairs that only need shading
    labels (lights seen in training frames but not merged).
    """
    maps = geometry or extract_geometry_maps(source, camera, params)
    shadings, vis, cands, valid = [], [], [], []
    for img, light in zip(images, lights):
        s, v = pseudo_shading(maps, light, source, gamma, params)
        r, ok = per_light_reflectance(img, s, eps_s)
        shadings.append(s)
        vis.append(v)
        cands.append(r)
        valid.append(ok & maps.mask)
    shadings, vis = np.stack(shadings), np.stack(vis)
    merged, holes = merge_reflectance_kmeans(np.stack(cands), np.stack(valid), shadings, k, seed)
    holes &= maps.mask
    mean_img = np.mean(np.stack(images), axis=0)
    if holes.any() and (maps.mask & ~holes).any():
        merged = fill_holes(merged, holes, maps.normal, mean_img, donors=maps.mask)
    merged[~maps.mask] = 0.0
    w_r, w_s = weight_maps(shadings, vis, holes, maps.mask)
    ids = list(range(len(lights))) if light_ids is None else list(light_ids)
    extra = [(i, l) for i, l in extra if i not in ids]
    if extra:
        es, ev = zip(*(pseudo_shading(maps, l, source, gamma, params) for _, l in extra))
        _, ew = weight_maps(np.stack(es), np.stack(ev), None, maps.mask)
        shadings = np.concatenate([shadings, np.stack(es)])
        w_s = np.concatenate([w_s, ew])
        ids += [i for i, _ in extra]
    n_valid = np.stack(valid).sum(axis=0)[maps.mask]
    stats = {
        "hole_fraction": float(holes.sum() / max(maps.mask.sum(), 1)),
        "hole_pixels": int(holes.sum()),
        "hit_pixels": int(maps.mask.sum()),
        "candidate_histogram": np.bincount(n_valid, minlength=len(lights) + 1).tolist(),
    }
    return PseudoLabelSet(merged, shadings, w_r, w_s, holes, ids, maps.mask, stats)


def write_labels(labels: PseudoLabelSet, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_png16(d / "reflectance.png", labels.reflectance)
    write_png16(d / "w_r.png", labels.w_r[..., None])
    write_png16(d / "holes.png", labels.holes[..., None].astype(np.float64))
    if labels.mask is not None:
        write_png16(d / "mask.png", labels.mask[..., None].astype(np.float64))
    for lid, s, w in zip(labels.light_ids, labels.shading, labels.w_s):
        write_png16(d / f"shading_{lid}.png", s[..., None])
        write_png16(d / f"w_s_{lid}.png", w[..., None])
    (d / "stats.json").write_text(json.dumps({**labels.stats, "light_ids": list(labels.light_ids)}, indent=2))


def read_labels(directory) -> PseudoLabelSet:
    d = Path(directory)
    stats = json.loads((d / "stats.json").read_text())
    ids = stats.pop("light_ids")
    mask = read_png(d / "mask.png", 1)[..., 0] > 0.5 if (d / "mask.png").exists() else None
    return PseudoLabelSet(
        reflectance=read_png(d / "reflectance.png", 3),
        shading=np.stack([read_png(d / f"shading_{i}.png", 1)[..., 0] for i in ids]),
        w_r=read_png(d / "w_r.png", 1)[..., 0],
        w_s=np.stack([read_png(d / f"w_s_{i}.png", 1)[..., 0] for i in ids]),
        holes=read_png(d / "holes.png", 1)[..., 0] > 0.5,
        light_ids=ids,
        mask=mask,
        stats=stats,
    )


def _relight(source, camera, light, gamma, n_samples, n_importance):
    if isinstance(source, SdfScene):
        return render_ground_truth(source, camera, light, gamma).rgb
    if isinstance(source, FieldModel):
        return render_image(source, camera, light.position, n_samples=n_samples, n_importance=n_importance)["rgb"]
    raise TypeError("relighting needs a scene or a Stage 1 model")


def generate_pseudo_labels(source, manifest, output_dir=None, policy: str | None = None, n_random: int = 4,
                           seed: int = 0, eps_s: float = 0.05, k: int = 2, split: str = "train",
                           params: SphereTraceParams | None = None, n_samples: int = 64,
                           n_importance: int = 64) -> dict:
    """Labels for every camera of ``split`` in a dataset.

    ``policy`` "dataset" merges the frames the dataset holds for a camera
    (every light for grid captures); "relight" picks ``n_random`` lights
    with a seeded draw and relights the view with ``source``. The default
    follows the manifest's pairing. Returns ``{camera_index: labels}`` and
    writes ``view_XXXX`` directories when ``output_dir`` is given.
    """
    _distance(source)
    policy = policy or ("dataset" if manifest.pairing == "grid" else "relight")
    if policy not in ("dataset", "relight"):
        raise ValueError(f"unknown light policy {policy!r}")
    cams = [Camera.from_dict(c) for c in manifest.cameras]
    all_lights = [PointLight(tuple(l["position"]), l.get("intensity", 1.0)) for l in manifest.lights]
    frames = manifest.frames_in(split)
    views = sorted({f["camera_index"] for f in frames})
    if not views:
        raise ValueError(f"dataset has no {split!r} frames")
    rng = np.random.default_rng(seed)
    out = {}
    for ci in views:
        cam = cams[ci]
        if policy == "dataset":
            fs = [f for f in frames if f["camera_index"] == ci]
            ids = [f["light_index"] for f in fs]
            # one label per distinct light
            keep = sorted(set(ids), key=ids.index)
            fs = [fs[ids.index(i)] for i in keep]
            ids = keep
            images = [read_png(Path(manifest.root) / f["rgb_path"], 3) for f in fs]
        else:
            m = min(n_random, len(all_lights))
            ids = sorted(rng.choice(len(all_lights), size=m, replace=False).tolist())
            images = [_relight(source, cam, all_lights[i], manifest.gamma, n_samples, n_importance) for i in ids]
        seen = sorted({f["light_index"] for f in frames if f["camera_index"] == ci})
        labels = labels_for_view(source, cam, images, [all_lights[i] for i in ids], manifest.gamma, eps_s, k,
                                 seed, params, ids, extra=[(i, all_lights[i]) for i in seen])
        out[ci] = labels
        log.info("view %d: %d lights, hole fraction %.4f", ci, len(ids), labels.stats["hole_fraction"])
    if output_dir is not None:
        dst = Path(output_dir)
        dst.parent.mkdir(parents=True, exist_ok=True)
        stage = Path(tempfile.mkdtemp(prefix=f".{dst.name}-", dir=dst.parent))
        try:
            for ci, labels in out.items():
                write_labels(labels, stage / f"view_{ci:04d}")
            index = {"views": [int(c) for c in out], "policy": policy, "seed": seed, "eps_s": eps_s, "k": k,
                     "split": split}
            (stage / "labels.json").write_text(json.dumps(index, indent=2))
            if dst.exists():
                shutil.rmtree(dst)
            os.replace(stage, dst)
        except BaseException:
            shutil.rmtree(stage, ignore_errors=True)
            raise
    return out

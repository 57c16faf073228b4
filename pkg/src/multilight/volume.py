"""SDF volume rendering along rays and sphere tracing of the learned field."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .field import FieldModel, normalize
from .renderer import SphereTraceParams, sphere_trace

_TINY = 1e-12  # only guards 0/0 deep inside the surface


def sdf_to_weights(sdf: np.ndarray, inv_std: float):
    """Per-sample compositing weights from SDF samples along each ray.

    ``alpha_i = max((P_i - P_{i+1}) / P_i, 0)`` with ``P = logistic(s * f)``;
    the last sample closes the ray with alpha 0. Weights are
    ``alpha_i * prod_{j<i} (1 - alpha_j)``. Returns ``(weights, cache)``.
    """
    sdf = np.asarray(sdf)
    p = 1.0 / (1.0 + np.exp(-np.clip(inv_std * sdf, -60.0, 60.0)))
    num = p[:, :-1] - p[:, 1:]
    den = np.maximum(p[:, :-1], _TINY)
    raw = num / den
    alpha = np.zeros_like(sdf)
    alpha[:, :-1] = np.clip(raw, 0.0, 1.0)
    trans = np.cumprod(np.concatenate([np.ones_like(alpha[:, :1]), 1.0 - alpha[:, :-1]], axis=1), axis=1)
    weights = alpha * trans
    return weights, (sdf, inv_std, p, num, den, raw, alpha, trans)


def sdf_to_weights_backward(cache, dweights: np.ndarray):
    """Gradients of the weights w.r.t. the SDF samples and the inverse std."""
    sdf, inv_std, p, num, den, raw, alpha, trans = cache
    n = alpha.shape[1]
    # dL/dalpha_i = T_i * (g_i - U_i), U_i = sum_{k>i} g_k alpha_k prod_{i<j<k}(1 - alpha_j)
    u = np.zeros_like(alpha)
    for i in range(n - 2, -1, -1):
        u[:, i] = dweights[:, i + 1] * alpha[:, i + 1] + (1.0 - alpha[:, i + 1]) * u[:, i + 1]
    dalpha = trans * (dweights - u)
    live = (raw > 0.0) & (raw < 1.0)
    da = dalpha[:, :-1] * live
    dp = np.zeros_like(p)
    dp[:, :-1] += da * (den - num) / den**2
    dp[:, 1:] -= da / den
    dz = dp * p * (1.0 - p) * (np.abs(inv_std * sdf) < 60.0)
    return dz * inv_std, float(np.sum(dz * sdf))


def ray_sphere_bounds(origins, dirs, radius: float):
    """Entry/exit distances of rays against a centered sphere; ``hit`` is
    False for rays that miss it. Entry is clamped at 0."""
    b = np.sum(origins * dirs, axis=-1)
    c = np.sum(origins * origins, axis=-1) - radius**2
    disc = b * b - c
    hit = disc > 0
    root = np.sqrt(np.maximum(disc, 0.0))
    near = np.maximum(-b - root, 0.0)
    far = np.maximum(-b + root, 0.0)
    return near, far, hit & (far > near)


def stratified(near, far, n: int, rng: np.random.Generator | None):
    edges = np.linspace(0.0, 1.0, n + 1)
    lo, hi = edges[:-1], edges[1:]
    if rng is None:
        u = 0.5 * (lo + hi)
        u = np.broadcast_to(u, (near.shape[0], n))
    else:
        u = lo + (hi - lo) * rng.random((near.shape[0], n))
    return near[:, None] + (far - near)[:, None] * u


def importance(t: np.ndarray, weights: np.ndarray, n: int, rng: np.random.Generator | None):
    """Inverse-CDF draws from the piecewise-constant pdf over the intervals
    between consecutive samples."""
    w = weights[:, :-1] + 1e-5
    pdf = w / w.sum(axis=1, keepdims=True)
    cdf = np.concatenate([np.zeros_like(pdf[:, :1]), np.cumsum(pdf, axis=1)], axis=1)
    cdf[:, -1] = 1.0
    r = t.shape[0]
    if rng is None:
        u = np.broadcast_to((np.arange(n) + 0.5) / n, (r, n))
    else:
        u = (np.arange(n) + rng.random((r, n))) / n
    # batched searchsorted via per-row offsets
    offs = 2.0 * np.arange(r)[:, None]
    pos = np.searchsorted((cdf + offs).ravel(), (u + offs).ravel(), side="right").reshape(r, n)
    pos = pos - np.arange(r)[:, None] * cdf.shape[1]
    hi = np.clip(pos, 1, cdf.shape[1] - 1)
    lo = hi - 1
    c0, c1 = np.take_along_axis(cdf, lo, 1), np.take_along_axis(cdf, hi, 1)
    t0, t1 = np.take_along_axis(t, lo, 1), np.take_along_axis(t, hi, 1)
    frac = np.where(c1 > c0, (u - c0) / np.maximum(c1 - c0, 1e-12), 0.5)
    return t0 + frac * (t1 - t0)


def sample_rays(model: FieldModel, origins, dirs, near, far, n_samples: int = 64, n_importance: int = 64,
                rng: np.random.Generator | None = None, upsample_inv_std: float = 64.0) -> np.ndarray:
    """Stratified samples plus one round of SDF-guided importance samples,
    merged and sorted. No gradients flow through sample placement."""
    t = stratified(near, far, n_samples, rng)
    if n_importance <= 0:
        return t
    pts = origins[:, None, :] + t[..., None] * dirs[:, None, :]
    sdf = model.sdf(pts.reshape(-1, 3)).reshape(t.shape)
    w, _ = sdf_to_weights(sdf, max(model.inv_std, upsample_inv_std))
    t_imp = importance(t, w, n_importance, rng)
    return np.sort(np.concatenate([t, t_imp], axis=1), axis=1)


@dataclass
class RenderPass:
    """One differentiable render of a ray batch at fixed sample positions."""

    model: FieldModel
    t: np.ndarray
    weights: np.ndarray
    rgb: np.ndarray
    depth: np.ndarray
    normal: np.ndarray
    opacity: np.ndarray
    reflectance: np.ndarray | None = None
    shading: np.ndarray | None = None
    residual: np.ndarray | None = None
    _cache: dict | None = None

    def backward(self, grads: dict, d_rgb=None, d_reflectance=None, d_shading=None, train_geometry: bool = True,
                 train_heads=("color", "refl", "shade")) -> None:
        """Accumulate parameter gradients for upstream gradients on the
        composited outputs. ``d_shading`` is (R, 1)."""
        c = self._cache
        model = self.model
        r, n = self.weights.shape
        w = self.weights.reshape(-1, 1)
        dw = np.zeros((r, n), dtype=self.weights.dtype)
        dfeat = np.zeros_like(c["geo"].feat) if train_geometry else None

        def head(name, out, pass_cache, d_out):
            nonlocal dw
            d_samples = (w.reshape(r, n, 1) * d_out[:, None, :]).reshape(-1, out.shape[-1])
            dw += np.einsum("rnk,rk->rn", out.reshape(r, n, -1), d_out)
            mlp = getattr(model, name)
            target = grads if name in train_heads else None
            if target is None and not train_geometry:
                return
            din = mlp.backward(model.params, pass_cache, d_samples, target, need_input=train_geometry)
            if train_geometry:
                dfeat[...] += din[:, 6:6 + model.config.feat_dim]

        if d_rgb is not None:
            bg = np.asarray(model.config.background, dtype=self.rgb.dtype)
            head("color", c["color"] - bg, c["color_cache"], d_rgb)
        if d_reflectance is not None:
            head("refl", c["refl"], c["refl_cache"], d_reflectance)
        if d_shading is not None:
            head("shade", c["shade"], c["shade_cache"], d_shading)
        if not train_geometry:
            return
        dsdf, dinv = sdf_to_weights_backward(c["w_cache"], dw)
        grads["log_inv_std"] += dinv * model.inv_std
        model.geometry_backward(c["geo"], dsdf.reshape(-1), dfeat, grads)


def render_samples(model: FieldModel, origins, dirs, t, light_code, intrinsic: bool = False) -> RenderPass:
    """Evaluate the field at ``origins + t * dirs`` and composite.

    ``light_code`` is one encoded light (K,) or one per ray (R, K). Normals
    fed to the heads are the analytic SDF gradient, treated as constants.
    """
    dt = model.dtype
    r, n = t.shape
    x = (origins[:, None, :] + t[..., None] * dirs[:, None, :]).reshape(-1, 3).astype(dt)
    geo = model.geometry(x)
    nrm = normalize(model.geometry_grad_x(geo))
    view = np.repeat(dirs.astype(dt), n, axis=0)
    code = np.asarray(light_code, dtype=dt)
    code = np.broadcast_to(code, (r, code.shape[-1])) if code.ndim == 1 else code
    code = np.repeat(code, n, axis=0)
    color, color_cache = model.color_pass(x, nrm, geo.feat, view, code)
    weights, w_cache = sdf_to_weights(geo.sdf.reshape(r, n), dt.type(model.inv_std))
    w3 = weights[..., None]
    opacity = weights.sum(axis=1)
    bg = np.asarray(model.config.background, dtype=dt)
    rgb = (w3 * color.reshape(r, n, 3)).sum(axis=1) + (1.0 - opacity)[:, None] * bg
    depth = (weights * t).sum(axis=1) / np.maximum(opacity, 1e-8)
    normal = normalize((w3 * nrm.reshape(r, n, 3)).sum(axis=1))
    cache = {"geo": geo, "color": color, "color_cache": color_cache, "w_cache": w_cache}
    out = RenderPass(model, t, weights, rgb, depth, normal, opacity, _cache=cache)
    if intrinsic:
        refl, refl_cache = model.reflectance_pass(x, nrm, geo.feat)
        shade, shade_cache = model.shading_pass(x, nrm, geo.feat, code)
        out.reflectance = (w3 * refl.reshape(r, n, 3)).sum(axis=1)
        out.shading = (w3 * shade.reshape(r, n, 1)).sum(axis=1)
        out.residual = out.rgb - out.reflectance * out.shading
        cache.update(refl=refl, refl_cache=refl_cache, shade=shade, shade_cache=shade_cache)
    return out


def _render_chunks(model, origins, dirs, light_position, n_samples, n_importance, rng, chunk, intrinsic):
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    r = origins.shape[0]
    code = model.light_code(light_position)
    bg = np.asarray(model.config.background, dtype=np.float64)
    out = {
        "rgb": np.tile(bg, (r, 1)),
        "depth": np.zeros(r),
        "normal": np.zeros((r, 3)),
        "opacity": np.zeros(r),
    }
    if intrinsic:
        out.update(reflectance=np.zeros((r, 3)), shading=np.zeros((r, 1)), residual=np.tile(bg, (r, 1)))
    near, far, hit = ray_sphere_bounds(origins, dirs, model.config.bound)
    idx = np.flatnonzero(hit)
    for s in range(0, idx.size, chunk):
        sel = idx[s:s + chunk]
        t = sample_rays(model, origins[sel], dirs[sel], near[sel], far[sel], n_samples, n_importance, rng)
        rp = render_samples(model, origins[sel], dirs[sel], t, code, intrinsic)
        for k in out:
            out[k][sel] = getattr(rp, k).reshape(len(sel), -1).squeeze(-1) if out[k].ndim == 1 else getattr(rp, k)
    return out


def volume_render(model: FieldModel, origins, dirs, light_position, n_samples: int = 64, n_importance: int = 64,
                  rng: np.random.Generator | None = None, chunk: int = 2048) -> dict:
    """Render rays; returns rgb, depth, normal and accumulated opacity.
    Rays missing the scene's bounding sphere return the background."""
    return _render_chunks(model, origins, dirs, light_position, n_samples, n_importance, rng, chunk, False)


def volume_render_intrinsic(model: FieldModel, origins, dirs, light_position, n_samples: int = 64,
                            n_importance: int = 64, rng: np.random.Generator | None = None,
                            chunk: int = 2048) -> dict:
    """Like :func:`volume_render` plus reflectance, shading and the residual
    ``rgb - reflectance * shading`` composited with the same weights."""
    return _render_chunks(model, origins, dirs, light_position, n_samples, n_importance, rng, chunk, True)


def render_image(model: FieldModel, camera, light_position, intrinsic: bool = False, **kw) -> dict:
    o, d = camera.pixel_rays()
    fn = volume_render_intrinsic if intrinsic else volume_render
    out = fn(model, o.reshape(-1, 3), d.reshape(-1, 3), light_position, **kw)
    return {k: v.reshape(camera.height, camera.width, -1) for k, v in out.items()}


def trace_field_surface(model: FieldModel, origins, dirs, params: SphereTraceParams | None = None):
    """Sphere trace the learned SDF inside its bounding sphere.

    Returns ``(hit, point, normal, depth)``; normals are the normalized
    analytic field gradient.
    """
    params = params or SphereTraceParams(max_steps=256, convergence_eps=1e-4, step_scale=0.7)
    o = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    d = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    near, far, inb = ray_sphere_bounds(o, d, model.config.bound)
    hit = np.zeros(o.shape[0], dtype=bool)
    t = np.zeros(o.shape[0])
    pts = np.zeros_like(o)
    idx = np.flatnonzero(inb)
    if idx.size:
        h, ti, pi = sphere_trace(model.sdf, o[idx], d[idx], params, t_min=near[idx], t_max=far[idx])
        hit[idx], t[idx], pts[idx] = h, ti, pi
    normal = np.zeros_like(o)
    hidx = np.flatnonzero(hit)
    if hidx.size:
        normal[hidx] = model.geometry_forward(pts[hidx]).normal
    if np.ndim(origins) == 1:
        return bool(hit[0]), pts[0], normal[0], float(t[0])
    return hit, pts, normal, t

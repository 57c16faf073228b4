"""Trainable neural field with a hand-written forward/backward pass.

Layout: a multiresolution hash grid feeds a softplus geometry MLP that
emits an SDF value and a feature vector. Three sigmoid heads sit on top:

* color       (x, n, feat, view dir, light code) -> RGB
* reflectance (x, n, feat)                       -> RGB
* shading     (x, n, feat, light code)           -> scalar

Every module keeps an explicit cache from its forward pass so the caller
can push upstream gradients back into a flat ``{name: array}`` gradient
store. Parameters live in an ordered dict; checkpoint order is insertion
order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numba import njit

_PRIMES = (np.uint64(1), np.uint64(2654435761), np.uint64(805459861))

MAGIC = b"MLIF"
CHECKPOINT_VERSION = 1


@dataclass
class FieldConfig:
    levels: int = 8
    features_per_level: int = 2
    base_resolution: int = 16
    growth: float = 1.4
    table_size_log2: int = 15
    bound: float = 1.0
    geo_hidden: tuple = (64, 64)
    feat_dim: int = 16
    head_hidden: tuple = (64, 64, 64)
    softplus_beta: float = 100.0
    init_radius: float | None = None
    inv_std_init: float = 20.0
    scene_center: tuple = (0.0, 0.0, 0.0)
    background: tuple = (0.0, 0.0, 0.0)
    sh_degree: int = 4
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        self.geo_hidden = tuple(self.geo_hidden)
        self.head_hidden = tuple(self.head_hidden)
        self.scene_center = tuple(self.scene_center)
        self.background = tuple(self.background)
        if self.growth <= 1:
            raise ValueError("hash growth factor must be > 1")

    @property
    def light_code_dim(self) -> int:
        return (self.sh_degree + 1) ** 2 + 1


# ---------------------------------------------------------------- encodings


class HashGridEncoding:
    """Multiresolution hash grid over the cube [-bound, bound]^3.

    Levels whose vertex count fits in the table are indexed densely;
    finer levels use the spatial XOR hash. Queries outside the cube are
    clamped onto it (and get zero spatial gradient there).
    """

    def __init__(self, levels=8, features_per_level=2, base_resolution=16, growth=1.4, table_size_log2=15,
                 bound=1.0):
        self.levels = levels
        self.features_per_level = features_per_level
        self.table_size = 2**table_size_log2
        self.bound = float(bound)
        self.resolutions = [int(np.floor(base_resolution * growth**l)) for l in range(levels)]
        self.dense = [(r + 1) ** 3 <= self.table_size for r in self.resolutions]

    @property
    def output_dim(self) -> int:
        return self.levels * self.features_per_level

    def table_shape(self) -> tuple:
        return (self.levels, self.table_size, self.features_per_level)

    def locate(self, x: np.ndarray):
        """Per level: vertex indices (P, 8), corner weights (P, 8) and the
        per-axis linear weights (P, 3, 2). Weights sum to one per level."""
        x = np.asarray(x)
        u = (x + self.bound) / (2 * self.bound)
        inside = np.all((u >= 0) & (u <= 1), axis=-1)
        u = np.clip(u, 0.0, 1.0)
        mask = np.uint64(self.table_size - 1)
        out = []
        for l, r in enumerate(self.resolutions):
            pos = u * r
            base = np.minimum(pos.astype(np.int64), r - 1)  # u >= 0, so truncation is floor
            frac = pos - base
            lin = np.stack([1.0 - frac, frac], axis=-1)  # (P, 3, 2)
            w = (lin[:, 0, :, None, None] * lin[:, 1, None, :, None] * lin[:, 2, None, None, :]).reshape(-1, 8)
            i = base[:, :, None] + np.array([0, 1])  # (P, 3, 2)
            if self.dense[l]:
                s = r + 1
                idx = i[:, 0, :, None, None] + s * (i[:, 1, None, :, None] + s * i[:, 2, None, None, :])
            else:
                h = i.astype(np.uint64) * np.array(_PRIMES)[None, :, None]
                idx = (h[:, 0, :, None, None] ^ h[:, 1, None, :, None] ^ h[:, 2, None, None, :]) & mask
                idx = idx.astype(np.int64)
            out.append((idx.reshape(-1, 8), w, lin))
        return out, inside

    def _unit(self, x: np.ndarray):
        u = (np.asarray(x) + self.bound) / (2 * self.bound)
        inside = np.all((u >= 0) & (u <= 1), axis=-1)
        return np.ascontiguousarray(np.clip(u, 0.0, 1.0)), inside

    def forward(self, table: np.ndarray, x: np.ndarray):
        """Features (P, levels * F) and the cache needed by both backwards."""
        u, inside = self._unit(x)
        out = np.empty((u.shape[0], self.output_dim), dtype=table.dtype)
        _grid_forward(u, table, self._res, self._dense, out)
        return out, (u, inside)

    def backward_table(self, cache, grad: np.ndarray, out: np.ndarray) -> None:
        """Accumulate d(loss)/d(table) into ``out`` given d(loss)/d(features)."""
        u, _ = cache
        _grid_backward_table(u, np.ascontiguousarray(grad, dtype=out.dtype), self._res, self._dense, out)

    def backward_x(self, table: np.ndarray, cache, grad: np.ndarray) -> np.ndarray:
        """d(loss)/d(x) given d(loss)/d(features)."""
        u, inside = cache
        du = np.zeros((u.shape[0], 3), dtype=table.dtype)
        _grid_backward_x(u, table, np.ascontiguousarray(grad, dtype=table.dtype), self._res, self._dense, du)
        return du * (inside[:, None] / (2 * self.bound))

    @property
    def _res(self):
        return np.asarray(self.resolutions, dtype=np.int64)

    @property
    def _dense(self):
        return np.asarray(self.dense, dtype=np.bool_)


@njit(cache=True)
def _vertex(ix, iy, iz, r, dense, mask):
    if dense:
        s = r + 1
        return ix + s * (iy + s * iz)
    h = np.uint64(ix) ^ (np.uint64(iy) * np.uint64(2654435761)) ^ (np.uint64(iz) * np.uint64(805459861))
    return np.int64(h & np.uint64(mask))


@njit(cache=True)
def _cell(u, r):
    pos = u * r
    b = min(np.int64(pos), r - 1)
    return b, pos - b


@njit(cache=True)
def _grid_forward(u, table, res, dense, out):
    L, T, F = table.shape
    for p in range(u.shape[0]):
        for l in range(L):
            r = res[l]
            bx, fx = _cell(u[p, 0], r)
            by, fy = _cell(u[p, 1], r)
            bz, fz = _cell(u[p, 2], r)
            for f in range(F):
                out[p, l * F + f] = 0.0
            for c in range(8):
                cx, cy, cz = c >> 2, (c >> 1) & 1, c & 1
                w = (fx if cx else 1.0 - fx) * (fy if cy else 1.0 - fy) * (fz if cz else 1.0 - fz)
                idx = _vertex(bx + cx, by + cy, bz + cz, r, dense[l], T - 1)
                for f in range(F):
                    out[p, l * F + f] += w * table[l, idx, f]


@njit(cache=True)
def _grid_backward_table(u, grad, res, dense, out):
    L, T, F = out.shape
    for p in range(u.shape[0]):
        for l in range(L):
            r = res[l]
            bx, fx = _cell(u[p, 0], r)
            by, fy = _cell(u[p, 1], r)
            bz, fz = _cell(u[p, 2], r)
            for c in range(8):
                cx, cy, cz = c >> 2, (c >> 1) & 1, c & 1
                w = (fx if cx else 1.0 - fx) * (fy if cy else 1.0 - fy) * (fz if cz else 1.0 - fz)
                idx = _vertex(bx + cx, by + cy, bz + cz, r, dense[l], T - 1)
                for f in range(F):
                    out[l, idx, f] += w * grad[p, l * F + f]


@njit(cache=True)
def _grid_backward_x(u, table, grad, res, dense, du):
    L, T, F = table.shape
    for p in range(u.shape[0]):
        for l in range(L):
            r = res[l]
            bx, fx = _cell(u[p, 0], r)
            by, fy = _cell(u[p, 1], r)
            bz, fz = _cell(u[p, 2], r)
            for c in range(8):
                cx, cy, cz = c >> 2, (c >> 1) & 1, c & 1
                idx = _vertex(bx + cx, by + cy, bz + cz, r, dense[l], T - 1)
                v = 0.0
                for f in range(F):
                    v += table[l, idx, f] * grad[p, l * F + f]
                wx = fx if cx else 1.0 - fx
                wy = fy if cy else 1.0 - fy
                wz = fz if cz else 1.0 - fz
                sx = 1.0 if cx else -1.0
                sy = 1.0 if cy else -1.0
                sz = 1.0 if cz else -1.0
                du[p, 0] += r * v * sx * wy * wz
                du[p, 1] += r * v * wx * sy * wz
                du[p, 2] += r * v * wx * wy * sz


def _sh_basis(u: np.ndarray, degree: int) -> np.ndarray:
    x, y, z = u[..., 0], u[..., 1], u[..., 2]
    xx, yy, zz = x * x, y * y, z * z
    out = [np.full_like(x, 0.28209479177387814)]
    if degree >= 1:
        out += [-0.48860251190291987 * y, 0.48860251190291987 * z, -0.48860251190291987 * x]
    if degree >= 2:
        out += [
            1.0925484305920792 * x * y,
            -1.0925484305920792 * y * z,
            0.94617469575755997 * zz - 0.31539156525251999,
            -1.0925484305920792 * x * z,
            0.54627421529603959 * (xx - yy),
        ]
    if degree >= 3:
        out += [
            0.59004358992664352 * y * (-3.0 * xx + yy),
            2.8906114426405538 * x * y * z,
            0.45704579946446572 * y * (1.0 - 5.0 * zz),
            0.3731763325901154 * z * (5.0 * zz - 3.0),
            0.45704579946446572 * x * (1.0 - 5.0 * zz),
            1.4453057213202769 * z * (xx - yy),
            0.59004358992664352 * x * (-xx + 3.0 * yy),
        ]
    if degree >= 4:
        out += [
            2.5033429417967046 * x * y * (xx - yy),
            1.7701307697799304 * y * z * (-3.0 * xx + yy),
            0.94617469575756008 * x * y * (7.0 * zz - 1.0),
            0.66904654355728921 * y * z * (7.0 * zz - 3.0),
            0.10578554691520431 * (35.0 * zz * zz - 30.0 * zz + 3.0),
            0.66904654355728921 * x * z * (7.0 * zz - 3.0),
            0.47308734787878004 * (xx - yy) * (7.0 * zz - 1.0),
            1.7701307697799304 * x * z * (-xx + 3.0 * yy),
            0.62583573544917614 * (xx * (xx - 3.0 * yy) - yy * (3.0 * xx - yy)),
        ]
    if degree > 4:
        raise ValueError("spherical harmonics implemented up to degree 4")
    return np.stack(out, axis=-1)


def encode_spherical(light_position, scene_center=(0.0, 0.0, 0.0), degree: int = 4) -> np.ndarray:
    """Real SH of the light direction seen from the scene center, plus the
    log of the light distance. Output length (degree + 1)^2 + 1."""
    offset = np.asarray(light_position, dtype=np.float64) - np.asarray(scene_center, dtype=np.float64)
    dist = np.linalg.norm(offset, axis=-1, keepdims=True)
    if np.any(dist == 0):
        raise ValueError("light position coincides with the scene center")
    return np.concatenate([_sh_basis(offset / dist, degree), np.log(dist)], axis=-1)


# ---------------------------------------------------------------- MLPs


def _softplus(z, beta):
    return np.maximum(z, 0) + np.log1p(np.exp(-np.abs(beta * z))) / beta


def _softplus_grad(z, beta):
    return 1.0 / (1.0 + np.exp(-np.clip(beta * z, -30.0, 30.0)))


def _sigmoid(z):
    return 0.5 + 0.5 * np.tanh(0.5 * z)


class Mlp:
    """Dense stack; hidden activation 'softplus' or 'relu', output
    'linear' or 'sigmoid'. Weights are (in, out)."""

    def __init__(self, name: str, widths: list, hidden: str, output: str, beta: float = 100.0):
        self.name = name
        self.widths = list(widths)
        self.hidden = hidden
        self.output = output
        self.beta = beta

    def param_names(self):
        for i in range(len(self.widths) - 1):
            yield f"{self.name}.w{i}"
            yield f"{self.name}.b{i}"

    def param_shapes(self):
        for i in range(len(self.widths) - 1):
            yield (self.widths[i], self.widths[i + 1])
            yield (self.widths[i + 1],)

    def forward(self, params: dict, x: np.ndarray):
        n = len(self.widths) - 1
        inputs, pre = [], []
        h = x
        for i in range(n):
            inputs.append(h)
            z = h @ params[f"{self.name}.w{i}"] + params[f"{self.name}.b{i}"]
            pre.append(z)
            if i < n - 1:
                h = _softplus(z, z.dtype.type(self.beta)) if self.hidden == "softplus" else np.maximum(z, 0)
            else:
                h = _sigmoid(z) if self.output == "sigmoid" else z
        return h, (inputs, pre, h)

    def backward(self, params: dict, cache, dout: np.ndarray, grads: dict | None, need_input: bool = True):
        """Push ``dout`` back; accumulate weight grads into ``grads`` (skip
        when None) and return d/d(input) when ``need_input``."""
        inputs, pre, out = cache
        n = len(self.widths) - 1
        g = dout * out * (1.0 - out) if self.output == "sigmoid" else dout
        for i in reversed(range(n)):
            if grads is not None:
                grads[f"{self.name}.w{i}"] += inputs[i].T @ g
                grads[f"{self.name}.b{i}"] += g.sum(axis=0)
            if i == 0 and not need_input:
                return None
            g = g @ params[f"{self.name}.w{i}"].T
            if i > 0:
                z = pre[i - 1]
                if self.hidden == "softplus":
                    g = g * _softplus_grad(z, z.dtype.type(self.beta))
                else:
                    g = g * (z > 0)
        return g


# ---------------------------------------------------------------- model


@dataclass
class FieldOutput:
    sdf: np.ndarray
    feat: np.ndarray
    normal: np.ndarray


@dataclass
class GeometryPass:
    x: np.ndarray
    sdf: np.ndarray
    feat: np.ndarray
    hash_cache: tuple = field(repr=False)
    mlp_cache: tuple = field(repr=False)


GEOMETRY_PREFIXES = ("hash.", "geo.", "log_inv_std")


class FieldModel:
    def __init__(self, config: FieldConfig | None = None, init: bool = True):
        self.config = cfg = config or FieldConfig()
        self.dtype = np.dtype(cfg.dtype)
        self.grid = HashGridEncoding(cfg.levels, cfg.features_per_level, cfg.base_resolution, cfg.growth,
                                     cfg.table_size_log2, cfg.bound)
        enc = self.grid.output_dim
        lc = cfg.light_code_dim
        self.geo = Mlp("geo", [3 + enc, *cfg.geo_hidden, 1 + cfg.feat_dim], "softplus", "linear",
                       cfg.softplus_beta)
        base = 3 + 3 + cfg.feat_dim
        self.color = Mlp("color", [base + 3 + lc, *cfg.head_hidden, 3], "relu", "sigmoid")
        self.refl = Mlp("refl", [base, *cfg.head_hidden, 3], "relu", "sigmoid")
        self.shade = Mlp("shade", [base + lc, *cfg.head_hidden, 1], "relu", "sigmoid")
        self.params: dict[str, np.ndarray] = {}
        self.params["hash.table"] = np.zeros(self.grid.table_shape(), dtype=self.dtype)
        for mlp in (self.geo, self.color, self.refl, self.shade):
            for name, shape in zip(mlp.param_names(), mlp.param_shapes()):
                self.params[name] = np.zeros(shape, dtype=self.dtype)
        self.params["log_inv_std"] = np.zeros((), dtype=self.dtype)
        if init:
            self.initialize(cfg.seed)

    # -- parameters

    def initialize(self, seed: int) -> None:
        """Hash table near zero, geometry MLP set up so sdf(x) ~ |x| - r0,
        heads with He-normal weights."""
        cfg = self.config
        rng = np.random.default_rng(seed)
        p = self.params
        p["hash.table"][...] = rng.uniform(-1e-4, 1e-4, p["hash.table"].shape)
        r0 = cfg.init_radius if cfg.init_radius is not None else 0.5 * cfg.bound
        n = len(self.geo.widths) - 1
        for i in range(n):
            w = p[f"geo.w{i}"]
            fan_in, fan_out = w.shape
            if i == n - 1:
                w[...] = rng.normal(0.0, 1e-2, w.shape)
                w[:, 0] = rng.normal(np.sqrt(np.pi) / np.sqrt(fan_in), 1e-4, fan_in)
                p[f"geo.b{i}"][...] = 0.0
                p[f"geo.b{i}"][0] = -r0
            else:
                w[...] = rng.normal(0.0, np.sqrt(2.0) / np.sqrt(fan_out), w.shape)
                if i == 0:
                    w[3:, :] = 0.0  # hash features start switched off
                p[f"geo.b{i}"][...] = 0.0
        for mlp in (self.color, self.refl, self.shade):
            for i in range(len(mlp.widths) - 1):
                w = p[f"{mlp.name}.w{i}"]
                w[...] = rng.normal(0.0, np.sqrt(2.0 / w.shape[0]), w.shape)
                p[f"{mlp.name}.b{i}"][...] = 0.0
        p["log_inv_std"][...] = np.log(cfg.inv_std_init)

    def zero_grads(self) -> dict:
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    def param_count(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def astype(self, dtype) -> "FieldModel":
        cfg = FieldConfig(**{**asdict(self.config), "dtype": np.dtype(dtype).name})
        other = FieldModel(cfg, init=False)
        for k, v in self.params.items():
            other.params[k] = v.astype(dtype)
        return other

    def copy(self) -> "FieldModel":
        other = FieldModel(self.config, init=False)
        other.params = {k: v.copy() for k, v in self.params.items()}
        return other

    @property
    def inv_std(self) -> float:
        return float(np.exp(self.params["log_inv_std"]))

    def light_code(self, light_position) -> np.ndarray:
        return encode_spherical(light_position, self.config.scene_center, self.config.sh_degree).astype(self.dtype)

    # -- geometry

    def geometry(self, x: np.ndarray) -> GeometryPass:
        x = np.asarray(x, dtype=self.dtype)
        h, hcache = self.grid.forward(self.params["hash.table"], x)
        out, mcache = self.geo.forward(self.params, np.concatenate([x, h], axis=-1))
        return GeometryPass(x, out[:, 0], out[:, 1:], hcache, mcache)

    def sdf(self, x: np.ndarray) -> np.ndarray:
        """Distance oracle view of the field (float64 out, for tracers)."""
        x = np.asarray(x)
        return self.geometry(x.reshape(-1, 3)).sdf.astype(np.float64).reshape(x.shape[:-1])

    def geometry_grad_x(self, g: GeometryPass) -> np.ndarray:
        """Analytic d(sdf)/dx at the cached points."""
        dout = np.zeros((g.x.shape[0], 1 + self.config.feat_dim), dtype=self.dtype)
        dout[:, 0] = 1.0
        din = self.geo.backward(self.params, g.mlp_cache, dout, None)
        return din[:, :3] + self.grid.backward_x(self.params["hash.table"], g.hash_cache, din[:, 3:])

    def geometry_backward(self, g: GeometryPass, dsdf: np.ndarray, dfeat: np.ndarray | None, grads: dict) -> None:
        dout = np.zeros((g.x.shape[0], 1 + self.config.feat_dim), dtype=self.dtype)
        dout[:, 0] = dsdf
        if dfeat is not None:
            dout[:, 1:] = dfeat
        din = self.geo.backward(self.params, g.mlp_cache, dout, grads)
        self.grid.backward_table(g.hash_cache, din[:, 3:], grads["hash.table"])

    def geometry_forward(self, x: np.ndarray) -> FieldOutput:
        g = self.geometry(np.atleast_2d(x))
        return FieldOutput(g.sdf, g.feat, normalize(self.geometry_grad_x(g)))

    # -- heads; inputs are (P, k) arrays, light codes already encoded

    def color_pass(self, x, n, feat, d, code):
        return self.color.forward(self.params, np.concatenate([x, n, feat, d, code], axis=-1).astype(self.dtype))

    def reflectance_pass(self, x, n, feat):
        return self.refl.forward(self.params, np.concatenate([x, n, feat], axis=-1).astype(self.dtype))

    def shading_pass(self, x, n, feat, code):
        return self.shade.forward(self.params, np.concatenate([x, n, feat, code], axis=-1).astype(self.dtype))

    @staticmethod
    def feat_slice(cfg: FieldConfig) -> slice:
        return slice(6, 6 + cfg.feat_dim)


def normalize(v: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    return v / np.maximum(np.linalg.norm(v, axis=-1, keepdims=True), eps)


def _broadcast_code(code, n):
    code = np.asarray(code)
    return np.broadcast_to(code, (n, code.shape[-1])) if code.ndim == 1 else code


def color_forward(model: FieldModel, x, n, feat, d, light_position) -> np.ndarray:
    x = np.atleast_2d(x)
    code = _broadcast_code(model.light_code(light_position), x.shape[0])
    return model.color_pass(x, np.atleast_2d(n), np.atleast_2d(feat), np.atleast_2d(d), code)[0]


def reflectance_forward(model: FieldModel, x, n, feat) -> np.ndarray:
    return model.reflectance_pass(np.atleast_2d(x), np.atleast_2d(n), np.atleast_2d(feat))[0]


def shading_forward(model: FieldModel, x, n, feat, light_position) -> np.ndarray:
    x = np.atleast_2d(x)
    code = _broadcast_code(model.light_code(light_position), x.shape[0])
    return model.shading_pass(x, np.atleast_2d(n), np.atleast_2d(feat), code)[0]


def geometry_forward(model: FieldModel, x) -> FieldOutput:
    return model.geometry_forward(x)


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(model: FieldModel, path, extra: dict | None = None) -> None:
    """Little-endian: magic, u32 version, u32 header length, JSON header,
    then every parameter as float32 in declaration order."""
    header = {
        "config": asdict(model.config),
        "params": [[k, list(v.shape)] for k, v in model.params.items()],
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for v in model.params.values():
            fh.write(np.ascontiguousarray(v, dtype="<f4").tobytes())
    tmp.replace(path)


def load_checkpoint(path, dtype: str | None = None) -> tuple[FieldModel, dict]:
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ValueError(f"{path} is not a field checkpoint")
        version, n = struct.unpack("<II", fh.read(8))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        header = json.loads(fh.read(n))
        cfg = FieldConfig(**header["config"])
        if dtype is not None:
            cfg.dtype = dtype
        model = FieldModel(cfg, init=False)
        for name, shape in header["params"]:
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(fh.read(4 * count), dtype="<f4").reshape(shape)
            model.params[name] = arr.astype(model.dtype)
    return model, header.get("extra", {})

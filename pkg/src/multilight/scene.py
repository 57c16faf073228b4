"""Analytic signed-distance scenes, pinhole cameras and point lights.

Conventions: right-handed world frame, the camera looks down its local -z
axis with +x right and +y up; pixel (u, v) has its center at (u + 0.5, v + 0.5)
and v grows downward.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

KINDS = ("sphere", "box", "plane", "capped-cylinder")
_SIZE_COUNT = {"sphere": 1, "box": 3, "plane": 0, "capped-cylinder": 2}


def _check_rigid(m: np.ndarray, what: str) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (4, 4):
        raise ValueError(f"{what} must be 4x4, got {m.shape}")
    rot = m[:3, :3]
    if np.abs(rot.T @ rot - np.eye(3)).max() >= 1e-6:
        raise ValueError(f"{what} rotation block is not orthonormal")
    if not np.allclose(m[3], [0.0, 0.0, 0.0, 1.0]):
        raise ValueError(f"{what} bottom row must be (0, 0, 0, 1)")
    return m


def translation(offset: Sequence[float]) -> np.ndarray:
    m = np.eye(4)
    m[:3, 3] = offset
    return m


@dataclass(frozen=True)
class Primitive:
    """One analytic shape.

    ``size`` is (radius,) for a sphere, half-extents (hx, hy, hz) for a box,
    (radius, half_height) for a capped cylinder whose axis is local z, and
    empty for a plane (the plane is local z = 0 with +z outward).
    """

    kind: str
    pose: np.ndarray = field(default_factory=lambda: np.eye(4))
    size: tuple = ()
    albedo: tuple = (0.5, 0.5, 0.5)
    specular_strength: float = 0.0
    specular_exponent: float = 32.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        pose = _check_rigid(self.pose, "pose")
        pose.setflags(write=False)
        object.__setattr__(self, "pose", pose)
        size = tuple(float(s) for s in self.size)
        if len(size) != _SIZE_COUNT[self.kind]:
            raise ValueError(f"{self.kind} expects {_SIZE_COUNT[self.kind]} size parameters, got {len(size)}")
        if any(s <= 0 for s in size):
            raise ValueError("size parameters must be > 0")
        object.__setattr__(self, "size", size)
        albedo = tuple(float(a) for a in self.albedo)
        if len(albedo) != 3 or any(not 0.0 <= a <= 1.0 for a in albedo):
            raise ValueError("albedo must be three values in [0, 1]")
        object.__setattr__(self, "albedo", albedo)
        if self.specular_strength < 0:
            raise ValueError("specular_strength must be >= 0")
        if self.specular_exponent < 1:
            raise ValueError("specular_exponent must be >= 1")

    def sdf(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        rot, t = self.pose[:3, :3], self.pose[:3, 3]
        q = (p - t) @ rot  # world -> local, rot is orthonormal
        if self.kind == "sphere":
            return np.linalg.norm(q, axis=-1) - self.size[0]
        if self.kind == "plane":
            return q[..., 2]
        if self.kind == "box":
            d = np.abs(q) - np.asarray(self.size)
            outside = np.linalg.norm(np.maximum(d, 0.0), axis=-1)
            inside = np.minimum(d.max(axis=-1), 0.0)
            return outside + inside
        radius, half_height = self.size
        d = np.stack([np.linalg.norm(q[..., :2], axis=-1) - radius, np.abs(q[..., 2]) - half_height], axis=-1)
        return np.minimum(d.max(axis=-1), 0.0) + np.linalg.norm(np.maximum(d, 0.0), axis=-1)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "pose": [float(v) for v in self.pose.reshape(-1)],
            "size": list(self.size),
            "albedo": list(self.albedo),
            "specular_strength": float(self.specular_strength),
            "specular_exponent": float(self.specular_exponent),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Primitive":
        return cls(
            kind=d["kind"],
            pose=np.asarray(d["pose"], dtype=np.float64).reshape(4, 4),
            size=tuple(d.get("size", ())),
            albedo=tuple(d["albedo"]),
            specular_strength=float(d.get("specular_strength", 0.0)),
            specular_exponent=float(d.get("specular_exponent", 32.0)),
        )


@dataclass(frozen=True)
class SdfScene:
    primitives: tuple
    ambient_level: float = 0.02
    background_color: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        prims = tuple(self.primitives)
        if not prims:
            raise ValueError("scene needs at least one primitive")
        object.__setattr__(self, "primitives", prims)
        if self.ambient_level < 0:
            raise ValueError("ambient_level must be >= 0")
        bg = tuple(float(c) for c in self.background_color)
        if len(bg) != 3:
            raise ValueError("background_color must be RGB")
        object.__setattr__(self, "background_color", bg)

    def distance(self, points: np.ndarray) -> np.ndarray:
        """Scene SDF only (no id); the distance oracle used by tracers."""
        return scene_sdf(self, points)[0]

    def to_dict(self) -> dict:
        return {
            "primitives": [p.to_dict() for p in self.primitives],
            "ambient_level": float(self.ambient_level),
            "background_color": list(self.background_color),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SdfScene":
        return cls(
            primitives=tuple(Primitive.from_dict(p) for p in d["primitives"]),
            ambient_level=float(d.get("ambient_level", 0.02)),
            background_color=tuple(d.get("background_color", (0.0, 0.0, 0.0))),
        )

    def with_lambertian(self) -> "SdfScene":
        """Copy with every specular term and the ambient level set to zero."""
        prims = tuple(
            Primitive(p.kind, p.pose, p.size, p.albedo, 0.0, p.specular_exponent) for p in self.primitives
        )
        return SdfScene(prims, 0.0, self.background_color)


def save_scene(scene: SdfScene, path) -> None:
    Path(path).write_text(json.dumps(scene.to_dict(), indent=2))


def load_scene(path) -> SdfScene:
    return SdfScene.from_dict(json.loads(Path(path).read_text()))


def scene_sdf(scene: SdfScene, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Signed distance and nearest-primitive index for one or many points.

    Accepts a single 3-vector (returns scalars) or an (..., 3) array.
    Ties go to the lowest primitive index.
    """
    p = np.asarray(points, dtype=np.float64)
    dists = np.stack([prim.sdf(p) for prim in scene.primitives], axis=0)
    ids = np.argmin(dists, axis=0)
    d = np.take_along_axis(dists, ids[None], axis=0)[0]
    if p.ndim == 1:
        return float(d), int(ids)
    return d, ids


def scene_albedo(scene: SdfScene, points: np.ndarray) -> np.ndarray:
    """Albedo of the nearest primitive. Far from any surface this still
    returns the nearest primitive's albedo."""
    _, ids = scene_sdf(scene, points)
    table = np.array([prim.albedo for prim in scene.primitives])
    return table[ids]


def scene_specular(scene: SdfScene, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    _, ids = scene_sdf(scene, points)
    strength = np.array([prim.specular_strength for prim in scene.primitives])
    exponent = np.array([prim.specular_exponent for prim in scene.primitives])
    return strength[ids], exponent[ids]


@dataclass(frozen=True)
class PointLight:
    position: tuple
    intensity: float = 1.0

    def __post_init__(self):
        pos = tuple(float(v) for v in self.position)
        if len(pos) != 3:
            raise ValueError("light position must be a 3-vector")
        object.__setattr__(self, "position", pos)
        if not self.intensity > 0:
            raise ValueError("light intensity must be > 0")

    @property
    def pos(self) -> np.ndarray:
        return np.asarray(self.position)


@dataclass(frozen=True)
class Camera:
    camera_to_world: np.ndarray
    focal: float
    principal_point: tuple
    width: int
    height: int

    def __post_init__(self):
        c2w = _check_rigid(self.camera_to_world, "camera_to_world")
        c2w.setflags(write=False)
        object.__setattr__(self, "camera_to_world", c2w)
        if self.width < 8 or self.height < 8:
            raise ValueError("camera resolution must be at least 8x8")
        if not self.focal > 0:
            raise ValueError("focal length must be > 0")
        object.__setattr__(self, "principal_point", tuple(float(c) for c in self.principal_point))

    @property
    def origin(self) -> np.ndarray:
        return self.camera_to_world[:3, 3].copy()

    def pixel_rays(self, offset=(0.0, 0.0)) -> tuple[np.ndarray, np.ndarray]:
        """Rays for every pixel, shaped (H, W, 3)."""
        v, u = np.meshgrid(np.arange(self.height), np.arange(self.width), indexing="ij")
        return self.rays_for(u, v, offset)

    def rays_for(self, u, v, offset=(0.0, 0.0)) -> tuple[np.ndarray, np.ndarray]:
        """Vectorized pinhole rays for integer pixel arrays ``u``, ``v``."""
        u = np.asarray(u)
        v = np.asarray(v)
        cx, cy = self.principal_point
        x = (u + 0.5 + offset[0] - cx) / self.focal
        y = -(v + 0.5 + offset[1] - cy) / self.focal
        d_cam = np.stack([x, y, -np.ones_like(x, dtype=np.float64)], axis=-1)
        d = d_cam @ self.camera_to_world[:3, :3].T
        d /= np.linalg.norm(d, axis=-1, keepdims=True)
        o = np.broadcast_to(self.camera_to_world[:3, 3], d.shape).copy()
        return o, d

    def project(self, points: np.ndarray) -> np.ndarray:
        """World points -> continuous pixel coordinates (u, v) in the
        pixel-center-at-half convention used by :func:`camera_ray`."""
        p = np.asarray(points, dtype=np.float64)
        rot, t = self.camera_to_world[:3, :3], self.camera_to_world[:3, 3]
        q = (p - t) @ rot
        cx, cy = self.principal_point
        u = self.focal * q[..., 0] / -q[..., 2] + cx - 0.5
        v = -self.focal * q[..., 1] / -q[..., 2] + cy - 0.5
        return np.stack([u, v], axis=-1)

    def to_dict(self) -> dict:
        return {
            "camera_to_world": [float(x) for x in self.camera_to_world.reshape(-1)],
            "focal": float(self.focal),
            "principal_point": list(self.principal_point),
            "width": int(self.width),
            "height": int(self.height),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(
            np.asarray(d["camera_to_world"], dtype=np.float64).reshape(4, 4),
            float(d["focal"]),
            tuple(d["principal_point"]),
            int(d["width"]),
            int(d["height"]),
        )


def camera_ray(camera: Camera, u: int, v: int, offset=(0.0, 0.0)) -> tuple[np.ndarray, np.ndarray]:
    if not (0 <= u < camera.width and 0 <= v < camera.height):
        raise IndexError(f"pixel ({u}, {v}) outside {camera.width}x{camera.height} image")
    o, d = camera.rays_for(np.array(u), np.array(v), offset)
    return o, d


def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)) -> np.ndarray:
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(forward, np.array([0.0, 1.0, 0.0]))
    right /= np.linalg.norm(right)
    true_up = np.cross(right, forward)
    m = np.eye(4)
    m[:3, 0] = right
    m[:3, 1] = true_up
    m[:3, 2] = -forward
    m[:3, 3] = eye
    return m


def hemisphere_points(n: int, radius: float, rng: np.random.Generator, min_elevation=np.radians(15.0),
                      max_elevation=np.radians(75.0)) -> np.ndarray:
    """Uniformly random points on a band of the upper hemisphere."""
    az = rng.uniform(0.0, 2 * np.pi, n)
    z = rng.uniform(np.sin(min_elevation), np.sin(max_elevation), n)
    r = np.sqrt(1 - z**2)
    return radius * np.stack([r * np.cos(az), r * np.sin(az), z], axis=-1)


def orbit_cameras(n: int, radius: float = 3.0, resolution: int = 64, fov_deg: float = 40.0,
                  seed: int = 0, min_elevation_deg: float = 20.0, max_elevation_deg: float = 70.0) -> list:
    """Cameras on a Fibonacci spiral over a band of the upper hemisphere,
    all looking at the origin. ``seed`` rotates the spiral so disjoint
    seeds give disjoint (held-out) poses."""
    rng = np.random.default_rng(seed)
    phase = rng.uniform(0, 2 * np.pi)
    golden = np.pi * (3.0 - np.sqrt(5.0))
    lo, hi = np.sin(np.radians(min_elevation_deg)), np.sin(np.radians(max_elevation_deg))
    focal = 0.5 * resolution / np.tan(np.radians(fov_deg) / 2)
    cams = []
    for i in range(n):
        z = lo + (hi - lo) * (i + 0.5) / n
        r = np.sqrt(1 - z * z)
        az = phase + golden * i
        eye = radius * np.array([r * np.cos(az), r * np.sin(az), z])
        cams.append(Camera(look_at(eye), focal, (resolution / 2, resolution / 2), resolution, resolution))
    return cams


def reference_scene(lambertian: bool = False) -> SdfScene:
    """Desk-scale scene used by the examples and acceptance runs: a red
    sphere and a blue box standing on a gray disc, all inside the unit ball."""
    floor = Primitive("capped-cylinder", translation([0, 0, -0.35]), (0.8, 0.05), (0.7, 0.7, 0.6), 0.1, 16.0)
    ball = Primitive("sphere", translation([0.15, 0.15, -0.02]), (0.28,), (0.8, 0.2, 0.2), 0.4, 48.0)
    block = Primitive("box", translation([-0.3, -0.2, -0.15]), (0.14, 0.14, 0.15), (0.2, 0.3, 0.8), 0.2, 24.0)
    scene = SdfScene((floor, ball, block), ambient_level=0.02, background_color=(0.0, 0.0, 0.0))
    return scene.with_lambertian() if lambertian else scene


def fixed_lights(count: int, radius: float = 4.0, elevation_deg: float = 50.0) -> list:
    """``count`` lights evenly spaced in azimuth at a fixed elevation."""
    el = np.radians(elevation_deg)
    out = []
    for i in range(count):
        az = 2 * np.pi * i / count + np.pi / 4
        out.append(PointLight(tuple(radius * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)]))))
    return out

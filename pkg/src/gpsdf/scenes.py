"""Analytic test scenes, a simulated range sensor and brute-force oracles.

Scenes are unions of spheres, axis-aligned boxes and half-spaces in 2D or
3D. In 2D every position has two components; sensor frames still carry
3D coordinates with ``z = 0`` so the same file format serves both cases.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import DataError, EmptyOracleSetError

_RAY_EPS = 1e-12


@dataclass(frozen=True)
class Sphere:
    center: np.ndarray
    radius: float

    def sdf(self, x: np.ndarray) -> np.ndarray:
        return np.linalg.norm(x - self.center, axis=-1) - self.radius

    def gradient(self, x: np.ndarray) -> np.ndarray:
        d = x - self.center
        return d / np.maximum(np.linalg.norm(d, axis=-1, keepdims=True), 1e-300)

    def ray_entry(self, o: np.ndarray, d: np.ndarray) -> np.ndarray:
        oc = o - self.center
        b = np.einsum("...i,...i->...", oc, d)
        c = np.einsum("...i,...i->...", oc, oc) - self.radius**2
        disc = b * b - c
        t = np.full(disc.shape, np.inf)
        ok = (disc >= 0) & (c > 0)
        t0 = -b[ok] - np.sqrt(disc[ok])
        t[ok] = np.where(t0 > _RAY_EPS, t0, np.inf)
        return t

    def sample_surface(self, spacing: float) -> np.ndarray:
        n = self.center.shape[0]
        if n == 2:
            m = max(8, int(math.ceil(2 * math.pi * self.radius / spacing)))
            th = np.arange(m) * 2 * math.pi / m
            return self.center + self.radius * np.stack([np.cos(th), np.sin(th)], axis=1)
        m = max(32, int(math.ceil(4 * math.pi * self.radius**2 / spacing**2)))
        return self.center + self.radius * fibonacci_sphere(m)


@dataclass(frozen=True)
class Box:
    """Axis-aligned box given by its center and half extents."""

    center: np.ndarray
    half_size: np.ndarray

    def sdf(self, x: np.ndarray) -> np.ndarray:
        q = np.abs(x - self.center) - self.half_size
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(np.max(q, axis=-1), 0.0)
        return outside + inside

    def gradient(self, x: np.ndarray) -> np.ndarray:
        rel = x - self.center
        q = np.abs(rel) - self.half_size
        sgn = np.where(rel >= 0, 1.0, -1.0)
        outside = np.maximum(q, 0.0)
        norm = np.linalg.norm(outside, axis=-1, keepdims=True)
        g_out = sgn * outside / np.maximum(norm, 1e-300)
        axis = np.argmax(q, axis=-1)
        g_in = np.zeros_like(rel)
        np.put_along_axis(g_in, axis[..., None], np.take_along_axis(sgn, axis[..., None], -1), -1)
        return np.where(norm > 0, g_out, g_in)

    def ray_entry(self, o: np.ndarray, d: np.ndarray) -> np.ndarray:
        lo = self.center - self.half_size
        hi = self.center + self.half_size
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            t1 = (lo - o) * inv
            t2 = (hi - o) * inv
        # zero direction component: the slab is either always or never entered
        par = d == 0
        inside_slab = (o >= lo) & (o <= hi)
        t1 = np.where(par, -np.inf, t1)
        t2 = np.where(par, np.inf, t2)
        tmin = np.max(np.minimum(t1, t2), axis=-1)
        tmax = np.min(np.maximum(t1, t2), axis=-1)
        miss_par = np.any(par & ~inside_slab, axis=-1)
        hit = (tmax >= tmin) & (tmin > _RAY_EPS) & ~miss_par
        return np.where(hit, tmin, np.inf)

    def sample_surface(self, spacing: float) -> np.ndarray:
        n = self.center.shape[0]
        lo = self.center - self.half_size
        hi = self.center + self.half_size
        pts = []
        for ax in range(n):
            others = [a for a in range(n) if a != ax]
            axes = [np.linspace(lo[a], hi[a], max(2, int(math.ceil((hi[a] - lo[a]) / spacing)) + 1))
                    for a in others]
            mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, n - 1)
            for val in (lo[ax], hi[ax]):
                p = np.empty((mesh.shape[0], n))
                p[:, others] = mesh
                p[:, ax] = val
                pts.append(p)
        return np.unique(np.concatenate(pts), axis=0)


@dataclass(frozen=True)
class HalfSpace:
    """Occupied half-space ``normal . (x - point) < 0``; normal faces free space."""

    point: np.ndarray
    normal: np.ndarray

    def __post_init__(self):
        nrm = np.asarray(self.normal, dtype=float)
        object.__setattr__(self, "normal", nrm / np.linalg.norm(nrm))

    def sdf(self, x: np.ndarray) -> np.ndarray:
        return (x - self.point) @ self.normal

    def gradient(self, x: np.ndarray) -> np.ndarray:
        return np.broadcast_to(self.normal, x.shape).copy()

    def ray_entry(self, o: np.ndarray, d: np.ndarray) -> np.ndarray:
        dn = d @ self.normal
        h = (o - self.point) @ self.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            t = -h / dn
        ok = (dn < 0) & (h > 0) & (t > _RAY_EPS)
        return np.where(ok, t, np.inf)

    def sample_surface(self, spacing: float, extent: float = 5.0) -> np.ndarray:
        n = self.point.shape[0]
        basis = np.linalg.svd(self.normal[None, :])[2][1:]
        g = np.arange(-extent, extent + spacing / 2, spacing)
        coords = np.stack(np.meshgrid(*([g] * (n - 1)), indexing="ij"), axis=-1).reshape(-1, n - 1)
        return self.point + coords @ basis


Primitive = Union[Sphere, Box, HalfSpace]


@dataclass(frozen=True)
class Scene:
    primitives: tuple
    dim: int = 3

    def __post_init__(self):
        if self.dim not in (2, 3):
            raise DataError(f"scene dimension must be 2 or 3, got {self.dim}")
        if not self.primitives:
            raise DataError("scene needs at least one primitive")


@dataclass
class SensorFrame:
    t: int
    origin: np.ndarray
    rotation: np.ndarray
    points: np.ndarray
    max_range: float = math.inf
    seed: int | None = None

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=float).reshape(3)
        self.rotation = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)

    def validate(self, tol: float = 1e-6) -> None:
        r = self.rotation
        if not np.allclose(r @ r.T, np.eye(3), atol=tol) or np.linalg.det(r) < 0:
            raise DataError("frame rotation is not a proper rotation")
        if len(self.points) and np.max(np.linalg.norm(self.points - self.origin, axis=1)) > self.max_range + tol:
            raise DataError("frame contains points beyond max_range")

    @property
    def quaternion(self) -> np.ndarray:
        """(w, x, y, z) orientation."""
        x, y, z, w = Rotation.from_matrix(self.rotation).as_quat()
        return np.array([w, x, y, z])


def _as_points(x, dim: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != dim:
        raise ValueError(f"expected {dim}-dimensional positions, got shape {x.shape}")
    return x


def analytic_sdf(scene: Scene, x) -> np.ndarray | float:
    """Signed distance to the union of the scene's primitives.

    Exact outside; inside overlapping primitives the min of per-primitive
    values only bounds the true magnitude from below.
    """
    x = _as_points(x, scene.dim)
    vals = np.stack([p.sdf(x) for p in scene.primitives], axis=0)
    out = np.min(vals, axis=0)
    return float(out) if out.ndim == 0 else out


def analytic_gradient(scene: Scene, x) -> np.ndarray:
    """Gradient of the winning primitive's SDF (unit norm where defined)."""
    x = _as_points(x, scene.dim)
    vals = np.stack([p.sdf(x) for p in scene.primitives], axis=0)
    grads = np.stack([p.gradient(x) for p in scene.primitives], axis=0)
    idx = np.argmin(vals, axis=0)
    return np.take_along_axis(grads, idx[None, ..., None], axis=0)[0]


def sample_boundary(scene: Scene, spacing: float, tol: float = 1e-9) -> np.ndarray:
    """Points on the union boundary, roughly ``spacing`` apart."""
    pts = np.concatenate([p.sample_surface(spacing) for p in scene.primitives])
    return pts[np.abs(analytic_sdf(scene, pts)) <= tol]


def fibonacci_sphere(m: int) -> np.ndarray:
    i = np.arange(m) + 0.5
    phi = np.arccos(1 - 2 * i / m)
    th = math.pi * (1 + 5**0.5) * i
    return np.stack([np.cos(th) * np.sin(phi), np.sin(th) * np.sin(phi), np.cos(phi)], axis=1)


def fan_directions(n_rays: int, fov: float = 2 * math.pi) -> np.ndarray:
    """Planar azimuth fan in the sensor frame (x forward, z up), shape (n, 3)."""
    if fov >= 2 * math.pi - 1e-12:
        az = np.arange(n_rays) * (2 * math.pi / n_rays)
    else:
        az = -fov / 2 + (np.arange(n_rays) + 0.5) * (fov / n_rays)
    return np.stack([np.cos(az), np.sin(az), np.zeros_like(az)], axis=1)


def grid_directions(n_az: int, n_el: int, fov_az: float, fov_el: float) -> np.ndarray:
    """Azimuth/elevation grid (LiDAR-like), shape (n_az * n_el, 3)."""
    if fov_az >= 2 * math.pi - 1e-12:
        az = np.arange(n_az) * (2 * math.pi / n_az)
    else:
        az = -fov_az / 2 + (np.arange(n_az) + 0.5) * (fov_az / n_az)
    el = -fov_el / 2 + (np.arange(n_el) + 0.5) * (fov_el / n_el)
    a, e = np.meshgrid(az, el, indexing="ij")
    d = np.stack([np.cos(e) * np.cos(a), np.cos(e) * np.sin(a), np.sin(e)], axis=-1)
    return d.reshape(-1, 3)


def pinhole_directions(width: int, height: int, fov_x: float) -> np.ndarray:
    """Depth-camera ray grid looking along +x, shape (width * height, 3)."""
    f = (width / 2) / math.tan(fov_x / 2)
    u = np.arange(width) + 0.5 - width / 2
    v = np.arange(height) + 0.5 - height / 2
    uu, vv = np.meshgrid(u, v, indexing="xy")
    d = np.stack([np.full(uu.shape, f), -uu, -vv], axis=-1).reshape(-1, 3)
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def look_at_rotation(origin, target) -> np.ndarray:
    """Level sensor rotation whose x axis points from origin toward target."""
    d = np.asarray(target, float) - np.asarray(origin, float)
    yaw = math.atan2(d[1], d[0])
    return Rotation.from_euler("z", yaw).as_matrix()


def orbit_poses(center, radius: float, n_poses: int, height: float = 0.0) -> list:
    """Poses on a horizontal circle, each facing ``center``."""
    c = np.zeros(3)
    c[: len(center)] = center
    poses = []
    for i in range(n_poses):
        th = 2 * math.pi * i / n_poses
        o = c + np.array([radius * math.cos(th), radius * math.sin(th), height])
        poses.append((o, look_at_rotation(o, c)))
    return poses


def ray_hits(scene: Scene, origin, directions, max_range: float) -> tuple[np.ndarray, np.ndarray]:
    """Range to the first boundary crossing per world-frame direction (inf = miss)."""
    n = scene.dim
    o = np.asarray(origin, float)[:n]
    d = np.asarray(directions, float)[:, :n]
    t = np.full(len(d), np.inf)
    for p in scene.primitives:
        t = np.minimum(t, p.ray_entry(o[None, :], d))
    t[t > max_range] = np.inf
    return t, d


def cast_rays(scene: Scene, pose, directions, max_range: float, t: int = 0) -> SensorFrame:
    """Simulate one scan; ``directions`` are unit vectors in the sensor frame."""
    origin, rot = pose
    origin = np.asarray(origin, float).reshape(3)
    rot = np.asarray(rot, float)
    world = np.asarray(directions, float) @ rot.T
    if scene.dim == 2:
        world = world.copy()
        world[:, 2] = 0.0
        nrm = np.linalg.norm(world, axis=1)
        keep = nrm > 1e-12
        world = world[keep] / nrm[keep, None]
    rng, dirs = ray_hits(scene, origin, world, max_range)
    ok = np.isfinite(rng)
    pts = np.zeros((int(ok.sum()), 3))
    pts[:, : scene.dim] = origin[: scene.dim] + rng[ok, None] * dirs[ok]
    if scene.dim == 2:
        pts[:, 2] = origin[2]
    return SensorFrame(t=t, origin=origin, rotation=rot, points=pts, max_range=max_range)


def add_axial_noise(frame: SensorFrame, k: float, rng_seed: int) -> SensorFrame:
    """Displace each hit along its ray by N(0, (k z^2)^2), z the range."""
    if k < 0:
        raise ValueError("noise coefficient must be non-negative")
    pts = frame.points.copy()
    if k > 0 and len(pts):
        rel = pts - frame.origin
        z = np.linalg.norm(rel, axis=1)
        rng = np.random.default_rng(rng_seed)
        eps = rng.standard_normal(len(pts)) * k * z**2
        pts = frame.origin + rel * ((z + eps) / z)[:, None]
        z_new = np.abs(z + eps)
        pts = pts[z_new <= frame.max_range]
    return SensorFrame(t=frame.t, origin=frame.origin.copy(), rotation=frame.rotation.copy(),
                       points=pts, max_range=frame.max_range, seed=rng_seed)


def brute_force_udf(points, x) -> float:
    """Minimum Euclidean distance from ``x`` to a point set by exhaustive scan."""
    pts = np.asarray(points, dtype=float)
    if pts.size == 0:
        raise EmptyOracleSetError("empty oracle set")
    pts = pts.reshape(len(pts), -1)
    return float(np.sqrt(np.min(np.sum((pts - np.asarray(x, float)) ** 2, axis=1))))


# ---------------------------------------------------------------- scene files

def _parse_vec(text: str, dim: int, where: str) -> np.ndarray:
    try:
        v = np.array([float(s) for s in text.split(",")])
    except ValueError:
        raise DataError(f"{where}: bad number list {text!r}") from None
    if len(v) != dim or not np.all(np.isfinite(v)):
        raise DataError(f"{where}: expected {dim} finite values, got {text!r}")
    return v


_PRIM_FIELDS = {
    "sphere": {"center", "radius"},
    "box": {"center", "half_size"},
    "halfspace": {"point", "normal"},
}


def parse_scene(text: str, source: str = "<scene>") -> Scene:
    """Parse the scene text format.

    ::

        dim = 2
        sphere center=0,0 radius=1
        box center=1,0 half_size=0.2,0.3
        halfspace point=0,-2 normal=0,1
    """
    dim = 3
    prims: list = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        where = f"{source}:{lineno}"
        if "=" in line.split()[0] or line.split()[0] == "dim":
            key, _, val = line.partition("=")
            key = key.strip()
            if key != "dim":
                raise DataError(f"{where}: unknown scene key {key!r}")
            if prims:
                raise DataError(f"{where}: dim must precede primitives")
            try:
                dim = int(val)
            except ValueError:
                raise DataError(f"{where}: bad dim {val.strip()!r}") from None
            if dim not in (2, 3):
                raise DataError(f"{where}: dim must be 2 or 3")
            continue
        kind, *args = line.split()
        if kind not in _PRIM_FIELDS:
            raise DataError(f"{where}: unknown primitive {kind!r}")
        kv = {}
        for a in args:
            k, sep, v = a.partition("=")
            if not sep or k not in _PRIM_FIELDS[kind]:
                raise DataError(f"{where}: unknown {kind} field {k!r}")
            kv[k] = v
        missing = _PRIM_FIELDS[kind] - kv.keys()
        if missing:
            raise DataError(f"{where}: {kind} missing {sorted(missing)}")
        if kind == "sphere":
            r = float(kv["radius"])
            if not (r > 0 and math.isfinite(r)):
                raise DataError(f"{where}: radius must be positive")
            prims.append(Sphere(_parse_vec(kv["center"], dim, where), r))
        elif kind == "box":
            h = _parse_vec(kv["half_size"], dim, where)
            if np.any(h <= 0):
                raise DataError(f"{where}: half_size must be positive")
            prims.append(Box(_parse_vec(kv["center"], dim, where), h))
        else:
            nrm = _parse_vec(kv["normal"], dim, where)
            if np.linalg.norm(nrm) == 0:
                raise DataError(f"{where}: zero normal")
            prims.append(HalfSpace(_parse_vec(kv["point"], dim, where), nrm))
    if not prims:
        raise DataError(f"{source}: scene has no primitives")
    return Scene(tuple(prims), dim)


def format_scene(scene: Scene) -> str:
    def vec(v):
        return ",".join(repr(float(c)) for c in v)

    lines = [f"dim = {scene.dim}"]
    for p in scene.primitives:
        if isinstance(p, Sphere):
            lines.append(f"sphere center={vec(p.center)} radius={p.radius!r}")
        elif isinstance(p, Box):
            lines.append(f"box center={vec(p.center)} half_size={vec(p.half_size)}")
        else:
            lines.append(f"halfspace point={vec(p.point)} normal={vec(p.normal)}")
    return "\n".join(lines) + "\n"


# ------------------------------------------------------------ built-in scenes

def circle_scene(radius: float = 1.0) -> Scene:
    return Scene((Sphere(np.zeros(2), radius),), dim=2)


def room_scene() -> Scene:
    """2D room, 4 m x 3 m inside, with one box and one round obstacle."""
    t = 0.1
    w, h = 2.0, 1.5
    walls = (
        Box(np.array([0.0, h + t]), np.array([w + 2 * t, t])),
        Box(np.array([0.0, -h - t]), np.array([w + 2 * t, t])),
        Box(np.array([w + t, 0.0]), np.array([t, h])),
        Box(np.array([-w - t, 0.0]), np.array([t, h])),
    )
    obstacles = (
        Box(np.array([1.1, 0.6]), np.array([0.3, 0.25])),
        Sphere(np.array([-0.9, -0.5]), 0.35),
    )
    return Scene(walls + obstacles, dim=2)


def sphere_scene(radius: float = 0.5) -> Scene:
    return Scene((Sphere(np.zeros(3), radius),), dim=3)

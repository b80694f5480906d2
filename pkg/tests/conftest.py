"""Shared scenarios for the map-level tests.

Building a map takes seconds, so the circle and room maps are built once
per session and shared by the tests that only read from them.
"""

from __future__ import annotations

import math

import numpy as np
import pytest

from gpsdf import scenes
from gpsdf.config import Config
from gpsdf.mapping import KernelSdfMap


def planar_config(**overrides) -> Config:
    """2D setup with 5 cm voxels used by the circle and room scenarios."""
    cfg = Config()
    cfg.octree.resolution = 0.05
    cfg.map.dim = 2
    cfg.map.query_horizon = 2.0
    cfg.surface.march_subdiv = 2
    cfg.bhm.alpha_lr = 0.3
    for dotted, value in overrides.items():
        section, key = dotted.split("__")
        setattr(getattr(cfg, section), key, value)
    return cfg.validate()


def circle_frames(noise_k: float = 0.0, seed: int = 0, n_poses: int = 36, n_rays: int = 720):
    scene = scenes.circle_scene(1.0)
    dirs = scenes.fan_directions(n_rays)
    out = []
    for i, pose in enumerate(scenes.orbit_poses([0.0, 0.0], 2.0, n_poses)):
        f = scenes.cast_rays(scene, pose, dirs, 10.0, t=i)
        out.append(scenes.add_axial_noise(f, noise_k, seed + i))
    return out


def room_frames(noise_k: float = 0.0, seed: int = 0):
    scene = scenes.room_scene()
    dirs = scenes.fan_directions(720)
    out = []
    for i, pose in enumerate(scenes.orbit_poses([0.0, 0.0], 0.5, 36)):
        f = scenes.cast_rays(scene, pose, dirs, 10.0, t=i)
        out.append(scenes.add_axial_noise(f, noise_k, seed + i))
    return out


def build(frames, cfg: Config) -> KernelSdfMap:
    m = KernelSdfMap(cfg)
    for f in frames:
        m.integrate_frame(f)
    m.flush()
    return m


def circle_query_grid():
    """Grid points of the [-2, 2]^2 lattice with |gt| in [0.1, 1.0]."""
    scene = scenes.circle_scene(1.0)
    g = np.mgrid[-2:2:0.1, -2:2:0.1].reshape(2, -1).T
    gt = scenes.analytic_sdf(scene, g)
    sel = (np.abs(gt) >= 0.1) & (np.abs(gt) <= 1.0)
    return g[sel], gt[sel]


def room_query_grid():
    """Cell centres of a 10 cm grid over the room interior."""
    g = np.mgrid[-2.0:2.0:0.1, -1.5:1.5:0.1].reshape(2, -1).T + 0.05
    return g


def room_poses():
    return scenes.orbit_poses([0.0, 0.0], 0.5, 36)


def visible_from_any(scene, poses, x) -> bool:
    for o, _ in poses:
        d = x - o[:2]
        dist = float(np.linalg.norm(d))
        t, _ = scenes.ray_hits(scene, o, (d / dist)[None], 10.0)
        if t[0] >= dist - 1e-9:
            return True
    return False


WALL_X = 0.53


def wall_scene():
    """Occupied half-plane x > WALL_X, its face away from any voxel border."""
    return scenes.Scene((scenes.HalfSpace(np.array([WALL_X, 0.0]), np.array([-1.0, 0.0])),), dim=2)


def wall_frames(n: int = 10, noise_k: float = 0.0):
    dirs = scenes.fan_directions(180, math.radians(90))
    out = []
    for t in range(n):
        o = np.array([-0.5 + 0.01 * t, 0.02 * t - 0.1, 0.0])
        f = scenes.cast_rays(wall_scene(), (o, np.eye(3)), dirs, 3.0, t=t)
        out.append(scenes.add_axial_noise(f, noise_k, t))
    return out


@pytest.fixture(scope="session")
def wall_map() -> KernelSdfMap:
    return build(wall_frames(), planar_config())


@pytest.fixture(scope="session")
def circle_map() -> KernelSdfMap:
    return build(circle_frames(), planar_config())


@pytest.fixture(scope="session")
def room_map() -> KernelSdfMap:
    return build(room_frames(), planar_config())


def angle_between(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    cos = np.sum(a * b, axis=-1) / (np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1))
    return np.arccos(np.clip(cos, -1.0, 1.0))


DEG = math.pi / 180.0


# one (number, name, passed, detail) tuple per acceptance criterion, in run order
ACCEPTANCE: list[tuple[int, str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, name, passed, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'} C{number:<2} {name}: {detail}")

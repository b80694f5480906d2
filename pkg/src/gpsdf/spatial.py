"""Occupancy quadtree/octree with ray-sorted updates and partition keys.

The tree is stored linearly: leaf voxels live in a hash map keyed by their
integer index triple (pair in 2D), and the octant at any coarser depth is
obtained by shifting the leaf index. This gives the usual octree addressing
without materialising interior nodes.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import total_ordering

import numpy as np


def morton_code(index: tuple[int, ...], bits: int) -> int:
    code = 0
    n = len(index)
    for b in range(bits):
        for a, v in enumerate(index):
            code |= ((v >> b) & 1) << (b * n + a)
    return code


@total_ordering
@dataclass(frozen=True)
class OctantKey:
    """One octree cell: depth plus integer index per axis."""

    depth: int
    index: tuple

    def __post_init__(self):
        object.__setattr__(self, "index", tuple(int(i) for i in self.index))
        lim = 1 << self.depth
        if any(i < 0 or i >= lim for i in self.index):
            raise ValueError(f"index {self.index} out of range for depth {self.depth}")

    def sort_key(self):
        return (self.depth, morton_code(self.index, self.depth))

    def __lt__(self, other: "OctantKey") -> bool:
        return self.sort_key() < other.sort_key()

    def parent(self, depth: int) -> "OctantKey":
        s = self.depth - depth
        return OctantKey(depth, tuple(i >> s for i in self.index))

    def __str__(self) -> str:
        return f"{self.depth}:" + ",".join(map(str, self.index))

    @classmethod
    def parse(cls, text: str) -> "OctantKey":
        d, _, idx = text.partition(":")
        return cls(int(d), tuple(int(v) for v in idx.split(",")))


@dataclass(frozen=True)
class Aabb:
    lo: np.ndarray
    hi: np.ndarray

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    @property
    def size(self) -> np.ndarray:
        return self.hi - self.lo

    def expanded(self, margin: float) -> "Aabb":
        return Aabb(self.lo - margin, self.hi + margin)

    def contains(self, x: np.ndarray, half_open: bool = False) -> np.ndarray:
        x = np.asarray(x)
        if half_open:
            return np.all((x >= self.lo) & (x < self.hi), axis=-1)
        return np.all((x >= self.lo) & (x <= self.hi), axis=-1)

    def distance(self, x: np.ndarray) -> np.ndarray:
        d = np.maximum(np.maximum(self.lo - x, x - self.hi), 0.0)
        return np.linalg.norm(d, axis=-1)

    def clip_segments(self, a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Parametric overlap [t0, t1] of segments a + t (b - a), t in [0, 1].

        Segments missing the box get t0 > t1.
        """
        d = b - a
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            ta = (self.lo - a) * inv
            tb = (self.hi - a) * inv
        par = d == 0
        inside = (a >= self.lo) & (a <= self.hi)
        lo_t = np.where(par, np.where(inside, -np.inf, np.inf), np.minimum(ta, tb))
        hi_t = np.where(par, np.where(inside, np.inf, -np.inf), np.maximum(ta, tb))
        t0 = np.maximum(np.max(lo_t, axis=-1), 0.0)
        t1 = np.minimum(np.min(hi_t, axis=-1), 1.0)
        return t0, t1


def traverse_ray(p0: np.ndarray, p1: np.ndarray) -> list[tuple]:
    """Voxels strictly between the voxels of p0 and p1 (voxel units), in order.

    Amanatides-Woo stepping; when two axes reach a boundary at the same
    parameter the lower axis index steps first. Axes already at the end
    voxel's index are frozen so the walk always terminates in that voxel.
    """
    k = [math.floor(v) for v in p0]
    k1 = [math.floor(v) for v in p1]
    if k == k1:
        return []
    n = len(k)
    step = [0] * n
    t_max = [math.inf] * n
    t_delta = [math.inf] * n
    remaining = [0] * n
    for a in range(n):
        d = p1[a] - p0[a]
        remaining[a] = abs(k1[a] - k[a])
        if d > 0:
            step[a] = 1
            t_delta[a] = 1.0 / d
            t_max[a] = (k[a] + 1 - p0[a]) / d
        elif d < 0:
            step[a] = -1
            t_delta[a] = -1.0 / d
            t_max[a] = (p0[a] - k[a]) / -d
    out = []
    left = sum(remaining)
    while True:
        best = -1
        for a in range(n):
            if remaining[a] and (best < 0 or t_max[a] < t_max[best]):
                best = a
        k[best] += step[best]
        remaining[best] -= 1
        t_max[best] += t_delta[best]
        left -= 1
        if left == 0:
            return out
        out.append(tuple(k))


def _ordered_union(a: dict, b: dict) -> dict:
    for v in b:
        if v not in a:
            a[v] = None
    return a


def stride2_merge(parts: list[dict], pool: ThreadPoolExecutor | None = None) -> dict:
    """Merge per-batch ordered voxel sets.

    Pairs (2i, 2i+1) are merged first (the even slot absorbs the odd one,
    in parallel when a pool is given), then the partial results are folded
    into slot 0 in order. Ordered union is associative, so the result does
    not depend on how the rays were batched.
    """
    if not parts:
        return {}
    pairs = [(parts[i], parts[i + 1] if i + 1 < len(parts) else {}) for i in range(0, len(parts), 2)]
    if pool is not None and len(pairs) > 1:
        merged = list(pool.map(lambda ab: _ordered_union(*ab), pairs))
    else:
        merged = [_ordered_union(a, b) for a, b in pairs]
    acc = merged[0]
    for m in merged[1:]:
        _ordered_union(acc, m)
    return acc


def sorted_free_voxels(origin, endpoints, resolution: float, offset=None,
                       batch_size: int = 64, threads: int = 1) -> list[tuple]:
    """Ordered, de-duplicated voxels traversed by origin->endpoint segments.

    Voxels of one ray appear contiguously by distance from the origin, start
    and end voxels excluded; a voxel shared by several rays is listed at its
    first occurrence in ray order.
    """
    endpoints = np.asarray(endpoints, float)
    origin = np.asarray(origin, float)
    if offset is None:
        offset = np.zeros_like(origin)
    p0 = ((origin - offset) / resolution).tolist()
    ends = ((endpoints - offset) / resolution).tolist()
    batches = [ends[i:i + batch_size] for i in range(0, len(ends), max(1, batch_size))]

    def run(batch):
        acc: dict = {}
        for e in batch:
            for v in traverse_ray(p0, e):
                if v not in acc:
                    acc[v] = None
        return acc

    if threads > 1 and len(batches) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, batches))
            merged = stride2_merge(parts, pool)
    else:
        merged = stride2_merge([run(b) for b in batches])
    return list(merged)


@dataclass
class ScanUpdate:
    new_partitions: list
    dropped: int = 0
    n_free: int = 0
    n_hit: int = 0


@dataclass
class OccupancyTree:
    """Log-odds occupancy over a 2^max_depth voxel grid per axis.

    ``origin`` is the world position of the grid's minimum corner; by
    default the grid is centred on the world origin.
    """

    resolution: float
    dim: int = 3
    max_depth: int = 16
    origin: np.ndarray | None = None
    l_hit: float = 0.85
    l_miss: float = -0.4
    l_min: float = -2.0
    l_max: float = 3.5
    occupied_threshold: float = 0.0
    partition_depth: int | None = None
    threads: int = 1
    batch_size: int = 64
    log_odds: dict = field(default_factory=dict)
    _counts: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.origin is None:
            self.origin = np.full(self.dim, -0.5 * self.resolution * (1 << self.max_depth))
        self.origin = np.asarray(self.origin, float)
        if self.partition_depth is None:
            self.partition_depth = self.max_depth - 1

    # --- addressing
    def cell_size(self, depth: int) -> float:
        return self.resolution * (1 << (self.max_depth - depth))

    def world_to_key(self, x, depth: int | None = None) -> tuple:
        depth = self.max_depth if depth is None else depth
        return tuple(int(v) for v in np.floor((np.asarray(x, float) - self.origin) / self.cell_size(depth)))

    def key_to_center(self, key, depth: int | None = None) -> np.ndarray:
        depth = self.max_depth if depth is None else depth
        return self.origin + (np.asarray(key, float) + 0.5) * self.cell_size(depth)

    def in_bounds(self, x: np.ndarray) -> np.ndarray:
        span = self.resolution * (1 << self.max_depth)
        rel = np.asarray(x) - self.origin
        return np.all((rel >= 0) & (rel < span), axis=-1)

    def octant_of(self, x, depth: int | None = None) -> OctantKey:
        depth = self.partition_depth if depth is None else depth
        return OctantKey(depth, self.world_to_key(x, depth))

    def octant_box(self, key: OctantKey) -> Aabb:
        s = self.cell_size(key.depth)
        lo = self.origin + np.asarray(key.index, float) * s
        return Aabb(lo, lo + s)

    def _partition_index(self, voxel: tuple) -> tuple:
        s = self.max_depth - self.partition_depth
        return tuple(v >> s for v in voxel)

    def is_occupied(self, voxel: tuple) -> bool:
        return self.log_odds.get(voxel, 0.0) > self.occupied_threshold

    # --- updates
    def sorted_free_voxels(self, sensor_origin, endpoints) -> list[tuple]:
        return sorted_free_voxels(sensor_origin, endpoints, self.resolution, self.origin,
                                  batch_size=self.batch_size, threads=self.threads)

    def _apply(self, voxel: tuple, delta: float, newly: dict) -> None:
        old = self.log_odds.get(voxel, 0.0)
        new = min(max(old + delta, self.l_min), self.l_max)
        self.log_odds[voxel] = new
        was = old > self.occupied_threshold
        now = new > self.occupied_threshold
        if was != now:
            pk = self._partition_index(voxel)
            c = self._counts.get(pk, 0)
            if now:
                if c == 0:
                    newly[pk] = None
                self._counts[pk] = c + 1
            else:
                self._counts[pk] = c - 1

    def integrate_scan(self, sensor_origin, points) -> ScanUpdate:
        """Free-update traversed voxels in ray-sorted order, then mark hits.

        A voxel containing a hit of this scan is never also free-updated in
        the same scan, so every voxel receives at most one increment per
        scan and the result is independent of update order.
        """
        pts = np.asarray(points, float).reshape(-1, self.dim)
        o = np.asarray(sensor_origin, float)[: self.dim]
        ok = self.in_bounds(pts)
        dropped = int((~ok).sum())
        pts = pts[ok]
        if len(pts) == 0:
            return ScanUpdate([], dropped)
        hit_keys = dict.fromkeys(
            tuple(k) for k in np.floor((pts - self.origin) / self.resolution).astype(np.int64).tolist())
        free = [v for v in self.sorted_free_voxels(o, pts) if v not in hit_keys]
        newly: dict = {}
        for v in free:
            self._apply(v, self.l_miss, newly)
        for v in hit_keys:
            self._apply(v, self.l_hit, newly)
        fresh = sorted(OctantKey(self.partition_depth, pk) for pk in newly if self._counts.get(pk, 0) > 0)
        return ScanUpdate(fresh, dropped, len(free), len(hit_keys))

    def occupied_voxels(self) -> list[tuple]:
        return sorted(k for k, v in self.log_odds.items() if v > self.occupied_threshold)

    def occupied_partitions(self, depth: int | None = None) -> list[OctantKey]:
        depth = self.partition_depth if depth is None else depth
        if depth > self.max_depth:
            raise ValueError("depth exceeds max_depth")
        s = self.max_depth - depth
        keys = {tuple(i >> s for i in v) for v in self.occupied_voxels()}
        return sorted(OctantKey(depth, k) for k in keys)

    def dump(self) -> str:
        lines = []
        for v in self.occupied_voxels():
            c = self.key_to_center(v)
            xyz = list(c) + [0.0] * (3 - self.dim)
            lines.append(" ".join(f"{a:.6f}" for a in xyz) + f" {self.log_odds[v]:.6f}")
        return "\n".join(lines) + ("\n" if lines else "")

    def restore(self, keys: np.ndarray, values: np.ndarray) -> None:
        self.log_odds = {tuple(int(a) for a in k): float(v) for k, v in zip(keys, values)}
        self._counts = {}
        for v, lo in self.log_odds.items():
            if lo > self.occupied_threshold:
                pk = self._partition_index(v)
                self._counts[pk] = self._counts.get(pk, 0) + 1

"""The incremental SDF map: occupancy tree, per-partition BHM and GP, queries."""

from __future__ import annotations

import itertools
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import bhm as bhm_mod
from .config import Config
from .errors import (DegenerateGradientError, GpsdfError, OutOfOrderFrameError,
                     UnmappedRegionError)
from .gp import (KernelSpec, SdfGp, SdfQueryResult, UdfCandidate, cap_training_set, fuse_query,
                 grad_variance, predict_udf, softmin_gradient, train, udf_variance)
from .metrics import TimingEvent
from .scenes import SensorFrame
from .scheduler import Scheduler, SchedulerParams, Task
from .spatial import Aabb, OccupancyTree, OctantKey
from .surface import OctantMesh, assemble_mesh, march_partition

log = logging.getLogger(__name__)


@dataclass
class Partition:
    key: OctantKey
    box: Aabb
    sampling_box: Aabb
    collection_box: Aabb
    bhm: bhm_mod.LocalBhm
    gp: SdfGp
    mesh: OctantMesh
    march_stamp: int = -1

    @property
    def surface_positions(self) -> np.ndarray:
        return self.mesh.vertices


@dataclass
class FrameReport:
    t: int
    new_partitions: list
    em_passes: int
    synced: int
    tasks: list
    seconds: float = 0.0

    def task_counts(self) -> dict:
        out = {"march": 0, "buffer": 0, "train": 0}
        for task in self.tasks:
            out[task.kind] += 1
        return out


class KernelSdfMap:
    def __init__(self, config: Config | None = None):
        self.config = (config or Config()).validate()
        c = self.config
        self.dim = c.map.dim
        self.tree = OccupancyTree(
            resolution=c.octree.resolution, dim=self.dim, max_depth=c.octree.max_depth,
            partition_depth=c.octree.max_depth - c.octree.partition_levels,
            threads=c.octree.threads, batch_size=c.octree.batch_size)
        self.kernel = KernelSpec.from_rate(c.gp.kernel, c.gp.rate)
        self.edge = c.partition_edge
        self.partitions: dict[OctantKey, Partition] = {}
        q = c.scheduler
        self.scheduler = Scheduler(
            SchedulerParams(q.eta1, q.eta2, q.c1_max, q.gamma_decay,
                            (q.budget_march, q.budget_buffer, q.budget_train)),
            on_march=self._march, on_buffer=self._buffer, on_train=self._train)
        self.last_t: int | None = None
        self.frame_count = 0
        self.stamp = 0
        self.events: list[TimingEvent] = []
        self._centers: cKDTree | None = None
        self._center_keys: list = []
        self._sampling_margin = c.effective_sampling_margin()
        self._collection_margin = c.effective_collection_margin()
        self.free_probe_factor = 2.0
        self._ring = int(math.ceil((self._sampling_margin + self._collection_margin) / self.edge - 1e-9))

    # ------------------------------------------------------------ partitions
    def _make_partition(self, key: OctantKey) -> Partition:
        c = self.config
        box = self.tree.octant_box(key)
        grid = bhm_mod.HingeGrid.for_partition(key, self.edge, self.tree.origin, c.bhm.hinges_per_axis,
                                               c.bhm.scale, c.bhm.eps)
        sampling = box.expanded(self._sampling_margin)
        collection = sampling.expanded(self._collection_margin)
        return Partition(key, box, sampling, collection,
                         bhm_mod.LocalBhm.fresh(key, grid, c.bhm.prior_var),
                         SdfGp(key, collection, self.kernel), OctantMesh.empty(self.dim))

    def _neighbors(self, key: OctantKey, ring: int) -> list[OctantKey]:
        out = []
        lim = 1 << key.depth
        for off in itertools.product(range(-ring, ring + 1), repeat=self.dim):
            idx = tuple(i + o for i, o in zip(key.index, off))
            if all(0 <= i < lim for i in idx):
                k = OctantKey(key.depth, idx)
                if k in self.partitions:
                    out.append(k)
        return sorted(out)

    # ------------------------------------------------------------ scheduler work
    def _active_cells(self, part: Partition, subdiv: int) -> list[tuple]:
        """Marching cells over the partition box grown by one voxel.

        Cell (0, ...) is the corner of the grown box; every cell of an
        occupied voxel inside the grown box is active.
        """
        res = self.config.octree.resolution
        lo = np.round((part.box.lo - self.tree.origin) / res).astype(np.int64)
        n_vox = int(round(self.edge / res))
        cells = []
        for off in itertools.product(range(-1, n_vox + 1), repeat=self.dim):
            v = tuple(int(a + b) for a, b in zip(lo, off))
            if self.tree.is_occupied(v):
                for sub in itertools.product(range(subdiv), repeat=self.dim):
                    cells.append(tuple((o + 1) * subdiv + s for o, s in zip(off, sub)))
        return cells

    def _march(self, key: OctantKey) -> list[OctantKey]:
        """Re-extract the partition's surface.

        The tau crossing of a surface lying on a partition border can fall
        just outside the partition that owns the hits, so marching runs on
        the box grown by one voxel. Vertices outside the core box are kept
        only where no other partition owns that position.
        """
        part = self.partitions[key]
        sub = self.config.surface.march_subdiv
        res = self.config.octree.resolution
        self.stamp += 1
        active = self._active_cells(part, sub)
        if active:
            mesh, _ = march_partition(part.bhm, part.box.expanded(res), res / sub,
                                      active, self.config.surface.beta, self.stamp)
            keep = self._owned(part, mesh.vertices) & self._faces_free_space(mesh.vertices, mesh.normals)
            part.mesh = _subset_mesh(mesh, keep)
        else:
            part.mesh = OctantMesh.empty(self.dim)
        part.march_stamp = self.stamp
        return [k for k in self._neighbors(key, self._ring)
                if _boxes_overlap(self.partitions[k].collection_box, part.box)]

    def _owned(self, part: Partition, points: np.ndarray) -> np.ndarray:
        inside = part.box.contains(points, half_open=True)
        out = np.flatnonzero(~inside)
        if len(out):
            keys = np.floor((points[out] - self.tree.origin) / self.edge).astype(np.int64)
            depth = part.key.depth
            for i, k in zip(out, keys.tolist()):
                inside[i] = OctantKey(depth, tuple(k)) not in self.partitions
        return inside

    def _faces_free_space(self, points: np.ndarray, normals: np.ndarray) -> np.ndarray:
        """Occupancy-tree consistency of surface vertices.

        A vertex is kept when a voxel one or two voxel edges along its
        normal is clearly free, its own voxel is not, and a voxel half or
        one edge against the normal is not. The first test rejects the tau
        crossing behind the observed surface, where log-odds decays back to
        the prior inside unobserved space. The others reject level-set
        bumps raised in free space by noisy or outlying hits.
        """
        res = self.config.octree.resolution
        limit = self.free_probe_factor * self.tree.l_miss
        lo = self.tree.log_odds

        def free_at(step):
            keys = np.floor((points + normals * (step * res) - self.tree.origin) / res).astype(np.int64)
            return np.array([lo.get(tuple(k), 0.0) <= limit for k in keys.tolist()], bool)

        front_free = free_at(1.0) | free_at(2.0)
        behind_solid = ~free_at(-0.5) | ~free_at(-1.0)
        return front_free & ~free_at(0.0) & behind_solid

    def _buffer(self, key: OctantKey) -> None:
        part = self.partitions[key]
        box = part.collection_box
        pos, var, nrm = [], [], []
        for k in self._neighbors(key, self._ring):
            m = self.partitions[k].mesh
            if not len(m.vertices):
                continue
            inside = box.contains(m.vertices)
            pos.append(m.vertices[inside])
            var.append(m.variances[inside])
            nrm.append(m.normals[inside])
        self.stamp += 1
        if pos:
            pos, var, nrm = np.concatenate(pos), np.concatenate(var), np.concatenate(nrm)
        else:
            pos, var, nrm = np.empty((0, self.dim)), np.empty(0), np.empty((0, self.dim))
        keep = cap_training_set(pos, var, self.config.gp.max_points)
        part.gp.set_data(pos[keep], var[keep], nrm[keep], self.stamp)
        part.gp.alpha = None

    def _train(self, key: OctantKey) -> None:
        gp = self.partitions[key].gp
        if gp.size:
            train(gp, jitter=self.config.gp.jitter)

    # ------------------------------------------------------------ ingestion
    def integrate_frame(self, frame: SensorFrame) -> FrameReport:
        if self.last_t is not None and frame.t <= self.last_t:
            raise OutOfOrderFrameError("out-of-order frame")
        start = time.perf_counter()
        c = self.config
        n = self.dim
        origin = frame.origin[:n]
        hits = frame.points[:, :n]
        self.last_t = frame.t
        self.frame_count += 1

        upd = self.tree.integrate_scan(origin, hits)
        new = []
        for key in upd.new_partitions:
            if key not in self.partitions:
                part = self._make_partition(key)
                self.partitions[key] = part
                self.scheduler.add_partition(key, part.collection_box.center, origin)
                new.append(key)
        if new:
            self._centers = None

        em_passes = 0
        if len(hits):
            lo = np.minimum(hits.min(axis=0), origin)
            hi = np.maximum(hits.max(axis=0), origin)
            spacing = c.effective_free_spacing()
            for key in sorted(self.partitions):
                part = self.partitions[key]
                if np.any(part.sampling_box.hi < lo) or np.any(part.sampling_box.lo > hi):
                    continue
                data = bhm_mod.generate_dataset(origin, hits, part.sampling_box, spacing)
                if len(data) == 0:
                    continue
                bhm_mod.em_update(part.bhm, data, c.bhm.em_iterations)
                em_passes += 1
                occ = data.occupied
                occ = occ[part.box.contains(occ)]
                if len(occ):
                    part.bhm.tau = bhm_mod.update_sign_threshold(
                        part.bhm.tau, part.bhm.log_odds(occ), c.bhm.alpha_lr)
                self.scheduler.request_march(key, frame.t)

        synced = 0
        if self.frame_count % c.bhm.sync_period == 0:
            synced = self.sync_all()
        tasks = self.scheduler.step(exempt=new)
        elapsed = time.perf_counter() - start
        self.events.append(TimingEvent("frame", elapsed))
        return FrameReport(frame.t, new, em_passes, synced, tasks, elapsed)

    def sync_all(self) -> int:
        """Weight sync of every partition against its direct neighbours."""
        for key in sorted(self.partitions):
            nbs = [self.partitions[k].bhm for k in self._neighbors(key, 1) if k != key]
            bhm_mod.sync_weights(self.partitions[key].bhm, nbs)
        return len(self.partitions)

    def flush(self) -> list[Task]:
        """Run every pending march, buffer update and training."""
        done = []
        s = self.scheduler
        while True:
            m, b, t = s.depths()
            if m + b + t == 0:
                return done
            done += s.step((m, b, t))

    # ------------------------------------------------------------ queries
    def _center_index(self) -> tuple[cKDTree, list]:
        if self._centers is None:
            self._center_keys = sorted(self.partitions)
            centers = np.array([self.partitions[k].box.center for k in self._center_keys])
            self._centers = cKDTree(centers)
        return self._centers, self._center_keys

    def _ensure_ready(self, key: OctantKey) -> SdfGp:
        gp = self.partitions[key].gp
        cnt = self.scheduler.counter(key)
        if cnt.c1 > 0 or cnt.c2 > 0 or not gp.trained:
            self.scheduler.force_ready(key, needs_training=not gp.trained)
        return gp

    def _candidate(self, key: OctantKey, x: np.ndarray) -> UdfCandidate | None:
        gp = self._ensure_ready(key)
        if not gp.trained:
            return None
        u, g, post = predict_udf(gp, x)
        var_u, var_g, g_soft = self._variances(gp, x)
        if g is None:
            nrm = np.linalg.norm(g_soft) if g_soft is not None else 0.0
            if not nrm > 1e-12:
                raise DegenerateGradientError("gradient undefined")
            g = g_soft / nrm
        return UdfCandidate(key, u, g, var_u, var_g)

    def _variances(self, gp: SdfGp, x: np.ndarray):
        d = np.linalg.norm(gp.points - x, axis=1)
        on = d <= 0.0
        order = np.argsort(d, kind="stable")
        order = order[~on[order]][: self.config.gp.softmin_points]
        if len(order) == 0:
            v = float(gp.variances[on].min())
            return v, np.full(self.dim, v / self.kernel.scale**2), None
        a = self.config.effective_alpha_softmin()
        pts, var = gp.points[order], gp.variances[order]
        return udf_variance(x, pts, var, a), grad_variance(x, pts, var, a), softmin_gradient(x, pts, a)

    def _sign(self, x: np.ndarray, selected: OctantKey | None) -> tuple[int, str]:
        key = self.tree.octant_of(x) if bool(self.tree.in_bounds(x)) else None
        part = self.partitions.get(key)
        if part is not None:
            return bhm_mod.predict_sign(part.bhm, x), "bhm"
        if selected is not None:
            gp = self.partitions[selected].gp
            if gp.normals is not None and len(gp.points):
                return _normal_vote(gp.points, gp.normals, x, self.config.effective_alpha_softmin(),
                                    self.config.gp.softmin_points), "normal"
        return 1, "default"

    def query(self, x) -> SdfQueryResult:
        t0 = time.perf_counter()
        try:
            return self._query(np.asarray(x, float).reshape(self.dim))
        finally:
            self.events.append(TimingEvent("query", time.perf_counter() - t0))

    def _query(self, x: np.ndarray) -> SdfQueryResult:
        if not self.partitions:
            raise UnmappedRegionError("unmapped region")
        tree, keys = self._center_index()
        k = self.config.gp.k_nearest
        n_look = min(len(keys), 4 * k)
        _, idx = tree.query(x, k=n_look)
        idx = np.atleast_1d(idx)
        near = self.partitions[keys[int(idx[0])]].box.distance(x)
        if float(near) > self.config.effective_query_horizon():
            raise UnmappedRegionError("unmapped region")
        candidates = []
        for i in idx:
            key = keys[int(i)]
            self.scheduler.on_query(key)
            cand = self._candidate(key, x)
            if cand is not None:
                candidates.append(cand)
            if len(candidates) == k:
                break
        if not candidates:
            raise UnmappedRegionError("unmapped region")
        best = min(candidates, key=lambda c: (c.udf, c.key)).key
        sign, source = self._sign(x, best)
        res = fuse_query(candidates, sign)
        res.sign_source = source
        return res

    def query_batch(self, points) -> list[SdfQueryResult]:
        pts = np.asarray(points, float).reshape(-1, self.dim)
        t0 = time.perf_counter()
        out = []
        for x in pts:
            try:
                out.append(self._query(x))
            except GpsdfError as exc:
                out.append(SdfQueryResult.invalid(self.dim, str(exc)))
        self.events.append(TimingEvent("query_batch", time.perf_counter() - t0, len(pts)))
        return out

    # ------------------------------------------------------------ meshes
    def extract_global_mesh(self) -> OctantMesh:
        s = self.scheduler
        for key in s.march_queue():
            s.run_march(key)
        meshes = [self.partitions[k].mesh for k in sorted(self.partitions)]
        return assemble_mesh(meshes, self.config.surface.weld_tol, self.dim)

    def surface_points(self) -> np.ndarray:
        parts = [self.partitions[k].mesh.vertices for k in sorted(self.partitions)]
        return np.concatenate(parts) if parts else np.empty((0, self.dim))


def _boxes_overlap(a: Aabb, b: Aabb) -> bool:
    return bool(np.all(a.lo <= b.hi) and np.all(b.lo <= a.hi))


def _subset_mesh(mesh: OctantMesh, keep: np.ndarray) -> OctantMesh:
    remap = -np.ones(len(keep), np.int64)
    remap[keep] = np.arange(int(keep.sum()))
    faces = remap[mesh.faces] if len(mesh.faces) else mesh.faces
    if len(faces):
        faces = faces[np.all(faces >= 0, axis=1)]
    return OctantMesh(mesh.vertices[keep], faces, mesh.variances[keep], mesh.normals[keep])


def _normal_vote(points: np.ndarray, normals: np.ndarray, x: np.ndarray, alpha: float, limit: int) -> int:
    """Sign of x relative to nearby oriented surface samples.

    Each sample votes with the cosine between its normal and the direction
    to x, weighted by the softmin weight of its distance.
    """
    diff = x - points
    z = np.linalg.norm(diff, axis=1)
    order = np.argsort(z, kind="stable")[:limit]
    z, diff, nrm = z[order], diff[order], normals[order]
    w = np.exp(-alpha * (z - z[0]))
    cos = np.sum(nrm * diff, axis=1) / np.maximum(z, 1e-12)
    return 1 if float(w @ cos) >= 0 else -1

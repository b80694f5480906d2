import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from gpsdf.spatial import (Aabb, OccupancyTree, OctantKey, morton_code, sorted_free_voxels,
                           stride2_merge, traverse_ray)


def crossing_voxel_set(p0, p1):
    """Voxels between the end voxels, from the sorted grid-plane crossings.

    Each interval between consecutive crossings lies in one voxel, found by
    flooring the interval midpoint. Exact for rays that never cross two
    planes at once, which holds almost surely for random endpoints.
    """
    p0, p1 = np.asarray(p0, float), np.asarray(p1, float)
    d = p1 - p0
    ts = [0.0, 1.0]
    for a in range(len(p0)):
        if d[a] == 0:
            continue
        lo, hi = sorted((p0[a], p1[a]))
        planes = np.arange(math.floor(lo) + 1, math.ceil(hi))
        ts.extend(((planes - p0[a]) / d[a]).tolist())
    ts = np.unique(ts)
    mids = 0.5 * (ts[:-1] + ts[1:])
    vox = [tuple(v) for v in np.floor(p0 + mids[:, None] * d).astype(int).tolist()]
    return {v for v in vox} - {tuple(np.floor(p0).astype(int)), tuple(np.floor(p1).astype(int))}


def naive_integrate(tree: OccupancyTree, origin, points):
    """Unsorted reference update: hits first, then free voxels in reverse."""
    lo = dict(tree.log_odds)
    pts = np.asarray(points, float)
    hit = {tuple(k) for k in np.floor((pts - tree.origin) / tree.resolution).astype(int).tolist()}
    for v in hit:
        lo[v] = min(max(lo.get(v, 0.0) + tree.l_hit, tree.l_min), tree.l_max)
    free = set()
    o = (np.asarray(origin) - tree.origin) / tree.resolution
    for p in pts:
        free |= set(traverse_ray(o.tolist(), ((p - tree.origin) / tree.resolution).tolist()))
    for v in sorted(free - hit, reverse=True):
        lo[v] = min(max(lo.get(v, 0.0) + tree.l_miss, tree.l_min), tree.l_max)
    return lo


class TestOctantKey:
    def test_order_is_depth_major_then_morton(self):
        keys = [OctantKey(2, (1, 1)), OctantKey(1, (1, 0)), OctantKey(2, (0, 1)), OctantKey(2, (1, 0))]
        assert sorted(keys) == [OctantKey(1, (1, 0)), OctantKey(2, (1, 0)), OctantKey(2, (0, 1)),
                                OctantKey(2, (1, 1))]

    def test_morton_interleaves(self):
        assert morton_code((1, 0), 1) == 1
        assert morton_code((0, 1), 1) == 2
        assert morton_code((3, 3), 2) == 15

    def test_index_range_checked(self):
        with pytest.raises(ValueError):
            OctantKey(2, (4, 0))

    def test_parse_round_trip(self):
        k = OctantKey(5, (3, 7, 1))
        assert OctantKey.parse(str(k)) == k

    def test_parent(self):
        assert OctantKey(3, (5, 6)).parent(1) == OctantKey(1, (1, 1))


class TestAddressing:
    @settings(max_examples=200, deadline=None)
    @given(st.integers(1, 10), st.data())
    def test_key_center_round_trip(self, depth, data):
        tree = OccupancyTree(0.05, dim=3, max_depth=10)
        idx = tuple(data.draw(st.integers(0, (1 << depth) - 1)) for _ in range(3))
        assert tree.world_to_key(tree.key_to_center(idx, depth), depth) == idx

    def test_default_grid_is_centred(self):
        tree = OccupancyTree(0.1, dim=2, max_depth=4)
        assert_allclose(tree.origin, [-0.8, -0.8])
        assert tree.world_to_key([0.0, 0.0]) == (8, 8)

    def test_octant_box(self):
        tree = OccupancyTree(0.1, dim=2, max_depth=4)
        box = tree.octant_box(OctantKey(3, (4, 4)))
        assert_allclose(box.lo, [0.0, 0.0])
        assert_allclose(box.hi, [0.2, 0.2])


class TestTraversal:
    def test_axis_example(self):
        got = sorted_free_voxels([0.05, 0.05, 0.05], [[0.35, 0.05, 0.05]], 0.1)
        assert got == [(1, 0, 0), (2, 0, 0)]

    def test_endpoint_in_origin_voxel(self):
        assert sorted_free_voxels([0.05, 0.05, 0.05], [[0.07, 0.02, 0.09]], 0.1) == []

    def test_batch_size_independent(self):
        rng = np.random.default_rng(3)
        ends = rng.uniform(-1, 1, (40, 3))
        ref = sorted_free_voxels([0.01, 0.02, 0.03], ends, 0.1, batch_size=1)
        for b in (2, 7, 64):
            assert sorted_free_voxels([0.01, 0.02, 0.03], ends, 0.1, batch_size=b) == ref
        assert sorted_free_voxels([0.01, 0.02, 0.03], ends, 0.1, batch_size=7, threads=3) == ref

    def test_matches_naive_set_on_random_rays(self):
        rng = np.random.default_rng(11)
        o = np.array([0.013, 0.027, 0.041])
        ends = o + rng.uniform(-1.5, 1.5, (1000, 3))
        got = sorted_free_voxels(o, ends, 0.1)
        assert len(got) == len(set(got))
        ref = set()
        for e in ends:
            ref |= crossing_voxel_set(o / 0.1, e / 0.1)
            assert set(traverse_ray((o / 0.1).tolist(), (e / 0.1).tolist())) == crossing_voxel_set(o / 0.1, e / 0.1)
        assert set(got) == ref

    def test_single_ray_voxels_are_ordered_by_distance(self):
        o = np.array([0.0, 0.0])
        e = np.array([3.7, 1.9])
        vox = traverse_ray(o.tolist(), e.tolist())
        centers = np.array(vox) + 0.5
        proj = centers @ (e / np.linalg.norm(e))
        assert np.all(np.diff(proj) > -1.0)
        # successive voxels are face neighbours
        steps = np.abs(np.diff(np.array(vox), axis=0)).sum(axis=1)
        assert np.all(steps == 1)

    def test_tie_steps_lower_axis_first(self):
        vox = traverse_ray([0.5, 0.5], [2.5, 2.5])
        assert vox[:2] == [(1, 0), (1, 1)]

    def test_stride2_merge_first_occurrence(self):
        parts = [{(1,): None, (2,): None}, {(2,): None, (3,): None}, {(0,): None}]
        assert list(stride2_merge(parts)) == [(1,), (2,), (3,), (0,)]
        assert stride2_merge([]) == {}


class TestIntegrateScan:
    def tree(self, **kw):
        return OccupancyTree(0.1, dim=2, max_depth=8, **kw)

    def test_single_hit(self):
        t = self.tree()
        upd = t.integrate_scan([0.05, 0.05], [[0.55, 0.05]])
        assert t.occupied_voxels() == [t.world_to_key([0.55, 0.05])]
        assert upd.new_partitions == [t.octant_of([0.55, 0.05])]
        assert t.log_odds[t.world_to_key([0.55, 0.05])] == pytest.approx(0.85)
        assert t.log_odds[t.world_to_key([0.25, 0.05])] == pytest.approx(-0.4)

    def test_second_frame_adds_no_partitions(self):
        t = self.tree()
        wall = np.column_stack([np.full(20, 1.05), np.linspace(-0.5, 0.5, 20)])
        assert t.integrate_scan([0.0, 0.0], wall).new_partitions
        assert t.integrate_scan([0.0, 0.0], wall).new_partitions == []

    def test_matches_unsorted_reference(self):
        rng = np.random.default_rng(5)
        t = self.tree()
        ref = dict(t.log_odds)
        for _ in range(3):
            o = rng.uniform(-0.3, 0.3, 2)
            pts = o + rng.uniform(-2, 2, (100, 2))
            ref = naive_integrate(t, o, pts)
            t.integrate_scan(o, pts)
            assert t.log_odds == ref

    def test_clamping(self):
        t = self.tree()
        for _ in range(10):
            t.integrate_scan([0.05, 0.05], [[0.55, 0.05]])
        assert t.log_odds[t.world_to_key([0.55, 0.05])] == t.l_max
        assert t.log_odds[t.world_to_key([0.25, 0.05])] == t.l_min

    def test_out_of_bounds_dropped(self):
        t = self.tree()
        upd = t.integrate_scan([0.0, 0.0], [[100.0, 0.0], [0.5, 0.0]])
        assert upd.dropped == 1
        assert upd.n_hit == 1

    def test_threads_do_not_change_values(self):
        rng = np.random.default_rng(2)
        a, b = self.tree(), self.tree(threads=4, batch_size=8)
        for _ in range(3):
            o = rng.uniform(-0.2, 0.2, 2)
            pts = o + rng.uniform(-2, 2, (200, 2))
            a.integrate_scan(o, pts)
            b.integrate_scan(o, pts)
        assert a.log_odds == b.log_odds


class TestOccupiedPartitions:
    def test_empty(self):
        assert OccupancyTree(0.1, dim=3, max_depth=6).occupied_partitions(5) == []

    def test_single_voxel_ancestor(self):
        t = OccupancyTree(0.1, dim=3, max_depth=6)
        t.integrate_scan([0.05, 0.05, 0.05], [[0.45, 0.05, 0.05]])
        v = t.world_to_key([0.45, 0.05, 0.05])
        assert t.occupied_partitions(3) == [OctantKey(3, tuple(i >> 3 for i in v))]

    def test_plane_spanning_four_partitions(self):
        # partitions at depth 5 are 0.2 m cubes; a plane at x = 0.05 over y, z in [0, 0.4)
        t = OccupancyTree(0.1, dim=3, max_depth=6)
        ys, zs = np.meshgrid(np.arange(0.05, 0.4, 0.1), np.arange(0.05, 0.4, 0.1))
        pts = np.column_stack([np.full(ys.size, 0.05), ys.ravel(), zs.ravel()])
        t.integrate_scan([-0.55, 0.2, 0.2], pts)
        keys = t.occupied_partitions(5)
        assert len(keys) == 4
        assert keys == sorted(keys)

    def test_depth_above_max_rejected(self):
        with pytest.raises(ValueError):
            OccupancyTree(0.1, dim=2, max_depth=4).occupied_partitions(5)

    def test_dump_format(self):
        t = OccupancyTree(0.1, dim=2, max_depth=4)
        t.integrate_scan([0.05, 0.05], [[0.35, 0.05]])
        lines = t.dump().splitlines()
        assert len(lines) == 1
        assert [float(v) for v in lines[0].split()] == pytest.approx([0.35, 0.05, 0.0, 0.85])


class TestAabb:
    def test_clip_through(self):
        box = Aabb(np.array([0.0, 0.0]), np.array([1.0, 1.0]))
        t0, t1 = box.clip_segments(np.array([[-1.0, 0.5]]), np.array([[2.0, 0.5]]))
        assert_allclose([t0[0], t1[0]], [1 / 3, 2 / 3])

    def test_clip_miss(self):
        box = Aabb(np.array([0.0, 0.0]), np.array([1.0, 1.0]))
        t0, t1 = box.clip_segments(np.array([[-1.0, 2.0]]), np.array([[2.0, 2.0]]))
        assert t0[0] > t1[0]

    def test_distance(self):
        box = Aabb(np.array([0.0, 0.0]), np.array([1.0, 1.0]))
        assert_allclose(box.distance(np.array([[2.0, 2.0], [0.5, 0.5]])), [math.sqrt(2), 0.0])
        assert_array_equal(box.contains(np.array([[1.0, 1.0]]), half_open=True), [False])

"""Surface points and meshes at the tau-level set of a partition's log-odds."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from ._mc_tables import CORNER_OFFSETS, EDGE_CORNERS, TRI_TABLE
from .bhm import LocalBhm, log_odds_and_gradient, predict_normal
from .errors import DataError, DegenerateGradientError, FlatFieldError
from .spatial import Aabb, OctantKey

# marching squares: corners (0,0) (1,0) (1,1) (0,1), edge e joins corner e and e+1
_SQ_OFFSETS = ((0, 0), (1, 0), (1, 1), (0, 1))
_SQ_EDGES = ((0, 1), (1, 2), (2, 3), (3, 0))
# ambiguous saddles keep the inside corners separated
_SQ_TABLE = {
    0: (), 15: (),
    1: ((3, 0),), 2: ((0, 1),), 3: ((3, 1),), 4: ((1, 2),),
    5: ((3, 0), (1, 2)), 6: ((0, 2),), 7: ((3, 2),), 8: ((2, 3),),
    9: ((0, 2),), 10: ((0, 1), (2, 3)), 11: ((1, 2),), 12: ((3, 1),),
    13: ((0, 1),), 14: ((3, 0),),
}


@dataclass
class SurfacePoint:
    position: np.ndarray
    normal: np.ndarray
    variance: float
    partition: OctantKey
    stamp: int = 0


@dataclass
class OctantMesh:
    """Vertices with normals and location variance; faces are index tuples
    (triangles in 3D, segments in 2D)."""

    vertices: np.ndarray
    faces: np.ndarray
    variances: np.ndarray
    normals: np.ndarray

    @classmethod
    def empty(cls, dim: int = 3) -> "OctantMesh":
        return cls(np.empty((0, dim)), np.empty((0, dim), dtype=np.int64), np.empty(0), np.empty((0, dim)))

    @property
    def dim(self) -> int:
        return self.vertices.shape[1]


def point_uncertainty(log_odds: float, grad, tau: float, beta: float) -> float:
    g2 = float(np.dot(grad, grad))
    if g2 <= 1e-16:
        raise FlatFieldError("flat field")
    return beta * (tau - log_odds) ** 2 / g2


def _grid_cells(box: Aabb, resolution: float) -> int:
    nc = float(box.size[0]) / resolution
    n = int(round(nc))
    if n < 1 or abs(nc - n) > 1e-6 * max(1.0, nc):
        raise ValueError("grid resolution must divide the partition box")
    return n


def _active_with_neighbors(active, nc: int, dim: int):
    cells = set()
    for c in active:
        c = tuple(int(v) for v in c)
        cells.add(c)
        for a in range(dim):
            for d in (-1, 1):
                nb = list(c)
                nb[a] += d
                cells.add(tuple(nb))
    return sorted(c for c in cells if all(0 <= v < nc for v in c))


def march_partition(bhm: LocalBhm, box: Aabb, grid_resolution: float, active_cells=None,
                    beta: float = 1.0, stamp: int = 0) -> tuple[OctantMesh, list[SurfacePoint]]:
    """Extract the tau-level set of ``bhm`` inside ``box``.

    Only ``active_cells`` (local cell indices) and their face neighbours are
    processed; ``None`` means every cell. Vertices sit at the linear
    interpolation of ``log_odds - tau`` along cell edges; vertices whose
    normal or variance cannot be evaluated are dropped with their faces.

    Normals come from the BHM gradient but are oriented by the crossing
    edge (from its occupied end toward its free end). The two disagree
    only next to a log-odds extremum, where the gradient direction is
    unreliable and the discrete crossing is the better witness.
    """
    dim = bhm.grid.dim
    nc = _grid_cells(box, grid_resolution)
    if active_cells is None:
        cells = list(itertools.product(range(nc), repeat=dim))
    else:
        cells = _active_with_neighbors(active_cells, nc, dim)
    if not cells:
        return OctantMesh.empty(dim), []
    step = box.size / nc
    corner_idx = np.indices((nc + 1,) * dim).reshape(dim, -1).T
    corners = box.lo + corner_idx * step
    shape = (nc + 1,) * dim
    field_vals = (bhm.log_odds(corners) - bhm.tau).reshape(shape)
    inside = field_vals >= 0.0

    if dim == 2:
        offsets, edges, table = _SQ_OFFSETS, _SQ_EDGES, None
    else:
        offsets, edges, table = CORNER_OFFSETS, EDGE_CORNERS, TRI_TABLE

    edge_vertex: dict = {}
    raw_pos: list = []
    out_dir: list = []
    faces: list = []
    for c in cells:
        cidx = [tuple(c[a] + o[a] for a in range(dim)) for o in offsets]
        case = 0
        for bit, ci in enumerate(cidx):
            if inside[ci]:
                case |= 1 << bit
        polys = _SQ_TABLE[case] if dim == 2 else [table[case][i:i + 3] for i in range(0, len(table[case]), 3)]
        if not polys:
            continue
        for poly in polys:
            vids = []
            for e in poly:
                a, b = cidx[edges[e][0]], cidx[edges[e][1]]
                ek = (a, b) if a < b else (b, a)
                vid = edge_vertex.get(ek)
                if vid is None:
                    fa, fb = field_vals[ek[0]], field_vals[ek[1]]
                    pa = box.lo + np.asarray(ek[0]) * step
                    pb = box.lo + np.asarray(ek[1]) * step
                    t = 0.5 if fa == fb else fa / (fa - fb)
                    vid = len(raw_pos)
                    edge_vertex[ek] = vid
                    raw_pos.append(pa + t * (pb - pa))
                    out_dir.append(pb - pa if fa >= 0 else pa - pb)
                vids.append(vid)
            faces.append(vids)
    if not raw_pos:
        return OctantMesh.empty(dim), []

    pos = np.asarray(raw_pos)
    lo, grad = log_odds_and_gradient(bhm, pos)
    keep = np.zeros(len(pos), bool)
    normals = np.zeros_like(pos)
    var = np.zeros(len(pos))
    for i in range(len(pos)):
        try:
            var[i] = point_uncertainty(lo[i], grad[i], bhm.tau, beta)
            n = predict_normal(bhm, pos[i])[0]
            normals[i] = -n if np.dot(n, out_dir[i]) < 0 else n
        except (FlatFieldError, DegenerateGradientError):
            continue
        keep[i] = np.isfinite(var[i])
    remap = -np.ones(len(pos), np.int64)
    remap[keep] = np.arange(int(keep.sum()))
    good_faces = []
    for f in faces:
        idx = remap[f]
        if np.any(idx < 0) or _face_measure(pos[f]) <= 1e-12:
            continue
        good_faces.append(idx)
    mesh = OctantMesh(pos[keep], np.asarray(good_faces, np.int64).reshape(-1, dim), var[keep], normals[keep])
    points = [SurfacePoint(p, n, float(v), bhm.key, stamp) for p, n, v in zip(mesh.vertices, mesh.normals, mesh.variances)]
    return mesh, points


def _face_measure(p: np.ndarray) -> float:
    if len(p) == 2:
        return float(np.linalg.norm(p[1] - p[0]))
    u, v = p[1] - p[0], p[2] - p[0]
    if len(u) == 2:
        return 0.5 * abs(u[0] * v[1] - u[1] * v[0])
    return 0.5 * float(np.linalg.norm(np.cross(u, v)))


def assemble_mesh(meshes, weld_tol: float = 1e-6, dim: int = 3) -> OctantMesh:
    """Concatenate meshes and weld vertices closer than ``weld_tol``."""
    meshes = [m for m in meshes if len(m.vertices)]
    if not meshes:
        return OctantMesh.empty(dim)
    if len(meshes) == 1:
        m = meshes[0]
        return OctantMesh(m.vertices.copy(), m.faces.copy(), m.variances.copy(), m.normals.copy())
    verts = np.concatenate([m.vertices for m in meshes])
    var = np.concatenate([m.variances for m in meshes])
    nrm = np.concatenate([m.normals for m in meshes])
    offsets = np.cumsum([0] + [len(m.vertices) for m in meshes[:-1]])
    faces = np.concatenate([m.faces + off for m, off in zip(meshes, offsets)])
    rep = np.arange(len(verts))
    for i, j in sorted(cKDTree(verts).query_pairs(weld_tol)):
        ri, rj = _find(rep, i), _find(rep, j)
        if ri != rj:
            rep[max(ri, rj)] = min(ri, rj)
    roots = np.array([_find(rep, i) for i in range(len(verts))])
    uniq, inv = np.unique(roots, return_inverse=True)
    faces = inv[faces]
    ok = np.array([len(set(f)) == len(f) for f in faces], bool) if len(faces) else np.zeros(0, bool)
    return OctantMesh(verts[uniq], faces[ok], var[uniq], nrm[uniq])


def _find(rep: np.ndarray, i: int) -> int:
    while rep[i] != i:
        rep[i] = rep[rep[i]]
        i = rep[i]
    return int(i)


def write_ply(mesh: OctantMesh, path) -> None:
    """ASCII PLY with ``x y z nx ny nz quality`` (quality = location variance)."""
    v = mesh.vertices
    n = mesh.normals
    pad = 3 - v.shape[1]
    if pad:
        v = np.hstack([v, np.zeros((len(v), pad))])
        n = np.hstack([n, np.zeros((len(n), pad))])
    is_tri = mesh.faces.shape[1] == 3
    lines = ["ply", "format ascii 1.0", f"element vertex {len(v)}",
             "property float x", "property float y", "property float z",
             "property float nx", "property float ny", "property float nz",
             "property float quality"]
    if is_tri:
        lines += [f"element face {len(mesh.faces)}", "property list uchar int vertex_indices"]
    else:
        lines += [f"element edge {len(mesh.faces)}", "property int vertex1", "property int vertex2"]
    lines.append("end_header")
    for p, q, s in zip(v, n, mesh.variances):
        lines.append(" ".join(f"{c:.9g}" for c in (*p, *q, s)))
    for f in mesh.faces:
        lines.append(("3 " if is_tri else "") + " ".join(str(int(i)) for i in f))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_ply(path, dim: int = 3) -> OctantMesh:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != "ply":
        raise DataError(f"{path}: not a PLY file")
    nv = nf = 0
    tri = True
    i = 1
    while lines[i] != "end_header":
        parts = lines[i].split()
        if parts[:2] == ["element", "vertex"]:
            nv = int(parts[2])
        elif parts[:2] == ["element", "face"]:
            nf = int(parts[2])
        elif parts[:2] == ["element", "edge"]:
            nf, tri = int(parts[2]), False
        i += 1
    body = lines[i + 1:]
    vdat = np.array([[float(x) for x in ln.split()] for ln in body[:nv]]).reshape(-1, 7)
    fdat = [[int(x) for x in ln.split()] for ln in body[nv:nv + nf]]
    faces = np.array([f[1:] if tri else f for f in fdat], np.int64).reshape(-1, 3 if tri else 2)
    return OctantMesh(vdat[:, :dim], faces, vdat[:, 6], vdat[:, 3:3 + dim])

"""File formats: sensor frames, trajectories, query exports and map snapshots.

Text formats use ``%.17g`` so that a value survives a write/read cycle
exactly and repeated writes are byte-identical.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from . import scenes
from .bhm import LocalBhm
from .config import Config
from .errors import DataError
from .gp import SdfQueryResult
from .mapping import KernelSdfMap
from .scenes import SensorFrame
from .spatial import OctantKey
from .surface import OctantMesh

FRAME_MAGIC = "# gpsdf-frame 1"
SNAPSHOT_MAGIC = b"GPSDFSNP"
SNAPSHOT_VERSION = 1
QUERY_COLUMNS = ("x", "y", "z", "sdf", "gx", "gy", "gz", "var_sdf", "var_gx", "var_gy", "var_gz", "valid")


def _g(v: float) -> str:
    return "%.17g" % v


def _floats(text: str, where: str) -> list[float]:
    try:
        return [float(t) for t in text.split()]
    except ValueError:
        raise DataError(f"{where}: expected numbers, got {text.strip()!r}") from None


# ------------------------------------------------------------------- frames

def write_frame(frame: SensorFrame, path) -> None:
    """Header ``t px py pz qw qx qy qz N`` followed by N hit rows.

    Range limit and noise seed travel in ``#`` comment lines.
    """
    q = frame.quaternion
    head = [str(int(frame.t))] + [_g(v) for v in frame.origin] + [_g(v) for v in q] + [str(len(frame.points))]
    lines = [FRAME_MAGIC, f"# max_range {_g(frame.max_range)}"]
    if frame.seed is not None:
        lines.append(f"# seed {int(frame.seed)}")
    lines += ["# t px py pz qw qx qy qz N", " ".join(head)]
    lines += [" ".join(_g(v) for v in p) for p in frame.points]
    Path(path).write_text("\n".join(lines) + "\n")


def read_frame(path) -> SensorFrame:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise DataError(f"cannot read frame {path}: {exc.strerror}") from None
    rows = [(i, ln) for i, ln in enumerate(text.splitlines(), 1) if ln.strip() and not ln.startswith("#")]
    meta = {}
    for ln in text.splitlines():
        parts = ln[1:].split() if ln.startswith("#") else []
        if len(parts) == 2 and parts[0] in ("max_range", "seed"):
            meta[parts[0]] = parts[1]
    if not rows:
        raise DataError(f"{path}: empty frame file")
    lineno, head = rows[0]
    parts = head.split()
    if len(parts) != 9:
        raise DataError(f"{path}:{lineno}: frame header needs 9 fields, got {len(parts)}")
    try:
        t = int(parts[0])
    except ValueError:
        raise DataError(f"{path}:{lineno}: bad timestamp {parts[0]!r}") from None
    vals = _floats(" ".join(parts[1:8]), f"{path}:{lineno}")
    try:
        n = int(parts[8])
        max_range = float(meta.get("max_range", "inf"))
        seed = int(meta["seed"]) if "seed" in meta else None
    except ValueError:
        raise DataError(f"{path}:{lineno}: bad point count or metadata") from None
    origin, quat = np.array(vals[:3]), np.array(vals[3:7])
    if not np.isclose(np.linalg.norm(quat), 1.0, atol=1e-6):
        raise DataError(f"{path}:{lineno}: quaternion is not unit length")
    if len(rows) - 1 != n:
        raise DataError(f"{path}: header declares {n} points, found {len(rows) - 1}")
    pts = np.empty((n, 3))
    for j, (ln_no, ln) in enumerate(rows[1:]):
        v = _floats(ln, f"{path}:{ln_no}")
        if len(v) != 3 or not all(math.isfinite(a) for a in v):
            raise DataError(f"{path}:{ln_no}: expected 3 finite coordinates")
        pts[j] = v
    w, x, y, z = quat
    rot = Rotation.from_quat([x, y, z, w]).as_matrix()
    frame = SensorFrame(t=t, origin=origin, rotation=rot, points=pts, max_range=max_range, seed=seed)
    try:
        frame.validate()
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from None
    return frame


def frame_name(t: int) -> str:
    return f"frame_{t:06d}.txt"


def list_frames(directory) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise DataError(f"{d}: not a directory")
    return sorted(d.glob("frame_*.txt"))


# --------------------------------------------------------------- trajectory

@dataclass
class Trajectory:
    """Sensor model, noise settings and the pose list of a simulated run."""

    poses: list = field(default_factory=list)
    sensor: str = "fan"
    sensor_args: dict = field(default_factory=dict)
    max_range: float = 10.0
    noise_k: float = 0.0
    seed: int = 0

    def directions(self) -> np.ndarray:
        a = self.sensor_args
        if self.sensor == "fan":
            return scenes.fan_directions(int(a.get("n", 360)), math.radians(float(a.get("fov", 360))))
        if self.sensor == "grid":
            return scenes.grid_directions(int(a.get("n_az", 64)), int(a.get("n_el", 16)),
                                          math.radians(float(a.get("fov_az", 360))),
                                          math.radians(float(a.get("fov_el", 30))))
        return scenes.pinhole_directions(int(a.get("width", 64)), int(a.get("height", 48)),
                                         math.radians(float(a.get("fov", 60))))


_SENSOR_KEYS = {
    "fan": {"n", "fov"},
    "grid": {"n_az", "n_el", "fov_az", "fov_el"},
    "pinhole": {"width", "height", "fov"},
}


def _kv(args: list[str], allowed: set, where: str) -> dict:
    out = {}
    for a in args:
        k, sep, v = a.partition("=")
        if not sep or k not in allowed:
            raise DataError(f"{where}: unknown field {k!r}")
        out[k] = v
    return out


def _look_at(origin: np.ndarray, target: np.ndarray) -> np.ndarray:
    d = target - origin
    yaw = math.atan2(d[1], d[0])
    pitch = -math.atan2(d[2], math.hypot(d[0], d[1]))
    return Rotation.from_euler("zy", [yaw, pitch]).as_matrix()


def parse_trajectory(text: str, source: str = "<trajectory>") -> Trajectory:
    """Parse the trajectory text format.

    ::

        sensor fan n=720 fov=360
        range 10
        noise k=0.0025 seed=3
        orbit center=0,0,0 radius=2 n=36 height=0
        pose 1,0,0 1,0,0,0          # position, quaternion w,x,y,z
    """
    traj = Trajectory()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        where = f"{source}:{lineno}"
        kind, *args = line.split()
        if kind == "sensor":
            if not args or args[0] not in _SENSOR_KEYS:
                raise DataError(f"{where}: sensor must be one of {sorted(_SENSOR_KEYS)}")
            traj.sensor = args[0]
            traj.sensor_args = _kv(args[1:], _SENSOR_KEYS[args[0]], where)
            for k, v in traj.sensor_args.items():
                _floats(v, f"{where}: {k}")
        elif kind == "range":
            v = _floats(" ".join(args), where)
            if len(v) != 1 or not v[0] > 0:
                raise DataError(f"{where}: range must be one positive number")
            traj.max_range = v[0]
        elif kind == "noise":
            kv = _kv(args, {"k", "seed"}, where)
            traj.noise_k = _floats(kv.get("k", "0"), where)[0]
            if traj.noise_k < 0:
                raise DataError(f"{where}: noise k must be >= 0")
            try:
                traj.seed = int(kv.get("seed", "0"))
            except ValueError:
                raise DataError(f"{where}: seed must be an integer") from None
        elif kind == "orbit":
            kv = _kv(args, {"center", "radius", "n", "height"}, where)
            c = scenes._parse_vec(kv.get("center", "0,0,0"), 3, where)
            r = _floats(kv.get("radius", "1"), where)[0]
            h = _floats(kv.get("height", "0"), where)[0]
            try:
                n = int(kv.get("n", "36"))
            except ValueError:
                raise DataError(f"{where}: n must be an integer") from None
            if not (r > 0 and n > 0):
                raise DataError(f"{where}: orbit needs radius > 0 and n > 0")
            for i in range(n):
                th = 2 * math.pi * i / n
                o = c + np.array([r * math.cos(th), r * math.sin(th), h])
                traj.poses.append((o, _look_at(o, c)))
        elif kind == "pose":
            if len(args) != 2:
                raise DataError(f"{where}: pose needs a position and a quaternion")
            o = scenes._parse_vec(args[0], 3, where)
            w, x, y, z = scenes._parse_vec(args[1], 4, where)
            if not np.isclose(math.sqrt(w * w + x * x + y * y + z * z), 1.0, atol=1e-6):
                raise DataError(f"{where}: quaternion is not unit length")
            traj.poses.append((o, Rotation.from_quat([x, y, z, w]).as_matrix()))
        else:
            raise DataError(f"{where}: unknown trajectory entry {kind!r}")
    if not traj.poses:
        raise DataError(f"{source}: trajectory has no poses")
    return traj


def simulate(scene: scenes.Scene, traj: Trajectory) -> list[SensorFrame]:
    dirs = traj.directions()
    out = []
    for t, pose in enumerate(traj.poses):
        f = scenes.cast_rays(scene, pose, dirs, traj.max_range, t=t)
        out.append(scenes.add_axial_noise(f, traj.noise_k, traj.seed + t))
    return out


# ------------------------------------------------------------------- queries

def parse_grid_spec(spec: str, dim: int) -> np.ndarray:
    """``lo:hi:res`` with comma-separated corners, e.g. ``-1,-1:1,1:0.1``.

    Each axis gets ``ceil(extent / res) + 1`` samples starting at ``lo``.
    """
    parts = spec.split(":")
    if len(parts) != 3:
        raise DataError(f"grid spec {spec!r} must look like lo:hi:res")
    lo = scenes._parse_vec(parts[0], dim, "grid spec")
    hi = scenes._parse_vec(parts[1], dim, "grid spec")
    try:
        res = float(parts[2])
    except ValueError:
        raise DataError(f"grid spec: bad resolution {parts[2]!r}") from None
    if not res > 0 or np.any(hi < lo):
        raise DataError("grid spec needs res > 0 and hi >= lo")
    axes = [lo[a] + np.arange(int(math.ceil((hi[a] - lo[a]) / res - 1e-9)) + 1) * res for a in range(dim)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, dim)


def read_points(path, dim: int) -> np.ndarray:
    rows = []
    for lineno, ln in enumerate(Path(path).read_text().splitlines(), 1):
        ln = ln.split("#", 1)[0].strip()
        if not ln:
            continue
        v = _floats(ln, f"{path}:{lineno}")
        if len(v) != dim:
            raise DataError(f"{path}:{lineno}: expected {dim} coordinates, got {len(v)}")
        rows.append(v)
    return np.asarray(rows, float).reshape(-1, dim)


def _pad3(v) -> list[float]:
    v = list(np.asarray(v, float).reshape(-1))
    return v + [0.0] * (3 - len(v))


def write_query_results(points: np.ndarray, results: list[SdfQueryResult], path) -> None:
    """One row per query; invalid rows carry ``nan`` values, ``valid = 0`` and the error."""
    dim = points.shape[1]
    lines = [f"# dim={dim}", "# " + " ".join(QUERY_COLUMNS) + " error"]
    for x, r in zip(points, results):
        row = _pad3(x) + [r.sdf] + _pad3(r.gradient) + [r.var_sdf] + _pad3(r.var_grad)
        err = r.error.replace(" ", "_") if not r.valid else "-"
        lines.append(" ".join(_g(v) for v in row) + f" {int(r.valid)} {err}")
    Path(path).write_text("\n".join(lines) + "\n")


@dataclass
class QueryTable:
    dim: int
    points: np.ndarray
    sdf: np.ndarray
    gradient: np.ndarray
    var_sdf: np.ndarray
    var_grad: np.ndarray
    valid: np.ndarray
    errors: list


def read_query_results(path) -> QueryTable:
    text = Path(path).read_text()
    m = re.search(r"^# dim=(\d)", text, re.M)
    if not m:
        raise DataError(f"{path}: missing '# dim=' header")
    dim = int(m.group(1))
    rows, errs = [], []
    for lineno, ln in enumerate(text.splitlines(), 1):
        if not ln.strip() or ln.startswith("#"):
            continue
        parts = ln.split()
        if len(parts) != len(QUERY_COLUMNS) + 1:
            raise DataError(f"{path}:{lineno}: expected {len(QUERY_COLUMNS) + 1} columns")
        rows.append(_floats(" ".join(parts[:-1]), f"{path}:{lineno}"))
        errs.append("" if parts[-1] == "-" else parts[-1].replace("_", " "))
    a = np.asarray(rows, float).reshape(-1, len(QUERY_COLUMNS))
    return QueryTable(dim, a[:, :dim], a[:, 3], a[:, 4:4 + dim], a[:, 7], a[:, 8:8 + dim],
                      a[:, 11] > 0.5, errs)


# ------------------------------------------------------------------ snapshots

class _ArrayPack:
    def __init__(self):
        self.table: list = []
        self.blobs: list = []
        self.offset = 0

    def add(self, name: str, arr) -> None:
        arr = np.ascontiguousarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        data = arr.astype(dt, copy=False).tobytes()
        self.table.append({"name": name, "dtype": dt.str, "shape": list(arr.shape),
                           "offset": self.offset, "nbytes": len(data)})
        self.blobs.append(data)
        self.offset += len(data)


def _snapshot_state(m: KernelSdfMap) -> tuple[dict, _ArrayPack]:
    pack = _ArrayPack()
    keys = sorted(m.tree.log_odds)
    pack.add("tree/keys", np.asarray(keys, np.int64).reshape(-1, m.dim))
    pack.add("tree/values", np.asarray([m.tree.log_odds[k] for k in keys], float))
    parts = []
    for i, key in enumerate(sorted(m.partitions)):
        p = m.partitions[key]
        pre = f"p{i}/"
        pack.add(pre + "mu", p.bhm.mu)
        pack.add(pre + "var", p.bhm.var)
        for name in ("vertices", "faces", "variances", "normals"):
            pack.add(pre + "mesh_" + name, getattr(p.mesh, name))
        gp = p.gp
        entry = {"key": str(key), "tau": p.bhm.tau, "march_stamp": p.march_stamp,
                 "gp": {"buffer_stamp": gp.buffer_stamp, "trained_stamp": gp.trained_stamp,
                        "jitter": gp.jitter, "has_data": gp.points is not None,
                        "has_normals": gp.normals is not None, "has_alpha": gp.alpha is not None}}
        if gp.points is not None:
            pack.add(pre + "gp_points", gp.points)
            pack.add(pre + "gp_variances", gp.variances)
        if gp.normals is not None:
            pack.add(pre + "gp_normals", gp.normals)
        if gp.alpha is not None:
            pack.add(pre + "gp_alpha", gp.alpha)
            pack.add(pre + "gp_chol", gp.chol[0])
            entry["gp"]["chol_lower"] = bool(gp.chol[1])
        parts.append(entry)
    counters = [{"key": str(k), "c0": c.c0, "c1": c.c1, "c2": c.c2, "t_b": c.t_b, "seq": c.seq}
                for k, c in sorted(m.scheduler.counters.items())]
    header = {
        "config": m.config.to_dict(),
        "last_t": m.last_t,
        "frame_count": m.frame_count,
        "stamp": m.stamp,
        "scheduler_seq": m.scheduler._seq,
        "partitions": parts,
        "counters": counters,
        "arrays": pack.table,
    }
    return header, pack


def snapshot_bytes(m: KernelSdfMap) -> bytes:
    """Magic, u32 version, u64 header length, JSON header, raw array data."""
    header, pack = _snapshot_state(m)
    hdr = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return SNAPSHOT_MAGIC + struct.pack("<IQ", SNAPSHOT_VERSION, len(hdr)) + hdr + b"".join(pack.blobs)


def save_snapshot(m: KernelSdfMap, path) -> str:
    """Write the snapshot and return its sha256 hex digest."""
    data = snapshot_bytes(m)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def snapshot_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def load_snapshot(path) -> KernelSdfMap:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read snapshot {path}: {exc.strerror}") from None
    if not data.startswith(SNAPSHOT_MAGIC) or len(data) < len(SNAPSHOT_MAGIC) + 12:
        raise DataError(f"{path}: not a snapshot file")
    version, n = struct.unpack_from("<IQ", data, len(SNAPSHOT_MAGIC))
    if version != SNAPSHOT_VERSION:
        raise DataError(f"{path}: unsupported snapshot version {version}")
    start = len(SNAPSHOT_MAGIC) + 12
    try:
        header = json.loads(data[start:start + n])
    except ValueError:
        raise DataError(f"{path}: corrupt snapshot header") from None
    base = start + n
    arrays = {}
    for e in header["arrays"]:
        lo = base + e["offset"]
        if lo + e["nbytes"] > len(data):
            raise DataError(f"{path}: truncated snapshot")
        arrays[e["name"]] = np.frombuffer(data, np.dtype(e["dtype"]), count=int(np.prod(e["shape"])),
                                          offset=lo).reshape(e["shape"]).copy()

    m = KernelSdfMap(Config.from_dict(header["config"]))
    m.last_t, m.frame_count, m.stamp = header["last_t"], header["frame_count"], header["stamp"]
    m.scheduler._seq = header["scheduler_seq"]
    for k, v in zip(arrays["tree/keys"].tolist(), arrays["tree/values"].tolist()):
        m.tree._apply(tuple(k), v, {})
    for i, entry in enumerate(header["partitions"]):
        key = OctantKey.parse(entry["key"])
        p = m._make_partition(key)
        pre = f"p{i}/"
        p.bhm = LocalBhm(key, p.bhm.grid, arrays[pre + "mu"], arrays[pre + "var"], entry["tau"])
        p.mesh = OctantMesh(arrays[pre + "mesh_vertices"], arrays[pre + "mesh_faces"],
                            arrays[pre + "mesh_variances"], arrays[pre + "mesh_normals"])
        p.march_stamp = entry["march_stamp"]
        g = entry["gp"]
        if g["has_data"]:
            p.gp.set_data(arrays[pre + "gp_points"], arrays[pre + "gp_variances"],
                          arrays.get(pre + "gp_normals"), g["buffer_stamp"])
        p.gp.buffer_stamp, p.gp.trained_stamp, p.gp.jitter = g["buffer_stamp"], g["trained_stamp"], g["jitter"]
        if g["has_alpha"]:
            p.gp.alpha = arrays[pre + "gp_alpha"]
            p.gp.chol = (arrays[pre + "gp_chol"], g["chol_lower"])
        m.partitions[key] = p
    for c in header["counters"]:
        cnt = m.scheduler.counter(OctantKey.parse(c["key"]))
        cnt.c0, cnt.c1, cnt.c2, cnt.t_b, cnt.seq = c["c0"], c["c1"], c["c2"], c["t_b"], c["seq"]
    return m

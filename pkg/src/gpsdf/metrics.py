"""Evaluation metrics: mesh reconstruction quality, SDF accuracy, timing.

All inputs are in metres; reports carry distances in centimetres and
angles in radians, matching the usual table layout.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import DataError

CM = 100.0


@dataclass
class TimingEvent:
    kind: str
    seconds: float
    count: int = 1


@dataclass
class MeshMetricsReport:
    precision: float
    recall: float
    f1: float
    completion_ratio: float
    accuracy_cm: float
    completion_cm: float
    chamfer_l1_cm: float
    threshold: float
    n_pred: int
    n_gt: int


@dataclass
class SdfMetricsReport:
    mae_all_cm: float
    mae_near_cm: float
    mae_far_cm: float
    grad_mae_all: float
    grad_mae_near: float
    grad_mae_far: float
    near_thresh: float
    n_all: int
    n_near: int
    n_far: int
    n_excluded: int


@dataclass
class TimingReport:
    frame_seconds: float
    query_1k_seconds: float
    n_frames: int
    n_queries: int


def mesh_metrics(pred_points, gt_points, threshold: float = 0.05) -> MeshMetricsReport:
    """Point-set precision/recall at ``threshold`` plus mean nearest distances.

    Accuracy averages pred-to-gt distances, completion gt-to-pred. The
    completion ratio uses the recall definition.
    """
    pred = np.asarray(pred_points, float)
    gt = np.asarray(gt_points, float)
    if pred.size == 0 or gt.size == 0:
        raise DataError("empty point set")
    if pred.ndim != 2 or gt.ndim != 2 or pred.shape[1] != gt.shape[1]:
        raise DataError("point sets must be (N, dim) arrays of equal dim")
    d_pred, _ = cKDTree(gt).query(pred)
    d_gt, _ = cKDTree(pred).query(gt)
    p = float(np.mean(d_pred <= threshold)) * 100.0
    r = float(np.mean(d_gt <= threshold)) * 100.0
    f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
    acc = float(d_pred.mean()) * CM
    comp = float(d_gt.mean()) * CM
    return MeshMetricsReport(p, r, f1, r, acc, comp, 0.5 * (acc + comp), threshold, len(pred), len(gt))


def _angles(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    cos = np.sum(a * b, axis=1) / np.maximum(na * nb, 1e-300)
    return np.arccos(np.clip(cos, -1.0, 1.0))


def _mean(x: np.ndarray) -> float:
    return float(x.mean()) if len(x) else math.nan


def sdf_metrics(pred_sdf, pred_grad, valid, gt_sdf, gt_grad, near_thresh: float = 0.2) -> SdfMetricsReport:
    """MAE of | |pred| - |gt| | and gradient angle error, split near/far.

    Invalid predictions (or ones with non-finite values) are excluded and
    counted. Regions are ``|gt| <= near_thresh`` and the rest.
    """
    pred_sdf = np.asarray(pred_sdf, float).reshape(-1)
    gt_sdf = np.asarray(gt_sdf, float).reshape(-1)
    n = len(gt_sdf)
    pred_grad = np.asarray(pred_grad, float).reshape(n, -1)
    gt_grad = np.asarray(gt_grad, float).reshape(n, -1)
    valid = np.asarray(valid, bool).reshape(-1)
    if len(pred_sdf) != n or len(valid) != n:
        raise DataError("prediction and ground-truth lists are not aligned")
    ok = valid & np.isfinite(pred_sdf) & np.all(np.isfinite(pred_grad), axis=1)
    err = np.abs(np.abs(pred_sdf[ok]) - np.abs(gt_sdf[ok]))
    ang = _angles(pred_grad[ok], gt_grad[ok])
    near = np.abs(gt_sdf[ok]) <= near_thresh
    return SdfMetricsReport(
        _mean(err) * CM, _mean(err[near]) * CM, _mean(err[~near]) * CM,
        _mean(ang), _mean(ang[near]), _mean(ang[~near]),
        near_thresh, int(ok.sum()), int(near.sum()), int((~near).sum()), int(n - ok.sum()))


_FRAME_KINDS = {"frame"}
_QUERY_KINDS = {"query", "query_batch"}


def timing_report(events) -> TimingReport:
    """Mean per-frame processing time and time per 1000 queries.

    Only frame and query events count; loading, logging and anything else
    in the log are ignored.
    """
    frames = [e.seconds for e in events if e.kind in _FRAME_KINDS]
    q_time = sum(e.seconds for e in events if e.kind in _QUERY_KINDS)
    q_count = sum(e.count for e in events if e.kind in _QUERY_KINDS)
    fpt = float(np.mean(frames)) if frames else math.nan
    qt = 1000.0 * q_time / q_count if q_count else math.nan
    return TimingReport(fpt, qt, len(frames), q_count)


def sample_mesh_surface(vertices, faces, n: int = 50_000, seed: int = 0) -> np.ndarray:
    """Uniform area-weighted samples on a triangle mesh (or segment polyline in 2D).

    A mesh without faces is returned as its vertex set.
    """
    v = np.asarray(vertices, float)
    f = np.asarray(faces, np.int64)
    if len(f) == 0:
        return v.copy()
    rng = np.random.default_rng(seed)
    p = v[f]
    if f.shape[1] == 2:
        w = np.linalg.norm(p[:, 1] - p[:, 0], axis=1)
    else:
        e1, e2 = p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]
        cr = np.cross(e1, e2) if v.shape[1] == 3 else (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])[:, None]
        w = 0.5 * np.linalg.norm(np.atleast_2d(cr), axis=-1)
    if not w.sum() > 0:
        return v.copy()
    idx = rng.choice(len(f), size=n, p=w / w.sum())
    if f.shape[1] == 2:
        t = rng.random((n, 1))
        return p[idx, 0] + t * (p[idx, 1] - p[idx, 0])
    a, b = rng.random((n, 1)), rng.random((n, 1))
    flip = (a + b) > 1
    a[flip], b[flip] = 1 - a[flip], 1 - b[flip]
    return p[idx, 0] + a * (p[idx, 1] - p[idx, 0]) + b * (p[idx, 2] - p[idx, 0])


def report_to_kv(report) -> str:
    """``key = value`` lines, one per field."""
    return "".join(f"{k} = {v!r}\n" for k, v in dataclasses.asdict(report).items())


def report_from_kv(text: str) -> dict:
    out = {}
    for line in text.splitlines():
        if "=" in line:
            k, _, v = line.partition("=")
            v = v.strip()
            out[k.strip()] = float(v) if v not in ("True", "False") else v == "True"
    return out


def report_table(report, title: str = "") -> str:
    """Two-column text table."""
    items = dataclasses.asdict(report)
    width = max(len(k) for k in items)
    lines = [title] if title else []
    for k, v in items.items():
        lines.append(f"{k:<{width}}  {v:.6g}" if isinstance(v, float) else f"{k:<{width}}  {v}")
    return "\n".join(lines) + "\n"

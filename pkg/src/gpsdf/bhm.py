"""Per-partition Bayesian Hilbert maps with diagonal weight covariance.

Each partition carries an ``m``-per-axis grid of RBF hinge points that
spans its box exactly, so the boundary hinge rows of two face neighbours
sit at identical world positions. Hinge positions are generated from a
global integer lattice to make that sharing bit-exact.

Labels are stored as 0 (free) / 1 (occupied).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import DegenerateGradientError, EMDivergedError, GridMismatchError
from .spatial import Aabb, OctantKey

CORE, MANAGED, UNMANAGED = 0, 1, 2

_PI_8 = math.pi / 8.0


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, float)))


@dataclass(frozen=True)
class HingeGrid:
    """Hinge lattice of one partition.

    ``lattice_origin`` is the world position of global hinge index 0 and
    ``index`` the partition's integer index at its depth.
    """

    index: tuple
    per_axis: int
    spacing: float
    lattice_origin: np.ndarray
    scale: float
    eps: float = 1e-3

    @property
    def dim(self) -> int:
        return len(self.index)

    @property
    def size(self) -> int:
        return self.per_axis ** self.dim

    @cached_property
    def local_index(self) -> np.ndarray:
        m = self.per_axis
        return np.indices((m,) * self.dim).reshape(self.dim, -1).T

    @cached_property
    def global_index(self) -> np.ndarray:
        return np.asarray(self.index) * (self.per_axis - 1) + self.local_index

    @cached_property
    def positions(self) -> np.ndarray:
        return self.lattice_origin + self.global_index * self.spacing

    @property
    def anchor(self) -> np.ndarray:
        return self.positions[0]

    @property
    def support_radius(self) -> float:
        """Distance beyond which a hinge's feature falls below ``eps``."""
        return self.scale * math.sqrt(-2.0 * math.log(self.eps))

    def ownership(self) -> np.ndarray:
        k = self.local_index
        last = self.per_axis - 1
        own = np.full(len(k), CORE)
        own[np.any(k == 0, axis=1)] = MANAGED
        own[np.any(k == last, axis=1)] = UNMANAGED
        return own

    @classmethod
    def for_partition(cls, key: OctantKey, edge: float, tree_origin, per_axis: int,
                      scale: float, eps: float = 1e-3) -> "HingeGrid":
        """Grid of the partition at ``tree_origin + key.index * edge``."""
        spacing = edge / (per_axis - 1)
        return cls(key.index, per_axis, spacing, np.asarray(tree_origin, float), scale, eps)


def feature_matrix(x: np.ndarray, grid: HingeGrid) -> np.ndarray:
    """RBF features of each row of ``x`` plus a trailing bias column.

    Entries below ``grid.eps`` are set to exactly zero.
    """
    x = np.atleast_2d(np.asarray(x, float))
    h = grid.positions
    d2 = np.sum((x[:, None, :] - h[None, :, :]) ** 2, axis=-1)
    phi = np.exp(-d2 / (2.0 * grid.scale**2))
    phi[phi < grid.eps] = 0.0
    return np.concatenate([phi, np.ones((len(x), 1))], axis=1)


def feature_vector(x, grid: HingeGrid) -> np.ndarray:
    return feature_matrix(np.asarray(x, float)[None, :], grid)[0]


def feature_jacobian(x: np.ndarray, grid: HingeGrid, phi: np.ndarray | None = None) -> np.ndarray:
    """d phi / d x for one position, shape (n, M+1); the bias column is zero."""
    x = np.asarray(x, float)
    if phi is None:
        phi = feature_vector(x, grid)
    diff = x[None, :] - grid.positions
    jac = np.zeros((grid.dim, grid.size + 1))
    jac[:, :-1] = -(diff * phi[:-1, None]).T / grid.scale**2
    return jac


@dataclass
class LocalBhm:
    key: OctantKey
    grid: HingeGrid
    mu: np.ndarray
    var: np.ndarray
    tau: float = 0.0
    ownership: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.ownership is None:
            self.ownership = self.grid.ownership()

    @classmethod
    def fresh(cls, key: OctantKey, grid: HingeGrid, prior_var: float = 10.0) -> "LocalBhm":
        m = grid.size + 1
        return cls(key, grid, np.zeros(m), np.full(m, prior_var))

    def copy(self) -> "LocalBhm":
        return LocalBhm(self.key, self.grid, self.mu.copy(), self.var.copy(), self.tau,
                        self.ownership.copy())

    def log_odds(self, x: np.ndarray) -> np.ndarray:
        return feature_matrix(x, self.grid) @ self.mu


@dataclass
class BhmDataset:
    positions: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def occupied(self) -> np.ndarray:
        return self.positions[self.labels == 1]


def generate_dataset(origin, hits, sampling_box: Aabb, free_spacing: float) -> BhmDataset:
    """Occupied and free samples from rays ``origin -> hits`` inside a box.

    Free samples sit at ``hit - j * free_spacing`` for j >= 1, keeping those
    that fall inside the ray segment clipped to the box. Anchoring at the hit
    makes the sample lattice along a ray the same for every box. Hits inside
    the box become occupied samples. Rays that neither hit inside nor cross
    the box contribute nothing.
    """
    if free_spacing <= 0:
        raise ValueError("free_spacing must be positive")
    o = np.asarray(origin, float)
    hits = np.asarray(hits, float).reshape(-1, len(o))
    if len(hits) == 0:
        return BhmDataset(np.empty((0, len(o))), np.empty(0, dtype=np.int8))
    t0, t1 = sampling_box.clip_segments(np.broadcast_to(o, hits.shape), hits)
    diff = hits - o
    length = np.linalg.norm(diff, axis=1)
    crosses = (t0 <= t1) & (length > 0)
    # free samples sit at hit - j * spacing, j >= 1, so the lattice along a
    # ray does not depend on the box; keep the j whose sample lies in the chord
    t0 = np.where(crosses, t0, 1.0)
    t1 = np.where(crosses, t1, 1.0)
    back_near = np.maximum(length - t1 * length, free_spacing)
    back_far = length - t0 * length
    j_lo = np.ceil(back_near / free_spacing - 1e-9).astype(np.int64)
    j_hi = np.floor(back_far / free_spacing + 1e-9).astype(np.int64)
    cnt = np.where(crosses & (j_hi >= j_lo), j_hi - j_lo + 1, 0)
    ray = np.repeat(np.arange(len(hits)), cnt)
    j = np.arange(cnt.sum()) - np.repeat(np.cumsum(cnt) - cnt, cnt) + j_lo[ray]
    dist = length[ray] - j * free_spacing
    unit = diff[ray] / length[ray, None]
    free = o + unit * dist[:, None]
    occ = hits[sampling_box.contains(hits)]
    pos = np.concatenate([occ, free])
    lab = np.concatenate([np.ones(len(occ), np.int8), np.zeros(len(free), np.int8)])
    return BhmDataset(pos, lab)


def _abs_lambda2(xi: np.ndarray) -> np.ndarray:
    """|(1/2 - sigmoid(xi)) / xi|, with its xi -> 0 limit 1/4."""
    xi = np.abs(xi)
    small = xi < 1e-6
    safe = np.where(small, 1.0, xi)
    return np.where(small, 0.25, np.abs((0.5 - sigmoid(safe)) / safe))


def em_update(bhm: LocalBhm, data: BhmDataset, iterations: int = 1) -> LocalBhm:
    """Sequential variational EM update of (mu, diagonal var) in place.

    The previous posterior acts as the prior. Each iteration runs the
    E-step (precision and mean) followed by the M-step (xi), starting from
    xi = 1.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    if len(data) == 0:
        return bhm
    phi = feature_matrix(data.positions, bhm.grid)
    phi2 = phi * phi
    prior_prec = 1.0 / bhm.var
    prior_eta = prior_prec * bhm.mu
    target = phi.T @ (data.labels.astype(float) - 0.5)
    xi = np.ones(len(data))
    mu, var = bhm.mu, bhm.var
    for _ in range(iterations):
        prec = prior_prec + phi2.T @ _abs_lambda2(xi)
        var = 1.0 / prec
        mu = var * (prior_eta + target)
        xi = np.sqrt(phi2 @ var + (phi @ mu) ** 2)
    if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(var)) and np.all(var > 0)):
        raise EMDivergedError("EM diverged")
    bhm.mu, bhm.var = mu, var
    return bhm


def predict_occupancy(bhm: LocalBhm, x) -> tuple:
    """(probability, log-odds, phi^T Sigma phi) with the probit-style correction."""
    x = np.asarray(x, float)
    single = x.ndim == 1
    phi = feature_matrix(x, bhm.grid)
    lo = phi @ bhm.mu
    vt = (phi * phi) @ bhm.var
    p = sigmoid(lo / np.sqrt(1.0 + _PI_8 * vt))
    if single:
        return float(p[0]), float(lo[0]), float(vt[0])
    return p, lo, vt


def log_odds_and_gradient(bhm: LocalBhm, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Log-odds and its spatial gradient for each row of ``x``."""
    x = np.atleast_2d(np.asarray(x, float))
    phi = feature_matrix(x, bhm.grid)
    lo = phi @ bhm.mu
    w = phi[:, :-1] * bhm.mu[:-1]
    h = bhm.grid.positions
    grad = -(w.sum(axis=1)[:, None] * x - w @ h) / bhm.grid.scale**2
    return lo, grad


def predict_normal(bhm: LocalBhm, x, tol: float = 1e-8) -> tuple[np.ndarray, np.ndarray]:
    """Outward surface normal (against the occupancy gradient) and its covariance."""
    x = np.asarray(x, float)
    phi = feature_vector(x, bhm.grid)
    jac = feature_jacobian(x, bhm.grid, phi)
    z = jac @ bhm.mu
    zn = float(np.linalg.norm(z))
    if zn <= tol:
        raise DegenerateGradientError("degenerate gradient")
    n = -z / zn
    proj = (np.eye(len(x)) - np.outer(n, n)) / zn
    g = jac.T @ proj
    cov = g.T @ (bhm.var[:, None] * g)
    return n, 0.5 * (cov + cov.T)


def update_sign_threshold(tau: float, hit_log_odds, alpha_lr: float) -> float:
    if not 0.0 < alpha_lr <= 1.0:
        raise ValueError("alpha_lr must lie in (0, 1]")
    hits = np.asarray(hit_log_odds, float)
    if hits.size == 0:
        return tau
    return (1.0 - alpha_lr) * tau + alpha_lr * float(hits.mean())


def predict_sign(bhm: LocalBhm, x):
    lo = bhm.log_odds(np.atleast_2d(x))
    s = np.where(lo < bhm.tau, 1, -1)
    return int(s[0]) if np.asarray(x).ndim == 1 else s


def sync_weights(bhm: LocalBhm, neighbors, tol: float = 1e-9) -> LocalBhm:
    """Copy each unmanaged hinge's (mu, var) from the neighbour that owns it."""
    if not neighbors:
        return bhm
    m = bhm.grid.per_axis
    by_index = {tuple(nb.key.index): nb for nb in neighbors}
    gidx = bhm.grid.global_index
    pos = bhm.grid.positions
    for i in np.flatnonzero(bhm.ownership == UNMANAGED):
        owner = tuple(int(v) for v in gidx[i] // (m - 1))
        nb = by_index.get(owner)
        if nb is None:
            continue
        if nb.grid.per_axis != m:
            raise GridMismatchError("grid mismatch")
        local = gidx[i] - np.asarray(owner) * (m - 1)
        j = int(np.ravel_multi_index(tuple(local), (m,) * len(local)))
        if np.max(np.abs(nb.grid.positions[j] - pos[i])) > tol:
            raise GridMismatchError("grid mismatch")
        bhm.mu[i] = nb.mu[j]
        bhm.var[i] = nb.var[j]
    return bhm

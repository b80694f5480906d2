"""Log-GP unsigned distance regression with softmin variance propagation.

A GP is fitted to ``f = 1`` at surface samples; the posterior mean decays
like the kernel away from the surface, so inverting the kernel profile
recovers distance. Kernel entries are evaluated relative to the nearest
training sample (the ``log_gamma`` shift below) so that the posterior stays
representable at distances where the raw kernel underflows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .errors import (DegenerateGradientError, IllConditionedError, PosteriorUnderflowError,
                     QueryOnSampleError, StaleModelError)
from .spatial import Aabb, OctantKey

RBF = "rbf"
MATERN32 = "matern32"
_SQRT3 = math.sqrt(3.0)


@dataclass(frozen=True)
class KernelSpec:
    kind: str = RBF
    scale: float = math.sqrt(1.0 / 1000.0)

    def __post_init__(self):
        if self.kind not in (RBF, MATERN32):
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if not self.scale > 0:
            raise ValueError("kernel scale must be positive")

    @classmethod
    def from_rate(cls, kind: str, rate: float) -> "KernelSpec":
        """RBF: rate = 1/(2 l^2); Matern 3/2: rate = sqrt(3)/l."""
        if kind == RBF:
            return cls(kind, math.sqrt(1.0 / (2.0 * rate)))
        return cls(kind, _SQRT3 / rate)

    @property
    def rate(self) -> float:
        if self.kind == RBF:
            return 1.0 / (2.0 * self.scale**2)
        return _SQRT3 / self.scale

    def log_gamma(self, d):
        """log of the shift factor that makes the kernel equal 1 at distance d."""
        if self.kind == RBF:
            return np.square(d) / (2.0 * self.scale**2)
        return _SQRT3 * np.asarray(d) / self.scale


def kernel_eval(spec: KernelSpec, r):
    r = np.asarray(r, float)
    if spec.kind == RBF:
        out = np.exp(-(r * r) / (2.0 * spec.scale**2))
    else:
        c = _SQRT3 * r / spec.scale
        out = (1.0 + c) * np.exp(-c)
    return float(out) if out.ndim == 0 else out


def _scaled_kernel(spec: KernelSpec, r: np.ndarray, d: float) -> tuple[np.ndarray, np.ndarray]:
    """gamma * k(r) and gamma * dk/dr / r, both as one bounded exponential."""
    if spec.kind == RBF:
        k = np.exp((d - r) * (d + r) / (2.0 * spec.scale**2))
        return k, -k / spec.scale**2
    c = _SQRT3 / spec.scale
    e = np.exp(c * (d - r))
    return (1.0 + c * r) * e, -(c * c) * e


def recover_udf(f_scaled: float, spec: KernelSpec, d_anchor: float) -> float:
    """Invert the shifted kernel profile: distance from the scaled posterior mean."""
    if not f_scaled > 0:
        raise PosteriorUnderflowError("posterior underflow")
    lf = math.log(f_scaled)
    if spec.kind == RBF:
        r2 = -2.0 * spec.scale**2 * lf + d_anchor * d_anchor
        return math.sqrt(r2) if r2 > 0 else 0.0
    return max(0.0, -spec.scale / _SQRT3 * lf + d_anchor)


@dataclass
class ScaledPosterior:
    mean: float
    grad: np.ndarray
    anchor_distance: float
    log_gamma: float
    nearest: int

    @property
    def gamma(self) -> float:
        return math.exp(self.log_gamma) if self.log_gamma < 709 else math.inf


@dataclass
class SdfGp:
    key: OctantKey
    collection_box: Aabb
    kernel: KernelSpec
    points: np.ndarray = None
    variances: np.ndarray = None
    normals: np.ndarray = None
    alpha: np.ndarray = None
    chol: tuple = None
    jitter: float = 0.0
    buffer_stamp: int = -1
    trained_stamp: int = -1

    @property
    def trained(self) -> bool:
        return self.alpha is not None and self.trained_stamp == self.buffer_stamp

    @property
    def size(self) -> int:
        return 0 if self.points is None else len(self.points)

    def set_data(self, points, variances, normals=None, stamp: int = 0) -> None:
        self.points = np.asarray(points, float)
        self.variances = np.asarray(variances, float)
        self.normals = None if normals is None else np.asarray(normals, float)
        self.buffer_stamp = stamp


def cap_training_set(points: np.ndarray, variances: np.ndarray, cap: int) -> np.ndarray:
    """Indices of at most ``cap`` points by farthest-point selection.

    Distances are divided by ``1 + var / median(var)`` so confident points
    win ties in coverage. Deterministic.
    """
    n = len(points)
    if n <= cap:
        return np.arange(n)
    med = float(np.median(variances))
    w = 1.0 / (1.0 + variances / med) if med > 0 else np.ones(n)
    first = int(np.lexsort((np.arange(n), variances))[0])
    chosen = [first]
    dist = np.linalg.norm(points - points[first], axis=1)
    for _ in range(cap - 1):
        score = dist * w
        score[chosen] = -1.0
        nxt = int(np.argmax(score))
        chosen.append(nxt)
        dist = np.minimum(dist, np.linalg.norm(points - points[nxt], axis=1))
    return np.sort(np.asarray(chosen))


def train(gp: SdfGp, jitter: float = 1e-8, max_jitter: float = 1e-4) -> SdfGp:
    """Factorise K + Sigma and solve for (K + Sigma)^-1 1."""
    if gp.size < 1:
        raise ValueError("GP needs at least one training point")
    x = gp.points
    r = np.sqrt(np.maximum(np.sum((x[:, None, :] - x[None, :, :]) ** 2, axis=-1), 0.0))
    k = kernel_eval(gp.kernel, r)
    base = k + np.diag(gp.variances)
    j = jitter
    while True:
        try:
            c = cho_factor(base + j * np.eye(len(x)), lower=True, check_finite=True)
            break
        except LinAlgError:
            j *= 10.0
            if j > max_jitter * (1 + 1e-12):
                raise IllConditionedError("ill-conditioned kernel matrix") from None
    gp.chol = c
    gp.jitter = j
    gp.alpha = cho_solve(c, np.ones(len(x)))
    gp.trained_stamp = gp.buffer_stamp
    return gp


def predict_scaled(gp: SdfGp, x) -> ScaledPosterior:
    """Posterior mean and gradient with every kernel entry shifted by the
    nearest-sample distance."""
    if not gp.trained:
        raise StaleModelError("stale model")
    x = np.asarray(x, float)
    diff = x - gp.points
    r = np.sqrt(np.sum(diff * diff, axis=1))
    near = int(np.argmin(r))
    d = float(r[near])
    k, dk = _scaled_kernel(gp.kernel, r, d)
    mean = float(k @ gp.alpha)
    grad = (dk * gp.alpha) @ diff
    return ScaledPosterior(mean, grad, d, float(gp.kernel.log_gamma(d)), near)


def posterior_variance(gp: SdfGp, x) -> float:
    """Unscaled GP variance of f at x (diagnostic only)."""
    post = predict_scaled(gp, x)
    r = np.linalg.norm(np.asarray(x, float) - gp.points, axis=1)
    k, _ = _scaled_kernel(gp.kernel, r, post.anchor_distance)
    quad = float(k @ cho_solve(gp.chol, k))
    return 1.0 - math.exp(-2.0 * post.log_gamma) * quad


def udf_gradient(gp: SdfGp, x, post: ScaledPosterior | None = None) -> np.ndarray:
    post = predict_scaled(gp, x) if post is None else post
    nrm = float(np.linalg.norm(post.grad))
    if not nrm > 1e-12:
        raise DegenerateGradientError("gradient undefined")
    return -post.grad / nrm


def predict_udf(gp: SdfGp, x) -> tuple[float, np.ndarray | None, ScaledPosterior]:
    """(udf, unit gradient or None, posterior).

    When the scaled posterior is not positive (oscillating weights of a
    dense, nearly noiseless training set can do that far from the data)
    both distance and direction fall back to the nearest training sample.
    """
    post = predict_scaled(gp, x)
    try:
        u = recover_udf(post.mean, gp.kernel, post.anchor_distance)
    except PosteriorUnderflowError:
        u = post.anchor_distance
        if u > 0:
            return u, (np.asarray(x, float) - gp.points[post.nearest]) / u, post
        return u, None, post
    try:
        g = udf_gradient(gp, x, post)
    except DegenerateGradientError:
        g = None
    return u, g, post


# ----------------------------------------------------------- softmin algebra

def _softmin_parts(x, points, alpha_softmin):
    if not alpha_softmin > 0:
        raise ValueError("alpha_softmin must be positive")
    x = np.asarray(x, float)
    pts = np.asarray(points, float).reshape(-1, len(x))
    if len(pts) == 0:
        raise ValueError("softmin needs at least one point")
    diff = x - pts
    z = np.sqrt(np.sum(diff * diff, axis=1))
    w = np.exp(-alpha_softmin * (z - z.min()))
    s = w / w.sum()
    return diff, z, s


def softmin_udf(x, points, alpha_softmin: float) -> tuple[float, np.ndarray]:
    _, z, s = _softmin_parts(x, points, alpha_softmin)
    return float(s @ z), s


def _softmin_terms(x, points, alpha_softmin):
    diff, z, s = _softmin_parts(x, points, alpha_softmin)
    if np.any(z <= 0):
        raise QueryOnSampleError("query on surface sample")
    h = float(s @ z)
    v = diff / z[:, None]
    lw = s * (alpha_softmin * (h - z) + 1.0)
    return v, z, s, h, lw


def softmin_gradient(x, points, alpha_softmin: float) -> np.ndarray:
    """d h / d x for the softmin distance h."""
    v, _, _, _, lw = _softmin_terms(x, points, alpha_softmin)
    return lw @ v


def udf_variance(x, points, variances, alpha_softmin: float) -> float:
    """First-order variance of the softmin distance from point variances."""
    _, _, _, _, lw = _softmin_terms(x, points, alpha_softmin)
    return float(np.sum(lw * lw * np.asarray(variances, float)))


def softmin_gradient_jacobians(x, points, alpha_softmin: float) -> np.ndarray:
    """J_i[k, j] = d g_k / d x_{i,j} for every point i, shape (N, n, n)."""
    v, z, s, _, lw = _softmin_terms(x, points, alpha_softmin)
    g = lw @ v
    vs = s @ v
    w = lw[:, None] * (v - vs) + s[:, None] * (v - g)
    n = v.shape[1]
    outer_vv = v[:, :, None] * v[:, None, :]
    return (alpha_softmin * w[:, :, None] * v[:, None, :]
            + (lw / z)[:, None, None] * (outer_vv - np.eye(n)))


def grad_variance(x, points, variances, alpha_softmin: float) -> np.ndarray:
    """Per-component first-order variance of the softmin gradient."""
    jac = softmin_gradient_jacobians(x, points, alpha_softmin)
    return np.einsum("ikj,i->k", jac * jac, np.asarray(variances, float))


# ------------------------------------------------------------------ fusion

@dataclass
class UdfCandidate:
    key: OctantKey
    udf: float
    gradient: np.ndarray
    var_udf: float
    var_grad: np.ndarray


@dataclass
class SdfQueryResult:
    sdf: float
    gradient: np.ndarray
    var_sdf: float
    var_grad: np.ndarray
    sign: int
    keys: list = field(default_factory=list)
    selected: OctantKey | None = None
    sign_source: str = "bhm"
    valid: bool = True
    error: str = ""

    @classmethod
    def invalid(cls, dim: int, error: str) -> "SdfQueryResult":
        nan = np.full(dim, np.nan)
        return cls(math.nan, nan, math.nan, nan.copy(), 0, valid=False, error=error, sign_source="")


def fuse_query(candidates, sign: int) -> SdfQueryResult:
    """Keep the candidate with the smallest distance and apply the sign."""
    if not candidates:
        raise ValueError("fuse_query needs at least one candidate")
    best = min(candidates, key=lambda c: (c.udf, c.key))
    return SdfQueryResult(
        sdf=sign * best.udf,
        gradient=sign * np.asarray(best.gradient, float),
        var_sdf=best.var_udf,
        var_grad=np.asarray(best.var_grad, float),
        sign=sign,
        keys=[c.key for c in candidates],
        selected=best.key,
    )

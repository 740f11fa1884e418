"""Coherent point drift registration, rigid and non-rigid.

EM over a Gaussian mixture whose centroids are the moving cloud; a uniform
component absorbs outliers.  Both clouds are normalized by one pooled
similarity transform (zero mean, unit RMS radius) so the default kernel and
regularization weights are unit-free; results are reported in the original
coordinates.  No randomness anywhere: identical inputs give identical output.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import DegenerateInputError, InvalidArgumentError, RegistrationError
from .geometry import PointCloud, RigidTransform

_SIGMA2_FLOOR = 1e-12
_SIGMA2_DONE = 1e-10


@dataclass(frozen=True)
class CpdConfig:
    outlier_weight: float = 0.1
    max_iters: int = 150
    tol: float = 1e-6
    beta: float = 2.0       # Gaussian kernel width, non-rigid only (normalized units)
    lam: float = 3.0        # smoothness weight, non-rigid only

    def __post_init__(self) -> None:
        if not 0.0 <= self.outlier_weight < 1.0:
            raise InvalidArgumentError("outlier_weight must be in [0, 1)")
        if self.max_iters < 1:
            raise InvalidArgumentError("max_iters must be positive")
        if not self.tol > 0.0:
            raise InvalidArgumentError("tol must be positive")
        if not (self.beta > 0.0 and self.lam > 0.0):
            raise InvalidArgumentError("beta and lam must be positive")


@dataclass(frozen=True)
class RigidResult:
    transform: RigidTransform
    scale: float            # estimated isotropic scale, diagnostic only
    sigma2: float
    iters: int
    converged: bool
    nll_trace: np.ndarray
    sigma2_trace: np.ndarray


@dataclass(frozen=True)
class NonRigidResult:
    displaced: PointCloud
    correspondence: np.ndarray   # (M,) index of max-posterior fixed point
    posterior: np.ndarray        # (M,) posterior value at that index
    sigma2: float
    iters: int
    converged: bool
    nll_trace: np.ndarray
    sigma2_trace: np.ndarray


def _pooled_normalization(moving: PointCloud, fixed: PointCloud):
    pts = np.vstack([moving.points, fixed.points])
    mu = pts.mean(axis=0)
    scale = float(np.sqrt(np.mean(np.sum((pts - mu) ** 2, axis=1))))
    if scale < 1e-12:
        raise DegenerateInputError("point clouds collapse to a single point")
    return (moving.points - mu) / scale, (fixed.points - mu) / scale, mu, scale


def _check_nondegenerate(cloud: PointCloud, name: str) -> None:
    sv = np.linalg.svd(cloud.points - cloud.points.mean(axis=0), compute_uv=False)
    if sv[2] < 1e-9 * max(sv[0], 1e-30) or sv[0] < 1e-12:
        raise DegenerateInputError(f"{name} cloud is degenerate (rank < 3)")


def _initial_sigma2(y: np.ndarray, x: np.ndarray) -> float:
    # (1 / D M N) * sum_{m,n} |x_n - y_m|^2, computed via moments
    ex2 = np.mean(np.sum(x * x, axis=1))
    ey2 = np.mean(np.sum(y * y, axis=1))
    return float((ex2 + ey2 - 2.0 * x.mean(axis=0) @ y.mean(axis=0)) / 3.0)


def register_rigid(moving: PointCloud, fixed: PointCloud, cfg: CpdConfig | None = None) -> RigidResult:
    """Estimate the similarity transform aligning ``moving`` onto ``fixed``.

    The returned :class:`RigidTransform` carries rotation and translation
    only; the isotropic scale is reported separately and is not meant to be
    applied when preparing shape-model training data.
    """
    cfg = cfg or CpdConfig()
    _check_nondegenerate(moving, "moving")
    _check_nondegenerate(fixed, "fixed")
    y, x, mu, pool_scale = _pooled_normalization(moving, fixed)

    rot = np.eye(3)
    s = 1.0
    t = np.zeros(3)
    sigma2 = _initial_sigma2(y, x)
    nll_prev = np.inf
    trace = []
    sigma2_trace = [sigma2]
    converged = False
    iters = 0

    for iters in range(1, cfg.max_iters + 1):
        ty = s * (y @ rot.T) + t
        p, _, nll = _kernels.cpd_estep(ty, x, sigma2, cfg.outlier_weight)
        trace.append(nll)
        if np.isfinite(nll_prev) and abs(nll_prev - nll) < cfg.tol * abs(nll_prev):
            converged = True
            break
        nll_prev = nll

        p1 = p.sum(axis=1)
        pt1 = p.sum(axis=0)
        n_p = p1.sum()
        if n_p < 1e-300:
            raise RegistrationError("all points classified as outliers; lower outlier_weight")
        mu_x = (x.T @ pt1) / n_p
        mu_y = (y.T @ p1) / n_p
        xh = x - mu_x
        yh = y - mu_y
        a = (p @ xh).T @ yh
        u, _, vt = np.linalg.svd(a)
        cdet = np.ones(3)
        cdet[2] = np.linalg.det(u @ vt)
        rot = u @ np.diag(cdet) @ vt
        denom_s = float(np.sum(p1 * np.sum(yh * yh, axis=1)))
        tr_ar = float(np.trace(a.T @ rot))
        s = tr_ar / denom_s
        t = mu_x - s * (rot @ mu_y)
        sigma2 = (float(np.sum(pt1 * np.sum(xh * xh, axis=1))) - s * tr_ar) / (3.0 * n_p)
        if sigma2 < _SIGMA2_FLOOR:
            sigma2 = _SIGMA2_FLOOR
        sigma2_trace.append(sigma2)
        if sigma2 <= _SIGMA2_DONE:
            converged = True
            break

    # undo pooled normalization: both clouds shared one similarity transform,
    # so rotation and scale carry over and only translation is remapped
    t_orig = pool_scale * t + mu - s * (rot @ mu)
    xf = RigidTransform.from_matrix(rot, t_orig)
    return RigidResult(
        transform=xf,
        scale=float(s),
        sigma2=float(sigma2 * pool_scale**2),
        iters=iters,
        converged=converged,
        nll_trace=np.asarray(trace),
        sigma2_trace=np.asarray(sigma2_trace) * pool_scale**2,
    )


def register_nonrigid(moving: PointCloud, fixed: PointCloud, cfg: CpdConfig | None = None) -> NonRigidResult:
    """Warp ``moving`` onto ``fixed`` with a Gaussian-kernel displacement field."""
    cfg = cfg or CpdConfig()
    _check_nondegenerate(moving, "moving")
    _check_nondegenerate(fixed, "fixed")
    y, x, mu, pool_scale = _pooled_normalization(moving, fixed)
    m = y.shape[0]

    g = _kernels.gaussian_affinity(y, y, cfg.beta**2)
    w_coef = np.zeros((m, 3))
    sigma2 = _initial_sigma2(y, x)
    nll_prev = np.inf
    trace = []
    sigma2_trace = [sigma2]
    converged = False
    iters = 0
    p = None

    for iters in range(1, cfg.max_iters + 1):
        ty = y + g @ w_coef
        p, _, nll = _kernels.cpd_estep(ty, x, sigma2, cfg.outlier_weight)
        trace.append(nll)
        if np.isfinite(nll_prev) and abs(nll_prev - nll) < cfg.tol * abs(nll_prev):
            converged = True
            break
        nll_prev = nll

        p1 = p.sum(axis=1)
        pt1 = p.sum(axis=0)
        n_p = p1.sum()
        if n_p < 1e-300:
            raise RegistrationError("all points classified as outliers; lower outlier_weight")
        lhs = p1[:, None] * g + (cfg.lam * sigma2) * np.eye(m)
        rhs = p @ x - p1[:, None] * y
        try:
            w_coef = np.linalg.solve(lhs, rhs)
        except np.linalg.LinAlgError as exc:
            raise RegistrationError(
                f"singular M-step system ({exc}); increase lam to regularize"
            ) from exc
        if not np.all(np.isfinite(w_coef)):
            raise RegistrationError("non-finite M-step solution; increase lam to regularize")

        ty = y + g @ w_coef
        xpx = float(np.sum(pt1 * np.sum(x * x, axis=1)))
        cross = float(np.sum((p @ x) * ty))
        typty = float(np.sum(p1 * np.sum(ty * ty, axis=1)))
        sigma2 = (xpx - 2.0 * cross + typty) / (3.0 * n_p)
        if sigma2 < _SIGMA2_FLOOR:
            sigma2 = _SIGMA2_FLOOR
        sigma2_trace.append(sigma2)
        if sigma2 <= _SIGMA2_DONE:
            ty_final = ty
            p, _, nll = _kernels.cpd_estep(ty_final, x, sigma2, cfg.outlier_weight)
            trace.append(nll)
            converged = True
            break

    ty = y + g @ w_coef
    corr = np.argmax(p, axis=1)          # ties resolved to the lowest index
    post = p[np.arange(m), corr]
    displaced = PointCloud(ty * pool_scale + mu)
    return NonRigidResult(
        displaced=displaced,
        correspondence=corr,
        posterior=post,
        sigma2=float(sigma2 * pool_scale**2),
        iters=iters,
        converged=converged,
        nll_trace=np.asarray(trace),
        sigma2_trace=np.asarray(sigma2_trace) * pool_scale**2,
    )


def establish_correspondence(
    reference: PointCloud, population: list[PointCloud], cfg: CpdConfig | None = None
) -> list[PointCloud]:
    """Correspond every population member to the reference ordering.

    Per member: rigid-align the member to the reference (rotation and
    translation only), then warp the reference onto the aligned member.  The
    warped reference is the corresponded instance; every output has the
    reference's point count and ordering.
    """
    cfg = cfg or CpdConfig()
    if not population:
        raise InvalidArgumentError("population is empty")
    out = []
    for idx, member in enumerate(population):
        try:
            rigid = register_rigid(member, reference, cfg)
            aligned = PointCloud(member.points @ rigid.transform.matrix.T + rigid.transform.t)
            nonrigid = register_nonrigid(reference, aligned, cfg)
        except Exception as exc:
            raise RegistrationError(f"population member {idx}: {exc}") from exc
        out.append(nonrigid.displaced)
    return out

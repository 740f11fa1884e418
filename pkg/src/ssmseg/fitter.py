"""Shape-to-probability-map fitting.

The objective rewards the probability mass captured by the shape's binary
mask and penalizes large mode weights; it is maximized with bounded global
particle swarm optimization over mode weights plus rigid pose.  Every run is
fully determined by its seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DegenerateInputError, InvalidArgumentError
from .geometry import (
    PointCloud,
    RigidTransform,
    TriMesh,
    Volume3D,
    VolumeKind,
    voxelize,
)
from .ssm import ShapeModel, reconstruct

NORM_KINDS = ("l1_sum", "l2")


@dataclass(frozen=True)
class FitParams:
    """Mode weights plus rigid pose; the full search vector is [w, t, theta]."""

    w: np.ndarray
    pose: RigidTransform

    def __post_init__(self) -> None:
        w = np.asarray(self.w, np.float64).reshape(-1)
        if not np.all(np.isfinite(w)):
            raise InvalidArgumentError("mode weights must be finite")
        w.setflags(write=False)
        object.__setattr__(self, "w", w)

    @property
    def dim(self) -> int:
        return self.w.size + 6

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.w, self.pose.t, self.pose.theta])

    @classmethod
    def from_vector(cls, vec: np.ndarray, n_modes: int) -> "FitParams":
        vec = np.asarray(vec, np.float64).reshape(-1)
        if vec.size != n_modes + 6:
            raise InvalidArgumentError(f"expected {n_modes + 6} parameters, got {vec.size}")
        return cls(vec[:n_modes], RigidTransform(vec[n_modes : n_modes + 3], vec[n_modes + 3 :]))


@dataclass(frozen=True)
class FitConfig:
    alpha: float = 0.1
    norm_kind: str = "l1_sum"
    swarm_size: int = 40
    max_iters: int = 200
    inertia: float = 0.7298
    cognitive: float = 1.49618
    social: float = 1.49618
    bounds: np.ndarray | None = None   # (D, 2) rows of [lo, hi]; None = derive from model+map
    seed: int = 0
    stall_iters: int = 40
    mahalanobis: bool = False          # scale each weight by 1/sqrt(eigenvalue) in the penalty

    def __post_init__(self) -> None:
        if self.alpha < 0.0:
            raise InvalidArgumentError("alpha must be non-negative")
        if self.norm_kind not in NORM_KINDS:
            raise InvalidArgumentError(f"norm_kind must be one of {NORM_KINDS}")
        if self.swarm_size < 1 or self.max_iters < 1:
            raise InvalidArgumentError("swarm_size and max_iters must be positive")
        if self.bounds is not None:
            b = np.asarray(self.bounds, np.float64)
            if b.ndim != 2 or b.shape[1] != 2 or not np.all(np.isfinite(b)):
                raise InvalidArgumentError("bounds must be a finite (D, 2) array")
            if not np.all(b[:, 0] < b[:, 1]):
                raise InvalidArgumentError("each lower bound must be below its upper bound")
            b.setflags(write=False)
            object.__setattr__(self, "bounds", b)


@dataclass(frozen=True)
class FitResult:
    params: FitParams
    utility: float
    mask: Volume3D
    trace: np.ndarray        # global best after initialization and each iteration
    evaluations: int
    converged: bool
    diagnostics: dict = field(default_factory=dict)


def shape_instance(model: ShapeModel, params: FitParams) -> PointCloud:
    """World-space instance: reconstruct, rotate about the mean centroid, translate."""
    cloud = reconstruct(model, params.w)
    center = model.mean.reshape(-1, 3).mean(axis=0)
    pts = (cloud.points - center) @ params.pose.matrix.T + center + params.pose.t
    return PointCloud(pts)


def _weight_norm(model: ShapeModel, w: np.ndarray, cfg: FitConfig) -> float:
    if cfg.mahalanobis and w.size:
        return float(np.linalg.norm(w / np.sqrt(model.eigenvalues)))
    return float(np.linalg.norm(w))


def evaluate(
    model: ShapeModel, prob_map: Volume3D, params: FitParams, cfg: FitConfig
) -> tuple[float, Volume3D, dict]:
    """Utility value, the rasterized mask, and diagnostic flags."""
    if prob_map.kind is not VolumeKind.PROBABILITY:
        raise InvalidArgumentError("map must be a probability volume")
    if params.w.size != model.n_modes:
        raise InvalidArgumentError(f"expected {model.n_modes} weights, got {params.w.size}")
    instance = shape_instance(model, params)
    mesh = TriMesh(instance, model.reference_mesh.faces)
    mask = voxelize(mesh, prob_map, validate=False)
    flags = {}
    if mask.meta.get("empty_outside_grid"):
        flags["out_of_grid"] = True
    inside = mask.as_bool()
    captured = prob_map.data[inside].astype(np.float64)
    if cfg.norm_kind == "l1_sum":
        data_term = float(captured.sum())
    else:
        data_term = float(np.sqrt(np.sum(captured * captured)))
    value = data_term - cfg.alpha * _weight_norm(model, params.w, cfg)
    return value, mask, flags


def utility(model: ShapeModel, prob_map: Volume3D, params: FitParams, cfg: FitConfig) -> float:
    value, _, _ = evaluate(model, prob_map, params, cfg)
    return value


@dataclass(frozen=True)
class PsoResult:
    point: np.ndarray
    value: float
    trace: np.ndarray
    evaluations: int
    converged: bool
    non_finite: int


def pso_maximize(objective, cfg: FitConfig, init_points: np.ndarray | None = None) -> PsoResult:
    """Global-best particle swarm maximization within ``cfg.bounds``.

    Positions clamp to the bounds, velocities to the per-dimension range.
    Non-finite objective values count as -inf and are tallied, never raised.
    Stops at ``max_iters`` or after ``stall_iters`` iterations without the
    best improving by more than 1e-9.
    """
    if cfg.bounds is None:
        raise InvalidArgumentError("pso_maximize needs explicit bounds")
    lo = cfg.bounds[:, 0]
    hi = cfg.bounds[:, 1]
    dim = lo.size
    vmax = hi - lo
    rng = np.random.default_rng(cfg.seed)
    n_bad = 0
    n_eval = 0

    def safe_eval(vec):
        nonlocal n_bad, n_eval
        n_eval += 1
        val = float(objective(vec))
        if not np.isfinite(val):
            n_bad += 1
            return -np.inf
        return val

    x = lo + rng.random((cfg.swarm_size, dim)) * (hi - lo)
    if init_points is not None:
        init_points = np.atleast_2d(np.asarray(init_points, np.float64))
        k = min(len(init_points), cfg.swarm_size)
        x[:k] = np.clip(init_points[:k], lo, hi)
    v = np.zeros_like(x)

    fvals = np.array([safe_eval(xi) for xi in x])
    pbest = x.copy()
    pbest_val = fvals.copy()
    g_idx = int(np.argmax(pbest_val))
    gbest = pbest[g_idx].copy()
    gbest_val = float(pbest_val[g_idx])

    trace = [gbest_val]
    stall = 0
    converged = False
    for _ in range(cfg.max_iters):
        r_cog = rng.random((cfg.swarm_size, dim))
        r_soc = rng.random((cfg.swarm_size, dim))
        v = cfg.inertia * v + cfg.cognitive * r_cog * (pbest - x) + cfg.social * r_soc * (gbest - x)
        np.clip(v, -vmax, vmax, out=v)
        x = np.clip(x + v, lo, hi)
        fvals = np.array([safe_eval(xi) for xi in x])

        improved = fvals > pbest_val
        pbest[improved] = x[improved]
        pbest_val[improved] = fvals[improved]
        g_idx = int(np.argmax(pbest_val))
        if pbest_val[g_idx] > gbest_val + 1e-9:
            stall = 0
        else:
            stall += 1
        if pbest_val[g_idx] > gbest_val:
            gbest_val = float(pbest_val[g_idx])
            gbest = pbest[g_idx].copy()
        trace.append(gbest_val)
        if stall >= cfg.stall_iters:
            converged = True
            break

    return PsoResult(gbest, gbest_val, np.asarray(trace), n_eval, converged, n_bad)


def default_bounds(model: ShapeModel, prob_map: Volume3D, pad_mm: float = 10.0) -> np.ndarray:
    """Search box: +-3 sigma per mode, translations keeping the shape over the
    thresholded map region (dilated by ``pad_mm``), rotations within +-0.3 rad."""
    sig = np.sqrt(model.eigenvalues)
    w_bounds = np.stack([-3.0 * sig, 3.0 * sig], axis=1)

    hot = prob_map.data > 0.5
    if not hot.any():
        hot = prob_map.data > 0.0
    idx = np.nonzero(hot)
    lo = np.array([prob_map.origin[i] + idx[i].min() * prob_map.spacing[i] for i in range(3)])
    hi = np.array([prob_map.origin[i] + idx[i].max() * prob_map.spacing[i] for i in range(3)])
    center = model.mean.reshape(-1, 3).mean(axis=0)
    t_bounds = np.stack([lo - pad_mm - center, hi + pad_mm - center], axis=1)

    r_bounds = np.tile([-0.3, 0.3], (3, 1))
    return np.vstack([w_bounds, t_bounds, r_bounds])


def weighted_centroid(vol: Volume3D) -> np.ndarray:
    total = float(vol.data.sum(dtype=np.float64))
    out = np.empty(3)
    for ax in range(3):
        other = tuple(i for i in range(3) if i != ax)
        marginal = vol.data.sum(axis=other, dtype=np.float64)
        out[ax] = float(marginal @ vol.axis_coords(ax)) / total
    return out


def fit(
    model: ShapeModel,
    prob_map: Volume3D,
    cfg: FitConfig | None = None,
) -> FitResult:
    """Maximize the utility over [w, t, theta] and rasterize the best instance."""
    cfg = cfg or FitConfig()
    if prob_map.kind is not VolumeKind.PROBABILITY:
        raise InvalidArgumentError("map must be a probability volume")
    total_mass = float(prob_map.data.sum(dtype=np.float64))
    if total_mass < 1e-6:
        raise DegenerateInputError("probability map is (numerically) empty")

    model.reference_mesh.validate_topology()
    if cfg.bounds is None:
        cfg = replace(cfg, bounds=default_bounds(model, prob_map))
    if cfg.bounds.shape[0] != model.n_modes + 6:
        raise InvalidArgumentError(
            f"bounds rows ({cfg.bounds.shape[0]}) must equal n_modes + 6 ({model.n_modes + 6})"
        )

    def objective(vec):
        params = FitParams.from_vector(vec, model.n_modes)
        value, _, _ = evaluate(model, prob_map, params, cfg)
        return value

    center = model.mean.reshape(-1, 3).mean(axis=0)
    init = np.concatenate([np.zeros(model.n_modes), weighted_centroid(prob_map) - center, np.zeros(3)])
    pso = pso_maximize(objective, cfg, init_points=init[None, :])

    params = FitParams.from_vector(pso.point, model.n_modes)
    value, mask, flags = evaluate(model, prob_map, params, cfg)
    diagnostics = {
        "non_finite_evals": pso.non_finite,
        "bounds": cfg.bounds,
        **flags,
    }
    return FitResult(
        params=params,
        utility=value,
        mask=mask,
        trace=pso.trace,
        evaluations=pso.evaluations,
        converged=pso.converged,
        diagnostics=diagnostics,
    )

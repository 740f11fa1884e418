"""PCA shape space over corresponded point clouds.

A model holds the population mean plus orthonormal variation modes scaled by
their variance; any instance is ``mean + sum_i w_i * mode_i``.  The
decomposition runs on the M x M Gram matrix of centered training vectors, so
cost scales with population size rather than point count.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import InvalidArgumentError
from .geometry import PointCloud, TriMesh, triangulate_reference

_RANK_EPS = 1e-12


@dataclass(frozen=True)
class ShapeModel:
    mean: np.ndarray           # (3N,) stacked mm
    modes: np.ndarray          # (C, 3N), orthonormal rows
    eigenvalues: np.ndarray    # (C,) mm^2, descending
    population: int            # M training instances
    explained_fraction: float
    total_variance: float      # sum over the full spectrum, mm^2

    def __post_init__(self) -> None:
        mean = np.asarray(self.mean, np.float64).reshape(-1)
        modes = np.asarray(self.modes, np.float64).reshape(-1, mean.size)
        evals = np.asarray(self.eigenvalues, np.float64).reshape(-1)
        if mean.size % 3 != 0 or mean.size < 12:
            raise InvalidArgumentError("mean must stack at least 4 points")
        if modes.shape[0] != evals.size:
            raise InvalidArgumentError("one eigenvalue per mode required")
        if evals.size:
            if np.any(evals <= 0.0):
                raise InvalidArgumentError("retained eigenvalues must be positive")
            if np.any(np.diff(evals) > 0.0):
                raise InvalidArgumentError("eigenvalues must be sorted descending")
            gram = modes @ modes.T
            if np.abs(gram - np.eye(modes.shape[0])).max() > 1e-8:
                raise InvalidArgumentError("modes are not orthonormal")
        if modes.shape[0] > self.population - 1:
            raise InvalidArgumentError("mode count exceeds population - 1")
        if not 0.0 < self.explained_fraction <= 1.0 + 1e-12:
            raise InvalidArgumentError("explained_fraction must lie in (0, 1]")
        for name, val in (("mean", mean), ("modes", modes), ("eigenvalues", evals)):
            if not np.all(np.isfinite(val)):
                raise InvalidArgumentError(f"{name} must be finite")
            val.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "modes", modes)
        object.__setattr__(self, "eigenvalues", evals)

    @property
    def n_points(self) -> int:
        return self.mean.size // 3

    @property
    def n_modes(self) -> int:
        return self.modes.shape[0]

    def mean_cloud(self) -> PointCloud:
        return PointCloud.from_vector(self.mean)

    @cached_property
    def reference_mesh(self) -> TriMesh:
        """Fixed topology shared by every instance, computed from the mean shape."""
        return triangulate_reference(self.mean_cloud())

    def truncated(self, n_modes: int) -> "ShapeModel":
        if not 0 <= n_modes <= self.n_modes:
            raise InvalidArgumentError(f"cannot keep {n_modes} of {self.n_modes} modes")
        kept_var = float(self.eigenvalues[:n_modes].sum())
        frac = kept_var / self.total_variance if self.total_variance > 0 else 1.0
        return ShapeModel(
            self.mean,
            self.modes[:n_modes],
            self.eigenvalues[:n_modes],
            self.population,
            frac if n_modes else 1.0,
            self.total_variance,
        )


def build_model(corresponded: list[PointCloud], variance_target: float = 0.90) -> ShapeModel:
    """Fit mean and variation modes; keep the fewest modes reaching ``variance_target``."""
    if not 0.0 < variance_target <= 1.0:
        raise InvalidArgumentError("variance_target must lie in (0, 1]")
    if len(corresponded) < 3:
        raise InvalidArgumentError("need at least 3 corresponded clouds")
    n = corresponded[0].n
    for i, c in enumerate(corresponded):
        if c.n != n:
            raise InvalidArgumentError(f"cloud {i} has {c.n} points, expected {n}")

    m = len(corresponded)
    data = np.stack([c.as_vector() for c in corresponded])
    mean = data.mean(axis=0)
    centered = data - mean

    gram = centered @ centered.T / (m - 1)
    evals, evecs = np.linalg.eigh(gram)
    order = np.argsort(evals)[::-1]
    evals = evals[order]
    evecs = evecs[:, order]
    np.maximum(evals, 0.0, out=evals)
    total = float(evals.sum())

    if total <= _RANK_EPS:
        # zero-variance population: mean only, no usable modes
        return ShapeModel(mean, np.empty((0, mean.size)), np.empty(0), m, 1.0, total)

    rank = int(np.sum(evals > total * _RANK_EPS))
    rank = min(rank, m - 1)
    cumfrac = np.cumsum(evals[:rank]) / total
    n_keep = int(np.searchsorted(cumfrac, variance_target - 1e-12) + 1)
    n_keep = min(n_keep, rank)

    basis = centered.T @ evecs[:, :n_keep]
    # re-orthonormalize: the raw Gram-route basis drifts off orthonormal for
    # near-null eigenvalues; QR keeps each column aligned with its mode
    basis, rdiag = np.linalg.qr(basis)
    signs = np.sign(np.diag(rdiag))
    basis *= np.where(signs == 0.0, 1.0, signs)
    # fix each mode's sign: largest-magnitude component made positive
    peaks = np.argmax(np.abs(basis), axis=0)
    signs = np.sign(basis[peaks, np.arange(n_keep)])
    basis *= signs

    return ShapeModel(
        mean=mean,
        modes=basis.T,
        eigenvalues=evals[:n_keep],
        population=m,
        explained_fraction=float(cumfrac[n_keep - 1]),
        total_variance=total,
    )


def _check_weights(model: ShapeModel, w) -> np.ndarray:
    w = np.asarray(w, np.float64).reshape(-1)
    if w.size != model.n_modes:
        raise InvalidArgumentError(f"expected {model.n_modes} weights, got {w.size}")
    if not np.all(np.isfinite(w)):
        raise InvalidArgumentError("weights must be finite")
    return w


def reconstruct(model: ShapeModel, w) -> PointCloud:
    """Instance ``mean + sum_i w_i mode_i`` as a point cloud."""
    w = _check_weights(model, w)
    vec = model.mean + (w @ model.modes if w.size else 0.0)
    return PointCloud.from_vector(vec)


def project(model: ShapeModel, cloud: PointCloud) -> np.ndarray:
    """Least-squares optimal weights for a corresponded cloud."""
    if cloud.n != model.n_points:
        raise InvalidArgumentError(f"cloud has {cloud.n} points, model wants {model.n_points}")
    return model.modes @ (cloud.as_vector() - model.mean)


def reconstruction_error(model: ShapeModel, cloud: PointCloud, kind: str = "rms") -> float:
    """Residual after project + reconstruct: per-point RMS (default) or stacked L2, mm."""
    w = project(model, cloud)
    residual = cloud.as_vector() - reconstruct(model, w).as_vector()
    stacked = float(np.linalg.norm(residual))
    if kind == "stacked_l2":
        return stacked
    if kind == "rms":
        return stacked / np.sqrt(model.n_points)
    raise InvalidArgumentError(f"unknown error kind {kind!r}")

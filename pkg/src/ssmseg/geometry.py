"""Spatial primitives: volumes, point clouds, triangle meshes, rigid motion.

All types are immutable after construction (arrays are marked read-only) and
safe to share across threads.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import ConvexHull, QhullError
from scipy.spatial.distance import pdist
from scipy.spatial.transform import Rotation

from . import _kernels
from .errors import DegenerateInputError, InvalidArgumentError, MeshTopologyError


class VolumeKind(str, enum.Enum):
    INTENSITY = "intensity"
    PROBABILITY = "probability"
    MASK = "mask"


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Volume3D:
    """Scalar 3D grid with physical spacing.

    ``data`` is float32 with shape ``dims`` = (nx, ny, nz); the serialized
    layout is x-fastest.  ``origin`` is the world position (mm) of the center
    of voxel (0, 0, 0).  ``meta`` carries diagnostics (validity masks,
    warning flags) and is never serialized or compared.
    """

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float]
    data: np.ndarray
    kind: VolumeKind = VolumeKind.INTENSITY
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        if len(dims) != 3 or any(d <= 0 for d in dims):
            raise InvalidArgumentError(f"dims must be 3 positive integers, got {self.dims}")
        if len(spacing) != 3 or any(not math.isfinite(s) or s <= 0 for s in spacing):
            raise InvalidArgumentError(f"spacing must be 3 positive reals, got {self.spacing}")
        if len(origin) != 3 or any(not math.isfinite(o) for o in origin):
            raise InvalidArgumentError(f"origin must be 3 finite reals, got {self.origin}")
        kind = VolumeKind(self.kind)
        data = np.asarray(self.data, dtype=np.float32)
        if data.size != dims[0] * dims[1] * dims[2]:
            raise InvalidArgumentError(
                f"data has {data.size} values, grid wants {dims[0] * dims[1] * dims[2]}"
            )
        if data.ndim == 1:
            data = data.reshape(dims, order="F")
        elif data.shape != dims:
            raise InvalidArgumentError(f"data shape {data.shape} does not match dims {dims}")
        if not np.all(np.isfinite(data)):
            raise InvalidArgumentError("volume data must be finite")
        if kind is VolumeKind.PROBABILITY and (data.min() < 0.0 or data.max() > 1.0):
            raise InvalidArgumentError("probability volume has values outside [0, 1]")
        if kind is VolumeKind.MASK and not np.all((data == 0.0) | (data == 1.0)):
            raise InvalidArgumentError("mask volume has values outside {0, 1}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "data", _readonly(np.ascontiguousarray(data)))

    @property
    def n_voxels(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    @property
    def voxel_volume(self) -> float:
        return self.spacing[0] * self.spacing[1] * self.spacing[2]

    def axis_coords(self, axis: int) -> np.ndarray:
        return self.origin[axis] + np.arange(self.dims[axis]) * self.spacing[axis]

    def center_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """(lo, hi) world coordinates of the first/last voxel centers."""
        lo = np.asarray(self.origin, np.float64)
        hi = lo + (np.asarray(self.dims) - 1) * np.asarray(self.spacing, np.float64)
        return lo, hi

    def flat(self) -> np.ndarray:
        """x-fastest 1D copy, the serialized layout."""
        return self.data.ravel(order="F").copy()

    def as_bool(self) -> np.ndarray:
        return self.data != 0.0

    def like(self, data: np.ndarray, kind: VolumeKind, meta: dict | None = None) -> "Volume3D":
        return Volume3D(self.dims, self.spacing, self.origin, data, kind, meta or {})


@dataclass(frozen=True)
class PointCloud:
    """Ordered organ-surface points in mm; order is the correspondence."""

    points: np.ndarray

    def __post_init__(self) -> None:
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise InvalidArgumentError(f"points must be (N, 3), got {pts.shape}")
        if pts.shape[0] < 4:
            raise InvalidArgumentError(f"point cloud needs at least 4 points, got {pts.shape[0]}")
        if not np.all(np.isfinite(pts)):
            raise InvalidArgumentError("point coordinates must be finite")
        object.__setattr__(self, "points", _readonly(np.ascontiguousarray(pts)))

    @property
    def n(self) -> int:
        return self.points.shape[0]

    def centroid(self) -> np.ndarray:
        return self.points.mean(axis=0)

    def diameter(self) -> float:
        if self.n > 4096:
            lo, hi = self.points.min(axis=0), self.points.max(axis=0)
            return float(np.linalg.norm(hi - lo))
        return float(pdist(self.points).max())

    def as_vector(self) -> np.ndarray:
        """Stacked [x1, y1, z1, ..., xN, yN, zN] representation."""
        return self.points.ravel().copy()

    @classmethod
    def from_vector(cls, vec: np.ndarray) -> "PointCloud":
        vec = np.asarray(vec, np.float64)
        if vec.ndim != 1 or vec.size % 3 != 0:
            raise InvalidArgumentError("stacked shape vector length must be a multiple of 3")
        return cls(vec.reshape(-1, 3))


@dataclass(frozen=True)
class TriMesh:
    """Surface mesh with fixed triangulation over a point cloud.

    Construction checks only index sanity; closedness and winding are
    verified by :meth:`validate_topology` (and by ``voxelize``), so that
    deliberately broken meshes can exist in tests.
    """

    cloud: PointCloud
    faces: np.ndarray

    def __post_init__(self) -> None:
        faces = np.asarray(self.faces, dtype=np.int64)
        if faces.ndim != 2 or faces.shape[1] != 3 or faces.shape[0] < 4:
            raise InvalidArgumentError(f"faces must be (F>=4, 3), got {faces.shape}")
        if faces.min() < 0 or faces.max() >= self.cloud.n:
            raise InvalidArgumentError("face indices out of range")
        if np.any(faces[:, 0] == faces[:, 1]) or np.any(faces[:, 1] == faces[:, 2]) or np.any(
            faces[:, 0] == faces[:, 2]
        ):
            raise InvalidArgumentError("degenerate face with repeated vertex")
        object.__setattr__(self, "faces", _readonly(np.ascontiguousarray(faces)))

    @property
    def n_faces(self) -> int:
        return self.faces.shape[0]

    def validate_topology(self) -> None:
        """Raise MeshTopologyError unless closed, 2-manifold, consistently wound outward."""
        f = self.faces
        directed = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        # consistent winding: every directed edge occurs exactly once
        d_keys = directed[:, 0] * self.cloud.n + directed[:, 1]
        uniq_d, counts_d = np.unique(d_keys, return_counts=True)
        if np.any(counts_d > 1):
            raise MeshTopologyError("inconsistent winding: a directed edge repeats")
        # closed 2-manifold: every undirected edge shared by exactly 2 faces
        und = np.sort(directed, axis=1)
        u_keys = und[:, 0] * self.cloud.n + und[:, 1]
        uniq_u, counts_u = np.unique(u_keys, return_counts=True)
        if np.any(counts_u != 2):
            raise MeshTopologyError("mesh is not a closed 2-manifold (boundary or fin edges)")
        if self.signed_volume() <= 0.0:
            raise MeshTopologyError("faces are wound inward (negative enclosed volume)")

    def signed_volume(self) -> float:
        p = self.cloud.points
        a, b, c = p[self.faces[:, 0]], p[self.faces[:, 1]], p[self.faces[:, 2]]
        return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.cloud.points.min(axis=0), self.cloud.points.max(axis=0)


@dataclass(frozen=True)
class RigidTransform:
    """Rigid motion: rotation (intrinsic Z-Y-X Euler angles, radians) then translation (mm)."""

    t: np.ndarray
    theta: np.ndarray

    def __post_init__(self) -> None:
        t = np.asarray(self.t, np.float64).reshape(-1)
        theta = np.asarray(self.theta, np.float64).reshape(-1)
        if t.size != 3 or theta.size != 3:
            raise InvalidArgumentError("rigid transform needs 3 translation and 3 rotation parameters")
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(theta))):
            raise InvalidArgumentError("rigid transform parameters must be finite")
        object.__setattr__(self, "t", _readonly(t.copy()))
        object.__setattr__(self, "theta", _readonly(theta.copy()))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.zeros(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, rot: np.ndarray, t: np.ndarray) -> "RigidTransform":
        theta = Rotation.from_matrix(np.asarray(rot, np.float64)).as_euler("ZYX")
        return cls(np.asarray(t, np.float64), theta)

    @property
    def matrix(self) -> np.ndarray:
        return Rotation.from_euler("ZYX", self.theta).as_matrix()

    def inverse(self) -> "RigidTransform":
        rot = self.matrix
        return RigidTransform.from_matrix(rot.T, -rot.T @ self.t)


def apply_rigid(cloud: PointCloud, xf: RigidTransform) -> PointCloud:
    """Apply ``p -> R(theta) p + t`` to every point, preserving order."""
    return PointCloud(cloud.points @ xf.matrix.T + xf.t)


def triangulate_reference(cloud: PointCloud) -> TriMesh:
    """Fixed surface topology via convex-hull triangulation of the spherical projection.

    Valid for clouds that are star-shaped about their centroid; the same face
    table is reused for every corresponded instance.  Deterministic: faces are
    canonically ordered.
    """
    pts = cloud.points
    center = pts.mean(axis=0)
    d = pts - center
    norms = np.linalg.norm(d, axis=1)
    if norms.min() < 1e-12 * max(norms.max(), 1.0):
        raise DegenerateInputError("a point coincides with the centroid; cannot project")
    unit = d / norms[:, None]
    try:
        hull = ConvexHull(unit)
    except QhullError as exc:
        raise DegenerateInputError(f"cloud is degenerate (collinear/coplanar): {exc}") from exc

    faces = hull.simplices.astype(np.int64)
    # orient every face outward on the unit sphere (radial projection preserves
    # orientation for star-shaped clouds)
    det = np.einsum("ij,ij->i", unit[faces[:, 0]], np.cross(unit[faces[:, 1]], unit[faces[:, 2]]))
    flip = det < 0
    faces[flip] = faces[flip][:, [0, 2, 1]]
    # canonical order: rotate each face so its smallest index leads, then sort rows
    lead = np.argmin(faces, axis=1)
    faces = np.stack([faces[np.arange(len(faces)), (lead + k) % 3] for k in range(3)], axis=1)
    faces = faces[np.lexsort((faces[:, 2], faces[:, 1], faces[:, 0]))]
    mesh = TriMesh(cloud, faces)
    mesh.validate_topology()
    return mesh


def voxelize(mesh: TriMesh, grid: Volume3D, validate: bool = True) -> Volume3D:
    """Rasterize a closed mesh to a binary mask on ``grid``'s geometry.

    A voxel is set iff its center is inside the mesh (parity of +x ray
    crossings, symbolic perturbation for edge/vertex hits).  A mesh whose
    bounding box misses every voxel center yields an all-zero mask with
    ``meta["empty_outside_grid"] = True``.  ``validate=False`` skips the
    topology check for callers reusing a verified face table in a hot loop.
    """
    if validate:
        mesh.validate_topology()
    lo, hi = mesh.bounds()
    glo, ghi = grid.center_bounds()
    if np.any(hi < glo) or np.any(lo > ghi):
        zeros = np.zeros(grid.dims, np.float32)
        return grid.like(zeros, VolumeKind.MASK, {"empty_outside_grid": True})
    raw = _kernels.voxelize_parity(
        mesh.cloud.points, mesh.faces, grid.origin, grid.spacing, grid.dims
    )
    return grid.like(raw.astype(np.float32), VolumeKind.MASK)


def make_grid(
    lo: np.ndarray, hi: np.ndarray, spacing: float | tuple[float, float, float]
) -> Volume3D:
    """Empty intensity grid whose voxel centers cover [lo, hi] with a half-voxel margin."""
    sp = np.broadcast_to(np.asarray(spacing, np.float64), (3,)).astype(np.float64)
    lo = np.asarray(lo, np.float64)
    hi = np.asarray(hi, np.float64)
    if np.any(hi < lo):
        raise InvalidArgumentError("grid bounds are inverted")
    dims = tuple(int(np.floor((hi[i] - lo[i]) / sp[i])) + 1 for i in range(3))
    return Volume3D(dims, tuple(sp), tuple(lo), np.zeros(dims, np.float32))

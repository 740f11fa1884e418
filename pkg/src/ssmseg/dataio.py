"""File formats, fan-beam volume reconstruction, contour resampling, and the
synthetic phantom generator.

Volume files (``.sfv``): line ``SFV1``, a JSON header line, then raw
little-endian float32 in x-fastest order.  Shape-model files (``.ssm``) use
the same layout with magic ``SSM1`` and a float64 payload.  Both are trivial
to parse from any language.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from . import _kernels
from .errors import (
    DegenerateInputError,
    HeaderInconsistencyError,
    InvalidArgumentError,
    MagicMismatchError,
    TruncatedFileError,
    ValueRangeError,
)
from .fitter import FitParams, shape_instance
from .geometry import (
    PointCloud,
    RigidTransform,
    TriMesh,
    Volume3D,
    VolumeKind,
    make_grid,
    voxelize,
)
from .metrics import region_bands
from .ssm import ShapeModel, build_model

_VOLUME_MAGIC = b"SFV1"
_MODEL_MAGIC = b"SSM1"


def atomic_write_bytes(path: str | Path, payload: bytes) -> None:
    """Write via a temp file in the same directory plus rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _header_bytes(magic: bytes, header: dict) -> bytes:
    return magic + b"\n" + json.dumps(header, sort_keys=True).encode() + b"\n"


def _read_magic_header(blob: bytes, magic: bytes, path) -> tuple[dict, bytes]:
    first = blob.split(b"\n", 1)
    if len(first) != 2 or first[0] != magic:
        raise MagicMismatchError(f"{path}: not a {magic.decode()} file")
    rest = first[1].split(b"\n", 1)
    if len(rest) != 2:
        raise TruncatedFileError(f"{path}: missing payload after header")
    try:
        header = json.loads(rest[0].decode())
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise HeaderInconsistencyError(f"{path}: unparseable header ({exc})") from exc
    if header.get("version") != 1:
        raise MagicMismatchError(f"{path}: unsupported version {header.get('version')!r}")
    return header, rest[1]


# ---------------------------------------------------------------------------
# Volumes
# ---------------------------------------------------------------------------


def write_volume(vol: Volume3D, path: str | Path) -> None:
    header = {
        "version": 1,
        "dims": list(vol.dims),
        "spacing": list(vol.spacing),
        "origin": list(vol.origin),
        "kind": vol.kind.value,
        "dtype": "f32le",
    }
    payload = vol.flat().astype("<f4").tobytes()
    atomic_write_bytes(path, _header_bytes(_VOLUME_MAGIC, header) + payload)


def read_volume(path: str | Path) -> Volume3D:
    blob = Path(path).read_bytes()
    header, payload = _read_magic_header(blob, _VOLUME_MAGIC, path)
    try:
        dims = tuple(int(d) for d in header["dims"])
        spacing = tuple(float(s) for s in header["spacing"])
        origin = tuple(float(o) for o in header["origin"])
        kind = VolumeKind(header["kind"])
        dtype = header["dtype"]
    except (KeyError, ValueError, TypeError) as exc:
        raise HeaderInconsistencyError(f"{path}: bad header field ({exc})") from exc
    if dtype != "f32le":
        raise HeaderInconsistencyError(f"{path}: unsupported dtype {dtype!r}")
    want = int(np.prod(dims)) * 4
    if len(payload) < want:
        raise TruncatedFileError(f"{path}: payload {len(payload)} bytes, header wants {want}")
    if len(payload) > want:
        raise HeaderInconsistencyError(f"{path}: payload {len(payload)} bytes, header wants {want}")
    data = np.frombuffer(payload, dtype="<f4").astype(np.float32)
    try:
        return Volume3D(dims, spacing, origin, data, kind)
    except InvalidArgumentError as exc:
        raise ValueRangeError(f"{path}: {exc}") from exc


# ---------------------------------------------------------------------------
# Point clouds and meshes (CSV)
# ---------------------------------------------------------------------------


def write_cloud(cloud: PointCloud, path: str | Path) -> None:
    lines = ["x,y,z"]
    lines += [f"{p[0]:.17g},{p[1]:.17g},{p[2]:.17g}" for p in cloud.points]
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode())


def read_cloud(path: str | Path) -> PointCloud:
    text = Path(path).read_text().strip().splitlines()
    if not text or text[0].strip().lower() != "x,y,z":
        raise MagicMismatchError(f"{path}: point-cloud CSV must start with 'x,y,z'")
    try:
        pts = np.array([[float(v) for v in ln.split(",")] for ln in text[1:]], np.float64)
    except ValueError as exc:
        raise HeaderInconsistencyError(f"{path}: unparseable row ({exc})") from exc
    try:
        return PointCloud(pts)
    except InvalidArgumentError as exc:
        raise ValueRangeError(f"{path}: {exc}") from exc


def write_mesh(mesh: TriMesh, path: str | Path) -> None:
    lines = ["#vertices"]
    lines += [f"{p[0]:.17g},{p[1]:.17g},{p[2]:.17g}" for p in mesh.cloud.points]
    lines.append("#faces")
    lines += [f"{f[0]},{f[1]},{f[2]}" for f in mesh.faces]
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode())


def read_mesh(path: str | Path) -> TriMesh:
    text = Path(path).read_text().strip().splitlines()
    if not text or text[0].strip() != "#vertices":
        raise MagicMismatchError(f"{path}: mesh CSV must start with '#vertices'")
    try:
        split = text.index("#faces")
    except ValueError as exc:
        raise HeaderInconsistencyError(f"{path}: missing '#faces' section") from exc
    try:
        verts = np.array([[float(v) for v in ln.split(",")] for ln in text[1:split]], np.float64)
        faces = np.array([[int(v) for v in ln.split(",")] for ln in text[split + 1 :]], np.int64)
        return TriMesh(PointCloud(verts), faces)
    except (ValueError, InvalidArgumentError) as exc:
        raise ValueRangeError(f"{path}: {exc}") from exc


# ---------------------------------------------------------------------------
# Shape models
# ---------------------------------------------------------------------------


def write_model(model: ShapeModel, path: str | Path) -> None:
    header = {
        "version": 1,
        "n_points": model.n_points,
        "population": model.population,
        "n_modes": model.n_modes,
        "eigenvalues": [float(v) for v in model.eigenvalues],
        "explained_fraction": model.explained_fraction,
        "total_variance": model.total_variance,
        "dtype": "f64le",
    }
    payload = model.mean.astype("<f8").tobytes() + model.modes.astype("<f8").tobytes()
    atomic_write_bytes(path, _header_bytes(_MODEL_MAGIC, header) + payload)


def read_model(path: str | Path) -> ShapeModel:
    blob = Path(path).read_bytes()
    header, payload = _read_magic_header(blob, _MODEL_MAGIC, path)
    try:
        n_points = int(header["n_points"])
        population = int(header["population"])
        n_modes = int(header["n_modes"])
        evals = np.asarray(header["eigenvalues"], np.float64)
        explained = float(header["explained_fraction"])
        total = float(header["total_variance"])
    except (KeyError, ValueError, TypeError) as exc:
        raise HeaderInconsistencyError(f"{path}: bad header field ({exc})") from exc
    if evals.size != n_modes:
        raise HeaderInconsistencyError(f"{path}: {evals.size} eigenvalues for {n_modes} modes")
    want = (3 * n_points + n_modes * 3 * n_points) * 8
    if len(payload) < want:
        raise TruncatedFileError(f"{path}: payload {len(payload)} bytes, header wants {want}")
    if len(payload) > want:
        raise HeaderInconsistencyError(f"{path}: payload {len(payload)} bytes, header wants {want}")
    flat = np.frombuffer(payload, dtype="<f8")
    mean = flat[: 3 * n_points].astype(np.float64)
    modes = flat[3 * n_points :].reshape(n_modes, 3 * n_points).astype(np.float64)
    try:
        # the constructor re-checks orthonormality, ordering, and finiteness
        return ShapeModel(mean, modes, evals, population, explained, total)
    except InvalidArgumentError as exc:
        raise ValueRangeError(f"{path}: {exc}") from exc


# ---------------------------------------------------------------------------
# Fan-beam acquisition -> Cartesian volume
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FanAcquisition:
    """Sagittal frames acquired while rolling the probe about the +z axis.

    Frame rows run radially outward from the roll axis starting
    ``probe_axis_offset`` mm away; columns run along the axis from
    ``axial_start``.  ``angles_deg`` must increase strictly.
    """

    frames: np.ndarray            # (K, rows, cols)
    angles_deg: np.ndarray        # (K,)
    pixel_spacing: tuple[float, float]   # (radial, axial) mm
    probe_axis_offset: float = 0.0
    axial_start: float = 0.0

    def __post_init__(self) -> None:
        frames = np.asarray(self.frames, np.float64)
        angles = np.asarray(self.angles_deg, np.float64).reshape(-1)
        if frames.ndim != 3:
            raise InvalidArgumentError("frames must be a (K, rows, cols) stack")
        if angles.size != frames.shape[0]:
            raise InvalidArgumentError("one roll angle per frame required")
        if np.any(np.diff(angles) <= 0.0):
            raise InvalidArgumentError("angles must be strictly increasing")
        sp = self.pixel_spacing
        if len(sp) != 2 or sp[0] <= 0 or sp[1] <= 0:
            raise InvalidArgumentError("pixel_spacing must be 2 positive reals")
        if self.probe_axis_offset < 0.0:
            raise InvalidArgumentError("probe_axis_offset must be non-negative")
        frames.setflags(write=False)
        angles.setflags(write=False)
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "angles_deg", angles)


def _fan_bbox(acq: FanAcquisition) -> tuple[np.ndarray, np.ndarray]:
    rho_lo = acq.probe_axis_offset
    rho_hi = acq.probe_axis_offset + (acq.frames.shape[1] - 1) * acq.pixel_spacing[0]
    a0, a1 = np.deg2rad(acq.angles_deg[0]), np.deg2rad(acq.angles_deg[-1])
    # candidate angles: interval ends plus any multiple of pi/2 inside
    cands = [a0, a1]
    k = math.ceil(a0 / (np.pi / 2))
    while k * np.pi / 2 < a1:
        cands.append(k * np.pi / 2)
        k += 1
    xs, ys = [], []
    for ang in cands:
        for rho in (rho_lo, rho_hi):
            xs.append(rho * math.cos(ang))
            ys.append(rho * math.sin(ang))
    z_lo = acq.axial_start
    z_hi = acq.axial_start + (acq.frames.shape[2] - 1) * acq.pixel_spacing[1]
    return (
        np.array([min(xs), min(ys), z_lo]),
        np.array([max(xs), max(ys), z_hi]),
    )


def reconstruct_volume(acq: FanAcquisition, spacing: float) -> Volume3D:
    """Resample the rolled frames onto an isotropic Cartesian grid.

    Voxels map to cylindrical coordinates about the roll axis; each in-fan
    voxel interpolates bilinearly inside its two angularly nearest frames and
    linearly in roll angle between them.  Out-of-fan voxels are zero; the
    validity mask rides along in ``meta["fan_valid"]``.
    """
    if acq.frames.shape[0] < 2:
        raise InvalidArgumentError("need at least 2 frames to interpolate in angle")
    if spacing <= 0.0:
        raise InvalidArgumentError("spacing must be positive")
    lo, hi = _fan_bbox(acq)
    grid = make_grid(lo, hi, spacing)
    vals, valid = _kernels.fan_resample(
        acq.frames,
        np.deg2rad(acq.angles_deg),
        acq.probe_axis_offset,
        acq.pixel_spacing[0],
        acq.pixel_spacing[1],
        acq.axial_start,
        grid.origin,
        grid.spacing,
        grid.dims,
    )
    if not valid.any():
        raise DegenerateInputError("voxel grid does not intersect the swept fan")
    return Volume3D(
        grid.dims,
        grid.spacing,
        grid.origin,
        vals.astype(np.float32),
        VolumeKind.INTENSITY,
        meta={"fan_valid": valid},
    )


# ---------------------------------------------------------------------------
# Contour resampling
# ---------------------------------------------------------------------------


def _resample_closed(poly: np.ndarray, n_out: int) -> np.ndarray:
    if poly.ndim != 2 or poly.shape[1] != 2 or poly.shape[0] < 4:
        raise InvalidArgumentError("contour must be (K>=4, 2) including the closing point")
    if not np.allclose(poly[0], poly[-1], atol=1e-9):
        raise InvalidArgumentError("contour is open: last point must repeat the first")
    pts = poly[:-1]
    # consistent orientation: counter-clockwise
    area2 = float(np.sum(pts[:, 0] * np.roll(pts[:, 1], -1) - np.roll(pts[:, 0], -1) * pts[:, 1]))
    if area2 == 0.0:
        raise DegenerateInputError("contour has zero area")
    if area2 < 0.0:
        pts = pts[::-1]
    seg = np.roll(pts, -1, axis=0) - pts
    seglen = np.linalg.norm(seg, axis=1)
    if np.any(seglen == 0.0):
        keep = seglen > 0.0
        pts, seg, seglen = pts[keep], seg[keep], seglen[keep]
    cum = np.concatenate([[0.0], np.cumsum(seglen)])
    perimeter = cum[-1]

    # start at the +x crossing of the horizontal ray from the centroid
    cx, cy = pts.mean(axis=0)
    best_x, best_s = -np.inf, 0.0
    for i in range(len(pts)):
        y0, y1 = pts[i, 1], pts[(i + 1) % len(pts), 1]
        if (y0 <= cy < y1) or (y1 <= cy < y0):
            frac = (cy - y0) / (y1 - y0)
            x_cross = pts[i, 0] + frac * seg[i, 0]
            if x_cross > cx and x_cross > best_x:
                best_x = x_cross
                best_s = cum[i] + frac * seglen[i]
    s = (best_s + perimeter * np.arange(n_out) / n_out) % perimeter
    idx = np.minimum(np.searchsorted(cum, s, side="right") - 1, len(pts) - 1)
    frac = (s - cum[idx]) / seglen[idx]
    return pts[idx] + frac[:, None] * seg[idx]


def resample_contours(
    slice_contours: list[tuple[np.ndarray, float]], points_per_contour: int
) -> PointCloud:
    """Arc-length-uniform resampling of closed per-slice contours into a cloud.

    Every contour contributes ``points_per_contour`` points starting at its
    +x centroid-ray crossing, walked counter-clockwise, keeping the point
    ordering consistent across slices.
    """
    if points_per_contour < 3:
        raise InvalidArgumentError("points_per_contour must be at least 3")
    if not slice_contours:
        raise InvalidArgumentError("no contours supplied")
    stacks = []
    for poly, z in slice_contours:
        xy = _resample_closed(np.asarray(poly, np.float64), points_per_contour)
        stacks.append(np.column_stack([xy, np.full(len(xy), float(z))]))
    return PointCloud(np.vstack(stacks))


# ---------------------------------------------------------------------------
# Synthetic phantoms
# ---------------------------------------------------------------------------


@lru_cache(maxsize=4)
def builtin_model(
    n_points: int = 350, population: int = 30, seed: int = 10, variance_target: float = 0.98
) -> ShapeModel:
    """Deterministic prostate-scale ellipsoid-with-bumps training family."""
    i = np.arange(n_points) + 0.5
    polar = np.arccos(1.0 - 2.0 * i / n_points)
    azim = np.pi * (1.0 + 5.0**0.5) * i
    dirs = np.stack(
        [np.sin(polar) * np.cos(azim), np.sin(polar) * np.sin(azim), np.cos(polar)], axis=1
    )
    rng = np.random.default_rng(seed)
    clouds = []
    for _ in range(population):
        rx, ry, rz = rng.uniform(19.0, 25.0, 3)
        radial = 1.0 / np.sqrt(
            (dirs[:, 0] / rx) ** 2 + (dirs[:, 1] / ry) ** 2 + (dirs[:, 2] / rz) ** 2
        )
        bump = (
            1.0
            + 0.06 * rng.normal() * dirs[:, 0] * dirs[:, 1]
            + 0.05 * rng.normal() * (dirs[:, 2] ** 2 - 0.5)
        )
        clouds.append(PointCloud(dirs * (radial * bump)[:, None]))
    return build_model(clouds, variance_target)


@dataclass(frozen=True)
class PhantomSpec:
    model: ShapeModel | None = None   # None selects the built-in family
    noise: float = 0.05               # speckle variance (multiplicative)
    blur_sigma: float = 1.0           # mm
    dropout: float = 0.5              # apex/base contrast attenuation in [0, 1]
    seed: int = 0
    spacing: float = 1.0              # mm, isotropic
    margin_mm: float = 40.0           # grid half-extent about the model center
    max_t_mm: float = 6.0
    max_theta_rad: float = 0.15

    def __post_init__(self) -> None:
        if not 0.0 <= self.dropout <= 1.0:
            raise InvalidArgumentError("dropout must lie in [0, 1]")
        if self.blur_sigma < 0.0 or self.noise < 0.0:
            raise InvalidArgumentError("blur_sigma and noise must be non-negative")
        if self.spacing <= 0.0 or self.margin_mm <= 0.0:
            raise InvalidArgumentError("spacing and margin_mm must be positive")

    def resolved_model(self) -> ShapeModel:
        return self.model if self.model is not None else builtin_model()


def make_phantom(spec: PhantomSpec) -> tuple[Volume3D, Volume3D, FitParams]:
    """Sample a shape instance; rasterize it and derive a degraded probability map.

    Weights are Gaussian per mode (sigma_i = sqrt(eigenvalue_i), truncated at
    3 sigma), the pose uniform within the spec ranges.  The map is the
    blurred mask, attenuated by ``dropout`` in the apex/base thirds of the
    truth extent, carrying multiplicative speckle, clamped to [0, 1].
    """
    model = spec.resolved_model()
    rng = np.random.default_rng(spec.seed)
    sig = np.sqrt(model.eigenvalues)
    w = np.clip(rng.normal(0.0, sig), -3.0 * sig, 3.0 * sig)
    t = rng.uniform(-spec.max_t_mm, spec.max_t_mm, 3)
    theta = rng.uniform(-spec.max_theta_rad, spec.max_theta_rad, 3)
    params = FitParams(w, RigidTransform(t, theta))

    center = model.mean.reshape(-1, 3).mean(axis=0)
    grid = make_grid(center - spec.margin_mm, center + spec.margin_mm, spec.spacing)
    instance = shape_instance(model, params)
    truth = voxelize(TriMesh(instance, model.reference_mesh.faces), grid, validate=False)

    prob = truth.data.astype(np.float64)
    if spec.blur_sigma > 0.0:
        prob = gaussian_filter(prob, spec.blur_sigma / np.asarray(grid.spacing))
    if spec.dropout > 0.0:
        low, mid, high = region_bands(truth.as_bool(), axis=2)
        profile = np.full(grid.dims[2], 1.0 - spec.dropout)
        profile[mid] = 1.0
        prob = prob * profile[None, None, :]
    if spec.noise > 0.0:
        prob = prob * (1.0 + rng.normal(0.0, math.sqrt(spec.noise), prob.shape))
    np.clip(prob, 0.0, 1.0, out=prob)
    prob_map = Volume3D(grid.dims, grid.spacing, grid.origin, prob, VolumeKind.PROBABILITY)
    return truth, prob_map, params

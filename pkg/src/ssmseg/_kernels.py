"""Hot numerical kernels, each with a numba and a pure-numpy implementation.

The backend is picked once at import time. Set ``SSMSEG_NUMBA=0`` to force
the pure-numpy path (or when numba is unavailable it is used automatically).
Both variants stay importable under explicit names so the tests can check
they agree and ``benchmarks/bench_kernels.py`` can time them side by side.

Kernels are serial on purpose: bit-identical results across runs matter more
here than parallel speedup, and the PSO loop already amortizes compile time.
"""

from __future__ import annotations

import math
import os

import numpy as np

_WANT_NUMBA = os.environ.get("SSMSEG_NUMBA", "1") != "0"

try:
    if _WANT_NUMBA:
        from numba import njit

        HAVE_NUMBA = True
    else:
        HAVE_NUMBA = False
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False


def active_backend() -> str:
    return "numba" if HAVE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# Parity voxelization.
#
# A voxel center is inside the mesh iff a +x ray from it crosses the surface
# an odd number of times.  Edge/vertex hits are resolved by symbolic
# perturbation of the ray position by (eps^2, eps) in (y, z), which reduces
# to a sign rule on the projected edge direction and never needs a tolerance.
# Each crossing at x_int toggles every center with x < x_int; crossings are
# accumulated into `delta` at the largest toggled x-index and resolved by a
# suffix sum along x.
# ---------------------------------------------------------------------------


def _edge_tiebreak(dy: float, dz: float) -> float:
    if dy > 0.0:
        return 1.0
    if dy < 0.0:
        return -1.0
    if dz < 0.0:
        return 1.0
    return -1.0


def voxelize_parity_numpy(verts, faces, origin, spacing, dims):
    nx, ny, nz = int(dims[0]), int(dims[1]), int(dims[2])
    ox, oy, oz = float(origin[0]), float(origin[1]), float(origin[2])
    dx, dy, dz = float(spacing[0]), float(spacing[1]), float(spacing[2])
    delta = np.zeros((nx, ny, nz), np.int64)
    ycoord = oy + np.arange(ny) * dy
    zcoord = oz + np.arange(nz) * dz

    for f in range(faces.shape[0]):
        a = verts[faces[f, 0]]
        b = verts[faces[f, 1]]
        c = verts[faces[f, 2]]
        area2 = (b[1] - a[1]) * (c[2] - a[2]) - (b[2] - a[2]) * (c[1] - a[1])
        if area2 == 0.0:
            continue
        s_area = 1.0 if area2 > 0.0 else -1.0

        ymin = min(a[1], b[1], c[1])
        ymax = max(a[1], b[1], c[1])
        zmin = min(a[2], b[2], c[2])
        zmax = max(a[2], b[2], c[2])
        iy0 = max(int(math.ceil((ymin - oy) / dy)), 0)
        iy1 = min(int(math.floor((ymax - oy) / dy)), ny - 1)
        iz0 = max(int(math.ceil((zmin - oz) / dz)), 0)
        iz1 = min(int(math.floor((zmax - oz) / dz)), nz - 1)
        if iy0 > iy1 or iz0 > iz1:
            continue

        py = ycoord[iy0 : iy1 + 1][:, None]
        pz = zcoord[iz0 : iz1 + 1][None, :]
        w0 = (c[1] - b[1]) * (pz - b[2]) - (c[2] - b[2]) * (py - b[1])
        w1 = (a[1] - c[1]) * (pz - c[2]) - (a[2] - c[2]) * (py - c[1])
        w2 = (b[1] - a[1]) * (pz - a[2]) - (b[2] - a[2]) * (py - a[1])
        s0 = np.where(w0 != 0.0, np.sign(w0), _edge_tiebreak(c[1] - b[1], c[2] - b[2]))
        s1 = np.where(w1 != 0.0, np.sign(w1), _edge_tiebreak(a[1] - c[1], a[2] - c[2]))
        s2 = np.where(w2 != 0.0, np.sign(w2), _edge_tiebreak(b[1] - a[1], b[2] - a[2]))
        inside = (s0 == s_area) & (s1 == s_area) & (s2 == s_area)
        if not inside.any():
            continue

        x_int = (w0 * a[0] + w1 * b[0] + w2 * c[0]) / area2
        ix_max = np.ceil((x_int - ox) / dx).astype(np.int64) - 1
        np.minimum(ix_max, nx - 1, out=ix_max)
        sel = inside & (ix_max >= 0)
        if not sel.any():
            continue
        iys, izs = np.nonzero(sel)
        np.add.at(delta, (ix_max[sel], iys + iy0, izs + iz0), 1)

    count = np.cumsum(delta[::-1], axis=0)[::-1]
    return (count & 1).astype(np.uint8)


if HAVE_NUMBA:

    @njit(cache=True)
    def _voxelize_parity_jit(verts, faces, origin, spacing, dims):  # pragma: no cover
        nx = dims[0]
        ny = dims[1]
        nz = dims[2]
        ox = origin[0]
        oy = origin[1]
        oz = origin[2]
        dx = spacing[0]
        dy = spacing[1]
        dz = spacing[2]
        delta = np.zeros((nx, ny, nz), np.int64)

        for f in range(faces.shape[0]):
            ia = faces[f, 0]
            ib = faces[f, 1]
            ic = faces[f, 2]
            axx = verts[ia, 0]
            ayy = verts[ia, 1]
            azz = verts[ia, 2]
            bxx = verts[ib, 0]
            byy = verts[ib, 1]
            bzz = verts[ib, 2]
            cxx = verts[ic, 0]
            cyy = verts[ic, 1]
            czz = verts[ic, 2]
            area2 = (byy - ayy) * (czz - azz) - (bzz - azz) * (cyy - ayy)
            if area2 == 0.0:
                continue
            s_area = 1.0 if area2 > 0.0 else -1.0

            ymin = min(ayy, min(byy, cyy))
            ymax = max(ayy, max(byy, cyy))
            zmin = min(azz, min(bzz, czz))
            zmax = max(azz, max(bzz, czz))
            iy0 = int(math.ceil((ymin - oy) / dy))
            if iy0 < 0:
                iy0 = 0
            iy1 = int(math.floor((ymax - oy) / dy))
            if iy1 > ny - 1:
                iy1 = ny - 1
            iz0 = int(math.ceil((zmin - oz) / dz))
            if iz0 < 0:
                iz0 = 0
            iz1 = int(math.floor((zmax - oz) / dz))
            if iz1 > nz - 1:
                iz1 = nz - 1

            # per-edge tie-break signs from the symbolic (eps^2, eps) shift
            e0y = cyy - byy
            e0z = czz - bzz
            e1y = ayy - cyy
            e1z = azz - czz
            e2y = byy - ayy
            e2z = bzz - azz
            t0 = 1.0 if (e0y > 0.0 or (e0y == 0.0 and e0z < 0.0)) else -1.0
            t1 = 1.0 if (e1y > 0.0 or (e1y == 0.0 and e1z < 0.0)) else -1.0
            t2 = 1.0 if (e2y > 0.0 or (e2y == 0.0 and e2z < 0.0)) else -1.0

            for iy in range(iy0, iy1 + 1):
                py = oy + iy * dy
                for iz in range(iz0, iz1 + 1):
                    pz = oz + iz * dz
                    w0 = e0y * (pz - bzz) - e0z * (py - byy)
                    w1 = e1y * (pz - czz) - e1z * (py - cyy)
                    w2 = e2y * (pz - azz) - e2z * (py - ayy)
                    s0 = t0 if w0 == 0.0 else (1.0 if w0 > 0.0 else -1.0)
                    if s0 != s_area:
                        continue
                    s1 = t1 if w1 == 0.0 else (1.0 if w1 > 0.0 else -1.0)
                    if s1 != s_area:
                        continue
                    s2 = t2 if w2 == 0.0 else (1.0 if w2 > 0.0 else -1.0)
                    if s2 != s_area:
                        continue
                    x_int = (w0 * axx + w1 * bxx + w2 * cxx) / area2
                    ix_max = int(math.ceil((x_int - ox) / dx)) - 1
                    if ix_max < 0:
                        continue
                    if ix_max > nx - 1:
                        ix_max = nx - 1
                    delta[ix_max, iy, iz] += 1

        mask = np.zeros((nx, ny, nz), np.uint8)
        for iy in range(ny):
            for iz in range(nz):
                acc = 0
                for ix in range(nx - 1, -1, -1):
                    acc += delta[ix, iy, iz]
                    mask[ix, iy, iz] = acc & 1
        return mask

    def voxelize_parity_numba(verts, faces, origin, spacing, dims):
        return _voxelize_parity_jit(
            np.ascontiguousarray(verts, np.float64),
            np.ascontiguousarray(faces, np.int64),
            np.asarray(origin, np.float64),
            np.asarray(spacing, np.float64),
            np.asarray(dims, np.int64),
        )

else:
    voxelize_parity_numba = voxelize_parity_numpy

voxelize_parity = voxelize_parity_numba if HAVE_NUMBA else voxelize_parity_numpy


# ---------------------------------------------------------------------------
# Gaussian affinity matrix for coherent point drift E-steps:
# E[m, n] = exp(-|fixed_n - moved_m|^2 / (2 sigma2)).
# ---------------------------------------------------------------------------


def gaussian_affinity_numpy(moved, fixed, sigma2):
    m2 = np.sum(moved * moved, axis=1)[:, None]
    f2 = np.sum(fixed * fixed, axis=1)[None, :]
    d2 = m2 + f2 - 2.0 * (moved @ fixed.T)
    np.maximum(d2, 0.0, out=d2)
    return np.exp(d2 / (-2.0 * sigma2))


if HAVE_NUMBA:

    @njit(cache=True)
    def _gaussian_affinity_jit(moved, fixed, inv_two_sigma2):  # pragma: no cover
        m = moved.shape[0]
        n = fixed.shape[0]
        out = np.empty((m, n), np.float64)
        for i in range(m):
            mx = moved[i, 0]
            my = moved[i, 1]
            mz = moved[i, 2]
            for j in range(n):
                ddx = fixed[j, 0] - mx
                ddy = fixed[j, 1] - my
                ddz = fixed[j, 2] - mz
                out[i, j] = math.exp(-(ddx * ddx + ddy * ddy + ddz * ddz) * inv_two_sigma2)
        return out

    def gaussian_affinity_numba(moved, fixed, sigma2):
        return _gaussian_affinity_jit(
            np.ascontiguousarray(moved, np.float64),
            np.ascontiguousarray(fixed, np.float64),
            0.5 / float(sigma2),
        )

else:
    gaussian_affinity_numba = gaussian_affinity_numpy

gaussian_affinity = gaussian_affinity_numba if HAVE_NUMBA else gaussian_affinity_numpy


# ---------------------------------------------------------------------------
# CPD E-step: posteriors of the GMM with a uniform outlier component.
#
#   P[m, n] = exp(-|x_n - ty_m|^2 / (2 s2)) / (sum_k exp(...) + c)
#   c       = (2 pi s2)^(3/2) * w/(1-w) * M/N
#
# Distances are shifted by the per-column minimum before exponentiation so
# the step stays finite for arbitrarily small sigma2.  Returns the posterior
# matrix, the per-point outlier posterior, and the negative log-likelihood.
# ---------------------------------------------------------------------------


def _estep_constants(m: int, n: int, sigma2: float, outlier_w: float):
    norm = (2.0 * math.pi * sigma2) ** 1.5
    if outlier_w > 0.0:
        c = norm * outlier_w / (1.0 - outlier_w) * m / n
        log_b = math.log(outlier_w / n)
    else:
        c = 0.0
        log_b = -math.inf
    log_a = math.log((1.0 - outlier_w) / (m * norm))
    return c, log_a, log_b


def cpd_estep_numpy(moved, fixed, sigma2, outlier_w):
    m, n = moved.shape[0], fixed.shape[0]
    c, log_a, log_b = _estep_constants(m, n, sigma2, outlier_w)
    m2 = np.sum(moved * moved, axis=1)[:, None]
    f2 = np.sum(fixed * fixed, axis=1)[None, :]
    d2 = m2 + f2 - 2.0 * (moved @ fixed.T)
    np.maximum(d2, 0.0, out=d2)
    dmin = d2.min(axis=0)
    shifted = np.exp((d2 - dmin[None, :]) / (-2.0 * sigma2))
    s = shifted.sum(axis=0)
    q = dmin / (2.0 * sigma2)
    if c > 0.0:
        ec = c * np.exp(np.minimum(q, 700.0))
        ec = np.where(q > 700.0, np.inf, ec)
    else:
        ec = np.zeros_like(q)
    denom = s + ec
    p = shifted / denom[None, :]
    p_out = np.where(np.isinf(ec), 1.0, ec / np.where(np.isinf(ec), 1.0, denom))
    log_pn = np.logaddexp(log_a + np.log(s) - q, log_b)
    return p, p_out, float(-np.sum(log_pn))


if HAVE_NUMBA:

    @njit(cache=True)
    def _cpd_estep_jit(moved, fixed, sigma2, c, log_a, log_b):  # pragma: no cover
        m = moved.shape[0]
        n = fixed.shape[0]
        p = np.empty((m, n), np.float64)
        p_out = np.empty(n, np.float64)
        inv2s = 0.5 / sigma2
        nll = 0.0
        col = np.empty(m, np.float64)
        for j in range(n):
            fx = fixed[j, 0]
            fy = fixed[j, 1]
            fz = fixed[j, 2]
            dmin = 1.0e308
            for i in range(m):
                ddx = fx - moved[i, 0]
                ddy = fy - moved[i, 1]
                ddz = fz - moved[i, 2]
                d2 = ddx * ddx + ddy * ddy + ddz * ddz
                col[i] = d2
                if d2 < dmin:
                    dmin = d2
            s = 0.0
            for i in range(m):
                e = math.exp(-(col[i] - dmin) * inv2s)
                col[i] = e
                s += e
            q = dmin * inv2s
            if c > 0.0 and q > 700.0:
                for i in range(m):
                    p[i, j] = 0.0
                p_out[j] = 1.0
            else:
                ec = c * math.exp(q) if c > 0.0 else 0.0
                denom = s + ec
                for i in range(m):
                    p[i, j] = col[i] / denom
                p_out[j] = ec / denom
            la = log_a + math.log(s) - q
            if log_b == -math.inf:
                nll -= la
            else:
                hi = la if la > log_b else log_b
                lo = la if la <= log_b else log_b
                nll -= hi + math.log1p(math.exp(lo - hi))
        return p, p_out, nll

    def cpd_estep_numba(moved, fixed, sigma2, outlier_w):
        m, n = moved.shape[0], fixed.shape[0]
        c, log_a, log_b = _estep_constants(m, n, float(sigma2), float(outlier_w))
        return _cpd_estep_jit(
            np.ascontiguousarray(moved, np.float64),
            np.ascontiguousarray(fixed, np.float64),
            float(sigma2),
            c,
            log_a,
            log_b,
        )

else:
    cpd_estep_numba = cpd_estep_numpy

cpd_estep = cpd_estep_numba if HAVE_NUMBA else cpd_estep_numpy


# ---------------------------------------------------------------------------
# Fan-to-Cartesian resampling.  Frames are (radial, axial) images acquired at
# increasing roll angles about the +z axis; a voxel is sampled bilinearly in
# its two angularly nearest frames and linearly in angle between them.
# Returns (values, valid) with out-of-fan voxels zeroed.
# ---------------------------------------------------------------------------

_ANGLE_EPS = 1e-9


def fan_resample_numpy(frames, angles, rho0, sp_r, sp_c, z0, origin, spacing, dims):
    nx, ny, nz = int(dims[0]), int(dims[1]), int(dims[2])
    n_r, n_c = frames.shape[1], frames.shape[2]
    x = origin[0] + np.arange(nx) * spacing[0]
    y = origin[1] + np.arange(ny) * spacing[1]
    z = origin[2] + np.arange(nz) * spacing[2]
    xg, yg, zg = np.meshgrid(x, y, z, indexing="ij")

    rho = np.hypot(xg, yg)
    phi = np.arctan2(yg, xg)
    phi = np.where(np.abs(phi - angles[0]) < _ANGLE_EPS, angles[0], phi)
    phi = np.where(np.abs(phi - angles[-1]) < _ANGLE_EPS, angles[-1], phi)

    r = (rho - rho0) / sp_r
    c = (zg - z0) / sp_c
    valid = (
        (phi >= angles[0])
        & (phi <= angles[-1])
        & (r >= 0.0)
        & (r <= n_r - 1)
        & (c >= 0.0)
        & (c <= n_c - 1)
    )

    k = np.clip(np.searchsorted(angles, phi, side="right") - 1, 0, len(angles) - 2)
    t = (phi - angles[k]) / (angles[k + 1] - angles[k])

    r0 = np.clip(np.floor(r).astype(np.int64), 0, n_r - 2) if n_r > 1 else np.zeros_like(r, np.int64)
    c0 = np.clip(np.floor(c).astype(np.int64), 0, n_c - 2) if n_c > 1 else np.zeros_like(c, np.int64)
    fr = np.clip(r - r0, 0.0, 1.0)
    fc = np.clip(c - c0, 0.0, 1.0)
    r1 = np.minimum(r0 + 1, n_r - 1)
    c1 = np.minimum(c0 + 1, n_c - 1)

    def bilinear(ki):
        return (
            frames[ki, r0, c0] * (1 - fr) * (1 - fc)
            + frames[ki, r1, c0] * fr * (1 - fc)
            + frames[ki, r0, c1] * (1 - fr) * fc
            + frames[ki, r1, c1] * fr * fc
        )

    vals = (1.0 - t) * bilinear(k) + t * bilinear(k + 1)
    vals = np.where(valid, vals, 0.0)
    return vals.astype(np.float64), valid


if HAVE_NUMBA:

    @njit(cache=True)
    def _fan_resample_jit(frames, angles, rho0, sp_r, sp_c, z0, origin, spacing, dims):  # pragma: no cover
        nx = dims[0]
        ny = dims[1]
        nz = dims[2]
        n_k = frames.shape[0]
        n_r = frames.shape[1]
        n_c = frames.shape[2]
        vals = np.zeros((nx, ny, nz), np.float64)
        valid = np.zeros((nx, ny, nz), np.bool_)
        a_lo = angles[0]
        a_hi = angles[n_k - 1]

        for ix in range(nx):
            px = origin[0] + ix * spacing[0]
            for iy in range(ny):
                py = origin[1] + iy * spacing[1]
                rho = math.hypot(px, py)
                phi = math.atan2(py, px)
                if abs(phi - a_lo) < _ANGLE_EPS:
                    phi = a_lo
                elif abs(phi - a_hi) < _ANGLE_EPS:
                    phi = a_hi
                if phi < a_lo or phi > a_hi:
                    continue
                r = (rho - rho0) / sp_r
                if r < 0.0 or r > n_r - 1:
                    continue
                # locate the bracketing frame pair
                k = np.searchsorted(angles, phi, side="right") - 1
                if k < 0:
                    k = 0
                if k > n_k - 2:
                    k = n_k - 2
                t = (phi - angles[k]) / (angles[k + 1] - angles[k])
                r0 = int(math.floor(r))
                if r0 > n_r - 2:
                    r0 = n_r - 2
                if r0 < 0:
                    r0 = 0
                fr = r - r0
                if fr < 0.0:
                    fr = 0.0
                if fr > 1.0:
                    fr = 1.0
                r1 = r0 + 1
                if r1 > n_r - 1:
                    r1 = n_r - 1
                for iz in range(nz):
                    pz = origin[2] + iz * spacing[2]
                    cc = (pz - z0) / sp_c
                    if cc < 0.0 or cc > n_c - 1:
                        continue
                    c0 = int(math.floor(cc))
                    if c0 > n_c - 2:
                        c0 = n_c - 2
                    if c0 < 0:
                        c0 = 0
                    fc = cc - c0
                    if fc < 0.0:
                        fc = 0.0
                    if fc > 1.0:
                        fc = 1.0
                    c1 = c0 + 1
                    if c1 > n_c - 1:
                        c1 = n_c - 1
                    va = (
                        frames[k, r0, c0] * (1 - fr) * (1 - fc)
                        + frames[k, r1, c0] * fr * (1 - fc)
                        + frames[k, r0, c1] * (1 - fr) * fc
                        + frames[k, r1, c1] * fr * fc
                    )
                    vb = (
                        frames[k + 1, r0, c0] * (1 - fr) * (1 - fc)
                        + frames[k + 1, r1, c0] * fr * (1 - fc)
                        + frames[k + 1, r0, c1] * (1 - fr) * fc
                        + frames[k + 1, r1, c1] * fr * fc
                    )
                    vals[ix, iy, iz] = (1.0 - t) * va + t * vb
                    valid[ix, iy, iz] = True
        return vals, valid

    def fan_resample_numba(frames, angles, rho0, sp_r, sp_c, z0, origin, spacing, dims):
        return _fan_resample_jit(
            np.ascontiguousarray(frames, np.float64),
            np.ascontiguousarray(angles, np.float64),
            float(rho0),
            float(sp_r),
            float(sp_c),
            float(z0),
            np.asarray(origin, np.float64),
            np.asarray(spacing, np.float64),
            np.asarray(dims, np.int64),
        )

else:
    fan_resample_numba = fan_resample_numpy

fan_resample = fan_resample_numba if HAVE_NUMBA else fan_resample_numpy

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from conftest import bumpy_blob, fibonacci_sphere
from ssmseg.cpd import (
    CpdConfig,
    establish_correspondence,
    register_nonrigid,
    register_rigid,
)
from ssmseg.errors import DegenerateInputError, InvalidArgumentError, RegistrationError
from ssmseg.geometry import PointCloud, apply_rigid


def random_pose(rng, max_angle_deg=30.0, max_t=20.0):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0.0, np.deg2rad(max_angle_deg))
    rot = Rotation.from_rotvec(axis * angle).as_matrix()
    t = rng.uniform(-max_t, max_t, 3)
    return rot, t


def sinusoid_warp(pts, amplitude, wavelength):
    return amplitude * np.stack(
        [
            np.sin(2 * np.pi * pts[:, 2] / wavelength),
            np.cos(2 * np.pi * pts[:, 0] / wavelength),
            np.sin(2 * np.pi * pts[:, 1] / wavelength),
        ],
        axis=1,
    )


def remove_rigid_component(pts, disp):
    """Project out net translation and best-fit infinitesimal rotation."""
    disp = disp - disp.mean(axis=0)
    centered = pts - pts.mean(axis=0)
    a = np.zeros((3, 3))
    b = np.zeros(3)
    for c, d in zip(centered, disp):
        m = np.array([[0, c[2], -c[1]], [-c[2], 0, c[0]], [c[1], -c[0], 0]])
        a += m.T @ m
        b += m.T @ d
    omega = np.linalg.solve(a, b)
    return disp - np.cross(np.broadcast_to(omega, centered.shape), centered)


class TestConfig:
    def test_validation(self):
        with pytest.raises(InvalidArgumentError):
            CpdConfig(outlier_weight=1.0)
        with pytest.raises(InvalidArgumentError):
            CpdConfig(tol=0.0)
        with pytest.raises(InvalidArgumentError):
            CpdConfig(beta=-1.0)


class TestRigid:
    def test_self_registration(self, sphere_cloud):
        res = register_rigid(sphere_cloud, sphere_cloud)
        assert np.linalg.norm(res.transform.matrix - np.eye(3)) < 1e-6
        assert np.linalg.norm(res.transform.t) < 1e-6
        assert abs(res.scale - 1.0) < 1e-6
        assert res.converged

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_known_pose_recovery(self, seed):
        rng = np.random.default_rng(200 + seed)
        moving = PointCloud(bumpy_blob(500, rng))
        rot, t = random_pose(rng)
        fixed = PointCloud(moving.points @ rot.T + t)
        res = register_rigid(moving, fixed)
        assert np.linalg.norm(res.transform.matrix - rot) < 1e-3
        assert np.linalg.norm(res.transform.t - t) < 1e-3

    def test_outlier_robustness(self):
        rng = np.random.default_rng(42)
        moving = PointCloud(bumpy_blob(500, rng))
        rot, t = random_pose(rng)
        clean = moving.points @ rot.T + t
        junk = rng.uniform(clean.min(0) - 10, clean.max(0) + 10, size=(50, 3))
        fixed = PointCloud(np.vstack([clean, junk]))
        res = register_rigid(moving, fixed, CpdConfig(outlier_weight=0.1))
        assert np.linalg.norm(res.transform.matrix - rot) < 1e-2
        assert np.linalg.norm(res.transform.t - t) < 1e-2

    def test_objective_nonincreasing(self):
        rng = np.random.default_rng(5)
        moving = PointCloud(bumpy_blob(300, rng))
        rot, t = random_pose(rng)
        fixed = PointCloud(moving.points @ rot.T + t + rng.normal(0, 0.3, (300, 3)))
        res = register_rigid(moving, fixed)
        diffs = np.diff(res.nll_trace)
        assert np.all(diffs <= 1e-8 * np.abs(res.nll_trace[:-1]))

    def test_sigma2_positive_and_shrinking(self):
        rng = np.random.default_rng(6)
        moving = PointCloud(bumpy_blob(250, rng))
        rot, t = random_pose(rng)
        fixed = PointCloud(moving.points @ rot.T + t)
        res = register_rigid(moving, fixed)
        assert res.sigma2 > 0.0
        assert np.all(res.sigma2_trace > 0.0)
        # noise-free pair: non-increasing after the first few iterations
        tail = res.sigma2_trace[3:]
        assert np.all(np.diff(tail) <= 1e-12 * tail[:-1] + 1e-30)

    def test_rotation_equivariance(self):
        rng = np.random.default_rng(7)
        moving = PointCloud(bumpy_blob(250, rng))
        rot, t = random_pose(rng)
        fixed = PointCloud(moving.points @ rot.T + t + rng.normal(0, 0.2, (250, 3)))
        pre = Rotation.from_rotvec([0.4, -0.2, 0.7]).as_matrix()

        r1 = register_rigid(moving, fixed)
        r2 = register_rigid(
            PointCloud(moving.points @ pre.T), PointCloud(fixed.points @ pre.T)
        )
        res1 = apply_rigid(moving, r1.transform).points
        res2 = apply_rigid(PointCloud(moving.points @ pre.T), r2.transform).points
        rms1 = np.sqrt(np.mean(np.sum((res1 - fixed.points) ** 2, axis=1)))
        rms2 = np.sqrt(np.mean(np.sum((res2 - fixed.points @ pre.T) ** 2, axis=1)))
        assert abs(rms1 - rms2) < 1e-6
        assert np.allclose(r2.transform.matrix, pre @ r1.transform.matrix @ pre.T, atol=1e-6)
        assert np.allclose(r2.transform.t, pre @ r1.transform.t, atol=1e-6)

    def test_deterministic(self):
        rng = np.random.default_rng(8)
        moving = PointCloud(bumpy_blob(200, rng))
        rot, t = random_pose(rng)
        fixed = PointCloud(moving.points @ rot.T + t)
        r1 = register_rigid(moving, fixed)
        r2 = register_rigid(moving, fixed)
        assert np.array_equal(r1.transform.t, r2.transform.t)
        assert np.array_equal(r1.transform.theta, r2.transform.theta)
        assert np.array_equal(r1.nll_trace, r2.nll_trace)

    def test_degenerate_cloud_rejected(self):
        line = PointCloud(np.stack([np.linspace(0, 1, 10)] + [np.zeros(10)] * 2, axis=1))
        blob = PointCloud(bumpy_blob(50, np.random.default_rng(0)))
        with pytest.raises(DegenerateInputError):
            register_rigid(line, blob)


class TestNonRigid:
    def test_zero_warp(self, sphere_cloud):
        res = register_nonrigid(sphere_cloud, sphere_cloud)
        diam = sphere_cloud.diameter()
        assert np.abs(res.displaced.points - sphere_cloud.points).max() < 1e-6 * diam
        assert np.array_equal(res.correspondence, np.arange(sphere_cloud.n))

    def test_sinusoidal_warp_tracked(self, sphere_cloud):
        diam = sphere_cloud.diameter()
        warped = sphere_cloud.points + sinusoid_warp(sphere_cloud.points, 0.05 * diam, 2 * diam)
        res = register_nonrigid(sphere_cloud, PointCloud(warped))
        rms = np.sqrt(np.mean(np.sum((res.displaced.points - warped) ** 2, axis=1)))
        assert rms < 0.01 * diam

    def test_huge_lambda_reduces_to_rigid(self, sphere_cloud):
        diam = sphere_cloud.diameter()
        disp = remove_rigid_component(
            sphere_cloud.points, sinusoid_warp(sphere_cloud.points, 0.001 * diam, diam)
        )
        fixed = PointCloud(sphere_cloud.points + disp)
        rigid = register_rigid(sphere_cloud, fixed)
        rigid_aligned = apply_rigid(sphere_cloud, rigid.transform).points
        res = register_nonrigid(sphere_cloud, fixed, CpdConfig(lam=1e6))
        rms = np.sqrt(np.mean(np.sum((res.displaced.points - rigid_aligned) ** 2, axis=1)))
        assert rms < 0.001 * diam

    def test_singular_system_reported(self):
        pts = np.repeat(fibonacci_sphere(8) * 5.0, 8, axis=0)  # heavy duplication
        cloud = PointCloud(pts)
        target = PointCloud(fibonacci_sphere(64) * 5.0)
        with pytest.raises(RegistrationError, match="lam"):
            register_nonrigid(cloud, target, CpdConfig(lam=1e-300))

    def test_deterministic(self, sphere_cloud):
        diam = sphere_cloud.diameter()
        warped = PointCloud(
            sphere_cloud.points + sinusoid_warp(sphere_cloud.points, 0.02 * diam, 2 * diam)
        )
        r1 = register_nonrigid(sphere_cloud, warped)
        r2 = register_nonrigid(sphere_cloud, warped)
        assert np.array_equal(r1.displaced.points, r2.displaced.points)
        assert np.array_equal(r1.correspondence, r2.correspondence)


class TestEstablishCorrespondence:
    def test_reference_alone(self, sphere_cloud):
        out = establish_correspondence(sphere_cloud, [sphere_cloud])
        assert np.abs(out[0].points - sphere_cloud.points).max() < 1e-6 * sphere_cloud.diameter()

    def test_scaled_copies(self, sphere_cloud):
        diam = sphere_cloud.diameter()
        pop = [PointCloud(0.9 * sphere_cloud.points), PointCloud(1.1 * sphere_cloud.points)]
        out = establish_correspondence(sphere_cloud, pop)
        for got, want in zip(out, pop):
            rms = np.sqrt(np.mean(np.sum((got.points - want.points) ** 2, axis=1)))
            assert rms < 0.01 * diam

    def test_uniform_cardinality(self, sphere_cloud):
        pop = [
            PointCloud(0.95 * sphere_cloud.points),
            PointCloud(fibonacci_sphere(123) * 19.0),
            PointCloud(1.05 * sphere_cloud.points),
        ]
        out = establish_correspondence(sphere_cloud, pop)
        assert all(o.n == sphere_cloud.n for o in out)

    def test_member_index_in_error(self, sphere_cloud):
        line = PointCloud(np.stack([np.linspace(0, 1, 10)] + [np.zeros(10)] * 2, axis=1))
        with pytest.raises(RegistrationError, match="member 1"):
            establish_correspondence(sphere_cloud, [sphere_cloud, line])

    def test_empty_population_rejected(self, sphere_cloud):
        with pytest.raises(InvalidArgumentError):
            establish_correspondence(sphere_cloud, [])

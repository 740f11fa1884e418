import numpy as np
import pytest

from ssmseg.geometry import PointCloud


def fibonacci_sphere(n: int) -> np.ndarray:
    """Deterministic, roughly uniform unit-sphere sampling."""
    i = np.arange(n) + 0.5
    polar = np.arccos(1.0 - 2.0 * i / n)
    azim = np.pi * (1.0 + 5.0**0.5) * i
    return np.stack(
        [np.sin(polar) * np.cos(azim), np.sin(polar) * np.sin(azim), np.cos(polar)], axis=1
    )


def bumpy_blob(n: int, rng: np.random.Generator, radius: float = 20.0) -> np.ndarray:
    u = rng.normal(size=(n, 3))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    r = radius * (1.0 + 0.15 * np.sin(3.0 * u[:, 2]) + 0.1 * u[:, 0] * u[:, 1])
    return u * r[:, None]


@pytest.fixture
def sphere_cloud() -> PointCloud:
    return PointCloud(20.0 * fibonacci_sphere(400))


def winding_number_inside(points: np.ndarray, verts: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Independent point-in-polyhedron oracle via generalized winding numbers."""
    out = np.zeros(len(points), dtype=bool)
    for k, q in enumerate(points):
        a = verts[faces[:, 0]] - q
        b = verts[faces[:, 1]] - q
        c = verts[faces[:, 2]] - q
        la = np.linalg.norm(a, axis=1)
        lb = np.linalg.norm(b, axis=1)
        lc = np.linalg.norm(c, axis=1)
        num = np.einsum("ij,ij->i", a, np.cross(b, c))
        den = (
            la * lb * lc
            + np.einsum("ij,ij->i", a, b) * lc
            + np.einsum("ij,ij->i", b, c) * la
            + np.einsum("ij,ij->i", c, a) * lb
        )
        omega = 2.0 * np.arctan2(num, den)
        out[k] = abs(omega.sum()) > 2.0 * np.pi
    return out

import math

import numpy as np
import pytest

from dynsplat.errors import InvalidInputError
from dynsplat.gaussians import (Camera, build_covariance, evaluate_sh,
                                gaussian_weight, project_covariance,
                                quat_to_rotmat, sh_coeff_count)

IDENTITY_Q = np.array([1.0, 0.0, 0.0, 0.0])


def test_covariance_identity():
    cov = build_covariance(IDENTITY_Q, np.array([1.0, 1.0, 1.0]))
    assert np.array_equal(cov, np.eye(3))


def test_covariance_diagonal_scales():
    cov = build_covariance(IDENTITY_Q, np.array([2.0, 3.0, 4.0]))
    assert np.allclose(cov, np.diag([4.0, 9.0, 16.0]))


def test_covariance_rotated():
    # 90 degrees about z: hand-composed R S S^T R^T
    q = np.array([math.cos(math.pi / 4), 0.0, 0.0, math.sin(math.pi / 4)])
    cov = build_covariance(q, np.array([2.0, 1.0, 1.0]))
    r = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    expected = r @ np.diag([4.0, 1.0, 1.0]) @ r.T
    assert np.allclose(cov, expected, atol=1e-12)
    assert np.allclose(cov, np.diag([1.0, 4.0, 1.0]), atol=1e-12)


def test_covariance_zero_quaternion_rejected():
    with pytest.raises(InvalidInputError):
        build_covariance(np.zeros(4), np.ones(3))


def test_covariance_nonpositive_scale_rejected():
    with pytest.raises(InvalidInputError):
        build_covariance(IDENTITY_Q, np.array([1.0, 0.0, 1.0]))


def test_covariance_quaternion_sign_invariance():
    rng = np.random.default_rng(7)
    for _ in range(20):
        q = rng.normal(size=4)
        s = np.exp(rng.normal(size=3) * 0.5)
        assert np.array_equal(build_covariance(q, s), build_covariance(-q, s))


def test_covariance_eigenvalues_are_squared_scales():
    rng = np.random.default_rng(11)
    for _ in range(30):
        q = rng.normal(size=4)
        s = np.exp(rng.normal(size=3))
        eig = np.sort(np.linalg.eigvalsh(build_covariance(q, s)))
        assert np.allclose(eig, np.sort(s ** 2), atol=1e-9)


def test_covariance_symmetry():
    rng = np.random.default_rng(3)
    q = rng.normal(size=4)
    cov = build_covariance(q, np.array([0.5, 1.5, 2.5]))
    assert np.allclose(cov, cov.T, atol=0)


def test_quat_to_rotmat_orthonormal():
    rng = np.random.default_rng(5)
    q = rng.normal(size=(50, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    r = quat_to_rotmat(q)
    eye = np.einsum("mij,mkj->mik", r, r)
    assert np.allclose(eye, np.eye(3), atol=1e-12)
    assert np.allclose(np.linalg.det(r), 1.0, atol=1e-12)


def test_project_covariance_unit_case():
    cov2d = project_covariance(np.eye(3), np.eye(4), np.array([0.0, 0.0, 1.0]), 1.0, 1.0)
    assert np.allclose(cov2d, np.eye(2) * 1.3, atol=1e-12)


def test_project_covariance_focal_scaling():
    mu = np.array([0.0, 0.0, 1.0])
    base = project_covariance(np.eye(3), np.eye(4), mu, 1.0, 1.0)
    doubled = project_covariance(np.eye(3), np.eye(4), mu, 2.0, 1.0)
    # quadruples the xx entry before the floor
    assert np.isclose(doubled[0, 0] - 0.3, 4.0 * (base[0, 0] - 0.3))


def test_project_covariance_near_plane_cull():
    assert project_covariance(np.eye(3), np.eye(4), np.array([0.0, 0.0, 0.005]), 1.0, 1.0) is None


def test_evaluate_sh_dc_offset():
    out = evaluate_sh(np.zeros((1, 3)), np.array([0.0, 0.0, 1.0]), 0)
    assert np.allclose(out, [0.5, 0.5, 0.5])


def test_evaluate_sh_dc_basis_constant():
    coeffs = np.zeros((1, 3))
    coeffs[0, 0] = 1.0 / 0.2820948
    out = evaluate_sh(coeffs, np.array([0.0, 0.0, 1.0]), 0)
    assert np.allclose(out, [1.5, 0.5, 0.5], atol=1e-6)


def test_evaluate_sh_degree1_parity():
    rng = np.random.default_rng(2)
    coeffs = rng.normal(size=(4, 3)) * 0.1
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    plus = evaluate_sh(coeffs, d, 1)
    minus = evaluate_sh(coeffs, -d, 1)
    dc = 0.28209479177387814 * coeffs[0] + 0.5
    # flipping the direction negates the odd-degree contribution
    assert np.allclose(plus - dc, -(minus - dc), atol=1e-12)


def test_evaluate_sh_rejects_bad_degree():
    with pytest.raises(InvalidInputError):
        sh_coeff_count(4)
    with pytest.raises(InvalidInputError):
        evaluate_sh(np.zeros((1, 3)), np.array([0.0, 0.0, 1.0]), -1)


def test_evaluate_sh_rejects_non_unit_direction():
    with pytest.raises(InvalidInputError):
        evaluate_sh(np.zeros((1, 3)), np.array([0.0, 0.0, 2.0]), 0)


def test_gaussian_weight_center():
    assert gaussian_weight(np.zeros(2), np.zeros(2), np.eye(2)) == 1.0


def test_gaussian_weight_unit_distance():
    w = gaussian_weight(np.array([1.0, 0.0]), np.zeros(2), np.eye(2))
    assert np.isclose(w, math.exp(-0.5))


def test_gaussian_weight_mahalanobis_normalization():
    w = gaussian_weight(np.array([2.0, 0.0]), np.zeros(2), np.diag([4.0, 1.0]))
    assert np.isclose(w, math.exp(-0.5))


def test_gaussian_weight_monotone_along_ray():
    rng = np.random.default_rng(9)
    cov = np.array([[2.0, 0.4], [0.4, 1.0]])
    direction = rng.normal(size=2)
    vals = [gaussian_weight(t * direction, np.zeros(2), cov) for t in np.linspace(0, 5, 40)]
    assert all(b <= a for a, b in zip(vals, vals[1:]))


def test_gaussian_weight_singular_covariance():
    with pytest.raises(InvalidInputError):
        gaussian_weight(np.zeros(2), np.zeros(2), np.zeros((2, 2)))


def test_camera_validation():
    bad = np.eye(4)
    bad[0, 1] = 0.2
    with pytest.raises(InvalidInputError):
        Camera(bad, fx=10, fy=10, cx=5, cy=5, width=10, height=10)
    with pytest.raises(InvalidInputError):
        Camera(np.eye(4), fx=-1, fy=10, cx=5, cy=5, width=10, height=10)


def test_camera_look_at_roundtrip():
    eye = np.array([3.0, -2.0, 1.5])
    cam = Camera.look_at(eye, np.zeros(3), fx=32, fy=32, cx=16, cy=16, width=32, height=32)
    assert np.allclose(cam.center(), eye, atol=1e-12)
    r = cam.rotation
    assert np.allclose(r @ r.T, np.eye(3), atol=1e-12)
    assert np.isclose(np.linalg.det(r), 1.0)
    # target projects to the optical axis with positive depth
    p = r @ (np.zeros(3) - eye)
    assert p[2] > 0
    assert np.allclose(p[:2], 0, atol=1e-12)

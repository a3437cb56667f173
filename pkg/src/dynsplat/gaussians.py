"""Canonical Gaussian parameterization, projection math and view-dependent color.

Conventions: quaternions are (w, x, y, z) and stored unnormalized; scales are
stored as logs; opacities as logits. Activations happen on use so additive
parameter updates stay unconstrained.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError

# Splatting conventions inherited from standard tile rasterizers.
NEAR_PLANE = 0.01          # camera-space depth below which a Gaussian is culled
COV2D_FLOOR = 0.3          # low-pass floor added to the 2D covariance diagonal (px^2)
ALPHA_CLAMP = 0.99         # per-contributor alpha ceiling
ALPHA_SKIP = 1.0 / 255.0   # contributors below this alpha are skipped
TRANSMITTANCE_EPS = 1e-4   # blending terminates once transmittance would drop below this
# Any pixel with alpha >= ALPHA_SKIP lies within sqrt(2*ln(255)) Mahalanobis
# units of the projected center (opacity <= 1), so this radius bounds the
# footprint a tile assignment must cover. Half a pixel of padding absorbs
# boundary rounding.
MAX_MAHAL = math.sqrt(2.0 * math.log(255.0))

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
         0.3731763325901154, -0.4570457994644658, 1.445305721320277,
         -0.5900435899266435)


def sh_coeff_count(degree: int) -> int:
    if not 0 <= degree <= 3:
        raise InvalidInputError(f"SH degree must be in 0..3, got {degree}")
    return (degree + 1) ** 2


@dataclass
class GaussianSet:
    """Per-Gaussian canonical parameters plus the learnable latent embeddings.

    positions        (N, 3) world-space means
    rotations        (N, 4) unnormalized quaternions, normalized on use
    log_scales       (N, 3) log of world-unit axis scales
    logit_opacities  (N,)   sigmoid gives opacity in (0, 1)
    sh_coeffs        (N, K, 3) RGB coeffs, K = (degree + 1)^2
    embeddings       (N, E) per-Gaussian latent vectors
    """

    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    logit_opacities: np.ndarray
    sh_coeffs: np.ndarray
    embeddings: np.ndarray

    @property
    def count(self) -> int:
        return self.positions.shape[0]

    @property
    def sh_degree(self) -> int:
        return int(round(math.sqrt(self.sh_coeffs.shape[1]))) - 1

    @property
    def dtype(self):
        return self.positions.dtype

    def validate(self) -> None:
        n = self.count
        shapes = {
            "positions": (n, 3),
            "rotations": (n, 4),
            "log_scales": (n, 3),
            "logit_opacities": (n,),
            "embeddings": (n, self.embeddings.shape[1] if self.embeddings.ndim == 2 else -1),
        }
        for name, want in shapes.items():
            arr = getattr(self, name)
            if arr.shape != want:
                raise InvalidInputError(f"{name} has shape {arr.shape}, expected {want}")
        if self.sh_coeffs.ndim != 3 or self.sh_coeffs.shape[0] != n or self.sh_coeffs.shape[2] != 3:
            raise InvalidInputError(f"sh_coeffs has shape {self.sh_coeffs.shape}")
        k = self.sh_coeffs.shape[1]
        if k not in (1, 4, 9, 16):
            raise InvalidInputError(f"sh_coeffs count {k} is not (degree+1)^2 for degree 0..3")
        for name in ("positions", "rotations", "log_scales", "logit_opacities",
                     "sh_coeffs", "embeddings"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise InvalidInputError(f"{name} contains non-finite values")

    def copy(self) -> "GaussianSet":
        return GaussianSet(*(getattr(self, f).copy() for f in _FIELDS))

    def astype(self, dtype) -> "GaussianSet":
        return GaussianSet(*(getattr(self, f).astype(dtype) for f in _FIELDS))

    def activated_scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    def activated_opacities(self) -> np.ndarray:
        return _sigmoid(self.logit_opacities)


_FIELDS = ("positions", "rotations", "log_scales", "logit_opacities",
           "sh_coeffs", "embeddings")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class Camera:
    """Pinhole camera with a world-to-camera transform (OpenCV axes, +z forward)."""

    view_transform: np.ndarray  # (4, 4) world -> camera
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    time_offset: float = 0.0

    def __post_init__(self):
        self.view_transform = np.asarray(self.view_transform, dtype=np.float64)
        if self.view_transform.shape != (4, 4):
            raise InvalidInputError("view_transform must be 4x4")
        r = self.view_transform[:3, :3]
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-9):
            raise InvalidInputError("view_transform rotation block is not orthonormal")
        if np.linalg.det(r) < 0:
            raise InvalidInputError("view_transform rotation block has det < 0")
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidInputError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise InvalidInputError("image dimensions must be positive")

    @property
    def rotation(self) -> np.ndarray:
        return self.view_transform[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.view_transform[:3, 3]

    def center(self) -> np.ndarray:
        """Camera origin in world coordinates."""
        return -self.rotation.T @ self.translation

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0), *, fx, fy, cx, cy,
                width, height, time_offset=0.0) -> "Camera":
        eye = np.asarray(eye, dtype=np.float64)
        z = np.asarray(target, dtype=np.float64) - eye
        z = z / np.linalg.norm(z)
        x = np.cross(z, np.asarray(up, dtype=np.float64))
        nx = np.linalg.norm(x)
        if nx < 1e-12:  # looking straight along up: pick any perpendicular
            x = np.cross(z, np.array([1.0, 0.0, 0.0]))
            nx = np.linalg.norm(x)
        x = x / nx
        y = np.cross(z, x)
        r = np.stack([x, y, z])
        w = np.eye(4)
        w[:3, :3] = r
        w[:3, 3] = -r @ eye
        return cls(w, fx=fx, fy=fy, cx=cx, cy=cy, width=width, height=height,
                   time_offset=time_offset)


# --- quaternion / covariance math -------------------------------------------

def quat_normalize(q: np.ndarray) -> np.ndarray:
    """Normalize quaternions along the last axis; zero quaternions are invalid."""
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm == 0.0):
        raise InvalidInputError("zero quaternion cannot be normalized")
    return q / norm


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Unit quaternions (..., 4) -> rotation matrices (..., 3, 3)."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    m = np.empty(q.shape[:-1] + (3, 3), dtype=q.dtype)
    m[..., 0, 0] = 1 - 2 * (yy + zz)
    m[..., 0, 1] = 2 * (xy - wz)
    m[..., 0, 2] = 2 * (xz + wy)
    m[..., 1, 0] = 2 * (xy + wz)
    m[..., 1, 1] = 1 - 2 * (xx + zz)
    m[..., 1, 2] = 2 * (yz - wx)
    m[..., 2, 0] = 2 * (xz - wy)
    m[..., 2, 1] = 2 * (yz + wx)
    m[..., 2, 2] = 1 - 2 * (xx + yy)
    return m


def rotmat_backward_to_quat(d_rot: np.ndarray, q_unit: np.ndarray) -> np.ndarray:
    """Adjoint of quat_to_rotmat at unit quaternions: (..., 3, 3) -> (..., 4)."""
    w, x, y, z = q_unit[..., 0], q_unit[..., 1], q_unit[..., 2], q_unit[..., 3]
    g = d_rot
    dq = np.empty_like(q_unit)
    dq[..., 0] = 2 * (z * (g[..., 1, 0] - g[..., 0, 1])
                      + y * (g[..., 0, 2] - g[..., 2, 0])
                      + x * (g[..., 2, 1] - g[..., 1, 2]))
    dq[..., 1] = 2 * (y * (g[..., 1, 0] + g[..., 0, 1])
                      + z * (g[..., 0, 2] + g[..., 2, 0])
                      + w * (g[..., 2, 1] - g[..., 1, 2])
                      - 2 * x * (g[..., 1, 1] + g[..., 2, 2]))
    dq[..., 2] = 2 * (x * (g[..., 1, 0] + g[..., 0, 1])
                      + w * (g[..., 0, 2] - g[..., 2, 0])
                      + z * (g[..., 2, 1] + g[..., 1, 2])
                      - 2 * y * (g[..., 0, 0] + g[..., 2, 2]))
    dq[..., 3] = 2 * (w * (g[..., 1, 0] - g[..., 0, 1])
                      + x * (g[..., 0, 2] + g[..., 2, 0])
                      + y * (g[..., 2, 1] + g[..., 1, 2])
                      - 2 * z * (g[..., 0, 0] + g[..., 1, 1]))
    return dq


def normalize_backward(d_unit: np.ndarray, raw: np.ndarray) -> np.ndarray:
    """Adjoint of v -> v/|v| along the last axis, evaluated at raw."""
    norm = np.linalg.norm(raw, axis=-1, keepdims=True)
    unit = raw / norm
    dot = np.sum(d_unit * unit, axis=-1, keepdims=True)
    return (d_unit - dot * unit) / norm


def build_covariance(rotation: np.ndarray, scale: np.ndarray) -> np.ndarray:
    """3D covariance R diag(s) diag(s) R^T from a quaternion and positive scales."""
    rotation = np.asarray(rotation, dtype=np.float64)
    scale = np.asarray(scale, dtype=np.float64)
    if np.any(scale <= 0):
        raise InvalidInputError("scales must be strictly positive")
    r = quat_to_rotmat(quat_normalize(rotation))
    m = r * scale  # R @ diag(s)
    return m @ m.T


def covariance_batch(rotations: np.ndarray, log_scales: np.ndarray):
    """Vectorized covariance pieces for the rasterizer.

    Returns (cov3d (N,3,3), rot (N,3,3), scales (N,3), unit_quats (N,4)).
    """
    q = quat_normalize(rotations)
    rot = quat_to_rotmat(q)
    s = np.exp(log_scales)
    m = rot * s[:, None, :]
    cov = m @ np.swapaxes(m, -1, -2)
    return cov, rot, s, q


def perspective_jacobian(mu_cam: np.ndarray, fx: float, fy: float) -> np.ndarray:
    """Jacobian of (fx*x/z, fy*y/z) at camera-space points (..., 3) -> (..., 2, 3)."""
    x, y, z = mu_cam[..., 0], mu_cam[..., 1], mu_cam[..., 2]
    j = np.zeros(mu_cam.shape[:-1] + (2, 3), dtype=mu_cam.dtype)
    j[..., 0, 0] = fx / z
    j[..., 0, 2] = -fx * x / (z * z)
    j[..., 1, 1] = fy / z
    j[..., 1, 2] = -fy * y / (z * z)
    return j


def project_covariance(cov3d: np.ndarray, view: np.ndarray, mu_cam: np.ndarray,
                       fx: float, fy: float):
    """Project a world covariance to a 2D screen covariance at mu_cam.

    Returns the 2x2 covariance with the low-pass diagonal floor applied, or
    None when the point is on or behind the near plane (caller culls).
    """
    mu_cam = np.asarray(mu_cam, dtype=np.float64)
    if mu_cam[2] <= NEAR_PLANE:
        return None
    w3 = np.asarray(view, dtype=np.float64)[:3, :3]
    j = perspective_jacobian(mu_cam, fx, fy)
    cov_cam = w3 @ np.asarray(cov3d, dtype=np.float64) @ w3.T
    cov2d = j @ cov_cam @ j.T
    return cov2d + COV2D_FLOOR * np.eye(2)


def gaussian_weight(x: np.ndarray, mean2d: np.ndarray, cov2d: np.ndarray) -> float:
    """exp(-1/2 d^T cov2d^{-1} d) with d = x - mean2d."""
    a, b, c = cov2d[0, 0], cov2d[0, 1], cov2d[1, 1]
    det = a * c - b * b
    if det <= 0:
        raise InvalidInputError("2D covariance is not invertible")
    d = np.asarray(x, dtype=np.float64) - np.asarray(mean2d, dtype=np.float64)
    m = (c * d[0] * d[0] - 2 * b * d[0] * d[1] + a * d[1] * d[1]) / det
    return float(np.exp(-0.5 * m))


# --- spherical harmonics ------------------------------------------------------

def sh_basis(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Real SH basis values (signs folded in) for unit directions (..., 3)."""
    k = sh_coeff_count(degree)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    b = np.empty(dirs.shape[:-1] + (k,), dtype=dirs.dtype)
    b[..., 0] = SH_C0
    if degree >= 1:
        b[..., 1] = -SH_C1 * y
        b[..., 2] = SH_C1 * z
        b[..., 3] = -SH_C1 * x
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        b[..., 4] = SH_C2[0] * x * y
        b[..., 5] = SH_C2[1] * y * z
        b[..., 6] = SH_C2[2] * (2 * zz - xx - yy)
        b[..., 7] = SH_C2[3] * x * z
        b[..., 8] = SH_C2[4] * (xx - yy)
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        b[..., 9] = SH_C3[0] * y * (3 * xx - yy)
        b[..., 10] = SH_C3[1] * x * y * z
        b[..., 11] = SH_C3[2] * y * (4 * zz - xx - yy)
        b[..., 12] = SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy)
        b[..., 13] = SH_C3[4] * x * (4 * zz - xx - yy)
        b[..., 14] = SH_C3[5] * z * (xx - yy)
        b[..., 15] = SH_C3[6] * x * (xx - 3 * yy)
    return b


def sh_basis_jacobian(dirs: np.ndarray, degree: int) -> np.ndarray:
    """d basis / d direction, (..., K, 3)."""
    k = sh_coeff_count(degree)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    jac = np.zeros(dirs.shape[:-1] + (k, 3), dtype=dirs.dtype)
    if degree >= 1:
        jac[..., 1, 1] = -SH_C1
        jac[..., 2, 2] = SH_C1
        jac[..., 3, 0] = -SH_C1
    if degree >= 2:
        jac[..., 4, 0] = SH_C2[0] * y
        jac[..., 4, 1] = SH_C2[0] * x
        jac[..., 5, 1] = SH_C2[1] * z
        jac[..., 5, 2] = SH_C2[1] * y
        jac[..., 6, 0] = SH_C2[2] * (-2 * x)
        jac[..., 6, 1] = SH_C2[2] * (-2 * y)
        jac[..., 6, 2] = SH_C2[2] * (4 * z)
        jac[..., 7, 0] = SH_C2[3] * z
        jac[..., 7, 2] = SH_C2[3] * x
        jac[..., 8, 0] = SH_C2[4] * (2 * x)
        jac[..., 8, 1] = SH_C2[4] * (-2 * y)
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        jac[..., 9, 0] = SH_C3[0] * 6 * x * y
        jac[..., 9, 1] = SH_C3[0] * (3 * xx - 3 * yy)
        jac[..., 10, 0] = SH_C3[1] * y * z
        jac[..., 10, 1] = SH_C3[1] * x * z
        jac[..., 10, 2] = SH_C3[1] * x * y
        jac[..., 11, 0] = SH_C3[2] * (-2 * x * y)
        jac[..., 11, 1] = SH_C3[2] * (4 * zz - xx - 3 * yy)
        jac[..., 11, 2] = SH_C3[2] * (8 * y * z)
        jac[..., 12, 0] = SH_C3[3] * (-6 * x * z)
        jac[..., 12, 1] = SH_C3[3] * (-6 * y * z)
        jac[..., 12, 2] = SH_C3[3] * (6 * zz - 3 * xx - 3 * yy)
        jac[..., 13, 0] = SH_C3[4] * (4 * zz - 3 * xx - yy)
        jac[..., 13, 1] = SH_C3[4] * (-2 * x * y)
        jac[..., 13, 2] = SH_C3[4] * (8 * x * z)
        jac[..., 14, 0] = SH_C3[5] * (2 * x * z)
        jac[..., 14, 1] = SH_C3[5] * (-2 * y * z)
        jac[..., 14, 2] = SH_C3[5] * (xx - yy)
        jac[..., 15, 0] = SH_C3[6] * (3 * xx - 3 * yy)
        jac[..., 15, 1] = SH_C3[6] * (-6 * x * y)
    return jac


def evaluate_sh(coeffs: np.ndarray, view_dir: np.ndarray, degree: int) -> np.ndarray:
    """View-dependent RGB: basis contraction + 0.5 DC offset, clamped at 0."""
    k = sh_coeff_count(degree)
    coeffs = np.asarray(coeffs, dtype=np.float64)
    view_dir = np.asarray(view_dir, dtype=np.float64)
    if coeffs.shape != (k, 3):
        raise InvalidInputError(f"expected {(k, 3)} coefficients, got {coeffs.shape}")
    if abs(np.linalg.norm(view_dir) - 1.0) > 1e-9:
        raise InvalidInputError("view_dir must be unit length")
    raw = sh_basis(view_dir, degree) @ coeffs + 0.5
    return np.maximum(raw, 0.0)


def rgb_to_sh_dc(rgb: np.ndarray) -> np.ndarray:
    """Inverse of the DC convention: the coefficient whose color equals rgb."""
    return (np.asarray(rgb, dtype=np.float64) - 0.5) / SH_C0

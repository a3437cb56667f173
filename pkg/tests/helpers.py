"""Shared builders for randomized test scenes and gradient checking."""

import numpy as np

from dynsplat.gaussians import Camera, GaussianSet, rgb_to_sh_dc, sh_coeff_count


def random_gaussians(rng, count, sh_degree=1, spread=0.6, depth=3.0,
                     opacity_range=(-1.0, 2.0), scale_range=(-2.6, -1.2),
                     zg_dim=8, dtype=np.float64):
    """Gaussians scattered in front of the +z axis at the given depth."""
    k = sh_coeff_count(sh_degree)
    pos = rng.uniform(-spread, spread, size=(count, 3))
    pos[:, 2] += depth
    rot = rng.normal(size=(count, 4))
    sh = np.zeros((count, k, 3))
    sh[:, 0, :] = rgb_to_sh_dc(rng.uniform(0.1, 0.9, size=(count, 3)))
    if k > 1:
        sh[:, 1:, :] = rng.normal(size=(count, k - 1, 3)) * 0.05
    return GaussianSet(
        positions=pos.astype(dtype),
        rotations=rot.astype(dtype),
        log_scales=rng.uniform(*scale_range, size=(count, 3)).astype(dtype),
        logit_opacities=rng.uniform(*opacity_range, size=count).astype(dtype),
        sh_coeffs=sh.astype(dtype),
        embeddings=(rng.normal(size=(count, zg_dim)) * 0.01).astype(dtype),
    )


def front_camera(width=16, height=16, focal=None):
    """Identity-pose camera looking down +z."""
    focal = focal or width
    return Camera(np.eye(4), fx=focal, fy=focal, cx=width / 2, cy=height / 2,
                  width=width, height=height)


def ring_camera(angle, radius=4.0, height=1.2, width=32, im_height=32, focal=None):
    eye = np.array([radius * np.cos(angle), radius * np.sin(angle), height])
    return Camera.look_at(eye, np.zeros(3), fx=focal or width, fy=focal or width,
                          cx=width / 2, cy=im_height / 2, width=width, height=im_height)


def grad_close(analytic, fd, rel=1e-4, abs_floor=1e-8):
    """Spec tolerance: relative for healthy grads, absolute for near-zero ones."""
    scale = max(abs(analytic), abs(fd))
    return abs(analytic - fd) <= max(rel * scale, abs_floor)


def central_difference(fn, arr, index, h=1e-5):
    orig = arr[index]
    arr[index] = orig + h
    up = fn()
    arr[index] = orig - h
    dn = fn()
    arr[index] = orig
    return (up - dn) / (2.0 * h)

"""Tile-based forward rendering and exact reverse-mode gradients.

Blending follows the standard splatting recipe: project every Gaussian,
sort globally by camera depth (ties by index), then composite front-to-back
per pixel with per-contributor alpha = opacity * exp(-1/2 Mahalanobis^2).

Determinism contract: per-tile work is a pure function of read-shared
inputs, and gradient partials are folded into the global buffers in tile
order (row-major), so results are bit-identical for any worker count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolationError, InvalidInputError
from .gaussians import (ALPHA_CLAMP, ALPHA_SKIP, COV2D_FLOOR, MAX_MAHAL, NEAR_PLANE,
                        TRANSMITTANCE_EPS, Camera, GaussianSet, covariance_batch,
                        normalize_backward, perspective_jacobian,
                        rotmat_backward_to_quat, sh_basis, sh_basis_jacobian)

# padding added to the screen-space footprint radius to absorb pixel-center
# rounding at the alpha-skip boundary
RADIUS_PAD = 1.0


@dataclass
class RenderSettings:
    background: np.ndarray = None  # (3,) linear RGB, default black
    tile_size: int = 16
    early_terminate: bool = True
    workers: int = 1
    dtype: type = np.float64

    def __post_init__(self):
        if self.background is None:
            self.background = np.zeros(3, dtype=self.dtype)
        else:
            self.background = np.asarray(self.background, dtype=self.dtype)
        if self.tile_size <= 0:
            raise InvalidInputError("tile_size must be positive")
        if self.workers < 1:
            raise InvalidInputError("workers must be >= 1")


@dataclass
class _Projected:
    """Per-Gaussian screen-space quantities, visible subset in blend order."""

    orig_idx: np.ndarray     # (M,) indices into the input GaussianSet
    raw_quats: np.ndarray    # (M, 4)
    unit_quats: np.ndarray   # (M, 4)
    rot: np.ndarray          # (M, 3, 3)
    scales: np.ndarray       # (M, 3)
    mu_cam: np.ndarray       # (M, 3)
    cov_cam: np.ndarray      # (M, 3, 3)  W3 Sigma W3^T
    jac: np.ndarray          # (M, 2, 3)
    mean2d: np.ndarray       # (M, 2) pixel coords
    cov2d: np.ndarray        # (M, 2, 2) incl. low-pass floor
    conic: np.ndarray        # (M, 2, 2) inverse of cov2d
    radius: np.ndarray       # (M,) pixel footprint radius
    depth: np.ndarray        # (M,)
    opacity: np.ndarray      # (M,) activated
    color: np.ndarray        # (M, 3)
    color_live: np.ndarray   # (M, 3) False where the 0-clamp is active
    basis: np.ndarray        # (M, K) SH basis at the view direction
    view_raw: np.ndarray     # (M, 3) position - camera center (unnormalized)
    sh: np.ndarray           # (M, K, 3)


@dataclass
class _TileBlend:
    rect: tuple               # (r0, r1, c0, c1)
    contrib: np.ndarray       # (n,) positions into the projected arrays
    beta: np.ndarray          # (n, P) effective alphas (0 where skipped)
    trans: np.ndarray         # (n, P) transmittance before each contributor
    include: np.ndarray       # (n, P) blended mask (skip + termination applied)
    t_bg: np.ndarray          # (P,) residual transmittance for the background


@dataclass
class RenderAux:
    """Forward-pass records retained for the backward pass."""

    projected: _Projected
    tiles: list
    camera: Camera
    settings: RenderSettings
    gaussian_count: int
    image_shape: tuple

    def pixel_contributors(self, row: int, col: int):
        """(gaussian indices, alphas, transmittances) blended at one pixel."""
        ts = self.settings.tile_size
        for tb in self.tiles:
            r0, r1, c0, c1 = tb.rect
            if r0 <= row < r1 and c0 <= col < c1:
                p = (row - r0) * (c1 - c0) + (col - c0)
                sel = tb.include[:, p]
                idx = self.projected.orig_idx[tb.contrib[sel]]
                return idx, tb.beta[sel, p], tb.trans[sel, p]
        return (np.empty(0, dtype=int), np.empty(0), np.empty(0))


@dataclass
class RenderGrads:
    """Per-Gaussian parameter gradients in pre-activation space."""

    d_positions: np.ndarray
    d_rotations: np.ndarray
    d_log_scales: np.ndarray
    d_logit_opacities: np.ndarray
    d_sh: np.ndarray
    screen_grad_norms: np.ndarray  # (N,) accumulated |dL/d mean2d| for densification
    visible: np.ndarray            # (N,) bool


def _preprocess(g: GaussianSet, cam: Camera, settings: RenderSettings) -> _Projected:
    dtype = settings.dtype
    w3 = cam.rotation.astype(dtype)
    tvec = cam.translation.astype(dtype)
    mu = g.positions.astype(dtype, copy=False)
    mu_cam_all = mu @ w3.T + tvec
    vis = mu_cam_all[:, 2] > NEAR_PLANE
    idx = np.nonzero(vis)[0]

    mu_cam = mu_cam_all[idx]
    depth = mu_cam[:, 2]
    order = np.lexsort((idx, depth))  # depth ascending, ties by original index
    idx = idx[order]
    mu_cam = mu_cam[order]
    depth = depth[order]

    raw_q = g.rotations[idx].astype(dtype, copy=False)
    cov3d, rot, scales, unit_q = covariance_batch(raw_q, g.log_scales[idx].astype(dtype, copy=False))
    cov_cam = np.einsum("ij,mjk,lk->mil", w3, cov3d, w3, optimize=True)
    jac = perspective_jacobian(mu_cam, cam.fx, cam.fy)
    cov2d = np.einsum("mij,mjk,mlk->mil", jac, cov_cam, jac, optimize=True)
    cov2d[:, 0, 0] += COV2D_FLOOR
    cov2d[:, 1, 1] += COV2D_FLOOR

    a = cov2d[:, 0, 0]
    b = cov2d[:, 0, 1]
    c = cov2d[:, 1, 1]
    det = a * c - b * b
    conic = np.empty_like(cov2d)
    conic[:, 0, 0] = c / det
    conic[:, 0, 1] = -b / det
    conic[:, 1, 0] = -b / det
    conic[:, 1, 1] = a / det

    mid = 0.5 * (a + c)
    lam_max = mid + np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    radius = MAX_MAHAL * np.sqrt(lam_max)

    mean2d = np.empty((len(idx), 2), dtype=dtype)
    mean2d[:, 0] = cam.fx * mu_cam[:, 0] / depth + cam.cx
    mean2d[:, 1] = cam.fy * mu_cam[:, 1] / depth + cam.cy

    sh = g.sh_coeffs[idx].astype(dtype, copy=False)
    campos = cam.center().astype(dtype)
    view_raw = mu[idx] - campos
    view_dir = view_raw / np.linalg.norm(view_raw, axis=1, keepdims=True)
    basis = sh_basis(view_dir, g.sh_degree)
    raw_color = np.einsum("mk,mkc->mc", basis, sh) + dtype(0.5)
    color = np.maximum(raw_color, 0.0)
    color_live = raw_color > 0.0

    x = g.logit_opacities[idx].astype(dtype, copy=False)
    opacity = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                       np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x)))).astype(dtype)

    return _Projected(idx, raw_q, unit_q, rot, scales, mu_cam, cov_cam, jac,
                      mean2d, cov2d, conic, radius, depth, opacity, color,
                      color_live, basis, view_raw, sh)


def _tile_rects(height: int, width: int, ts: int):
    rects = []
    for r0 in range(0, height, ts):
        for c0 in range(0, width, ts):
            rects.append((r0, min(r0 + ts, height), c0, min(c0 + ts, width)))
    return rects


def _tile_contributors(proj: _Projected, rects, ts: int, width: int, height: int):
    """Per-tile contributor positions (ascending = depth order)."""
    ntx = (width + ts - 1) // ts
    nty = (height + ts - 1) // ts
    lo_x = np.floor((proj.mean2d[:, 0] - proj.radius - RADIUS_PAD) / ts).astype(int)
    hi_x = np.floor((proj.mean2d[:, 0] + proj.radius + RADIUS_PAD) / ts).astype(int)
    lo_y = np.floor((proj.mean2d[:, 1] - proj.radius - RADIUS_PAD) / ts).astype(int)
    hi_y = np.floor((proj.mean2d[:, 1] + proj.radius + RADIUS_PAD) / ts).astype(int)
    out = []
    for (r0, r1, c0, c1) in rects:
        tx = c0 // ts
        ty = r0 // ts
        mask = (lo_x <= tx) & (tx <= hi_x) & (lo_y <= ty) & (ty <= hi_y)
        out.append(np.nonzero(mask)[0])
    del ntx, nty
    return out


def _pixel_grid(rect, dtype):
    r0, r1, c0, c1 = rect
    ys, xs = np.meshgrid(np.arange(r0, r1), np.arange(c0, c1), indexing="ij")
    px = (xs.ravel() + 0.5).astype(dtype)
    py = (ys.ravel() + 0.5).astype(dtype)
    return px, py


def _blend_tile(proj: _Projected, contrib: np.ndarray, rect, settings: RenderSettings):
    dtype = settings.dtype
    px, py = _pixel_grid(rect, dtype)
    n = len(contrib)
    npix = len(px)
    if n == 0:
        t_bg = np.ones(npix, dtype=dtype)
        color = np.broadcast_to(settings.background, (npix, 3)) * t_bg[:, None]
        empty = np.zeros((0, npix), dtype=dtype)
        return color.astype(dtype), _TileBlend(rect, contrib, empty, empty.copy(),
                                               np.zeros((0, npix), dtype=bool), t_bg)

    dx = px[None, :] - proj.mean2d[contrib, 0][:, None]
    dy = py[None, :] - proj.mean2d[contrib, 1][:, None]
    a = proj.conic[contrib, 0, 0][:, None]
    b = proj.conic[contrib, 0, 1][:, None]
    c = proj.conic[contrib, 1, 1][:, None]
    m = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
    alpha = proj.opacity[contrib][:, None] * np.exp(dtype(-0.5) * m)
    np.minimum(alpha, dtype(ALPHA_CLAMP), out=alpha)
    beta = np.where(alpha < ALPHA_SKIP, dtype(0.0), alpha)

    one_minus = 1.0 - beta
    cp = np.cumprod(one_minus, axis=0)
    trans = np.empty_like(cp)
    trans[0] = 1.0
    trans[1:] = cp[:-1]
    if settings.early_terminate:
        # contributors are blended while the incoming transmittance is above the
        # cutoff, so the dropped tail carries less than TRANSMITTANCE_EPS weight
        include = (beta > 0) & (trans >= TRANSMITTANCE_EPS)
    else:
        include = beta > 0

    w = beta * trans * include
    t_bg = np.prod(np.where(include, one_minus, dtype(1.0)), axis=0)
    color = w.T @ proj.color[contrib] + t_bg[:, None] * settings.background
    return color, _TileBlend(rect, contrib, beta, trans, include, t_bg)


def render(g: GaussianSet, cam: Camera, settings: RenderSettings | None = None):
    """Render a Gaussian snapshot; returns (image (H,W,3), RenderAux)."""
    settings = settings or RenderSettings()
    dtype = settings.dtype
    h, w = cam.height, cam.width
    proj = _preprocess(g, cam, settings)
    rects = _tile_rects(h, w, settings.tile_size)
    tile_contrib = _tile_contributors(proj, rects, settings.tile_size, w, h)

    image = np.empty((h, w, 3), dtype=dtype)

    def work(i):
        return _blend_tile(proj, tile_contrib[i], rects[i], settings)

    if settings.workers > 1:
        with ThreadPoolExecutor(max_workers=settings.workers) as pool:
            results = list(pool.map(work, range(len(rects))))
    else:
        results = [work(i) for i in range(len(rects))]

    tiles = []
    for (color, tb) in results:
        r0, r1, c0, c1 = tb.rect
        image[r0:r1, c0:c1] = color.reshape(r1 - r0, c1 - c0, 3)
        tiles.append(tb)

    aux = RenderAux(proj, tiles, cam, settings, g.count, (h, w))
    return image, aux


def _tile_backward(proj: _Projected, tb: _TileBlend, dC: np.ndarray,
                   settings: RenderSettings):
    """Gradients of one tile w.r.t. screen-space quantities of its contributors."""
    dtype = settings.dtype
    contrib = tb.contrib
    n = len(contrib)
    if n == 0:
        return None
    beta, trans, include = tb.beta, tb.trans, tb.include
    color = proj.color[contrib]

    cw = color @ dC.T                      # (n, P): c_i . dC_p
    w = beta * trans * include
    d_color = w @ dC                       # (n, 3)

    per = cw * w                           # contribution of (i, p) to the loss cotangent
    suffix = np.cumsum(per[::-1], axis=0)[::-1] - per
    bg_term = (settings.background @ dC.T) * tb.t_bg
    rest = suffix + bg_term[None, :]
    d_beta = (cw * trans - rest / (1.0 - beta)) * include

    live = include & (beta < ALPHA_CLAMP)
    d_m = dtype(-0.5) * beta * d_beta * live
    g_over = beta / proj.opacity[contrib][:, None]
    d_opacity = (g_over * d_beta * live).sum(axis=1)

    px, py = _pixel_grid(tb.rect, dtype)
    dx = px[None, :] - proj.mean2d[contrib, 0][:, None]
    dy = py[None, :] - proj.mean2d[contrib, 1][:, None]
    a = proj.conic[contrib, 0, 0][:, None]
    b = proj.conic[contrib, 0, 1][:, None]
    c = proj.conic[contrib, 1, 1][:, None]

    d_conic = np.empty((n, 2, 2), dtype=dtype)
    d_conic[:, 0, 0] = (d_m * dx * dx).sum(axis=1)
    off = (d_m * dx * dy).sum(axis=1)
    d_conic[:, 0, 1] = off
    d_conic[:, 1, 0] = off
    d_conic[:, 1, 1] = (d_m * dy * dy).sum(axis=1)

    d_mean2d = np.empty((n, 2), dtype=dtype)
    d_mean2d[:, 0] = (d_m * (-2.0) * (a * dx + b * dy)).sum(axis=1)
    d_mean2d[:, 1] = (d_m * (-2.0) * (b * dx + c * dy)).sum(axis=1)
    return contrib, d_color, d_opacity, d_conic, d_mean2d


def render_backward(aux: RenderAux, dL_dimage: np.ndarray) -> RenderGrads:
    """Exact adjoint of render() for the inputs recorded in aux."""
    settings = aux.settings
    dtype = settings.dtype
    h, w = aux.image_shape
    if dL_dimage.shape != (h, w, 3):
        raise ContractViolationError(
            f"cotangent shape {dL_dimage.shape} does not match rendered image {(h, w, 3)}")
    proj = aux.projected
    m_count = len(proj.orig_idx)
    dL_dimage = dL_dimage.astype(dtype, copy=False)

    acc_color = np.zeros((m_count, 3), dtype=dtype)
    acc_opacity = np.zeros(m_count, dtype=dtype)
    acc_conic = np.zeros((m_count, 2, 2), dtype=dtype)
    acc_mean2d = np.zeros((m_count, 2), dtype=dtype)

    def work(tb):
        r0, r1, c0, c1 = tb.rect
        dC = dL_dimage[r0:r1, c0:c1].reshape(-1, 3)
        return _tile_backward(proj, tb, dC, settings)

    if settings.workers > 1:
        with ThreadPoolExecutor(max_workers=settings.workers) as pool:
            results = list(pool.map(work, aux.tiles))
    else:
        results = [work(tb) for tb in aux.tiles]

    for res in results:  # fixed tile order keeps accumulation deterministic
        if res is None:
            continue
        contrib, d_color, d_opacity, d_conic, d_mean2d = res
        np.add.at(acc_color, contrib, d_color)
        np.add.at(acc_opacity, contrib, d_opacity)
        np.add.at(acc_conic, contrib, d_conic)
        np.add.at(acc_mean2d, contrib, d_mean2d)

    n = aux.gaussian_count
    cam = aux.camera
    grads = RenderGrads(
        d_positions=np.zeros((n, 3), dtype=dtype),
        d_rotations=np.zeros((n, 4), dtype=dtype),
        d_log_scales=np.zeros((n, 3), dtype=dtype),
        d_logit_opacities=np.zeros(n, dtype=dtype),
        d_sh=np.zeros((n,) + proj.sh.shape[1:], dtype=dtype),
        screen_grad_norms=np.zeros(n, dtype=dtype),
        visible=np.zeros(n, dtype=bool),
    )
    if m_count == 0:
        return grads

    # conic -> 2D covariance (low-pass floor passes gradients through)
    d_cov2d = -np.einsum("mij,mjk,mkl->mil", proj.conic, acc_conic, proj.conic, optimize=True)

    # cov2d = J P J^T
    d_jac = 2.0 * np.einsum("mij,mjk,mkl->mil", d_cov2d, proj.jac, proj.cov_cam, optimize=True)
    d_cov_cam = np.einsum("mji,mjk,mkl->mil", proj.jac, d_cov2d, proj.jac, optimize=True)

    # P = W3 Sigma W3^T
    w3 = cam.rotation.astype(dtype)
    d_cov3d = np.einsum("ji,mjk,kl->mil", w3, d_cov_cam, w3, optimize=True)

    # Sigma = R D R^T with D = diag(s^2)
    s2 = proj.scales ** 2
    b_mat = proj.rot * s2[:, None, :]
    d_rotmat = 2.0 * np.einsum("mij,mjk->mik", d_cov3d, b_mat, optimize=True)
    d_diag = np.einsum("mji,mjk,mki->mi", proj.rot, d_cov3d, proj.rot, optimize=True)
    d_log_scales = d_diag * 2.0 * s2

    d_unit_q = rotmat_backward_to_quat(d_rotmat, proj.unit_quats)
    d_raw_q = normalize_backward(d_unit_q, proj.raw_quats)

    # camera-space mean: projection path + Jacobian path
    x, y, z = proj.mu_cam[:, 0], proj.mu_cam[:, 1], proj.mu_cam[:, 2]
    fx, fy = dtype(cam.fx), dtype(cam.fy)
    d_mu_cam = np.empty((m_count, 3), dtype=dtype)
    d_mu_cam[:, 0] = acc_mean2d[:, 0] * fx / z
    d_mu_cam[:, 1] = acc_mean2d[:, 1] * fy / z
    d_mu_cam[:, 2] = -(acc_mean2d[:, 0] * fx * x + acc_mean2d[:, 1] * fy * y) / (z * z)
    z2 = z * z
    z3 = z2 * z
    d_mu_cam[:, 0] += d_jac[:, 0, 2] * (-fx / z2)
    d_mu_cam[:, 1] += d_jac[:, 1, 2] * (-fy / z2)
    d_mu_cam[:, 2] += (d_jac[:, 0, 0] * (-fx / z2) + d_jac[:, 0, 2] * (2.0 * fx * x / z3)
                       + d_jac[:, 1, 1] * (-fy / z2) + d_jac[:, 1, 2] * (2.0 * fy * y / z3))
    d_pos = d_mu_cam @ w3

    # color -> SH coefficients and view direction -> position
    d_color_eff = acc_color * proj.color_live
    d_sh = np.einsum("mk,mc->mkc", proj.basis, d_color_eff)
    degree = int(round(np.sqrt(proj.sh.shape[1]))) - 1
    if degree > 0:
        view_dir = proj.view_raw / np.linalg.norm(proj.view_raw, axis=1, keepdims=True)
        jac_b = sh_basis_jacobian(view_dir, degree)
        d_basis = np.einsum("mkc,mc->mk", proj.sh, d_color_eff)
        d_dir = np.einsum("mk,mkj->mj", d_basis, jac_b)
        d_pos = d_pos + normalize_backward(d_dir, proj.view_raw)

    sig = proj.opacity
    d_logit = acc_opacity * sig * (1.0 - sig)

    oi = proj.orig_idx
    grads.d_positions[oi] = d_pos
    grads.d_rotations[oi] = d_raw_q
    grads.d_log_scales[oi] = d_log_scales
    grads.d_logit_opacities[oi] = d_logit
    grads.d_sh[oi] = d_sh
    grads.screen_grad_norms[oi] = np.linalg.norm(acc_mean2d, axis=1)
    grads.visible[oi] = True
    return grads


def brute_force_render(g: GaussianSet, cam: Camera,
                       settings: RenderSettings | None = None) -> np.ndarray:
    """Reference renderer: per-pixel loop over all Gaussians, no tiling, no
    early termination. Same per-contributor math as render(). Test oracle."""
    settings = settings or RenderSettings()
    dtype = settings.dtype
    h, w = cam.height, cam.width
    proj = _preprocess(g, cam, settings)
    m = len(proj.orig_idx)
    image = np.empty((h, w, 3), dtype=dtype)
    if m == 0:
        image[:] = settings.background
        return image

    cols = (np.arange(w) + 0.5).astype(dtype)
    a = proj.conic[:, 0, 0][:, None]
    b = proj.conic[:, 0, 1][:, None]
    c = proj.conic[:, 1, 1][:, None]
    for row in range(h):
        py = dtype(row + 0.5)
        dx = cols[None, :] - proj.mean2d[:, 0][:, None]
        dy = py - proj.mean2d[:, 1][:, None]
        mq = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
        alpha = proj.opacity[:, None] * np.exp(dtype(-0.5) * mq)
        np.minimum(alpha, dtype(ALPHA_CLAMP), out=alpha)
        beta = np.where(alpha < ALPHA_SKIP, dtype(0.0), alpha)
        one_minus = 1.0 - beta
        cp = np.cumprod(one_minus, axis=0)
        trans = np.empty_like(cp)
        trans[0] = 1.0
        trans[1:] = cp[:-1]
        weights = beta * trans
        image[row] = weights.T @ proj.color + cp[-1][:, None] * settings.background
    return image

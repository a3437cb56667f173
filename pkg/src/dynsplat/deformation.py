"""Per-Gaussian embedding deformation with a coarse-fine temporal split.

One shared 1D grid of frame embeddings is sampled two ways: directly with
linear interpolation (fine path) and through a 5x block-mean downsample that
strips high temporal frequencies (coarse path). Two decoders with identical
architecture map (per-Gaussian embedding, temporal embedding) to additive
deltas on every canonical Gaussian parameter; their outputs sum.

Gaussian coordinates are deliberately not decoder inputs; `inject_coords`
exists only as an ablation switch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolationError, InvalidInputError
from .gaussians import GaussianSet, normalize_backward, quat_normalize
from .nn import LinearLayer, linear_backward, linear_forward, relu_backward, relu_forward

ZG_DIM = 32
ZT_DIM = 256
COARSE_FACTOR = 5
GRID_GROWTH_ITERS = 10000
GRID_GROWTH_MILESTONE = 1000


def full_grid_resolution(frame_count: int) -> int:
    """Temporal grid points for a sequence: half the frame count, rounded up."""
    if frame_count < 1:
        raise InvalidInputError("frame_count must be >= 1")
    return max(1, math.ceil(frame_count / 2))


def coarse_resolution(full_resolution: int, factor: int = COARSE_FACTOR) -> int:
    return max(1, math.ceil(full_resolution / factor))


@dataclass
class TemporalEmbeddingGrid:
    """Learnable frame embeddings at a progressively growing resolution."""

    entries: np.ndarray        # (current_resolution, dim)
    full_resolution: int
    frame_count: int
    coarse_factor: int = COARSE_FACTOR

    def __post_init__(self):
        self._coarse_weights = None

    @property
    def current_resolution(self) -> int:
        return self.entries.shape[0]

    @property
    def dim(self) -> int:
        return self.entries.shape[1]

    @property
    def base_resolution(self) -> int:
        return coarse_resolution(self.full_resolution, self.coarse_factor)

    def validate(self):
        if not self.base_resolution <= self.current_resolution <= self.full_resolution:
            raise InvalidInputError(
                f"grid resolution {self.current_resolution} outside "
                f"[{self.base_resolution}, {self.full_resolution}]")
        if not np.all(np.isfinite(self.entries)):
            raise InvalidInputError("grid entries contain non-finite values")

    def coarse_weight_matrix(self) -> np.ndarray:
        """(coarse_res, current_res) map: upsample to full resolution, block-mean."""
        cur = self.current_resolution
        if self._coarse_weights is None or self._coarse_weights.shape[1] != cur:
            up = _interp_matrix(cur, self.full_resolution, self.entries.dtype)
            nc = self.base_resolution
            block = np.zeros((nc, self.full_resolution), dtype=self.entries.dtype)
            for k in range(nc):
                lo = k * self.coarse_factor
                hi = min(lo + self.coarse_factor, self.full_resolution)
                block[k, lo:hi] = 1.0 / (hi - lo)
            self._coarse_weights = block @ up
        return self._coarse_weights


def make_grid(frame_count: int, dim: int = ZT_DIM, full_resolution: int | None = None,
              dtype=np.float64) -> TemporalEmbeddingGrid:
    """Zero-initialized grid starting at the coarse (downsampled) resolution."""
    n = full_resolution or full_grid_resolution(frame_count)
    base = coarse_resolution(n)
    return TemporalEmbeddingGrid(np.zeros((base, dim), dtype=dtype), n, frame_count)


def init_embeddings(count: int, rng: np.random.Generator, dim: int = ZG_DIM,
                    dtype=np.float64) -> np.ndarray:
    return (rng.normal(size=(count, dim)) * 0.01).astype(dtype)


def _interp_matrix(src_res: int, dst_res: int, dtype) -> np.ndarray:
    """Linear-interpolation resampling matrix (dst_res, src_res); rows sum to 1."""
    m = np.zeros((dst_res, src_res), dtype=dtype)
    if src_res == 1:
        m[:, 0] = 1.0
        return m
    for j in range(dst_res):
        u = j * (src_res - 1) / (dst_res - 1) if dst_res > 1 else 0.0
        i0 = min(int(math.floor(u)), src_res - 2)
        frac = u - i0
        m[j, i0] = 1.0 - frac
        m[j, i0 + 1] = frac
    return m


def _grid_coord(t: float, resolution: int, frame_count: int):
    """Map a frame-unit time onto grid coordinates; clamped outside the range.

    Returns (i0, i1, frac, du_dt); du_dt is 0 when the clamp is active.
    """
    if resolution == 1 or frame_count <= 1:
        return 0, 0, 0.0, 0.0
    span = frame_count - 1
    tc = min(max(t, 0.0), float(span))
    scale = (resolution - 1) / span
    u = tc * scale
    i0 = min(int(math.floor(u)), resolution - 2)
    frac = u - i0
    du_dt = scale if 0.0 <= t <= span else 0.0
    return i0, i0 + 1, frac, du_dt


@dataclass
class _FineSample:
    i0: int
    i1: int
    w0: float
    w1: float
    dz_dt: np.ndarray  # (dim,)


@dataclass
class _CoarseSample:
    weights: np.ndarray  # (current_res,) row applied to the grid entries
    dz_dt: np.ndarray    # (dim,)


def sample_fine_embedding(grid: TemporalEmbeddingGrid, t: float):
    """Linear interpolation of the grid at time t; cache routes gradients."""
    if not np.isfinite(t):
        raise InvalidInputError("t must be finite")
    i0, i1, frac, du = _grid_coord(t, grid.current_resolution, grid.frame_count)
    z = (1.0 - frac) * grid.entries[i0] + frac * grid.entries[i1]
    dz_dt = (grid.entries[i1] - grid.entries[i0]) * du
    return z, _FineSample(i0, i1, 1.0 - frac, frac, dz_dt)


def sample_coarse_embedding(grid: TemporalEmbeddingGrid, t: float):
    """Interpolate the block-mean downsampled grid at time t."""
    if not np.isfinite(t):
        raise InvalidInputError("t must be finite")
    bu = grid.coarse_weight_matrix()
    i0, i1, frac, du = _grid_coord(t, bu.shape[0], grid.frame_count)
    weights = (1.0 - frac) * bu[i0] + frac * bu[i1]
    z = weights @ grid.entries
    dz_dt = ((bu[i1] - bu[i0]) * du) @ grid.entries
    return z, _CoarseSample(weights, dz_dt)


def _embedding_backward(sample, d_z: np.ndarray, d_grid: np.ndarray) -> float:
    """Scatter a summed embedding cotangent into the grid; returns dL/dt."""
    if isinstance(sample, _FineSample):
        d_grid[sample.i0] += sample.w0 * d_z
        d_grid[sample.i1] += sample.w1 * d_z
    else:
        d_grid += np.outer(sample.weights, d_z)
    return float(np.dot(sample.dz_dt, d_z))


@dataclass
class DeformationDelta:
    """Additive changes to canonical parameters, batched over Gaussians."""

    d_positions: np.ndarray        # (N, 3)
    d_rotations: np.ndarray        # (N, 4)
    d_log_scales: np.ndarray       # (N, 3)
    d_logit_opacities: np.ndarray  # (N,)
    d_sh: np.ndarray               # (N, K, 3)

    def __add__(self, other: "DeformationDelta") -> "DeformationDelta":
        return DeformationDelta(
            self.d_positions + other.d_positions,
            self.d_rotations + other.d_rotations,
            self.d_log_scales + other.d_log_scales,
            self.d_logit_opacities + other.d_logit_opacities,
            self.d_sh + other.d_sh,
        )

    def l1_norms(self) -> np.ndarray:
        """Per-Gaussian L1 norm over every delta component."""
        return (np.abs(self.d_positions).sum(axis=1)
                + np.abs(self.d_rotations).sum(axis=1)
                + np.abs(self.d_log_scales).sum(axis=1)
                + np.abs(self.d_logit_opacities)
                + np.abs(self.d_sh).reshape(len(self.d_sh), -1).sum(axis=1))

    def rows(self, index: np.ndarray) -> "DeformationDelta":
        return DeformationDelta(self.d_positions[index], self.d_rotations[index],
                                self.d_log_scales[index], self.d_logit_opacities[index],
                                self.d_sh[index])

    @classmethod
    def zeros(cls, count: int, sh_count: int, dtype=np.float64) -> "DeformationDelta":
        return cls(np.zeros((count, 3), dtype=dtype), np.zeros((count, 4), dtype=dtype),
                   np.zeros((count, 3), dtype=dtype), np.zeros(count, dtype=dtype),
                   np.zeros((count, sh_count, 3), dtype=dtype))

    @classmethod
    def concat(cls, parts) -> "DeformationDelta":
        return cls(*(np.concatenate([getattr(p, f) for p in parts])
                     for f in ("d_positions", "d_rotations", "d_log_scales",
                               "d_logit_opacities", "d_sh")))


_HEAD_DIMS = (("positions", 3), ("rotations", 4), ("log_scales", 3),
              ("logit_opacities", 1), ("sh", None))


class DeformationDecoder:
    """Shallow ReLU trunk plus five two-layer heads, one per parameter group.

    Head output layers start at zero so a fresh model deforms nothing.
    """

    def __init__(self, sh_count: int, zg_dim: int = ZG_DIM, zt_dim: int = ZT_DIM,
                 hidden: int = 128, trunk_depth: int = 1, inject_coords: bool = False,
                 rng: np.random.Generator | None = None, dtype=np.float64):
        rng = rng or np.random.default_rng(0)
        self.zg_dim = zg_dim
        self.zt_dim = zt_dim
        self.hidden = hidden
        self.sh_count = sh_count
        self.inject_coords = inject_coords
        in_dim = zg_dim + zt_dim + (3 if inject_coords else 0)
        self.trunk = [LinearLayer(in_dim, hidden, rng=rng, dtype=dtype)]
        for _ in range(trunk_depth - 1):
            self.trunk.append(LinearLayer(hidden, hidden, rng=rng, dtype=dtype))
        self.heads = {}
        for name, out in _HEAD_DIMS:
            out_dim = out if out is not None else 3 * sh_count
            self.heads[name] = (
                LinearLayer(hidden, hidden, rng=rng, dtype=dtype),
                LinearLayer(hidden, out_dim, zero_init=True, dtype=dtype),
            )
        self.eval_count = 0

    def parameters(self) -> dict:
        params = {}
        for i, layer in enumerate(self.trunk):
            params[f"trunk{i}.weight"] = layer.weight
            params[f"trunk{i}.bias"] = layer.bias
        for name, (h0, h1) in self.heads.items():
            params[f"head.{name}.0.weight"] = h0.weight
            params[f"head.{name}.0.bias"] = h0.bias
            params[f"head.{name}.1.weight"] = h1.weight
            params[f"head.{name}.1.bias"] = h1.bias
        return params

    def gradients(self) -> dict:
        grads = {}
        for i, layer in enumerate(self.trunk):
            grads[f"trunk{i}.weight"] = layer.grad_weight
            grads[f"trunk{i}.bias"] = layer.grad_bias
        for name, (h0, h1) in self.heads.items():
            grads[f"head.{name}.0.weight"] = h0.grad_weight
            grads[f"head.{name}.0.bias"] = h0.grad_bias
            grads[f"head.{name}.1.weight"] = h1.grad_weight
            grads[f"head.{name}.1.bias"] = h1.grad_bias
        return grads

    def zero_grad(self):
        for layer in self.trunk:
            layer.zero_grad()
        for h0, h1 in self.heads.values():
            h0.zero_grad()
            h1.zero_grad()

    def forward(self, z_g: np.ndarray, z_t: np.ndarray, coords: np.ndarray | None = None):
        """Decode deltas for a batch; z_t may be a single shared vector."""
        if z_g.ndim != 2 or z_g.shape[1] != self.zg_dim:
            raise ContractViolationError(f"z_g shape {z_g.shape} != (N, {self.zg_dim})")
        n = z_g.shape[0]
        if z_t.ndim == 1:
            if z_t.shape[0] != self.zt_dim:
                raise ContractViolationError(f"z_t has dim {z_t.shape[0]}, expected {self.zt_dim}")
            z_t = np.broadcast_to(z_t, (n, self.zt_dim))
        if z_t.shape != (n, self.zt_dim):
            raise ContractViolationError(f"z_t shape {z_t.shape} != (N, {self.zt_dim})")
        parts = [z_g, z_t]
        if self.inject_coords:
            if coords is None or coords.shape != (n, 3):
                raise ContractViolationError("coordinate injection requires (N, 3) coords")
            parts.append(coords)
        elif coords is not None:
            raise ContractViolationError("coords passed to a decoder without injection")
        x = np.concatenate(parts, axis=1)

        h = x
        trunk_cache = []
        for layer in self.trunk:
            pre = linear_forward(h, layer)
            trunk_cache.append((h, pre))
            h = relu_forward(pre)
        head_cache = {}
        outs = {}
        for name, (h0, h1) in self.heads.items():
            pre1 = linear_forward(h, h0)
            a1 = relu_forward(pre1)
            outs[name] = linear_forward(a1, h1)
            head_cache[name] = (h, pre1, a1)
        self.eval_count += n

        delta = DeformationDelta(
            d_positions=outs["positions"],
            d_rotations=outs["rotations"],
            d_log_scales=outs["log_scales"],
            d_logit_opacities=outs["logit_opacities"][:, 0],
            d_sh=outs["sh"].reshape(n, self.sh_count, 3),
        )
        return delta, (trunk_cache, head_cache, n)

    def backward(self, d_delta: DeformationDelta, cache):
        """Accumulate weight gradients; return (d_zg, d_zt, d_coords or None)."""
        trunk_cache, head_cache, n = cache
        d_outs = {
            "positions": d_delta.d_positions,
            "rotations": d_delta.d_rotations,
            "log_scales": d_delta.d_log_scales,
            "logit_opacities": d_delta.d_logit_opacities[:, None],
            "sh": d_delta.d_sh.reshape(n, 3 * self.sh_count),
        }
        d_h = None
        for name, (h0, h1) in self.heads.items():
            h_in, pre1, a1 = head_cache[name]
            d_a1 = linear_backward(d_outs[name], a1, h1)
            d_pre1 = relu_backward(d_a1, pre1)
            d_part = linear_backward(d_pre1, h_in, h0)
            d_h = d_part if d_h is None else d_h + d_part
        for layer, (h_in, pre) in zip(reversed(self.trunk), reversed(trunk_cache)):
            d_pre = relu_backward(d_h, pre)
            d_h = linear_backward(d_pre, h_in, layer)
        d_zg = d_h[:, :self.zg_dim]
        d_zt = d_h[:, self.zg_dim:self.zg_dim + self.zt_dim]
        d_coords = d_h[:, self.zg_dim + self.zt_dim:] if self.inject_coords else None
        return d_zg, d_zt, d_coords


def decode_deformation(z_g: np.ndarray, z_t: np.ndarray, dec: DeformationDecoder,
                       coords: np.ndarray | None = None) -> DeformationDelta:
    """Single- or batched-input decode without gradient bookkeeping."""
    squeeze = z_g.ndim == 1
    if squeeze:
        z_g = z_g[None, :]
        coords = coords[None, :] if coords is not None else None
    delta, _ = dec.forward(z_g, z_t, coords)
    if squeeze:
        delta = DeformationDelta(delta.d_positions[0], delta.d_rotations[0],
                                 delta.d_log_scales[0], delta.d_logit_opacities[0],
                                 delta.d_sh[0])
    return delta


DEFORM_MODES = ("full", "coarse_only", "fine_only", "none")


@dataclass
class DeformCache:
    mode: str
    prenorm_rotations: np.ndarray | None
    coarse_cache: tuple | None      # (decoder cache, grid sample)
    fine_cache: tuple | None
    inject_coords: bool
    static_mask: np.ndarray | None


def _apply_deltas(canonical: GaussianSet, deltas):
    # deltas are applied sequentially so full mode equals coarse_only plus the
    # fine delta bit-exactly in pre-activation space
    positions = canonical.positions.copy()
    prenorm = canonical.rotations.copy()
    log_scales = canonical.log_scales.copy()
    logit_opacities = canonical.logit_opacities.copy()
    sh_coeffs = canonical.sh_coeffs.copy()
    for d in deltas:
        positions += d.d_positions
        prenorm += d.d_rotations
        log_scales += d.d_log_scales
        logit_opacities += d.d_logit_opacities
        sh_coeffs += d.d_sh
    snapshot = GaussianSet(
        positions=positions,
        rotations=quat_normalize(prenorm),
        log_scales=log_scales,
        logit_opacities=logit_opacities,
        sh_coeffs=sh_coeffs,
        embeddings=canonical.embeddings,
    )
    return snapshot, prenorm


def deform(canonical: GaussianSet, t: float, grid: TemporalEmbeddingGrid,
           dec_coarse: DeformationDecoder, dec_fine: DeformationDecoder,
           mode: str = "full", static_mask: np.ndarray | None = None,
           static_cache: DeformationDelta | None = None):
    """Deformed snapshot of the canonical set at time t.

    Returns (snapshot, DeformCache). With a static mask, masked Gaussians
    reuse the cached delta and skip decoder evaluation (forward only).
    """
    if mode not in DEFORM_MODES:
        raise InvalidInputError(f"unknown mode {mode!r}")
    if mode == "none":
        return canonical.copy(), DeformCache("none", None, None, None, False, None)

    n = canonical.count
    inject = dec_coarse.inject_coords or dec_fine.inject_coords
    if static_mask is not None:
        if static_cache is None or static_mask.shape != (n,):
            raise InvalidInputError("static_mask requires a matching cached delta")
        active = np.nonzero(~static_mask)[0]
    else:
        active = None

    z_g = canonical.embeddings if active is None else canonical.embeddings[active]
    coords = None
    if inject:
        coords = canonical.positions if active is None else canonical.positions[active]

    coarse_cache = fine_cache = None
    deltas_active = []
    if mode in ("full", "coarse_only"):
        z_c, cs = sample_coarse_embedding(grid, t)
        d_c, dc_cache = dec_coarse.forward(z_g, z_c.astype(z_g.dtype, copy=False),
                                           coords if dec_coarse.inject_coords else None)
        coarse_cache = (dc_cache, cs)
        deltas_active.append(d_c)
    if mode in ("full", "fine_only"):
        z_f, fs = sample_fine_embedding(grid, t)
        d_f, df_cache = dec_fine.forward(z_g, z_f.astype(z_g.dtype, copy=False),
                                         coords if dec_fine.inject_coords else None)
        fine_cache = (df_cache, fs)
        deltas_active.append(d_f)

    if active is None:
        deltas = deltas_active
    else:
        combined = deltas_active[0]
        for extra in deltas_active[1:]:
            combined = combined + extra
        merged = static_cache.rows(np.arange(n))  # copy of cached rows
        for f in ("d_positions", "d_rotations", "d_log_scales",
                  "d_logit_opacities", "d_sh"):
            getattr(merged, f)[active] = getattr(combined, f)
        deltas = [merged]

    snapshot, prenorm = _apply_deltas(canonical, deltas)
    cache = DeformCache(mode, prenorm, coarse_cache, fine_cache, inject,
                        static_mask)
    return snapshot, cache


@dataclass
class DeformGrads:
    """Gradients w.r.t. canonical parameters, embeddings, grid and time."""

    d_positions: np.ndarray
    d_rotations: np.ndarray
    d_log_scales: np.ndarray
    d_logit_opacities: np.ndarray
    d_sh: np.ndarray
    d_embeddings: np.ndarray
    d_grid: np.ndarray
    d_t: float


def deform_backward(cache: DeformCache, d_snapshot, canonical: GaussianSet,
                    grid: TemporalEmbeddingGrid, dec_coarse: DeformationDecoder,
                    dec_fine: DeformationDecoder) -> DeformGrads:
    """Route snapshot-parameter gradients to every trainable input.

    d_snapshot carries (d_positions, d_rotations, d_log_scales,
    d_logit_opacities, d_sh) w.r.t. the deformed snapshot, e.g. RenderGrads.
    Decoder weight gradients accumulate inside the decoders.
    """
    if cache.static_mask is not None:
        raise ContractViolationError("static-skip snapshots are render-only")
    dtype = canonical.dtype
    d_grid = np.zeros_like(grid.entries)
    d_emb = np.zeros_like(canonical.embeddings)
    d_t = 0.0

    if cache.mode == "none":
        return DeformGrads(d_snapshot.d_positions.astype(dtype), d_snapshot.d_rotations.astype(dtype),
                           d_snapshot.d_log_scales.astype(dtype),
                           d_snapshot.d_logit_opacities.astype(dtype),
                           d_snapshot.d_sh.astype(dtype), d_emb, d_grid, 0.0)

    d_rot_prenorm = normalize_backward(d_snapshot.d_rotations.astype(dtype, copy=False),
                                       cache.prenorm_rotations)
    d_delta = DeformationDelta(
        d_positions=d_snapshot.d_positions.astype(dtype, copy=False),
        d_rotations=d_rot_prenorm,
        d_log_scales=d_snapshot.d_log_scales.astype(dtype, copy=False),
        d_logit_opacities=d_snapshot.d_logit_opacities.astype(dtype, copy=False),
        d_sh=d_snapshot.d_sh.astype(dtype, copy=False),
    )

    d_pos_canon = d_delta.d_positions.copy()
    for dec, deco_cache in ((dec_coarse, cache.coarse_cache), (dec_fine, cache.fine_cache)):
        if deco_cache is None:
            continue
        dec_cache, grid_sample = deco_cache
        d_zg, d_zt, d_coords = dec.backward(d_delta, dec_cache)
        d_emb += d_zg
        d_t += _embedding_backward(grid_sample, d_zt.sum(axis=0), d_grid)
        if d_coords is not None:
            d_pos_canon += d_coords

    return DeformGrads(
        d_positions=d_pos_canon,
        d_rotations=d_rot_prenorm.copy(),
        d_log_scales=d_delta.d_log_scales.copy(),
        d_logit_opacities=d_delta.d_logit_opacities.copy(),
        d_sh=d_delta.d_sh.copy(),
        d_embeddings=d_emb,
        d_grid=d_grid,
        d_t=d_t,
    )


def compute_static_mask(canonical: GaussianSet, grid: TemporalEmbeddingGrid,
                        dec_coarse: DeformationDecoder, dec_fine: DeformationDecoder,
                        sample_times=None, k: float = 50.0):
    """Mark low-motion Gaussians and cache one reference-time delta for them.

    Score is the summed L1 norm of the total (coarse + fine) delta over the
    sample times; Gaussians below the k-th percentile are masked.
    """
    if not 0.0 <= k <= 100.0:
        raise InvalidInputError("k must be a percentile in [0, 100]")
    frame_span = grid.frame_count - 1
    if sample_times is None:
        sample_times = np.linspace(0.0, frame_span, 20)
    if len(sample_times) == 0:
        raise InvalidInputError("sample_times must be nonempty")

    scores = np.zeros(canonical.count, dtype=np.float64)
    for t in sample_times:
        delta = _total_delta(canonical, float(t), grid, dec_coarse, dec_fine)
        scores += delta.l1_norms()

    if k == 100.0:
        mask = np.ones(canonical.count, dtype=bool)
    else:
        mask = scores < np.percentile(scores, k)

    t_ref = frame_span / 2.0
    cached = _total_delta(canonical, t_ref, grid, dec_coarse, dec_fine)
    return mask, cached


def _total_delta(canonical, t, grid, dec_coarse, dec_fine) -> DeformationDelta:
    coords = canonical.positions if (dec_coarse.inject_coords or dec_fine.inject_coords) else None
    z_c, _ = sample_coarse_embedding(grid, t)
    z_f, _ = sample_fine_embedding(grid, t)
    d_c, _ = dec_coarse.forward(canonical.embeddings, z_c.astype(canonical.dtype, copy=False),
                                coords if dec_coarse.inject_coords else None)
    d_f, _ = dec_fine.forward(canonical.embeddings, z_f.astype(canonical.dtype, copy=False),
                              coords if dec_fine.inject_coords else None)
    return d_c + d_f


def grow_fine_grid(grid: TemporalEmbeddingGrid, iteration: int,
                   total_growth_iters: int = GRID_GROWTH_ITERS,
                   milestone: int = GRID_GROWTH_MILESTONE):
    """Resize toward full resolution at milestone iterations.

    The target ramps linearly from the coarse resolution at iteration 0 to the
    full resolution at total_growth_iters; new entries are linear
    interpolations of the old ones. Returns (grid, resized).
    """
    if iteration % milestone != 0:
        return grid, False
    base = grid.base_resolution
    frac = 1.0 if total_growth_iters <= 0 else min(iteration / total_growth_iters, 1.0)
    target = base + int(round((grid.full_resolution - base) * frac))
    if target <= grid.current_resolution:
        return grid, False
    up = _interp_matrix(grid.current_resolution, target, grid.entries.dtype)
    new_grid = TemporalEmbeddingGrid(up @ grid.entries, grid.full_resolution,
                                     grid.frame_count, grid.coarse_factor)
    return new_grid, True

"""Optimization loop and the efficiency strategy around it.

Camera draws avoid the neighborhood of the previous camera; frame draws
alternate uniform and error-proportional sampling once the strategy starts;
a structural-dissimilarity term is applied in short bursts on a held
high-error frame; densification is driven by accumulated screen-space
positional gradients, with an opacity regularizer replacing opacity resets.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .deformation import (DeformationDecoder, TemporalEmbeddingGrid, deform,
                          deform_backward, full_grid_resolution, grow_fine_grid,
                          init_embeddings, make_grid)
from .errors import ConfigError, ContractViolationError, InvalidInputError, TrainingDiverged
from .gaussians import Camera, GaussianSet, rgb_to_sh_dc
from .metrics import MetricReport, dssim_with_grad, psnr, ssim
from .nn import AdamState, adam_step, lr_schedule
from .rasterizer import RenderSettings, render, render_backward
from .scene_io import SceneDataset, load_container, save_container

# config keys that tune the runtime but not the trained model; excluded from
# checkpoints and the config hash so worker count cannot break determinism
_RUNTIME_KEYS = ("workers",)


@dataclass
class TrainConfig:
    iterations: int = 5000
    seed: int = 0
    precision: str = "f32"
    workers: int = 1
    sh_degree: int = 1
    zg_dim: int = 32
    zt_dim: int = 256
    hidden: int = 128
    trunk_depth: int = 1
    inject_coords: bool = False
    grid_resolution: int = 0          # 0 = ceil(frame_count / 2)
    coarse_factor: int = 5
    grid_growth_iters: int = 10000
    growth_milestone: int = 1000
    strategy_start: int = 10000
    dssim_period: int = 50
    dssim_burst: int = 5
    dssim_weight: float = 0.2
    opacity_reg_weight: float = 1e-4
    densify_start: int = 500
    densify_interval: int = 100
    densify_until_frac: float = 0.7
    densify_grad_threshold: float = 2e-4
    prune_opacity: float = 0.005
    clone_scale_frac: float = 0.01
    split_factor: float = 1.6
    init_opacity: float = 0.1
    lr_decoder_init: float = 1.6e-4
    lr_decoder_final: float = 1.6e-5
    lr_zg: float = 2.5e-3
    lr_position_init: float = 1.6e-4  # scaled by scene extent
    lr_position_final: float = 1.6e-6
    lr_opacity: float = 0.05
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    lr_sh: float = 2.5e-3
    lr_time_offset: float = 1e-4
    enable_time_offsets: bool = False
    error_ema: float = 0.9
    static_sample_times: int = 20
    eval_interval: int = 500
    eval_frames: int = 3
    log_interval: int = 50

    def validate(self):
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        for name in ("dssim_period", "dssim_burst", "densify_interval",
                     "growth_milestone", "static_sample_times"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.dssim_burst > self.dssim_period:
            raise ConfigError("dssim_burst cannot exceed dssim_period")
        if self.precision not in ("f32", "f64"):
            raise ConfigError(f"precision must be f32 or f64, got {self.precision!r}")
        if not 0 <= self.densify_until_frac <= 1:
            raise ConfigError("densify_until_frac must lie in [0, 1]")
        if not 0 < self.error_ema < 1:
            raise ConfigError("error_ema must lie in (0, 1)")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64

    def to_kv(self, include_runtime: bool = True) -> str:
        lines = []
        for f in dataclasses.fields(self):
            if not include_runtime and f.name in _RUNTIME_KEYS:
                continue
            v = getattr(self, f.name)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_kv(cls, text: str, base: "TrainConfig | None" = None) -> "TrainConfig":
        cfg = dataclasses.replace(base) if base else cls()
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        defaults = cls()
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"line {lineno}: unknown config key {key!r}")
            current = getattr(defaults, key)
            try:
                if isinstance(current, bool):
                    if value.lower() not in ("true", "false", "0", "1"):
                        raise ValueError(value)
                    parsed = value.lower() in ("true", "1")
                elif isinstance(current, int):
                    parsed = int(value)
                elif isinstance(current, float):
                    parsed = float(value)
                else:
                    parsed = value
            except ValueError as e:
                raise ConfigError(f"line {lineno}: bad value for {key}: {value!r}") from e
            setattr(cfg, key, parsed)
        cfg.validate()
        return cfg

    def hash(self) -> str:
        return hashlib.sha256(self.to_kv(include_runtime=False).encode()).hexdigest()


class FrameErrorTable:
    """Running per-frame reconstruction error, viewpoint-averaged via EMA.

    Frames never observed report the mean of observed frames so the sampler
    does not starve them.
    """

    def __init__(self, frame_count: int, momentum: float = 0.9):
        self.values = np.zeros(frame_count, dtype=np.float64)
        self.counts = np.zeros(frame_count, dtype=np.int64)
        self.momentum = momentum

    @property
    def frame_count(self) -> int:
        return len(self.values)

    def record(self, frame: int, error: float):
        if error < 0:
            raise InvalidInputError("errors must be nonnegative")
        if self.counts[frame] == 0:
            self.values[frame] = error
        else:
            self.values[frame] = self.momentum * self.values[frame] + (1 - self.momentum) * error
        self.counts[frame] += 1

    def snapshot(self) -> np.ndarray:
        """Effective per-frame errors with unseen frames at the observed mean."""
        seen = self.counts > 0
        out = self.values.copy()
        if seen.any():
            out[~seen] = self.values[seen].mean()
        return out

    def distribution(self) -> np.ndarray:
        eff = self.snapshot()
        total = eff.sum()
        if total <= 0:
            return np.full(self.frame_count, 1.0 / self.frame_count)
        return eff / total


class CameraSampler:
    """Uniform draws over cameras not too close to the previously drawn one.

    The exclusion threshold is the 40th percentile of all pairwise
    camera-origin distances, precomputed once.
    """

    def __init__(self, centers: np.ndarray):
        self.count = len(centers)
        diff = centers[:, None, :] - centers[None, :, :]
        self.distances = np.linalg.norm(diff, axis=2)
        if self.count > 1:
            iu = np.triu_indices(self.count, k=1)
            self.threshold = float(np.percentile(self.distances[iu], 40.0))
        else:
            self.threshold = 0.0
        self.previous = None

    def eligible(self, previous) -> np.ndarray:
        if previous is None:
            return np.arange(self.count)
        mask = self.distances[previous] >= self.threshold
        mask[previous] = False
        out = np.nonzero(mask)[0]
        if len(out) == 0:  # clustered rig: fall back to everything else
            out = np.array([i for i in range(self.count) if i != previous])
        if len(out) == 0:  # single camera
            out = np.array([previous])
        return out

    def sample(self, rng: np.random.Generator) -> int:
        choices = self.eligible(self.previous)
        idx = int(choices[rng.integers(len(choices))])
        self.previous = idx
        return idx


def sample_frame(table: FrameErrorTable, iteration: int, rng: np.random.Generator,
                 strategy_start: int) -> int:
    """Uniform before the strategy starts, then alternate uniform (even
    iterations) and error-proportional (odd iterations)."""
    n = table.frame_count
    if iteration < strategy_start or iteration % 2 == 0:
        return int(rng.integers(n))
    p = table.distribution()
    return int(rng.choice(n, p=p))


class DssimScheduler:
    """Hold an error-sampled frame every `period` iterations; enable the
    structural loss on it for the next `burst` iterations."""

    def __init__(self, start: int, period: int = 50, burst: int = 5):
        self.start = start
        self.period = period
        self.burst = burst
        self.held = None

    def query(self, iteration: int, table: FrameErrorTable, rng: np.random.Generator):
        if iteration < self.start:
            return False, None
        if iteration % self.period == 0 or self.held is None:
            self.held = int(rng.choice(table.frame_count, p=table.distribution()))
        if iteration % self.period < self.burst:
            return True, self.held
        return False, None


def compute_loss(rendered: np.ndarray, gt: np.ndarray, use_dssim: bool,
                 dssim_weight: float = 0.2):
    """L1 (+ weighted DSSIM) and its gradient w.r.t. the rendered pixels.

    Returns (loss, l1_value, grad).
    """
    if rendered.shape != gt.shape:
        raise InvalidInputError(f"shape mismatch {rendered.shape} vs {gt.shape}")
    diff = rendered.astype(np.float64) - gt.astype(np.float64)
    l1 = float(np.mean(np.abs(diff)))
    grad = np.sign(diff) / diff.size
    loss = l1
    if use_dssim:
        d_val, d_grad = dssim_with_grad(rendered, gt)
        loss += dssim_weight * d_val
        grad = grad + dssim_weight * d_grad
    return loss, l1, grad


def opacity_regularizer(g: GaussianSet, weight: float = 1e-4):
    """weight * mean(sigmoid(logit)); replaces the usual opacity reset."""
    if g.count == 0:
        return 0.0, np.zeros(0, dtype=g.dtype)
    sig = g.activated_opacities()
    term = weight * float(sig.mean())
    grad = (weight / g.count) * sig * (1.0 - sig)
    return term, grad.astype(g.dtype)


def effective_time(time_offsets: np.ndarray, cam_idx: int, frame: float,
                   enabled: bool) -> float:
    return float(frame) + (float(time_offsets[cam_idx]) if enabled else 0.0)


def densify_and_prune(g: GaussianSet, mean_grads: np.ndarray, cfg: TrainConfig,
                      rng: np.random.Generator, extent: float):
    """Clone small / split large high-gradient Gaussians, prune transparent ones.

    Returns (new_set, state_rows): state_rows[i] is the old row whose optimizer
    state row i inherits, or -1 for newly created rows. Clones and split
    children copy all parameters (embeddings included) from their source.
    """
    n = g.count
    scales = g.activated_scales()
    max_scale = scales.max(axis=1) if n else np.zeros(0)
    high = mean_grads >= cfg.densify_grad_threshold
    clone_mask = high & (max_scale <= cfg.clone_scale_frac * extent)
    split_mask = high & (max_scale > cfg.clone_scale_frac * extent)

    keep = ~split_mask
    parts_idx = [np.nonzero(keep)[0], np.nonzero(clone_mask)[0]]
    state_rows = [np.nonzero(keep)[0], np.full(clone_mask.sum(), -1, dtype=np.int64)]

    split_idx = np.nonzero(split_mask)[0]
    children = None
    if len(split_idx):
        from .gaussians import quat_normalize, quat_to_rotmat
        rot = quat_to_rotmat(quat_normalize(g.rotations[split_idx]))
        eps = rng.standard_normal((len(split_idx), 2, 3)).astype(g.dtype)
        local = eps * scales[split_idx][:, None, :]
        offsets = np.einsum("mij,mkj->mki", rot, local)
        pos = (g.positions[split_idx][:, None, :] + offsets).reshape(-1, 3)
        children = GaussianSet(
            positions=pos,
            rotations=np.repeat(g.rotations[split_idx], 2, axis=0),
            log_scales=np.repeat(g.log_scales[split_idx], 2, axis=0)
                       - g.dtype.type(math.log(cfg.split_factor)),
            logit_opacities=np.repeat(g.logit_opacities[split_idx], 2),
            sh_coeffs=np.repeat(g.sh_coeffs[split_idx], 2, axis=0),
            embeddings=np.repeat(g.embeddings[split_idx], 2, axis=0),
        )

    def rows(idx):
        return GaussianSet(g.positions[idx], g.rotations[idx], g.log_scales[idx],
                           g.logit_opacities[idx], g.sh_coeffs[idx], g.embeddings[idx])

    pieces = [rows(parts_idx[0]), rows(parts_idx[1])]
    if children is not None:
        pieces.append(children)
        state_rows.append(np.full(children.count, -1, dtype=np.int64))

    merged = GaussianSet(
        *(np.concatenate([getattr(p, f) for p in pieces])
          for f in ("positions", "rotations", "log_scales", "logit_opacities",
                    "sh_coeffs", "embeddings")))
    rows_map = np.concatenate(state_rows)

    alive = 1.0 / (1.0 + np.exp(-merged.logit_opacities.astype(np.float64))) >= cfg.prune_opacity
    final = GaussianSet(
        *(getattr(merged, f)[alive]
          for f in ("positions", "rotations", "log_scales", "logit_opacities",
                    "sh_coeffs", "embeddings")))
    return final, rows_map[alive]


# --- model bundle and checkpointing -------------------------------------------

@dataclass
class ModelState:
    gaussians: GaussianSet
    grid: TemporalEmbeddingGrid
    dec_coarse: DeformationDecoder
    dec_fine: DeformationDecoder
    time_offsets: np.ndarray
    frame_count: int
    config: TrainConfig
    cameras: list | None = None        # rig snapshot so checkpoints render alone
    camera_roles: list | None = None


def init_model(scene: SceneDataset, cfg: TrainConfig) -> ModelState:
    """Seed canonical Gaussians from the dataset point cloud."""
    dtype = cfg.dtype
    rng = np.random.default_rng(cfg.seed)
    pts = scene.points.astype(np.float64)
    n = len(pts)

    # isotropic scale from mean 3-nearest-neighbor distance
    d2 = np.sum((pts[:, None, :] - pts[None, :, :]) ** 2, axis=2)
    np.fill_diagonal(d2, np.inf)
    k = min(3, n - 1) if n > 1 else 1
    if n > 1:
        nn = np.sqrt(np.sort(d2, axis=1)[:, :k]).mean(axis=1)
        nn = np.maximum(nn, 1e-7)
    else:
        nn = np.full(1, 0.1)
    log_scales = np.log(nn)[:, None].repeat(3, axis=1)

    rotations = np.zeros((n, 4))
    rotations[:, 0] = 1.0
    k_sh = (cfg.sh_degree + 1) ** 2
    sh = np.zeros((n, k_sh, 3))
    sh[:, 0] = rgb_to_sh_dc(scene.point_colors)
    op = cfg.init_opacity
    logit = math.log(op / (1.0 - op))

    gaussians = GaussianSet(
        positions=pts.astype(dtype),
        rotations=rotations.astype(dtype),
        log_scales=log_scales.astype(dtype),
        logit_opacities=np.full(n, logit, dtype=dtype),
        sh_coeffs=sh.astype(dtype),
        embeddings=init_embeddings(n, rng, dim=cfg.zg_dim, dtype=dtype),
    )

    full_res = cfg.grid_resolution or full_grid_resolution(scene.frame_count)
    grid = make_grid(scene.frame_count, dim=cfg.zt_dim, full_resolution=full_res,
                     dtype=dtype)
    grid.coarse_factor = cfg.coarse_factor

    dec_rng = np.random.default_rng(cfg.seed + 1)
    dec_c = DeformationDecoder(k_sh, zg_dim=cfg.zg_dim, zt_dim=cfg.zt_dim,
                               hidden=cfg.hidden, trunk_depth=cfg.trunk_depth,
                               inject_coords=cfg.inject_coords, rng=dec_rng, dtype=dtype)
    dec_f = DeformationDecoder(k_sh, zg_dim=cfg.zg_dim, zt_dim=cfg.zt_dim,
                               hidden=cfg.hidden, trunk_depth=cfg.trunk_depth,
                               inject_coords=cfg.inject_coords, rng=dec_rng, dtype=dtype)
    offsets = np.zeros(scene.camera_count, dtype=dtype)
    return ModelState(gaussians, grid, dec_c, dec_f, offsets, scene.frame_count, cfg)


def render_model(state: ModelState, camera: Camera, frame: float, mode: str = "full",
                 cam_idx: int | None = None, static_mask=None, static_cache=None,
                 settings: RenderSettings | None = None):
    """Deform to the camera-adjusted time and render."""
    settings = settings or RenderSettings(dtype=state.config.dtype,
                                          workers=state.config.workers)
    t = frame
    if state.config.enable_time_offsets and cam_idx is not None:
        t = effective_time(state.time_offsets, cam_idx, frame, True)
    snapshot, _ = deform(state.gaussians, t, state.grid, state.dec_coarse,
                         state.dec_fine, mode=mode, static_mask=static_mask,
                         static_cache=static_cache)
    image, _ = render(snapshot, camera, settings)
    return image


def evaluate(state: ModelState, scene: SceneDataset, camera_indices=None,
             frames=None, mode: str = "full") -> MetricReport:
    """PSNR/SSIM against ground truth; defaults to held-out cameras, all frames."""
    if camera_indices is None:
        camera_indices = scene.eval_camera_indices() or list(range(scene.camera_count))
    if frames is None:
        frames = list(range(scene.frame_count))
    report = MetricReport()
    for ci in camera_indices:
        for f in frames:
            image = render_model(state, scene.cameras[ci], f, mode=mode, cam_idx=ci)
            gt = scene.load_image(ci, f)
            report.add(f, ci, psnr(image, gt), ssim(image, gt))
    return report


_GAUSSIAN_FIELDS = ("positions", "rotations", "log_scales", "logit_opacities",
                    "sh_coeffs", "embeddings")


def save_checkpoint(path, state: ModelState, adam_states: dict | None = None) -> None:
    cfg = state.config
    arrays = {}
    for f in _GAUSSIAN_FIELDS:
        arrays[f"gaussians.{f}"] = getattr(state.gaussians, f)
    arrays["grid.entries"] = state.grid.entries
    for prefix, dec in (("dec_coarse", state.dec_coarse), ("dec_fine", state.dec_fine)):
        for name, param in dec.parameters().items():
            arrays[f"{prefix}.{name}"] = param
    arrays["time_offsets"] = state.time_offsets

    steps = {}
    if adam_states:
        for name, st in adam_states.items():
            arrays[f"adam.{name}.m"] = st.m
            arrays[f"adam.{name}.v"] = st.v
            steps[name] = st.step

    meta = {
        "kind": "dynsplat-checkpoint",
        "config": cfg.to_kv(include_runtime=False),
        "config_hash": cfg.hash(),
        "frame_count": state.frame_count,
        "grid_full_resolution": state.grid.full_resolution,
        "coarse_factor": state.grid.coarse_factor,
        "adam_steps": steps,
    }
    if state.cameras is not None:
        meta["cameras"] = [
            {"view_transform": cam.view_transform.reshape(-1).tolist(),
             "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
             "width": cam.width, "height": cam.height,
             "role": (state.camera_roles[i] if state.camera_roles else "train")}
            for i, cam in enumerate(state.cameras)
        ]
    save_container(path, meta, arrays)


def load_checkpoint(path):
    """Returns (ModelState, adam_states dict)."""
    meta, arrays = load_container(path)
    if meta.get("kind") != "dynsplat-checkpoint":
        raise ContractViolationError(f"{path} is not a model checkpoint")
    cfg = TrainConfig.from_kv(meta["config"])
    gaussians = GaussianSet(*(arrays[f"gaussians.{f}"] for f in _GAUSSIAN_FIELDS))
    grid = TemporalEmbeddingGrid(arrays["grid.entries"],
                                 int(meta["grid_full_resolution"]),
                                 int(meta["frame_count"]),
                                 int(meta["coarse_factor"]))
    k_sh = gaussians.sh_coeffs.shape[1]
    decs = {}
    for prefix in ("dec_coarse", "dec_fine"):
        dec = DeformationDecoder(k_sh, zg_dim=cfg.zg_dim, zt_dim=cfg.zt_dim,
                                 hidden=cfg.hidden, trunk_depth=cfg.trunk_depth,
                                 inject_coords=cfg.inject_coords,
                                 rng=np.random.default_rng(0), dtype=cfg.dtype)
        for name, param in dec.parameters().items():
            param[...] = arrays[f"{prefix}.{name}"]
        decs[prefix] = dec
    cameras = roles = None
    if "cameras" in meta:
        cameras, roles = [], []
        for cd in meta["cameras"]:
            cameras.append(Camera(np.array(cd["view_transform"]).reshape(4, 4),
                                  fx=cd["fx"], fy=cd["fy"], cx=cd["cx"], cy=cd["cy"],
                                  width=int(cd["width"]), height=int(cd["height"])))
            roles.append(cd.get("role", "train"))
    state = ModelState(gaussians, grid, decs["dec_coarse"], decs["dec_fine"],
                       arrays["time_offsets"], int(meta["frame_count"]), cfg,
                       cameras, roles)
    adam_states = {}
    for name, step in meta.get("adam_steps", {}).items():
        adam_states[name] = AdamState(arrays[f"adam.{name}.m"],
                                      arrays[f"adam.{name}.v"], int(step))
    return state, adam_states


# --- the trainer ---------------------------------------------------------------

_CANONICAL_GROUPS = ("positions", "rotations", "log_scales", "logit_opacities",
                     "sh_coeffs", "embeddings")


class Trainer:
    def __init__(self, scene: SceneDataset, cfg: TrainConfig, log_path=None):
        cfg.validate()
        self.scene = scene
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed)
        self.state = init_model(scene, cfg)
        self.state.cameras = list(scene.cameras)
        self.state.camera_roles = list(scene.roles)
        self.settings = RenderSettings(dtype=cfg.dtype, workers=cfg.workers)
        self.gt = scene.load_all_images(dtype=cfg.dtype)

        self.train_cams = scene.train_camera_indices() or list(range(scene.camera_count))
        centers = np.stack([scene.cameras[i].center() for i in self.train_cams])
        self.camera_sampler = CameraSampler(centers)
        self.error_table = FrameErrorTable(scene.frame_count, cfg.error_ema)
        self.dssim_sched = DssimScheduler(cfg.strategy_start, cfg.dssim_period,
                                          cfg.dssim_burst)

        self.adam = {}
        for group in _CANONICAL_GROUPS:
            self.adam[group] = AdamState.for_param(getattr(self.state.gaussians, group))
        self.adam["grid"] = AdamState.for_param(self.state.grid.entries)
        for prefix, dec in (("dec_coarse", self.state.dec_coarse),
                            ("dec_fine", self.state.dec_fine)):
            for name, param in dec.parameters().items():
                self.adam[f"{prefix}.{name}"] = AdamState.for_param(param)
        self.adam["time_offsets"] = AdamState.for_param(self.state.time_offsets)

        self.grad_accum = np.zeros(self.state.gaussians.count, dtype=np.float64)
        self.grad_denom = np.zeros(self.state.gaussians.count, dtype=np.int64)
        self.log_path = Path(log_path) if log_path else None
        self.log_records = []
        self.iteration = 0

    # -- helpers

    def _log(self, record: dict):
        self.log_records.append(record)
        if self.log_path:
            with open(self.log_path, "a") as f:
                f.write(json.dumps(record, sort_keys=True) + "\n")

    def _eval_psnr(self):
        eval_cams = self.scene.eval_camera_indices()
        if not eval_cams:
            return None
        frames = np.linspace(0, self.scene.frame_count - 1,
                             min(self.cfg.eval_frames, self.scene.frame_count)).astype(int)
        vals = []
        for ci in eval_cams:
            for f in frames:
                img = render_model(self.state, self.scene.cameras[ci], int(f),
                                   cam_idx=ci, settings=self.settings)
                vals.append(psnr(img, self.gt[ci, f]))
        finite = [v for v in vals if math.isfinite(v)]
        return float(np.mean(finite)) if finite else None

    def _dump_divergence(self, record: dict):
        path = (self.log_path.parent if self.log_path else Path.cwd()) / "divergence_dump.json"
        record["gaussian_count"] = self.state.gaussians.count
        record["grid_resolution"] = self.state.grid.current_resolution
        path.write_text(json.dumps(record, indent=1, sort_keys=True))
        return path

    def _densify_window(self, it: int) -> bool:
        until = int(self.cfg.densify_until_frac * self.cfg.iterations)
        return (self.cfg.densify_start <= it < until
                and (it + 1) % self.cfg.densify_interval == 0)

    # -- one optimization step

    def step(self) -> dict:
        cfg = self.cfg
        it = self.iteration
        state = self.state

        new_grid, resized = grow_fine_grid(state.grid, it, cfg.grid_growth_iters,
                                           cfg.growth_milestone)
        if resized:
            state.grid = new_grid
            self.adam["grid"] = AdamState.for_param(state.grid.entries)

        use_dssim, held = self.dssim_sched.query(it, self.error_table, self.rng)
        cam_local = self.camera_sampler.sample(self.rng)
        cam_idx = self.train_cams[cam_local]
        frame = held if use_dssim else sample_frame(self.error_table, it, self.rng,
                                                    cfg.strategy_start)
        t = effective_time(state.time_offsets, cam_idx, frame, cfg.enable_time_offsets)

        snapshot, dcache = deform(state.gaussians, t, state.grid, state.dec_coarse,
                                  state.dec_fine, mode="full")
        image, aux = render(snapshot, self.scene.cameras[cam_idx], self.settings)
        gt = self.gt[cam_idx, frame]
        loss, l1, dimg = compute_loss(image, gt, use_dssim, cfg.dssim_weight)
        reg_term, reg_grad = opacity_regularizer(state.gaussians, cfg.opacity_reg_weight)
        loss += reg_term

        if not math.isfinite(loss):
            dump = self._dump_divergence({"iteration": it, "loss": loss, "l1": l1,
                                          "frame": int(frame), "camera": int(cam_idx)})
            raise TrainingDiverged(f"non-finite loss at iteration {it}; state dumped to {dump}")

        rgrads = render_backward(aux, dimg.astype(cfg.dtype))
        state.dec_coarse.zero_grad()
        state.dec_fine.zero_grad()
        dgrads = deform_backward(dcache, rgrads, state.gaussians, state.grid,
                                 state.dec_coarse, state.dec_fine)
        dgrads.d_logit_opacities += reg_grad

        lr_pos = lr_schedule(it, cfg.iterations, cfg.lr_position_init * self.scene.scene_extent,
                             cfg.lr_position_final * self.scene.scene_extent)
        lr_dec = lr_schedule(it, cfg.iterations, cfg.lr_decoder_init, cfg.lr_decoder_final)
        g = state.gaussians
        adam_step(g.positions, dgrads.d_positions, self.adam["positions"], lr_pos)
        adam_step(g.rotations, dgrads.d_rotations, self.adam["rotations"], cfg.lr_rotation)
        adam_step(g.log_scales, dgrads.d_log_scales, self.adam["log_scales"], cfg.lr_scale)
        adam_step(g.logit_opacities, dgrads.d_logit_opacities,
                  self.adam["logit_opacities"], cfg.lr_opacity)
        adam_step(g.sh_coeffs, dgrads.d_sh, self.adam["sh_coeffs"], cfg.lr_sh)
        adam_step(g.embeddings, dgrads.d_embeddings, self.adam["embeddings"], cfg.lr_zg)
        for prefix, dec in (("dec_coarse", state.dec_coarse), ("dec_fine", state.dec_fine)):
            grads = dec.gradients()
            for name, param in dec.parameters().items():
                adam_step(param, grads[name], self.adam[f"{prefix}.{name}"], lr_dec)
        adam_step(state.grid.entries, dgrads.d_grid, self.adam["grid"], lr_dec)
        if cfg.enable_time_offsets:
            d_off = np.zeros_like(state.time_offsets)
            d_off[cam_idx] = dgrads.d_t
            adam_step(state.time_offsets, d_off, self.adam["time_offsets"],
                      cfg.lr_time_offset)

        self.error_table.record(frame, l1)

        self.grad_accum += rgrads.screen_grad_norms.astype(np.float64)
        self.grad_denom += rgrads.visible
        if self._densify_window(it):
            self._run_densify()

        record = {"iteration": it, "loss": loss, "l1": l1,
                  "dssim_active": bool(use_dssim), "frame": int(frame),
                  "camera": int(cam_idx), "num_gaussians": state.gaussians.count}
        if cfg.eval_interval > 0 and (it % cfg.eval_interval == 0 or it == cfg.iterations - 1):
            val = self._eval_psnr()
            if val is not None:
                record["psnr_eval"] = val
        if cfg.log_interval > 0 and (it % cfg.log_interval == 0 or "psnr_eval" in record
                                     or it == cfg.iterations - 1):
            self._log(record)
        self.iteration += 1
        return record

    def _run_densify(self):
        mean_grads = self.grad_accum / np.maximum(self.grad_denom, 1)
        new_g, rows_map = densify_and_prune(self.state.gaussians, mean_grads,
                                            self.cfg, self.rng, self.scene.scene_extent)
        self.state.gaussians = new_g
        for group in _CANONICAL_GROUPS:
            old = self.adam[group]
            fresh = AdamState.for_param(getattr(new_g, group))
            fresh.step = old.step
            kept = rows_map >= 0
            fresh.m[kept] = old.m[rows_map[kept]]
            fresh.v[kept] = old.v[rows_map[kept]]
            self.adam[group] = fresh
        self.grad_accum = np.zeros(new_g.count, dtype=np.float64)
        self.grad_denom = np.zeros(new_g.count, dtype=np.int64)

    def run(self) -> ModelState:
        while self.iteration < self.cfg.iterations:
            self.step()
        return self.state


def train(scene: SceneDataset, cfg: TrainConfig, checkpoint_path=None, log_path=None):
    """Full training run; returns (ModelState, Trainer)."""
    trainer = Trainer(scene, cfg, log_path=log_path)
    trainer.run()
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, trainer.state, trainer.adam)
    return trainer.state, trainer

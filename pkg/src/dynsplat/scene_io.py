"""Scene datasets, the synthetic dynamic-scene generator, and the binary
checkpoint container. File formats are documented in docs/formats.md.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import images
from .errors import (CheckpointCorruptError, CheckpointVersionError,
                     ImageDimensionError, ManifestError, MissingImageError)
from .gaussians import Camera, GaussianSet, rgb_to_sh_dc, quat_normalize
from .rasterizer import RenderSettings, render

MANIFEST_FORMAT = "dynsplat-scene"
MANIFEST_VERSION = 1


@dataclass
class SceneDataset:
    """Cameras, per-(camera, frame) ground-truth image paths and the seed points."""

    root: Path
    cameras: list
    roles: list                # "train" or "eval" per camera
    frame_count: int
    image_paths: list          # image_paths[cam][frame] -> Path
    points: np.ndarray         # (P, 3)
    point_colors: np.ndarray   # (P, 3) in [0, 1]
    scene_extent: float

    @property
    def camera_count(self) -> int:
        return len(self.cameras)

    def train_camera_indices(self):
        return [i for i, r in enumerate(self.roles) if r == "train"]

    def eval_camera_indices(self):
        return [i for i, r in enumerate(self.roles) if r == "eval"]

    def load_image(self, cam_idx: int, frame: int, dtype=np.float64) -> np.ndarray:
        return images.read_png(self.image_paths[cam_idx][frame], dtype)

    def load_all_images(self, dtype=np.float64) -> np.ndarray:
        """(cameras, frames, H, W, 3) stack; desk-scale scenes fit in memory."""
        cam0 = self.cameras[0]
        out = np.empty((self.camera_count, self.frame_count, cam0.height, cam0.width, 3),
                       dtype=dtype)
        for c in range(self.camera_count):
            for f in range(self.frame_count):
                out[c, f] = self.load_image(c, f, dtype)
        return out


def load_scene(manifest_path) -> SceneDataset:
    """Parse and validate a scene manifest; raises distinct errors per defect."""
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise MissingImageError(f"manifest not found: {manifest_path}")
    try:
        doc = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise ManifestError(f"manifest is not valid JSON: {e}") from e

    if doc.get("format") != MANIFEST_FORMAT:
        raise ManifestError(f"unknown manifest format {doc.get('format')!r}")
    if int(doc.get("version", -1)) > MANIFEST_VERSION:
        raise ManifestError(f"manifest version {doc['version']} is newer than supported")
    root = manifest_path.parent
    try:
        frame_count = int(doc["frame_count"])
        extent = float(doc["scene_extent"])
        cam_docs = doc["cameras"]
        pc_rel = doc["point_cloud"]
    except KeyError as e:
        raise ManifestError(f"manifest missing required key {e}") from e
    if frame_count < 1:
        raise ManifestError("frame_count must be >= 1")
    if not cam_docs:
        raise ManifestError("manifest lists no cameras")

    cameras, roles, image_paths = [], [], []
    for ci, cd in enumerate(cam_docs):
        try:
            cam = Camera(np.array(cd["view_transform"], dtype=np.float64).reshape(4, 4),
                         fx=float(cd["fx"]), fy=float(cd["fy"]),
                         cx=float(cd["cx"]), cy=float(cd["cy"]),
                         width=int(cd["width"]), height=int(cd["height"]),
                         time_offset=float(cd.get("time_offset", 0.0)))
            role = cd.get("role", "train")
            frames = cd["images"]
        except (KeyError, ValueError) as e:
            raise ManifestError(f"camera {ci} is malformed: {e}") from e
        if role not in ("train", "eval"):
            raise ManifestError(f"camera {ci} has unknown role {role!r}")
        if len(frames) != frame_count:
            raise ManifestError(f"camera {ci} lists {len(frames)} images, expected {frame_count}")
        paths = []
        for fi, rel in enumerate(frames):
            p = root / rel
            if not p.exists():
                raise MissingImageError(f"camera {ci} frame {fi}: missing image {p}")
            w, h = images.png_dimensions(p)
            if (w, h) != (cam.width, cam.height):
                raise ImageDimensionError(
                    f"camera {ci} frame {fi}: image is {w}x{h}, camera expects "
                    f"{cam.width}x{cam.height}")
            paths.append(p)
        cameras.append(cam)
        roles.append(role)
        image_paths.append(paths)

    pc_path = root / pc_rel
    if not pc_path.exists():
        raise MissingImageError(f"point cloud not found: {pc_path}")
    try:
        pc = json.loads(pc_path.read_text())
        points = np.array(pc["positions"], dtype=np.float64).reshape(-1, 3)
        colors = np.array(pc["colors"], dtype=np.float64).reshape(-1, 3)
    except (json.JSONDecodeError, KeyError, ValueError) as e:
        raise ManifestError(f"point cloud is malformed: {e}") from e
    if len(points) != len(colors) or len(points) == 0:
        raise ManifestError("point cloud positions/colors mismatch or empty")

    return SceneDataset(root, cameras, roles, frame_count, image_paths,
                        points, colors, extent)


# --- synthetic scene generation ----------------------------------------------

@dataclass
class SyntheticSceneSpec:
    """Counts and motion layout of the generated toy scene.

    Defaults are the committed acceptance scene: 30 Gaussians (20 static,
    6 slow/large, 4 fast/small), 8 ring cameras, 30 frames at 64x64.
    """

    static_count: int = 20
    slow_count: int = 6
    fast_count: int = 4
    camera_count: int = 8
    frame_count: int = 30
    width: int = 64
    height: int = 64
    eval_camera: int = 3
    ring_radius: float = 4.5
    focal: float = 70.0
    slow_cycles: float = 1.0
    fast_cycles: float = 4.0

    @property
    def total(self) -> int:
        return self.static_count + self.slow_count + self.fast_count


def _ring_cameras(spec: SyntheticSceneSpec):
    cams = []
    for c in range(spec.camera_count):
        angle = 2.0 * math.pi * c / spec.camera_count + 0.13
        height = 1.0 if c % 2 == 0 else 1.6
        eye = np.array([spec.ring_radius * math.cos(angle),
                        spec.ring_radius * math.sin(angle), height])
        cams.append(Camera.look_at(eye, np.zeros(3), fx=spec.focal, fy=spec.focal,
                                   cx=spec.width / 2, cy=spec.height / 2,
                                   width=spec.width, height=spec.height))
    return cams


def _gt_trajectories(spec: SyntheticSceneSpec, centers, rng):
    """Per-Gaussian positions over frames: static, slow/large, fast/small."""
    n, f = spec.total, spec.frame_count
    traj = np.tile(centers[:, None, :], (1, f, 1))
    ts = np.arange(f) / max(f - 1, 1)
    classes = (["static"] * spec.static_count + ["slow"] * spec.slow_count
               + ["fast"] * spec.fast_count)
    for i in range(spec.static_count, n):
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        phase = rng.uniform(0, 2 * math.pi)
        if classes[i] == "slow":
            if (i - spec.static_count) % 2 == 0:
                amp = rng.uniform(0.30, 0.50)
                offsets = amp * np.sin(2 * math.pi * spec.slow_cycles * ts + phase)
                offsets -= offsets.mean()
            else:  # linear drift
                amp = rng.uniform(0.35, 0.55)
                offsets = amp * (ts - 0.5)
        else:
            amp = rng.uniform(0.10, 0.18)
            offsets = amp * np.sin(2 * math.pi * spec.fast_cycles * ts + phase)
        traj[i] += offsets[:, None] * axis[None, :]
    return traj, classes


def make_ground_truth_set(spec: SyntheticSceneSpec, rng) -> GaussianSet:
    n = spec.total
    centers = np.empty((n, 3))
    centers[:, 0] = rng.uniform(-0.8, 0.8, size=n)
    centers[:, 1] = rng.uniform(-0.8, 0.8, size=n)
    centers[:, 2] = rng.uniform(-0.55, 0.55, size=n)

    log_scales = np.empty((n, 3))
    log_scales[:spec.static_count] = np.log(rng.uniform(0.10, 0.22, size=(spec.static_count, 3)))
    s0 = spec.static_count
    log_scales[s0:s0 + spec.slow_count] = np.log(rng.uniform(0.16, 0.28, size=(spec.slow_count, 3)))
    log_scales[s0 + spec.slow_count:] = np.log(rng.uniform(0.07, 0.12, size=(spec.fast_count, 3)))

    ops = rng.uniform(0.75, 0.95, size=n)
    base_rgb = rng.uniform(0.15, 0.95, size=(n, 3))
    sh = np.zeros((n, 4, 3))
    sh[:, 0] = rgb_to_sh_dc(base_rgb)
    sh[:, 1:] = rng.normal(size=(n, 3, 3)) * 0.04

    return GaussianSet(
        positions=centers,
        rotations=quat_normalize(rng.normal(size=(n, 4))),
        log_scales=log_scales,
        logit_opacities=np.log(ops / (1.0 - ops)),
        sh_coeffs=sh,
        embeddings=np.zeros((n, 1)),
    )


def generate_synthetic_scene(spec: SyntheticSceneSpec, out_dir, seed: int) -> Path:
    """Render and write a full synthetic dataset; returns the manifest path.

    Emits ground-truth frames (PNG), the initialization point cloud, motion
    annotations (gt_motion.json) for leakage tests, and the manifest.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    gt = make_ground_truth_set(spec, rng)
    traj, classes = _gt_trajectories(spec, gt.positions, rng)
    cams = _ring_cameras(spec)

    settings = RenderSettings(dtype=np.float64)
    cam_rel = []
    for c, cam in enumerate(cams):
        (out / f"cam{c:02d}").mkdir(exist_ok=True)
        rels = []
        for f in range(spec.frame_count):
            snapshot = gt.copy()
            snapshot.positions = traj[:, f, :].copy()
            image, _ = render(snapshot, cam, settings)
            rel = f"cam{c:02d}/frame_{f:03d}.png"
            images.write_png(out / rel, image)
            rels.append(rel)
        cam_rel.append(rels)

    # initialization points: jittered trajectory centers with matching colors
    per_point = 4
    pts = np.repeat(gt.positions, per_point, axis=0) + rng.normal(scale=0.05,
                                                                  size=(spec.total * per_point, 3))
    base_rgb = np.clip(0.28209479177387814 * gt.sh_coeffs[:, 0] + 0.5, 0.0, 1.0)
    cols = np.clip(np.repeat(base_rgb, per_point, axis=0)
                   + rng.normal(scale=0.02, size=(spec.total * per_point, 3)), 0.0, 1.0)
    (out / "points.json").write_text(json.dumps(
        {"positions": pts.tolist(), "colors": cols.tolist()}))

    centers = np.stack([cam.center() for cam in cams])
    extent = 1.1 * float(np.max(np.linalg.norm(centers - centers.mean(axis=0), axis=1)))
    if extent <= 0:  # single camera: fall back to its distance from the subject
        extent = 1.1 * float(np.linalg.norm(centers[0]))

    (out / "gt_motion.json").write_text(json.dumps({
        "classes": classes,
        "centers": gt.positions.tolist(),
        "trajectories": traj.tolist(),
    }))

    manifest = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "frame_count": spec.frame_count,
        "scene_extent": extent,
        "point_cloud": "points.json",
        "cameras": [
            {
                "role": "eval" if c == spec.eval_camera else "train",
                "fx": cams[c].fx, "fy": cams[c].fy,
                "cx": cams[c].cx, "cy": cams[c].cy,
                "width": cams[c].width, "height": cams[c].height,
                "view_transform": cams[c].view_transform.reshape(-1).tolist(),
                "images": cam_rel[c],
            }
            for c in range(spec.camera_count)
        ],
    }
    manifest_path = out / "scene.json"
    manifest_path.write_text(json.dumps(manifest, indent=1))
    return manifest_path


def load_motion_annotations(scene_root):
    doc = json.loads((Path(scene_root) / "gt_motion.json").read_text())
    return (doc["classes"], np.array(doc["centers"]), np.array(doc["trajectories"]))


# --- checkpoint container -----------------------------------------------------

CHECKPOINT_MAGIC = b"DSPLATCP"
CHECKPOINT_MAJOR = 1
CHECKPOINT_MINOR = 0

_DTYPE_CODES = {
    np.dtype(np.float32): 0,
    np.dtype(np.float64): 1,
    np.dtype(np.int64): 2,
    np.dtype(np.uint8): 3,
    np.dtype(np.bool_): 4,
}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def _encode_array(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    shape = arr.shape  # ascontiguousarray promotes 0-d to 1-d, keep the original
    arr = np.ascontiguousarray(arr)
    if arr.dtype not in _DTYPE_CODES:
        raise CheckpointCorruptError(f"unsupported dtype {arr.dtype}")
    header = struct.pack("<BB", _DTYPE_CODES[arr.dtype], len(shape))
    header += struct.pack(f"<{len(shape)}Q", *shape) if shape else b""
    little = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
    return header + little.tobytes()


def _decode_array(payload: bytes) -> np.ndarray:
    if len(payload) < 2:
        raise CheckpointCorruptError("array section too short")
    code, ndim = struct.unpack_from("<BB", payload, 0)
    if code not in _CODE_DTYPES:
        raise CheckpointCorruptError(f"unknown dtype code {code}")
    off = 2
    if len(payload) < off + 8 * ndim:
        raise CheckpointCorruptError("array header truncated")
    shape = struct.unpack_from(f"<{ndim}Q", payload, off) if ndim else ()
    off += 8 * ndim
    dtype = _CODE_DTYPES[code]
    count = int(np.prod(shape)) if shape else 1
    expect = count * dtype.itemsize
    if len(payload) - off != expect:
        raise CheckpointCorruptError("array payload size mismatch")
    arr = np.frombuffer(payload, dtype=dtype.newbyteorder("<"), count=count, offset=off)
    return arr.astype(dtype).reshape(shape).copy()


def save_container(path, meta: dict, arrays: dict) -> None:
    """Little-endian, length-prefixed sections: one JSON meta + named arrays."""
    chunks = [CHECKPOINT_MAGIC,
              struct.pack("<HHI", CHECKPOINT_MAJOR, CHECKPOINT_MINOR, len(arrays) + 1)]

    def section(name: str, payload: bytes) -> bytes:
        raw = name.encode("utf-8")
        return struct.pack("<H", len(raw)) + raw + struct.pack("<Q", len(payload)) + payload

    chunks.append(section("__meta__", json.dumps(meta, sort_keys=True).encode("utf-8")))
    for name in sorted(arrays):
        chunks.append(section(name, _encode_array(arrays[name])))
    Path(path).write_bytes(b"".join(chunks))


def load_container(path):
    """Returns (meta, arrays); rejects newer majors and truncated files."""
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:8] != CHECKPOINT_MAGIC:
        raise CheckpointCorruptError(f"{path} is not a checkpoint file")
    major, minor, count = struct.unpack_from("<HHI", data, 8)
    if major > CHECKPOINT_MAJOR:
        raise CheckpointVersionError(
            f"checkpoint format {major}.{minor} is newer than supported {CHECKPOINT_MAJOR}.x")
    off = 16
    meta = None
    arrays = {}
    for _ in range(count):
        if off + 2 > len(data):
            raise CheckpointCorruptError("truncated section header")
        (name_len,) = struct.unpack_from("<H", data, off)
        off += 2
        if off + name_len + 8 > len(data):
            raise CheckpointCorruptError("truncated section name")
        name = data[off:off + name_len].decode("utf-8")
        off += name_len
        (payload_len,) = struct.unpack_from("<Q", data, off)
        off += 8
        if off + payload_len > len(data):
            raise CheckpointCorruptError(f"truncated payload for section {name!r}")
        payload = data[off:off + payload_len]
        off += payload_len
        if name == "__meta__":
            meta = json.loads(payload.decode("utf-8"))
        else:
            arrays[name] = _decode_array(payload)
    if meta is None:
        raise CheckpointCorruptError("checkpoint has no meta section")
    if off != len(data):
        raise CheckpointCorruptError("trailing bytes after final section")
    return meta, arrays

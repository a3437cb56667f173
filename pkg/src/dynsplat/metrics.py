"""Image-quality metrics: PSNR and SSIM/DSSIM with an analytic gradient.

SSIM uses an 11x11 Gaussian window (sigma 1.5, K1 0.01, K2 0.03, population
covariance) evaluated on the interior where the window fits, i.e. a valid
convolution; per-channel maps are averaged over RGB. The differentiable core
is shared between the metric and the training loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
_C1 = (SSIM_K1 * 1.0) ** 2
_C2 = (SSIM_K2 * 1.0) ** 2


def _gaussian_kernel() -> np.ndarray:
    r = SSIM_WINDOW // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / SSIM_SIGMA) ** 2)
    return k / k.sum()

_KERNEL = _gaussian_kernel()


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB on [0,1]-clamped images; inf if identical."""
    if a.shape != b.shape:
        raise InvalidInputError(f"shape mismatch {a.shape} vs {b.shape}")
    ac = np.clip(np.asarray(a, dtype=np.float64), 0.0, 1.0)
    bc = np.clip(np.asarray(b, dtype=np.float64), 0.0, 1.0)
    mse = float(np.mean((ac - bc) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _conv_valid_axis(img: np.ndarray, axis: int) -> np.ndarray:
    n = img.shape[axis] - SSIM_WINDOW + 1
    sl = [slice(None)] * img.ndim
    sl[axis] = slice(0, n)
    out = _KERNEL[0] * img[tuple(sl)]
    for k in range(1, SSIM_WINDOW):
        sl[axis] = slice(k, n + k)
        out = out + _KERNEL[k] * img[tuple(sl)]
    return out


def _conv_valid_adjoint_axis(grad: np.ndarray, axis: int, full: int) -> np.ndarray:
    shape = list(grad.shape)
    n = shape[axis]
    shape[axis] = full
    out = np.zeros(shape, dtype=grad.dtype)
    sl = [slice(None)] * grad.ndim
    for k in range(SSIM_WINDOW):
        sl[axis] = slice(k, n + k)
        out[tuple(sl)] += _KERNEL[k] * grad
    return out


def _blur(img: np.ndarray) -> np.ndarray:
    return _conv_valid_axis(_conv_valid_axis(img, 0), 1)


def _blur_adjoint(grad: np.ndarray, height: int, width: int) -> np.ndarray:
    tmp = _conv_valid_adjoint_axis(grad, 1, width)
    return _conv_valid_adjoint_axis(tmp, 0, height)


def _check_ssim_inputs(a, b):
    if a.shape != b.shape:
        raise InvalidInputError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim != 3 or a.shape[2] != 3:
        raise InvalidInputError("expected (H, W, 3) images")
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise InvalidInputError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW}")


def _ssim_core(x: np.ndarray, y: np.ndarray):
    """Mean SSIM plus the intermediates needed for the backward pass."""
    ux = _blur(x)
    uy = _blur(y)
    uxx = _blur(x * x)
    uyy = _blur(y * y)
    uxy = _blur(x * y)
    vx = uxx - ux * ux
    vy = uyy - uy * uy
    vxy = uxy - ux * uy
    a1 = 2.0 * ux * uy + _C1
    a2 = 2.0 * vxy + _C2
    b1 = ux * ux + uy * uy + _C1
    b2 = vx + vy + _C2
    smap = (a1 * a2) / (b1 * b2)
    value = float(np.mean(smap))
    return value, (ux, uy, a1, a2, b1, b2, smap)


def _ssim_backward(x: np.ndarray, y: np.ndarray, cache, d_value: float) -> np.ndarray:
    """Gradient of mean SSIM w.r.t. x."""
    ux, uy, a1, a2, b1, b2, smap = cache
    h, w = x.shape[:2]
    ds = np.full_like(smap, d_value / smap.size)
    denom = b1 * b2
    da1 = ds * a2 / denom
    da2 = ds * a1 / denom
    db1 = -ds * smap / b1
    db2 = -ds * smap / b2
    # vx = uxx - ux^2, vxy = uxy - ux uy fold into the mean terms
    dux = 2.0 * uy * da1 + 2.0 * ux * db1 - 2.0 * ux * db2 - 2.0 * uy * da2
    duxx = db2
    duxy = 2.0 * da2
    dx = _blur_adjoint(dux, h, w)
    dx += _blur_adjoint(duxx, h, w) * (2.0 * x)
    dx += _blur_adjoint(duxy, h, w) * y
    return dx


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean structural similarity of two images, channels averaged."""
    _check_ssim_inputs(a, b)
    ac = np.clip(np.asarray(a, dtype=np.float64), 0.0, 1.0)
    bc = np.clip(np.asarray(b, dtype=np.float64), 0.0, 1.0)
    value, _ = _ssim_core(ac, bc)
    return value


def dssim(a: np.ndarray, b: np.ndarray) -> float:
    """Structural dissimilarity (1 - SSIM) / 2."""
    return (1.0 - ssim(a, b)) / 2.0


def dssim_with_grad(rendered: np.ndarray, gt: np.ndarray):
    """DSSIM of unclamped training images and its gradient w.r.t. rendered."""
    _check_ssim_inputs(rendered, gt)
    x = np.asarray(rendered, dtype=np.float64)
    y = np.asarray(gt, dtype=np.float64)
    value, cache = _ssim_core(x, y)
    grad = _ssim_backward(x, y, cache, -0.5)
    return (1.0 - value) / 2.0, grad


@dataclass
class MetricReport:
    """Per-frame PSNR/SSIM rows plus their means."""

    frames: list = field(default_factory=list)
    cameras: list = field(default_factory=list)
    psnr_values: list = field(default_factory=list)
    ssim_values: list = field(default_factory=list)

    def add(self, frame: int, camera: int, psnr_db: float, ssim_value: float):
        self.frames.append(frame)
        self.cameras.append(camera)
        self.psnr_values.append(psnr_db)
        self.ssim_values.append(ssim_value)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr_values)) if self.psnr_values else math.nan

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim_values)) if self.ssim_values else math.nan

    def to_csv(self) -> str:
        lines = ["frame,camera,psnr_db,ssim"]
        for f, c, p, s in zip(self.frames, self.cameras, self.psnr_values, self.ssim_values):
            lines.append(f"{f},{c},{p:.6f},{s:.6f}")
        lines.append(f"mean,,{self.mean_psnr:.6f},{self.mean_ssim:.6f}")
        return "\n".join(lines) + "\n"

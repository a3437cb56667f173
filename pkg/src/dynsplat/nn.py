"""Reverse-mode linear/ReLU primitives and an adaptive-moment optimizer.

Forward functions return outputs only; callers keep the saved inputs and feed
them back to the matching backward, which accumulates weight gradients into
the layer's buffers and returns the input cotangent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-15


class LinearLayer:
    """y = x @ W^T + b with gradient buffers of matching shape."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator | None = None,
                 zero_init: bool = False, dtype=np.float64):
        if zero_init:
            self.weight = np.zeros((out_dim, in_dim), dtype=dtype)
            self.bias = np.zeros(out_dim, dtype=dtype)
        else:
            if rng is None:
                raise InvalidInputError("rng required unless zero_init")
            bound = 1.0 / np.sqrt(in_dim)
            self.weight = rng.uniform(-bound, bound, size=(out_dim, in_dim)).astype(dtype)
            self.bias = rng.uniform(-bound, bound, size=out_dim).astype(dtype)
        self.grad_weight = np.zeros_like(self.weight)
        self.grad_bias = np.zeros_like(self.bias)

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def zero_grad(self):
        self.grad_weight[...] = 0.0
        self.grad_bias[...] = 0.0

    def astype(self, dtype) -> "LinearLayer":
        layer = LinearLayer.__new__(LinearLayer)
        layer.weight = self.weight.astype(dtype)
        layer.bias = self.bias.astype(dtype)
        layer.grad_weight = np.zeros_like(layer.weight)
        layer.grad_bias = np.zeros_like(layer.bias)
        return layer


def linear_forward(x: np.ndarray, layer: LinearLayer) -> np.ndarray:
    if x.shape[-1] != layer.in_dim:
        raise InvalidInputError(f"input dim {x.shape[-1]} != layer in_dim {layer.in_dim}")
    return x @ layer.weight.T + layer.bias


def linear_backward(dy: np.ndarray, x: np.ndarray, layer: LinearLayer) -> np.ndarray:
    """Accumulates dW, db into the layer; returns dx."""
    if dy.shape[-1] != layer.out_dim or x.shape[-1] != layer.in_dim:
        raise InvalidInputError("cotangent/input shape mismatch")
    if dy.ndim == 1:
        layer.grad_weight += np.outer(dy, x)
        layer.grad_bias += dy
    else:
        layer.grad_weight += dy.T @ x
        layer.grad_bias += dy.sum(axis=0)
    return dy @ layer.weight


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(dy: np.ndarray, x: np.ndarray) -> np.ndarray:
    # subgradient at 0 is taken as 0
    return dy * (x > 0)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def for_param(cls, param: np.ndarray) -> "AdamState":
        return cls(np.zeros_like(param), np.zeros_like(param))

    def resize(self, rows_keep: np.ndarray | None, n_new: int):
        """Keep moment rows for surviving parameters, zero rows for new ones."""
        if rows_keep is not None:
            self.m = self.m[rows_keep]
            self.v = self.v[rows_keep]
        if n_new > 0:
            pad = (n_new,) + self.m.shape[1:]
            self.m = np.concatenate([self.m, np.zeros(pad, dtype=self.m.dtype)])
            self.v = np.concatenate([self.v, np.zeros(pad, dtype=self.v.dtype)])

    def reset(self, param: np.ndarray):
        self.m = np.zeros_like(param)
        self.v = np.zeros_like(param)


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState, lr: float) -> np.ndarray:
    """Bias-corrected adaptive-moment update, in place. Returns param."""
    if lr <= 0:
        raise InvalidInputError("learning rate must be positive")
    state.step += 1
    t = state.step
    state.m *= ADAM_BETA1
    state.m += (1.0 - ADAM_BETA1) * grad
    state.v *= ADAM_BETA2
    state.v += (1.0 - ADAM_BETA2) * np.square(grad)
    m_hat = state.m / (1.0 - ADAM_BETA1 ** t)
    v_hat = state.v / (1.0 - ADAM_BETA2 ** t)
    param -= lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    return param


def lr_schedule(iteration: int, total_iters: int, lr_init: float, lr_final: float) -> float:
    """Exponential decay from lr_init to lr_final over total_iters."""
    if total_iters <= 0:
        return lr_init
    frac = min(max(iteration / total_iters, 0.0), 1.0)
    return lr_init * (lr_final / lr_init) ** frac

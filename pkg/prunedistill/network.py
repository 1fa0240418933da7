"""Forward and backward passes for the fixed layer set.

Everything is batched numpy: convolutions go through a strided window view
and one ``tensordot`` (im2col without the explicit copy loop), max pooling
routes gradients to the first maximum of each window.
"""
import logging
import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from prunedistill.errors import EngineError
from prunedistill.layers import (
    ArchitectureSpec,
    BatchNorm,
    Conv2d,
    Dense,
    Flatten,
    MaxPool,
    ReLU,
    ResidualBlock,
    is_trainable,
    param_shapes,
)
from prunedistill.tensor import check_finite, get_dtype

log = logging.getLogger(__name__)

MODES = ("train", "eval", "synflow")


def init_params(arch: ArchitectureSpec, seed: int) -> dict[str, np.ndarray]:
    """He-normal weights, zero biases, BN scale 1 / shift 0, running stats (0, 1)."""
    rng = np.random.default_rng(seed)
    dtype = get_dtype()
    params = {}
    for name, shape in param_shapes(arch).items():
        if name.endswith(".weight"):
            fan_in = math.prod(shape[1:])
            params[name] = (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(dtype)
        elif name.endswith((".gamma", ".running_var")):
            params[name] = np.ones(shape, dtype=dtype)
        else:
            params[name] = np.zeros(shape, dtype=dtype)
    return params


# --- layer kernels ---------------------------------------------------------


def _windows(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    # (N, C, Ho, Wo, kh, kw) view, no copy
    return sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]


def conv_forward(x, weight, bias, layer: Conv2d):
    p = layer.pad
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    win = _windows(xp, layer.kh, layer.kw, layer.stride)
    out = np.tensordot(win, weight, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias[None, :, None, None]
    return np.ascontiguousarray(out), (x.shape, xp.shape, win)


def conv_backward(g, weight, cache, layer: Conv2d):
    x_shape, xp_shape, win = cache
    s, p = layer.stride, layer.pad
    ho, wo = g.shape[2], g.shape[3]
    d_weight = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
    d_bias = g.sum(axis=(0, 2, 3)) if layer.has_bias else None
    cols = np.tensordot(g, weight, axes=([1], [0]))  # N, Ho, Wo, C, kh, kw
    dxp = np.zeros(xp_shape, dtype=g.dtype)
    for i in range(layer.kh):
        for j in range(layer.kw):
            dxp[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] += cols[
                :, :, :, :, i, j
            ].transpose(0, 3, 1, 2)
    dx = dxp[:, :, p : p + x_shape[2], p : p + x_shape[3]] if p else dxp
    return np.ascontiguousarray(dx), d_weight, d_bias


def dense_forward(x, weight, bias):
    out = x @ weight.T
    if bias is not None:
        out = out + bias
    return out, x


def dense_backward(g, weight, x, has_bias):
    return g @ weight, g.T @ x, (g.sum(axis=0) if has_bias else None)


def _bn_axes(x):
    return (0,) if x.ndim == 2 else (0, 2, 3)


def _bcast(v, x):
    return v[None, :] if x.ndim == 2 else v[None, :, None, None]


def batchnorm_forward(x, gamma, beta, running_mean, running_var, layer: BatchNorm, mode: str):
    axes = _bn_axes(x)
    if mode == "synflow":
        # normalization bypassed, positive scale only
        scale = np.abs(gamma)
        return x * _bcast(scale, x), ("synflow", x, scale), None
    if mode == "train":
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        count = x.size // x.shape[1]
        unbiased = var * (count / max(count - 1, 1))
        m = layer.momentum
        updates = ((1 - m) * running_mean + m * mean, (1 - m) * running_var + m * unbiased)
    else:
        mean, var = running_mean, running_var
        updates = None
    inv_std = 1.0 / np.sqrt(var + layer.eps)
    xhat = (x - _bcast(mean, x)) * _bcast(inv_std, x)
    out = xhat * _bcast(gamma, x) + _bcast(beta, x)
    return out, (mode, xhat, inv_std, gamma), updates


def batchnorm_backward(g, cache):
    mode = cache[0]
    axes = _bn_axes(g)
    if mode == "synflow":
        _, x, scale = cache
        return g * _bcast(scale, g), (g * x).sum(axis=axes), np.zeros_like(scale)
    _, xhat, inv_std, gamma = cache
    d_gamma = (g * xhat).sum(axis=axes)
    d_beta = g.sum(axis=axes)
    dxhat = g * _bcast(gamma, g)
    if mode == "eval":
        return dxhat * _bcast(inv_std, g), d_gamma, d_beta
    count = g.size // g.shape[1]
    dx = (
        _bcast(inv_std / count, g)
        * (count * dxhat - _bcast(dxhat.sum(axis=axes), g) - xhat * _bcast((dxhat * xhat).sum(axis=axes), g))
    )
    return dx, d_gamma, d_beta


def maxpool_forward(x, layer: MaxPool):
    k, s = layer.k, layer.stride
    win = _windows(x, k, k, s)
    n, c, ho, wo = win.shape[:4]
    flat = win.reshape(n, c, ho, wo, k * k)
    # argmax picks the first maximum: ties route to the lowest flat index
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    return out, (x.shape, idx)


def maxpool_backward(g, cache, layer: MaxPool):
    x_shape, idx = cache
    k, s = layer.k, layer.stride
    n, c, ho, wo = idx.shape
    rows = np.arange(ho)[None, None, :, None] * s + idx // k
    cols = np.arange(wo)[None, None, None, :] * s + idx % k
    dx = np.zeros(x_shape, dtype=g.dtype)
    np.add.at(
        dx,
        (np.arange(n)[:, None, None, None], np.arange(c)[None, :, None, None], rows, cols),
        g,
    )
    return dx


# --- network ---------------------------------------------------------------


class Network:
    """Runs one architecture; keeps the activations of the last forward pass.

    Parameters are read, never written: BN running statistics computed in
    train mode are left in ``running_updates`` for the caller to commit.
    """

    def __init__(self, arch: ArchitectureSpec):
        self.arch = arch
        self.running_updates: dict[str, np.ndarray] = {}
        self._caches = None
        self._mode = None
        self._out_shape = None

    def forward(self, params: dict, batch: np.ndarray, mode: str = "train") -> np.ndarray:
        if mode not in MODES:
            raise EngineError(f"unknown mode {mode!r}")
        if batch.ndim != 4 or tuple(batch.shape[1:]) != tuple(self.arch.input_shape):
            raise EngineError(f"{self.arch.name}: expected N x {tuple(self.arch.input_shape)} batch, got {batch.shape}")
        dtype = next(iter(params.values())).dtype
        x = np.asarray(batch, dtype=dtype)
        self.running_updates = {}
        caches = []
        for i, layer in enumerate(self.arch.layers):
            x, cache = self._layer_forward(str(i), layer, params, x, mode)
            check_finite(x, f"{self.arch.name} layer {i} ({layer.kind})")
            caches.append(cache)
        self._caches, self._mode, self._out_shape = caches, mode, x.shape
        return x

    def backward(self, params: dict, upstream: np.ndarray) -> dict[str, np.ndarray]:
        """Gradients of the scalar loss whose logit-gradient is ``upstream``."""
        if self._caches is None:
            raise EngineError("backward called without a cached forward pass")
        if upstream.shape != self._out_shape:
            raise EngineError(f"upstream gradient {upstream.shape} does not match logits {self._out_shape}")
        grads: dict[str, np.ndarray] = {}
        g = np.asarray(upstream, dtype=next(iter(params.values())).dtype)
        for i in reversed(range(len(self.arch.layers))):
            g = self._layer_backward(str(i), self.arch.layers[i], params, g, self._caches[i], grads)
        return {name: grads[name] for name in params if is_trainable(name) and name in grads}

    def commit_running_stats(self, params: dict) -> None:
        for name, value in self.running_updates.items():
            params[name] = value.astype(params[name].dtype, copy=False)

    def _layer_forward(self, prefix, layer, params, x, mode):
        if isinstance(layer, Conv2d):
            return conv_forward(x, params[f"{prefix}.weight"], params.get(f"{prefix}.bias"), layer)
        if isinstance(layer, Dense):
            return dense_forward(x, params[f"{prefix}.weight"], params.get(f"{prefix}.bias"))
        if isinstance(layer, BatchNorm):
            out, cache, updates = batchnorm_forward(
                x,
                params[f"{prefix}.gamma"],
                params[f"{prefix}.beta"],
                params[f"{prefix}.running_mean"],
                params[f"{prefix}.running_var"],
                layer,
                mode,
            )
            if updates is not None:
                self.running_updates[f"{prefix}.running_mean"] = updates[0]
                self.running_updates[f"{prefix}.running_var"] = updates[1]
            return out, cache
        if isinstance(layer, ReLU):
            if mode == "synflow":
                return x, None
            mask = x > 0
            return x * mask, mask
        if isinstance(layer, MaxPool):
            return maxpool_forward(x, layer)
        if isinstance(layer, Flatten):
            return x.reshape(x.shape[0], -1), x.shape
        if isinstance(layer, ResidualBlock):
            body_caches = []
            h = x
            for j, inner in enumerate(layer.body):
                h, cache = self._layer_forward(f"{prefix}.body.{j}", inner, params, h, mode)
                body_caches.append(cache)
            short_cache = None
            short = x
            if layer.projection is not None:
                short, short_cache = self._layer_forward(f"{prefix}.proj", layer.projection, params, x, mode)
            return h + short, (body_caches, short_cache)
        raise EngineError(f"unknown layer {layer!r}")

    def _layer_backward(self, prefix, layer, params, g, cache, grads):
        if isinstance(layer, Conv2d):
            dx, dw, db = conv_backward(g, params[f"{prefix}.weight"], cache, layer)
            grads[f"{prefix}.weight"] = dw
            if db is not None:
                grads[f"{prefix}.bias"] = db
            return dx
        if isinstance(layer, Dense):
            dx, dw, db = dense_backward(g, params[f"{prefix}.weight"], cache, layer.has_bias)
            grads[f"{prefix}.weight"] = dw
            if db is not None:
                grads[f"{prefix}.bias"] = db
            return dx
        if isinstance(layer, BatchNorm):
            dx, d_gamma, d_beta = batchnorm_backward(g, cache)
            grads[f"{prefix}.gamma"] = d_gamma
            grads[f"{prefix}.beta"] = d_beta
            return dx
        if isinstance(layer, ReLU):
            return g if cache is None else g * cache
        if isinstance(layer, MaxPool):
            return maxpool_backward(g, cache, layer)
        if isinstance(layer, Flatten):
            return g.reshape(cache)
        if isinstance(layer, ResidualBlock):
            body_caches, short_cache = cache
            h = g
            for j in reversed(range(len(layer.body))):
                h = self._layer_backward(f"{prefix}.body.{j}", layer.body[j], params, h, body_caches[j], grads)
            short = g
            if layer.projection is not None:
                short = self._layer_backward(f"{prefix}.proj", layer.projection, params, g, short_cache, grads)
            return h + short
        raise EngineError(f"unknown layer {layer!r}")


def forward(arch: ArchitectureSpec, params: dict, batch: np.ndarray, mode: str = "eval") -> np.ndarray:
    return Network(arch).forward(params, batch, mode)


def predict_logits(arch: ArchitectureSpec, params: dict, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Eval-mode logits for a whole split, in batches."""
    net = Network(arch)
    chunks = [net.forward(params, images[i : i + batch_size], "eval") for i in range(0, len(images), batch_size)]
    if not chunks:
        return np.zeros((0, arch.num_classes), dtype=get_dtype())
    return np.concatenate(chunks, axis=0)

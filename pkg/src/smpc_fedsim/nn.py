"""Plaintext reference CNN: model container, training with manual backprop,
and an exact integer fixed-point inference oracle.

Tensors are channels-first: a batch of images has shape (N, C, H, W).
Convolutions are valid-padding, stride 1; pools are 2x2 with stride 2.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .ring_fixed import FixedPointConfig, encode_fixed

LAYER_KINDS = ("conv", "relu", "maxpool", "avgpool", "flatten", "dense")


class ShapeError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass
class Layer:
    kind: str
    weight: object = None  # ndarray (plain) or {party: ShareVector} (shared)
    bias: object = None

    @property
    def has_params(self) -> bool:
        return self.kind in ("conv", "dense")


@dataclass
class ModelParams:
    """An ordered layer list plus the per-sample input shape (C, H, W)."""

    layers: list
    input_shape: tuple
    mode: str = "plain"
    cfg: FixedPointConfig | None = None
    parties: tuple = ()

    def copy(self) -> "ModelParams":
        return copy.deepcopy(self)

    def shapes(self) -> list[tuple]:
        """Per-layer output shapes; raises ShapeError if layers don't compose."""
        return layer_shapes(self.layers, self.input_shape, self.mode)

    @property
    def num_params(self) -> int:
        return sum(p.size for p in self.param_arrays())

    def param_arrays(self) -> list[np.ndarray]:
        if self.mode != "plain":
            raise ValueError("param_arrays is only defined for plaintext models")
        out = []
        for layer in self.layers:
            if layer.has_params:
                out += [layer.weight, layer.bias]
        return out

    def flat(self) -> np.ndarray:
        arrs = self.param_arrays()
        return np.concatenate([a.ravel() for a in arrs]) if arrs else np.zeros(0)

    def with_flat(self, vec: np.ndarray) -> "ModelParams":
        if len(vec) != self.num_params:
            raise ShapeError(f"flat vector has {len(vec)} entries, model needs {self.num_params}")
        new, pos = self.copy(), 0
        for layer in new.layers:
            if layer.has_params:
                for name in ("weight", "bias"):
                    arr = getattr(layer, name)
                    setattr(layer, name, np.asarray(vec[pos:pos + arr.size], dtype=np.float64).reshape(arr.shape))
                    pos += arr.size
        return new


def _param_shape(layer: Layer, mode: str):
    if mode == "plain":
        return layer.weight.shape, layer.bias.shape
    any_share = next(iter(layer.weight.values()))
    any_bias = next(iter(layer.bias.values()))
    return any_share.shape, any_bias.shape


def layer_shapes(layers, input_shape, mode="plain") -> list[tuple]:
    shape, out = tuple(input_shape), []
    for i, layer in enumerate(layers):
        if layer.kind not in LAYER_KINDS:
            raise ShapeError(f"layer {i}: unknown kind {layer.kind!r}")
        if layer.kind == "conv":
            (F, C, kh, kw), (nb,) = _param_shape(layer, mode)
            if len(shape) != 3 or shape[0] != C or shape[1] < kh or shape[2] < kw or nb != F:
                raise ShapeError(f"layer {i}: conv {F}x{C}x{kh}x{kw} cannot take input {shape}")
            shape = (F, shape[1] - kh + 1, shape[2] - kw + 1)
        elif layer.kind in ("maxpool", "avgpool"):
            if len(shape) != 3 or shape[1] % 2 or shape[2] % 2:
                raise ShapeError(f"layer {i}: 2x2 pool needs even spatial dims, got {shape}")
            shape = (shape[0], shape[1] // 2, shape[2] // 2)
        elif layer.kind == "flatten":
            shape = (int(np.prod(shape)),)
        elif layer.kind == "dense":
            (n_in, n_out), (nb,) = _param_shape(layer, mode)
            if shape != (n_in,) or nb != n_out:
                raise ShapeError(f"layer {i}: dense {n_in}->{n_out} cannot take input {shape}")
            shape = (n_out,)
        out.append(shape)
    return out


def reference_model(num_classes: int, rng: np.random.Generator, input_shape=(1, 16, 16),
                    filters: int = 8, hidden: int = 32) -> ModelParams:
    """conv(filters, 3x3) -> relu -> maxpool2 -> flatten -> dense(hidden) -> relu -> dense(classes)."""
    C, H, W = input_shape
    flat = filters * ((H - 2) // 2) * ((W - 2) // 2)

    def he(shape, fan_in):
        return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)

    layers = [
        Layer("conv", he((filters, C, 3, 3), C * 9), np.zeros(filters)),
        Layer("relu"),
        Layer("maxpool"),
        Layer("flatten"),
        Layer("dense", he((flat, hidden), flat), np.zeros(hidden)),
        Layer("relu"),
        Layer("dense", he((hidden, num_classes), hidden), np.zeros(num_classes)),
    ]
    model = ModelParams(layers, tuple(input_shape))
    model.shapes()
    return model


# -- plaintext float forward / backward ---------------------------------------

def im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """(N, C, H, W) -> (N, OH*OW, C*kh*kw), patch entries ordered (c, i, j)."""
    N, C, H, W = x.shape
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))  # N, C, OH, OW, kh, kw
    OH, OW = win.shape[2], win.shape[3]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(N, OH * OW, C * kh * kw)


def col2im(cols: np.ndarray, x_shape, kh: int, kw: int) -> np.ndarray:
    N, C, H, W = x_shape
    OH, OW = H - kh + 1, W - kw + 1
    patches = cols.reshape(N, OH, OW, C, kh, kw)
    dx = np.zeros(x_shape, dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i:i + OH, j:j + OW] += patches[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return dx


def _pool_windows(x):
    N, C, H, W = x.shape
    return x.reshape(N, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(N, C, H // 2, W // 2, 4)


def forward(model: ModelParams, X: np.ndarray, keep_cache: bool = False):
    """Float logits for a batch; optionally the per-layer caches for backprop."""
    caches, h = [], np.asarray(X, dtype=np.float64)
    for layer in model.layers:
        cache = None
        if layer.kind == "conv":
            F, C, kh, kw = layer.weight.shape
            cols = im2col(h, kh, kw)
            out = cols @ layer.weight.reshape(F, -1).T + layer.bias
            OH, OW = h.shape[2] - kh + 1, h.shape[3] - kw + 1
            cache = (cols, h.shape)
            h = out.transpose(0, 2, 1).reshape(h.shape[0], F, OH, OW)
        elif layer.kind == "relu":
            cache = h > 0
            h = h * cache
        elif layer.kind == "maxpool":
            win = _pool_windows(h)
            idx = win.argmax(axis=-1)
            cache = (idx, h.shape)
            h = win.max(axis=-1)
        elif layer.kind == "avgpool":
            cache = h.shape
            h = _pool_windows(h).mean(axis=-1)
        elif layer.kind == "flatten":
            cache = h.shape
            h = h.reshape(h.shape[0], -1)
        elif layer.kind == "dense":
            cache = h
            h = h @ layer.weight + layer.bias
        caches.append(cache)
    return (h, caches) if keep_cache else h


def softmax_xent(logits: np.ndarray, y: np.ndarray):
    """Mean cross-entropy of softmax(logits) and its gradient wrt logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    n = len(y)
    loss = -np.mean(np.log(p[np.arange(n), y] + 1e-12))
    grad = p.copy()
    grad[np.arange(n), y] -= 1.0
    return loss, grad / n


def backward(model: ModelParams, caches, dout: np.ndarray) -> list:
    """Gradients (dW, db) per layer (None for parameter-free layers)."""
    grads = [None] * len(model.layers)
    for i in range(len(model.layers) - 1, -1, -1):
        layer, cache = model.layers[i], caches[i]
        if layer.kind == "dense":
            grads[i] = (cache.T @ dout, dout.sum(axis=0))
            dout = dout @ layer.weight.T
        elif layer.kind == "relu":
            dout = dout * cache
        elif layer.kind == "flatten":
            dout = dout.reshape(cache)
        elif layer.kind == "maxpool":
            idx, shape = cache
            N, C, H, W = shape
            sel = np.zeros(idx.shape + (4,))
            np.put_along_axis(sel, idx[..., None], 1.0, axis=-1)
            win = sel * dout[..., None]
            dout = win.reshape(N, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(shape)
        elif layer.kind == "avgpool":
            N, C, H, W = cache
            dout = np.repeat(np.repeat(dout, 2, axis=2), 2, axis=3) / 4.0
        elif layer.kind == "conv":
            cols, x_shape = cache
            F, C, kh, kw = layer.weight.shape
            d = dout.reshape(dout.shape[0], F, -1).transpose(0, 2, 1)  # N, P, F
            dW = np.einsum("npf,npk->fk", d, cols).reshape(layer.weight.shape)
            grads[i] = (dW, d.sum(axis=(0, 1)))
            if i > 0:
                dout = col2im(d @ layer.weight.reshape(F, -1), x_shape, kh, kw)
    return grads


def sgd_epoch(model: ModelParams, X, y, lr: float, batch_size: int, rng: np.random.Generator) -> float:
    """One in-place SGD pass over (X, y); returns the mean minibatch loss."""
    order = rng.permutation(len(y))
    losses = []
    for start in range(0, len(y), batch_size):
        idx = order[start:start + batch_size]
        logits, caches = forward(model, X[idx], keep_cache=True)
        loss, dlogits = softmax_xent(logits, y[idx])
        if not np.isfinite(loss):
            raise TrainingError(f"non-finite loss {loss} at minibatch starting {start}")
        for layer, g in zip(model.layers, backward(model, caches, dlogits)):
            if g is not None:
                layer.weight -= lr * g[0]
                layer.bias -= lr * g[1]
        losses.append(loss * len(idx))
    return float(np.sum(losses) / len(y))


def evaluate(model: ModelParams, X, y) -> tuple[float, float]:
    """(accuracy, mean cross-entropy)."""
    if len(y) == 0:
        return float("nan"), float("nan")
    logits = forward(model, X)
    loss, _ = softmax_xent(logits, y)
    return float(np.mean(logits.argmax(axis=1) == y)), float(loss)


# -- exact fixed-point reference ---------------------------------------------

def _enc(x, cfg):
    return encode_fixed(x, cfg).view(np.int64) if cfg.k == 64 else cfg.ring.signed(encode_fixed(x, cfg))


def fixedpoint_forward(model: ModelParams, X: np.ndarray, cfg: FixedPointConfig, trace: bool = False):
    """Integer logits (scale 2^f) computed exactly in int64 with floor rescaling.

    This is what the secret-shared pipeline computes up to its +-1 LSB
    truncation noise per rescale.
    """
    f = cfg.f
    h = _enc(X, cfg)
    outs = []
    for layer in model.layers:
        if layer.kind == "conv":
            F, C, kh, kw = layer.weight.shape
            cols = im2col(h, kh, kw)
            W = _enc(layer.weight.reshape(F, -1).T, cfg)
            out = ((cols @ W) >> f) + _enc(layer.bias, cfg)
            OH, OW = h.shape[2] - kh + 1, h.shape[3] - kw + 1
            h = out.transpose(0, 2, 1).reshape(h.shape[0], F, OH, OW)
        elif layer.kind == "relu":
            h = np.maximum(h, 0)
        elif layer.kind == "maxpool":
            h = _pool_windows(h).max(axis=-1)
        elif layer.kind == "avgpool":
            quarter = int(_enc(0.25, cfg))
            h = (_pool_windows(h).sum(axis=-1) * quarter) >> f
        elif layer.kind == "flatten":
            h = h.reshape(h.shape[0], -1)
        elif layer.kind == "dense":
            h = ((h @ _enc(layer.weight, cfg)) >> f) + _enc(layer.bias, cfg)
        outs.append(h)
    return outs if trace else h


def argmax_lowest(logits: np.ndarray) -> np.ndarray:
    """Row-wise argmax; ties resolve to the lowest index (numpy's rule)."""
    return np.asarray(logits).argmax(axis=1)


def error_budget_lsb(model: ModelParams) -> list[float]:
    """Per-layer bound (in LSB) on |secure - fixed-point reference| outputs.

    Each rescale contributes at most 1 LSB of truncation noise plus 1 LSB
    from floor rounding of a perturbed input; perturbations propagate through
    a dense/conv layer scaled by the largest absolute row sum of its weights.
    ReLU, flatten and max pooling are 1-Lipschitz.
    """
    err, out = 0.0, []
    for layer in model.layers:
        if layer.kind == "conv":
            gain = np.abs(layer.weight.reshape(layer.weight.shape[0], -1)).sum(axis=1).max()
            err = gain * err + (2.0 if err else 1.0)
        elif layer.kind == "dense":
            gain = np.abs(layer.weight).sum(axis=0).max()
            err = gain * err + (2.0 if err else 1.0)
        elif layer.kind == "avgpool":
            err = err + 2.0
        out.append(err)
    return out

"""A small numpy layer library: 3x3 convs, residual blocks, temporal pooling, dense, dropout.

Activations are laid out (batch, channels, time, frequency). Parameters live in a
flat ``dict[str, ndarray]`` keyed by layer index, so optimizers and checkpoints
can treat them uniformly.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Union

import numpy as np


class ShapeError(ValueError):
    code = "shape_mismatch"


class NonFiniteError(FloatingPointError):
    code = "non_finite"


class StaleCacheError(RuntimeError):
    code = "stale_cache"


# --------------------------------------------------------------------------- layers


@dataclass(frozen=True)
class Conv3x3:
    out_channels: int
    stride: int = 1

    def __post_init__(self):
        if self.out_channels < 1:
            raise ValueError("out_channels must be positive")
        if self.stride not in (1, 2):
            raise ValueError("stride must be 1 or 2")


@dataclass(frozen=True)
class ResidualBlock:
    """``n_convs`` stride-1 3x3 convs with ReLU between them, summed with the
    shortcut (identity, or a 1x1 projection when the channel count changes),
    followed by ReLU."""

    channels: int
    n_convs: int = 2

    def __post_init__(self):
        if self.channels < 1:
            raise ValueError("channels must be positive")
        if self.n_convs not in (2, 3):
            raise ValueError("n_convs must be 2 or 3")


@dataclass(frozen=True)
class Relu:
    pass


@dataclass(frozen=True)
class TemporalAvgPool:
    rows: int

    def __post_init__(self):
        if self.rows < 1:
            raise ValueError("rows must be positive")


@dataclass(frozen=True)
class Dense:
    out_dim: int

    def __post_init__(self):
        if self.out_dim < 1:
            raise ValueError("out_dim must be positive")


@dataclass(frozen=True)
class Dropout:
    p: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.p < 1.0:
            raise ValueError("dropout p must lie in [0, 1)")


Layer = Union[Conv3x3, ResidualBlock, Relu, TemporalAvgPool, Dense, Dropout]


@dataclass(frozen=True)
class EncoderConfig:
    layers: tuple
    embedding_dim: int
    input_shape: tuple

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        if self.embedding_dim < 1:
            raise ValueError("embedding_dim must be positive")
        if len(self.input_shape) != 2 or min(self.input_shape) < 1:
            raise ValueError("input_shape must be (T, F) with positive dims")

    def validate(self) -> list:
        shapes = shape_propagate(self)
        if shapes[-1] != (self.embedding_dim,):
            raise ShapeError(f"encoder output {shapes[-1]} != embedding_dim {self.embedding_dim}")
        return shapes


def _conv_out(n: int, stride: int) -> int:
    return (n - 1) // stride + 1


def shape_propagate(config: EncoderConfig) -> list:
    """Output shape after each layer, input shape first.

    Spatial shapes are (C, T, F); after a Dense layer the shape is (dim,).
    """
    shape = (1, *config.input_shape)
    shapes = [shape]
    for i, layer in enumerate(config.layers):
        if len(shape) == 1 and not isinstance(layer, (Dense, Relu, Dropout)):
            raise ShapeError(f"layer {i} ({type(layer).__name__}) needs a spatial input, got {shape}")
        if isinstance(layer, Conv3x3):
            shape = (layer.out_channels, _conv_out(shape[1], layer.stride), _conv_out(shape[2], layer.stride))
        elif isinstance(layer, ResidualBlock):
            shape = (layer.channels, shape[1], shape[2])
        elif isinstance(layer, TemporalAvgPool):
            if shape[1] != layer.rows:
                raise ShapeError(f"layer {i}: pooling {layer.rows} rows but input has {shape[1]}")
            shape = (shape[0], 1, shape[2])
        elif isinstance(layer, Dense):
            shape = (layer.out_dim,)
        elif not isinstance(layer, (Relu, Dropout)):
            raise TypeError(f"unknown layer {layer!r}")
        shapes.append(shape)
    return shapes


def resnet20_config(input_shape=(300, 257), embedding_dim=512, dropout=0.0) -> EncoderConfig:
    """The 20-conv topology: each stage opens with a stride-2 conv followed by
    residual pairs (1, 2, 4, 1 pairs for 64/128/256/512 channels)."""
    layers: list = []
    for width, n_res in ((64, 1), (128, 2), (256, 4), (512, 1)):
        layers += [Conv3x3(width, 2), Relu()]
        layers += [ResidualBlock(width, 2) for _ in range(n_res)]
    return _with_head(layers, input_shape, embedding_dim, dropout)


def desk_config(input_shape=(300, 257), widths=(8, 16, 32, 64), embedding_dim=128, dropout=0.0) -> EncoderConfig:
    """Stride-2 conv per width, temporal average pool, dense embedding."""
    layers: list = []
    for width in widths:
        layers += [Conv3x3(width, 2), Relu()]
    return _with_head(layers, input_shape, embedding_dim, dropout)


def _with_head(layers, input_shape, embedding_dim, dropout):
    rows = shape_propagate(EncoderConfig(layers, embedding_dim, input_shape))[-1][1]
    layers.append(TemporalAvgPool(rows))
    if dropout > 0:
        layers.append(Dropout(dropout))
    layers.append(Dense(embedding_dim))
    cfg = EncoderConfig(layers, embedding_dim, input_shape)
    cfg.validate()
    return cfg


# Compact text form used in run configs, e.g. "conv(8,2) relu res(16,2) pool(19) dropout(0.5) dense(128)".
_TOKEN = re.compile(r"(\w+)(?:\(([^)]*)\))?")


def format_layers(layers) -> str:
    out = []
    for layer in layers:
        if isinstance(layer, Conv3x3):
            out.append(f"conv({layer.out_channels},{layer.stride})")
        elif isinstance(layer, ResidualBlock):
            out.append(f"res({layer.channels},{layer.n_convs})")
        elif isinstance(layer, Relu):
            out.append("relu")
        elif isinstance(layer, TemporalAvgPool):
            out.append(f"pool({layer.rows})")
        elif isinstance(layer, Dense):
            out.append(f"dense({layer.out_dim})")
        elif isinstance(layer, Dropout):
            out.append(f"dropout({layer.p!r})")
        else:
            raise TypeError(f"unknown layer {layer!r}")
    return " ".join(out)


def parse_layers(text: str) -> tuple:
    layers = []
    for name, args in _TOKEN.findall(text):
        vals = [a.strip() for a in args.split(",")] if args else []
        if name == "conv":
            layers.append(Conv3x3(int(vals[0]), int(vals[1]) if len(vals) > 1 else 1))
        elif name == "res":
            layers.append(ResidualBlock(int(vals[0]), int(vals[1]) if len(vals) > 1 else 2))
        elif name == "relu":
            layers.append(Relu())
        elif name == "pool":
            layers.append(TemporalAvgPool(int(vals[0])))
        elif name == "dense":
            layers.append(Dense(int(vals[0])))
        elif name == "dropout":
            layers.append(Dropout(float(vals[0])))
        else:
            raise ValueError(f"unknown layer token {name!r}")
    return tuple(layers)


# --------------------------------------------------------------------------- parameters


def param_shapes(config: EncoderConfig) -> dict:
    shapes = shape_propagate(config)
    out: dict = {}
    for i, layer in enumerate(config.layers):
        in_shape = shapes[i]
        if isinstance(layer, Conv3x3):
            out[f"L{i}.W"] = (layer.out_channels, in_shape[0], 3, 3)
            out[f"L{i}.b"] = (layer.out_channels,)
        elif isinstance(layer, ResidualBlock):
            c_in = in_shape[0]
            for j in range(layer.n_convs):
                out[f"L{i}.conv{j}.W"] = (layer.channels, c_in if j == 0 else layer.channels, 3, 3)
                out[f"L{i}.conv{j}.b"] = (layer.channels,)
            if c_in != layer.channels:
                out[f"L{i}.proj.W"] = (layer.channels, c_in)
                out[f"L{i}.proj.b"] = (layer.channels,)
        elif isinstance(layer, Dense):
            out[f"L{i}.W"] = (layer.out_dim, int(np.prod(in_shape)))
            out[f"L{i}.b"] = (layer.out_dim,)
    return out


def init_params(config: EncoderConfig, scheme: str = "he", rng: np.random.Generator | None = None, dtype=np.float64) -> dict:
    """He-normal conv weights (or Xavier-uniform with ``scheme='xavier'``),
    Xavier-uniform dense weights, zero biases."""
    if scheme not in ("he", "xavier"):
        raise ValueError(f"unknown init scheme {scheme!r}")
    rng = rng if rng is not None else np.random.default_rng(0)
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape, dtype=dtype)
            continue
        fan_in = int(np.prod(shape[1:]))
        fan_out = shape[0] * int(np.prod(shape[2:]))
        is_conv = len(shape) == 4 or ".proj." in name
        if is_conv and scheme == "he":
            w = rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)
        else:
            w = xavier_uniform(shape, rng, fan_in, fan_out)
        params[name] = w.astype(dtype)
    return params


def xavier_uniform(shape, rng: np.random.Generator, fan_in=None, fan_out=None) -> np.ndarray:
    fan_in = fan_in if fan_in is not None else shape[-1]
    fan_out = fan_out if fan_out is not None else shape[0]
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


# --------------------------------------------------------------------------- kernels


def _im2col(x: np.ndarray, stride: int):
    B, C, H, W = x.shape
    Ho, Wo = _conv_out(H, stride), _conv_out(W, stride)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((B, C, 3, 3, Ho, Wo), dtype=x.dtype)
    for ki in range(3):
        for kj in range(3):
            cols[:, :, ki, kj] = xp[:, :, ki : ki + stride * (Ho - 1) + 1 : stride, kj : kj + stride * (Wo - 1) + 1 : stride]
    return cols.reshape(B, C * 9, Ho * Wo), (Ho, Wo)


def _col2im(dcols: np.ndarray, x_shape, stride: int, out_hw) -> np.ndarray:
    B, C, H, W = x_shape
    Ho, Wo = out_hw
    dcols = dcols.reshape(B, C, 3, 3, Ho, Wo)
    dxp = np.zeros((B, C, H + 2, W + 2), dtype=dcols.dtype)
    for ki in range(3):
        for kj in range(3):
            dxp[:, :, ki : ki + stride * (Ho - 1) + 1 : stride, kj : kj + stride * (Wo - 1) + 1 : stride] += dcols[:, :, ki, kj]
    return dxp[:, :, 1:-1, 1:-1]


def conv3x3_forward(x, W, b, stride):
    cols, (Ho, Wo) = _im2col(x, stride)
    out = np.matmul(W.reshape(W.shape[0], -1), cols) + b[:, None]
    return out.reshape(x.shape[0], W.shape[0], Ho, Wo), (cols, x.shape, (Ho, Wo))


def conv3x3_backward(grad, W, stride, cache):
    cols, x_shape, out_hw = cache
    B, O = grad.shape[:2]
    g = grad.reshape(B, O, -1)
    dW = np.tensordot(g, cols, axes=([0, 2], [0, 2])).reshape(W.shape)
    db = g.sum(axis=(0, 2))
    dcols = np.matmul(W.reshape(O, -1).T, g)
    return _col2im(dcols, x_shape, stride, out_hw), dW, db


def conv1x1_forward(x, W, b):
    return np.einsum("oc,bchw->bohw", W, x) + b[:, None, None]


def conv1x1_backward(grad, x, W):
    dW = np.einsum("bohw,bchw->oc", grad, x)
    db = grad.sum(axis=(0, 2, 3))
    dx = np.einsum("oc,bohw->bchw", W, grad)
    return dx, dW, db


# --------------------------------------------------------------------------- forward / backward


@dataclass
class ForwardCache:
    config: EncoderConfig
    params: dict
    batch_shape: tuple
    layer_caches: list = field(default_factory=list)


def forward(config: EncoderConfig, params: dict, batch: np.ndarray, mode: str = "eval", rng: np.random.Generator | None = None):
    """Embed a batch of (T, F) inputs (shape B x T x F, or B x 1 x T x F).

    Returns ``(embeddings, cache)``; ``cache`` feeds :func:`backward`.
    """
    if mode not in ("train", "eval"):
        raise ValueError("mode must be 'train' or 'eval'")
    x = np.asarray(batch)
    if x.ndim == 3:
        x = x[:, None]
    if x.ndim != 4 or x.shape[1:] != (1, *config.input_shape):
        raise ShapeError(f"batch shape {np.shape(batch)} does not match input_shape {config.input_shape}")
    train = mode == "train"
    cache = ForwardCache(config, params, x.shape)
    for i, layer in enumerate(config.layers):
        if isinstance(layer, Conv3x3):
            x, c = conv3x3_forward(x, params[f"L{i}.W"], params[f"L{i}.b"], layer.stride)
        elif isinstance(layer, ResidualBlock):
            x, c = _residual_forward(i, layer, params, x)
        elif isinstance(layer, Relu):
            c = x > 0
            x = x * c
        elif isinstance(layer, TemporalAvgPool):
            c = x.shape
            x = x.mean(axis=2, keepdims=True)
        elif isinstance(layer, Dropout):
            if train and layer.p > 0:
                if rng is None:
                    raise ValueError("train-mode dropout needs an rng")
                keep = (rng.random(x.shape) >= layer.p).astype(x.dtype)
                c = keep / (1.0 - layer.p)
                x = x * c
            else:
                c = None
        elif isinstance(layer, Dense):
            c = x.shape
            x = x.reshape(x.shape[0], -1)
            flat = x
            x = flat @ params[f"L{i}.W"].T + params[f"L{i}.b"]
            c = (c, flat)
        else:
            raise TypeError(f"unknown layer {layer!r}")
        cache.layer_caches.append(c)
    if x.ndim != 2:
        x = x.reshape(x.shape[0], -1)
    if not np.all(np.isfinite(x)):
        raise NonFiniteError("non-finite values in encoder output")
    return x, cache


def _residual_forward(i, layer, params, x):
    inner = []
    h = x
    for j in range(layer.n_convs):
        h, c = conv3x3_forward(h, params[f"L{i}.conv{j}.W"], params[f"L{i}.conv{j}.b"], 1)
        mask = None
        if j < layer.n_convs - 1:
            mask = h > 0
            h = h * mask
        inner.append((c, mask))
    if f"L{i}.proj.W" in params:
        shortcut = conv1x1_forward(x, params[f"L{i}.proj.W"], params[f"L{i}.proj.b"])
    else:
        shortcut = x
    pre = h + shortcut
    out_mask = pre > 0
    return pre * out_mask, (inner, x, out_mask)


def backward(config: EncoderConfig, params: dict, cache: ForwardCache, grad_embeddings: np.ndarray) -> dict:
    """Gradients of a scalar objective w.r.t. every parameter, given dObjective/dEmbedding."""
    if cache.config != config or cache.params is not params or len(cache.layer_caches) != len(config.layers):
        raise StaleCacheError("cache was produced by a different encoder or parameter set")
    g = np.asarray(grad_embeddings)
    if g.shape != (cache.batch_shape[0], config.embedding_dim):
        raise ShapeError(f"grad shape {g.shape} != ({cache.batch_shape[0]}, {config.embedding_dim})")
    grads: dict = {}
    for i in reversed(range(len(config.layers))):
        layer, c = config.layers[i], cache.layer_caches[i]
        if isinstance(layer, Dense):
            in_shape, flat = c
            grads[f"L{i}.W"] = g.T @ flat
            grads[f"L{i}.b"] = g.sum(axis=0)
            g = (g @ params[f"L{i}.W"]).reshape(in_shape)
        elif isinstance(layer, Dropout):
            if c is not None:
                g = g * c
        elif isinstance(layer, TemporalAvgPool):
            g = np.broadcast_to(g / c[2], c).copy()
        elif isinstance(layer, Relu):
            g = g * c
        elif isinstance(layer, Conv3x3):
            g, grads[f"L{i}.W"], grads[f"L{i}.b"] = conv3x3_backward(g, params[f"L{i}.W"], layer.stride, c)
        elif isinstance(layer, ResidualBlock):
            g = _residual_backward(i, layer, params, c, g, grads)
    return {name: grads[name] for name in params}


def _residual_backward(i, layer, params, cache, g, grads):
    inner, x, out_mask = cache
    g = g * out_mask
    if f"L{i}.proj.W" in params:
        g_short, grads[f"L{i}.proj.W"], grads[f"L{i}.proj.b"] = conv1x1_backward(g, x, params[f"L{i}.proj.W"])
    else:
        g_short = g
    for j in reversed(range(layer.n_convs)):
        c, mask = inner[j]
        if mask is not None:
            g = g * mask
        g, grads[f"L{i}.conv{j}.W"], grads[f"L{i}.conv{j}.b"] = conv3x3_backward(g, params[f"L{i}.conv{j}.W"], 1, c)
    return g + g_short


# --------------------------------------------------------------------------- optimization


@dataclass
class OptimizerState:
    lr: float
    momentum: float = 0.93
    weight_decay: float = 0.0005
    velocity: dict = field(default_factory=dict)


def sgd_step(params: dict, grads: dict, state: OptimizerState):
    """Momentum SGD with L2 weight decay folded into the gradient.

    Returns new ``(params, state)``; inputs are not modified.
    """
    new_params, new_velocity = {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"{name}: grad {g.shape} vs param {p.shape}")
        v = state.velocity.get(name)
        step = g + state.weight_decay * p
        v = step if v is None else state.momentum * v + step
        new_velocity[name] = v
        new_params[name] = p - state.lr * v
    return new_params, OptimizerState(state.lr, state.momentum, state.weight_decay, new_velocity)


@dataclass(frozen=True)
class LrSchedule:
    initial_lr: float = 0.05
    factor: float = 0.75
    n_steps: int = 8
    iters_per_step: int = 2800

    def __post_init__(self):
        if not 0.0 < self.factor < 1.0:
            raise ValueError("factor must lie in (0, 1)")
        if self.iters_per_step < 1 or self.n_steps < 0:
            raise ValueError("iters_per_step must be >= 1 and n_steps >= 0")

    @property
    def total_iters(self) -> int:
        return self.n_steps * self.iters_per_step


def lr_at(schedule: LrSchedule, iteration: int) -> float:
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    step = min(iteration // schedule.iters_per_step, schedule.n_steps)
    return schedule.initial_lr * schedule.factor**step

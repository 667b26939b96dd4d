"""Minimal differentiable kernel for feed-forward chains.

Tensors are plain ``float64`` numpy arrays in NHWC layout. Each layer caches
what it needs on ``forward`` and accumulates parameter gradients on
``backward``; a :class:`Sequential` chains them. This is enough to train the
encoder/decoder stacks used by :mod:`invabc.vae` without a general graph.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

Tensor = np.ndarray

CHECKPOINT_MAGIC = b"INVABC-CKPT"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    """Shape mismatch; ``axis`` names the offending dimension."""

    def __init__(self, message: str, axis: str | None = None):
        super().__init__(message)
        self.axis = axis


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


# ---------------------------------------------------------------------------
# convolution primitives


def same_padding(size: int, k: int, stride: int, padding: str = "SAME") -> tuple[int, int]:
    """Return ``(out_size, pad_before)`` for one spatial axis."""
    if padding == "SAME":
        out = -(-size // stride)
        total = max((out - 1) * stride + k - size, 0)
        return out, total // 2
    if padding == "VALID":
        if size < k:
            raise ShapeError(f"VALID padding needs input extent >= kernel ({size} < {k})", "spatial")
        return (size - k) // stride + 1, 0
    raise ConfigError(f"unknown padding rule {padding!r}")


@dataclass
class ConvSpec:
    """Filter, strides and padding of a 2-D (transposed) convolution.

    ``filter_shape`` is ``(kh, kw, c_in, c_out)`` for a convolution. A
    transposed convolution reuses the same filter as the adjoint map, so its
    input has ``c_out`` channels and its output ``c_in`` channels, which matches
    the ``(kh, kw, out, in)`` filter listing of the decoder table.
    """

    filter_shape: tuple[int, int, int, int]
    weights: Tensor
    bias: Tensor
    strides: tuple[int, int, int, int] = (1, 1, 1, 1)
    padding: str = "SAME"

    def __post_init__(self):
        self.filter_shape = tuple(int(v) for v in self.filter_shape)
        self.strides = tuple(int(v) for v in self.strides)
        if tuple(self.weights.shape) != self.filter_shape:
            raise ShapeError(
                f"weights shape {self.weights.shape} != filter_shape {self.filter_shape}", "filter"
            )
        if self.strides[0] != 1 or self.strides[3] != 1:
            raise ConfigError("strides must have the form (1, sh, sw, 1)")
        if self.padding not in ("SAME", "VALID"):
            raise ConfigError(f"unknown padding rule {self.padding!r}")

    @property
    def stride_hw(self) -> tuple[int, int]:
        return self.strides[1], self.strides[2]


def _check_rank4(x: Tensor, name: str = "input") -> None:
    if x.ndim != 4:
        raise ShapeError(f"{name} must be NHWC rank 4, got shape {x.shape}", "rank")


def _conv_geometry(h: int, w: int, kh: int, kw: int, sh: int, sw: int, padding: str):
    oh, ph = same_padding(h, kh, sh, padding)
    ow, pw = same_padding(w, kw, sw, padding)
    # padded extent large enough to hold every window touched by the output
    hp = max((oh - 1) * sh + kh, h + ph)
    wp = max((ow - 1) * sw + kw, w + pw)
    return oh, ow, ph, pw, hp, wp


def _windows(x: Tensor, kh, kw, sh, sw, oh, ow, ph, pw, hp, wp) -> Tensor:
    n, h, w, c = x.shape
    xp = np.zeros((n, hp, wp, c), dtype=x.dtype)
    xp[:, ph : ph + h, pw : pw + w, :] = x
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))
    return win[:, : (oh - 1) * sh + 1 : sh, : (ow - 1) * sw + 1 : sw]  # (n, oh, ow, c, kh, kw)


def _conv(x: Tensor, weights: Tensor, sh: int, sw: int, padding: str) -> Tensor:
    kh, kw, _, _ = weights.shape
    n, h, w, _ = x.shape
    geo = _conv_geometry(h, w, kh, kw, sh, sw, padding)
    cols = _windows(x, kh, kw, sh, sw, *geo)
    return np.tensordot(cols, weights, axes=([3, 4, 5], [2, 0, 1]))


def _conv_input_grad(g: Tensor, weights: Tensor, in_hw: tuple[int, int], sh, sw, padding) -> Tensor:
    """Adjoint of :func:`_conv` with respect to its input."""
    kh, kw, c_in, _ = weights.shape
    n = g.shape[0]
    h, w = in_hw
    oh, ow, ph, pw, hp, wp = _conv_geometry(h, w, kh, kw, sh, sw, padding)
    if g.shape[1:3] != (oh, ow):
        raise ShapeError(f"gradient spatial shape {g.shape[1:3]} != expected {(oh, ow)}", "spatial")
    cols = np.tensordot(g, weights, axes=([3], [3]))  # (n, oh, ow, kh, kw, c_in)
    xp = np.zeros((n, hp, wp, c_in))
    for i in range(kh):
        for j in range(kw):
            xp[:, i : i + (oh - 1) * sh + 1 : sh, j : j + (ow - 1) * sw + 1 : sw, :] += cols[:, :, :, i, j, :]
    return xp[:, ph : ph + h, pw : pw + w, :]


def _conv_weight_grad(x: Tensor, g: Tensor, kshape, sh, sw, padding) -> Tensor:
    kh, kw = kshape
    n, h, w, _ = x.shape
    geo = _conv_geometry(h, w, kh, kw, sh, sw, padding)
    cols = _windows(x, kh, kw, sh, sw, *geo)
    gw = np.tensordot(cols, g, axes=([0, 1, 2], [0, 1, 2]))  # (c_in, kh, kw, c_out)
    return gw.transpose(1, 2, 0, 3)


def conv2d_forward(x: Tensor, spec: ConvSpec) -> Tensor:
    """NHWC convolution (cross-correlation) with bias."""
    _check_rank4(x)
    if x.shape[3] != spec.filter_shape[2]:
        raise ShapeError(
            f"input has {x.shape[3]} channels, filter expects {spec.filter_shape[2]}", "channels"
        )
    sh, sw = spec.stride_hw
    return _conv(np.asarray(x, dtype=np.float64), spec.weights, sh, sw, spec.padding) + spec.bias


def transpose_output_hw(h: int, w: int, spec: ConvSpec) -> tuple[int, int]:
    kh, kw = spec.filter_shape[:2]
    sh, sw = spec.stride_hw
    if spec.padding == "SAME":
        return h * sh, w * sw
    return (h - 1) * sh + kh, (w - 1) * sw + kw


def conv2d_transpose_forward(x: Tensor, spec: ConvSpec, output_hw: tuple[int, int] | None = None) -> Tensor:
    """Transposed convolution: the adjoint of ``conv2d_forward`` for the same filter, plus bias.

    ``spec.bias`` has one entry per output channel (``filter_shape[2]``).
    """
    _check_rank4(x)
    if x.shape[3] != spec.filter_shape[3]:
        raise ShapeError(
            f"input has {x.shape[3]} channels, transposed filter expects {spec.filter_shape[3]}",
            "channels",
        )
    if output_hw is None:
        output_hw = transpose_output_hw(x.shape[1], x.shape[2], spec)
    sh, sw = spec.stride_hw
    y = _conv_input_grad(np.asarray(x, dtype=np.float64), spec.weights, output_hw, sh, sw, spec.padding)
    return y + spec.bias


# ---------------------------------------------------------------------------
# activations


def _check_lambda(kind: str, lam: float) -> None:
    if kind == "LRELU" and not 0.0 < lam < 1.0:
        raise ConfigError(f"leaky slope must lie in (0, 1), got {lam}")


def activation(x: Tensor, kind: str = "LRELU", lam: float = 0.2) -> Tensor:
    kind = kind.upper()
    _check_lambda(kind, lam)
    x = np.asarray(x, dtype=np.float64)
    if kind == "LRELU":
        return np.maximum(x, lam * x)
    if kind == "RELU":
        return np.maximum(x, 0.0)
    if kind == "SIGMOID":
        return 0.5 * (1.0 + np.tanh(0.5 * x))
    if kind == "IDENTITY":
        return x.copy()
    raise ConfigError(f"unknown activation {kind!r}")


def _activation_grad(x: Tensor, y: Tensor, kind: str, lam: float) -> Tensor:
    if kind == "LRELU":
        return np.where(x > 0, 1.0, lam)
    if kind == "RELU":
        return (x > 0).astype(np.float64)
    if kind == "SIGMOID":
        return y * (1.0 - y)
    return np.ones_like(x)


# ---------------------------------------------------------------------------
# layers


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> Tensor:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Layer:
    kind = "layer"

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.grads: dict[str, Tensor] = {}
        self.buffers: dict[str, Tensor] = {}

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        raise NotImplementedError

    def backward(self, grad: Tensor) -> Tensor:
        raise NotImplementedError

    def zero_grad(self) -> None:
        for k, p in self.params.items():
            self.grads[k] = np.zeros_like(p)

    def descriptor(self) -> dict:
        return {"kind": self.kind}

    def output_shape(self, input_shape: tuple) -> tuple:
        return tuple(input_shape)


class Dense(Layer):
    kind = "dense"

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.n_in, self.n_out = n_in, n_out
        self.params["weight"] = glorot_uniform(rng, (n_in, n_out), n_in, n_out)
        self.params["bias"] = np.zeros(n_out)
        self.zero_grad()

    def forward(self, x, train=False):
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise ShapeError(f"dense layer expects (N, {self.n_in}), got {x.shape}", "features")
        self._x = x
        return x @ self.params["weight"] + self.params["bias"]

    def backward(self, grad):
        self.grads["weight"] += self._x.T @ grad
        self.grads["bias"] += grad.sum(axis=0)
        return grad @ self.params["weight"].T

    def descriptor(self):
        return {"kind": self.kind, "shapes": {"weight": [self.n_in, self.n_out], "bias": [self.n_out]}}

    def output_shape(self, input_shape):
        return (input_shape[0], self.n_out)


class Conv2D(Layer):
    kind = "conv2d"

    def __init__(self, filter_shape, stride: int = 2, padding: str = "SAME", rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        kh, kw, cin, cout = filter_shape
        self.filter_shape = tuple(filter_shape)
        self.stride, self.padding = stride, padding
        self.params["weight"] = glorot_uniform(rng, self.filter_shape, kh * kw * cin, kh * kw * cout)
        self.params["bias"] = np.zeros(cout)
        self.zero_grad()

    @property
    def spec(self) -> ConvSpec:
        return ConvSpec(
            self.filter_shape,
            self.params["weight"],
            self.params["bias"],
            (1, self.stride, self.stride, 1),
            self.padding,
        )

    def forward(self, x, train=False):
        self._x = x
        return conv2d_forward(x, self.spec)

    def backward(self, grad):
        s = self.stride
        x = self._x
        self.grads["weight"] += _conv_weight_grad(x, grad, self.filter_shape[:2], s, s, self.padding)
        self.grads["bias"] += grad.sum(axis=(0, 1, 2))
        return _conv_input_grad(grad, self.params["weight"], x.shape[1:3], s, s, self.padding)

    def descriptor(self):
        return {
            "kind": self.kind,
            "filter_shape": list(self.filter_shape),
            "strides": [1, self.stride, self.stride, 1],
            "padding": self.padding,
            "shapes": {"weight": list(self.filter_shape), "bias": [self.filter_shape[3]]},
        }

    def output_shape(self, input_shape):
        n, h, w, c = input_shape
        if c != self.filter_shape[2]:
            raise ShapeError(f"input has {c} channels, filter expects {self.filter_shape[2]}", "channels")
        oh, _ = same_padding(h, self.filter_shape[0], self.stride, self.padding)
        ow, _ = same_padding(w, self.filter_shape[1], self.stride, self.padding)
        return (n, oh, ow, self.filter_shape[3])


class Conv2DTranspose(Conv2D):
    """Transposed convolution; ``filter_shape`` is ``(kh, kw, out_channels, in_channels)``."""

    kind = "conv2d_transpose"

    def __init__(self, filter_shape, stride: int = 2, padding: str = "SAME", rng=None):
        super().__init__(filter_shape, stride, padding, rng)
        self.params["bias"] = np.zeros(filter_shape[2])
        self.zero_grad()

    def forward(self, x, train=False):
        self._x = x
        return conv2d_transpose_forward(x, self.spec)

    def backward(self, grad):
        s = self.stride
        x = self._x
        # roles of input and output swap relative to the plain convolution
        self.grads["weight"] += _conv_weight_grad(grad, x, self.filter_shape[:2], s, s, self.padding)
        self.grads["bias"] += grad.sum(axis=(0, 1, 2))
        return _conv(grad, self.params["weight"], s, s, self.padding)

    def descriptor(self):
        d = super().descriptor()
        d["shapes"]["bias"] = [self.filter_shape[2]]
        return d

    def output_shape(self, input_shape):
        n, h, w, c = input_shape
        if c != self.filter_shape[3]:
            raise ShapeError(
                f"input has {c} channels, transposed filter expects {self.filter_shape[3]}", "channels"
            )
        oh, ow = transpose_output_hw(h, w, self.spec)
        return (n, oh, ow, self.filter_shape[2])


@dataclass
class BatchNormState:
    gamma: Tensor
    beta: Tensor
    running_mean: Tensor
    running_var: Tensor
    eps_bn: float = 1e-5
    momentum: float = 0.99
    mode: str = "TRAIN"

    @classmethod
    def create(cls, channels: int, eps_bn: float = 1e-5, momentum: float = 0.99, mode: str = "TRAIN"):
        return cls(np.ones(channels), np.zeros(channels), np.zeros(channels), np.ones(channels), eps_bn, momentum, mode)


def batchnorm_forward(x: Tensor, state: BatchNormState) -> Tensor:
    """Normalize over every axis but the last (channels), then scale and shift.

    In TRAIN mode the running statistics of ``state`` are updated in place.
    """
    y, _ = _batchnorm(np.asarray(x, dtype=np.float64), state)
    return y


def _batchnorm(x: Tensor, state: BatchNormState):
    axes = tuple(range(x.ndim - 1))
    if x.shape[-1] != state.gamma.shape[0]:
        raise ShapeError(f"input has {x.shape[-1]} channels, batch norm has {state.gamma.shape[0]}", "channels")
    if state.mode == "TRAIN":
        count = x.size // x.shape[-1]
        if count == 1 and state.eps_bn <= 0:
            raise ValueError("batch norm over a single value needs eps_bn > 0")
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        m = state.momentum
        state.running_mean[...] = m * state.running_mean + (1 - m) * mean
        state.running_var[...] = m * state.running_var + (1 - m) * var
    elif state.mode == "EVAL":
        mean, var = state.running_mean, state.running_var
    else:
        raise ConfigError(f"unknown batch norm mode {state.mode!r}")
    inv_std = 1.0 / np.sqrt(var + state.eps_bn)
    xhat = (x - mean) * inv_std
    return state.gamma * xhat + state.beta, (xhat, inv_std)


class BatchNorm(Layer):
    kind = "batchnorm"

    def __init__(self, channels: int, eps_bn: float = 1e-5, momentum: float = 0.99):
        super().__init__()
        self.state = BatchNormState.create(channels, eps_bn, momentum)
        self.params["gamma"] = self.state.gamma
        self.params["beta"] = self.state.beta
        self.buffers["running_mean"] = self.state.running_mean
        self.buffers["running_var"] = self.state.running_var
        self.zero_grad()

    def forward(self, x, train=False):
        self.state.mode = "TRAIN" if train else "EVAL"
        y, (xhat, inv_std) = _batchnorm(x, self.state)
        self._cache = (xhat, inv_std, train)
        return y

    def backward(self, grad):
        xhat, inv_std, train = self._cache
        axes = tuple(range(grad.ndim - 1))
        gamma = self.params["gamma"]
        self.grads["gamma"] += (grad * xhat).sum(axis=axes)
        self.grads["beta"] += grad.sum(axis=axes)
        dxhat = grad * gamma
        if not train:
            return dxhat * inv_std
        count = grad.size // grad.shape[-1]
        return (inv_std / count) * (
            count * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes)
        )

    def descriptor(self):
        c = self.state.gamma.shape[0]
        return {
            "kind": self.kind,
            "eps_bn": self.state.eps_bn,
            "momentum": self.state.momentum,
            "shapes": {"gamma": [c], "beta": [c], "running_mean": [c], "running_var": [c]},
        }


class Activation(Layer):
    kind = "activation"

    def __init__(self, fn: str = "LRELU", lam: float = 0.2):
        super().__init__()
        self.fn = fn.upper()
        _check_lambda(self.fn, lam)
        self.lam = lam

    def forward(self, x, train=False):
        self._x = x
        self._y = activation(x, self.fn, self.lam)
        return self._y

    def backward(self, grad):
        return grad * _activation_grad(self._x, self._y, self.fn, self.lam)

    def descriptor(self):
        return {"kind": self.kind, "activation": self.fn, "lambda": self.lam}


class Reshape(Layer):
    kind = "reshape"

    def __init__(self, shape: tuple[int, ...]):
        super().__init__()
        self.shape = tuple(shape)

    def forward(self, x, train=False):
        self._in_shape = x.shape
        return x.reshape((x.shape[0],) + self.shape)

    def backward(self, grad):
        return grad.reshape(self._in_shape)

    def descriptor(self):
        return {"kind": self.kind, "target": list(self.shape)}

    def output_shape(self, input_shape):
        if math.prod(input_shape[1:]) != math.prod(self.shape):
            raise ShapeError(f"cannot reshape {input_shape[1:]} to {self.shape}", "features")
        return (input_shape[0],) + self.shape


class Sequential(Layer):
    kind = "sequential"

    def __init__(self, layers: list[Layer]):
        super().__init__()
        self.layers = list(layers)

    def forward(self, x, train=False):
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()

    def named_params(self, prefix: str = "") -> dict[str, Tensor]:
        out = {}
        for i, layer in enumerate(self.layers):
            for k, v in layer.params.items():
                out[f"{prefix}{i}.{k}"] = v
        return out

    def named_grads(self, prefix: str = "") -> dict[str, Tensor]:
        out = {}
        for i, layer in enumerate(self.layers):
            for k, v in layer.grads.items():
                out[f"{prefix}{i}.{k}"] = v
        return out

    def named_tensors(self, prefix: str = "") -> dict[str, Tensor]:
        """Parameters and buffers in declaration order (checkpoint order)."""
        out = {}
        for i, layer in enumerate(self.layers):
            for k in layer.descriptor().get("shapes", {}):
                out[f"{prefix}{i}.{k}"] = layer.params.get(k, layer.buffers.get(k))
        return out

    def descriptor(self):
        return {"kind": self.kind, "layers": [layer.descriptor() for layer in self.layers]}

    def output_shapes(self, input_shape: tuple) -> list[tuple]:
        shapes = []
        for layer in self.layers:
            input_shape = layer.output_shape(input_shape)
            shapes.append(input_shape)
        return shapes


# ---------------------------------------------------------------------------
# reverse pass and optimizer


@dataclass
class Loss:
    """A loss value with its gradient with respect to the network output."""

    value: float
    grad: Tensor


def squared_error(pred: Tensor, target: Tensor) -> Loss:
    diff = pred - target
    return Loss(float(np.sum(diff * diff)), 2.0 * diff)


def backward(loss: Loss, network: Sequential) -> dict[str, Tensor]:
    """Back-propagate ``loss`` through the last forward pass of ``network``.

    Returns a fresh dict of gradients keyed like ``network.named_params()``.
    """
    if np.ndim(loss.value) != 0:
        raise ValueError(f"loss must be a scalar, got shape {np.shape(loss.value)}")
    if not np.isfinite(loss.value):
        raise FloatingPointError(f"loss is not finite: {loss.value}")
    network.zero_grad()
    network.backward(np.asarray(loss.grad, dtype=np.float64))
    return {k: g.copy() for k, g in network.named_grads().items()}


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    t: int = 0
    m: dict[str, Tensor] = field(default_factory=dict)
    v: dict[str, Tensor] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, Tensor], state: AdamState) -> AdamState:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}", name)
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps_adam)
    return state


# ---------------------------------------------------------------------------
# checkpoint


def save_checkpoint(path, descriptor: dict, tensors: dict[str, Tensor]) -> None:
    """Write the binary checkpoint: magic, version, JSON descriptor, raw f8 arrays."""
    desc = dict(descriptor)
    desc["tensors"] = [[name, list(t.shape)] for name, t in tensors.items()]
    blob = json.dumps(desc, sort_keys=True).encode("utf-8")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for t in tensors.values():
            fh.write(np.ascontiguousarray(t, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[dict, dict[str, Tensor]]:
    raw = Path(path).read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: bad magic")
    off = len(CHECKPOINT_MAGIC)
    version, n = struct.unpack_from("<IQ", raw, off)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    off += struct.calcsize("<IQ")
    desc = json.loads(raw[off : off + n].decode("utf-8"))
    off += n
    tensors = {}
    for name, shape in desc["tensors"]:
        count = math.prod(shape)
        if off + 8 * count > len(raw):
            raise CheckpointError(f"{path}: truncated while reading {name}")
        tensors[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(shape).copy()
        off += 8 * count
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")
    return desc, tensors


def assign_tensors(network: Sequential, tensors: dict[str, Tensor], prefix: str = "") -> None:
    """Copy loaded arrays into ``network``, validating every shape."""
    targets = network.named_tensors(prefix)
    missing = set(targets) - set(tensors)
    if missing:
        raise CheckpointError(f"checkpoint lacks tensors {sorted(missing)}")
    for name, dst in targets.items():
        src = tensors[name]
        if src.shape != dst.shape:
            raise CheckpointError(f"{name}: checkpoint shape {src.shape} != model shape {dst.shape}")
        dst[...] = src

"""Declarative layer stacks with explicit forward and backward passes.

Networks are described by a :class:`NetworkSpec` (an ordered tuple of
:class:`LayerSpec`) and evaluated by :class:`Network`, which owns a
:class:`NetworkParams`.  Image tensors cross the public API in
``(N, C, H, W)`` order; internally activations are kept channels-last so that
every convolution is a single GEMM over im2col patch rows.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from ..errors import NumericError, ShapeError, StateError
from . import kernels

LAYER_KINDS = (
    "conv",
    "deconv",
    "fully_connected",
    "batch_norm",
    "leaky_relu",
    "relu",
    "tanh",
    "sigmoid",
)
WEIGHTED_KINDS = ("conv", "deconv", "fully_connected")
TRAINABLE_NAMES = ("weight", "bias", "gamma", "beta")

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
INIT_STD = 0.02


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    out_channels: int = 0
    negative_slope: float = 0.0
    # tanh only: emit (tanh(x) + 1) / 2 so outputs live in [0, 1]
    unit_range: bool = False

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("conv", "deconv"):
            if self.kernel < 1 or self.stride < 1:
                raise ValueError("kernel and stride must be >= 1")
            if self.padding < 0:
                raise ValueError("padding must be >= 0")
        if self.kind in WEIGHTED_KINDS and self.out_channels < 1:
            raise ValueError("out_channels must be >= 1")

    def __str__(self) -> str:
        if self.kind == "conv":
            return f"Conv{self.kernel}-{self.stride}-{self.out_channels}"
        if self.kind == "deconv":
            return f"DeConv{self.kernel}-{self.stride}-{self.out_channels}"
        if self.kind == "fully_connected":
            return f"FC-{self.out_channels}"
        if self.kind == "leaky_relu":
            return f"LeakyReLU-{self.negative_slope:g}"
        return self.kind


def conv(out_channels, kernel=4, stride=2, padding=1) -> LayerSpec:
    return LayerSpec("conv", kernel, stride, padding, out_channels)


def deconv(out_channels, kernel=4, stride=2, padding=1) -> LayerSpec:
    return LayerSpec("deconv", kernel, stride, padding, out_channels)


def fc(out_features) -> LayerSpec:
    return LayerSpec("fully_connected", out_channels=out_features)


def bn() -> LayerSpec:
    return LayerSpec("batch_norm")


def lrelu(slope=0.2) -> LayerSpec:
    return LayerSpec("leaky_relu", negative_slope=slope)


def relu() -> LayerSpec:
    return LayerSpec("relu")


def tanh(unit_range=False) -> LayerSpec:
    return LayerSpec("tanh", unit_range=unit_range)


def sigmoid() -> LayerSpec:
    return LayerSpec("sigmoid")


def _propagate(layer: LayerSpec, shape: tuple[int, ...]) -> tuple[int, ...]:
    kind = layer.kind
    if kind == "conv":
        if len(shape) != 3:
            raise ShapeError(f"{layer} needs a (C, H, W) input, got {shape}")
        c, h, w = shape
        ho = (h + 2 * layer.padding - layer.kernel) // layer.stride + 1
        wo = (w + 2 * layer.padding - layer.kernel) // layer.stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"{layer} cannot consume spatial size {h}x{w}")
        return (layer.out_channels, ho, wo)
    if kind == "deconv":
        if len(shape) == 1:
            shape = (shape[0], 1, 1)
        if len(shape) != 3:
            raise ShapeError(f"{layer} needs a (C, H, W) or (d,) input, got {shape}")
        c, h, w = shape
        ho = (h - 1) * layer.stride - 2 * layer.padding + layer.kernel
        wo = (w - 1) * layer.stride - 2 * layer.padding + layer.kernel
        if ho < 1 or wo < 1:
            raise ShapeError(f"{layer} produces empty output from {h}x{w}")
        return (layer.out_channels, ho, wo)
    if kind == "fully_connected":
        return (layer.out_channels,)
    return shape


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, ...]
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        self.shapes  # validates propagation eagerly

    @property
    def shapes(self) -> list[tuple[int, ...]]:
        """Input shape followed by the output shape of every layer."""
        out = [self.input_shape]
        for layer in self.layers:
            out.append(_propagate(layer, out[-1]))
        return out

    @property
    def output_shape(self) -> tuple[int, ...]:
        return self.shapes[-1]

    def fingerprint(self) -> str:
        payload = {
            "input_shape": list(self.input_shape),
            "layers": [asdict(layer) for layer in self.layers],
        }
        blob = json.dumps(payload, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def describe(self) -> str:
        return " -> ".join(str(layer) for layer in self.layers)


def autoencoder_specs(
    image_channels: int,
    image_size: int,
    latent_dim: int,
    widths: tuple[int, ...] = (64, 128, 256, 512),
    disc_widths: tuple[int, ...] = (64, 32, 16),
) -> tuple[NetworkSpec, NetworkSpec, NetworkSpec]:
    """DCGAN-style encoder, decoder and latent discriminator.

    ``image_size`` must equal ``4 * 2 ** (len(widths) - 1)`` so that the
    stride-2 encoder ends on a 2x2 map and the decoder, starting from a
    1x1 latent map, climbs back to the input size.
    """
    if image_size != 4 * 2 ** (len(widths) - 1):
        raise ShapeError(f"image size {image_size} does not fit {len(widths)} stride-2 stages")
    enc: list[LayerSpec] = [conv(widths[0]), lrelu()]
    for w in widths[1:]:
        enc += [conv(w), bn(), lrelu()]
    enc.append(fc(latent_dim))

    dec: list[LayerSpec] = [deconv(widths[-1], stride=1, padding=0), bn(), lrelu()]
    for w in reversed(widths[1:-1]):
        dec += [deconv(w), bn(), lrelu()]
    dec += [deconv(image_channels), tanh(unit_range=True)]

    disc: list[LayerSpec] = []
    for w in disc_widths:
        disc += [fc(w), bn(), relu()]
    disc += [fc(1), sigmoid()]

    image_shape = (image_channels, image_size, image_size)
    return (
        NetworkSpec(tuple(enc), image_shape, "encoder"),
        NetworkSpec(tuple(dec), (latent_dim,), "decoder"),
        NetworkSpec(tuple(disc), (latent_dim,), "discriminator"),
    )


def standard_specs(dataset_kind: str) -> tuple[NetworkSpec, NetworkSpec, NetworkSpec]:
    """The encoder/decoder/discriminator triple used for MNIST or CIFAR-like data."""
    if dataset_kind == "mnist":
        return autoencoder_specs(1, 32, 128, disc_widths=(64, 32, 16))
    if dataset_kind in ("cifar_like", "cifar10"):
        return autoencoder_specs(3, 32, 512, disc_widths=(128, 32, 16))
    raise ValueError(f"unknown dataset kind {dataset_kind!r}")


@dataclass
class NetworkParams:
    """Per-layer arrays; ``layers[i]`` is a dict keyed by array name."""

    layers: list[dict[str, np.ndarray]] = field(default_factory=list)

    def copy(self) -> "NetworkParams":
        return NetworkParams([{k: v.copy() for k, v in d.items()} for d in self.layers])

    def astype(self, dtype) -> "NetworkParams":
        return NetworkParams([{k: v.astype(dtype) for k, v in d.items()} for d in self.layers])

    @property
    def dtype(self):
        for d in self.layers:
            for v in d.values():
                return v.dtype
        return np.dtype(np.float32)

    def items(self) -> Iterator[tuple[int, str, np.ndarray]]:
        for i, d in enumerate(self.layers):
            for name, arr in d.items():
                yield i, name, arr

    def trainable(self) -> Iterator[tuple[int, str, np.ndarray]]:
        for i, name, arr in self.items():
            if name in TRAINABLE_NAMES:
                yield i, name, arr

    def all_finite(self) -> bool:
        return all(np.isfinite(arr).all() for _, _, arr in self.items())

    def checksum(self) -> str:
        h = hashlib.sha256()
        for i, name, arr in self.items():
            h.update(f"{i}/{name}/{arr.dtype.str}/{arr.shape}".encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def equal(self, other: "NetworkParams", trainable_only=False) -> bool:
        pick = (lambda p: p.trainable()) if trainable_only else (lambda p: p.items())
        a, b = list(pick(self)), list(pick(other))
        if len(a) != len(b):
            return False
        return all(
            ka == kb and na == nb and np.array_equal(x, y)
            for (ka, na, x), (kb, nb, y) in zip(a, b)
        )


def _param_shapes(spec: NetworkSpec) -> list[dict[str, tuple[int, ...]]]:
    shapes = spec.shapes
    out = []
    for layer, in_shape, out_shape in zip(spec.layers, shapes[:-1], shapes[1:]):
        k = layer.kernel
        if layer.kind == "conv":
            cin = in_shape[0]
            out.append({"weight": (k, k, cin, layer.out_channels), "bias": (layer.out_channels,)})
        elif layer.kind == "deconv":
            cin = in_shape[0]
            out.append({"weight": (cin, k, k, layer.out_channels), "bias": (layer.out_channels,)})
        elif layer.kind == "fully_connected":
            fan_in = int(np.prod(in_shape))
            out.append({"weight": (fan_in, layer.out_channels), "bias": (layer.out_channels,)})
        elif layer.kind == "batch_norm":
            c = in_shape[0]
            out.append({"gamma": (c,), "beta": (c,), "running_mean": (c,), "running_var": (c,)})
        else:
            out.append({})
    return out


def init_params(spec: NetworkSpec, seed: int, dtype=np.float32) -> NetworkParams:
    """Weights ~ N(0, 0.02^2), zero biases, unit BN scale and zero BN shift."""
    rng = np.random.default_rng(seed)
    layers = []
    for shapes in _param_shapes(spec):
        d = {}
        for name, shape in shapes.items():
            if name == "weight":
                d[name] = rng.normal(0.0, INIT_STD, size=shape).astype(dtype)
            elif name in ("gamma", "running_var"):
                d[name] = np.ones(shape, dtype=dtype)
            else:
                d[name] = np.zeros(shape, dtype=dtype)
        layers.append(d)
    return NetworkParams(layers)


def check_params(spec: NetworkSpec, params: NetworkParams) -> None:
    expected = _param_shapes(spec)
    if len(expected) != len(params.layers):
        raise ShapeError(f"{spec.name or 'network'}: expected {len(expected)} layers, got {len(params.layers)}")
    for i, (want, have) in enumerate(zip(expected, params.layers)):
        if set(want) != set(have):
            raise ShapeError(f"layer {i}: expected arrays {sorted(want)}, got {sorted(have)}")
        for name, shape in want.items():
            if have[name].shape != shape:
                raise ShapeError(f"layer {i} {name}: expected {shape}, got {have[name].shape}")


def _to_internal(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.transpose(0, 2, 3, 1)) if x.ndim == 4 else x


def _to_external(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.transpose(0, 3, 1, 2)) if x.ndim == 4 else x


class Network:
    """A :class:`NetworkSpec` bound to its parameters.

    ``forward`` in train mode uses batch statistics, updates running
    statistics (unless ``update_stats=False``) and remembers what
    ``backward`` needs.  Inference mode uses running statistics and
    touches nothing.
    """

    def __init__(self, spec: NetworkSpec, params: NetworkParams):
        check_params(spec, params)
        self.spec = spec
        self.params = params
        self._cache: list | None = None
        self._in_shape: tuple[int, ...] | None = None

    @property
    def dtype(self):
        return self.params.dtype

    def forward(self, x: np.ndarray, mode: str = "train", update_stats: bool = True) -> np.ndarray:
        if mode not in ("train", "inference"):
            raise ValueError(f"mode must be 'train' or 'inference', got {mode!r}")
        x = np.asarray(x)
        if tuple(x.shape[1:]) != self.spec.input_shape:
            raise ShapeError(
                f"{self.spec.name or 'network'} expects (N, {self.spec.input_shape}), got {x.shape}"
            )
        train = mode == "train"
        if train and x.shape[0] < 2 and any(l.kind == "batch_norm" for l in self.spec.layers):
            raise ShapeError("train-mode batch norm needs a batch of at least 2")
        h = _to_internal(x.astype(self.dtype, copy=False))
        cache = []
        for layer, p in zip(self.spec.layers, self.params.layers):
            h, ctx = _FORWARD[layer.kind](layer, p, h, train, update_stats)
            cache.append(ctx)
        if not np.isfinite(h).all():
            raise NumericError(f"non-finite activation in {self.spec.name or 'network'} output")
        if train:
            self._cache = cache
            self._in_shape = x.shape
        return _to_external(h)

    __call__ = forward

    def backward(self, dout: np.ndarray) -> tuple[NetworkParams, np.ndarray]:
        """Parameter gradients (running statistics omitted) and input gradient."""
        if self._cache is None:
            raise StateError("backward called without a preceding train-mode forward")
        g = _to_internal(np.asarray(dout, dtype=self.dtype))
        grads: list[dict[str, np.ndarray]] = []
        for layer, p, ctx in zip(
            reversed(self.spec.layers), reversed(self.params.layers), reversed(self._cache)
        ):
            g, pg = _BACKWARD[layer.kind](layer, p, ctx, g)
            grads.append(pg)
        grads.reverse()
        return NetworkParams(grads), _to_external(g).reshape(self._in_shape)


# --- per-layer kernels (channels-last) --------------------------------------


def _conv_fwd(layer, p, x, train, update_stats):
    n, h, w, c = x.shape
    k, s, pad = layer.kernel, layer.stride, layer.padding
    ho = (h + 2 * pad - k) // s + 1
    wo = (w + 2 * pad - k) // s + 1
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x
    cols = kernels.im2col(np.ascontiguousarray(xp), k, s, ho, wo)
    w2 = p["weight"].reshape(-1, layer.out_channels)
    out = cols @ w2
    out += p["bias"]
    return out.reshape(n, ho, wo, layer.out_channels), (cols, x.shape, ho, wo)


def _conv_bwd(layer, p, ctx, g):
    cols, xshape, ho, wo = ctx
    n, h, w, c = xshape
    k, s, pad = layer.kernel, layer.stride, layer.padding
    g2 = g.reshape(-1, layer.out_channels)
    w2 = p["weight"].reshape(-1, layer.out_channels)
    dw = (cols.T @ g2).reshape(p["weight"].shape)
    db = g2.sum(axis=0)
    dcols = g2 @ w2.T
    dxp = kernels.col2im(dcols, n, h + 2 * pad, w + 2 * pad, k, s, ho, wo)
    dx = dxp[:, pad : pad + h, pad : pad + w, :] if pad else dxp
    return dx, {"weight": dw, "bias": db}


def _deconv_fwd(layer, p, x, train, update_stats):
    orig_shape = x.shape
    if x.ndim == 2:
        x = x.reshape(x.shape[0], 1, 1, x.shape[1])
    n, h, w, cin = x.shape
    k, s, pad = layer.kernel, layer.stride, layer.padding
    hf, wf = (h - 1) * s + k, (w - 1) * s + k
    w2 = p["weight"].reshape(cin, -1)
    cols = x.reshape(-1, cin) @ w2
    full = kernels.col2im(cols, n, hf, wf, k, s, h, w)
    out = full[:, pad : hf - pad, pad : wf - pad, :] if pad else full
    out = out + p["bias"]
    return out, (x, hf, wf, orig_shape)


def _deconv_bwd(layer, p, ctx, g):
    x, hf, wf, orig_shape = ctx
    n, h, w, cin = x.shape
    k, s, pad = layer.kernel, layer.stride, layer.padding
    db = g.sum(axis=(0, 1, 2))
    gp = np.pad(g, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else g
    dcols = kernels.im2col(np.ascontiguousarray(gp), k, s, h, w)
    w2 = p["weight"].reshape(cin, -1)
    x2 = x.reshape(-1, cin)
    dw = (x2.T @ dcols).reshape(p["weight"].shape)
    dx = (dcols @ w2.T).reshape(orig_shape)
    return dx, {"weight": dw, "bias": db}


def _fc_fwd(layer, p, x, train, update_stats):
    x2 = x.reshape(x.shape[0], -1)
    out = x2 @ p["weight"]
    out += p["bias"]
    return out, (x2, x.shape)


def _fc_bwd(layer, p, ctx, g):
    x2, xshape = ctx
    dw = x2.T @ g
    db = g.sum(axis=0)
    dx = (g @ p["weight"].T).reshape(xshape)
    return dx, {"weight": dw, "bias": db}


def _bn_fwd(layer, p, x, train, update_stats):
    shape = x.shape
    c = shape[-1]
    x2 = x.reshape(-1, c)
    if train:
        mean, var = kernels.bn_stats(x2)
        m = x2.shape[0]
        if update_stats:
            unbiased = var * (m / max(m - 1, 1))
            p["running_mean"] *= 1 - BN_MOMENTUM
            p["running_mean"] += BN_MOMENTUM * mean
            p["running_var"] *= 1 - BN_MOMENTUM
            p["running_var"] += BN_MOMENTUM * unbiased
    else:
        mean, var = p["running_mean"], p["running_var"]
    inv_std = (1.0 / np.sqrt(var + BN_EPS)).astype(x.dtype)
    xhat = (x2 - mean) * inv_std
    out = xhat * p["gamma"] + p["beta"]
    return out.reshape(shape), (xhat, inv_std, shape)


def _bn_bwd(layer, p, ctx, g):
    xhat, inv_std, shape = ctx
    g2 = g.reshape(-1, shape[-1])
    dgamma = (g2 * xhat).sum(axis=0)
    dbeta = g2.sum(axis=0)
    dx = kernels.bn_backward(g2 * p["gamma"], xhat, inv_std)
    return dx.reshape(shape), {"gamma": dgamma, "beta": dbeta}


def _lrelu_fwd(layer, p, x, train, update_stats):
    return kernels.leaky_relu(x, layer.negative_slope), x


def _lrelu_bwd(layer, p, x, g):
    return kernels.leaky_relu_grad(x, g, layer.negative_slope), {}


def _relu_fwd(layer, p, x, train, update_stats):
    return np.maximum(x, 0), x


def _relu_bwd(layer, p, x, g):
    return np.where(x > 0, g, 0).astype(g.dtype), {}


def _tanh_fwd(layer, p, x, train, update_stats):
    t = np.tanh(x)
    out = (t + 1) * x.dtype.type(0.5) if layer.unit_range else t
    return out, t


def _tanh_bwd(layer, p, t, g):
    dx = g * (1 - t * t)
    if layer.unit_range:
        dx *= dx.dtype.type(0.5)
    return dx, {}


def _sigmoid_fwd(layer, p, x, train, update_stats):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1 / (1 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1 + ex)
    return out, out


def _sigmoid_bwd(layer, p, y, g):
    return g * y * (1 - y), {}


_FORWARD = {
    "conv": _conv_fwd,
    "deconv": _deconv_fwd,
    "fully_connected": _fc_fwd,
    "batch_norm": _bn_fwd,
    "leaky_relu": _lrelu_fwd,
    "relu": _relu_fwd,
    "tanh": _tanh_fwd,
    "sigmoid": _sigmoid_fwd,
}
_BACKWARD = {
    "conv": _conv_bwd,
    "deconv": _deconv_bwd,
    "fully_connected": _fc_bwd,
    "batch_norm": _bn_bwd,
    "leaky_relu": _lrelu_bwd,
    "relu": _relu_bwd,
    "tanh": _tanh_bwd,
    "sigmoid": _sigmoid_bwd,
}

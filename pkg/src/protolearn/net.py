"""Feature extractor: a small convolutional network with hand-written
forward and backward passes in float64 numpy.

Architectures are described by a compact text spec, e.g.

    in:1x28x28;conv:32,5,1,2;relu;pool:2;conv:64,5,1,2;relu;pool:2;fc:256;relu;fc:2

Tokens are ';'-separated. ``in:CxHxW`` must come first and ``fc:d``
must come last (its width is the feature dimension). ``conv`` takes
out_channels,kernel,stride,pad; ``pool`` is max pooling with a square
window that must evenly divide the spatial size; the first ``fc``
flattens. Shapes are validated at parse time, so a malformed or
inconsistent spec fails before any arrays are allocated.

Convolutions are evaluated by im2col plus one matrix product per layer,
which keeps the arithmetic in BLAS. Backward mirrors forward exactly;
the input gradient of the first layer is never materialized.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import FormatError, ParameterError

DEFAULT_ARCH = ("in:1x28x28;conv:32,5,1,2;relu;pool:2;"
                "conv:64,5,1,2;relu;pool:2;fc:256;relu;fc:2")


@dataclass(frozen=True)
class InSpec:
    channels: int
    height: int
    width: int

    def text(self) -> str:
        return f"in:{self.channels}x{self.height}x{self.width}"


@dataclass(frozen=True)
class ConvSpec:
    out_channels: int
    kernel: int
    stride: int
    pad: int

    def text(self) -> str:
        return f"conv:{self.out_channels},{self.kernel},{self.stride},{self.pad}"


@dataclass(frozen=True)
class ReluSpec:
    def text(self) -> str:
        return "relu"


@dataclass(frozen=True)
class PoolSpec:
    window: int

    def text(self) -> str:
        return f"pool:{self.window}"


@dataclass(frozen=True)
class FcSpec:
    out_features: int

    def text(self) -> str:
        return f"fc:{self.out_features}"


@dataclass(frozen=True)
class ArchSpec:
    """Parsed architecture plus the inferred shape after every layer.

    ``shapes[i]`` is the output shape of ``layers[i]``: a (c, h, w)
    tuple while spatial, or (features,) once flattened.
    """
    layers: tuple
    shapes: tuple

    @property
    def input_shape(self) -> tuple:
        return self.shapes[0]

    @property
    def feature_dim(self) -> int:
        return self.shapes[-1][0]

    def text(self) -> str:
        return ";".join(layer.text() for layer in self.layers)


def _int_fields(token: str, body: str, count: int) -> list[int]:
    parts = body.split(",")
    if len(parts) != count:
        raise FormatError(
            f"layer {token!r} expects {count} integer field(s), got {len(parts)}")
    out = []
    for p in parts:
        try:
            out.append(int(p))
        except ValueError:
            raise FormatError(f"layer {token!r} has non-integer field {p!r}") from None
    return out


def parse_arch(text: str) -> ArchSpec:
    """Parse and validate an architecture string."""
    tokens = [t.strip() for t in text.strip().split(";") if t.strip()]
    if not tokens:
        raise FormatError("empty architecture string")
    layers = []
    for token in tokens:
        name, _, body = token.partition(":")
        if name == "in":
            dims = body.split("x")
            if len(dims) != 3:
                raise FormatError(f"layer {token!r} expects CxHxW")
            try:
                c, h, w = (int(d) for d in dims)
            except ValueError:
                raise FormatError(f"layer {token!r} expects CxHxW integers") from None
            layers.append(InSpec(c, h, w))
        elif name == "conv":
            oc, k, s, p = _int_fields(token, body, 4)
            layers.append(ConvSpec(oc, k, s, p))
        elif name == "relu":
            if body:
                raise FormatError(f"layer {token!r} takes no fields")
            layers.append(ReluSpec())
        elif name == "pool":
            (m,) = _int_fields(token, body, 1)
            layers.append(PoolSpec(m))
        elif name == "fc":
            (n,) = _int_fields(token, body, 1)
            layers.append(FcSpec(n))
        else:
            raise FormatError(f"unknown layer {token!r}")

    if not isinstance(layers[0], InSpec):
        raise FormatError("architecture must start with an in: layer")
    if any(isinstance(l, InSpec) for l in layers[1:]):
        raise FormatError("in: may only appear first")
    if not isinstance(layers[-1], FcSpec):
        raise FormatError("architecture must end with an fc: layer")

    shapes = [_in_shape(layers[0])]
    for layer in layers[1:]:
        shapes.append(_next_shape(shapes[-1], layer))
    return ArchSpec(tuple(layers), tuple(shapes))


def _in_shape(spec: InSpec) -> tuple:
    if spec.channels <= 0 or spec.height <= 0 or spec.width <= 0:
        raise FormatError(f"layer {spec.text()!r} has non-positive dimensions")
    return (spec.channels, spec.height, spec.width)


def _next_shape(shape: tuple, layer) -> tuple:
    if isinstance(layer, ReluSpec):
        return shape
    if isinstance(layer, ConvSpec):
        if len(shape) != 3:
            raise FormatError("conv: requires spatial input, got flat features")
        c, h, w = shape
        if layer.out_channels <= 0 or layer.kernel <= 0 or layer.stride <= 0:
            raise FormatError(f"layer {layer.text()!r} has non-positive fields")
        if layer.pad < 0:
            raise FormatError(f"layer {layer.text()!r} has negative padding")
        for dim in (h, w):
            span = dim + 2 * layer.pad - layer.kernel
            if span < 0:
                raise FormatError(
                    f"layer {layer.text()!r} kernel exceeds padded input {dim}")
            if span % layer.stride:
                raise FormatError(
                    f"layer {layer.text()!r} stride does not tile input {dim}")
        oh = (h + 2 * layer.pad - layer.kernel) // layer.stride + 1
        ow = (w + 2 * layer.pad - layer.kernel) // layer.stride + 1
        return (layer.out_channels, oh, ow)
    if isinstance(layer, PoolSpec):
        if len(shape) != 3:
            raise FormatError("pool: requires spatial input, got flat features")
        c, h, w = shape
        if layer.window <= 0:
            raise FormatError(f"layer {layer.text()!r} has non-positive window")
        if h % layer.window or w % layer.window:
            raise FormatError(
                f"layer {layer.text()!r} window does not divide {h}x{w}")
        return (c, h // layer.window, w // layer.window)
    if isinstance(layer, FcSpec):
        if layer.out_features <= 0:
            raise FormatError(f"layer {layer.text()!r} has non-positive width")
        return (layer.out_features,)
    raise FormatError(f"unknown layer object {layer!r}")


@dataclass
class Network:
    """Architecture plus parameter arrays, keyed conv1.w, conv1.b,
    fc1.w, ... in layer order (insertion order fixes checkpoint order).
    """
    arch: ArchSpec
    params: dict

    @property
    def feature_dim(self) -> int:
        return self.arch.feature_dim


def _param_layer_names(arch: ArchSpec) -> list:
    """(layer index, base name) for each parameterized layer."""
    names = []
    counts = {"conv": 0, "fc": 0}
    for idx, layer in enumerate(arch.layers):
        if isinstance(layer, ConvSpec):
            counts["conv"] += 1
            names.append((idx, f"conv{counts['conv']}"))
        elif isinstance(layer, FcSpec):
            counts["fc"] += 1
            names.append((idx, f"fc{counts['fc']}"))
    return names


def init_network(arch: ArchSpec, seed: int) -> Network:
    """He-initialized network: weights N(0, 2/fan_in), biases zero."""
    rng = np.random.default_rng(seed)
    params: dict = {}
    for idx, base in _param_layer_names(arch):
        layer = arch.layers[idx]
        in_shape = arch.shapes[idx - 1]
        if isinstance(layer, ConvSpec):
            c_in = in_shape[0]
            fan_in = c_in * layer.kernel * layer.kernel
            shape = (layer.out_channels, c_in, layer.kernel, layer.kernel)
        else:
            fan_in = int(np.prod(in_shape))
            shape = (layer.out_features, fan_in)
        std = np.sqrt(2.0 / fan_in)
        params[base + ".w"] = rng.normal(0.0, std, size=shape)
        params[base + ".b"] = np.zeros(shape[0], dtype=np.float64)
    return Network(arch, params)


def num_params(net: Network) -> int:
    return sum(p.size for p in net.params.values())


def _im2col(x: np.ndarray, kernel: int, stride: int, pad: int, oh: int, ow: int):
    """x is (c, n, h, w); returns (c*k*k, n*oh*ow) patches."""
    c, n, h, w = x.shape
    if pad:
        xp = np.zeros((c, n, h + 2 * pad, w + 2 * pad), dtype=np.float64)
        xp[:, :, pad:pad + h, pad:pad + w] = x
        x = xp
    col = np.empty((c, kernel, kernel, n, oh, ow), dtype=np.float64)
    for ki in range(kernel):
        for kj in range(kernel):
            col[:, ki, kj] = x[:, :, ki:ki + stride * oh:stride,
                               kj:kj + stride * ow:stride]
    return col.reshape(c * kernel * kernel, n * oh * ow)


def _col2im(dcol: np.ndarray, x_shape: tuple, kernel: int, stride: int,
            pad: int, oh: int, ow: int) -> np.ndarray:
    """Adjoint of _im2col; x_shape is the (c, n, h, w) input shape."""
    c, n, h, w = x_shape
    dcol = dcol.reshape(c, kernel, kernel, n, oh, ow)
    dxp = np.zeros((c, n, h + 2 * pad, w + 2 * pad), dtype=np.float64)
    for ki in range(kernel):
        for kj in range(kernel):
            dxp[:, :, ki:ki + stride * oh:stride,
                kj:kj + stride * ow:stride] += dcol[:, ki, kj]
    if pad:
        return dxp[:, :, pad:h + pad, pad:w + pad]
    return dxp


def forward(net: Network, x: np.ndarray, want_cache: bool = False):
    """Run the network on a batch (n, c, h, w) of float64 inputs.

    Returns the (n, feature_dim) features, or (features, cache) when
    ``want_cache`` is set; pass the cache to :func:`backward`.

    Spatial activations are held as (c, n, h, w) internally so that
    im2col, the conv gemms, and their adjoints never transpose; the
    layout flips only once, entering the first layer and flattening
    into the first fc (which keeps the per-sample c,h,w order).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4 or x.shape[1:] != net.arch.input_shape:
        raise ParameterError(
            f"input shape {x.shape} does not match arch input "
            f"{net.arch.input_shape}")
    names = dict(_param_layer_names(net.arch))
    cache = []
    out = x.transpose(1, 0, 2, 3)
    owned = False   # until the first layer output, out is a view of x
    for idx, layer in enumerate(net.arch.layers[1:], start=1):
        if isinstance(layer, ConvSpec):
            oc, oh, ow = net.arch.shapes[idx]
            col = _im2col(out, layer.kernel, layer.stride, layer.pad, oh, ow)
            w = net.params[names[idx] + ".w"]
            b = net.params[names[idx] + ".b"]
            n = out.shape[1]
            cache.append(("conv", idx, out.shape, col))
            y = w.reshape(oc, -1) @ col
            y += b[:, None]
            out = y.reshape(oc, n, oh, ow)
        elif isinstance(layer, ReluSpec):
            mask = out > 0
            cache.append(("relu", idx, mask))
            if owned:
                out *= mask
            else:
                out = out * mask
        elif isinstance(layer, PoolSpec):
            m = layer.window
            c, n, h, w_ = out.shape
            oh, ow = h // m, w_ // m
            if m == 2:
                w00 = out[:, :, 0::2, 0::2]
                w01 = out[:, :, 0::2, 1::2]
                w10 = out[:, :, 1::2, 0::2]
                w11 = out[:, :, 1::2, 1::2]
                mx = np.maximum(np.maximum(w00, w01), np.maximum(w10, w11))
                # first (row-major) maximal element wins the backward route
                pick = np.where(w00 == mx, 0, np.where(w01 == mx, 1, np.where(
                    w10 == mx, 2, 3))).astype(np.int8)
                out = mx
            else:
                win = out.reshape(c, n, oh, m, ow, m).transpose(0, 1, 2, 4, 3, 5)
                win = win.reshape(c, n, oh, ow, m * m)
                pick = win.argmax(axis=4)
                out = np.take_along_axis(win, pick[..., None], axis=4)[..., 0]
            cache.append(("pool", idx, (c, n, h, w_), pick))
        elif isinstance(layer, FcSpec):
            if out.ndim == 4:   # (c, n, h, w) -> (n, c*h*w), per-sample order
                flat = out.transpose(1, 0, 2, 3).reshape(out.shape[1], -1)
            else:
                flat = out
            w = net.params[names[idx] + ".w"]
            b = net.params[names[idx] + ".b"]
            cache.append(("fc", idx, out.shape, flat))
            out = flat @ w.T + b
        owned = True
    if want_cache:
        return out, cache
    return out


_POOL_BASE_CACHE: dict = {}


def _pool_scatter_base(c, n, oh, ow, m):
    """Data-independent parts of the pool scatter offsets, memoized.

    For output cell (ci, ni, oi, oj) the input flat offset is
    (oi*m + ki)*W + oj*m + kj with W = ow*m; this returns the int64 grids
    row_base = oi*m folded with the leading (ci, ni) strides, and
    col_base = oj*m, so callers only add the data-dependent ki, kj.
    """
    key = (c, n, oh, ow, m)
    hit = _POOL_BASE_CACHE.get(key)
    if hit is None:
        g = np.arange(c * n * oh * ow).reshape(c, n, oh, ow)
        hit = (g // ow * m, g % ow * m)
        if len(_POOL_BASE_CACHE) >= 16:
            _POOL_BASE_CACHE.clear()
        _POOL_BASE_CACHE[key] = hit
    return hit


def backward(net: Network, cache: list, d_features: np.ndarray) -> dict:
    """Backpropagate d(loss)/d(features) through a cached forward pass.

    Returns gradients keyed like ``net.params``. The gradient with
    respect to the network input is not computed.
    """
    names = dict(_param_layer_names(net.arch))
    grads: dict = {}
    d = np.asarray(d_features, dtype=np.float64)
    for pos in range(len(cache) - 1, -1, -1):
        entry = cache[pos]
        kind, idx = entry[0], entry[1]
        if kind == "fc":
            _, _, in_shape, flat = entry
            w = net.params[names[idx] + ".w"]
            grads[names[idx] + ".w"] = d.T @ flat
            grads[names[idx] + ".b"] = d.sum(axis=0)
            if pos > 0:
                d = d @ w
                if len(in_shape) == 4:
                    c, n = in_shape[:2]
                    d = d.reshape(n, c, *in_shape[2:]).transpose(1, 0, 2, 3)
        elif kind == "relu":
            _, _, mask = entry
            # d is always freshly allocated by this point (arch ends fc)
            d *= mask
        elif kind == "pool":
            _, _, (c, n, h, w_), pick = entry
            m = net.arch.layers[idx].window
            oh, ow = h // m, w_ // m
            # scatter each upstream value to its window's argmax position:
            # flat offset of (..., oi*m + ki, oj*m + kj) in the (c,n,h,w) grid
            ki, kj = pick // m, pick % m
            row_base, col_base = _pool_scatter_base(c, n, oh, ow, m)
            flat = (row_base + ki) * (ow * m) + col_base + kj
            dx = np.zeros(c * n * h * w_, dtype=np.float64)
            dx[flat.ravel()] = d.ravel()
            d = dx.reshape(c, n, h, w_)
        elif kind == "conv":
            _, _, x_shape, col = entry
            layer = net.arch.layers[idx]
            oc, oh, ow = net.arch.shapes[idx]
            d2 = d.reshape(oc, -1)
            w = net.params[names[idx] + ".w"]
            grads[names[idx] + ".w"] = (d2 @ col.T).reshape(w.shape)
            grads[names[idx] + ".b"] = d2.sum(axis=1)
            if pos > 0:
                dcol = w.reshape(oc, -1).T @ d2
                d = _col2im(dcol, x_shape, layer.kernel, layer.stride,
                            layer.pad, oh, ow)
    return grads


def sgd_step(params: dict, grads: dict, lr: float) -> None:
    """In-place vanilla SGD update on every entry present in grads."""
    for name, g in grads.items():
        params[name] -= lr * g

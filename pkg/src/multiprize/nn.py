"""Minimal numpy network kernel: conv / linear / relu / maxpool / loss.

Gradients are written by hand per layer kind. Every reduction goes through a
fixed loop nest or a single BLAS call with fixed operand shapes, so repeated
calls on identical inputs produce bit-identical results on a given machine.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, ShapeError

_PRECISION = {"float32": np.float32, "float64": np.float64}
_dtype = np.float32


def set_precision(mode: str) -> None:
    """Select the global compute dtype: ``"float32"`` (training) or ``"float64"``."""
    global _dtype
    if mode not in _PRECISION:
        raise ConfigError(f"unknown precision {mode!r}; expected one of {sorted(_PRECISION)}")
    _dtype = _PRECISION[mode]


def get_dtype() -> type:
    return _dtype


@contextlib.contextmanager
def precision(mode: str):
    previous = "float64" if _dtype is np.float64 else "float32"
    set_precision(mode)
    try:
        yield
    finally:
        set_precision(previous)


def as_tensor(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=_dtype)


# ---------------------------------------------------------------------------
# architecture description
# ---------------------------------------------------------------------------

LAYER_KINDS = ("conv2d", "linear", "relu", "maxpool2x2", "flatten")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_channels: int = 0
    out_channels: int = 0
    kernel_size: int = 0
    stride: int = 1
    padding: int = 0
    in_features: int = 0
    out_features: int = 0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv2d":
            if min(self.in_channels, self.out_channels, self.kernel_size, self.stride) < 1:
                raise ConfigError(f"conv2d needs N, M, k, stride >= 1: {self}")
            if self.padding < 0:
                raise ConfigError("conv2d padding must be >= 0")
        if self.kind == "linear" and min(self.in_features, self.out_features) < 1:
            raise ConfigError(f"linear needs positive feature counts: {self}")

    @property
    def prunable(self) -> bool:
        return self.kind in ("conv2d", "linear")

    @property
    def weight_shape(self) -> tuple[int, ...]:
        if self.kind == "conv2d":
            return (self.out_channels, self.in_channels, self.kernel_size, self.kernel_size)
        if self.kind == "linear":
            return (self.out_features, self.in_features)
        raise ConfigError(f"{self.kind} has no weights")

    @property
    def fan_in(self) -> int:
        if self.kind == "conv2d":
            return self.in_channels * self.kernel_size**2
        return self.in_features

    def output_shape(self, shape: tuple[int, ...]) -> tuple[int, ...]:
        """Per-sample output shape for a per-sample input ``shape``."""
        if self.kind == "conv2d":
            if len(shape) != 3 or shape[0] != self.in_channels:
                raise ShapeError(f"conv2d expects ({self.in_channels}, H, W), got {shape}")
            h, w = (conv_output_size(d, self.kernel_size, self.stride, self.padding) for d in shape[1:])
            return (self.out_channels, h, w)
        if self.kind == "linear":
            if shape != (self.in_features,):
                raise ShapeError(f"linear expects ({self.in_features},), got {shape}")
            return (self.out_features,)
        if self.kind == "maxpool2x2":
            if len(shape) != 3 or shape[1] % 2 or shape[2] % 2:
                raise ShapeError(f"maxpool2x2 needs even spatial extents, got {shape}")
            return (shape[0], shape[1] // 2, shape[2] // 2)
        if self.kind == "flatten":
            return (int(np.prod(shape)),)
        return tuple(shape)

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.kind == "conv2d":
            d.update(
                in_channels=self.in_channels,
                out_channels=self.out_channels,
                kernel_size=self.kernel_size,
                stride=self.stride,
                padding=self.padding,
            )
        elif self.kind == "linear":
            d.update(in_features=self.in_features, out_features=self.out_features)
        return d


@dataclass(frozen=True)
class NetworkSpec:
    name: str
    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, int, int]
    num_classes: int
    shapes: tuple[tuple[int, ...], ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        if not self.layers or self.layers[-1].kind != "linear":
            raise ConfigError("final layer must be linear")
        if self.layers[-1].out_features != self.num_classes:
            raise ConfigError("final linear out_features must equal num_classes")
        shapes = [self.input_shape]
        for layer in self.layers:
            shapes.append(layer.output_shape(shapes[-1]))
        object.__setattr__(self, "shapes", tuple(shapes))

    @property
    def prunable_indices(self) -> list[int]:
        return [i for i, layer in enumerate(self.layers) if layer.prunable]

    @property
    def prunable_layers(self) -> list[LayerSpec]:
        return [self.layers[i] for i in self.prunable_indices]

    def weight_shapes(self) -> list[tuple[int, ...]]:
        return [layer.weight_shape for layer in self.prunable_layers]

    def conv_geometry(self) -> list[dict]:
        """N, M, k and output extent D of every conv layer (square maps only)."""
        out = []
        for j, i in enumerate(self.prunable_indices):
            layer = self.layers[i]
            if layer.kind != "conv2d":
                continue
            _, h, w = self.shapes[i + 1]
            if h != w:
                raise ShapeError(f"layer {j}: non-square feature map {h}x{w}")
            out.append(
                {
                    "layer_id": j,
                    "in_channels": layer.in_channels,
                    "out_channels": layer.out_channels,
                    "kernel_size": layer.kernel_size,
                    "feature_map_size": h,
                }
            )
        return out

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "layers": [layer.to_dict() for layer in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(
            name=d["name"],
            layers=tuple(LayerSpec(**layer) for layer in d["layers"]),
            input_shape=tuple(d["input_shape"]),
            num_classes=int(d["num_classes"]),
        )


CONV_WIDTHS = {
    "conv2": (32, 32),
    "conv4": (32, 32, 64, 64),
    "conv6": (32, 32, 64, 64, 128, 128),
    "conv8": (32, 32, 64, 64, 128, 128, 256, 256),
}
HEAD_WIDTH = 256


def conv_family(
    arch: str,
    input_shape: Sequence[int] = (3, 32, 32),
    num_classes: int = 10,
    widths: Sequence[int] | None = None,
    head_width: int = HEAD_WIDTH,
) -> NetworkSpec:
    """Build a CONV-N network: 3x3 conv/relu pairs, 2x2 maxpool after each pair,
    then linear -> relu -> linear. All layers are bias-free."""
    arch = arch.lower().replace("-", "")
    if widths is None:
        if arch not in CONV_WIDTHS:
            raise ConfigError(f"unknown architecture {arch!r}; choose from {sorted(CONV_WIDTHS)}")
        widths = CONV_WIDTHS[arch]
    c, h, w = (int(d) for d in input_shape)
    layers: list[LayerSpec] = []
    for i, width in enumerate(widths):
        layers.append(LayerSpec("conv2d", in_channels=c, out_channels=width, kernel_size=3, padding=1))
        layers.append(LayerSpec("relu"))
        c = width
        if i % 2 == 1:
            layers.append(LayerSpec("maxpool2x2"))
            h, w = h // 2, w // 2
    layers.append(LayerSpec("flatten"))
    layers.append(LayerSpec("linear", in_features=c * h * w, out_features=head_width))
    layers.append(LayerSpec("relu"))
    layers.append(LayerSpec("linear", in_features=head_width, out_features=num_classes))
    return NetworkSpec(arch, tuple(layers), tuple(input_shape), num_classes)


# ---------------------------------------------------------------------------
# layer kernels
# ---------------------------------------------------------------------------


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _check_conv(x: np.ndarray, w: np.ndarray, stride: int, padding: int) -> None:
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be [B,N,H,W], got shape {x.shape}")
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d weight must be [M,N,k,k], got shape {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"input channels N={x.shape[1]} != weight in-channels N={w.shape[1]}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"invalid stride={stride} / padding={padding}")
    k = w.shape[2]
    if x.shape[2] + 2 * padding < k or x.shape[3] + 2 * padding < k:
        raise ShapeError(f"kernel k={k} larger than padded input {x.shape[2:]} (padding={padding})")


def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def im2col(x: np.ndarray, k: int, stride: int, padding: int) -> np.ndarray:
    """Patch matrix of shape [B*H'*W', N*k*k], column order (n, ki, kj)."""
    b, n = x.shape[:2]
    win = sliding_window_view(_pad(x, padding), (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, n * k * k)


def conv2d_forward(x: np.ndarray, w: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Cross-correlation of ``x`` [B,N,H,W] with ``w`` [M,N,k,k]."""
    _check_conv(x, w, stride, padding)
    b, _, h, wd = x.shape
    m, _, k, _ = w.shape
    ho, wo = conv_output_size(h, k, stride, padding), conv_output_size(wd, k, stride, padding)
    out = im2col(x, k, stride, padding) @ w.reshape(m, -1).T
    return np.ascontiguousarray(out.reshape(b, ho, wo, m).transpose(0, 3, 1, 2))


def conv2d_backward(
    x: np.ndarray,
    w: np.ndarray,
    grad_out: np.ndarray,
    stride: int = 1,
    padding: int = 0,
    cols: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(grad_input, grad_weight)``. ``cols`` may pass a cached im2col."""
    _check_conv(x, w, stride, padding)
    b, n, h, wd = x.shape
    m, _, k, _ = w.shape
    ho, wo = conv_output_size(h, k, stride, padding), conv_output_size(wd, k, stride, padding)
    if grad_out.shape != (b, m, ho, wo):
        raise ShapeError(f"grad_out shape {grad_out.shape} != forward output shape {(b, m, ho, wo)}")
    if cols is None:
        cols = im2col(x, k, stride, padding)
    g2d = grad_out.transpose(0, 2, 3, 1).reshape(-1, m)
    grad_w = (g2d.T @ cols).reshape(w.shape)
    return _conv_input_grad(x.shape, w, g2d, stride, padding, ho, wo), grad_w


def _conv_input_grad(x_shape, w, g2d, stride, padding, ho, wo) -> np.ndarray:
    b, n, h, wd = x_shape
    m, _, k, _ = w.shape
    gcols = (g2d @ w.reshape(m, -1)).reshape(b, ho, wo, n, k, k)
    gpad = np.zeros((b, n, h + 2 * padding, wd + 2 * padding), dtype=gcols.dtype)
    for i in range(k):
        for j in range(k):
            gpad[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[
                :, :, :, :, i, j
            ].transpose(0, 3, 1, 2)
    if padding:
        gpad = gpad[:, :, padding:-padding, padding:-padding]
    return np.ascontiguousarray(gpad)


def conv2d_reference(x: np.ndarray, w: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Naive six-loop convolution; slow, used as an independent oracle."""
    _check_conv(x, w, stride, padding)
    xp = _pad(x, padding)
    b, n = x.shape[:2]
    m, _, k, _ = w.shape
    ho = conv_output_size(x.shape[2], k, stride, padding)
    wo = conv_output_size(x.shape[3], k, stride, padding)
    out = np.zeros((b, m, ho, wo), dtype=np.result_type(x, w))
    for bi in range(b):
        for mi in range(m):
            for oi in range(ho):
                for oj in range(wo):
                    acc = 0.0
                    for ni in range(n):
                        for ki in range(k):
                            for kj in range(k):
                                acc += xp[bi, ni, oi * stride + ki, oj * stride + kj] * w[mi, ni, ki, kj]
                    out[bi, mi, oi, oj] = acc
    return out


def linear_forward(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {w.shape} ([out,in])")
    return x @ w.T


def linear_backward(x: np.ndarray, w: np.ndarray, grad_out: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if grad_out.shape != (x.shape[0], w.shape[0]):
        raise ShapeError(f"linear: grad_out {grad_out.shape} != output shape {(x.shape[0], w.shape[0])}")
    return grad_out @ w, grad_out.T @ x


def linear_forward_backward(x, w, grad_out=None):
    """Output, plus ``(grad_input, grad_weight)`` when ``grad_out`` is given."""
    y = linear_forward(x, w)
    if grad_out is None:
        return y
    return y, linear_backward(x, w, grad_out)


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    # subgradient at exactly 0 is 0
    return grad_out * (x > 0)


def maxpool2x2_forward(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return pooled output and the argmax index (0..3, row-major in the window).

    Ties resolve to the lowest flat index.
    """
    if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(f"maxpool2x2 needs [B,C,H,W] with even H, W; got {x.shape}")
    b, c, h, w = x.shape
    win = x.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, idx


def maxpool2x2_backward(idx: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    b, c, h2, w2 = grad_out.shape
    g = np.zeros((b, c, h2, w2, 4), dtype=grad_out.dtype)
    np.put_along_axis(g, idx[..., None], grad_out[..., None], axis=-1)
    return np.ascontiguousarray(g.reshape(b, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, 2 * h2, 2 * w2))


def flatten_forward(x: np.ndarray) -> np.ndarray:
    return x.reshape(x.shape[0], -1)


def flatten_backward(shape: tuple[int, ...], grad_out: np.ndarray) -> np.ndarray:
    return grad_out.reshape(shape)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient ``(softmax - onehot) / B``."""
    logits = np.asarray(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"logits {logits.shape} / labels {labels.shape} mismatch")
    b, c = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ConfigError(f"labels must lie in [0, {c})")
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(b)
    loss = float(np.mean(logsum - z[rows, labels]))
    grad = np.exp(z - logsum[:, None])
    grad[rows, labels] -= 1
    return loss, grad / b


# ---------------------------------------------------------------------------
# whole-network passes
# ---------------------------------------------------------------------------


def network_forward(spec: NetworkSpec, weights: Sequence[np.ndarray], x: np.ndarray, keep_tape: bool = False):
    """Run ``spec`` on ``x`` with one weight tensor per prunable layer.

    Returns logits, or ``(logits, tape)`` when ``keep_tape`` so that
    :func:`network_backward` can reuse the intermediates.
    """
    if tuple(x.shape[1:]) != spec.input_shape:
        raise ShapeError(f"input per-sample shape {x.shape[1:]} != {spec.input_shape}")
    if len(weights) != len(spec.prunable_indices):
        raise ShapeError(f"expected {len(spec.prunable_indices)} weight tensors, got {len(weights)}")
    tape = []
    wi = 0
    for layer in spec.layers:
        if layer.kind == "conv2d":
            w = weights[wi]
            wi += 1
            _check_conv(x, w, layer.stride, layer.padding)
            cols = im2col(x, layer.kernel_size, layer.stride, layer.padding)
            b = x.shape[0]
            ho, wo = layer.output_shape(x.shape[1:])[1:]
            y = np.ascontiguousarray(
                (cols @ w.reshape(w.shape[0], -1).T).reshape(b, ho, wo, -1).transpose(0, 3, 1, 2)
            )
            rec = (x, cols) if keep_tape else None
        elif layer.kind == "linear":
            y = linear_forward(x, weights[wi])
            wi += 1
            rec = x
        elif layer.kind == "relu":
            y = relu_forward(x)
            rec = x
        elif layer.kind == "maxpool2x2":
            y, rec = maxpool2x2_forward(x)
        else:
            y = flatten_forward(x)
            rec = x.shape
        if keep_tape:
            tape.append(rec)
        x = y
    return (x, tape) if keep_tape else x


def network_backward(
    spec: NetworkSpec,
    weights: Sequence[np.ndarray],
    tape: list,
    grad_logits: np.ndarray,
    need: Sequence[bool] | None = None,
) -> list[np.ndarray | None]:
    """Gradients w.r.t. each prunable layer's weight tensor.

    ``need[j]`` False skips computing layer j's weight gradient (returned as
    None). Backpropagation stops below the lowest needed layer.
    """
    n_w = len(spec.prunable_indices)
    need = [True] * n_w if need is None else list(need)
    grads: list[np.ndarray | None] = [None] * n_w
    if not any(need):
        return grads
    lowest = spec.prunable_indices[need.index(True)]
    g = grad_logits
    wi = n_w
    for li in range(len(spec.layers) - 1, lowest - 1, -1):
        layer, rec = spec.layers[li], tape[li]
        last = li == lowest
        if layer.kind == "conv2d":
            wi -= 1
            x, cols = rec
            w = weights[wi]
            m = w.shape[0]
            g2d = g.transpose(0, 2, 3, 1).reshape(-1, m)
            if need[wi]:
                grads[wi] = (g2d.T @ cols).reshape(w.shape)
            if not last:
                g = _conv_input_grad(x.shape, w, g2d, layer.stride, layer.padding, g.shape[2], g.shape[3])
        elif layer.kind == "linear":
            wi -= 1
            if need[wi]:
                grads[wi] = g.T @ rec
            if not last:
                g = g @ weights[wi]
        elif layer.kind == "relu":
            g = relu_backward(rec, g)
        elif layer.kind == "maxpool2x2":
            g = maxpool2x2_backward(rec, g)
        else:
            g = flatten_backward(rec, g)
    return grads

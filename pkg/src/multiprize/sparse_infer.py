"""Kernel-skipping inference for binarized, masked checkpoints.

A conv layer is stored as a list of surviving ``k x k`` kernels, one per
(out_channel, in_channel) pair that has at least one unmasked entry. The
executor loops over that list only, so the work is proportional to the
number of surviving kernels. Activations use a channel-major, batch-minor
layout ``[C, H, W, B]`` so the innermost loop runs over the batch.
"""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass
from typing import Sequence

import numba
import numpy as np

from .checkpoint import Checkpoint
from .errors import ShapeError
from .nn import NetworkSpec, network_forward


@numba.njit(cache=True, fastmath=True)
def _kernel_conv(xp, out_idx, in_idx, kernels, n_out, ho, wo, stride):
    # xp: [N, Hp, Wp, B] padded input; returns [M, Ho, Wo, B]
    nb = xp.shape[3]
    k = kernels.shape[1]
    out = np.zeros((n_out, ho, wo, nb), dtype=xp.dtype)
    for p in range(out_idx.shape[0]):
        m = out_idx[p]
        n = in_idx[p]
        for i in range(ho):
            for j in range(wo):
                acc = out[m, i, j]
                for ki in range(k):
                    row = i * stride + ki
                    for kj in range(k):
                        wv = kernels[p, ki, kj]
                        src = xp[n, row, j * stride + kj]
                        for b in range(nb):
                            acc[b] += wv * src[b]
    return out


@dataclass(frozen=True)
class ConvKernels:
    out_idx: np.ndarray  # [P]
    in_idx: np.ndarray  # [P]
    kernels: np.ndarray  # [P, k, k]
    in_channels: int
    out_channels: int
    kernel_size: int
    stride: int
    padding: int
    feature_map_size: int  # output extent D (square maps)

    @property
    def num_kernels(self) -> int:
        return len(self.out_idx)

    def dense(self) -> np.ndarray:
        w = np.zeros((self.out_channels, self.in_channels, self.kernel_size, self.kernel_size), dtype=self.kernels.dtype)
        w[self.out_idx, self.in_idx] = self.kernels
        return w


@dataclass(frozen=True)
class CompactModel:
    spec: NetworkSpec
    layers: tuple  # ConvKernels or dense linear weight, one per prunable layer

    @property
    def conv_layers(self) -> list[ConvKernels]:
        return [layer for layer in self.layers if isinstance(layer, ConvKernels)]


def _square_extents(spec: NetworkSpec) -> list[int]:
    """Output extent of every conv layer, by walking the layer list."""
    _, h, w = spec.input_shape
    out = []
    for layer in spec.layers:
        if layer.kind == "conv2d":
            h = (h + 2 * layer.padding - layer.kernel_size) // layer.stride + 1
            w = (w + 2 * layer.padding - layer.kernel_size) // layer.stride + 1
            if h != w:
                raise ShapeError(f"non-square feature map {h}x{w}")
            out.append(h)
        elif layer.kind == "maxpool2x2":
            h, w = h // 2, w // 2
    return out


def compact_from_weights(
    spec: NetworkSpec,
    weights: Sequence[np.ndarray],
    masks: Sequence[np.ndarray] | None = None,
    skip_zero_kernels: bool = True,
) -> CompactModel:
    """Drop every kernel whose mask (or, without masks, whose values) is all zero.

    With ``skip_zero_kernels=False`` every kernel is kept, which gives the
    dense computation graph run by the same executor.
    """
    extents = iter(_square_extents(spec))
    layers = []
    for j, (layer, w) in enumerate(zip(spec.prunable_layers, weights)):
        if layer.kind != "conv2d":
            layers.append(np.ascontiguousarray(w))
            continue
        live = (masks[j] if masks is not None else w != 0).reshape(w.shape[0], w.shape[1], -1).any(axis=2)
        if not skip_zero_kernels:
            live = np.ones_like(live)
        out_idx, in_idx = np.nonzero(live)
        layers.append(
            ConvKernels(
                out_idx=out_idx.astype(np.int64),
                in_idx=in_idx.astype(np.int64),
                kernels=np.ascontiguousarray(w[out_idx, in_idx]),
                in_channels=layer.in_channels,
                out_channels=layer.out_channels,
                kernel_size=layer.kernel_size,
                stride=layer.stride,
                padding=layer.padding,
                feature_map_size=next(extents),
            )
        )
    return CompactModel(spec, tuple(layers))


def compact_model(ckpt: Checkpoint, skip_zero_kernels: bool = True, dtype=None) -> CompactModel:
    """Compact a checkpoint's binarized effective weights."""
    eff = ckpt.binarized()
    if dtype is not None:
        eff = [w.astype(dtype) for w in eff]
    return compact_from_weights(ckpt.spec, eff, ckpt.masks, skip_zero_kernels)


def densify(model: CompactModel) -> list[np.ndarray]:
    return [layer.dense() if isinstance(layer, ConvKernels) else layer.copy() for layer in model.layers]


def sparse_forward(model: CompactModel, x: np.ndarray) -> np.ndarray:
    """Logits [B, classes] computed over surviving kernels only."""
    spec = model.spec
    if x.ndim != 4 or tuple(x.shape[1:]) != spec.input_shape:
        raise ShapeError(f"input shape {x.shape} does not match [B, {spec.input_shape}]")
    a = np.ascontiguousarray(x.transpose(1, 2, 3, 0))
    params = iter(model.layers)
    for layer in spec.layers:
        if layer.kind == "conv2d":
            ck: ConvKernels = next(params)
            pad = ck.padding
            xp = np.pad(a, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else a
            d = ck.feature_map_size
            a = _kernel_conv(xp, ck.out_idx, ck.in_idx, ck.kernels.astype(a.dtype, copy=False), ck.out_channels, d, d, ck.stride)
        elif layer.kind == "linear":
            a = next(params).astype(a.dtype, copy=False) @ a
        elif layer.kind == "relu":
            a = np.maximum(a, 0)
        elif layer.kind == "maxpool2x2":
            c, h, w, b = a.shape
            a = a.reshape(c, h // 2, 2, w // 2, 2, b).max(axis=(2, 4))
        else:
            a = a.reshape(-1, a.shape[-1])
    return np.ascontiguousarray(a.T)


def dense_forward(spec: NetworkSpec, weights: Sequence[np.ndarray], x: np.ndarray) -> np.ndarray:
    """Reference path: im2col + GEMM over the full effective weights."""
    return network_forward(spec, weights, x)


def mac_count(model, include_linear: bool = False) -> int:
    """Multiply-accumulates per sample over conv layers (optionally linear too).

    A ``NetworkSpec`` counts every kernel; a ``CompactModel`` counts only
    the stored ones.
    """
    if isinstance(model, NetworkSpec):
        spec, kernels = model, None
    else:
        spec, kernels = model.spec, iter(model.layers)
    extents = iter(_square_extents(spec))
    total = 0
    for layer in spec.prunable_layers:
        stored = next(kernels) if kernels is not None else None
        if layer.kind == "conv2d":
            d = next(extents)
            count = layer.in_channels * layer.out_channels if stored is None else stored.num_kernels
            total += count * d * d * layer.kernel_size**2
        elif include_linear:
            total += layer.in_features * layer.out_features
    return total


def _median_ns(fn, repeats: int) -> float:
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter_ns()
        fn()
        times.append(time.perf_counter_ns() - t0)
    return float(statistics.median(times))


def bench_inference(
    dense: CompactModel,
    sparse: CompactModel,
    x: np.ndarray,
    repeats: int = 20,
    warmup: int = 2,
    reference: bool = True,
) -> dict:
    """Median wall time of the full-kernel model versus the kernel-skipping one.

    Both run on the same executor, so the ratio isolates the effect of the
    removed kernels. With ``reference`` the im2col/GEMM path is timed too.
    """
    if repeats < 10:
        raise ValueError("bench needs repeats >= 10")
    for _ in range(warmup):
        sparse_forward(dense, x)
        sparse_forward(sparse, x)
    # interleave the two models so clock/cache drift hits both equally
    dense_t, sparse_t = [], []
    for _ in range(repeats):
        dense_t.append(_median_ns(lambda: sparse_forward(dense, x), 1))
        sparse_t.append(_median_ns(lambda: sparse_forward(sparse, x), 1))
    dense_ns, sparse_ns = float(statistics.median(dense_t)), float(statistics.median(sparse_t))
    macs_dense, macs_sparse = mac_count(dense), mac_count(sparse)
    result = {
        "dense_ns": dense_ns,
        "sparse_ns": sparse_ns,
        "speedup": dense_ns / sparse_ns,
        "theoretical_ar": macs_dense / macs_sparse,
        "macs_dense": macs_dense,
        "macs_sparse": macs_sparse,
    }
    if reference:
        weights = [w.astype(x.dtype, copy=False) for w in densify(dense)]
        dense_forward(dense.spec, weights, x)
        gemm_ns = _median_ns(lambda: dense_forward(dense.spec, weights, x), repeats)
        result["gemm_ns"] = gemm_ns
        result["speedup_vs_gemm"] = gemm_ns / sparse_ns
    return result

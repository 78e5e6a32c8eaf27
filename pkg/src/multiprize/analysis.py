"""Post-hoc checkpoint analysis: zero-kernel census, acceleration rate, histograms."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from .checkpoint import Checkpoint
from .errors import ShapeError
from .nn import NetworkSpec
from .supermask import prune_ratio

log = logging.getLogger(__name__)


def count_zero_kernels(masks: Sequence[np.ndarray]) -> dict[int, tuple[int, int]]:
    """``{index: (zero_kernels, total_kernels)}`` for every 4-d (conv) mask.

    A kernel is zero when all ``k * k`` entries at a fixed (out, in) channel
    pair are masked. Non-conv tensors are skipped.
    """
    out = {}
    for j, m in enumerate(masks):
        m = np.asarray(m)
        if m.ndim != 4:
            log.info("skipping non-conv tensor %d with shape %s", j, m.shape)
            continue
        live = m.reshape(m.shape[0], m.shape[1], -1).any(axis=2)
        out[j] = (int(live.size - np.count_nonzero(live)), int(live.size))
    return out


def conv_macs(spec: NetworkSpec, masks: Sequence[np.ndarray]) -> tuple[int, int]:
    """Dense and kernel-sparse MACs per sample: sum N*M*D*D*k*k and P*D*D*k*k."""
    census = count_zero_kernels(masks)
    dense = sparse = 0
    for geo in spec.conv_geometry():
        j = geo["layer_id"]
        zero, total = census[j]
        per_kernel = geo["feature_map_size"] ** 2 * geo["kernel_size"] ** 2
        if total != geo["in_channels"] * geo["out_channels"]:
            raise ShapeError(f"layer {j}: mask has {total} kernels, spec says N*M = {geo['in_channels'] * geo['out_channels']}")
        if zero == total:
            raise ValueError(f"degenerate layer {j}: every kernel is zero")
        dense += total * per_kernel
        sparse += (total - zero) * per_kernel
    return dense, sparse


def acceleration_rate_exact(spec: NetworkSpec, masks: Sequence[np.ndarray]) -> Fraction:
    dense, sparse = conv_macs(spec, masks)
    if sparse == 0:
        raise ValueError("degenerate network: no conv kernels survive")
    return Fraction(dense, sparse)


def acceleration_rate(spec: NetworkSpec, masks: Sequence[np.ndarray]) -> float:
    """Ratio of dense to kernel-sparse conv MACs (>= 1, == 1 with no zero kernels)."""
    dense, sparse = conv_macs(spec, masks)
    if sparse == 0:
        raise ValueError("degenerate network: no conv kernels survive")
    return dense / sparse


@dataclass(frozen=True)
class Histogram:
    bin_edges: np.ndarray
    counts: np.ndarray

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["bin_left_edge", "count"])
            for edge, count in zip(self.bin_edges[:-1], self.counts):
                w.writerow([repr(float(edge)), int(count)])


def score_histogram(scores: np.ndarray, bins: int = 50) -> Histogram:
    """Equal-width histogram over ``[min, max]`` of one layer's scores."""
    if bins < 1:
        raise ValueError("bins must be >= 1")
    flat = np.asarray(scores, dtype=np.float64).ravel()
    if flat.size == 0:
        raise ValueError("empty layer")
    counts, edges = np.histogram(flat, bins=bins, range=(flat.min(), flat.max()))
    return Histogram(edges, counts)


@dataclass
class SparsityReport:
    per_layer: list[dict]
    zero_kernel_fraction: float
    acceleration_rate: float
    actual_prune_ratio: float
    linear_macs: int = 0
    conv_macs_dense: int = 0
    conv_macs_sparse: int = 0
    layer_prune_ratios: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)


def analyze(ckpt: Checkpoint) -> SparsityReport:
    spec, masks = ckpt.spec, ckpt.masks
    census = count_zero_kernels(masks)
    per_layer = []
    for geo in spec.conv_geometry():
        zero, total = census[geo["layer_id"]]
        per_layer.append({**geo, "total_kernels": total, "zero_kernels": zero})
    zeros = sum(r["zero_kernels"] for r in per_layer)
    totals = sum(r["total_kernels"] for r in per_layer)
    dense, sparse = conv_macs(spec, masks)
    linear = sum(layer.in_features * layer.out_features for layer in spec.prunable_layers if layer.kind == "linear")
    return SparsityReport(
        per_layer=per_layer,
        zero_kernel_fraction=zeros / totals if totals else 0.0,
        acceleration_rate=dense / sparse,
        actual_prune_ratio=prune_ratio(masks),
        linear_macs=linear,
        conv_macs_dense=dense,
        conv_macs_sparse=sparse,
        layer_prune_ratios=[1 - float(np.count_nonzero(m)) / m.size for m in masks],
    )

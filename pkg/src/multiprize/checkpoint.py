"""Checkpoint container and the ``MPT1`` binary file format.

Layout (all little-endian)::

    b"MPT1"  u32 version
    u32 len  <len bytes of UTF-8 JSON network spec>
    per prunable layer, in network order:
        u32 rank, u32 dims[rank]
        f32 W[n], f32 s[n]
        u8 mask[ceil(n / 8)]        (LSB-first bit packing)
        f32 alpha, f32 scale
    u64 seed, u8 phase               (0 = mpt, 1 = finetune)
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError
from .nn import NetworkSpec
from .supermask import binarize_layer

MAGIC = b"MPT1"
VERSION = 1
PHASES = ("mpt", "finetune")
SCALE_RTOL = 1e-6


@dataclass
class Checkpoint:
    spec: NetworkSpec
    weights: list[np.ndarray]
    scores: list[np.ndarray]
    masks: list[np.ndarray]
    alpha: float
    seed: int = 0
    phase: str = "mpt"
    scales: list[float] = field(default_factory=list)

    def __post_init__(self):
        if self.phase not in PHASES:
            raise FormatError(f"unknown phase {self.phase!r}")
        self.masks = [np.asarray(m, dtype=bool) for m in self.masks]
        shapes = self.spec.weight_shapes()
        for name, tensors in (("weights", self.weights), ("scores", self.scores), ("masks", self.masks)):
            if [tuple(t.shape) for t in tensors] != shapes:
                raise FormatError(f"{name} shapes do not match the network spec")
        if not self.scales:
            self.scales = recompute_scales(self.weights, self.masks)
        # the file stores f32; keep in-memory scalars on the same grid
        self.scales = [float(np.float32(x)) for x in self.scales]
        self.alpha = float(np.float32(self.alpha))

    def binarized(self) -> list[np.ndarray]:
        """Effective weights ``scale * sign(W) * M`` with scales recomputed from ``W``."""
        out = []
        for j, (W, M) in enumerate(zip(self.weights, self.masks)):
            _, W_b = binarize_layer(W, M, j)
            out.append(W_b * M)
        return out


def recompute_scales(weights, masks) -> list[float]:
    return [binarize_layer(W, M, j)[0] if M.any() else 0.0 for j, (W, M) in enumerate(zip(weights, masks))]


def pack_mask(mask: np.ndarray) -> bytes:
    return np.packbits(np.asarray(mask, dtype=bool).ravel(), bitorder="little").tobytes()


def unpack_mask(blob: bytes, shape) -> np.ndarray:
    n = int(np.prod(shape))
    bits = np.unpackbits(np.frombuffer(blob, dtype=np.uint8), bitorder="little", count=n)
    return bits.astype(bool).reshape(shape)


def to_bytes(ckpt: Checkpoint) -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack("<I", VERSION)
    spec_text = json.dumps(ckpt.spec.to_dict(), sort_keys=True).encode()
    out += struct.pack("<I", len(spec_text)) + spec_text
    for W, s, M, scale in zip(ckpt.weights, ckpt.scores, ckpt.masks, ckpt.scales):
        out += struct.pack(f"<I{W.ndim}I", W.ndim, *W.shape)
        out += np.asarray(W, dtype="<f4").tobytes()
        out += np.asarray(s, dtype="<f4").tobytes()
        out += pack_mask(M)
        out += struct.pack("<ff", ckpt.alpha, scale)
    out += struct.pack("<QB", ckpt.seed & 0xFFFF_FFFF_FFFF_FFFF, PHASES.index(ckpt.phase))
    return bytes(out)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob, self.pos = blob, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise FormatError(f"truncated checkpoint: need {n} bytes at offset {self.pos}, file has {len(self.blob)}")
        chunk = self.blob[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def from_bytes(blob: bytes) -> Checkpoint:
    r = _Reader(blob)
    if r.take(4) != MAGIC:
        raise FormatError("bad magic: not an MPT1 checkpoint")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise FormatError(f"version mismatch: file has {version}, reader supports {VERSION}")
    (spec_len,) = r.unpack("<I")
    try:
        spec = NetworkSpec.from_dict(json.loads(r.take(spec_len).decode()))
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"unreadable network spec: {exc}") from exc
    weights, scores, masks, alphas, scales = [], [], [], [], []
    for j, expected in enumerate(spec.weight_shapes()):
        (rank,) = r.unpack("<I")
        shape = r.unpack(f"<{rank}I")
        if shape != expected:
            raise FormatError(f"layer {j}: stored shape {shape} != spec shape {expected}")
        n = math.prod(shape)
        weights.append(np.frombuffer(r.take(4 * n), dtype="<f4").astype(np.float32).reshape(shape))
        scores.append(np.frombuffer(r.take(4 * n), dtype="<f4").astype(np.float32).reshape(shape))
        masks.append(unpack_mask(r.take((n + 7) // 8), shape))
        alpha, scale = r.unpack("<ff")
        alphas.append(alpha)
        scales.append(scale)
    seed, phase = r.unpack("<QB")
    if r.pos != len(blob):
        raise FormatError(f"{len(blob) - r.pos} trailing bytes after checkpoint")
    if phase >= len(PHASES):
        raise FormatError(f"unknown phase code {phase}")
    for j, (stored, fresh) in enumerate(zip(scales, recompute_scales(weights, masks))):
        if abs(stored - fresh) > SCALE_RTOL * max(abs(fresh), 1e-30):
            raise FormatError(f"layer {j}: stored scale {stored} != recomputed {fresh}")
    if len(set(alphas)) > 1:
        raise FormatError(f"inconsistent alpha across layers: {sorted(set(alphas))}")
    return Checkpoint(
        spec=spec,
        weights=weights,
        scores=scores,
        masks=masks,
        alpha=alphas[0] if alphas else 1.0,
        seed=seed,
        phase=PHASES[phase],
        scales=scales,
    )


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    with open(path, "wb") as fh:
        fh.write(to_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())

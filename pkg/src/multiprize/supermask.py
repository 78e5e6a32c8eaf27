"""Scores, power-propagation, mask selection and weight binarization.

A prunable layer keeps a raw score tensor ``s``. The effective score is
``S = s * |s| ** (alpha - 1)``; masks are chosen from ``S`` either by a
top-k sort or by comparing against a threshold. Surviving weights are
binarized to ``scale * sign(W)`` where ``scale`` is the mean absolute value
of the kept latent weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import rng
from .errors import ConfigError, FullyPrunedError, ShapeError
from .nn import NetworkSpec, get_dtype


def _check_alpha(alpha: float) -> None:
    if not alpha >= 1:
        raise ConfigError(f"power-propagation exponent must be >= 1, got {alpha}")


def powerprop_apply(s: np.ndarray, alpha: float) -> np.ndarray:
    """Elementwise ``s * |s| ** (alpha - 1)``."""
    _check_alpha(alpha)
    s = np.asarray(s)
    return s * np.abs(s) ** (alpha - 1)


def powerprop_grad(s: np.ndarray, grad_S: np.ndarray, alpha: float) -> np.ndarray:
    """Chain ``dL/dS`` back to the raw score: ``grad_S * alpha * |s| ** (alpha - 1)``."""
    _check_alpha(alpha)
    s, grad_S = np.asarray(s), np.asarray(grad_S)
    if s.shape != grad_S.shape:
        raise ShapeError(f"score shape {s.shape} != gradient shape {grad_S.shape}")
    return grad_S * (alpha * np.abs(s) ** (alpha - 1))


@dataclass
class ScoreState:
    """Raw scores per prunable layer plus the power-propagation exponent."""

    s: list[np.ndarray]
    alpha: float
    bypass: bool = False

    def __post_init__(self):
        if not self.bypass:
            _check_alpha(self.alpha)

    @property
    def effective(self) -> list[np.ndarray]:
        if self.bypass:
            return self.s
        return [powerprop_apply(si, self.alpha) for si in self.s]

    def grad_raw(self, grad_S: Sequence[np.ndarray]) -> list[np.ndarray]:
        if self.bypass:
            return list(grad_S)
        return [powerprop_grad(si, gi, self.alpha) for si, gi in zip(self.s, grad_S)]


def init_scores(
    spec: NetworkSpec,
    alpha: float,
    seed: int,
    bypass: bool = False,
    bound: float | None = None,
) -> ScoreState:
    """Uniform scores on ``[-b, b]`` with ``b = sqrt(6 / fan_in)`` per layer.

    A fixed ``bound`` gives every layer the same range instead. Under global
    selection at high prune ratios the fan-in rule can leave a wide layer with
    no score above the global cutoff, which fully prunes it at step zero.
    """
    dtype = get_dtype()
    s = []
    for j, layer in enumerate(spec.prunable_layers):
        b = math.sqrt(6.0 / layer.fan_in) if bound is None else float(bound)
        s.append(rng.stream(seed, "scores", j).uniform(-b, b, size=layer.weight_shape).astype(dtype))
    return ScoreState(s=s, alpha=float(alpha), bypass=bypass)


def init_weights(spec: NetworkSpec, seed: int) -> list[np.ndarray]:
    """Latent random weights, Kaiming-normal ``N(0, 2 / fan_in)``; never trained by MPT."""
    dtype = get_dtype()
    return [
        (rng.stream(seed, "weights", j).standard_normal(layer.weight_shape) * math.sqrt(2.0 / layer.fan_in)).astype(dtype)
        for j, layer in enumerate(spec.prunable_layers)
    ]


# ---------------------------------------------------------------------------
# mask selection
# ---------------------------------------------------------------------------

SCOPES = ("global", "layerwise")


@dataclass(frozen=True)
class SelectionPolicy:
    method: str = "topk_sort"
    scope: str = "global"
    prune_ratio: float | None = 0.5
    theta: float | None = None

    def __post_init__(self):
        if self.method not in ("topk_sort", "threshold"):
            raise ConfigError(f"unknown selection method {self.method!r}")
        if self.scope not in SCOPES:
            raise ConfigError(f"unknown scope {self.scope!r}")
        if self.method == "topk_sort":
            if self.prune_ratio is None or self.theta is not None:
                raise ConfigError("topk_sort takes prune_ratio and no theta")
            _check_ratio(self.prune_ratio)
        elif self.theta is None:
            raise ConfigError("threshold selection needs theta")


def _check_ratio(p: float) -> None:
    if not 0 <= p < 1:
        raise ConfigError(f"prune ratio must lie in [0, 1), got {p}")


def num_pruned(p: float, n: int) -> int:
    # round first so 0.29 * 100 counts as 29, not 28
    return int(math.floor(round(p * n, 9)))


def _prune_lowest(flat: np.ndarray, k: int) -> np.ndarray:
    keep = np.ones(flat.size, dtype=bool)
    if k == 0:
        return keep
    cutoff = np.sort(flat)[k - 1]
    below = flat < cutoff
    keep[below] = False
    # among scores equal to the cutoff the lower index is pruned first
    keep[np.flatnonzero(flat == cutoff)[: k - int(np.count_nonzero(below))]] = False
    return keep


def select_mask_topk(scores: Sequence[np.ndarray], p: float, scope: str = "global") -> list[np.ndarray]:
    """Prune the ``floor(p * n)`` smallest effective scores (n per scope)."""
    _check_ratio(p)
    if scope == "layerwise":
        return [_prune_lowest(S.ravel(), num_pruned(p, S.size)).reshape(S.shape) for S in scores]
    if scope != "global":
        raise ConfigError(f"unknown scope {scope!r}")
    flat = np.concatenate([S.ravel() for S in scores])
    keep = _prune_lowest(flat, num_pruned(p, flat.size))
    masks, start = [], 0
    for S in scores:
        masks.append(keep[start : start + S.size].reshape(S.shape))
        start += S.size
    return masks


def select_mask_threshold(scores: Sequence[np.ndarray], theta) -> tuple[list[np.ndarray], float]:
    """Keep entries with ``S > theta``; returns masks and the achieved prune ratio.

    ``theta`` is a scalar or one value per layer.
    """
    masks = _threshold_masks(scores, theta)
    return masks, prune_ratio(masks)


def _threshold_masks(scores, theta) -> list[np.ndarray]:
    thetas = list(theta) if np.ndim(theta) else [theta] * len(scores)
    return [S > t for S, t in zip(scores, thetas)]


def calibrate_threshold(scores: Sequence[np.ndarray], p: float, scope: str = "global"):
    """Threshold whose strict comparison prunes ``floor(p * n)`` entries when scores are distinct.

    This sorts once; training then compares against the returned value only.
    """
    _check_ratio(p)

    def kth(flat):
        k = num_pruned(p, flat.size)
        return -math.inf if k == 0 else float(np.partition(flat, k - 1)[k - 1])

    if scope == "layerwise":
        return [kth(S.ravel()) for S in scores]
    return kth(np.concatenate([S.ravel() for S in scores]))


def prune_ratio(masks: Sequence[np.ndarray]) -> float:
    total = sum(m.size for m in masks)
    kept = sum(int(np.count_nonzero(m)) for m in masks)
    return (total - kept) / total if total else 0.0


def select(policy: SelectionPolicy, scores: Sequence[np.ndarray], theta=None) -> list[np.ndarray]:
    """Apply ``policy``; ``theta`` overrides ``policy.theta`` (e.g. after calibration)."""
    if policy.method == "topk_sort":
        return select_mask_topk(scores, policy.prune_ratio, policy.scope)
    return _threshold_masks(scores, policy.theta if theta is None else theta)


# ---------------------------------------------------------------------------
# binarization
# ---------------------------------------------------------------------------


def sign(w: np.ndarray) -> np.ndarray:
    """Sign with ``sign(0) = +1``."""
    return np.where(w >= 0, 1, -1).astype(w.dtype)


def binarize_layer(W: np.ndarray, M: np.ndarray, layer_id=None) -> tuple[float, np.ndarray]:
    """Per-layer scale (mean ``|W|`` over kept entries) and ``scale * sign(W)``."""
    W = np.asarray(W)
    M = np.asarray(M)
    if W.shape != M.shape:
        raise ShapeError(f"weight shape {W.shape} != mask shape {M.shape}")
    kept = int(np.count_nonzero(M))
    if kept == 0:
        raise FullyPrunedError(layer_id)
    scale = np.abs(W)[M.astype(bool)].sum() / kept
    return float(scale), scale.astype(W.dtype) * sign(W)


@dataclass
class MaskedBinaryLayer:
    W: np.ndarray
    M: np.ndarray
    scale: float = field(init=False)
    W_b: np.ndarray = field(init=False, repr=False)
    layer_id: int | None = None

    def __post_init__(self):
        self.scale, self.W_b = binarize_layer(self.W, self.M, self.layer_id)


def effective_weights(layer: MaskedBinaryLayer) -> np.ndarray:
    """``W_b * M``: the only weight tensor the forward pass sees."""
    return layer.W_b * layer.M


def score_gradient(grad_eff: np.ndarray, W_b: np.ndarray) -> np.ndarray:
    """Straight-through score gradient: the mask acts as identity, so ``grad_eff * W_b``."""
    grad_eff, W_b = np.asarray(grad_eff), np.asarray(W_b)
    if grad_eff.shape != W_b.shape:
        raise ShapeError(f"gradient shape {grad_eff.shape} != weight shape {W_b.shape}")
    return grad_eff * W_b


def masked_binary_weights(weights: Sequence[np.ndarray], masks: Sequence[np.ndarray]) -> list[MaskedBinaryLayer]:
    return [MaskedBinaryLayer(W, M, layer_id=j) for j, (W, M) in enumerate(zip(weights, masks))]

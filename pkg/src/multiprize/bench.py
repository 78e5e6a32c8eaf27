"""Timing of one score selection + update step: sorting versus thresholding."""

from __future__ import annotations

import statistics
import time

import numpy as np

from . import rng
from .supermask import calibrate_threshold, powerprop_apply, select_mask_threshold, select_mask_topk


def _step_sort(s, grad, alpha, p, lr):
    masks = select_mask_topk([powerprop_apply(s, alpha)], p)
    s -= lr * grad
    return masks


def _step_threshold(s, grad, alpha, theta, lr):
    masks, _ = select_mask_threshold([powerprop_apply(s, alpha)], theta)
    s -= lr * grad
    return masks


def bench_selection(size: int, alpha: float, iters: int = 20, p: float = 0.5, seed: int = 0, lr: float = 0.0) -> dict:
    """Median ns of a sort-based and a threshold-based step on ``size`` scores.

    The threshold is calibrated once to the ``p``-quantile of the initial
    effective scores, so on distinct scores both steps produce the same mask
    (``masks_equal``). ``lr = 0`` keeps the scores fixed across iterations.
    """
    gen = rng.stream(seed, "scores", size)
    s = gen.uniform(-1, 1, size).astype(np.float32)
    grad = gen.standard_normal(size).astype(np.float32)
    theta = calibrate_threshold([powerprop_apply(s, alpha)], p)
    equal = all(
        np.array_equal(a, b)
        for a, b in zip(_step_sort(s.copy(), grad, alpha, p, 0.0), _step_threshold(s.copy(), grad, alpha, theta, 0.0))
    )
    sort_ns, thr_ns = [], []
    for _ in range(iters):
        # alternate so drift in machine load hits both methods alike
        t0 = time.perf_counter_ns()
        _step_sort(s, grad, alpha, p, lr)
        sort_ns.append(time.perf_counter_ns() - t0)
        t0 = time.perf_counter_ns()
        _step_threshold(s, grad, alpha, theta, lr)
        thr_ns.append(time.perf_counter_ns() - t0)
    sort_med, thr_med = statistics.median(sort_ns), statistics.median(thr_ns)
    return {
        "size": size,
        "alpha": alpha,
        "sort_ns": float(sort_med),
        "threshold_ns": float(thr_med),
        "ratio": sort_med / thr_med,
        "masks_equal": equal,
    }

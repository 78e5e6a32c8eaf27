"""Score training (weights frozen) and mask-frozen weight finetuning."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from . import rng
from .checkpoint import Checkpoint
from .data import Dataset, batches
from .errors import ConfigError, FullyPrunedError, TrainingAborted
from .nn import NetworkSpec, conv_family, network_backward, network_forward, softmax_cross_entropy
from .supermask import (
    ScoreState,
    SelectionPolicy,
    binarize_layer,
    calibrate_threshold,
    init_scores,
    init_weights,
    masked_binary_weights,
    num_pruned,
    prune_ratio,
    score_gradient,
    select,
)

log = logging.getLogger(__name__)

OPTIMIZERS = ("sgd", "adam")
SCHEDULES = ("multistep", "cosine", "constant")
FINETUNE_SCOPES = ("first_layer", "last_layer", "full_model")
MAX_FINETUNE_EPOCHS = 200
METRIC_FIELDS = ("epoch", "phase", "train_loss", "test_accuracy", "actual_prune_ratio", "epoch_time_s")


@dataclass(frozen=True)
class TrainConfig:
    arch: str = "conv2"
    alpha: float = 1.0
    selection: SelectionPolicy = field(default_factory=SelectionPolicy)
    epochs: int = 5
    batch_size: int = 64
    optimizer: str = "sgd"
    lr: float = 0.1
    lr_schedule: str = "cosine"
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0
    # target prune ratio for one-time threshold calibration (threshold method only)
    calibrate_theta: float | None = None
    bypass_powerprop: bool = False
    # shared score init bound for all layers; None uses sqrt(6 / fan_in)
    score_bound: float | None = None
    # False writes epoch_time_s = 0 so metric files are byte-reproducible
    timing: bool = True
    eval_batch_size: int = 500

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}")
        if self.lr_schedule not in SCHEDULES:
            raise ConfigError(f"lr_schedule must be one of {SCHEDULES}")
        if not self.bypass_powerprop and not self.alpha >= 1:
            raise ConfigError("alpha must be >= 1")
        if self.calibrate_theta is not None and self.selection.method != "threshold":
            raise ConfigError("calibrate_theta applies to threshold selection only")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["selection"] = asdict(self.selection)
        return d


def finetune_config(**overrides) -> TrainConfig:
    """Best finetune cell of the grid search: SGD, cosine, lr 1e-3, batch 256."""
    base = dict(optimizer="sgd", lr=0.001, lr_schedule="cosine", batch_size=256, momentum=0.9, weight_decay=0.0, epochs=10)
    base.update(overrides)
    return TrainConfig(**base)


@dataclass(frozen=True)
class EpochMetrics:
    epoch: int
    phase: str
    train_loss: float
    test_accuracy: float
    actual_prune_ratio: float
    epoch_time_s: float

    def row(self) -> list[str]:
        return [
            str(self.epoch),
            self.phase,
            f"{self.train_loss:.8f}",
            f"{self.test_accuracy:.6f}",
            f"{self.actual_prune_ratio:.8f}",
            f"{self.epoch_time_s:.6f}",
        ]


def write_metrics(path, metrics: Iterable[EpochMetrics]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        for m in metrics:
            w.writerow(m.row())


# ---------------------------------------------------------------------------
# optimizers and schedules
# ---------------------------------------------------------------------------


def optimizer_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    state: dict,
    *,
    method: str = "sgd",
    lr: float,
    momentum: float = 0.0,
    weight_decay: float = 0.0,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> dict:
    """Update ``params`` in place; returns the (mutated) optimizer state.

    SGD: ``v = mu * v + g; p -= lr * v``. Adam uses bias-corrected moments.
    Weight decay is added to the gradient before either rule.
    """
    if method not in OPTIMIZERS:
        raise ConfigError(f"unknown optimizer {method!r}")
    if len(params) != len(grads):
        raise ConfigError("params and grads differ in length")
    state.setdefault("t", 0)
    state["t"] += 1
    if method == "sgd":
        vel = state.setdefault("v", [None] * len(params))
        for i, (p, g) in enumerate(zip(params, grads)):
            if weight_decay:
                g = g + weight_decay * p
            if momentum:
                vel[i] = g.copy() if vel[i] is None else momentum * vel[i] + g
                g = vel[i]
            p -= lr * g
        return state
    b1, b2 = betas
    m1 = state.setdefault("m", [np.zeros_like(p) for p in params])
    m2 = state.setdefault("u", [np.zeros_like(p) for p in params])
    t = state["t"]
    for i, (p, g) in enumerate(zip(params, grads)):
        if weight_decay:
            g = g + weight_decay * p
        m1[i] = b1 * m1[i] + (1 - b1) * g
        m2[i] = b2 * m2[i] + (1 - b2) * g * g
        m_hat = m1[i] / (1 - b1**t)
        v_hat = m2[i] / (1 - b2**t)
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return state


def lr_at(schedule: str, base_lr: float, epoch: int, total_epochs: int) -> float:
    if not 0 <= epoch <= total_epochs:
        raise ConfigError(f"epoch {epoch} outside [0, {total_epochs}]")
    if schedule == "constant":
        return base_lr
    if schedule == "cosine":
        return base_lr * 0.5 * (1 + math.cos(math.pi * epoch / total_epochs))
    if schedule == "multistep":
        passed = sum(epoch >= m for m in (0.5 * total_epochs, 0.75 * total_epochs))
        return base_lr * 0.1**passed
    raise ConfigError(f"unknown schedule {schedule!r}")


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def predict(spec: NetworkSpec, weights: Sequence[np.ndarray], images: np.ndarray, batch_size: int = 500) -> np.ndarray:
    out = [
        network_forward(spec, weights, images[i : i + batch_size]).argmax(axis=1)
        for i in range(0, len(images), batch_size)
    ]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def accuracy(spec: NetworkSpec, weights: Sequence[np.ndarray], data: Dataset, batch_size: int = 500) -> float:
    if len(data) == 0:
        return 0.0
    return float(np.mean(predict(spec, weights, data.images, batch_size) == data.labels))


def evaluate(ckpt: Checkpoint, data: Dataset, batch_size: int = 500) -> float:
    """Test accuracy of a checkpoint's binarized, masked network."""
    return accuracy(ckpt.spec, ckpt.binarized(), data, batch_size)


def spec_for(config: TrainConfig, data: Dataset) -> NetworkSpec:
    return conv_family(config.arch, data.input_shape, data.num_classes)


def _binarize_all(weights, masks):
    try:
        return masked_binary_weights(weights, masks)
    except FullyPrunedError as exc:
        raise TrainingAborted(f"layer {exc.layer_id} fully pruned") from exc


def _check_loss(loss: float, epoch: int) -> None:
    if not math.isfinite(loss):
        raise TrainingAborted(f"non-finite loss {loss} in epoch {epoch}")


# ---------------------------------------------------------------------------
# MPT score training
# ---------------------------------------------------------------------------


def train_mpt(
    config: TrainConfig,
    train: Dataset,
    test: Dataset | None = None,
    spec: NetworkSpec | None = None,
    on_epoch=None,
) -> tuple[Checkpoint, list[EpochMetrics]]:
    """Train scores with the latent weights frozen.

    Every iteration re-derives the mask from the current effective scores,
    binarizes the kept weights, and steps the raw scores through the
    straight-through and power-propagation chain rules.
    """
    if len(train) == 0:
        raise ConfigError("training set is empty")
    spec = spec or spec_for(config, train)
    test = test if test is not None else train
    weights = init_weights(spec, config.seed)
    state: ScoreState = init_scores(spec, config.alpha, config.seed, bypass=config.bypass_powerprop, bound=config.score_bound)
    policy = config.selection
    theta = None
    if config.calibrate_theta is not None:
        theta = calibrate_threshold(state.effective, config.calibrate_theta, policy.scope)
        log.info("calibrated threshold %s for prune ratio %s", theta, config.calibrate_theta)
    opt_state: dict = {}
    metrics = []
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        lr = lr_at(config.lr_schedule, config.lr, epoch, config.epochs)
        loss_sum = 0.0
        for idx in batches(len(train), config.batch_size, config.seed, epoch):
            masks = select(policy, state.effective, theta)
            layers = _binarize_all(weights, masks)
            eff = [layer.W_b * layer.M for layer in layers]
            logits, tape = network_forward(spec, eff, train.images[idx], keep_tape=True)
            loss, g = softmax_cross_entropy(logits, train.labels[idx])
            _check_loss(loss, epoch)
            loss_sum += loss * len(idx)
            grad_eff = network_backward(spec, eff, tape, g)
            grad_S = [score_gradient(ge, layer.W_b) for ge, layer in zip(grad_eff, layers)]
            optimizer_step(
                state.s,
                state.grad_raw(grad_S),
                opt_state,
                method=config.optimizer,
                lr=lr,
                momentum=config.momentum,
                weight_decay=config.weight_decay,
            )
        masks = select(policy, state.effective, theta)
        layers = _binarize_all(weights, masks)
        acc = accuracy(spec, [layer.W_b * layer.M for layer in layers], test, config.eval_batch_size)
        m = EpochMetrics(
            epoch=epoch + 1,
            phase="mpt",
            train_loss=loss_sum / len(train),
            test_accuracy=acc,
            actual_prune_ratio=prune_ratio(masks),
            epoch_time_s=time.perf_counter() - t0 if config.timing else 0.0,
        )
        log.info("mpt epoch %d loss %.4f acc %.4f pruned %.4f", m.epoch, m.train_loss, acc, m.actual_prune_ratio)
        metrics.append(m)
        if on_epoch is not None:
            on_epoch(m)
    ckpt = Checkpoint(
        spec=spec,
        weights=weights,
        scores=[s.copy() for s in state.s],
        masks=masks,
        alpha=1.0 if config.bypass_powerprop else config.alpha,
        seed=config.seed,
        phase="mpt",
        scales=[layer.scale for layer in layers],
    )
    return ckpt, metrics


# ---------------------------------------------------------------------------
# finetuning
# ---------------------------------------------------------------------------


def finetune_layers(spec: NetworkSpec, scope: str) -> list[int]:
    n = len(spec.prunable_indices)
    if scope == "first_layer":
        picked = [0]
    elif scope == "last_layer":
        picked = [n - 1]
    elif scope == "full_model":
        picked = list(range(n))
    else:
        raise ConfigError(f"finetune scope must be one of {FINETUNE_SCOPES}")
    if not picked or n == 0:
        raise ConfigError("finetune scope selects no weight tensors")
    return picked


def finetune(
    ckpt: Checkpoint,
    scope: str,
    config: TrainConfig,
    train: Dataset,
    test: Dataset | None = None,
) -> tuple[Checkpoint, list[EpochMetrics]]:
    """Train latent weights in ``scope`` with masks and scores frozen.

    The sign is passed straight through (``grad_W = grad_eff * M``); the
    per-layer scale is recomputed from the live weights on every forward.
    """
    if config.epochs > MAX_FINETUNE_EPOCHS:
        raise ConfigError(f"finetune epochs capped at {MAX_FINETUNE_EPOCHS}")
    if len(train) == 0:
        raise ConfigError("training set is empty")
    spec = ckpt.spec
    test = test if test is not None else train
    in_scope = finetune_layers(spec, scope)
    need = [j in in_scope for j in range(len(spec.prunable_indices))]
    weights = [w.copy() for w in ckpt.weights]
    masks = ckpt.masks
    trainable = [weights[j] for j in in_scope]
    opt_state: dict = {}
    metrics = []
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        lr = lr_at(config.lr_schedule, config.lr, epoch, config.epochs)
        loss_sum = 0.0
        for idx in batches(len(train), config.batch_size, config.seed, epoch):
            layers = _binarize_all(weights, masks)
            eff = [layer.W_b * layer.M for layer in layers]
            logits, tape = network_forward(spec, eff, train.images[idx], keep_tape=True)
            loss, g = softmax_cross_entropy(logits, train.labels[idx])
            _check_loss(loss, epoch)
            loss_sum += loss * len(idx)
            grad_eff = network_backward(spec, eff, tape, g, need=need)
            grads = [grad_eff[j] * masks[j] for j in in_scope]
            optimizer_step(
                trainable,
                grads,
                opt_state,
                method=config.optimizer,
                lr=lr,
                momentum=config.momentum,
                weight_decay=config.weight_decay,
            )
        layers = _binarize_all(weights, masks)
        acc = accuracy(spec, [layer.W_b * layer.M for layer in layers], test, config.eval_batch_size)
        m = EpochMetrics(
            epoch=epoch + 1,
            phase="finetune",
            train_loss=loss_sum / len(train),
            test_accuracy=acc,
            actual_prune_ratio=prune_ratio(masks),
            epoch_time_s=time.perf_counter() - t0 if config.timing else 0.0,
        )
        log.info("finetune epoch %d loss %.4f acc %.4f", m.epoch, m.train_loss, acc)
        metrics.append(m)
    out = replace(
        ckpt,
        weights=weights,
        scores=[s.copy() for s in ckpt.scores],
        masks=[m.copy() for m in masks],
        phase="finetune",
        scales=[layer.scale for layer in layers],
    )
    return out, metrics


# ---------------------------------------------------------------------------
# baselines
# ---------------------------------------------------------------------------


def random_mask(spec: NetworkSpec, p: float, seed: int) -> list[np.ndarray]:
    """Uniformly random global mask pruning exactly ``floor(p * n)`` weights."""
    shapes = spec.weight_shapes()
    total = sum(math.prod(s) for s in shapes)
    keep = np.ones(total, dtype=bool)
    keep[rng.stream(seed, "random_mask").permutation(total)[: num_pruned(p, total)]] = False
    out, start = [], 0
    for s in shapes:
        n = math.prod(s)
        out.append(keep[start : start + n].reshape(s))
        start += n
    return out


def random_mask_baseline(spec: NetworkSpec, p: float, seed: int, test: Dataset) -> float:
    """Accuracy of the binarized random weights under a random mask of equal sparsity."""
    weights = init_weights(spec, seed)
    masks = random_mask(spec, p, seed)
    eff = []
    for j, (W, M) in enumerate(zip(weights, masks)):
        _, W_b = binarize_layer(W, M, j)
        eff.append(W_b * M)
    return accuracy(spec, eff, test)

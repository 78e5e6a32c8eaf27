import numpy as np
import pytest

from multiprize import nn
from multiprize.checkpoint import Checkpoint
from multiprize.supermask import select_mask_topk


@pytest.fixture(autouse=True)
def _reset_precision():
    nn.set_precision("float32")
    yield
    nn.set_precision("float32")


def tiny_spec(classes=3, shape=(3, 8, 8), widths=(4, 6), head=16):
    return nn.conv_family("tiny", shape, classes, widths=widths, head_width=head)


def random_checkpoint(gen, spec, p, dtype=np.float32, alpha=None, zero_kernel_frac=0.0):
    """Random weights/scores, top-k mask at ratio p; optionally knock out whole kernels."""
    shapes = spec.weight_shapes()
    weights = [gen.standard_normal(s).astype(dtype) for s in shapes]
    scores = [gen.uniform(-1, 1, s).astype(dtype) for s in shapes]
    masks = select_mask_topk(scores, p, "layerwise")
    if zero_kernel_frac:
        for m in masks:
            if m.ndim == 4:
                kill = gen.random(m.shape[:2]) < zero_kernel_frac
                kill.flat[gen.integers(kill.size)] = False
                m[kill] = False
    for m in masks:
        if not m.any():
            m.flat[0] = True
    if alpha is None:
        alpha = float(gen.choice([1.0, 1.5, 2.0, 3.0]))
    return Checkpoint(spec, weights, scores, masks, alpha, seed=int(gen.integers(2**63)), phase=str(gen.choice(["mpt", "finetune"])))

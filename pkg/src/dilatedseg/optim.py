"""Adam optimisation and the slice-sampling training loop."""
import logging
from dataclasses import dataclass, field
from typing import Dict

import numpy as np

from . import network as net
from . import tensor_core as tc
from .errors import NumericError, ShapeError
from .volume import ARRAY_AXIS, AXES, ROTATIONS, Volume, rotate90

log = logging.getLogger(__name__)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Dict = field(default_factory=dict)
    v: Dict = field(default_factory=dict)


def adam_step(params: Dict, grads: Dict, state: AdamState):
    """One Adam update over a dict of named arrays.

    Moments for unseen names start at zero. Returns ``(new_params, state)``;
    the state is advanced in place.
    """
    if set(params) != set(grads):
        raise ShapeError(f"parameter names {sorted(params)} != gradient names {sorted(grads)}")
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    out = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        elif m.shape != p.shape:
            raise ShapeError(f"{name}: moment shape {m.shape} != parameter shape {p.shape}")
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        state.m[name] = m.astype(p.dtype, copy=False)
        state.v[name] = v.astype(p.dtype, copy=False)
        step = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        out[name] = (p - step).astype(p.dtype, copy=False)
    return out, state


def flatten_trainable(weights):
    return {(i, k): a for i, p in enumerate(weights) for k, a in p.items() if k in net.TRAINABLE}


def merge_trainable(weights, flat):
    out = [dict(p) for p in weights]
    for (i, k), a in flat.items():
        out[i][k] = a
    return out


@dataclass
class TrainPlan:
    steps: int = 10000
    batch_size: int = 128
    crop_size: int = 201
    seed: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    augment: bool = True

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1 or self.crop_size < 1:
            raise ValueError(f"invalid training plan {self}")

    def banner(self):
        return f"steps={self.steps} batch={self.batch_size} crop={self.crop_size}"


def _window(plane, r0, c0, size, fill=0):
    """``size`` x ``size`` window with top-left ``(r0, c0)``; outside is ``fill``."""
    out = np.full((size, size), fill, dtype=plane.dtype)
    h, w = plane.shape
    rs, re = max(r0, 0), min(r0 + size, h)
    cs, ce = max(c0, 0), min(c0 + size, w)
    if rs < re and cs < ce:
        out[rs - r0:re - r0, cs - c0:ce - c0] = plane[rs:re, cs:ce]
    return out


def sample_minibatch(dataset, plan: TrainPlan, rng, field=131):
    """Random training crops from ``(image, labels)`` volume pairs.

    Each sample draws a volume, a rotation from the ten-fold augmented set
    (when ``plan.augment``), a slice axis, a slice and a crop position whose
    target window is centred on a uniformly drawn pixel of that slice. Crop
    area outside the slice is zero (background for labels). Returns ``(inputs, targets)`` shaped
    ``(B, 1, crop, crop)`` and ``(B, crop - field + 1, crop - field + 1)``.
    """
    if not dataset:
        raise ValueError("cannot sample from an empty dataset")
    size = plan.crop_size
    out = size - (field - 1)
    if out < 1:
        raise ShapeError(f"crop {size} is smaller than the receptive field {field}")
    margin = (field - 1) // 2
    inputs = np.zeros((plan.batch_size, 1, size, size), dtype=np.float32)
    targets = np.zeros((plan.batch_size, out, out), dtype=np.uint8)
    for b in range(plan.batch_size):
        image, labels = dataset[int(rng.integers(len(dataset)))]
        if plan.augment:
            axis, turns = ROTATIONS[int(rng.integers(len(ROTATIONS)))]
            if axis is not None:
                image, labels = rotate90(image, axis, turns), rotate90(labels, axis, turns)
        k = ARRAY_AXIS[AXES[int(rng.integers(3))]]
        index = int(rng.integers(image.data.shape[k]))
        img = np.take(image.data, index, axis=k)
        lab = np.take(labels.data, index, axis=k)
        h, w = img.shape
        # centre of the target window is uniform over the slice
        centre = margin + out // 2
        r0 = int(rng.integers(h)) - centre
        c0 = int(rng.integers(w)) - centre
        inputs[b, 0] = _window(img, r0, c0, size)
        targets[b] = _window(lab, r0 + margin, c0 + margin, out)
    return inputs, targets


def check_dataset(dataset):
    for i, (image, labels) in enumerate(dataset):
        if image.dims != labels.dims:
            raise ShapeError(f"pair {i}: image dims {image.dims} != label dims {labels.dims}")


def train(config, dataset, plan: TrainPlan, weights=None, progress=None):
    """Train ``config`` on preprocessed ``(image, labels)`` pairs.

    Returns ``(weights, loss_log)`` where ``loss_log`` lists ``(step, loss)``.
    ``progress``, if given, is called as ``progress(step, loss)`` after each
    step.
    """
    if not dataset:
        raise ValueError("cannot train on an empty dataset")
    check_dataset(dataset)
    init_seq, sample_seq, dropout_seq = np.random.SeedSequence(plan.seed).spawn(3)
    if weights is None:
        weights = net.init_weights(config, np.random.default_rng(init_seq))
    else:
        net.check_weights(config, weights)
    sample_rng = np.random.default_rng(sample_seq)
    dropout_rng = np.random.default_rng(dropout_seq)
    state = AdamState(plan.lr, plan.beta1, plan.beta2, plan.eps)
    loss_log = []
    for step in range(1, plan.steps + 1):
        x, t = sample_minibatch(dataset, plan, sample_rng, config.field)
        probs, cache = net.forward(config, weights, x, train=True, rng=dropout_rng)
        loss, g = tc.cross_entropy(probs, t)
        if not np.isfinite(loss):
            raise NumericError(f"non-finite loss {loss} at step {step}")
        grads = net.backward(config, weights, cache, g)
        weights = net.updated_running_stats(config, weights, cache)
        flat_g = {(i, k): a for i, gi in enumerate(grads) for k, a in gi.items()}
        new_flat, state = adam_step(flatten_trainable(weights), flat_g, state)
        weights = merge_trainable(weights, new_flat)
        loss_log.append((step, loss))
        if progress is not None:
            progress(step, loss)
        elif step % 50 == 0 or step == plan.steps:
            log.info("step %d loss %.5f", step, loss)
    return weights, loss_log


def format_loss_log(loss_log):
    return "".join(f"{step}\t{loss!r}\n" for step, loss in loss_log)


def parse_loss_log(text):
    out = []
    for line in text.splitlines():
        if line.strip():
            step, loss = line.split("\t")
            out.append((int(step), float(loss)))
    return out

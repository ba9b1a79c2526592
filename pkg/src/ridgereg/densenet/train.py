"""Mini-batch training of the displacement regressor."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from ..core import DisplacementField, GrayImage
from ..datasynth import augment_variants
from .model import (
    NetSpec,
    Params,
    batch_arrays,
    check_size,
    forward,
    gradients_array,
    init_params,
    loss_array,
    forward_array,
)

log = logging.getLogger(__name__)

OPTIMIZERS = ("sgd", "adam")
SCHEDULES = ("constant", "cosine")


class TrainingDiverged(RuntimeError):
    """The loss became non-finite."""


@dataclass(frozen=True)
class TrainingConfig:
    """Training hyper-parameters.

    With ``augment`` every drawn sample is replaced by one of its 16
    flip/rotate/swap variants, picked at random.  ``schedule="cosine"``
    anneals the learning rate from its initial value to zero over the run.

    The optimiser steps on the per-pixel mean of the loss (batch-summed loss
    divided by ``batch * H * W``) so the learning rate does not depend on the
    patch size; reported losses are per-sample sums.
    """

    lambda_smooth: float = 0.8
    learning_rate: float = 1e-3
    batch_size: int = 8
    epochs: int = 30
    seed: int = 0
    patch_size: int = 64
    momentum: float = 0.9
    optimizer: str = "sgd"
    spec: NetSpec = NetSpec()
    augment: bool = False
    schedule: str = "constant"

    def __post_init__(self):
        if self.lambda_smooth < 0:
            raise ValueError("lambda_smooth must be non-negative")
        if self.patch_size % 16:
            raise ValueError("patch_size must be divisible by 16")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")


@dataclass
class TrainResult:
    params: Params
    history: list  # mean per-sample total loss for each epoch
    initial_loss: float
    initial_l_est: float
    final_l_est: float


class Optimizer:
    def __init__(self, params: Params, config: TrainingConfig):
        self.config = config
        self.state = {k: np.zeros_like(v) for k, v in params.items()}
        self.state2 = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: Params, grads: Params, scale: float, lr: Optional[float] = None) -> None:
        cfg = self.config
        lr = cfg.learning_rate if lr is None else lr
        self.t += 1
        for k in params:
            g = grads[k] * params[k].dtype.type(scale)
            if cfg.optimizer == "sgd":
                v = self.state[k]
                v *= cfg.momentum
                v -= lr * g
                params[k] += v
            else:
                b1, b2, eps = 0.9, 0.999, 1e-8
                m, s = self.state[k], self.state2[k]
                m *= b1
                m += (1 - b1) * g
                s *= b2
                s += (1 - b2) * g * g
                mh = m / (1 - b1 ** self.t)
                sh = s / (1 - b2 ** self.t)
                params[k] -= (lr * mh / (np.sqrt(sh) + eps)).astype(params[k].dtype)


def _rate(config: TrainingConfig, step: int, budget: int) -> float:
    """Learning rate for the 0-based ``step`` out of ``budget`` steps."""
    if config.schedule == "cosine":
        return config.learning_rate * 0.5 * (1.0 + math.cos(math.pi * step / max(budget, 1)))
    return config.learning_rate


def evaluate_loss(params: Params, samples: Sequence, lam: float, batch_size: int = 16):
    """Mean per-sample ``(total, l_est, l_smo)`` over ``samples``."""
    dtype = params["head.w"].dtype.type
    tot = est = smo = 0.0
    for s in range(0, len(samples), batch_size):
        x1, x2, d = batch_arrays(samples[s:s + batch_size], dtype)
        t, e, m, _ = loss_array(forward_array(params, x1, x2), d, lam)
        tot, est, smo = tot + t, est + e, smo + m
    n = len(samples)
    return tot / n, est / n, smo / n


def train(
    dataset: Sequence,
    config: TrainingConfig = TrainingConfig(),
    params: Optional[Params] = None,
    steps: Optional[int] = None,
    callback: Optional[Callable[[int, float], None]] = None,
) -> TrainResult:
    """Train on ``dataset`` (a list of TrainSample).

    ``steps`` caps the number of optimiser steps (otherwise ``epochs``
    passes).  Shuffling uses ``config.seed``, so the loss history is
    reproducible bit for bit.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    h, w = dataset[0].i1.shape
    check_size(h, w)
    if params is None:
        params = init_params(config.spec, config.seed)
    else:
        params = {k: v.copy() for k, v in params.items()}
    dtype = params["head.w"].dtype.type
    rng = np.random.default_rng(config.seed)
    opt = Optimizer(params, config)
    lam = config.lambda_smooth
    initial, initial_est, _ = evaluate_loss(params, dataset, lam)
    log.info("initial loss %.4g (l_est %.4g)", initial, initial_est)
    history = []
    n = len(dataset)
    bs = min(config.batch_size, n)
    total_steps = 0
    epochs = config.epochs if steps is None else math.ceil(steps / math.ceil(n / bs))
    budget = steps if steps is not None else epochs * math.ceil(n / bs)
    for epoch in range(epochs):
        order = rng.permutation(n)
        running = 0.0
        for s in range(0, n, bs):
            if steps is not None and total_steps >= steps:
                break
            batch = [dataset[i] for i in order[s:s + bs]]
            if config.augment:
                picks = rng.integers(0, 16, size=len(batch))
                batch = [augment_variants(b)[k] for b, k in zip(batch, picks)]
            x1, x2, d = batch_arrays(batch, dtype)
            grads, total, _, _ = gradients_array(params, x1, x2, d, lam)
            if not math.isfinite(total):
                raise TrainingDiverged(f"loss became {total} at epoch {epoch + 1}, step {total_steps + 1}")
            opt.step(params, grads, 1.0 / (len(batch) * h * w), _rate(config, total_steps, budget))
            running += total
            total_steps += 1
        mean = running / n
        history.append(mean)
        log.info("epoch %d: mean loss %.4g", epoch + 1, mean)
        if callback is not None:
            callback(epoch + 1, mean)
    _, final_est, _ = evaluate_loss(params, dataset, lam)
    return TrainResult(params, history, initial, initial_est, final_est)


def infer_field(params: Params, i1: GrayImage, i2: GrayImage) -> DisplacementField:
    """Network field restricted to the joint foreground (zero elsewhere)."""
    d = forward(params, i1, i2)
    joint = i1.mask & i2.mask
    return DisplacementField(np.where(joint, d.dx, 0.0), np.where(joint, d.dy, 0.0))

"""Batch-size-one dice-loss training with Adam."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from .layers import dice_loss
from .model import Model, backward, forward

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1000
    lr: float = 1e-4
    seed: int = 0
    log_every: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not self.lr >= 0:
            raise ValueError("learning rate must be non-negative")
        if self.log_every < 1:
            raise ValueError("log_every must be >= 1")

    def to_json(self) -> dict:
        return asdict(self)


class Adam:
    def __init__(self, params: list[np.ndarray], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray]):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def case_order(n_cases: int, steps: int, seed: int) -> np.ndarray:
    """Case index for every step: concatenated seeded permutations."""
    rng = np.random.default_rng(seed)
    epochs = -(-steps // n_cases)
    return np.concatenate([rng.permutation(n_cases) for _ in range(epochs)])[:steps]


def train(model: Model, dataset, tc: TrainConfig, on_step=None
          ) -> tuple[Model, list[tuple[int, float]]]:
    """Train a copy of ``model`` on ``(input, target)`` volume pairs.

    Returns the trained model and the loss curve: ``(step, loss)`` for every
    ``tc.log_every``-th step (1-based), plus the last step.
    """
    if not dataset:
        raise ValueError("empty training set")
    model = model.copy()
    params = model.parameters()
    opt = Adam(params, tc.lr, tc.beta1, tc.beta2, tc.adam_eps)
    curve: list[tuple[int, float]] = []
    for step, idx in enumerate(case_order(len(dataset), tc.steps, tc.seed), start=1):
        x, target = dataset[idx]
        y, cache = forward(model, x, keep=True)
        loss, grad = dice_loss(y, np.asarray(target, dtype=np.float64)[None])
        if not np.isfinite(loss):
            raise TrainingDiverged(f"loss became {loss} at step {step} (case {idx})")
        gws, gbs = backward(model, cache, y, grad)
        grads = []
        for gw, gb in zip(gws, gbs):
            if gw is not None:
                grads += [gw, gb]
        if not all(np.isfinite(g).all() for g in grads):
            raise TrainingDiverged(f"non-finite gradient at step {step} (case {idx})")
        opt.step(grads)
        if on_step is not None:
            on_step(step, loss)
        if step % tc.log_every == 0 or step == tc.steps:
            curve.append((step, loss))
            log.debug("step %d loss %.5f", step, loss)
    model.meta = dict(model.meta, train=tc.to_json())
    return model, curve

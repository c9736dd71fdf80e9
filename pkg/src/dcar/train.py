"""Teacher-forced training of the multi-head CAR model."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as F
from .model import CarModel, car_loss, head_accuracy
from .world import Utterance, rng_stream

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-3
    warmup_steps: int = 100
    grad_clip: float = 1.0
    final_lr_ratio: float = 0.1
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def eval_loss(model: CarModel, utterances: Sequence[Utterance], batch_size: int = 64) -> float:
    total, n = 0.0, 0
    for s in range(0, len(utterances), batch_size):
        batch = utterances[s: s + batch_size]
        total += car_loss(model, batch).item() * len(batch)
        n += len(batch)
    return total / max(n, 1)


def learning_rate(cfg: TrainConfig, step: int, total_steps: int) -> float:
    """Linear warm-up, then cosine decay down to ``final_lr_ratio * learning_rate``."""
    if step < cfg.warmup_steps:
        return cfg.learning_rate * (step + 1) / cfg.warmup_steps
    span = max(total_steps - cfg.warmup_steps, 1)
    frac = min((step - cfg.warmup_steps) / span, 1.0)
    lo = cfg.final_lr_ratio
    return cfg.learning_rate * (lo + (1 - lo) * 0.5 * (1 + np.cos(np.pi * frac)))


def train_car(model: CarModel, train: Sequence[Utterance], evaluation: Sequence[Utterance],
              cfg: TrainConfig, on_epoch: Callable[[dict], None] | None = None) -> list[dict]:
    """Minibatch Adam on the CAR loss; returns one log dict per epoch."""
    if not train:
        raise ValueError("empty training split")
    params = model.parameters()
    state = F.AdamState(learning_rate=cfg.learning_rate, beta1=0.9, beta2=0.98)
    order_rng = rng_stream(cfg.seed, "car-order")
    drop_rng = rng_stream(cfg.seed, "car-dropout") if model.cfg.dropout > 0 else None
    total_steps = cfg.epochs * -(-len(train) // cfg.batch_size)
    logs = []
    for epoch in range(1, cfg.epochs + 1):
        order = order_rng.permutation(len(train))
        losses = []
        for s in range(0, len(order), cfg.batch_size):
            batch = [train[int(i)] for i in order[s: s + cfg.batch_size]]
            F.zero_grads(params)
            with F.Tape() as tape:
                loss = car_loss(model, batch, drop_rng)
            value = loss.item()
            if not np.isfinite(value):
                raise F.NumericError(f"non-finite CAR loss at epoch {epoch}, batch {s // cfg.batch_size}")
            F.backward(loss, tape)
            tape.clear()
            F.clip_grad_norm(params, cfg.grad_clip)
            state.learning_rate = learning_rate(cfg, state.step, total_steps)
            F.adam_step(params, state)
            losses.append(value)
        entry = {"epoch": epoch, "train_loss": float(np.mean(losses)),
                 "eval_loss": eval_loss(model, evaluation) if evaluation else None,
                 "eval_accuracy": head_accuracy(model, evaluation) if evaluation else []}
        log.info("car epoch %d: loss %.4f acc %s", epoch, entry["train_loss"], entry["eval_accuracy"])
        logs.append(entry)
        if on_epoch is not None:
            on_epoch(entry)
    return logs

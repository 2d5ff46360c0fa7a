"""Learning rate schedule: linear warmup then cosine decay to zero."""

import math

from .config import TrainConfig


def lr_at(step: int, cfg: TrainConfig) -> float:
    """
    Get the learning rate used by the update at a step.

    Ramps linearly from 0 at step 0 to ``learning_rate`` at ``warmup_steps``, then follows
    ``learning_rate * (1 + cos(pi * progress)) / 2`` down to 0 at ``total_steps``.
    """

    step = min(max(step, 0), cfg.total_steps)
    warmup = cfg.warmup_steps
    if step < warmup:
        return cfg.learning_rate * step / warmup

    decay_steps = cfg.total_steps - warmup
    if decay_steps == 0:
        return cfg.learning_rate
    progress = (step - warmup) / decay_steps
    return cfg.learning_rate * (1.0 + math.cos(math.pi * progress)) / 2.0

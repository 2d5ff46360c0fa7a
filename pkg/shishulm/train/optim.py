"""AdamW with decoupled weight decay, one state entry per unique parameter."""

import math
from typing import Optional

import torch
from torch import nn

from .config import TrainConfig, TrainError


class NonFiniteError(TrainError):
    """A loss or gradient went NaN/Inf"""

    def __init__(self, message: str, step: Optional[int] = None):
        if step is not None:
            message = f"step {step}: {message}"
        super().__init__(message)
        self.step = step


def make_optimizer(model: nn.Module, cfg: TrainConfig) -> torch.optim.AdamW:
    """
    Make the optimizer.

    ``model.parameters()`` yields shared ShishuMLP weights and a tied head once, so each unique
    parameter gets exactly one pair of moment buffers and one update per step.
    """

    return torch.optim.AdamW(
        model.parameters(),
        lr=cfg.learning_rate,
        betas=(cfg.beta1, cfg.beta2),
        eps=cfg.adam_eps,
        weight_decay=cfg.weight_decay,
        foreach=False,
    )


def adamw_step(
    model: nn.Module,
    optimizer: torch.optim.Optimizer,
    lr: float,
    cfg: TrainConfig,
    step: Optional[int] = None,
) -> Optional[float]:
    """
    Apply one optimizer update with the accumulated gradients.

    Weight decay is decoupled: ``w <- w * (1 - lr * wd)`` then the bias-corrected Adam update.
    Parameters without a gradient get a zero one so decay still applies to them.

    Raises
    ------
    NonFiniteError
        A gradient holds NaN/Inf; no parameter is changed.

    Returns
    -------
    float or None
        Global gradient norm before clipping, when clipping is on.
    """

    for name, param in model.named_parameters():
        if param.grad is None:
            param.grad = torch.zeros_like(param)
        elif not bool(torch.isfinite(param.grad).all()):
            raise NonFiniteError(f"non-finite gradient for {name}", step)

    norm = None
    if cfg.grad_clip is not None:
        norm = float(nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip))
        if not math.isfinite(norm):
            raise NonFiniteError("non-finite gradient norm", step)

    for group in optimizer.param_groups:
        group["lr"] = lr
    optimizer.step()
    return norm

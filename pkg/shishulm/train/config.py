"""Training hyperparameters and run config files."""

from dataclasses import dataclass
from typing import Optional

from dataclasses_json import Undefined, dataclass_json

from ..model.config import ModelConfig


class TrainError(Exception):
    """Error with training setup or a training run"""


@dataclass_json(undefined=Undefined.RAISE)
@dataclass
class TrainConfig:
    """Training hyperparameters. Defaults are the desk-scale recipe."""

    total_steps: int
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 5e-3
    adam_eps: float = 1e-8
    warmup_ratio: float = 0.05
    batch_size: int = 32
    """Effective (per optimizer step) batch in blocks."""
    micro_batch: int = 32
    """Blocks per forward/backward pass; ``batch_size / micro_batch`` passes are accumulated."""
    block_size: int = 256
    seed: int = 0
    eval_interval: int = 0
    """Steps between validation passes; 0 evaluates only after the last step."""
    val_blocks: int = 16
    """Held-out blocks taken from the end of the corpus."""
    grad_clip: Optional[float] = None
    """Global L2 gradient norm limit, off when unset."""
    checkpoint_interval: int = 0
    """Steps between intermediate checkpoints, 0 for only the final one."""
    log_wall_time: bool = False
    """Fill the ``wall_ms`` metrics column (makes metrics files differ between reruns)."""
    threads: int = 1
    loader_workers: int = 0

    def __post_init__(self):
        for name in ["total_steps", "batch_size", "micro_batch", "block_size", "threads"]:
            if getattr(self, name) < 1:
                raise TrainError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ["eval_interval", "val_blocks", "checkpoint_interval", "loader_workers"]:
            if getattr(self, name) < 0:
                raise TrainError(f"{name} must not be negative, got {getattr(self, name)}")
        if self.batch_size % self.micro_batch != 0:
            raise TrainError(
                f"batch_size {self.batch_size} is not divisible by micro_batch {self.micro_batch}"
            )
        if not 0 <= self.warmup_ratio < 1:
            raise TrainError(f"warmup_ratio must be in [0, 1), got {self.warmup_ratio}")
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise TrainError("learning_rate and weight_decay must not be negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise TrainError(f"betas must be in [0, 1), got {self.beta1}, {self.beta2}")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise TrainError(f"grad_clip must be positive, got {self.grad_clip}")

    @property
    def accumulation_steps(self) -> int:
        """int: Micro batches per optimizer step."""

        return self.batch_size // self.micro_batch

    @property
    def warmup_steps(self) -> int:
        """int: Steps of the linear warmup."""

        return round(self.warmup_ratio * self.total_steps)


def tokens_per_step(cfg: TrainConfig) -> int:
    """Tokens consumed by one optimizer step."""

    return cfg.batch_size * cfg.block_size


@dataclass_json(undefined=Undefined.RAISE)
@dataclass
class RunConfig:
    """Contents of a run config file: ``{"model": {...}, "train": {...}}``."""

    model: ModelConfig
    train: TrainConfig

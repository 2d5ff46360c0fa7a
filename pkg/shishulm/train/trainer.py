"""
The training loop.

Each optimizer step accumulates ``batch_size / micro_batch`` micro-batch gradients (each loss
scaled by the micro-batch count), then applies one AdamW update at ``lr_at(step)``. A metrics row
is kept per step; validation runs every ``eval_interval`` steps and after the last one.
"""

import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional

import torch
from loguru import logger
from torch.utils.data import DataLoader, Dataset

from ..model.transformer import ShishuLM
from ..numerics.ops import TensorOpError, cross_entropy, perplexity
from ..protocols.checkpoint import save_checkpoint
from ..protocols.csv_report import CsvReport
from .config import TrainConfig, TrainError, tokens_per_step
from .data import cycle, make_loader
from .optim import NonFiniteError, adamw_step, make_optimizer
from .schedule import lr_at

METRICS_COLUMNS = ["step", "lr", "train_loss", "val_loss", "val_ppl", "tokens_seen", "wall_ms"]
METRICS_FILE = "metrics.csv"
CHECKPOINT_FILE = "model.shlm"


@dataclass
class MetricsRow:
    """Metrics of one optimizer step."""

    step: int
    lr: float
    train_loss: float
    val_loss: Optional[float]
    val_ppl: Optional[float]
    tokens_seen: int
    wall_ms: Optional[float] = None

    def to_row(self) -> list:
        """Values in ``METRICS_COLUMNS`` order."""

        return [
            self.step,
            self.lr,
            self.train_loss,
            self.val_loss,
            self.val_ppl,
            self.tokens_seen,
            self.wall_ms,
        ]


def nll_sum(model: ShishuLM, dataset: Dataset, batch_size: int = 8) -> tuple:
    """
    Summed token negative log-likelihood over a dataset, without gradients.

    Returns
    -------
    tuple
        ``(sum of NLL, token count)``.
    """

    total = 0.0
    count = 0
    loader = DataLoader(dataset, batch_size=batch_size, shuffle=False)
    with torch.no_grad():
        for x, y in loader:
            loss = cross_entropy(model(x), y)
            total += float(loss) * y.numel()
            count += y.numel()
    return total, count


def eval_loss(model: ShishuLM, dataset: Dataset, batch_size: int = 8) -> float:
    """
    Mean token NLL over held-out blocks.

    Raises
    ------
    TrainError
        The dataset is empty.
    """

    if len(dataset) == 0:
        raise TrainError("cannot evaluate an empty dataset")
    total, count = nll_sum(model, dataset, batch_size)
    return total / count


def eval_perplexity(model: ShishuLM, dataset: Dataset, batch_size: int = 8) -> float:
    """``exp`` of the mean token NLL over held-out blocks."""

    return perplexity(eval_loss(model, dataset, batch_size))


def train_step(
    model: ShishuLM, micro_batches: List[tuple], step: Optional[int] = None
) -> float:
    """
    Run forward and backward over the micro-batches of one step, accumulating gradients.

    Returns
    -------
    float
        Mean loss over the micro-batches.

    Raises
    ------
    NonFiniteError
        The loss or an activation went NaN/Inf.
    """

    accum = len(micro_batches)
    total = 0.0
    for x, y in micro_batches:
        try:
            loss = cross_entropy(model(x), y)
        except TensorOpError as e:
            raise NonFiniteError(str(e), step) from e
        (loss / accum).backward()
        total += float(loss) / accum
    if not math.isfinite(total):
        raise NonFiniteError("non-finite training loss", step)
    return total


def write_metrics(rows: List[MetricsRow], path: Path, header: Optional[Dict] = None):
    """Write the metrics CSV atomically."""

    report = CsvReport(list(METRICS_COLUMNS), provenance=dict(header or {}))
    for row in rows:
        report.add_row(row.to_row())
    report.write(path)


def train(
    model: ShishuLM,
    train_set: Dataset,
    val_set: Optional[Dataset],
    cfg: TrainConfig,
    out_dir: Optional[Path] = None,
    header: Optional[Dict] = None,
) -> List[MetricsRow]:
    """
    Train a model in place.

    Parameters
    ----------
    model: ShishuLM
        The model to train.
    train_set: Dataset
        Training blocks.
    val_set: Dataset, optional
        Validation blocks; validation is skipped when empty or ``None``.
    cfg: TrainConfig
        Hyperparameters.
    out_dir: Path, optional
        Where the metrics CSV and checkpoints go; nothing is written when ``None``.
    header: dict, optional
        Provenance header for the metrics CSV.

    Raises
    ------
    TrainError
        The training set cannot fill one optimizer step.
    NonFiniteError
        The loss or a gradient went NaN/Inf; carries the step number.
    """

    if len(train_set) < cfg.batch_size:
        raise TrainError(
            f"training set has {len(train_set)} blocks, one step needs {cfg.batch_size}"
        )
    has_val = val_set is not None and len(val_set) > 0

    torch.set_num_threads(cfg.threads)
    torch.manual_seed(cfg.seed)
    optimizer = make_optimizer(model, cfg)
    batches = cycle(make_loader(train_set, cfg.micro_batch, cfg.seed, cfg.loader_workers))

    out_dir = Path(out_dir) if out_dir is not None else None
    rows: List[MetricsRow] = []
    tokens_seen = 0
    start = time.perf_counter()
    logger.info(
        f"training {cfg.total_steps} steps, {tokens_per_step(cfg)} tokens/step, "
        f"{cfg.accumulation_steps} micro-batches/step"
    )

    model.train()
    for step in range(cfg.total_steps):
        lr = lr_at(step, cfg)
        optimizer.zero_grad(set_to_none=True)
        micro_batches = [next(batches) for _ in range(cfg.accumulation_steps)]
        loss = train_step(model, micro_batches, step)
        adamw_step(model, optimizer, lr, cfg, step)
        tokens_seen += tokens_per_step(cfg)

        last = step + 1 == cfg.total_steps
        val_loss = val_ppl = None
        if has_val and (last or (cfg.eval_interval and (step + 1) % cfg.eval_interval == 0)):
            val_loss = eval_loss(model, val_set, cfg.micro_batch)
            val_ppl = perplexity(val_loss)
            logger.info(f"step {step}: train loss {loss:.4f}, val loss {val_loss:.4f}")

        wall_ms = (time.perf_counter() - start) * 1000 if cfg.log_wall_time else None
        rows.append(MetricsRow(step, lr, loss, val_loss, val_ppl, tokens_seen, wall_ms))
        logger.debug(f"step {step}: lr {lr:.3e}, loss {loss:.4f}")

        if (
            out_dir is not None
            and cfg.checkpoint_interval
            and (step + 1) % cfg.checkpoint_interval == 0
            and not last
        ):
            save_checkpoint(model, out_dir / f"checkpoint_{step + 1}.shlm")
            write_metrics(rows, out_dir / METRICS_FILE, header)

    if out_dir is not None:
        save_checkpoint(model, out_dir / CHECKPOINT_FILE)
        write_metrics(rows, out_dir / METRICS_FILE, header)

    logger.info(f"training done, final train loss {rows[-1].train_loss:.4f}")
    return rows

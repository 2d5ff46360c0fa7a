"""
Latency harness.

Each (mode, length) cell runs ``warmup`` untimed steps and then ``reps`` timed steps on seeded
random tokens. Inference steps are a forward pass; training steps add the loss and the backward
pass. Cells run one at a time.
"""

import time
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional

import numpy as np
import torch
from dataclasses_json import Undefined, dataclass_json

from .. import BenchMode
from ..model.transformer import ShishuLM
from ..numerics.ops import cross_entropy

DEFAULT_LENGTHS = [64, 128, 256, 512, 1024, 2048, 4096]

LATENCY_COLUMNS = [
    "mode",
    "length",
    "parent_ms",
    "shishu_ms",
    "pct_reduction",
    "parent_median_ms",
    "shishu_median_ms",
    "parent_std_ms",
    "shishu_std_ms",
]


class BenchError(Exception):
    """Error with a benchmark"""


@dataclass_json(undefined=Undefined.RAISE)
@dataclass
class BenchConfig:
    """Benchmark settings."""

    lengths: List[int] = field(default_factory=lambda: list(DEFAULT_LENGTHS))
    batch_size: int = 1
    warmup: int = 3
    reps: int = 10
    mode: BenchMode = BenchMode.INFERENCE
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        self.mode = BenchMode(self.mode)
        if self.reps < 1:
            raise BenchError(f"reps must be at least 1, got {self.reps}")
        if self.warmup < 0:
            raise BenchError(f"warmup must not be negative, got {self.warmup}")
        if self.batch_size < 1:
            raise BenchError(f"batch_size must be positive, got {self.batch_size}")
        if not self.lengths or any(n < 1 for n in self.lengths):
            raise BenchError(f"lengths must be positive, got {self.lengths}")


@dataclass
class TimingRow:
    """Per-step wall time statistics of one length."""

    length: int
    mean_ms: float
    std_ms: float
    median_ms: float
    reps: int


def _step(model: ShishuLM, tokens: torch.Tensor, mode: BenchMode):
    if mode == BenchMode.INFERENCE:
        with torch.no_grad():
            model(tokens)
    else:
        model.zero_grad(set_to_none=True)
        loss = cross_entropy(model(tokens), tokens)
        loss.backward()


def time_model(model: ShishuLM, cfg: BenchConfig) -> List[TimingRow]:
    """
    Time a model at every configured length.

    Both modes run ``batch_size x length`` positions; the training loss uses the input tokens as
    targets.

    Raises
    ------
    BenchError
        A length does not fit the model's ``max_seq_len``.
    """

    too_long = [n for n in cfg.lengths if n > model.config.max_seq_len]
    if too_long:
        raise BenchError(f"lengths {too_long} exceed max_seq_len {model.config.max_seq_len}")

    torch.set_num_threads(cfg.threads)
    generator = torch.Generator()
    generator.manual_seed(cfg.seed)

    rows = []
    for length in cfg.lengths:
        shape = (cfg.batch_size, length)
        tokens = torch.randint(0, model.config.vocab_size, shape, generator=generator)

        for _ in range(cfg.warmup):
            _step(model, tokens, cfg.mode)

        times = []
        for _ in range(cfg.reps):
            start = time.perf_counter()
            _step(model, tokens, cfg.mode)
            times.append((time.perf_counter() - start) * 1000)

        ms = np.array(times)
        rows.append(
            TimingRow(length, float(ms.mean()), float(ms.std()), float(np.median(ms)), cfg.reps)
        )

    model.zero_grad(set_to_none=True)
    return rows


def reduction(parent: float, shishu: float) -> float:
    """``100 * (parent - shishu) / parent``."""

    if parent == 0:
        raise BenchError("parent value is zero")
    return 100.0 * (parent - shishu) / parent


def reduction_table(parent: Dict[int, float], shishu: Dict[int, float]) -> Dict[int, float]:
    """
    Percent reduction per length.

    Raises
    ------
    BenchError
        The lengths differ or a parent value is zero.
    """

    if set(parent) != set(shishu):
        raise BenchError(f"lengths differ: {sorted(parent)} vs {sorted(shishu)}")
    return {n: reduction(parent[n], shishu[n]) for n in parent}


@dataclass
class ComparisonRow:
    """One cell of a parent vs ShishuLM table."""

    mode: BenchMode
    length: int
    parent: float
    shishu: float
    pct_reduction: float

    def to_row(self) -> list:
        """Values in column order."""

        return [self.mode.value, self.length, self.parent, self.shishu, self.pct_reduction]


@dataclass
class LatencyRow(ComparisonRow):
    """A latency cell; ``parent``/``shishu`` are mean step times."""

    parent_timing: Optional[TimingRow] = None
    shishu_timing: Optional[TimingRow] = None

    def to_row(self) -> list:
        return super().to_row() + [
            self.parent_timing.median_ms,
            self.shishu_timing.median_ms,
            self.parent_timing.std_ms,
            self.shishu_timing.std_ms,
        ]


def compare_latency(parent: ShishuLM, shishu: ShishuLM, cfg: BenchConfig) -> List[LatencyRow]:
    """Time both models in both modes. The reduction uses the mean step time."""

    rows = []
    for mode in (BenchMode.INFERENCE, BenchMode.TRAINING):
        mode_cfg = replace(cfg, mode=mode)
        parent_rows = {r.length: r for r in time_model(parent, mode_cfg)}
        shishu_rows = {r.length: r for r in time_model(shishu, mode_cfg)}
        pct = reduction_table(
            {n: r.mean_ms for n, r in parent_rows.items()},
            {n: r.mean_ms for n, r in shishu_rows.items()},
        )
        for length in cfg.lengths:
            p, s = parent_rows[length], shishu_rows[length]
            rows.append(LatencyRow(mode, length, p.mean_ms, s.mean_ms, pct[length], p, s))
    return rows

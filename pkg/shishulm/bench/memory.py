"""
Analytic memory model.

Byte accounting from a config, without touching a device:

* inference: parameters, the peak activation working set of one layer, the KV cache of the
  decoder layers and the logits;
* training: parameters, gradients, two AdamW moment buffers, the activations of every layer kept
  for the backward pass (keys and values included) and the logits.

Attention scores count ``B * n_heads * T**2`` elements when materialized (this implementation's
attention) and nothing otherwise (fused kernels).
"""

from dataclasses import dataclass
from typing import List, Sequence

from .. import BenchMode, BlockKind
from ..model.config import ModelConfig
from ..model.params import count_parameters
from .timing import ComparisonRow, reduction

MEMORY_COLUMNS = ["mode", "length", "parent_bytes", "shishu_bytes", "pct_reduction"]


@dataclass
class MemoryModel:
    """Memory components in bytes."""

    parameter_bytes: int
    gradient_bytes: int
    optimizer_bytes: int
    activation_bytes: int
    kv_cache_bytes: int
    logits_bytes: int

    @property
    def total(self) -> int:
        """int: Sum of all components."""

        return (
            self.parameter_bytes
            + self.gradient_bytes
            + self.optimizer_bytes
            + self.activation_bytes
            + self.kv_cache_bytes
            + self.logits_bytes
        )


def kv_cache_elements(config: ModelConfig, batch: int, length: int) -> int:
    """Keys and values of every decoder layer after ``length`` positions."""

    return config.schedule.n_decoder * 2 * batch * config.n_kv_heads * length * config.head_dim


def _scores(config: ModelConfig, batch: int, length: int, materialize: bool) -> int:
    return batch * config.n_heads * length * length if materialize else 0


def decoder_activations(
    config: ModelConfig, batch: int, length: int, mode: BenchMode, materialize_scores: bool = True
) -> int:
    """Activation elements of one decoder layer."""

    bt = batch * length
    d = config.hidden_size
    inter = config.intermediate_size
    scores = _scores(config, batch, length, materialize_scores)
    if mode == BenchMode.INFERENCE:
        # input, norm out, queries, attention out, one score matrix, gate and up
        return 4 * bt * d + scores + 2 * bt * inter
    # kept for backward: input, norm out, q, k, v, scores and probabilities, attention out,
    # residual, second norm out, gate, up, their product
    return 6 * bt * d + 2 * bt * config.kv_dim + 2 * scores + 3 * bt * inter


def shishu_activations(config: ModelConfig, batch: int, length: int, mode: BenchMode) -> int:
    """Activation elements of one ShishuMLP layer."""

    bt = batch * length
    d = config.hidden_size
    inter = config.intermediate_size
    if mode == BenchMode.INFERENCE:
        return 2 * bt * d + 2 * bt * inter
    return 2 * bt * d + 3 * bt * inter


def memory_estimate(
    config: ModelConfig,
    batch: int,
    length: int,
    mode: BenchMode,
    bytes_per_elem: int = 4,
    materialize_scores: bool = True,
) -> MemoryModel:
    """
    Estimate the memory of one step.

    Parameters
    ----------
    config: ModelConfig
        The model.
    batch: int
        Sequences per step.
    length: int
        Tokens per sequence.
    mode: BenchMode
        Inference or training.
    bytes_per_elem: int
        Element width, 4 for single precision.
    materialize_scores: bool
        Count the ``T x T`` attention score matrices.
    """

    params = count_parameters(config) * bytes_per_elem
    per_layer = []
    for kind in config.schedule:
        if kind.kind == BlockKind.DECODER:
            per_layer.append(
                decoder_activations(config, batch, length, mode, materialize_scores)
            )
        else:
            per_layer.append(shishu_activations(config, batch, length, mode))
    logits = batch * length * config.vocab_size * bytes_per_elem

    if mode == BenchMode.INFERENCE:
        return MemoryModel(
            parameter_bytes=params,
            gradient_bytes=0,
            optimizer_bytes=0,
            activation_bytes=max(per_layer) * bytes_per_elem,
            kv_cache_bytes=kv_cache_elements(config, batch, length) * bytes_per_elem,
            logits_bytes=logits,
        )

    return MemoryModel(
        parameter_bytes=params,
        gradient_bytes=params,
        optimizer_bytes=2 * params,
        activation_bytes=sum(per_layer) * bytes_per_elem,
        kv_cache_bytes=0,
        logits_bytes=logits,
    )


def compare_memory(
    parent: ModelConfig,
    shishu: ModelConfig,
    lengths: Sequence[int],
    batch: int = 1,
    materialize_scores: bool = True,
) -> List[ComparisonRow]:
    """Total estimated bytes of both configs in both modes."""

    rows = []
    for mode in (BenchMode.INFERENCE, BenchMode.TRAINING):
        for length in lengths:
            p = memory_estimate(parent, batch, length, mode, materialize_scores=materialize_scores)
            s = memory_estimate(shishu, batch, length, mode, materialize_scores=materialize_scores)
            rows.append(ComparisonRow(mode, length, p.total, s.total, reduction(p.total, s.total)))
    return rows

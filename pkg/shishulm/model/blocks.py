"""
Building blocks of the model.

Decoder block::

    y = x + attention(input_norm(x))
    out = y + mlp(post_attn_norm(y))

ShishuMLP block (input norm and attention removed)::

    out = x + mlp(norm(x))

with ``mlp(h) = down(silu(gate(h)) * up(h))``.
"""

import math
from typing import Optional

import torch
from torch import nn

from ..numerics import ops
from .cache import KVCache
from .config import ModelConfig


class RMSNorm(nn.Module):
    """RMS normalization with a learnable per-channel scale, initialized to ones."""

    def __init__(self, dim: int, eps: float):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return ops.rmsnorm(x, self.weight, self.eps)


class GatedMlp(nn.Module):
    """SiLU gated MLP."""

    def __init__(self, hidden_size: int, intermediate_size: int):
        super().__init__()
        self.gate_proj = nn.Linear(hidden_size, intermediate_size, bias=False)
        self.up_proj = nn.Linear(hidden_size, intermediate_size, bias=False)
        self.down_proj = nn.Linear(intermediate_size, hidden_size, bias=False)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return self.down_proj(ops.silu(self.gate_proj(h)) * self.up_proj(h))


class SelfAttention(nn.Module):
    """
    Causal grouped-query self-attention with rotary position embeddings.

    Each of the ``n_kv_heads`` key/value heads serves ``n_heads / n_kv_heads`` query heads.
    Scores are scaled by ``1 / sqrt(head_dim)`` and future positions masked with ``-inf``.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.n_heads = config.n_heads
        self.n_kv_heads = config.n_kv_heads
        self.head_dim = config.head_dim
        self.rope_theta = config.rope_theta
        self.max_seq_len = config.max_seq_len

        d = config.hidden_size
        self.q_proj = nn.Linear(d, d, bias=False)
        self.k_proj = nn.Linear(d, config.kv_dim, bias=False)
        self.v_proj = nn.Linear(d, config.kv_dim, bias=False)
        self.o_proj = nn.Linear(d, d, bias=False)

    def forward(
        self, h: torch.Tensor, cache: Optional[KVCache] = None, layer: Optional[int] = None
    ) -> torch.Tensor:
        """
        Parameters
        ----------
        h: torch.Tensor
            Normalized input of shape ``[B, T, d]``.
        cache: KVCache, optional
            History to attend over; the new keys and values are appended to it.
        layer: int, optional
            Layer index under which the cache stores this layer.

        Raises
        ------
        KVCacheError
            The cache would overflow ``max_seq_len``.
        """

        batch, length, _ = h.shape
        offset = cache.length if cache is not None else 0
        positions = torch.arange(offset, offset + length)

        q = self.q_proj(h).view(batch, length, self.n_heads, self.head_dim).transpose(1, 2)
        k = self.k_proj(h).view(batch, length, self.n_kv_heads, self.head_dim).transpose(1, 2)
        v = self.v_proj(h).view(batch, length, self.n_kv_heads, self.head_dim).transpose(1, 2)

        q = ops.rope_apply(q, positions, self.rope_theta)
        k = ops.rope_apply(k, positions, self.rope_theta)

        if cache is not None:
            k, v = cache.append(layer if layer is not None else -1, k, v)

        groups = self.n_heads // self.n_kv_heads
        if groups > 1:
            k = k.repeat_interleave(groups, dim=1)
            v = v.repeat_interleave(groups, dim=1)

        scores = ops.matmul(q, k.transpose(-2, -1)) * (1.0 / math.sqrt(self.head_dim))
        key_pos = torch.arange(k.shape[2])
        future = key_pos[None, :] > positions[:, None]
        scores = scores.masked_fill(future, float("-inf"))
        weights = ops.softmax_rows(scores)

        out = ops.matmul(weights, v).transpose(1, 2).reshape(batch, length, -1)
        return self.o_proj(out)


class DecoderBlock(nn.Module):
    """Full transformer block with two residual branches."""

    def __init__(self, config: ModelConfig, layer: int):
        super().__init__()
        self.layer = layer
        self.input_norm = RMSNorm(config.hidden_size, config.rms_norm_eps)
        self.attention = SelfAttention(config)
        self.post_attn_norm = RMSNorm(config.hidden_size, config.rms_norm_eps)
        self.mlp = GatedMlp(config.hidden_size, config.intermediate_size)

    def forward(self, x: torch.Tensor, cache: Optional[KVCache] = None) -> torch.Tensor:
        y = x + self.attention(self.input_norm(x), cache, self.layer)
        return y + self.mlp(self.post_attn_norm(y))


class ShishuMlpGroup(nn.Module):
    """
    The weights of one ShishuMLP share group.

    Every layer of the group runs the same :py:class:`GatedMlp` instance, so parameters are stored
    and updated once. With ``share_norm`` the group also has a single norm, otherwise each member
    layer has its own.
    """

    def __init__(self, config: ModelConfig, group_size: int):
        super().__init__()
        n_norms = 1 if config.share_norm else group_size
        self.norms = nn.ModuleList(
            [RMSNorm(config.hidden_size, config.rms_norm_eps) for _ in range(n_norms)]
        )
        self.mlp = GatedMlp(config.hidden_size, config.intermediate_size)

    def norm_for(self, member: int) -> RMSNorm:
        """Get the norm used by the ``member``-th layer of the group."""

        return self.norms[member if len(self.norms) > 1 else 0]

    def forward(self, x: torch.Tensor, member: int = 0) -> torch.Tensor:
        return x + self.mlp(self.norm_for(member)(x))

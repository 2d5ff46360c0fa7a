"""
The full ShishuLM model.

Embedding, then the schedule-ordered decoder and ShishuMLP blocks, final norm and the output head
(the transposed embedding when tied). Layers of a share group run the same
:py:class:`ShishuMlpGroup` instance, so ``parameters()`` yields each unique parameter once and
shared weights appear once under the group's name, ``blocks.shishu_<group>``.
"""

from typing import List, Optional, Sequence, Tuple, Union

import torch
import torch.nn.functional as F
from loguru import logger
from torch import nn

from .. import BlockKind
from ..numerics.ops import RngState, normal_init
from .blocks import DecoderBlock, GatedMlp, RMSNorm, ShishuMlpGroup
from .cache import KVCache
from .config import ModelConfig


class ModelError(Exception):
    """Error with a ShishuLM forward or generate call"""


def decoder_key(layer: int) -> str:
    """Module name of the decoder block at a layer index."""

    return f"decoder_{layer}"


def shishu_key(group: int) -> str:
    """Module name of a ShishuMLP share group."""

    return f"shishu_{group}"


class ShishuLM(nn.Module):
    """Decoder-only language model whose layer plan comes from ``config.schedule``."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config

        self.embed = nn.Embedding(config.vocab_size, config.hidden_size)

        groups = config.schedule.groups
        blocks = {}
        self._plan: List[Tuple[str, int]] = []  # (block name, member index) per layer
        for i, kind in enumerate(config.schedule):
            if kind.kind == BlockKind.DECODER:
                key = decoder_key(i)
                blocks[key] = DecoderBlock(config, i)
                self._plan.append((key, 0))
            else:
                key = shishu_key(kind.share_group)
                members = groups[kind.share_group]
                if key not in blocks:
                    blocks[key] = ShishuMlpGroup(config, len(members))
                self._plan.append((key, members.index(i)))
        self.blocks = nn.ModuleDict(blocks)

        self.final_norm = RMSNorm(config.hidden_size, config.rms_norm_eps)
        self.lm_head: Optional[nn.Linear] = None
        if not config.tie_embeddings:
            self.lm_head = nn.Linear(config.hidden_size, config.vocab_size, bias=False)

    @property
    def plan(self) -> List[Tuple[str, int]]:
        """list: Block name and group member index of every layer, bottom first."""

        return list(self._plan)

    def layer_block(self, layer: int) -> Union[DecoderBlock, ShishuMlpGroup]:
        """Get the module that runs a layer (shared between the layers of a group)."""

        return self.blocks[self._plan[layer][0]]

    def layer_mlp(self, layer: int) -> GatedMlp:
        """Get the MLP run by a layer."""

        return self.layer_block(layer).mlp

    def decoder_blocks(self) -> List[Tuple[int, DecoderBlock]]:
        """Get the (layer index, block) pairs of the decoder layers."""

        return [(i, self.layer_block(i)) for i in self.config.schedule.decoder_layers]

    def new_cache(self, batch: int = 1) -> KVCache:
        """Make an empty cache for this model."""

        return KVCache(
            self.config.schedule.decoder_layers,
            batch,
            self.config.n_kv_heads,
            self.config.head_dim,
            self.config.max_seq_len,
            self.embed.weight.dtype,
        )

    def _check_tokens(self, tokens: torch.Tensor, cache: Optional[KVCache]):
        if tokens.dim() != 2:
            raise ModelError(f"tokens must be [B, T], got shape {tuple(tokens.shape)}")
        if tokens.dtype not in (torch.int64, torch.int32, torch.int16, torch.uint8):
            raise ModelError(f"tokens must be integers, got {tokens.dtype}")
        if tokens.numel() == 0:
            raise ModelError("no tokens to run")
        if bool((tokens < 0).any()) or bool((tokens >= self.config.vocab_size).any()):
            raise ModelError(f"token id out of range [0, {self.config.vocab_size})")

        if cache is None:
            if tokens.shape[1] > self.config.max_seq_len:
                raise ModelError(
                    f"{tokens.shape[1]} tokens exceed max_seq_len {self.config.max_seq_len}"
                )
            return
        if cache.decoder_layers != tuple(self.config.schedule.decoder_layers):
            raise ModelError("cache decoder layers do not match the model schedule")
        if cache.batch != tokens.shape[0]:
            raise ModelError(f"token batch {tokens.shape[0]} does not match cache {cache.batch}")
        cache.check_room(tokens.shape[1])

    def forward(self, tokens: torch.Tensor, cache: Optional[KVCache] = None) -> torch.Tensor:
        """
        Run the model.

        Parameters
        ----------
        tokens: torch.Tensor
            Token ids of shape ``[B, T]``.
        cache: KVCache, optional
            Cache continued by this call; its positions come before the new tokens.

        Raises
        ------
        ModelError
            Bad token ids or a cache made for another schedule.
        KVCacheError
            The cache would overflow.

        Returns
        -------
        torch.Tensor
            Logits of shape ``[B, T, V]``.
        """

        self._check_tokens(tokens, cache)

        h = self.embed(tokens.long())
        for key, member in self._plan:
            block = self.blocks[key]
            if isinstance(block, DecoderBlock):
                h = block(h, cache)
            else:
                h = block(h, member)

        if cache is not None:
            cache.advance(tokens.shape[1])

        h = self.final_norm(h)
        if self.lm_head is None:
            return F.linear(h, self.embed.weight)
        return self.lm_head(h)

    def decode_step(self, token: torch.Tensor, cache: KVCache) -> torch.Tensor:
        """
        Feed one new token per batch row.

        Parameters
        ----------
        token: torch.Tensor
            Token ids of shape ``[B]``.
        cache: KVCache
            Cache filled by a prefill call.

        Returns
        -------
        torch.Tensor
            Logits of shape ``[B, V]``.
        """

        if cache.length == 0:
            raise ModelError("decode_step needs a cache filled by a prefill pass")
        if token.dim() != 1:
            raise ModelError(f"decode_step takes [B] token ids, got shape {tuple(token.shape)}")

        return self.forward(token[:, None], cache)[:, -1]

    @torch.no_grad()
    def generate(
        self,
        prompt: Union[Sequence[int], torch.Tensor],
        n: int,
        temperature: float = 0.0,
        top_k: Optional[int] = None,
        generator: Optional[torch.Generator] = None,
    ) -> List[int]:
        """
        Continue a prompt by ``n`` tokens.

        Greedy (argmax) when ``temperature`` is 0, otherwise samples from the softmax of
        ``logits / temperature``, restricted to the ``top_k`` most likely tokens when given.

        Raises
        ------
        ModelError
            Empty prompt, negative ``n`` or the result would not fit ``max_seq_len``.
        """

        if n < 0:
            raise ModelError(f"cannot generate {n} tokens")
        if n == 0:
            return []

        tokens = torch.as_tensor(prompt, dtype=torch.long)
        if tokens.dim() != 1 or tokens.numel() == 0:
            raise ModelError("generate needs a non-empty 1-D prompt")
        # the last generated token is never fed back
        if tokens.numel() + n - 1 > self.config.max_seq_len:
            raise ModelError(
                f"prompt of {tokens.numel()} + {n} generated tokens exceeds max_seq_len "
                f"{self.config.max_seq_len}"
            )

        cache = self.new_cache(1)
        logits = self.forward(tokens[None, :], cache)[:, -1]
        out: List[int] = []
        for i in range(n):
            token = pick_token(logits[0], temperature, top_k, generator)
            out.append(token)
            if i < n - 1:
                logits = self.decode_step(torch.tensor([token]), cache)

        return out


def pick_token(
    logits: torch.Tensor,
    temperature: float = 0.0,
    top_k: Optional[int] = None,
    generator: Optional[torch.Generator] = None,
) -> int:
    """Choose the next token from a ``[V]`` logits row."""

    if temperature <= 0:
        return int(torch.argmax(logits))

    scaled = logits.double() / temperature
    if top_k is not None and 0 < top_k < scaled.numel():
        kth = torch.topk(scaled, top_k).values[-1]
        scaled = scaled.masked_fill(scaled < kth, float("-inf"))
    probs = torch.softmax(scaled, dim=-1)
    return int(torch.multinomial(probs, 1, generator=generator))


def build_model(config: ModelConfig, seed: int) -> ShishuLM:
    """
    Make a model with deterministic initial weights.

    Every projection and the embedding are drawn from ``N(0, init_std**2)`` in parameter-name
    order from one seeded stream; norm scales start at 1.
    """

    model = ShishuLM(config)
    rng = RngState(seed)
    norm_params = {
        id(p) for m in model.modules() if isinstance(m, RMSNorm) for p in m.parameters()
    }

    with torch.no_grad():
        for name, param in model.named_parameters():
            if id(param) in norm_params:
                param.fill_(1.0)
            else:
                param.copy_(normal_init(param.shape, 0.0, config.init_std, rng, param.dtype))

    logger.debug(f"built model, schedule '{config.schedule}', seed {seed}")
    return model

"""Key/value history of the attention layers for incremental decoding."""

from typing import Dict, Iterable, Optional, Tuple

import torch


class KVCacheError(Exception):
    """Error with a KVCache"""


class KVCache:
    """
    Per decoder layer key and value tensors of shape ``[B, n_kv_heads, T_cached, head_dim]``.

    ShishuMLP layers have no attention and own no entries. ``length`` counts the positions already
    fed through the model; it is advanced by the model once every layer has appended.
    """

    def __init__(
        self,
        decoder_layers: Iterable[int],
        batch: int,
        n_kv_heads: int,
        head_dim: int,
        max_seq_len: int,
        dtype: torch.dtype = torch.float32,
    ):
        self.decoder_layers = tuple(decoder_layers)
        self.batch = batch
        self.n_kv_heads = n_kv_heads
        self.head_dim = head_dim
        self.max_seq_len = max_seq_len
        self.dtype = dtype
        self.length = 0
        self._keys: Dict[int, Optional[torch.Tensor]] = {i: None for i in self.decoder_layers}
        self._values: Dict[int, Optional[torch.Tensor]] = {i: None for i in self.decoder_layers}

    def __len__(self) -> int:
        return self.length

    def check_room(self, n_new: int):
        """Raise if ``n_new`` more positions do not fit."""

        if self.length + n_new > self.max_seq_len:
            raise KVCacheError(
                f"cache overflow: {self.length} cached + {n_new} new > max_seq_len "
                f"{self.max_seq_len}"
            )

    def append(
        self, layer: int, keys: torch.Tensor, values: torch.Tensor
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        """
        Append new keys and values of a decoder layer.

        Returns
        -------
        tuple
            The full key and value history of the layer, new positions included.
        """

        if layer not in self._keys:
            raise KVCacheError(f"layer {layer} is not a decoder layer of this cache")
        if keys.shape != values.shape or keys.dim() != 4:
            raise KVCacheError(f"bad key/value shapes {tuple(keys.shape)}, {tuple(values.shape)}")
        if keys.shape[0] != self.batch:
            raise KVCacheError(f"batch {keys.shape[0]} does not match cache batch {self.batch}")

        self.check_room(keys.shape[2])

        old_k = self._keys[layer]
        old_v = self._values[layer]
        if old_k is not None and old_v is not None:
            keys = torch.cat((old_k, keys), dim=2)
            values = torch.cat((old_v, values), dim=2)
        self._keys[layer] = keys
        self._values[layer] = values
        return keys, values

    def advance(self, n_new: int):
        """Mark ``n_new`` positions as fed through every layer."""

        self.check_room(n_new)
        self.length += n_new

    def layer(self, layer: int) -> Tuple[Optional[torch.Tensor], Optional[torch.Tensor]]:
        """Get the key and value history of a decoder layer."""

        if layer not in self._keys:
            raise KVCacheError(f"layer {layer} is not a decoder layer of this cache")
        return self._keys[layer], self._values[layer]

    @property
    def nbytes(self) -> int:
        """int: Bytes held by all key and value tensors."""

        total = 0
        for tensors in (self._keys, self._values):
            for t in tensors.values():
                if t is not None:
                    total += t.numel() * t.element_size()
        return total

    @staticmethod
    def expected_nbytes(
        n_decoder: int, batch: int, n_kv_heads: int, length: int, head_dim: int, bytes_per_elem: int
    ) -> int:
        """Closed form of :py:attr:`nbytes` after ``length`` positions."""

        return n_decoder * 2 * batch * n_kv_heads * length * head_dim * bytes_per_elem

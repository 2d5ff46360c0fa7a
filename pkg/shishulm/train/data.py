"""
Byte-level corpus pipeline.

Text is encoded as UTF-8 bytes (vocabulary of 256, no special tokens) and cut into consecutive
blocks of ``block_size + 1`` tokens, input and target being the block shifted by one. The last
``val_blocks`` blocks are held out for validation.
"""

from pathlib import Path
from typing import Iterator, List, Sequence, Tuple, Union

import torch
from loguru import logger
from torch.utils.data import DataLoader, Dataset, Subset

from .config import TrainError


class ByteTokenizer:
    """UTF-8 bytes as token ids."""

    vocab_size = 256

    def encode(self, text: str) -> List[int]:
        """Get the token ids of a text."""

        return list(text.encode("utf-8"))

    def decode(self, ids: Sequence[int]) -> str:
        """Get the text of token ids; invalid UTF-8 is replaced."""

        return bytes(ids).decode("utf-8", errors="replace")


class CorpusDataset(Dataset):
    """
    Consecutive blocks of a token sequence.

    Block ``i`` covers tokens ``[i * block_size, (i + 1) * block_size]`` inclusive, so adjacent
    blocks share one boundary token.
    """

    def __init__(self, tokens: Union[Sequence[int], torch.Tensor], block_size: int):
        if block_size < 1:
            raise TrainError(f"block_size must be positive, got {block_size}")
        self.tokens = torch.as_tensor(tokens, dtype=torch.long)
        self.block_size = block_size
        self.n_blocks = max(0, (self.tokens.numel() - 1) // block_size)

    def __len__(self) -> int:
        return self.n_blocks

    def __getitem__(self, index: int) -> Tuple[torch.Tensor, torch.Tensor]:
        if not 0 <= index < self.n_blocks:
            raise IndexError(f"block {index} out of range")
        start = index * self.block_size
        chunk = self.tokens[start : start + self.block_size + 1]
        return chunk[:-1], chunk[1:]

    @classmethod
    def from_text(cls, text: str, block_size: int):
        """Make a dataset from text."""

        return cls(ByteTokenizer().encode(text), block_size)

    @classmethod
    def from_file(cls, path: Union[str, Path], block_size: int):
        """
        Make a dataset from a UTF-8 text file.

        Raises
        ------
        TrainError
            The file cannot be read.
        """

        try:
            raw = Path(path).read_bytes()
        except OSError as e:
            raise TrainError(f"cannot read corpus {path}: {e}") from e
        logger.info(f"corpus {path}: {len(raw)} bytes")
        return cls(list(raw), block_size)

    def split(self, val_blocks: int) -> Tuple[Subset, Subset]:
        """
        Split into training blocks and the last ``val_blocks`` validation blocks.

        Raises
        ------
        TrainError
            No training block is left.
        """

        n_train = self.n_blocks - val_blocks
        if n_train < 1:
            raise TrainError(
                f"corpus has {self.n_blocks} blocks of {self.block_size}, too few for "
                f"{val_blocks} validation blocks"
            )
        return (
            Subset(self, list(range(n_train))),
            Subset(self, list(range(n_train, self.n_blocks))),
        )


def make_loader(
    dataset: Dataset, micro_batch: int, seed: int, workers: int = 0, shuffle: bool = True
) -> DataLoader:
    """
    Make a loader with a reproducible block order.

    The order comes from a dedicated generator seeded with ``seed``; worker prefetching does not
    change it.
    """

    generator = torch.Generator()
    generator.manual_seed(seed)
    return DataLoader(
        dataset,
        batch_size=micro_batch,
        shuffle=shuffle,
        drop_last=shuffle,
        generator=generator,
        num_workers=workers,
    )


def cycle(loader: DataLoader) -> Iterator[Tuple[torch.Tensor, torch.Tensor]]:
    """Iterate a loader forever, one reshuffled epoch after another."""

    while True:
        for batch in loader:
            yield batch

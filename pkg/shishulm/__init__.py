"""ShishuLM desk-scale toolkit."""

from enum import Enum, IntEnum

try:
    from ._version import version as __version__  # type: ignore
except ImportError:
    __version__ = "0.0.0"  # package is not installed


class BlockKind(IntEnum):
    """All valid kinds of layer in a layer schedule."""

    DECODER = ord("D")
    """Full transformer block: input norm, causal self-attention, post-attention norm, gated
    MLP, each half with its own residual."""
    SHISHU_MLP = ord("S")
    """Attention-free block: norm, gated MLP and a single residual. Weights are owned by a share
    group that may span several adjacent layers."""

    @staticmethod
    def from_char(value: str):
        """Make an object from char value."""
        return BlockKind(ord(value))

    def to_char(self) -> str:
        """Get char value."""
        return chr(self.value)


class BenchMode(Enum):
    """What a benchmark step runs."""

    INFERENCE = "inference"
    """Forward pass only."""
    TRAINING = "training"
    """Forward pass, loss and backward pass."""

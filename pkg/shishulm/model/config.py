"""
Model hyperparameters and the per-layer plan.

A :py:class:`LayerSchedule` lists, bottom to top, whether each layer is a decoder block or a
ShishuMLP block and which share group owns the ShishuMLP weights. Its text form is a space
separated list of ``D`` and ``S<group>`` tokens, e.g. ``"D D D D S0 S0 S1 S1"``.
"""

from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Union

from dataclasses_json import Undefined, config, dataclass_json

from .. import BlockKind


class ScheduleError(Exception):
    """Error with a LayerSchedule"""


class ModelConfigError(Exception):
    """Error with a ModelConfig"""


@dataclass(frozen=True)
class LayerKind:
    """One entry of a layer schedule."""

    kind: BlockKind
    share_group: Optional[int] = None
    """Share group of a ShishuMLP layer, ``None`` for decoder layers."""

    def __post_init__(self):
        if self.kind == BlockKind.DECODER and self.share_group is not None:
            raise ScheduleError("decoder layers do not belong to a share group")
        if self.kind == BlockKind.SHISHU_MLP and (self.share_group is None or self.share_group < 0):
            raise ScheduleError("ShishuMLP layers need a non-negative share group")

    def __str__(self) -> str:
        if self.kind == BlockKind.DECODER:
            return self.kind.to_char()
        return f"{self.kind.to_char()}{self.share_group}"

    @classmethod
    def parse(cls, token: str):
        """Make an object from a ``D`` or ``S<group>`` token."""

        try:
            kind = BlockKind.from_char(token[0])
        except (IndexError, ValueError):
            raise ScheduleError(f"invalid layer token '{token}'")

        if kind == BlockKind.DECODER:
            if len(token) != 1:
                raise ScheduleError(f"invalid decoder token '{token}'")
            return cls(kind)

        try:
            group = int(token[1:])
        except ValueError:
            raise ScheduleError(f"invalid ShishuMLP token '{token}'")
        return cls(kind, group)


DECODER = LayerKind(BlockKind.DECODER)


class LayerSchedule:
    """
    Ordered plan of layer kinds.

    Share groups are numbered 0, 1, 2, ... in order of appearance and each group covers a run of
    adjacent layers.
    """

    def __init__(self, kinds: Sequence[LayerKind]):
        """
        Parameters
        ----------
        kinds: list of LayerKind
            Layer kinds, bottom layer first.

        Raises
        ------
        ScheduleError
            The layer list is empty or share groups are not contiguous and in order.
        """

        self._kinds = tuple(kinds)
        if not self._kinds:
            raise ScheduleError("a schedule needs at least one layer")

        next_group = 0
        prev = None
        for kind in self._kinds:
            if kind.kind == BlockKind.SHISHU_MLP:
                if prev is not None and kind.share_group == prev.share_group:
                    pass  # continuing the current group
                elif kind.share_group == next_group:
                    next_group += 1
                else:
                    raise ScheduleError(
                        f"share group {kind.share_group} is out of order or not adjacent, "
                        f"expected group {next_group}"
                    )
            prev = kind

    def __len__(self) -> int:
        return len(self._kinds)

    def __iter__(self) -> Iterator[LayerKind]:
        return iter(self._kinds)

    def __getitem__(self, index: int) -> LayerKind:
        return self._kinds[index]

    def __eq__(self, other) -> bool:
        if not isinstance(other, LayerSchedule):
            return False
        return self._kinds == other._kinds

    def __hash__(self) -> int:
        return hash(self._kinds)

    def __str__(self) -> str:
        return " ".join(str(k) for k in self._kinds)

    def __repr__(self) -> str:
        return f"LayerSchedule('{self}')"

    @classmethod
    def parse(cls, value: Union[str, "LayerSchedule", None]):
        """Make an object from its text form (objects and ``None`` pass through)."""

        if value is None or isinstance(value, LayerSchedule):
            return value
        if not isinstance(value, str):
            raise ScheduleError(f"schedule must be a string, not {type(value).__name__}")
        return cls([LayerKind.parse(t) for t in value.split()])

    @classmethod
    def all_decoder(cls, n_layers: int):
        """Schedule of ``n_layers`` decoder blocks."""

        if n_layers < 1:
            raise ScheduleError(f"n_layers must be positive, got {n_layers}")
        return cls([DECODER] * n_layers)

    @property
    def decoder_layers(self) -> List[int]:
        """list: Indices of the decoder layers."""

        return [i for i, k in enumerate(self._kinds) if k.kind == BlockKind.DECODER]

    @property
    def n_decoder(self) -> int:
        """int: Number of decoder layers."""

        return len(self.decoder_layers)

    @property
    def groups(self) -> Dict[int, List[int]]:
        """dict: Share group id to the indices of its layers."""

        groups: Dict[int, List[int]] = {}
        for i, k in enumerate(self._kinds):
            if k.kind == BlockKind.SHISHU_MLP:
                groups.setdefault(k.share_group, []).append(i)
        return groups

    @property
    def n_groups(self) -> int:
        """int: Number of ShishuMLP share groups."""

        return len(self.groups)


def make_shishu_schedule(
    n_layers: int, n_decoder: int, pair_size: int = 2, n_top: int = 0
) -> LayerSchedule:
    """
    Build a ShishuLM layer plan.

    ``n_decoder`` decoder blocks at the bottom, ``n_top`` decoder blocks at the top and ShishuMLP
    blocks in between, grouped into share groups of ``pair_size`` adjacent layers.

    Parameters
    ----------
    n_layers: int
        Total number of layers.
    n_decoder: int
        Decoder blocks at the bottom of the stack.
    pair_size: int
        Layers per share group; 1 means no sharing.
    n_top: int
        Decoder blocks at the top of the stack.

    Raises
    ------
    ScheduleError
        The counts do not fit or the ShishuMLP run is not divisible by ``pair_size``.
    """

    if pair_size < 1:
        raise ScheduleError(f"pair_size must be positive, got {pair_size}")
    if n_decoder < 0 or n_top < 0:
        raise ScheduleError("decoder counts must not be negative")
    n_shishu = n_layers - n_decoder - n_top
    if n_layers < 1 or n_shishu < 0:
        raise ScheduleError(f"{n_decoder} + {n_top} decoders do not fit in {n_layers} layers")
    if n_shishu % pair_size != 0:
        raise ScheduleError(f"{n_shishu} ShishuMLP layers are not divisible by {pair_size}")

    kinds = [DECODER] * n_decoder
    for i in range(n_shishu):
        kinds.append(LayerKind(BlockKind.SHISHU_MLP, i // pair_size))
    kinds += [DECODER] * n_top

    return LayerSchedule(kinds)


@dataclass_json(undefined=Undefined.RAISE)
@dataclass
class ModelConfig:
    """Model hyperparameters, field names following the usual model config tables."""

    hidden_size: int
    intermediate_size: int
    n_layers: int
    n_heads: int
    n_kv_heads: int
    vocab_size: int
    max_seq_len: int
    schedule: Optional[LayerSchedule] = field(
        default=None, metadata=config(encoder=str, decoder=LayerSchedule.parse)
    )
    """Layer plan; omitted means all decoder layers."""
    rms_norm_eps: float = 1e-5
    rope_theta: float = 10000.0
    tie_embeddings: bool = True
    share_norm: bool = True
    """One norm per ShishuMLP share group (otherwise one per layer, MLP still shared)."""
    init_std: float = 0.02

    def __post_init__(self):
        try:
            self.schedule = LayerSchedule.parse(self.schedule)
        except ScheduleError as e:
            raise ModelConfigError(e) from e

        for name in ["hidden_size", "intermediate_size", "n_layers", "n_heads", "n_kv_heads"]:
            if getattr(self, name) < 1:
                raise ModelConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ["vocab_size", "max_seq_len"]:
            if getattr(self, name) < 1:
                raise ModelConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.hidden_size % self.n_heads != 0:
            raise ModelConfigError(
                f"hidden_size {self.hidden_size} is not divisible by n_heads {self.n_heads}"
            )
        if self.n_heads % self.n_kv_heads != 0:
            raise ModelConfigError(
                f"n_heads {self.n_heads} is not divisible by n_kv_heads {self.n_kv_heads}"
            )
        if self.head_dim % 2 != 0:
            raise ModelConfigError(f"head_dim {self.head_dim} must be even for rope")
        if self.rms_norm_eps < 0:
            raise ModelConfigError(f"rms_norm_eps must not be negative, got {self.rms_norm_eps}")
        if self.init_std < 0:
            raise ModelConfigError(f"init_std must not be negative, got {self.init_std}")

        if self.schedule is None:
            self.schedule = LayerSchedule.all_decoder(self.n_layers)
        if len(self.schedule) != self.n_layers:
            raise ModelConfigError(
                f"schedule has {len(self.schedule)} layers, config has {self.n_layers}"
            )

    @property
    def head_dim(self) -> int:
        """int: Channels per attention head."""

        return self.hidden_size // self.n_heads

    @property
    def kv_dim(self) -> int:
        """int: Width of the key (and value) projection."""

        return self.n_kv_heads * self.head_dim

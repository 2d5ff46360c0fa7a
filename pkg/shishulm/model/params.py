"""
Exact parameter counting from a config.

Counts unique parameters: a ShishuMLP share group counts once however many layers run it and a
tied output head adds nothing.
"""

from dataclasses import dataclass, replace
from typing import List, Optional

from .config import ModelConfig, make_shishu_schedule


def base_parameters(config: ModelConfig) -> int:
    """Embedding, final norm and (untied) output head."""

    d = config.hidden_size
    count = config.vocab_size * d + d
    if not config.tie_embeddings:
        count += config.vocab_size * d
    return count


def mlp_parameters(config: ModelConfig) -> int:
    """Gate, up and down projections."""

    return 3 * config.hidden_size * config.intermediate_size


def decoder_layer_parameters(config: ModelConfig) -> int:
    """Two norms, q/k/v/o projections and the MLP of one decoder block."""

    d = config.hidden_size
    return 2 * d + 2 * d * d + 2 * d * config.kv_dim + mlp_parameters(config)


def shishu_group_parameters(config: ModelConfig, group_size: int) -> int:
    """One share group: the MLP once, plus one norm (or one per member layer)."""

    norms = 1 if config.share_norm else group_size
    return mlp_parameters(config) + norms * config.hidden_size


def count_parameters(config: ModelConfig) -> int:
    """Number of unique parameters of the model a config describes."""

    count = base_parameters(config)
    count += config.schedule.n_decoder * decoder_layer_parameters(config)
    for layers in config.schedule.groups.values():
        count += shishu_group_parameters(config, len(layers))
    return count


@dataclass(frozen=True)
class ScheduleReading:
    """One way of laying out decoder layers and share groups, with its count."""

    n_decoder: int
    n_groups: int
    share_norm: bool
    pair_size: int
    parameters: int

    @property
    def n_layers(self) -> int:
        """int: Total layers."""

        return self.n_decoder + self.n_groups * self.pair_size

    def to_config(self, base: ModelConfig) -> ModelConfig:
        """Apply this reading to a config's layer plan."""

        schedule = make_shishu_schedule(self.n_layers, self.n_decoder, self.pair_size)
        return replace(base, n_layers=self.n_layers, schedule=schedule, share_norm=self.share_norm)


def enumerate_schedule_readings(
    config: ModelConfig,
    target: Optional[int] = None,
    max_decoders: int = 64,
    max_groups: int = 64,
    pair_size: int = 2,
) -> List[ScheduleReading]:
    """
    Count every ``(n_decoder, n_groups, share_norm)`` layer plan for a config's widths.

    Parameters
    ----------
    config: ModelConfig
        Source of the widths, head counts and vocabulary; its schedule is ignored.
    target: int, optional
        Keep only readings whose count equals this.
    max_decoders: int
        Largest decoder count tried.
    max_groups: int
        Largest share group count tried.
    pair_size: int
        Layers per share group.

    Returns
    -------
    list
        Matching readings, ordered by decoder count, group count, then shared norm first.
    """

    base = base_parameters(config)
    decoder = decoder_layer_parameters(config)
    readings = []
    for n_decoder in range(max_decoders + 1):
        for n_groups in range(max_groups + 1):
            if n_decoder + n_groups == 0:
                continue
            for share_norm in (True, False):
                if not share_norm and pair_size == 1:
                    continue  # same count as the shared norm reading
                norms = 1 if share_norm else pair_size
                group = mlp_parameters(config) + norms * config.hidden_size
                count = base + n_decoder * decoder + n_groups * group
                if target is None or count == target:
                    readings.append(
                        ScheduleReading(n_decoder, n_groups, share_norm, pair_size, count)
                    )
    return readings

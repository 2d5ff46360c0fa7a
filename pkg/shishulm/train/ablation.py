"""
Attention budget and placement grids.

Each entry of an :py:class:`AblationSpec` trains one layer plan (``n_bottom`` decoders, then
``n_shishu`` ShishuMLP layers, then ``n_top`` decoders) from the same seed and corpus with the
same budget. Entries run one after another; a finished entry leaves a ``DONE`` marker holding its
summary row, so an interrupted grid picks up where it stopped.
"""

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional

from dataclasses_json import Undefined, dataclass_json
from loguru import logger
from torch.utils.data import Dataset

from ..model.config import LayerSchedule, ModelConfig, ScheduleError, make_shishu_schedule
from ..model.params import count_parameters
from ..model.transformer import build_model
from ..protocols.atomic import atomic_write
from ..protocols.csv_report import CsvReport
from .config import TrainConfig, TrainError
from .trainer import train

DONE_MARKER = "DONE"
SUMMARY_FILE = "summary.csv"
SUMMARY_COLUMNS = [
    "name",
    "n_bottom",
    "n_shishu",
    "n_top",
    "pair_size",
    "schedule",
    "parameters",
    "train_loss",
    "val_loss",
    "perplexity",
    "status",
]


@dataclass_json(undefined=Undefined.RAISE)
@dataclass
class AblationEntry:
    """One grid cell."""

    name: str
    n_bottom: int
    n_shishu: int
    n_top: int = 0
    pair_size: int = 2
    """Layers per ShishuMLP share group; 1 trains unshared ShishuMLP layers."""

    @property
    def n_layers(self) -> int:
        """int: Total layers."""

        return self.n_bottom + self.n_shishu + self.n_top

    def schedule(self) -> LayerSchedule:
        """Build the entry's layer plan."""

        return make_shishu_schedule(self.n_layers, self.n_bottom, self.pair_size, self.n_top)


@dataclass_json(undefined=Undefined.RAISE)
@dataclass
class AblationSpec:
    """Contents of an ablation spec file."""

    model: ModelConfig
    train: TrainConfig
    entries: List[AblationEntry] = field(default_factory=list)

    def __post_init__(self):
        if not self.entries:
            raise TrainError("ablation spec has no entries")
        names = [e.name for e in self.entries]
        if len(set(names)) != len(names):
            raise TrainError("ablation entry names must be unique")
        for entry in self.entries:
            if entry.n_layers != self.model.n_layers:
                raise TrainError(
                    f"entry '{entry.name}' has {entry.n_layers} layers, model has "
                    f"{self.model.n_layers}"
                )
            try:
                entry.schedule()
            except ScheduleError as e:
                raise TrainError(f"entry '{entry.name}': {e}") from e

    def entry_config(self, entry: AblationEntry) -> ModelConfig:
        """Get the model config of an entry."""

        return replace(self.model, n_layers=entry.n_layers, schedule=entry.schedule())


@dataclass
class AblationResult:
    """Summary row of one entry."""

    name: str
    n_bottom: int
    n_shishu: int
    n_top: int
    pair_size: int
    schedule: str
    parameters: int
    train_loss: Optional[float] = None
    val_loss: Optional[float] = None
    perplexity: Optional[float] = None
    status: str = "ok"

    def to_row(self) -> list:
        """Values in ``SUMMARY_COLUMNS`` order."""

        return [getattr(self, c) for c in SUMMARY_COLUMNS]


def _result(spec: AblationSpec, entry: AblationEntry, **kwargs) -> AblationResult:
    config = spec.entry_config(entry)
    return AblationResult(
        name=entry.name,
        n_bottom=entry.n_bottom,
        n_shishu=entry.n_shishu,
        n_top=entry.n_top,
        pair_size=entry.pair_size,
        schedule=str(config.schedule),
        parameters=count_parameters(config),
        **kwargs,
    )


def run_ablation(
    spec: AblationSpec,
    train_set: Dataset,
    val_set: Optional[Dataset],
    out_dir: Path,
    header: Optional[Dict] = None,
) -> List[AblationResult]:
    """
    Train every entry of a grid and write ``summary.csv``.

    Entries with a ``DONE`` marker are not retrained. A failing entry is logged and recorded with
    status ``failed`` and the grid continues.

    Returns
    -------
    list
        One result per entry, in spec order.
    """

    out_dir = Path(out_dir)
    results = []
    for entry in spec.entries:
        entry_dir = out_dir / entry.name
        marker = entry_dir / DONE_MARKER
        if marker.exists():
            logger.info(f"ablation entry '{entry.name}' already done, skipping")
            with open(marker, "r") as f:
                results.append(AblationResult(**json.load(f)))
            continue

        config = spec.entry_config(entry)
        logger.info(f"ablation entry '{entry.name}': schedule '{config.schedule}'")
        try:
            model = build_model(config, spec.train.seed)
            rows = train(model, train_set, val_set, spec.train, entry_dir, header)
        except Exception as e:
            logger.error(f"ablation entry '{entry.name}' failed: {e}")
            results.append(_result(spec, entry, status="failed"))
            continue

        last = rows[-1]
        result = _result(
            spec,
            entry,
            train_loss=last.train_loss,
            val_loss=last.val_loss,
            perplexity=last.val_ppl,
        )
        atomic_write(marker, json.dumps(result.__dict__, sort_keys=True))
        results.append(result)

    report = CsvReport(list(SUMMARY_COLUMNS), provenance=dict(header or {}))
    for result in results:
        report.add_row(result.to_row())
    report.write(out_dir / SUMMARY_FILE)

    return results

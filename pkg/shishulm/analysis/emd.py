"""
Earth Mover's Distance between MLP weight distributions.

Adjacent MLP weight sets are compared per projection family (gate, up, down). With ``EMD_i``
between units ``i`` and ``i + 1`` and ``Delta_i`` the range of unit ``i``'s weights, the
range-normalized score is ``r_i = EMD_i / min(Delta_i, Delta_{i+1})`` and ``r_max = max_i r_i``.
Lower means more similar.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from loguru import logger
from scipy import optimize, stats

from ..model.transformer import ShishuLM
from ..protocols.csv_report import CsvReport

MAX_SAMPLES = 65536
MASS_TOLERANCE = 1e-9
LP_MAX_CELLS = 10000
FAMILIES = ("gate", "up", "down")

EMD_COLUMNS = ["family", "i", "unit_i", "unit_j", "emd", "delta_i", "delta_j", "r_i"]
RMAX_COLUMNS = ["family", "r_max", "r_max_x100", "undefined"]


class EmdError(Exception):
    """Error with an EMD computation"""


@dataclass
class DiscreteDistribution:
    """Masses on strictly increasing support points."""

    points: np.ndarray
    masses: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.masses = np.asarray(self.masses, dtype=np.float64)
        if self.points.ndim != 1 or self.points.shape != self.masses.shape:
            raise EmdError("points and masses must be 1-D and of equal length")
        if self.points.size == 0:
            raise EmdError("a distribution needs at least one point")
        if np.any(np.diff(self.points) <= 0):
            raise EmdError("support points must be strictly increasing")
        if np.any(self.masses < 0):
            raise EmdError("masses must not be negative")
        if abs(float(self.masses.sum()) - 1.0) > MASS_TOLERANCE:
            raise EmdError(f"masses sum to {self.masses.sum()}, not 1")

    def __len__(self) -> int:
        return self.points.size

    @classmethod
    def from_samples(cls, values: Sequence[float]):
        """Empirical distribution with equal mass per value (duplicates merged)."""

        values = np.asarray(values, dtype=np.float64).ravel()
        if values.size == 0:
            raise EmdError("no samples")
        points, counts = np.unique(values, return_counts=True)
        return cls(points, counts / values.size)

    @classmethod
    def point_mass(cls, point: float):
        """All mass on one point."""

        return cls(np.array([point]), np.array([1.0]))

    def shifted(self, offset: float):
        """The same distribution translated by ``offset``."""

        return DiscreteDistribution(self.points + offset, self.masses.copy())


def _monotone_transport(p: DiscreteDistribution, q: DiscreteDistribution) -> float:
    # north-west corner over sorted supports, optimal for |x - y| cost in 1-D
    i = j = 0
    left_p = float(p.masses[0])
    left_q = float(q.masses[0])
    cost = 0.0
    while i < len(p) and j < len(q):
        moved = min(left_p, left_q)
        cost += moved * abs(float(p.points[i]) - float(q.points[j]))
        left_p -= moved
        left_q -= moved
        if left_p <= left_q:
            i += 1
            if i < len(p):
                left_p = float(p.masses[i])
        else:
            j += 1
            if j < len(q):
                left_q = float(q.masses[j])
    return cost


def _linprog_transport(p: DiscreteDistribution, q: DiscreteDistribution) -> float:
    n, m = len(p), len(q)
    cost = np.abs(p.points[:, None] - q.points[None, :]).ravel()
    a_eq = np.zeros((n + m, n * m))
    for i in range(n):
        a_eq[i, i * m : (i + 1) * m] = 1.0
    for j in range(m):
        a_eq[n + j, j::m] = 1.0
    b_eq = np.concatenate([p.masses, q.masses])
    result = optimize.linprog(cost, A_eq=a_eq, b_eq=b_eq, bounds=(0, None), method="highs")
    if not result.success:
        raise EmdError(f"transport LP failed: {result.message}")
    return float(result.fun)


def emd_lp(p: DiscreteDistribution, q: DiscreteDistribution, method: str = "monotone") -> float:
    """
    Exact optimal transport cost with ``|x - y|`` ground distance.

    ``method`` is ``"monotone"`` (north-west matching over the sorted supports, exact in 1-D) or
    ``"linprog"`` (the generic transport LP through ``scipy.optimize.linprog``, only for small
    supports and exact to the solver tolerance).

    Raises
    ------
    EmdError
        The total masses differ, the LP is too large or an unknown method.
    """

    if abs(float(p.masses.sum()) - float(q.masses.sum())) > MASS_TOLERANCE:
        raise EmdError("total masses differ")
    if method == "monotone":
        return _monotone_transport(p, q)
    if method == "linprog":
        if len(p) * len(q) > LP_MAX_CELLS:
            raise EmdError(f"LP with {len(p) * len(q)} cells is too large")
        return _linprog_transport(p, q)
    raise EmdError(f"unknown method '{method}'")


def emd_1d(p: DiscreteDistribution, q: DiscreteDistribution) -> float:
    """Wasserstein-1 distance, the integral of ``|CDF_p - CDF_q|``."""

    return float(stats.wasserstein_distance(p.points, q.points, p.masses, q.masses))


def weight_distribution(
    weight: torch.Tensor, max_samples: int = MAX_SAMPLES, seed: int = 0
) -> DiscreteDistribution:
    """
    Empirical distribution of a weight tensor's values.

    Tensors with more than ``max_samples`` elements are subsampled uniformly without replacement,
    with a generator seeded by ``seed``.
    """

    values = weight.detach().cpu().to(torch.float64).numpy().ravel()
    if values.size == 0:
        raise EmdError("empty weight tensor")
    if values.size > max_samples:
        rng = np.random.default_rng(seed)
        values = values[rng.choice(values.size, size=max_samples, replace=False)]
    return DiscreteDistribution.from_samples(values)


def layer_range(weight: torch.Tensor) -> float:
    """``max - min`` of a weight tensor."""

    if weight.numel() == 0:
        raise EmdError("empty weight tensor")
    weight = weight.detach()
    return float(weight.max() - weight.min())


def mlp_units(model: ShishuLM) -> List[Tuple[str, int]]:
    """
    Unique MLP weight sets in depth order.

    Returns
    -------
    list
        ``(block name, first layer index)`` per unit; a share group counts once.
    """

    units = []
    seen = set()
    for layer, (key, _) in enumerate(model.plan):
        if key not in seen:
            seen.add(key)
            units.append((key, layer))
    return units


@dataclass
class FamilyScores:
    """Scores of one projection family."""

    family: str
    units: List[str]
    emd: List[float]
    ranges: List[float]
    r: List[Optional[float]]
    """``None`` where a range is zero."""
    matrix: np.ndarray

    @property
    def undefined(self) -> List[int]:
        """list: Indices ``i`` with an undefined ``r_i``."""

        return [i for i, r in enumerate(self.r) if r is None]

    @property
    def r_max(self) -> Optional[float]:
        """float: Largest defined ``r_i``, ``None`` if none is defined."""

        defined = [r for r in self.r if r is not None]
        return max(defined) if defined else None


@dataclass
class EmdReport:
    """Scores of every projection family."""

    families: Dict[str, FamilyScores] = field(default_factory=dict)

    def emd_csv(self, header: Optional[Dict] = None) -> CsvReport:
        """Adjacent pair rows of all families."""

        report = CsvReport(list(EMD_COLUMNS), provenance=dict(header or {}))
        for scores in self.families.values():
            for i, emd in enumerate(scores.emd):
                report.add_row(
                    [
                        scores.family,
                        i,
                        scores.units[i],
                        scores.units[i + 1],
                        emd,
                        scores.ranges[i],
                        scores.ranges[i + 1],
                        scores.r[i],
                    ]
                )
        return report

    def r_max_csv(self, header: Optional[Dict] = None) -> CsvReport:
        """One ``r_max`` row per family, also scaled by 100."""

        report = CsvReport(list(RMAX_COLUMNS), provenance=dict(header or {}))
        for scores in self.families.values():
            r_max = scores.r_max
            report.add_row(
                [
                    scores.family,
                    r_max,
                    None if r_max is None else r_max * 100,
                    " ".join(str(i) for i in scores.undefined),
                ]
            )
        return report

    def matrix_csv(self, family: str, header: Optional[Dict] = None) -> CsvReport:
        """Pairwise EMD matrix of a family, for heatmaps."""

        scores = self.families[family]
        report = CsvReport(["unit"] + scores.units, provenance=dict(header or {}))
        for name, row in zip(scores.units, scores.matrix):
            report.add_row([name] + [float(v) for v in row])
        return report


def family_scores(
    family: str,
    units: List[str],
    weights: List[torch.Tensor],
    max_samples: int = MAX_SAMPLES,
    seed: int = 0,
) -> FamilyScores:
    """Score one family of weight matrices given in depth order."""

    if len(weights) < 2:
        raise EmdError(f"need at least 2 MLP weight sets, got {len(weights)}")

    dists = [weight_distribution(w, max_samples, seed) for w in weights]
    ranges = [layer_range(w) for w in weights]

    n = len(dists)
    matrix = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            matrix[i, j] = matrix[j, i] = emd_1d(dists[i], dists[j])

    emd = [float(matrix[i, i + 1]) for i in range(n - 1)]
    r: List[Optional[float]] = []
    for i, value in enumerate(emd):
        scale = min(ranges[i], ranges[i + 1])
        if scale == 0:
            logger.warning(f"{family}: zero range at {units[i]}/{units[i + 1]}, r undefined")
            r.append(None)
        else:
            r.append(value / scale)

    return FamilyScores(family, list(units), emd, ranges, r, matrix)


def r_scores(model: ShishuLM, max_samples: int = MAX_SAMPLES, seed: int = 0) -> EmdReport:
    """
    Score the similarity of adjacent MLP weight sets of a model.

    Raises
    ------
    EmdError
        Fewer than two distinct MLP weight sets.
    """

    units = mlp_units(model)
    if len(units) < 2:
        raise EmdError(f"model has {len(units)} distinct MLP weight sets, need at least 2")

    names = [key for key, _ in units]
    report = EmdReport()
    for family in FAMILIES:
        weights = [getattr(model.layer_mlp(i), f"{family}_proj").weight for _, i in units]
        report.families[family] = family_scores(family, names, weights, max_samples, seed)
        logger.info(f"{family}: r_max {report.families[family].r_max}")
    return report

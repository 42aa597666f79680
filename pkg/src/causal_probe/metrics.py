"""Saliency-mass metrics and the analysis kernels of the evaluation drivers.

The critical set of a map is the minimal prefix of pixels, sorted by
importance (ties broken by ascending pixel index), whose cumulative mass
reaches k percent of the total.  Regional ratios count how much of that set
falls inside a semantic region; the nuisance instantiation is the headline
misalignment score.  A separate mass-weighted fraction serves reports that
weight by saliency mass instead of counting pixels.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateMapError, DimensionError, ParameterError
from .types import ACT, NUIS, SUP, SemanticPartition

DEFAULT_K = (1.0, 5.0, 10.0, 15.0, 20.0)

METRICS_CSV_HEADER = [
    "run_id", "view", "t", "k", "nmr", "rho_act", "rho_sup", "rho_nuis",
    "delta_s", "delta_a",
]


@dataclass(frozen=True)
class CriticalSet:
    k_percent: float
    indices: np.ndarray  # flat pixel indices, importance-descending
    mass_covered: float


def critical_set(saliency: np.ndarray, k_percent: float) -> CriticalSet:
    """Minimal top-mass pixel set covering k percent of the map's total mass."""
    if not 0.0 < k_percent <= 100.0:
        raise ParameterError(f"k must lie in (0, 100], got {k_percent}")
    flat = np.asarray(saliency, dtype=np.float64).reshape(-1)
    if (flat < 0).any():
        raise ParameterError("saliency map must be nonnegative")
    order = np.argsort(-flat, kind="stable")
    csum = np.cumsum(flat[order])
    total = float(csum[-1])
    if total <= 0.0:
        raise DegenerateMapError("saliency map carries no mass; critical set undefined")
    threshold = (k_percent / 100.0) * total
    n_take = int(np.searchsorted(csum, threshold, side="left")) + 1
    n_take = min(n_take, flat.size)
    return CriticalSet(
        k_percent=k_percent,
        indices=order[:n_take].copy(),
        mass_covered=float(csum[n_take - 1]),
    )


def regional_mass_ratio(saliency: np.ndarray, partition: SemanticPartition,
                        region: int, k_percent: float) -> float:
    """Fraction of the top-k critical pixels that lie inside the region."""
    if saliency.shape != partition.labels.shape:
        raise DimensionError(
            f"map {saliency.shape} vs partition {partition.labels.shape}"
        )
    cs = critical_set(saliency, k_percent)
    inside = partition.labels.reshape(-1)[cs.indices] == region
    return float(np.count_nonzero(inside)) / cs.indices.size


def nmr(saliency: np.ndarray, partition: SemanticPartition, k_percent: float) -> float:
    """Nuisance mass ratio: regional_mass_ratio for the nuisance region."""
    return regional_mass_ratio(saliency, partition, NUIS, k_percent)


def nuisance_mass_fraction(saliency: np.ndarray, partition: SemanticPartition,
                           region: int = NUIS) -> float:
    """Mass-weighted fraction of total saliency falling inside the region."""
    if saliency.shape != partition.labels.shape:
        raise DimensionError(
            f"map {saliency.shape} vs partition {partition.labels.shape}"
        )
    flat = np.asarray(saliency, dtype=np.float64)
    if (flat < 0).any():
        raise ParameterError("saliency map must be nonnegative")
    total = float(flat.sum())
    if total <= 0.0:
        raise DegenerateMapError("saliency map carries no mass; fraction undefined")
    return float(flat[partition.labels == region].sum()) / total


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    if a.shape != b.shape:
        raise DimensionError(f"shapes differ: {a.shape} vs {b.shape}")
    x = np.asarray(a, dtype=np.float64).reshape(-1)
    y = np.asarray(b, dtype=np.float64).reshape(-1)
    nx = np.linalg.norm(x)
    ny = np.linalg.norm(y)
    if nx == 0.0 or ny == 0.0:
        raise DegenerateMapError("cosine similarity undefined for a zero-norm input")
    return float(np.dot(x, y) / (nx * ny))


def action_mse(a: np.ndarray, b: np.ndarray) -> float:
    """Mean (per component, chunk included) of squared action differences."""
    if a.shape != b.shape:
        raise DimensionError(f"action shapes differ: {a.shape} vs {b.shape}")
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return float(np.mean(d * d))


def pearson(x: np.ndarray, y: np.ndarray) -> float:
    """Sample Pearson correlation; refuses degenerate inputs."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if x.shape != y.shape:
        raise DimensionError(f"lengths differ: {x.size} vs {y.size}")
    if x.size < 2:
        raise ParameterError("pearson needs at least two samples")
    xc = x - x.mean()
    yc = y - y.mean()
    sx = np.sqrt(np.sum(xc * xc))
    sy = np.sqrt(np.sum(yc * yc))
    if sx == 0.0 or sy == 0.0:
        raise DegenerateMapError("pearson undefined under zero variance")
    return float(np.sum(xc * yc) / (sx * sy))


def region_fractions(saliency: np.ndarray, partition: SemanticPartition) -> dict[int, float]:
    """Mass-weighted fractions for all three regions; sums to 1 over the cover."""
    return {r: nuisance_mass_fraction(saliency, partition, r) for r in (ACT, SUP, NUIS)}


@dataclass
class MetricsRecord:
    """One row of the fixed-header metrics CSV."""

    run_id: str
    view: str
    t: int
    k: float
    nmr: float | None = None
    rho_act: float | None = None
    rho_sup: float | None = None
    rho_nuis: float | None = None
    delta_s: float | None = None
    delta_a: float | None = None

    def row(self) -> list[str]:
        def fmt(v):
            return "" if v is None else repr(float(v)) if isinstance(v, float) else str(v)
        return [
            self.run_id, self.view, str(self.t), fmt(self.k), fmt(self.nmr),
            fmt(self.rho_act), fmt(self.rho_sup), fmt(self.rho_nuis),
            fmt(self.delta_s), fmt(self.delta_a),
        ]


def append_metrics_csv(path, records) -> None:
    """Append records, writing the fixed header if the file is new."""
    new = not os.path.exists(path)
    with open(path, "a", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        if new:
            writer.writerow(METRICS_CSV_HEADER)
        for rec in records:
            writer.writerow(rec.row())

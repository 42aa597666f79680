"""Core domain types: observations, semantic partitions, policy distributions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError

# Partition label values as stored in PGM partition files.
ACT = 1    # the manipulator / end-effector
SUP = 2    # task objects and supporting structures
NUIS = 3   # task-irrelevant background
REGION_NAMES = {ACT: "act", SUP: "sup", NUIS: "nuis"}

VIEW_ORDER = ("front", "overhead", "wrist")


@dataclass(frozen=True)
class SemanticPartition:
    """Per-pixel labeling into disjoint ACT / SUP / NUIS regions."""

    labels: np.ndarray  # uint8 (H, W), values in {ACT, SUP, NUIS}

    def __post_init__(self):
        lab = self.labels
        if lab.ndim != 2:
            raise ParameterError(f"partition labels must be 2-D, got {lab.shape}")
        if not np.isin(lab, (ACT, SUP, NUIS)).all():
            raise ParameterError("partition labels must cover every pixel with ACT/SUP/NUIS")

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    def mask(self, region: int) -> np.ndarray:
        """Boolean mask of pixels carrying the given label."""
        return self.labels == region

    def fraction(self, region: int) -> float:
        return float(np.count_nonzero(self.labels == region)) / self.labels.size


@dataclass
class MultiViewObservation:
    """One timestep of per-view RGB frames, float32 in [0, 1]."""

    views: dict[str, np.ndarray]
    timestep: int = 1

    def __post_init__(self):
        if not self.views:
            raise ParameterError("observation must carry at least one view")
        if self.timestep < 1:
            raise ParameterError(f"timestep must be >= 1, got {self.timestep}")
        dtypes = {v.dtype for v in self.views.values()}
        if len(dtypes) > 1:
            raise ParameterError(f"views must share one encoding, got {dtypes}")

    @property
    def view_names(self) -> tuple[str, ...]:
        return tuple(self.views.keys())


@dataclass(frozen=True)
class GaussianPolicyParams:
    """Isotropic Gaussian action distribution: mean vector plus shared std."""

    mean: np.ndarray
    sigma: float

    def __post_init__(self):
        if self.sigma <= 0:
            raise ParameterError(f"sigma must be positive, got {self.sigma}")
        if not np.all(np.isfinite(self.mean)):
            raise ParameterError("mean must be finite")


@dataclass
class TokenSequence:
    """Token embeddings split into a visual prefix and a textual suffix."""

    embeddings: np.ndarray  # (n_tokens, dim) float32
    n_visual: int

    def __post_init__(self):
        if self.embeddings.ndim != 2:
            raise ParameterError(f"embeddings must be 2-D, got {self.embeddings.shape}")
        if not 0 <= self.n_visual <= self.embeddings.shape[0]:
            raise ParameterError(
                f"visual prefix length {self.n_visual} outside [0, {self.embeddings.shape[0]}]"
            )

    @property
    def n_tokens(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]


@dataclass(frozen=True)
class MeanEmbeddings:
    """Per-modality marginal mean embeddings used as ablation baselines."""

    visual_mean: np.ndarray
    textual_mean: np.ndarray
    provenance: str = ""

    def __post_init__(self):
        if self.visual_mean.shape != self.textual_mean.shape:
            raise ParameterError("modality means must share one embedding dim")
        if not (np.all(np.isfinite(self.visual_mean)) and np.all(np.isfinite(self.textual_mean))):
            raise ParameterError("modality means must be finite")

"""Attention-mass and embedding-norm saliency baselines.

Both consume an introspection payload supplied by the policy endpoint, so
the toolkit never needs the model's internals: a head-averaged attention
matrix, final token embeddings, and the per-view spatial token layout.
Heatmaps produced here flow into the same metrics as interventional maps.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import PayloadError
from .imageops import bilinear_resize

ROW_SUM_TOL = 1e-4


@dataclass
class IntrospectionPayload:
    """Model internals for one observation.

    attention: (n_tokens, n_tokens) head-averaged float32, rows stochastic.
    May be supplied per-head as (heads, n, n); it is averaged on ingest.
    embeddings: (n_tokens, dim) float32.
    spatial_token_map: view name -> flat token indices forming that view's
    square spatial grid (non-spatial/special tokens excluded).
    """

    attention: np.ndarray
    embeddings: np.ndarray
    spatial_token_map: dict[str, list[int]] = field(default_factory=dict)

    def __post_init__(self):
        if self.attention.ndim == 3:
            self.attention = self.attention.mean(axis=0)
        seen: set[int] = set()
        n = self.attention.shape[0]
        for view, idx in self.spatial_token_map.items():
            s = set(int(i) for i in idx)
            if len(s) != len(idx):
                raise PayloadError(f"duplicate spatial token indices in view {view!r}")
            if seen & s:
                raise PayloadError(f"spatial token indices of view {view!r} overlap another view")
            if s and (min(s) < 0 or max(s) >= n):
                raise PayloadError(f"spatial token index out of range in view {view!r}")
            seen |= s

    @property
    def n_tokens(self) -> int:
        return self.attention.shape[0]


def _check_stochastic(attention: np.ndarray) -> None:
    if attention.ndim != 2 or attention.shape[0] != attention.shape[1]:
        raise PayloadError(f"attention must be square, got {attention.shape}")
    if (attention < 0).any():
        raise PayloadError("attention weights must be nonnegative")
    row_sums = attention.sum(axis=1, dtype=np.float64)
    worst = float(np.abs(row_sums - 1.0).max())
    if worst > ROW_SUM_TOL:
        raise PayloadError(f"attention rows must sum to 1 (worst deviation {worst:.2e})")


def attention_score(payload: IntrospectionPayload) -> np.ndarray:
    """Received-attention mass per token: column sums of the head-mean matrix."""
    _check_stochastic(payload.attention)
    return payload.attention.sum(axis=0, dtype=np.float64)


def token_norm_score(payload: IntrospectionPayload) -> np.ndarray:
    """L2 norm of each token's embedding."""
    emb = payload.embeddings
    if not np.all(np.isfinite(emb)):
        raise PayloadError("embeddings must be finite")
    return np.linalg.norm(emb.astype(np.float64), axis=1)


def tokens_to_heatmap(
    scores: np.ndarray,
    payload: IntrospectionPayload,
    view: str,
    out_dims: tuple[int, int],
) -> np.ndarray:
    """Spatial scores of one view as a dense map.

    Scores are filtered to the view's spatial tokens, reshaped row-major to
    the square token grid, and bilinearly upsampled to out_dims (w, h).
    """
    try:
        idx = payload.spatial_token_map[view]
    except KeyError:
        raise PayloadError(f"payload has no spatial token map for view {view!r}") from None
    side = int(round(len(idx) ** 0.5))
    if side * side != len(idx):
        raise PayloadError(
            f"view {view!r} has {len(idx)} spatial tokens, not a square grid"
        )
    grid = np.asarray(scores, dtype=np.float64)[np.asarray(idx, dtype=np.intp)]
    grid = grid.reshape(side, side)
    w, h = out_dims
    return bilinear_resize(grid, w, h)

"""Coarse Bernoulli keep-masks and their dense bilinear upsamples.

Masks are drawn from a counter-based generator (Philox) keyed by the master
seed, with the counter partitioned into (stream, mask index) lanes.  Any
single mask is therefore reconstructible from (master_seed, stream, k)
without replaying the rest of the batch, and generation order never affects
the bits.  Dense forms are computed lazily so very large batches stay cheap.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, DimensionError
from .imageops import bilinear_resize

_MASK_LANE = 64    # counter bits reserved per mask
_STREAM_LANE = 128  # counter bits reserved per stream


def _mask_rng(master_seed: int, k: int, stream: int = 0) -> np.random.Generator:
    counter = (stream << _STREAM_LANE) | (k << _MASK_LANE)
    return np.random.Generator(np.random.Philox(key=master_seed, counter=counter))


def coarse_bits(master_seed: int, k: int, p: float, grid: tuple[int, int], stream: int = 0) -> np.ndarray:
    """Bits of mask k: cell value 1 (keep) with probability p, (grid_h, grid_w) uint8."""
    gh, gw = grid
    rng = _mask_rng(master_seed, k, stream)
    u = rng.random(gh * gw)
    return (u < p).astype(np.uint8).reshape(gh, gw)


@dataclass(frozen=True)
class CoarseMask:
    bits: np.ndarray              # (grid_h, grid_w) uint8 in {0, 1}
    keep_prob: float
    seed_lineage: tuple[int, int]  # (master_seed, mask index)

    @property
    def grid(self) -> tuple[int, int]:
        return self.bits.shape


class _LazyDense:
    """Indexable view computing dense upsampled masks on demand."""

    def __init__(self, batch: "MaskBatch"):
        self._batch = batch

    def __len__(self) -> int:
        return len(self._batch.masks)

    def __getitem__(self, k: int) -> np.ndarray:
        w, h = self._batch.target
        bits = self._batch.masks[k].bits.astype(np.float32)
        return bilinear_resize(bits, w, h)

    def __iter__(self):
        for k in range(len(self)):
            yield self[k]


@dataclass
class MaskBatch:
    masks: list[CoarseMask]
    p: float
    target: tuple[int, int]  # (width, height) of the dense forms
    master_seed: int
    stream: int = 0

    @property
    def dense(self) -> _LazyDense:
        return _LazyDense(self)

    @property
    def n(self) -> int:
        return len(self.masks)

    def bits_array(self) -> np.ndarray:
        """All coarse bits stacked as (n, grid_h, grid_w) uint8."""
        return np.stack([m.bits for m in self.masks])

    def never_dropped_cells(self) -> list[int]:
        """Flat indices of cells kept by every mask; their scores are undefined."""
        kept_by_all = self.bits_array().min(axis=0)
        return [int(i) for i in np.flatnonzero(kept_by_all.reshape(-1))]

    def manifest(self) -> dict:
        gh, gw = self.masks[0].grid if self.masks else (0, 0)
        return {
            "master_seed": self.master_seed,
            "stream": self.stream,
            "n": self.n,
            "p": self.p,
            "grid": [gh, gw],
            "target": list(self.target),
        }

    def save_manifest(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.manifest(), f, indent=2)
            f.write("\n")


def sample_mask_batch(
    n: int,
    p: float,
    grid: tuple[int, int],
    target: tuple[int, int],
    master_seed: int,
    stream: int = 0,
) -> MaskBatch:
    """Draw n coarse Bernoulli(p) keep-masks, dense forms at the target size.

    p = 1 is rejected because downstream normalization divides by (1 - p).
    """
    if not 0.0 < p < 1.0:
        raise ParameterError(f"keep probability must lie in (0, 1), got {p}")
    if n < 1:
        raise ParameterError(f"need at least one mask, got n={n}")
    masks = [
        CoarseMask(bits=coarse_bits(master_seed, k, p, grid, stream), keep_prob=p,
                   seed_lineage=(master_seed, k))
        for k in range(n)
    ]
    return MaskBatch(masks=masks, p=p, target=target, master_seed=master_seed, stream=stream)


def cell_center_pixels(grid: tuple[int, int], target: tuple[int, int]) -> dict[int, tuple[int, int]]:
    """Pixels whose dense-mask value equals one coarse cell's bit exactly.

    Maps flat cell index -> (row, col) of a pixel whose bilinear sample
    position lands on that cell with weight 1 (includes border-clamped
    pixels).  Empty for cells no pixel hits exactly; target sizes that are
    odd multiples of the grid cover every cell.
    """
    gh, gw = grid
    w, h = target
    out: dict[int, tuple[int, int]] = {}
    ys = {}
    for i in range(h):
        pos = min(max((i + 0.5) * gh / h - 0.5, 0.0), gh - 1.0)
        if pos == int(pos):
            ys.setdefault(int(pos), i)
    for j in range(w):
        pos = min(max((j + 0.5) * gw / w - 0.5, 0.0), gw - 1.0)
        if pos == int(pos):
            for cy, i in ys.items():
                out.setdefault(cy * gw + int(pos), (i, j))
    return out


def blend(obs: np.ndarray, blurred: np.ndarray, dense_mask: np.ndarray) -> np.ndarray:
    """Per-pixel convex mix: obs where the mask keeps, blurred where it drops.

    Computed as obs * m + blurred * (1 - m) so an all-ones mask returns obs
    bit-exactly and an all-zeros mask returns blurred bit-exactly.
    """
    if obs.shape != blurred.shape:
        raise DimensionError(f"obs {obs.shape} vs blurred {blurred.shape}")
    if dense_mask.shape != obs.shape[:2]:
        raise DimensionError(f"mask {dense_mask.shape} vs image {obs.shape[:2]}")
    m = dense_mask if obs.ndim == 2 else dense_mask[:, :, None]
    return (obs * m + blurred * (1.0 - m)).astype(obs.dtype)

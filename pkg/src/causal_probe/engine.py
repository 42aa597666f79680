"""Interventional saliency: randomized-masking attribution over an episode.

For each computed timestep the policy is queried on the clean observation
and on N mask-blended variants (original where a mask keeps, blurred where
it drops).  The squared action deviation of each variant is accumulated
into every view's map along the dropped area, then normalized by the fixed
occlusion mass N * (1 - p).  Frames skipped by the temporal stride are
filled by linear interpolation between neighboring computed frames.

Maps are accumulated in float64 with a mask-index-ordered fold, so the
value over any coarse cell's exact-weight pixel reproduces the per-token
fixed-denominator estimator bit for bit.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    DimensionError,
    NumericError,
    ParameterError,
    TransportError,
)
from .imageops import bilinear_resize, gaussian_blur
from .masks import MaskBatch, blend, sample_mask_batch
from .policy import Policy
from .types import GaussianPolicyParams, MeanEmbeddings, MultiViewObservation, TokenSequence

_QUERY_CHUNK = 32  # policy queries dispatched per batch; results folded in k order


@dataclass(frozen=True)
class IssConfig:
    n_masks: int = 100
    keep_prob: float = 0.3
    stride: int = 1
    blur_sigma: float = 9.0
    grid: tuple[int, int] = (7, 7)
    policy_sigma: float = 1.0
    resample_per_step: bool = False

    def __post_init__(self):
        if not 0.0 < self.keep_prob < 1.0:
            raise ParameterError(f"keep_prob must lie in (0, 1), got {self.keep_prob}")
        if self.n_masks < 1:
            raise ParameterError(f"n_masks must be >= 1, got {self.n_masks}")
        if self.stride < 1:
            raise ParameterError(f"stride must be >= 1, got {self.stride}")
        if self.blur_sigma <= 0:
            raise ParameterError(f"blur_sigma must be positive, got {self.blur_sigma}")
        if self.policy_sigma <= 0:
            raise ParameterError(f"policy_sigma must be positive, got {self.policy_sigma}")

    def to_json(self) -> dict:
        return {
            "n_masks": self.n_masks,
            "keep_prob": self.keep_prob,
            "stride": self.stride,
            "blur_sigma": self.blur_sigma,
            "grid": list(self.grid),
            "policy_sigma": self.policy_sigma,
            "resample_per_step": self.resample_per_step,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "IssConfig":
        kw = dict(obj)
        if "grid" in kw:
            kw["grid"] = tuple(kw["grid"])
        return cls(**kw)


@dataclass
class SaliencyStream:
    """Per-view saliency maps for every frame of one episode.

    maps[view] has shape (T, H, W) float64; frames listed in computed_frames
    (1-indexed) were measured, the rest are interpolated (or zero until
    interpolate_stream runs).
    """

    maps: dict[str, np.ndarray]
    computed_frames: list[int]
    config: IssConfig
    master_seed: int
    undefined_cells: dict[str, list[int]] = field(default_factory=dict)
    baseline_actions: dict[int, np.ndarray] = field(default_factory=dict)
    mean_deltas: dict[int, float] = field(default_factory=dict)
    method: str = "iss"

    @property
    def views(self) -> tuple[str, ...]:
        return tuple(self.maps.keys())

    @property
    def n_frames(self) -> int:
        first = next(iter(self.maps.values()))
        return first.shape[0]

    def frame(self, view: str, t: int) -> np.ndarray:
        """Map of view at 1-indexed timestep t."""
        return self.maps[view][t - 1]


def computed_timesteps(n_frames: int, stride: int) -> list[int]:
    """1-indexed measured frames: every stride-th from 1, plus the last frame."""
    steps = list(range(1, n_frames + 1, stride))
    if steps[-1] != n_frames:
        steps.append(n_frames)
    return steps


def _squared_deviation(a: np.ndarray, b: np.ndarray) -> float:
    """Sum of squared differences over the whole action chunk."""
    if a.shape != b.shape:
        raise DimensionError(f"action shapes differ: {a.shape} vs {b.shape}")
    d = a.astype(np.float64) - b.astype(np.float64)
    return float(np.sum(d * d))


def iss_stream(
    episode,
    policy: Policy,
    cfg: IssConfig,
    master_seed: int,
    instruction: str = "",
) -> SaliencyStream:
    """Run the interventional masking procedure over a recorded episode.

    The baseline action is recomputed from the recorded observation at every
    computed timestep (teacher forcing); perturbed queries never feed back
    into the episode.  Masks are drawn once per view and reused at every
    timestep unless cfg.resample_per_step is set.
    """
    episode = list(episode)
    if not episode:
        raise ParameterError("episode is empty")
    views = list(episode[0].views.keys())
    n_views = len(views)
    dims = {v: episode[0].views[v].shape for v in views}
    T = len(episode)
    steps = computed_timesteps(T, cfg.stride)

    maps = {
        v: np.zeros((T, dims[v][0], dims[v][1]), dtype=np.float64) for v in views
    }
    undefined: dict[str, set[int]] = {v: set() for v in views}
    baseline_actions: dict[int, np.ndarray] = {}
    mean_deltas: dict[int, float] = {}

    def batches_for(step_index: int) -> dict[str, MaskBatch]:
        out = {}
        for vi, view in enumerate(views):
            stream = vi + n_views * step_index if cfg.resample_per_step else vi
            h, w = dims[view][:2]
            out[view] = sample_mask_batch(
                cfg.n_masks, cfg.keep_prob, cfg.grid, (w, h), master_seed, stream=stream
            )
        return out

    batches = batches_for(0)
    denom = cfg.n_masks * (1.0 - cfg.keep_prob)

    for si, t in enumerate(steps):
        obs = episode[t - 1]
        if list(obs.views.keys()) != views:
            raise ParameterError(f"view set changed at timestep {t}")
        if cfg.resample_per_step and si > 0:
            batches = batches_for(si)

        blurred = {v: gaussian_blur(obs.views[v], cfg.blur_sigma) for v in views}
        try:
            a_star = policy.act(obs, instruction)
        except TransportError as e:
            raise TransportError(f"baseline query failed at t={t}: {e}") from e
        baseline_actions[t] = a_star
        delta_total = 0.0

        dense32 = {v: batches[v].dense for v in views}
        # Queries go out in chunks; the reduction stays an ordered fold by k.
        for start in range(0, cfg.n_masks, _QUERY_CHUNK):
            ks = range(start, min(start + _QUERY_CHUNK, cfg.n_masks))
            chunk_masks = {v: [dense32[v][k] for k in ks] for v in views}
            perturbed = [
                MultiViewObservation(
                    views={v: blend(obs.views[v], blurred[v], chunk_masks[v][j]) for v in views},
                    timestep=t,
                )
                for j, _ in enumerate(ks)
            ]
            try:
                actions = policy.act_batch(perturbed, instruction)
            except TransportError as e:
                raise TransportError(
                    f"policy query failed at t={t}, masks {ks.start}..{ks.stop - 1}: {e}"
                ) from e
            for j, k in enumerate(ks):
                delta = _squared_deviation(actions[j], a_star)
                if not np.isfinite(delta):
                    raise NumericError(f"non-finite deviation at t={t}, mask k={k}")
                delta_total += delta
                for v in views:
                    inv = 1.0 - chunk_masks[v][j].astype(np.float64)
                    maps[v][t - 1] += delta * inv

        mean_deltas[t] = delta_total / cfg.n_masks
        for v in views:
            maps[v][t - 1] /= denom
            undefined[v].update(batches[v].never_dropped_cells())

    stream = SaliencyStream(
        maps=maps,
        computed_frames=steps,
        config=cfg,
        master_seed=master_seed,
        undefined_cells={v: sorted(undefined[v]) for v in views},
        baseline_actions=baseline_actions,
        mean_deltas=mean_deltas,
    )
    return interpolate_stream(stream)


def interpolate_stream(stream: SaliencyStream) -> SaliencyStream:
    """Fill non-computed frames by linear interpolation; computed frames stay."""
    T = stream.n_frames
    s = stream.config.stride
    computed = set(stream.computed_frames)
    maps = {v: m.copy() for v, m in stream.maps.items()}
    for t in range(1, T + 1):
        if t in computed:
            continue
        t_prev = s * ((t - 1) // s) + 1
        t_next = min(t_prev + s, T)
        if t_prev not in computed or t_next not in computed:
            raise ParameterError(
                f"stream is missing computed frame {t_prev} or {t_next} needed for t={t}"
            )
        alpha = (t - t_prev) / (t_next - t_prev)
        for v in maps:
            maps[v][t - 1] = (1.0 - alpha) * maps[v][t_prev - 1] + alpha * maps[v][t_next - 1]
    return replace(stream, maps=maps)


def horizon_sum(stream: SaliencyStream) -> dict[str, np.ndarray]:
    """Derived report: per-view maps summed over the full horizon."""
    return {v: m.sum(axis=0) for v, m in stream.maps.items()}


def iss_token_estimate(losses: np.ndarray, mask_bits_for_token: np.ndarray, p: float) -> float:
    """Fixed-denominator per-token estimate from N mask draws.

    (1 / (N * (1 - p))) * sum_k (1 - m_k) * L_k, folded in ascending k so the
    result matches the map accumulation bit for bit.  The theoretical drop
    probability (1 - p) is used, never the empirical count.
    """
    losses = np.asarray(losses, dtype=np.float64)
    bits = np.asarray(mask_bits_for_token)
    if losses.shape != bits.shape or losses.ndim != 1:
        raise DimensionError(f"losses {losses.shape} vs mask bits {bits.shape}")
    if not 0.0 < p < 1.0:
        raise ParameterError(f"keep probability must lie in (0, 1), got {p}")
    acc = 0.0
    for k in range(losses.shape[0]):
        acc += (1.0 - float(bits[k])) * float(losses[k])
    return acc / (losses.shape[0] * (1.0 - p))


def enumerate_mask_losses(
    policy: Policy,
    obs: MultiViewObservation,
    grid: tuple[int, int],
    blur_sigma: float = 9.0,
    instruction: str = "",
) -> np.ndarray:
    """Loss of every possible coarse mask over all views, indexed by bit code.

    Cell j of view v maps to bit v * grid_h * grid_w + j (view-major, row
    major within a view); bit set means the cell is kept.  Feasible only for
    small grids: the total cell count M must satisfy M <= 16.
    """
    gh, gw = grid
    views = list(obs.views.keys())
    m_cells = gh * gw * len(views)
    if m_cells > 16:
        raise ParameterError(f"exact enumeration refused: M={m_cells} cells exceeds 16")
    blurred = {v: gaussian_blur(obs.views[v], blur_sigma) for v in views}
    a_star = policy.act(obs, instruction)

    losses = np.empty(2 ** m_cells, dtype=np.float64)
    for code in range(2 ** m_cells):
        views_blended = {}
        for vi, v in enumerate(views):
            bits = np.array(
                [(code >> (vi * gh * gw + j)) & 1 for j in range(gh * gw)],
                dtype=np.float32,
            ).reshape(gh, gw)
            h, w = obs.views[v].shape[:2]
            dense = bilinear_resize(bits, w, h)
            views_blended[v] = blend(obs.views[v], blurred[v], dense)
        a_hat = policy.act(MultiViewObservation(views=views_blended, timestep=obs.timestep),
                           instruction)
        losses[code] = _squared_deviation(a_hat, a_star)
    return losses


def psi_from_losses(losses: np.ndarray, m_cells: int, p: float, token_index: int) -> float:
    """Expected loss given that one cell is dropped, from an enumerated loss table."""
    if not 0.0 < p < 1.0:
        raise ParameterError(f"keep probability must lie in (0, 1), got {p}")
    if not 0 <= token_index < m_cells:
        raise ParameterError(f"token index {token_index} outside [0, {m_cells})")
    total = 0.0
    for code in range(2 ** m_cells):
        if (code >> token_index) & 1:
            continue
        kept = bin(code).count("1")
        weight = (p ** kept) * ((1.0 - p) ** (m_cells - kept))
        total += weight * float(losses[code])
    return total / (1.0 - p)


def estimate_psi_exact(
    policy: Policy,
    obs: MultiViewObservation,
    grid: tuple[int, int],
    p: float,
    token_index: int,
    blur_sigma: float = 9.0,
    instruction: str = "",
) -> float:
    """Exact occlusion risk of one cell by full mask enumeration (M <= 16)."""
    gh, gw = grid
    m_cells = gh * gw * len(obs.views)
    losses = enumerate_mask_losses(policy, obs, grid, blur_sigma, instruction)
    return psi_from_losses(losses, m_cells, p, token_index)


def kl_isotropic_gaussian(p1: GaussianPolicyParams, p2: GaussianPolicyParams) -> float:
    """KL divergence between equal-covariance isotropic Gaussians.

    Closed form ||mu1 - mu2||^2 / (2 sigma^2); unequal sigmas are refused
    because the simplification assumes homoscedastic distributions.
    """
    if p1.sigma != p2.sigma:
        raise ParameterError(
            "KL closed form requires equal sigmas (homoscedasticity assumption); "
            f"got {p1.sigma} vs {p2.sigma}"
        )
    d = p1.mean.astype(np.float64) - p2.mean.astype(np.float64)
    return float(np.sum(d * d)) / (2.0 * p1.sigma ** 2)


def mean_ablate_token(seq: TokenSequence, index: int, means: MeanEmbeddings) -> TokenSequence:
    """Replace one token by its modality's marginal mean embedding.

    index is 0-based; tokens below seq.n_visual take the visual mean, the
    rest the textual mean.  The input sequence is left untouched.
    """
    if not 0 <= index < seq.n_tokens:
        raise ParameterError(f"token index {index} outside [0, {seq.n_tokens})")
    if means.visual_mean.shape[0] != seq.dim:
        raise DimensionError(
            f"mean embedding dim {means.visual_mean.shape[0]} != sequence dim {seq.dim}"
        )
    emb = seq.embeddings.copy()
    mean = means.visual_mean if index < seq.n_visual else means.textual_mean
    emb[index] = mean.astype(emb.dtype)
    return TokenSequence(embeddings=emb, n_visual=seq.n_visual)


def save_stream(stream: SaliencyStream, out_dir, run_id: str = "run") -> dict:
    """Write one PFM per (view, frame) plus a JSON manifest; returns the manifest."""
    from .formats import write_pfm

    os.makedirs(out_dir, exist_ok=True)
    files = {}
    for view in stream.views:
        for t in range(1, stream.n_frames + 1):
            name = f"{view}_t{t:04d}.pfm"
            write_pfm(stream.frame(view, t).astype(np.float32), os.path.join(out_dir, name))
            files[f"{view}/{t}"] = name
    manifest = {
        "run_id": run_id,
        "config": stream.config.to_json(),
        "master_seed": stream.master_seed,
        "computed_frames": stream.computed_frames,
        "undefined_cells": stream.undefined_cells,
        "files": files,
    }
    with open(os.path.join(out_dir, "stream.json"), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2)
        f.write("\n")
    return manifest

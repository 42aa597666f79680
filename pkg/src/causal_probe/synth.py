"""Procedural scenes with exact semantic partitions for desk-scale studies.

Each view shows a bright movable block (ACT), a mid-tone static block (SUP),
and a dark softly-textured background (NUIS).  The strong brightness
contrast between regions and background makes blur-based occlusion move
region means, which is what interventional masking needs to see; partitions
follow the rectangles exactly, so region fractions are known in closed form.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError
from .imageops import gaussian_blur
from .policy import SyntheticPolicySpec
from .store import Episode, mask_name, save_episode
from .types import ACT, NUIS, SUP, MultiViewObservation, SemanticPartition, VIEW_ORDER


@dataclass
class SceneSpec:
    width: int = 64
    height: int = 64
    views: tuple[str, ...] = VIEW_ORDER
    n_frames: int = 10
    act_size: tuple[int, int] = (12, 12)   # (h, w) of the moving block
    sup_size: tuple[int, int] = (16, 10)
    act_level: float = 0.9
    sup_level: float = 0.55
    background_level: float = 0.18
    background_texture: float = 0.06
    texture_sigma: float = 3.0
    static_blocks: bool = False
    seed: int = 0
    instruction: str = "reach the bright block"
    task: str = "reach_block"
    split: str = "seen"
    action_dim: int = 8

    def to_json(self) -> dict:
        out = {k: getattr(self, k) for k in (
            "width", "height", "n_frames", "act_level", "sup_level",
            "background_level", "background_texture", "texture_sigma",
            "static_blocks", "seed", "instruction", "task", "split", "action_dim",
        )}
        out["views"] = list(self.views)
        out["act_size"] = list(self.act_size)
        out["sup_size"] = list(self.sup_size)
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "SceneSpec":
        kw = dict(obj)
        for key in ("views", "act_size", "sup_size"):
            if key in kw:
                kw[key] = tuple(kw[key])
        return cls(**kw)


def _rng(seed: int, lane: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=seed, counter=lane << 64))


def _background(spec: SceneSpec, view_index: int) -> np.ndarray:
    rng = _rng(spec.seed, view_index)
    noise = rng.normal(0.0, 1.0, size=(spec.height, spec.width))
    smooth = gaussian_blur(noise, spec.texture_sigma)
    smooth /= max(np.abs(smooth).max(), 1e-9)
    base = spec.background_level + spec.background_texture * smooth
    img = np.repeat(base[:, :, None], 3, axis=2)
    # mild per-channel tint keeps views distinguishable
    tint = 1.0 + 0.05 * np.array([view_index % 3 == c for c in range(3)], dtype=np.float64)
    return np.clip(img * tint, 0.0, 1.0)


def _block_positions(spec: SceneSpec, view_index: int) -> list[tuple[int, int, int, int]]:
    """Per-frame (top, left) of the ACT block plus the static SUP placement."""
    ah, aw = spec.act_size
    span_y = spec.height - ah
    span_x = spec.width - aw
    rng = _rng(spec.seed, 100 + view_index)
    y0 = int(rng.integers(0, max(span_y // 3, 1)))
    x0 = int(rng.integers(0, max(span_x // 3, 1)))
    y1 = span_y - 1 if span_y > 0 else 0
    x1 = span_x - 1 if span_x > 0 else 0
    out = []
    for t in range(spec.n_frames):
        a = 0.0 if spec.static_blocks else t / max(spec.n_frames - 1, 1)
        out.append((round(y0 + a * (y1 - y0)), round(x0 + a * (x1 - x0))))
    return out


def _sup_position(spec: SceneSpec, view_index: int) -> tuple[int, int]:
    sh, sw = spec.sup_size
    rng = _rng(spec.seed, 200 + view_index)
    top = int(rng.integers(0, max(spec.height - sh, 1)))
    left = int(rng.integers(max((spec.width - sw) // 2, 1), max(spec.width - sw, 2)))
    return top, left


def generate_frames(spec: SceneSpec):
    """In-memory episode: (frames, partitions) without touching disk."""
    if spec.act_size[0] > spec.height or spec.act_size[1] > spec.width:
        raise ParameterError("ACT block does not fit in the frame")
    if spec.sup_size[0] > spec.height or spec.sup_size[1] > spec.width:
        raise ParameterError("SUP block does not fit in the frame")
    frames = []
    partitions = []
    per_view_act = {v: _block_positions(spec, i) for i, v in enumerate(spec.views)}
    per_view_sup = {v: _sup_position(spec, i) for i, v in enumerate(spec.views)}
    backgrounds = {v: _background(spec, i) for i, v in enumerate(spec.views)}

    for t in range(spec.n_frames):
        view_imgs = {}
        view_parts = {}
        for v in spec.views:
            img = backgrounds[v].copy()
            labels = np.full((spec.height, spec.width), NUIS, dtype=np.uint8)
            sy, sx = per_view_sup[v]
            sh, sw = spec.sup_size
            img[sy : sy + sh, sx : sx + sw] = spec.sup_level
            labels[sy : sy + sh, sx : sx + sw] = SUP
            ay, ax = per_view_act[v][t]
            ah, aw = spec.act_size
            img[ay : ay + ah, ax : ax + aw] = spec.act_level
            labels[ay : ay + ah, ax : ax + aw] = ACT
            view_imgs[v] = img.astype(np.float32)
            view_parts[v] = SemanticPartition(labels=labels)
        frames.append(MultiViewObservation(views=view_imgs, timestep=t + 1))
        partitions.append(view_parts)
    return frames, partitions


def generate_episode(spec: SceneSpec) -> Episode:
    frames, partitions = generate_frames(spec)
    meta = {
        "act_positions": {v: [list(p) for p in _block_positions(spec, i)]
                          for i, v in enumerate(spec.views)},
        "sup_positions": {v: list(_sup_position(spec, i))
                          for i, v in enumerate(spec.views)},
        "act_size": list(spec.act_size),
        "sup_size": list(spec.sup_size),
    }
    return Episode(
        frames=frames, partitions=partitions, instruction=spec.instruction,
        action_dim=spec.action_dim, task=spec.task, split=spec.split, meta=meta,
    )


def default_policy_spec(action_dim: int = 8, eta: float = 0.0, seed: int = 0) -> SyntheticPolicySpec:
    """Balanced nuisance-mix weights: causal and nuisance arms equal in norm."""
    w = np.zeros((action_dim, 2))
    w[:, 0] = 1.0
    w[:, 1] = 1.0
    return SyntheticPolicySpec(kind="nuisance_mix", weights=w, eta=eta, seed=seed)


def write_synthetic_store(scene: SceneSpec, out_dir, n_episodes: int = 3,
                          eta: float = 0.0) -> dict:
    """Render episodes, write the store, the policy spec, and a run manifest."""
    os.makedirs(out_dir, exist_ok=True)
    episode_dirs = []
    for e in range(n_episodes):
        ep_spec = SceneSpec.from_json({**scene.to_json(), "seed": scene.seed + e,
                                       "task": f"{scene.task}_{e:02d}"})
        episode = generate_episode(ep_spec)
        ep_dir = os.path.join(out_dir, f"episode_{e:03d}")
        save_episode(episode, ep_dir)
        episode_dirs.append(ep_dir)

    policy_spec = default_policy_spec(scene.action_dim, eta=eta, seed=scene.seed)
    policy_obj = policy_spec.to_json()
    policy_obj["partitions"] = {
        v: os.path.join("episode_000", mask_name(1, v)) for v in scene.views
    }
    policy_path = os.path.join(out_dir, "policy.json")
    with open(policy_path, "w", encoding="utf-8") as f:
        json.dump(policy_obj, f, indent=2)
        f.write("\n")

    manifest = {
        "run_id": scene.task,
        "episodes": [os.path.relpath(d, out_dir) for d in episode_dirs],
        "policy": "synth:policy.json",
        "iss": {"n_masks": 100, "keep_prob": 0.3, "stride": 1, "blur_sigma": 9.0,
                "grid": [7, 7]},
        "k": [1, 5, 10, 15, 20],
        "master_seed": scene.seed,
        "out_dir": "out",
        "scene": scene.to_json(),
    }
    manifest_path = os.path.join(out_dir, "manifest.json")
    with open(manifest_path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2)
        f.write("\n")
    return manifest

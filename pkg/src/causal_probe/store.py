"""On-disk episode layout: per-view frame PNGs, partition PGMs, episode.json.

One directory per episode:
    frame_0001_front.png      8-bit RGB frame (1-indexed)
    frame_0001_front_mask.pgm semantic partition for that frame/view
    episode.json              {"T", "views", "instruction", "action_dim",
                               "task", "split", optional "actions"}
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

from .errors import FormatError, ParameterError
from .formats import read_partition_pgm, read_png, write_pgm, write_png
from .imageops import to_f32, to_u8
from .types import MultiViewObservation, SemanticPartition


def frame_name(t: int, view: str) -> str:
    return f"frame_{t:04d}_{view}.png"


def mask_name(t: int, view: str) -> str:
    return f"frame_{t:04d}_{view}_mask.pgm"


@dataclass
class Episode:
    frames: list[MultiViewObservation]
    partitions: list[dict[str, SemanticPartition]]
    instruction: str = ""
    action_dim: int = 8
    task: str = ""
    split: str = "seen"
    path: str = ""
    actions: list | None = None
    meta: dict = field(default_factory=dict)

    @property
    def T(self) -> int:
        return len(self.frames)

    @property
    def views(self) -> tuple[str, ...]:
        return self.frames[0].view_names

    def first_partitions(self) -> dict[str, SemanticPartition]:
        return self.partitions[0]


def save_episode(episode: Episode, directory) -> None:
    os.makedirs(directory, exist_ok=True)
    for t, obs in enumerate(episode.frames, start=1):
        for view, img in obs.views.items():
            write_png(to_u8(img), os.path.join(directory, frame_name(t, view)))
            write_pgm(episode.partitions[t - 1][view].labels,
                      os.path.join(directory, mask_name(t, view)))
    meta = {
        "T": episode.T,
        "views": list(episode.views),
        "instruction": episode.instruction,
        "action_dim": episode.action_dim,
        "task": episode.task,
        "split": episode.split,
    }
    if episode.actions is not None:
        meta["actions"] = episode.actions
    meta.update(episode.meta)
    with open(os.path.join(directory, "episode.json"), "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=2)
        f.write("\n")


def load_episode(directory) -> Episode:
    meta_path = os.path.join(directory, "episode.json")
    if not os.path.exists(meta_path):
        raise FormatError(f"{directory} has no episode.json")
    with open(meta_path, "r", encoding="utf-8") as f:
        meta = json.load(f)
    T = int(meta["T"])
    views = list(meta["views"])
    if T < 1 or not views:
        raise FormatError(f"{directory}: episode declares T={T}, views={views}")

    frames = []
    partitions = []
    for t in range(1, T + 1):
        view_imgs = {}
        view_parts = {}
        for view in views:
            fpath = os.path.join(directory, frame_name(t, view))
            mpath = os.path.join(directory, mask_name(t, view))
            if not os.path.exists(fpath) or not os.path.exists(mpath):
                raise FormatError(f"{directory}: missing frame or mask for t={t}, view={view}")
            view_imgs[view] = to_f32(read_png(fpath))
            view_parts[view] = read_partition_pgm(mpath)
        frames.append(MultiViewObservation(views=view_imgs, timestep=t))
        partitions.append(view_parts)

    extra = os.path.join(directory, frame_name(T + 1, views[0]))
    if os.path.exists(extra):
        raise FormatError(f"{directory}: more frames on disk than the declared T={T}")

    known = {"T", "views", "instruction", "action_dim", "task", "split", "actions"}
    return Episode(
        frames=frames,
        partitions=partitions,
        instruction=meta.get("instruction", ""),
        action_dim=int(meta.get("action_dim", 8)),
        task=meta.get("task", ""),
        split=meta.get("split", "seen"),
        path=str(directory),
        actions=meta.get("actions"),
        meta={k: v for k, v in meta.items() if k not in known},
    )


def episode_name(episode: Episode) -> str:
    base = os.path.basename(os.path.normpath(episode.path)) if episode.path else ""
    return base or episode.task or "episode"


def validate_episode_dirs(paths) -> list[str]:
    missing = [str(p) for p in paths if not os.path.exists(os.path.join(p, "episode.json"))]
    if missing:
        raise ParameterError(f"episode directories without episode.json: {missing}")
    return [str(p) for p in paths]

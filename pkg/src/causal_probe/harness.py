"""Run manifests and the drivers behind every CLI command.

A manifest names the episodes, the policy endpoint, the masking
configuration, the perturbations, and the output directory; every driver is
rerunnable, and identical manifests plus seeds give identical CSV and PFM
payloads.  Every output file is referenced from a JSON manifest carrying
the config snapshot.
"""

from __future__ import annotations

import csv
import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .engine import IssConfig, iss_stream, save_stream
from .errors import CapabilityError, DegenerateMapError, ParameterError
from .estimators import AttentionExplainer, IssExplainer, TokenNormExplainer
from .imageops import to_u8
from .interventions import NOISE_SIGMA, PerturbationSpec
from .metrics import (
    DEFAULT_K,
    MetricsRecord,
    action_mse,
    append_metrics_csv,
    cosine_similarity,
    nmr,
    pearson,
    regional_mass_ratio,
)
from .plotting import grouped_bar_png, save_overlay, scatter_png
from .store import Episode, episode_name, load_episode, validate_episode_dirs
from .synth import SceneSpec, write_synthetic_store
from .transport import connect
from .types import ACT, NUIS, SUP, MultiViewObservation


@dataclass
class RunManifest:
    run_id: str
    episodes: list[str]
    policy: str
    iss: IssConfig = field(default_factory=IssConfig)
    perturbations: list[PerturbationSpec] = field(default_factory=list)
    k_values: list[float] = field(default_factory=lambda: list(DEFAULT_K))
    master_seed: int = 0
    out_dir: str = "out"
    base_dir: str = "."

    def resolve(self, path: str) -> str:
        return path if os.path.isabs(path) else os.path.join(self.base_dir, path)

    @property
    def episode_dirs(self) -> list[str]:
        return [self.resolve(p) for p in self.episodes]

    @property
    def output_dir(self) -> str:
        return self.resolve(self.out_dir)

    def to_json(self) -> dict:
        return {
            "run_id": self.run_id,
            "episodes": list(self.episodes),
            "policy": self.policy,
            "iss": self.iss.to_json(),
            "perturbations": [p.to_json() for p in self.perturbations],
            "k": list(self.k_values),
            "master_seed": self.master_seed,
            "out_dir": self.out_dir,
        }


def load_manifest(path, seed=None, out=None, policy=None) -> RunManifest:
    with open(path, "r", encoding="utf-8") as f:
        obj = json.load(f)
    base = os.path.dirname(os.path.abspath(path))
    manifest = RunManifest(
        run_id=obj.get("run_id", "run"),
        episodes=list(obj.get("episodes", [])),
        policy=policy or obj.get("policy", ""),
        iss=IssConfig.from_json(obj.get("iss", {})),
        perturbations=[PerturbationSpec.from_json(p) for p in obj.get("perturbations", [])],
        k_values=[float(k) for k in obj.get("k", DEFAULT_K)],
        master_seed=int(seed if seed is not None else obj.get("master_seed", 0)),
        out_dir=out or obj.get("out_dir", "out"),
        base_dir=base,
    )
    if not manifest.episodes:
        raise ParameterError(f"manifest {path} lists no episodes")
    if not manifest.policy:
        raise ParameterError(f"manifest {path} names no policy endpoint")
    for k in manifest.k_values:
        if not 0.0 < k <= 100.0:
            raise ParameterError(f"manifest k value {k} outside (0, 100]")
    validate_episode_dirs(manifest.episode_dirs)
    return manifest


def open_policy(manifest: RunManifest):
    endpoint = manifest.policy
    kind, _, rest = endpoint.partition(":")
    if kind == "synth":
        from .policy import load_synth_policy

        return load_synth_policy(manifest.resolve(rest))
    return connect(endpoint)


def _write_json(path, obj) -> None:
    os.makedirs(os.path.dirname(path), exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2)
        f.write("\n")


def _frame_metrics(run_id, stream, episode: Episode, k_values) -> list[MetricsRecord]:
    records = []
    for view in stream.views:
        for t in stream.computed_frames:
            part = episode.partitions[t - 1][view]
            frame = stream.frame(view, t)
            for k in k_values:
                try:
                    rec = MetricsRecord(
                        run_id=run_id, view=view, t=t, k=k,
                        nmr=nmr(frame, part, k),
                        rho_act=regional_mass_ratio(frame, part, ACT, k),
                        rho_sup=regional_mass_ratio(frame, part, SUP, k),
                        rho_nuis=regional_mass_ratio(frame, part, NUIS, k),
                    )
                except DegenerateMapError:
                    rec = MetricsRecord(run_id=run_id, view=view, t=t, k=k)
                records.append(rec)
    return records


def run_iss(manifest: RunManifest) -> dict:
    """Saliency streams for every episode: PFMs, overlays, metrics, manifest."""
    out_root = manifest.output_dir
    os.makedirs(out_root, exist_ok=True)
    policy = open_policy(manifest)
    episodes_out = []
    metrics_path = os.path.join(out_root, "metrics.csv")
    try:
        for ep_dir in manifest.episode_dirs:
            episode = load_episode(ep_dir)
            name = episode_name(episode)
            stream = iss_stream(episode.frames, policy, manifest.iss,
                                manifest.master_seed, episode.instruction)
            ep_out = os.path.join(out_root, name)
            stream_manifest = save_stream(stream, ep_out, run_id=f"{manifest.run_id}/{name}")
            for view in stream.views:
                for t in stream.computed_frames:
                    save_overlay(
                        os.path.join(ep_out, f"{view}_t{t:04d}_overlay.png"),
                        to_u8(episode.frames[t - 1].views[view]),
                        stream.frame(view, t),
                    )
            append_metrics_csv(
                metrics_path, _frame_metrics(f"{manifest.run_id}/{name}", stream,
                                             episode, manifest.k_values)
            )
            episodes_out.append({
                "episode": name, "dir": os.path.relpath(ep_out, out_root),
                "computed_frames": stream.computed_frames,
                "undefined_cells": stream.undefined_cells,
                "stream_manifest": stream_manifest["files"],
            })
    finally:
        policy.close()
    run_report = {
        "manifest": manifest.to_json(),
        "episodes": episodes_out,
        "metrics_csv": os.path.relpath(metrics_path, out_root),
    }
    _write_json(os.path.join(out_root, "run.json"), run_report)
    return run_report


SWEEP_HEADER = ["n_masks", "keep_prob", "seen_mse_mean", "seen_mse_std",
                "unseen_mse_mean", "unseen_mse_std", "avg_mse_mean", "avg_mse_std"]


def _episode_interventional_mse(episode: Episode, policy, cfg: IssConfig, seed: int) -> float:
    stream = iss_stream(episode.frames, policy, cfg, seed, episode.instruction)
    per_t = []
    for t in stream.computed_frames:
        size = stream.baseline_actions[t].size
        per_t.append(stream.mean_deltas[t] / size)
    return float(np.mean(per_t))


def run_sweep(manifest: RunManifest, n_list, p_list) -> str:
    """Interventional action MSE over a (N, p) grid; rows N-major then p."""
    if not n_list or not p_list:
        raise ParameterError("sweep needs nonempty N and p lists")
    out_root = manifest.output_dir
    os.makedirs(out_root, exist_ok=True)
    policy = open_policy(manifest)
    episodes = [load_episode(d) for d in manifest.episode_dirs]
    rows = []
    try:
        for n in n_list:
            for p in p_list:
                cfg = IssConfig(
                    n_masks=int(n), keep_prob=float(p), stride=manifest.iss.stride,
                    blur_sigma=manifest.iss.blur_sigma, grid=manifest.iss.grid,
                )
                by_split = {"seen": [], "unseen": []}
                for episode in episodes:
                    mse = _episode_interventional_mse(episode, policy, cfg,
                                                      manifest.master_seed)
                    by_split.setdefault(episode.split, []).append(mse)
                all_mse = by_split["seen"] + by_split["unseen"]

                def stats(vals):
                    if not vals:
                        return "", ""
                    return repr(float(np.mean(vals))), repr(float(np.std(vals)))

                rows.append([str(int(n)), repr(float(p)), *stats(by_split["seen"]),
                             *stats(by_split["unseen"]), *stats(all_mse)])
    finally:
        policy.close()
    csv_path = os.path.join(out_root, "sweep.csv")
    with open(csv_path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(SWEEP_HEADER)
        writer.writerows(rows)
    _write_json(os.path.join(out_root, "sweep.json"),
                {"manifest": manifest.to_json(), "n_list": list(n_list),
                 "p_list": list(p_list), "csv": "sweep.csv"})
    return csv_path


def _perturbed_frames(episode: Episode, spec: PerturbationSpec, seed: int):
    frames = []
    for t, obs in enumerate(episode.frames, start=1):
        views = {}
        for view, img in obs.views.items():
            part = episode.partitions[t - 1][view]
            views[view] = spec.apply(img, part, seed=seed + 7919 * t)
        frames.append(MultiViewObservation(views=views, timestep=t))
    return frames


def _stream_cosine(a, b) -> float:
    vals = []
    for view in a.views:
        for t in a.computed_frames:
            vals.append(cosine_similarity(a.frame(view, t), b.frame(view, t)))
    return float(np.mean(vals))


def _baseline_action_mse(a, b) -> float:
    vals = [
        action_mse(a.baseline_actions[t], b.baseline_actions[t])
        for t in a.computed_frames
    ]
    return float(np.mean(vals))


ROBUSTNESS_HEADER = ["episode", "delta_a", "delta_s"]


def run_robustness(manifest: RunManifest, select_quantile: float = 1.0) -> dict:
    """Soft intervention: unit-range noise in the nuisance region.

    For each episode the masking procedure runs on the clean and on the
    noise-perturbed episode with identical masks; reported are the action
    deviation (delta_a) and the saliency stability (delta_s, cosine).
    select_quantile keeps only that fraction of episodes with the lowest
    per-episode mean action deviation before averaging.
    """
    out_root = manifest.output_dir
    os.makedirs(out_root, exist_ok=True)
    policy = open_policy(manifest)
    noise = PerturbationSpec(kind="noise", region=NUIS,
                             constants={"noise_sigma": NOISE_SIGMA})
    rows = []
    try:
        for ep_dir in manifest.episode_dirs:
            episode = load_episode(ep_dir)
            clean = iss_stream(episode.frames, policy, manifest.iss,
                               manifest.master_seed, episode.instruction)
            noisy_frames = _perturbed_frames(episode, noise, manifest.master_seed)
            noisy = iss_stream(noisy_frames, policy, manifest.iss,
                               manifest.master_seed, episode.instruction)
            rows.append((episode_name(episode),
                         _baseline_action_mse(clean, noisy),
                         _stream_cosine(clean, noisy)))
    finally:
        policy.close()

    rows.sort(key=lambda r: r[1])
    kept = rows[: max(1, int(round(select_quantile * len(rows))))]
    mean_point = (float(np.mean([r[1] for r in kept])), float(np.mean([r[2] for r in kept])))

    csv_path = os.path.join(out_root, "robustness.csv")
    with open(csv_path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(ROBUSTNESS_HEADER)
        for name, da, ds in rows:
            writer.writerow([name, repr(da), repr(ds)])
        writer.writerow(["MEAN_SELECTED", repr(mean_point[0]), repr(mean_point[1])])

    xs = np.array([r[1] for r in kept])
    ys = np.array([r[2] for r in kept])
    scatter_png(os.path.join(out_root, "robustness.png"),
                {"episodes": (xs, ys), "mean": (np.array([mean_point[0]]),
                                                np.array([mean_point[1]]))},
                xlabel="action MSE (lower is better)",
                ylabel="saliency cosine (higher is better)",
                title="robustness under nuisance noise", invert_x=True,
                logx=bool((xs > 0).all()))
    report = {
        "manifest": manifest.to_json(), "select_quantile": select_quantile,
        "episodes": [{"episode": n, "delta_a": da, "delta_s": ds} for n, da, ds in rows],
        "mean_selected": {"delta_a": mean_point[0], "delta_s": mean_point[1]},
        "csv": "robustness.csv", "plot": "robustness.png",
    }
    _write_json(os.path.join(out_root, "robustness.json"), report)
    return report


FIDELITY_KINDS = ("texture", "geometric", "patch")
FIDELITY_HEADER = ["perturbation", "method", "episode", "delta_a", "one_minus_delta_s"]


def run_fidelity(manifest: RunManifest, lam: float = 1.0) -> dict:
    """Hard interventions: per-method correlation of map change with action change."""
    out_root = manifest.output_dir
    os.makedirs(out_root, exist_ok=True)
    policy = open_policy(manifest)
    episodes = [load_episode(d) for d in manifest.episode_dirs]

    explainers = {"iss": IssExplainer(
        policy=policy, n_masks=manifest.iss.n_masks, keep_prob=manifest.iss.keep_prob,
        stride=manifest.iss.stride, blur_sigma=manifest.iss.blur_sigma,
        grid=manifest.iss.grid, random_state=manifest.master_seed,
    ).fit()}
    for name, cls in (("att", AttentionExplainer), ("norm", TokenNormExplainer)):
        try:
            explainers[name] = cls(policy=policy, stride=manifest.iss.stride,
                                   random_state=manifest.master_seed).fit()
        except CapabilityError:
            pass  # baselines are skipped, not failed

    pair_rows = []
    correlations = {}
    try:
        for kind in FIDELITY_KINDS:
            spec = PerturbationSpec(kind=kind, lam=lam, region=NUIS,
                                    seed=manifest.master_seed)
            pairs = {m: [] for m in explainers}
            deltas_a = []
            for episode in episodes:
                perturbed = _perturbed_frames(episode, spec, manifest.master_seed)
                streams_clean = {}
                streams_pert = {}
                for m, explainer in explainers.items():
                    explainer.instruction = episode.instruction
                    streams_clean[m] = explainer.transform(episode.frames)
                    streams_pert[m] = explainer.transform(perturbed)
                da = _policy_action_mse(policy, episode, perturbed,
                                        streams_clean["iss"].computed_frames)
                deltas_a.append(da)
                for m in explainers:
                    ds = _stream_cosine(streams_clean[m], streams_pert[m])
                    pairs[m].append((da, 1.0 - ds))
                    pair_rows.append([kind, m, episode_name(episode),
                                      repr(da), repr(1.0 - ds)])
            correlations[kind] = {}
            for m, pts in pairs.items():
                xs = np.array([p[0] for p in pts])
                ys = np.array([p[1] for p in pts])
                try:
                    correlations[kind][m] = pearson(xs, ys)
                except (DegenerateMapError, ParameterError):
                    correlations[kind][m] = None  # zero-variance diagnosis
                scatter_png(
                    os.path.join(out_root, f"fidelity_{kind}_{m}.png"),
                    {m: (xs, ys)}, xlabel="action MSE",
                    ylabel="1 - saliency cosine",
                    title=f"{kind} perturbation, {m} maps",
                )
    finally:
        policy.close()

    csv_path = os.path.join(out_root, "fidelity.csv")
    with open(csv_path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(FIDELITY_HEADER)
        writer.writerows(pair_rows)

    methods = sorted({m for kind in correlations for m in correlations[kind]})
    grouped_bar_png(
        os.path.join(out_root, "fidelity_summary.png"), list(FIDELITY_KINDS),
        {m: [correlations[kind].get(m) or 0.0 for kind in FIDELITY_KINDS] for m in methods},
        ylabel="Pearson r", title="map-change vs action-change correlation",
    )
    report = {
        "manifest": manifest.to_json(), "lam": lam,
        "correlations": {
            kind: {m: (v if v is not None else "n/a (zero variance)")
                   for m, v in per.items()}
            for kind, per in correlations.items()
        },
        "csv": "fidelity.csv", "summary_plot": "fidelity_summary.png",
    }
    _write_json(os.path.join(out_root, "fidelity.json"), report)
    return report


def _policy_action_mse(policy, episode: Episode, perturbed_frames, computed) -> float:
    vals = []
    for t in computed:
        a = policy.act(episode.frames[t - 1], episode.instruction)
        b = policy.act(perturbed_frames[t - 1], episode.instruction)
        vals.append(action_mse(a, b))
    return float(np.mean(vals))


def run_correlate(manifest: RunManifest, success_csv) -> dict:
    """Pearson between per-task nuisance mass ratio and external success rates.

    The success CSV must carry task, seed, success_rate columns; maps are
    computed per (task, seed) with that row's seed as the mask master seed
    and aggregated as the frame-mean over episodes of the task.
    """
    out_root = manifest.output_dir
    os.makedirs(out_root, exist_ok=True)
    success = _read_success_csv(success_csv)
    episodes = [load_episode(d) for d in manifest.episode_dirs]
    by_task: dict[str, list[Episode]] = {}
    for ep in episodes:
        by_task.setdefault(ep.task or episode_name(ep), []).append(ep)

    missing = sorted(set(t for t, _ in success) - set(by_task))
    if missing:
        raise ParameterError(
            f"success CSV names tasks with no episodes in the manifest: {missing}"
        )

    policy = open_policy(manifest)
    nmr_cache: dict[tuple[str, int], dict[float, float]] = {}
    try:
        for (task, seed) in success:
            values: dict[float, list[float]] = {k: [] for k in manifest.k_values}
            for ep in by_task[task]:
                stream = iss_stream(ep.frames, policy, manifest.iss, seed, ep.instruction)
                for view in stream.views:
                    for t in stream.computed_frames:
                        part = ep.partitions[t - 1][view]
                        for k in manifest.k_values:
                            try:
                                values[k].append(nmr(stream.frame(view, t), part, k))
                            except DegenerateMapError:
                                pass
            nmr_cache[(task, seed)] = {
                k: float(np.mean(v)) if v else float("nan") for k, v in values.items()
            }
    finally:
        policy.close()

    per_k = correlate_tables(nmr_cache, success, manifest.k_values)
    best_k = min(per_k, key=lambda k: per_k[k]["r"])
    report = {
        "manifest": manifest.to_json(),
        "success_csv": str(success_csv),
        "per_k": per_k,
        "best_k": best_k,
    }
    _write_json(os.path.join(out_root, "correlation.json"), report)
    return report


def correlate_tables(nmr_table: dict[tuple[str, int], dict[float, float]],
                     success: dict[tuple[str, int], float],
                     k_values) -> dict[str, dict]:
    """Pearson r between nuisance ratios and success, per k and per seed."""
    per_k = {}
    for k in k_values:
        xs, ys, keys = [], [], []
        for (task, seed), rate in success.items():
            xs.append(nmr_table[(task, seed)][k])
            ys.append(rate)
            keys.append((task, seed))
        per_seed = {}
        for seed in sorted({s for _, s in keys}):
            sel = [i for i, (_, s) in enumerate(keys) if s == seed]
            if len(sel) >= 2:
                per_seed[str(seed)] = pearson(np.array(xs)[sel], np.array(ys)[sel])
        per_k[str(k)] = {"r": pearson(np.array(xs), np.array(ys)), "per_seed": per_seed}
    return per_k


def _read_success_csv(path) -> dict[tuple[str, int], float]:
    out = {}
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f)
        required = {"task", "seed", "success_rate"}
        if reader.fieldnames is None or not required <= set(reader.fieldnames):
            raise ParameterError(
                f"success CSV must carry columns {sorted(required)}, got {reader.fieldnames}"
            )
        for row in reader:
            out[(row["task"], int(row["seed"]))] = float(row["success_rate"])
    if not out:
        raise ParameterError(f"success CSV {path} is empty")
    return out


BENCH_HEADER = ["n_masks", "keep_prob", "latency_s", "hz", "slowdown"]


def run_bench(manifest: RunManifest, n_list, p_list, repeats: int = 3) -> str:
    """Per-timestep wall-clock latency of the masking procedure.

    Measures mask generation plus all policy queries plus the map reduction
    for one timestep, against the single-query baseline.
    """
    out_root = manifest.output_dir
    os.makedirs(out_root, exist_ok=True)
    policy = open_policy(manifest)
    episode = load_episode(manifest.episode_dirs[0])
    frame = [episode.frames[0]]
    rows = []
    try:
        policy.act(episode.frames[0], episode.instruction)  # warm-up
        singles = []
        for _ in range(max(repeats * 3, 5)):
            t0 = time.perf_counter()
            policy.act(episode.frames[0], episode.instruction)
            singles.append(time.perf_counter() - t0)
        single = float(np.median(singles))

        for n in n_list:
            for p in p_list:
                cfg = IssConfig(n_masks=int(n), keep_prob=float(p), stride=1,
                                blur_sigma=manifest.iss.blur_sigma, grid=manifest.iss.grid)
                times = []
                for _ in range(repeats):
                    t0 = time.perf_counter()
                    iss_stream(frame, policy, cfg, manifest.master_seed,
                               episode.instruction)
                    times.append(time.perf_counter() - t0)
                latency = float(np.median(times))
                rows.append([str(int(n)), repr(float(p)), repr(latency),
                             repr(1.0 / latency), repr(latency / single)])
    finally:
        policy.close()

    csv_path = os.path.join(out_root, "bench.csv")
    with open(csv_path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(BENCH_HEADER)
        writer.writerows(rows)
    _write_json(os.path.join(out_root, "bench.json"),
                {"manifest": manifest.to_json(), "single_query_s": single,
                 "csv": "bench.csv"})
    return csv_path


def run_synth(scene_json, out_dir, n_episodes: int = 3, eta: float = 0.0) -> dict:
    if scene_json:
        with open(scene_json, "r", encoding="utf-8") as f:
            scene = SceneSpec.from_json(json.load(f))
    else:
        scene = SceneSpec()
    return write_synthetic_store(scene, out_dir, n_episodes=n_episodes, eta=eta)

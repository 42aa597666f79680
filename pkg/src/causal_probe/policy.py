"""Policy abstraction and the synthetic analytic policies used as oracles.

A policy is anything that maps a multi-view observation (plus instruction)
to a continuous action chunk.  Synthetic policies compute actions from
region mean intensities of a bound semantic partition, so every ISS / NMR
claim can be checked against closed-form sensitivities.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .baselines import IntrospectionPayload
from .errors import CapabilityError, ParameterError
from .imageops import bilinear_resize
from .types import ACT, NUIS, SUP, MultiViewObservation, SemanticPartition

PROTOCOL_VERSION = 1


@dataclass(frozen=True)
class PolicySession:
    """Parameters pinned at handshake time; immutable afterwards."""

    action_dim: int
    chunk_len: int = 1
    view_names: tuple[str, ...] = ()
    introspection_supported: bool = False
    protocol_version: int = PROTOCOL_VERSION
    pipelining_depth: int = 8


class Policy:
    """Query surface shared by in-process and remote policies."""

    session: PolicySession

    def act(self, obs: MultiViewObservation, instruction: str = "") -> np.ndarray:
        """Point action prediction, shape (chunk_len, action_dim)."""
        raise NotImplementedError

    def act_batch(self, obs_list, instruction: str = "") -> list[np.ndarray]:
        return [self.act(obs, instruction) for obs in obs_list]

    def introspect(self, obs: MultiViewObservation, instruction: str = "") -> IntrospectionPayload:
        raise CapabilityError("policy does not expose introspection")

    def close(self) -> None:
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


@dataclass
class SyntheticPolicySpec:
    """Analytic policy family with known causal structure.

    region_mean_linear: action = weights @ (ACT, SUP, NUIS region means),
    weights shaped (action_dim, 3).
    nuisance_mix: action = (1 - eta) * w_causal * mean(ACT+SUP)
                         + eta * w_nuis * mean(NUIS),
    weights shaped (action_dim, 2) holding [w_causal, w_nuis] columns.
    """

    kind: str
    weights: np.ndarray
    eta: float = 0.0
    noise_std: float = 0.0
    bias: np.ndarray | None = None
    seed: int = 0
    token_grid: tuple[int, int] = (4, 4)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.kind not in ("region_mean_linear", "nuisance_mix"):
            raise ParameterError(f"unknown synthetic policy kind {self.kind!r}")
        cols = 3 if self.kind == "region_mean_linear" else 2
        if self.weights.ndim != 2 or self.weights.shape[1] != cols:
            raise ParameterError(
                f"{self.kind} weights must be (action_dim, {cols}), got {self.weights.shape}"
            )
        if not np.all(np.isfinite(self.weights)):
            raise ParameterError("weights must be finite")
        if not 0.0 <= self.eta <= 1.0:
            raise ParameterError(f"eta must lie in [0, 1], got {self.eta}")
        if self.noise_std < 0:
            raise ParameterError("noise_std must be >= 0")
        if self.bias is not None:
            self.bias = np.asarray(self.bias, dtype=np.float64)

    @property
    def action_dim(self) -> int:
        return self.weights.shape[0]

    def to_json(self) -> dict:
        out = {
            "kind": self.kind,
            "weights": self.weights.tolist(),
            "eta": self.eta,
            "noise_std": self.noise_std,
            "seed": self.seed,
            "token_grid": list(self.token_grid),
        }
        if self.bias is not None:
            out["bias"] = self.bias.tolist()
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "SyntheticPolicySpec":
        return cls(
            kind=obj["kind"],
            weights=np.asarray(obj["weights"], dtype=np.float64),
            eta=float(obj.get("eta", 0.0)),
            noise_std=float(obj.get("noise_std", 0.0)),
            bias=np.asarray(obj["bias"], dtype=np.float64) if "bias" in obj else None,
            seed=int(obj.get("seed", 0)),
            token_grid=tuple(obj.get("token_grid", (4, 4))),
        )


def _region_mean(obs: MultiViewObservation, partitions: dict[str, SemanticPartition],
                 labels: tuple[int, ...]) -> float:
    """Mean intensity over all (pixel, channel) entries carrying the labels, 0 if empty."""
    total = 0.0
    count = 0
    for view, img in obs.views.items():
        sel = np.isin(partitions[view].labels, labels)
        n = int(np.count_nonzero(sel))
        if n == 0:
            continue
        vals = img[sel]
        total += float(vals.sum(dtype=np.float64))
        count += vals.size
    return total / count if count else 0.0


class SyntheticPolicy(Policy):
    """In-process policy with closed-form region sensitivities."""

    def __init__(self, spec: SyntheticPolicySpec, partitions: dict[str, SemanticPartition]):
        self.spec = spec
        self.partitions = dict(partitions)
        self.session = PolicySession(
            action_dim=spec.action_dim,
            chunk_len=1,
            view_names=tuple(partitions.keys()),
            introspection_supported=True,
        )
        self._rng = np.random.Generator(np.random.Philox(key=spec.seed))

    def features(self, obs: MultiViewObservation) -> np.ndarray:
        if self.spec.kind == "region_mean_linear":
            return np.array([
                _region_mean(obs, self.partitions, (ACT,)),
                _region_mean(obs, self.partitions, (SUP,)),
                _region_mean(obs, self.partitions, (NUIS,)),
            ])
        return np.array([
            _region_mean(obs, self.partitions, (ACT, SUP)),
            _region_mean(obs, self.partitions, (NUIS,)),
        ])

    def effective_weights(self) -> np.ndarray:
        """Weights actually applied to the feature vector (eta folded in)."""
        if self.spec.kind == "region_mean_linear":
            return self.spec.weights
        w = self.spec.weights.copy()
        w[:, 0] *= 1.0 - self.spec.eta
        w[:, 1] *= self.spec.eta
        return w

    def region_entry_counts(self) -> dict[int, int]:
        """(pixel, channel) entry count per region across all views."""
        counts = {ACT: 0, SUP: 0, NUIS: 0}
        for view, part in self.partitions.items():
            channels = 3
            for region in counts:
                counts[region] += int(np.count_nonzero(part.labels == region)) * channels
        return counts

    def act(self, obs: MultiViewObservation, instruction: str = "") -> np.ndarray:
        a = self.effective_weights() @ self.features(obs)
        if self.spec.bias is not None:
            a = a + self.spec.bias
        if self.spec.noise_std > 0:
            a = a + self._rng.normal(0.0, self.spec.noise_std, size=a.shape)
        return a.reshape(1, -1)

    def introspect(self, obs: MultiViewObservation, instruction: str = "") -> IntrospectionPayload:
        """Fabricated internals consistent with the observation.

        Spatial embeddings carry the patch mean intensity as their norm, so
        the norm baseline highlights bright patches; attention is uniform.
        """
        gh, gw = self.spec.token_grid
        views = list(obs.views.keys())
        n_visual = len(views) * gh * gw
        n_text = 2
        n = n_visual + n_text
        dim = 8

        emb = np.zeros((n, dim), dtype=np.float32)
        spatial_map: dict[str, list[int]] = {}
        tok = 0
        for view in views:
            gray = obs.views[view].astype(np.float64).mean(axis=2)
            cells = bilinear_resize(gray, gw, gh)
            spatial_map[view] = list(range(tok, tok + gh * gw))
            for c in cells.reshape(-1):
                emb[tok, tok % dim] = c
                tok += 1
        emb[n_visual:, 0] = 0.5
        attention = np.full((n, n), 1.0 / n, dtype=np.float32)
        return IntrospectionPayload(attention=attention, embeddings=emb,
                                    spatial_token_map=spatial_map)


def synth_policy(spec: SyntheticPolicySpec,
                 partitions: dict[str, SemanticPartition]) -> SyntheticPolicy:
    """Bind an analytic policy spec to a static per-view partition snapshot."""
    if not partitions:
        raise ParameterError("synthetic policy needs at least one view partition")
    return SyntheticPolicy(spec, partitions)


def load_synth_policy(path) -> SyntheticPolicy:
    """Build a synthetic policy from a JSON spec referencing partition PGMs.

    Relative partition paths resolve against the spec file's directory.
    """
    import os

    from .formats import read_partition_pgm

    with open(path, "r", encoding="utf-8") as f:
        obj = json.load(f)
    spec = SyntheticPolicySpec.from_json(obj)
    part_paths = obj.get("partitions")
    if not part_paths:
        raise ParameterError(f"synthetic policy spec {path} lists no partitions")
    base = os.path.dirname(os.path.abspath(path))
    partitions = {
        view: read_partition_pgm(p if os.path.isabs(p) else os.path.join(base, p))
        for view, p in part_paths.items()
    }
    return synth_policy(spec, partitions)

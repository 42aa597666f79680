"""Estimator-style wrappers so saliency methods compose like transformers.

Each explainer is configured in its constructor (hyperparameters exposed via
get_params/set_params), bound to a policy, validated by fit(), and turned
into maps by transform(episode) -> SaliencyStream.  All three methods emit
the same stream type, so downstream metrics and reports are method-blind.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .baselines import attention_score, token_norm_score, tokens_to_heatmap
from .engine import IssConfig, SaliencyStream, computed_timesteps, interpolate_stream, iss_stream
from .errors import CapabilityError, ParameterError
from .types import MultiViewObservation


def check_episode(X) -> list[MultiViewObservation]:
    """Validate an episode: nonempty, consistent views, float32 unit-range frames."""
    episode = list(X)
    if not episode:
        raise ParameterError("episode is empty")
    views = None
    for i, obs in enumerate(episode):
        if not isinstance(obs, MultiViewObservation):
            raise ParameterError(f"episode element {i} is not a MultiViewObservation")
        if views is None:
            views = obs.view_names
        elif obs.view_names != views:
            raise ParameterError(f"view set changes at element {i}")
        for name, img in obs.views.items():
            if img.dtype != np.float32:
                raise ParameterError(f"view {name!r} at element {i} is not float32")
    return episode


def check_policy(policy, views) -> None:
    if policy is None:
        raise ParameterError("no policy bound; pass policy= to the constructor")
    session_views = set(policy.session.view_names)
    if session_views and not set(views) <= session_views:
        raise ParameterError(
            f"episode views {sorted(views)} not served by policy views {sorted(session_views)}"
        )


class _FittedMixin:
    def _require_fitted(self):
        if not getattr(self, "fitted_", False):
            raise NotFittedError(
                f"{type(self).__name__} is not fitted yet; call fit() first"
            )


class IssExplainer(BaseEstimator, _FittedMixin):
    """Interventional masking saliency as a transformer.

    transform(episode) queries the bound policy on mask-blended frames and
    returns the per-view saliency stream.
    """

    def __init__(self, policy=None, n_masks=100, keep_prob=0.3, stride=1,
                 blur_sigma=9.0, grid=(7, 7), policy_sigma=1.0,
                 resample_per_step=False, random_state=0, instruction=""):
        self.policy = policy
        self.n_masks = n_masks
        self.keep_prob = keep_prob
        self.stride = stride
        self.blur_sigma = blur_sigma
        self.grid = grid
        self.policy_sigma = policy_sigma
        self.resample_per_step = resample_per_step
        self.random_state = random_state
        self.instruction = instruction

    def _config(self) -> IssConfig:
        return IssConfig(
            n_masks=self.n_masks, keep_prob=self.keep_prob, stride=self.stride,
            blur_sigma=self.blur_sigma, grid=tuple(self.grid),
            policy_sigma=self.policy_sigma, resample_per_step=self.resample_per_step,
        )

    def fit(self, X=None, y=None):
        """Validate the configuration and the bound policy session."""
        self._config()
        if self.policy is None:
            raise ParameterError("no policy bound; pass policy= to the constructor")
        if self.policy.session.action_dim < 1:
            raise ParameterError("policy session reports no action dimensions")
        self.fitted_ = True
        return self

    def transform(self, X) -> SaliencyStream:
        self._require_fitted()
        episode = check_episode(X)
        check_policy(self.policy, episode[0].view_names)
        return iss_stream(episode, self.policy, self._config(),
                          master_seed=self.random_state, instruction=self.instruction)

    def fit_transform(self, X, y=None) -> SaliencyStream:
        return self.fit(X, y).transform(X)


class _IntrospectionExplainer(BaseEstimator, _FittedMixin):
    """Shared machinery for single-pass baselines built on introspection."""

    method = ""

    def __init__(self, policy=None, stride=1, random_state=0, instruction=""):
        self.policy = policy
        self.stride = stride
        self.random_state = random_state
        self.instruction = instruction

    def _scores(self, payload) -> np.ndarray:
        raise NotImplementedError

    def fit(self, X=None, y=None):
        if self.policy is None:
            raise ParameterError("no policy bound; pass policy= to the constructor")
        if not self.policy.session.introspection_supported:
            raise CapabilityError(
                f"{type(self).__name__} needs introspection, which this policy does not expose"
            )
        if self.stride < 1:
            raise ParameterError(f"stride must be >= 1, got {self.stride}")
        self.fitted_ = True
        return self

    def transform(self, X) -> SaliencyStream:
        self._require_fitted()
        episode = check_episode(X)
        check_policy(self.policy, episode[0].view_names)
        views = list(episode[0].views.keys())
        T = len(episode)
        steps = computed_timesteps(T, self.stride)
        maps = {
            v: np.zeros((T,) + episode[0].views[v].shape[:2], dtype=np.float64)
            for v in views
        }
        for t in steps:
            payload = self.policy.introspect(episode[t - 1], self.instruction)
            scores = self._scores(payload)
            for v in views:
                h, w = episode[0].views[v].shape[:2]
                maps[v][t - 1] = tokens_to_heatmap(scores, payload, v, (w, h))
        stream = SaliencyStream(
            maps=maps, computed_frames=steps,
            config=IssConfig(stride=self.stride), master_seed=self.random_state,
            method=self.method,
        )
        return interpolate_stream(stream)

    def fit_transform(self, X, y=None) -> SaliencyStream:
        return self.fit(X, y).transform(X)


class AttentionExplainer(_IntrospectionExplainer):
    """Received-attention-mass heatmaps from the policy's attention matrix."""

    method = "att"

    def _scores(self, payload) -> np.ndarray:
        return attention_score(payload)


class TokenNormExplainer(_IntrospectionExplainer):
    """Embedding-norm heatmaps from the policy's token embeddings."""

    method = "norm"

    def _scores(self, payload) -> np.ndarray:
        return token_norm_score(payload)

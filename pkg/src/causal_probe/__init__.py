"""Interventional saliency and causal-misalignment diagnostics for action policies."""

__version__ = "0.1.0"

from .engine import (
    IssConfig,
    SaliencyStream,
    estimate_psi_exact,
    interpolate_stream,
    iss_stream,
    iss_token_estimate,
    kl_isotropic_gaussian,
)
from .masks import MaskBatch, blend, sample_mask_batch
from .metrics import (
    action_mse,
    cosine_similarity,
    critical_set,
    nmr,
    nuisance_mass_fraction,
    pearson,
    regional_mass_ratio,
)
from .policy import Policy, PolicySession, SyntheticPolicySpec, synth_policy
from .types import ACT, NUIS, SUP, MultiViewObservation, SemanticPartition

__all__ = [
    "ACT", "SUP", "NUIS",
    "IssConfig", "SaliencyStream", "MaskBatch", "MultiViewObservation",
    "Policy", "PolicySession", "SemanticPartition", "SyntheticPolicySpec",
    "action_mse", "blend", "cosine_similarity", "critical_set",
    "estimate_psi_exact", "interpolate_stream", "iss_stream",
    "iss_token_estimate", "kl_isotropic_gaussian", "nmr",
    "nuisance_mass_fraction", "pearson", "regional_mass_ratio",
    "sample_mask_batch", "synth_policy",
]

"""Structured image interventions restricted to a semantic region.

Four operators: additive Gaussian noise, multi-octave (fBM) texture shift,
smooth geometric warping, and coarse patch occlusion.  Noise works in the
unit intensity range and texture in the byte range, matching the scales
their published constants were stated in; conversion happens inside the
operators.  Pixels outside the selected region are copied verbatim, so the
output is bit-identical to the input there.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .errors import DimensionError, NumericError, ParameterError
from .imageops import bilinear_resize, gaussian_blur, warp_bilinear
from .masks import blend, coarse_bits
from .types import NUIS, SemanticPartition

NOISE_SIGMA = 0.25
TEXTURE_ALPHA = 60.0
TEXTURE_OCTAVES = 4
TEXTURE_SIGMA_BASE = 1.5
TEXTURE_AMP_DECAY = 0.5
GEO_BETA = 25.0
GEO_SIGMA = 10.0
PATCH_KEEP_P = 0.3
PATCH_GRID = (7, 7)

KINDS = ("noise", "texture", "geometric", "patch")


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=seed))


def _check_unit_f32(img: np.ndarray) -> None:
    if img.dtype != np.float32:
        raise ParameterError(f"operators take float32 images in [0, 1], got {img.dtype}")


def _check_region(img: np.ndarray, region_mask: np.ndarray) -> np.ndarray:
    if region_mask.shape != img.shape[:2]:
        raise DimensionError(f"region mask {region_mask.shape} vs image {img.shape[:2]}")
    return region_mask > 0


def gaussian_noise_field(shape, sigma: float, seed: int) -> np.ndarray:
    """The exact noise tensor perturb_noise adds before clipping."""
    return _rng(seed).normal(0.0, sigma, size=shape)


def perturb_noise(img: np.ndarray, region_mask: np.ndarray, sigma: float = NOISE_SIGMA,
                  seed: int = 0) -> np.ndarray:
    """Additive Gaussian noise, clipped to [0, 1], inside the region only."""
    _check_unit_f32(img)
    sel = _check_region(img, region_mask)
    if sigma == 0 or not sel.any():
        return img.copy()
    noisy = np.clip(img.astype(np.float64) + gaussian_noise_field(img.shape, sigma, seed),
                    0.0, 1.0).astype(np.float32)
    out = img.copy()
    out[sel] = noisy[sel]
    return out


def fbm_field(shape, seed: int, octaves: int = TEXTURE_OCTAVES,
              sigma_base: float = TEXTURE_SIGMA_BASE,
              amp_decay: float = TEXTURE_AMP_DECAY) -> np.ndarray:
    """Multi-octave smoothed Gaussian noise, standardized to unit sample std.

    Octave k is an independent unit-normal field smoothed at sigma_base * 2^k
    and weighted by amp_decay^k; frequency doubles per octave.
    """
    rng = _rng(seed)
    total = np.zeros(shape, dtype=np.float64)
    for k in range(octaves):
        layer = rng.normal(0.0, 1.0, size=shape)
        total += (amp_decay ** k) * gaussian_blur(layer, sigma_base * (2.0 ** k))
    std = float(total.std())
    if std < 1e-12:
        raise NumericError("texture field degenerated to a constant")
    return total / std


def perturb_texture(img: np.ndarray, region_mask: np.ndarray, lam: float,
                    seed: int = 0, alpha: float = TEXTURE_ALPHA,
                    octaves: int = TEXTURE_OCTAVES,
                    sigma_base: float = TEXTURE_SIGMA_BASE,
                    amp_decay: float = TEXTURE_AMP_DECAY) -> np.ndarray:
    """Shift region intensities with a standardized fBM field in byte scale.

    out = clip(V255 + lam * alpha * field, 0, 255) inside the region; the
    same 2-D field is applied to every channel.
    """
    _check_unit_f32(img)
    if not 0.0 <= lam <= 1.0:
        raise ParameterError(f"lam must lie in [0, 1], got {lam}")
    sel = _check_region(img, region_mask)
    if lam == 0.0 or not sel.any():
        return img.copy()
    field = fbm_field(img.shape[:2], seed, octaves, sigma_base, amp_decay)
    if img.ndim == 3:
        field = field[:, :, None]
    v255 = img.astype(np.float64) * 255.0
    shifted = np.clip(v255 + lam * alpha * field, 0.0, 255.0)
    out = img.copy()
    out[sel] = (shifted / 255.0).astype(np.float32)[sel]
    return out


def displacement_fields(shape, seed: int, sigma: float = GEO_SIGMA) -> tuple[np.ndarray, np.ndarray]:
    """Smoothed unit-normal flow fields, each normalized by its own max |value|.

    After normalization the per-axis magnitude is at most 1, so a scale of
    lam * beta bounds the per-axis shift by exactly that many pixels.
    """
    rng = _rng(seed)
    fields = []
    for _ in range(2):
        raw = rng.normal(0.0, 1.0, size=shape)
        smooth = gaussian_blur(raw, sigma)
        peak = float(np.abs(smooth).max())
        if peak < 1e-12:
            raise NumericError("displacement field degenerated to zero")
        fields.append(smooth / peak)
    return fields[0], fields[1]


def perturb_geometric(img: np.ndarray, region_mask: np.ndarray, lam: float,
                      seed: int = 0, beta: float = GEO_BETA,
                      sigma: float = GEO_SIGMA) -> np.ndarray:
    """Elastic warp: region pixels resampled at smoothly displaced coordinates."""
    _check_unit_f32(img)
    if not 0.0 <= lam <= 1.0:
        raise ParameterError(f"lam must lie in [0, 1], got {lam}")
    sel = _check_region(img, region_mask)
    if lam == 0.0 or not sel.any():
        return img.copy()
    dx, dy = displacement_fields(img.shape[:2], seed, sigma)
    warped = warp_bilinear(img, lam * beta * dx, lam * beta * dy)
    out = img.copy()
    out[sel] = warped[sel]
    return out


def perturb_patch(img: np.ndarray, seed: int = 0, keep_p: float = PATCH_KEEP_P,
                  grid: tuple[int, int] = PATCH_GRID, blur_sigma: float = 9.0,
                  region_mask: np.ndarray | None = None) -> np.ndarray:
    """Coarse random occlusion: dropped cells are replaced by a blurred copy.

    One Bernoulli(keep_p) mask on the coarse grid, bilinearly upsampled, then
    the usual keep/blur blend.  Global by default; pass region_mask to
    confine the blend to a region.
    """
    _check_unit_f32(img)
    h, w = img.shape[:2]
    bits = coarse_bits(seed, 0, keep_p, grid).astype(np.float32)
    dense = bilinear_resize(bits, w, h)
    blurred = gaussian_blur(img, blur_sigma)
    occluded = blend(img, blurred, dense)
    if region_mask is None:
        return occluded
    sel = _check_region(img, region_mask)
    out = img.copy()
    out[sel] = occluded[sel]
    return out


@dataclass
class PerturbationSpec:
    """One configured intervention, JSON-serializable for manifests."""

    kind: str
    lam: float = 1.0
    region: int = NUIS
    seed: int = 0
    region_restricted_patch: bool = False
    constants: dict = dc_field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ParameterError(f"unknown perturbation kind {self.kind!r}")
        if not 0.0 <= self.lam <= 1.0:
            raise ParameterError(f"lam must lie in [0, 1], got {self.lam}")

    def apply(self, img: np.ndarray, partition: SemanticPartition, seed: int | None = None) -> np.ndarray:
        """Run this intervention on one frame given its partition."""
        use_seed = self.seed if seed is None else seed
        region = (partition.labels == self.region).astype(np.float32)
        c = self.constants
        if self.kind == "noise":
            return perturb_noise(img, region, c.get("noise_sigma", NOISE_SIGMA), use_seed)
        if self.kind == "texture":
            return perturb_texture(
                img, region, self.lam, use_seed,
                alpha=c.get("texture_alpha", TEXTURE_ALPHA),
                octaves=c.get("texture_octaves", TEXTURE_OCTAVES),
                sigma_base=c.get("texture_sigma_base", TEXTURE_SIGMA_BASE),
                amp_decay=c.get("texture_amp_decay", TEXTURE_AMP_DECAY),
            )
        if self.kind == "geometric":
            return perturb_geometric(
                img, region, self.lam, use_seed,
                beta=c.get("geo_beta", GEO_BETA), sigma=c.get("geo_sigma", GEO_SIGMA),
            )
        return perturb_patch(
            img, use_seed,
            keep_p=c.get("patch_keep_p", PATCH_KEEP_P),
            grid=tuple(c.get("patch_grid", PATCH_GRID)),
            blur_sigma=c.get("patch_blur_sigma", 9.0),
            region_mask=region if self.region_restricted_patch else None,
        )

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "lam": self.lam,
            "region": self.region,
            "seed": self.seed,
            "region_restricted_patch": self.region_restricted_patch,
            "constants": dict(self.constants),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PerturbationSpec":
        return cls(
            kind=obj["kind"],
            lam=float(obj.get("lam", 1.0)),
            region=int(obj.get("region", NUIS)),
            seed=int(obj.get("seed", 0)),
            region_restricted_patch=bool(obj.get("region_restricted_patch", False)),
            constants=dict(obj.get("constants", {})),
        )

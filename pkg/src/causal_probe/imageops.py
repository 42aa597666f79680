"""Image and scalar-field numerics shared by the whole toolkit.

Conventions: arrays are row-major numpy arrays, images shaped (H, W) or
(H, W, C).  Internally images are float32 in [0, 1]; uint8 in [0, 255]
appears only at file and wire boundaries.  Resizing uses the
align-corners-false convention (sample centers at (i + 0.5) * scale - 0.5,
clamped to the source extent).  Blur borders use edge-repeating reflection.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import convolve1d

from .errors import DimensionError, ParameterError


def to_f32(img: np.ndarray) -> np.ndarray:
    """Convert a uint8 image in [0, 255] to float32 in [0, 1]."""
    if img.dtype == np.float32:
        return img
    if img.dtype != np.uint8:
        raise ParameterError(f"expected uint8 or float32 image, got {img.dtype}")
    return img.astype(np.float32) / np.float32(255.0)


def to_u8(img: np.ndarray) -> np.ndarray:
    """Convert a float32 image in [0, 1] to uint8, rounding half to even."""
    if img.dtype == np.uint8:
        return img
    if img.dtype != np.float32:
        raise ParameterError(f"expected float32 or uint8 image, got {img.dtype}")
    scaled = np.clip(img, 0.0, 1.0) * 255.0
    return np.rint(scaled).astype(np.uint8)


def gaussian_kernel(sigma: float) -> np.ndarray:
    """1-D Gaussian taps truncated at radius ceil(3*sigma), normalized to sum 1."""
    if sigma <= 0:
        raise ParameterError(f"sigma must be positive, got {sigma}")
    radius = int(np.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return (k / k.sum()).astype(np.float64)


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with reflected borders.

    Accepts (H, W) fields or (H, W, C) images; output keeps dims and dtype.
    """
    if not np.all(np.isfinite(img)):
        raise ParameterError("image contains non-finite values")
    kernel = gaussian_kernel(sigma)
    work = img.astype(np.float64)
    out = convolve1d(work, kernel, axis=0, mode="reflect")
    out = convolve1d(out, kernel, axis=1, mode="reflect")
    return out.astype(img.dtype)


def _sample_positions(n_out: int, n_in: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Source indices and lerp weights for one axis of an align-corners-false resize."""
    scale = n_in / n_out
    pos = (np.arange(n_out, dtype=np.float64) + 0.5) * scale - 0.5
    pos = np.clip(pos, 0.0, n_in - 1.0)
    i0 = np.floor(pos).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = pos - i0
    return i0, i1, frac


def bilinear_resize(field: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    """Resize a 2-D field with bilinear interpolation (align-corners-false).

    Output values are convex combinations of input values, so the result is
    bounded by the input's min and max; resizing to the same dims is exact.
    """
    if out_w < 1 or out_h < 1:
        raise ParameterError(f"output dims must be >= 1, got {out_w}x{out_h}")
    if field.ndim != 2:
        raise DimensionError(f"expected 2-D field, got shape {field.shape}")
    h, w = field.shape
    y0, y1, fy = _sample_positions(out_h, h)
    x0, x1, fx = _sample_positions(out_w, w)

    work = field.astype(np.float64)
    top = work[y0][:, x0] * (1.0 - fx) + work[y0][:, x1] * fx
    bot = work[y1][:, x0] * (1.0 - fx) + work[y1][:, x1] * fx
    out = top * (1.0 - fy)[:, None] + bot * fy[:, None]
    return out.astype(field.dtype)


def warp_bilinear(img: np.ndarray, dx: np.ndarray, dy: np.ndarray) -> np.ndarray:
    """Sample each output pixel at its displaced source position.

    out(y, x) = img(y + dy(y, x), x + dx(y, x)), bilinear with coordinates
    clamped to the image borders.  Zero displacement is an exact identity.
    """
    h, w = img.shape[:2]
    if dx.shape != (h, w) or dy.shape != (h, w):
        raise DimensionError(
            f"displacement dims {dx.shape}/{dy.shape} do not match image {(h, w)}"
        )
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    sx = np.clip(xs + dx, 0.0, w - 1.0)
    sy = np.clip(ys + dy, 0.0, h - 1.0)
    x0 = np.floor(sx).astype(np.intp)
    y0 = np.floor(sy).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = sx - x0
    fy = sy - y0
    if img.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]

    work = img.astype(np.float64)
    top = work[y0, x0] * (1.0 - fx) + work[y0, x1] * fx
    bot = work[y1, x0] * (1.0 - fx) + work[y1, x1] * fx
    out = top * (1.0 - fy) + bot * fy
    return out.astype(img.dtype)

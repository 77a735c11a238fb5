"""Deterministic raster primitives behind the depth-guided boundary weighting.

Everything here is plain numpy on 2-D arrays: Sobel gradient magnitude of a
depth map, Laplacian boundary extraction, windowed standard deviation, and
the per-instance weight normalization. All 3x3 stencils use replicate
padding so image borders do not manufacture fictitious gradients.
"""

from __future__ import annotations

import warnings

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError, DegenerateInstanceWarning, DomainError, ShapeError

SOBEL_X = np.array([[-1.0, 0.0, 1.0],
                    [-2.0, 0.0, 2.0],
                    [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T.copy()
LAPLACIAN = np.array([[0.0, 1.0, 0.0],
                      [1.0, -4.0, 1.0],
                      [0.0, 1.0, 0.0]])

GT_BAND_ONLY = "gt_band_only"
FULL_FIELD = "full_field"
WEIGHT_EPS = 1e-8


def sobel_gradient_mask(depth: np.ndarray, valid: np.ndarray | None = None):
    """Sum of absolute Sobel responses, |Gx| + |Gy|, with replicate padding.

    ``depth`` is a 2-D array in meters with invalid pixels marked 0 (or via
    an explicit ``valid`` mask). Returns ``(G, valid_out)`` where a pixel of
    ``valid_out`` is False whenever its 3x3 neighborhood touches an invalid
    input pixel.
    """
    depth = np.asarray(depth, dtype=np.float64)
    if depth.ndim != 2 or depth.shape[0] < 3 or depth.shape[1] < 3:
        raise ShapeError(f"sobel_gradient_mask needs a 2-D array of at least 3x3, got {depth.shape}")
    if valid is None:
        valid = depth > 0
    else:
        valid = np.asarray(valid, dtype=bool)
        if valid.shape != depth.shape:
            raise ShapeError("validity mask shape mismatch")
    gx = ndimage.correlate(depth, SOBEL_X, mode="nearest")
    gy = ndimage.correlate(depth, SOBEL_Y, mode="nearest")
    g = np.abs(gx) + np.abs(gy)
    invalid = ~valid
    touched = ndimage.binary_dilation(invalid, structure=np.ones((3, 3), bool))
    return g, ~touched


def laplacian_boundary(mask: np.ndarray) -> np.ndarray:
    """Boundary map B = min(|L(mask)|, 1) with the 4-neighbor Laplacian.

    Accepts binary ground-truth masks and soft predicted masks alike; values
    must lie in [0, 1].
    """
    mask = np.asarray(mask, dtype=np.float64)
    if mask.ndim != 2:
        raise ShapeError(f"laplacian_boundary expects a 2-D mask, got {mask.shape}")
    if mask.size and (mask.min() < 0.0 or mask.max() > 1.0):
        raise DomainError("mask values must lie in [0, 1]")
    lap = ndimage.correlate(mask, LAPLACIAN, mode="nearest")
    return np.minimum(np.abs(lap), 1.0)


def _window_sums(arr: np.ndarray, window: int) -> np.ndarray:
    """Sum over a centered window x window neighborhood, replicate padded."""
    p = window // 2
    padded = np.pad(arr, p, mode="edge")
    out = np.zeros_like(arr, dtype=np.float64)
    h, w = arr.shape
    for dr in range(window):
        for dc in range(window):
            out += padded[dr:dr + h, dc:dc + w]
    return out


def windowed_std(g: np.ndarray, at=None, window: int = 3,
                 valid: np.ndarray | None = None):
    """Population std of the window x window neighborhood of each pixel.

    Replicate padding at borders. Entries flagged invalid are excluded from
    the statistic; a window with fewer than 2 valid entries yields std 0.
    Returns a full 2-D array when ``at`` is None, otherwise a dict mapping
    each (row, col) in ``at`` to its std.
    """
    if window % 2 == 0 or window < 3:
        raise ConfigurationError(f"window must be odd and >= 3, got {window}")
    g = np.asarray(g, dtype=np.float64)
    if g.ndim != 2:
        raise ShapeError("windowed_std expects a 2-D gradient mask")
    if valid is None:
        valid = np.ones_like(g, dtype=bool)
    v = valid.astype(np.float64)
    n = _window_sums(v, window)
    s1 = _window_sums(g * v, window)
    s2 = _window_sums(g * g * v, window)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(n > 0, s1 / np.maximum(n, 1.0), 0.0)
        var = np.where(n > 0, s2 / np.maximum(n, 1.0) - mean * mean, 0.0)
    std = np.sqrt(np.maximum(var, 0.0))
    std[n < 2] = 0.0
    if at is None:
        return std
    result = {}
    h, w = g.shape
    for (r, c) in at:
        if not (0 <= r < h and 0 <= c < w):
            raise ShapeError(f"query pixel {(r, c)} outside array of shape {g.shape}")
        result[(r, c)] = float(std[r, c])
    return result


def normalize_weights(std_on_boundary: dict, std_everywhere: np.ndarray,
                      gt_boundary: np.ndarray, mode: str = FULL_FIELD) -> np.ndarray:
    """Per-instance max-normalization of boundary stds into a weight map.

    ``gt_band_only`` puts std/(max+eps) on the instance's boundary pixels and
    0 elsewhere; ``full_field`` (default) spreads clip(std/(max+eps), 0, 1)
    over the whole field so spurious predicted boundaries in smooth regions
    are softly penalized too. A zero max (or an empty boundary) collapses the
    map to all zeros.
    """
    if mode not in (GT_BAND_ONLY, FULL_FIELD):
        raise ConfigurationError(f"unknown weight mode {mode!r}")
    gt_boundary = np.asarray(gt_boundary, dtype=np.float64)
    w = np.zeros_like(gt_boundary, dtype=np.float64)
    if not std_on_boundary:
        warnings.warn("instance has an empty ground-truth boundary; weights are zero",
                      DegenerateInstanceWarning, stacklevel=2)
        return w
    values = np.array(list(std_on_boundary.values()), dtype=np.float64)
    if np.any(values < 0):
        raise DomainError("std values must be non-negative")
    m = float(values.max())
    if m == 0.0:
        return w
    if mode == GT_BAND_ONLY:
        for (r, c), s in std_on_boundary.items():
            w[r, c] = s / (m + WEIGHT_EPS)
        return w
    std_everywhere = np.asarray(std_everywhere, dtype=np.float64)
    if std_everywhere.shape != gt_boundary.shape:
        raise ShapeError("std field and boundary map shapes differ")
    return np.clip(std_everywhere / (m + WEIGHT_EPS), 0.0, 1.0)


def pool_depth(depth: np.ndarray, factor: int = 4, valid: np.ndarray | None = None):
    """Average-pool depth over valid pixels to mask resolution.

    Blocks with no valid pixel pool to 0 and are flagged invalid. Spatial
    dims must be divisible by ``factor``.
    """
    depth = np.asarray(depth, dtype=np.float64)
    h, w = depth.shape
    if h % factor or w % factor:
        raise ShapeError(f"depth shape {depth.shape} not divisible by pooling factor {factor}")
    if valid is None:
        valid = depth > 0
    v = valid.astype(np.float64).reshape(h // factor, factor, w // factor, factor)
    d = (depth * valid).reshape(h // factor, factor, w // factor, factor)
    counts = v.sum(axis=(1, 3))
    sums = d.sum(axis=(1, 3))
    pooled = np.where(counts > 0, sums / np.maximum(counts, 1.0), 0.0)
    return pooled, counts > 0


def boundary_pixels(boundary_map: np.ndarray) -> list[tuple[int, int]]:
    """Pixels where a boundary map is active (value > 0.5)."""
    rows, cols = np.nonzero(boundary_map > 0.5)
    return list(zip(rows.tolist(), cols.tolist()))


def instance_weight_map(gt_mask: np.ndarray, depth_at_res: np.ndarray,
                        depth_valid: np.ndarray | None = None,
                        mode: str = FULL_FIELD, window: int = 3) -> np.ndarray:
    """Full weight pipeline for one instance: Sobel -> std -> normalization.

    ``gt_mask`` is the binary instance mask and ``depth_at_res`` the depth
    map at the same resolution. The result depends only on ground truth, so
    callers may cache it across training steps.
    """
    g, g_valid = sobel_gradient_mask(depth_at_res, valid=depth_valid)
    b_gt = laplacian_boundary(gt_mask)
    pixels = boundary_pixels(b_gt)
    if not pixels:
        warnings.warn("instance has an empty ground-truth boundary; weights are zero",
                      DegenerateInstanceWarning, stacklevel=2)
        return np.zeros_like(b_gt)
    stds = windowed_std(g, at=pixels, window=window, valid=g_valid)
    std_field = windowed_std(g, window=window, valid=g_valid)
    return normalize_weights(stds, std_field, b_gt, mode=mode)

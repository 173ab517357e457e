"""RGB-D refinement of a saliency map: position prior then local compactness prior."""
from __future__ import annotations

import numpy as np
from scipy import ndimage

from .regions import RegionMask, adjacent_pairs, region_means
from .tensor import sigmoid_forward

SIGMA_POS = 5.0
SIGMA_DEP = 0.02
SIGMA_COL = 5.0


def fill_invalid_depth(raw: np.ndarray, invalid: float = 0.0) -> np.ndarray:
    """Replace sentinel pixels by their nearest valid neighbour."""
    raw = np.asarray(raw, dtype=np.float64)
    bad = raw == invalid
    if not bad.any():
        return raw.copy()
    if bad.all():
        return np.zeros_like(raw)
    _, (iy, ix) = ndimage.distance_transform_edt(bad, return_indices=True)
    return raw[iy, ix]


def transform_depth(raw: np.ndarray, invalid: float | None = None) -> np.ndarray:
    """Rescale to [0, 1] with near pixels bright: (max - raw) / (max - min).
    A constant map becomes 0.5 everywhere. Pixels equal to ``invalid`` (the
    sensor dropout sentinel, 0 in raw files) are filled from the nearest valid
    pixel first."""
    d = np.asarray(raw, dtype=np.float64) if invalid is None else fill_invalid_depth(raw, invalid)
    if not np.all(np.isfinite(d)):
        raise ValueError("depth contains non-finite values")
    lo, hi = d.min(), d.max()
    if hi <= lo:
        return np.full(d.shape, 0.5)
    return (hi - d) / (hi - lo)


def position_prior(s0: np.ndarray, depth: np.ndarray, sigma: float = SIGMA_POS) -> np.ndarray:
    s0 = np.asarray(s0, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    if s0.shape != depth.shape:
        raise ValueError(f"saliency {s0.shape} and depth {depth.shape} differ in shape")
    return s0 * sigmoid_forward(sigma * depth)


def region_neighbours(mask: RegionMask) -> list[np.ndarray]:
    """Per region: ids of regions sharing a 4-border, plus itself (sorted)."""
    n = mask.region_count
    a, b, _ = adjacent_pairs(mask.labels) if n > 1 else (np.array([], int), np.array([], int), None)
    out = []
    for i in range(n):
        out.append(np.union1d(b[a == i], [i]))
    return out


def compactness_weights(mean_depth: np.ndarray, mean_rgb: np.ndarray, i: int, nbrs: np.ndarray,
                        sigma_dep: float = SIGMA_DEP, sigma_col: float = SIGMA_COL) -> np.ndarray:
    dd = mean_depth[nbrs] - mean_depth[i]
    dc = np.linalg.norm(mean_rgb[nbrs] - mean_rgb[i], axis=1)
    return np.exp(-dd ** 2 / (2 * sigma_dep ** 2)) * np.exp(-dc ** 2 / (2 * sigma_col ** 2))


def compactness_prior(s1: np.ndarray, mask: RegionMask, depth: np.ndarray, image: np.ndarray,
                      sigma_dep: float = SIGMA_DEP, sigma_col: float = SIGMA_COL) -> np.ndarray:
    """Region-level smoothing: each region becomes the normalised, depth- and
    colour-weighted average of its neighbours' mean S1. ``image`` is RGB in 0..255."""
    lab = mask.labels
    s1 = np.asarray(s1, dtype=np.float64)
    if s1.shape != lab.shape or np.shape(depth) != lab.shape or np.shape(image)[:2] != lab.shape:
        raise ValueError("saliency, mask, depth and image must share spatial dims")
    img = np.asarray(image, dtype=np.float64)
    s_mean = region_means(s1, lab)
    d_mean = region_means(np.asarray(depth, dtype=np.float64), lab)
    rgb_mean = np.stack([region_means(img[..., c], lab) for c in range(3)], axis=1)
    s2 = np.empty_like(s_mean)
    for i, nb in enumerate(region_neighbours(mask)):
        w = compactness_weights(d_mean, rgb_mean, i, nb, sigma_dep, sigma_col)
        # self-weight is exp(0) * exp(0) = 1, so the sum is never zero
        s2[i] = np.dot(w, s_mean[nb]) / w.sum()
    return s2[lab]


def refine(s0: np.ndarray, raw_depth: np.ndarray, mask: RegionMask, image: np.ndarray,
           sigma: float = SIGMA_POS, sigma_dep: float = SIGMA_DEP, sigma_col: float = SIGMA_COL,
           invalid: float | None = 0.0):
    """S0 -> (S1, S2) from raw sensor depth."""
    d = transform_depth(raw_depth, invalid)
    s1 = position_prior(s0, d, sigma)
    return s1, compactness_prior(s1, mask, d, image, sigma_dep, sigma_col)

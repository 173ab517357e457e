"""Mask-based RoI max pooling over irregular regions.

Each RoI's feature-map rectangle is split into a fixed grid of sub-windows.
A sub-window outputs the max over cells that are inside it *and* carry the
RoI's region id in the downsampled mask, or exactly 0 when no such cell
exists.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .regions import DownsampledMask, RegionMask, RoI
from .tensor import EMPTY

POOL_SIZE = 7


@dataclass(frozen=True)
class FeatureRoI:
    """RoI in feature-map coordinates; ``region_id`` indexes the downsampled mask
    (-1 when the region vanished under downsampling)."""

    region_id: int
    rect: tuple[int, int, int, int]  # x0, y0, x1, y1 inclusive


@dataclass
class PooledRegionFeature:
    region_id: int
    values: np.ndarray  # (C, P, P)
    argmax: np.ndarray  # (C, P, P) flat index into H*W of the feature map, EMPTY sentinel
    vanished: bool = False


def to_feature_rois(rois: list[RoI], ds: DownsampledMask, feature_hw: tuple[int, int]) -> list[FeatureRoI]:
    """Image-pixel RoIs -> feature cells: start floored, end covered."""
    f = ds.factor
    fh, fw = feature_hw
    out = []
    for roi in rois:
        x0, y0, x1, y1 = roi.rect
        fx0, fy0 = min(x0 // f, fw - 1), min(y0 // f, fh - 1)
        # ceil of the exclusive end, back to inclusive
        fx1 = min(-(-(x1 + 1) // f) - 1, fw - 1)
        fy1 = min(-(-(y1 + 1) // f) - 1, fh - 1)
        out.append(FeatureRoI(int(ds.id_map[roi.region_id]), (fx0, fy0, fx1, fy1)))
    return out


def bin_edges(extent: int, bins: int = POOL_SIZE) -> np.ndarray:
    """Integer sub-window boundaries floor(i * extent / bins), i = 0..bins."""
    return (np.arange(bins + 1) * extent) // bins


def mask_roi_pool_forward(features: np.ndarray, rois: list[FeatureRoI], mask_ds: RegionMask | np.ndarray,
                          pool_size: int = POOL_SIZE) -> list[PooledRegionFeature]:
    """``features`` is (C, H, W) or (1, C, H, W)."""
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim == 4:
        if feats.shape[0] != 1:
            raise ValueError("mask RoI pooling handles one image at a time")
        feats = feats[0]
    labels = mask_ds.labels if isinstance(mask_ds, RegionMask) else np.asarray(mask_ds)
    c, h, w = feats.shape
    if labels.shape != (h, w):
        raise ValueError(f"downsampled mask {labels.shape} does not match feature map {(h, w)}")
    flat = feats.reshape(c, h * w)
    present = np.zeros(int(labels.max()) + 2, dtype=bool)
    present[np.unique(labels)] = True

    out: list[PooledRegionFeature] = []
    active, act_idx = [], []
    for i, roi in enumerate(rois):
        rid = roi.region_id
        vanished = rid < 0 or rid >= len(present) - 1 or not present[rid]
        out.append(PooledRegionFeature(rid, np.zeros((c, pool_size, pool_size)),
                                       np.full((c, pool_size, pool_size), EMPTY, dtype=np.int64), vanished))
        if not vanished:
            active.append(roi)
            act_idx.append(i)
    if not active:
        return out

    ys, xs = np.arange(h), np.arange(w)
    y0 = np.array([r.rect[1] for r in active])[:, None]
    x0 = np.array([r.rect[0] for r in active])[:, None]
    hh = np.array([r.rect[3] - r.rect[1] + 1 for r in active])
    ww = np.array([r.rect[2] - r.rect[0] + 1 for r in active])
    by = y0 + (np.arange(pool_size + 1)[None, :] * hh[:, None]) // pool_size  # (A, P+1)
    bx = x0 + (np.arange(pool_size + 1)[None, :] * ww[:, None]) // pool_size
    row_in = (ys[None, None, :] >= by[:, :-1, None]) & (ys[None, None, :] < by[:, 1:, None])  # (A, P, H)
    col_in = (xs[None, None, :] >= bx[:, :-1, None]) & (xs[None, None, :] < bx[:, 1:, None])  # (A, P, W)
    ids = np.array([r.region_id for r in active])
    own = labels[None, :, :] == ids[:, None, None]  # (A, H, W)
    member = row_in[:, :, None, :, None] & col_in[:, None, :, None, :] & own[:, None, None, :, :]
    member = member.reshape(len(active), pool_size * pool_size, h * w)  # (A, P*P, HW)

    masked = np.where(member[:, :, None, :], flat[None, None, :, :], -np.inf)  # (A, P*P, C, HW)
    arg = masked.argmax(axis=-1)  # first maximal index -> row-major tie break
    val = np.take_along_axis(masked, arg[..., None], axis=-1)[..., 0]
    empty = ~member.any(axis=-1)  # (A, P*P)
    val = np.where(empty[:, :, None], 0.0, val)
    arg = np.where(empty[:, :, None], EMPTY, arg)
    for k, i in enumerate(act_idx):
        out[i].values = val[k].T.reshape(c, pool_size, pool_size)
        out[i].argmax = arg[k].T.reshape(c, pool_size, pool_size)
    return out


def mask_roi_pool_backward(pooled: list[PooledRegionFeature], upstream: list[np.ndarray] | np.ndarray,
                           feature_shape: tuple[int, ...]) -> np.ndarray:
    """Scatter-add every upstream value to its argmax source cell, RoI by RoI."""
    shape = tuple(feature_shape)
    c = shape[-3]
    hw = shape[-2] * shape[-1]
    grad = np.zeros((c, hw))
    chan = np.broadcast_to(np.arange(c)[:, None, None], pooled[0].argmax.shape) if pooled else None
    for p, g in zip(pooled, upstream):
        if p.vanished:
            continue
        g = np.asarray(g).reshape(p.argmax.shape)
        valid = p.argmax != EMPTY
        np.add.at(grad, (chan[valid], p.argmax[valid]), g[valid])
    return grad.reshape(shape)

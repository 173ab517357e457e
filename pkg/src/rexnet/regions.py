"""Region decompositions: SLIC superpixels and edge regions, plus the
bookkeeping RegionNet needs (RoIs, 16x-downsampled masks, region labels,
region-mean maps)."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from skimage.color import rgb2lab

log = logging.getLogger(__name__)

SALIENT, BACKGROUND, IGNORE = 1, 0, -1
_FOUR = ndimage.generate_binary_structure(2, 1)


@dataclass
class RegionMask:
    labels: np.ndarray  # (H, W) int64 in {0..R-1}

    @property
    def region_count(self) -> int:
        return int(self.labels.max()) + 1 if self.labels.size else 0

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape

    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels.ravel(), minlength=self.region_count)

    def validate(self, connected: bool = True) -> None:
        lab = self.labels
        if lab.ndim != 2 or lab.size == 0:
            raise ValueError(f"region mask must be a non-empty 2-D grid, got {lab.shape}")
        if lab.min() < 0:
            raise ValueError("region labels must be non-negative")
        if (self.sizes() == 0).any():
            raise ValueError("region labels are not contiguous from 0")
        if connected:
            for r, sl in enumerate(ndimage.find_objects(lab + 1)):
                _, n = ndimage.label(lab[sl] == r, structure=_FOUR)
                if n != 1:
                    raise ValueError(f"region {r} has {n} 4-connected components")


@dataclass(frozen=True)
class RoI:
    region_id: int
    rect: tuple[int, int, int, int]  # x0, y0, x1, y1 inclusive


def relabel_contiguous(labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Map labels to 0..R-1 preserving order. Returns (new_labels, present_old_ids)."""
    present, inv = np.unique(labels, return_inverse=True)
    return inv.reshape(labels.shape).astype(np.int64), present


def adjacent_pairs(labels: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Symmetric list of (a, b, shared 4-border length) for touching labels a != b."""
    a = np.concatenate([labels[:, :-1].ravel(), labels[:-1, :].ravel()])
    b = np.concatenate([labels[:, 1:].ravel(), labels[1:, :].ravel()])
    diff = a != b
    a, b = a[diff], b[diff]
    a, b = np.concatenate([a, b]), np.concatenate([b, a])
    n = int(labels.max()) + 1
    codes, counts = np.unique(a * n + b, return_counts=True)
    return codes // n, codes % n, counts


def _best_neighbour(labels: np.ndarray, eligible: np.ndarray) -> np.ndarray:
    """For every label, the eligible neighbour with the longest shared border
    (ties -> smallest id); -1 where there is none."""
    a, b, cnt = adjacent_pairs(labels)
    sel = eligible[b]
    a, b, cnt = a[sel], b[sel], cnt[sel]
    best = np.full(len(eligible), -1, dtype=np.int64)
    if a.size:
        order = np.lexsort((b, -cnt, a))
        a, b = a[order], b[order]
        first = np.ones(a.size, dtype=bool)
        first[1:] = a[1:] != a[:-1]
        best[a[first]] = b[first]
    return best


def split_components(labels: np.ndarray) -> np.ndarray:
    """Give every 4-connected component of every label its own id."""
    out = np.full(labels.shape, -1, dtype=np.int64)
    nxt = 0
    for r, sl in enumerate(ndimage.find_objects(labels + 1)):
        if sl is None:
            continue
        comp, n = ndimage.label(labels[sl] == r, structure=_FOUR)
        sub = out[sl]
        sel = comp > 0
        sub[sel] = comp[sel] - 1 + nxt
        nxt += n
    return out


def merge_small_regions(labels: np.ndarray, min_size: int) -> np.ndarray:
    """Merge regions under ``min_size`` pixels into the large-enough neighbour
    sharing the longest border."""
    labels, _ = relabel_contiguous(labels)
    sizes = np.bincount(labels.ravel())
    if sizes.size == 1 or (sizes >= min_size).all():
        return labels
    keep = sizes >= min_size
    if not keep.any():
        keep[int(np.argmax(sizes))] = True
    return _fold_into_kept(labels, keep)


def _fold_into_kept(labels: np.ndarray, keep: np.ndarray) -> np.ndarray:
    target = np.arange(len(keep))
    while True:
        cur = target[labels]
        live = ~keep & (np.bincount(cur.ravel(), minlength=len(keep)) > 0)
        if not live.any():
            break
        best = _best_neighbour(cur, keep)
        movers = live & (best >= 0)
        if not movers.any():  # pieces with no kept neighbour at all
            keep[np.flatnonzero(live)[0]] = True
            continue
        target = np.where(movers[target], best[target], target)
    return relabel_contiguous(target[labels])[0]


def enforce_connectivity(labels: np.ndarray, min_size: int = 1) -> np.ndarray:
    """Split labels into 4-connected pieces and fold orphans (every piece but
    the largest of its label, and anything under ``min_size``) into the kept
    neighbour sharing the longest border."""
    comps = split_components(labels)
    n = int(comps.max()) + 1
    sizes = np.bincount(comps.ravel(), minlength=n)
    owner = np.zeros(n, dtype=np.int64)
    owner[comps.ravel()] = labels.ravel()
    order = np.lexsort((-sizes, owner))  # per owner, largest piece first
    first = np.ones(n, dtype=bool)
    first[1:] = owner[order][1:] != owner[order][:-1]
    keep = np.zeros(n, dtype=bool)
    keep[order[first]] = True
    keep &= sizes >= min_size
    if not keep.any():
        keep[int(np.argmax(sizes))] = True
    return _fold_into_kept(comps, keep)


# ------------------------------------------------------------------ SLIC

def _grid_shape(h: int, w: int, k: int) -> tuple[int, int]:
    nx = min(w, max(1, math.ceil(math.sqrt(k * w / h))))
    ny = min(h, max(1, round(k / nx)))
    return ny, nx


def slic_superpixels(image: np.ndarray, k: int = 200, compactness: float = 10.0,
                     iterations: int = 10) -> RegionMask:
    """SLIC over CIELAB + (y, x) with window search 2S x 2S."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] == 0 or image.shape[1] == 0:
        raise ValueError(f"expected a non-empty H x W x 3 image, got {image.shape}")
    h, w = image.shape[:2]
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > h * w:
        raise ValueError(f"k={k} exceeds pixel count {h * w}")
    if k == 1:
        return RegionMask(np.zeros((h, w), dtype=np.int64))

    img = image.astype(np.float64)
    if img.max() > 1.0:
        img = img / 255.0
    lab = rgb2lab(img)
    step = math.sqrt(h * w / k)
    ny, nx = _grid_shape(h, w, k)
    cy = (np.arange(ny) + 0.5) * h / ny
    cx = (np.arange(nx) + 0.5) * w / nx
    yy, xx = np.meshgrid(cy, cx, indexing="ij")
    centers_yx = np.stack([yy.ravel(), xx.ravel()], axis=1)

    # move seeds to the lowest-gradient pixel of their 3x3 neighbourhood
    gy = np.zeros((h, w))
    gx = np.zeros((h, w))
    gy[1:-1] = ((lab[2:] - lab[:-2]) ** 2).sum(-1)
    gx[:, 1:-1] = ((lab[:, 2:] - lab[:, :-2]) ** 2).sum(-1)
    grad = gy + gx
    offsets = [(0, 0)] + [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1) if (dy, dx) != (0, 0)]
    for i, (y, x) in enumerate(centers_yx):
        yi, xi = int(y), int(x)
        best, best_g = (yi, xi), grad[yi, xi]
        for dy, dx in offsets:
            py, px = yi + dy, xi + dx
            if 0 <= py < h and 0 <= px < w and grad[py, px] < best_g:
                best, best_g = (py, px), grad[py, px]
        centers_yx[i] = best
    centers_lab = lab[centers_yx[:, 0].astype(int), centers_yx[:, 1].astype(int)].copy()

    ygrid, xgrid = np.mgrid[0:h, 0:w].astype(np.float64)
    ratio = (compactness / step) ** 2
    labels = np.zeros((h, w), dtype=np.int64)
    r = int(math.ceil(step))
    for _ in range(iterations):
        dist = np.full((h, w), np.inf)
        for i, ((y, x), c) in enumerate(zip(centers_yx, centers_lab)):
            y0, y1 = max(0, int(y) - r), min(h, int(y) + r + 1)
            x0, x1 = max(0, int(x) - r), min(w, int(x) + r + 1)
            dc = ((lab[y0:y1, x0:x1] - c) ** 2).sum(-1)
            ds = (ygrid[y0:y1, x0:x1] - y) ** 2 + (xgrid[y0:y1, x0:x1] - x) ** 2
            d = dc + ratio * ds
            sub = dist[y0:y1, x0:x1]
            better = d < sub
            sub[better] = d[better]
            labels[y0:y1, x0:x1][better] = i
        n = len(centers_yx)
        counts = np.bincount(labels.ravel(), minlength=n).astype(np.float64)
        alive = counts > 0
        for arr, out in ((ygrid, centers_yx[:, 0]), (xgrid, centers_yx[:, 1])):
            s = np.bincount(labels.ravel(), weights=arr.ravel(), minlength=n)
            out[alive] = s[alive] / counts[alive]
        for ch in range(3):
            s = np.bincount(labels.ravel(), weights=lab[..., ch].ravel(), minlength=n)
            centers_lab[alive, ch] = s[alive] / counts[alive]

    min_size = max(1, int(step * step / 4))
    return RegionMask(enforce_connectivity(labels, min_size=min_size))


# ----------------------------------------------------------- edge regions

def _ridge_normal_offsets(smooth: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel unit offset (dy, dx) across the ridge, quantised to 8 neighbours."""
    hyy = ndimage.sobel(ndimage.sobel(smooth, axis=0), axis=0)
    hxx = ndimage.sobel(ndimage.sobel(smooth, axis=1), axis=1)
    hxy = ndimage.sobel(ndimage.sobel(smooth, axis=0), axis=1)
    # orientation of the most negative Hessian eigenvector
    theta = 0.5 * np.arctan2(2 * hxy, hxx - hyy) + np.pi / 2
    sector = np.round(theta / (np.pi / 4)).astype(int) % 4  # 0: x, 1: diag, 2: y, 3: anti-diag
    dy = np.choose(sector, [0, 1, 1, 1])
    dx = np.choose(sector, [1, 1, 0, -1])
    return dy, dx


def thin_edges(edges: np.ndarray, threshold: float = 0.3) -> np.ndarray:
    """Non-maximum suppression across the local ridge normal, then hysteresis
    (strong >= threshold, weak >= threshold / 2 connected to strong)."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    e = np.clip(np.asarray(edges, dtype=np.float64), 0.0, 1.0)
    if not e.any():
        return np.zeros(e.shape, dtype=bool)
    smooth = ndimage.gaussian_filter(e, 1.0, mode="nearest")
    dy, dx = _ridge_normal_offsets(smooth)
    h, w = e.shape
    yy, xx = np.mgrid[0:h, 0:w]
    padded = np.pad(smooth, 1, mode="constant", constant_values=-1.0)
    fwd = padded[yy + dy + 1, xx + dx + 1]
    bwd = padded[yy - dy + 1, xx - dx + 1]
    # strict on one side so a flat-topped pair keeps exactly one pixel
    peak = (smooth > fwd) & (smooth >= bwd) & (e > 0)
    strong = peak & (e >= threshold)
    weak = peak & (e >= 0.5 * threshold)
    comp, _ = ndimage.label(weak, structure=np.ones((3, 3)))
    keep = np.unique(comp[strong])
    keep = keep[keep > 0]
    return np.isin(comp, keep)


def _binary_close(mask: np.ndarray) -> np.ndarray:
    p = np.pad(mask, 1, mode="edge")
    st = np.ones((3, 3), dtype=bool)
    closed = ndimage.binary_erosion(ndimage.binary_dilation(p, st), st, border_value=1)
    return closed[1:-1, 1:-1]


def edge_regions(thinned: np.ndarray, min_size: int = 1) -> RegionMask:
    """Partition the image along a binary edge map.

    Edges get a one-pixel closing; non-edge pixels form 4-connected components;
    edge pixels then join the adjacent region with the most 4-neighbours
    (ties -> smallest label), repeatedly until none are left.
    """
    edge = _binary_close(np.asarray(thinned, dtype=bool))
    h, w = edge.shape
    comp, n = ndimage.label(~edge, structure=_FOUR)
    if n == 0:
        log.warning("edge map covers every pixel; returning a single region")
        return RegionMask(np.zeros((h, w), dtype=np.int64))
    labels = comp.astype(np.int64) - 1  # -1 on edge pixels
    while (labels < 0).any():
        p = np.pad(labels, 1, constant_values=-1)
        neigh = np.stack([p[:-2, 1:-1], p[2:, 1:-1], p[1:-1, :-2], p[1:-1, 2:]])
        votes = np.zeros((n, h, w), dtype=np.int32)
        for nb in neigh:
            yy, xx = np.nonzero(nb >= 0)
            np.add.at(votes, (nb[yy, xx], yy, xx), 1)
        best = votes.argmax(axis=0)
        has = votes.max(axis=0) > 0
        fill = (labels < 0) & has
        labels[fill] = best[fill]
    if min_size > 1:
        labels = merge_small_regions(labels, min_size)
    return RegionMask(enforce_connectivity(labels))


# ------------------------------------------------------------------- RoIs

def region_rois(mask: RegionMask) -> list[RoI]:
    rois = []
    for r, sl in enumerate(ndimage.find_objects(mask.labels + 1)):
        ys, xs = sl
        rois.append(RoI(r, (xs.start, ys.start, xs.stop - 1, ys.stop - 1)))
    return rois


@dataclass
class DownsampledMask:
    mask: RegionMask
    id_map: np.ndarray  # original region id -> downsampled id, -1 if vanished
    factor: int

    @property
    def vanished(self) -> np.ndarray:
        return np.flatnonzero(self.id_map < 0)


def downsample_mask(mask: RegionMask, factor: int = 16) -> DownsampledMask:
    """Majority label per factor x factor block (ties -> smallest label)."""
    lab = mask.labels
    h, w = lab.shape
    ph, pw = (-h) % factor, (-w) % factor
    if ph or pw:
        lab = np.pad(lab, ((0, ph), (0, pw)), mode="edge")
    hb, wb = lab.shape[0] // factor, lab.shape[1] // factor
    n = mask.region_count
    blocks = lab.reshape(hb, factor, wb, factor).transpose(0, 2, 1, 3).reshape(hb * wb, -1)
    counts = np.zeros((hb * wb, n), dtype=np.int64)
    np.add.at(counts, (np.repeat(np.arange(hb * wb), blocks.shape[1]), blocks.ravel()), 1)
    major = counts.argmax(axis=1).reshape(hb, wb)
    new, present = relabel_contiguous(major)
    id_map = np.full(n, -1, dtype=np.int64)
    id_map[present] = np.arange(len(present))
    return DownsampledMask(RegionMask(new), id_map, factor)


def resample_labels(labels: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour (pixel-centre) resampling of a label grid."""
    h, w = labels.shape
    ys = np.minimum(((np.arange(shape[0]) + 0.5) * h / shape[0]).astype(int), h - 1)
    xs = np.minimum(((np.arange(shape[1]) + 0.5) * w / shape[1]).astype(int), w - 1)
    return labels[np.ix_(ys, xs)]


def region_label(mask: RegionMask, gt: np.ndarray) -> np.ndarray:
    """Per-region SALIENT / BACKGROUND / IGNORE by the strict 80% rule."""
    gt = np.asarray(gt).astype(bool)
    if gt.shape != mask.shape:
        raise ValueError(f"gt shape {gt.shape} != mask shape {mask.shape}")
    n = mask.region_count
    total = np.bincount(mask.labels.ravel(), minlength=n)
    inside = np.bincount(mask.labels.ravel(), weights=gt.ravel(), minlength=n).astype(np.int64)
    outside = total - inside
    out = np.full(n, IGNORE, dtype=np.int64)
    # integer form of fraction > 0.8
    out[5 * inside > 4 * total] = SALIENT
    out[5 * outside > 4 * total] = BACKGROUND
    return out


def region_means(values: np.ndarray, labels: np.ndarray) -> np.ndarray:
    n = int(labels.max()) + 1
    counts = np.bincount(labels.ravel(), minlength=n)
    sums = np.bincount(labels.ravel(), weights=values.ravel(), minlength=n)
    return sums / np.maximum(counts, 1)


def region_mean_map(values: np.ndarray, mask: RegionMask | np.ndarray) -> np.ndarray:
    labels = mask.labels if isinstance(mask, RegionMask) else np.asarray(mask)
    values = np.asarray(values, dtype=np.float64)
    if labels.shape != values.shape:
        labels = resample_labels(labels, values.shape)
    labels, _ = relabel_contiguous(labels)
    return region_means(values, labels)[labels]

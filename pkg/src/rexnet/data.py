"""Dataset layout, PNG I/O and the synthetic shapes corpus.

Layout under a dataset root::

    manifest.csv   id,split
    images/<id>.png   8-bit RGB
    gt/<id>.png       8-bit gray, salient >= 128
    depth/<id>.png    16-bit gray raw depth (0 = invalid), optional
    edges/<id>.png    8/16-bit gray edge probability, optional
    masks_sp/<id>.png, masks_edge/<id>.png   16-bit region labels, optional
"""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .regions import RegionMask
from .rxt import atomic_write_bytes

log = logging.getLogger(__name__)

DIRS = ("images", "gt", "depth", "edges", "masks_sp", "masks_edge")


class DatasetError(RuntimeError):
    pass


# ------------------------------------------------------------------ PNG I/O

def _encode_png(array: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(array).save(buf, format="PNG")
    return buf.getvalue()


def write_png(path, array: np.ndarray) -> None:
    atomic_write_bytes(path, _encode_png(array))


def read_png(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im.load()
            return np.array(im)
    except FileNotFoundError:
        raise DatasetError(f"missing file: {path}") from None
    except Exception as exc:  # PIL raises a zoo of types on corrupt data
        raise DatasetError(f"cannot decode {path}: {exc}") from None


def read_rgb(path) -> np.ndarray:
    a = read_png(path)
    if a.ndim == 2:
        a = np.repeat(a[..., None], 3, axis=2)
    if a.ndim != 3 or a.shape[2] < 3:
        raise DatasetError(f"{path}: expected an RGB image, got shape {a.shape}")
    return a[..., :3].astype(np.uint8)


def read_gray_unit(path) -> np.ndarray:
    """8- or 16-bit gray PNG scaled to [0, 1]."""
    a = read_png(path)
    if a.ndim == 3:
        a = a[..., 0]
    scale = 65535.0 if a.dtype == np.uint16 or a.max() > 255 else 255.0
    return np.clip(a.astype(np.float64) / scale, 0.0, 1.0)


def read_gt(path) -> np.ndarray:
    a = read_png(path)
    if a.ndim == 3:
        a = a[..., 0]
    if a.dtype == np.uint16:
        a = a >> 8
    return a >= 128


def write_mask(path, mask: RegionMask) -> None:
    if mask.region_count > 65536:
        raise ValueError(f"{mask.region_count} regions do not fit a 16-bit PNG")
    write_png(path, mask.labels.astype(np.uint16))


def read_mask(path) -> RegionMask:
    a = read_png(path)
    if a.ndim != 2:
        raise DatasetError(f"{path}: region mask must be single-channel")
    return RegionMask(a.astype(np.int64))


def write_unit_gray(path, values: np.ndarray) -> None:
    write_png(path, np.floor(np.clip(values, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8))


# ----------------------------------------------------------------- manifest

@dataclass
class SampleEntry:
    id: str
    split: str
    image: Path
    gt: Path
    depth: Path | None = None
    edges: Path | None = None
    mask_sp: Path | None = None
    mask_edge: Path | None = None


@dataclass
class DatasetManifest:
    root: Path
    entries: list[SampleEntry]

    def split(self, name: str) -> list[SampleEntry]:
        return [e for e in self.entries if e.split == name]


def load_manifest(root) -> DatasetManifest:
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root does not exist: {root}")
    mpath = root / "manifest.csv"
    if mpath.exists():
        with open(mpath, newline="") as fh:
            rows = [(r["id"], r.get("split") or "test") for r in csv.DictReader(fh)]
    else:
        rows = [(p.stem, "test") for p in sorted((root / "images").glob("*.png"))]
    entries = []
    for sid, split in rows:
        if split not in ("train", "test"):
            raise DatasetError(f"{mpath}: sample {sid} has unknown split {split!r}")
        opt = {}
        for key, d in (("depth", "depth"), ("edges", "edges"), ("mask_sp", "masks_sp"), ("mask_edge", "masks_edge")):
            p = root / d / f"{sid}.png"
            opt[key] = p if p.exists() else None
        e = SampleEntry(sid, split, root / "images" / f"{sid}.png", root / "gt" / f"{sid}.png", **opt)
        for p in (e.image, e.gt):
            if not p.exists():
                raise DatasetError(f"missing file: {p}")
        entries.append(e)
    return DatasetManifest(root, entries)


def write_manifest(root, rows: list[tuple[str, str]]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "split"])
    w.writerows(rows)
    atomic_write_bytes(Path(root) / "manifest.csv", buf.getvalue().encode())


# --------------------------------------------------------- synthetic corpus

def _smooth_field(rng, h, w, sigma):
    f = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma, mode="wrap")
    return (f - f.min()) / max(f.max() - f.min(), 1e-12)


def _shape_mask(rng, h, w, kind: str) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    cy, cx = rng.uniform(0.2, 0.8) * h, rng.uniform(0.2, 0.8) * w
    ry, rx = rng.uniform(0.1, 0.3) * h, rng.uniform(0.1, 0.3) * w
    if kind == "ellipse":
        return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    if kind == "rectangle":
        return (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
    # triangle: three vertices on a jittered circle, half-plane test
    ang = rng.uniform(0, 2 * np.pi) + np.array([0, 2, 4]) * np.pi / 3 + rng.uniform(-0.3, 0.3, 3)
    vy, vx = cy + ry * 1.3 * np.sin(ang), cx + rx * 1.3 * np.cos(ang)
    inside = np.ones((h, w), dtype=bool)
    sign = None
    for i in range(3):
        j = (i + 1) % 3
        cross = (vx[j] - vx[i]) * (yy - vy[i]) - (vy[j] - vy[i]) * (xx - vx[i])
        s = np.sign((vx[j] - vx[i]) * (vy[(i + 2) % 3] - vy[i]) - (vy[j] - vy[i]) * (vx[(i + 2) % 3] - vx[i]))
        inside &= cross * s >= 0
        sign = s
    del sign
    return inside


def synth_sample(rng: np.random.Generator, size: int = 96) -> dict[str, np.ndarray]:
    """One image with its gt, edge-probability map and raw depth."""
    h = w = size
    while True:
        n = int(rng.integers(1, 4))
        kinds = rng.choice(["ellipse", "rectangle", "triangle"], size=n)
        visible = np.zeros((h, w), dtype=np.int64)
        for k, kind in enumerate(kinds, 1):
            visible[_shape_mask(rng, h, w, str(kind))] = k
        gt = visible > 0
        frac = gt.mean()
        present = np.unique(visible[gt])
        if 0.05 <= frac <= 0.5 and len(present) == n:
            break

    # textured, desaturated background
    base_a = rng.uniform(60, 200, 3)
    base_b = base_a + rng.uniform(-50, 50, 3)
    mix = _smooth_field(rng, h, w, 6.0)[..., None]
    img = base_a * (1 - mix) + base_b * mix
    gray = img.mean(axis=2, keepdims=True)
    img = gray + 0.4 * (img - gray)
    freq = rng.uniform(0.3, 0.8)
    theta = rng.uniform(0, np.pi)
    yy, xx = np.mgrid[0:h, 0:w]
    stripes = np.sin(freq * (xx * np.cos(theta) + yy * np.sin(theta)))
    img = img + 18.0 * stripes[..., None] + rng.normal(0, 8.0, (h, w, 1))

    # saturated, nearly flat shapes
    for k in range(1, n + 1):
        hue = rng.uniform(0, 1)
        col = 255.0 * np.clip(np.abs(((hue * 6 + np.array([0, 4, 2])) % 6) - 3) - 1, 0, 1)
        col = 0.25 * 255 + 0.7 * col
        sel = visible == k
        img[sel] = col + rng.normal(0, 4.0, (int(sel.sum()), 3))
    image = np.clip(np.round(img), 0, 255).astype(np.uint8)

    # edge probability: blurred outlines of every visible piece
    boundary = np.zeros((h, w), dtype=bool)
    boundary[:, 1:] |= visible[:, 1:] != visible[:, :-1]
    boundary[1:, :] |= visible[1:, :] != visible[:-1, :]
    edge = ndimage.gaussian_filter(boundary.astype(np.float64), 0.8)
    edge = 0.9 * edge / max(edge.max(), 1e-12)
    edge = np.clip(edge + 0.08 * _smooth_field(rng, h, w, 2.0) * (stripes > 0.9), 0.0, 1.0)

    # raw depth in millimetres: tilted far background, nearer flat objects, dropouts
    depth = 3500.0 + 1500.0 * (1.0 - yy / h) + rng.normal(0, 30.0, (h, w))
    for k in range(1, n + 1):
        depth[visible == k] = rng.uniform(900, 1800) + rng.normal(0, 15.0, int((visible == k).sum()))
    depth[rng.random((h, w)) < 0.01] = 0
    depth = np.clip(np.round(depth), 0, 65535).astype(np.uint16)

    return {"image": image, "gt": gt, "edges": edge, "depth": depth}


def gen_synthetic_corpus(root, n_train: int = 200, n_test: int = 50, size: int = 96, seed: int = 0) -> DatasetManifest:
    if size % 16:
        raise ValueError(f"image size must be divisible by 16, got {size}")
    root = Path(root)
    for d in ("images", "gt", "depth", "edges"):
        (root / d).mkdir(parents=True, exist_ok=True)
    rows = []
    for split, count, code in (("train", n_train, 0), ("test", n_test, 1)):
        for i in range(count):
            sid = f"{split}_{i:04d}"
            s = synth_sample(np.random.default_rng([seed, code, i]), size)
            write_png(root / "images" / f"{sid}.png", s["image"])
            write_png(root / "gt" / f"{sid}.png", (s["gt"] * 255).astype(np.uint8))
            write_unit_gray(root / "edges" / f"{sid}.png", s["edges"])
            write_png(root / "depth" / f"{sid}.png", s["depth"])
            rows.append((sid, split))
    write_manifest(root, rows)
    return load_manifest(root)

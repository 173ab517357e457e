"""Pipeline stages over a dataset directory: segment, train, predict, refine, evaluate.

Default locations relative to the dataset root ``data``::

    masks_sp/, masks_edge/       written by segment
    run/train_log.csv, run/checkpoint/{last,final}/   written by train
    pred/<kind>/<id>.png         written by predict (SS, SE, SC, S) and refine-depth (S1, S2)
    eval/                        written by eval
"""
from __future__ import annotations

import csv
import io
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import depth as depth_mod
from .config import RunConfig
from .data import (DatasetError, SampleEntry, load_manifest, read_gray_unit, read_gt, read_mask, read_png, read_rgb,
                   write_mask, write_unit_gray)
from .gradcheck import TOLERANCE, run_suite
from .metrics import EvalReport, aggregate, evaluate_map
from .model import FEATURE_STRIDE
from .regions import RegionMask, edge_regions, slic_superpixels, thin_edges
from .rxt import atomic_write_bytes, load_checkpoint
from .train import Sample, build_model, train_two_stage

log = logging.getLogger(__name__)

PRED_KINDS = ("SS", "SE", "SC", "S")
REFINED_KINDS = ("S1", "S2")
ALL_KINDS = PRED_KINDS + REFINED_KINDS


def _map(fn, items: list, workers: int) -> list:
    if workers > 1 and len(items) > 1:
        with ProcessPoolExecutor(workers) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def _csv_bytes(header: list[str], rows: list[list]) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows([[_fmt(v) for v in r] for r in rows])
    return buf.getvalue().encode("utf-8")


# --------------------------------------------------------------- segmentation

def segment_image(image: np.ndarray, edge_prob: np.ndarray, cfg: RunConfig) -> tuple[RegionMask, RegionMask]:
    sp = slic_superpixels(image, cfg.superpixels, cfg.slic_compactness, cfg.slic_iterations)
    em = edge_regions(thin_edges(edge_prob, cfg.edge_threshold), cfg.edge_min_region)
    return sp, em


def _edge_input(e: SampleEntry) -> np.ndarray:
    if e.edges is None:
        raise DatasetError(f"sample {e.id}: no edge-probability map under edges/")
    return read_gray_unit(e.edges)


def _segment_one(args) -> str:
    e, cfg, out = args
    image = read_rgb(e.image)
    sp, em = segment_image(image, _edge_input(e), cfg)
    write_mask(out / "masks_sp" / f"{e.id}.png", sp)
    write_mask(out / "masks_edge" / f"{e.id}.png", em)
    return e.id


def cmd_segment(cfg: RunConfig, data, out=None) -> int:
    man = load_manifest(data)
    out = Path(out) if out else man.root
    done = _map(_segment_one, [(e, cfg, out) for e in man.entries], cfg.workers)
    log.info("segmented %d images", len(done))
    return len(done)


def load_sample(e: SampleEntry, cfg: RunConfig, with_depth: bool = False) -> Sample:
    image = read_rgb(e.image)
    gt = read_gt(e.gt)
    if gt.shape != image.shape[:2]:
        raise DatasetError(f"{e.gt}: size {gt.shape} does not match image {image.shape[:2]}")
    if e.mask_sp is not None and e.mask_edge is not None:
        sp, em = read_mask(e.mask_sp), read_mask(e.mask_edge)
    else:
        sp, em = segment_image(image, _edge_input(e), cfg)
    for m, p in ((sp, e.mask_sp), (em, e.mask_edge)):
        if m.shape != gt.shape:
            raise DatasetError(f"{p}: mask size {m.shape} does not match image {gt.shape}")
    d = None
    if with_depth and e.depth is not None:
        d = read_png(e.depth).astype(np.float64)
        if d.ndim != 2 or d.shape != gt.shape:
            raise DatasetError(f"{e.depth}: depth must be single-channel and match the image size")
    return Sample(e.id, image, gt, sp, em, d)


def pad_to_stride(s: Sample, stride: int = FEATURE_STRIDE) -> Sample:
    """Edge-replicate so both sides are multiples of ``stride``; regions stay connected."""
    h, w = s.gt.shape
    ph, pw = -h % stride, -w % stride
    if not (ph or pw):
        return s
    pad2 = ((0, ph), (0, pw))
    return Sample(s.id, np.pad(s.image, pad2 + ((0, 0),), mode="edge"), np.pad(s.gt, pad2, mode="edge"),
                  RegionMask(np.pad(s.sp_mask.labels, pad2, mode="edge")),
                  RegionMask(np.pad(s.edge_mask.labels, pad2, mode="edge")), s.depth)


# ------------------------------------------------------------------ training

def cmd_train(cfg: RunConfig, data, out=None):
    man = load_manifest(data)
    out = Path(out) if out else man.root / "run"
    entries = man.split("train")
    if not entries:
        log.info("no training samples; nothing to do")
        return None
    samples = [pad_to_stride(load_sample(e, cfg)) for e in entries]
    atomic_write_bytes(out / "config.txt", cfg.to_text().encode())
    model, _ = train_two_stage(samples, cfg, out / "checkpoint", out / "train_log.csv")
    return model


# ---------------------------------------------------------------- prediction

def predict_sample(model, s: Sample) -> dict[str, np.ndarray]:
    h, w = s.gt.shape
    p = pad_to_stride(s)
    maps = model.predict(p.image, p.sp_mask, p.edge_mask)
    return {k: maps[k][:h, :w] for k in PRED_KINDS}


def _predict_one(args) -> str:
    model, e, cfg, out = args
    maps = predict_sample(model, load_sample(e, cfg))
    for k in PRED_KINDS:
        write_unit_gray(out / k / f"{e.id}.png", maps[k])
    return e.id


def load_model(cfg: RunConfig, checkpoint):
    model = build_model(cfg)
    model.load_state_dict(load_checkpoint(checkpoint))
    return model


def cmd_predict(cfg: RunConfig, data, checkpoint=None, out=None, split: str = "test") -> int:
    man = load_manifest(data)
    entries = man.split(split)
    if not entries:
        return 0
    out = Path(out) if out else man.root / "pred"
    model = load_model(cfg, checkpoint or man.root / "run" / "checkpoint" / "final")
    return len(_map(_predict_one, [(model, e, cfg, out) for e in entries], cfg.workers))


def _refine_one(args) -> bool:
    e, cfg, pred = args
    s = load_sample(e, cfg, with_depth=True)
    if s.depth is None:
        return False
    s0 = read_gray_unit(pred / "S" / f"{e.id}.png")
    s1, s2 = depth_mod.refine(s0, s.depth, s.sp_mask, s.image, cfg.sigma_pos, cfg.sigma_dep, cfg.sigma_col)
    write_unit_gray(pred / "S1" / f"{e.id}.png", s1)
    write_unit_gray(pred / "S2" / f"{e.id}.png", s2)
    return True


def cmd_refine_depth(cfg: RunConfig, data, pred=None, split: str = "test") -> int:
    """S -> S1, S2 for every sample that has a depth map; returns the count refined."""
    man = load_manifest(data)
    pred = Path(pred) if pred else man.root / "pred"
    entries = man.split(split)
    if not cfg.depth_refine or not entries:
        return 0
    return sum(_map(_refine_one, [(e, cfg, pred) for e in entries], cfg.workers))


# ---------------------------------------------------------------- evaluation

@dataclass
class KindReport:
    kind: str
    per_image: list[EvalReport]
    summary: EvalReport


def _eval_one(args) -> EvalReport | None:
    e, path, beta_sq = args
    gt = read_gt(e.gt)
    if not gt.any():
        log.warning("image %s has empty ground truth; excluded from evaluation", e.id)
        return None
    smap = read_gray_unit(path)
    if smap.shape != gt.shape:
        raise DatasetError(f"{path}: size {smap.shape} does not match gt {gt.shape}")
    return evaluate_map(smap, gt, e.id, beta_sq)


def pr_plot_svg(reports: list[KindReport], size: int = 400) -> str:
    """Dataset PR curves, one polyline per map kind."""
    colours = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"]
    m = 40
    span = size - 2 * m
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
           f'<rect x="{m}" y="{m}" width="{span}" height="{span}" fill="none" stroke="black"/>',
           f'<text x="{size // 2}" y="{size - 8}" text-anchor="middle" font-size="12">recall</text>',
           f'<text x="12" y="{size // 2}" text-anchor="middle" font-size="12" '
           f'transform="rotate(-90 12 {size // 2})">precision</text>']
    for t in range(0, 11, 2):
        v = t / 10
        out.append(f'<text x="{m + v * span:.1f}" y="{size - m + 14}" text-anchor="middle" font-size="10">{v:.1f}</text>')
        out.append(f'<text x="{m - 4}" y="{size - m - v * span + 3:.1f}" text-anchor="end" font-size="10">{v:.1f}</text>')
    for i, kr in enumerate(reports):
        c = colours[i % len(colours)]
        pts = " ".join(f"{m + r * span:.2f},{size - m - p * span:.2f}" for p, r in kr.summary.pr_points)
        out.append(f'<polyline fill="none" stroke="{c}" stroke-width="1.5" points="{pts}"/>')
        out.append(f'<text x="{m + 8}" y="{m + 16 + 14 * i}" font-size="11" fill="{c}">'
                   f'{kr.kind} F={kr.summary.f_beta:.3f}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def cmd_eval(cfg: RunConfig, data, pred=None, out=None, split: str = "test") -> list[KindReport]:
    man = load_manifest(data)
    root = man.root
    pred = Path(pred) if pred else root / "pred"
    out = Path(out) if out else root / "eval"
    entries = man.split(split)
    results = []
    for kind in ALL_KINDS:
        have = [e for e in entries if (pred / kind / f"{e.id}.png").exists()]
        if not have:
            continue
        if len(have) != len(entries):
            missing = sorted(set(e.id for e in entries) - set(e.id for e in have))
            raise DatasetError(f"{pred / kind}: missing predictions for {', '.join(missing[:5])}")
        reps = [r for r in _map(_eval_one, [(e, pred / kind / f"{e.id}.png", cfg.beta_sq) for e in have], cfg.workers)
                if r is not None]
        if not reps:
            continue
        results.append(KindReport(kind, reps, aggregate(reps, cfg.beta_sq)))
    if not results:
        return results
    per_rows = [[kr.kind, r.image_id, r.f_beta, r.mae, r.auc] for kr in results for r in kr.per_image]
    per_rows += [[kr.kind, "dataset", kr.summary.f_beta, kr.summary.mae, kr.summary.auc] for kr in results]
    atomic_write_bytes(out / "per_image.csv", _csv_bytes(["kind", "id", "max_fbeta", "mae", "auc"], per_rows))
    atomic_write_bytes(out / "summary.csv", _csv_bytes(
        ["kind", "max_fbeta", "mae", "auc", "n_images"],
        [[kr.kind, kr.summary.f_beta, kr.summary.mae, kr.summary.auc, len(kr.per_image)] for kr in results]))
    pr_rows = [[kr.kind, t, p, r] for kr in results for t, (p, r) in enumerate(kr.summary.pr_points)]
    atomic_write_bytes(out / "pr_curve.csv", _csv_bytes(["kind", "threshold", "precision", "recall"], pr_rows))
    atomic_write_bytes(out / "pr_curve.svg", pr_plot_svg(results).encode("utf-8"))
    return results


def cmd_gradcheck(cfg: RunConfig) -> bool:
    ok = True
    for r in run_suite(cfg.seed):
        log.info("%-22s %s max_rel_err=%.3e checked=%d kinks=%d", r.name, "ok" if r.ok else "FAIL",
                 r.report.max_rel_error, r.report.n_checked, r.report.n_kinks)
        ok &= r.ok
    if not ok:
        log.error("gradient check failed (tolerance %.0e)", TOLERANCE)
    return ok

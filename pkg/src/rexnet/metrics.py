"""Saliency evaluation: 256-threshold PR curves, max F-beta, MAE and AUC."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

N_THRESHOLDS = 256
BETA_SQ = 0.3


@dataclass
class EvalReport:
    pr_points: np.ndarray  # (256, 2) precision, recall for thresholds 0..255
    f_beta: float
    mae: float
    auc: float
    image_id: str = ""
    extra: dict = field(default_factory=dict)


def normalize_map(smap: np.ndarray) -> np.ndarray:
    """Min-max rescale to integers 0..255 (round half up); constant maps -> 0."""
    m = np.asarray(smap, dtype=np.float64)
    if not np.all(np.isfinite(m)):
        raise ValueError("saliency map contains non-finite values")
    lo, hi = m.min(), m.max()
    if hi <= lo:
        return np.zeros(m.shape, dtype=np.int64)
    return np.floor((m - lo) / (hi - lo) * 255.0 + 0.5).astype(np.int64)


def confusion_counts(norm_map: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """TP and FP per threshold t (prediction = norm_map >= t)."""
    g = np.asarray(gt).astype(bool)
    v = np.asarray(norm_map, dtype=np.int64)
    pos = np.bincount(v[g], minlength=N_THRESHOLDS)[:N_THRESHOLDS]
    neg = np.bincount(v[~g], minlength=N_THRESHOLDS)[:N_THRESHOLDS]
    tp = np.cumsum(pos[::-1])[::-1]
    fp = np.cumsum(neg[::-1])[::-1]
    return tp, fp


def pr_curve(norm_map: np.ndarray, gt: np.ndarray) -> np.ndarray:
    g = np.asarray(gt).astype(bool)
    if np.shape(norm_map) != g.shape:
        raise ValueError(f"map shape {np.shape(norm_map)} != gt shape {g.shape}")
    n_pos = int(g.sum())
    if n_pos == 0:
        raise ValueError("ground truth has no salient pixels")
    tp, fp = confusion_counts(norm_map, g)
    predicted = tp + fp
    precision = np.where(predicted > 0, tp / np.maximum(predicted, 1), 1.0)
    recall = tp / n_pos
    return np.stack([precision, recall], axis=1)


def f_measure(pr_points: np.ndarray, beta_sq: float = BETA_SQ) -> float:
    pr = np.asarray(pr_points, dtype=np.float64).reshape(-1, 2)
    p, r = pr[:, 0], pr[:, 1]
    den = beta_sq * p + r
    f = np.where(den > 0, (1 + beta_sq) * p * r / np.where(den > 0, den, 1.0), 0.0)
    return float(f.max())


def mae(smap: np.ndarray, gt: np.ndarray) -> float:
    m = np.asarray(smap, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if m.shape != g.shape:
        raise ValueError(f"map shape {m.shape} != gt shape {g.shape}")
    return float(np.abs(m - g).mean())


def auc(pr_points: np.ndarray) -> float:
    """Trapezoidal area under precision as a function of recall."""
    pr = np.asarray(pr_points, dtype=np.float64).reshape(-1, 2)
    order = np.lexsort((pr[:, 0], pr[:, 1]))
    p, r = pr[order, 0], pr[order, 1]
    area = float(np.sum(np.diff(r) * (p[1:] + p[:-1]) / 2.0))
    return min(max(area, 0.0), 1.0)


def evaluate_map(smap: np.ndarray, gt: np.ndarray, image_id: str = "", beta_sq: float = BETA_SQ) -> EvalReport:
    """Per-image report. ``smap`` is a saliency map in [0, 1]."""
    pr = pr_curve(normalize_map(smap), gt)
    return EvalReport(pr, f_measure(pr, beta_sq), mae(smap, gt), auc(pr), image_id)


def aggregate(reports: list[EvalReport], beta_sq: float = BETA_SQ) -> EvalReport:
    """Dataset report: mean curve, F-beta and AUC of that curve, mean MAE."""
    if not reports:
        raise ValueError("cannot aggregate zero reports")
    curve = np.mean([r.pr_points for r in reports], axis=0)
    return EvalReport(curve, f_measure(curve, beta_sq), float(np.mean([r.mae for r in reports])),
                      auc(curve), "dataset")


def evaluate_dataset(maps: dict[str, np.ndarray], gts: dict[str, np.ndarray],
                     beta_sq: float = BETA_SQ) -> tuple[list[EvalReport], EvalReport | None]:
    reports = []
    for key in sorted(maps):
        if not np.asarray(gts[key]).astype(bool).any():
            log.warning("image %s has empty ground truth; excluded from evaluation", key)
            continue
        reports.append(evaluate_map(maps[key], gts[key], key, beta_sq))
    return reports, (aggregate(reports, beta_sq) if reports else None)

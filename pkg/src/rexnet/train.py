"""Two-stage training: RegionNet first, then ContextNet + fusion with RegionNet frozen."""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig
from .model import (RegionBatch, RexNet, feature_hw, make_region_batch, prepare_image, region_softmax_loss,
                    stage2_loss_and_grads)
from .regions import RegionMask, region_label
from .rxt import atomic_write_bytes, save_checkpoint
from .tensor import SGD

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class Sample:
    id: str
    image: np.ndarray  # H x W x 3 uint8
    gt: np.ndarray  # H x W bool
    sp_mask: RegionMask
    edge_mask: RegionMask
    depth: np.ndarray | None = None


def build_model(cfg: RunConfig) -> RexNet:
    return RexNet(cfg.seed, cfg.trunk_channels, cfg.head_hidden, cfg.branch_dilation, cfg.fusion_variant)


@dataclass
class _Stage1Item:
    x: np.ndarray
    batches: list[RegionBatch]
    labels: np.ndarray  # stacked over both masks; -1 = ignore or vanished


def _stage1_item(s: Sample) -> _Stage1Item:
    x = prepare_image(s.image)
    fhw = feature_hw(*x.shape[2:])
    batches = [make_region_batch(s.sp_mask, fhw), make_region_batch(s.edge_mask, fhw)]
    labels = []
    for b in batches:
        lab = region_label(b.mask, s.gt)
        lab[b.ds.id_map < 0] = -1  # all-zero features carry no evidence
        labels.append(lab)
    return _Stage1Item(x, batches, np.concatenate(labels))


@dataclass
class _Stage2Item:
    taps: dict[str, np.ndarray]
    s_s: np.ndarray
    s_e: np.ndarray
    gt: np.ndarray
    edge_labels: np.ndarray


def _finite_or_abort(value: float, where: str) -> None:
    if not np.isfinite(value):
        raise TrainingError(f"non-finite loss at {where}; last checkpoint retained")


class Trainer:
    def __init__(self, cfg: RunConfig, model: RexNet | None = None, checkpoint_dir: str | Path | None = None):
        self.cfg = cfg
        self.model = model or build_model(cfg)
        self.checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir else None
        self.log_rows: list[dict] = []
        self.rng = np.random.default_rng([cfg.seed, 7])

    def _order(self, n: int, iters: int) -> np.ndarray:
        need = iters * self.cfg.batch_size
        perms = [self.rng.permutation(n) for _ in range(-(-need // n))] if n else []
        return np.concatenate(perms)[:need] if perms else np.array([], dtype=int)

    def _checkpoint(self, tag: str) -> None:
        if self.checkpoint_dir is not None:
            save_checkpoint(self.checkpoint_dir / tag, self.model.state_dict())

    def stage1(self, samples: list[Sample]) -> None:
        cfg = self.cfg
        items = [_stage1_item(s) for s in samples]
        net = self.model.regionnet
        opt = SGD(net.params, cfg.lr_stage1, cfg.momentum, cfg.weight_decay)
        order = self._order(len(items), cfg.stage1_iters)
        for it in range(cfg.stage1_iters if items else 0):
            opt.zero_grad()
            total = 0.0
            for k in order[it * cfg.batch_size:(it + 1) * cfg.batch_size]:
                item = items[k]
                _, logits, _ = net.forward(item.x, item.batches)
                loss, g = region_softmax_loss(np.concatenate(logits), item.labels)
                total += loss / cfg.batch_size
                net.backward(g / cfg.batch_size)
            _finite_or_abort(total, f"stage 1 iteration {it}")
            opt.step()
            self.log_rows.append({"iteration": it, "stage": 1, "region_loss": total, "lr": cfg.lr_stage1})
            if cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
                self._checkpoint("last")

    def stage2_items(self, samples: list[Sample]) -> list[_Stage2Item]:
        out = []
        for s in samples:
            it = _stage1_item(s)
            probs, _, taps = self.model.regionnet.forward(it.x, it.batches)
            out.append(_Stage2Item({k: taps[k] for k in ("pool1", "pool2", "pool3", "conv4")},
                                   probs[0][s.sp_mask.labels], probs[1][s.edge_mask.labels],
                                   s.gt.astype(np.float64), s.edge_mask.labels))
        return out

    def stage2(self, samples: list[Sample], items: list[_Stage2Item] | None = None) -> None:
        cfg = self.cfg
        items = items if items is not None else self.stage2_items(samples)
        opt = SGD(self.model.stage2_params, cfg.lr_stage2, cfg.momentum, cfg.weight_decay)
        order = self._order(len(items), cfg.stage2_iters)
        for it in range(cfg.stage2_iters if items else 0):
            opt.zero_grad()
            sums: dict[str, float] = {}
            total = 0.0
            for k in order[it * cfg.batch_size:(it + 1) * cfg.batch_size]:
                item = items[k]
                terms = stage2_loss_and_grads(self.model, item.taps, item.s_s, item.s_e, item.gt, item.edge_labels,
                                              cfg.lambda_edge, cfg.deep_supervision)
                total += terms.total / cfg.batch_size
                for name, v in terms.terms.items():
                    sums[name] = sums.get(name, 0.0) + v / cfg.batch_size
            if cfg.batch_size > 1:
                for p in opt.params:
                    p.grad /= cfg.batch_size
            _finite_or_abort(total, f"stage 2 iteration {it}")
            opt.step()
            self.log_rows.append({"iteration": it, "stage": 2, "total": total, **sums, "lr": cfg.lr_stage2})
            if cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
                self._checkpoint("last")

    def log_csv(self) -> str:
        cols = ["iteration", "stage", "region_loss", "total"]
        extra = sorted({k for r in self.log_rows for k in r} - set(cols) - {"lr"})
        cols += extra + ["lr"]
        buf = io.StringIO()
        w = csv.DictWriter(buf, cols, lineterminator="\n", restval="")
        w.writeheader()
        for r in self.log_rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for k, v in r.items()})
        return buf.getvalue()


def train_two_stage(samples: list[Sample], cfg: RunConfig, checkpoint_dir=None, log_path=None,
                    model: RexNet | None = None) -> tuple[RexNet, list[dict]]:
    tr = Trainer(cfg, model, checkpoint_dir)
    tr.stage1(samples)
    tr.stage2(samples)
    tr._checkpoint("final")
    if log_path is not None:
        atomic_write_bytes(log_path, tr.log_csv().encode())
    return tr.model, tr.log_rows

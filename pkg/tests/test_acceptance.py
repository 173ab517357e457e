"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v`` (summary lines appear at the end
of the report) or ``python3 tests/test_acceptance.py``. Criteria 6-9 share one
stage-1 training run on the 200/50 synthetic corpus; expect ~6 minutes.
"""
import hashlib
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from oracles import confusion_brute, mask_roi_pool_brute, pr_brute, random_connected_mask, region_constant
from rexnet.cli import main as cli_main
from rexnet.config import RunConfig
from rexnet.data import gen_synthetic_corpus, load_manifest
from rexnet.depth import position_prior, refine
from rexnet.gradcheck import TOLERANCE, run_suite
from rexnet.metrics import aggregate, auc, confusion_counts, evaluate_map, f_measure, mae, normalize_map, pr_curve
from rexnet.model import edge_loss
from rexnet.pipeline import load_sample
from rexnet.regions import RegionMask, region_rois
from rexnet.roipool import FeatureRoI, mask_roi_pool_forward
from rexnet.train import Trainer, build_model

RESULTS: list[str] = []


def record(n: int, title: str, passed: bool, detail: str) -> None:
    line = f"{'PASS' if passed else 'FAIL'} criterion {n:2d} {title}: {detail}"
    RESULTS.append(line)
    print(line)
    assert passed, line


# ------------------------------------------------------------- fast criteria

def test_c01_gradient_suite():
    t = time.perf_counter()
    results = run_suite(seed=0)
    dt = time.perf_counter() - t
    worst = max(results, key=lambda r: r.report.max_rel_error)
    ok = all(r.ok for r in results) and dt < 120
    record(1, "gradient suite", ok, f"{len(results)} checks, worst {worst.name} rel err "
                                    f"{worst.report.max_rel_error:.2e} (tol {TOLERANCE:.0e}), {dt:.1f}s (< 120s)")


def test_c02_mask_roi_pool_oracle():
    rng = np.random.default_rng(2024)
    mismatches, empties, n_rois = 0, 0, 0
    for _ in range(500):
        h, w = (int(v) for v in rng.integers(1, 17, 2))
        labels = random_connected_mask(rng, h, w, int(rng.integers(1, 9)))
        feats = rng.integers(-50, 50, (int(rng.integers(1, 4)), h, w)).astype(np.float64)
        rois = [FeatureRoI(r.region_id, r.rect) for r in region_rois(RegionMask(labels))]
        x0, x1 = sorted(int(v) for v in rng.integers(0, w, 2))
        y0, y1 = sorted(int(v) for v in rng.integers(0, h, 2))
        rois.append(FeatureRoI(int(rng.integers(0, labels.max() + 1)), (x0, y0, x1, y1)))
        for roi, p in zip(rois, mask_roi_pool_forward(feats, rois, labels)):
            n_rois += 1
            ref = mask_roi_pool_brute(feats, roi.rect, labels, roi.region_id)
            mismatches += int(not np.array_equal(p.values, ref))
            empty = p.argmax < 0
            empties += int(empty.sum())
            mismatches += int(np.any(p.values[empty] != 0.0))
    record(2, "mask RoI pooling oracle", mismatches == 0,
           f"500 instances, {n_rois} RoIs, {mismatches} mismatches, {empties} empty cells all exactly 0")


def test_c03_metric_oracle():
    rng = np.random.default_rng(3)
    count_bad, worst = 0, 0.0
    for _ in range(200):
        gt = rng.random((8, 8)) > rng.uniform(0.1, 0.9)
        gt[rng.integers(8), rng.integers(8)] = True
        m = normalize_map(rng.random((8, 8)))
        tp, fp = confusion_counts(m, gt)
        btp, bfp = confusion_brute(m, gt)
        count_bad += int(not (np.array_equal(tp, btp) and np.array_equal(fp, bfp)))
        pr, ref = pr_curve(m, gt), pr_brute(m, gt)
        worst = max(worst, float(np.abs(pr - ref).max()))
        p, r = ref[:, 0], ref[:, 1]
        fb = max((1.3 * a * b / (0.3 * a + b)) if (0.3 * a + b) > 0 else 0.0 for a, b in zip(p, r))
        worst = max(worst, abs(f_measure(pr) - fb))
        smap = rng.random((8, 8))
        worst = max(worst, abs(mae(smap, gt) - sum(abs(smap[i, j] - gt[i, j]) for i in range(8)
                                                   for j in range(8)) / 64))
    hand_f = f_measure(np.array([[0.8, 0.5]]))
    g = np.zeros((6, 6))
    g[2:4] = 1
    hand = abs(hand_f - 1.3 * 0.4 / 0.74) == 0 and round(hand_f, 4) == 0.7027 and mae(1 - g, g) == 1.0
    ok = count_bad == 0 and worst <= 1e-12 and hand
    record(3, "metric oracle", ok, f"200 pairs, {count_bad} count mismatches, max ratio err {worst:.1e}; "
                                   f"hand F={hand_f:.6f}, complement MAE={mae(1 - g, g)}")


def test_c04_edge_loss_property():
    rng = np.random.default_rng(4)
    worst_const, min_pos = 0.0, np.inf
    for _ in range(200):
        lab = random_connected_mask(rng, 10, 10, int(rng.integers(1, 6)))
        vals = rng.random(lab.max() + 1)
        worst_const = max(worst_const, edge_loss(vals[lab], lab)[0])
        p = vals[lab].copy()
        p[rng.integers(10), rng.integers(10)] += rng.uniform(0.01, 1)
        min_pos = min(min_pos, edge_loss(p, lab)[0])
    half = np.zeros((4, 4))
    half[:2] = 1
    hv = edge_loss(half, np.zeros((4, 4), np.int64))[0]
    ok = worst_const <= 1e-12 and hv == 0.125 and min_pos > 0
    record(4, "edge loss property", ok,
           f"region-constant max {worst_const:.1e}, half-half {hv}, perturbed min {min_pos:.2e} > 0")


# ---------------------------------------------------------- trained criteria

class Runs:
    """Shared training state: corpus, one stage-1 run, three stage-2 variants."""

    def __init__(self, root: Path):
        self.cfg = RunConfig(checkpoint_every=0)
        t0 = time.perf_counter()
        man = gen_synthetic_corpus(root, self.cfg.n_train, self.cfg.n_test, self.cfg.image_size, self.cfg.seed)
        self.train = [load_sample(e, self.cfg) for e in man.split("train")]
        self.test = [load_sample(e, self.cfg, with_depth=True) for e in man.split("test")]
        self.prep_s = time.perf_counter() - t0
        t1 = time.perf_counter()
        tr = Trainer(self.cfg)
        tr.stage1(self.train)
        self.stage1_s = time.perf_counter() - t1
        self.stage1_state = tr.model.state_dict()
        self.rng_state = tr.rng.bit_generator.state
        self.items = tr.stage2_items(self.train)
        self._models = {}
        self.stage2_s = {}

    def model(self, lambda_edge: float = 0.1, deep_supervision: bool = True):
        key = (lambda_edge, deep_supervision)
        if key not in self._models:
            cfg = self.cfg.replace(lambda_edge=lambda_edge, deep_supervision=deep_supervision)
            model = build_model(cfg)
            model.load_state_dict(self.stage1_state)
            tr = Trainer(cfg, model)
            tr.rng.bit_generator.state = self.rng_state  # same sample order as an uninterrupted run
            t = time.perf_counter()
            tr.stage2(self.train, self.items)
            self.stage2_s[key] = time.perf_counter() - t
            preds = [model.predict(s.image, s.sp_mask, s.edge_mask) for s in self.test]
            self._models[key] = (model, preds)
        return self._models[key]

    def dataset_fbeta(self, preds, kind: str) -> float:
        return aggregate([evaluate_map(p[kind], s.gt, s.id) for p, s in zip(preds, self.test)]).f_beta


@pytest.fixture(scope="session")
def runs(tmp_path_factory):
    return Runs(tmp_path_factory.mktemp("corpus"))


def test_c05_region_constancy(runs):
    _, preds = runs.model()
    bad = sum(int(not region_constant(p["SS"], s.sp_mask.labels)) + int(not region_constant(p["SE"], s.edge_mask.labels))
              for p, s in zip(preds, runs.test))
    record(5, "S_S / S_E region constancy", bad == 0, f"{len(preds)} test images, {bad} non-constant maps")


def test_c06_fusion_beats_components(runs):
    _, preds = runs.model()
    f = {k: runs.dataset_fbeta(preds, k) for k in ("SS", "SE", "SC", "S")}
    total = runs.prep_s + runs.stage1_s + runs.stage2_s[(0.1, True)]
    ok = all(f["S"] >= f[k] for k in ("SS", "SE", "SC")) and f["S"] >= 0.75 and total < 600
    record(6, "fused S vs components", ok,
           "max-Fb " + ", ".join(f"{k}={v:.4f}" for k, v in f.items()) +
           f"; prep+train {total:.0f}s (< 600s)")


def test_c07_edge_loss_ablation(runs):
    _, with_e = runs.model(0.1)
    _, without = runs.model(0.0)

    def mean_edge(preds):
        return float(np.mean([edge_loss(p["SC_small"], s.edge_mask.labels)[0] for p, s in zip(preds, runs.test)]))

    f_w, f_wo = runs.dataset_fbeta(with_e, "SC"), runs.dataset_fbeta(without, "SC")
    e_w, e_wo = mean_edge(with_e), mean_edge(without)
    ok = f_w >= f_wo - 0.01 and e_w < e_wo
    record(7, "edge loss ablation (S_C)", ok,
           f"max-Fb {f_w:.4f} vs {f_wo:.4f} (lambda 0.1 vs 0); mean edge loss {e_w:.6f} vs {e_wo:.6f}")


def _branch_variances(preds) -> np.ndarray:
    return np.mean([[b.var() for b in p["branches"]] for p in preds], axis=0)


def test_c08_deep_supervision_ablation(runs):
    _, with_ds = runs.model(0.1, True)
    _, no_ds = runs.model(0.1, False)
    v_ds, v_no = _branch_variances(with_ds), _branch_variances(no_ds)
    f_ds, f_no = runs.dataset_fbeta(with_ds, "S"), runs.dataset_fbeta(no_ds, "S")
    ok = bool(np.all(v_ds > 1e-4)) and (bool(np.any(v_no < 1e-4)) or f_ds - f_no >= 0.01)
    record(8, "deep supervision ablation", ok,
           f"branch var with DS min {v_ds.min():.2e}; without DS {np.array2string(v_no, precision=2)}; "
           f"S max-Fb {f_ds:.4f} vs {f_no:.4f}")


def test_c09_depth_refinement(runs):
    _, preds = runs.model()
    s0_reports, s2_reports, better = [], [], 0
    for p, s in zip(preds, runs.test):
        _, s2 = refine(p["S"], s.depth, s.sp_mask, s.image, runs.cfg.sigma_pos, runs.cfg.sigma_dep,
                       runs.cfg.sigma_col)
        r0, r2 = evaluate_map(p["S"], s.gt, s.id), evaluate_map(s2, s.gt, s.id)
        s0_reports.append(r0)
        s2_reports.append(r2)
        better += int(r2.mae <= r0.mae)
    f0, f2 = aggregate(s0_reports).f_beta, aggregate(s2_reports).f_beta
    share = better / len(preds)
    spot0 = position_prior(np.ones(1), np.zeros(1))[0]
    spot1 = position_prior(np.ones(1), np.ones(1), 5.0)[0]
    spots = abs(spot0 - 0.5) <= 1e-9 and abs(spot1 - 1 / (1 + np.exp(-5.0))) <= 1e-9 and abs(spot1 - 0.99331) < 5e-6
    ok = f2 >= f0 and share >= 0.8 and spots
    record(9, "depth refinement", ok, f"max-Fb S2 {f2:.4f} vs S0 {f0:.4f}; MAE(S2)<=MAE(S0) on {share:.0%}; "
                                      f"factors {spot0:.9f}, {spot1:.9f}")


# ------------------------------------------------------------- determinism

DET_CFG = """
n_train = 6
n_test = 3
image_size = 64
stage1_iters = 20
stage2_iters = 20
checkpoint_every = 10
"""


def _digest(root: Path, subdirs) -> dict[str, str]:
    out = {}
    for sub in subdirs:
        for p in sorted((root / sub).rglob("*")):
            if p.is_file():
                out[str(p.relative_to(root))] = hashlib.sha256(p.read_bytes()).hexdigest()
    return out


def test_c10_determinism(tmp_path):
    cfg = tmp_path / "det.cfg"
    cfg.write_text(DET_CFG)
    digests = []
    for run in ("a", "b"):
        data = tmp_path / run
        codes = [cli_main([c, "--config", str(cfg), *a]) for c, a in
                 (("gen", ["--out", str(data)]), ("segment", ["--data", str(data)]), ("train", ["--data", str(data)]),
                  ("predict", ["--data", str(data)]), ("refine-depth", ["--data", str(data)]),
                  ("eval", ["--data", str(data)]))]
        assert codes == [0] * 6
        digests.append(_digest(data, ("masks_sp", "masks_edge", "run", "pred", "eval")))
    a, b = digests
    n_ck = sum(k.startswith("run/checkpoint") for k in a)
    n_pred = sum(k.startswith("pred") for k in a)
    n_csv = sum(k.endswith(".csv") for k in a)
    ok = a == b and n_ck > 0 and n_pred > 0 and n_csv > 0
    record(10, "determinism", ok, f"{len(a)} files compared ({n_ck} checkpoint, {n_pred} prediction, {n_csv} CSV); "
                                  f"{sum(a[k] != b.get(k) for k in a)} differ")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))

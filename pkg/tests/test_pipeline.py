import csv
import hashlib
import struct
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from rexnet import pipeline
from rexnet.cli import main
from rexnet.config import ConfigError, RunConfig, load_config, parse_overrides, parse_text
from rexnet.data import (DatasetError, gen_synthetic_corpus, load_manifest, read_gt, read_mask, read_png,
                         write_mask)
from rexnet.regions import RegionMask
from rexnet.rxt import (RXTFormatError, decode_tensor, encode_tensor, load_checkpoint, save_checkpoint)

SMALL = """
n_train = 4
n_test = 3
image_size = 48
stage1_iters = 6
stage2_iters = 6
checkpoint_every = 3
head_hidden = 32
"""


def _tree_digest(root: Path) -> dict[str, str]:
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


# ------------------------------------------------------------------ config

def test_config_defaults_and_overrides(tmp_path):
    cfg = RunConfig()
    assert cfg.lambda_edge == 0.1 and cfg.sigma_pos == 5.0 and cfg.beta_sq == 0.3
    p = tmp_path / "c.cfg"
    p.write_text("# comment\nsuperpixels = 50\ntrunk_channels = 4,8,8,8\ndeep_supervision = false\n")
    cfg = load_config(p, {"seed": "7"})
    assert (cfg.superpixels, cfg.trunk_channels, cfg.deep_supervision, cfg.seed) == (50, (4, 8, 8, 8), False, 7)


def test_config_rejects_unknown_and_bad_values():
    with pytest.raises(ConfigError, match="unknown"):
        parse_text("learning_rate = 0.1")
    with pytest.raises(ConfigError):
        parse_overrides({"superpixels": "many"})
    with pytest.raises(ConfigError):
        parse_overrides({"fusion_variant": "sum"})
    with pytest.raises(ConfigError):
        parse_text("no equals sign")


def test_config_text_round_trip():
    cfg = RunConfig(superpixels=33, fusion_variant="features", deep_supervision=False)
    assert parse_text(cfg.to_text()) == cfg


# --------------------------------------------------------------------- RXT

def test_rxt_layout():
    blob = encode_tensor(np.array([[1.0, 2.0, 3.0]]))
    assert blob[:4] == b"RXT1"
    assert struct.unpack("<III", blob[4:16]) == (2, 1, 3)
    assert struct.unpack("<3d", blob[16:]) == (1.0, 2.0, 3.0)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, array_shapes(min_dims=0, max_dims=4, max_side=5), elements=st.floats(allow_nan=False)))
def test_rxt_round_trip(a):
    b = decode_tensor(encode_tensor(a))
    assert b.shape == a.shape and b.tobytes() == a.astype("<f8").tobytes()


def test_rxt_rejects_corruption():
    blob = encode_tensor(np.ones((2, 2)))
    with pytest.raises(RXTFormatError):
        decode_tensor(b"XXXX" + blob[4:])
    with pytest.raises(RXTFormatError):
        decode_tensor(blob[:-3])


def test_checkpoint_round_trip(tmp_path):
    named = {"b.weight": np.arange(6.0).reshape(2, 3), "a.bias": np.zeros(2)}
    save_checkpoint(tmp_path / "ck", named)
    back = load_checkpoint(tmp_path / "ck")
    assert sorted(back) == sorted(named)
    assert all(np.array_equal(back[k], named[k]) for k in named)
    assert (tmp_path / "ck" / "manifest.json").exists()


# -------------------------------------------------------------------- data

def test_synthetic_corpus_deterministic_and_constrained(tmp_path):
    gen_synthetic_corpus(tmp_path / "a", 3, 2, 48, seed=5)
    gen_synthetic_corpus(tmp_path / "b", 3, 2, 48, seed=5)
    assert _tree_digest(tmp_path / "a") == _tree_digest(tmp_path / "b")
    man = load_manifest(tmp_path / "a")
    assert len(man.split("train")) == 3 and len(man.split("test")) == 2
    for e in man.entries:
        frac = read_gt(e.gt).mean()
        assert 0.05 <= frac <= 0.5
        assert read_png(e.depth).dtype == np.uint16
    gen_synthetic_corpus(tmp_path / "c", 2, 2, 48, seed=6)
    assert _tree_digest(tmp_path / "a") != _tree_digest(tmp_path / "c")


def test_synthetic_corpus_empty_train(tmp_path):
    man = gen_synthetic_corpus(tmp_path, 0, 1, 32)
    assert man.split("train") == [] and len(man.split("test")) == 1


def test_mask_png_round_trip(tmp_path):
    lab = np.arange(300 * 4).reshape(30, 40) % 700
    write_mask(tmp_path / "m.png", RegionMask(lab))
    assert read_png(tmp_path / "m.png").dtype == np.uint16
    np.testing.assert_array_equal(read_mask(tmp_path / "m.png").labels, lab)


def test_manifest_missing_file_named(tmp_path):
    gen_synthetic_corpus(tmp_path, 1, 0, 32)
    (tmp_path / "gt" / "train_0000.png").unlink()
    with pytest.raises(DatasetError, match="train_0000"):
        load_manifest(tmp_path)


def test_pad_to_stride_keeps_regions():
    from rexnet.train import Sample
    s = Sample("x", np.zeros((20, 30, 3), np.uint8), np.zeros((20, 30), bool),
               RegionMask(np.zeros((20, 30), np.int64)), RegionMask((np.arange(30) >= 15)[None].repeat(20, 0) * 1))
    p = pipeline.pad_to_stride(s)
    assert p.image.shape == (32, 32, 3)
    p.edge_mask.validate()


# --------------------------------------------------------------------- CLI

@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = root / "small.cfg"
    cfg.write_text(SMALL)
    data = root / "data"
    for cmd in (["gen", "--out", str(data)], ["segment", "--data", str(data), "--workers", "2"],
                ["train", "--data", str(data)], ["predict", "--data", str(data)],
                ["refine-depth", "--data", str(data)], ["eval", "--data", str(data)]):
        assert main([cmd[0], "--config", str(cfg), *cmd[1:]]) == 0, cmd
    return cfg, data


def test_cli_outputs_present(small_run):
    _, data = small_run
    for kind in pipeline.ALL_KINDS:
        files = sorted((data / "pred" / kind).glob("*.png"))
        assert [f.stem for f in files] == ["test_0000", "test_0001", "test_0002"]
        assert read_png(files[0]).dtype == np.uint8
    assert (data / "run" / "checkpoint" / "final" / "manifest.json").exists()
    with open(data / "eval" / "summary.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["kind"] for r in rows] == list(pipeline.ALL_KINDS)
    with open(data / "eval" / "pr_curve.csv") as fh:
        assert sum(1 for r in csv.DictReader(fh) if r["kind"] == "S") == 256
    with open(data / "eval" / "per_image.csv") as fh:
        per = [r for r in csv.DictReader(fh) if r["kind"] == "S"]
    assert [r["id"] for r in per] == ["test_0000", "test_0001", "test_0002", "dataset"]
    assert (data / "eval" / "pr_curve.svg").read_text().startswith("<svg")
    log = (data / "run" / "train_log.csv").read_text().splitlines()
    assert log[0].startswith("iteration,stage") and len(log) == 1 + 6 + 6


def test_cli_rerun_is_byte_identical(small_run):
    cfg, data = small_run
    before = _tree_digest(data)
    for cmd in ("segment", "train", "predict", "refine-depth", "eval"):
        assert main([cmd, "--config", str(cfg), "--data", str(data)]) == 0
    assert _tree_digest(data) == before


def test_cli_empty_manifest_is_noop(tmp_path):
    (tmp_path / "images").mkdir()
    (tmp_path / "manifest.csv").write_text("id,split\n")
    for cmd in ("segment", "train", "predict", "refine-depth", "eval"):
        assert main([cmd, "--data", str(tmp_path)]) == 0
    assert sorted(p.name for p in tmp_path.iterdir()) == ["images", "manifest.csv"]


def test_cli_corrupt_png_fails_naming_file(small_run, tmp_path, caplog):
    cfg, data = small_run
    gen_synthetic_corpus(tmp_path, 1, 1, 32)
    bad = tmp_path / "images" / "test_0000.png"
    bad.write_bytes(bad.read_bytes()[:60])
    assert main(["segment", "--config", str(cfg), "--data", str(tmp_path)]) != 0
    assert "test_0000.png" in caplog.text


def test_cli_unknown_config_key_fails(tmp_path):
    p = tmp_path / "bad.cfg"
    p.write_text("bogus = 1\n")
    assert main(["gradcheck", "--config", str(p)]) != 0


def test_cli_gradcheck_exit_code(monkeypatch):
    assert main(["gradcheck"]) == 0
    monkeypatch.setattr(pipeline, "run_suite", lambda seed: [_Failing()])
    assert main(["gradcheck"]) == 1


class _Failing:
    name = "broken"
    ok = False

    class report:
        max_rel_error, n_checked, n_kinks = 1.0, 1, 0

import filecmp
import hashlib
import json

import numpy as np
import pytest

from panops.cli import main
from panops.imgio import save_image, save_labels
from panops.metrics import (Taxonomy, load_similarity_csv,
                            save_similarity_csv, similarity_from_taxonomy)
from panops.tensor import Tensor, load_tensor, save_tensor

from conftest import structured_image


def run(*argv):
    return main([str(a) for a in argv])


def read_json(path):
    return json.loads(path.read_text(encoding="utf-8"))


@pytest.fixture()
def img_png(tmp_path):
    path = tmp_path / "frame.png"
    save_image(structured_image(24, 24), path)
    return path


def test_unknown_subcommand_is_usage_error(capsys):
    assert run("frobnicate") == 1
    assert "error" in capsys.readouterr().err


def test_missing_required_flag_is_usage_error(tmp_path, capsys):
    assert run("rotate", "--in", tmp_path / "a.png") == 1
    assert "--out" in capsys.readouterr().err


def test_missing_input_file_is_data_error(tmp_path):
    assert run("rotate", "--in", tmp_path / "nope.png",
               "--out", tmp_path / "o.png", "--shift", 1) == 2


def test_corrupt_tensor_is_data_error(tmp_path, capsys):
    bad = tmp_path / "bad.ptns"
    bad.write_bytes(b"JUNKJUNKJUNK")
    assert run("salient", "--in", bad, "--out", tmp_path / "o.ptns") == 2
    assert "byte 0" in capsys.readouterr().err


def test_thread_cap_env_validation(tmp_path, img_png, monkeypatch):
    out = tmp_path / "r.png"
    monkeypatch.setenv("PANOPS_THREADS", "abc")
    assert run("rotate", "--in", img_png, "--out", out, "--shift", 3) == 1
    monkeypatch.setenv("PANOPS_THREADS", "-1")
    assert run("rotate", "--in", img_png, "--out", out, "--shift", 3) == 1
    monkeypatch.setenv("PANOPS_THREADS", "2")
    assert run("rotate", "--in", img_png, "--out", out, "--shift", 3) == 0


def test_warp_writes_image_and_report(tmp_path, img_png):
    out = tmp_path / "warped.png"
    assert run("warp", "--in", img_png, "--out", out) == 0
    assert out.exists()
    report = read_json(tmp_path / "warped.json")
    assert report["command"] == "warp"
    assert report["parameters"]["fov_h"] == 90.0
    assert report["inputs"][str(img_png)] == hashlib.sha256(img_png.read_bytes()).hexdigest()
    assert report["outputs"][str(out)] == hashlib.sha256(out.read_bytes()).hexdigest()


def test_warp_respects_out_size_and_pairs_flags(tmp_path, img_png):
    out = tmp_path / "w.png"
    assert run("warp", "--in", img_png, "--out", out,
               "--out-h", 10, "--out-w", 30) == 0
    from panops.imgio import load_image
    assert load_image(out).shape[:2] == (10, 30)
    assert run("warp", "--in", img_png, "--out", out, "--out-h", 10) == 1


def test_rerp_is_deterministic_and_logs_permutation(tmp_path, img_png):
    a, b = tmp_path / "a.png", tmp_path / "b.png"
    assert run("rerp", "--in", img_png, "--out", a, "--grid", 3, "--seed", 7) == 0
    assert run("rerp", "--in", img_png, "--out", b, "--grid", 3, "--seed", 7) == 0
    assert filecmp.cmp(a, b, shallow=False)
    ra, rb = read_json(tmp_path / "a.json"), read_json(tmp_path / "b.json")
    assert ra["permutation"] == rb["permutation"]
    assert sorted(ra["permutation"]) == list(range(9))


def test_rerp_grid_one_equals_plain_warp(tmp_path, img_png):
    rerp_out, warp_out = tmp_path / "r.png", tmp_path / "w.png"
    assert run("rerp", "--in", img_png, "--out", rerp_out, "--grid", 1, "--seed", 0) == 0
    assert run("warp", "--in", img_png, "--out", warp_out) == 0
    assert filecmp.cmp(rerp_out, warp_out, shallow=False)
    assert read_json(tmp_path / "r.json")["permutation"] == [0]


def test_rerp_carries_labels(tmp_path, img_png):
    labels = tmp_path / "labels.png"
    save_labels(np.tile(np.arange(24, dtype=np.uint8) % 4, (24, 1)), labels)
    out, lout = tmp_path / "img.png", tmp_path / "lab.png"
    assert run("rerp", "--in", img_png, "--out", out, "--grid", 2, "--seed", 1,
               "--labels", labels, "--labels-out", lout) == 0
    assert lout.exists()
    report = read_json(tmp_path / "img.json")
    assert str(labels) in report["inputs"]
    assert str(lout) in report["outputs"]
    assert run("rerp", "--in", img_png, "--out", out, "--grid", 2, "--seed", 1,
               "--labels", labels) == 1  # --labels-out missing


def test_rotate_full_width_is_identity(tmp_path, img_png):
    out = tmp_path / "rot.png"
    assert run("rotate", "--in", img_png, "--out", out, "--shift", 24) == 0
    from panops.imgio import load_image
    assert np.array_equal(load_image(out), load_image(img_png))


def _write_tensor(path, array):
    save_tensor(Tensor(np.asarray(array, dtype=np.float32)), path)
    return path


def test_salient_writes_tensor_and_preview(tmp_path):
    rng = np.random.default_rng(2)
    feats = _write_tensor(tmp_path / "f.ptns", rng.normal(size=(1, 3, 6, 6)))
    out, png = tmp_path / "s.ptns", tmp_path / "s.png"
    assert run("salient", "--in", feats, "--out", out, "--png", png) == 0
    scores = load_tensor(out)
    assert scores.shape == (1, 1, 6, 6)
    assert png.exists()
    report = read_json(tmp_path / "s.json")
    assert str(png) in report["outputs"]


def test_salient_preview_needs_single_batch(tmp_path):
    feats = _write_tensor(tmp_path / "f.ptns", np.ones((2, 3, 5, 5)))
    assert run("salient", "--in", feats, "--out", tmp_path / "s.ptns",
               "--png", tmp_path / "s.png") == 2


def _deform_files(tmp_path, n=1, c=2, h=6, w=6, K=9, groups=1, seed=0):
    rng = np.random.default_rng(seed)
    x = _write_tensor(tmp_path / "x.ptns", rng.normal(size=(n, c, h, w)))
    off = _write_tensor(tmp_path / "off.ptns",
                        rng.uniform(-1, 1, size=(n, 2 * K * groups, h, w)))
    mod = _write_tensor(tmp_path / "mod.ptns",
                        rng.uniform(0, 1, size=(n, K * groups, h, w)))
    return x, off, mod


def test_dcnv3_and_dcnv4_agree_byte_for_byte(tmp_path):
    x, off, mod = _deform_files(tmp_path, groups=2)
    w = ",".join(["0.5", "-0.25"])
    out3, out4 = tmp_path / "v3.ptns", tmp_path / "v4.ptns"
    for name, out in (("dcnv3", out3), ("dcnv4", out4)):
        assert run(name, "--in", x, "--offsets", off, "--modulation", mod,
                   "--weights", w, "--groups", 2, "--out", out) == 0
    assert filecmp.cmp(out3, out4, shallow=False)


def test_dcn_shape_mismatch_names_file(tmp_path, capsys):
    x, off, _ = _deform_files(tmp_path)
    bad_off = _write_tensor(tmp_path / "short.ptns", np.zeros((1, 4, 6, 6)))
    assert run("dcn", "--in", x, "--offsets", bad_off,
               "--weights", ",".join(["1"] * 9), "--out", tmp_path / "o.ptns") == 2
    assert "short.ptns" in capsys.readouterr().err


def test_dao_constant_input_has_zero_salience(tmp_path):
    x = _write_tensor(tmp_path / "x.ptns", np.full((1, 2, 7, 7), 3.25))
    off = _write_tensor(tmp_path / "off.ptns", np.zeros((1, 18, 7, 7)))
    mod = _write_tensor(tmp_path / "mod.ptns", np.ones((1, 9, 7, 7)))
    out, sal = tmp_path / "dao.ptns", tmp_path / "gate.ptns"
    assert run("dao", "--in", x, "--offsets", off, "--modulation", mod,
               "--weights", "1.0", "--out", out, "--salient-out", sal) == 0
    assert not np.any(load_tensor(sal).data)
    assert not np.any(load_tensor(out).data)
    report = read_json(tmp_path / "dao.json")
    assert str(sal) in report["outputs"]


def test_gradcheck_report(tmp_path):
    report = tmp_path / "grad.json"
    assert run("gradcheck", "--seed", 0, "--variant", "v3", "--report", report) == 0
    doc = read_json(report)
    assert doc["max_rel_err"] < 1e-3
    assert doc["parameters"]["seed"] == 0
    assert run("gradcheck", "--variant", "v3", "--report", report) == 1  # no seed


def test_trace_offsets_report_counts(tmp_path):
    base = tmp_path / "base.png"
    save_image(np.zeros((9, 9), dtype=np.uint8), base)
    out = tmp_path / "overlay.png"
    assert run("trace-offsets", "--base", base, "--anchor", "4,4",
               "--levels", 2, "--out", out) == 0
    report = read_json(tmp_path / "overlay.json")
    assert report["points"] == 81
    assert report["anchors_drawn"] == 1
    assert report["offsets_drawn"] <= 81
    assert out.exists()


def _eval_files(tmp_path):
    gt = np.array([[0, 0, 1, 1], [1, 1, 255, 0]], dtype=np.uint8)
    pred = np.array([[0, 1, 1, 1], [1, 0, 0, 0]], dtype=np.uint8)
    gt_p, pr_p = tmp_path / "gt.png", tmp_path / "pred.png"
    save_labels(gt, gt_p)
    save_labels(pred, pr_p)
    return pr_p, gt_p


def test_eval_emits_miou_and_open_miou(tmp_path):
    pred, gt = _eval_files(tmp_path)
    sim = tmp_path / "sim.csv"
    save_similarity_csv(sim, ["a", "b"], np.array([[1.0, 0.5], [0.5, 1.0]]))
    out = tmp_path / "metrics.json"
    assert run("eval", "--pred", pred, "--gt", gt, "--classes", 2,
               "--sim", sim, "--out", out) == 0
    doc = read_json(out)
    assert 0.0 <= doc["miou"] <= 1.0
    assert doc["open_miou"] >= doc["miou"]
    report = read_json(tmp_path / "metrics.report.json")  # .json was taken
    assert report["command"] == "eval"
    assert str(sim) in report["inputs"]


def test_eval_class_count_must_match_similarity(tmp_path):
    pred, gt = _eval_files(tmp_path)
    sim = tmp_path / "sim.csv"
    save_similarity_csv(sim, ["a", "b", "c"], np.eye(3))
    assert run("eval", "--pred", pred, "--gt", gt, "--classes", 2,
               "--sim", sim, "--out", tmp_path / "m.json") == 2


def test_sim_from_taxonomy_matches_library(tmp_path):
    tax = tmp_path / "tax.tsv"
    tax.write_text("root\t-\nvehicle\troot\ncar\tvehicle\nbus\tvehicle\n"
                   "sky\troot\n", encoding="utf-8")
    out = tmp_path / "sim.csv"
    assert run("sim-from-taxonomy", "--taxonomy", tax,
               "--categories", "car,bus,sky", "--out", out) == 0
    names, sim = load_similarity_csv(out)
    assert names == ["car", "bus", "sky"]
    expected = similarity_from_taxonomy(Taxonomy.load(tax), names)
    assert np.array_equal(sim, expected)
    assert run("sim-from-taxonomy", "--taxonomy", tax, "--out", out) == 1
    assert run("sim-from-taxonomy", "--taxonomy", tax, "--categories", "car",
               "--categories-file", tax, "--out", out) == 1


def test_report_flag_overrides_default_path(tmp_path, img_png):
    out = tmp_path / "w.png"
    report = tmp_path / "custom_report.json"
    assert run("warp", "--in", img_png, "--out", out, "--report", report) == 0
    assert report.exists()
    assert not (tmp_path / "w.json").exists()

import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from nucleiforge.cli import main
from nucleiforge.core import ClassId, InstanceMap
from nucleiforge.io import read_array, read_instance_map, write_array, write_instance_map


def run(tmp_path, command, cfg=None, seed=0, out="out", jobs=1):
    args = [command, "--out", str(tmp_path / out), "--seed", str(seed), "--jobs", str(jobs)]
    if cfg is not None:
        p = tmp_path / f"{out}.cfg.json"
        p.write_text(json.dumps(cfg))
        args += ["--config", str(p)]
    return main(args)


def tree_bytes(root: Path):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    """A small synthetic corpus shared by the commands that consume one."""
    root = tmp_path_factory.mktemp("corpus")
    cfg = {"n": 3, "noise_sigma": 0.05, "synth": {"height": 48, "width": 48}}
    (root / "cfg.json").write_text(json.dumps(cfg))
    assert main(["synth", "--config", str(root / "cfg.json"), "--seed", "7", "--out", str(root / "synth")]) == 0
    tiles = root / "tiles"
    tiles.mkdir()
    rare = [ClassId.NEUTROPHIL, ClassId.EOSINOPHIL, ClassId.PLASMA, ClassId.EPITHELIAL]
    for k, c in enumerate(rare):
        ids = np.zeros((32, 32), int)
        ids[4:12, 4:12] = 1
        ids[20:26, 18:28] = 2
        write_instance_map(tiles / f"tile_{k}", InstanceMap(ids, {1: int(c), 2: int(ClassId.CONNECTIVE)}))
    gts = root / "gts"
    gts.mkdir()
    for k in range(3):
        write_instance_map(gts / f"img_{k:04d}", read_instance_map(root / f"synth/img_{k:04d}/gt"))
    big = np.random.default_rng(0).random((300, 280)).astype(np.float32)
    write_array(root / "big.npy", big)
    return root


def command_configs(corpus):
    s = corpus / "synth"
    img = s / "img_0000"
    return {
        "synth": {"n": 2, "noise_sigma": 0.1, "drop_rate": 0.2, "jitter_px": 1},
        "convert": {"input": str(img / "gt")},
        "mosaic": {"corpus": str(corpus / "tiles"), "count": 3, "tile_shape": [32, 32], "target": [1, 1, 0, 1, 1, 4]},
        "tile": {"input": str(corpus / "big.npy"), "stitch": True},
        "postproc": {"input": str(img / "hover_epi_lym_con")},
        "assemble": {"input": str(img / "detections"), "height": 48, "width": 48},
        "fuse": {"mode": "fill_missing", "a": str(img / "gt"), "b": str(s / "img_0001" / "gt")},
        "eval": {"pred": str(corpus / "gts"), "gt": str(corpus / "gts")},
        "gradcheck": {"points": 5},
        "pipeline": {"input": str(s)},
    }


@pytest.mark.parametrize(
    "command", ["synth", "convert", "mosaic", "tile", "postproc", "assemble", "fuse", "eval", "gradcheck", "pipeline"]
)
def test_rerun_is_byte_identical(tmp_path, corpus, command):
    cfg = command_configs(corpus)[command]
    assert run(tmp_path, command, cfg, seed=11, out="a") == 0
    assert run(tmp_path, command, cfg, seed=11, out="b") == 0
    a, b = tree_bytes(tmp_path / "a"), tree_bytes(tmp_path / "b")
    assert a and a == b


@pytest.mark.parametrize("command", ["synth", "pipeline"])
def test_worker_count_does_not_change_output(tmp_path, corpus, command):
    cfg = command_configs(corpus)[command]
    assert run(tmp_path, command, cfg, seed=3, out="serial") == 0
    assert run(tmp_path, command, cfg, seed=3, out="pool", jobs=2) == 0
    assert tree_bytes(tmp_path / "serial") == tree_bytes(tmp_path / "pool")


def test_different_seed_changes_synth(tmp_path):
    assert run(tmp_path, "synth", {"n": 1}, seed=1, out="a") == 0
    assert run(tmp_path, "synth", {"n": 1}, seed=2, out="b") == 0
    assert (tmp_path / "a/img_0000/gt.npy").read_bytes() != (tmp_path / "b/img_0000/gt.npy").read_bytes()


def test_synth_zero_images(tmp_path):
    assert run(tmp_path, "synth", {"n": 0}) == 0
    assert [p.name for p in (tmp_path / "out").iterdir()] == ["manifest.json"]
    assert json.loads((tmp_path / "out/manifest.json").read_text())["images"] == []


def test_pipeline_self_eval(tmp_path, corpus):
    assert run(tmp_path, "eval", {"pred": str(corpus / "gts"), "gt": str(corpus / "gts")}) == 0
    report = json.loads((tmp_path / "out/report.json").read_text())
    assert report["mpq_plus"] == 1.0 and report["multi_r2"] == 1.0


def test_pipeline_noise_free_quality(tmp_path):
    assert run(tmp_path, "synth", {"n": 4}, seed=5, out="s") == 0
    assert run(tmp_path, "pipeline", {"input": str(tmp_path / "s")}, out="p") == 0
    report = json.loads((tmp_path / "p/report.json").read_text())
    assert report["mpq_plus"] >= 0.95
    rows = (tmp_path / "p/composition.csv").read_text().splitlines()
    assert rows[0].startswith("image_id,neutrophil") and len(rows) == 5
    assert len(list((tmp_path / "p/pred").glob("*.npy"))) == 4


def test_convert_outputs(tmp_path, corpus):
    assert run(tmp_path, "convert", command_configs(corpus)["convert"]) == 0
    out = tmp_path / "out"
    gt = read_instance_map(corpus / "synth/img_0000/gt")
    assert len((out / "yolo.txt").read_text().splitlines()) == len(gt)
    major = read_instance_map(out / "group_epi_lym_con")
    rare = read_instance_map(out / "group_neu_eos_pla")
    assert len(major) + len(rare) == len(gt)


def test_tile_stitch_reproduces_source(tmp_path, corpus):
    assert run(tmp_path, "tile", command_configs(corpus)["tile"]) == 0
    assert np.array_equal(read_array(tmp_path / "out/stitched.npy"), read_array(corpus / "big.npy"))
    plan = json.loads((tmp_path / "out/plan.json").read_text())
    assert plan["windows"] == [[0, 0], [24, 0], [0, 44], [24, 44]]


def test_mosaic_outputs_have_rare_classes(tmp_path, corpus):
    assert run(tmp_path, "mosaic", command_configs(corpus)["mosaic"]) == 0
    for k in range(3):
        m = read_instance_map(tmp_path / f"out/mosaic_{k:04d}")
        assert m.shape == (64, 64)
        assert {ClassId.NEUTROPHIL, ClassId.EOSINOPHIL, ClassId.PLASMA} <= set(m.classes.values())
    assert (tmp_path / "out/upsample_plan.json").exists()


def test_gradcheck_within_tolerance(tmp_path):
    assert run(tmp_path, "gradcheck", {"points": 20}) == 0
    worst = json.loads((tmp_path / "out/gradcheck.json").read_text())["max_relative_error"]
    assert worst["cross_entropy"] < 1e-4 and worst["dice"] < 1e-4 and worst["efl"] < 1e-4
    assert worst["ciou"] < 1e-3


# --- errors -----------------------------------------------------------------


def test_missing_input_names_path(tmp_path, caplog):
    missing = tmp_path / "nowhere" / "gt"
    assert run(tmp_path, "convert", {"input": str(missing)}) == 3
    assert str(missing) in caplog.text


def test_missing_key_is_config_error(tmp_path):
    assert run(tmp_path, "convert", {}) == 2


def test_bad_json_is_config_error(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    assert main(["synth", "--config", str(p), "--out", str(tmp_path / "o")]) == 2


def test_bad_params_are_config_errors(tmp_path, corpus):
    cfg = {"input": str(corpus / "synth/img_0000/hover_epi_lym_con"), "postproc": {"t_np": 2.0}}
    assert run(tmp_path, "postproc", cfg) == 2
    assert run(tmp_path, "synth", {"n": 1, "synth": {"bogus": 1}}) == 2
    assert run(tmp_path, "fuse", {"mode": "sideways", "a": str(corpus / "synth/img_0000/gt"), "b": str(corpus / "synth/img_0001/gt")}) == 2


def test_corrupt_file_is_data_error(tmp_path):
    (tmp_path / "x.npy").write_bytes(b"garbage")
    (tmp_path / "x.json").write_text("{}")
    assert run(tmp_path, "convert", {"input": str(tmp_path / "x")}) == 3


def test_fuse_dimension_mismatch(tmp_path):
    write_instance_map(tmp_path / "a", InstanceMap.empty(4, 4))
    write_instance_map(tmp_path / "b", InstanceMap.empty(4, 5))
    assert run(tmp_path, "fuse", {"a": str(tmp_path / "a"), "b": str(tmp_path / "b")}) == 3


def test_module_entry_point(tmp_path):
    res = subprocess.run(
        [sys.executable, "-m", "nucleiforge", "synth", "--out", str(tmp_path / "o"), "--seed", "1"],
        capture_output=True,
        text=True,
    )
    assert res.returncode == 0
    assert (tmp_path / "o/img_0000/gt.npy").exists()
    res = subprocess.run(
        [sys.executable, "-m", "nucleiforge", "eval", "--out", str(tmp_path / "e"), "--config", str(tmp_path / "nope.json")],
        capture_output=True,
        text=True,
        env={"NUCLEIFORGE_LOG": "error", "PATH": ""},
    )
    assert res.returncode == 2 and "nope.json" in res.stderr

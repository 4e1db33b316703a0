import json

import numpy as np
import pytest

from uskeypoints.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, apply_overrides, run
from uskeypoints.numerics import load_t32

SCENE = {
    "n_frames": 24, "size": 64, "background": 0.1, "speckle": 0.2, "seed": 0, "n_videos": 2,
    "label": "band",
    "elements": [{"kind": "horizontal_band", "intensity": 0.9, "thickness": 3.0,
                  "position": [31.5, 26.0], "length": 20.0, "amplitude": 3.0, "period": 8.0}],
}
TRAIN = {
    "epochs": 2, "batch_size": 4, "pairs_train": 8, "pairs_val": 4, "source_stride": 2, "seed": 0,
    "model": {"image_size": 32, "k": 3, "width": 4, "feature_channels": 4},
    "rtfpm": {"size": 32, "angle_step": 6.0},
}


@pytest.fixture(scope="module")
def configs(tmp_path_factory):
    root = tmp_path_factory.mktemp("cfg")
    (root / "scene.json").write_text(json.dumps(SCENE))
    (root / "train.json").write_text(json.dumps(TRAIN))
    return root


@pytest.fixture(scope="module")
def data(configs, tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert run(["synth", "--config", str(configs / "scene.json"), "--out", str(out)]) == EXIT_OK
    return out


def pipeline(configs, data, out):
    train = ["--config", str(configs / "train.json"), "--data", str(data), "--out", str(out / "train")]
    assert run(["preprocess"] + train) == EXIT_OK
    assert run(["train"] + train) == EXIT_OK
    assert run(["infer", "--data", str(data), "--checkpoint", str(out / "train" / "final.t32"),
                "--out", str(out / "infer")]) == EXIT_OK


def test_unknown_flag_is_usage_error():
    assert run(["train", "--learning-rate", "3"]) == EXIT_USAGE
    assert run(["frobnicate"]) == EXIT_USAGE
    assert run([]) == EXIT_USAGE


def test_help_exits_cleanly(capsys):
    assert run(["--help"]) == EXIT_OK
    assert "gradcheck" in capsys.readouterr().out


def test_bad_config_values(configs, data, tmp_path):
    assert run(["train", "--config", str(configs / "train.json"), "--data", str(data),
                "--override", "batch_size=1", "--out", str(tmp_path)]) == EXIT_USAGE
    assert run(["train", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path)]) == EXIT_USAGE
    assert run(["synth", "--override", "preset=\"sphere\"", "--out", str(tmp_path)]) == EXIT_USAGE


def test_missing_data_is_data_error(configs, tmp_path):
    assert run(["preprocess", "--config", str(configs / "train.json"), "--data", str(tmp_path / "nope"),
                "--out", str(tmp_path)]) == EXIT_DATA
    assert run(["infer", "--data", str(tmp_path), "--checkpoint", str(tmp_path / "x.t32"),
                "--out", str(tmp_path)]) == EXIT_DATA


def test_overrides():
    cfg = apply_overrides({"model": {"k": 10}}, ["model.k=5", "lr=0.01", "rtfpm.horizontal_band=[[60,120]]"])
    assert cfg == {"model": {"k": 5}, "lr": 0.01, "rtfpm": {"horizontal_band": [[60, 120]]}}


def test_synth_layout(data):
    assert sorted(p.name for p in data.iterdir() if p.is_dir()) == ["video_000", "video_001"]
    assert len(list((data / "video_001" / "frames").glob("*.pgm"))) == 24
    snap = json.loads((data / "resolved_config.json").read_text())
    assert snap["command"] == "synth" and snap["config"]["n_videos"] == 2
    assert snap["config"]["scene"]["seed"] == 0


def test_pipeline_is_byte_deterministic(configs, data, tmp_path):
    pipeline(configs, data, tmp_path / "a")
    pipeline(configs, data, tmp_path / "b")
    for rel in ("train/final.t32", "train/best.t32", "infer/video_000/keypoints.jsonl",
                "infer/video_001/keypoints.jsonl"):
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel
    snap = json.loads((tmp_path / "a" / "train" / "resolved_config.json").read_text())
    # defaults are filled in, not only the keys given on the command line
    assert snap["config"]["lr"] == 0.001 and snap["config"]["model"]["k"] == 3
    lines = (tmp_path / "a" / "infer" / "video_000" / "keypoints.jsonl").read_text().splitlines()
    assert len(lines) == 24 * 3
    manifest = json.loads((tmp_path / "a" / "train" / "manifest.json").read_text())
    assert "final.t32" in manifest["outputs"]


def test_eval_embed_tsne_classify(configs, data, tmp_path):
    pipeline(configs, data, tmp_path)
    ckpt = str(tmp_path / "train" / "final.t32")
    assert run(["eval", "--data", str(data), "--checkpoint", ckpt, "--out", str(tmp_path / "ev")]) == EXIT_OK
    report = json.loads((tmp_path / "ev" / "report.json").read_text())
    assert 0 <= report["sp"] <= 1 and report["videos"]["video_000"]["config"]["radius_px"] == 8.0
    assert run(["embed", "--data", str(data), "--checkpoint", ckpt, "--out", str(tmp_path / "em")]) == EXIT_OK
    assert load_t32(tmp_path / "em" / "embeddings.t32").shape == (48, 4)
    assert run(["tsne", "--embeddings", str(tmp_path / "em"), "--override", "perplexity=5",
                "--override", "iterations=300", "--out", str(tmp_path / "ts")]) == EXIT_OK
    rows = (tmp_path / "ts" / "tsne.csv").read_text().splitlines()
    assert rows[0] == "x,y,label" and len(rows) == 49
    # one class only, so classification is a data error
    assert run(["classify", "--tsne", str(tmp_path / "ts" / "tsne.csv"),
                "--out", str(tmp_path / "cl")]) == EXIT_DATA


def test_png_overlays(configs, data, tmp_path):
    pipeline(configs, data, tmp_path)
    assert run(["infer", "--data", str(data / "video_000"), "--checkpoint",
                str(tmp_path / "train" / "final.t32"), "--png", "--correction",
                "--out", str(tmp_path / "png")]) == EXIT_OK
    pngs = sorted((tmp_path / "png" / "video_000").glob("overlay_*.png"))
    assert len(pngs) == 24 and pngs[0].read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_gradcheck_command(tmp_path, capsys):
    assert run(["gradcheck", "--override", "n_instances=1", "--out", str(tmp_path)]) == EXIT_OK
    res = json.loads((tmp_path / "gradcheck.json").read_text())
    assert res["passed"] and all(r["max_rel_error"] <= 1e-3 for r in res["results"])
    assert "PASS" in capsys.readouterr().out


def test_cache_dir_environment(configs, data, tmp_path, monkeypatch):
    monkeypatch.setenv("UST_CACHE_DIR", str(tmp_path / "shared"))
    assert run(["preprocess", "--config", str(configs / "train.json"), "--data", str(data),
                "--out", str(tmp_path / "run")]) == EXIT_OK
    assert any((tmp_path / "shared").iterdir()) and not (tmp_path / "run" / "cache").exists()

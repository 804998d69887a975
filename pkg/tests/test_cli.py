import csv
import json
import shutil
import subprocess
import sys

import numpy as np
import pytest

from residual_nerf.cli import depth_stem, main
from residual_nerf.imaging import read_pfm, write_pfm
from residual_nerf.scenes import load_dataset

CONFIG = {
    "n_samples": 8,
    "field": {"grid": {"levels": 2, "base_resolution": 4, "table_size": 256}, "hidden_width": 8},
    "mix": {"hidden_width": 8},
    "background": {"epochs": 1, "rays_per_batch": 256},
    "residual": {"epochs": 2, "rays_per_batch": 256},
}


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "config.json").write_text(json.dumps(CONFIG, indent=1))
    assert main(["generate", "--scene", "a", "--out", str(root / "data"), "--counts", "2", "2",
                 "--size", "12", "12", "--radius", "2.6"]) == 0
    common = ["--config", str(root / "config.json"), "--dataset", str(root / "data")]
    assert main(["train-background", *common, "--out", str(root / "bg")]) == 0
    assert main(["train-residual", *common, "--out", str(root / "res"), "--background",
                 str(root / "bg" / "final"), "--checkpoint-every", "1"]) == 0
    return root, common


class TestGenerate:
    def test_unknown_scene(self, tmp_path, capsys):
        assert main(["generate", "--scene", "Q", "--out", str(tmp_path)]) != 0
        err = capsys.readouterr().err
        assert all(name in err for name in ("A", "B", "C"))

    def test_dataset_written(self, run):
        root, _ = run
        ds = load_dataset(root / "data")
        assert len(ds.background) == 2 and len(ds.eval) == 2 and ds.meta["scene"] == "A"


class TestTraining:
    def test_outputs(self, run):
        root, _ = run
        assert (root / "bg" / "final" / "bundle.json").exists()
        assert (root / "bg" / "config.json").read_bytes() == (root / "config.json").read_bytes()
        resolved = json.loads((root / "bg" / "resolved_config.json").read_text())
        assert resolved["dataset"] == str(root / "data")
        manifest = json.loads((root / "res" / "final" / "bundle.json").read_text())
        assert {"bg", "res", "mix"} <= set(manifest["networks"])
        rows = list(csv.DictReader(open(root / "res" / "history.csv")))
        assert [r["epoch"] for r in rows] == ["1", "2"]

    def test_residual_needs_background(self, run, capsys):
        root, common = run
        assert main(["train-residual", *common, "--out", str(root / "x")]) == 2
        assert "--background" in capsys.readouterr().err

    def test_unknown_config_key(self, run, tmp_path):
        root, _ = run
        (tmp_path / "c.json").write_text('{"learning_rat": 1}')
        assert main(["train-background", "--config", str(tmp_path / "c.json"), "--dataset",
                     str(root / "data"), "--out", str(tmp_path / "o")]) == 2

    def test_missing_dataset(self, tmp_path):
        assert main(["train-background", "--dataset", str(tmp_path / "none"), "--out",
                     str(tmp_path / "o")]) == 2


class TestRenderAndEval:
    def test_stem_embeds_method_and_m(self):
        assert depth_stem("eval/r_000", "threshold", 3.0) == "eval_r_000_threshold_m3"
        assert depth_stem("eval/r_000", "threshold", 1.5) == "eval_r_000_threshold_m1.5"
        assert depth_stem("eval/r_000", "expected", 7.0) == "eval_r_000_expected"

    def test_expected_ignores_m(self, run, tmp_path):
        root, common = run
        outs = []
        for m in ("1", "9"):
            out = tmp_path / m
            assert main(["render-depth", *common, "--checkpoint", str(root / "res" / "final"),
                         "--method", "expected", "--m", m, "--out", str(out)]) == 0
            outs.append(sorted(p.name for p in out.glob("*.pfm")))
            assert json.loads((out / "depth_manifest.json").read_text())["m"] is None
        assert outs[0] == outs[1]
        a = read_pfm(tmp_path / "1" / outs[0][0])
        b = read_pfm(tmp_path / "9" / outs[0][0])
        np.testing.assert_array_equal(a, b)

    def test_threshold_render_and_eval(self, run, tmp_path, capsys):
        root, common = run
        out = tmp_path / "thr"
        assert main(["render-depth", *common, "--checkpoint", str(root / "res" / "final"),
                     "--m", "2.5", "--limit", "1", "--rgb", "--out", str(out)]) == 0
        names = {p.name for p in out.iterdir()}
        assert {"eval_r_000_threshold_m2.5.pfm", "eval_r_000_threshold_m2.5.png",
                "eval_r_000_threshold_m2.5_valid.png", "eval_r_000_rgb.png"} <= names
        assert main(["eval", "--pred", str(out), "--dataset", str(root / "data"),
                     "--heatmaps"]) == 0
        report = json.loads((out / "report.json").read_text())
        assert report["mae"] <= report["rmse"] and report["method"] == "threshold"
        assert "RMSE" in capsys.readouterr().out

    def test_identical_prediction_scores_zero(self, run, tmp_path):
        root, _ = run
        ds = load_dataset(root / "data")
        pred = tmp_path / "gt"
        pred.mkdir()
        frames = []
        for f in ds.eval:
            stem = depth_stem(f.name, "expected", 3.0)
            write_pfm(pred / f"{stem}.pfm", f.gt_depth)
            frames.append({"frame": f.name, "file": f"{stem}.pfm", "crop": f.crop})
        (pred / "depth_manifest.json").write_text(json.dumps(
            {"method": "expected", "m": None, "mode": "single", "split": "eval",
             "frames": frames}))
        assert main(["eval", "--pred", str(pred), "--dataset", str(root / "data"),
                     "--crops", "full"]) == 0
        report = json.loads((pred / "report.json").read_text())
        assert report["mae"] == 0 and report["rmse"] == 0

    def test_no_gt_prints_notice(self, run, tmp_path, capsys):
        root, common = run
        data = tmp_path / "nogt"
        shutil.copytree(root / "data", data)
        for p in data.rglob("*_depth.pfm"):
            p.unlink()
        out = tmp_path / "r"
        assert main(["render-depth", "--dataset", str(data), "--config",
                     str(root / "config.json"), "--checkpoint", str(root / "bg" / "final"),
                     "--out", str(out)]) == 0
        capsys.readouterr()
        assert main(["eval", "--pred", str(out), "--dataset", str(data)]) == 0
        assert "no ground-truth depth" in capsys.readouterr().out

    def test_box_mismatch(self, run, tmp_path):
        root, common = run
        data = tmp_path / "moved"
        shutil.copytree(root / "data", data)
        meta = json.loads((data / "meta.json").read_text())
        meta["scene_box"] = [[-2, -2, -2], [2, 2, 2]]
        (data / "meta.json").write_text(json.dumps(meta))
        assert main(["render-depth", "--dataset", str(data), "--checkpoint",
                     str(root / "bg" / "final"), "--out", str(tmp_path / "o")]) == 3


class TestCurve:
    def test_run_directory(self, run, tmp_path):
        root, common = run
        assert main(["curve", *common, "--run", str(root / "res"), "--method", "residual",
                     "--out", str(tmp_path / "c.csv")]) == 0
        rows = list(csv.DictReader(open(tmp_path / "c.csv")))
        assert [r["epoch"] for r in rows] == ["1", "2"]

    def test_unordered_epochs_refused(self, run, tmp_path, capsys):
        root, common = run
        a, b = root / "res" / "epoch_0001", root / "res" / "epoch_0002"
        assert main(["curve", *common, "--checkpoints", f"2:{b}", f"1:{a}", "--method",
                     "residual", "--out", str(tmp_path / "c.csv")]) != 0
        assert "ascending" in capsys.readouterr().err

    def test_needs_a_source(self, run):
        with pytest.raises(SystemExit):
            main(["curve", *run[1], "--out", "x.csv"])


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "residual_nerf", "--help"], capture_output=True,
                          text=True, timeout=60)
    assert proc.returncode == 0 and "render-depth" in proc.stdout

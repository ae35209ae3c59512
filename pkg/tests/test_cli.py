import json
import subprocess
import sys

import numpy as np
import pytest

from dpvstream import io
from dpvstream.cli import main

FAST = ["--delta-t", "1", "--stride", "1", "--num-hypotheses", "32"]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli") / "seq"
    assert main(["synth", str(root), "--frames", "7", "--step", "0.2"]) == 0
    return root


def tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


class TestSynth:
    def test_layout(self, dataset):
        assert len(io.load_sequence(dataset)) == 7
        assert len(list((dataset / "images").glob("*.png"))) == 7

    def test_scene_choice(self, tmp_path):
        assert main(["synth", str(tmp_path / "o"), "--scene", "objects", "--frames", "5"]) == 0
        assert main(["synth", str(tmp_path / "x"), "--scene", "teapot"]) == 1


class TestTrack:
    def test_outputs_and_metrics(self, dataset, tmp_path, capsys):
        out = tmp_path / "out"
        assert main(["track", str(dataset), "--output-dir", str(out), *FAST]) == 0
        stdout = capsys.readouterr().out
        assert "processed 3 frames" in stdout
        record = json.loads(stdout.strip().splitlines()[-1])
        assert record["frames"] == 3 and 0 <= record["delta1"] <= 100
        assert (out / "summary.json").is_file()

    def test_deterministic(self, dataset, tmp_path):
        args = ["track", str(dataset), *FAST, "--fusion-mode", "adaptive", "--refine"]
        assert main([*args, "--output-dir", str(tmp_path / "a")]) == 0
        assert main([*args, "--output-dir", str(tmp_path / "b")]) == 0
        a, b = tree(tmp_path / "a"), tree(tmp_path / "b")
        assert a.keys() == b.keys() and len(a) > 0
        assert a == b

    def test_config_file_and_override(self, dataset, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"fusion_mode": "bayes", "num_hypotheses": 16, "delta_t": 1, "stride": 1}))
        out = tmp_path / "out"
        assert main(["track", str(dataset), "--config", str(cfg), "--num-hypotheses", "24", "--output-dir", str(out)]) == 0
        used = json.loads((out / "summary.json").read_text())["config"]
        assert used["fusion_mode"] == "bayes"
        assert used["num_hypotheses"] == 24

    def test_too_few_frames_is_usage_error(self, dataset, tmp_path):
        assert main(["track", str(dataset), "--output-dir", str(tmp_path)]) == 1

    def test_bad_mode_is_usage_error(self, dataset, tmp_path):
        assert main(["track", str(dataset), *FAST, "--fusion-mode", "kalman", "--output-dir", str(tmp_path)]) == 1

    def test_missing_dataset_is_data_error(self, tmp_path):
        assert main(["track", str(tmp_path / "none"), *FAST, "--output-dir", str(tmp_path)]) == 2

    def test_unknown_command(self):
        assert main(["fly"]) == 1


class TestSweep:
    def test_writes_volume(self, dataset, tmp_path, capsys):
        assert main(["sweep", str(dataset), "--frame", "3", *FAST, "--output-dir", str(tmp_path)]) == 0
        vol = np.load(tmp_path / "dpv_000003.npy")
        assert vol.shape == (30, 40, 32)
        np.testing.assert_allclose(vol.sum(axis=-1), 1.0, atol=1e-9)
        assert (tmp_path / "depth_000003.png").is_file()
        assert "abs_rel" in capsys.readouterr().out


class TestEval:
    def test_perfect_prediction(self, dataset, capsys):
        gt = dataset / "depth"
        assert main(["eval", str(gt), str(gt)]) == 0
        record = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert record["abs_rel"] == 0.0 and record["delta1"] == 100.0

    def test_scaled_prediction(self, dataset, tmp_path, capsys):
        pred = tmp_path / "pred"
        pred.mkdir()
        for p in (dataset / "depth").glob("*.png"):
            io.write_depth(1.3 * io.read_depth(p), pred / p.name)
        assert main(["eval", str(pred), str(dataset / "depth"), "--no-scale-normalize"]) == 0
        record = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert record["delta1"] == 0.0 and record["delta2"] == 100.0
        assert main(["eval", str(pred), str(dataset / "depth")]) == 0
        record = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert record["abs_rel"] < 1e-3

    def test_empty_prediction_dir(self, dataset, tmp_path):
        assert main(["eval", str(tmp_path), str(dataset / "depth")]) == 2


class TestRefinePose:
    def test_recovers(self, tmp_path, capsys):
        root = tmp_path / "seq"
        assert main(["synth", str(root), "--frames", "5", "--step", "0.1"]) == 0
        capsys.readouterr()
        code = main(["refine-pose", str(root), "--delta-t", "1", "--perturb-deg", "0.5", "--perturb-frac", "0.01"])
        assert code == 0
        record = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert record["final_energy"] < 0.5 * record["initial_energy"]


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "dpvstream", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for cmd in ("synth", "sweep", "track", "eval", "refine-pose"):
        assert cmd in proc.stdout

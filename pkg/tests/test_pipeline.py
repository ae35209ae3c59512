import json
import math
import shutil

import numpy as np
import pytest

from dpvstream import dpv, io
from dpvstream.errors import ConfigError, DataError
from dpvstream.pipeline import (
    PipelineConfig,
    downsample_ground_truth,
    make_window,
    reference_indices,
    run_stream,
    run_window,
)
from dpvstream.plane_sweep import measure_dpv


class TestConfig:
    def test_defaults(self):
        c = PipelineConfig()
        assert (c.num_hypotheses, c.delta_t, c.damping) == (64, 5, 0.8)
        assert c.window_stride == 5

    @pytest.mark.parametrize(
        "kwargs",
        [
            dict(fusion_mode="kalman"),
            dict(d_min=0.0),
            dict(temperature=-1.0),
            dict(delta_t=0),
            dict(stride=0),
            dict(mask_threshold=1.5),
            dict(pose_loss="cauchy"),
            dict(damping=1.5),
        ],
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            PipelineConfig(**kwargs)

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="bogus"):
            PipelineConfig.from_dict({"bogus": 1})

    def test_file_and_override(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"num_hypotheses": 32, "fusion_mode": "bayes"}))
        c = PipelineConfig.from_file(path, {"fusion_mode": "none"})
        assert (c.num_hypotheses, c.fusion_mode) == (32, "none")

    def test_bad_file(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text("[1, 2]")
        with pytest.raises(ConfigError):
            PipelineConfig.from_file(path)
        with pytest.raises(ConfigError):
            PipelineConfig.from_file(tmp_path / "none.json")

    def test_dict_roundtrip(self):
        c = PipelineConfig(fusion_mode="bayes", refine=True, stride=1)
        assert PipelineConfig.from_dict(c.to_dict()) == c


class TestReferenceIndices:
    def test_stride_defaults_to_delta_t(self):
        assert reference_indices(31, PipelineConfig()) == [10, 15, 20]

    def test_dense(self):
        assert reference_indices(7, PipelineConfig(delta_t=1, stride=1)) == [2, 3, 4]

    def test_too_short(self):
        with pytest.raises(ConfigError, match="window requires 5 frames"):
            reference_indices(3, PipelineConfig(delta_t=1))


class TestGroundTruthDownsample:
    def test_block_mean(self):
        gt = np.arange(16.0).reshape(4, 4) + 1
        np.testing.assert_allclose(downsample_ground_truth(gt, (2, 2)), [[3.5, 5.5], [11.5, 13.5]])

    def test_invalid_block(self):
        gt = np.ones((4, 4))
        gt[0, 0] = 0.0
        np.testing.assert_array_equal(downsample_ground_truth(gt, (2, 2)), [[0.0, 1.0], [1.0, 1.0]])

    def test_mismatch(self):
        with pytest.raises(DataError):
            downsample_ground_truth(np.ones((5, 7)), (2, 2))


class TestStream:
    def test_three_frames_rejected(self, dataset_factory):
        manifest = io.load_sequence(dataset_factory("plane", n_frames=3))
        with pytest.raises(ConfigError, match="window requires 5 frames"):
            run_stream(manifest, PipelineConfig(delta_t=1), write=False)

    def test_single_window_mode_none_is_measurement(self, dataset_factory):
        manifest = io.load_sequence(dataset_factory("plane", n_frames=5, step=0.25))
        config = PipelineConfig(delta_t=1, fusion_mode="none")
        result = run_stream(manifest, config, write=False)
        assert [f.index for f in result.frames] == [2]
        meas = measure_dpv(make_window(manifest, 2, 1), config.hypotheses())
        depth, conf = dpv.depth_and_confidence(meas)
        # the fused state passes through the log domain, hence 1e-12 rather than bit equality
        np.testing.assert_allclose(result.frames[0].depth, depth, rtol=1e-12)
        np.testing.assert_allclose(result.frames[0].confidence, conf, rtol=1e-12)
        np.testing.assert_array_equal(run_window(manifest, 2, config)[1], depth)

    def test_bayes_converges(self, dataset_factory):
        manifest = io.load_sequence(dataset_factory("plane", n_frames=25, step=0.1, noise_sigma=0.02))
        config = PipelineConfig(delta_t=1, stride=1, fusion_mode="bayes")
        result = run_stream(manifest, config, write=False)
        assert len(result.frames) == 21
        assert result.frames[-1].metrics.rmse <= result.frames[0].metrics.rmse

    def test_writes_outputs(self, dataset_factory, tmp_path):
        manifest = io.load_sequence(dataset_factory("plane", n_frames=7, step=0.2))
        config = PipelineConfig(delta_t=1, stride=1, output_dir=str(tmp_path))
        result = run_stream(manifest, config)
        names = sorted(p.name for p in (tmp_path / "depth").glob("*.png"))
        assert names == ["000002.png", "000003.png", "000004.png"]
        assert len(list((tmp_path / "confidence").glob("*.png"))) == 3
        records = [json.loads(line) for line in (tmp_path / "frames.jsonl").read_text().splitlines()]
        assert [r["frame"] for r in records] == [2, 3, 4]
        assert all(r["status"] == "ok" and "degenerate_pixels" in r for r in records)
        summary = json.loads((tmp_path / "summary.json").read_text())
        assert summary["frames"] == 3 and "output_dir" not in summary["config"]
        text = (tmp_path / "metrics.txt").read_text()
        assert "eval_max_depth: inf" in text
        np.testing.assert_allclose(io.read_depth(tmp_path / "depth" / "000004.png"), result.frames[-1].depth, atol=5e-4)

    def test_refine_gives_full_resolution(self, dataset_factory):
        manifest = io.load_sequence(dataset_factory("plane", n_frames=5, step=0.25))
        result = run_stream(manifest, PipelineConfig(delta_t=1, refine=True), write=False)
        assert result.frames[0].depth.shape == (120, 160)
        assert result.frames[0].metrics.abs_rel < 0.05

    def test_pose_refinement_logged(self, dataset_factory):
        manifest = io.load_sequence(dataset_factory("objects", n_frames=7, step=0.1))
        config = PipelineConfig(delta_t=1, stride=1, pose_refine=True, pose_loss="l1")
        records = [f.record for f in run_stream(manifest, config, write=False).frames]
        assert records[0]["pose_refine"].startswith("skipped")
        for r in records[1:]:
            assert r["pose_final_energy"] <= r["pose_initial_energy"]

    def test_mask_threshold(self, dataset_factory):
        manifest = io.load_sequence(dataset_factory("plane", n_frames=5, step=0.25))
        result = run_stream(manifest, PipelineConfig(delta_t=1, mask_threshold=1.0), write=False)
        assert np.all(result.frames[0].depth == dpv.INVALID_DEPTH)
        assert result.frames[0].metrics is None
        assert "metrics_skipped" in result.frames[0].record

    def _corrupt(self, dataset_factory, tmp_path, index):
        root = tmp_path / "seq"
        shutil.copytree(dataset_factory("plane", n_frames=9, step=0.2), root)
        (root / "images" / f"{index:06d}.png").write_text("broken")
        return io.load_sequence(root)

    def test_lenient_skips(self, dataset_factory, tmp_path):
        manifest = self._corrupt(dataset_factory, tmp_path, 8)
        config = PipelineConfig(delta_t=1, stride=1, output_dir=str(tmp_path / "out"))
        result = run_stream(manifest, config)
        assert result.skipped == [6]
        assert [f.index for f in result.frames] == [2, 3, 4, 5]
        last = json.loads((tmp_path / "out" / "frames.jsonl").read_text().splitlines()[-1])
        assert last["status"] == "skipped" and "cannot read image" in last["reason"]

    def test_strict_aborts(self, dataset_factory, tmp_path):
        manifest = self._corrupt(dataset_factory, tmp_path, 8)
        with pytest.raises(DataError):
            run_stream(manifest, PipelineConfig(delta_t=1, stride=1, strict=True), write=False)

    def test_eval_depth_cap(self, dataset_factory):
        manifest = io.load_sequence(dataset_factory("plane", n_frames=5, step=0.25))
        capped = run_stream(manifest, PipelineConfig(delta_t=1, eval_max_depth=1.0, strict=True), write=False)
        assert capped.summary is None and len(capped.frames) == 1
        result = run_stream(manifest, PipelineConfig(delta_t=1, eval_max_depth=math.inf), write=False)
        assert result.summary.count == 30 * 40

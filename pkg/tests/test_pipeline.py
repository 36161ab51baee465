import json

import numpy as np
import pytest

from relocreg import pipeline
from relocreg.core import PointCloud, compose
from relocreg.errors import ParamError
from relocreg.io import save_cloud
from relocreg.pipeline import CONFIGURATIONS, PipelineConfig, recompose, run, run_clouds, stages_for
from relocreg.synthgen import (DegradationParams, SceneParams, generate_scene, make_pair,
                               pose_error, random_truth)


def test_configuration_stage_sequences():
    assert stages_for("fpfh") == ("fpfh",)
    assert stages_for("fpfh+ndt") == ("fpfh", "ndt")
    assert stages_for("fpfh+icp") == ("fpfh", "icp")
    assert stages_for("ndt+icp") == ("ndt", "icp")
    assert stages_for("fpfh+ndt+icp") == ("fpfh", "ndt", "icp")
    assert len(CONFIGURATIONS) == 5
    for bad in ("fpfh-ndt", "icp", "", "FPFH"):
        with pytest.raises(ParamError):
            stages_for(bad)


def test_config_defaults_follow_resolution():
    c = PipelineConfig.for_resolution(0.2, seed=9)
    assert c.ransac.inlier_threshold == pytest.approx(0.6)
    assert c.ndt.voxel_size == pytest.approx(0.8)
    assert c.icp.max_correspondence_dist == pytest.approx(0.4)
    assert c.ransac.seed == 9 and c.metric_threshold == 0.5


def test_config_round_trip_and_validation():
    c = PipelineConfig.from_dict({"configuration": "ndt+icp", "preprocess": {"voxel_size": 0.25},
                                  "icp": {"max_iterations": 7}, "seed": 3})
    assert c.icp.max_iterations == 7 and c.icp.max_correspondence_dist == pytest.approx(0.5)
    again = PipelineConfig.from_dict(json.loads(json.dumps(c.to_dict())))
    # an explicit NDT voxel size is honoured, not mistaken for the resolution
    assert PipelineConfig.from_dict({"ndt": {"voxel_size": 1.5}}).ndt.voxel_size == 1.5
    assert again.to_dict() == c.to_dict()
    for bad in ({"bogus": 1}, {"icp": {"bogus": 1}}, {"icp": 3}, {"configuration": "x"},
                {"metric_threshold": 0}, {"ndt": {"min_points": 1}}):
        with pytest.raises(ParamError):
            PipelineConfig.from_dict(bad)


@pytest.fixture(scope="module")
def small_pair():
    scene = generate_scene(SceneParams(length=14.0, density=20.0, seed=21))
    truth = random_truth(21, 20.0, 2.0)
    pair = make_pair(scene, truth, DegradationParams(noise_sigma=0.01, dust_fraction=0.05,
                                                     overlap=0.85, seed=21))
    return pair


def _config(name, **kw):
    return PipelineConfig.for_resolution(0.2, configuration=name, **kw)


@pytest.mark.parametrize("name", list(CONFIGURATIONS))
def test_each_configuration_runs_its_stages(small_pair, name):
    rep = run_clouds(small_pair.source, small_pair.target, _config(name))
    assert [s.name for s in rep.stages] == list(CONFIGURATIONS[name])
    np.testing.assert_allclose(recompose(rep).matrix, rep.transform.matrix, atol=1e-12)
    chained = rep.stages[0].cumulative
    for s in rep.stages[1:]:
        np.testing.assert_allclose(s.cumulative.matrix, compose(s.transform, chained).matrix, atol=1e-12)
        chained = s.cumulative
    if "fpfh" not in name:
        assert rep.keypoints == {"source": 0, "target": 0}
    d = rep.to_dict()
    assert d["schema"] == 1 and len(d["transform"]) == 16
    assert 0.0 <= d["metrics"]["inlier_fraction"] <= 1.0


def test_full_pipeline_recovers_truth(small_pair):
    rep = run_clouds(small_pair.source, small_pair.target, _config("fpfh+ndt+icp"))
    deg, m = pose_error(rep.transform, small_pair.truth)
    assert deg < 2.0 and m < 0.1
    assert not rep.fallback and rep.flags == []
    assert rep.correspondences >= rep.ransac_inliers >= 3


def test_metrics_use_denoised_full_resolution(small_pair):
    rep = run_clouds(small_pair.source, small_pair.target, _config("fpfh"))
    pre = rep.preprocess
    assert rep.metrics.target_size == pre["target_points"] - pre["target_outliers_removed"]
    assert pre["target_downsampled"] < rep.metrics.target_size


def test_identical_files(tmp_path):
    scene = generate_scene(SceneParams(length=10.0, density=15.0, seed=2))
    save_cloud(scene, tmp_path / "a.ply")
    for name in ("fpfh+ndt+icp", "ndt+icp"):
        rep = run(tmp_path / "a.ply", tmp_path / "a.ply", _config(name))
        assert rep.metrics.inlier_fraction > 0.999
        assert rep.metrics.inlier_rmse < 1e-3


def test_no_consensus_falls_back_to_identity(rng):
    # flat clouds have no salient keypoints, so no model can be estimated
    flat = lambda n: PointCloud(np.column_stack([rng.uniform(0, 6, (n, 2)), np.zeros(n)]))
    rep = run_clouds(flat(3000), flat(3000), _config("fpfh+icp"))
    assert rep.flags == ["fpfh:no_consensus"] and rep.fallback
    assert rep.stages[0].details["error"] and not rep.stages[0].converged
    np.testing.assert_array_equal(rep.stages[0].cumulative.matrix, np.eye(4))
    assert rep.stages[1].name == "icp"


def test_icp_overlap_failure_flagged(rng):
    a = PointCloud(rng.uniform(0, 5, size=(2000, 3)))
    b = PointCloud(rng.uniform(0, 5, size=(2000, 3)) + 100.0)
    rep = run_clouds(a, b, _config("ndt+icp"))
    assert "icp:insufficient_overlap" in rep.flags


def test_reproducible_reports(small_pair):
    cfg = _config("fpfh+ndt+icp", seed=5)
    a = run_clouds(small_pair.source, small_pair.target, cfg).to_dict(timings=False)
    b = run_clouds(small_pair.source, small_pair.target, cfg).to_dict(timings=False)
    assert json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)
    assert "timings_ms" not in a and all("elapsed_ms" not in s for s in a["stages"])


def test_summary_row(small_pair):
    rep = run_clouds(small_pair.source, small_pair.target, _config("fpfh"))
    row = pipeline.summary_row(rep)
    assert row["config"] == "fpfh" and row["inlier_pct"] == pytest.approx(100 * rep.metrics.inlier_fraction)

import json

import numpy as np
import pytest

from posedesc import evaluation, synth


@pytest.fixture(scope="module")
def plane_pairs():
    cfg = synth.SynthConfig(count=8, image_size=64, seed=21, geometry="plane")
    return [p for p, _ in synth.generate_pairs(cfg)]


@pytest.fixture(scope="module")
def mixed_pairs():
    cfg = synth.SynthConfig(count=8, image_size=64, seed=22)
    return [p for p, _ in synth.generate_pairs(cfg)]


def test_oracle_upper_bound(plane_pairs):
    m = evaluation.OracleMatcher()
    curve, counts = evaluation.mma(plane_pairs, m)
    np.testing.assert_allclose(curve, 1.0)
    assert counts["matches"] > 0
    np.testing.assert_allclose(evaluation.pck(plane_pairs, m), 1.0)
    assert evaluation.pck(plane_pairs, m, thresholds=(0.0,))[0] == 1.0


def test_homography_ground_truth_and_shuffled(plane_pairs):
    m = evaluation.OracleMatcher()
    res = evaluation.homography_task(plane_pairs, m)
    assert res["accuracy"][0] == 1.0
    rng = np.random.default_rng(0)

    def shuffled(pair):
        x1, x2 = evaluation.sparse_matches(m, pair)
        return x1, x2[rng.permutation(len(x2))]

    broken = evaluation.homography_task(plane_pairs, m, matches_fn=shuffled)
    assert broken["accuracy"][-1] <= 0.15


def test_homography_rejects_multiplane(mixed_pairs):
    facade = [p for p in mixed_pairs if p.geometry == "facade"]
    with pytest.raises(ValueError):
        evaluation.homography_task(facade[:1], evaluation.OracleMatcher())


def test_pose_ground_truth(mixed_pairs):
    general = [p for p in mixed_pairs if p.geometry != "plane"]
    res = evaluation.relative_pose_task(general, evaluation.OracleMatcher())
    assert res["all"]["rotation"][0] == 1.0
    assert res["all"]["translation"][0] == 1.0
    assert res["all"]["n"] == len(general)
    assert sum(res[b]["n"] for b in synth.DIFFICULTY_BUCKETS) == len(general)


def test_pose_rejects_single_plane(plane_pairs):
    with pytest.raises(ValueError):
        evaluation.relative_pose_task(plane_pairs[:1], evaluation.OracleMatcher())


def test_translation_error_is_scale_free(mixed_pairs):
    pair = next(p for p in mixed_pairs if p.geometry != "plane")
    x1, x2 = evaluation.sparse_matches(evaluation.OracleMatcher(), pair)
    r, t = evaluation.pose_errors(pair, x1, x2)
    assert r < 1e-3 and t < 1e-3


def test_random_descriptors_near_chance(mixed_pairs):
    m = evaluation.RandomMatcher(seed=1)
    curve = np.mean([evaluation.mma(mixed_pairs, evaluation.RandomMatcher(seed=s))[0] for s in range(40)], axis=0)
    chance = evaluation.keypoint_chance_level(mixed_pairs)
    assert abs(curve[2] - chance[2]) < 0.35 * chance[2]
    # random dense predictions follow the pixel-area chance level
    pck5 = np.mean([evaluation.pck(mixed_pairs, evaluation.RandomMatcher(seed=s), grid_step=2)[3] for s in range(5)])
    area = evaluation.chance_level(5.0, (64, 64))
    assert abs(pck5 - area) < 0.3 * area
    assert np.all(np.diff(curve) >= 0)
    p = evaluation.pck(mixed_pairs, m)
    assert np.all(np.diff(p) >= 0)
    assert evaluation.pck(mixed_pairs, m, thresholds=(0.0,))[0] == 0.0


def test_keypoint_cap(plane_pairs):
    m = evaluation.RandomMatcher(max_keypoints=5)
    kps, d = m.describe(plane_pairs[0].image1)
    assert len(kps) <= 5 and d.shape == (len(kps), 32)
    assert evaluation.MAX_KEYPOINTS == 1000


def test_thresholds_must_increase(plane_pairs):
    with pytest.raises(ValueError):
        evaluation.pck(plane_pairs, evaluation.OracleMatcher(), thresholds=(3.0, 1.0))
    pairs = [synth.TrainingPair(p.image1, p.image2, p.K1, p.K2, p.pose, p.difficulty, p.rotation_deg)
             for p in plane_pairs[:1]]
    with pytest.raises(ValueError):
        evaluation.mma(pairs, evaluation.OracleMatcher())


def test_report_roundtrip(tmp_path, mixed_pairs):
    report = evaluation.evaluate(mixed_pairs[:4], evaluation.OracleMatcher(), dump_dir=tmp_path / "dump")
    report.write_json(tmp_path / "r.json")
    report.write_csv(tmp_path / "r.csv")
    data = json.loads((tmp_path / "r.json").read_text())
    assert data["pck"][0] == 1.0 and data["n_pairs"] == 4
    assert data["mean_epipolar_distance"] < 1e-3
    assert (tmp_path / "r.csv").read_text().startswith("metric,threshold,value")
    assert any((tmp_path / "dump").iterdir())
    bad = evaluation.MetricReport(mma=[0.5, 0.4])
    with pytest.raises(ValueError):
        bad.validate()


def test_chance_level():
    assert evaluation.chance_level(3.0, (64, 64)) == pytest.approx(np.pi * 9 / 4096)
    assert evaluation.chance_level(1e3, (4, 4)) == 1.0

import numpy as np
import pandas as pd
import pytest
import torch

import eval_workflow
from eval_workflow import (
    EvalPair,
    EvalReport,
    ImageLandmarks,
    LandmarkPoseEstimator,
    ProxyAUEstimator,
    absent_report,
    au_consistency,
    build_eval_pairs,
    calibrate_au_thresholds,
    calibrate_identity_threshold,
    build_toolkit,
    format_table,
    format_table2,
    identity_accuracy,
    pose_consistency,
    proxy_au_features,
    reenact_faces,
    report_frame,
    run_table,
    run_table2,
    split_estimator_samples,
    table2_summary,
    solve_head_pose,
    write_report,
)
from landmark_layout import LandmarkSet, get_layout
from parsing_workflow import get_shape_backend
from reenact_losses import get_id_embedder
from reenactor_errors import DataError, EvalError
from training_workflow import build_state, latest_checkpoint
from synthetic_faces import ExpressionParams, HeadPose, canonical_template_3d, face_landmarks

LAYOUT = get_layout("ibug68_gaze")


def _pair(generated, source, image=None):
    image = torch.zeros(3, 32, 32) if image is None else image
    return EvalPair(generated, image, 0, source_landmarks=source)


@pytest.fixture
def landmark_tools():
    landmarks_of = ImageLandmarks(None, LAYOUT)
    return LandmarkPoseEstimator(landmarks_of), ProxyAUEstimator(landmarks_of)


@pytest.mark.parametrize("yaw,pitch,roll", [(10.0, 0.0, 0.0), (-20.0, 8.0, 5.0), (0.0, -12.0, -9.0)])
def test_solve_head_pose_recovers_angles(yaw, pitch, roll):
    points = face_landmarks(pose=HeadPose(yaw, pitch, roll), layout_name="ibug68").points
    estimate = solve_head_pose(points, canonical_template_3d())
    assert estimate == pytest.approx((yaw, pitch, roll), abs=1e-6)


def test_solve_head_pose_degenerate():
    with pytest.raises(EvalError):
        solve_head_pose(np.full((68, 2), 0.5), canonical_template_3d())
    points = np.full((68, 2), np.nan)
    points[:5] = face_landmarks(layout_name="ibug68").points[:5]
    with pytest.raises(EvalError, match="at least 6"):
        solve_head_pose(points, canonical_template_3d())


def test_pose_consistency(landmark_tools):
    """A 10 degree yaw gap averages to 10/3 over the three angles."""
    pose, _ = landmark_tools
    frontal, turned = face_landmarks(), face_landmarks(pose=HeadPose(yaw=10.0))
    assert pose_consistency([_pair(frontal, frontal)], pose).value == pytest.approx(0.0, abs=1e-6)
    result = pose_consistency([_pair(turned, frontal)], pose)
    assert result.value == pytest.approx(10.0 / 3.0, abs=1e-6)
    assert result.evaluated == 1


def test_pose_consistency_excludes_failures(landmark_tools):
    pose, _ = landmark_tools
    frontal = face_landmarks()
    collapsed = LandmarkSet(np.full((LAYOUT.n_points, 2), 0.5), LAYOUT)
    result = pose_consistency([_pair(frontal, frontal), _pair(collapsed, frontal)], pose)
    assert (result.evaluated, result.excluded) == (1, 1)
    with pytest.raises(EvalError):
        pose_consistency([_pair(collapsed, frontal)], pose)
    with pytest.raises(EvalError):
        pose_consistency([], pose)


def test_au_thresholds_separate_neutral_from_full():
    thresholds = calibrate_au_thresholds()
    neutral = proxy_au_features(face_landmarks(layout_name="ibug68").points)
    assert neutral["jaw_drop"] < thresholds["jaw_drop"]
    assert neutral["eye_closure"] > thresholds["eye_closure"]


def test_au_consistency(landmark_tools):
    """An open jaw against a closed one flips exactly one of the four proxy units."""
    _, au = landmark_tools
    neutral = face_landmarks()
    open_jaw = face_landmarks(expression=ExpressionParams(jaw_drop=0.22))
    assert au(open_jaw)["jaw_drop"] and not au(neutral)["jaw_drop"]
    assert au_consistency([_pair(neutral, neutral)], au).value == 100.0
    assert au_consistency([_pair(neutral, open_jaw)], au).value == pytest.approx(75.0)
    collapsed = LandmarkSet(np.full((LAYOUT.n_points, 2), 0.5), LAYOUT)
    result = au_consistency([_pair(neutral, neutral), _pair(collapsed, neutral)], au)
    assert (result.evaluated, result.excluded) == (1, 1)


def test_image_landmarks_needs_regressor():
    with pytest.raises(EvalError):
        ImageLandmarks(None, LAYOUT)(torch.zeros(3, 32, 32))


def test_identity_threshold_separable():
    assert calibrate_identity_threshold([0.1, 0.2, 0.3], [0.8, 0.9, 1.0]) == pytest.approx(0.3)


def test_identity_threshold_never_negative():
    """With no threshold meeting the impostor rate, only identical images are accepted."""
    assert calibrate_identity_threshold([0.5, 0.6], [0.1, 0.2]) == 0.0
    with pytest.raises(EvalError):
        calibrate_identity_threshold([], [0.1])


def test_identity_accuracy():
    embedder = get_id_embedder("random_projection", seed=2)
    images = torch.rand(3, 3, 32, 32) * 2 - 1
    pairs = [EvalPair(img, img.clone(), 0) for img in images]
    assert identity_accuracy(pairs, embedder, 0.0).value == 100.0
    swapped = [EvalPair(images[0], images[1], 0)]
    assert identity_accuracy(swapped, embedder, 0.0).value == 0.0
    with pytest.raises(EvalError, match="not calibrated"):
        identity_accuracy(pairs, embedder, None)


def test_eval_report_ranges():
    EvalReport(50.0, 3.0, 80.0, "toy")
    EvalReport(np.nan, np.nan, np.nan, "toy")
    with pytest.raises(EvalError):
        EvalReport(101.0, 3.0, 80.0, "toy")
    with pytest.raises(EvalError):
        EvalReport(50.0, -1.0, 80.0, "toy")


def test_build_eval_pairs_reference_floor(toy_manifest, toy_samples):
    test_ids = set(toy_manifest.split("test")["identity_id"])
    test_samples = [s for s in toy_samples if s.identity_id in test_ids]
    pairs = build_eval_pairs(None, test_samples, toy_samples, "cross-source", guides_per_reference=2)
    assert len(pairs) == 2 * len(test_ids)
    for pair in pairs:
        assert torch.equal(pair.generated, pair.reference)
        assert pair.group == "cross-source"
    with pytest.raises(EvalError):
        build_eval_pairs(None, test_samples, toy_samples, "studio")
    with pytest.raises(EvalError, match="No evaluation pairs"):
        build_eval_pairs(None, test_samples[:1], test_samples[:1], "same-source")


def test_format_and_write_report(tmp_path):
    reports = [
        EvalReport(90.0, 2.5, 100.0, "toy", "reference", {"pairs": 4}),
        absent_report("toy", "full"),
    ]
    frame = report_frame(reports)
    assert list(frame.columns[:5]) == ["variant", "group", "au_consistency", "pose_mae_degrees", "id_accuracy"]
    text = format_table(frame)
    assert "AU%" in text and "absent" in text and "90.00" in text
    path = write_report(frame, tmp_path, "table1")
    assert pd.read_csv(path).shape[0] == 2
    assert (tmp_path / "report_table1.txt").exists()


def test_run_table_missing_checkpoints(desk32, toy_manifest, tmp_path):
    """Only the reference row is measured; the trained variants are marked absent."""
    reports, frame = run_table({"full": tmp_path / "absent.pt"}, toy_manifest, out_dir=tmp_path, config=desk32)
    assert set(frame["variant"]) == {"reference", "full", "no_fusion", "no_concat"}
    assert set(frame["group"]) == {"same-source", "cross-source", "toy"}
    assert frame[frame["variant"] != "reference"]["id_accuracy"].isna().all()
    measured = frame[(frame["variant"] == "reference") & frame["id_accuracy"].notna()]
    assert (measured["id_accuracy"] == 100.0).all()
    assert (tmp_path / "report_table1.csv").exists()
    assert (tmp_path / "estimators" / "identity_classifier.pt").exists()


def test_run_table_needs_a_checkpoint(toy_manifest, tmp_path):
    with pytest.raises(EvalError):
        run_table({"full": tmp_path / "absent.pt"}, toy_manifest, out_dir=tmp_path)


def test_split_estimator_samples_is_disjoint(toy_samples):
    """Every image lands on exactly one side and each identity keeps genuine pairs for calibration."""
    fit, calibration = split_estimator_samples(toy_samples, 0.5, seed=3)
    assert len(fit) + len(calibration) == len(toy_samples)
    assert not {id(s) for s in fit} & {id(s) for s in calibration}
    for identity in {s.identity_id for s in toy_samples}:
        assert sum(s.identity_id == identity for s in calibration) >= 2
        assert sum(s.identity_id == identity for s in fit) >= 1
    again, _ = split_estimator_samples(toy_samples, 0.5, seed=3)
    assert [id(s) for s in again] == [id(s) for s in fit]
    with pytest.raises(EvalError):
        split_estimator_samples(toy_samples[:2], 0.5)


def test_build_toolkit_calibrates_on_unseen_images(desk32, toy_manifest, toy_samples, tmp_path, monkeypatch):
    """No image used to calibrate the identity threshold was seen by the estimators."""
    seen = {}
    train_classifier = eval_workflow.train_identity_classifier
    train_regressor = eval_workflow.train_landmark_regressor
    distances = eval_workflow.genuine_impostor_distances

    def classifier(images, ids, **kwargs):
        seen["fit"] = images
        return train_classifier(images, ids, steps=2, seed=kwargs.get("seed", 0))

    def regressor(images, landmarks, resolution, **kwargs):
        return train_regressor(images, landmarks, resolution, steps=2)

    def calibration_distances(samples, embedder, **kwargs):
        seen["calibration"] = samples
        return distances(samples, embedder, **kwargs)

    monkeypatch.setattr(eval_workflow, "train_identity_classifier", classifier)
    monkeypatch.setattr(eval_workflow, "train_landmark_regressor", regressor)
    monkeypatch.setattr(eval_workflow, "genuine_impostor_distances", calibration_distances)

    toolkit = build_toolkit(desk32, toy_manifest, tmp_path, toy_samples)
    assert toolkit.fit_count + toolkit.calibration_count == len(toy_samples)
    assert toolkit.calibration_count == len(seen["calibration"])
    for sample in seen["calibration"]:
        assert not any(torch.equal(sample.image, image) for image in seen["fit"])
    assert toolkit.threshold >= 0.0


def _seed_frame():
    return pd.DataFrame({
        "variant": ["full", "full", "full", "no_concat", "no_concat", "no_concat"],
        "run": [0, 1, 2, 0, 1, 2],
        "seed": [0, 1, 2, 0, 1, np.nan],
        "id_accuracy": [80.0, 90.0, 60.0, 40.0, 50.0, np.nan],
    })


def test_table2_summary_reports_each_run_and_median():
    summary = table2_summary(_seed_frame())
    assert list(summary.index) == ["full", "no_concat"]
    assert list(summary.columns) == ["run_0", "run_1", "run_2", "median_id_accuracy"]
    assert summary.loc["full", "median_id_accuracy"] == 80.0
    assert summary.loc["no_concat", "median_id_accuracy"] == 45.0
    assert np.isnan(summary.loc["no_concat", "run_2"])
    text = format_table2(_seed_frame())
    assert "absent" in text and "median_id_accuracy" in text


def test_run_table2_missing_checkpoints(desk32, toy_manifest, tmp_path):
    """Missing per-seed checkpoints give absent rows but the report is still written."""
    variants = {"full": [tmp_path / "s0.pt", tmp_path / "s1.pt"], "no_concat": [tmp_path / "c0.pt"]}
    frame = run_table2(variants, toy_manifest, out_dir=tmp_path, config=desk32)
    assert list(frame["variant"]) == ["full", "full", "no_concat"]
    assert list(frame["run"]) == [0, 1, 0]
    assert frame["id_accuracy"].isna().all()
    assert pd.read_csv(tmp_path / "report_table2.csv").shape[0] == 3
    assert "absent" in (tmp_path / "report_table2.txt").read_text()
    with pytest.raises(EvalError):
        run_table2(variants, toy_manifest, out_dir=tmp_path)


class _RecordingBackend:
    """Constant image-driven shape network that remembers what it was given"""

    name = "recording"

    def __init__(self):
        network = torch.nn.Sequential(torch.nn.Conv2d(3, 15, kernel_size=1), torch.nn.Sigmoid())
        torch.nn.init.zeros_(network[0].weight)
        torch.nn.init.zeros_(network[0].bias)
        self.inner = get_shape_backend("external_model", 32, module=network)
        self.seen = []

    def parameters(self):
        return self.inner.parameters()

    def __call__(self, item):
        self.seen.append(item.image)
        return self.inner(item)


def test_reenact_faces_uses_the_state_backend(desk32, toy_samples):
    """Inference guides go through the state's backend, which sees the guide images."""
    backend = _RecordingBackend()
    references = torch.stack([s.image for s in toy_samples[:2]])
    reference_landmarks = [s.landmarks for s in toy_samples[:2]]
    guides = toy_samples[4:6]
    guide_landmarks = [g.landmarks for g in guides]

    state = build_state(desk32, shape_backend=backend)
    external = reenact_faces(state, references, reference_landmarks, guide_landmarks, use_fusion=False,
                             guide_images=[g.image for g in guides])
    assert len(backend.seen) == 2
    assert all(torch.equal(seen, g.image) for seen, g in zip(backend.seen, guides))

    rasterized = reenact_faces(build_state(desk32), references, reference_landmarks, guide_landmarks, use_fusion=False)
    assert external.shape == rasterized.shape == (2, 3, 32, 32)
    assert not torch.allclose(external, rasterized)
    with pytest.raises(DataError):
        reenact_faces(state, references, reference_landmarks, guide_landmarks, use_fusion=False)


@pytest.mark.slow
def test_toy_end_to_end_table(trained_toy_run, tmp_path):
    """After a desk-scale run the full model keeps pose, identity and expression on toy faces."""
    _, manifest, _, run_dir = trained_toy_run
    _, frame = run_table({"full": latest_checkpoint(run_dir)}, manifest, "table1", tmp_path)
    cell = frame.set_index(["variant", "group"])
    assert cell.loc[("full", "same-source"), "pose_mae_degrees"] < 2.0
    assert cell.loc[("full", "toy"), "id_accuracy"] > 90.0
    floor = cell.loc[("reference", "cross-source"), "au_consistency"]
    assert cell.loc[("full", "cross-source"), "au_consistency"] > floor


@pytest.mark.slow
def test_concatenation_helps_identity_across_seeds(trained_toy_run, tmp_path):
    """Over three training seeds the full model's median Id% is at least the no-concat median."""
    import copy

    from training_workflow import train

    config, manifest, _, _ = trained_toy_run
    variants = {"full": [], "no_concat": []}
    for seed in range(3):
        for name, use_concat in (("full", True), ("no_concat", False)):
            run = copy.deepcopy(config)
            run.optim.seed = seed
            run.optim.max_steps = 800
            run.fusion.enabled = False
            run.model.use_concat = use_concat
            run_dir = tmp_path / f"{name}_{seed}"
            train(run, manifest, run_dir, progress=False)
            variants[name].append(latest_checkpoint(run_dir))
    summary = table2_summary(run_table2(variants, manifest, tmp_path / "eval"))
    assert summary.loc["full", "median_id_accuracy"] >= summary.loc["no_concat", "median_id_accuracy"]

"""Evaluation: pose consistency, proxy AU consistency, identity accuracy and report tables."""

from dataclasses import asdict, dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np
import pandas as pd
import torch
from sklearn.metrics import roc_curve

from action_log import log_action, log_warning
from face_dataset_workflow import load_samples, read_manifest
from fusion_workflow import fuse, landmark_warp_batch
from landmark_layout import LandmarkSet
from parsing_workflow import encode_guides
from reenact_losses import embed, get_id_embedder
from reenactor_errors import EvalError, ReenactorError
from synthetic_faces import EXPRESSION_RANGES, ExpressionParams, IdentityParams, canonical_template_3d, face_landmarks
from toy_estimators import (
    load_estimator,
    predict_landmarks,
    save_estimator,
    train_identity_classifier,
    train_landmark_regressor,
)
from training_workflow import load_checkpoint, shape_backend_for

GROUPS = ("same-source", "cross-source", "in-the-wild", "toy")
AU_NAMES = tuple(EXPRESSION_RANGES)
ESTIMATOR_DIR = "estimators"


@dataclass
class EvalPair:
    generated: torch.Tensor
    reference: torch.Tensor
    identity_id: int
    source_image: torch.Tensor = None
    source_landmarks: LandmarkSet = None
    source_parsing: torch.Tensor = None
    group: str = "toy"


@dataclass
class MetricResult:
    value: float
    evaluated: int
    excluded: int = 0


@dataclass
class EvalReport:
    au_consistency: float
    pose_mae_degrees: float
    id_accuracy: float
    group: str
    variant: str = "full"
    coverage: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("au_consistency", "id_accuracy"):
            value = getattr(self, name)
            if not np.isnan(value) and not 0.0 <= value <= 100.0:
                raise EvalError(f"{name} must be a percentage, got {value}")
        if not np.isnan(self.pose_mae_degrees) and self.pose_mae_degrees < 0:
            raise EvalError("Pose MAE cannot be negative")

    def to_row(self):
        row = {k: v for k, v in asdict(self).items() if k != "coverage"}
        row.update({f"{k}_coverage": v for k, v in self.coverage.items()})
        return row


# Head pose


def solve_head_pose(points_2d, template_3d):
    """Yaw, pitch, roll (degrees) of a scaled-orthographic camera, R = Rz(roll) Ry(yaw) Rx(pitch)"""
    points_2d = np.asarray(points_2d, dtype=np.float64)
    valid = np.isfinite(points_2d).all(axis=1)
    if valid.sum() < 6:
        raise EvalError(f"Pose solver needs at least 6 landmarks, got {int(valid.sum())}")
    x = points_2d[valid] - points_2d[valid].mean(axis=0)
    X = template_3d[valid] - template_3d[valid].mean(axis=0)
    affine = np.linalg.lstsq(X, x, rcond=None)[0].T  # (2, 3)
    u, s, vt = np.linalg.svd(affine, full_matrices=False)
    if s[-1] < 1e-9 * max(s[0], 1e-12):
        raise EvalError("Landmarks are degenerate for the pose solver")
    r12 = u @ vt
    rot = np.vstack([r12, np.cross(r12[0], r12[1])])

    sy = np.sqrt(rot[0, 0] ** 2 + rot[1, 0] ** 2)
    if sy > 1e-6:
        pitch = np.arctan2(rot[2, 1], rot[2, 2])
        yaw = np.arctan2(-rot[2, 0], sy)
        roll = np.arctan2(rot[1, 0], rot[0, 0])
    else:
        pitch = np.arctan2(-rot[1, 2], rot[1, 1])
        yaw = np.arctan2(-rot[2, 0], sy)
        roll = 0.0
    return tuple(float(v) for v in np.degrees([yaw, pitch, roll]))


class ImageLandmarks:
    """Landmarks of an image (through the regressor) or of a landmark set as is"""

    def __init__(self, regressor, layout):
        self.regressor = regressor
        self.layout = layout

    def __call__(self, item):
        if isinstance(item, LandmarkSet):
            return item.points
        if self.regressor is None:
            raise EvalError("No landmark regressor to read landmarks from images")
        points = predict_landmarks(self.regressor, item.unsqueeze(0) if item.dim() == 3 else item)[0]
        if points.shape[0] != self.layout.n_points:
            raise EvalError(f"Regressor returned {points.shape[0]} landmarks, layout needs {self.layout.n_points}")
        return points


class LandmarkPoseEstimator:
    def __init__(self, landmarks_of, template_3d=None):
        self.landmarks_of = landmarks_of
        self.template_3d = canonical_template_3d(with_gaze=False) if template_3d is None else template_3d

    def __call__(self, item):
        points = self.landmarks_of(item)[: len(self.template_3d)]
        return solve_head_pose(points, self.template_3d)


def _source(pair):
    if pair.source_image is not None:
        return pair.source_image
    if pair.source_landmarks is not None:
        return pair.source_landmarks
    raise EvalError("Eval pair has neither a source image nor source landmarks")


def _angle_delta(a, b):
    return abs((a - b + 180.0) % 360.0 - 180.0)


def pose_consistency(pairs, pose_estimator):
    """Mean over pairs of mean(|d yaw|, |d pitch|, |d roll|), in degrees"""
    if not pairs:
        raise EvalError("pose_consistency needs at least one pair")
    errors, excluded = [], 0
    for pair in pairs:
        try:
            generated = pose_estimator(pair.generated)
            source = pose_estimator(_source(pair))
        except ReenactorError:
            excluded += 1
            continue
        errors.append(np.mean([_angle_delta(g, s) for g, s in zip(generated, source)]))
    if not errors:
        raise EvalError(f"Pose estimator failed on all {len(pairs)} pairs")
    if excluded:
        log_warning(f"Pose estimator failed on {excluded} of {len(pairs)} pairs; excluded")
    return MetricResult(float(np.mean(errors)), len(errors), excluded)


# Proxy action units


def proxy_au_features(points):
    """Scale-free landmark measurements, one per proxy AU"""
    p = np.asarray(points, dtype=np.float64)
    right_eye, left_eye = p[36:42].mean(axis=0), p[42:48].mean(axis=0)
    iod = np.linalg.norm(left_eye - right_eye)
    if not np.isfinite(iod) or iod < 1e-9:
        raise EvalError("Inter-ocular distance is degenerate")

    def eye_ratio(eye):
        width = np.linalg.norm(eye[3] - eye[0])
        return (np.linalg.norm(eye[1] - eye[5]) + np.linalg.norm(eye[2] - eye[4])) / (2.0 * width)

    brow_height = (np.linalg.norm(p[17:22].mean(axis=0) - right_eye) + np.linalg.norm(p[22:27].mean(axis=0) - left_eye)) / 2.0
    features = {
        "jaw_drop": np.linalg.norm(p[66] - p[62]) / iod,
        "eye_closure": (eye_ratio(p[36:42]) + eye_ratio(p[42:48])) / 2.0,
        "brow_raise": brow_height / iod,
        "lip_stretch": np.linalg.norm(p[54] - p[48]) / iod,
    }
    if not all(np.isfinite(v) for v in features.values()):
        raise EvalError("Proxy AU features are not finite")
    return features


# eye_closure shrinks the measured eye ratio; the others grow their measurement
AU_ACTIVE_BELOW = {"eye_closure"}


def calibrate_au_thresholds():
    """Feature value of each proxy AU halfway between its inactive and active ranges"""
    thresholds = {}
    for name, top in EXPRESSION_RANGES.items():
        landmarks = face_landmarks(IdentityParams(), ExpressionParams(**{name: 0.5 * top}), layout_name="ibug68")
        thresholds[name] = proxy_au_features(landmarks.points)[name]
    return thresholds


class ProxyAUEstimator:
    def __init__(self, landmarks_of, thresholds=None):
        self.landmarks_of = landmarks_of
        self.thresholds = thresholds or calibrate_au_thresholds()

    def __call__(self, item):
        features = proxy_au_features(self.landmarks_of(item))
        return {
            name: bool(features[name] < t) if name in AU_ACTIVE_BELOW else bool(features[name] > t)
            for name, t in self.thresholds.items()
        }


def au_consistency(pairs, au_estimator):
    """Percent of (pair, AU) activations that agree between output and source"""
    if not pairs:
        raise EvalError("au_consistency needs at least one pair")
    agreements, evaluated, excluded = [], 0, 0
    for pair in pairs:
        try:
            generated = au_estimator(pair.generated)
            source = au_estimator(_source(pair))
        except ReenactorError:
            excluded += 1
            continue
        evaluated += 1
        agreements.extend(generated[name] == source[name] for name in source)
    if not evaluated:
        raise EvalError(f"AU estimator failed on all {len(pairs)} pairs")
    return MetricResult(100.0 * float(np.mean(agreements)), evaluated, excluded)


# Identity


def embedding_distances(embedder, a, b):
    with torch.no_grad():
        return (embed(embedder, a) - embed(embedder, b)).norm(dim=1).cpu().numpy()


def calibrate_identity_threshold(genuine, impostor, far=0.01):
    """Largest distance threshold whose impostor acceptance rate is <= far"""
    genuine = np.asarray(genuine, dtype=np.float64)
    impostor = np.asarray(impostor, dtype=np.float64)
    if genuine.size == 0 or impostor.size == 0:
        raise EvalError("Threshold calibration needs both genuine and impostor distances")
    labels = np.concatenate([np.ones(genuine.size), np.zeros(impostor.size)])
    scores = -np.concatenate([genuine, impostor])
    fpr, tpr, thresholds = roc_curve(labels, scores)
    allowed = np.flatnonzero(fpr <= far)
    best = allowed[np.argmax(tpr[allowed])]
    # identical images (distance 0) are always accepted
    threshold = max(float(-thresholds[best]), 0.0)
    log_action(f"Identity threshold {threshold:.4f} at impostor rate {fpr[best]:.4f} (genuine acceptance {tpr[best]:.4f})")
    return threshold


def genuine_impostor_distances(samples, embedder, max_pairs=2000, seed=0):
    """Distances between real images: same identity (genuine) and different (impostor)"""
    images = torch.stack([s.image for s in samples])
    ids = np.array([s.identity_id for s in samples])
    with torch.no_grad():
        embeddings = embed(embedder, images)
    pairs = list(combinations(range(len(samples)), 2))
    rng = np.random.default_rng(seed)
    if len(pairs) > max_pairs:
        pairs = [pairs[i] for i in sorted(rng.choice(len(pairs), max_pairs, replace=False))]
    genuine, impostor = [], []
    for i, j in pairs:
        d = float((embeddings[i] - embeddings[j]).norm())
        (genuine if ids[i] == ids[j] else impostor).append(d)
    return np.array(genuine), np.array(impostor)


def identity_accuracy(pairs, embedder, threshold):
    """Percent of pairs whose output-reference embedding distance is <= threshold"""
    if threshold is None or not np.isfinite(threshold):
        raise EvalError("Identity threshold is not calibrated; run calibrate_identity_threshold first")
    if not pairs:
        raise EvalError("identity_accuracy needs at least one pair")
    generated = torch.stack([p.generated for p in pairs])
    reference = torch.stack([p.reference for p in pairs])
    distances = embedding_distances(embedder, generated, reference)
    return MetricResult(100.0 * float(np.mean(distances <= threshold)), len(pairs), 0)


# Generation and pair building


def reenact_faces(state, references, reference_landmarks, guide_landmarks, use_fusion=True, guide_images=None):
    """Outputs (N, 3, H, W) for references driven by the guides, encoded by the state's shape backend"""
    config = state.config
    backend = state.shape_backend if state.shape_backend is not None else shape_backend_for(config)
    parsing = encode_guides(backend, guide_landmarks, guide_images)
    for module in (state.appearance, state.decoder, state.fusion_net):
        module.eval()
    with torch.no_grad():
        _, pyramid = state.appearance(references)
        synthesized = state.decoder(pyramid, parsing)
        if not use_fusion or not config.fusion.enabled:
            return synthesized
        warped = landmark_warp_batch(references, reference_landmarks, guide_landmarks, config.fusion.warp_mode)
        fused, _ = fuse(synthesized, warped, parsing, state.fusion_net)
    return fused


def _references_per_identity(samples):
    """The first sample of every identity is its one-shot reference"""
    references = {}
    for sample in samples:
        references.setdefault(sample.identity_id, sample)
    return references


def build_eval_pairs(state, test_samples, guide_pool, group, use_fusion=True, guides_per_reference=4, seed=0):
    """Pairs for one evaluation group.

    same-source: guides are other images of the reference identity;
    cross-source / in-the-wild: guides come from other identities in guide_pool;
    toy: both.
    """
    rng = np.random.default_rng(seed)
    references, guides = [], []
    for identity, reference in sorted(_references_per_identity(test_samples).items()):
        own = [s for s in test_samples if s.identity_id == identity and s is not reference]
        other = [s for s in guide_pool if s.identity_id != identity]
        if group == "same-source":
            candidates = own
        elif group in ("cross-source", "in-the-wild"):
            candidates = other
        elif group == "toy":
            candidates = own + other
        else:
            raise EvalError(f"Unknown evaluation group '{group}'")
        if not candidates:
            continue
        picks = rng.choice(len(candidates), size=min(guides_per_reference, len(candidates)), replace=False)
        for i in sorted(picks):
            references.append(reference)
            guides.append(candidates[i])
    if not references:
        raise EvalError(f"No evaluation pairs for group '{group}'")

    if state is None:
        outputs = torch.stack([r.image for r in references])
    else:
        outputs = reenact_faces(state, torch.stack([r.image for r in references]),
                                [r.landmarks for r in references], [g.landmarks for g in guides], use_fusion,
                                [g.image for g in guides])
    return [
        EvalPair(out, r.image, r.identity_id, g.image, g.landmarks, None, group)
        for out, r, g in zip(outputs, references, guides)
    ]


@dataclass
class EvalToolkit:
    pose_estimator: object
    au_estimator: object
    embedder: object
    threshold: float
    fit_count: int = 0
    calibration_count: int = 0


def split_estimator_samples(samples, calibration_fraction=0.5, seed=0):
    """Split images into an estimator-fitting set and a held-out calibration set.

    Identities with at least 3 images give at least 2 to calibration (so genuine
    pairs exist) and keep at least 1 for fitting; smaller identities only fit.
    """
    rng = np.random.default_rng(seed)
    by_identity = {}
    for sample in samples:
        by_identity.setdefault(sample.identity_id, []).append(sample)
    fit, calibration = [], []
    for identity in sorted(by_identity):
        group = by_identity[identity]
        n = len(group)
        n_held = 0 if n < 3 else min(n - 1, max(2, int(round(calibration_fraction * n))))
        order = rng.permutation(n)
        held = set(order[:n_held].tolist())
        for i, sample in enumerate(group):
            (calibration if i in held else fit).append(sample)
    if not calibration:
        raise EvalError("No identity has enough images to hold out a calibration set")
    return fit, calibration


def build_toolkit(config, manifest, run_dir, samples=None):
    """Train (or load) the toy estimators and calibrate the identity threshold on held-out images"""
    run_dir = Path(run_dir)
    samples = samples if samples is not None else load_samples(manifest, None, config.data.resolution)
    seed = config.eval.seed
    fit, calibration = split_estimator_samples(samples, config.eval.calibration_fraction, seed)
    images = torch.stack([s.image for s in fit])

    regressor_path = Path(config.eval.landmark_regressor_path or run_dir / ESTIMATOR_DIR / "landmark_regressor.pt")
    if regressor_path.exists():
        regressor = load_estimator(regressor_path)
    else:
        regressor = train_landmark_regressor(images, np.stack([s.landmarks.points for s in fit]),
                                             config.data.resolution, seed=seed)
        save_estimator(regressor, regressor_path)

    embedder_path = Path(config.eval.toy_embedder_path or run_dir / ESTIMATOR_DIR / "identity_classifier.pt")
    if embedder_path.exists():
        classifier = load_estimator(embedder_path)
    else:
        ids = torch.tensor([s.identity_id for s in fit])
        classifier = train_identity_classifier(images, ids, seed=seed)
        save_estimator(classifier, embedder_path)
    embedder = get_id_embedder("toy_classifier", classifier=classifier)

    genuine, impostor = genuine_impostor_distances(calibration, embedder, seed=seed)
    threshold = calibrate_identity_threshold(genuine, impostor, config.eval.identity_far)
    log_action(f"Estimators fitted on {len(fit)} images; threshold calibrated on {len(calibration)} held-out images")

    landmarks_of = ImageLandmarks(regressor, manifest.layout)
    return EvalToolkit(LandmarkPoseEstimator(landmarks_of), ProxyAUEstimator(landmarks_of), embedder, threshold,
                       len(fit), len(calibration))


def evaluate_pairs(pairs, toolkit, group, variant):
    au = au_consistency(pairs, toolkit.au_estimator)
    pose = pose_consistency(pairs, toolkit.pose_estimator)
    ident = identity_accuracy(pairs, toolkit.embedder, toolkit.threshold)
    coverage = {"pairs": len(pairs), "au_excluded": au.excluded, "pose_excluded": pose.excluded}
    return EvalReport(au.value, pose.value, ident.value, group, variant, coverage)


def absent_report(group, variant):
    return EvalReport(np.nan, np.nan, np.nan, group, variant, {"pairs": 0, "status": "absent"})


# Tables


def _table1_variants(checkpoints):
    full = checkpoints.get("full")
    return [
        ("reference", None, False),
        ("full", full, True),
        ("no_fusion", full, False),
        ("no_concat", checkpoints.get("no_concat"), True),
    ]


def _variants_for(mode, checkpoints):
    if mode == "table1":
        return _table1_variants(checkpoints)
    if mode in ("lambda_sweep", "k_shot"):
        return [(name, path, True) for name, path in checkpoints.items()]
    raise EvalError(f"Unknown report mode '{mode}'")


def _load_variant(path, cache):
    if path is None or not Path(path).exists():
        return None
    key = str(Path(path).resolve())
    if key not in cache:
        cache[key] = load_checkpoint(path)
    return cache[key]


def _prepare_tables(paths, manifest, out_dir, config, cache):
    if isinstance(manifest, (str, Path)):
        manifest = read_manifest(manifest)
    if config is None:
        loaded = [_load_variant(p, cache) for p in paths if p]
        loaded = [s for s in loaded if s is not None]
        if not loaded:
            raise EvalError("No checkpoint could be loaded; nothing to evaluate")
        config = loaded[0].config
    out_dir = Path(out_dir) if out_dir else Path(".")
    all_samples = load_samples(manifest, None, config.data.resolution)
    test_samples = [s for s, split in zip(all_samples, manifest.frame["split"]) if split == "test"]
    if not test_samples:
        raise EvalError("The manifest has no test samples")
    toolkit = build_toolkit(config, manifest, out_dir, all_samples)
    return config, out_dir, all_samples, test_samples, toolkit


def run_table(checkpoints, manifest, mode="table1", out_dir=None, config=None, wild_manifest=None):
    """Evaluate every (variant, group) cell; missing checkpoints give absent rows"""
    cache = {}
    config, out_dir, all_samples, test_samples, toolkit = _prepare_tables(
        checkpoints.values(), manifest, out_dir, config, cache)
    resolution = config.data.resolution

    groups = ["same-source", "cross-source", "toy"] if mode == "table1" else ["toy"]
    guide_pools = {"same-source": test_samples, "cross-source": all_samples, "toy": all_samples}
    if wild_manifest is not None and mode == "table1":
        wild = read_manifest(wild_manifest) if isinstance(wild_manifest, (str, Path)) else wild_manifest
        guide_pools["in-the-wild"] = load_samples(wild, None, resolution)
        groups.insert(2, "in-the-wild")

    reports = []
    for variant, path, use_fusion in _variants_for(mode, checkpoints):
        state = None
        if variant != "reference":
            state = _load_variant(path, cache)
            if state is None:
                log_warning(f"Checkpoint for variant '{variant}' is missing; cells marked absent")
                reports.extend(absent_report(g, variant) for g in groups)
                continue
        for group in groups:
            try:
                pairs = build_eval_pairs(state, test_samples, guide_pools[group], group, use_fusion,
                                         config.eval.guides_per_reference, config.eval.seed)
                reports.append(evaluate_pairs(pairs, toolkit, group, variant))
            except EvalError as e:
                log_warning(f"{variant}/{group}: {e}")
                reports.append(absent_report(group, variant))
    frame = report_frame(reports)
    write_report(frame, out_dir, mode)
    return reports, frame


def report_frame(reports):
    frame = pd.DataFrame([r.to_row() for r in reports])
    columns = ["variant", "group", "au_consistency", "pose_mae_degrees", "id_accuracy"]
    return frame[columns + [c for c in frame.columns if c not in columns]]


def format_table(frame):
    """Variants as rows, one AU % / Pose / Id% column triple per group"""
    table = frame.pivot(index="variant", columns="group", values=["au_consistency", "pose_mae_degrees", "id_accuracy"])
    table = table.reindex(frame["variant"].unique())
    table = table.rename(columns={"au_consistency": "AU%", "pose_mae_degrees": "Pose", "id_accuracy": "Id%"})
    table = table.swaplevel(axis=1).sort_index(axis=1, level=0, sort_remaining=False)
    return table.to_string(float_format=lambda v: f"{v:.2f}", na_rep="absent")


def write_report(frame, out_dir, mode):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    frame.to_csv(out_dir / f"report_{mode}.csv", index=False)
    (out_dir / f"report_{mode}.txt").write_text(format_table(frame) + "\n")
    log_action(f"Report written to {out_dir / f'report_{mode}.csv'}")
    return out_dir / f"report_{mode}.csv"


# Seed robustness


def run_table2(variants, manifest, out_dir=None, config=None):
    """Id% per training seed for each variant; variants maps a name to one checkpoint per seed"""
    cache = {}
    paths = [p for runs in variants.values() for p in runs]
    config, out_dir, all_samples, test_samples, toolkit = _prepare_tables(paths, manifest, out_dir, config, cache)

    rows = []
    for variant, runs in variants.items():
        for run, path in enumerate(runs):
            row = {"variant": variant, "run": run, "seed": np.nan, "id_accuracy": np.nan,
                   "au_consistency": np.nan, "pose_mae_degrees": np.nan, "checkpoint": str(path)}
            state = _load_variant(path, cache)
            if state is None:
                log_warning(f"Checkpoint {path} for '{variant}' run {run} is missing; marked absent")
                rows.append(row)
                continue
            row["seed"] = state.config.optim.seed
            try:
                pairs = build_eval_pairs(state, test_samples, all_samples, "toy", True,
                                         config.eval.guides_per_reference, config.eval.seed)
                report = evaluate_pairs(pairs, toolkit, "toy", variant)
                row.update(id_accuracy=report.id_accuracy, au_consistency=report.au_consistency,
                           pose_mae_degrees=report.pose_mae_degrees)
            except EvalError as e:
                log_warning(f"{variant} run {run}: {e}")
            rows.append(row)
    frame = pd.DataFrame(rows)
    write_table2(frame, out_dir)
    return frame


def table2_summary(frame):
    """One row per variant: Id% of every run plus the median over present runs"""
    order = list(frame["variant"].unique())
    table = frame.pivot(index="variant", columns="run", values="id_accuracy").reindex(order)
    table.columns = [f"run_{c}" for c in table.columns]
    table["median_id_accuracy"] = frame.groupby("variant", sort=False)["id_accuracy"].median().reindex(order)
    return table


def format_table2(frame):
    return table2_summary(frame).to_string(float_format=lambda v: f"{v:.2f}", na_rep="absent")


def write_table2(frame, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    frame.to_csv(out_dir / "report_table2.csv", index=False)
    (out_dir / "report_table2.txt").write_text(format_table2(frame) + "\n")
    log_action(f"Report written to {out_dir / 'report_table2.csv'}")
    return out_dir / "report_table2.csv"

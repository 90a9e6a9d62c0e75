"""Face dataset workflow: alignment, manifests and training batches.

On-disk layout: root/<identity>/<name>.png with a landmark file
root/<identity>/<name>.txt next to every image.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
import pandas as pd
import torch
from PIL import Image
from sklearn.model_selection import GroupShuffleSplit

from action_log import log_action, log_warning
from landmark_layout import CONTOUR_GROUP, LandmarkSet, get_layout, read_landmarks, same_layout, write_landmarks
from parsing_workflow import LandmarkRasterizer, ShapeInput, shape_encode
from reenactor_errors import AlignmentError, ConfigError, ContractError, DataError

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
MANIFEST_FILE = "manifest.jsonl"
REJECTS_FILE = "rejects.csv"
MEAN_SHAPE_FILE = "mean_shape.txt"
META_FILE = "manifest_meta.json"


@dataclass
class Sample:
    image: torch.Tensor  # (3, H, W) in [-1, 1]
    landmarks: LandmarkSet
    identity_id: int
    meta: dict = field(default_factory=dict)


@dataclass
class ReenactBatch:
    reference: torch.Tensor
    guide_parsing: torch.Tensor
    ground_truth: torch.Tensor
    guide_landmarks: list = field(default_factory=list)
    reference_landmarks: list = field(default_factory=list)
    identity_ids: torch.Tensor = None
    swapped: list = field(default_factory=list)

    def __post_init__(self):
        n = self.reference.shape[0]
        if self.guide_parsing.shape[0] != n or self.ground_truth.shape[0] != n:
            raise ContractError("Batch tensors must share the batch dimension")
        if self.guide_parsing.shape[-2:] != self.reference.shape[-2:]:
            raise ContractError("Guide parsing must match the image spatial size")
        if n < 1:
            raise ContractError("Batch must hold at least one sample")

    @property
    def batch_size(self):
        return self.reference.shape[0]


@dataclass
class Manifest:
    frame: pd.DataFrame
    rejects: pd.DataFrame
    root: Path
    layout_name: str
    resolution: int = None
    mean_shape: LandmarkSet = None

    def split(self, name):
        return self.frame[self.frame["split"] == name].reset_index(drop=True)

    @property
    def layout(self):
        return get_layout(self.layout_name)


# Image helpers


def image_to_tensor(image):
    """HxWx3 uint8 (or 0..255 float) array -> (3, H, W) tensor in [-1, 1]"""
    array = np.asarray(image, dtype=np.float32)
    if array.ndim != 3 or array.shape[2] != 3:
        raise DataError(f"Expected an HxWx3 RGB image, got shape {array.shape}")
    return torch.from_numpy(np.ascontiguousarray(array.transpose(2, 0, 1)) / 127.5 - 1.0)


def tensor_to_image(tensor):
    """(3, H, W) tensor in [-1, 1] -> HxWx3 uint8"""
    array = (tensor.detach().cpu().clamp(-1, 1).numpy().transpose(1, 2, 0) + 1.0) * 127.5
    return np.round(array).astype(np.uint8)


def load_image(path):
    try:
        with Image.open(path) as img:
            return np.array(img.convert("RGB"))
    except OSError as e:
        raise DataError(f"Could not read image {path}: {e}") from e


def save_image(tensor, path):
    Image.fromarray(tensor_to_image(tensor)).save(path)
    return path


def check_face_image(tensor, resolution):
    """FaceImage contract: (3, res, res), finite, within [-1, 1]"""
    if tuple(tensor.shape[-3:]) != (3, resolution, resolution):
        raise ContractError(f"Face image must be (3, {resolution}, {resolution}), got {tuple(tensor.shape)}")
    if not torch.isfinite(tensor).all() or tensor.min() < -1 or tensor.max() > 1:
        raise ContractError("Face image values must be finite and lie in [-1, 1]")
    return tensor


# Alignment


def fit_similarity(src, dst):
    """Least-squares similarity (rotation, uniform scale, translation) src -> dst.

    Returns the 2x3 matrix M with dst ~ M @ [src, 1].
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if len(src) < 3:
        raise AlignmentError(f"Need at least 3 landmarks to align, got {len(src)}")
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    s, d = src - mu_s, dst - mu_d
    spread = np.linalg.svd(s, compute_uv=False)
    if spread[-1] <= 1e-9 * max(spread[0], 1e-12):
        raise AlignmentError("Landmarks are collinear or coincident; similarity fit is rank deficient")
    cov = d.T @ s / len(src)
    u, sigma, vt = np.linalg.svd(cov)
    flip = np.sign(np.linalg.det(u) * np.linalg.det(vt))
    e = np.diag([1.0, flip if flip != 0 else 1.0])
    rot = u @ e @ vt
    scale = np.trace(np.diag(sigma) @ e) / (s ** 2).sum(axis=1).mean()
    trans = mu_d - scale * rot @ mu_s
    return np.hstack([scale * rot, trans[:, None]])


def apply_transform(matrix, points):
    return points @ matrix[:, :2].T + matrix[:, 2]


def align_face(image, landmarks, mean_shape, resolution, identity_id=0):
    """Rigidly align a face onto the mean shape and crop to resolution x resolution"""
    if resolution < 16 or resolution & (resolution - 1) != 0:
        raise ConfigError(f"resolution must be a power of two >= 16, got {resolution}")
    if not same_layout(landmarks, mean_shape):
        raise DataError(f"Landmark layout '{landmarks.layout.name}' differs from mean shape layout '{mean_shape.layout.name}'")
    image = np.asarray(image)
    h, w = image.shape[:2]
    src_all = landmarks.points * np.array([w, h], dtype=np.float64)
    usable = landmarks.valid_mask & mean_shape.valid_mask
    matrix = fit_similarity(src_all[usable], mean_shape.points[usable] * resolution)

    warped = cv2.warpAffine(image.astype(np.float32), matrix, (resolution, resolution),
                            flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REPLICATE)

    # Does the crop reach outside the source image?
    inverse = cv2.invertAffineTransform(matrix)
    corners = np.array([[0, 0], [resolution - 1, 0], [0, resolution - 1], [resolution - 1, resolution - 1]], dtype=np.float64)
    back = apply_transform(inverse, corners)
    padded = bool((back[:, 0] < -0.5).any() or (back[:, 0] > w - 0.5).any()
                  or (back[:, 1] < -0.5).any() or (back[:, 1] > h - 0.5).any())

    aligned = apply_transform(matrix, src_all) / resolution
    clipped = bool(np.nanmin(aligned) < 0.0 or np.nanmax(aligned) > 1.0)
    if clipped:
        aligned = np.clip(aligned, 0.0, 1.0)
    if padded:
        log_warning("Aligned crop reaches outside the source image; padded by edge replication")

    meta = {"padded": padded, "landmarks_clipped": clipped, "transform": matrix.tolist()}
    tensor = image_to_tensor(np.clip(warped, 0, 255))
    return Sample(tensor, LandmarkSet(aligned, landmarks.layout), int(identity_id), meta)


def compute_mean_shape(landmark_sets, iterations=10):
    """Generalized Procrustes mean of complete landmark sets, placed in the image frame"""
    complete = [lm for lm in landmark_sets if lm.valid_mask.all()]
    if not complete:
        raise DataError("No complete landmark sets to compute a mean shape from")
    layout = complete[0].layout
    shapes = np.stack([lm.points for lm in complete])
    centroids = shapes.mean(axis=1)
    centered = shapes - centroids[:, None, :]
    radii = np.sqrt((centered ** 2).sum(axis=2).mean(axis=1))
    unit = centered / radii[:, None, None]

    mean = unit[0].copy()
    for _ in range(iterations):
        aligned = []
        for shape in unit:
            u, _, vt = np.linalg.svd(mean.T @ shape)
            rot = u @ vt
            if np.linalg.det(rot) < 0:
                u[:, -1] *= -1
                rot = u @ vt
            aligned.append(shape @ rot.T)
        new_mean = np.mean(aligned, axis=0)
        new_mean -= new_mean.mean(axis=0)
        new_mean /= np.sqrt((new_mean ** 2).sum(axis=1).mean())
        # keep the orientation of the first shape
        u, _, vt = np.linalg.svd(unit[0].T @ new_mean)
        new_mean = new_mean @ (u @ vt).T
        if np.abs(new_mean - mean).max() < 1e-10:
            mean = new_mean
            break
        mean = new_mean

    placed = mean * radii.mean() + centroids.mean(axis=0)
    return LandmarkSet(placed, layout)


# Manifest


def _scan_root(root, layout):
    records, rejects = [], []
    images = sorted(p for p in root.rglob("*") if p.suffix.lower() in IMAGE_SUFFIXES)
    for image_path in images:
        rel = image_path.relative_to(root)
        if len(rel.parts) < 2:
            rejects.append({"path": rel.as_posix(), "reason": "image is not inside an identity folder"})
            continue
        landmark_path = image_path.with_suffix(".txt")
        if not landmark_path.exists():
            rejects.append({"path": rel.as_posix(), "reason": "missing landmark file"})
            continue
        try:
            read_landmarks(landmark_path, layout).validate()
        except DataError as e:
            rejects.append({"path": rel.as_posix(), "reason": f"bad landmark file: {e}"})
            continue
        records.append({
            "path": rel.as_posix(),
            "landmarks": landmark_path.relative_to(root).as_posix(),
            "identity": rel.parts[0],
        })
    return images, records, rejects


def build_manifest(root, split_ratio=0.8, seed=0, layout_name="ibug68_gaze"):
    """Scan a dataset root and make a seeded identity-disjoint train/test split"""
    root = Path(root)
    layout = get_layout(layout_name)
    if not root.is_dir():
        raise DataError(f"Dataset root {root} does not exist")
    images, records, rejects = _scan_root(root, layout)
    if not images:
        raise DataError(f"No images found under {root}")
    rejects_frame = pd.DataFrame(rejects, columns=["path", "reason"])
    if len(rejects_frame):
        log_warning(f"{len(rejects_frame)} images rejected while building the manifest")
    if not records:
        raise DataError(f"No usable images under {root}; see the rejects report")

    frame = pd.DataFrame(records).sort_values("path").reset_index(drop=True)
    identities = sorted(frame["identity"].unique())
    if len(identities) < 2:
        raise DataError("At least two identities are needed for an identity-disjoint split")
    frame["identity_id"] = frame["identity"].map({name: i for i, name in enumerate(identities)})

    splitter = GroupShuffleSplit(n_splits=1, train_size=split_ratio, random_state=seed)
    train_idx, _ = next(splitter.split(frame, groups=frame["identity_id"]))
    frame["split"] = "test"
    frame.loc[train_idx, "split"] = "train"

    first = load_image(root / frame.loc[0, "path"])
    resolution = int(first.shape[0]) if first.shape[0] == first.shape[1] else None
    train_landmarks = [read_landmarks(root / p, layout) for p in frame.loc[frame["split"] == "train", "landmarks"]]
    mean_shape = compute_mean_shape(train_landmarks)

    n_train = frame.loc[frame["split"] == "train", "identity"].nunique()
    log_action(f"Manifest built: {len(frame)} images, {len(identities)} identities ({n_train} train / {len(identities) - n_train} test)")
    return Manifest(frame, rejects_frame, root, layout_name, resolution, mean_shape)


def write_manifest(manifest, out_dir):
    """Persist manifest (JSON lines), rejects report, mean shape and metadata"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    columns = ["path", "landmarks", "identity", "identity_id", "split"]
    (out_dir / MANIFEST_FILE).write_text(manifest.frame[columns].to_json(orient="records", lines=True))
    manifest.rejects.to_csv(out_dir / REJECTS_FILE, index=False)
    write_landmarks(out_dir / MEAN_SHAPE_FILE, manifest.mean_shape)
    meta = {"root": str(Path(manifest.root).resolve()), "layout": manifest.layout_name, "resolution": manifest.resolution}
    (out_dir / META_FILE).write_text(json.dumps(meta, indent=2, sort_keys=True))
    return out_dir / MANIFEST_FILE


def read_manifest(manifest_dir):
    manifest_dir = Path(manifest_dir)
    path = manifest_dir / MANIFEST_FILE
    if not path.exists():
        raise DataError(f"No manifest at {path}; run the prepare step first")
    meta = json.loads((manifest_dir / META_FILE).read_text())
    frame = pd.read_json(path, orient="records", lines=True)
    if frame.empty:
        raise DataError(f"Manifest {path} is empty")
    rejects_path = manifest_dir / REJECTS_FILE
    rejects = pd.read_csv(rejects_path) if rejects_path.exists() and rejects_path.stat().st_size else pd.DataFrame(columns=["path", "reason"])
    layout = get_layout(meta["layout"])
    mean_shape = read_landmarks(manifest_dir / MEAN_SHAPE_FILE, layout)
    return Manifest(frame, rejects, Path(meta["root"]), meta["layout"], meta.get("resolution"), mean_shape)


def load_samples(manifest, split=None, resolution=64, align=True):
    """Load (and align onto the manifest mean shape) every sample of a split"""
    rows = manifest.frame if split is None else manifest.split(split)
    layout = manifest.layout
    samples = []
    for row in rows.itertuples(index=False):
        image = load_image(manifest.root / row.path)
        landmarks = read_landmarks(manifest.root / row.landmarks, layout)
        if align:
            sample = align_face(image, landmarks, manifest.mean_shape, resolution, row.identity_id)
        else:
            resized = cv2.resize(image, (resolution, resolution), interpolation=cv2.INTER_AREA)
            sample = Sample(image_to_tensor(resized), landmarks, int(row.identity_id), {})
        sample.meta["path"] = row.path
        samples.append(sample)
    return samples


# Batches


def build_contour_pool(samples):
    """identity_id -> list of contour landmark arrays"""
    pool = {}
    for sample in samples:
        pool.setdefault(sample.identity_id, []).append(sample.landmarks.group(CONTOUR_GROUP).copy())
    return pool


def make_training_batch(samples, contour_pool, p_swap=0.5, rng_seed=0, resolution=64, stroke_sigma=None, use_gaze=False,
                        backend=None):
    """Self-reenactment batch with contour-resampled pose guides.

    The contour swap edits the landmarks before encoding, so it reaches
    landmark-driven backends; an image-driven backend encodes the sample image.
    """
    if backend is None:
        backend = LandmarkRasterizer(resolution, stroke_sigma, use_gaze)
    if len(contour_pool) < 2:
        raise DataError("Contour pool must hold contours of at least two identities")
    rng = np.random.default_rng(rng_seed)
    identities = sorted(contour_pool)
    parsings, guides, swapped = [], [], []
    for sample in samples:
        donors = [i for i in identities if i != sample.identity_id]
        if not donors:
            raise DataError(f"Contour pool has no identity other than {sample.identity_id}")
        # draw unconditionally so the stream does not depend on p_swap
        u = rng.random()
        donor = donors[rng.integers(len(donors))]
        contour = contour_pool[donor][rng.integers(len(contour_pool[donor]))]
        landmarks = sample.landmarks
        if u < p_swap:
            landmarks = landmarks.with_group(CONTOUR_GROUP, contour)
        parsings.append(shape_encode(ShapeInput(landmarks, sample.image), backend).channels)
        guides.append(landmarks)
        swapped.append(bool(u < p_swap))

    images = torch.stack([s.image for s in samples])
    return ReenactBatch(
        reference=images,
        guide_parsing=torch.stack(parsings),
        ground_truth=images.clone(),
        guide_landmarks=guides,
        reference_landmarks=[s.landmarks for s in samples],
        identity_ids=torch.tensor([s.identity_id for s in samples]),
        swapped=swapped,
    )


def make_pair_batch(references, targets, resolution=64, stroke_sigma=None, use_gaze=False, backend=None):
    """Reference of one image, pose guide and ground truth from another"""
    if backend is None:
        backend = LandmarkRasterizer(resolution, stroke_sigma, use_gaze)
    if len(references) != len(targets):
        raise DataError("References and targets must pair up one to one")
    parsings = [shape_encode(ShapeInput(t.landmarks, t.image), backend).channels for t in targets]
    return ReenactBatch(
        reference=torch.stack([r.image for r in references]),
        guide_parsing=torch.stack(parsings),
        ground_truth=torch.stack([t.image for t in targets]),
        guide_landmarks=[t.landmarks for t in targets],
        reference_landmarks=[r.landmarks for r in references],
        identity_ids=torch.tensor([r.identity_id for r in references]),
        swapped=[False] * len(references),
    )


def select_k_shot(samples, k, seed=0):
    """Keep k reference images per identity (deterministic given the seed)"""
    if k < 1:
        raise DataError("k must be >= 1")
    rng = np.random.default_rng(seed)
    by_identity = {}
    for sample in samples:
        by_identity.setdefault(sample.identity_id, []).append(sample)
    chosen = []
    for identity in sorted(by_identity):
        group = by_identity[identity]
        order = rng.permutation(len(group))[:k]
        chosen.extend(group[i] for i in sorted(order))
    return chosen

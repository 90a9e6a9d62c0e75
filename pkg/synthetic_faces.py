"""Parametric toy faces with known landmarks, head pose and expression.

Faces are built from a canonical 3D landmark template, deformed per identity
and expression, rotated (R = Rz(roll) Ry(yaw) Rx(pitch)) and projected
orthographically. Images are painted with OpenCV from the projected landmarks,
so every sample ships exact ground-truth landmarks.
"""

from dataclasses import asdict, dataclass
from pathlib import Path

import cv2
import numpy as np
import pandas as pd
from PIL import Image

from action_log import log_action
from landmark_layout import LandmarkSet, get_layout, write_landmarks

# Template units: face half-width ~1, y grows downwards, z towards the camera
FACE_CENTER = (0.5, 0.48)

# Maximum magnitude of each expression parameter
EXPRESSION_RANGES = {
    "jaw_drop": 0.22,
    "eye_closure": 0.85,
    "brow_raise": 0.14,
    "lip_stretch": 0.12,
}


@dataclass
class IdentityParams:
    face_width: float = 1.0
    jaw_roundness: float = 1.0
    eye_spacing: float = 0.42
    mouth_width: float = 0.34
    nose_length: float = 0.45
    skin: tuple = (224, 182, 150)
    hair: tuple = (70, 50, 35)
    iris: tuple = (60, 90, 140)
    lips: tuple = (180, 70, 80)
    background: tuple = (110, 130, 150)
    mustache: bool = False


@dataclass
class ExpressionParams:
    jaw_drop: float = 0.0
    eye_closure: float = 0.0
    brow_raise: float = 0.0
    lip_stretch: float = 0.0
    gaze_x: float = 0.0
    gaze_y: float = 0.0


@dataclass
class HeadPose:
    yaw: float = 0.0
    pitch: float = 0.0
    roll: float = 0.0


def rotation_matrix(yaw, pitch, roll):
    """R = Rz(roll) @ Ry(yaw) @ Rx(pitch), angles in degrees"""
    p, y, r = np.radians([pitch, yaw, roll])
    rx = np.array([[1, 0, 0], [0, np.cos(p), -np.sin(p)], [0, np.sin(p), np.cos(p)]])
    ry = np.array([[np.cos(y), 0, np.sin(y)], [0, 1, 0], [-np.sin(y), 0, np.cos(y)]])
    rz = np.array([[np.cos(r), -np.sin(r), 0], [np.sin(r), np.cos(r), 0], [0, 0, 1]])
    return rz @ ry @ rx


def _eye(cx, expression):
    cy = -0.35
    half_w = 0.17
    opening = 0.09 * (1.0 - expression.eye_closure)
    z = 0.22
    # corner, upper, upper, corner, lower, lower (ibug ordering)
    pts = [
        (cx - half_w, cy, z),
        (cx - 0.06, cy - opening, z + 0.03),
        (cx + 0.06, cy - opening, z + 0.03),
        (cx + half_w, cy, z),
        (cx + 0.06, cy + 0.8 * opening, z + 0.03),
        (cx - 0.06, cy + 0.8 * opening, z + 0.03),
    ]
    return pts


def template_points_3d(identity=None, expression=None, with_gaze=True):
    """3D landmark template (70 points with gaze, 68 without)"""
    identity = identity or IdentityParams()
    expression = expression or ExpressionParams()
    fw = identity.face_width
    pts = []

    # contour 0..16: right temple, around the chin, left temple
    for i in range(17):
        phi = np.pi * i / 16.0
        s = np.sin(phi) ** identity.jaw_roundness
        x = -0.95 * fw * np.cos(phi)
        y = -0.3 + (1.25 + 0.6 * expression.jaw_drop) * s
        z = -0.35 * abs(np.cos(phi))
        pts.append((x, y, z))

    brow_y = -0.62 - expression.brow_raise
    for sign in (-1, 1):
        xs = np.linspace(0.78, 0.2, 5) if sign < 0 else np.linspace(0.2, 0.78, 5)
        for j, x in enumerate(xs):
            arc = np.sin(np.pi * j / 4.0)
            pts.append((sign * x * fw, brow_y - 0.07 * arc, 0.2 + 0.08 * arc))

    # nose bridge 27..30 and base 31..35
    for j in range(4):
        t = j / 3.0
        pts.append((0.0, -0.35 + t * identity.nose_length * 0.9, 0.3 + 0.3 * t))
    base_y = -0.35 + identity.nose_length
    for x, dy, z in ((-0.2, 0.0, 0.32), (-0.1, 0.03, 0.4), (0.0, 0.05, 0.45), (0.1, 0.03, 0.4), (0.2, 0.0, 0.32)):
        pts.append((x, base_y + dy, z))

    spacing = identity.eye_spacing
    pts.extend(_eye(-spacing, expression))
    pts.extend(_eye(spacing, expression))

    # outer lips 48..59, inner lips 60..67
    mw = identity.mouth_width + expression.lip_stretch
    my = 0.45
    drop = expression.jaw_drop
    z = 0.3
    outer = [
        (-mw, my, z - 0.05),
        (-0.6 * mw, my - 0.07, z), (-0.25 * mw, my - 0.09, z + 0.02), (0.0, my - 0.07, z + 0.03),
        (0.25 * mw, my - 0.09, z + 0.02), (0.6 * mw, my - 0.07, z),
        (mw, my, z - 0.05),
        (0.6 * mw, my + 0.09 + drop, z), (0.25 * mw, my + 0.11 + drop, z + 0.02), (0.0, my + 0.11 + drop, z + 0.03),
        (-0.25 * mw, my + 0.11 + drop, z + 0.02), (-0.6 * mw, my + 0.09 + drop, z),
    ]
    inner = [
        (-0.8 * mw, my, z - 0.02),
        (-0.3 * mw, my - 0.02, z), (0.0, my - 0.02, z + 0.01), (0.3 * mw, my - 0.02, z),
        (0.8 * mw, my, z - 0.02),
        (0.3 * mw, my + 0.02 + drop, z), (0.0, my + 0.02 + drop, z + 0.01), (-0.3 * mw, my + 0.02 + drop, z),
    ]
    pts.extend(outer)
    pts.extend(inner)

    if with_gaze:
        for cx in (-spacing, spacing):
            pts.append((cx + 0.06 * expression.gaze_x, -0.35 + 0.03 * expression.gaze_y, 0.26))
    return np.array(pts, dtype=np.float64)


def canonical_template_3d(with_gaze=False):
    """Mean identity, neutral expression: the head-pose solver's reference"""
    return template_points_3d(IdentityParams(), ExpressionParams(), with_gaze=with_gaze)


def project_points(points_3d, pose, face_scale=0.36, center=FACE_CENTER):
    """Rotate and project orthographically into normalized image coordinates"""
    rot = rotation_matrix(pose.yaw, pose.pitch, pose.roll)
    rotated = points_3d @ rot.T
    return rotated[:, :2] * face_scale + np.asarray(center)


def face_landmarks(identity=None, expression=None, pose=None, layout_name="ibug68_gaze", face_scale=0.36):
    layout = get_layout(layout_name)
    points_3d = template_points_3d(identity, expression, with_gaze=layout.has_gaze)
    return LandmarkSet(project_points(points_3d, pose or HeadPose(), face_scale), layout)


def _forehead(identity, radius=0.95, height=0.65):
    """Arc closing the face outline above the temples, left temple to right"""
    fw = identity.face_width
    arc = []
    for i in range(1, 8):
        phi = np.pi * i / 8.0
        arc.append((radius * fw * np.cos(phi), -0.3 - height * np.sin(phi), -0.35 * abs(np.cos(phi))))
    return np.array(arc)


def _to_cv(points, resolution):
    """Pixel coordinates in cv2's 4-bit fixed point"""
    return np.round(points * resolution * 16.0).astype(np.int32).reshape(-1, 1, 2)


def _cv_point(point, resolution):
    x, y = np.round(np.asarray(point) * resolution * 16.0)
    return int(x), int(y)


def render_face(identity, expression, pose, resolution, face_scale=0.36, layout_name="ibug68_gaze"):
    """Paint a toy face; returns (HxWx3 uint8 RGB image, LandmarkSet)"""
    layout = get_layout(layout_name)
    points_3d = template_points_3d(identity, expression, with_gaze=True)
    pts = project_points(points_3d, pose, face_scale)
    forehead = project_points(_forehead(identity), pose, face_scale)
    hair_arc = project_points(_forehead(identity, radius=1.08, height=0.85), pose, face_scale)

    canvas = np.zeros((resolution, resolution, 3), dtype=np.uint8)
    canvas[:] = identity.background
    aa = cv2.LINE_AA
    thickness = max(1, resolution // 64)

    contour = pts[0:17]
    outline = np.concatenate([contour, forehead])
    hair_outline = np.concatenate([contour[14:], hair_arc, contour[:3]])
    cv2.fillPoly(canvas, [_to_cv(hair_outline, resolution)], identity.hair, aa, shift=4)
    cv2.fillPoly(canvas, [_to_cv(outline, resolution)], identity.skin, aa, shift=4)

    shade = tuple(int(c * 0.75) for c in identity.skin)
    if identity.mustache:
        base = pts[31:36]
        lip_top = pts[48:55][::-1]
        cv2.fillPoly(canvas, [_to_cv(np.concatenate([base, lip_top]), resolution)], identity.hair, aa, shift=4)
        # stripe texture that a warp preserves better than synthesis
        for j in range(5):
            t = (j + 0.5) / 5.0
            a = base[0] + t * (base[-1] - base[0])
            b = lip_top[-1] + t * (lip_top[0] - lip_top[-1])
            cv2.line(canvas, _cv_point(a, resolution), _cv_point(b, resolution), shade, 1, aa, shift=4)

    for brow in (pts[17:22], pts[22:27]):
        cv2.polylines(canvas, [_to_cv(brow, resolution)], False, identity.hair, thickness + 1, aa, shift=4)

    for eye, pupil in ((pts[36:42], pts[68]), (pts[42:48], pts[69])):
        cv2.fillPoly(canvas, [_to_cv(eye, resolution)], (245, 245, 245), aa, shift=4)
        opening = float(np.abs(eye[1, 1] - eye[5, 1]) + np.abs(eye[2, 1] - eye[4, 1])) / 2.0
        radius = max(1, int(round(min(0.022, opening * 0.6) * resolution * 16)))
        if opening * resolution > 0.8:
            cv2.circle(canvas, _cv_point(pupil, resolution), radius, identity.iris, -1, aa, shift=4)
        cv2.polylines(canvas, [_to_cv(eye, resolution)], True, shade, 1, aa, shift=4)

    cv2.polylines(canvas, [_to_cv(pts[27:31], resolution)], False, shade, thickness, aa, shift=4)
    cv2.polylines(canvas, [_to_cv(pts[31:36], resolution)], False, shade, thickness, aa, shift=4)

    cv2.fillPoly(canvas, [_to_cv(pts[48:60], resolution)], identity.lips, aa, shift=4)
    cv2.fillPoly(canvas, [_to_cv(pts[60:68], resolution)], (70, 20, 30), aa, shift=4)

    points = pts if layout.has_gaze else pts[:68]
    return canvas, LandmarkSet(points, layout)


def sample_identity(rng):
    def color(lo, hi):
        return tuple(int(v) for v in rng.integers(lo, hi, size=3))

    return IdentityParams(
        face_width=float(rng.uniform(0.85, 1.1)),
        jaw_roundness=float(rng.uniform(0.7, 1.4)),
        eye_spacing=float(rng.uniform(0.36, 0.48)),
        mouth_width=float(rng.uniform(0.28, 0.4)),
        nose_length=float(rng.uniform(0.38, 0.52)),
        skin=color(120, 240),
        hair=color(20, 140),
        iris=color(30, 200),
        lips=color(120, 220),
        background=color(60, 220),
        mustache=bool(rng.random() < 0.4),
    )


def sample_expression(rng):
    """Each action is either clearly active or clearly inactive"""
    values = {}
    for name, top in EXPRESSION_RANGES.items():
        active = rng.random() < 0.5
        lo, hi = (0.7, 1.0) if active else (0.0, 0.3)
        values[name] = float(rng.uniform(lo, hi) * top)
    return ExpressionParams(**values, gaze_x=float(rng.uniform(-1, 1)), gaze_y=float(rng.uniform(-1, 1)))


def sample_pose(rng, max_yaw=25.0, max_pitch=15.0, max_roll=12.0):
    return HeadPose(
        yaw=float(rng.uniform(-max_yaw, max_yaw)),
        pitch=float(rng.uniform(-max_pitch, max_pitch)),
        roll=float(rng.uniform(-max_roll, max_roll)),
    )


def generate_synthetic_dataset(root, n_identities=5, samples_per_identity=8, resolution=64, seed=0,
                               layout_name="ibug68_gaze", face_scale=0.36):
    """Write root/<identity>/<n>.png plus landmark files; returns a summary frame"""
    root = Path(root)
    rng = np.random.default_rng(seed)
    rows = []
    for i in range(n_identities):
        identity = sample_identity(rng)
        identity_dir = root / f"identity_{i:03d}"
        identity_dir.mkdir(parents=True, exist_ok=True)
        for n in range(samples_per_identity):
            # the first sample of every identity is frontal and neutral
            if n == 0:
                expression, pose = ExpressionParams(), HeadPose()
            else:
                expression, pose = sample_expression(rng), sample_pose(rng)
            image, landmarks = render_face(identity, expression, pose, resolution, face_scale, layout_name)
            stem = identity_dir / f"{n:03d}"
            Image.fromarray(image).save(stem.with_suffix(".png"))
            write_landmarks(stem.with_suffix(".txt"), landmarks)
            rows.append({"identity": identity_dir.name, "sample": n, **asdict(pose),
                         **asdict(expression), "mustache": identity.mustache})
    log_action(f"Generated synthetic dataset: {n_identities} identities x {samples_per_identity} samples at {resolution}px in {root}")
    summary = pd.DataFrame(rows)
    summary.to_csv(root / "synthetic_summary.csv", index=False)
    return summary

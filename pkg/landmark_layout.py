"""Landmark layouts, landmark sets and the plain-text landmark file format.

Coordinates are normalized to [0, 1]; pixel position = normalized * resolution.
Missing points are stored as NaN.
"""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from reenactor_errors import ConfigError, DataError


@dataclass(frozen=True)
class PartSpec:
    """One parsing channel: the landmark indices of its polyline (or point)."""

    name: str
    group: str
    indices: tuple
    kind: str = "polyline"


@dataclass(frozen=True)
class LandmarkLayout:
    name: str
    n_points: int
    groups: dict
    parts: tuple

    @property
    def part_names(self):
        return [p.name for p in self.parts]

    @property
    def has_gaze(self):
        return "gaze" in self.groups

    def group_indices(self, group):
        start, end = self.groups[group]
        return list(range(start, end))

    def parts_for(self, use_gaze):
        if not use_gaze:
            return tuple(p for p in self.parts if p.group != "gaze")
        if not self.has_gaze:
            raise ConfigError(f"Layout '{self.name}' has no gaze points")
        return self.parts


IBUG68_GROUPS = {
    "contour": (0, 17),
    "right_brow": (17, 22),
    "left_brow": (22, 27),
    "nose_bridge": (27, 31),
    "nose_base": (31, 36),
    "right_eye": (36, 42),
    "left_eye": (42, 48),
    "outer_lips": (48, 60),
    "inner_lips": (60, 68),
}

# Channel registry. The 15 part names are a convention of this codebase.
IBUG68_PARTS = (
    PartSpec("contour", "contour", tuple(range(0, 17))),
    PartSpec("jaw_left", "contour", tuple(range(4, 9))),
    PartSpec("jaw_right", "contour", tuple(range(8, 13))),
    PartSpec("right_brow", "right_brow", tuple(range(17, 22))),
    PartSpec("left_brow", "left_brow", tuple(range(22, 27))),
    PartSpec("nose_bridge", "nose_bridge", tuple(range(27, 31))),
    PartSpec("nose_base", "nose_base", tuple(range(31, 36))),
    PartSpec("right_eye_upper", "right_eye", (36, 37, 38, 39)),
    PartSpec("right_eye_lower", "right_eye", (39, 40, 41, 36)),
    PartSpec("left_eye_upper", "left_eye", (42, 43, 44, 45)),
    PartSpec("left_eye_lower", "left_eye", (45, 46, 47, 42)),
    PartSpec("outer_upper_lip", "outer_lips", tuple(range(48, 55))),
    PartSpec("outer_lower_lip", "outer_lips", (54, 55, 56, 57, 58, 59, 48)),
    PartSpec("inner_upper_lip", "inner_lips", tuple(range(60, 65))),
    PartSpec("inner_lower_lip", "inner_lips", (64, 65, 66, 67, 60)),
)

GAZE_PARTS = (
    PartSpec("gaze_right", "gaze", (68,), kind="point"),
    PartSpec("gaze_left", "gaze", (69,), kind="point"),
)

LAYOUTS = {
    "ibug68": LandmarkLayout("ibug68", 68, dict(IBUG68_GROUPS), IBUG68_PARTS),
    "ibug68_gaze": LandmarkLayout(
        "ibug68_gaze", 70, {**IBUG68_GROUPS, "gaze": (68, 70)}, IBUG68_PARTS + GAZE_PARTS
    ),
}

CONTOUR_GROUP = "contour"
INNER_GROUPS = ("right_brow", "left_brow", "nose_bridge", "nose_base",
                "right_eye", "left_eye", "outer_lips", "inner_lips")


def get_layout(name):
    if name not in LAYOUTS:
        raise ConfigError(f"Unknown landmark layout '{name}'; known: {', '.join(LAYOUTS)}")
    layout = LAYOUTS[name]
    check_layout(layout)
    return layout


def check_layout(layout):
    """Contour range must be non-empty and disjoint from every inner range"""
    start, end = layout.groups[CONTOUR_GROUP]
    if end <= start:
        raise ConfigError(f"Layout '{layout.name}' has an empty contour range")
    contour = set(range(start, end))
    for group in INNER_GROUPS:
        s, e = layout.groups[group]
        if contour & set(range(s, e)):
            raise ConfigError(f"Layout '{layout.name}': contour overlaps '{group}'")


@dataclass
class LandmarkSet:
    points: np.ndarray
    layout: LandmarkLayout = field(default_factory=lambda: get_layout("ibug68_gaze"))

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.shape != (self.layout.n_points, 2):
            raise DataError(
                f"Layout '{self.layout.name}' expects {self.layout.n_points} points, "
                f"got array of shape {self.points.shape}"
            )

    @property
    def valid_mask(self):
        return np.isfinite(self.points).all(axis=1)

    def validate(self):
        """All present coordinates must lie in [0, 1]"""
        present = self.points[self.valid_mask]
        if present.size and (present.min() < 0.0 or present.max() > 1.0):
            raise DataError("Landmark coordinates must lie in [0, 1]")
        return self

    def group(self, name):
        return self.points[self.layout.group_indices(name)]

    def to_pixels(self, resolution):
        return self.points * float(resolution)

    def copy(self):
        return LandmarkSet(self.points.copy(), self.layout)

    def with_group(self, name, values):
        """Copy with one landmark group replaced"""
        points = self.points.copy()
        points[self.layout.group_indices(name)] = values
        return LandmarkSet(points, self.layout)

    def without_group(self, name):
        """Copy with one landmark group marked missing"""
        return self.with_group(name, np.nan)

    def translated(self, dx, dy=0.0):
        return LandmarkSet(self.points + np.array([dx, dy]), self.layout)


def same_layout(a, b):
    return a.layout.name == b.layout.name and a.layout.n_points == b.layout.n_points


def read_landmarks(path, layout):
    """Read a landmark file of L rows 'x y'"""
    path = Path(path)
    try:
        points = np.loadtxt(path, dtype=np.float64, ndmin=2)
    except (OSError, ValueError) as e:
        raise DataError(f"Could not read landmarks from {path}: {e}") from e
    if points.shape != (layout.n_points, 2):
        raise DataError(
            f"{path}: expected {layout.n_points} rows of 'x y', got shape {points.shape}"
        )
    return LandmarkSet(points, layout)


def write_landmarks(path, landmarks):
    np.savetxt(Path(path), landmarks.points, fmt="%.6f")
    return path

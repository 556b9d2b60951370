"""Geometry and label primitives shared by every other module.

Coordinates follow the LiDAR convention: the sensor sits at the origin,
x/y span the ground plane, z is up.  Box sizes are (length, width, height)
with length along the box x axis at yaw = 0.
"""

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

TWO_PI = 2.0 * np.pi


def normalize_yaw(yaw: float) -> float:
    """Wrap an angle into [-pi, pi)."""
    return float((yaw + np.pi) % TWO_PI - np.pi)


@dataclass
class Box3D:
    """Oriented 3D bounding box with class label, score and velocity.

    Attributes:
        center: (x, y, z) in meters.
        size: (length, width, height) in meters, all > 0.
        yaw: rotation about z in radians, normalized to [-pi, pi).
        velocity: (vx, vy) in m/s.
        class_id: integer category identifier.
        score: confidence in [0, 1]; 1.0 for ground truth.
    """

    center: Tuple[float, float, float]
    size: Tuple[float, float, float]
    yaw: float
    velocity: Tuple[float, float] = (0.0, 0.0)
    class_id: int = 0
    score: float = 1.0

    def __post_init__(self):
        self.center = tuple(float(v) for v in self.center)
        self.size = tuple(float(v) for v in self.size)
        if len(self.center) != 3 or len(self.size) != 3:
            raise ValueError("center and size must have 3 components")
        if any(s <= 0 for s in self.size):
            raise ValueError(f"box size must be strictly positive, got {self.size}")
        self.yaw = normalize_yaw(float(self.yaw))
        self.velocity = tuple(float(v) for v in self.velocity)
        self.class_id = int(self.class_id)
        self.score = float(self.score)
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must be in [0, 1], got {self.score}")

    def bev_corners(self) -> np.ndarray:
        """(4, 2) array of the footprint corners in the ground plane."""
        l, w = self.size[0], self.size[1]
        dx = np.array([l, l, -l, -l]) / 2.0
        dy = np.array([-w, w, w, -w]) / 2.0
        c, s = np.cos(self.yaw), np.sin(self.yaw)
        x = self.center[0] + c * dx - s * dy
        y = self.center[1] + s * dx + c * dy
        return np.stack([x, y], axis=1)


@dataclass
class SceneFrame:
    """One LiDAR sweep: points, ground-truth boxes and instance identity.

    ``instance_ids`` is parallel to ``boxes`` and stable across frames.
    ``synthetic`` marks boxes pasted by augmentation; it is never set on
    generated or loaded data.
    """

    frame_id: str
    points: np.ndarray  # (N, 4) float: x, y, z, intensity
    boxes: List[Box3D] = field(default_factory=list)
    instance_ids: List[int] = field(default_factory=list)
    synthetic: List[bool] = field(default_factory=list)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 4)
        if len(self.instance_ids) != len(self.boxes):
            raise ValueError("instance_ids must parallel boxes")
        if not self.synthetic:
            self.synthetic = [False] * len(self.boxes)
        if len(self.synthetic) != len(self.boxes):
            raise ValueError("synthetic flags must parallel boxes")


@dataclass
class ClassTable:
    """Ordered class catalog with base/novel roles.

    Class ids are dense 0..N-1 in listing order; the base and novel sets
    are disjoint.
    """

    classes: List[Tuple[int, str, str]]  # (class_id, name, role in {base, novel})

    def __post_init__(self):
        ids = [c[0] for c in self.classes]
        if ids != list(range(len(self.classes))):
            raise ValueError(f"class_ids must be dense 0..N-1, got {ids}")
        for _, name, role in self.classes:
            if role not in ("base", "novel"):
                raise ValueError(f"unknown role {role!r} for class {name!r}")
        names = [c[1] for c in self.classes]
        if len(set(names)) != len(names):
            raise ValueError("class names must be unique")

    @classmethod
    def from_names(cls, base: Sequence[str], novel: Sequence[str]) -> "ClassTable":
        rows = [(i, n, "base") for i, n in enumerate(base)]
        rows += [(len(base) + i, n, "novel") for i, n in enumerate(novel)]
        return cls(rows)

    @property
    def n_total(self) -> int:
        return len(self.classes)

    @property
    def base_ids(self) -> List[int]:
        return [cid for cid, _, role in self.classes if role == "base"]

    @property
    def novel_ids(self) -> List[int]:
        return [cid for cid, _, role in self.classes if role == "novel"]

    def name_of(self, class_id: int) -> str:
        return self.classes[class_id][1]

    def id_of(self, name: str) -> int:
        for cid, n, _ in self.classes:
            if n == name:
                return cid
        raise KeyError(name)

    def role_of(self, class_id: int) -> str:
        return self.classes[class_id][2]


def center_distance(a: Box3D, b: Box3D) -> float:
    """Ground-plane (BEV) distance between box centers; z is ignored."""
    return float(np.hypot(a.center[0] - b.center[0], a.center[1] - b.center[1]))


def points_in_box(frame_or_points, box: Box3D) -> int:
    """Count points inside the yaw-rotated box volume, boundary-inclusive."""
    return int(np.count_nonzero(points_in_box_mask(frame_or_points, box)))


def points_in_box_mask(frame_or_points, box: Box3D) -> np.ndarray:
    """Boolean mask of the points contained in ``box`` (boundary-inclusive)."""
    pts = frame_or_points.points if isinstance(frame_or_points, SceneFrame) else np.asarray(frame_or_points)
    if pts.size == 0:
        return np.zeros(0, dtype=bool)
    rel = pts[:, :3] - np.asarray(box.center)
    c, s = np.cos(box.yaw), np.sin(box.yaw)
    # rotate by -yaw into the box frame
    bx = c * rel[:, 0] + s * rel[:, 1]
    by = -s * rel[:, 0] + c * rel[:, 1]
    bz = rel[:, 2]
    hl, hw, hh = box.size[0] / 2.0, box.size[1] / 2.0, box.size[2] / 2.0
    return (np.abs(bx) <= hl) & (np.abs(by) <= hw) & (np.abs(bz) <= hh)


def bev_footprints_intersect(a: Box3D, b: Box3D) -> bool:
    """True if the BEV footprints of two boxes overlap (touching counts).

    Separating-axis test on the two oriented rectangles: the footprints are
    disjoint iff some edge normal of either rectangle separates the corner
    projections.
    """
    ca, cb = a.bev_corners(), b.bev_corners()
    for corners in (ca, cb):
        edges = np.roll(corners, -1, axis=0) - corners
        for ex, ey in edges[:2]:  # a rectangle has two distinct edge directions
            axis = np.array([-ey, ex])
            pa = ca @ axis
            pb = cb @ axis
            if pa.max() < pb.min() or pb.max() < pa.min():
                return False
    return True

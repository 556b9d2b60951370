"""Bird's-eye-view rasterization, target encoding, and detection decoding.

The detector consumes a fixed-extent 2D grid centered on the sensor.
``voxelize`` reduces a point cloud to per-cell statistics, ``encode_targets``
rasterizes ground-truth boxes into binary center heatmaps plus per-class
regression maps, and ``decode_detections`` inverts the encoding from
predicted head outputs.

Regression channels, in order:
    0 dx      center x offset from the cell center, meters
    1 dy      center y offset from the cell center, meters
    2 z       absolute center height
    3 log l   log box length
    4 log w   log box width
    5 log h   log box height
    6 sin yaw
    7 cos yaw
    8 vx
    9 vy
"""

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .core import Box3D, ClassTable, SceneFrame, points_in_box_mask
from .errors import ConfigError, ContractError

N_REG_CHANNELS = 10
N_STAT_CHANNELS = 5  # count, mean z, max z, mean intensity, occupancy


@dataclass(frozen=True)
class GridSpec:
    """Square-celled BEV grid symmetric about the origin.

    ``x_range`` / ``y_range`` are full extents in meters, so x spans
    [-x_range/2, +x_range/2].  Extents must be whole multiples of
    ``cell_size`` and at least 4 cells on each side.
    """

    x_range: float
    y_range: float
    cell_size: float
    feature_channels: int = N_STAT_CHANNELS

    def __post_init__(self):
        if self.cell_size <= 0:
            raise ConfigError(f"cell_size must be positive, got {self.cell_size}")
        if self.feature_channels < N_STAT_CHANNELS:
            raise ConfigError(
                f"need at least {N_STAT_CHANNELS} feature channels, got {self.feature_channels}")
        for extent, axis in ((self.x_range, "x"), (self.y_range, "y")):
            if extent <= 0:
                raise ConfigError(f"{axis}_range must be positive, got {extent}")
            n = extent / self.cell_size
            if abs(n - round(n)) > 1e-6:
                raise ConfigError(
                    f"{axis}_range {extent} is not a multiple of cell_size {self.cell_size}")
            if round(n) < 4:
                raise ConfigError(f"grid must be at least 4 cells wide, got {round(n)} on {axis}")

    @property
    def nx(self) -> int:
        return round(self.x_range / self.cell_size)

    @property
    def ny(self) -> int:
        return round(self.y_range / self.cell_size)

    @property
    def shape(self):
        return (self.nx, self.ny)

    @property
    def x_min(self) -> float:
        return -self.x_range / 2.0

    @property
    def y_min(self) -> float:
        return -self.y_range / 2.0

    def cell_of(self, x: float, y: float):
        """Cell indices containing (x, y); may be out of bounds."""
        ix = int(np.floor((x - self.x_min) / self.cell_size))
        iy = int(np.floor((y - self.y_min) / self.cell_size))
        return ix, iy

    def in_bounds(self, ix: int, iy: int) -> bool:
        return 0 <= ix < self.nx and 0 <= iy < self.ny

    def center_of(self, ix: int, iy: int):
        x = self.x_min + (ix + 0.5) * self.cell_size
        y = self.y_min + (iy + 0.5) * self.cell_size
        return x, y

    def coarser(self, factor: int = 2) -> "GridSpec":
        """Same extents at factor x larger cells (detector output stride)."""
        if self.nx % factor or self.ny % factor:
            raise ConfigError(f"grid {self.shape} not divisible by {factor}")
        return GridSpec(self.x_range, self.y_range, self.cell_size * factor,
                        self.feature_channels)


def voxelize(frame, spec: GridSpec) -> np.ndarray:
    """Reduce a frame's cloud to a (feature_channels, nx, ny) grid.

    Channels: log1p(point count), mean z, max z, mean intensity, occupancy;
    channels beyond the five statistics are zero.  Points outside the grid
    are dropped; empty cells are all zero.  Accepts a SceneFrame or a raw
    (N, 4) array.
    """
    pts = frame.points if isinstance(frame, SceneFrame) else np.asarray(frame, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 4:
        raise ContractError(f"points must be (N, 4), got {pts.shape}")
    nx, ny = spec.shape
    out = np.zeros((spec.feature_channels, nx, ny))
    ix = np.floor((pts[:, 0] - spec.x_min) / spec.cell_size).astype(np.int64)
    iy = np.floor((pts[:, 1] - spec.y_min) / spec.cell_size).astype(np.int64)
    keep = (ix >= 0) & (ix < nx) & (iy >= 0) & (iy < ny)
    ix, iy = ix[keep], iy[keep]
    z, inten = pts[keep, 2], pts[keep, 3]
    flat = ix * ny + iy
    count = np.bincount(flat, minlength=nx * ny).astype(np.float64)
    sum_z = np.bincount(flat, weights=z, minlength=nx * ny)
    sum_i = np.bincount(flat, weights=inten, minlength=nx * ny)
    max_z = np.full(nx * ny, -np.inf)
    np.maximum.at(max_z, flat, z)
    occupied = count > 0
    safe = np.where(occupied, count, 1.0)
    out[0] = np.log1p(count).reshape(nx, ny)
    out[1] = np.where(occupied, sum_z / safe, 0.0).reshape(nx, ny)
    out[2] = np.where(occupied, max_z, 0.0).reshape(nx, ny)
    out[3] = np.where(occupied, sum_i / safe, 0.0).reshape(nx, ny)
    out[4] = occupied.astype(np.float64).reshape(nx, ny)
    return out


@dataclass
class TargetSet:
    """Rasterized supervision for one frame.

    heatmaps:   (n_class, nx, ny) binary center indicators
    regression: (n_class, N_REG_CHANNELS, nx, ny), defined where heatmap is 1
    n_encoded:  boxes actually rasterized per class (post filtering)
    ignore:     optional (n_class, nx, ny) mask of cells excluded from the
                classification loss pools (ring around centers)
    """

    heatmaps: np.ndarray
    regression: np.ndarray
    n_encoded: list = field(default_factory=list)
    ignore: Optional[np.ndarray] = None

    @property
    def positive_masks(self) -> np.ndarray:
        return self.heatmaps == 1.0


def regression_vector(box: Box3D, cx: float, cy: float) -> np.ndarray:
    """Channel values for a box anchored at cell center (cx, cy)."""
    return np.array([
        box.center[0] - cx,
        box.center[1] - cy,
        box.center[2],
        np.log(box.size[0]),
        np.log(box.size[1]),
        np.log(box.size[2]),
        np.sin(box.yaw),
        np.cos(box.yaw),
        box.velocity[0],
        box.velocity[1],
    ])


def encode_targets(frame: SceneFrame, spec: GridSpec, class_table: ClassTable,
                   min_points: int = 5, ignore_radius: float = 0.0) -> TargetSet:
    """Rasterize ground truth into heatmaps and regression maps.

    Boxes with fewer than ``min_points`` cloud points inside, an
    out-of-grid center, or a class id outside the table are skipped.  When
    two same-class boxes land in one cell the one containing more points
    wins (first encoded wins ties).  Distinct classes never collide because
    every class has its own channel.  ``ignore_radius`` > 0 marks cells
    within that many meters of a center (center cell excluded) as ignored.
    """
    n_class = class_table.n_total
    nx, ny = spec.shape
    heat = np.zeros((n_class, nx, ny))
    reg = np.zeros((n_class, N_REG_CHANNELS, nx, ny))
    support = np.zeros((n_class, nx, ny), dtype=np.int64)
    ignore = np.zeros((n_class, nx, ny), dtype=bool) if ignore_radius > 0 else None
    n_encoded = [0] * n_class
    for box in frame.boxes:
        c = box.class_id
        if not 0 <= c < n_class:
            continue
        n_inside = int(points_in_box_mask(frame.points, box).sum())
        if n_inside < min_points:
            continue
        ix, iy = spec.cell_of(box.center[0], box.center[1])
        if not spec.in_bounds(ix, iy):
            continue
        if heat[c, ix, iy] == 1.0:
            if n_inside <= support[c, ix, iy]:
                continue
            n_encoded[c] -= 1
        cx, cy = spec.center_of(ix, iy)
        heat[c, ix, iy] = 1.0
        reg[c, :, ix, iy] = regression_vector(box, cx, cy)
        support[c, ix, iy] = n_inside
        n_encoded[c] += 1
        if ignore is not None:
            r_cells = int(np.ceil(ignore_radius / spec.cell_size))
            for di in range(-r_cells, r_cells + 1):
                for dj in range(-r_cells, r_cells + 1):
                    if di == 0 and dj == 0:
                        continue
                    jx, jy = ix + di, iy + dj
                    if spec.in_bounds(jx, jy) and np.hypot(di, dj) * spec.cell_size <= ignore_radius:
                        ignore[c, jx, jy] = True
    if ignore is not None:
        ignore &= heat == 0.0  # a center cell is never ignored
    return TargetSet(heat, reg, n_encoded, ignore)


@dataclass
class HeadOutputs:
    """Per-head predicted maps for one frame.

    Parallel lists, one entry per head: squashed class heatmaps with values
    strictly inside (0, 1), shape (k_head, nx, ny); regression maps shaped
    (N_REG_CHANNELS, nx, ny) shared by the head's classes; the class ids
    owning each heatmap channel.
    """

    scores: List[np.ndarray]
    regression: List[np.ndarray]
    class_ids: List[List[int]]

    def __post_init__(self):
        if not (len(self.scores) == len(self.regression) == len(self.class_ids)):
            raise ContractError("per-head lists must be parallel")
        for s, ids in zip(self.scores, self.class_ids):
            if s.shape[0] != len(ids):
                raise ContractError(
                    f"head emits {s.shape[0]} channels for {len(ids)} classes")

    @property
    def n_class(self) -> int:
        return 1 + max(c for ids in self.class_ids for c in ids)

    def stacked(self):
        """(scores, regression) stacked per class id.

        Every class channel is paired with its owning head's regression map.
        """
        n = self.n_class
        nx, ny = self.scores[0].shape[1:]
        scores = np.zeros((n, nx, ny))
        reg = np.zeros((n, N_REG_CHANNELS, nx, ny))
        for s, r, ids in zip(self.scores, self.regression, self.class_ids):
            for row, c in enumerate(ids):
                scores[c] = s[row]
                reg[c] = r
        return scores, reg


def _local_maxima(scores: np.ndarray) -> np.ndarray:
    """Cells that are >= every neighbor in their 3x3 window."""
    padded = np.pad(scores, 1, constant_values=-np.inf)
    neigh = np.full_like(scores, -np.inf)
    nx, ny = scores.shape
    for di in range(3):
        for dj in range(3):
            if di == 1 and dj == 1:
                continue
            neigh = np.maximum(neigh, padded[di:di + nx, dj:dj + ny])
    return scores >= neigh


def decode_detections(outputs: HeadOutputs, spec: GridSpec,
                      max_boxes: int = 500, score_floor: float = 0.1) -> List[Box3D]:
    """Extract boxes from predicted maps.

    A detection is a per-class 3x3 local maximum with score above the
    floor.  Detections are returned ordered by descending score (ties
    broken by class then cell index) and capped at ``max_boxes``.
    """
    scores, regression = outputs.stacked()
    if scores.shape[1:] != spec.shape:
        raise ContractError(f"score grid {scores.shape[1:]} does not match spec {spec.shape}")
    picks = []
    for c in range(scores.shape[0]):
        mask = _local_maxima(scores[c]) & (scores[c] > score_floor)
        for ix, iy in zip(*np.nonzero(mask)):
            picks.append((-scores[c, ix, iy], c, int(ix), int(iy)))
    picks.sort()
    dets = []
    for neg_score, c, ix, iy in picks[:max_boxes]:
        r = regression[c, :, ix, iy]
        cx, cy = spec.center_of(ix, iy)
        dets.append(Box3D(
            center=(cx + r[0], cy + r[1], r[2]),
            size=(float(np.exp(r[3])), float(np.exp(r[4])), float(np.exp(r[5]))),
            yaw=float(np.arctan2(r[6], r[7])),
            velocity=(r[8], r[9]),
            class_id=c,
            score=-neg_score,
        ))
    return dets

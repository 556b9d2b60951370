"""Deterministic synthetic long-tail LiDAR-style dataset generator.

Scenes hold a handful of object instances observed over a few frames.
Points are sampled on five box faces (no bottom) with 2 cm jitter, thinned
with inverse-square range falloff, and optionally occluded by deleting a
random angular sector.  Ground scatter and small clutter blobs act as hard
negatives.  Instances never straddle the train/val boundary: the split is
drawn over whole scenes and every instance lives in exactly one scene.

On-disk layout: ``meta.json`` plus one ``frames/<frame_id>.bin`` per frame.
The frame file is little-endian: magic "LFSL", u32 version, u32 point
count, u32 box count; points as x, y, z, intensity (4 x f32); boxes as 13
x f32 (center 3, size 3, yaw, velocity 2, reserved 4) followed by class_id
and instance_id as u32.  reserved[0] is 1.0 for pasted synthetic boxes.
"""

import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .core import (Box3D, ClassTable, SceneFrame, bev_footprints_intersect,
                   points_in_box_mask)
from .errors import ConfigError, IntegrityError, LoadError
from .seeding import DOMAIN_FRAME, DOMAIN_INSTANCE, substream

FRAME_MAGIC = b"LFSL"
FRAME_VERSION = 1
META_VERSION = 1
POINT_JITTER = 0.02  # meters, surface sampling noise
FRAME_DT = 0.5  # seconds between frames of a scene

SizeRange = Tuple[Tuple[float, float], Tuple[float, float], Tuple[float, float]]


@dataclass
class WorldSpec:
    """Everything needed to regenerate a synthetic world bit for bit."""

    class_table: ClassTable
    frequency: Dict[str, float]
    size_ranges: Dict[str, SizeRange]
    extent: Tuple[float, float] = (40.0, 40.0)
    density_scale: float = 300.0
    frames_per_instance: Tuple[int, int] = (1, 3)
    n_scenes: int = 40
    instances_per_scene: Tuple[int, int] = (3, 8)
    val_fraction: float = 0.25
    occlusion_prob: float = 0.3
    occlusion_max_frac: float = 0.4  # of the full circle
    ground_points: int = 60
    clutter_rate: float = 1.5  # mean blobs per frame
    seed: int = 0

    def __post_init__(self):
        names = [name for _, name, _ in self.class_table.classes]
        for name in names:
            if name not in self.frequency:
                raise ConfigError(f"no frequency weight for class {name!r}")
            if name not in self.size_ranges:
                raise ConfigError(f"no size range for class {name!r}")
        if any(w < 0 for w in self.frequency.values()):
            raise ConfigError("frequency weights must be nonnegative")
        base_w = sum(self.frequency[self.class_table.name_of(c)]
                     for c in self.class_table.base_ids)
        novel_w = sum(self.frequency[self.class_table.name_of(c)]
                      for c in self.class_table.novel_ids)
        if base_w <= 0:
            raise ConfigError("at least one base class needs positive weight")
        if novel_w <= 0:
            raise ConfigError("novel classes all have zero weight; no novel "
                              "instances would ever be generated")
        largest = max(hi for r in self.size_ranges.values() for _, hi in r[:2])
        if min(self.extent) <= 2.0 * largest:
            raise ConfigError("scene extent too small for the class size ranges")
        lo, hi = self.frames_per_instance
        if not 1 <= lo <= hi:
            raise ConfigError(f"bad frames_per_instance range {self.frames_per_instance}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("val_fraction must be in [0, 1)")
        if self.density_scale <= 0 or self.n_scenes < 1:
            raise ConfigError("density_scale and n_scenes must be positive")

    def to_json(self) -> dict:
        d = asdict(self)
        d["class_table"] = {"classes": self.class_table.classes}
        return d


@dataclass
class Dataset:
    """Generated frames plus the bookkeeping the few-shot tooling needs."""

    train_frames: List[SceneFrame]
    val_frames: List[SceneFrame]
    class_table: ClassTable
    instance_index: Dict[int, List[str]]  # instance -> ordered frame ids
    instance_class: Dict[int, int] = field(default_factory=dict)
    spec: WorldSpec = None

    def all_frames(self) -> List[SceneFrame]:
        return self.train_frames + self.val_frames

    def frame_map(self) -> Dict[str, SceneFrame]:
        return {f.frame_id: f for f in self.all_frames()}

    def train_ids(self):
        return {f.frame_id for f in self.train_frames}


@dataclass
class _Instance:
    instance_id: int
    class_id: int
    size: Tuple[float, float, float]
    p0: np.ndarray  # xy at scene start
    yaw: float
    velocity: np.ndarray  # xy, m/s
    first_frame: int
    last_frame: int

    def box_at(self, frame_idx: int) -> Box3D:
        xy = self.p0 + self.velocity * (FRAME_DT * frame_idx)
        z = self.size[2] / 2.0
        return Box3D((float(xy[0]), float(xy[1]), z), self.size, self.yaw,
                     (float(self.velocity[0]), float(self.velocity[1])),
                     self.class_id)


def _sample_instances(spec: WorldSpec, scene_idx: int, next_id: int):
    """Place a scene's instances with non-overlapping starting footprints."""
    rng = substream(spec.seed, DOMAIN_INSTANCE, scene_idx)
    names = [name for _, name, _ in spec.class_table.classes]
    weights = np.array([spec.frequency[n] for n in names], dtype=np.float64)
    probs = weights / weights.sum()
    count = int(rng.integers(spec.instances_per_scene[0],
                             spec.instances_per_scene[1] + 1))
    n_frames = int(rng.integers(spec.frames_per_instance[0],
                                spec.frames_per_instance[1] + 1))
    hx, hy = spec.extent[0] / 2.0, spec.extent[1] / 2.0
    placed: List[_Instance] = []
    for _ in range(count):
        k = int(rng.choice(len(names), p=probs))
        name = names[k]
        (l_lo, l_hi), (w_lo, w_hi), (h_lo, h_hi) = spec.size_ranges[name]
        size = (float(rng.uniform(l_lo, l_hi)), float(rng.uniform(w_lo, w_hi)),
                float(rng.uniform(h_lo, h_hi)))
        margin = max(size[0], size[1])
        yaw = float(rng.uniform(-np.pi, np.pi))
        # cap speed so the full trajectory stays placeable inside the extent
        dur = FRAME_DT * max(n_frames - 1, 0)
        room = min(hx, hy) - margin - 0.25
        speed_hi = 3.0 if dur <= 0 else min(3.0, max(room, 0.0) / dur)
        speed = float(rng.uniform(0.0, speed_hi))
        vel = speed * np.array([np.cos(yaw), np.sin(yaw)])
        span = speed * FRAME_DT * max(n_frames - 1, 0)
        for _attempt in range(20):
            p0 = rng.uniform([-hx + margin + span, -hy + margin + span],
                             [hx - margin - span, hy - margin - span])
            cand = Box3D((float(p0[0]), float(p0[1]), size[2] / 2), size, yaw,
                         class_id=spec.class_table.id_of(name))
            if not any(bev_footprints_intersect(cand, other.box_at(0))
                       for other in placed):
                break
        else:
            continue  # crowded scene; drop this instance
        t = int(rng.integers(spec.frames_per_instance[0], n_frames + 1))
        start = int(rng.integers(0, n_frames - t + 1))
        placed.append(_Instance(next_id + len(placed), spec.class_table.id_of(name),
                                size, np.asarray(p0, dtype=np.float64), yaw, vel,
                                start, start + t - 1))
    return placed, n_frames


def _surface_points(rng: np.random.Generator, box: Box3D, n: int) -> np.ndarray:
    """n points on the box's 5 visible faces (no bottom), jittered."""
    l, w, h = box.size
    areas = np.array([l * w, w * h, w * h, l * h, l * h])  # top, +x, -x, +y, -y
    faces = rng.choice(5, size=n, p=areas / areas.sum())
    u = rng.uniform(-0.5, 0.5, size=n)
    v = rng.uniform(-0.5, 0.5, size=n)
    local = np.empty((n, 3))
    top = faces == 0
    local[top] = np.c_[u[top] * l, v[top] * w, np.full(top.sum(), h / 2.0)]
    for face, sx in ((1, 0.5), (2, -0.5)):
        m = faces == face
        local[m] = np.c_[np.full(m.sum(), sx * l), u[m] * w, v[m] * h]
    for face, sy in ((3, 0.5), (4, -0.5)):
        m = faces == face
        local[m] = np.c_[u[m] * l, np.full(m.sum(), sy * w), v[m] * h]
    local[:, 2] += h / 2.0  # box frame: z measured from the ground
    c, s = np.cos(box.yaw), np.sin(box.yaw)
    world = np.empty_like(local)
    world[:, 0] = c * local[:, 0] - s * local[:, 1] + box.center[0]
    world[:, 1] = s * local[:, 0] + c * local[:, 1] + box.center[1]
    world[:, 2] = local[:, 2] + (box.center[2] - h / 2.0)
    world += rng.normal(scale=POINT_JITTER, size=world.shape)
    return world


def _object_point_count(rng, box: Box3D, density_scale: float) -> int:
    l, w, h = box.size
    area = l * w + 2 * (l * h + w * h)
    d2 = max(box.center[0] ** 2 + box.center[1] ** 2, 1.0)
    lam = density_scale * area / d2
    return max(1, int(rng.poisson(lam)))


def _occlude(rng, pts: np.ndarray, box: Box3D, prob: float, max_frac: float) -> np.ndarray:
    if pts.shape[0] <= 1 or rng.uniform() >= prob:
        return pts
    phi = rng.uniform(0.0, 2.0 * np.pi)
    width = rng.uniform(0.0, max_frac * 2.0 * np.pi)
    az = np.arctan2(pts[:, 1] - box.center[1], pts[:, 0] - box.center[0])
    delta = np.abs((az - phi + np.pi) % (2.0 * np.pi) - np.pi)
    keep = delta > width / 2.0
    if not keep.any():
        keep[int(np.argmin(pts[:, 0] ** 2 + pts[:, 1] ** 2))] = True
    return pts[keep]


def _render_frame(spec: WorldSpec, scene_idx: int, frame_idx: int,
                  frame_id: str, actives: Sequence[_Instance]) -> SceneFrame:
    rng = substream(spec.seed, DOMAIN_FRAME, scene_idx, frame_idx)
    hx, hy = spec.extent[0] / 2.0, spec.extent[1] / 2.0
    chunks = []
    boxes: List[Box3D] = []
    ids: List[int] = []
    for inst in actives:
        box = inst.box_at(frame_idx)
        n = _object_point_count(rng, box, spec.density_scale)
        pts = _surface_points(rng, box, n)
        pts = _occlude(rng, pts, box, spec.occlusion_prob, spec.occlusion_max_frac)
        if not points_in_box_mask(pts, box).any():
            # jitter or occlusion stripped every in-volume return; keep the
            # sparsity floor of one point per object
            pts = np.vstack([pts, np.asarray(box.center)[None, :]])
        chunks.append(pts)
        boxes.append(box)
        ids.append(inst.instance_id)
    if spec.ground_points:
        g = np.c_[rng.uniform(-hx, hx, spec.ground_points),
                  rng.uniform(-hy, hy, spec.ground_points),
                  rng.normal(scale=0.03, size=spec.ground_points)]
        chunks.append(g)
    for _ in range(rng.poisson(spec.clutter_rate)):
        # low road debris: dense enough to pass the shot filter but with a
        # max-z clearly under any labeled class
        center = rng.uniform([-hx + 1, -hy + 1], [hx - 1, hy - 1])
        n = int(rng.integers(5, 30))
        blob = rng.normal(scale=[0.4, 0.4, 0.08], size=(n, 3))
        blob += [center[0], center[1], 0.15]
        chunks.append(blob)
    xyz = np.vstack(chunks) if chunks else np.zeros((0, 3))
    intensity = np.full((xyz.shape[0], 1), 0.5)
    points = np.hstack([xyz, intensity])
    return SceneFrame(frame_id, points, boxes, ids, [False] * len(boxes))


def generate_dataset(spec: WorldSpec) -> Dataset:
    """Build the whole world; identical spec and seed give identical output."""
    split_rng = substream(spec.seed, DOMAIN_INSTANCE, 0xFFFF)
    n_val = int(round(spec.val_fraction * spec.n_scenes))
    val_scenes = set(split_rng.choice(spec.n_scenes, size=n_val, replace=False).tolist())
    train, val = [], []
    instance_index: Dict[int, List[str]] = {}
    instance_class: Dict[int, int] = {}
    next_id = 1
    for scene_idx in range(spec.n_scenes):
        instances, n_frames = _sample_instances(spec, scene_idx, next_id)
        next_id += len(instances)
        bucket = val if scene_idx in val_scenes else train
        for frame_idx in range(n_frames):
            frame_id = f"s{scene_idx:04d}f{frame_idx:02d}"
            actives = [i for i in instances
                       if i.first_frame <= frame_idx <= i.last_frame]
            frame = _render_frame(spec, scene_idx, frame_idx, frame_id, actives)
            bucket.append(frame)
            for inst in actives:
                instance_index.setdefault(inst.instance_id, []).append(frame_id)
        for inst in instances:
            instance_class[inst.instance_id] = inst.class_id
    return Dataset(train, val, spec.class_table, instance_index, instance_class, spec)


# --------------------------------------------------------------------------
# Serialization
# --------------------------------------------------------------------------

def write_frame(frame: SceneFrame, path):
    pts = np.asarray(frame.points, dtype="<f4")
    buf = bytearray()
    buf += FRAME_MAGIC
    buf += struct.pack("<III", FRAME_VERSION, pts.shape[0], len(frame.boxes))
    buf += pts.tobytes()
    for box, iid, syn in zip(frame.boxes, frame.instance_ids, frame.synthetic):
        rec = np.zeros(13, dtype="<f4")
        rec[0:3] = box.center
        rec[3:6] = box.size
        rec[6] = box.yaw
        rec[7:9] = box.velocity
        rec[9] = 1.0 if syn else 0.0
        buf += rec.tobytes()
        buf += struct.pack("<II", box.class_id, iid)
    with open(path, "wb") as fh:
        fh.write(bytes(buf))


def read_frame(path) -> SceneFrame:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != FRAME_MAGIC:
        raise LoadError(f"{path}: bad frame magic")
    version, n_pts, n_boxes = struct.unpack_from("<III", blob, 4)
    if version != FRAME_VERSION:
        raise LoadError(f"{path}: unsupported frame version {version}")
    off = 16
    pts = np.frombuffer(blob, dtype="<f4", count=n_pts * 4, offset=off)
    pts = pts.reshape(n_pts, 4).astype(np.float64)
    off += n_pts * 16
    boxes, ids, syn = [], [], []
    for _ in range(n_boxes):
        rec = np.frombuffer(blob, dtype="<f4", count=13, offset=off)
        off += 52
        cid, iid = struct.unpack_from("<II", blob, off)
        off += 8
        boxes.append(Box3D(tuple(float(v) for v in rec[0:3]),
                           tuple(float(v) for v in rec[3:6]),
                           float(rec[6]), (float(rec[7]), float(rec[8])), int(cid)))
        ids.append(int(iid))
        syn.append(bool(rec[9] > 0.5))
    frame_id = Path(path).stem
    return SceneFrame(frame_id, pts, boxes, ids, syn)


def save_dataset(ds: Dataset, root):
    root = Path(root)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    meta = {
        "format_version": META_VERSION,
        "class_table": {"classes": ds.class_table.classes},
        "instance_index": {str(k): v for k, v in sorted(ds.instance_index.items())},
        "instance_class": {str(k): v for k, v in sorted(ds.instance_class.items())},
        "splits": {"train": [f.frame_id for f in ds.train_frames],
                   "val": [f.frame_id for f in ds.val_frames]},
        "spec": ds.spec.to_json() if ds.spec is not None else None,
    }
    with open(root / "meta.json", "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
    for frame in ds.all_frames():
        write_frame(frame, root / "frames" / f"{frame.frame_id}.bin")


def load_dataset(root) -> Dataset:
    root = Path(root)
    meta_path = root / "meta.json"
    if not meta_path.exists():
        raise LoadError(f"{meta_path}: missing dataset metadata")
    with open(meta_path) as fh:
        meta = json.load(fh)
    if meta.get("format_version") != META_VERSION:
        raise LoadError(f"{meta_path}: unsupported format version")
    table = ClassTable([tuple(row) for row in meta["class_table"]["classes"]])
    frames = {}
    for split in ("train", "val"):
        for fid in meta["splits"][split]:
            path = root / "frames" / f"{fid}.bin"
            if not path.exists():
                raise IntegrityError(f"frame {fid} listed in meta.json but "
                                     f"{path} is missing")
            frames[fid] = read_frame(path)
    index = {int(k): list(v) for k, v in meta["instance_index"].items()}
    for iid, fids in index.items():
        for fid in fids:
            if fid not in frames:
                raise IntegrityError(f"instance {iid} references unknown frame {fid}")
            if iid not in frames[fid].instance_ids:
                raise IntegrityError(f"instance {iid} not present in frame {fid}")
    spec = world_from_json(meta["spec"]) if meta.get("spec") else None
    return Dataset([frames[f] for f in meta["splits"]["train"]],
                   [frames[f] for f in meta["splits"]["val"]],
                   table, index,
                   {int(k): v for k, v in meta["instance_class"].items()},
                   spec)


def world_from_json(d: dict) -> WorldSpec:
    """Inverse of WorldSpec.to_json."""
    d = dict(d)
    d["class_table"] = ClassTable([tuple(row) for row in d["class_table"]["classes"]])
    d["frequency"] = dict(d["frequency"])
    d["size_ranges"] = {k: tuple(tuple(p) for p in v)
                        for k, v in d["size_ranges"].items()}
    for key in ("extent", "frames_per_instance", "instances_per_scene"):
        d[key] = tuple(d[key])
    return WorldSpec(**d)


def default_world(seed: int = 0, n_scenes: int = 40,
                  novel_weight: float = 4.0) -> WorldSpec:
    """Six-class desk world: four common base classes, two rare novel ones.

    The novel classes are hard but learnable: police_car shares the car
    footprint but rides taller (roof-rack profile), stroller sits between
    barrier and pedestrian height at a pram footprint.
    """
    table = ClassTable.from_names(
        ["car", "truck", "pedestrian", "barrier"],
        ["police_car", "stroller"],
    )
    freq = {"car": 100.0, "truck": 45.0, "pedestrian": 70.0, "barrier": 35.0,
            "police_car": novel_weight, "stroller": novel_weight * 0.75}
    sizes = {
        "car": ((4.0, 5.0), (1.8, 2.1), (1.4, 1.8)),
        "truck": ((6.5, 9.0), (2.4, 2.9), (2.6, 3.4)),
        "pedestrian": ((0.5, 0.8), (0.5, 0.8), (1.6, 1.9)),
        "barrier": ((2.0, 2.6), (0.3, 0.5), (0.9, 1.2)),
        "police_car": ((4.2, 5.2), (1.8, 2.1), (1.9, 2.3)),
        "stroller": ((0.7, 1.0), (0.5, 0.7), (1.2, 1.5)),
    }
    return WorldSpec(table, freq, sizes, n_scenes=n_scenes, seed=seed)

"""Annotation metadata ingest for few-shot task construction.

Reads nuScenes v1.0 style JSON tables (category, instance, sample_annotation,
sample, scene, visibility; records keyed by "token"), computes per-class
instance statistics, groups an instance's frames into a shot, assembles
N-way K-shot episodes, and rebalances validation splits by moving whole
instances with a preference for well-visible ones.

A sample's split comes from its scene: scene names starting with "val" are
validation, everything else train.  After rebalancing, split membership is
tracked per instance, so moved instances change split wholesale while
their scenes keep other residents untouched.

The episode builder also accepts a synthetic Dataset; there the class
vocabulary is integer class ids instead of category names.
"""

import csv
import io
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .core import points_in_box_mask
from .errors import CapacityError, ConfigError, IntegrityError, LoadError
from .seeding import DOMAIN_EPISODE, DOMAIN_REBALANCE, substream
from .synthgen import Dataset

TABLE_FILES = ("category.json", "instance.json", "sample_annotation.json",
               "sample.json", "scene.json", "visibility.json")
MIN_SHOT_POINTS = 5  # eligibility: an instance needs one frame this dense


@dataclass(frozen=True)
class Annotation:
    token: str
    instance: str
    sample: str
    visibility: int  # 1: 0-40% .. 4: 81-100%
    num_lidar_pts: int


@dataclass
class AnnotationDB:
    categories: Dict[str, str]  # category token -> name
    instance_category: Dict[str, str]  # instance token -> category token
    annotations: List[Annotation]
    sample_scene: Dict[str, str]
    sample_timestamp: Dict[str, int]
    scene_split: Dict[str, str]
    instance_split: Dict[str, str]
    _by_instance: Dict[str, List[Annotation]] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self._by_instance:
            for ann in self.annotations:
                self._by_instance.setdefault(ann.instance, []).append(ann)
            for token, anns in self._by_instance.items():
                anns.sort(key=lambda a: (self.sample_timestamp[a.sample], a.token))

    def class_name(self, instance: str) -> str:
        return self.categories[self.instance_category[instance]]

    def annotations_of(self, instance: str) -> List[Annotation]:
        if instance not in self.instance_category:
            raise KeyError(f"unknown instance {instance!r}")
        return self._by_instance.get(instance, [])

    def instances_of_class(self, name: str) -> List[str]:
        return sorted(t for t in self.instance_category if self.class_name(t) == name)

    def split_of(self, instance: str) -> str:
        return self.instance_split[instance]

    def max_points(self, instance: str) -> int:
        return max((a.num_lidar_pts for a in self.annotations_of(instance)), default=0)

    def mean_visibility(self, instance: str) -> float:
        anns = self.annotations_of(instance)
        return float(np.mean([a.visibility for a in anns])) if anns else 0.0


def _read_table(root: Path, name: str):
    path = root / name
    if not path.exists():
        raise LoadError(f"missing annotation table: {path}")
    with open(path) as fh:
        return json.load(fh)


def load_annotation_tables(root_path) -> AnnotationDB:
    """Parse and cross-link the six metadata tables; reject dangling refs."""
    root = Path(root_path)
    raw = {name: _read_table(root, name) for name in TABLE_FILES}
    categories = {r["token"]: r["name"] for r in raw["category.json"]}
    visibilities = {r["token"] for r in raw["visibility.json"]}
    scene_split = {}
    for r in raw["scene.json"]:
        scene_split[r["token"]] = "val" if r["name"].startswith("val") else "train"
    sample_scene, sample_timestamp = {}, {}
    for r in raw["sample.json"]:
        if r["scene_token"] not in scene_split:
            raise IntegrityError(f"sample {r['token']} references unknown scene "
                                 f"{r['scene_token']}")
        sample_scene[r["token"]] = r["scene_token"]
        sample_timestamp[r["token"]] = int(r["timestamp"])
    instance_category = {}
    for r in raw["instance.json"]:
        if r["category_token"] not in categories:
            raise IntegrityError(f"instance {r['token']} references unknown "
                                 f"category {r['category_token']}")
        instance_category[r["token"]] = r["category_token"]
    annotations = []
    for r in raw["sample_annotation.json"]:
        if r["instance_token"] not in instance_category:
            raise IntegrityError(f"annotation {r['token']} references unknown "
                                 f"instance {r['instance_token']}")
        if r["sample_token"] not in sample_scene:
            raise IntegrityError(f"annotation {r['token']} references unknown "
                                 f"sample {r['sample_token']}")
        if r["visibility_token"] not in visibilities:
            raise IntegrityError(f"annotation {r['token']} has unknown "
                                 f"visibility {r['visibility_token']}")
        annotations.append(Annotation(r["token"], r["instance_token"],
                                      r["sample_token"], int(r["visibility_token"]),
                                      int(r["num_lidar_pts"])))
    annotated = {a.instance for a in annotations}
    for token in instance_category:
        if token not in annotated:
            raise IntegrityError(f"instance {token} has no annotations")
    instance_split = {}
    for ann in annotations:
        split = scene_split[sample_scene[ann.sample]]
        prev = instance_split.setdefault(ann.instance, split)
        if prev != split:
            raise IntegrityError(f"instance {ann.instance} has annotations in "
                                 f"both splits")
    return AnnotationDB(categories, instance_category, annotations,
                        sample_scene, sample_timestamp, scene_split, instance_split)


@dataclass
class CountTable:
    """Per-class unique-instance counts by split."""

    rows: Dict[str, Tuple[int, int, int]]  # name -> (train, val, total)

    def to_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["class", "train", "val", "total"])
        for name in sorted(self.rows):
            train, val, total = self.rows[name]
            w.writerow([name, train, val, total])
        return out.getvalue()


def class_statistics(db: AnnotationDB) -> CountTable:
    rows: Dict[str, List[int]] = {name: [0, 0, 0] for name in db.categories.values()}
    for instance in db.instance_category:
        name = db.class_name(instance)
        split = db.split_of(instance)
        rows[name][0 if split == "train" else 1] += 1
        rows[name][2] += 1
    return CountTable({k: tuple(v) for k, v in rows.items()})


@dataclass
class Shot:
    """All frames of one instance, time-ordered."""

    instance_id: Union[str, int]
    class_id: Union[str, int]  # category name (DB) or class id (Dataset)
    frame_refs: List[str]

    def __post_init__(self):
        if not self.frame_refs:
            raise ConfigError(f"shot for {self.instance_id} has no frames")

    @property
    def t(self) -> int:
        return len(self.frame_refs)


def build_shot(db: AnnotationDB, instance_id: str) -> Shot:
    anns = db.annotations_of(instance_id)  # KeyError if unknown
    return Shot(instance_id, db.class_name(instance_id),
                [a.sample for a in anns])


@dataclass
class EpisodeSpec:
    """An N-way K-shot task: K distinct instance-shots per novel class."""

    novel_classes: list
    k: int
    shots: Dict[Union[str, int], List[Shot]]
    base_policy: str = "unrestricted"

    def __post_init__(self):
        for cls in self.novel_classes:
            got = self.shots.get(cls, [])
            if len(got) != self.k:
                raise ConfigError(f"class {cls!r} has {len(got)} shots, need {self.k}")
            ids = [s.instance_id for s in got]
            if len(set(ids)) != len(ids):
                raise ConfigError(f"class {cls!r} repeats an instance")

    def selected_instances(self):
        return {s.instance_id for shots in self.shots.values() for s in shots}

    def to_json(self) -> dict:
        return {
            "novel_classes": list(self.novel_classes),
            "k": self.k,
            "base_policy": self.base_policy,
            "shots": {str(cls): {str(s.instance_id): list(s.frame_refs)
                                 for s in shots}
                      for cls, shots in self.shots.items()},
        }


def episode_from_json(d: dict) -> EpisodeSpec:
    """Rebuild an episode from its saved manifest.

    JSON forces dict keys to strings; purely numeric class and instance
    keys are restored to ints (the Dataset vocabulary), anything else is
    kept as the annotation-table token it was.
    """
    def key(v):
        s = str(v)
        return int(s) if s.lstrip("-").isdigit() else s

    shots = {}
    for cls, by_iid in d["shots"].items():
        c = key(cls)
        shots[c] = [Shot(key(iid), c, list(refs)) for iid, refs in by_iid.items()]
    return EpisodeSpec([key(c) for c in d["novel_classes"]], int(d["k"]),
                       shots, d.get("base_policy", "unrestricted"))


def _episode_candidates(source, cls, min_points: int):
    """Eligible train instances of one class, in a deterministic order."""
    if isinstance(source, AnnotationDB):
        return [t for t in source.instances_of_class(cls)
                if source.split_of(t) == "train"
                and source.max_points(t) >= min_points]
    if isinstance(source, Dataset):
        frames = source.frame_map()
        train = source.train_ids()
        out = []
        for iid in sorted(source.instance_index):
            if source.instance_class.get(iid) != cls:
                continue
            fids = source.instance_index[iid]
            if not all(f in train for f in fids):
                continue
            best = 0
            for fid in fids:
                frame = frames[fid]
                box = frame.boxes[frame.instance_ids.index(iid)]
                best = max(best, int(points_in_box_mask(frame.points, box).sum()))
            if best >= min_points:
                out.append(iid)
        return out
    raise ConfigError(f"unsupported episode source {type(source).__name__}")


def _shot_from(source, cls, iid) -> Shot:
    if isinstance(source, AnnotationDB):
        return build_shot(source, iid)
    return Shot(iid, cls, list(source.instance_index[iid]))


def build_episode(source, novel_classes: Sequence, k: int, seed: int,
                  min_points: int = MIN_SHOT_POINTS) -> EpisodeSpec:
    """Pick K distinct eligible train instance-shots per novel class."""
    if k < 1:
        raise ConfigError("k must be at least 1")
    rng = substream(seed, DOMAIN_EPISODE)
    shots = {}
    for cls in novel_classes:
        cands = _episode_candidates(source, cls, min_points)
        if len(cands) < k:
            raise CapacityError(
                f"class {cls!r}: {len(cands)} eligible train instances "
                f"(need k={k}, eligibility is >= {min_points} points in a frame)")
        picked = rng.choice(len(cands), size=k, replace=False)
        shots[cls] = [_shot_from(source, cls, cands[i]) for i in picked]
    return EpisodeSpec(list(novel_classes), k, shots)


def rebalance_validation(db: AnnotationDB, targets: Dict[str, int], seed: int,
                         protected: Sequence[str] = (),
                         train_reserve: int = 10) -> AnnotationDB:
    """Move whole instances train -> val until per-class targets are met.

    Selection is random without replacement, weighted by each instance's
    mean visibility band, never touching `protected` instances (episode
    picks), and always leaving at least `train_reserve` train instances of
    every targeted class.
    """
    rng = substream(seed, DOMAIN_REBALANCE)
    protected = set(protected)
    new_split = dict(db.instance_split)
    for cls in sorted(targets):
        have = sum(1 for t in db.instances_of_class(cls) if new_split[t] == "val")
        need = targets[cls] - have
        if need <= 0:
            continue
        train_now = [t for t in db.instances_of_class(cls) if new_split[t] == "train"]
        cands = [t for t in train_now if t not in protected]
        if len(train_now) - need < train_reserve or need > len(cands):
            raise CapacityError(
                f"class {cls!r}: cannot move {need} instances while keeping "
                f"{train_reserve} in train ({len(train_now)} train, "
                f"{len(cands)} movable)")
        weights = np.array([db.mean_visibility(t) for t in cands], dtype=np.float64)
        probs = weights / weights.sum()
        for i in rng.choice(len(cands), size=need, replace=False, p=probs):
            new_split[cands[i]] = "val"
    if new_split == db.instance_split:
        return db
    return replace(db, instance_split=new_split)


# --------------------------------------------------------------------------
# Long-tail fixture in the nuScenes schema
# --------------------------------------------------------------------------

# (train, val) unique-instance counts for the rare classes, with a few
# common classes at reduced scale for context
FIXTURE_COUNTS = {
    "car": (40, 8),
    "truck": (20, 4),
    "adult": (30, 6),
    "barrier": (15, 3),
    "police": (24, 2),
    "stroller": (55, 8),
    "bicycle_rack": (108, 14),
    "pushable_pullable": (1473, 211),
}
FIXTURE_NOVEL = ("police", "stroller", "bicycle_rack", "pushable_pullable")


def write_table1_fixture(root, seed: int = 0) -> Path:
    """Emit a fixture whose rare-class instance counts match the long-tail
    statistics used throughout (police 24/2, stroller 55/8, bicycle_rack
    108/14, pushable_pullable 1473/211)."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    n_train_scenes, n_val_scenes, samples_per_scene = 80, 16, 30
    scenes, samples = [], []
    scene_samples: Dict[str, List[str]] = {}
    for split, count in (("train", n_train_scenes), ("val", n_val_scenes)):
        for i in range(count):
            stoken = f"{split}-scene-{i:04d}"
            toks = []
            for j in range(samples_per_scene):
                tok = f"smp-{stoken}-{j:03d}"
                samples.append({
                    "token": tok,
                    "timestamp": (len(scenes) * samples_per_scene + j) * 500000,
                    "scene_token": stoken,
                    "prev": toks[-1] if toks else "",
                    "next": "",
                })
                if toks:
                    samples[-2]["next"] = tok
                toks.append(tok)
            scenes.append({"token": stoken, "name": stoken,
                           "nbr_samples": samples_per_scene,
                           "first_sample_token": toks[0],
                           "last_sample_token": toks[-1]})
            scene_samples[stoken] = toks
    categories = [{"token": f"cat-{name}", "name": name, "description": ""}
                  for name in FIXTURE_COUNTS]
    train_scenes = [s["token"] for s in scenes if s["name"].startswith("train")]
    val_scenes = [s["token"] for s in scenes if s["name"].startswith("val")]
    instances, annotations = [], []
    for name, (n_train, n_val) in FIXTURE_COUNTS.items():
        for split, count, pool in (("train", n_train, train_scenes),
                                   ("val", n_val, val_scenes)):
            for i in range(count):
                itoken = f"inst-{name}-{split}-{i:04d}"
                scene = pool[int(rng.integers(len(pool)))]
                toks = scene_samples[scene]
                t = int(rng.integers(1, 5))
                start = int(rng.integers(0, len(toks) - t + 1))
                # two sparse instances per class: every frame under the
                # 5-point eligibility bar
                sparse = i < 2
                anns = []
                for j in range(t):
                    if sparse:
                        pts = int(rng.integers(0, MIN_SHOT_POINTS))
                    else:
                        pts = int(rng.integers(MIN_SHOT_POINTS, 200))
                    anns.append({
                        "token": f"ann-{itoken}-{j}",
                        "sample_token": toks[start + j],
                        "instance_token": itoken,
                        "visibility_token": str(rng.choice(
                            [1, 2, 3, 4], p=[0.2, 0.25, 0.25, 0.3])),
                        "num_lidar_pts": pts,
                        "num_radar_pts": 0,
                        "prev": "", "next": "",
                    })
                for j in range(1, t):
                    anns[j]["prev"] = anns[j - 1]["token"]
                    anns[j - 1]["next"] = anns[j]["token"]
                annotations.extend(anns)
                instances.append({"token": itoken, "category_token": f"cat-{name}",
                                  "nbr_annotations": t,
                                  "first_annotation_token": anns[0]["token"],
                                  "last_annotation_token": anns[-1]["token"]})
    visibility = [{"token": str(i), "level": f"v{lo}-{hi}",
                   "description": f"visibility {lo}-{hi}%"}
                  for i, (lo, hi) in enumerate([(0, 40), (41, 60), (61, 80),
                                                (81, 100)], start=1)]
    tables = {
        "category.json": categories,
        "instance.json": instances,
        "sample_annotation.json": annotations,
        "sample.json": samples,
        "scene.json": scenes,
        "visibility.json": visibility,
    }
    for name, rows in tables.items():
        with open(root / name, "w") as fh:
            json.dump(rows, fh, indent=0, sort_keys=True)
    return root

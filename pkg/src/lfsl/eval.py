"""Distance-threshold detection metrics and report aggregation.

Average precision follows the nuScenes recipe: detections sorted by
descending score greedily claim the nearest unclaimed ground-truth box in
the same frame, a claim counts as a true positive when the ground-plane
center distance is within the threshold (inclusive), precision is
interpolated at 101 recall points, and the area with recall and precision
below 0.10 is cut away and the rest normalized by 0.9^2.

Reports aggregate per-class APs over thresholds {0.5, 1, 2, 4} m into
bmAP (base classes), nmAP (novel classes), and cmAP (all classes), with
per-class maximum evaluation ranges.
"""

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .core import Box3D, ClassTable, center_distance
from .errors import ConfigError, ContractError
from .synthgen import Dataset

DEFAULT_THRESHOLDS = (0.5, 1.0, 2.0, 4.0)


@dataclass
class EvalConfig:
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS
    base_range: float = 51.2
    novel_range_default: float = 30.0
    class_ranges: Dict[str, float] = field(default_factory=lambda: {
        "police": 50.0, "police_car": 50.0, "stroller": 40.0})
    max_boxes_per_frame: int = 500
    min_recall: float = 0.10
    min_precision: float = 0.10

    def __post_init__(self):
        t = list(self.thresholds)
        if not t or any(x <= 0 for x in t) or sorted(t) != t or len(set(t)) != len(t):
            raise ConfigError(f"thresholds must be positive strictly increasing, got {t}")
        if self.max_boxes_per_frame < 1:
            raise ConfigError("max_boxes_per_frame must be positive")

    def range_for(self, name: str, role: str) -> float:
        if name in self.class_ranges:
            return self.class_ranges[name]
        return self.base_range if role == "base" else self.novel_range_default


def average_precision(dets: List[Box3D], gts: List[Box3D], threshold_m: float,
                      det_frames: Optional[Sequence] = None,
                      gt_frames: Optional[Sequence] = None,
                      min_recall: float = 0.10,
                      min_precision: float = 0.10) -> float:
    """AP for one class at one distance threshold.

    Inputs are assumed same-class and range-filtered.  When frame ids are
    given, matches are confined within a frame.  No ground truth -> 0.
    """
    npos = len(gts)
    if npos == 0 or not dets:
        return 0.0
    if det_frames is None:
        det_frames = [None] * len(dets)
    if gt_frames is None:
        gt_frames = [None] * len(gts)
    order = np.argsort([-d.score for d in dets], kind="stable")
    claimed = [False] * npos
    tp = np.zeros(len(dets))
    fp = np.zeros(len(dets))
    for rank, i in enumerate(order):
        det = dets[i]
        best, best_d = -1, np.inf
        for j, gt in enumerate(gts):
            if claimed[j] or gt_frames[j] != det_frames[i]:
                continue
            d = center_distance(det, gt)
            if d < best_d:
                best_d, best = d, j
        if best >= 0 and best_d <= threshold_m:
            claimed[best] = True
            tp[rank] = 1
        else:
            fp[rank] = 1
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(fp)
    recall = tp_cum / npos
    precision = tp_cum / (tp_cum + fp_cum)
    rec_interp = np.linspace(0.0, 1.0, 101)
    prec_interp = np.interp(rec_interp, recall, precision, right=0.0)
    tail = prec_interp[round(100 * min_recall) + 1:]
    ap = float(np.mean(np.clip(tail - min_precision, 0.0, 1.0))
               / (1.0 - min_precision))
    return min(1.0, max(0.0, ap))  # the mean/divide pair can round past 1


@dataclass
class EvalReport:
    per_class: Dict[str, dict]  # name -> {"ap": {thr: v}, "map": v, "role": r}
    bmap: float
    nmap: float
    cmap: float

    def to_json(self) -> dict:
        return {
            "per_class": {name: {"ap": {str(t): v for t, v in row["ap"].items()},
                                 "map": row["map"], "role": row["role"]}
                          for name, row in self.per_class.items()},
            "bmap": self.bmap, "nmap": self.nmap, "cmap": self.cmap,
        }

    def to_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        thresholds = list(next(iter(self.per_class.values()))["ap"]) if self.per_class else []
        w.writerow(["class", "role"] + [f"ap@{t:g}" for t in thresholds] + ["map"])
        for name, row in self.per_class.items():
            w.writerow([name, row["role"]]
                       + [f"{row['ap'][t]:.4f}" for t in thresholds]
                       + [f"{row['map']:.4f}"])
        for label, v in (("bmAP", self.bmap), ("nmAP", self.nmap), ("cmAP", self.cmap)):
            w.writerow([label, "", *[""] * len(thresholds), f"{v:.4f}"])
        return out.getvalue()

    def save(self, json_path=None, csv_path=None):
        if json_path is not None:
            with open(json_path, "w") as fh:
                json.dump(self.to_json(), fh, indent=1, sort_keys=True)
        if csv_path is not None:
            with open(csv_path, "w") as fh:
                fh.write(self.to_csv())


def _origin_range(box: Box3D) -> float:
    return float(np.hypot(box.center[0], box.center[1]))


def evaluate(detections: Dict[str, List[Box3D]], dataset: Dataset,
             class_table: ClassTable = None, cfg: EvalConfig = None) -> EvalReport:
    """Score per-frame detections against the dataset's validation split."""
    cfg = cfg or EvalConfig()
    class_table = class_table or dataset.class_table
    val_frames = {f.frame_id: f for f in dataset.val_frames}
    for fid in detections:
        if fid not in val_frames:
            raise ContractError(f"detections reference frame {fid!r} outside "
                                f"the validation split")
    for frame in dataset.val_frames:
        if any(frame.synthetic):
            raise ContractError(f"validation frame {frame.frame_id} contains "
                                f"synthetic boxes; augmentation leaked into val")
    capped: Dict[str, List[Box3D]] = {}
    for fid, frame in val_frames.items():
        dets = sorted(detections.get(fid, []), key=lambda b: -b.score)
        capped[fid] = dets[:cfg.max_boxes_per_frame]
    per_class = {}
    for cid, name, role in class_table.classes:
        max_range = cfg.range_for(name, role)
        cls_dets, det_fids = [], []
        cls_gts, gt_fids = [], []
        for fid, frame in val_frames.items():
            for b in capped[fid]:
                if b.class_id == cid and _origin_range(b) <= max_range:
                    cls_dets.append(b)
                    det_fids.append(fid)
            for b in frame.boxes:
                if b.class_id == cid and _origin_range(b) <= max_range:
                    cls_gts.append(b)
                    gt_fids.append(fid)
        aps = {t: average_precision(cls_dets, cls_gts, t, det_fids, gt_fids,
                                    cfg.min_recall, cfg.min_precision)
               for t in cfg.thresholds}
        per_class[name] = {"ap": aps, "map": float(np.mean(list(aps.values()))),
                           "role": role}
    def agg(role):
        vals = [row["map"] for row in per_class.values()
                if role is None or row["role"] == role]
        return float(np.mean(vals)) if vals else 0.0
    return EvalReport(per_class, agg("base"), agg("novel"), agg(None))

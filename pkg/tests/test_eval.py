import math

import numpy as np
import pytest

from lfsl.core import Box3D, ClassTable, SceneFrame
from lfsl.errors import ConfigError, ContractError
from lfsl.eval import EvalConfig, EvalReport, average_precision, evaluate
from lfsl.synthgen import Dataset


def box(x, y, cid=0, score=1.0):
    return Box3D((x, y, 0.5), (1.0, 1.0, 1.0), 0.0, (0.0, 0.0), cid, score)


# -- exhaustive reference ----------------------------------------------------
# Re-derives the PR curve by rebuilding the greedy matching from scratch for
# every score-ordered detection prefix, then applies the 101-point recall
# interpolation and the clipped normalization.

def reference_ap(dets, gts, thr, det_frames=None, gt_frames=None):
    if len(gts) == 0 or len(dets) == 0:
        return 0.0
    if det_frames is None:
        det_frames = [None] * len(dets)
    if gt_frames is None:
        gt_frames = [None] * len(gts)
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    recalls, precisions = [], []
    for k in range(1, len(order) + 1):
        used = [False] * len(gts)
        tps = 0
        for i in order[:k]:
            nearest = None
            nearest_d = math.inf
            for j in range(len(gts)):
                if used[j]:
                    continue
                if gt_frames[j] != det_frames[i]:
                    continue
                d = math.hypot(dets[i].center[0] - gts[j].center[0],
                               dets[i].center[1] - gts[j].center[1])
                if d < nearest_d:
                    nearest_d = d
                    nearest = j
            if nearest is not None and nearest_d <= thr:
                used[nearest] = True
                tps += 1
        recalls.append(tps / len(gts))
        precisions.append(tps / k)
    grid = np.linspace(0.0, 1.0, 101)
    interp = np.interp(grid, np.array(recalls), np.array(precisions), right=0.0)
    kept = interp[11:] - 0.10
    kept[kept < 0.0] = 0.0
    return min(1.0, max(0.0, float(kept.mean() / 0.90)))


def random_case(seed):
    rng = np.random.default_rng(seed)
    n_gt = int(rng.integers(0, 13))
    n_det = int(rng.integers(0, 21))
    frames = [f"f{i}" for i in range(int(rng.integers(1, 4)))]
    use_frames = bool(rng.integers(0, 2))
    gts, gfr = [], []
    for _ in range(n_gt):
        gts.append(box(*rng.uniform(-6, 6, size=2)))
        gfr.append(frames[int(rng.integers(len(frames)))])
    dets, dfr = [], []
    scores = rng.uniform(size=n_det)
    if n_det >= 2 and rng.uniform() < 0.3:
        scores[1] = scores[0]  # exercise tie-breaking
    for i in range(n_det):
        dets.append(box(*rng.uniform(-6, 6, size=2), score=float(scores[i])))
        dfr.append(frames[int(rng.integers(len(frames)))])
    thr = float(rng.choice([0.5, 1.0, 2.0, 4.0]))
    if not use_frames:
        gfr = dfr = None
    return dets, gts, thr, dfr, gfr


def test_ap_matches_exhaustive_reference():
    for seed in range(200):
        dets, gts, thr, dfr, gfr = random_case(seed)
        got = average_precision(dets, gts, thr, dfr, gfr)
        want = reference_ap(dets, gts, thr, dfr, gfr)
        assert abs(got - want) <= 1e-12, f"seed {seed}: {got} vs {want}"


def test_ap_perfect_detector():
    gts = [box(0, 0), box(3, 1), box(-2, 4)]
    dets = [Box3D(g.center, g.size, g.yaw, g.velocity, g.class_id, 1.0) for g in gts]
    assert average_precision(dets, gts, 0.5) == 1.0


def test_ap_empty_cases():
    assert average_precision([], [box(0, 0)], 2.0) == 0.0
    assert average_precision([box(0, 0)], [], 2.0) == 0.0
    assert average_precision([], [], 2.0) == 0.0


def test_ap_monotone_in_threshold():
    for seed in range(40):
        dets, gts, _, dfr, gfr = random_case(seed + 1000)
        aps = [average_precision(dets, gts, t, dfr, gfr)
               for t in (0.5, 1.0, 2.0, 4.0)]
        assert all(a <= b + 1e-15 for a, b in zip(aps, aps[1:]))
        assert all(0.0 <= a <= 1.0 for a in aps)


def test_duplicate_detections_only_highest_counts():
    gt = [box(0, 0)]
    one = [box(0.05, 0, score=0.9)]
    dup = one + [box(0.06, 0, score=0.8), box(0.04, 0, score=0.7)]
    assert average_precision(one, gt, 0.5) == 1.0
    ap_dup = average_precision(dup, gt, 0.5)
    assert ap_dup < 1.0  # extra claims on a taken GT are false positives


def test_matching_respects_frames():
    gt = [box(0, 0)]
    det = [box(0, 0, score=0.9)]
    assert average_precision(det, gt, 0.5, ["a"], ["a"]) == 1.0
    assert average_precision(det, gt, 0.5, ["a"], ["b"]) == 0.0


def test_boundary_distance_is_inclusive():
    gt = [box(0, 0)]
    det = [box(2.0, 0, score=1.0)]
    assert average_precision(det, gt, 2.0) == 1.0
    det = [box(2.0 + 1e-9, 0, score=1.0)]
    assert average_precision(det, gt, 2.0) == 0.0


# -- evaluate ----------------------------------------------------------------

TABLE = ClassTable.from_names(["car", "truck"], ["stroller"])


def _frame(fid, boxes):
    return SceneFrame(fid, np.zeros((0, 4)), boxes,
                      list(range(len(boxes))), [False] * len(boxes))


def _dataset(val_frames):
    return Dataset([], val_frames, TABLE, {}, {}, None)


def _gt_world():
    f0 = _frame("v0", [box(0, 0, cid=0), box(5, 5, cid=1), box(-3, 2, cid=2)])
    f1 = _frame("v1", [box(2, -4, cid=0), box(-6, 1, cid=2)])
    return _dataset([f0, f1])


def _detections_equal_gt(ds):
    return {f.frame_id: [Box3D(b.center, b.size, b.yaw, b.velocity, b.class_id, 1.0)
                         for b in f.boxes] for f in ds.val_frames}


def test_evaluate_perfect_detector():
    ds = _gt_world()
    report = evaluate(_detections_equal_gt(ds), ds)
    assert report.bmap == 1.0 and report.nmap == 1.0 and report.cmap == 1.0
    for row in report.per_class.values():
        assert row["map"] == 1.0


def test_evaluate_base_only_detections():
    ds = _gt_world()
    dets = _detections_equal_gt(ds)
    for fid in dets:
        dets[fid] = [b for b in dets[fid] if b.class_id != 2]
    report = evaluate(dets, ds)
    assert report.nmap == 0.0
    assert report.cmap == pytest.approx(report.bmap * 2 / 3, abs=1e-15)


def test_aggregates_are_exact_means():
    ds = _gt_world()
    dets = _detections_equal_gt(ds)
    dets["v1"] = dets["v1"][:1]  # drop some to vary per-class maps
    r = evaluate(dets, ds)
    maps = {n: row["map"] for n, row in r.per_class.items()}
    assert r.bmap == pytest.approx(np.mean([maps["car"], maps["truck"]]), abs=1e-15)
    assert r.nmap == maps["stroller"]
    assert r.cmap == pytest.approx(np.mean(list(maps.values())), abs=1e-15)
    for row in r.per_class.values():
        assert row["map"] == pytest.approx(np.mean(list(row["ap"].values())), abs=1e-15)


def test_out_of_range_gt_excluded_symmetrically():
    # stroller eval range is 40 m: a GT at 45 m disappears, and a detection
    # out there neither helps nor hurts
    near = box(10, 0, cid=2)
    far_gt = box(45, 0, cid=2)
    ds = _dataset([_frame("v0", [near, far_gt])])
    dets_near = {"v0": [Box3D(near.center, near.size, 0.0, (0, 0), 2, 0.9)]}
    r1 = evaluate(dets_near, ds)
    dets_far = {"v0": dets_near["v0"] + [box(45.2, 0, cid=2, score=0.95)]}
    r2 = evaluate(dets_far, ds)
    assert r1.per_class["stroller"]["map"] == 1.0
    assert r2.per_class["stroller"]["map"] == 1.0
    assert r1.to_json() == r2.to_json()


def test_synthetic_gt_in_val_rejected():
    f = _frame("v0", [box(0, 0, cid=0)])
    f.synthetic[0] = True
    with pytest.raises(ContractError, match="synthetic"):
        evaluate({}, _dataset([f]))


def test_unknown_detection_frame_rejected():
    ds = _gt_world()
    with pytest.raises(ContractError, match="outside"):
        evaluate({"nope": []}, ds)


def test_per_frame_detection_cap():
    gt = box(0, 0, cid=0)
    ds = _dataset([_frame("v0", [gt])])
    junk = [box(20 + i * 0.5, 15, cid=0, score=0.9 - i * 0.01) for i in range(5)]
    hit = box(0.1, 0, cid=0, score=0.5)  # ranks 6th of 6
    cfg5 = EvalConfig(max_boxes_per_frame=5)
    r = evaluate({"v0": junk + [hit]}, ds, cfg=cfg5)
    assert r.per_class["car"]["map"] == 0.0
    cfg10 = EvalConfig(max_boxes_per_frame=10)
    r = evaluate({"v0": junk + [hit]}, ds, cfg=cfg10)
    assert r.per_class["car"]["map"] > 0.0


def test_config_validation_and_ranges():
    with pytest.raises(ConfigError):
        EvalConfig(thresholds=(1.0, 0.5))
    with pytest.raises(ConfigError):
        EvalConfig(thresholds=(0.5, 0.5))
    cfg = EvalConfig()
    assert cfg.range_for("car", "base") == 51.2
    assert cfg.range_for("police", "novel") == 50.0
    assert cfg.range_for("stroller", "novel") == 40.0
    assert cfg.range_for("bicycle_rack", "novel") == 30.0


def test_report_serialization():
    ds = _gt_world()
    r = evaluate(_detections_equal_gt(ds), ds)
    doc = r.to_json()
    assert set(doc) == {"per_class", "bmap", "nmap", "cmap"}
    assert doc["per_class"]["stroller"]["ap"]["0.5"] == 1.0
    csv_text = r.to_csv()
    lines = csv_text.splitlines()
    assert lines[0] == "class,role,ap@0.5,ap@1,ap@2,ap@4,map"
    assert lines[-1].startswith("cmAP")

"""Grid rasterization, target encoding and peak decoding tests."""

import numpy as np
import pytest

from lfsl.bevgrid import (
    GridSpec,
    HeadOutputs,
    decode_detections,
    encode_targets,
    regression_vector,
    voxelize,
)
from lfsl.core import Box3D, ClassTable, SceneFrame
from lfsl.errors import ConfigError, ContractError
from lfsl.seeding import substream

# 8x8 cells spanning [-4, 4) on both axes
SPEC = GridSpec(8.0, 8.0, 1.0)
TABLE3 = ClassTable.from_names(["car", "ped"], ["stroller"])


def _points_inside(box, n, seed=0):
    rng = substream(seed, 11)
    c, s = np.cos(box.yaw), np.sin(box.yaw)
    bx = rng.uniform(-0.4, 0.4, n) * box.size[0]
    by = rng.uniform(-0.4, 0.4, n) * box.size[1]
    x = box.center[0] + c * bx - s * by
    y = box.center[1] + s * bx + c * by
    z = box.center[2] + rng.uniform(-0.4, 0.4, n) * box.size[2]
    return np.stack([x, y, z, rng.uniform(0, 1, n)], axis=1)


def _single_head_outputs(scores, reg, class_ids=None):
    n = scores.shape[0]
    ids = class_ids if class_ids is not None else [[c] for c in range(n)]
    return HeadOutputs([scores[c:c + 1] for c in range(n)],
                       [reg[c] for c in range(n)], ids)


def test_grid_spec_geometry():
    assert SPEC.shape == (8, 8)
    assert SPEC.x_min == -4.0
    assert SPEC.cell_of(-4.0, -4.0) == (0, 0)
    assert SPEC.cell_of(3.999, -3.5) == (7, 0)
    assert SPEC.cell_of(0.0, 0.0) == (4, 4)
    assert SPEC.center_of(2, 3) == (-1.5, -0.5)
    coarse = SPEC.coarser(2)
    assert coarse.shape == (4, 4)
    assert coarse.cell_size == 2.0
    with pytest.raises(ConfigError):
        GridSpec(8, 8, 3.0)  # 8 not a multiple of 3
    with pytest.raises(ConfigError):
        GridSpec(0, 8, 1.0)
    with pytest.raises(ConfigError):
        GridSpec(2, 8, 1.0)  # fewer than 4 cells on x
    with pytest.raises(ConfigError):
        GridSpec(8, 8, 1.0, feature_channels=3)
    with pytest.raises(ConfigError):
        GridSpec(6, 6, 1.0).coarser(4)


def test_voxelize_hand_case():
    pts = np.array([
        [-3.5, -3.5, 1.0, 0.2],
        [-3.5, -3.3, 3.0, 0.4],
        [-1.5, -0.5, -1.0, 0.6],
        [4.0, 1.0, 9.0, 0.9],    # x == x_max: outside
        [-4.01, 1.0, 9.0, 0.9],  # outside
    ])
    grid = voxelize(pts, SPEC)
    assert grid.shape == (5, 8, 8)
    assert grid[0, 0, 0] == pytest.approx(np.log1p(2))
    assert grid[1, 0, 0] == pytest.approx(2.0)   # mean z
    assert grid[2, 0, 0] == pytest.approx(3.0)   # max z
    assert grid[3, 0, 0] == pytest.approx(0.3)   # mean intensity
    assert grid[4, 0, 0] == 1.0
    assert grid[2, 2, 3] == pytest.approx(-1.0)
    assert grid[4].sum() == 2.0  # only two occupied cells
    assert grid[:, 5, 5].tolist() == [0, 0, 0, 0, 0]


def test_voxelize_single_point_and_empty():
    empty = voxelize(SceneFrame("f", np.zeros((0, 4))), SPEC)
    assert np.all(empty == 0.0)
    one = voxelize(np.array([[0.0, 0.0, 0.0, 0.0]]), SPEC)
    occupied = np.argwhere(one[4] == 1.0)
    assert occupied.tolist() == [[4, 4]]
    assert one[0, 4, 4] == pytest.approx(np.log(2.0))
    assert one[4].sum() == 1.0


def test_voxelize_matches_bucketing_oracle():
    rng = substream(17, 2)
    pts = np.column_stack([rng.uniform(-5, 5, 400), rng.uniform(-5, 5, 400),
                           rng.normal(size=400), rng.uniform(0, 1, 400)])
    grid = voxelize(pts, SPEC)
    for ix in range(8):
        for iy in range(8):
            x0, y0 = -4.0 + ix, -4.0 + iy
            sel = ((pts[:, 0] >= x0) & (pts[:, 0] < x0 + 1)
                   & (pts[:, 1] >= y0) & (pts[:, 1] < y0 + 1))
            n = int(sel.sum())
            assert grid[0, ix, iy] == pytest.approx(np.log1p(n), abs=1e-9)
            if n:
                assert grid[1, ix, iy] == pytest.approx(pts[sel, 2].mean(), abs=1e-9)
                assert grid[2, ix, iy] == pytest.approx(pts[sel, 2].max(), abs=1e-9)
                assert grid[3, ix, iy] == pytest.approx(pts[sel, 3].mean(), abs=1e-9)
            else:
                assert grid[:, ix, iy].tolist() == [0, 0, 0, 0, 0]


def test_voxelize_extra_channels_zero():
    spec7 = GridSpec(8, 8, 1.0, feature_channels=7)
    grid = voxelize(np.array([[0.0, 0.0, 1.0, 1.0]]), spec7)
    assert grid.shape == (7, 8, 8)
    assert np.all(grid[5:] == 0.0)
    with pytest.raises(ContractError):
        voxelize(np.zeros((2, 3)), SPEC)


def test_encode_single_box():
    box = Box3D(center=(-2.7, -1.4, 0.4), size=(1.2, 0.8, 1.5), yaw=0.3,
                velocity=(1.0, -2.0), class_id=1)
    frame = SceneFrame("f", _points_inside(box, 6), [box], [0])
    ts = encode_targets(frame, SPEC, TABLE3)
    assert ts.heatmaps.shape == (3, 8, 8)
    assert ts.n_encoded == [0, 1, 0]
    ix, iy = SPEC.cell_of(-2.7, -1.4)
    assert (ix, iy) == (1, 2)
    assert ts.heatmaps[1, ix, iy] == 1.0
    assert ts.heatmaps.sum() == 1.0
    r = ts.regression[1, :, ix, iy]
    np.testing.assert_allclose(r, [
        -2.7 - (-2.5), -1.4 - (-1.5), 0.4,
        np.log(1.2), np.log(0.8), np.log(1.5),
        np.sin(0.3), np.cos(0.3), 1.0, -2.0], rtol=1e-12, atol=1e-15)
    assert ts.positive_masks[1, ix, iy]
    assert ts.positive_masks.sum() == 1
    assert ts.ignore is None


def test_encode_centered_box_has_zero_offset():
    cx, cy = SPEC.center_of(6, 6)
    box = Box3D(center=(cx, cy, 0.0), size=(1, 1, 1), yaw=0.0, class_id=0)
    frame = SceneFrame("f", _points_inside(box, 8), [box], [0])
    ts = encode_targets(frame, SPEC, TABLE3)
    assert ts.regression[0, 0, 6, 6] == 0.0
    assert ts.regression[0, 1, 6, 6] == 0.0


def test_encode_filters_sparse_and_out_of_grid_boxes():
    sparse = Box3D(center=(-2.5, -2.5, 0), size=(1, 1, 1), yaw=0, class_id=0)
    outside = Box3D(center=(40.0, 1.5, 0), size=(1, 1, 1), yaw=0, class_id=0)
    unknown = Box3D(center=(0.5, 0.5, 0), size=(1, 1, 1), yaw=0, class_id=9)
    pts = np.vstack([_points_inside(sparse, 4), _points_inside(outside, 9),
                     _points_inside(unknown, 9)])
    frame = SceneFrame("f", pts, [sparse, outside, unknown], [0, 1, 2])
    ts = encode_targets(frame, SPEC, TABLE3)
    assert ts.heatmaps.sum() == 0.0
    assert ts.n_encoded == [0, 0, 0]


def test_encode_same_cell_same_class_keeps_better_supported_box():
    a = Box3D(center=(0.2, 0.2, 0), size=(1, 1, 1), yaw=0, class_id=0)
    b = Box3D(center=(0.7, 0.7, 0), size=(1, 1, 1), yaw=0, class_id=0)
    pts = np.vstack([_points_inside(a, 5, seed=1), _points_inside(b, 9, seed=2)])
    for order in ([a, b], [b, a]):  # winner must not depend on list order
        frame = SceneFrame("f", pts, order, list(range(len(order))))
        ts = encode_targets(frame, SPEC, TABLE3)
        assert ts.n_encoded[0] == 1
        assert ts.heatmaps[0].sum() == 1.0
        np.testing.assert_allclose(ts.regression[0, 0, 4, 4], 0.7 - 0.5, atol=1e-12)


def test_encode_same_cell_different_class_no_collision():
    a = Box3D(center=(0.2, 0.2, 0), size=(1, 1, 1), yaw=0, class_id=0)
    b = Box3D(center=(0.7, 0.7, 0), size=(1, 1, 1), yaw=0, class_id=1)
    pts = np.vstack([_points_inside(a, 6, seed=1), _points_inside(b, 6, seed=2)])
    ts = encode_targets(SceneFrame("f", pts, [a, b], [0, 1]), SPEC, TABLE3)
    assert ts.n_encoded[:2] == [1, 1]


def test_encode_ignore_ring():
    box = Box3D(center=(0.5, 0.5, 0), size=(1, 1, 1), yaw=0, class_id=0)
    frame = SceneFrame("f", _points_inside(box, 8), [box], [0])
    ts = encode_targets(frame, SPEC, TABLE3, ignore_radius=1.0)
    assert ts.ignore is not None
    assert not ts.ignore[0, 4, 4]  # center cell never ignored
    assert ts.ignore[0, 3, 4] and ts.ignore[0, 4, 3]
    assert not ts.ignore[0, 3, 3]  # diagonal is sqrt(2) > 1 away
    assert ts.ignore[1].sum() == 0  # other classes untouched


def test_decode_thresholds_and_local_maxima():
    scores = np.full((1, 8, 8), 0.05)
    reg = np.zeros((1, 10, 8, 8))
    reg[0, 7] = 1.0  # cos yaw, unit sizes via log 1 = 0
    scores[0, 2, 2] = 0.9
    scores[0, 2, 3] = 0.8   # adjacent, weaker: suppressed
    scores[0, 5, 5] = 0.3
    scores[0, 0, 7] = 0.09  # below floor
    dets = decode_detections(_single_head_outputs(scores, reg), SPEC)
    assert [(d.score, d.class_id) for d in dets] == [(0.9, 0), (0.3, 0)]
    assert dets[0].center[:2] == (-1.5, -1.5)


def test_decode_plateau_keeps_both_cells():
    scores = np.full((1, 8, 8), 0.01)
    reg = np.zeros((1, 10, 8, 8))
    reg[0, 7] = 1.0
    scores[0, 3, 3] = scores[0, 3, 4] = 0.6
    dets = decode_detections(_single_head_outputs(scores, reg), SPEC)
    assert len(dets) == 2


def test_decode_cap_and_ordering():
    rng = substream(3, 7)
    scores = rng.uniform(0.11, 0.99, (2, 8, 8))
    scores[:, ::2, :] = 0.001  # comb pattern: odd rows become local maxima
    reg = np.zeros((2, 10, 8, 8))
    reg[:, 7] = 1.0
    outs = _single_head_outputs(scores, reg)
    dets = decode_detections(outs, SPEC, max_boxes=5)
    assert len(dets) == 5
    s = [d.score for d in dets]
    assert s == sorted(s, reverse=True)
    all_dets = decode_detections(outs, SPEC, max_boxes=500)
    assert s == [d.score for d in all_dets[:5]]  # cap keeps the best


def test_head_outputs_stacking_shares_head_regression():
    scores = np.stack([np.full((4, 4), 0.2), np.full((4, 4), 0.7)])
    reg = np.ones((10, 4, 4)) * 3.0
    outs = HeadOutputs([scores], [reg], [[0, 1]])
    st_scores, st_reg = outs.stacked()
    assert st_scores.shape == (2, 4, 4)
    np.testing.assert_array_equal(st_reg[0], st_reg[1])
    with pytest.raises(ContractError):
        HeadOutputs([scores], [reg], [[0]])


def test_encode_decode_round_trip():
    rng = substream(21, 13)
    boxes, pts = [], []
    for i, c in enumerate([0, 1, 1]):
        b = Box3D(center=(-3.0 + 2.4 * i, 2.0 - 1.3 * i, rng.uniform(-1, 1)),
                  size=tuple(rng.uniform(0.5, 2.0, 3)),
                  yaw=rng.uniform(-np.pi, np.pi),
                  velocity=tuple(rng.uniform(-3, 3, 2)), class_id=c)
        boxes.append(b)
        pts.append(_points_inside(b, 8, seed=i))
    frame = SceneFrame("f", np.vstack(pts), boxes, list(range(3)))
    ts = encode_targets(frame, SPEC, TABLE3)
    assert sum(ts.n_encoded) == 3
    scores = np.where(ts.heatmaps == 1.0, 0.95, 0.02)
    dets = decode_detections(_single_head_outputs(scores, ts.regression), SPEC)
    assert len(dets) == 3
    for b in boxes:
        match = min(dets, key=lambda d: np.hypot(d.center[0] - b.center[0],
                                                 d.center[1] - b.center[1]))
        assert match.class_id == b.class_id
        np.testing.assert_allclose(match.center, b.center, atol=1e-9)
        np.testing.assert_allclose(match.size, b.size, rtol=1e-9)
        assert abs(np.angle(np.exp(1j * (match.yaw - b.yaw)))) < 1e-9
        np.testing.assert_allclose(match.velocity, b.velocity, atol=1e-9)


def test_decode_all_below_floor_is_empty():
    scores = np.full((2, 8, 8), 0.099)
    reg = np.zeros((2, 10, 8, 8))
    reg[:, 7] = 1.0
    assert decode_detections(_single_head_outputs(scores, reg), SPEC) == []


def test_decode_grid_mismatch():
    scores = np.full((1, 4, 4), 0.2)
    reg = np.zeros((1, 10, 4, 4))
    with pytest.raises(ContractError):
        decode_detections(_single_head_outputs(scores, reg), SPEC)


def test_regression_vector_matches_channel_doc():
    b = Box3D(center=(3.0, 4.0, 1.0), size=(2.0, 1.0, 1.5), yaw=-2.0,
              velocity=(0.5, 0.25))
    v = regression_vector(b, 2.5, 4.5)
    assert v[0] == pytest.approx(0.5)
    assert v[1] == pytest.approx(-0.5)
    assert v[6] == pytest.approx(np.sin(-2.0))
    assert v[7] == pytest.approx(np.cos(-2.0))

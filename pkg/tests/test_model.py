import numpy as np
import pytest

from lfsl.bevgrid import N_REG_CHANNELS, TargetSet
from lfsl.errors import ConfigError, ContractError, IntegrityError, LoadError
from lfsl.loss import LossConfig
from lfsl.model import (ALL_TRAINABLE, ArchSpec, add_novel_head, apply_freeze,
                        forward_backward, freeze_mask_for_setting, init_model,
                        load_checkpoint, model_grad_check, save_checkpoint)

ARCH = ArchSpec(in_channels=5, extractor=(8, 8), shared=8, head_hidden=8,
                base_heads=((0,), (1,), (2,)))


def _input(seed=0, hw=12):
    return np.random.default_rng(seed).normal(size=(ARCH.in_channels, hw, hw))


def _targets(model, seed=1, hw=6, p=0.12):
    rng = np.random.default_rng(seed)
    n = model.n_class
    heat = (rng.uniform(size=(n, hw, hw)) < p).astype(np.float64)
    reg = rng.normal(size=(n, N_REG_CHANNELS, hw, hw))
    return TargetSet(heat, reg, [int(h.sum()) for h in heat])


def test_init_deterministic():
    a = init_model(ARCH, 42).tensors()
    b = init_model(ARCH, 42).tensors()
    c = init_model(ARCH, 43).tensors()
    assert a.keys() == b.keys()
    for k in a:
        assert np.array_equal(a[k], b[k]), k
    assert any(not np.array_equal(a[k], c[k]) for k in a)


def test_initial_scores_in_band():
    m = init_model(ARCH, 3)
    for training in (False, True):
        outs = m.forward(_input(5), training=training)
        for s in outs.scores:
            assert s.min() > 0.001 and s.max() < 0.1


def test_scores_strictly_inside_unit_interval():
    m = init_model(ARCH, 3)
    outs = m.forward(_input(6) * 50.0)  # large activations
    for s in outs.scores:
        assert np.all(s > 0.0) and np.all(s < 1.0)


def test_partition_validation():
    with pytest.raises(ConfigError):
        ArchSpec(base_heads=((0,), (0, 1)))  # class in two heads
    with pytest.raises(ConfigError):
        ArchSpec(base_heads=((0,), (2,)))  # gap
    with pytest.raises(ConfigError):
        ArchSpec(novel_policy="banana")


def test_add_novel_head_isolation():
    m = init_model(ARCH, 9)
    x = _input(2)
    before = m.forward(x)
    snap = {k: v.copy() for k, v in m.tensors().items()}
    for cid in (3, 4, 5, 6):
        add_novel_head(m, cid, seed=9)
    after = m.forward(x)
    for k, v in snap.items():
        assert np.array_equal(v, m.tensors()[k]), k
    for j in range(len(before.scores)):
        assert np.array_equal(before.scores[j], after.scores[j])
        assert np.array_equal(before.regression[j], after.regression[j])
    assert after.scores[-1].shape == (1, 6, 6)
    assert after.regression[-1].shape == (N_REG_CHANNELS, 6, 6)
    assert m.novel_class_ids() == [3, 4, 5, 6]


def test_add_novel_head_template_size():
    m = init_model(ARCH, 1)
    n0 = sum(v.size for v in m.tensors().values())
    add_novel_head(m, 3, seed=1)
    n1 = sum(v.size for v in m.tensors().values())
    h, s = ARCH.head_hidden, ARCH.shared
    # conv3x3 + bn (4 tensors) + cls 1x1 + reg 1x1
    expected = (9 * h * s + h) + 4 * h + (h + 1) + (10 * h + 10)
    assert n1 - n0 == expected


def test_single_policy_grows_one_channel():
    arch = ArchSpec(in_channels=5, extractor=(8,), shared=8, head_hidden=8,
                    base_heads=((0,), (1,)), novel_policy="single")
    m = init_model(arch, 4)
    add_novel_head(m, 2, seed=4)
    assert len(m.heads) == 3 and m.heads[-1].group == "N"
    w_before = m.heads[-1].cls.W.copy()
    n0 = sum(v.size for v in m.tensors().values())
    add_novel_head(m, 3, seed=4)
    assert len(m.heads) == 3  # same head, one more channel
    assert m.heads[-1].class_ids == [2, 3]
    assert np.array_equal(m.heads[-1].cls.W[:1], w_before)
    assert sum(v.size for v in m.tensors().values()) - n0 == arch.head_hidden + 1
    outs = m.forward(_input(0))
    assert outs.scores[-1].shape[0] == 2


def test_merged_policy_grafts_onto_base_head():
    arch = ArchSpec(in_channels=5, extractor=(8,), shared=8, head_hidden=8,
                    base_heads=((0,), (1,)), novel_policy="merged",
                    merge_map=((2, 1),))
    m = init_model(arch, 4)
    x = _input(3)
    before = m.forward(x)
    add_novel_head(m, 2, seed=4)
    assert len(m.heads) == 2
    assert m.heads[1].all_class_ids == [1, 2]
    assert m.group_of("h1.x2.W") == "N"
    after = m.forward(x)
    # pre-existing channels and the shared regression map are untouched
    assert np.array_equal(before.scores[1], after.scores[1][:1])
    assert np.array_equal(before.regression[1], after.regression[1])


def test_duplicate_class_rejected():
    m = init_model(ARCH, 2)
    with pytest.raises(ConfigError):
        add_novel_head(m, 1, seed=2)
    add_novel_head(m, 3, seed=2)
    with pytest.raises(ConfigError):
        add_novel_head(m, 3, seed=2)


def test_freeze_mask_table():
    expect = {2: "BENS", 3: "ENS", 4: "BNS", 5: "NS", 6: "BN",
              7: "N", 8: "BN", 9: "N"}
    for setting, groups in expect.items():
        mask = freeze_mask_for_setting(setting)
        assert "".join(sorted(mask.trainable)) == "".join(sorted(groups)), setting
        assert mask.use_sab == (setting in (8, 9))
    for bad in (1, 10, 0, -3):
        with pytest.raises(ConfigError):
            freeze_mask_for_setting(bad)


def test_setting7_gradients_only_novel():
    m = init_model(ARCH, 6)
    add_novel_head(m, 3, seed=6)
    apply_freeze(m, 7)
    _, _, grads = forward_backward(m, _input(1), _targets(m), LossConfig(kind="sab"))
    assert grads.tensors
    assert {m.group_of(k) for k in grads.tensors} == {"N"}


def test_setting5_gradients_shared_and_novel():
    m = init_model(ARCH, 6)
    add_novel_head(m, 3, seed=6)
    apply_freeze(m, 5)
    _, _, grads = forward_backward(m, _input(1), _targets(m), LossConfig())
    assert {m.group_of(k) for k in grads.tensors} == {"N", "S"}
    assert not any(k.endswith(("running_mean", "running_var")) for k in grads.tensors)


def test_zero_target_frame_finite():
    m = init_model(ARCH, 8)
    m.active_mask = ALL_TRAINABLE
    n = m.n_class
    targets = TargetSet(np.zeros((n, 6, 6)), np.zeros((n, N_REG_CHANNELS, 6, 6)), [0] * n)
    for kind in ("sab", "focal"):
        outs, breakdown, grads = forward_backward(m, _input(4), targets,
                                                  LossConfig(kind=kind))
        assert np.isfinite(breakdown.total)
        assert breakdown.regression == 0.0
        for v in grads.tensors.values():
            assert np.all(np.isfinite(v))


def test_frozen_bn_statistics_do_not_drift():
    m = init_model(ARCH, 5)
    add_novel_head(m, 3, seed=5)
    apply_freeze(m, 7)
    t = m.tensors()
    base_stats = {k: v.copy() for k, v in t.items()
                  if k.endswith(("running_mean", "running_var")) and not k.startswith("h3")}
    novel_var = t["h3.bn.running_var"].copy()
    forward_backward(m, _input(7), _targets(m), LossConfig(kind="sab"))
    t = m.tensors()
    for k, v in base_stats.items():
        assert np.array_equal(v, t[k]), k
    assert not np.array_equal(novel_var, t["h3.bn.running_var"])


def test_shape_contract_errors():
    m = init_model(ARCH, 1)
    with pytest.raises(ContractError):
        m.forward(np.zeros((4, 12, 12)))  # wrong channel count
    bad = TargetSet(np.zeros((3, 5, 5)), np.zeros((3, N_REG_CHANNELS, 5, 5)), [0] * 3)
    with pytest.raises(ContractError):
        forward_backward(m, _input(0), bad, LossConfig())


def test_model_fd_spot_check():
    worst = 0.0
    for seed in range(12):
        kind = "sab" if seed % 2 else "focal"
        worst = max(worst, model_grad_check(seed, kind=kind))
    assert worst < 1e-6


def test_checkpoint_roundtrip_bitwise(tmp_path):
    m = init_model(ARCH, 11)
    add_novel_head(m, 3, seed=11)
    add_novel_head(m, 4, seed=12)
    path = tmp_path / "m.lfsm"
    save_checkpoint(m, path)
    m2 = load_checkpoint(path)
    t1, t2 = m.tensors(), m2.tensors()
    assert t1.keys() == t2.keys()
    for k in t1:
        assert np.array_equal(t1[k], t2[k]), k
        assert m.group_of(k) == m2.group_of(k)
    x = _input(9)
    a, b = m.forward(x), m2.forward(x)
    for j in range(len(a.scores)):
        assert np.array_equal(a.scores[j], b.scores[j])
    assert m2.arch == m.arch
    assert m2.init_seed == m.init_seed
    # saving the reload reproduces the file byte for byte
    path2 = tmp_path / "m2.lfsm"
    save_checkpoint(m2, path2)
    assert path.read_bytes() == path2.read_bytes()


def test_checkpoint_corruption_detected(tmp_path):
    m = init_model(ARCH, 11)
    path = tmp_path / "m.lfsm"
    save_checkpoint(m, path)
    blob = bytearray(path.read_bytes())
    blob[len(blob) // 2] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(IntegrityError):
        load_checkpoint(path)


def test_checkpoint_bad_magic_and_version(tmp_path):
    path = tmp_path / "junk.lfsm"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(LoadError):
        load_checkpoint(path)
    m = init_model(ARCH, 11)
    good = tmp_path / "m.lfsm"
    save_checkpoint(m, good)
    blob = bytearray(good.read_bytes())
    blob[4] = 99  # version field
    import zlib
    import struct
    blob[-4:] = struct.pack("<I", zlib.crc32(bytes(blob[:-4])) & 0xFFFFFFFF)
    good.write_bytes(bytes(blob))
    with pytest.raises(LoadError):
        load_checkpoint(good)

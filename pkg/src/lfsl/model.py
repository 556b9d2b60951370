"""BEV center-heatmap detector with a four-part parameter topology.

Parameters belong to exactly one group:

* E: strided conv stem (feature extractor),
* S: one shared conv block feeding every head,
* B: base-class heads,
* N: novel-class heads (or novel channels grafted onto other heads).

Heads follow one template: conv3x3 -> norm -> rectifier -> two 1x1 convs
(class heatmap logits, regression channels).  Novel classes are attached
according to the architecture's novel-head policy: ``per-class`` adds one
full head per class, ``single`` grows one shared novel head by a channel
per class, ``merged`` grafts an extra 1x1 classifier onto an existing base
head (sharing that head's features and regression output).

The checkpoint file is a little-endian archive: magic "LFSM", u32 version,
u32 tensor count, then per tensor: u32 name length, UTF-8 name, group tag
byte, u8 dtype code (0 = f64, 1 = u8), u32 rank, u32 dims, raw data; a
CRC32 of all preceding bytes trails the file.  The model structure rides
along as a u8 pseudo-tensor ``__arch_json__`` tagged 'A'.
"""

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .bevgrid import N_REG_CHANNELS, HeadOutputs, TargetSet
from .errors import ConfigError, ContractError, IntegrityError, LoadError
from .loss import LossConfig, LossBreakdown, focal_loss, sab_loss, total_loss, weighted_bce_value, sab_weights
from .nn import LOGIT_CLIP, BatchNorm2D, Conv2D, ReLU, sigmoid, sigmoid_backward
from .seeding import DOMAIN_GRADCHECK, DOMAIN_MODEL_INIT, substream

HEATMAP_BIAS = float(np.log(0.01 / 0.99))  # logit(0.01)
CLS_WEIGHT_SCALE = 0.01  # keeps initial scores pinned near the bias value
GROUPS = ("E", "S", "B", "N")

CHECKPOINT_MAGIC = b"LFSM"
CHECKPOINT_VERSION = 1
_DTYPE_F64 = 0
_DTYPE_U8 = 1
_ARCH_KEY = "__arch_json__"

_SETTING_TRAINABLE = {
    2: frozenset("ESBN"),
    3: frozenset("ESN"),
    4: frozenset("SBN"),
    5: frozenset("SN"),
    6: frozenset("BN"),
    7: frozenset("N"),
    8: frozenset("BN"),
    9: frozenset("N"),
}
_SETTING_SAB = frozenset({8, 9})

NOVEL_POLICIES = ("per-class", "single", "merged")


@dataclass(frozen=True)
class FreezeMask:
    """Which parameter groups an optimizer step may touch."""

    setting: Optional[int]
    trainable: frozenset
    use_sab: bool = False

    def trains(self, group: str) -> bool:
        return group in self.trainable


ALL_TRAINABLE = FreezeMask(None, frozenset(GROUPS))


def freeze_mask_for_setting(setting: int) -> FreezeMask:
    if setting not in _SETTING_TRAINABLE:
        raise ConfigError(f"unknown fine-tuning setting {setting!r} (valid: 2..9)")
    return FreezeMask(setting, _SETTING_TRAINABLE[setting], setting in _SETTING_SAB)


def apply_freeze(model: "Model", setting: int) -> FreezeMask:
    """Activate the named fine-tuning setting on the model."""
    mask = freeze_mask_for_setting(setting)
    model.active_mask = mask
    return mask


@dataclass(frozen=True)
class ArchSpec:
    """Architecture hyper-parameters; the base-head layout partitions classes."""

    in_channels: int = 5
    extractor: Tuple[int, ...] = (16, 16, 16)
    shared: int = 16
    head_hidden: int = 32
    base_heads: Tuple[Tuple[int, ...], ...] = ((0,), (1,), (2,), (3,))
    novel_policy: str = "per-class"
    merge_map: Tuple[Tuple[int, int], ...] = ()  # (novel class -> base head index)

    def __post_init__(self):
        if self.in_channels < 1 or not self.extractor or self.shared < 1 or self.head_hidden < 1:
            raise ConfigError("widths must be positive and extractor nonempty")
        flat = [c for head in self.base_heads for c in head]
        if not flat or sorted(flat) != list(range(len(flat))):
            raise ConfigError(
                f"base_heads must partition class ids 0..n-1, got {self.base_heads}")
        if self.novel_policy not in NOVEL_POLICIES:
            raise ConfigError(f"unknown novel head policy {self.novel_policy!r}")
        for cid, hid in self.merge_map:
            if not 0 <= hid < len(self.base_heads):
                raise ConfigError(f"merge target {hid} for class {cid} out of range")

    @property
    def n_base_classes(self) -> int:
        return sum(len(h) for h in self.base_heads)

    def merge_target(self, class_id: int) -> int:
        for cid, hid in self.merge_map:
            if cid == class_id:
                return hid
        return class_id % len(self.base_heads)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "ArchSpec":
        return cls(
            in_channels=d["in_channels"],
            extractor=tuple(d["extractor"]),
            shared=d["shared"],
            head_hidden=d["head_hidden"],
            base_heads=tuple(tuple(h) for h in d["base_heads"]),
            novel_policy=d["novel_policy"],
            merge_map=tuple((c, h) for c, h in d["merge_map"]),
        )


class _Head:
    """Head template: conv3x3 -> BN -> ReLU -> {cls 1x1, reg 1x1}."""

    def __init__(self, rng, cin: int, hidden: int, class_ids, group: str):
        self.conv = Conv2D(rng, cin, hidden, 3)
        self.bn = BatchNorm2D(hidden)
        self.relu = ReLU()
        self.cls = Conv2D(rng, hidden, len(class_ids), 1,
                          weight_scale=CLS_WEIGHT_SCALE, bias_init=HEATMAP_BIAS)
        self.reg = Conv2D(rng, hidden, N_REG_CHANNELS, 1)
        self.class_ids = list(class_ids)
        self.group = group
        self.extra_cls: List[Tuple[int, Conv2D]] = []

    @property
    def all_class_ids(self) -> List[int]:
        return self.class_ids + [cid for cid, _ in self.extra_cls]

    def channel_group(self, row: int) -> str:
        return self.group if row < len(self.class_ids) else "N"


class Model:
    """Detector instance: stem (E), shared block (S), heads (B/N)."""

    def __init__(self, arch: ArchSpec, init_seed: int):
        self.arch = arch
        self.init_seed = int(init_seed)
        self.active_mask = ALL_TRAINABLE
        rng = substream(init_seed, DOMAIN_MODEL_INIT)
        self.stem = []
        cin = arch.in_channels
        for i, width in enumerate(arch.extractor):
            stride = 2 if i == 0 else 1
            self.stem.append((Conv2D(rng, cin, width, 3, stride=stride),
                              BatchNorm2D(width), ReLU()))
            cin = width
        self.s_conv = Conv2D(rng, cin, arch.shared, 3)
        self.s_bn = BatchNorm2D(arch.shared)
        self.s_relu = ReLU()
        self.heads: List[_Head] = [
            _Head(rng, arch.shared, arch.head_hidden, ids, "B")
            for ids in arch.base_heads
        ]
        self._fwd = None  # (x, head forward caches) for backward

    # ---- structure ----------------------------------------------------

    @property
    def n_class(self) -> int:
        return 1 + max(c for h in self.heads for c in h.all_class_ids)

    def assigned_classes(self):
        out = []
        for h in self.heads:
            out.extend(h.all_class_ids)
        return out

    def novel_class_ids(self) -> List[int]:
        ids = []
        for h in self.heads:
            if h.group == "N":
                ids.extend(h.class_ids)
            ids.extend(cid for cid, _ in h.extra_cls)
        return sorted(ids)

    def tensors(self) -> Dict[str, np.ndarray]:
        """Name -> array for every tensor, order fixed by structure."""
        out: Dict[str, np.ndarray] = {}

        def put_conv(prefix, conv):
            out[f"{prefix}.W"] = conv.W
            out[f"{prefix}.b"] = conv.b

        def put_bn(prefix, bn):
            out[f"{prefix}.gamma"] = bn.gamma
            out[f"{prefix}.beta"] = bn.beta
            out[f"{prefix}.running_mean"] = bn.running_mean
            out[f"{prefix}.running_var"] = bn.running_var

        for i, (conv, bn, _) in enumerate(self.stem):
            put_conv(f"e{i}.conv", conv)
            put_bn(f"e{i}.bn", bn)
        put_conv("s.conv", self.s_conv)
        put_bn("s.bn", self.s_bn)
        for j, head in enumerate(self.heads):
            put_conv(f"h{j}.conv", head.conv)
            put_bn(f"h{j}.bn", head.bn)
            put_conv(f"h{j}.cls", head.cls)
            put_conv(f"h{j}.reg", head.reg)
            for cid, xc in head.extra_cls:
                put_conv(f"h{j}.x{cid}", xc)
        return out

    def group_of(self, name: str) -> str:
        if name.startswith("e"):
            return "E"
        if name.startswith("s."):
            return "S"
        if name.startswith("h"):
            j = int(name[1:name.index(".")])
            if ".x" in name:
                return "N"
            return self.heads[j].group
        raise ContractError(f"tensor {name!r} has no group")

    def trainable_names(self) -> List[str]:
        """Tensors the optimizer may update under the active mask."""
        names = []
        for name in self.tensors():
            if name.endswith(("running_mean", "running_var")):
                continue  # state, not parameters
            if self.active_mask.trains(self.group_of(name)):
                names.append(name)
        return names

    # ---- forward / backward -------------------------------------------

    def _bn_training(self, group: str, training: bool) -> bool:
        # frozen groups run their normalization in inference mode so their
        # running statistics cannot drift
        return training and self.active_mask.trains(group)

    def forward(self, x: np.ndarray, training: bool = False) -> HeadOutputs:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 3 or x.shape[0] != self.arch.in_channels:
            raise ContractError(
                f"input must be ({self.arch.in_channels}, H, W), got {x.shape}")
        h = x
        for conv, bn, relu in self.stem:
            h = relu.forward(bn.forward(conv.forward(h), self._bn_training("E", training)))
        h = self.s_relu.forward(
            self.s_bn.forward(self.s_conv.forward(h), self._bn_training("S", training)))
        scores, regs, ids, caches = [], [], [], []
        for head in self.heads:
            t = head.relu.forward(
                head.bn.forward(head.conv.forward(h),
                                self._bn_training(head.group, training)))
            z_parts = [head.cls.forward(t)]
            z_parts += [xc.forward(t) for _, xc in head.extra_cls]
            z = np.concatenate(z_parts, axis=0)
            f = sigmoid(z)
            r = head.reg.forward(t)
            scores.append(f)
            regs.append(r)
            ids.append(head.all_class_ids)
            caches.append((z, f))
        self._fwd = caches
        return HeadOutputs(scores, regs, ids)

    def relu_margin(self) -> float:
        """Min |preactivation| over every rectifier in the last forward."""
        margins = [relu.last_margin for _, _, relu in self.stem]
        margins.append(self.s_relu.last_margin)
        margins.extend(head.relu.last_margin for head in self.heads)
        return min(margins)

    def logit_margin(self) -> float:
        """Distance of the last forward's cls logits from the squash clip."""
        return min(LOGIT_CLIP - float(np.abs(z).max()) for z, _ in self._fwd)

    def backward(self, d_scores: List[np.ndarray], d_regs: List[np.ndarray]) -> Dict[str, np.ndarray]:
        """Backprop per-head output gradients; returns trainable gradients."""
        if self._fwd is None:
            raise ContractError("backward called before forward")
        mask = self.active_mask
        grads: Dict[str, np.ndarray] = {}

        def record(name, arr):
            grads[name] = arr

        d_shared = None
        for j, head in enumerate(self.heads):
            z, f = self._fwd[j]
            dz = sigmoid_backward(d_scores[j], f, z)
            k_main = len(head.class_ids)
            dt, dW, db = head.cls.backward(dz[:k_main])
            if mask.trains(head.group):
                record(f"h{j}.cls.W", dW)
                record(f"h{j}.cls.b", db)
            for row, (cid, xc) in enumerate(head.extra_cls):
                dx, dW, db = xc.backward(dz[k_main + row:k_main + row + 1])
                dt = dt + dx
                if mask.trains("N"):
                    record(f"h{j}.x{cid}.W", dW)
                    record(f"h{j}.x{cid}.b", db)
            dx, dW, db = head.reg.backward(d_regs[j])
            dt = dt + dx
            if mask.trains(head.group):
                record(f"h{j}.reg.W", dW)
                record(f"h{j}.reg.b", db)
            dt = head.relu.backward(dt)
            dt, dgamma, dbeta = head.bn.backward(dt)
            dt, dW, db = head.conv.backward(dt)
            if mask.trains(head.group):
                record(f"h{j}.bn.gamma", dgamma)
                record(f"h{j}.bn.beta", dbeta)
                record(f"h{j}.conv.W", dW)
                record(f"h{j}.conv.b", db)
            d_shared = dt if d_shared is None else d_shared + dt
        if mask.trains("S") or mask.trains("E"):
            d = self.s_relu.backward(d_shared)
            d, dgamma, dbeta = self.s_bn.backward(d)
            d, dW, db = self.s_conv.backward(d)
            if mask.trains("S"):
                grads["s.bn.gamma"] = dgamma
                grads["s.bn.beta"] = dbeta
                grads["s.conv.W"] = dW
                grads["s.conv.b"] = db
            if mask.trains("E"):
                for i in range(len(self.stem) - 1, -1, -1):
                    conv, bn, relu = self.stem[i]
                    d = relu.backward(d)
                    d, dgamma, dbeta = bn.backward(d)
                    d, dW, db = conv.backward(d)
                    grads[f"e{i}.bn.gamma"] = dgamma
                    grads[f"e{i}.bn.beta"] = dbeta
                    grads[f"e{i}.conv.W"] = dW
                    grads[f"e{i}.conv.b"] = db
        return grads


def init_model(arch: ArchSpec, seed: int) -> Model:
    """Fresh model with fan-in-scaled uniform weights, deterministic per seed."""
    return Model(arch, seed)


def add_novel_head(model: Model, class_id: int, seed: int) -> Model:
    """Attach capacity for one novel class per the arch's novel-head policy.

    Pre-existing tensors are untouched, so prior head outputs on any input
    are bitwise unchanged.
    """
    class_id = int(class_id)
    if class_id in model.assigned_classes():
        raise ConfigError(f"class {class_id} is already assigned to a head")
    rng = substream(seed, DOMAIN_MODEL_INIT, class_id)
    arch = model.arch
    if arch.novel_policy == "per-class":
        model.heads.append(_Head(rng, arch.shared, arch.head_hidden, [class_id], "N"))
    elif arch.novel_policy == "single":
        novel = next((h for h in model.heads if h.group == "N"), None)
        if novel is None:
            model.heads.append(_Head(rng, arch.shared, arch.head_hidden, [class_id], "N"))
        else:
            grown = Conv2D(rng, arch.head_hidden, 1, 1,
                           weight_scale=CLS_WEIGHT_SCALE, bias_init=HEATMAP_BIAS)
            novel.cls.W = np.concatenate([novel.cls.W, grown.W], axis=0)
            novel.cls.b = np.concatenate([novel.cls.b, grown.b])
            novel.cls.cout += 1
            novel.class_ids.append(class_id)
    else:  # merged: extra classifier channel on a base head
        head = model.heads[arch.merge_target(class_id)]
        head.extra_cls.append((class_id, Conv2D(rng, arch.head_hidden, 1, 1,
                                                weight_scale=CLS_WEIGHT_SCALE,
                                                bias_init=HEATMAP_BIAS)))
    return model


@dataclass
class Gradients:
    """Trainable-tensor gradients plus pool stats for the training log."""

    tensors: Dict[str, np.ndarray]
    num_pos: int = 0
    num_hn: int = 0


def forward_backward(model: Model, feature_grid: np.ndarray, targets: TargetSet,
                     loss_cfg: LossConfig):
    """Run the full objective on one frame.

    Returns (HeadOutputs, LossBreakdown, Gradients).  The classification
    loss is summed per class channel (pools per channel); the regression
    loss is one mean absolute error over every positive (class, cell,
    channel) entry of the frame.  Channels of heads whose group is
    trainable use the configured classification loss; when SAB is selected
    it applies to trainable channels only (optionally just novel ones),
    frozen channels keep the focal baseline.
    """
    outs = model.forward(feature_grid, training=True)
    oh, ow = outs.scores[0].shape[1:]
    if targets.heatmaps.shape[1:] != (oh, ow):
        raise ContractError(
            f"targets are {targets.heatmaps.shape[1:]}, heads emit {(oh, ow)}")
    if targets.heatmaps.shape[0] < model.n_class:
        raise ContractError(
            f"targets cover {targets.heatmaps.shape[0]} classes, model has {model.n_class}")
    mask = model.active_mask
    cls_total = 0.0
    num_pos = num_hn = 0
    d_scores = []
    reg_abs_sum = 0.0
    reg_entries = 0
    reg_signs = []
    for j, head in enumerate(model.heads):
        k = len(outs.class_ids[j])
        dsc = np.zeros_like(outs.scores[j])
        dreg = np.zeros_like(outs.regression[j])
        for row in range(k):
            c = outs.class_ids[j][row]
            f = outs.scores[j][row]
            y = targets.heatmaps[c]
            ign = None if targets.ignore is None else targets.ignore[c]
            group = head.channel_group(row)
            use_sab = (loss_cfg.kind == "sab" and mask.trains(group)
                       and (not loss_cfg.sab_novel_only or group == "N"))
            if use_sab:
                value, grad, stats = sab_loss(f, y, loss_cfg.sab, ignore_mask=ign)
                num_pos += stats[0].num_pos
                num_hn += stats[0].num_hn
            else:
                value, grad = focal_loss(f, y, loss_cfg.alpha, loss_cfg.gamma,
                                         ignore_mask=ign)
                valid = np.ones_like(y, dtype=bool) if ign is None else ~ign.astype(bool)
                num_pos += int(((y == 1.0) & valid).sum())
                num_hn += int(((y == 0.0) & valid & (f > loss_cfg.sab.theta)).sum())
            cls_total += value
            dsc[row] = grad
            pos = targets.positive_masks[c]
            n_cells = int(pos.sum())
            if n_cells:
                diff = (outs.regression[j] - targets.regression[c]) * pos
                reg_abs_sum += float(np.abs(diff).sum())
                reg_entries += n_cells * N_REG_CHANNELS
                dreg += np.sign(diff)
        d_scores.append(dsc)
        reg_signs.append(dreg)
    if reg_entries:
        reg_value = reg_abs_sum / reg_entries
        scale = loss_cfg.lam / reg_entries
        d_regs = [s * scale for s in reg_signs]
    else:
        reg_value = 0.0
        d_regs = reg_signs
    breakdown = total_loss(cls_total, reg_value, loss_cfg.lam)
    grads = model.backward(d_scores, d_regs)
    return outs, breakdown, Gradients(grads, num_pos, num_hn)


# --------------------------------------------------------------------------
# Checkpoint serialization
# --------------------------------------------------------------------------

def _structure_json(model: Model) -> bytes:
    doc = {
        "arch": model.arch.to_json(),
        "init_seed": model.init_seed,
        "heads": [
            {"classes": head.class_ids, "group": head.group,
             "extra": [cid for cid, _ in head.extra_cls]}
            for head in model.heads
        ],
    }
    return json.dumps(doc, sort_keys=True).encode("utf-8")


def save_checkpoint(model: Model, path):
    buf = bytearray()
    buf += CHECKPOINT_MAGIC
    tensors = model.tensors()
    buf += struct.pack("<II", CHECKPOINT_VERSION, len(tensors) + 1)

    def emit(name: str, group: str, arr: np.ndarray, dtype_code: int):
        raw = name.encode("utf-8")
        buf.extend(struct.pack("<I", len(raw)))
        buf.extend(raw)
        buf.extend(group.encode("ascii"))
        buf.extend(struct.pack("<BI", dtype_code, arr.ndim))
        buf.extend(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.extend(np.ascontiguousarray(arr).tobytes())

    for name, arr in tensors.items():
        emit(name, model.group_of(name), np.asarray(arr, dtype="<f8"), _DTYPE_F64)
    arch_blob = np.frombuffer(_structure_json(model), dtype=np.uint8)
    emit(_ARCH_KEY, "A", arch_blob, _DTYPE_U8)
    buf += struct.pack("<I", zlib.crc32(bytes(buf)) & 0xFFFFFFFF)
    with open(path, "wb") as fh:
        fh.write(bytes(buf))


def _rebuild_structure(doc: dict) -> Model:
    arch = ArchSpec.from_json(doc["arch"])
    model = Model(arch, doc["init_seed"])
    rng = substream(0, DOMAIN_MODEL_INIT)  # placeholder weights, overwritten below
    model.heads = []
    for spec in doc["heads"]:
        head = _Head(rng, arch.shared, arch.head_hidden, spec["classes"], spec["group"])
        for cid in spec["extra"]:
            head.extra_cls.append((cid, Conv2D(rng, arch.head_hidden, 1, 1)))
        model.heads.append(head)
    return model


def load_checkpoint(path) -> Model:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12 or blob[:4] != CHECKPOINT_MAGIC:
        raise LoadError(f"{path}: not a model checkpoint (bad magic)")
    stored_crc = struct.unpack("<I", blob[-4:])[0]
    if zlib.crc32(blob[:-4]) & 0xFFFFFFFF != stored_crc:
        raise IntegrityError(f"{path}: checksum mismatch")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise LoadError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    entries = {}
    groups = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off:off + name_len].decode("utf-8")
        off += name_len
        group = chr(blob[off])
        off += 1
        dtype_code, rank = struct.unpack_from("<BI", blob, off)
        off += 5
        dims = struct.unpack_from(f"<{rank}I", blob, off)
        off += 4 * rank
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        if dtype_code == _DTYPE_F64:
            arr = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(dims).copy()
            off += 8 * n
        elif dtype_code == _DTYPE_U8:
            arr = np.frombuffer(blob, dtype=np.uint8, count=n, offset=off).reshape(dims).copy()
            off += n
        else:
            raise LoadError(f"{path}: unknown dtype code {dtype_code}")
        entries[name] = arr
        groups[name] = group
    if _ARCH_KEY not in entries:
        raise IntegrityError(f"{path}: missing structure record")
    doc = json.loads(entries.pop(_ARCH_KEY).tobytes().decode("utf-8"))
    model = _rebuild_structure(doc)
    tensors = model.tensors()
    if set(tensors) != set(entries):
        missing = set(tensors) ^ set(entries)
        raise IntegrityError(f"{path}: tensor set mismatch ({sorted(missing)[:4]}...)")
    for name, arr in entries.items():
        dest = tensors[name]
        if dest.shape != arr.shape:
            raise IntegrityError(f"{path}: {name} has shape {arr.shape}, expected {dest.shape}")
        if groups[name] != model.group_of(name):
            raise IntegrityError(f"{path}: {name} tagged {groups[name]}, expected "
                                 f"{model.group_of(name)}")
        dest[...] = arr
    return model


# --------------------------------------------------------------------------
# Whole-network finite-difference verification
# --------------------------------------------------------------------------

def _toy_setup(case_seed: int, kind: str):
    """Small model + frame with all nonlinearities clear of their kinks."""
    rng = substream(case_seed, DOMAIN_GRADCHECK, 1)
    arch = ArchSpec(in_channels=3, extractor=(4,), shared=4, head_hidden=5,
                    base_heads=((0,), (1,)))
    cfg = LossConfig(kind=kind)
    for attempt in range(64):
        model = init_model(arch, int(rng.integers(1 << 30)))
        x = rng.normal(size=(3, 6, 6))
        heat = (rng.uniform(size=(2, 3, 3)) < 0.3).astype(np.float64)
        reg = rng.normal(size=(2, N_REG_CHANNELS, 3, 3))
        targets = TargetSet(heat, reg, [int(h.sum()) for h in heat])
        outs = model.forward(x, training=True)
        score_margin = min(float(np.abs(s - cfg.sab.theta).min()) for s in outs.scores)
        if (model.relu_margin() > 1e-4 and model.logit_margin() > 1.0
                and score_margin > 1e-4):
            return model, x, targets, cfg
    raise ContractError("could not build a kink-free verification case")


def model_grad_check(case_seed: int, eps: float = 1e-5, kind: str = "sab",
                     entry_limit: Optional[int] = None) -> float:
    """Max relative FD error over the trainable tensors of a toy model.

    The difference quotient is taken on the frozen-weight objective (SAB
    pool weights held at the base point, matching the detached-weight
    gradient).  The comparison scale has an absolute floor of 5e-3, so
    tiny components are held to |a - n| < 5e-9, about 4x the f64
    rounding noise of differencing a loss of this magnitude at this eps.
    ``entry_limit`` caps how many parameter entries are differenced (a
    seed-deterministic sample); None sweeps every entry.
    """
    model, x, targets, cfg = _toy_setup(case_seed, kind)
    outs, _, grads = forward_backward(model, x, targets, cfg)
    frozen_w = []
    for j in range(len(model.heads)):
        per_channel = []
        for row, c in enumerate(outs.class_ids[j]):
            w, _ = sab_weights(outs.scores[j][row], targets.heatmaps[c], cfg.sab)
            per_channel.append(w)
        frozen_w.append(per_channel)

    def objective() -> float:
        o = model.forward(x, training=True)
        cls = 0.0
        reg_abs = 0.0
        entries = 0
        for j, head in enumerate(model.heads):
            for row, c in enumerate(o.class_ids[j]):
                f = o.scores[j][row]
                y = targets.heatmaps[c]
                if cfg.kind == "sab":
                    cls += weighted_bce_value(f, y, frozen_w[j][row], cfg.sab.epsilon)
                else:
                    cls += focal_loss(f, y, cfg.alpha, cfg.gamma)[0]
                pos = targets.positive_masks[c]
                n_cells = int(pos.sum())
                if n_cells:
                    reg_abs += float(np.abs((o.regression[j] - targets.regression[c]) * pos).sum())
                    entries += n_cells * N_REG_CHANNELS
        reg = reg_abs / entries if entries else 0.0
        return cls + cfg.lam * reg

    tensors = model.tensors()
    entries = [(name, i) for name in model.trainable_names()
               for i in range(tensors[name].size)]
    if entry_limit is not None and entry_limit < len(entries):
        pick = substream(case_seed, DOMAIN_GRADCHECK, 2)
        keep = pick.choice(len(entries), size=entry_limit, replace=False)
        entries = [entries[int(k)] for k in np.sort(keep)]
    worst = 0.0
    for name, i in entries:
        flat = tensors[name].reshape(-1)
        gflat = grads.tensors[name].reshape(-1)
        orig = flat[i]
        flat[i] = orig + eps
        up = objective()
        flat[i] = orig - eps
        down = objective()
        flat[i] = orig
        numeric = (up - down) / (2.0 * eps)
        denom = max(abs(numeric), abs(gflat[i]), 5e-3)
        worst = max(worst, abs(numeric - gflat[i]) / denom)
    return worst

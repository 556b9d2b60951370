"""Two-stage training: base pretraining, then few-shot fine-tuning.

The base stage sees only base-class supervision; novel objects stay in the
point cloud as unlabeled background.  Fine-tuning runs on the frames of an
episode's shots under a freeze setting, optionally pasting stored shot
objects into sparse frames (GT-AUG) and optionally swapping the focal
baseline for the adaptive-balance classification loss.
"""

import dataclasses
import json
import math
import os
import time
import zlib
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .bevgrid import GridSpec, TargetSet, encode_targets, voxelize
from .core import Box3D, SceneFrame, bev_footprints_intersect, points_in_box_mask
from .errors import ConfigError, ContractError
from .ingest import EpisodeSpec
from .loss import LossConfig, SabConfig
from .model import (ALL_TRAINABLE, Model, add_novel_head, apply_freeze,
                    forward_backward, load_checkpoint, save_checkpoint)
from .seeding import DOMAIN_AUG, DOMAIN_TRAIN, substream
from .synthgen import Dataset

STAGES = ("base", "finetune")
_STAGE_EPOCHS = {"base": 20, "finetune": 80}
_BASE_LR_MAX = 1e-3
_BASE_LR_MIN = 1e-4
_FINETUNE_LR_SCALE = 0.1


@dataclass
class TrainConfig:
    """Everything one stage needs besides the model and the frames.

    Learning rates and epoch counts left as ``None`` resolve to the stage
    defaults; the fine-tune stage runs at one tenth of the base rates.
    """

    stage: str
    grid: GridSpec
    epochs: Optional[int] = None
    batch_size: int = 4
    lr_max: Optional[float] = None
    lr_min: Optional[float] = None
    ramp_frac: float = 0.4
    weight_decay: float = 0.01
    setting: int = 7
    loss_choice: str = "focal"
    theta: float = 0.1
    sab_novel_only: bool = False
    lam: float = 0.25
    min_points: int = 5
    ignore_radius: float = 0.0
    gt_aug_min: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.epochs is None:
            self.epochs = _STAGE_EPOCHS[self.stage]
        scale = 1.0 if self.stage == "base" else _FINETUNE_LR_SCALE
        if self.lr_max is None:
            self.lr_max = _BASE_LR_MAX * scale
        if self.lr_min is None:
            self.lr_min = _BASE_LR_MIN * scale
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 < self.lr_min <= self.lr_max:
            raise ConfigError(
                f"need 0 < lr_min <= lr_max, got {self.lr_min}, {self.lr_max}")
        if not 0.0 < self.ramp_frac < 1.0:
            raise ConfigError(f"ramp_frac must be in (0, 1), got {self.ramp_frac}")
        if self.weight_decay < 0.0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.loss_choice not in ("focal", "sab"):
            raise ConfigError(f"loss_choice must be focal or sab, got {self.loss_choice!r}")
        if self.gt_aug_min < 0:
            raise ConfigError(f"gt_aug_min must be >= 0, got {self.gt_aug_min}")

    def loss_config(self, use_sab: bool = False) -> LossConfig:
        kind = "sab" if (use_sab or self.loss_choice == "sab") else "focal"
        return LossConfig(kind=kind, sab=SabConfig(theta=self.theta),
                          lam=self.lam, sab_novel_only=self.sab_novel_only)

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        d["grid"] = dataclasses.asdict(self.grid)
        return d


def lr_at(config: TrainConfig, step: int, total_steps: int) -> float:
    """One-cycle rate for a zero-based step index.

    Cosine ramp from the minimum to the maximum over the first
    ``ramp_frac`` of the run, cosine anneal back down over the rest.  Both
    endpoints sit exactly at the minimum, the peak exactly at the maximum.
    """
    if total_steps < 1:
        raise ConfigError(f"total_steps must be >= 1, got {total_steps}")
    if not 0 <= step < total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps})")
    lo, hi = config.lr_min, config.lr_max
    if total_steps == 1:
        return lo
    peak = min(int(round(config.ramp_frac * total_steps)), total_steps - 2)
    if step <= peak:
        if peak == 0:
            return lo
        u = step / peak
        return lo + (hi - lo) * 0.5 * (1.0 - math.cos(math.pi * u))
    u = (step - peak) / (total_steps - 1 - peak)
    return lo + (hi - lo) * 0.5 * (1.0 + math.cos(math.pi * u))


class AdamW:
    """Adam with decoupled weight decay.

    Decay applies to convolution kernels only (names ending ``.W``);
    biases and normalization parameters are never decayed.  Parameters are
    updated in place so the model sees every step.
    """

    def __init__(self, params: Dict[str, np.ndarray], weight_decay: float = 0.0,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.weight_decay = float(weight_decay)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: Dict[str, np.ndarray], lr: float):
        if lr <= 0.0:
            raise ConfigError(f"learning rate must stay positive, got {lr}")
        unknown = set(grads) - set(self.params)
        if unknown:
            raise ContractError(f"gradients for unmanaged tensors: {sorted(unknown)}")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(p)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay and name.endswith(".W"):
                update = update + self.weight_decay * p
            p -= lr * update


# ---- GT-AUG ------------------------------------------------------------


@dataclass
class ShotCluster:
    """One stored view of a shot object: its points in box coordinates."""

    class_id: int
    instance_id: int
    size: Tuple[float, float, float]
    points: np.ndarray  # (n, 4), xy rotated to yaw 0, origin at box center


@dataclass
class ShotBank:
    """Box-relative point clusters harvested from an episode's shots."""

    clusters: Dict[int, List[ShotCluster]]

    def classes(self) -> List[int]:
        return sorted(c for c, views in self.clusters.items() if views)


def build_shot_bank(dataset: Dataset, episode: EpisodeSpec,
                    min_points: int = 5) -> ShotBank:
    """Extract every shot view dense enough to paste.

    Views with fewer than ``min_points`` in-box points are skipped unless a
    class would otherwise have none, in which case its densest view is kept
    so augmentation stays possible.
    """
    frames = dataset.frame_map()
    clusters: Dict[int, List[ShotCluster]] = {}
    fallback: Dict[int, ShotCluster] = {}
    for cls, shots in episode.shots.items():
        cid = int(cls)
        clusters.setdefault(cid, [])
        for shot in shots:
            for fid in shot.frame_refs:
                frame = frames[fid]
                try:
                    idx = frame.instance_ids.index(shot.instance_id)
                except ValueError:
                    raise ContractError(
                        f"instance {shot.instance_id} missing from frame {fid}")
                box = frame.boxes[idx]
                inside = frame.points[points_in_box_mask(frame.points, box)]
                local = inside.copy()
                local[:, 0] -= box.center[0]
                local[:, 1] -= box.center[1]
                local[:, 2] -= box.center[2]
                c, s = math.cos(-box.yaw), math.sin(-box.yaw)
                x = local[:, 0] * c - local[:, 1] * s
                y = local[:, 0] * s + local[:, 1] * c
                local[:, 0], local[:, 1] = x, y
                view = ShotCluster(cid, shot.instance_id, box.size, local)
                if len(inside) >= min_points:
                    clusters[cid].append(view)
                elif cid not in fallback or len(local) > len(fallback[cid].points):
                    fallback[cid] = view
    for cid, views in clusters.items():
        if not views and cid in fallback:
            views.append(fallback[cid])
    return ShotBank(clusters)


def _paste_span(frame: SceneFrame):
    if len(frame.points) == 0:
        return (-10.0, 10.0, -10.0, 10.0)
    return (float(frame.points[:, 0].min()), float(frame.points[:, 0].max()),
            float(frame.points[:, 1].min()), float(frame.points[:, 1].max()))


def gt_aug(frame: SceneFrame, bank: ShotBank, min_count: int = 2,
           seed: int = 0) -> SceneFrame:
    """Paste stored shot objects until each bank class reaches ``min_count``.

    Placement is uniform over the frame's occupied span with a random yaw;
    a candidate colliding with any existing footprint is rejected and after
    ten failed attempts the object is quietly skipped.  Pasted boxes carry
    the synthetic flag and the source instance id.  The input frame is
    never mutated.
    """
    rng = substream(seed, DOMAIN_AUG, zlib.crc32(frame.frame_id.encode()))
    boxes = list(frame.boxes)
    iids = list(frame.instance_ids)
    syn = list(frame.synthetic)
    chunks = [np.asarray(frame.points, dtype=np.float64)]
    x_lo, x_hi, y_lo, y_hi = _paste_span(frame)
    for cls in bank.classes():
        views = bank.clusters[cls]
        have = sum(1 for b in boxes if b.class_id == cls)
        while have < min_count:
            placed = None
            for _ in range(10):
                view = views[int(rng.integers(len(views)))]
                half = math.hypot(view.size[0], view.size[1]) / 2.0
                if x_hi - x_lo <= 2 * half or y_hi - y_lo <= 2 * half:
                    continue
                cx = float(rng.uniform(x_lo + half, x_hi - half))
                cy = float(rng.uniform(y_lo + half, y_hi - half))
                yaw = float(rng.uniform(-math.pi, math.pi))
                cand = Box3D((cx, cy, view.size[2] / 2.0), view.size, yaw,
                             (0.0, 0.0), cls, 1.0)
                if any(bev_footprints_intersect(cand, b) for b in boxes):
                    continue
                placed = (view, cand)
                break
            if placed is None:
                break  # augmentation failure is not fatal
            view, cand = placed
            c, s = math.cos(cand.yaw), math.sin(cand.yaw)
            pts = view.points.copy()
            x = pts[:, 0] * c - pts[:, 1] * s + cand.center[0]
            y = pts[:, 0] * s + pts[:, 1] * c + cand.center[1]
            pts[:, 0], pts[:, 1] = x, y
            pts[:, 2] += cand.center[2]
            chunks.append(pts)
            boxes.append(cand)
            iids.append(view.instance_id)
            syn.append(True)
            have += 1
    return SceneFrame(frame.frame_id, np.vstack(chunks), boxes, iids, syn)


# ---- stage runner ------------------------------------------------------


@dataclass
class FinetuneData:
    """Fine-tuning bundle: the episode picks the frames, the dataset holds them."""

    dataset: Dataset
    episode: EpisodeSpec


@dataclass
class TrainLog:
    """Per-epoch scalar history, one JSON object per line on disk."""

    records: List[dict] = field(default_factory=list)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_jsonl())

    @classmethod
    def load(cls, path) -> "TrainLog":
        with open(path) as fh:
            return cls([json.loads(line) for line in fh if line.strip()])


def _base_examples(model: Model, dataset: Dataset, config: TrainConfig):
    """Precompute (features, targets) for the base stage.

    Novel boxes are dropped before target encoding so they supervise
    nothing, but their points stay in the cloud as plain background.
    """
    base_ids = set(dataset.class_table.base_ids)
    out_grid = config.grid.coarser(2)
    examples = []
    for frame in dataset.train_frames:
        kept = [b for b in frame.boxes if b.class_id in base_ids]
        labels = SceneFrame(frame.frame_id, frame.points, kept,
                            [0] * len(kept), [False] * len(kept))
        targets = encode_targets(labels, out_grid, dataset.class_table,
                                 min_points=config.min_points,
                                 ignore_radius=config.ignore_radius)
        examples.append((voxelize(frame, config.grid), targets))
    return examples


def _finetune_frames(data: FinetuneData) -> List[SceneFrame]:
    frames = data.dataset.frame_map()
    train = data.dataset.train_ids()
    fids = sorted({fid for shots in data.episode.shots.values()
                   for shot in shots for fid in shot.frame_refs})
    for fid in fids:
        if fid not in train:
            raise ContractError(f"episode frame {fid} is not in the train split")
    return [frames[fid] for fid in fids]


def _encode(frame: SceneFrame, config: TrainConfig, table) -> Tuple[np.ndarray, TargetSet]:
    targets = encode_targets(frame, config.grid.coarser(2), table,
                             min_points=config.min_points,
                             ignore_radius=config.ignore_radius)
    return voxelize(frame, config.grid), targets


def run_stage(model: Model, data, config: TrainConfig, out_dir=None):
    """Train one stage in place and return ``(model, TrainLog)``.

    ``data`` is a Dataset for the base stage and a FinetuneData bundle for
    fine-tuning.  When ``out_dir`` is given the final checkpoint, the JSONL
    log and the resolved config are written there.
    """
    if config.stage == "base":
        if not isinstance(data, Dataset):
            raise ConfigError("base stage trains on a Dataset")
        dataset = data
        model.active_mask = ALL_TRAINABLE
        loss_cfg = config.loss_config(use_sab=False)
        static = _base_examples(model, dataset, config)
        frames = None
        bank = None
    else:
        if not isinstance(data, FinetuneData):
            raise ConfigError("finetune stage trains on a FinetuneData bundle")
        dataset = data.dataset
        mask = apply_freeze(model, config.setting)
        loss_cfg = config.loss_config(use_sab=mask.use_sab)
        frames = _finetune_frames(data)
        static = None
        bank = (build_shot_bank(dataset, data.episode, config.min_points)
                if config.gt_aug_min > 0 else None)
        if bank is not None and not bank.classes():
            bank = None

    n = len(static) if static is not None else len(frames)
    if n == 0:
        raise ConfigError("no training frames")
    steps_per_epoch = math.ceil(n / config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    table = dataset.class_table

    opt = AdamW({name: model.tensors()[name] for name in model.trainable_names()},
                weight_decay=config.weight_decay)

    log = TrainLog()
    step = 0
    for epoch in range(config.epochs):
        t0 = time.monotonic()
        order = substream(config.seed, DOMAIN_TRAIN, epoch).permutation(n)
        if frames is not None and bank is not None:
            aug_seed = int(substream(config.seed, DOMAIN_AUG, epoch).integers(2 ** 31))
            epoch_examples = [_encode(gt_aug(f, bank, config.gt_aug_min, aug_seed),
                                      config, table) for f in frames]
        elif frames is not None:
            epoch_examples = [_encode(f, config, table) for f in frames]
        else:
            epoch_examples = static
        sums = {"cls": 0.0, "reg": 0.0, "total": 0.0, "pos": 0, "hn": 0}
        lr = config.lr_min
        for lo in range(0, n, config.batch_size):
            chunk = order[lo:lo + config.batch_size]
            lr = lr_at(config, step, total_steps)
            accum: Dict[str, np.ndarray] = {}
            for idx in chunk:
                feats, targets = epoch_examples[int(idx)]
                _, breakdown, grads = forward_backward(model, feats, targets, loss_cfg)
                for name, g in grads.tensors.items():
                    if name in accum:
                        accum[name] += g
                    else:
                        accum[name] = g.copy()
                sums["cls"] += breakdown.classification
                sums["reg"] += breakdown.regression
                sums["total"] += breakdown.total
                sums["pos"] += grads.num_pos
                sums["hn"] += grads.num_hn
            inv = 1.0 / len(chunk)
            for name in accum:
                accum[name] *= inv
            opt.step(accum, lr)
            step += 1
        log.records.append({
            "epoch": epoch,
            "lr": lr,
            "cls_loss": sums["cls"] / n,
            "reg_loss": sums["reg"] / n,
            "total_loss": sums["total"] / n,
            "num_pos_mean": sums["pos"] / n,
            "num_hn_mean": sums["hn"] / n,
            "wall_time_s": time.monotonic() - t0,
        })
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        save_checkpoint(model, os.path.join(out_dir, "checkpoint.lfsm"))
        log.save(os.path.join(out_dir, "train_log.jsonl"))
        with open(os.path.join(out_dir, "train_config.json"), "w") as fh:
            json.dump(config.to_json(), fh, indent=2, sort_keys=True)
    return model, log


def prepare_finetune_model(checkpoint_path, class_table, seed: int,
                           policy: Optional[str] = None) -> Model:
    """Load a stage-1 checkpoint and grow one head slot per novel class.

    ``policy`` overrides the checkpoint's novel-head layout (per-class,
    single or merged) before any head is added.
    """
    if checkpoint_path is None:
        raise ConfigError("fine-tuning requires a stage-1 checkpoint")
    if not os.path.exists(checkpoint_path):
        raise ConfigError(f"stage-1 checkpoint not found: {checkpoint_path}")
    model = load_checkpoint(checkpoint_path)
    if policy is not None and policy != model.arch.novel_policy:
        model.arch = dataclasses.replace(model.arch, novel_policy=policy)
    for cid in class_table.novel_ids:
        model = add_novel_head(model, cid, seed)
    return model

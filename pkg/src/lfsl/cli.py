"""Command-line front end for reproducible experiments.

Every subcommand takes a single ``--seed``, derives all randomness from it
through the shared substream scheme, writes its artifacts under ``--out``
next to a fully resolved copy of its configuration, and finishes with a
``manifest.json`` listing content hashes so reruns can be compared.
"""

import argparse
import configparser
import dataclasses
import hashlib
import json
import os
import sys
import time
import traceback
from concurrent.futures import ThreadPoolExecutor

from .bevgrid import GridSpec, decode_detections, voxelize
from .errors import (CapacityError, ConfigError, ContractError,
                     IntegrityError, LoadError)
from .eval import EvalConfig, evaluate
from .ingest import (FIXTURE_NOVEL, build_episode, class_statistics,
                     episode_from_json, load_annotation_tables,
                     write_table1_fixture)
from .loss import grad_check
from .model import ArchSpec, init_model, load_checkpoint, model_grad_check
from .synthgen import (default_world, generate_dataset, load_dataset,
                       save_dataset, world_from_json)
from .train import (FinetuneData, TrainConfig, prepare_finetune_model,
                    run_stage)

GRAD_TOL = 1e-6
THETA_SWEEP = (0.1, 0.2, 0.3, 0.4, 0.5)
_POLICY_BY_STRATEGY = {1: "merged", 2: "single", 3: "per-class"}

_DEFAULTS = {
    "world": {
        "spec_json": "",
        "n_scenes": "40",
        "novel_weight": "4.0",
        "extent": "40,40",
        "density_scale": "300.0",
        "val_fraction": "0.25",
        "frames_per_instance": "1,3",
        "instances_per_scene": "3,8",
        "occlusion_prob": "0.3",
        "occlusion_max_frac": "0.4",
        "ground_points": "60",
        "clutter_rate": "1.5",
    },
    "grid": {
        "x_range": "40.0",
        "y_range": "40.0",
        "cell_size": "1.0",
        "feature_channels": "5",
    },
    "arch": {
        "extractor": "16,16",
        "shared": "16",
        "head_hidden": "16",
        "novel_policy": "per-class",
    },
    "train": {
        "epochs_base": "",
        "epochs_finetune": "",
        "batch_size": "4",
        "lr_max": "",
        "lr_min": "",
        "ramp_frac": "0.4",
        "weight_decay": "0.01",
        "lam": "0.25",
        "min_points": "5",
        "ignore_radius": "0.0",
        "gt_aug_min": "2",
        "loss": "focal",
        "theta": "0.1",
        "sab_novel_only": "false",
        "setting": "7",
    },
    "episode": {"k": "10", "novel_classes": ""},
    "eval": {
        "thresholds": "0.5,1,2,4",
        "base_range": "51.2",
        "novel_range_default": "30.0",
        "max_boxes_per_frame": "500",
        "score_floor": "0.1",
    },
    "gradcheck": {"seeds": "50"},
}


# ---- configuration -------------------------------------------------------

def load_config(path=None) -> configparser.ConfigParser:
    """Defaults overlaid with an optional INI file; unknown keys are errors."""
    cfg = configparser.ConfigParser(interpolation=None)
    for section, keys in _DEFAULTS.items():
        cfg[section] = dict(keys)
    if path is not None:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        user = configparser.ConfigParser(interpolation=None)
        user.read(path)
        for section in user.sections():
            if section not in _DEFAULTS:
                raise ConfigError(f"unknown config section [{section}]")
            for key, value in user[section].items():
                if key not in _DEFAULTS[section]:
                    raise ConfigError(f"unknown config key {section}.{key}")
                cfg[section][key] = value
    return cfg


def _floats(text):
    return tuple(float(v) for v in text.split(",") if v.strip())


def _ints(text):
    return tuple(int(v) for v in text.split(",") if v.strip())


def _opt_int(text):
    return int(text) if text.strip() else None


def _opt_float(text):
    return float(text) if text.strip() else None


def resolve_world(cfg, seed):
    """WorldSpec from config; a spec_json blob wins over the scalar knobs."""
    blob = cfg["world"]["spec_json"].strip()
    if blob:
        spec = world_from_json(json.loads(blob))
        if seed is not None and seed != spec.seed:
            spec = dataclasses.replace(spec, seed=seed)
    else:
        w = cfg["world"]
        spec = default_world(seed=0 if seed is None else seed,
                             n_scenes=int(w["n_scenes"]),
                             novel_weight=float(w["novel_weight"]))
        spec = dataclasses.replace(
            spec,
            extent=_floats(w["extent"]),
            density_scale=float(w["density_scale"]),
            val_fraction=float(w["val_fraction"]),
            frames_per_instance=_ints(w["frames_per_instance"]),
            instances_per_scene=_ints(w["instances_per_scene"]),
            occlusion_prob=float(w["occlusion_prob"]),
            occlusion_max_frac=float(w["occlusion_max_frac"]),
            ground_points=int(w["ground_points"]),
            clutter_rate=float(w["clutter_rate"]),
        )
    cfg["world"]["spec_json"] = json.dumps(spec.to_json(), sort_keys=True)
    return spec


def resolve_grid(cfg) -> GridSpec:
    g = cfg["grid"]
    return GridSpec(float(g["x_range"]), float(g["y_range"]),
                    float(g["cell_size"]), int(g["feature_channels"]))


def resolve_arch(cfg, class_table, grid) -> ArchSpec:
    a = cfg["arch"]
    return ArchSpec(in_channels=grid.feature_channels,
                    extractor=_ints(a["extractor"]),
                    shared=int(a["shared"]),
                    head_hidden=int(a["head_hidden"]),
                    base_heads=tuple((i,) for i in class_table.base_ids),
                    novel_policy=a["novel_policy"])


def resolve_train(cfg, stage, grid, seed, setting=None, loss=None,
                  theta=None) -> TrainConfig:
    t = cfg["train"]
    epochs = _opt_int(t["epochs_base" if stage == "base" else "epochs_finetune"])
    tc = TrainConfig(
        stage=stage,
        grid=grid,
        epochs=epochs,
        batch_size=int(t["batch_size"]),
        lr_max=_opt_float(t["lr_max"]),
        lr_min=_opt_float(t["lr_min"]),
        ramp_frac=float(t["ramp_frac"]),
        weight_decay=float(t["weight_decay"]),
        setting=int(t["setting"]) if setting is None else setting,
        loss_choice=t["loss"] if loss is None else loss,
        theta=float(t["theta"]) if theta is None else theta,
        sab_novel_only=cfg.getboolean("train", "sab_novel_only"),
        lam=float(t["lam"]),
        min_points=int(t["min_points"]),
        ignore_radius=float(t["ignore_radius"]),
        gt_aug_min=int(t["gt_aug_min"]),
        seed=0 if seed is None else seed,
    )
    t["epochs_base" if stage == "base" else "epochs_finetune"] = str(tc.epochs)
    t["lr_max"] = repr(tc.lr_max)
    t["lr_min"] = repr(tc.lr_min)
    t["setting"] = str(tc.setting)
    t["loss"] = tc.loss_choice
    t["theta"] = repr(tc.theta)
    return tc


def resolve_eval(cfg) -> EvalConfig:
    e = cfg["eval"]
    return EvalConfig(thresholds=_floats(e["thresholds"]),
                      base_range=float(e["base_range"]),
                      novel_range_default=float(e["novel_range_default"]),
                      max_boxes_per_frame=int(e["max_boxes_per_frame"]))


def write_resolved(cfg, out_dir):
    with open(os.path.join(out_dir, "resolved.ini"), "w") as fh:
        cfg.write(fh)


# ---- manifest --------------------------------------------------------------

def _file_digest(path):
    """sha256 of a file; epoch logs are hashed without their timing field."""
    if path.endswith(".jsonl"):
        rows = []
        with open(path) as fh:
            for line in fh:
                if not line.strip():
                    continue
                rec = json.loads(line)
                rec.pop("wall_time_s", None)
                rows.append(json.dumps(rec, sort_keys=True))
        blob = ("\n".join(rows) + "\n").encode()
        return hashlib.sha256(blob).hexdigest(), True
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest(), False


def write_manifest(out_dir, command, seed):
    artifacts = {}
    for root, dirs, files in os.walk(out_dir):
        dirs.sort()
        for name in sorted(files):
            full = os.path.join(root, name)
            rel = os.path.relpath(full, out_dir)
            if rel == "manifest.json":
                continue
            digest, normalized = _file_digest(full)
            entry = {"sha256": digest}
            if normalized:
                entry["normalized"] = True  # timing stripped before hashing
            artifacts[rel] = entry
    doc = {"command": command, "seed": seed, "artifacts": artifacts}
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)


def max_workers() -> int:
    raw = os.environ.get("LFSL_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"LFSL_THREADS must be an integer, got {raw!r}")
    if n < 1:
        raise ConfigError(f"LFSL_THREADS must be >= 1, got {n}")
    return n


# ---- shared helpers --------------------------------------------------------

def _out_dir(args):
    os.makedirs(args.out, exist_ok=True)
    return args.out


def _seed(args) -> int:
    return 0 if args.seed is None else args.seed


def _detect_all(model, frames, grid, eval_cfg, score_floor):
    out_grid = grid.coarser(2)
    return {f.frame_id: decode_detections(model.forward(voxelize(f, grid)),
                                          out_grid,
                                          max_boxes=eval_cfg.max_boxes_per_frame,
                                          score_floor=score_floor)
            for f in frames}


def _evaluate_checkpoint(model, dataset, cfg):
    grid = resolve_grid(cfg)
    eval_cfg = resolve_eval(cfg)
    floor = float(cfg["eval"]["score_floor"])
    dets = _detect_all(model, dataset.val_frames, grid, eval_cfg, floor)
    return evaluate(dets, dataset, cfg=eval_cfg)


def _load_episode(path):
    if not os.path.exists(path):
        raise ConfigError(f"episode manifest not found: {path}")
    with open(path) as fh:
        return episode_from_json(json.load(fh))


def _require_dataset(path):
    if path is None:
        raise ConfigError("this command needs --dataset")
    return load_dataset(path)


# ---- subcommands -------------------------------------------------------------

def cmd_gen(args) -> int:
    cfg = load_config(args.config)
    out = _out_dir(args)
    spec = resolve_world(cfg, args.seed)
    dataset = generate_dataset(spec)
    save_dataset(dataset, os.path.join(out, "dataset"))
    write_resolved(cfg, out)
    write_manifest(out, "gen", spec.seed)
    print(f"gen: {len(dataset.train_frames)} train / {len(dataset.val_frames)} "
          f"val frames under {out}/dataset")
    return 0


def cmd_ingest(args) -> int:
    cfg = load_config(args.config)
    out = _out_dir(args)
    root = args.tables
    if root is None:
        root = os.path.join(out, "fixture")
        write_table1_fixture(root, seed=_seed(args))
    db = load_annotation_tables(root)
    stats = class_statistics(db)
    csv = stats.to_csv()
    with open(os.path.join(out, "stats.csv"), "w") as fh:
        fh.write(csv)
    write_resolved(cfg, out)
    write_manifest(out, "ingest", _seed(args))
    print(csv, end="")
    return 0


def cmd_split(args) -> int:
    cfg = load_config(args.config)
    out = _out_dir(args)
    k = int(cfg["episode"]["k"]) if args.k is None else args.k
    cfg["episode"]["k"] = str(k)
    if args.dataset is not None:
        source = load_dataset(args.dataset)
        novel = source.class_table.novel_ids
    elif args.tables is not None:
        source = load_annotation_tables(args.tables)
        raw = cfg["episode"]["novel_classes"].strip()
        novel = ([v.strip() for v in raw.split(",")] if raw
                 else [n for n in FIXTURE_NOVEL if n in source.categories.values()])
    else:
        raise ConfigError("split needs --dataset or --tables")
    cfg["episode"]["novel_classes"] = ",".join(str(c) for c in novel)
    episode = build_episode(source, novel, k, _seed(args))
    with open(os.path.join(out, "episode.json"), "w") as fh:
        json.dump(episode.to_json(), fh, indent=2, sort_keys=True)
    write_resolved(cfg, out)
    write_manifest(out, "split", _seed(args))
    print(f"split: {len(novel)}-way {k}-shot episode -> {out}/episode.json")
    return 0


def cmd_train_base(args) -> int:
    cfg = load_config(args.config)
    out = _out_dir(args)
    dataset = _require_dataset(args.dataset)
    grid = resolve_grid(cfg)
    arch = resolve_arch(cfg, dataset.class_table, grid)
    tc = resolve_train(cfg, "base", grid, args.seed)
    model = init_model(arch, tc.seed)
    _, log = run_stage(model, dataset, tc, out_dir=out)
    write_resolved(cfg, out)
    write_manifest(out, "train-base", tc.seed)
    print(f"train-base: {tc.epochs} epochs, final cls loss "
          f"{log.records[-1]['cls_loss']:.4f} -> {out}/checkpoint.lfsm")
    return 0


def cmd_finetune(args) -> int:
    cfg = load_config(args.config)
    out = _out_dir(args)
    dataset = _require_dataset(args.dataset)
    episode = _load_episode(args.episode)
    grid = resolve_grid(cfg)
    tc = resolve_train(cfg, "finetune", grid, args.seed,
                       setting=args.setting, loss=args.loss, theta=args.theta)
    policy = (None if args.split_strategy is None
              else _POLICY_BY_STRATEGY[args.split_strategy])
    if policy is not None:
        cfg["arch"]["novel_policy"] = policy
    model = prepare_finetune_model(args.init, dataset.class_table, tc.seed,
                                   policy=policy)
    _, log = run_stage(model, FinetuneData(dataset, episode), tc, out_dir=out)
    write_resolved(cfg, out)
    write_manifest(out, "finetune", tc.seed)
    print(f"finetune: setting {tc.setting}, loss "
          f"{tc.loss_config(use_sab=model.active_mask.use_sab).kind}, final cls "
          f"loss {log.records[-1]['cls_loss']:.4f} -> {out}/checkpoint.lfsm")
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    out = _out_dir(args)
    dataset = _require_dataset(args.dataset)
    if not os.path.exists(args.checkpoint):
        raise ConfigError(f"checkpoint not found: {args.checkpoint}")
    model = load_checkpoint(args.checkpoint)
    report = _evaluate_checkpoint(model, dataset, cfg)
    report.save(os.path.join(out, "report.json"), os.path.join(out, "report.csv"))
    write_resolved(cfg, out)
    write_manifest(out, "eval", _seed(args))
    print(f"eval: bmAP {report.bmap:.4f}  nmAP {report.nmap:.4f}  "
          f"cmAP {report.cmap:.4f} -> {out}/report.json")
    return 0


def cmd_gradcheck(args) -> int:
    cfg = load_config(args.config)
    out = _out_dir(args)
    n = int(cfg["gradcheck"]["seeds"])
    t0 = time.monotonic()
    worst = {}
    for selector in ("sab", "focal", "regression"):
        worst[selector] = max(grad_check(selector, s) for s in range(n))
    kinds = ["sab" if s % 2 == 0 else "focal" for s in range(n)]
    worst["model"] = max(model_grad_check(s, kind=k)
                         for s, k in zip(range(n), kinds))
    elapsed = time.monotonic() - t0
    doc = {"seeds": n, "tolerance": GRAD_TOL,
           "max_relative_error": {k: worst[k] for k in sorted(worst)}}
    with open(os.path.join(out, "gradcheck.json"), "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
    write_resolved(cfg, out)
    write_manifest(out, "gradcheck", _seed(args))
    for k in sorted(worst):
        print(f"gradcheck {k}: max rel err {worst[k]:.3e}")
    print(f"gradcheck: {n} seeds per subject in {elapsed:.1f}s")
    if any(v >= GRAD_TOL for v in worst.values()):
        print("gradcheck: FAILED tolerance", file=sys.stderr)
        return 1
    return 0


def _finetune_and_eval(cfg_path, dataset, episode, init, seed, setting, loss,
                       theta, out):
    cfg = load_config(cfg_path)
    grid = resolve_grid(cfg)
    tc = resolve_train(cfg, "finetune", grid, seed, setting=setting,
                       loss=loss, theta=theta)
    model = prepare_finetune_model(init, dataset.class_table, tc.seed)
    run_stage(model, FinetuneData(dataset, episode), tc, out_dir=out)
    report = _evaluate_checkpoint(model, dataset, cfg)
    report.save(os.path.join(out, "report.json"), os.path.join(out, "report.csv"))
    return report


def cmd_sweep_theta(args) -> int:
    cfg = load_config(args.config)
    out = _out_dir(args)
    dataset = _require_dataset(args.dataset)
    episode = _load_episode(args.episode)
    seed = _seed(args)

    def job(theta):
        sub = os.path.join(out, f"theta_{theta:.1f}")
        report = _finetune_and_eval(args.config, dataset, episode, args.init,
                                    seed, 9, "sab", theta, sub)
        return theta, report

    with ThreadPoolExecutor(max_workers=max_workers()) as pool:
        results = dict(pool.map(job, THETA_SWEEP))
    lines = ["theta,bmap,nmap"]
    for theta in THETA_SWEEP:
        r = results[theta]
        lines.append(f"{theta:.1f},{r.bmap:.6f},{r.nmap:.6f}")
    csv = "\n".join(lines) + "\n"
    with open(os.path.join(out, "sweep_theta.csv"), "w") as fh:
        fh.write(csv)
    write_resolved(cfg, out)
    write_manifest(out, "sweep-theta", seed)
    print(csv, end="")
    return 0


def cmd_settings_matrix(args) -> int:
    cfg = load_config(args.config)
    out = _out_dir(args)
    dataset = _require_dataset(args.dataset)
    episode = _load_episode(args.episode)
    seed = _seed(args)

    def job(setting):
        sub = os.path.join(out, f"setting_{setting}")
        if setting == 1:  # baseline: base checkpoint, no fine-tuning
            os.makedirs(sub, exist_ok=True)
            model = prepare_finetune_model(args.init, dataset.class_table, seed)
            report = _evaluate_checkpoint(model, dataset, load_config(args.config))
            report.save(os.path.join(sub, "report.json"),
                        os.path.join(sub, "report.csv"))
        else:
            report = _finetune_and_eval(args.config, dataset, episode,
                                        args.init, seed, setting, None, None, sub)
        return setting, report

    with ThreadPoolExecutor(max_workers=max_workers()) as pool:
        results = dict(pool.map(job, range(1, 10)))
    lines = ["setting,bmap,nmap,cmap"]
    for setting in range(1, 10):
        r = results[setting]
        lines.append(f"{setting},{r.bmap:.6f},{r.nmap:.6f},{r.cmap:.6f}")
    csv = "\n".join(lines) + "\n"
    with open(os.path.join(out, "settings_matrix.csv"), "w") as fh:
        fh.write(csv)
    write_resolved(cfg, out)
    write_manifest(out, "settings-matrix", seed)
    print(csv, end="")
    return 0


# ---- argument parsing -----------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="INI experiment config")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", required=True, help="output directory")

    p = argparse.ArgumentParser(prog="lfsl",
                                description="few-shot 3D detection laboratory")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("gen", parents=[common],
                        help="generate a synthetic long-tail dataset")
    sp.set_defaults(func=cmd_gen)

    sp = sub.add_parser("ingest", parents=[common],
                        help="summarize annotation tables as split statistics")
    sp.add_argument("--tables", default=None,
                    help="annotation table directory (default: bundled fixture)")
    sp.set_defaults(func=cmd_ingest)

    sp = sub.add_parser("split", parents=[common],
                        help="build an N-way K-shot episode manifest")
    sp.add_argument("--dataset", default=None)
    sp.add_argument("--tables", default=None)
    sp.add_argument("--k", type=int, default=None)
    sp.set_defaults(func=cmd_split)

    sp = sub.add_parser("train-base", parents=[common],
                        help="stage-1 training on base classes")
    sp.add_argument("--dataset", required=True)
    sp.set_defaults(func=cmd_train_base)

    sp = sub.add_parser("finetune", parents=[common],
                        help="stage-2 few-shot fine-tuning")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--init", required=True, help="stage-1 checkpoint")
    sp.add_argument("--episode", required=True, help="episode manifest JSON")
    sp.add_argument("--setting", type=int, default=None, choices=range(2, 10))
    sp.add_argument("--loss", choices=("focal", "sab"), default=None)
    sp.add_argument("--theta", type=float, default=None)
    sp.add_argument("--split-strategy", type=int, choices=(1, 2, 3),
                    default=None, dest="split_strategy")
    sp.set_defaults(func=cmd_finetune)

    sp = sub.add_parser("eval", parents=[common],
                        help="evaluate a checkpoint on the validation split")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("gradcheck", parents=[common],
                        help="finite-difference audit of every gradient path")
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("sweep-theta", parents=[common],
                        help="hard-negative threshold sweep under setting 9")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--init", required=True)
    sp.add_argument("--episode", required=True)
    sp.set_defaults(func=cmd_sweep_theta)

    sp = sub.add_parser("settings-matrix", parents=[common],
                        help="train and score freeze settings 1-9")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--init", required=True)
    sp.add_argument("--episode", required=True)
    sp.set_defaults(func=cmd_settings_matrix)
    return p


def run(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse prints its own diagnostic
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ConfigError, LoadError, CapacityError, FileNotFoundError) as exc:
        print(f"lfsl {args.command}: {exc}", file=sys.stderr)
        return 2
    except (ContractError, IntegrityError) as exc:
        print(f"lfsl {args.command}: {exc}", file=sys.stderr)
        return 1
    except Exception:
        traceback.print_exc()
        return 1


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()

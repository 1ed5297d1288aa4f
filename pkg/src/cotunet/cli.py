"""Command-line entry point: phantom generation, training, two-stage
inference, evaluation, and label-free statistics.

All subcommands are deterministic for a fixed ``--seed`` and fixed inputs;
reports embed the hash of the fully resolved configuration. Config files
are JSON documents mirroring the run configuration below; unknown keys
abort before any compute.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import phantom as phantom_mod
from .metrics import MetricUndefinedError, airway_stats, evaluate_case
from .pipeline import StageModel, TwoStageModel, crop_to_lung, make_stage2_labels, preprocess, two_stage_infer
from .train import TrainConfig, train
from .unet import UNetConfig, load_checkpoint, save_checkpoint
from .volume import Volume, read_volume, write_volume

DEFAULT_CONFIG = {
    "seed": 0,
    "network": {
        "scales": 3,
        "base_channels": 8,
        "cot_kernel": 3,
        "deep_supervision": False,
    },
    "training": {
        "epochs": 50,
        "learning_rate": 0.003,
        "batch_size": 2,
        "early_stop_patience": 5,
        "flip_prob": 0.5,
        "jitter_amplitude": 0.05,
        "patch_size": [32, 32, 32],
        "foreground_bias": 0.7,
    },
    "phantom": {
        "n_cases": 30,
        "dims": [64, 64, 64],
        "spacing_mm": [1.0, 1.0, 1.0],
        "depth": [3, 4],
        "root_radius": [2.6, 3.2],
        "radius_decay": 0.78,
        "branch_angle_deg": [22.0, 35.0],
        "root_length": [13.0, 16.0],
        "length_decay": 0.75,
        "noise_sigma": 10.0,
    },
    "inference": {
        "threshold": 0.5,
        "merge": "union",
        "connectivity": 26,
        "crop_margin": 8,
        "patch": [32, 32, 32],
        "overlap_fraction": 0.5,
    },
    "metrics": {
        "detect_fraction": 0.8,
    },
}


class ConfigError(ValueError):
    pass


def _merge_strict(defaults: dict, given: dict, trail: str = "") -> dict:
    out = {}
    for key, value in given.items():
        where = f"{trail}.{key}" if trail else key
        if key not in defaults:
            raise ConfigError(f"unknown config key '{where}'")
        if isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key '{where}' must be an object")
            out[key] = _merge_strict(defaults[key], value, where)
        else:
            out[key] = value
    for key, value in defaults.items():
        if key not in out:
            out[key] = json.loads(json.dumps(value)) if isinstance(value, dict) else value
    return out


def load_config(path: str | None, seed_override: int | None = None) -> dict:
    given = {}
    if path is not None:
        try:
            given = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {path} is not valid JSON: {e}") from e
        if not isinstance(given, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
    cfg = _merge_strict(DEFAULT_CONFIG, given)
    if seed_override is not None:
        cfg["seed"] = int(seed_override)
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


def _unet_config(cfg: dict) -> UNetConfig:
    n = cfg["network"]
    return UNetConfig(scales=n["scales"], base_channels=n["base_channels"],
                      cot_kernel=n["cot_kernel"], deep_supervision=n["deep_supervision"])


def _train_config(cfg: dict) -> TrainConfig:
    t = cfg["training"]
    return TrainConfig(
        epochs=t["epochs"], learning_rate=t["learning_rate"],
        batch_size=t["batch_size"], early_stop_patience=t["early_stop_patience"],
        flip_prob=t["flip_prob"], jitter_amplitude=t["jitter_amplitude"],
        patch_size=tuple(t["patch_size"]), foreground_bias=t["foreground_bias"],
        seed=cfg["seed"],
    )


def _phantom_ranges(cfg: dict) -> phantom_mod.PhantomRanges:
    p = cfg["phantom"]
    return phantom_mod.PhantomRanges(
        dims=tuple(p["dims"]), spacing_mm=tuple(p["spacing_mm"]),
        depth=tuple(p["depth"]), root_radius=tuple(p["root_radius"]),
        radius_decay=p["radius_decay"],
        branch_angle_deg=tuple(p["branch_angle_deg"]),
        root_length=tuple(p["root_length"]), length_decay=p["length_decay"],
        noise_sigma=p["noise_sigma"],
    )


# ---------------------------------------------------------------------------
# Dataset directory layout
# ---------------------------------------------------------------------------

def _case_paths(data_dir: Path, case_id: str) -> dict[str, Path]:
    return {kind: data_dir / f"{case_id}_{kind}" for kind in ("ct", "airway", "lung")}


def write_dataset(cases, out_dir: Path, cfg: dict) -> dict:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {"config_hash": config_hash(cfg), "seed": cfg["seed"], "cases": []}
    for case in cases:
        paths = _case_paths(out_dir, case.case_id)
        write_volume(case.ct, paths["ct"])
        write_volume(Volume(case.airway.data.astype(np.uint8), case.airway.spacing),
                     paths["airway"])
        write_volume(Volume(case.lung.data.astype(np.uint8), case.lung.spacing),
                     paths["lung"])
        manifest["cases"].append({
            "id": case.case_id,
            "split": case.split,
            "depth": case.spec.depth,
            "branch_count": case.tree.branch_count,
            "centerline_length_mm": case.tree.centerline_length_mm,
            "dims": list(case.ct.dims),
            "spacing_mm": list(case.ct.spacing),
        })
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest


def read_manifest(data_dir: Path) -> dict:
    path = data_dir / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no manifest.json in {data_dir}")
    return json.loads(path.read_text())


def _load_case(data_dir: Path, case_id: str):
    paths = _case_paths(data_dir, case_id)
    return (read_volume(paths["ct"]), read_volume(paths["airway"]),
            read_volume(paths["lung"]))


def _training_pairs(data_dir: Path, manifest: dict, split: str, stage: int,
                    crop_margin: int):
    pairs = []
    for entry in manifest["cases"]:
        if entry["split"] != split:
            continue
        ct, airway, lung = _load_case(data_dir, entry["id"])
        label = airway if stage == 1 else make_stage2_labels(airway, lung)
        norm, box = crop_to_lung(preprocess(ct), lung, crop_margin)
        pairs.append((norm.data, box.apply(label.data).astype(np.float32)))
    return pairs


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_phantom(args) -> int:
    cfg = load_config(args.config, args.seed)
    if args.n is not None:
        cfg["phantom"]["n_cases"] = args.n
    cases = phantom_mod.make_dataset(cfg["phantom"]["n_cases"],
                                     _phantom_ranges(cfg), seed=cfg["seed"])
    manifest = write_dataset(cases, Path(args.out), cfg)
    split_sizes = {s: sum(1 for c in manifest["cases"] if c["split"] == s)
                   for s in ("train", "val", "test")}
    print(f"wrote {len(manifest['cases'])} cases to {args.out} "
          f"(train/val/test = {split_sizes['train']}/{split_sizes['val']}/{split_sizes['test']})")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.seed)
    data_dir = Path(args.data)
    manifest = read_manifest(data_dir)
    margin = cfg["inference"]["crop_margin"]
    train_pairs = _training_pairs(data_dir, manifest, "train", args.stage, margin)
    val_pairs = _training_pairs(data_dir, manifest, "val", args.stage, margin)
    net_cfg = _unet_config(cfg)
    params, history = train(train_pairs, val_pairs, net_cfg, _train_config(cfg))
    best = min(history, key=lambda h: (h.val_loss, -h.val_dsc))
    metrics = {
        "stage": args.stage,
        "epochs_run": len(history),
        "best_val_loss": best.val_loss,
        "best_val_dsc": best.val_dsc,
        "config_hash": config_hash(cfg),
    }
    save_checkpoint(args.out, params, net_cfg, epoch=best.epoch, metrics=metrics)
    print(f"stage {args.stage}: {len(history)} epochs, best val loss "
          f"{best.val_loss:.4f} (dsc {best.val_dsc:.3f}) -> {args.out}")
    return 0


def _load_model(path) -> StageModel:
    params, cfg, _ = load_checkpoint(path)
    return StageModel(params, cfg)


def cmd_infer(args) -> int:
    cfg = load_config(args.config, args.seed)
    data_dir = Path(args.data)
    manifest = read_manifest(data_dir)
    ids = [c["id"] for c in manifest["cases"]]
    if args.case is not None:
        if args.case not in ids:
            print(f"error: case {args.case!r} not in manifest", file=sys.stderr)
            return 2
        ids = [args.case]
    model = TwoStageModel(_load_model(args.stage1), _load_model(args.stage2))
    inf = cfg["inference"]
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for case_id in ids:
        ct, _, lung = _load_case(data_dir, case_id)
        result = two_stage_infer(
            ct, lung, model, threshold=inf["threshold"], patch=tuple(inf["patch"]),
            overlap_fraction=inf["overlap_fraction"], crop_margin=inf["crop_margin"],
            merge=inf["merge"], connectivity=inf["connectivity"],
        )
        for kind, volume in (("final", result.final), ("stage1", result.stage1),
                             ("stage2", result.stage2)):
            write_volume(Volume(volume.data.astype(np.uint8), volume.spacing),
                         out_dir / f"{case_id}_{kind}")
        note = f" ({result.warning})" if result.warning else ""
        print(f"{case_id}: final {int(result.final.data.astype(bool).sum())} voxels{note}")
    return 0


def _eval_one(data_dir, pred_dir, entry, detect_fraction):
    case_id = entry["id"]
    _, airway, lung = _load_case(data_dir, case_id)
    pred = read_volume(pred_dir / f"{case_id}_final")
    record = {"id": case_id, "split": entry["split"], "status": "ok"}
    try:
        report = evaluate_case(pred.data, airway.data, region=lung.data,
                               spacing=airway.spacing,
                               detect_fraction=detect_fraction)
        record.update(report.as_dict())
    except MetricUndefinedError as e:
        record["status"] = f"error: {e}"
    return record


CSV_FIELDS = ["id", "split", "status", "bd", "td", "tpr", "fpr", "dsc", "precision",
              "branch_count", "tree_length_mm", "airway_volume_mm3"]


def cmd_eval(args) -> int:
    cfg = load_config(args.config, args.seed)
    data_dir = Path(args.data)
    pred_dir = Path(args.pred)
    manifest = read_manifest(data_dir)
    entries = [c for c in manifest["cases"]
               if args.split is None or c["split"] == args.split]
    entries = [c for c in entries if (pred_dir / f"{c['id']}_final.json").exists()]
    if not entries:
        print("error: no predictions found to evaluate", file=sys.stderr)
        return 2
    detect = cfg["metrics"]["detect_fraction"]
    workers = max(1, args.threads)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(
                lambda e: _eval_one(data_dir, pred_dir, e, detect), entries))
    else:
        records = [_eval_one(data_dir, pred_dir, e, detect) for e in entries]
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {"config_hash": config_hash(cfg), "cases": records}
    (out_dir / "report.json").write_text(json.dumps(payload, indent=2) + "\n")
    with open(out_dir / "report.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        writer.writeheader()
        for record in records:
            writer.writerow({k: record.get(k, "") for k in CSV_FIELDS})
    ok = [r for r in records if r["status"] == "ok"]
    if ok:
        print(f"evaluated {len(ok)} cases: mean DSC "
              f"{np.mean([r['dsc'] for r in ok]):.2f}, mean TD "
              f"{np.mean([r['td'] for r in ok]):.2f}, mean BD "
              f"{np.mean([r['bd'] for r in ok]):.2f}")
    return 0


def cmd_stats(args) -> int:
    cfg = load_config(args.config, args.seed)
    masks_dir = Path(args.masks)
    headers = sorted(masks_dir.glob("*.json"))
    headers = [p for p in headers if p.name != "manifest.json"]
    if not headers:
        print(f"error: no volumes found in {masks_dir}", file=sys.stderr)
        return 2
    records = []
    for header in headers:
        volume = read_volume(header)
        stats = airway_stats(volume.data, volume.spacing)
        records.append({
            "id": header.stem,
            "branch_count": stats.branch_count,
            "tree_length_mm": stats.tree_length_mm,
            "airway_volume_mm3": stats.airway_volume_mm3,
        })
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {"config_hash": config_hash(cfg), "masks": records}
    (out_dir / "stats.json").write_text(json.dumps(payload, indent=2) + "\n")
    with open(out_dir / "stats.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(records[0].keys()))
        writer.writeheader()
        writer.writerows(records)
    print(f"wrote statistics for {len(records)} masks to {out_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cotunet",
        description="Two-stage contextual-transformer segmentation workbench",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="JSON run configuration")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--threads", type=int, default=1, help="worker threads where supported")

    p = sub.add_parser("phantom", help="generate a synthetic dataset")
    common(p)
    p.add_argument("--n", type=int, default=None, help="number of cases")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("train", help="train one stage on a dataset directory")
    common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="two-stage inference over cases")
    common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--case", default=None, help="restrict to one case id")
    p.add_argument("--stage1", required=True, help="stage-1 checkpoint")
    p.add_argument("--stage2", required=True, help="stage-2 checkpoint")
    p.add_argument("--out", required=True, help="prediction output directory")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="metric report over predictions")
    common(p)
    p.add_argument("--data", required=True, help="dataset directory with ground truth")
    p.add_argument("--pred", required=True, help="directory of *_final predictions")
    p.add_argument("--split", default=None, choices=("train", "val", "test"))
    p.add_argument("--out", required=True, help="report output directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("stats", help="label-free statistics over mask volumes")
    common(p)
    p.add_argument("--masks", required=True, help="directory of mask volumes")
    p.add_argument("--out", required=True, help="statistics output directory")
    p.set_defaults(func=cmd_stats)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Command-line surface: toy data, splits, training, eval, analysis.

Every command writes its outputs under --out with a run manifest at the
root recording the resolved settings, so a run can be reproduced from its
artifacts alone. Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import __version__
from .diagnostics import emit_plots, export_feature_maps, similarity_profile
from .errors import (
    ConfigurationError,
    DataError,
    EvalError,
    ScheduleError,
    TissKitError,
)
from .losses import LossWeights
from .metrics import ConfusionMatrix, MetricReport, accumulate, report
from .model import ModelConfig, load_checkpoint, segment
from .protocol import (
    TaskSequence,
    build_task_sequence,
    generate_toy_dataset,
    load_records,
    mask_for_eval,
    parse_schedule,
    read_task_manifest,
    split_dataset,
    write_task_manifest,
)
from .trainer import METHODS, TrainConfig, apply_method, run_incremental

CACHE_ENV = "TISS_KIT_CACHE"


def cache_dir() -> Path:
    root = os.environ.get(CACHE_ENV)
    if root:
        return Path(root)
    return Path.home() / ".cache" / "tisskit"


def write_run_manifest(out_dir: Path, command: str, config_ref: str,
                       seed: int, resolved_config: dict) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {
        "command": command,
        "config_ref": str(config_ref),
        "output_dir": str(out_dir),
        "seed": int(seed),
        "resolved_config": resolved_config,
    }
    path = out_dir / "run_manifest.json"
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def load_run_config(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file {path} does not exist")
    text = path.read_text()
    if path.suffix == ".toml":
        try:
            import tomllib
        except ImportError as exc:
            raise ConfigurationError("TOML configs need Python 3.11+; use JSON") from exc
        return tomllib.loads(text)
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config file {path} is not valid JSON: {exc}") from exc


_TRAIN_KEYS = {
    "lr_first_step", "lr_later_steps", "poly_power", "momentum", "weight_decay",
    "epochs", "batch_size", "crop_size", "seed", "grad_clip",
    "aux_l1_weight", "aux_l2_weight", "naive_partition", "head_growth",
}


def train_config_from_dict(payload: dict) -> TrainConfig:
    """Strict TrainConfig parser: unknown keys are errors, nested sections
    build their own dataclasses."""
    known = _TRAIN_KEYS | {"weights", "model", "manifest", "out", "method"}
    unknown = set(payload) - known
    if unknown:
        raise ConfigurationError(f"unknown config keys {sorted(unknown)}")
    kwargs = {k: payload[k] for k in _TRAIN_KEYS if k in payload}
    if "weights" in payload:
        w = payload["weights"]
        bad = set(w) - {"w_unce", "w_unkd", "w_cd", "w_ct"}
        if bad:
            raise ConfigurationError(f"unknown weight keys {sorted(bad)}")
        kwargs["weights"] = LossWeights(**w)
    if "model" in payload:
        m = payload["model"]
        bad = set(m) - {f.name for f in dataclasses.fields(ModelConfig)}
        if bad:
            raise ConfigurationError(f"unknown model keys {sorted(bad)}")
        kwargs["model"] = ModelConfig(**m)
    return TrainConfig(**kwargs)


def config_as_dict(config: TrainConfig) -> dict:
    return dataclasses.asdict(config)


def run_checkpoints(run_dir: Path) -> list[Path]:
    run_dir = Path(run_dir)
    ckpts = sorted(run_dir.glob("step*.ckpt"))
    if not ckpts:
        raise ConfigurationError(f"{run_dir} contains no step checkpoints")
    return ckpts


def sequence_from_checkpoint(extra: dict) -> TaskSequence:
    missing = {"class_names", "step_sizes", "mode"} - extra.keys()
    if missing:
        raise ConfigurationError(f"checkpoint metadata missing {sorted(missing)}")
    return build_task_sequence(extra["class_names"], extra["step_sizes"], extra["mode"])


def evaluate_checkpoint(checkpoint, dataset_dir, batch_size: int = 16):
    """Confusion matrix of one checkpoint over a dataset directory.

    Ground-truth labels from steps the model has not reached yet are sent
    to ignore, so the model is only scored on classes it was ever shown.
    Returns (step_index, sequence, matrix).
    """
    model, extra = load_checkpoint(checkpoint)
    model.eval()
    seq = sequence_from_checkpoint(extra)
    step = int(extra.get("step_index", seq.n_steps - 1))

    names, records = load_records(dataset_dir)
    if list(names) != list(seq.label_space.class_names):
        raise EvalError(
            f"dataset classes {names} do not match checkpoint classes "
            f"{list(seq.label_space.class_names)}"
        )
    root = Path(dataset_dir)
    cm = ConfusionMatrix(seq.n_classes_at(step))
    for start in range(0, len(records), batch_size):
        batch = records[start:start + batch_size]
        images = []
        masks = []
        for rec in batch:
            images.append(np.asarray(Image.open(root / rec.image_ref).convert("RGB")))
            masks.append(np.asarray(Image.open(root / rec.mask_ref)))
        x = torch.from_numpy(np.stack(images)).permute(0, 3, 1, 2).float() / 255.0
        with torch.no_grad():
            logits, _ = model(x)
        preds = segment(logits)
        for pred, mask in zip(preds, masks):
            accumulate(cm, pred, mask_for_eval(mask, seq, step))
    return step, seq, cm


def evaluate_run(run_dir, dataset_dir, batch_size: int = 16) -> tuple[TaskSequence, dict, MetricReport]:
    """Evaluate every step checkpoint of a run; returns the grouped report."""
    cms = {}
    seq = None
    for ckpt in run_checkpoints(run_dir):
        step, ckpt_seq, cm = evaluate_checkpoint(ckpt, dataset_dir, batch_size=batch_size)
        if seq is not None and ckpt_seq != seq:
            raise EvalError("checkpoints in one run disagree about the task sequence")
        seq = ckpt_seq
        cms[step] = cm
    return seq, cms, report(cms, seq)


def _dataset_images(dataset_dir) -> list[Path]:
    root = Path(dataset_dir)
    images = sorted((root / "images").glob("*.png"))
    if not images:
        raise DataError(f"{root} has no images/*.png")
    return images


def cmd_toy(args, parser) -> int:
    out = Path(args.out) if args.out else cache_dir() / (
        f"toy-c{args.classes}-n{args.images}-s{args.size}-seed{args.seed}"
    )
    if (out / "classes.json").exists() and not args.force:
        print(f"dataset already present at {out} (use --force to regenerate)")
        print(out)
        return 0
    records = generate_toy_dataset(out, args.images, args.size, args.classes, args.seed)
    print(f"wrote {len(records)} images, {args.classes} classes, size {args.size} -> {out}")
    print(out)
    return 0


def cmd_split(args, parser) -> int:
    names, records = load_records(args.dataset)
    try:
        sizes = parse_schedule(args.schedule, len(names))
    except ScheduleError as exc:
        parser.error(f"{exc}; schedules are A-B strings such as 15-1, 100-10, 2-2")
    seq = build_task_sequence(names, sizes, args.mode)
    steps = split_dataset(records, seq)
    out = Path(args.out) if args.out else Path(args.dataset) / (
        f"task-{args.schedule}-{args.mode}.json"
    )
    # Record the dataset relative to the manifest so the pair stays portable.
    root_rel = os.path.relpath(Path(args.dataset).resolve(), Path(out).resolve().parent)
    write_task_manifest(out, seq, seed=args.seed, dataset_root=root_rel)
    print(f"schedule {args.schedule} ({args.mode}): {seq.n_steps} steps")
    for step in steps:
        classes = ",".join(str(c) for c in sorted(step.visible_classes))
        print(f"  step {step.step_index}: {len(step.records)} images, classes [{classes}]")
    print(out)
    return 0


def cmd_train(args, parser) -> int:
    payload = load_run_config(args.config)
    if args.seed is not None:
        payload["seed"] = args.seed
    method = args.method or payload.get("method")
    manifest_ref = payload.get("manifest")
    if manifest_ref is None:
        raise ConfigurationError("config must name the task manifest under 'manifest'")
    out_ref = args.out or payload.get("out")
    if not out_ref:
        raise ConfigurationError("no output directory: pass --out or set 'out' in the config")
    out = Path(out_ref)

    config = train_config_from_dict(payload)
    if method is not None:
        config = apply_method(config, method)

    manifest_path = Path(manifest_ref)
    if not manifest_path.is_absolute():
        manifest_path = Path(args.config).parent / manifest_path
    seq, _, dataset_root = read_task_manifest(manifest_path)
    dataset_root = Path(dataset_root)
    if not dataset_root.is_absolute():
        dataset_root = manifest_path.parent / dataset_root
    _, records = load_records(dataset_root)
    datasets = split_dataset(records, seq)

    if (out / "run_manifest.json").exists() and not args.force:
        raise ConfigurationError(
            f"{out} already holds a run (run_manifest.json present); pass --force to redo"
        )
    resolved = config_as_dict(config)
    resolved["method"] = method
    resolved["manifest"] = str(manifest_path)
    write_run_manifest(out, "train", str(args.config), config.seed, resolved)

    results = run_incremental(seq, datasets, config, dataset_root, out)
    for result in results:
        last = result.per_epoch_losses[-1]
        terms = " ".join(f"{k}={v:.4f}" for k, v in last.items())
        print(f"step {result.step_index}: {terms} "
              f"({result.wall_time:.1f}s) -> {result.checkpoint_ref}")
    return 0


def cmd_eval(args, parser) -> int:
    out = Path(args.out) if args.out else Path(args.run) / "eval"
    seq, cms, rep = evaluate_run(args.run, args.dataset)
    write_run_manifest(out, "eval", str(args.run), args.seed,
                       {"dataset": str(args.dataset), "steps": sorted(cms)})
    (out / "metrics.csv").write_text(rep.to_csv())
    print(rep.to_text())
    print(out / "metrics.csv")
    return 0


def cmd_analyze(args, parser) -> int:
    out = Path(args.out) if args.out else Path(args.run) / "analysis"
    ckpts = run_checkpoints(args.run)
    images = _dataset_images(args.dataset)
    profile = similarity_profile(ckpts, images, sample_size=args.sample, seed=args.seed)
    write_run_manifest(out, "analyze", str(args.run), args.seed,
                       {"dataset": str(args.dataset), "sample": args.sample})
    written = emit_plots(profile, out)
    for row in profile.per_step:
        print(f"step {row.step}: pos_teacher={row.s_pos_teacher:.4f} "
              f"neg_teacher={row.s_neg_teacher:.4f} pos_depth={row.s_pos_depth:.4f} "
              f"neg_depth={row.s_neg_depth:.4f} ({row.n_images} images)")
    for path in written:
        print(path)
    return 0


def cmd_featmaps(args, parser) -> int:
    ckpts = run_checkpoints(args.run)
    # Layer range comes from the checkpoint itself.
    first_model, _ = load_checkpoint(ckpts[0])
    if not 1 <= args.layer <= first_model.config.n_layers:
        parser.error(
            f"--layer {args.layer} outside 1..{first_model.config.n_layers}"
        )
    if args.image:
        image = Path(args.image)
    elif args.dataset:
        image = _dataset_images(args.dataset)[0]
    else:
        parser.error("featmaps needs --image or --dataset")
    out = Path(args.out) if args.out else Path(args.run) / "featmaps"
    write_run_manifest(out, "featmaps", str(args.run), args.seed,
                       {"image": str(image), "layer": args.layer})
    for ckpt in ckpts:
        _, extra = load_checkpoint(ckpt)
        step = int(extra.get("step_index", 0))
        path = out / f"featmap_step{step}_layer{args.layer}.png"
        export_feature_maps(ckpt, image, args.layer, path)
        print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tisskit",
        description="Incremental segmentation experiments: data, training, "
                    "evaluation, analysis.",
    )
    parser.add_argument("--version", action="version", version=f"tisskit {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("toy", help="generate the synthetic shapes dataset")
    p.add_argument("--out", help="dataset directory (default: under the cache dir)")
    p.add_argument("--images", type=int, default=200)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true", help="regenerate even if present")
    p.set_defaults(func=cmd_toy)

    p = sub.add_parser("split", help="build a task manifest from a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--schedule", required=True, help='A-B string, e.g. "15-1"')
    p.add_argument("--mode", required=True, choices=["disjoint", "overlapped"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="manifest path (default: inside the dataset dir)")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="run incremental training from a config")
    p.add_argument("--config", required=True, help="JSON (or TOML) run config")
    p.add_argument("--method", choices=sorted(METHODS))
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--force", action="store_true", help="overwrite an existing run")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="grouped mIoU of a run's checkpoints")
    p.add_argument("--run", required=True, help="training output directory")
    p.add_argument("--dataset", required=True, help="held-out dataset directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="similarity profile across steps")
    p.add_argument("--run", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--sample", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("featmaps", help="per-checkpoint feature-map PNGs")
    p.add_argument("--run", required=True)
    p.add_argument("--layer", type=int, required=True)
    p.add_argument("--image", help="specific image file")
    p.add_argument("--dataset", help="take the first image of this dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_featmaps)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args, parser)
    except TissKitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

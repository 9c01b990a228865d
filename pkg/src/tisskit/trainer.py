"""Multi-step training: teacher snapshot, head growth, SGD with poly decay.

One call to run_incremental walks the whole schedule. Step 0 trains from
scratch on its classes; every later step reloads the previous checkpoint,
freezes it as the teacher, widens the decoder head for the new classes and
optimizes the combined objective. All randomness is derived from the config
seed, so a run is a pure function of (data, config).
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import losses as LL
from .errors import ConfigurationError, ScheduleError, TrainingError
from .model import ModelConfig, SegViT, decode, grow_head, load_checkpoint, save_checkpoint, snapshot
from .protocol import (
    IGNORE_ID,
    StepDataset,
    TaskSequence,
    derive_seed,
    remap_mask,
)


@dataclass(frozen=True)
class TrainConfig:
    lr_first_step: float = 1e-2
    lr_later_steps: float = 1e-3
    poly_power: float = 0.9
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 20
    batch_size: int = 8
    crop_size: int = 64
    weights: LL.LossWeights = field(default_factory=LL.LossWeights)
    seed: int = 0
    grad_clip: float = 10.0
    # Auxiliary direct patch-map distillation, off unless a method asks.
    aux_l1_weight: float = 0.0
    aux_l2_weight: float = 0.0
    # Plain fine-tuning scores background against only itself.
    naive_partition: bool = False
    head_growth: str = "probability_preserving"
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.lr_first_step < 0 or self.lr_later_steps < 0:
            raise ConfigurationError("learning rates must not be negative")
        if self.poly_power <= 0:
            raise ConfigurationError("poly_power must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be at least 1")
        if self.crop_size < self.model.patch_size:
            raise ConfigurationError("crop_size smaller than one patch")
        if self.aux_l1_weight < 0 or self.aux_l2_weight < 0:
            raise ConfigurationError("auxiliary weights must be non-negative")


@dataclass(frozen=True)
class StepResult:
    step_index: int
    checkpoint_ref: str
    per_epoch_losses: tuple
    wall_time: float


@dataclass(frozen=True)
class MethodSpec:
    """Loss configuration behind one named training method."""

    weights: LL.LossWeights
    aux_l1_weight: float = 0.0
    aux_l2_weight: float = 0.0
    naive_partition: bool = False


# Named methods: ft is plain fine-tuning (standard CE, nothing preserved),
# mib adds the unbiased losses, tiss adds both contrastive terms on top,
# and the mib+<term> variants isolate one extra term each.
METHODS = {
    "ft": MethodSpec(
        weights=LL.LossWeights(w_unce=1.0, w_unkd=0.0, w_cd=0.0, w_ct=0.0),
        naive_partition=True,
    ),
    "mib": MethodSpec(weights=LL.LossWeights(w_unce=1.0, w_unkd=None, w_cd=0.0, w_ct=0.0)),
    "tiss": MethodSpec(weights=LL.LossWeights(w_unce=1.0, w_unkd=None, w_cd=0.1, w_ct=0.1)),
    "mib+l1": MethodSpec(
        weights=LL.LossWeights(w_unce=1.0, w_unkd=None, w_cd=0.0, w_ct=0.0),
        aux_l1_weight=0.01,
    ),
    "mib+l2": MethodSpec(
        weights=LL.LossWeights(w_unce=1.0, w_unkd=None, w_cd=0.0, w_ct=0.0),
        aux_l2_weight=0.01,
    ),
    "mib+cd": MethodSpec(weights=LL.LossWeights(w_unce=1.0, w_unkd=None, w_cd=0.1, w_ct=0.0)),
    "mib+ct": MethodSpec(weights=LL.LossWeights(w_unce=1.0, w_unkd=None, w_cd=0.0, w_ct=0.1)),
}


def apply_method(config: TrainConfig, method: str) -> TrainConfig:
    if method not in METHODS:
        raise ConfigurationError(f"unknown method {method!r}, known: {sorted(METHODS)}")
    spec = METHODS[method]
    return replace(
        config,
        weights=spec.weights,
        aux_l1_weight=spec.aux_l1_weight,
        aux_l2_weight=spec.aux_l2_weight,
        naive_partition=spec.naive_partition,
    )


def resolve_kd_weight(weights: LL.LossWeights, seq: TaskSequence) -> LL.LossWeights:
    """Pin the distillation weight: 10 when a single step is added after the
    first, 30 when new classes keep arriving over several steps."""
    if weights.w_unkd is not None:
        return weights
    incremental_steps = seq.n_steps - 1
    return replace(weights, w_unkd=30.0 if incremental_steps > 1 else 10.0)


def poly_lr(base_lr: float, iteration: int, max_iter: int, power: float) -> float:
    """Polynomial decay base_lr * (1 - iteration/max_iter) ** power."""
    if max_iter < 1:
        raise ScheduleError(f"max_iter must be at least 1, got {max_iter}")
    if not 0 <= iteration <= max_iter:
        raise ScheduleError(f"iteration {iteration} outside 0..{max_iter}")
    return base_lr * (1 - iteration / max_iter) ** power


def hflip(image: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return image[:, ::-1].copy(), mask[:, ::-1].copy()


def rescale(image: np.ndarray, mask: np.ndarray, factor: float) -> tuple[np.ndarray, np.ndarray]:
    """Resize both by one factor; bilinear for the image, nearest for the
    mask so no label is invented."""
    if factor <= 0:
        raise ConfigurationError(f"scale factor must be positive, got {factor}")
    h, w = mask.shape
    nh, nw = max(1, round(h * factor)), max(1, round(w * factor))
    im = Image.fromarray(image).resize((nw, nh), Image.BILINEAR)
    ms = Image.fromarray(mask).resize((nw, nh), Image.NEAREST)
    return np.asarray(im), np.asarray(ms)


def pad_and_crop(image: np.ndarray, mask: np.ndarray, size: int,
                 top: int, left: int) -> tuple[np.ndarray, np.ndarray]:
    """Pad (zeros for the image, ignore for the mask) up to size, then take
    the size x size window at (top, left)."""
    h, w = mask.shape
    ph, pw = max(size - h, 0), max(size - w, 0)
    if ph or pw:
        image = np.pad(image, ((0, ph), (0, pw), (0, 0)))
        mask = np.pad(mask, ((0, ph), (0, pw)), constant_values=IGNORE_ID)
        h, w = mask.shape
    if not (0 <= top <= h - size and 0 <= left <= w - size):
        raise ConfigurationError(f"crop at ({top}, {left}) outside padded {h}x{w} image")
    return (
        image[top:top + size, left:left + size].copy(),
        mask[top:top + size, left:left + size].copy(),
    )


def augment(image: np.ndarray, mask: np.ndarray, config: TrainConfig,
            rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Random horizontal flip, scale in [0.5, 2.0], crop to crop_size.

    Image and mask receive identical geometry; too-small intermediates are
    padded (ignore on the mask) before cropping. Deterministic given the
    generator state, with a fixed draw order.
    """
    if rng.random() < 0.5:
        image, mask = hflip(image, mask)
    factor = rng.uniform(0.5, 2.0)
    image, mask = rescale(image, mask, factor)
    size = config.crop_size
    h = max(mask.shape[0], size)
    w = max(mask.shape[1], size)
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    return pad_and_crop(image, mask, size, top, left)


def _load_step_arrays(step_data: StepDataset, seq: TaskSequence, dataset_root) -> list:
    root = Path(dataset_root)
    loaded = []
    for rec in step_data.records:
        image = np.asarray(Image.open(root / rec.image_ref).convert("RGB"))
        mask = np.asarray(Image.open(root / rec.mask_ref))
        loaded.append((image, remap_mask(mask, step_data, seq)))
    return loaded


def _dump_diagnostics(out_dir: Path, payload: dict):
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "failure_dump.json").write_text(json.dumps(payload, indent=2, sort_keys=True))


def train_step(
    step_data: StepDataset,
    prev_checkpoint,
    config: TrainConfig,
    seq: TaskSequence,
    dataset_root,
    out_dir,
    log_path=None,
) -> StepResult:
    """Train one incremental step and write its checkpoint.

    Step 0 builds a fresh model over background plus its classes. Later
    steps require the previous checkpoint: it becomes the frozen teacher,
    and the student starts from it with the head widened for the new
    classes. Loss terms beyond cross entropy appear only when their weight
    says so. Aborts with a diagnostic dump if the loss turns non-finite.
    """
    t = step_data.step_index
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if t == 0 and prev_checkpoint is not None:
        raise ConfigurationError("step 0 takes no previous checkpoint")
    if t >= 1 and prev_checkpoint is None:
        raise ConfigurationError(f"step {t} needs the previous checkpoint")
    if not step_data.records:
        raise ConfigurationError(f"step {t} has no training records")

    weights = config.weights
    if t >= 1 and weights.w_unkd is None:
        raise ConfigurationError("w_unkd unresolved; resolve_kd_weight before training")

    n_classes = seq.n_classes_at(t)
    teacher = None
    if t == 0:
        model_config = replace(config.model, seed=derive_seed(config.seed, "model"))
        student = SegViT(model_config, n_classes)
    else:
        student, _ = load_checkpoint(prev_checkpoint)
        teacher = snapshot(student)
        student.head = grow_head(student.head, len(step_data.visible_classes),
                                 variant=config.head_growth)
        student.n_classes = n_classes
    student.train()

    if config.naive_partition:
        partition = LL.ClassPartition.naive(n_classes)
    else:
        partition = LL.ClassPartition.from_task(seq, t)

    base_lr = config.lr_first_step if t == 0 else config.lr_later_steps
    optimizer = torch.optim.SGD(
        student.parameters(), lr=base_lr,
        momentum=config.momentum, weight_decay=config.weight_decay,
    )

    data = _load_step_arrays(step_data, seq, dataset_root)
    rng = np.random.default_rng(derive_seed(config.seed, "train", t))
    iters_per_epoch = math.ceil(len(data) / config.batch_size)
    max_iter = config.epochs * iters_per_epoch

    use_kd = t >= 1 and weights.w_unkd > 0
    use_cd = t >= 1 and weights.w_cd > 0
    use_ct = weights.w_ct > 0
    use_aux = t >= 1 and (config.aux_l1_weight > 0 or config.aux_l2_weight > 0)
    need_teacher = use_kd or use_cd or use_aux

    log_file = open(log_path, "a") if log_path is not None else None
    per_epoch = []
    started = time.perf_counter()
    try:
        iteration = 0
        for epoch in range(config.epochs):
            order = rng.permutation(len(data))
            epoch_sums: dict[str, float] = {}
            epoch_lr = poly_lr(base_lr, iteration, max_iter, config.poly_power)
            n_batches = 0
            for start in range(0, len(order), config.batch_size):
                batch_idx = order[start:start + config.batch_size]
                images, masks = [], []
                for j in batch_idx:
                    im, ms = augment(*data[j], config, rng)
                    images.append(im)
                    masks.append(ms)
                x = torch.from_numpy(np.stack(images)).permute(0, 3, 1, 2).float() / 255.0
                y = torch.from_numpy(np.stack(masks).astype(np.int64))

                lr = poly_lr(base_lr, iteration, max_iter, config.poly_power)
                for group in optimizer.param_groups:
                    group["lr"] = lr

                logits, states = student(x, out_size=config.crop_size)
                components = {"unce": LL.unbiased_cross_entropy(logits, y, partition)}
                aux = 0.0
                if need_teacher:
                    with torch.no_grad():
                        teacher_logits, teacher_states = teacher(x, out_size=config.crop_size)
                if use_kd:
                    components["unkd"] = LL.unbiased_kd(
                        logits, teacher_logits, partition, ignore_mask=y == IGNORE_ID
                    )
                if use_cd:
                    components["cd"] = LL.contrastive_distillation(
                        states.last, teacher_states.last
                    )
                if use_ct:
                    components["ct"] = LL.contrastive_patch(states.last, states.first)
                loss = LL.total_loss(components, weights, t)
                if use_aux:
                    if config.aux_l1_weight > 0:
                        aux = aux + config.aux_l1_weight * LL.patch_l1(states, teacher_states)
                    if config.aux_l2_weight > 0:
                        aux = aux + config.aux_l2_weight * LL.patch_l2(states, teacher_states)
                    loss = loss + aux

                if not torch.isfinite(loss):
                    payload = {
                        "step": t, "epoch": epoch, "iteration": iteration,
                        "components": {k: float(v.detach()) for k, v in components.items()},
                        "lr": lr,
                    }
                    _dump_diagnostics(out_dir, payload)
                    raise TrainingError(f"non-finite loss at step {t} epoch {epoch}")

                optimizer.zero_grad()
                loss.backward()
                if config.grad_clip > 0:
                    torch.nn.utils.clip_grad_norm_(student.parameters(), config.grad_clip)
                optimizer.step()
                iteration += 1
                n_batches += 1
                epoch_sums["total"] = epoch_sums.get("total", 0.0) + float(loss.detach())
                for k, v in components.items():
                    epoch_sums[k] = epoch_sums.get(k, 0.0) + float(v.detach())
                if use_aux:
                    epoch_sums["aux"] = epoch_sums.get("aux", 0.0) + float(aux.detach())

            means = {k: v / n_batches for k, v in sorted(epoch_sums.items())}
            per_epoch.append(means)
            if log_file is not None:
                record = {"step": t, "epoch": epoch, "lr": epoch_lr, **means}
                log_file.write(json.dumps(record, sort_keys=True) + "\n")
    finally:
        if log_file is not None:
            log_file.close()

    ckpt = out_dir / f"step{t:02d}.ckpt"
    save_checkpoint(
        ckpt,
        student,
        extra={
            "step_index": t,
            "class_names": list(seq.label_space.class_names),
            "step_sizes": list(seq.step_sizes),
            "mode": seq.mode,
            "seed": config.seed,
        },
    )
    return StepResult(
        step_index=t,
        checkpoint_ref=str(ckpt),
        per_epoch_losses=tuple(per_epoch),
        wall_time=time.perf_counter() - started,
    )


def run_incremental(
    seq: TaskSequence,
    datasets: list[StepDataset],
    config: TrainConfig,
    dataset_root,
    out_dir,
) -> list[StepResult]:
    """Train every step in order, chaining checkpoints.

    The first step uses lr_first_step, later steps lr_later_steps. An
    unresolved distillation weight is pinned from the schedule here.
    """
    if len(datasets) != seq.n_steps:
        raise ConfigurationError(
            f"{len(datasets)} step datasets for a {seq.n_steps}-step schedule"
        )
    for t, ds in enumerate(datasets):
        if ds.step_index != t:
            raise ConfigurationError(f"dataset {t} carries step_index {ds.step_index}")
    config = replace(config, weights=resolve_kd_weight(config.weights, seq))
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "train_log.jsonl"
    log_path.write_text("")
    results = []
    prev = None
    for t, ds in enumerate(datasets):
        result = train_step(ds, prev, config, seq, dataset_root, out_dir, log_path=log_path)
        results.append(result)
        prev = result.checkpoint_ref
    return results

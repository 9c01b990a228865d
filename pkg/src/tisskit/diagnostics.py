"""Analysis artifacts: similarity curves across steps and feature-map PNGs.

The similarity profile tracks two things as steps accumulate: how close the
current model's deepest patch states stay to the previous model's (the
forgetting axis) and how similar they are to its own first layer (the
plasticity axis). Both use the matched/unmatched absolute-cosine statistics
from the loss module, computed on un-augmented images.
"""

from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import ConfigurationError, ModelError
from .losses import s_negative, s_positive
from .model import load_checkpoint
from .protocol import derive_seed

SIMILARITY_CSV_HEADER = ("step", "s_pos_teacher", "s_neg_teacher",
                         "s_pos_depth", "s_neg_depth", "n_images")


@dataclass(frozen=True)
class SimilarityRow:
    step: int
    s_pos_teacher: float
    s_neg_teacher: float
    s_pos_depth: float
    s_neg_depth: float
    n_images: int

    def __post_init__(self):
        for name in ("s_pos_teacher", "s_neg_teacher", "s_pos_depth", "s_neg_depth"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigurationError(f"{name}={value} outside [0, 1] at step {self.step}")
        if self.n_images < 1:
            raise ConfigurationError("similarity row averages at least one image")


@dataclass(frozen=True)
class SimilarityProfile:
    per_step: tuple[SimilarityRow, ...]


def _load_image_tensor(image, image_size: int) -> torch.Tensor:
    if isinstance(image, (str, Path)):
        arr = np.asarray(Image.open(image).convert("RGB"))
    else:
        arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ModelError(f"expected an RGB image, got shape {arr.shape}")
    if arr.shape[0] != image_size or arr.shape[1] != image_size:
        raise ModelError(f"expected {image_size}x{image_size} image, got {arr.shape[:2]}")
    return torch.from_numpy(arr.copy()).permute(2, 0, 1).float() / 255.0


def _sample_images(eval_images, sample_size: int, seed: int) -> list:
    images = list(eval_images)
    if not images:
        raise ConfigurationError("no images to profile")
    if sample_size < 1:
        raise ConfigurationError("sample_size must be at least 1")
    if len(images) <= sample_size:
        return images
    rng = np.random.default_rng(derive_seed(seed, "similarity-sample"))
    picked = rng.choice(len(images), size=sample_size, replace=False)
    return [images[i] for i in sorted(picked)]


def similarity_profile(checkpoints, eval_images, sample_size: int = 50,
                       seed: int = 0) -> SimilarityProfile:
    """Per-step similarity statistics between consecutive checkpoints.

    checkpoints must be ordered by step; for each step past the first, the
    previous checkpoint acts as the frozen reference. Images are used
    as-is, no augmentation, and the same sample feeds every step, so rows
    are comparable. Deterministic given checkpoints, images, and seed.
    """
    paths = [Path(p) for p in checkpoints]
    if len(paths) < 2:
        raise ConfigurationError("need at least two checkpoints to compare steps")
    models = []
    for p in paths:
        model, extra = load_checkpoint(p)
        model.eval()
        models.append((model, extra))
    first_config = models[0][0].config
    for model, _ in models[1:]:
        if model.config != first_config:
            raise ConfigurationError("checkpoints use different encoder configurations")

    sample = _sample_images(eval_images, sample_size, seed)
    tensors = torch.stack(
        [_load_image_tensor(im, first_config.image_size) for im in sample]
    )

    with torch.no_grad():
        all_states = [model.encode(tensors) for model, _ in models]

    rows = []
    for t in range(1, len(models)):
        student, teacher = all_states[t], all_states[t - 1]
        pos_t, neg_t, pos_d, neg_d = [], [], [], []
        for i in range(len(sample)):
            s_last = student.last[i]
            pos_t.append(float(s_positive(s_last, teacher.last[i])))
            neg_t.append(float(s_negative(s_last, teacher.last[i])))
            pos_d.append(float(s_positive(s_last, student.first[i])))
            neg_d.append(float(s_negative(s_last, student.first[i])))
        step_index = int(models[t][1].get("step_index", t))
        rows.append(
            SimilarityRow(
                step=step_index,
                s_pos_teacher=float(np.mean(pos_t)),
                s_neg_teacher=float(np.mean(neg_t)),
                s_pos_depth=float(np.mean(pos_d)),
                s_neg_depth=float(np.mean(neg_d)),
                n_images=len(sample),
            )
        )
    return SimilarityProfile(per_step=tuple(rows))


def export_feature_maps(checkpoint, image, layer: int, out_path) -> Path:
    """Write one grayscale PNG: channel-mean patch activity on the grid.

    The selected layer's patch states are averaged over channels, reshaped
    to the patch grid and min-max scaled to 0..255. A constant map (all
    patches identical) renders uniform mid-gray rather than dividing by
    zero.
    """
    model, _ = load_checkpoint(checkpoint)
    model.eval()
    if not 1 <= layer <= model.config.n_layers:
        raise ModelError(f"layer {layer} outside 1..{model.config.n_layers}")
    tensor = _load_image_tensor(image, model.config.image_size)
    with torch.no_grad():
        states = model.encode(tensor.unsqueeze(0))
    values = states.layer(layer)[0].mean(dim=1).numpy()
    g = model.config.grid_size
    grid = values.reshape(g, g)
    lo, hi = float(grid.min()), float(grid.max())
    if hi - lo < 1e-12:
        pixels = np.full((g, g), 128, dtype=np.uint8)
    else:
        pixels = np.round((grid - lo) / (hi - lo) * 255).astype(np.uint8)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(pixels, mode="L").save(out_path)
    return out_path


def profile_csv(profile: SimilarityProfile) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SIMILARITY_CSV_HEADER)
    for row in profile.per_step:
        writer.writerow([
            row.step,
            f"{row.s_pos_teacher:.6f}",
            f"{row.s_neg_teacher:.6f}",
            f"{row.s_pos_depth:.6f}",
            f"{row.s_neg_depth:.6f}",
            row.n_images,
        ])
    return buf.getvalue()


def emit_plots(profile: SimilarityProfile, out_dir) -> list[Path]:
    """Write the profile CSV plus one line plot per statistic.

    The CSV is the contract; plots are best-effort and degrade to CSV-only
    with a warning if the plotting backend is unavailable.
    """
    if not profile.per_step:
        raise ConfigurationError("empty profile, nothing to emit")
    for row in profile.per_step:
        for name in ("s_pos_teacher", "s_neg_teacher", "s_pos_depth", "s_neg_depth"):
            value = getattr(row, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigurationError(f"{name}={value} outside [0, 1]")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    csv_path = out_dir / "similarity.csv"
    csv_path.write_text(profile_csv(profile))
    written.append(csv_path)

    steps = [row.step for row in profile.per_step]
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        for name in ("s_pos_teacher", "s_neg_teacher", "s_pos_depth", "s_neg_depth"):
            fig, ax = plt.subplots(figsize=(4, 3))
            ax.plot(steps, [getattr(row, name) for row in profile.per_step], marker="o")
            ax.set_xlabel("step")
            ax.set_ylabel(name)
            ax.set_ylim(0.0, 1.0)
            ax.set_xticks(steps)
            fig.tight_layout()
            path = out_dir / f"{name}.png"
            fig.savefig(path)
            plt.close(fig)
            written.append(path)
    except Exception as exc:  # plotting is optional by contract
        warnings.warn(f"plotting unavailable ({exc}); wrote CSV only")
    return written

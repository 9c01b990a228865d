"""Incremental class schedules, dataset splitting, mask remapping, toy data.

Conventions used throughout the package: class 0 is background, 255 is the
ignore label, foreground classes are 1..K in a fixed global order. A task
sequence partitions 1..K into consecutive steps; step t trains only on its
own new classes, everything else in a training mask is collapsed to
background (old classes included, which is what makes the setting hard).
"""

from __future__ import annotations

import colorsys
import hashlib
import json
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .errors import DataError, ProtocolError, ScheduleError

BACKGROUND_ID = 0
IGNORE_ID = 255

# PNG masks are uint8, 255 is reserved for ignore.
MAX_FOREGROUND_CLASSES = 254


def derive_seed(base_seed: int, *tags) -> int:
    """Stable per-purpose seed derived from a base seed and string/int tags."""
    text = ":".join([str(base_seed), *[str(t) for t in tags]])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


@dataclass(frozen=True)
class LabelSpace:
    """Fixed label universe: background plus an ordered tuple of foreground names.

    class_names lists foreground classes only; class id c (1-based) has name
    class_names[c - 1]. Background and ignore ids are fixed by convention.
    """

    class_names: tuple[str, ...]
    background_id: int = BACKGROUND_ID
    ignore_id: int = IGNORE_ID

    def __post_init__(self):
        if len(self.class_names) == 0:
            raise ProtocolError("label space needs at least one foreground class")
        if len(self.class_names) > MAX_FOREGROUND_CLASSES:
            raise ProtocolError(
                f"at most {MAX_FOREGROUND_CLASSES} foreground classes supported, "
                f"got {len(self.class_names)}"
            )
        if len(set(self.class_names)) != len(self.class_names):
            raise ProtocolError("class names must be unique")
        if self.background_id != BACKGROUND_ID or self.ignore_id != IGNORE_ID:
            raise ProtocolError("background must be 0 and ignore must be 255")

    @property
    def n_foreground(self) -> int:
        return len(self.class_names)

    @property
    def n_classes(self) -> int:
        """Foreground classes plus background."""
        return len(self.class_names) + 1

    def name_of(self, class_id: int) -> str:
        if class_id == self.background_id:
            return "background"
        if not 1 <= class_id <= self.n_foreground:
            raise ProtocolError(f"class id {class_id} outside label space")
        return self.class_names[class_id - 1]


@dataclass(frozen=True)
class TaskSequence:
    """A label space plus a partition of its foreground classes into steps."""

    label_space: LabelSpace
    step_sizes: tuple[int, ...]
    mode: str

    def __post_init__(self):
        if self.mode not in ("disjoint", "overlapped"):
            raise ScheduleError(f"unknown mode {self.mode!r}, expected disjoint or overlapped")
        if len(self.step_sizes) == 0:
            raise ScheduleError("schedule needs at least one step")
        if any(s <= 0 for s in self.step_sizes):
            raise ScheduleError(f"step sizes must be positive, got {self.step_sizes}")
        if sum(self.step_sizes) != self.label_space.n_foreground:
            raise ScheduleError(
                f"step sizes sum to {sum(self.step_sizes)}, label space has "
                f"{self.label_space.n_foreground} foreground classes"
            )

    @property
    def n_steps(self) -> int:
        return len(self.step_sizes)

    def _check_step(self, step: int):
        if not 0 <= step < self.n_steps:
            raise ScheduleError(f"step {step} out of range for {self.n_steps} steps")

    def new_classes(self, step: int) -> tuple[int, ...]:
        """Foreground class ids introduced at this step, in global order."""
        self._check_step(step)
        start = 1 + sum(self.step_sizes[:step])
        return tuple(range(start, start + self.step_sizes[step]))

    def seen_classes(self, step: int) -> tuple[int, ...]:
        """Background plus every class introduced up to and including this step."""
        self._check_step(step)
        return tuple(range(0, 1 + sum(self.step_sizes[: step + 1])))

    def old_classes(self, step: int) -> tuple[int, ...]:
        """Classes the model already knows entering this step (background included)."""
        self._check_step(step)
        return tuple(range(0, 1 + sum(self.step_sizes[:step])))

    def n_classes_at(self, step: int) -> int:
        return len(self.seen_classes(step))


@dataclass(frozen=True)
class SampleRecord:
    """One image/mask pair; refs are paths relative to the dataset root."""

    image_ref: str
    mask_ref: str
    present_classes: frozenset[int]


@dataclass(frozen=True)
class StepDataset:
    """The records assigned to one step and the classes supervised there."""

    step_index: int
    records: tuple[SampleRecord, ...]
    visible_classes: frozenset[int]


_SCHEDULE_RE = re.compile(r"^(\d+)-(\d+)$")


def parse_schedule(text: str, n_foreground: int) -> tuple[int, ...]:
    """Expand an "A-B" schedule string: A classes first, then B at a time.

    "15-1" over 20 classes gives (15, 1, 1, 1, 1, 1). The remainder after the
    first step must divide evenly by B.
    """
    m = _SCHEDULE_RE.match(text.strip())
    if m is None:
        raise ScheduleError(f"schedule {text!r} does not match the A-B form, e.g. 15-1")
    first, per_step = int(m.group(1)), int(m.group(2))
    if first <= 0 or per_step <= 0:
        raise ScheduleError(f"schedule parts must be positive, got {text!r}")
    if first > n_foreground:
        raise ScheduleError(
            f"schedule {text!r} starts with {first} classes, label space has {n_foreground}"
        )
    rest = n_foreground - first
    if rest % per_step != 0:
        raise ScheduleError(
            f"schedule {text!r} leaves {rest} classes, not divisible by {per_step}"
        )
    return (first, *([per_step] * (rest // per_step)))


def build_task_sequence(class_names, step_sizes, mode: str) -> TaskSequence:
    space = LabelSpace(class_names=tuple(class_names))
    return TaskSequence(label_space=space, step_sizes=tuple(int(s) for s in step_sizes), mode=mode)


def split_dataset(records, seq: TaskSequence) -> list[StepDataset]:
    """Assign records to steps under the sequence's mode.

    Every step's pool contains only images with at least one pixel of that
    step's new classes. Disjoint additionally requires that no class from a
    future step appears anywhere in the image; overlapped admits any image
    that shows a new class, whatever else it contains. A record can appear
    in several steps under overlapped, at most one under disjoint given
    each image shows some class.
    """
    records = list(records)
    n_fg = seq.label_space.n_foreground
    for rec in records:
        bad = [c for c in rec.present_classes if not 1 <= c <= n_fg]
        if bad:
            raise ProtocolError(f"record {rec.image_ref} lists classes {bad} outside 1..{n_fg}")

    steps = []
    for t in range(seq.n_steps):
        new = frozenset(seq.new_classes(t))
        allowed = frozenset(seq.seen_classes(t))
        chosen = []
        for rec in records:
            if not rec.present_classes & new:
                continue
            if seq.mode == "disjoint" and not rec.present_classes <= allowed:
                continue
            chosen.append(rec)
        if not chosen:
            raise ProtocolError(
                f"step {t} ({seq.mode}) received no images for classes {sorted(new)}"
            )
        steps.append(StepDataset(step_index=t, records=tuple(chosen), visible_classes=new))
    return steps


def _check_mask_values(mask: np.ndarray, n_foreground: int, ref: str = "mask"):
    if mask.dtype != np.uint8:
        raise DataError(f"{ref}: expected uint8 mask, got {mask.dtype}")
    values = np.unique(mask)
    bad = values[(values > n_foreground) & (values != IGNORE_ID)]
    if bad.size:
        raise DataError(f"{ref}: labels {bad.tolist()} outside 0..{n_foreground} and {IGNORE_ID}")


def remap_mask(mask: np.ndarray, step: StepDataset, seq: TaskSequence) -> np.ndarray:
    """Training-time view of a mask: keep this step's classes and ignore,
    collapse every other label (old and future foreground included) to
    background. Returns a new array."""
    _check_mask_values(mask, seq.label_space.n_foreground)
    out = np.full_like(mask, BACKGROUND_ID)
    for c in step.visible_classes:
        out[mask == c] = c
    out[mask == IGNORE_ID] = IGNORE_ID
    return out


def mask_for_eval(mask: np.ndarray, seq: TaskSequence, step: int) -> np.ndarray:
    """Evaluation-time view: keep labels the model has seen by this step,
    send later-step classes to ignore so they count for no one."""
    _check_mask_values(mask, seq.label_space.n_foreground)
    seen = set(seq.seen_classes(step))
    out = mask.copy()
    unseen = ~np.isin(mask, sorted(seen)) & (mask != IGNORE_ID)
    out[unseen] = IGNORE_ID
    return out


def write_task_manifest(path, seq: TaskSequence, seed: int, dataset_root: str) -> Path:
    """Persist a task definition as JSON with stable key order."""
    path = Path(path)
    payload = {
        "class_names": list(seq.label_space.class_names),
        "dataset_root": str(dataset_root),
        "mode": seq.mode,
        "seed": int(seed),
        "step_sizes": list(seq.step_sizes),
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def read_task_manifest(path) -> tuple[TaskSequence, int, str]:
    path = Path(path)
    try:
        payload = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"cannot read task manifest {path}: {exc}") from exc
    missing = {"class_names", "step_sizes", "mode", "seed", "dataset_root"} - payload.keys()
    if missing:
        raise ProtocolError(f"task manifest {path} missing keys {sorted(missing)}")
    seq = build_task_sequence(payload["class_names"], payload["step_sizes"], payload["mode"])
    return seq, int(payload["seed"]), payload["dataset_root"]


def load_records(dataset_dir) -> tuple[list[str], list[SampleRecord]]:
    """Scan a dataset directory (images/, masks/, classes.json) into records.

    Present classes are read off the masks, so splitting needs no side files.
    Filenames are sorted for a stable record order.
    """
    root = Path(dataset_dir)
    classes_file = root / "classes.json"
    if not classes_file.exists():
        raise DataError(f"{root} has no classes.json")
    names = json.loads(classes_file.read_text()).get("class_names")
    if not names:
        raise DataError(f"{classes_file} lists no class_names")
    n_fg = len(names)

    mask_dir = root / "masks"
    image_dir = root / "images"
    records = []
    for mask_path in sorted(mask_dir.glob("*.png")):
        image_path = image_dir / mask_path.name
        if not image_path.exists():
            raise DataError(f"mask {mask_path.name} has no matching image")
        mask = np.asarray(Image.open(mask_path))
        _check_mask_values(mask, n_fg, ref=str(mask_path))
        present = frozenset(int(v) for v in np.unique(mask) if 1 <= v <= n_fg)
        records.append(
            SampleRecord(
                image_ref=str(Path("images") / mask_path.name),
                mask_ref=str(Path("masks") / mask_path.name),
                present_classes=present,
            )
        )
    if not records:
        raise DataError(f"{mask_dir} contains no mask PNGs")
    return list(names), records


def class_palette(n_classes: int) -> list[tuple[int, int, int]]:
    """Distinct saturated colors, one per foreground class."""
    colors = []
    for c in range(n_classes):
        r, g, b = colorsys.hsv_to_rgb(c / n_classes, 0.85, 0.95)
        colors.append((int(r * 255), int(g * 255), int(b * 255)))
    return colors


def _draw_shape(draw_img, draw_mask, shape: str, cx: int, cy: int, r: int, color, class_id: int):
    box = (cx - r, cy - r, cx + r, cy + r)
    if shape == "circle":
        draw_img.ellipse(box, fill=color)
        draw_mask.ellipse(box, fill=class_id)
    elif shape == "square":
        draw_img.rectangle(box, fill=color)
        draw_mask.rectangle(box, fill=class_id)
    else:
        pts = [(cx, cy - r), (cx - r, cy + r), (cx + r, cy + r)]
        draw_img.polygon(pts, fill=color)
        draw_mask.polygon(pts, fill=class_id)


def generate_toy_dataset(
    out_dir, n_images: int, image_size: int, n_classes: int, seed: int
) -> list[SampleRecord]:
    """Write a synthetic corpus of colored shapes on textured gray ground.

    Each foreground class has a fixed hue; image i is guaranteed to contain
    class (i mod n_classes) + 1 and may contain up to two other classes, so
    every class is frequent and classes co-occur (which is what makes the
    incremental splits non-trivial). Masks contain labels 0..n_classes only,
    never ignore. Deterministic for a given seed.
    """
    if n_images <= 0 or image_size <= 0:
        raise DataError("n_images and image_size must be positive")
    if not 1 <= n_classes <= MAX_FOREGROUND_CLASSES:
        raise DataError(f"n_classes must be in 1..{MAX_FOREGROUND_CLASSES}")

    root = Path(out_dir)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(derive_seed(seed, "toy", n_images, image_size, n_classes))
    palette = class_palette(n_classes)
    shapes = ("circle", "square", "triangle")
    records = []

    for i in range(n_images):
        # Dim smooth noise keeps the ground visually distinct from the
        # saturated class hues.
        base = rng.integers(25, 65)
        coarse = rng.integers(-18, 19, size=(4, 4)).astype(np.float32)
        fine = np.asarray(
            Image.fromarray(coarse, mode="F").resize((image_size, image_size), Image.BILINEAR)
        )
        gray = np.clip(base + fine, 0, 255).astype(np.uint8)
        tint = rng.integers(-8, 9, size=3)
        img_arr = np.clip(gray[..., None].astype(np.int16) + tint[None, None, :], 0, 255)
        image = Image.fromarray(img_arr.astype(np.uint8), mode="RGB")
        mask = Image.new("L", (image_size, image_size), BACKGROUND_ID)
        draw_img = ImageDraw.Draw(image)
        draw_mask = ImageDraw.Draw(mask)

        # The guaranteed class is drawn last so no extra shape can bury it;
        # image i therefore always shows class (i mod n_classes) + 1.
        guaranteed = (i % n_classes) + 1
        others = [c for c in range(1, n_classes + 1) if c != guaranteed]
        n_extra = int(rng.integers(0, min(2, len(others)) + 1)) if others else 0
        extras = list(rng.choice(others, size=n_extra, replace=False)) if n_extra else []
        for class_id in [*extras, guaranteed]:
            class_id = int(class_id)
            r = int(rng.integers(max(2, image_size // 8), max(3, image_size // 4) + 1))
            cx = int(rng.integers(r, image_size - r + 1))
            cy = int(rng.integers(r, image_size - r + 1))
            shape = shapes[int(rng.integers(0, len(shapes)))]
            jitter = rng.integers(-12, 13, size=3)
            color = tuple(int(np.clip(palette[class_id - 1][k] + jitter[k], 0, 255)) for k in range(3))
            _draw_shape(draw_img, draw_mask, shape, cx, cy, r, color, class_id)

        name = f"{i:04d}.png"
        image.save(root / "images" / name)
        mask.save(root / "masks" / name)
        mask_arr = np.asarray(mask)
        present = frozenset(int(v) for v in np.unique(mask_arr) if v != BACKGROUND_ID)
        records.append(
            SampleRecord(
                image_ref=str(Path("images") / name),
                mask_ref=str(Path("masks") / name),
                present_classes=present,
            )
        )

    names = [f"class_{c:02d}" for c in range(1, n_classes + 1)]
    (root / "classes.json").write_text(
        json.dumps({"class_names": names}, indent=2, sort_keys=True) + "\n"
    )
    return records

"""Training objectives for incremental segmentation.

Two ideas run through this module. First, the background channel is never
trusted on its own: at any incremental step, pixels labeled background may
belong to classes from other steps, so the cross-entropy and distillation
terms score background against sums of class probabilities instead of the
single background probability. Second, patch geometry is supervised
directly: similarity matrices over patch states feed contrastive terms that
hold the representation close to the previous model and keep deep states
informative about shallow ones.

All losses preserve the input dtype, support single images or batches, and
exclude ignored pixels from every average.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ConfigurationError, LossError
from .model import PatchStates
from .protocol import BACKGROUND_ID, IGNORE_ID, TaskSequence

COSINE_EPS = 1e-8


@dataclass(frozen=True)
class ClassPartition:
    """Split of a model's output channels into already-known and new classes.

    Channels must cover 0..C-1 with background (0) on the old side; "old"
    at the very first step is just the background channel.
    """

    old_classes: frozenset
    new_classes: frozenset

    def __post_init__(self):
        old = frozenset(int(c) for c in self.old_classes)
        new = frozenset(int(c) for c in self.new_classes)
        object.__setattr__(self, "old_classes", old)
        object.__setattr__(self, "new_classes", new)
        if BACKGROUND_ID not in old:
            raise LossError("background must belong to the old classes")
        if not new:
            raise LossError("partition needs at least one new class")
        if old & new:
            raise LossError(f"classes {sorted(old & new)} appear on both sides")
        union = old | new
        if union != set(range(len(union))):
            raise LossError(f"partition channels {sorted(union)} are not contiguous from 0")

    @property
    def n_classes(self) -> int:
        return len(self.old_classes) + len(self.new_classes)

    @property
    def n_old(self) -> int:
        return len(self.old_classes)

    @classmethod
    def from_task(cls, seq: TaskSequence, step: int) -> "ClassPartition":
        return cls(
            old_classes=frozenset(seq.old_classes(step)),
            new_classes=frozenset(seq.new_classes(step)),
        )

    @classmethod
    def naive(cls, n_classes: int) -> "ClassPartition":
        """Background-only old side; turns the unbiased terms into their
        standard counterparts, used by the plain fine-tuning baseline."""
        return cls(old_classes=frozenset([BACKGROUND_ID]),
                   new_classes=frozenset(range(1, n_classes)))


@dataclass(frozen=True)
class LossWeights:
    """Weights of the four combined-objective terms.

    w_unkd may be None, meaning "resolve from the schedule when the run
    starts" (single added step and multi-step runs want different values).
    """

    w_unce: float = 1.0
    w_unkd: float | None = None
    w_cd: float = 0.1
    w_ct: float = 0.1

    def __post_init__(self):
        for name in ("w_unce", "w_cd", "w_ct"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be non-negative")
        if self.w_unkd is not None and self.w_unkd < 0:
            raise ConfigurationError("w_unkd must be non-negative")


def _flatten_logits(logits: torch.Tensor, target: torch.Tensor):
    if logits.dim() == 3:
        logits = logits.unsqueeze(0)
        target = target.unsqueeze(0)
    if logits.dim() != 4:
        raise LossError(f"expected [C, H, W] or [B, C, H, W] logits, got {tuple(logits.shape)}")
    if target.shape != (logits.shape[0], *logits.shape[2:]):
        raise LossError(f"target shape {tuple(target.shape)} does not match logits")
    b, c = logits.shape[:2]
    return logits.reshape(b, c, -1), target.reshape(b, -1)


def unbiased_cross_entropy(
    logits: torch.Tensor,
    target: torch.Tensor,
    partition: ClassPartition,
    ignore_id: int = IGNORE_ID,
) -> torch.Tensor:
    """Cross entropy where background pixels score the whole old-class bucket.

    A pixel labeled c != background contributes -log p(c) as usual. A pixel
    labeled background contributes -log sum of p over the old classes,
    background included: anything the model used to know is an acceptable
    account of a background label. When the old side is background only this
    is exactly standard cross entropy. Mean over non-ignored pixels.
    """
    logits, target = _flatten_logits(logits, target)
    c = logits.shape[1]
    if partition.n_classes != c:
        raise LossError(f"partition covers {partition.n_classes} classes, logits have {c}")
    valid = target != ignore_id
    if not bool(valid.any()):
        raise LossError("every pixel is ignored, nothing to average")
    checked = target[valid]
    if int(checked.min()) < 0 or int(checked.max()) >= c:
        raise LossError(f"target labels outside 0..{c - 1}")

    log_p = F.log_softmax(logits, dim=1)
    old_idx = torch.tensor(sorted(partition.old_classes), device=logits.device)
    log_bucket = torch.logsumexp(log_p.index_select(1, old_idx), dim=1)
    gathered = log_p.gather(1, target.clamp(0, c - 1).unsqueeze(1)).squeeze(1)
    per_pixel = torch.where(target == BACKGROUND_ID, log_bucket, gathered)
    return -per_pixel[valid].mean()


def unbiased_kd(
    student_logits: torch.Tensor,
    teacher_logits: torch.Tensor,
    partition: ClassPartition,
    ignore_mask: torch.Tensor | None = None,
) -> torch.Tensor:
    """Distillation from the previous model with new classes folded into
    background.

    The teacher only knows the old classes. The student's probabilities are
    regrouped to the teacher's space: the background entry absorbs the new
    classes (a pixel the teacher called background may legally be a new
    class now), every other old class maps through unchanged. The loss is
    the cross entropy between teacher probabilities and the regrouped
    student log-probabilities, averaged over pixels not excluded by
    ignore_mask (True means excluded).
    """
    if student_logits.dim() == 3:
        student_logits = student_logits.unsqueeze(0)
        teacher_logits = teacher_logits.unsqueeze(0)
        if ignore_mask is not None:
            ignore_mask = ignore_mask.unsqueeze(0)
    if student_logits.dim() != 4 or teacher_logits.dim() != 4:
        raise LossError("expected [C, H, W] or [B, C, H, W] logits")
    if student_logits.shape[1] != partition.n_classes:
        raise LossError(
            f"student has {student_logits.shape[1]} channels, partition covers "
            f"{partition.n_classes}"
        )
    if teacher_logits.shape[1] != partition.n_old:
        raise LossError(
            f"teacher has {teacher_logits.shape[1]} channels, partition has "
            f"{partition.n_old} old classes"
        )
    if teacher_logits.shape[0] != student_logits.shape[0] or (
        teacher_logits.shape[2:] != student_logits.shape[2:]
    ):
        raise LossError("student and teacher logits must share batch and spatial shape")

    b, c = student_logits.shape[:2]
    log_p = F.log_softmax(student_logits.reshape(b, c, -1), dim=1)
    bucket_idx = torch.tensor(
        sorted({BACKGROUND_ID} | partition.new_classes), device=log_p.device
    )
    log_bucket = torch.logsumexp(log_p.index_select(1, bucket_idx), dim=1)

    old_sorted = sorted(partition.old_classes)
    rows = [
        log_bucket if cls == BACKGROUND_ID else log_p[:, cls]
        for cls in old_sorted
    ]
    log_q = torch.stack(rows, dim=1)                      # [B, old, N]

    p_teacher = F.softmax(teacher_logits.reshape(b, partition.n_old, -1), dim=1)
    per_pixel = -(p_teacher * log_q).sum(dim=1)           # [B, N]

    if ignore_mask is None:
        return per_pixel.mean()
    if ignore_mask.shape != (b, *student_logits.shape[2:]):
        raise LossError(f"ignore_mask shape {tuple(ignore_mask.shape)} does not match logits")
    keep = ~ignore_mask.reshape(b, -1)
    if not bool(keep.any()):
        raise LossError("every pixel is ignored, nothing to average")
    return per_pixel[keep].mean()


def _check_state_pair(a: PatchStates, b: PatchStates):
    if a.depth != b.depth:
        raise LossError(f"state depths differ: {a.depth} vs {b.depth}")
    if a.layers[0].shape != b.layers[0].shape:
        raise LossError(
            f"state shapes differ: {tuple(a.layers[0].shape)} vs {tuple(b.layers[0].shape)}"
        )


def patch_l1(states_a: PatchStates, states_b: PatchStates) -> torch.Tensor:
    """Mean over layers of the summed absolute difference of patch states.

    The inner sum runs over every patch and coordinate, so the value scales
    with patch count and width; callers weight it accordingly. Batched
    states average the per-image values.
    """
    _check_state_pair(states_a, states_b)
    per_layer = [
        (ha - hb).abs().sum(dim=(-2, -1))
        for ha, hb in zip(states_a.layers, states_b.layers)
    ]
    stacked = torch.stack(per_layer)                      # [L] or [L, B]
    return stacked.mean(dim=0).mean()


def patch_l2(states_a: PatchStates, states_b: PatchStates) -> torch.Tensor:
    """Mean over layers of the summed squared difference of patch states."""
    _check_state_pair(states_a, states_b)
    per_layer = [
        (ha - hb).square().sum(dim=(-2, -1))
        for ha, hb in zip(states_a.layers, states_b.layers)
    ]
    stacked = torch.stack(per_layer)
    return stacked.mean(dim=0).mean()


def abs_cos_matrix(a: torch.Tensor, b: torch.Tensor, eps: float = COSINE_EPS) -> torch.Tensor:
    """Pairwise absolute cosine similarity between two patch sets.

    Entry (i, j) is |a_i . b_j| / max(|a_i| |b_j|, eps), clamped to at most
    1 so downstream code can rely on values in [0, 1] even under float
    round-off.
    """
    if a.dim() != 2 or b.dim() != 2:
        raise LossError(f"expected [n, d] inputs, got {tuple(a.shape)} and {tuple(b.shape)}")
    if a.shape[1] != b.shape[1]:
        raise LossError(f"width mismatch: {a.shape[1]} vs {b.shape[1]}")
    num = a @ b.T
    den = (a.norm(dim=1).unsqueeze(1) * b.norm(dim=1).unsqueeze(0)).clamp_min(eps)
    return (num / den).abs().clamp(max=1.0)


def s_negative(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Mean off-diagonal absolute cosine between two equally sized patch sets."""
    m = abs_cos_matrix(a, b)
    n = m.shape[0]
    if m.shape[0] != m.shape[1]:
        raise LossError("off-diagonal statistic needs equally many patches on both sides")
    if n < 2:
        raise LossError("off-diagonal statistic needs at least two patches")
    return (m.sum() - m.diagonal().sum()) / (n * (n - 1))


def s_positive(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Mean absolute cosine between matching patches of two sets."""
    m = abs_cos_matrix(a, b)
    if m.shape[0] != m.shape[1]:
        raise LossError("matched-pair statistic needs equally many patches on both sides")
    return m.diagonal().mean()


def _batched_abs_cos(a: torch.Tensor, b: torch.Tensor, eps: float) -> torch.Tensor:
    num = torch.bmm(a, b.transpose(1, 2))
    den = (a.norm(dim=2).unsqueeze(2) * b.norm(dim=2).unsqueeze(1)).clamp_min(eps)
    return (num / den).abs().clamp(max=1.0)


def _contrastive_pairs(anchor: torch.Tensor, reference: torch.Tensor,
                       temperature: float, eps: float) -> torch.Tensor:
    """Cross entropy on the absolute-cosine matrix with matched pairs as
    positives.

    For each anchor patch i the reference patch i is the positive and every
    other reference patch is a negative; the per-patch term is
    logsumexp_j m(i, j) - m(i, i), which is zero when a patch has no
    competitors and grows as off-diagonal similarities approach the
    diagonal. Mean over patches, then over the batch.
    """
    if temperature <= 0:
        raise LossError(f"temperature must be positive, got {temperature}")
    if anchor.shape != reference.shape:
        raise LossError(
            f"anchor shape {tuple(anchor.shape)} != reference shape {tuple(reference.shape)}"
        )
    if anchor.dim() == 2:
        anchor = anchor.unsqueeze(0)
        reference = reference.unsqueeze(0)
    if anchor.dim() != 3:
        raise LossError(f"expected [n, d] or [B, n, d] states, got {tuple(anchor.shape)}")
    m = _batched_abs_cos(anchor, reference, eps) / temperature
    per_patch = torch.logsumexp(m, dim=2) - m.diagonal(dim1=1, dim2=2)
    return per_patch.mean(dim=1).mean()


def contrastive_distillation(student_patches: torch.Tensor, teacher_patches: torch.Tensor,
                             temperature: float = 1.0, eps: float = COSINE_EPS) -> torch.Tensor:
    """Hold the deepest student patches aligned with the previous model's:
    each patch should resemble its own old state more than any other patch.

    Inputs are deepest-layer patch sequences, [n, d] or [B, n, d].
    """
    return _contrastive_pairs(student_patches, teacher_patches, temperature, eps)


def contrastive_patch(deep_patches: torch.Tensor, shallow_patches: torch.Tensor,
                      temperature: float = 1.0, eps: float = COSINE_EPS) -> torch.Tensor:
    """Keep a model's deepest patches in register with its own first layer,
    so depth refines patches instead of smearing them together.

    Inputs are the deepest and shallowest patch sequences of one model.
    """
    return _contrastive_pairs(deep_patches, shallow_patches, temperature, eps)


_STEP0_TERMS = ("unce", "ct")
_LATER_TERMS = ("unce", "unkd", "cd", "ct")


def total_loss(components: dict, weights: LossWeights, step: int):
    """Weighted combination of the loss terms for one training step.

    The first step admits only the cross-entropy and depth-contrastive
    terms (there is no previous model to distill from); later steps admit
    all four. Terms whose weight is zero may be omitted; a term that is
    required (its weight is positive) must be present; an inadmissible term
    is an error even with zero weight. w_unkd must be resolved to a number
    by the time an incremental step is combined.
    """
    if step < 0:
        raise ConfigurationError(f"step must be non-negative, got {step}")
    admissible = _STEP0_TERMS if step == 0 else _LATER_TERMS
    unknown = set(components) - set(_LATER_TERMS)
    if unknown:
        raise ConfigurationError(f"unknown loss terms {sorted(unknown)}")
    forbidden = set(components) - set(admissible)
    if forbidden:
        raise ConfigurationError(
            f"terms {sorted(forbidden)} are not defined at step {step}"
        )
    resolved = {"unce": weights.w_unce, "ct": weights.w_ct}
    if step >= 1:
        if weights.w_unkd is None:
            raise ConfigurationError("w_unkd is unresolved; pick a value before combining")
        resolved["unkd"] = weights.w_unkd
        resolved["cd"] = weights.w_cd
    missing = [k for k in admissible if resolved[k] > 0 and k not in components]
    if missing:
        raise ConfigurationError(f"required loss terms {missing} missing at step {step}")
    total = None
    for name in admissible:
        if name not in components:
            continue
        term = resolved[name] * components[name]
        total = term if total is None else total + term
    # Nothing contributed: only reachable when every weight is zero.
    return 0.0 if total is None else total

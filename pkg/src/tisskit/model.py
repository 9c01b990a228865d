"""Patch-transformer encoder with a linear per-patch decoder.

The encoder is a small pre-norm vision transformer without a class token:
conv patch embedding, learned positional embeddings, depth-many blocks, a
final LayerNorm. Per-patch class scores from a linear head are upsampled
bilinearly to pixel resolution. The per-layer patch states are first-class
citizens here because the distillation losses and the similarity
diagnostics both consume them.
"""

from __future__ import annotations

import copy
import json
import math
import zipfile
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigurationError, ModelError

CHECKPOINT_FORMAT = "tisskit-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    patch_size: int = 8
    embed_dim: int = 128
    n_layers: int = 4
    n_heads: int = 4
    mlp_ratio: float = 4.0
    seed: int = 0

    def __post_init__(self):
        if self.image_size <= 0 or self.patch_size <= 0:
            raise ConfigurationError("image_size and patch_size must be positive")
        if self.image_size % self.patch_size != 0:
            raise ConfigurationError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.n_layers < 2:
            raise ConfigurationError("need at least two blocks, the shallowest state is block 1")
        if self.embed_dim % self.n_heads != 0:
            raise ConfigurationError(
                f"embed_dim {self.embed_dim} not divisible by n_heads {self.n_heads}"
            )

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid_size ** 2


@dataclass(frozen=True)
class PatchStates:
    """Per-layer patch representations, shallow to deep.

    layers[k] holds the output of block k+1 with shape [n, d] or [B, n, d];
    the deepest entry is taken after the final LayerNorm, it is exactly what
    the decoder reads. Layer indices in the public accessors are 1-based.
    """

    layers: tuple[torch.Tensor, ...]

    def __post_init__(self):
        if len(self.layers) < 2:
            raise ModelError("need at least two layers of states")
        shape = self.layers[0].shape
        if len(shape) not in (2, 3):
            raise ModelError(f"states must be [n, d] or [B, n, d], got {tuple(shape)}")
        for h in self.layers:
            if h.shape != shape:
                raise ModelError("all layers must share one shape")

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def n_patches(self) -> int:
        return self.layers[0].shape[-2]

    @property
    def dim(self) -> int:
        return self.layers[0].shape[-1]

    def layer(self, index: int) -> torch.Tensor:
        if not 1 <= index <= self.depth:
            raise ModelError(f"layer index {index} outside 1..{self.depth}")
        return self.layers[index - 1]

    @property
    def first(self) -> torch.Tensor:
        return self.layers[0]

    @property
    def last(self) -> torch.Tensor:
        return self.layers[-1]


class Attention(nn.Module):
    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.scale = self.head_dim ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.n_heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv.unbind(0)
        attn = (q @ k.transpose(-2, -1)) * self.scale
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.proj(out)


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class Block(nn.Module):
    def __init__(self, dim: int, n_heads: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, n_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        x = x + self.mlp(self.norm2(x))
        return x


class SegViT(nn.Module):
    """Encoder plus linear head; grows its head as classes are added."""

    def __init__(self, config: ModelConfig, n_classes: int):
        super().__init__()
        if n_classes < 2:
            raise ConfigurationError("need background plus at least one class")
        self.config = config
        self.n_classes = n_classes
        # Construction is isolated from the global RNG so a model is a pure
        # function of (config, n_classes).
        with torch.random.fork_rng():
            torch.manual_seed(config.seed)
            d = config.embed_dim
            self.patch_embed = nn.Conv2d(3, d, kernel_size=config.patch_size,
                                         stride=config.patch_size)
            self.pos_embed = nn.Parameter(torch.empty(1, config.n_patches, d))
            nn.init.trunc_normal_(self.pos_embed, std=0.02)
            self.blocks = nn.ModuleList(
                Block(d, config.n_heads, config.mlp_ratio) for _ in range(config.n_layers)
            )
            self.norm = nn.LayerNorm(d)
            self.head = nn.Linear(d, n_classes)

    def _check_images(self, images: torch.Tensor) -> torch.Tensor:
        if images.dim() == 3:
            images = images.unsqueeze(0)
        if images.dim() != 4 or images.shape[1] != 3:
            raise ModelError(f"expected [B, 3, H, W] images, got {tuple(images.shape)}")
        s = self.config.image_size
        if images.shape[-2:] != (s, s):
            raise ModelError(f"expected {s}x{s} input, got {tuple(images.shape[-2:])}")
        if not images.is_floating_point():
            raise ModelError("images must be float tensors scaled to [0, 1]")
        if images.numel() and (images.min() < -1e-4 or images.max() > 1 + 1e-4):
            raise ModelError("image values must lie in [0, 1]")
        return images

    def encode(self, images: torch.Tensor) -> PatchStates:
        """Per-layer patch states for a batch; deepest entry is post-norm."""
        images = self._check_images(images)
        x = self.patch_embed(images)                       # [B, d, g, g]
        x = x.flatten(2).transpose(1, 2)                   # [B, n, d]
        x = x + self.pos_embed
        states = []
        for block in self.blocks:
            x = block(x)
            states.append(x)
        states[-1] = self.norm(x)
        return PatchStates(layers=tuple(states))

    def forward(self, images: torch.Tensor, out_size: int | None = None):
        states = self.encode(images)
        logits = decode(states, self.head, out_size or self.config.image_size)
        return logits, states


def decode(states: PatchStates, head: nn.Linear, out_size: int) -> torch.Tensor:
    """Linear per-patch scores upsampled bilinearly to [B, C, out, out]."""
    h = states.last
    if h.dim() == 2:
        h = h.unsqueeze(0)
    if head.in_features != h.shape[-1]:
        raise ModelError(f"head expects dim {head.in_features}, states have {h.shape[-1]}")
    g = int(math.isqrt(h.shape[1]))
    if g * g != h.shape[1]:
        raise ModelError(f"{h.shape[1]} patches do not form a square grid")
    scores = head(h)                                       # [B, n, C]
    scores = scores.transpose(1, 2).reshape(h.shape[0], -1, g, g)
    if out_size != g:
        scores = F.interpolate(scores, size=(out_size, out_size), mode="bilinear",
                               align_corners=False)
    return scores


def segment(logits: torch.Tensor) -> np.ndarray:
    """Hard labels from class scores; ties resolve to the lowest class id."""
    if logits.dim() not in (3, 4):
        raise ModelError(f"expected [C, H, W] or [B, C, H, W] logits, got {tuple(logits.shape)}")
    arr = logits.detach().cpu().numpy()
    axis = 0 if logits.dim() == 3 else 1
    return np.argmax(arr, axis=axis).astype(np.int64)


def grow_head(head: nn.Linear, n_new: int, variant: str = "probability_preserving") -> nn.Linear:
    """Return a wider head whose new rows start as copies of the background row.

    probability_preserving (default): new rows copy the background weights,
    and both the new biases and the background bias are set to the old
    background bias minus log(n_new + 1). The softmax normalizer is then
    unchanged, old-class probabilities are exactly preserved, and the old
    background probability splits evenly across background and new rows.

    paper_literal: new rows copy the background weights with bias set to the
    old background bias minus log(n_new), background row left untouched.
    This keeps new-class probabilities small but does shift every
    probability slightly, because the normalizer grows.
    """
    if n_new < 1:
        raise ConfigurationError("n_new must be at least 1")
    if variant not in ("probability_preserving", "paper_literal"):
        raise ConfigurationError(f"unknown head growth variant {variant!r}")
    old_out, d = head.out_features, head.in_features
    grown = nn.Linear(d, old_out + n_new)
    grown = grown.to(dtype=head.weight.dtype, device=head.weight.device)
    with torch.no_grad():
        grown.weight[:old_out] = head.weight
        grown.bias[:old_out] = head.bias
        grown.weight[old_out:] = head.weight[0].unsqueeze(0)
        if variant == "probability_preserving":
            shifted = head.bias[0] - math.log(n_new + 1)
            grown.bias[0] = shifted
            grown.bias[old_out:] = shifted
        else:
            grown.bias[old_out:] = head.bias[0] - math.log(n_new)
    return grown


def snapshot(model: SegViT) -> SegViT:
    """Frozen deep copy used as a teacher; eval mode, no gradients."""
    frozen = copy.deepcopy(model)
    frozen.eval()
    for p in frozen.parameters():
        p.requires_grad_(False)
    return frozen


def save_checkpoint(path, model: SegViT, extra: dict | None = None) -> Path:
    """Write a single-archive checkpoint: header.json plus raw parameters.

    The archive is a zip holding header.json (format tag, model config,
    class count, a parameter manifest with names and shapes in order, and
    caller metadata under "extra") and params.bin (each parameter's data as
    little-endian float32, concatenated in manifest order). Timestamps are
    fixed so identical states produce identical archives.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = model.state_dict()
    manifest = []
    blobs = []
    for name, tensor in state.items():
        arr = tensor.detach().cpu().numpy()
        if arr.dtype != np.float32:
            raise ConfigurationError(f"parameter {name} is {arr.dtype}, expected float32")
        manifest.append({"name": name, "shape": list(arr.shape)})
        blobs.append(arr.astype("<f4").tobytes())
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "n_classes": model.n_classes,
        "extra": extra or {},
        "params": manifest,
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, data in (
            ("header.json", json.dumps(header, indent=2, sort_keys=True).encode()),
            ("params.bin", b"".join(blobs)),
        ):
            info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, data)
    return path


def load_checkpoint(path, expected_config: ModelConfig | None = None) -> tuple[SegViT, dict]:
    """Rebuild a model from an archive written by save_checkpoint.

    Raises when the archive is malformed, a parameter is missing or has the
    wrong size, or expected_config disagrees with the stored config.
    """
    path = Path(path)
    try:
        with zipfile.ZipFile(path) as zf:
            header = json.loads(zf.read("header.json"))
            raw = zf.read("params.bin")
    except (OSError, zipfile.BadZipFile, KeyError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"cannot read checkpoint {path}: {exc}") from exc
    if header.get("format") != CHECKPOINT_FORMAT:
        raise ConfigurationError(f"{path} is not a {CHECKPOINT_FORMAT} archive")
    config = ModelConfig(**header["config"])
    if expected_config is not None and config != expected_config:
        raise ConfigurationError(
            f"checkpoint config {config} does not match expected {expected_config}"
        )
    model = SegViT(config, int(header["n_classes"]))
    state = model.state_dict()
    stored = {p["name"]: tuple(p["shape"]) for p in header["params"]}
    if set(stored) != set(state):
        missing = sorted(set(state) - set(stored))
        surplus = sorted(set(stored) - set(state))
        raise ConfigurationError(
            f"parameter mismatch in {path}: missing {missing}, unexpected {surplus}"
        )
    offset = 0
    new_state = {}
    for p in header["params"]:
        name, shape = p["name"], tuple(p["shape"])
        if tuple(state[name].shape) != shape:
            raise ConfigurationError(f"parameter {name} has shape {shape}, "
                                     f"model wants {tuple(state[name].shape)}")
        count = int(np.prod(shape)) if shape else 1
        end = offset + 4 * count
        if end > len(raw):
            raise ConfigurationError(f"checkpoint {path} truncated at parameter {name}")
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(shape)
        new_state[name] = torch.from_numpy(arr.copy())
        offset = end
    if offset != len(raw):
        raise ConfigurationError(f"checkpoint {path} has {len(raw) - offset} trailing bytes")
    model.load_state_dict(new_state)
    return model, header.get("extra", {})

"""Synthetic grouped-shift benchmark and batch samplers.

Each image is a class-specific orthogonal spatial pattern on a gray
base, shifted by group-level nuisances: a per-group channel bias, a
per-group contrast multiplier on per-image texture, and pixel noise.
Groups play the role of hospitals/plates: the class signal is shared,
the color statistics are not.  Train/val/id_test come from one set of
groups, ood_test from disjoint held-out groups.

All draws are keyed by (seed, purpose, index) so generation is
deterministic and shardable; per-image texture is keyed by the index
within the group, which makes same-class images identical across groups
once every group-level knob is switched off.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from typing import Iterator, Sequence

import numpy as np

from .context import GroupedBatch, group_partition
from .rng import child_seed, generator

__all__ = [
    "SyntheticShiftSpec",
    "Subset",
    "DatasetSplit",
    "class_templates",
    "generate_dataset",
    "make_batches",
    "batches_per_epoch",
    "uniform_sampler",
    "context_sampler",
    "save_dataset",
    "load_dataset",
]

_MAGIC = b"CVDS"
_VERSION = 1


@dataclass(frozen=True)
class SyntheticShiftSpec:
    num_classes: int = 8
    train_groups: int = 4
    ood_groups: int = 2
    images_per_group: int = 512
    image_h: int = 16
    image_w: int = 16
    channels: int = 3
    signal_amplitude: float = 0.12
    bias_max: float = 0.40
    contrast_jitter: float = 0.3
    texture_std: float = 0.10
    noise_std: float = 0.05
    train_fraction: float = 0.70
    val_fraction: float = 0.15

    def __post_init__(self):
        for name in ("num_classes", "train_groups", "ood_groups", "images_per_group",
                     "image_h", "image_w", "channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.num_classes > self.image_h * self.image_w - 1:
            raise ValueError("more classes than available orthogonal patterns")
        if not (0.0 <= self.contrast_jitter < 1.0):
            raise ValueError("contrast_jitter must lie in [0, 1)")
        for name in ("signal_amplitude", "bias_max", "texture_std", "noise_std"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not (0 < self.train_fraction < 1) or not (0 < self.val_fraction < 1):
            raise ValueError("split fractions must lie in (0, 1)")
        if self.train_fraction + self.val_fraction >= 1:
            raise ValueError("train_fraction + val_fraction must leave room for id_test")

    @property
    def train_group_ids(self) -> tuple:
        return tuple(range(self.train_groups))

    @property
    def ood_group_ids(self) -> tuple:
        return tuple(range(self.train_groups, self.train_groups + self.ood_groups))


@dataclass
class Subset:
    """One split's arrays, index-aligned."""

    images: np.ndarray  # [n, H, W, C] float64
    labels: np.ndarray  # [n] int64
    groups: np.ndarray  # [n] int64

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.groups = np.asarray(self.groups, dtype=np.int64)

    @property
    def size(self) -> int:
        return int(self.images.shape[0])

    def take(self, idx) -> "Subset":
        idx = np.asarray(idx, dtype=np.int64)
        return Subset(self.images[idx], self.labels[idx], self.groups[idx])


@dataclass
class DatasetSplit:
    train: Subset
    val: Subset
    id_test: Subset
    ood_test: Subset
    spec: SyntheticShiftSpec
    seed: int

    def splits(self) -> dict[str, Subset]:
        return {"train": self.train, "val": self.val, "id_test": self.id_test, "ood_test": self.ood_test}


# Spatially constant share of each template's energy.  This is the part a
# per-group channel bias can mimic, which is what keeps single images
# ambiguous about the class while batches of group-mates are not.  The share
# is kept small so the cosine part (which identifies the class pair) stays
# easy to learn while the pair member hinges on the ambiguous constant.
_TEMPLATE_DC = 0.25


def class_templates(spec: SyntheticShiftSpec) -> np.ndarray:
    """[K, H, W] unit-RMS class patterns with a deliberate bias-shaped part.

    Classes come in pairs: both members share one zero-mean cosine pattern
    and differ only in the sign of a spatially constant offset.  A single
    image therefore pins down the pair but not the member — its constant
    component could equally come from the group's channel bias.  Averaging
    images that share a group cancels the class offsets (labels are
    balanced) and exposes the group bias, so group-level context carries
    exactly the information a lone image is missing.
    """
    h, w, k = spec.image_h, spec.image_w, spec.num_classes
    rows = np.arange(h) + 0.5
    cols = np.arange(w) + 0.5
    # one cosine mode per class pair, enumerated by increasing frequency
    freqs = sorted(
        ((u, v) for u in range(h) for v in range(w) if (u, v) != (0, 0)),
        key=lambda uv: (uv[0] + uv[1], uv[0], uv[1]),
    )[: (k + 1) // 2]
    scale = np.sqrt(1.0 - _TEMPLATE_DC ** 2)  # keeps overall RMS at 1
    out = np.empty((k, h, w))
    for i in range(k):
        u, v = freqs[i // 2]
        pattern = np.cos(np.pi * u * rows / h)[:, None] * np.cos(np.pi * v * cols / w)[None, :]
        pattern /= np.sqrt((pattern ** 2).mean())
        sign = 1.0 if i % 2 == 0 else -1.0
        out[i] = scale * pattern + sign * _TEMPLATE_DC
    return out


def _group_shift(spec: SyntheticShiftSpec, seed: int, group: int) -> tuple[np.ndarray, float]:
    """Deterministic (channel bias vector, contrast multiplier) for a group."""
    bias_rng = generator(child_seed(seed, "bias", group))
    bias = bias_rng.uniform(-spec.bias_max, spec.bias_max, size=spec.channels)
    contrast_rng = generator(child_seed(seed, "contrast", group))
    contrast = contrast_rng.uniform(1.0 - spec.contrast_jitter, 1.0 + spec.contrast_jitter)
    return bias, float(contrast)


def _generate_group(spec: SyntheticShiftSpec, seed: int, group: int, templates: np.ndarray) -> Subset:
    n = spec.images_per_group
    h, w, c = spec.image_h, spec.image_w, spec.channels
    labels = np.arange(n) % spec.num_classes
    bias, contrast = _group_shift(spec, seed, group)

    images = np.empty((n, h, w, c))
    for i in range(n):
        # texture is keyed by (group, image): reusing textures across groups
        # would let a classifier memorize texture-label pairs and carry them
        # to held-out groups, silently defeating the distribution shift
        texture = generator(child_seed(seed, "texture", group, i)).normal(0.0, 1.0, size=(h, w, c))
        noise = generator(child_seed(seed, "noise", group, i)).normal(0.0, 1.0, size=(h, w, c))
        img = (
            0.5
            + spec.signal_amplitude * templates[labels[i]][:, :, None]
            + bias[None, None, :]
            + contrast * spec.texture_std * texture
            + spec.noise_std * noise
        )
        images[i] = np.clip(img, 0.0, 1.0)
    return Subset(images, labels, np.full(n, group, dtype=np.int64))


def generate_dataset(spec: SyntheticShiftSpec, seed: int) -> DatasetSplit:
    """Deterministic synthetic benchmark split by disjoint group sets."""
    templates = class_templates(spec)

    train_parts, val_parts, test_parts = [], [], []
    for g in spec.train_group_ids:
        sub = _generate_group(spec, seed, g, templates)
        order = generator(child_seed(seed, "split", g)).permutation(sub.size)
        n_train = int(round(spec.train_fraction * sub.size))
        n_val = int(round(spec.val_fraction * sub.size))
        train_parts.append(sub.take(order[:n_train]))
        val_parts.append(sub.take(order[n_train:n_train + n_val]))
        test_parts.append(sub.take(order[n_train + n_val:]))
    ood_parts = [_generate_group(spec, seed, g, templates) for g in spec.ood_group_ids]

    def merge(parts: list[Subset]) -> Subset:
        return Subset(
            np.concatenate([p.images for p in parts]),
            np.concatenate([p.labels for p in parts]),
            np.concatenate([p.groups for p in parts]),
        )

    return DatasetSplit(
        train=merge(train_parts),
        val=merge(val_parts),
        id_test=merge(test_parts),
        ood_test=merge(ood_parts),
        spec=spec,
        seed=seed,
    )


def uniform_sampler(subset: Subset, batch_size: int, seed: int) -> Iterator[np.ndarray]:
    """Seeded shuffle of all indices, chunked; the short final batch is kept."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = generator(child_seed(seed, "uniform")).permutation(subset.size)
    for start in range(0, subset.size, batch_size):
        yield order[start:start + batch_size]


def context_sampler(subset: Subset, batch_size: int, seed: int) -> Iterator[np.ndarray]:
    """Single-group batches, groups interleaved in seeded round-robin order;
    one epoch covers every image exactly once."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    partition = group_partition(subset.groups)
    rng = generator(child_seed(seed, "context_sampler"))
    gids = list(partition.keys())
    rng.shuffle(gids)
    queues = []
    for g in gids:
        members = np.asarray(partition[g], dtype=np.int64)
        members = members[rng.permutation(members.size)]
        chunks = [members[s:s + batch_size] for s in range(0, members.size, batch_size)]
        queues.append(chunks)
    rounds = max((len(q) for q in queues), default=0)
    for round_idx in range(rounds):
        for q in queues:
            if round_idx < len(q):
                yield q[round_idx]


_SAMPLERS = {"uniform": uniform_sampler, "context": context_sampler}


def make_batches(subset: Subset, batch_size: int, sampler: str, seed: int) -> Iterator[GroupedBatch]:
    """GroupedBatch stream over one subset using the named sampler."""
    if sampler not in _SAMPLERS:
        raise ValueError(f"unknown sampler {sampler!r}; expected one of {sorted(_SAMPLERS)}")
    for idx in _SAMPLERS[sampler](subset, batch_size, seed):
        yield GroupedBatch(subset.images[idx], subset.labels[idx], subset.groups[idx])


def batches_per_epoch(subset: Subset, batch_size: int, sampler: str) -> int:
    """Exact batch count one epoch of ``make_batches`` will yield.

    The grouped sampler never merges groups, so each group contributes
    its own short final batch and the total can exceed ceil(size/batch).
    """
    if sampler == "uniform":
        return math.ceil(subset.size / batch_size)
    if sampler == "context":
        return sum(
            math.ceil(len(members) / batch_size)
            for members in group_partition(subset.groups).values()
        )
    raise ValueError(f"unknown sampler {sampler!r}; expected one of {sorted(_SAMPLERS)}")


def _spec_to_dict(spec: SyntheticShiftSpec) -> dict:
    return asdict(spec)


def save_dataset(split: DatasetSplit, path: str) -> str:
    """Single self-describing binary file plus a JSON manifest alongside.

    Layout: magic, u32 version, u32 header length, JSON header, then per
    split (train, val, id_test, ood_test): images, labels, groups as
    little-endian float64/int64 in C order.
    """
    order = ["train", "val", "id_test", "ood_test"]
    splits = split.splits()
    header = {
        "spec": _spec_to_dict(split.spec),
        "seed": split.seed,
        "splits": {name: splits[name].size for name in order},
        "image_shape": [split.spec.image_h, split.spec.image_w, split.spec.channels],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(np.uint32(_VERSION).astype("<u4").tobytes())
        f.write(np.uint32(len(header_bytes)).astype("<u4").tobytes())
        f.write(header_bytes)
        for name in order:
            sub = splits[name]
            f.write(np.ascontiguousarray(sub.images, dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(sub.labels, dtype="<i8").tobytes())
            f.write(np.ascontiguousarray(sub.groups, dtype="<i8").tobytes())

    manifest_path = path + ".manifest.json"
    with open(path, "rb") as f:
        digest = hashlib.sha256(f.read()).hexdigest()
    manifest = {
        "file": path,
        "sha256": digest,
        "seed": split.seed,
        "spec": _spec_to_dict(split.spec),
        "splits": {
            name: {
                "size": splits[name].size,
                "group_ids": sorted(int(g) for g in np.unique(splits[name].groups)),
            }
            for name in order
        },
    }
    with open(manifest_path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return manifest_path


def load_dataset(path: str) -> DatasetSplit:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _MAGIC:
            raise ValueError(f"not a dataset file (bad magic {magic!r}) at {path}")
        version = int(np.frombuffer(f.read(4), dtype="<u4")[0])
        if version != _VERSION:
            raise ValueError(f"dataset format version {version} unsupported (expected {_VERSION})")
        header_len = int(np.frombuffer(f.read(4), dtype="<u4")[0])
        header = json.loads(f.read(header_len).decode("utf-8"))
        spec = SyntheticShiftSpec(**header["spec"])
        h, w, c = header["image_shape"]
        subsets = {}
        for name in ["train", "val", "id_test", "ood_test"]:
            n = header["splits"][name]
            images = np.frombuffer(f.read(n * h * w * c * 8), dtype="<f8").reshape(n, h, w, c)
            labels = np.frombuffer(f.read(n * 8), dtype="<i8")
            groups = np.frombuffer(f.read(n * 8), dtype="<i8")
            if labels.size != n or groups.size != n:
                raise ValueError(f"truncated dataset file at split {name!r}")
            subsets[name] = Subset(images.copy(), labels.copy(), groups.copy())
        trailing = f.read(1)
        if trailing:
            raise ValueError("trailing bytes after the last split; file corrupt")
    return DatasetSplit(seed=header["seed"], spec=spec, **subsets)

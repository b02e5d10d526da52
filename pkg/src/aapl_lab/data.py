"""Deterministic toy image datasets with attribute-structured classes.

Every class is a (pattern, foreground colour, background colour) triple
rendered on a 3x16x16 grid. Samples add Gaussian pixel noise and,
optionally, a per-sample colour jitter, then clip to [0, 1].
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, VersionError

CHANNELS, HEIGHT, WIDTH = 3, 16, 16
IMAGE_SHAPE = (CHANNELS, HEIGHT, WIDTH)
DATASET_SCHEMA = "aapl-lab/dataset/v1"

PATTERNS = (
    "hbars",
    "vbars",
    "checker",
    "diagonal",
    "ring",
    "blob",
    "cross",
    "frame",
    "dots",
    "hgradient",
    "vgradient",
    "triangle",
)
# disjoint prototype families for the source/target transfer setting
FAMILIES = {"a": tuple(range(0, 6)), "b": tuple(range(6, 12)), "all": tuple(range(12))}
ATTRIBUTE_DIM = len(PATTERNS) + 6


def pattern_mask(index: int) -> np.ndarray:
    """Foreground mask in [0, 1] for pattern ``index``."""
    yy, xx = np.mgrid[0:HEIGHT, 0:WIDTH].astype(np.float64)
    cy, cx = (HEIGHT - 1) / 2, (WIDTH - 1) / 2
    r = np.hypot(yy - cy, xx - cx)
    name = PATTERNS[index]
    if name == "hbars":
        m = (yy // 2) % 2 == 0
    elif name == "vbars":
        m = (xx // 2) % 2 == 0
    elif name == "checker":
        m = ((yy // 4) + (xx // 4)) % 2 == 0
    elif name == "diagonal":
        m = ((yy + xx) // 3) % 2 == 0
    elif name == "ring":
        m = (r > 3.5) & (r < 6.5)
    elif name == "blob":
        return np.exp(-(r**2) / (2 * 3.0**2))
    elif name == "cross":
        m = (np.abs(yy - cy) < 2) | (np.abs(xx - cx) < 2)
    elif name == "frame":
        m = (yy < 3) | (yy > HEIGHT - 4) | (xx < 3) | (xx > WIDTH - 4)
    elif name == "dots":
        m = (yy % 5 == 2) & (xx % 5 == 2) | (yy % 5 == 3) & (xx % 5 == 3)
    elif name == "hgradient":
        return xx / (WIDTH - 1)
    elif name == "vgradient":
        return yy / (HEIGHT - 1)
    elif name == "triangle":
        m = yy >= xx
    else:  # pragma: no cover
        raise ConfigError(f"unknown pattern {name}")
    return m.astype(np.float64)


_MASKS = np.stack([pattern_mask(i) for i in range(len(PATTERNS))])


def render(pattern: int, fg, bg) -> np.ndarray:
    """Noise-free 3x16x16 image for one attribute triple."""
    mask = _MASKS[pattern]
    fg = np.asarray(fg, dtype=np.float64)[:, None, None]
    bg = np.asarray(bg, dtype=np.float64)[:, None, None]
    return np.clip(mask * fg + (1.0 - mask) * bg, 0.0, 1.0)


def attribute_vector(pattern: int, fg, bg) -> np.ndarray:
    """Centred attribute encoding: pattern one-hot, then fg and bg RGB."""
    onehot = np.zeros(len(PATTERNS))
    onehot[pattern] = 1.0
    onehot -= 1.0 / len(PATTERNS)
    return np.concatenate([onehot, np.asarray(fg) - 0.5, np.asarray(bg) - 0.5])


@dataclass(frozen=True)
class ClassSpec:
    class_id: int
    pattern: int
    fg: tuple[float, float, float]
    bg: tuple[float, float, float]
    intra_class_noise: float

    @property
    def prototype(self) -> np.ndarray:
        return render(self.pattern, self.fg, self.bg)

    @property
    def attributes(self) -> np.ndarray:
        return attribute_vector(self.pattern, self.fg, self.bg)


@dataclass(frozen=True)
class DatasetConfig:
    name: str = "toy-a"
    num_classes: int = 8
    samples_per_class: int = 40
    noise: float = 0.05
    attribute_jitter: float = 0.0
    family: str = "a"
    class_id_offset: int = 0
    seed: int = 0


@dataclass
class Dataset:
    name: str
    classes: list[ClassSpec]
    images: np.ndarray  # [N, 3, 16, 16]
    labels: np.ndarray  # [N] class ids
    generator_seed: int
    config: DatasetConfig = field(default_factory=DatasetConfig)

    @property
    def class_ids(self) -> list[int]:
        return [c.class_id for c in self.classes]

    @property
    def samples(self):
        return list(zip(self.images, self.labels.tolist()))

    def __len__(self) -> int:
        return len(self.labels)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(self.name.encode())
        h.update(np.ascontiguousarray(self.images).tobytes())
        h.update(np.ascontiguousarray(self.labels, dtype=np.int64).tobytes())
        return h.hexdigest()[:16]

    def indices_of(self, class_id: int) -> np.ndarray:
        return np.flatnonzero(self.labels == class_id)


@dataclass(frozen=True)
class SplitPlan:
    base_class_ids: frozenset[int]
    new_class_ids: frozenset[int]
    shots: int = 16

    def __post_init__(self):
        if self.base_class_ids & self.new_class_ids:
            raise ConfigError("base and new classes overlap")
        if self.shots < 1:
            raise ConfigError("shots must be >= 1")


@dataclass
class TrainingSet:
    """Few-shot training subset, referenced by dataset sample indices."""

    indices: np.ndarray
    images: np.ndarray
    labels: np.ndarray

    @property
    def class_ids(self) -> list[int]:
        return sorted(set(self.labels.tolist()))

    def __len__(self) -> int:
        return len(self.labels)


def _class_palette(cfg: DatasetConfig, rng: np.random.Generator) -> list[ClassSpec]:
    family = FAMILIES.get(cfg.family)
    if family is None:
        raise ConfigError(f"unknown pattern family {cfg.family!r}")
    patterns = np.resize(rng.permutation(family), cfg.num_classes)
    specs = []
    for k, pat in enumerate(patterns):
        # keep foreground and background well apart so the pattern stays visible
        while True:
            fg = rng.uniform(0.05, 0.95, size=3)
            bg = rng.uniform(0.05, 0.95, size=3)
            if np.linalg.norm(fg - bg) > 0.6:
                break
        specs.append(
            ClassSpec(
                class_id=cfg.class_id_offset + k,
                pattern=int(pat),
                fg=tuple(float(v) for v in fg),
                bg=tuple(float(v) for v in bg),
                intra_class_noise=cfg.noise,
            )
        )
    return specs


def generate_dataset(config: DatasetConfig, seed: int | None = None) -> Dataset:
    """Render a dataset; a pure function of ``(config, seed)``.

    ``seed`` defaults to ``config.seed``.
    """
    seed = config.seed if seed is None else seed
    if config.num_classes < 4:
        raise ConfigError("need at least 4 classes (two base and two new)")
    if config.samples_per_class < 2:
        raise ConfigError("samples_per_class must be >= 2")
    if config.noise < 0 or config.attribute_jitter < 0:
        raise ConfigError("noise levels must be non-negative")
    rng = np.random.default_rng([seed, 0xDA7A])
    classes = _class_palette(config, rng)

    n = config.samples_per_class
    images = np.empty((len(classes) * n, *IMAGE_SHAPE))
    labels = np.empty(len(classes) * n, dtype=np.int64)
    for k, spec in enumerate(classes):
        for j in range(n):
            i = k * n + j
            if config.attribute_jitter > 0:
                fg = np.clip(np.asarray(spec.fg) + rng.normal(0, config.attribute_jitter, 3), 0, 1)
                bg = np.clip(np.asarray(spec.bg) + rng.normal(0, config.attribute_jitter, 3), 0, 1)
                img = render(spec.pattern, fg, bg)
            else:
                img = spec.prototype
            if config.noise > 0:
                img = img + rng.normal(0.0, config.noise, IMAGE_SHAPE)
            images[i] = np.clip(img, 0.0, 1.0)
            labels[i] = spec.class_id
    return Dataset(config.name, classes, images, labels, seed, config)


def split_base_new(dataset: Dataset, seed: int, shots: int = 16) -> SplitPlan:
    """Random equal partition of the classes into base and new halves."""
    ids = dataset.class_ids
    if len(ids) % 2:
        raise ConfigError(f"cannot split {len(ids)} classes equally")
    order = np.random.default_rng([seed, 0x5B17]).permutation(ids)
    half = len(ids) // 2
    return SplitPlan(
        frozenset(int(i) for i in order[:half]),
        frozenset(int(i) for i in order[half:]),
        shots,
    )


def sample_few_shot(dataset: Dataset, plan: SplitPlan, seed: int) -> TrainingSet:
    """Exactly ``plan.shots`` samples from each base class, none from new classes."""
    rng = np.random.default_rng([seed, 0xF5])
    picked = []
    for cid in sorted(plan.base_class_ids):
        pool = dataset.indices_of(cid)
        if len(pool) < plan.shots:
            raise ConfigError(f"class {cid} has {len(pool)} samples, need {plan.shots}")
        picked.append(np.sort(rng.choice(pool, size=plan.shots, replace=False)))
    idx = np.concatenate(picked)
    return TrainingSet(idx, dataset.images[idx], dataset.labels[idx])


def full_plan(dataset: Dataset, shots: int = 16) -> SplitPlan:
    """Plan that trains on every class (cross-dataset / domain-shift source)."""
    return SplitPlan(frozenset(dataset.class_ids), frozenset(), shots)


SHIFTS = ("brightness", "contrast", "noise")


@dataclass(frozen=True)
class ShiftConfig:
    name: str
    magnitude: float


def generate_shifted_dataset(dataset: Dataset, shift: ShiftConfig, seed: int = 0) -> Dataset:
    """Globally perturbed re-rendering of ``dataset`` (same classes, same order).

    brightness adds ``magnitude``; contrast shrinks deviations from the image
    mean by ``1 - magnitude``; noise adds N(0, magnitude) pixel noise.
    """
    if shift.name not in SHIFTS:
        raise ConfigError(f"unknown shift {shift.name!r}; expected one of {SHIFTS}")
    x = dataset.images
    if shift.name == "brightness":
        out = x + shift.magnitude
    elif shift.name == "contrast":
        mean = x.mean(axis=(1, 2, 3), keepdims=True)
        out = mean + (1.0 - shift.magnitude) * (x - mean)
    else:
        rng = np.random.default_rng([seed, 0x5417])
        out = x + (rng.normal(0.0, shift.magnitude, x.shape) if shift.magnitude else 0.0)
    out = np.clip(out, 0.0, 1.0)
    name = dataset.name if shift.magnitude == 0 else f"{dataset.name}/{shift.name}{shift.magnitude:g}"
    return Dataset(name, list(dataset.classes), out, dataset.labels.copy(), dataset.generator_seed, dataset.config)


def export_dataset(dataset: Dataset, path) -> None:
    doc = {
        "schema": DATASET_SCHEMA,
        "name": dataset.name,
        "seed": dataset.generator_seed,
        "config": asdict(dataset.config),
        "classes": [asdict(c) for c in dataset.classes],
        "labels": dataset.labels.tolist(),
        "pixels": dataset.images.reshape(len(dataset), -1).tolist(),
    }
    Path(path).write_text(json.dumps(doc))


def import_dataset(path) -> Dataset:
    doc = json.loads(Path(path).read_text())
    if doc.get("schema") != DATASET_SCHEMA:
        raise VersionError(f"unsupported dataset schema {doc.get('schema')!r}")
    classes = [
        ClassSpec(c["class_id"], c["pattern"], tuple(c["fg"]), tuple(c["bg"]), c["intra_class_noise"])
        for c in doc["classes"]
    ]
    images = np.asarray(doc["pixels"], dtype=np.float64).reshape(-1, *IMAGE_SHAPE)
    return Dataset(
        doc["name"],
        classes,
        images,
        np.asarray(doc["labels"], dtype=np.int64),
        doc["seed"],
        DatasetConfig(**doc["config"]),
    )

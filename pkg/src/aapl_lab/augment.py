"""The 14-kind augmentation bank and weighted distinct-pair sampling."""
from __future__ import annotations

import enum
from collections.abc import Iterable, Mapping

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigError

CROP_SIZE = 12
CUTOUT_SIZE = 6
# parameter ranges for the stochastic kinds
BRIGHTNESS_RANGE = (0.15, 0.35)
CONTRAST_RANGE = (0.3, 0.6)
SATURATION_RANGE = (0.0, 0.3)
HUE_RANGE_DEG = (90.0, 270.0)
BLUR_SIGMA_RANGE = (0.8, 1.5)
NOISE_SIGMA_RANGE = (0.08, 0.15)

LUMA = np.array([0.299, 0.587, 0.114])


class AugmentationKind(enum.IntEnum):
    random_crop = 0
    cutout = 1
    horizontal_flip = 2
    vertical_flip = 3
    rotate_90 = 4
    rotate_180 = 5
    rotate_270 = 6
    brightness = 7
    contrast = 8
    saturation = 9
    hue = 10
    grayscale = 11
    gaussian_blur = 12
    gaussian_noise = 13

    @classmethod
    def parse(cls, name) -> AugmentationKind:
        if isinstance(name, cls):
            return name
        try:
            return cls[name]
        except KeyError:
            raise ConfigError(f"unknown augmentation kind {name!r}") from None


ALL_KINDS = tuple(AugmentationKind)

# default profiling split; a configuration default, not ground truth
GOOD_AUGS = frozenset(
    AugmentationKind.parse(k)
    for k in ("random_crop", "cutout", "grayscale", "gaussian_blur", "gaussian_noise", "brightness", "contrast")
)
BAD_AUGS = frozenset(ALL_KINDS) - GOOD_AUGS


def _luma(img: np.ndarray) -> np.ndarray:
    return np.tensordot(LUMA, img, axes=(0, 0))


def _hue_matrix(theta: float) -> np.ndarray:
    # rotation about the grey axis (1,1,1)/sqrt(3), Rodrigues form
    c, s = np.cos(theta), np.sin(theta)
    k = np.ones(3) / np.sqrt(3.0)
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return c * np.eye(3) + s * K + (1 - c) * np.outer(k, k)


def apply(kind: AugmentationKind | None, image: np.ndarray, seed: int = 0) -> np.ndarray:
    """Augment one ``[3, H, W]`` image; ``kind=None`` is the identity.

    Geometric kinds ignore ``seed``; the others draw their parameters from it.
    """
    if kind is None:
        return image
    kind = AugmentationKind.parse(kind)
    rng = np.random.default_rng([seed, int(kind)])
    x = np.asarray(image, dtype=np.float64)
    _, h, w = x.shape

    if kind is AugmentationKind.random_crop:
        oy = rng.integers(0, h - CROP_SIZE + 1)
        ox = rng.integers(0, w - CROP_SIZE + 1)
        crop = x[:, oy : oy + CROP_SIZE, ox : ox + CROP_SIZE]
        rows = (np.arange(h) * CROP_SIZE) // h
        cols = (np.arange(w) * CROP_SIZE) // w
        out = crop[:, rows][:, :, cols]
    elif kind is AugmentationKind.cutout:
        oy = rng.integers(0, h - CUTOUT_SIZE + 1)
        ox = rng.integers(0, w - CUTOUT_SIZE + 1)
        out = x.copy()
        out[:, oy : oy + CUTOUT_SIZE, ox : ox + CUTOUT_SIZE] = 0.0
    elif kind is AugmentationKind.horizontal_flip:
        out = x[:, :, ::-1]
    elif kind is AugmentationKind.vertical_flip:
        out = x[:, ::-1, :]
    elif kind is AugmentationKind.rotate_90:
        out = np.rot90(x, 1, axes=(1, 2))
    elif kind is AugmentationKind.rotate_180:
        out = np.rot90(x, 2, axes=(1, 2))
    elif kind is AugmentationKind.rotate_270:
        out = np.rot90(x, 3, axes=(1, 2))
    elif kind is AugmentationKind.brightness:
        delta = rng.uniform(*BRIGHTNESS_RANGE) * rng.choice([-1.0, 1.0])
        out = x + delta
    elif kind is AugmentationKind.contrast:
        f = rng.uniform(*CONTRAST_RANGE)
        out = x.mean() + f * (x - x.mean())
    elif kind is AugmentationKind.saturation:
        s = rng.uniform(*SATURATION_RANGE)
        gray = _luma(x)[None]
        out = gray + s * (x - gray)
    elif kind is AugmentationKind.hue:
        theta = np.deg2rad(rng.uniform(*HUE_RANGE_DEG))
        out = np.tensordot(_hue_matrix(theta), x, axes=(1, 0))
    elif kind is AugmentationKind.grayscale:
        out = np.repeat(_luma(x)[None], 3, axis=0)
    elif kind is AugmentationKind.gaussian_blur:
        sigma = rng.uniform(*BLUR_SIGMA_RANGE)
        out = gaussian_filter(x, sigma=(0, sigma, sigma), mode="reflect")
    else:  # gaussian_noise
        out = x + rng.normal(0.0, rng.uniform(*NOISE_SIGMA_RANGE), x.shape)
    return np.ascontiguousarray(np.clip(out, 0.0, 1.0))


class AugWeightTable(Mapping):
    """Non-negative sampling weight per augmentation kind."""

    def __init__(self, weights: Mapping | None = None):
        w = np.zeros(len(ALL_KINDS))
        if weights is None:
            w[:] = 1.0
        else:
            for k, v in weights.items():
                w[int(AugmentationKind.parse(k))] = float(v)
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ConfigError("augmentation weights must be finite and non-negative")
        if np.count_nonzero(w) < 2:
            raise ConfigError("at least two augmentation kinds need positive weight")
        self._w = w

    def __getitem__(self, kind) -> float:
        return float(self._w[int(AugmentationKind.parse(kind))])

    def __iter__(self):
        return iter(ALL_KINDS)

    def __len__(self) -> int:
        return len(ALL_KINDS)

    @property
    def array(self) -> np.ndarray:
        return self._w.copy()

    @property
    def probabilities(self) -> np.ndarray:
        return self._w / self._w.sum()

    @property
    def support(self) -> list[AugmentationKind]:
        return [k for k in ALL_KINDS if self._w[int(k)] > 0]

    def to_dict(self) -> dict[str, float]:
        return {k.name: float(self._w[int(k)]) for k in ALL_KINDS}

    def __eq__(self, other) -> bool:
        return isinstance(other, AugWeightTable) and np.array_equal(self._w, other._w)

    def __repr__(self) -> str:
        return f"AugWeightTable({self.to_dict()})"


def sample_distinct_pair(
    weights: AugWeightTable, rng: np.random.Generator | int
) -> tuple[AugmentationKind, AugmentationKind]:
    """Draw two different kinds; the second from the renormalised remainder."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    w = weights.array
    first = int(rng.choice(len(w), p=w / w.sum()))
    w[first] = 0.0
    second = int(rng.choice(len(w), p=w / w.sum()))
    return AugmentationKind(first), AugmentationKind(second)


def restrict_bank(kinds: Iterable) -> AugWeightTable:
    """Uniform weights over ``kinds``, zero elsewhere."""
    chosen = {AugmentationKind.parse(k) for k in kinds}
    if len(chosen) < 2:
        raise ConfigError("a restricted bank needs at least two kinds")
    return AugWeightTable({k: 1.0 for k in chosen})


def update_weights_from_silhouette(
    per_kind_scores: Mapping, threshold: float, boost: float = 3.0, base_weight: float = 1.0
) -> AugWeightTable:
    """Boost kinds whose silhouette falls below ``threshold``.

    Kinds absent from ``per_kind_scores`` get weight 0, so a restricted bank
    stays restricted.
    """
    if not -1.0 <= threshold <= 1.0:
        raise ConfigError("threshold must lie in [-1, 1]")
    if boost <= 1.0:
        raise ConfigError("boost ratio must exceed 1")
    table = {}
    for k, s in per_kind_scores.items():
        if not np.isfinite(s):
            raise ConfigError(f"non-finite silhouette score for {k}")
        table[AugmentationKind.parse(k)] = base_weight * (boost if s < threshold else 1.0)
    return AugWeightTable(table)

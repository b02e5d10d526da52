"""Frozen synthetic dual encoder standing in for a pre-trained CLIP.

Both encoders are two-layer MLPs whose first layers are seeded Gaussian
draws scaled by ``1/sqrt(fan_in)``. The output layers are then aligned in
closed form (ridge regression) so that an image and the hand-written
template prompt of its attribute triple land near the same point of a
shared embedding space. That alignment is what makes zero-shot transfer
to unseen classes possible at all.
"""
from __future__ import annotations

import hashlib
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .data import ATTRIBUTE_DIM, IMAGE_SHAPE, PATTERNS, ClassSpec, attribute_vector, render
from .errors import ContractError, DegenerateInputError

IMAGE_INPUT = int(np.prod(IMAGE_SHAPE))
ALIGN_SAMPLES = 4000
ALIGN_RIDGE = 0.1
NAME_NOISE = 0.05


@dataclass(frozen=True)
class EncoderDims:
    feature_dim: int = 64
    token_dim: int = 32
    context_length: int = 4
    image_hidden: int = 128
    text_hidden: int = 128

    def __post_init__(self):
        if self.feature_dim < 8 or self.token_dim < 8:
            raise ContractError("feature_dim and token_dim must be >= 8")
        if self.context_length < 1:
            raise ContractError("context_length must be >= 1")

    @property
    def prompt_length(self) -> int:
        return self.context_length + 1


@dataclass
class EncoderWeights:
    dims: EncoderDims
    init_seed: int
    image_w1: np.ndarray
    image_b1: np.ndarray
    image_w2: np.ndarray
    image_b2: np.ndarray
    text_w1: np.ndarray
    text_b1: np.ndarray
    text_w2: np.ndarray
    text_b2: np.ndarray
    attribute_embedding: np.ndarray  # [ATTRIBUTE_DIM, token_dim]
    template: np.ndarray  # [context_length, token_dim]
    class_table: dict[int, np.ndarray] = field(default_factory=dict)

    ARRAYS = (
        "image_w1",
        "image_b1",
        "image_w2",
        "image_b2",
        "text_w1",
        "text_b1",
        "text_w2",
        "text_b2",
        "attribute_embedding",
        "template",
    )

    def __post_init__(self):
        for name in self.ARRAYS:
            getattr(self, name).setflags(write=False)
        for v in self.class_table.values():
            v.setflags(write=False)

    def digest(self) -> str:
        """Content hash used to assert the freeze contract."""
        h = hashlib.sha256()
        for name in self.ARRAYS:
            h.update(np.ascontiguousarray(getattr(self, name)).tobytes())
        for cid in sorted(self.class_table):
            h.update(str(cid).encode())
            h.update(self.class_table[cid].tobytes())
        return h.hexdigest()

    def with_classes(self, classes: Iterable[ClassSpec]) -> EncoderWeights:
        """Copy with ``classes`` registered; existing rows are never replaced."""
        table = dict(self.class_table)
        for spec in classes:
            if spec.class_id not in table:
                table[spec.class_id] = _embed_class(self, spec)
        return replace(self, class_table=table)

    def to_dict(self) -> dict:
        doc = {"dims": self.dims.__dict__.copy(), "init_seed": self.init_seed}
        for name in self.ARRAYS:
            arr = getattr(self, name)
            doc[name] = {"shape": list(arr.shape), "data": arr.ravel().tolist()}
        doc["class_table"] = {str(k): v.tolist() for k, v in sorted(self.class_table.items())}
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> EncoderWeights:
        arrays = {
            name: np.asarray(doc[name]["data"], dtype=np.float64).reshape(doc[name]["shape"])
            for name in cls.ARRAYS
        }
        table = {int(k): np.asarray(v, dtype=np.float64) for k, v in doc["class_table"].items()}
        return cls(EncoderDims(**doc["dims"]), doc["init_seed"], class_table=table, **arrays)


def _embed_class(w: EncoderWeights, spec: ClassSpec) -> np.ndarray:
    # a class "word embedding": linear in the attributes plus a fixed per-name offset
    name_rng = np.random.default_rng([w.init_seed, 0xC1A5, spec.class_id])
    noise = name_rng.normal(0.0, NAME_NOISE, w.dims.token_dim)
    return spec.attributes @ w.attribute_embedding + noise


ENCODE_BLOCK = 16


def _image_hidden(w1, b1, images: np.ndarray) -> np.ndarray:
    x = images.reshape(len(images), -1) - 0.5
    return np.maximum(x @ w1 + b1, 0.0)


def _ridge(h: np.ndarray, target: np.ndarray, lam: float) -> tuple[np.ndarray, np.ndarray]:
    hc = np.c_[h, np.ones(len(h))]
    sol = np.linalg.solve(hc.T @ hc + lam * np.eye(hc.shape[1]), hc.T @ target)
    return sol[:-1], sol[-1]


def _unit_rows(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def init_frozen(dims: EncoderDims = EncoderDims(), seed: int = 0, classes: Iterable[ClassSpec] = ()) -> EncoderWeights:
    """Build the frozen encoders; bit-identical for the same ``(dims, seed)``."""
    rng = np.random.default_rng([seed, 0xE4C])
    d, de, M = dims.feature_dim, dims.token_dim, dims.context_length
    text_in = dims.prompt_length * de

    image_w1 = rng.normal(size=(IMAGE_INPUT, dims.image_hidden)) / np.sqrt(IMAGE_INPUT)
    image_b1 = np.zeros(dims.image_hidden)
    text_w1 = rng.normal(size=(text_in, dims.text_hidden)) / np.sqrt(text_in)
    text_b1 = np.zeros(dims.text_hidden)
    attribute_embedding = rng.normal(size=(ATTRIBUTE_DIM, de)) / np.sqrt(de)
    template = rng.normal(size=(M, de)) / np.sqrt(de)
    shared = rng.normal(size=(ATTRIBUTE_DIM, d)) / np.sqrt(ATTRIBUTE_DIM)

    # alignment corpus: random attribute triples rendered with mild noise
    n = ALIGN_SAMPLES
    pats = rng.integers(0, len(PATTERNS), n)
    fgs = rng.uniform(0.05, 0.95, (n, 3))
    bgs = rng.uniform(0.05, 0.95, (n, 3))
    sig = rng.uniform(0.0, 0.1, n)
    images = np.empty((n, *IMAGE_SHAPE))
    attrs = np.empty((n, ATTRIBUTE_DIM))
    for i in range(n):
        images[i] = np.clip(render(pats[i], fgs[i], bgs[i]) + rng.normal(0, sig[i], IMAGE_SHAPE), 0, 1)
        attrs[i] = attribute_vector(pats[i], fgs[i], bgs[i])
    target = _unit_rows(attrs @ shared)

    image_w2, image_b2 = _ridge(_image_hidden(image_w1, image_b1, images), target, ALIGN_RIDGE)

    names = attrs @ attribute_embedding + rng.normal(0.0, NAME_NOISE, (n, de))
    prompts = np.concatenate([np.broadcast_to(template.ravel(), (n, M * de)), names], axis=1)
    text_hidden = np.maximum(prompts @ text_w1 + text_b1, 0.0)
    text_w2, text_b2 = _ridge(text_hidden, target, ALIGN_RIDGE)

    w = EncoderWeights(
        dims,
        seed,
        image_w1,
        image_b1,
        image_w2,
        image_b2,
        text_w1,
        text_b1,
        text_w2,
        text_b2,
        attribute_embedding,
        template,
    )
    return w.with_classes(classes)


def encode_images(w: EncoderWeights, images: np.ndarray) -> np.ndarray:
    """Unit-norm features for a batch ``[N, 3, 16, 16]`` (plain numpy, no tape)."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    # BLAS rounding depends on the batch shape, so run every image through
    # identically shaped zero-padded blocks; features are then batch-invariant
    n = len(images)
    flat = np.zeros((-(-n // ENCODE_BLOCK) * ENCODE_BLOCK, images[0].size))
    flat[:n] = images.reshape(n, -1)
    out = np.empty((n, w.image_b2.size))
    for s in range(0, n, ENCODE_BLOCK):
        block = _image_hidden(w.image_w1, w.image_b1, flat[s : s + ENCODE_BLOCK]) @ w.image_w2 + w.image_b2
        out[s : s + ENCODE_BLOCK] = block[: n - s]
    norms = np.linalg.norm(out, axis=1, keepdims=True)
    if np.any(norms < 1e-9):
        raise DegenerateInputError("image feature has zero norm")
    return out / norms


def encode_image(w: EncoderWeights, image: np.ndarray) -> T.Tensor:
    """f(x): flatten, linear, relu, linear, L2-normalise. Images are data, so no tape."""
    return T.Tensor(encode_images(w, image)[0])


def class_embedding(w: EncoderWeights, class_id: int) -> np.ndarray:
    try:
        return w.class_table[int(class_id)]
    except KeyError:
        raise IndexError(f"class {class_id} is not registered with the encoder") from None


def encode_text_rows(w: EncoderWeights, prompts: T.Tensor) -> T.Tensor:
    """g(.) for ``[K, (M+1)*d_e]`` flattened prompts; differentiable in the prompts only."""
    h = T.relu(T.add(T.matmul(prompts, T.Tensor(w.text_w1)), T.Tensor(w.text_b1)))
    out = T.add(T.matmul(h, T.Tensor(w.text_w2)), T.Tensor(w.text_b2))
    return T.l2_normalize(out)


def encode_text(w: EncoderWeights, prompt: T.Tensor | Sequence[T.Tensor]) -> T.Tensor:
    """g(t) for one prompt of exactly M+1 tokens (a ``[M+1, d_e]`` tensor or a token list)."""
    if not isinstance(prompt, T.Tensor):
        prompt = T.stack(list(prompt))
    if prompt.shape != (w.dims.prompt_length, w.dims.token_dim):
        raise ContractError(
            f"prompt must be {w.dims.prompt_length} tokens of dim {w.dims.token_dim}, got {prompt.shape}"
        )
    flat = T.reshape(prompt, (1, -1))
    return T.reshape(encode_text_rows(w, flat), (w.dims.feature_dim,))


def text_features_np(w: EncoderWeights, prompts: np.ndarray) -> np.ndarray:
    """Batched g(.) over ``[..., (M+1)*d_e]`` prompts for evaluation."""
    h = np.maximum(prompts @ w.text_w1 + w.text_b1, 0.0)
    out = h @ w.text_w2 + w.text_b2
    norms = np.linalg.norm(out, axis=-1, keepdims=True)
    if np.any(norms < 1e-9):
        raise DegenerateInputError("text feature has zero norm")
    return out / norms

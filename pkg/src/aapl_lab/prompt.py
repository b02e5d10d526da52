"""Learnable prompt state: context vectors, the metanet, meta/delta tokens and predictions."""
from __future__ import annotations

import enum
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .augment import AugmentationKind, apply
from .encoders import EncoderWeights, class_embedding, encode_images, encode_text_rows, text_features_np
from .errors import ConfigError, ContractError

DEFAULT_TAU = 0.07
CONTEXT_INIT_STD = 0.02


class ModelMode(str, enum.Enum):
    static_coop = "static_coop"
    conditional_cocoop = "conditional_cocoop"
    aapl = "aapl"

    @classmethod
    def parse(cls, value) -> ModelMode:
        aliases = {"coop": "static_coop", "cocoop": "conditional_cocoop"}
        try:
            return cls(aliases.get(value, value))
        except ValueError:
            raise ConfigError(f"unknown mode {value!r}") from None


@dataclass
class MetaNet:
    """h_theta: linear -> relu -> linear with a d/16 bottleneck."""

    w1: T.Tensor  # [d, d/16]
    b1: T.Tensor
    w2: T.Tensor  # [d/16, d_e]
    b2: T.Tensor

    def parameters(self) -> list[T.Tensor]:
        return [self.w1, self.b1, self.w2, self.b2]

    def numpy_forward(self, features: np.ndarray) -> np.ndarray:
        h = np.maximum(features @ self.w1.data + self.b1.data, 0.0)
        return h @ self.w2.data + self.b2.data


@dataclass
class PromptParams:
    """Everything the optimizer updates: the M context vectors and the metanet."""

    context: T.Tensor  # [M, d_e]
    metanet: MetaNet

    def parameters(self) -> list[T.Tensor]:
        return [self.context, *self.metanet.parameters()]

    def names(self) -> list[str]:
        return ["context", "metanet.w1", "metanet.b1", "metanet.w2", "metanet.b2"]

    def count(self) -> int:
        return sum(p.size for p in self.parameters())

    def to_dict(self) -> dict:
        return {
            n: {"shape": list(p.shape), "data": p.data.ravel().tolist()}
            for n, p in zip(self.names(), self.parameters())
        }

    @classmethod
    def from_dict(cls, doc: dict) -> PromptParams:
        def load(n):
            return T.Tensor(np.asarray(doc[n]["data"]).reshape(doc[n]["shape"]), requires_grad=True)

        return cls(load("context"), MetaNet(*(load(f"metanet.{k}") for k in ("w1", "b1", "w2", "b2"))))

    def copy(self) -> PromptParams:
        return PromptParams.from_dict(self.to_dict())

    def zero_metanet(self) -> PromptParams:
        """Copy whose metanet outputs exactly zero for every input."""
        out = self.copy()
        for p in (out.metanet.w2, out.metanet.b2):
            p.data = np.zeros_like(p.data)
        return out


def _linear_init(rng: np.random.Generator, fan_in: int, fan_out: int) -> tuple[T.Tensor, T.Tensor]:
    # the usual Linear default: weight and bias both U(-1/sqrt(fan_in), 1/sqrt(fan_in))
    bound = 1.0 / np.sqrt(fan_in)
    w = rng.uniform(-bound, bound, (fan_in, fan_out))
    b = rng.uniform(-bound, bound, fan_out)
    return T.Tensor(w, requires_grad=True), T.Tensor(b, requires_grad=True)


def init_params(w: EncoderWeights, seed: int) -> PromptParams:
    d, de, M = w.dims.feature_dim, w.dims.token_dim, w.dims.context_length
    hidden = max(d // 16, 1)
    rng = np.random.default_rng([seed, 0x9A2A])
    ctx = rng.normal(0.0, CONTEXT_INIT_STD, (M, de))
    w1, b1 = _linear_init(rng, d, hidden)
    w2, b2 = _linear_init(rng, hidden, de)
    return PromptParams(T.Tensor(ctx, requires_grad=True), MetaNet(w1, b1, w2, b2))


@dataclass
class DeltaMetaToken:
    delta: T.Tensor
    class_id: int | None
    kind: AugmentationKind | None


def meta_token(net: MetaNet, image_feature) -> T.Tensor:
    """pi = W2 relu(W1 f + b1) + b2."""
    f = image_feature if isinstance(image_feature, T.Tensor) else T.Tensor(image_feature)
    if f.shape != (net.w1.shape[0],):
        raise ContractError(f"feature dim {f.shape} does not match metanet input {net.w1.shape[0]}")
    h = T.relu(T.add(T.matmul(f, net.w1), net.b1))
    return T.add(T.matmul(h, net.w2), net.b2)


def _zero_token(w: EncoderWeights) -> T.Tensor:
    return T.Tensor(np.zeros(w.dims.token_dim))


def conditional_prompt(
    params: PromptParams,
    pi: T.Tensor | None,
    class_id: int,
    enc: EncoderWeights,
    mode: ModelMode = ModelMode.conditional_cocoop,
) -> T.Tensor:
    """t_i(x) = {v_1 + pi, ..., v_M + pi, c_i} as an ``[M+1, d_e]`` tensor.

    In static_coop mode pi is replaced by zeros.
    """
    if pi is None or ModelMode.parse(mode) is ModelMode.static_coop:
        pi = _zero_token(enc)
    if pi.shape != (enc.dims.token_dim,):
        raise ContractError(f"meta token has shape {pi.shape}, expected ({enc.dims.token_dim},)")
    c = T.Tensor(class_embedding(enc, class_id))
    ctx = T.add(params.context, pi)
    return T.stack([*(T.row(ctx, m) for m in range(ctx.shape[0])), c])


def prompt_matrix(params: PromptParams, pi: T.Tensor, class_ids: Sequence[int], enc: EncoderWeights) -> T.Tensor:
    """``[K, (M+1)*d_e]`` flattened prompts for every class, sharing one pi."""
    M, de = enc.dims.context_length, enc.dims.token_dim
    ctx_flat = T.reshape(T.add(params.context, pi), (M * de,))
    rows = [T.concat([ctx_flat, T.Tensor(class_embedding(enc, c))]) for c in class_ids]
    return T.stack(rows)


def similarity_logits(
    mode: ModelMode,
    params: PromptParams,
    enc: EncoderWeights,
    image_feature: np.ndarray,
    class_ids: Sequence[int],
    tau: float = DEFAULT_TAU,
    pi: T.Tensor | None = None,
) -> T.Tensor:
    """sim(f(x), g(t_i(x))) / tau for each class, on the tape."""
    if tau <= 0:
        raise ConfigError("temperature must be positive")
    mode = ModelMode.parse(mode)
    f = T.Tensor(image_feature)
    if mode is ModelMode.static_coop:
        pi = _zero_token(enc)
    elif pi is None:
        pi = meta_token(params.metanet, f)
    text = encode_text_rows(enc, prompt_matrix(params, pi, class_ids, enc))
    return T.scale(T.cosine_similarity(text, f), 1.0 / tau)


def delta_meta_token(
    net: MetaNet,
    enc: EncoderWeights,
    image: np.ndarray,
    kind: AugmentationKind | None,
    seed: int = 0,
    class_id: int | None = None,
    stop_gradient: bool = False,
) -> DeltaMetaToken:
    """h(f(Aug(x))) - h(f(x)); both branches stay on the tape unless ``stop_gradient``."""
    f_orig, f_aug = encode_images(enc, np.stack([image, apply(kind, image, seed)]))
    pi_orig = meta_token(net, f_orig)
    if stop_gradient:
        pi_orig = pi_orig.detach()
    return DeltaMetaToken(T.sub(meta_token(net, f_aug), pi_orig), class_id, kind)


# --- batched numpy inference ---------------------------------------------------


def similarities(
    mode: ModelMode,
    params: PromptParams,
    enc: EncoderWeights,
    features: np.ndarray,
    class_ids: Sequence[int],
) -> np.ndarray:
    """Cosine similarity ``[N, K]`` between image features and each class's prompt."""
    mode = ModelMode.parse(mode)
    features = np.atleast_2d(features)
    n = len(features)
    M, de = enc.dims.context_length, enc.dims.token_dim
    if mode is ModelMode.static_coop:
        pis = np.zeros((n, de))
    else:
        pis = params.metanet.numpy_forward(features)
    ctx = (params.context.data[None, :, :] + pis[:, None, :]).reshape(n, M * de)
    names = np.stack([class_embedding(enc, c) for c in class_ids])
    prompts = np.concatenate(
        [np.broadcast_to(ctx[:, None, :], (n, len(class_ids), M * de)), np.broadcast_to(names, (n, *names.shape))],
        axis=-1,
    )
    text = text_features_np(enc, prompts)
    sims = np.einsum("nkd,nd->nk", text, features)
    return sims / (np.linalg.norm(text, axis=-1) * np.linalg.norm(features, axis=-1)[:, None])


def predict_proba(
    mode: ModelMode,
    params: PromptParams,
    enc: EncoderWeights,
    images: np.ndarray,
    class_ids: Sequence[int],
    tau: float = DEFAULT_TAU,
) -> np.ndarray:
    """p(y | x) over ``class_ids`` for one image ``[3,H,W]`` or a batch ``[N,3,H,W]``."""
    if tau <= 0:
        raise ConfigError("temperature must be positive")
    if len(class_ids) < 2:
        raise ContractError("need at least two classes")
    single = np.asarray(images).ndim == 3
    sims = similarities(mode, params, enc, encode_images(enc, images), class_ids)
    probs = T.softmax(sims / tau, axis=-1)
    return probs[0] if single else probs


def predict(
    mode: ModelMode,
    params: PromptParams,
    enc: EncoderWeights,
    features: np.ndarray,
    class_ids: Sequence[int],
) -> np.ndarray:
    """Predicted class ids; ties go to the lowest class id."""
    order = np.argsort(class_ids, kind="stable")
    ids = np.asarray(class_ids)[order]
    sims = similarities(mode, params, enc, features, list(ids))
    return ids[np.argmax(sims, axis=1)]

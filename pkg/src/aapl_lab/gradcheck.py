"""Finite-difference suite over every differentiable operation and the full training objective."""
from __future__ import annotations

import time
from collections.abc import Callable
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .augment import ALL_KINDS
from .data import DatasetConfig, generate_dataset, split_base_new
from .encoders import EncoderDims, encode_images, encode_text, encode_text_rows, init_frozen
from .losses import QuadDeltas, adtriplet, classification_loss, conventional_triplet_objective, triplet
from .prompt import MetaNet, ModelMode, PromptParams, init_params, meta_token
from .training import QuadBatch, TrainConfig, batch_features, objective

TOLERANCE = 1e-4
POINTS = 10
EPS = 1e-6
# points closer than this to a relu/hinge kink are redrawn before checking
KINK_MARGIN = 1e-4
MAX_DRAWS = 100


@dataclass
class CheckResult:
    name: str
    max_error: float
    points: int
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_error < TOLERANCE


def _probe(rng: np.random.Generator, n: int) -> T.Tensor:
    # fixed random weights that turn any output into a scalar
    return T.Tensor(rng.normal(size=(n, 1)))


def _scalarize(y: T.Tensor, w: T.Tensor) -> T.Tensor:
    return T.tsum(T.matmul(T.reshape(y, (y.size,)), w))


def _op(fn, *shapes) -> Callable:
    """Builder for a single-op check: random inputs of ``shapes`` and a random output probe."""

    def build(rng):
        pts = [T.Tensor(rng.normal(size=s)) for s in shapes]
        out_size = fn(*pts).size
        w = _probe(rng, out_size)
        return (lambda *xs: _scalarize(fn(*xs), w)), pts

    return build


_ENC = None


def _encoder():
    global _ENC
    if _ENC is None:
        ds = generate_dataset(DatasetConfig())
        _ENC = (init_frozen(EncoderDims(), 0, ds.classes), ds)
    return _ENC


def _quad_builder(loss):
    def build(rng):
        pts = [T.Tensor(rng.normal(size=8)) for _ in range(4)]
        return (lambda a, b, c, d: loss(QuadDeltas(a, b, c, d))), pts

    return build


def _triplet_builder(rng):
    pts = [T.Tensor(rng.normal(size=8)) for _ in range(3)]
    return (lambda a, p, n: triplet(a, p, n, 0.2)), pts


def _meta_token_builder(rng):
    enc, ds = _encoder()
    net = init_params(enc, int(rng.integers(1 << 30))).metanet
    f = T.Tensor(rng.normal(size=enc.dims.feature_dim))
    w = _probe(rng, enc.dims.token_dim)
    return (lambda f, w1, b1, w2, b2: _scalarize(meta_token(MetaNet(w1, b1, w2, b2), f), w)), [f, *net.parameters()]


def _encode_text_builder(rng):
    enc, _ = _encoder()
    tokens = T.Tensor(rng.normal(size=(enc.dims.prompt_length, enc.dims.token_dim)))
    w = _probe(rng, enc.dims.feature_dim)
    return (lambda t: _scalarize(encode_text(enc, t), w)), [tokens]


def _encode_rows_builder(rng):
    enc, _ = _encoder()
    prompts = T.Tensor(rng.normal(size=(3, enc.dims.prompt_length * enc.dims.token_dim)))
    w = _probe(rng, 3 * enc.dims.feature_dim)
    return (lambda p: _scalarize(encode_text_rows(enc, p), w)), [prompts]


def _unpack(enc, ctx, w1, b1, w2, b2) -> PromptParams:
    return PromptParams(ctx, MetaNet(w1, b1, w2, b2))


def _classification_builder(rng):
    enc, ds = _encoder()
    params = init_params(enc, int(rng.integers(1 << 30)))
    ids = ds.class_ids[:4]
    label = int(rng.choice(ids))
    f = encode_images(enc, ds.images[int(rng.integers(len(ds)))])[0]

    def fn(*ps):
        return classification_loss(ModelMode.aapl, _unpack(enc, *ps), enc, f, label, ids)

    return fn, params.parameters()


def _objective_builder(anchors: str, kind: str):
    def build(rng):
        enc, ds = _encoder()
        plan = split_base_new(ds, 0)
        ids = sorted(plan.base_class_ids)
        config = TrainConfig(mode="aapl", objective=kind, anchors=anchors, steps=1)
        params = init_params(enc, int(rng.integers(1 << 30)))
        c1, c2 = (int(c) for c in rng.choice(ids, 2, replace=False))
        ka, kb = (ALL_KINDS[int(k)] for k in rng.choice(len(ALL_KINDS), 2, replace=False))
        i1 = int(rng.choice(ds.indices_of(c1)))
        i2 = int(rng.choice(ds.indices_of(c2)))
        sa, sb = (int(s) for s in rng.integers(0, 1 << 30, 2))
        batch = QuadBatch(c1, c2, ds.images[i1], ds.images[i2], ka, kb, sa, sb)
        feats = batch_features(config, enc, batch)

        def fn(*ps):
            return objective(config, _unpack(enc, *ps), enc, feats, batch, ids)[0]

        return fn, params.parameters()

    return build


def _rowwise_add(a, b):
    return T.add(a, b)


CHECKS: dict[str, Callable] = {
    "matmul_vec": _op(T.matmul, (5,), (5, 3)),
    "matmul_mat": _op(T.matmul, (4, 5), (5, 3)),
    "add": _op(T.add, (6,), (6,)),
    "add_rowwise": _op(_rowwise_add, (4, 6), (6,)),
    "sub": _op(T.sub, (6,), (6,)),
    "scale": _op(lambda a: T.scale(a, -1.7), (6,)),
    "relu": _op(T.relu, (8,)),
    "tsum": _op(T.tsum, (3, 4)),
    "reshape": _op(lambda a: T.reshape(a, (4, 3)), (3, 4)),
    "concat": _op(lambda a, b: T.concat([a, b]), (3,), (5,)),
    "row": _op(lambda a: T.row(a, 2), (4, 3)),
    "stack": _op(lambda a, b: T.stack([a, b]), (5,), (5,)),
    "l2_normalize": _op(T.l2_normalize, (6,)),
    "l2_normalize_rows": _op(T.l2_normalize, (3, 6)),
    "cosine_similarity": _op(T.cosine_similarity, (6,), (6,)),
    "cosine_similarity_rows": _op(T.cosine_similarity, (4, 6), (6,)),
    "euclidean_distance": _op(T.euclidean_distance, (6,), (6,)),
    "softmax_cross_entropy": _op(lambda z: T.softmax_cross_entropy(z, 2), (5,)),
    "triplet": _triplet_builder,
    "adtriplet": _quad_builder(adtriplet),
    "adtriplet_symmetric": _quad_builder(lambda q: adtriplet(q, anchors="symmetric")),
    "conventional_triplet": _quad_builder(conventional_triplet_objective),
    "meta_token": _meta_token_builder,
    "encode_text": _encode_text_builder,
    "encode_text_rows": _encode_rows_builder,
    "classification_loss": _classification_builder,
    "total_objective": _objective_builder("default", "adtriplet"),
}

# objective variants; same ops as total_objective, so kept out of the default sweep
EXTENDED_CHECKS: dict[str, Callable] = {
    "total_objective_symmetric": _objective_builder("symmetric", "adtriplet"),
    "total_objective_triplet_ablation": _objective_builder("default", "triplet"),
}


def run_check(name: str, seed: int = 0, points: int = POINTS, eps: float = EPS) -> CheckResult:
    build = CHECKS.get(name) or EXTENDED_CHECKS[name]
    rng = np.random.default_rng([seed, sum(name.encode())])
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(points):
        for _ in range(MAX_DRAWS):
            fn, pts = build(rng)
            if T.kink_margin(fn, pts) >= KINK_MARGIN:
                break
        else:
            raise RuntimeError(f"{name}: no point clear of kinks in {MAX_DRAWS} draws")
        worst = max(worst, T.grad_check_many(fn, pts, eps))
    return CheckResult(name, worst, points, time.perf_counter() - t0)


def run_suite(seed: int = 0, points: int = POINTS, extended: bool = False) -> list[CheckResult]:
    names = [*CHECKS, *(EXTENDED_CHECKS if extended else ())]
    return [run_check(name, seed, points) for name in names]

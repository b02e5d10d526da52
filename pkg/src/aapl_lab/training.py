"""Quad-batch construction, SGD training loop, weighted augmentation sampling and checkpoints."""
from __future__ import annotations

import json
import math
import os
from collections import Counter
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from . import tensor as T
from .augment import (
    ALL_KINDS,
    AugmentationKind,
    AugWeightTable,
    apply,
    restrict_bank,
    sample_distinct_pair,
    update_weights_from_silhouette,
)
from .data import Dataset, SplitPlan, TrainingSet, sample_few_shot
from .encoders import EncoderDims, EncoderWeights, encode_images, init_frozen
from .errors import ConfigError, NumericError, VersionError
from .losses import LossWeights, QuadDeltas, adtriplet, classification_loss, conventional_triplet_objective, total_loss
from .metrics import Model, accuracy, augmentation_profile
from .prompt import DEFAULT_TAU, ModelMode, PromptParams, init_params, meta_token

CHECKPOINT_SCHEMA = "aapl-lab/checkpoint/v1"


@dataclass
class WRSConfig:
    enabled: bool = False
    threshold: float = 0.0
    refresh: int | None = 200  # None: score once before training
    boost: float = 3.0
    slice_size: int = 100


@dataclass
class TrainConfig:
    mode: str = "aapl"
    objective: str = "adtriplet"  # or "triplet" (class-clustering ablation)
    anchors: str = "default"
    ce_view: str = "original"  # or "augmented"
    stop_gradient: bool = False
    steps: int = 2000
    lr: float = 0.002
    momentum: float = 0.9
    cosine: bool = True
    alpha: float = 0.2
    beta: float = 1.0
    margin: float = 0.2
    shots: int = 16
    tau: float = DEFAULT_TAU
    data_seed: int = 1
    init_seed: int = 1
    order_seed: int = 1
    aug_subset: list[str] | None = None
    aug_weights: dict[str, float] | None = None
    wrs: WRSConfig = field(default_factory=WRSConfig)

    def __post_init__(self):
        if isinstance(self.wrs, dict):
            self.wrs = WRSConfig(**self.wrs)
        self.mode = ModelMode.parse(self.mode).value
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.alpha < 0 or self.beta < 0 or self.margin < 0:
            raise ConfigError("alpha, beta and margin must be non-negative")
        if self.objective not in ("adtriplet", "triplet"):
            raise ConfigError(f"unknown objective {self.objective!r}")
        if self.anchors not in ("default", "symmetric"):
            raise ConfigError(f"unknown anchors {self.anchors!r}")
        if self.ce_view not in ("original", "augmented"):
            raise ConfigError(f"unknown ce_view {self.ce_view!r}")
        if self.tau <= 0 or self.lr <= 0:
            raise ConfigError("tau and lr must be positive")
        if self.aug_subset is not None and self.aug_weights is not None:
            raise ConfigError("set at most one of aug_subset and aug_weights")
        if isinstance(self.wrs.refresh, int) and self.wrs.refresh < 1:
            raise ConfigError("wrs.refresh must be >= 1 (or null to score once)")
        self.weight_table()  # validates kind names and weights

    @property
    def model_mode(self) -> ModelMode:
        return ModelMode(self.mode)

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.alpha, self.beta, self.margin)

    def weight_table(self) -> AugWeightTable:
        if self.aug_subset is not None:
            return restrict_bank(self.aug_subset)
        return AugWeightTable(self.aug_weights)

    def with_seed_offset(self, k: int) -> TrainConfig:
        d = asdict(self)
        d.update(data_seed=self.data_seed + k, init_seed=self.init_seed + k, order_seed=self.order_seed + k)
        return TrainConfig(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class QuadBatch:
    class_1: int
    class_2: int
    image_1: np.ndarray
    image_2: np.ndarray
    kind_a: AugmentationKind | None
    kind_b: AugmentationKind | None
    seed_a: int
    seed_b: int

    @property
    def labeled(self) -> tuple[np.ndarray, int]:
        """The CE-labelled input: class 1's original image."""
        return self.image_1, self.class_1


def build_quad_batch(
    train_set: TrainingSet,
    weights: AugWeightTable,
    order_rng: np.random.Generator,
    aug_rng: np.random.Generator,
) -> QuadBatch:
    """Two distinct classes, one image each, and two distinct augmentations.

    Class/image choices draw only from ``order_rng`` and augmentations only
    from ``aug_rng``, so modes that differ only in augmentation handling see
    the same image stream.
    """
    ids = train_set.class_ids
    if len(ids) < 2:
        raise ConfigError("quad batches need at least two training classes")
    c1, c2 = order_rng.choice(ids, size=2, replace=False)
    i1 = order_rng.choice(np.flatnonzero(train_set.labels == c1))
    i2 = order_rng.choice(np.flatnonzero(train_set.labels == c2))
    ka, kb = sample_distinct_pair(weights, aug_rng)
    sa, sb = (int(s) for s in aug_rng.integers(0, 2**31, 2))
    return QuadBatch(int(c1), int(c2), train_set.images[i1], train_set.images[i2], ka, kb, sa, sb)


@dataclass
class TrainState:
    step: int
    params: PromptParams
    velocity: list[np.ndarray]
    order_rng: np.random.Generator
    aug_rng: np.random.Generator
    weights: AugWeightTable
    history: list[dict] = field(default_factory=list)
    aug_counts: Counter = field(default_factory=Counter)


def new_state(config: TrainConfig, enc: EncoderWeights) -> TrainState:
    params = init_params(enc, config.init_seed)
    order_seq, aug_seq = np.random.SeedSequence([config.order_seed, 0x0D3]).spawn(2)
    return TrainState(
        0,
        params,
        [np.zeros_like(p.data) for p in params.parameters()],
        np.random.default_rng(order_seq),
        np.random.default_rng(aug_seq),
        config.weight_table(),
    )


def learning_rate(config: TrainConfig, step: int) -> float:
    if not config.cosine:
        return config.lr
    return 0.5 * config.lr * (1.0 + math.cos(math.pi * step / config.steps))


def uses_quad(config: TrainConfig) -> bool:
    return config.model_mode is ModelMode.aapl


def batch_features(config: TrainConfig, enc: EncoderWeights, batch: QuadBatch) -> np.ndarray:
    """Frozen features of the views a step needs.

    Row order: x1, A(x1), B(x1), x2, A(x2), B(x2); non-AAPL modes stop after
    x1 (and A(x1) when the CE view is augmented).
    """
    x1, x2 = batch.image_1, batch.image_2
    views = [x1]
    if uses_quad(config) or config.ce_view == "augmented":
        views.append(apply(batch.kind_a, x1, batch.seed_a))
    if uses_quad(config):
        views += [
            apply(batch.kind_b, x1, batch.seed_b),
            x2,
            apply(batch.kind_a, x2, batch.seed_a),
            apply(batch.kind_b, x2, batch.seed_b),
        ]
    return encode_images(enc, np.stack(views))


def objective(
    config: TrainConfig,
    params: PromptParams,
    enc: EncoderWeights,
    feats: np.ndarray,
    batch: QuadBatch,
    class_ids: list[int],
) -> tuple[T.Tensor, T.Tensor, T.Tensor | None]:
    """alpha * adtriplet + beta * CE from precomputed view features; returns (total, ce, adtriplet-or-None)."""
    mode = config.model_mode
    adt = None
    pis: dict[int, T.Tensor] = {}
    if uses_quad(config):
        net = params.metanet
        pis = {i: meta_token(net, feats[i]) for i in range(6)}
        base1, base2 = pis[0], pis[3]
        if config.stop_gradient:
            base1, base2 = base1.detach(), base2.detach()
        quad = QuadDeltas(
            T.sub(pis[1], base1),
            T.sub(pis[2], base1),
            T.sub(pis[4], base2),
            T.sub(pis[5], base2),
            batch.class_1,
            batch.class_2,
            batch.kind_a,
            batch.kind_b,
        )
        if config.objective == "adtriplet":
            adt = adtriplet(quad, config.margin, config.anchors)
        else:
            adt = conventional_triplet_objective(quad, config.margin)

    ce_index = 1 if config.ce_view == "augmented" else 0
    ce = classification_loss(
        mode,
        params,
        enc,
        feats[ce_index],
        batch.class_1,
        class_ids,
        config.tau,
        pi=pis.get(ce_index),
    )
    if adt is None:
        total = T.scale(ce, config.beta)
    else:
        total = total_loss(ce, adt, config.loss_weights)
    return total, ce, adt


def step_loss(
    config: TrainConfig,
    params: PromptParams,
    enc: EncoderWeights,
    batch: QuadBatch,
    class_ids: list[int],
) -> tuple[T.Tensor, T.Tensor, T.Tensor | None]:
    """Forward pass of one step. Call inside a tape."""
    return objective(config, params, enc, batch_features(config, enc, batch), batch, class_ids)


def train_step(
    state: TrainState,
    config: TrainConfig,
    enc: EncoderWeights,
    batch: QuadBatch,
    class_ids: list[int],
) -> dict:
    """One SGD-with-momentum update; mutates ``state`` and returns the step metrics."""
    lr = learning_rate(config, state.step)
    try:
        with T.GradientTape():
            total, ce, adt = step_loss(config, state.params, enc, batch, class_ids)
        grads = T.backward(total)
    except NumericError as exc:
        raise NumericError(
            f"step {state.step}: {exc} (classes {batch.class_1},{batch.class_2}; "
            f"augs {batch.kind_a},{batch.kind_b}; lr {lr:.3g})"
        ) from None

    for i, p in enumerate(state.params.parameters()):
        if p not in grads:
            continue
        v = state.velocity[i]
        v *= config.momentum
        v += grads[p].data
        p.data = p.data - lr * v

    if config.model_mode is ModelMode.aapl or config.ce_view == "augmented":
        state.aug_counts[batch.kind_a] += 1
        if config.model_mode is ModelMode.aapl:
            state.aug_counts[batch.kind_b] += 1
    row = {
        "step": state.step,
        "ce": ce.item(),
        "adtriplet": adt.item() if adt is not None else 0.0,
        "total": total.item(),
        "lr": lr,
    }
    state.history.append(row)
    state.step += 1
    return row


@dataclass
class Checkpoint:
    config: TrainConfig
    params: PromptParams
    encoder: EncoderWeights
    dataset_fingerprint: str
    class_ids: list[int]
    history: list[dict]
    final_metrics: dict
    aug_counts: dict
    wrs_log: list[dict] = field(default_factory=list)
    experiment: dict | None = None
    schema: str = CHECKPOINT_SCHEMA
    tool_version: str = __version__

    @property
    def model(self) -> Model:
        return Model(self.config.model_mode, self.params, self.encoder, self.config.tau)

    def to_dict(self) -> dict:
        return {
            "schema": self.schema,
            "tool_version": self.tool_version,
            "config": self.config.to_dict(),
            "experiment": self.experiment,
            "dataset_fingerprint": self.dataset_fingerprint,
            "class_ids": self.class_ids,
            "final_metrics": self.final_metrics,
            "aug_counts": self.aug_counts,
            "wrs_log": self.wrs_log,
            "history": self.history,
            "params": self.params.to_dict(),
            "encoder": self.encoder.to_dict(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> Checkpoint:
        if doc.get("schema") != CHECKPOINT_SCHEMA:
            raise VersionError(f"unsupported checkpoint schema {doc.get('schema')!r}")
        return cls(
            TrainConfig(**doc["config"]),
            PromptParams.from_dict(doc["params"]),
            EncoderWeights.from_dict(doc["encoder"]),
            doc["dataset_fingerprint"],
            doc["class_ids"],
            doc["history"],
            doc["final_metrics"],
            doc["aug_counts"],
            doc["wrs_log"],
            doc.get("experiment"),
            doc["schema"],
            doc["tool_version"],
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> Checkpoint:
        return cls.from_dict(json.loads(Path(path).read_text()))


def training_set_of(ck: Checkpoint, dataset: Dataset) -> TrainingSet:
    """Re-derive the few-shot set a checkpoint was trained on."""
    rest = frozenset(dataset.class_ids) - frozenset(ck.class_ids)
    return sample_few_shot(dataset, SplitPlan(frozenset(ck.class_ids), rest, ck.config.shots), ck.config.data_seed)


def heldout_indices(dataset: Dataset, train_set: TrainingSet, class_ids) -> np.ndarray:
    """Samples of ``class_ids`` that are not in the training set, in dataset order."""
    mask = np.isin(dataset.labels, list(class_ids))
    mask[train_set.indices] = False
    return np.flatnonzero(mask)


def wrs_scores(model: Model, images, labels, weights: AugWeightTable, n_points: int, seed: int) -> dict:
    """Per-kind delta-token silhouette used to set the sampling weights."""
    prof = augmentation_profile(model, images, labels, n_points, weights, seed)
    return prof.delta_per_kind


def train_loop(
    config: TrainConfig,
    dataset: Dataset,
    plan: SplitPlan,
    enc: EncoderWeights | None = None,
) -> Checkpoint:
    """Train on the few-shot base set and return the final checkpoint."""
    if enc is None:
        enc = init_frozen(EncoderDims(), 0, dataset.classes)
    else:
        enc = enc.with_classes(dataset.classes)
    frozen = enc.digest()
    plan = SplitPlan(plan.base_class_ids, plan.new_class_ids, config.shots)
    train_set = sample_few_shot(dataset, plan, config.data_seed)
    class_ids = sorted(plan.base_class_ids)
    state = new_state(config, enc)
    bank = state.weights

    held = heldout_indices(dataset, train_set, class_ids)
    wrs_log = []
    if config.wrs.enabled:
        pool = held if len(held) else train_set.indices
        slice_idx = pool[np.random.default_rng([config.order_seed, 0x5C]).permutation(len(pool))]
        slice_idx = slice_idx[: config.wrs.slice_size]

    for t in range(config.steps):
        if config.wrs.enabled and (t == 0 or (config.wrs.refresh and t % config.wrs.refresh == 0)):
            model = Model(config.model_mode, state.params, enc, config.tau)
            scores = wrs_scores(
                model, dataset.images[slice_idx], dataset.labels[slice_idx], bank, config.wrs.slice_size, t
            )
            state.weights = update_weights_from_silhouette(scores, config.wrs.threshold, config.wrs.boost)
            wrs_log.append(
                {"step": t, "scores": {k.name: v for k, v in scores.items()}, "weights": state.weights.to_dict()}
            )
        batch = build_quad_batch(train_set, state.weights, state.order_rng, state.aug_rng)
        train_step(state, config, enc, batch, class_ids)

    if enc.digest() != frozen:  # pragma: no cover - guarded by read-only arrays
        raise RuntimeError("encoder weights changed during training")

    model = Model(config.model_mode, state.params, enc, config.tau)
    final = {"train_accuracy": accuracy(model, train_set.images, train_set.labels, class_ids)}
    if len(held):
        final["heldout_base_accuracy"] = accuracy(model, dataset.images[held], dataset.labels[held], class_ids)
    return Checkpoint(
        config,
        state.params,
        enc,
        dataset.fingerprint(),
        class_ids,
        state.history,
        final,
        {k.name: state.aug_counts.get(k, 0) for k in ALL_KINDS},
        wrs_log,
    )


def aggregate(reports: list[dict]) -> dict:
    """Mean and population std of each numeric metric across replicas (exact sums, so order-invariant)."""
    keys = sorted(set().union(*reports))
    out = {}
    for k in keys:
        vals = [float(r[k]) for r in reports]
        mean = math.fsum(vals) / len(vals)
        std = math.sqrt(math.fsum((v - mean) ** 2 for v in vals) / len(vals))
        out[k] = {"mean": mean, "std": std, "values": vals}
    return out


@dataclass
class EnsembleResult:
    summary: dict
    reports: list
    checkpoints: list[Checkpoint]


def _replica(config: TrainConfig, dataset: Dataset, plan: SplitPlan, enc):
    from .evaluation import evaluate_base_to_new

    ck = train_loop(config, dataset, plan, enc)
    return ck, evaluate_base_to_new(ck, dataset, plan)


def replica_threads() -> int:
    """Parallel replica cap from ``AAPL_LAB_THREADS`` (default 1)."""
    raw = os.environ.get("AAPL_LAB_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"AAPL_LAB_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("AAPL_LAB_THREADS must be >= 1")
    return n


def run_seeded_ensemble(
    config: TrainConfig,
    dataset: Dataset,
    plan: SplitPlan,
    n_seeds: int = 3,
    enc: EncoderWeights | None = None,
    threads: int | None = None,
) -> EnsembleResult:
    """Independent base-to-new runs with all three seeds offset by 0..n-1.

    Replicas share nothing; results are merged in seed order whatever the
    parallelism, so the summary is bit-stable.
    """
    if n_seeds < 1:
        raise ConfigError("n_seeds must be >= 1")
    threads = replica_threads() if threads is None else threads
    configs = [config.with_seed_offset(k) for k in range(n_seeds)]
    if threads > 1 and n_seeds > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=min(threads, n_seeds)) as pool:
            results = list(pool.map(_replica, configs, [dataset] * n_seeds, [plan] * n_seeds, [enc] * n_seeds))
    else:
        results = [_replica(c, dataset, plan, enc) for c in configs]
    reports = [r for _, r in results]
    rows = [r.rows[0] for r in reports]
    summary = aggregate([{"base": r["base"], "new": r["new"], "hm": r["hm"]} for r in rows])
    return EnsembleResult(summary, reports, [ck for ck, _ in results])

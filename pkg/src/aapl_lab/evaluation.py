"""Measurement protocols (base-to-new, cross-dataset, domain shift) and report export."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .augment import AugmentationKind
from .data import Dataset, ShiftConfig, SplitPlan, full_plan, generate_shifted_dataset
from .errors import ConfigError, VersionError
from .metrics import AugmentationProfile, Model, accuracy, augmentation_profile, harmonic_mean
from .training import Checkpoint, TrainConfig, heldout_indices, train_loop, training_set_of

REPORT_SCHEMA = "aapl-lab/report/v1"
PROTOCOLS = ("base-to-new", "cross-dataset", "domain-shift")


def _pct(x: float) -> float:
    return 100.0 * x


def config_fingerprint(config: TrainConfig) -> str:
    blob = json.dumps(config.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class EvalReport:
    """Accuracies are percentages.

    base-to-new rows carry ``dataset, base, new, hm``; transfer rows carry
    ``target, accuracy`` and end with an ``average`` row.
    """

    protocol: str
    rows: list[dict]
    seeds: list[int] = field(default_factory=list)
    config_fingerprint: str = ""
    silhouette: dict = field(default_factory=dict)  # {"meta": {kind: s}, "delta": {...}}
    schema: str = REPORT_SCHEMA

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ConfigError(f"unknown protocol {self.protocol!r}")
        for r in self.rows:
            if "hm" in r and not math.isclose(r["hm"], harmonic_mean(r["base"], r["new"]), abs_tol=1e-9):
                raise ConfigError(f"row {r.get('dataset')}: hm does not match its base/new accuracies")

    @property
    def columns(self) -> list[str]:
        return ["dataset", "base", "new", "hm"] if self.protocol == "base-to-new" else ["target", "accuracy"]

    def to_dict(self) -> dict:
        return {
            "schema": self.schema,
            "protocol": self.protocol,
            "seeds": self.seeds,
            "config_fingerprint": self.config_fingerprint,
            "rows": self.rows,
            "silhouette": self.silhouette,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> EvalReport:
        if doc.get("schema") != REPORT_SCHEMA:
            raise VersionError(f"unsupported report schema {doc.get('schema')!r}")
        return cls(doc["protocol"], doc["rows"], doc["seeds"], doc["config_fingerprint"], doc["silhouette"])

    def __eq__(self, other) -> bool:
        return isinstance(other, EvalReport) and self.to_dict() == other.to_dict()


def _b2n_row(ck: Checkpoint, dataset: Dataset, plan: SplitPlan) -> dict:
    """Base accuracy on held-out base samples, new accuracy on every new-class sample."""
    enc = ck.encoder.with_classes(dataset.classes)
    model = Model(ck.config.model_mode, ck.params, enc, ck.config.tau)
    if sorted(plan.base_class_ids) != ck.class_ids:
        raise ConfigError("plan's base classes differ from the checkpoint's training classes")
    train_set = training_set_of(ck, dataset)
    base_ids = sorted(plan.base_class_ids)
    new_ids = sorted(plan.new_class_ids)
    held = heldout_indices(dataset, train_set, base_ids)
    new_idx = np.flatnonzero(np.isin(dataset.labels, new_ids))
    if np.intersect1d(new_idx, train_set.indices).size:  # pragma: no cover - by construction
        raise RuntimeError("new-class sample leaked into the training set")
    base = _pct(accuracy(model, dataset.images[held], dataset.labels[held], base_ids))
    new = _pct(accuracy(model, dataset.images[new_idx], dataset.labels[new_idx], new_ids))
    return {"dataset": dataset.name, "base": base, "new": new, "hm": harmonic_mean(base, new)}


def evaluate_base_to_new(ck: Checkpoint, dataset: Dataset, plan: SplitPlan) -> EvalReport:
    if dataset.fingerprint() != ck.dataset_fingerprint:
        raise ConfigError("checkpoint was trained on a different dataset")
    if not plan.base_class_ids or not plan.new_class_ids:
        raise ConfigError("base-to-new needs non-empty base and new class sets")
    c = ck.config
    return EvalReport(
        "base-to-new", [_b2n_row(ck, dataset, plan)], [c.data_seed, c.init_seed, c.order_seed], config_fingerprint(c)
    )


def base_to_new_protocol(config: TrainConfig, dataset: Dataset, plan: SplitPlan, enc=None) -> EvalReport:
    """Train on the few-shot base classes, then score base (held-out) and new classes."""
    if not plan.base_class_ids or not plan.new_class_ids:
        raise ConfigError("base-to-new needs non-empty base and new class sets")
    return evaluate_base_to_new(train_loop(config, dataset, plan, enc), dataset, plan)


def _transfer_rows(ck: Checkpoint, source: Dataset, targets: list[Dataset]) -> list[dict]:
    train_set = training_set_of(ck, source)
    rows = []
    for tgt in targets:
        enc = ck.encoder.with_classes(tgt.classes)
        model = Model(ck.config.model_mode, ck.params, enc, ck.config.tau)
        ids = sorted(tgt.class_ids)
        if tgt.fingerprint() == source.fingerprint():
            idx = heldout_indices(tgt, train_set, ids)
        else:
            idx = np.arange(len(tgt))
        rows.append({"target": tgt.name, "accuracy": _pct(accuracy(model, tgt.images[idx], tgt.labels[idx], ids))})
    rows.append({"target": "average", "accuracy": math.fsum(r["accuracy"] for r in rows) / len(rows)})
    return rows


def evaluate_transfer(ck: Checkpoint, source: Dataset, targets: list[Dataset], protocol: str) -> EvalReport:
    if source.fingerprint() != ck.dataset_fingerprint:
        raise ConfigError("checkpoint was trained on a different dataset")
    if not targets:
        raise ConfigError("no target datasets")
    c = ck.config
    return EvalReport(
        protocol, _transfer_rows(ck, source, targets), [c.data_seed, c.init_seed, c.order_seed], config_fingerprint(c)
    )


def train_on_source(config: TrainConfig, source: Dataset, enc=None) -> Checkpoint:
    return train_loop(config, source, full_plan(source, config.shots), enc)


def cross_dataset_protocol(config: TrainConfig, source: Dataset, targets: list[Dataset], enc=None) -> EvalReport:
    """Train once on every source class; zero-shot accuracy on each target plus an average row.

    A target identical to the source is scored on its held-out samples, so it
    reports in-domain accuracy.
    """
    return evaluate_transfer(train_on_source(config, source, enc), source, targets, "cross-dataset")


def shifted_targets(source: Dataset, shifts: list[ShiftConfig], seed: int = 0) -> list[Dataset]:
    for s in shifts:
        if s.magnitude < 0:
            raise ConfigError(f"negative shift magnitude {s.magnitude}")
    return [generate_shifted_dataset(source, s, seed) for s in shifts]


def domain_shift_protocol(
    config: TrainConfig, source: Dataset, shifts: list[ShiftConfig], enc=None, seed: int = 0
) -> EvalReport:
    """Source row (held-out in-domain accuracy), one row per shifted copy, then the average of the shifted rows."""
    ck = train_on_source(config, source, enc)
    return evaluate_domain_shift(ck, source, shifts, seed)


def evaluate_domain_shift(ck: Checkpoint, source: Dataset, shifts: list[ShiftConfig], seed: int = 0) -> EvalReport:
    report = evaluate_transfer(ck, source, [source], "domain-shift")
    src_row = dict(report.rows[0], target=f"source:{source.name}")
    shifted = evaluate_transfer(ck, source, shifted_targets(source, shifts, seed), "domain-shift")
    # zero-magnitude copies are the source itself, scored on the same held-out samples
    report.rows = [src_row, *shifted.rows]
    return report


def profile_checkpoint(ck: Checkpoint, dataset: Dataset, n_points: int = 100, seed: int = 0) -> AugmentationProfile:
    """Augmentation profile over validation images (samples outside the few-shot training set)."""
    train_set = training_set_of(ck, dataset)
    enc = ck.encoder.with_classes(dataset.classes)
    val = heldout_indices(dataset, train_set, dataset.class_ids)
    model = Model(ck.config.model_mode, ck.params, enc, ck.config.tau)
    return augmentation_profile(model, dataset.images[val], dataset.labels[val], n_points, ck.config.weight_table(), seed)


# --- export -------------------------------------------------------------------------


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def _csv(header: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


def report_table_name(report: EvalReport) -> str:
    return f"report_{report.protocol.replace('-', '_')}.csv"


def export_report(report: EvalReport, directory) -> list[Path]:
    """Write ``report.json`` and the protocol's CSV table; returns the written paths."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    js = out / "report.json"
    js.write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True) + "\n")
    table = out / report_table_name(report)
    cols = report.columns
    table.write_text(_csv(cols, [[r[c] for c in cols] for r in report.rows]))
    return [js, table]


def import_report(directory) -> EvalReport:
    return EvalReport.from_dict(json.loads((Path(directory) / "report.json").read_text()))


def export_profile(profile: AugmentationProfile, directory) -> list[Path]:
    """``profile_silhouette.csv`` (one row per kind) and one projection CSV per token cloud."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    rows = [[k.name, profile.meta_per_kind[k], profile.delta_per_kind[k]] for k in profile.kinds]
    rows.append(["mean", profile.meta_mean, profile.delta_mean])
    sil = out / "profile_silhouette.csv"
    sil.write_text(_csv(["kind", "meta", "delta"], rows))
    paths = [sil]
    for cloud, xy in ((profile.meta, profile.meta_xy), (profile.delta, profile.delta_xy)):
        p = out / f"profile_{cloud.token_type}_projection.csv"
        pts = [
            [x, y, AugmentationKind(int(k)).name, int(c), cloud.token_type]
            for (x, y), k, c in zip(xy, cloud.kinds, cloud.class_ids)
        ]
        p.write_text(_csv(["x", "y", "kind", "class", "token_type"], pts))
        paths.append(p)
    return paths

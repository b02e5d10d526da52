import dataclasses
import math
import time

import numpy as np
import pytest

from aapl_lab import tensor as T
from aapl_lab.augment import AugWeightTable
from aapl_lab.data import sample_few_shot
from aapl_lab.errors import ConfigError, NumericError, VersionError
from aapl_lab.evaluation import evaluate_base_to_new
from aapl_lab.metrics import Model, accuracy
from aapl_lab.prompt import init_params
from aapl_lab.training import (
    Checkpoint,
    TrainConfig,
    WRSConfig,
    aggregate,
    build_quad_batch,
    learning_rate,
    new_state,
    replica_threads,
    run_seeded_ensemble,
    step_loss,
    train_loop,
    train_step,
)


@pytest.fixture(scope="module")
def default_run(toy):
    ds, plan, enc = toy
    t0 = time.perf_counter()
    ck = train_loop(TrainConfig(), ds, plan, enc)
    return ck, time.perf_counter() - t0


@pytest.fixture
def train_set(dataset, plan):
    return sample_few_shot(dataset, plan, 1)


def _stream(train_set, n, seed=0, weights=None):
    order, aug = np.random.default_rng([seed, 1]), np.random.default_rng([seed, 2])
    return [build_quad_batch(train_set, weights or AugWeightTable(), order, aug) for _ in range(n)]


def test_quad_batches_have_distinct_classes_and_kinds(train_set):
    for b in _stream(train_set, 300):
        assert b.class_1 != b.class_2
        assert b.kind_a != b.kind_b
        img, label = b.labeled
        assert label == b.class_1 and img is b.image_1


def test_quad_stream_replays(train_set):
    for a, b in zip(_stream(train_set, 50, 3), _stream(train_set, 50, 3)):
        assert (a.class_1, a.class_2, a.kind_a, a.kind_b, a.seed_a, a.seed_b) == (
            b.class_1, b.class_2, b.kind_a, b.kind_b, b.seed_a, b.seed_b,
        )
        assert np.array_equal(a.image_1, b.image_1) and np.array_equal(a.image_2, b.image_2)


def test_single_class_training_set_rejected(train_set):
    keep = train_set.labels == train_set.labels[0]
    one = dataclasses.replace(train_set, images=train_set.images[keep], labels=train_set.labels[keep])
    with pytest.raises(ConfigError):
        build_quad_batch(one, AugWeightTable(), np.random.default_rng(0), np.random.default_rng(1))


def test_zero_alpha_zero_metanet_step_is_a_coop_step(enc, train_set):
    ids = sorted(set(train_set.labels.tolist()))
    batch = _stream(train_set, 1, 7)[0]
    states = {}
    for mode in ("aapl", "coop"):
        cfg = TrainConfig(mode=mode, alpha=0.0)
        st = new_state(cfg, enc)
        st.params = st.params.zero_metanet()
        row = train_step(st, cfg, enc, batch, ids)
        states[mode] = (st, row)
    (sa, ra), (sc, rc) = states["aapl"], states["coop"]
    assert ra["ce"] == rc["ce"] and ra["total"] == rc["total"]
    assert np.array_equal(sa.params.context.data, sc.params.context.data)


def test_mode_lattice_on_fixed_stream(enc, train_set):
    ids = sorted(set(train_set.labels.tolist()))
    params = init_params(enc, 2)
    batches = _stream(train_set, 40, 4)

    def losses(cfg, p, stream):
        out = []
        for b in stream:
            with T.GradientTape():
                total, ce, _ = step_loss(cfg, p, enc, b, ids)
            out.append((total.item(), ce.item()))
        return out

    # aapl with alpha = 0 is cocoop trained on the augmented view
    aug = TrainConfig(mode="cocoop", ce_view="augmented")
    assert losses(TrainConfig(alpha=0.0, ce_view="augmented"), params, batches) == losses(aug, params, batches)
    # identity augmentations reduce cocoop+aug to cocoop
    plain = [dataclasses.replace(b, kind_a=None, kind_b=None) for b in batches]
    assert losses(aug, params, plain) == losses(TrainConfig(mode="cocoop"), params, batches)
    # a zeroed metanet reduces cocoop to coop
    zero = params.zero_metanet()
    assert losses(TrainConfig(mode="cocoop"), zero, batches) == losses(TrainConfig(mode="coop"), zero, batches)


def test_default_run_losses_are_finite(default_run):
    ck, _ = default_run
    assert len(ck.history) == 2000
    assert all(math.isfinite(r[k]) for r in ck.history for k in ("ce", "adtriplet", "total"))


def test_default_run_fits_time_budget(default_run):
    _, seconds = default_run
    assert seconds < 60.0


def test_loss_moving_average_is_non_increasing(default_run):
    ck, _ = default_run
    total = np.array([r["total"] for r in ck.history])
    ma = np.convolve(total, np.ones(100) / 100, mode="valid")
    rises = int(np.sum(np.diff(ma) > 0))
    assert rises == 0, f"100-step moving average rises on {rises} of {len(ma) - 1} steps"


def test_identical_seeds_give_identical_trajectories(dataset, plan, enc):
    cfg = TrainConfig(steps=60)
    a = train_loop(cfg, dataset, plan, enc)
    b = train_loop(cfg, dataset, plan, enc)
    assert a.history == b.history
    assert all(np.array_equal(x.data, y.data) for x, y in zip(a.params.parameters(), b.params.parameters()))
    assert a.to_dict() == b.to_dict()
    c = train_loop(dataclasses.replace(cfg, order_seed=2), dataset, plan, enc)
    assert c.history != a.history


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(steps=0)
    for bad in ({"alpha": -1.0}, {"beta": -0.5}, {"margin": -0.1}, {"mode": "clip"}, {"objective": "contrastive"}):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)
    with pytest.raises(ConfigError):
        TrainConfig(aug_subset=["hue", "cutout"], aug_weights={"hue": 1.0, "cutout": 1.0})
    with pytest.raises(ConfigError):
        TrainConfig(wrs={"enabled": True, "refresh": 0})
    assert TrainConfig(wrs={"enabled": True}).wrs == WRSConfig(enabled=True)


def test_cosine_schedule_endpoints():
    cfg = TrainConfig(steps=100, lr=0.002)
    assert learning_rate(cfg, 0) == 0.002
    assert learning_rate(cfg, 50) == pytest.approx(0.001, abs=1e-15)
    assert learning_rate(cfg, 100) == pytest.approx(0.0, abs=1e-18)
    assert learning_rate(dataclasses.replace(cfg, cosine=False), 70) == 0.002


def test_wrs_disabled_keeps_weights(dataset, plan, enc):
    ck = train_loop(TrainConfig(steps=40), dataset, plan, enc)
    assert ck.wrs_log == []
    assert sum(ck.aug_counts.values()) == 80


def test_wrs_enabled_refreshes_on_schedule(dataset, plan, enc):
    ck = train_loop(TrainConfig(steps=50, wrs=WRSConfig(enabled=True, refresh=20, slice_size=30)), dataset, plan, enc)
    assert [e["step"] for e in ck.wrs_log] == [0, 20, 40]
    once = train_loop(TrainConfig(steps=50, wrs=WRSConfig(enabled=True, refresh=None, slice_size=30)), dataset, plan, enc)
    assert [e["step"] for e in once.wrs_log] == [0]


def test_subset_restricts_sampled_kinds(dataset, plan, enc):
    subset = ["random_crop", "cutout", "gaussian_noise"]
    ck = train_loop(TrainConfig(steps=60, aug_subset=subset), dataset, plan, enc)
    assert {k for k, n in ck.aug_counts.items() if n} == set(subset)


def test_non_finite_loss_raises_with_diagnostics(dataset, plan, enc):
    with np.errstate(all="ignore"), pytest.raises(NumericError, match="step"):
        train_loop(TrainConfig(steps=50, lr=1e300, cosine=False), dataset, plan, enc)


def test_parameter_count_is_mode_independent_and_constant(enc, default_run):
    counts = {m: init_params(enc, 0).count() for m in ("coop", "cocoop", "aapl")}
    assert len(set(counts.values())) == 1
    ck, _ = default_run
    assert ck.params.count() == counts["aapl"]


def test_encoder_is_frozen(enc, default_run):
    ck, _ = default_run
    assert ck.encoder.digest() == enc.digest()
    for name in enc.ARRAYS:
        assert np.array_equal(getattr(ck.encoder, name), getattr(enc, name))


def test_checkpoint_reload_reproduces_metrics(tmp_path, dataset, plan, default_run):
    ck, _ = default_run
    ck.save(tmp_path / "ck.json")
    back = Checkpoint.load(tmp_path / "ck.json")
    assert back.to_dict() == ck.to_dict()
    train_set = sample_few_shot(dataset, plan, back.config.data_seed)
    model = Model(back.config.model_mode, back.params, back.encoder, back.config.tau)
    assert accuracy(model, train_set.images, train_set.labels, back.class_ids) == ck.final_metrics["train_accuracy"]
    assert evaluate_base_to_new(back, dataset, plan) == evaluate_base_to_new(ck, dataset, plan)


def test_checkpoint_schema_mismatch(default_run):
    doc = default_run[0].to_dict()
    doc["schema"] = "aapl-lab/checkpoint/v0"
    with pytest.raises(VersionError):
        Checkpoint.from_dict(doc)


def test_aggregate_examples():
    one = aggregate([{"hm": 80.0}])
    assert one["hm"]["mean"] == 80.0 and one["hm"]["std"] == 0.0
    rows = [{"hm": 0.1}, {"hm": 0.7}, {"hm": 1e-9}, {"hm": 3.3}]
    fwd, rev = aggregate(rows), aggregate(rows[::-1])
    assert fwd["hm"]["mean"] == rev["hm"]["mean"] and fwd["hm"]["std"] == rev["hm"]["std"]


def test_single_seed_ensemble(dataset, plan, enc):
    cfg = TrainConfig(steps=40)
    res = run_seeded_ensemble(cfg, dataset, plan, 1, enc)
    row = evaluate_base_to_new(train_loop(cfg, dataset, plan, enc), dataset, plan).rows[0]
    for k in ("base", "new", "hm"):
        assert res.summary[k]["mean"] == row[k] and res.summary[k]["std"] == 0.0
    with pytest.raises(ConfigError):
        run_seeded_ensemble(cfg, dataset, plan, 0, enc)


def test_three_seed_mean_matches_hand_average(dataset, plan, enc):
    res = run_seeded_ensemble(TrainConfig(steps=40), dataset, plan, 3, enc)
    hms = [r.rows[0]["hm"] for r in res.reports]
    assert [r.seeds for r in res.reports] == [[1, 1, 1], [2, 2, 2], [3, 3, 3]]
    assert res.summary["hm"]["mean"] == pytest.approx((hms[0] + hms[1] + hms[2]) / 3, abs=1e-12)


def test_parallel_replicas_match_serial(dataset, plan, enc):
    cfg = TrainConfig(steps=30)
    serial = run_seeded_ensemble(cfg, dataset, plan, 2, enc, threads=1)
    parallel = run_seeded_ensemble(cfg, dataset, plan, 2, enc, threads=2)
    assert serial.summary == parallel.summary
    assert [r.to_dict() for r in serial.reports] == [r.to_dict() for r in parallel.reports]


def test_thread_env_parsing(monkeypatch):
    monkeypatch.delenv("AAPL_LAB_THREADS", raising=False)
    assert replica_threads() == 1
    monkeypatch.setenv("AAPL_LAB_THREADS", "4")
    assert replica_threads() == 4
    for bad in ("0", "many"):
        monkeypatch.setenv("AAPL_LAB_THREADS", bad)
        with pytest.raises(ConfigError):
            replica_threads()

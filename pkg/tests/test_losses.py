import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from aapl_lab import tensor as T
from aapl_lab.encoders import class_embedding, encode_images
from aapl_lab.errors import ConfigError, ContractError
from aapl_lab.losses import (
    LossWeights,
    QuadDeltas,
    adtriplet,
    classification_loss,
    conventional_triplet_objective,
    total_loss,
    triplet,
)
from aapl_lab.prompt import ModelMode, predict_proba


def t(*xs):
    return T.Tensor(np.array(xs, dtype=float))


O = t(0, 0)


def test_triplet_examples():
    assert triplet(O, t(1, 0), t(2, 0), 0.2).item() == 0.0
    assert triplet(O, t(2, 0), t(1, 0), 0.2).item() == 1.2
    assert triplet(O, O, O, 0.2).item() == 0.2
    with pytest.raises(ContractError):
        triplet(O, O, O, -0.1)
    with pytest.raises(ContractError):
        triplet(O, t(1, 2, 3), O)


def test_adtriplet_examples(rng):
    assert adtriplet(QuadDeltas(O, O, O, O), 0.2).item() == 0.4
    # same augmentation coincident (1A = 2A, 1B = 2B), cross-augmentation pairs 1 apart
    assert adtriplet(QuadDeltas(O, t(1, 0), O, t(1, 0)), 0.2).item() == 0.0
    a1, b1, a2, b2 = (T.Tensor(rng.normal(size=6)) for _ in range(4))
    got = adtriplet(QuadDeltas(a1, b1, a2, b2)).item()
    assert got == triplet(a1, a2, b1).item() + triplet(b2, b1, a2).item()
    sym = adtriplet(QuadDeltas(a1, b1, a2, b2), anchors="symmetric").item()
    assert sym == triplet(b1, b2, a1).item() + triplet(a2, a1, b2).item()


def test_conventional_examples(rng):
    assert conventional_triplet_objective(QuadDeltas(O, O, O, O), 0.2).item() == 0.4
    # same class coincident (1A = 1B, 2A = 2B), cross-class pairs 1 apart
    assert conventional_triplet_objective(QuadDeltas(O, O, t(1, 0), t(1, 0)), 0.2).item() == 0.0
    for _ in range(50):
        a1, b1, a2, b2 = (T.Tensor(rng.normal(size=5)) for _ in range(4))
        conv = conventional_triplet_objective(QuadDeltas(a1, b1, a2, b2)).item()
        swapped = triplet(a1, b1, a2).item() + triplet(b2, a2, b1).item()
        assert conv == swapped


def test_quad_validation():
    with pytest.raises(ContractError):
        adtriplet(QuadDeltas(O, O, O, O, class_1=1, class_2=1))
    with pytest.raises(ContractError):
        adtriplet(QuadDeltas(O, O, O, O, kind_a="hue", kind_b="hue"))
    with pytest.raises(ContractError):
        adtriplet(QuadDeltas(O, O, O, t(1, 2, 3)))
    with pytest.raises(ConfigError):
        adtriplet(QuadDeltas(O, O, O, O), anchors="sideways")


def _tied(enc, ids):
    v = class_embedding(enc, ids[0])
    return type(enc)(**{**enc.__dict__, "class_table": {c: v.copy() for c in ids}})


def test_classification_loss_examples(params, enc, dataset):
    ids = dataset.class_ids[:4]
    f = encode_images(enc, dataset.images[0])[0]
    uniform = classification_loss(ModelMode.aapl, params, _tied(enc, ids), f, ids[1], ids)
    assert math.isclose(uniform.item(), math.log(4), abs_tol=1e-12)
    assert T.softmax_cross_entropy(T.Tensor([10.0, 0.0]), 0).item() < 1e-4

    ce = classification_loss(ModelMode.aapl, params, enc, f, ids[2], ids, tau=0.07)
    p = predict_proba(ModelMode.aapl, params, enc, dataset.images[0], ids, 0.07)
    assert math.isclose(ce.item(), -math.log(p[2]), rel_tol=1e-12)
    with pytest.raises(IndexError):
        classification_loss(ModelMode.aapl, params, enc, f, 99, ids)


def test_total_loss_examples():
    ce, adt = T.Tensor(1.0), T.Tensor(0.5)
    assert math.isclose(total_loss(ce, adt, LossWeights(0.2, 1.0)).item(), 1.1, abs_tol=1e-15)
    assert total_loss(ce, adt, LossWeights(0.0, 1.0)).item() == ce.item()
    assert total_loss(ce, adt, LossWeights(0.0, 2.5)).item() == 2.5
    assert total_loss(T.Tensor(0.0), T.Tensor(0.0), LossWeights(1.0, 1.0)).item() == 0.0


def test_loss_weight_validation():
    assert LossWeights() == LossWeights(0.2, 1.0, 0.2)
    with pytest.raises(ConfigError):
        LossWeights(-0.1, 1.0)
    with pytest.raises(ConfigError):
        LossWeights(0.0, 0.0)


def test_context_gets_no_adtriplet_gradient(params, enc, dataset):
    from aapl_lab.prompt import delta_meta_token

    net = params.metanet
    with T.GradientTape():
        deltas = [
            delta_meta_token(net, enc, dataset.images[i], k, 3).delta
            for i, k in ((0, "hue"), (0, "cutout"), (60, "hue"), (60, "cutout"))
        ]
        loss = adtriplet(QuadDeltas(*deltas), m=5.0)
    grads = T.backward(loss)
    assert params.context not in grads
    assert net.w1 in grads


tok = arrays(np.float64, 6, elements=st.floats(-5, 5))


@given(tok, tok, tok, tok, st.floats(0, 2))
def test_losses_are_non_negative(a, b, c, d, m):
    q = QuadDeltas(*(T.Tensor(x) for x in (a, b, c, d)))
    assert adtriplet(q, m).item() >= 0
    assert conventional_triplet_objective(q, m).item() >= 0
    assert triplet(q.d1a, q.d2a, q.d1b, m).item() >= 0


@given(tok, tok, tok, tok, arrays(np.float64, 6, elements=st.floats(-100, 100)))
def test_adtriplet_translation_invariant(a, b, c, d, shift):
    q = QuadDeltas(*(T.Tensor(x) for x in (a, b, c, d)))
    moved = QuadDeltas(*(T.Tensor(x + shift) for x in (a, b, c, d)))
    assert abs(adtriplet(q).item() - adtriplet(moved).item()) < 1e-9


@given(tok, tok, tok, tok, st.floats(0, 1))
def test_hinge_inactive_when_margins_hold(a, b, c, d, m):
    q = QuadDeltas(*(T.Tensor(x) for x in (a, b, c, d)))
    dist = lambda u, v: T.euclidean_distance(u, v).item()  # noqa: E731
    if dist(q.d1a, q.d2a) <= dist(q.d1a, q.d1b) - m - 1e-12 and dist(q.d2b, q.d1b) <= dist(q.d2b, q.d2a) - m - 1e-12:
        assert adtriplet(q, m).item() == 0.0

import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from matl import autodiff as ad
from matl import triplet
from matl.errors import ConfigError, DimensionError
from matl.triplet import (LossConfig, box_triplet_loss, class_triplet_loss, matl_loss, mine_triplets,
                          pairwise_distances, triplet_loss)


def T(x, grad=False):
    return ad.Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)


def brute_triplets(labels):
    n = len(labels)
    return sorted((a, p, q) for a, p, q in itertools.product(range(n), repeat=3)
                  if a != p and labels[a] == labels[p] and labels[a] != labels[q])


# ------------------------------------------------------------------ mining

def test_mine_examples():
    assert mine_triplets([0, 0, 1]).tolist() == [[0, 1, 2], [1, 0, 2]]
    assert len(mine_triplets([0, 1, 2])) == 0
    assert len(mine_triplets([0, 0, 1, 1])) == 8


@given(st.lists(st.integers(0, 3), max_size=9))
def test_batch_all_matches_enumeration(labels):
    got = [tuple(t) for t in mine_triplets(labels).tolist()]
    assert got == brute_triplets(labels)


@settings(max_examples=40)
@given(st.lists(st.integers(0, 2), min_size=2, max_size=8), st.integers(0, 1000))
def test_batch_hard_picks_extremes(labels, seed):
    y = np.array(labels)
    d = pairwise_distances(np.random.default_rng(seed).normal(size=(len(y), 2)))
    got = mine_triplets(y, "batch_hard", d)
    for a, p, q in got:
        pos = [j for j in range(len(y)) if j != a and y[j] == y[a]]
        neg = [j for j in range(len(y)) if y[j] != y[a]]
        assert d[a, p] == max(d[a, j] for j in pos)
        assert d[a, q] == min(d[a, j] for j in neg)
    anchors = [a for a in range(len(y)) if (y == y[a]).sum() > 1 and (y != y[a]).any()]
    assert sorted(got[:, 0].tolist()) == anchors


def test_batch_hard_requires_distances():
    with pytest.raises(Exception):
        mine_triplets([0, 0, 1], "batch_hard")


def test_loss_config_validation():
    with pytest.raises(ConfigError, match="margin"):
        LossConfig(margin=-1).validate()
    with pytest.raises(ConfigError, match="lambda"):
        LossConfig(lam=1.5).validate()


# ------------------------------------------------------------------- loss

def test_hinge_examples():
    cfg = LossConfig(margin=1.0)
    # d(a,p)=0, d(a,n)=2 with squared distance: n at sqrt(2)
    e = T([[0.0], [0.0], [np.sqrt(2.0)]])
    assert triplet_loss(e, [[0, 1, 2]], cfg).item() == pytest.approx(0.0)
    e = T([[0.0], [1.0], [-1.0]])
    assert triplet_loss(e, [[0, 1, 2]], LossConfig(margin=0.5)).item() == pytest.approx(0.5)


@given(st.floats(0, 5), st.integers(3, 7))
def test_collapsed_embeddings_give_margin(margin, n):
    e = T(np.ones((n, 4)))
    y = [i % 2 for i in range(n)]
    for distance in ("squared_euclidean", "euclidean"):
        cfg = LossConfig(margin=margin, distance=distance)
        assert class_triplet_loss(e, y, cfg).item() == margin


def test_empty_triplets_zero_with_zero_gradient():
    e = T(np.random.default_rng(0).normal(size=(3, 2)), grad=True)
    with ad.Tape() as tape:
        loss = class_triplet_loss(e, [0, 0, 0], LossConfig())
    ad.backward(tape, loss)
    assert loss.item() == 0.0
    assert not e.grad.any()


def test_class_loss_is_composition():
    e = T(np.random.default_rng(1).normal(size=(3, 4)))
    cfg = LossConfig()
    assert class_triplet_loss(e, [0, 0, 1], cfg).item() == triplet_loss(e, [[0, 1, 2], [1, 0, 2]], cfg).item()
    assert box_triplet_loss(e, [0, 0, 1], cfg).item() == class_triplet_loss(e, [0, 0, 1], cfg).item()


def test_label_length_mismatch():
    with pytest.raises(DimensionError):
        class_triplet_loss(T(np.zeros((3, 2))), [0, 1], LossConfig())
    with pytest.raises(DimensionError):
        matl_loss(T(np.zeros((3, 2))), [0, 1, 1], [0, 1], LossConfig())


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_loss_nonnegative_and_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, 9))
    x = rng.normal(size=(n, 3))
    y = rng.integers(0, 3, size=n)
    cfg = LossConfig(margin=float(rng.uniform(0, 2)))
    base = class_triplet_loss(T(x), y, cfg).item()
    perm = rng.permutation(n)
    assert base >= 0
    assert class_triplet_loss(T(x[perm]), y[perm], cfg).item() == pytest.approx(base, rel=1e-12, abs=1e-12)


# ------------------------------------------------------------------- matl

def _batch(seed=0, n=8):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(n, 4)), rng.integers(0, 3, size=n), rng.integers(0, 3, size=n)


def _value_and_grad(fn, x):
    e = T(x, grad=True)
    with ad.Tape() as tape:
        out = fn(e)
    ad.backward(tape, out)
    return out.item(), e.grad.copy()


@pytest.mark.parametrize("mining", ["batch_all", "batch_hard"])
def test_matl_reductions(mining):
    x, yc, yb = _batch(2)
    v0, g0 = _value_and_grad(lambda e: matl_loss(e, yc, yb, LossConfig(lam=0.0, mining=mining)), x)
    vc, gc = _value_and_grad(lambda e: class_triplet_loss(e, yc, LossConfig(mining=mining)), x)
    v1, g1 = _value_and_grad(lambda e: matl_loss(e, yc, yb, LossConfig(lam=1.0, mining=mining)), x)
    vb, gb = _value_and_grad(lambda e: box_triplet_loss(e, yb, LossConfig(mining=mining)), x)
    assert abs(v0 - vc) < 1e-6 and abs(v1 - vb) < 1e-6
    np.testing.assert_allclose(g0, gc, atol=1e-6)
    np.testing.assert_allclose(g1, gb, atol=1e-6)


def test_matl_weighting_arithmetic(monkeypatch):
    monkeypatch.setattr(triplet, "class_triplet_loss", lambda e, y, cfg: T(0.8))
    monkeypatch.setattr(triplet, "box_triplet_loss", lambda e, y, cfg: T(0.4))
    out = triplet.matl_loss(T(np.zeros((2, 2))), [0, 1], [0, 1], LossConfig(lam=0.25))
    assert out.item() == pytest.approx(0.7)


@pytest.mark.parametrize("seed", range(5))
def test_matl_linear_in_lambda(seed):
    x, yc, yb = _batch(seed)
    e = T(x)
    value = lambda lam: matl_loss(e, yc, yb, LossConfig(lam=lam)).item()  # noqa: E731
    v0, v1 = value(0.0), value(1.0)
    for lam in (0.0, 0.25, 0.5, 0.75, 1.0):
        assert abs(value(lam) - ((1 - lam) * v0 + lam * v1)) < 1e-6

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from crease3d import losses
from crease3d.errors import (
    DegenerateEmbedding,
    InvalidConfig,
    InvalidTarget,
    ShapeMismatch,
)


# ---------------------------------------------------------------------------
# cosine distance / triplet hinge
# ---------------------------------------------------------------------------

def test_cosine_distance_values():
    v = np.array([0.3, -1.2, 4.0])
    assert losses.cosine_distance(v, v) == pytest.approx(0.0, abs=1e-12)
    assert losses.cosine_distance([1, 0], [0, 1]) == pytest.approx(1.0)
    a = np.array([1.0, 1.0]) / math.sqrt(2)
    assert losses.cosine_distance(a, [1.0, 0.0]) == pytest.approx(
        1 - 1 / math.sqrt(2), abs=1e-12)


def test_cosine_distance_zero_norm():
    with pytest.raises(DegenerateEmbedding):
        losses.cosine_distance([0.0, 0.0], [1.0, 0.0])


def test_triplet_loss_values():
    assert losses.triplet_loss(0.2, 0.9, 0.5) == 0.0
    assert losses.triplet_loss(0.8, 0.4, 0.5) == pytest.approx(0.9)
    assert losses.triplet_loss(0.37, 0.37, 0.5) == pytest.approx(0.5)


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 2), st.floats(0, 2), st.floats(0, 2), st.floats(0.01, 1.5))
def test_triplet_loss_monotone(d_ap, d_ap2, d_an, m):
    lo, hi = sorted([d_ap, d_ap2])
    assert losses.triplet_loss(lo, d_an, m) <= losses.triplet_loss(hi, d_an, m)
    assert losses.triplet_loss(d_an, lo, m) >= losses.triplet_loss(d_an, hi, m)


# ---------------------------------------------------------------------------
# mining
# ---------------------------------------------------------------------------

def brute_force_triplets(embeddings, labels, margin):
    """O(n^3) reference: every label-valid triplet with positive hinge."""
    n = len(labels)
    out = []
    for a in range(n):
        for p in range(n):
            if p == a or labels[p] != labels[a]:
                continue
            for q in range(n):
                if labels[q] == labels[a]:
                    continue
                d_ap = losses.cosine_distance(embeddings[a], embeddings[p])
                d_an = losses.cosine_distance(embeddings[a], embeddings[q])
                if losses.triplet_loss(d_ap, d_an, margin) > 0:
                    out.append(losses.Triplet(a, p, q))
    return out


def test_mining_orthogonal_classes_empty():
    emb = np.array([[1, 0], [1, 0], [0, 1], [0, 1.0]])
    got = losses.mine_triplets(emb, [0, 0, 1, 1], losses.TripletConfig())
    assert got == []


def test_mining_identical_embeddings_count_eight():
    emb = np.ones((4, 3))
    cfg = losses.TripletConfig()
    got = losses.mine_triplets(emb, [0, 0, 1, 1], cfg)
    assert len(got) == 8
    assert got == brute_force_triplets(emb, [0, 0, 1, 1], cfg.margin)
    # each mined triplet hinges at exactly the margin
    for t in got:
        d_ap = losses.cosine_distance(emb[t.anchor_idx], emb[t.positive_idx])
        d_an = losses.cosine_distance(emb[t.anchor_idx], emb[t.negative_idx])
        assert losses.triplet_loss(d_ap, d_an, cfg.margin) == pytest.approx(cfg.margin)


def test_mining_matches_brute_force_random():
    cfg = losses.TripletConfig()
    rng = np.random.default_rng(11)
    for _ in range(20):
        n = int(rng.integers(4, 16))
        emb = rng.normal(size=(n, 5))
        labels = rng.integers(0, 3, size=n)
        got = losses.mine_triplets(emb, labels, cfg)
        assert got == brute_force_triplets(emb, labels, cfg.margin)
        assert got == sorted(got)  # canonical (anchor, positive, negative) order


def test_mining_batch_hard():
    rng = np.random.default_rng(12)
    emb = rng.normal(size=(10, 4))
    labels = np.array([0, 0, 0, 1, 1, 1, 2, 2, 2, 2])
    cfg = losses.TripletConfig(mining_policy="batch-hard")
    got = losses.mine_triplets(emb, labels, cfg)
    dist = losses.pairwise_cosine_distance(emb)
    assert len(got) == 10
    for t in got:
        a = t.anchor_idx
        pos = [i for i in range(10) if labels[i] == labels[a] and i != a]
        neg = [i for i in range(10) if labels[i] != labels[a]]
        assert t.positive_idx == max(pos, key=lambda i: (dist[a, i], -i))
        assert t.negative_idx == min(neg, key=lambda i: (dist[a, i], i))


def test_mining_single_class_yields_nothing():
    emb = np.random.default_rng(1).normal(size=(4, 3))
    assert losses.mine_triplets(emb, [5, 5, 5, 5], losses.TripletConfig()) == []


def test_triplet_config_validation():
    with pytest.raises(InvalidConfig):
        losses.TripletConfig(margin=0.0)
    with pytest.raises(InvalidConfig):
        losses.TripletConfig(margin=2.0, margin_max=1.5)
    with pytest.raises(InvalidConfig):
        losses.TripletConfig(mining_policy="hardest")
    with pytest.raises(InvalidConfig):
        losses.TripletConfig(simultaneous_triplets=0)


def test_margin_schedule():
    const = losses.TripletConfig()
    assert const.margin_at(0.0) == const.margin_at(1.0) == 0.5
    ramp = losses.TripletConfig(margin_schedule="linear-ramp")
    assert ramp.margin_at(0.0) == pytest.approx(0.5)
    assert ramp.margin_at(0.5) == pytest.approx(1.0)
    assert ramp.margin_at(1.0) == pytest.approx(1.5)
    assert ramp.margin_at(2.0) == pytest.approx(1.5)  # clamped


def test_chunked_triplet_loss_mean_of_chunk_means():
    emb = torch.tensor([[1.0, 0.0], [0.9, 0.1], [0.0, 1.0], [0.1, 1.0],
                        [0.5, 0.5]], requires_grad=True)
    trip = [losses.Triplet(0, 1, 2), losses.Triplet(0, 1, 3),
            losses.Triplet(2, 3, 0)]
    got = losses.chunked_triplet_loss(emb, trip, margin=0.5, chunk_size=2)
    unit = emb.detach().numpy()
    unit = unit / np.linalg.norm(unit, axis=1, keepdims=True)
    per = []
    for t in trip:
        d_ap = 1 - unit[t.anchor_idx] @ unit[t.positive_idx]
        d_an = 1 - unit[t.anchor_idx] @ unit[t.negative_idx]
        per.append(max(0.0, d_ap - d_an + 0.5))
    expect = np.mean([np.mean(per[:2]), np.mean(per[2:])])
    assert got.detach().item() == pytest.approx(expect, abs=1e-6)
    got.backward()  # differentiable path exists
    assert emb.grad is not None


# ---------------------------------------------------------------------------
# arcface
# ---------------------------------------------------------------------------

def _unit_columns(rng, dim, c):
    W = rng.normal(size=(dim, c))
    return W / np.linalg.norm(W, axis=0)


def test_arcface_margin_zero_scale_one_is_cosine():
    rng = np.random.default_rng(21)
    W = _unit_columns(rng, 6, 4)
    e = rng.normal(size=6)
    e /= np.linalg.norm(e)
    cfg = losses.ArcConfig(margin=0.0, scale=1.0, num_classes=4)
    got = losses.arcface_logits(e, W, target=2, cfg=cfg)
    np.testing.assert_allclose(got, e @ W, atol=1e-6)


def test_arcface_aligned_target_value():
    cfg = losses.ArcConfig(margin=0.5, scale=30.0, num_classes=2)
    e = np.array([1.0, 0.0])
    W = np.stack([e, np.array([0.0, 1.0])], axis=1)
    got = losses.arcface_logits(e, W, target=0, cfg=cfg)
    # clamping caps cos at 1 - 1e-7, so theta_t is ~4.5e-4 instead of 0
    clamped = 30.0 * math.cos(math.acos(1.0 - 1e-7) + 0.5)
    assert got[0] == pytest.approx(clamped, abs=1e-9)
    assert got[0] == pytest.approx(30.0 * math.cos(0.5), abs=0.01)
    assert got[1] == pytest.approx(0.0, abs=1e-5)


def test_arcface_two_class_hand_oracle():
    # angles 30 deg (target) and 80 deg, computed with scalar trig only
    theta0, theta1 = math.radians(30), math.radians(80)
    e = np.array([1.0, 0.0])
    W = np.stack([[math.cos(theta0), math.sin(theta0)],
                  [math.cos(theta1), math.sin(theta1)]], axis=1)
    cfg = losses.ArcConfig(margin=0.5, scale=30.0, num_classes=2)
    logits = losses.arcface_logits(e, W, target=0, cfg=cfg)
    l0 = 30.0 * math.cos(theta0 + 0.5)
    l1 = 30.0 * math.cos(theta1)
    assert logits[0] == pytest.approx(l0, abs=1e-9)
    assert logits[1] == pytest.approx(l1, abs=1e-9)
    z = max(l0, l1)
    ce_hand = -(l0 - z) + math.log(math.exp(l0 - z) + math.exp(l1 - z))
    assert losses.softmax_cross_entropy(logits, 0) == pytest.approx(ce_hand,
                                                                    abs=1e-12)


def test_arcface_pi_guard_linearization():
    cfg = losses.ArcConfig(margin=0.5, scale=2.0, num_classes=2)
    e = np.array([1.0, 0.0])
    # target column almost opposite: theta_t + m > pi triggers the fallback
    W = np.stack([[-1.0, 1e-9], [0.0, 1.0]], axis=1)
    W /= np.linalg.norm(W, axis=0)
    got = losses.arcface_logits(e, W, target=0, cfg=cfg)
    cos_t = np.clip(e @ (W / np.linalg.norm(W, axis=0)), -1 + 1e-7, 1 - 1e-7)[0]
    assert got[0] == pytest.approx(2.0 * (cos_t - 0.5 * math.sin(0.5)), abs=1e-9)


def test_arcface_errors():
    cfg = losses.ArcConfig(num_classes=3)
    e = np.array([1.0, 0.0])
    W = np.eye(2)
    with pytest.raises(ShapeMismatch):
        losses.arcface_logits(e, W, 0, cfg)  # 2 columns vs 3 classes
    cfg2 = losses.ArcConfig(num_classes=2)
    with pytest.raises(InvalidTarget):
        losses.arcface_logits(e, W, 5, cfg2)
    with pytest.raises(ShapeMismatch):
        losses.arcface_logits(np.zeros(3), W, 0, cfg2)


def test_arc_config_validation():
    with pytest.raises(InvalidConfig):
        losses.ArcConfig(margin=-0.1)
    with pytest.raises(InvalidConfig):
        losses.ArcConfig(margin=math.pi / 2)
    with pytest.raises(InvalidConfig):
        losses.ArcConfig(scale=0.0)
    with pytest.raises(InvalidConfig):
        losses.ArcConfig(num_classes=1)


@settings(max_examples=100, deadline=None)
@given(st.floats(0.01, math.pi - 0.51), st.integers(0, 2**31 - 1))
def test_arcface_margin_shrinks_target_logit(theta, seed):
    # for theta in (0, pi - m) the margined logit is strictly below plain
    e = np.array([1.0, 0.0])
    W = np.stack([[math.cos(theta), math.sin(theta)], [0.0, 1.0]], axis=1)
    with_m = losses.arcface_logits(
        e, W, 0, losses.ArcConfig(margin=0.5, scale=30.0, num_classes=2))
    without = losses.arcface_logits(
        e, W, 0, losses.ArcConfig(margin=0.0, scale=30.0, num_classes=2))
    assert with_m[0] < without[0]


def test_softmax_cross_entropy_values():
    assert losses.softmax_cross_entropy(np.zeros(7), 3) == pytest.approx(
        math.log(7), abs=1e-12)
    assert losses.softmax_cross_entropy(np.array([51.0, 1.0, 1.0]), 0) < 1e-20
    assert losses.softmax_cross_entropy(np.array([1.0, 2.0]), 0) == pytest.approx(
        math.log(1 + math.e), abs=1e-12)


def test_softmax_cross_entropy_huge_logits_stable():
    val = losses.softmax_cross_entropy(np.array([1e308, 1e308 / 2]), 1)
    assert np.isfinite(val)


def test_classifier_matches_numpy_reference():
    rng = np.random.default_rng(31)
    cfg = losses.ArcConfig(margin=0.5, scale=30.0, num_classes=5)
    clf = losses.ArcFaceClassifier(8, cfg, seed=1).double()
    emb = rng.normal(size=(6, 8))
    emb /= np.linalg.norm(emb, axis=1, keepdims=True)
    targets = rng.integers(0, 5, size=6)
    logits = clf(torch.from_numpy(emb), torch.from_numpy(targets)).detach().numpy()
    W = clf.weight.detach().numpy().T  # columns per class
    for i in range(6):
        expect = losses.arcface_logits(emb[i], W, int(targets[i]), cfg)
        np.testing.assert_allclose(logits[i], expect, atol=1e-9)


def test_classifier_rejects_bad_targets():
    clf = losses.ArcFaceClassifier(4, losses.ArcConfig(num_classes=3), seed=0)
    emb = torch.randn(2, 4)
    with pytest.raises(InvalidTarget):
        clf(emb, torch.tensor([0, 3]))
    with pytest.raises(ShapeMismatch):
        clf(torch.randn(2, 5), torch.tensor([0, 1]))


def test_classifier_seeding():
    a = losses.ArcFaceClassifier(4, losses.ArcConfig(num_classes=3), seed=2)
    b = losses.ArcFaceClassifier(4, losses.ArcConfig(num_classes=3), seed=2)
    assert torch.equal(a.weight, b.weight)

import math

import numpy as np
import pytest

import mtct.engine as en
from mtct.engine import Tape, Tensor, backward
from mtct.errors import ContractError, DimensionError
from mtct.gradcheck import grad_check
from mtct.losses import (LabelBatch, TSTEConfig, multitask_softmax_loss,
                         stage2_combined_loss, triplet_ranking_loss, tste_loss)


# -- independent scalar-arithmetic oracles (pure python, no engine) ----------

def oracle_multitask(logits_list, labels, mask):
    n_bs = len(labels)
    total = 0.0
    for i in range(n_bs):
        for j, lg in enumerate(logits_list):
            if not mask[i][j]:
                continue
            row = lg[i]
            m = max(row)
            denom = sum(math.exp(v - m) for v in row)
            p = math.exp(row[labels[i][j]] - m) / denom
            total += -math.log(p)
    return total / n_bs


def oracle_tste(f_t, f_ps, f_ns, alpha):
    beta = -(1.0 + alpha) / 2.0
    total = 0.0
    for a, p, n in zip(f_t, f_ps, f_ns):
        dp2 = sum((x - y) ** 2 for x, y in zip(a, p))
        dn2 = sum((x - y) ** 2 for x, y in zip(a, n))
        up = (1.0 + dp2 / alpha) ** beta
        un = (1.0 + dn2 / alpha) ** beta
        total += -math.log(up / (up + un))
    return total / len(f_t)


def oracle_ranking(f_t, f_ps, f_ns, margin):
    total = 0.0
    for a, p, n in zip(f_t, f_ps, f_ns):
        dp2 = sum((x - y) ** 2 for x, y in zip(a, p))
        dn2 = sum((x - y) ** 2 for x, y in zip(a, n))
        total += max(0.0, dp2 - dn2 + margin)
    return total / len(f_t)


# -- multitask softmax --------------------------------------------------------

def test_uniform_logits_loss_is_sum_of_log_cardinalities():
    labels = LabelBatch(np.zeros((3, 2), int), np.ones((3, 2), bool))
    loss = multitask_softmax_loss([Tensor(np.zeros((3, 2))), Tensor(np.zeros((3, 4)))],
                                  labels)
    assert abs(loss.item() - (math.log(2) + math.log(4))) < 1e-12


def test_saturated_softmax_loss_near_zero():
    lg = np.full((2, 3), -30.0)
    lg[:, 1] = 30.0
    labels = LabelBatch(np.full((2, 1), 1), np.ones((2, 1), bool))
    assert multitask_softmax_loss([Tensor(lg)], labels).item() < 1e-9


def test_multitask_matches_scalar_oracle():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(1, 5))
        cards = [int(rng.integers(2, 6)) for _ in range(2)]
        logits = [rng.normal(size=(n, c)) for c in cards]
        labels = np.stack([rng.integers(0, c, size=n) for c in cards], axis=1)
        mask = rng.uniform(size=(n, 2)) < 0.8
        if not mask.any():
            mask[0, 0] = True
        got = multitask_softmax_loss([Tensor(l) for l in logits],
                                     LabelBatch(labels, mask)).item()
        want = oracle_multitask([l.tolist() for l in logits], labels.tolist(),
                                mask.tolist())
        assert abs(got - want) < 1e-10


def test_multitask_contract_errors():
    labels = LabelBatch(np.array([[5]]), np.ones((1, 1), bool))
    with pytest.raises(ContractError):
        multitask_softmax_loss([Tensor(np.zeros((1, 3)))], labels)
    all_masked = LabelBatch(np.zeros((2, 1), int), np.zeros((2, 1), bool))
    with pytest.raises(ContractError):
        multitask_softmax_loss([Tensor(np.zeros((2, 3)))], all_masked)


def test_logit_shift_invariance_per_attribute():
    rng = np.random.default_rng(1)
    logits = [rng.normal(size=(4, 3)), rng.normal(size=(4, 5))]
    labels = LabelBatch(np.stack([rng.integers(0, 3, 4), rng.integers(0, 5, 4)], axis=1),
                        np.ones((4, 2), bool))
    base = multitask_softmax_loss([Tensor(l) for l in logits], labels).item()
    shifted = multitask_softmax_loss(
        [Tensor(logits[0] + 7.5), Tensor(logits[1])], labels).item()
    assert abs(base - shifted) < 1e-10


def test_masked_attribute_contributes_zero_loss_and_gradient():
    rng = np.random.default_rng(2)
    l0, l1 = rng.normal(size=(2, 3)), rng.normal(size=(2, 4))
    full = LabelBatch(np.array([[1, 2], [0, 3]]), np.ones((2, 2), bool))
    partial = LabelBatch(np.array([[1, 2], [0, 3]]),
                         np.array([[True, False], [True, False]]))
    only_first = multitask_softmax_loss(
        [Tensor(l0)], LabelBatch(full.labels[:, :1], full.mask[:, :1])).item()
    assert abs(multitask_softmax_loss([Tensor(l0), Tensor(l1)], partial).item()
               - only_first) < 1e-12
    t0 = Tensor(l0, requires_grad=True)
    t1 = Tensor(l1, requires_grad=True)
    with Tape():
        backward(multitask_softmax_loss([t0, t1], partial))
    assert t0.grad is not None and np.abs(t0.grad).max() > 0
    assert t1.grad is None or np.allclose(t1.grad, 0.0)


# -- t-STE ---------------------------------------------------------------------

def test_tste_equal_distances_is_ln2():
    f_t = Tensor(np.zeros((2, 3)))
    f_o = Tensor(np.ones((2, 3)))
    loss = tste_loss(f_t, f_o, f_o, TSTEConfig(alpha=2.0))
    assert abs(loss.item() - math.log(2)) < 1e-12


def test_tste_alpha1_known_value():
    # d_p^2 = 0, d_n^2 = 1, alpha = 1 -> p = 2/3
    f_t = Tensor(np.zeros((1, 1)))
    f_ps = Tensor(np.zeros((1, 1)))
    f_ns = Tensor(np.ones((1, 1)))
    loss = tste_loss(f_t, f_ps, f_ns, TSTEConfig(alpha=1.0))
    assert abs(loss.item() - (-math.log(2.0 / 3.0))) < 1e-12


def test_tste_vanishes_as_negative_distance_grows():
    f_t = Tensor(np.zeros((1, 1)))
    f_ps = Tensor(np.ones((1, 1)) * 0.5)
    prev = math.inf
    for dn in (1.0, 3.0, 10.0, 100.0, 1000.0):
        cur = tste_loss(f_t, f_ps, Tensor(np.full((1, 1), dn))).item()
        assert cur < prev
        prev = cur
    assert prev < 1e-5


def test_tste_matches_scalar_oracle():
    rng = np.random.default_rng(3)
    for _ in range(100):
        t = int(rng.integers(1, 6))
        d = int(rng.integers(1, 5))
        alpha = float(rng.uniform(0.3, 4.0))
        f_t, f_ps, f_ns = (rng.normal(size=(t, d)) for _ in range(3))
        got = tste_loss(Tensor(f_t), Tensor(f_ps), Tensor(f_ns),
                        TSTEConfig(alpha)).item()
        want = oracle_tste(f_t.tolist(), f_ps.tolist(), f_ns.tolist(), alpha)
        assert abs(got - want) < 1e-10


def test_tste_monotone_in_squared_distances():
    base = tste_loss(Tensor(np.zeros((1, 1))), Tensor([[1.0]]), Tensor([[2.0]])).item()
    worse_p = tste_loss(Tensor(np.zeros((1, 1))), Tensor([[1.5]]), Tensor([[2.0]])).item()
    better_n = tste_loss(Tensor(np.zeros((1, 1))), Tensor([[1.0]]), Tensor([[3.0]])).item()
    assert worse_p > base > better_n > 0.0


def test_tste_config_contracts():
    with pytest.raises(ContractError):
        TSTEConfig(alpha=0.0)
    assert TSTEConfig(alpha=3.0).beta == -2.0
    with pytest.raises(DimensionError):
        tste_loss(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4))),
                  Tensor(np.zeros((2, 3))))


# -- triplet ranking -------------------------------------------------------------

def test_ranking_satisfied_with_slack_is_zero():
    f_t = Tensor(np.zeros((1, 2)))
    f_ps = Tensor(np.zeros((1, 2)))
    f_ns = Tensor(np.array([[1.0, 1.0]]))  # d_n^2 = 2
    assert triplet_ranking_loss(f_t, f_ps, f_ns, margin=1.0).item() == 0.0


def test_ranking_equal_distances_equals_margin():
    f_t = Tensor(np.zeros((3, 2)))
    f_o = Tensor(np.ones((3, 2)))
    assert abs(triplet_ranking_loss(f_t, f_o, f_o, margin=0.7).item() - 0.7) < 1e-12


def test_ranking_matches_scalar_oracle():
    rng = np.random.default_rng(4)
    for _ in range(100):
        t, d = int(rng.integers(1, 6)), int(rng.integers(1, 5))
        f_t, f_ps, f_ns = (rng.normal(size=(t, d)) for _ in range(3))
        got = triplet_ranking_loss(Tensor(f_t), Tensor(f_ps), Tensor(f_ns), 1.0).item()
        want = oracle_ranking(f_t.tolist(), f_ps.tolist(), f_ns.tolist(), 1.0)
        assert abs(got - want) < 1e-10


def test_ranking_margin_contract():
    z = Tensor(np.zeros((1, 2)))
    with pytest.raises(ContractError):
        triplet_ranking_loss(z, z, z, margin=0.0)


# -- stage-2 combination ----------------------------------------------------------

def _scalar(v):
    return en.mean(Tensor(np.array([v])))


def test_combined_zero_weights_is_target_term():
    loss = stage2_combined_loss(_scalar(1.25), _scalar(9.0), _scalar(7.0), (0.0, 0.0))
    assert loss.item() == 1.25


def test_combined_additivity():
    loss = stage2_combined_loss(_scalar(1.0), _scalar(2.0), _scalar(0.5), (1.0, 1.0))
    assert abs(loss.item() - 3.5) < 1e-12


def test_combined_negative_weights_rejected():
    with pytest.raises(ContractError):
        stage2_combined_loss(_scalar(1.0), _scalar(1.0), _scalar(1.0), (-1.0, 1.0))


def test_combined_gradient_is_weighted_sum():
    rng = np.random.default_rng(5)
    feats = rng.normal(size=(2, 3))
    f_ps = Tensor(rng.normal(size=(2, 3)))
    f_ns = Tensor(rng.normal(size=(2, 3)))
    labels = LabelBatch(np.array([[0], [1]]), np.ones((2, 1), bool))
    lg_w = Tensor(rng.normal(size=(3, 2)))

    def f(p):
        t_sm = multitask_softmax_loss([en.matmul(p, lg_w)], labels)
        s_sm = en.mean(en.elementwise_mul(p, p))
        trip = tste_loss(p, f_ps, f_ns)
        return stage2_combined_loss(t_sm, s_sm, trip, (0.4, 2.0))

    assert grad_check(f, Tensor(feats), h=1e-5) < 1e-4

"""Gradient-check suite covering every primitive op and every loss."""

from __future__ import annotations

import numpy as np

from . import engine as en
from .engine import PRIMITIVE_OPS, Tensor
from .gradcheck import grad_check
from .losses import (LabelBatch, TSTEConfig, multitask_softmax_loss,
                     stage2_combined_loss, triplet_ranking_loss, tste_loss)

TOLERANCE = 1e-4
N_SEEDS = 20


def _away_from_zero(x, margin=0.05):
    return np.where(np.abs(x) < margin, np.sign(x) * margin + (x == 0) * margin, x)


def _op_cases(rng):
    """One scalar-valued closure per primitive op, differentiated at `point`."""
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4, 2))
    img = rng.normal(size=(1, 2, 6, 6))
    ker = rng.normal(size=(3, 2, 3, 3))
    pos = np.abs(rng.normal(size=(3, 4))) + 0.5
    flat_w = rng.normal(size=(1, 72))
    bias = rng.normal(size=2)
    return {
        "matmul": (lambda p: en.mean(en.matmul(p, Tensor(b))), a),
        "conv2d": (lambda p: en.mean(en.conv2d(p, Tensor(ker), stride=2, pad=1)), img),
        "relu": (lambda p: en.mean(en.relu(p)), _away_from_zero(rng.normal(size=(3, 4)))),
        "maxpool2d": (lambda p: en.mean(en.maxpool2d(p, 2, 2)), img),
        "global_avg_pool": (lambda p: en.mean(en.global_avg_pool(p)), img),
        "add": (lambda p: en.mean(en.add(p, Tensor(bias))), rng.normal(size=(3, 2))),
        "sub": (lambda p: en.mean(en.sub(p, Tensor(a))), rng.normal(size=(3, 4))),
        "mul_scalar": (lambda p: en.mean(en.mul_scalar(p, 2.5)), a),
        "elementwise_mul": (lambda p: en.mean(en.elementwise_mul(p, Tensor(a))),
                            rng.normal(size=(3, 4))),
        "log": (lambda p: en.mean(en.log(p)), pos),
        "exp": (lambda p: en.mean(en.exp(p)), a),
        "sum": (lambda p: en.mean(en.tsum(p, axis=1)), a),
        "mean": (lambda p: en.mean(p), a),
        "softmax_rows": (lambda p: en.mean(en.log(en.softmax_rows(p))), a),
        "flatten": (lambda p: en.mean(en.elementwise_mul(
            en.flatten(p), Tensor(flat_w))), img),
    }


def _loss_cases(rng):
    feats = rng.normal(size=(3, 5))
    f_ps = rng.normal(size=(3, 5))
    f_ns = rng.normal(size=(3, 5))
    labels = LabelBatch(rng.integers(0, 3, size=(4, 2)),
                        np.array([[True, True], [True, False],
                                  [False, True], [True, True]]))
    other = rng.normal(size=(4, 3))
    c_ps = rng.normal(size=(4, 3))
    c_ns = rng.normal(size=(4, 3))

    def mt(p):
        return multitask_softmax_loss([p, Tensor(other)], labels)

    def combined(p):
        t_sm = multitask_softmax_loss([p, Tensor(other)], labels)
        trip = tste_loss(p, Tensor(c_ps), Tensor(c_ns))
        return stage2_combined_loss(t_sm, en.mean(en.elementwise_mul(p, p)), trip,
                                    (0.7, 1.3))

    return {
        "multitask_softmax_loss": (mt, rng.normal(size=(4, 3))),
        "tste_loss": (lambda p: tste_loss(p, Tensor(f_ps), Tensor(f_ns),
                                          TSTEConfig(alpha=1.5)), feats),
        "triplet_ranking_loss": (lambda p: triplet_ranking_loss(
            p, Tensor(f_ps), Tensor(f_ns), margin=1.0), feats),
        "stage2_combined_loss": (combined, rng.normal(size=(4, 3))),
    }


def run_gradcheck_suite(n_seeds: int = N_SEEDS, inject_bug: bool = False
                        ) -> list[tuple[str, float, bool]]:
    """Returns (name, max relative error, passed) for each op and loss.

    The census asserts every primitive has a case. ``inject_bug`` doubles the
    analytic gradient of one op to demonstrate failure detection.
    """
    names = set(_op_cases(np.random.default_rng(0))) | set(_loss_cases(np.random.default_rng(0)))
    missing = set(PRIMITIVE_OPS) - names
    assert not missing, f"gradcheck census incomplete, missing ops: {missing}"

    results = []
    for name in sorted(names):
        worst = 0.0
        for seed in range(n_seeds):
            rng = np.random.default_rng((1234, seed))
            cases = {**_op_cases(rng), **_loss_cases(rng)}
            f, point = cases[name]
            scale = 2.0 if (inject_bug and name == "matmul") else 1.0
            worst = max(worst, grad_check(f, Tensor(point), _scale_analytic=scale))
        results.append((name, worst, worst < TOLERANCE))
    return results

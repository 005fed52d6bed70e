"""Training objectives.

The triplet objective follows the Student-kernel formulation: as printed it is
a sum of log-probabilities (a maximization target), so we minimize its
negation and report the nonnegative per-triplet mean. Squared Euclidean
distances over the raw flattened conv5 features, no normalization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine as en
from .engine import Tensor
from .errors import ContractError, DimensionError

_LOG_EPS = 1e-300  # guards log against exact-zero probabilities only


@dataclass(frozen=True)
class TSTEConfig:
    """Student-kernel degrees of freedom; beta is always derived from alpha."""

    alpha: float = 1.0

    def __post_init__(self):
        if self.alpha <= 0:
            raise ContractError(f"alpha must be positive, got {self.alpha}")

    @property
    def beta(self) -> float:
        return -(1.0 + self.alpha) / 2.0


@dataclass
class LabelBatch:
    """Per-attribute integer labels with a presence mask.

    labels: (batch, n_attr) ints, value in [0, |Z_j|) where mask is True.
    mask:   (batch, n_attr) bools, True iff the attribute is annotated.
    """

    labels: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.labels.shape != self.mask.shape or self.labels.ndim != 2:
            raise ContractError(
                f"labels/mask must be matching 2-d arrays, got {self.labels.shape} vs {self.mask.shape}")

    @property
    def batch_size(self) -> int:
        return self.labels.shape[0]


def multitask_softmax_loss(logits: list[Tensor], labels: LabelBatch) -> Tensor:
    """Mean over the batch of summed per-attribute cross-entropies.

    Attributes absent per the mask contribute zero loss and zero gradient.
    """
    n_attr = len(logits)
    if labels.labels.shape[1] != n_attr:
        raise ContractError(
            f"label batch has {labels.labels.shape[1]} attributes, logits have {n_attr}")
    n_bs = labels.batch_size
    if not labels.mask.any():
        raise ContractError("all labels masked: loss undefined")

    total: Tensor | None = None
    for j, lg in enumerate(logits):
        if lg.shape[0] != n_bs:
            raise DimensionError(f"logits[{j}] batch {lg.shape[0]} != labels batch {n_bs}")
        card = lg.shape[1]
        present = labels.mask[:, j]
        vals = labels.labels[:, j]
        if present.any() and ((vals[present] < 0) | (vals[present] >= card)).any():
            raise ContractError(f"attribute {j}: label out of range [0, {card})")
        if not present.any():
            continue
        pick = np.zeros((n_bs, card))
        pick[present, vals[present]] = 1.0
        p = en.softmax_rows(lg)
        lp = en.log(en.add(p, Tensor(np.full_like(p.data, _LOG_EPS))))
        term = en.mul_scalar(en.tsum(en.elementwise_mul(lp, Tensor(pick))), -1.0 / n_bs)
        total = term if total is None else en.add(total, term)
    return total


def _sq_dists(f_a: Tensor, f_b: Tensor) -> Tensor:
    if f_a.shape != f_b.shape or f_a.data.ndim != 2:
        raise DimensionError(f"feature shapes must match and be 2-d: {f_a.shape} vs {f_b.shape}")
    d = en.sub(f_a, f_b)
    return en.tsum(en.elementwise_mul(d, d), axis=1)


def tste_loss(f_t: Tensor, f_ps: Tensor, f_ns: Tensor, cfg: TSTEConfig = TSTEConfig()) -> Tensor:
    """Mean negated log-probability that the anchor ranks its positive first.

    Per triplet: -log[ u_p^beta / (u_p^beta + u_n^beta) ] with
    u = 1 + d^2/alpha and beta = -(1+alpha)/2.
    """
    if f_t.shape[0] < 1:
        raise ContractError("need at least one triplet")
    d2p = _sq_dists(f_t, f_ps)
    d2n = _sq_dists(f_t, f_ns)
    ones = Tensor(np.ones(d2p.shape))
    log_up = en.log(en.add(en.mul_scalar(d2p, 1.0 / cfg.alpha), ones))
    log_un = en.log(en.add(en.mul_scalar(d2n, 1.0 / cfg.alpha), ones))
    a = en.exp(en.mul_scalar(log_up, cfg.beta))
    b = en.exp(en.mul_scalar(log_un, cfg.beta))
    per_triplet = en.sub(en.log(en.add(a, b)), en.mul_scalar(log_up, cfg.beta))
    return en.mean(per_triplet)


def triplet_ranking_loss(f_t: Tensor, f_ps: Tensor, f_ns: Tensor, margin: float = 1.0) -> Tensor:
    """Hinge baseline: mean of max(0, d_p^2 - d_n^2 + margin)."""
    if margin <= 0:
        raise ContractError(f"margin must be positive, got {margin}")
    d2p = _sq_dists(f_t, f_ps)
    d2n = _sq_dists(f_t, f_ns)
    m = Tensor(np.full(d2p.shape, float(margin)))
    return en.mean(en.relu(en.add(en.sub(d2p, d2n), m)))


def stage2_combined_loss(target_softmax: Tensor, source_softmax: Tensor, tste: Tensor,
                         weights: tuple[float, float] = (1.0, 1.0)) -> Tensor:
    """target softmax + lambda_src * source softmax + lambda_tste * triplet term."""
    lam_src, lam_tste = weights
    if lam_src < 0 or lam_tste < 0:
        raise ContractError(f"stage-2 weights must be nonnegative, got {weights}")
    for name, t in (("target_softmax", target_softmax), ("source_softmax", source_softmax),
                    ("tste", tste)):
        if t.data.size != 1:
            raise ContractError(f"{name} must be scalar, got shape {t.shape}")
    return en.add(target_softmax,
                  en.add(en.mul_scalar(source_softmax, lam_src), en.mul_scalar(tste, lam_tste)))

"""Optimizer and training regimes.

Regimes: NOADPT (source only), UD (united domains), FTT (source pre-train then
FC fine-tune on target), END2END (joint single-phase counterpart), MTCT
(stage-1 source learning, then stage-2 three-stream transfer with the freeze
plan). Every run is deterministic in (regime, seed, data, hyperparameters).
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import engine as en
from .engine import Tape, Tensor
from .errors import ContractError
from .data import Dataset, Sample, sample_triplets
from .losses import (LabelBatch, TSTEConfig, multitask_softmax_loss,
                     stage2_combined_loss, triplet_ranking_loss, tste_loss)
from .model import MTNModel, ThreeStreamModel, build_3mtn, build_mtn, clone_to_target

REGIMES = ("NOADPT", "UD", "FTT", "END2END", "MTCT")


@dataclass
class Hyperparameters:
    momentum: float = 0.9
    weight_decay: float = 0.0005
    batch_size: int = 32
    lr_stage1: float = 0.001
    lr_finetune: float = 0.0001
    epochs_stage1: int = 10
    epochs_stage2: int = 60
    tste_alpha: float = 1.0
    lambda_src: float = 1.0
    lambda_tste: float = 200.0
    stage2_loss: str = "tste"  # "tste" | "ranking"
    ranking_margin: float = 1.0
    hard_negatives: bool = False
    pretext: bool = False  # optional self-supervised warm-up (rotation pretext)
    pretext_epochs: int = 3
    seed: int = 0

    def __post_init__(self):
        for name in ("momentum", "weight_decay", "batch_size", "lr_stage1", "lr_finetune",
                     "epochs_stage1", "epochs_stage2", "tste_alpha"):
            if getattr(self, name) <= 0 and name not in ("momentum", "weight_decay"):
                raise ContractError(f"hyperparameter {name} must be positive")
        if self.lr_finetune > self.lr_stage1:
            raise ContractError("lr_finetune must not exceed lr_stage1")
        if self.stage2_loss not in ("tste", "ranking"):
            raise ContractError(f"unknown stage2_loss '{self.stage2_loss}'")


@dataclass
class StageRecord:
    stage: str
    epoch_losses: list[dict] = field(default_factory=list)
    extras: dict = field(default_factory=dict)


@dataclass
class RunRecord:
    regime: str
    seed: int
    stages: list[StageRecord] = field(default_factory=list)
    elapsed_s: float = 0.0

    def to_dicts(self) -> list[dict]:
        out = []
        for st in self.stages:
            for epoch, losses in enumerate(st.epoch_losses):
                out.append({"regime": self.regime, "seed": self.seed, "stage": st.stage,
                            "epoch": epoch, **losses})
            if st.extras:
                out.append({"regime": self.regime, "seed": self.seed, "stage": st.stage,
                            **st.extras})
        return out


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def sgd_step(params: dict[str, Tensor], opt_state: dict[str, np.ndarray],
             hyper: Hyperparameters, lr: float) -> None:
    """Momentum SGD: v = mu*v + (g + wd*theta); theta -= lr*v.

    Applies only to trainable (non-frozen) tensors; weight decay skips biases.
    """
    for name, t in params.items():
        if not t.requires_grad:
            continue
        if t.grad is None:
            raise ContractError(f"trainable tensor '{name}' has no gradient")
        g = t.grad
        if hyper.weight_decay and not name.endswith(".b"):
            g = g + hyper.weight_decay * t.data
        v = opt_state.get(name)
        v = g.copy() if v is None else hyper.momentum * v + g
        opt_state[name] = v
        t.data -= lr * v


def _batches(samples: list[Sample], batch_size: int, rng: np.random.Generator):
    order = rng.permutation(len(samples))
    for i in range(0, len(samples), batch_size):
        yield [samples[j] for j in order[i:i + batch_size]]


def _softmax_epochs(model: MTNModel, dataset: Dataset, samples: list[Sample],
                    hyper: Hyperparameters, lr: float, epochs: int,
                    rng: np.random.Generator, stage: str) -> StageRecord:
    if not samples:
        raise ContractError(f"{stage}: empty training set")
    record = StageRecord(stage)
    opt_state: dict[str, np.ndarray] = {}
    for _ in range(epochs):
        losses = []
        for batch in _batches(samples, hyper.batch_size, rng):
            images, labels = dataset.batch(batch)
            model.zero_grad()
            with Tape():
                _, logits = model.forward(Tensor(images))
                loss = multitask_softmax_loss(logits, labels)
                en.backward(loss)
            sgd_step(model.params, opt_state, hyper, lr)
            losses.append(loss.item())
        record.epoch_losses.append({"softmax": float(np.mean(losses))})
    return record


# ---------------------------------------------------------------------------
# optional rotation pretext (stand-in for large-scale pre-training)
# ---------------------------------------------------------------------------

def _pretext_stage(model: MTNModel, dataset: Dataset, samples: list[Sample],
                   hyper: Hyperparameters, rng: np.random.Generator) -> StageRecord:
    feat = model.trunk.feature_len
    head_w = Tensor(np.random.default_rng((hyper.seed, 91)).normal(
        0.0, 1.0 / np.sqrt(feat), size=(feat, 4)), requires_grad=True)
    head_b = Tensor(np.zeros(4), requires_grad=True)
    head = {"pretext.w": head_w, "pretext.b": head_b}
    record = StageRecord("pretext")
    opt_state: dict[str, np.ndarray] = {}
    for _ in range(hyper.pretext_epochs):
        losses = []
        for batch in _batches(samples, hyper.batch_size, rng):
            images, _ = dataset.batch(batch)
            rot = rng.integers(0, 4, size=len(batch))
            rotated = np.stack([np.rot90(img, k, axes=(1, 2)) for img, k in zip(images, rot)])
            model.zero_grad()
            head_w.grad = head_b.grad = None
            with Tape():
                feats = model.forward_trunk(Tensor(rotated.copy()))
                logits = en.add(en.matmul(feats, head_w), head_b)
                loss = multitask_softmax_loss(
                    [logits], LabelBatch(rot[:, None], np.ones((len(batch), 1), bool)))
                en.backward(loss)
            trunk_params = {n: t for n, t in model.params.items()
                            if n.startswith("trunk.")}
            sgd_step({**trunk_params, **head}, opt_state, hyper, hyper.lr_stage1)
            losses.append(loss.item())
        record.epoch_losses.append({"pretext": float(np.mean(losses))})
    return record


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def train_stage1(model: MTNModel, dataset: Dataset, hyper: Hyperparameters,
                 samples: list[Sample] | None = None) -> RunRecord:
    """Multi-task softmax training on clean source images only."""
    if model.frozen:
        raise ContractError("stage-1 expects an unfrozen model")
    start = time.perf_counter()
    record = RunRecord("STAGE1", hyper.seed)
    samples = dataset.by_domain("SOURCE") if samples is None else samples
    if hyper.pretext:
        record.stages.append(_pretext_stage(model, dataset, samples, hyper,
                                            np.random.default_rng((hyper.seed, 90))))
    rng = np.random.default_rng((hyper.seed, 10))
    record.stages.append(_softmax_epochs(model, dataset, samples, hyper,
                                         hyper.lr_stage1, hyper.epochs_stage1, rng, "stage1"))
    record.elapsed_s = time.perf_counter() - start
    return record


def _triplet_loss(f_t, f_ps, f_ns, hyper: Hyperparameters):
    if hyper.stage2_loss == "ranking":
        return triplet_ranking_loss(f_t, f_ps, f_ns, hyper.ranking_margin)
    return tste_loss(f_t, f_ps, f_ns, TSTEConfig(hyper.tste_alpha))


def heldout_triplet_set(dataset: Dataset, hyper: Hyperparameters, size: int = 512):
    rng = np.random.default_rng((hyper.seed, 77))
    triplets, _ = sample_triplets(dataset, size, rng, hyper.hard_negatives)
    return triplets


def triplet_satisfaction(source: MTNModel, target: MTNModel, triplets) -> float:
    """Fraction of triplets with d(target, positive) < d(target, negative)."""
    f_t = target.forward_trunk(Tensor(triplets.t_images)).data
    f_ps = source.forward_trunk(Tensor(triplets.ps_images)).data
    f_ns = source.forward_trunk(Tensor(triplets.ns_images)).data
    d_p = ((f_t - f_ps) ** 2).sum(axis=1)
    d_n = ((f_t - f_ns) ** 2).sum(axis=1)
    return float((d_p < d_n).mean())


def _combined_step(source: MTNModel, target: MTNModel, dataset: Dataset,
                   hyper: Hyperparameters, rng, opt_state) -> dict:
    triplets, (src_images, src_labels) = sample_triplets(
        dataset, hyper.batch_size, rng, hyper.hard_negatives)
    # the target softmax term draws from the full (harder) target pool, not
    # just the paired anchors, so stage-2 sees every labeled target image
    targets = dataset.by_domain("TARGET")
    pick = rng.integers(0, len(targets), size=hyper.batch_size)
    tgt_images, tgt_labels = dataset.batch([targets[i] for i in pick])
    source.zero_grad()
    target.zero_grad()
    with Tape():
        f_t = target.forward_trunk(Tensor(triplets.t_images))
        f_ps = source.forward_trunk(Tensor(triplets.ps_images))
        f_ns = source.forward_trunk(Tensor(triplets.ns_images))
        _, t_logits = target.forward(Tensor(tgt_images))
        _, s_logits = source.forward(Tensor(src_images))
        t_sm = multitask_softmax_loss(t_logits, tgt_labels)
        s_sm = multitask_softmax_loss(s_logits, src_labels)
        trip = _triplet_loss(f_t, f_ps, f_ns, hyper)
        loss = stage2_combined_loss(t_sm, s_sm, trip,
                                    (hyper.lambda_src, hyper.lambda_tste))
        en.backward(loss)
    sgd_step({**{f"source.{n}": t for n, t in source.params.items()},
              **{f"target.{n}": t for n, t in target.params.items()}},
             opt_state, hyper, hyper.lr_finetune)
    return {"combined": loss.item(), "target_softmax": t_sm.item(),
            "source_softmax": s_sm.item(), "triplet": trip.item()}


def _stage2_steps(dataset: Dataset, hyper: Hyperparameters) -> int:
    # one epoch covers the target pool in expectation, matching an FC
    # fine-tune's per-epoch exposure to target images
    return max(1, math.ceil(len(dataset.by_domain("TARGET")) / hyper.batch_size))


def train_stage2(three_stream: ThreeStreamModel, dataset: Dataset,
                 hyper: Hyperparameters) -> RunRecord:
    """Three-stream transfer: triplet loss + softmax terms under the freeze plan."""
    if not dataset.pairs():
        raise ContractError("stage-2 requires cross-domain pairs")
    start = time.perf_counter()
    source, target = three_stream.source, three_stream.target
    heldout = heldout_triplet_set(dataset, hyper)
    tsr_start = triplet_satisfaction(source, target, heldout)
    record = RunRecord("STAGE2", hyper.seed)
    stage = StageRecord("stage2")
    rng = np.random.default_rng((hyper.seed, 20))
    opt_state: dict[str, np.ndarray] = {}
    steps = _stage2_steps(dataset, hyper)
    for _ in range(hyper.epochs_stage2):
        comps = []
        for _ in range(steps):
            comps.append(_combined_step(source, target, dataset, hyper, rng, opt_state))
        stage.epoch_losses.append({k: float(np.mean([c[k] for c in comps]))
                                   for k in comps[0]})
    stage.extras = {"tsr_start": tsr_start,
                    "tsr_end": triplet_satisfaction(source, target, heldout)}
    record.stages.append(stage)
    record.elapsed_s = time.perf_counter() - start
    return record


# ---------------------------------------------------------------------------
# regimes
# ---------------------------------------------------------------------------

def _finetune_fc(model: MTNModel, dataset: Dataset, hyper: Hyperparameters) -> StageRecord:
    from .model import apply_freeze
    apply_freeze(model, {n: not n.startswith("branch.") for n in model.params})
    rng = np.random.default_rng((hyper.seed, 30))
    # with the trunk frozen this is plain softmax training of the branches, so
    # it takes the stage-1 rate; the reduced lr_finetune is reserved for the
    # joint updates where the scaled triplet term needs smaller steps
    return _softmax_epochs(model, dataset, dataset.by_domain("TARGET"), hyper,
                           hyper.lr_stage1, hyper.epochs_stage2, rng, "finetune_fc")


def _end2end(dataset: Dataset, hyper: Hyperparameters) -> tuple[MTNModel, RunRecord]:
    if not dataset.pairs():
        raise ContractError("END2END requires cross-domain pairs")
    source = build_mtn(dataset.schema, init_seed=hyper.seed)
    target = build_mtn(dataset.schema, init_seed=hyper.seed + 1000)
    record = RunRecord("END2END", hyper.seed)
    stage = StageRecord("end2end")
    rng = np.random.default_rng((hyper.seed, 40))
    opt_state: dict[str, np.ndarray] = {}
    steps = _stage2_steps(dataset, hyper)
    e2e_hyper = Hyperparameters(**{**asdict(hyper), "lr_finetune": hyper.lr_stage1})
    for _ in range(hyper.epochs_stage1 + hyper.epochs_stage2):
        comps = []
        for _ in range(steps):
            comps.append(_combined_step(source, target, dataset, e2e_hyper, rng, opt_state))
        stage.epoch_losses.append({k: float(np.mean([c[k] for c in comps]))
                                   for k in comps[0]})
    record.stages.append(stage)
    return target, record


def train_regime(regime: str, dataset: Dataset, hyper: Hyperparameters,
                 stage1_model: MTNModel | None = None
                 ) -> tuple[MTNModel, RunRecord]:
    """Run one full training regime; returns the deployable target model.

    ``stage1_model`` lets callers reuse the (identical, deterministic) stage-1
    result across NOADPT/FTT/MTCT under the same seed and data.
    """
    if regime not in REGIMES:
        raise ContractError(f"unknown regime '{regime}', expected one of {REGIMES}")
    start = time.perf_counter()
    needs_target = regime in ("UD", "FTT", "END2END", "MTCT")
    if needs_target and not dataset.by_domain("TARGET"):
        raise ContractError(f"regime {regime} requires target training data")

    def stage1():
        if stage1_model is not None:
            return clone_to_target(stage1_model), RunRecord("STAGE1", hyper.seed)
        model = build_mtn(dataset.schema, init_seed=hyper.seed)
        rec = train_stage1(model, dataset, hyper)
        return model, rec

    if regime == "NOADPT":
        model, rec = stage1()
        record = RunRecord(regime, hyper.seed, rec.stages)
    elif regime == "UD":
        model = build_mtn(dataset.schema, init_seed=hyper.seed)
        rng = np.random.default_rng((hyper.seed, 10))
        st = _softmax_epochs(model, dataset, dataset.samples, hyper,
                             hyper.lr_stage1, hyper.epochs_stage1, rng, "united")
        record = RunRecord(regime, hyper.seed, [st])
    elif regime == "FTT":
        src_model, rec = stage1()
        model = clone_to_target(src_model)
        st = _finetune_fc(model, dataset, hyper)
        record = RunRecord(regime, hyper.seed, rec.stages + [st])
    elif regime == "END2END":
        model, record = _end2end(dataset, hyper)
    else:  # MTCT
        src_model, rec = stage1()
        target = clone_to_target(src_model)
        three = build_3mtn(src_model, target)
        rec2 = train_stage2(three, dataset, hyper)
        model = target
        record = RunRecord(regime, hyper.seed, rec.stages + rec2.stages)

    record.elapsed_s = time.perf_counter() - start
    return model, record

"""Attribute prediction and evaluation metrics.

Per-class score is per-attribute top-1 accuracy over images where the
attribute is annotated (abstentions count as wrong); the mean over attributes
is reported as mAP. Per-instance precision/recall are computed per image over
its annotated attributes and then averaged over images.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .engine import Tensor
from .errors import ContractError
from .data import Dataset
from .model import MTNModel

ABSTAIN = -1


@dataclass
class MetricsReport:
    attribute_names: tuple[str, ...]
    ap_cls: dict[str, float]
    map_cls: float
    mp_ins: float
    mr_ins: float
    n_images: int
    n_emitted: int
    metadata: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "value"])
        for name in self.attribute_names:
            w.writerow([f"AP_cls[{name}]", f"{self.ap_cls[name]:.6f}"])
        w.writerow(["mAP_cls", f"{self.map_cls:.6f}"])
        w.writerow(["mP_ins", f"{self.mp_ins:.6f}"])
        w.writerow(["mR_ins", f"{self.mr_ins:.6f}"])
        w.writerow(["n_images", self.n_images])
        w.writerow(["n_emitted", self.n_emitted])
        for k in sorted(self.metadata):
            w.writerow([k, self.metadata[k]])
        return buf.getvalue()

    def to_table(self) -> str:
        cols = list(self.attribute_names) + ["mAP_cls", "mP_ins", "mR_ins"]
        vals = [self.ap_cls[n] for n in self.attribute_names] + \
               [self.map_cls, self.mp_ins, self.mr_ins]
        width = max(8, max(len(c) for c in cols) + 1)
        header = "".join(c.rjust(width) for c in cols)
        row = "".join(f"{v:{width}.2f}" for v in vals)
        return header + "\n" + row


def predict_attributes(model: MTNModel, images: np.ndarray,
                       confidence_threshold: float = 0.5
                       ) -> tuple[np.ndarray, np.ndarray]:
    """Argmax prediction per attribute, ABSTAIN below the probability threshold.

    Returns (predictions, probabilities), each (n_images, n_attr); ties break
    to the lowest value index.
    """
    _, logits = model.forward(Tensor(images))
    n = images.shape[0]
    preds = np.zeros((n, model.schema.n_attr), dtype=np.int64)
    probs = np.zeros((n, model.schema.n_attr))
    for j, lg in enumerate(logits):
        z = lg.data - lg.data.max(axis=1, keepdims=True)
        e = np.exp(z)
        p = e / e.sum(axis=1, keepdims=True)
        best = p.argmax(axis=1)
        best_p = p[np.arange(n), best]
        preds[:, j] = np.where(best_p >= confidence_threshold, best, ABSTAIN)
        probs[:, j] = best_p
    return preds, probs


def average_precision_cls(predictions: np.ndarray, labels: np.ndarray,
                          mask: np.ndarray, attribute: int) -> float:
    """Accuracy (%) over images where the attribute is present; abstain = wrong."""
    present = mask[:, attribute]
    if not present.any():
        raise ContractError(f"attribute {attribute} never present in evaluation set")
    correct = predictions[present, attribute] == labels[present, attribute]
    return float(correct.mean() * 100.0)


def instance_precision_recall(predictions: np.ndarray, labels: np.ndarray,
                              mask: np.ndarray) -> tuple[float, float]:
    """Per-image precision/recall over annotated attributes, averaged (%)."""
    precisions, recalls = [], []
    for i in range(predictions.shape[0]):
        present = mask[i]
        if not present.any():
            raise ContractError(f"image {i} has no present labels")
        emitted = present & (predictions[i] != ABSTAIN)
        correct = int((predictions[i][emitted] == labels[i][emitted]).sum())
        if emitted.any():
            precisions.append(correct / int(emitted.sum()))
        recalls.append(correct / int(present.sum()))
    mp = float(np.mean(precisions) * 100.0) if precisions else 0.0
    mr = float(np.mean(recalls) * 100.0)
    return mp, mr


def evaluate_report(model: MTNModel, test_set: Dataset, threshold: float = 0.5,
                    domain: str = "TARGET", metadata: dict | None = None,
                    batch_size: int = 64) -> MetricsReport:
    """Full evaluation of a model on one domain of a dataset."""
    samples = test_set.by_domain(domain)
    if not samples:
        raise ContractError(f"empty test set for domain {domain}")
    preds_parts = []
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        images, _ = test_set.batch(chunk)
        p, _ = predict_attributes(model, images, threshold)
        preds_parts.append(p)
    preds = np.concatenate(preds_parts)
    labels = np.stack([s.labels for s in samples])
    mask = np.stack([s.mask for s in samples])

    names = model.schema.names
    ap = {names[j]: average_precision_cls(preds, labels, mask, j)
          for j in range(len(names))}
    mp, mr = instance_precision_recall(preds, labels, mask)
    return MetricsReport(
        attribute_names=names,
        ap_cls=ap,
        map_cls=float(np.mean(list(ap.values()))),
        mp_ins=mp,
        mr_ins=mr,
        n_images=len(samples),
        n_emitted=int(((preds != ABSTAIN) & mask).sum()),
        metadata=metadata or {},
    )

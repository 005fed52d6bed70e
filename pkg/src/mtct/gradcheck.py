"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

import numpy as np

from .engine import Tape, Tensor, backward
from .errors import ContractError, NumericError


def grad_check(f, point: Tensor, h: float = 1e-5, _scale_analytic: float = 1.0) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps a tensor to a scalar tensor and must be re-evaluable at
    perturbed points. Relative error per coordinate is
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-12).
    ``_scale_analytic`` exists for fault-injection tests only.
    """
    p = Tensor(point.data.copy(), requires_grad=True)
    with Tape():
        out = f(p)
        if out.data.size != 1:
            raise ContractError(f"grad_check: f must be scalar-valued, got shape {out.shape}")
        backward(out)
    analytic = (p.grad if p.grad is not None else np.zeros_like(p.data)) * _scale_analytic

    flat = p.data.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        for sign in (+1.0, -1.0):
            flat[i] = orig + sign * h
            val = f(Tensor(p.data.copy())).item()
            if not np.isfinite(val):
                raise NumericError(f"grad_check: non-finite f at probe coordinate {i}")
            numeric[i] += sign * val
        flat[i] = orig
    numeric /= 2.0 * h

    an = analytic.reshape(-1)
    denom = np.maximum(np.maximum(np.abs(an), np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(an - numeric) / denom))

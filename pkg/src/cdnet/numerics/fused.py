"""Tape primitive for the weight-shared decomposition cascade."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .tensor import ContractViolation, Tensor, _node, as_tensor


@dataclass(frozen=True)
class CascadeArrays:
    """Non-differentiable record of one fused cascade pass (batched)."""

    inputs: np.ndarray  # (J, B, d)
    prototypes: np.ndarray  # (J, B, d)
    weights: np.ndarray  # (J, B)
    residual_chain_end: np.ndarray  # (B, d), input_J - a_J p_J


def shared_cascade(x0, P, slope, W1, b1, W2, b2, W3, b3, J: int, backend: str | None = None,
                   sigmoid_alpha: bool = False):
    """Apply one LD parameter set J times to a batch ``x0`` of shape (B, d).

    Returns ``(stacked, record)`` where ``stacked`` is a tensor of shape
    (J + 1, B, d): rows 0..J-1 are input_1..input_J and row J is r_e.  Slice
    it with ``getitem`` to route gradients into either part.  With
    ``sigmoid_alpha`` the step weights are squashed into (0, 1).
    """
    if J < 1:
        raise ContractViolation("cascade needs J >= 1")
    x0 = as_tensor(x0)
    if x0.data.ndim != 2:
        raise ContractViolation(f"cascade expects a (B, d) batch, got {x0.shape}")
    ts = [as_tensor(t) for t in (P, slope, W1, b1, W2, b2, W3, b3)]
    P, slope, W1, b1, W2, b2, W3, b3 = ts
    d = x0.shape[1]
    if P.shape != (d, d) or W1.shape[1] != 2 * d or W2.shape[1] != W1.shape[0] or W3.shape != (1, W2.shape[0]):
        raise ContractViolation(
            f"cascade: incompatible shapes x0={x0.shape} P={P.shape} W1={W1.shape} W2={W2.shape} W3={W3.shape}"
        )
    kern = kernels.get(backend, x0.data.dtype.name)
    a = float(slope.data.reshape(()))
    re, cache = kern.cascade_forward(x0.data, P.data, a, W1.data, b1.data, W2.data, b2.data, W3.data, b3.data, J, sigmoid_alpha)
    X = cache[0]
    stacked = np.concatenate([X[:J], re[None]], axis=0)
    record = CascadeArrays(inputs=X[:J], prototypes=cache[2], weights=cache[5], residual_chain_end=X[J])

    def _bw(g):
        gx0, gP, gs, gW1, gb1, gW2, gb2, gW3, gb3 = kern.cascade_backward(
            cache, P.data, a, W1.data, W2.data, W3.data, g[:J], g[J], sigmoid_alpha
        )
        for t, gt in zip((x0, P, W1, b1, W2, b2, W3, b3), (gx0, gP, gW1, gb1, gW2, gb2, gW3, gb3)):
            if t.requires_grad:
                t._accumulate(gt)
        if slope.requires_grad:
            slope._accumulate(np.asarray(gs).reshape(slope.shape))

    return _node(stacked, (x0, *ts), _bw), record

"""Central finite-difference check of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .tensor import ContractViolation, Tensor, grad, parameter


@dataclass
class GradCheckReport:
    """Per-parameter worst relative error between tape and finite differences.

    The relative error of a parameter is ``max|analytic - numeric|`` divided
    by the larger of the two gradients' max-norms, so entries with tiny
    gradients are judged against the scale of the whole parameter.
    """

    max_rel_error: dict[str, float]
    failures: list[tuple[str, tuple[int, ...], float, float]] = field(default_factory=list)
    tol: float = 1e-5
    eps: float = 1e-6
    atol: float = 1e-8

    @property
    def ok(self) -> bool:
        return not self.failures

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    def summary(self) -> str:
        lines = [f"{name:<24s} {err:.3e}" for name, err in self.max_rel_error.items()]
        lines.append(f"max relative error {self.worst:.3e} (tol {self.tol:g}) -> {'ok' if self.ok else 'FAIL'}")
        return "\n".join(lines)


def grad_check(
    loss_fn: Callable[[dict[str, Tensor]], Tensor],
    params: dict[str, np.ndarray],
    eps: float = 1e-6,
    tol: float = 1e-5,
    atol: float = 1e-8,
) -> GradCheckReport:
    """Compare tape gradients of ``loss_fn`` against central differences.

    ``loss_fn`` receives a dict of tensors keyed like ``params`` and must be
    deterministic.  Every entry of every parameter is perturbed.
    """
    if eps <= 0:
        raise ContractViolation("eps must be positive")
    leaves = {k: parameter(v, name=k) for k, v in params.items()}
    analytic = grad(loss_fn(leaves), leaves)

    base = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}

    def f(values) -> float:
        out = float(loss_fn({k: Tensor(v) for k, v in values.items()}).data)
        if not np.isfinite(out):
            raise FloatingPointError("loss became non-finite during finite differencing")
        return out

    report = GradCheckReport(max_rel_error={}, tol=tol, eps=eps, atol=atol)
    for name, arr in base.items():
        numeric = np.zeros_like(arr)
        flat = arr.reshape(-1)
        num_flat = numeric.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            up = f(base)
            flat[j] = orig - eps
            down = f(base)
            flat[j] = orig
            num_flat[j] = (up - down) / (2 * eps)
        a = analytic[name]
        err = np.abs(a - numeric)
        scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(numeric), initial=0.0), atol / tol)
        report.max_rel_error[name] = float(np.max(err, initial=0.0) / scale)
        bad = np.argwhere(err > tol * scale)
        for idx in bad:
            idx = tuple(int(i) for i in idx)
            report.failures.append((name, idx, float(a[idx]), float(numeric[idx])))
    return report

"""Loss terms for batch pre-training and episodic fine-tuning."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .errors import ConfigError
from .model import (
    ModelConfig,
    Features,
    decompose,
    domain_logits,
    expr_logits,
    ld_forward,
    sub_params,
    transform_forward,
)
from .numerics import (
    ContractViolation,
    Tensor,
    as_tensor,
    getitem,
    mean,
    pairwise_sq_dists,
    reshape,
    scale,
    softmax_cross_entropy,
    sqrt,
    squared_l2,
)

REG_MODES = ("none", "partial", "full", "fix")
METRICS = ("sqeuclidean", "euclidean")


@dataclass(frozen=True)
class LossWeights:
    lambda_d_p: float = 1.0
    lambda_d_f: float = 0.01
    lambda_r_f: float = 1.0

    def __post_init__(self):
        for name in ("lambda_d_p", "lambda_d_f", "lambda_r_f"):
            if not getattr(self, name) >= 0:
                raise ConfigError(f"{name} must be >= 0")


@dataclass
class LossBundle:
    total: Tensor
    components: dict[str, float]
    weights: dict[str, float]

    @property
    def value(self) -> float:
        return float(self.total.data)

    def recomputed_total(self) -> float:
        """Weighted sum of the reported components, in the order it was built."""
        out = None
        for name, c in self.components.items():
            term = np.float64(c) * np.float64(self.weights[name]) if self.weights[name] != 1.0 else np.float64(c)
            out = term if out is None else out + term
        return float(out)

    def record(self) -> dict:
        return {"total": self.value, **self.components}


def _combine(terms: list[tuple[str, float, Tensor | None]]) -> LossBundle:
    total = None
    components, weights = {}, {}
    for name, w, t in terms:
        if t is None:
            components[name] = 0.0
            weights[name] = w
            continue
        part = t if w == 1.0 else scale(t, w)
        total = part if total is None else total + part
        components[name] = float(t.data)
        weights[name] = w
    return LossBundle(total, components, weights)


def pretrain_loss(r_e, r_d, y_e, y_d, heads: Mapping, w: LossWeights, use_domain: bool = True) -> LossBundle:
    """Expression CE on r_e plus weighted domain CE on r_d, both batch means."""
    cls = softmax_cross_entropy(expr_logits(r_e, heads), y_e)
    dom = softmax_cross_entropy(domain_logits(r_d, heads), y_d) if use_domain else None
    return _combine([("cls", 1.0, cls), ("domain", w.lambda_d_p, dom)])


def class_centers(support, n_way: int, k_shot: int) -> Tensor:
    """Per-class mean of support features laid out class-major (N*K, d)."""
    support = as_tensor(support)
    if k_shot < 1 or n_way < 1:
        raise ContractViolation("class_centers: every class needs at least one support feature")
    if support.shape[0] != n_way * k_shot:
        raise ContractViolation(f"class_centers: expected {n_way * k_shot} support rows, got {support.shape[0]}")
    grouped = reshape(support, (n_way, k_shot, support.shape[1]))
    return mean(grouped, axis=1)


def distances(query, centers, metric: str = "sqeuclidean") -> Tensor:
    query = as_tensor(query)
    if query.data.ndim == 1:
        query = reshape(query, (1, -1))
    sq = pairwise_sq_dists(query, centers)
    if metric == "sqeuclidean":
        return sq
    if metric == "euclidean":
        return sqrt(sq)
    raise ConfigError(f"unknown metric {metric!r}; expected one of {METRICS}")


def proto_episode_loss(query, y_q, centers, metric: str = "sqeuclidean") -> Tensor:
    """Softmax over negative distances to the class centers; mean over queries."""
    d = distances(query, centers, metric)
    y_q = np.atleast_1d(np.asarray(y_q))
    if np.any(y_q < 0) or np.any(y_q >= d.shape[1]):
        raise ContractViolation(f"query label out of range [0, {d.shape[1]})")
    return softmax_cross_entropy(scale(d, -1.0), y_q)


def _pairwise_reg(pairs: list[tuple[Tensor, Callable, Callable]]) -> Tensor:
    """sum_i ||teacher(input_i) - student(input_i)||^2, averaged over batch rows."""
    total = None
    for x, teacher, student in pairs:
        x = as_tensor(x)
        term = squared_l2(teacher(x), student(x))
        total = term if total is None else total + term
    rows = pairs[0][0].data.shape[0] if as_tensor(pairs[0][0]).data.ndim == 2 else 1
    return total if rows == 1 else scale(total, 1.0 / rows)


def _frozen(arrays: Mapping) -> dict:
    return {k: Tensor(np.asarray(v.data if isinstance(v, Tensor) else v)) for k, v in arrays.items()}


def partial_reg_loss(inputs, dp_pre: Mapping, dp_fine: Mapping) -> Tensor:
    """Decomposition-block disagreement between a frozen teacher and the student.

    ``dp_*`` map 'P' and 'slope'.  The teacher side never receives gradients;
    the inputs and the student block do.
    """
    teacher = _frozen(dp_pre)
    if teacher["P"].shape != as_tensor(dp_fine["P"]).shape:
        raise ContractViolation("partial_reg_loss: teacher and student blocks differ in size")
    return _pairwise_reg(
        [
            (x, lambda v: decompose(v, teacher["P"], teacher["slope"]), lambda v: decompose(v, dp_fine["P"], dp_fine["slope"]))
            for x in inputs
        ]
    )


def full_reg_loss(inputs, ld_pre: Mapping, ld_fine: Mapping, activation: str = "linear") -> Tensor:
    """Same penalty on whole-LD outputs (weighted prototypes)."""
    teacher = _frozen(ld_pre)
    if teacher["P"].shape != as_tensor(ld_fine["P"]).shape:
        raise ContractViolation("full_reg_loss: teacher and student blocks differ in size")
    return _pairwise_reg(
        [(x, lambda v: ld_forward(v, teacher, activation)[0], lambda v: ld_forward(v, ld_fine, activation)[0]) for x in inputs]
    )


def transform_reg_loss(inputs, st_pre: Mapping, st_fine: Mapping) -> Tensor:
    teacher = _frozen(st_pre)
    return _pairwise_reg([(x, lambda v: transform_forward(v, teacher), lambda v: transform_forward(v, st_fine)) for x in inputs])


def regularization(cfg: ModelConfig, mode: str, feats: Features, t: Mapping, teacher: Mapping | None) -> Tensor | None:
    """Teacher penalty for the given variant and mode (None when it is off)."""
    if mode not in REG_MODES:
        raise ConfigError(f"unknown regularization mode {mode!r}; expected one of {REG_MODES}")
    if mode in ("none", "fix"):
        return None
    if cfg.variant == "none":
        raise ConfigError("the baseline has no decomposition block to regularize")
    if teacher is None:
        raise ConfigError(f"regularization mode {mode!r} needs a pre-trained teacher")
    if cfg.variant == "single":
        if mode != "full":
            raise ConfigError("the single-transformation variant only supports full regularization")
        return transform_reg_loss(feats.inputs, sub_params(teacher, "st"), sub_params(t, "st"))
    if mode == "partial":
        fn = partial_reg_loss
    else:
        def fn(inputs, pre, fine):
            return full_reg_loss(inputs, pre, fine, cfg.alpha_activation)
    if cfg.variant == "sequential":
        return fn(feats.inputs, sub_params(teacher, "ld"), sub_params(t, "ld"))
    terms = None
    for k, x in enumerate(feats.inputs):
        term = fn([x], sub_params(teacher, f"ld{k}"), sub_params(t, f"ld{k}"))
        terms = term if terms is None else terms + term
    return terms


def finetune_loss(
    cfg: ModelConfig,
    feats: Features,
    n_way: int,
    k_shot: int,
    n_query: int,
    y_d,
    t: Mapping,
    w: LossWeights,
    reg_mode: str = "partial",
    teacher: Mapping | None = None,
    metric: str = "sqeuclidean",
) -> LossBundle:
    """Episode objective: prototype loss + weighted domain CE + weighted penalty.

    Rows of ``feats`` are the N*K support samples followed by the N*Q query
    samples, both class-major.  The domain term covers every row.
    """
    n_s = n_way * k_shot
    if feats.r_e.shape[0] != n_s + n_way * n_query:
        raise ContractViolation("finetune_loss: feature rows do not match the episode layout")
    support = getitem(feats.r_e, slice(0, n_s))
    query = getitem(feats.r_e, slice(n_s, None))
    centers = class_centers(support, n_way, k_shot)
    y_q = np.repeat(np.arange(n_way), n_query)
    cls = proto_episode_loss(query, y_q, centers, metric)
    dom = None
    if feats.r_d is not None and w.lambda_d_f > 0:
        y_d = np.broadcast_to(np.asarray(y_d), (feats.r_e.shape[0],)).astype(np.int64)
        dom = softmax_cross_entropy(domain_logits(feats.r_d, t), y_d)
    reg = regularization(cfg, reg_mode, feats, t, teacher)
    return _combine([("cls", 1.0, cls), ("domain", w.lambda_d_f, dom), ("reg", w.lambda_r_f, reg)])

"""Two-stage training: batch pre-training, then episodic fine-tuning."""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .data import SyntheticDataset, sample_batch, sample_episode
from .errors import ConfigError, ContractViolation
from .model import ModelConfig, ModelParams, features, init_params
from .numerics import GradCheckReport, Tensor, grad, grad_check
from .objectives import REG_MODES, LossWeights, finetune_loss, pretrain_loss

log = logging.getLogger(__name__)

# name -> (model variant, regularization mode); order follows the ablation table
VARIANT_TABLE = {
    "baseline": ("none", "none"),
    "single": ("single", "full"),
    "parallel": ("parallel", "partial"),
    "decompose": ("sequential", "none"),
    "cdnet_full": ("sequential", "full"),
    "cdnet_fix": ("sequential", "fix"),
    "cdnet": ("sequential", "partial"),
}


class NonFiniteGradient(ContractViolation):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, last_finite: ModelParams):
        super().__init__(message)
        self.last_finite = last_finite


# ------------------------------------------------------------------ optimizer


@dataclass
class OptimState:
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: OptimState):
    """Bias-corrected Adam update of ``params`` (in place) for every name in ``grads``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step
    for name, g in grads.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(params[name])
            state.v[name] = np.zeros_like(params[name])
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        params[name] -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state


def _clip(grads: dict[str, np.ndarray], max_norm: float | None) -> dict[str, np.ndarray]:
    if not max_norm:
        return grads
    norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm <= max_norm:
        return grads
    return {k: g * (max_norm / norm) for k, g in grads.items()}


# --------------------------------------------------------------------- config


@dataclass(frozen=True)
class TrainConfig:
    pretrain_iters: int = 10000
    batch_size: int = 16
    finetune_episodes: int = 100
    tasks_per_episode: int = 100
    n_way: int = 5
    k_shot: int = 1
    n_query: int = 16
    J: int = 3
    reg_mode: str = "partial"
    lambda_d_p: float = 1.0
    lambda_d_f: float = 0.01
    lambda_r_f: float = 1.0
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    adam_eps: float = 1e-8
    tasks_per_update: int = 1
    grad_clip: float | None = None
    metric: str = "sqeuclidean"
    seed: int = 0

    def __post_init__(self):
        for name in ("pretrain_iters", "batch_size", "finetune_episodes", "tasks_per_episode",
                     "n_way", "k_shot", "n_query", "tasks_per_update"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.J < 0:
            raise ConfigError("J must be >= 0")
        if self.reg_mode not in REG_MODES:
            raise ConfigError(f"reg_mode must be one of {REG_MODES}")
        LossWeights(self.lambda_d_p, self.lambda_d_f, self.lambda_r_f)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_d_p, self.lambda_d_f, self.lambda_r_f)

    def optimizer(self) -> OptimState:
        return OptimState(lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.adam_eps)


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream])


PRETRAIN_STREAM, FINETUNE_STREAM = 1, 2


def write_history(path, records: Iterable[dict]) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


# ------------------------------------------------------------------- stages


def pretrain(
    params: ModelParams,
    ds: SyntheticDataset,
    cfg: TrainConfig,
    rng: np.random.Generator | None = None,
    on_record: Callable[[dict], None] | None = None,
    backend: str | None = None,
) -> tuple[ModelParams, list[dict]]:
    """Batch training on base classes: expression CE + weighted domain CE."""
    params = params.copy()
    rng = rng if rng is not None else _rng(cfg.seed, PRETRAIN_STREAM)
    mcfg = params.config
    use_domain = mcfg.variant != "none"
    w = cfg.weights
    state = cfg.optimizer()
    names = list(params.arrays)
    history = []
    last = params.copy()
    for it in range(cfg.pretrain_iters):
        batch = sample_batch(ds, cfg.batch_size, rng)
        t = params.tensors(names)
        feats = features(mcfg, t, batch.raw.astype(mcfg.dtype, copy=False), backend)
        loss = pretrain_loss(feats.r_e, feats.r_d, batch.y_e, batch.y_d, t, w, use_domain=use_domain)
        if not np.isfinite(loss.value):
            raise TrainingDiverged(f"pre-training loss became non-finite at iteration {it}", last)
        grads = _clip(grad(loss.total, {k: t[k] for k in names}), cfg.grad_clip)
        rec = {"stage": "pretrain", "step": it, **loss.record(), "weights": loss.weights}
        history.append(rec)
        if on_record:
            on_record(rec)
        last = params.copy()
        adam_step(params.arrays, grads, state)
    params.meta = {**params.meta, "stage": "pretrain", "iters": cfg.pretrain_iters, "seed": cfg.seed}
    return params, history


def check_compatible(a: ModelConfig, b: ModelConfig) -> None:
    for key in ("raw_dim", "d", "J", "variant", "n_expr", "n_domains"):
        if getattr(a, key) != getattr(b, key):
            raise ConfigError(f"incompatible checkpoints: {key} = {getattr(a, key)!r} vs {getattr(b, key)!r}")


def finetune_trainable(params: ModelParams, reg_mode: str) -> list[str]:
    """Names updated during fine-tuning: everything but the expression head,
    and, in ``fix`` mode, the decomposition block."""
    frozen = set(params.decomposition_names()) if reg_mode == "fix" else set()
    return [k for k in params.arrays if not k.startswith("expr_head.") and k not in frozen]


def finetune(
    params: ModelParams,
    teacher: ModelParams | None,
    ds: SyntheticDataset,
    cfg: TrainConfig,
    rng: np.random.Generator | None = None,
    on_record: Callable[[dict], None] | None = None,
    backend: str | None = None,
) -> tuple[ModelParams, list[dict]]:
    """Episodic training on base-class tasks with the chosen teacher penalty."""
    params = params.copy()
    mcfg = params.config
    if teacher is not None:
        check_compatible(mcfg, teacher.config)
    if cfg.reg_mode in ("partial", "full") and teacher is None:
        raise ConfigError(f"reg_mode {cfg.reg_mode!r} needs a pre-trained teacher checkpoint")
    if cfg.reg_mode == "fix" and mcfg.variant == "none":
        raise ConfigError("fix mode needs a decomposition block")
    rng = rng if rng is not None else _rng(cfg.seed, FINETUNE_STREAM)
    w = cfg.weights
    state = cfg.optimizer()
    names = finetune_trainable(params, cfg.reg_mode)
    teacher_arrays = teacher.arrays if teacher is not None else None
    history = []
    total_tasks = cfg.finetune_episodes * cfg.tasks_per_episode
    pending: dict[str, np.ndarray] | None = None
    last = params.copy()
    for task in range(total_tasks):
        ep = sample_episode(ds, cfg.n_way, cfg.k_shot, cfg.n_query, rng, class_pool="base")
        t = params.tensors(names)
        feats = features(mcfg, t, ep.raw(ds).astype(mcfg.dtype, copy=False), backend)
        loss = finetune_loss(
            mcfg, feats, cfg.n_way, cfg.k_shot, cfg.n_query, ep.domain_id, t, w,
            reg_mode=cfg.reg_mode, teacher=teacher_arrays, metric=cfg.metric,
        )
        if not np.isfinite(loss.value):
            raise TrainingDiverged(f"fine-tuning loss became non-finite at task {task}", last)
        g = grad(loss.total, {k: t[k] for k in names})
        rec = {"stage": "finetune", "step": task, "episode": task // cfg.tasks_per_episode,
               **loss.record(), "weights": loss.weights}
        history.append(rec)
        if on_record:
            on_record(rec)
        last = params.copy()
        if cfg.tasks_per_update == 1:
            adam_step(params.arrays, _clip(g, cfg.grad_clip), state)
            continue
        pending = g if pending is None else {k: pending[k] + g[k] for k in names}
        if (task + 1) % cfg.tasks_per_update == 0 or task + 1 == total_tasks:
            n = (task % cfg.tasks_per_update) + 1
            adam_step(params.arrays, _clip({k: v / n for k, v in pending.items()}, cfg.grad_clip), state)
            pending = None
    params.meta = {**params.meta, "stage": "finetune", "tasks": total_tasks, "reg_mode": cfg.reg_mode,
                   "seed": cfg.seed}
    return params, history


def episode_grad_check(
    mcfg: ModelConfig,
    n_way: int = 2,
    k_shot: int = 2,
    n_query: int = 2,
    reg_mode: str = "partial",
    weights: LossWeights = LossWeights(),
    seed: int = 0,
    eps: float = 1e-6,
    tol: float = 1e-5,
    backend: str | None = None,
) -> GradCheckReport:
    """Finite-difference check of the fine-tuning objective on one random episode.

    The teacher is a perturbed copy of the student so the penalty and its
    gradient are not trivially zero.
    """
    rng = np.random.default_rng(seed)
    params = init_params(mcfg)
    teacher = {k: v + 0.05 * rng.standard_normal(v.shape) for k, v in params.arrays.items()}
    raw = rng.standard_normal((n_way * (k_shot + n_query), mcfg.raw_dim))
    y_d = int(rng.integers(mcfg.n_domains))
    names = finetune_trainable(params, reg_mode)
    fixed = {k: Tensor(v) for k, v in params.arrays.items() if k not in names}

    def loss_fn(t):
        full = {**fixed, **t}
        feats = features(mcfg, full, raw, backend)
        return finetune_loss(mcfg, feats, n_way, k_shot, n_query, y_d, full, weights,
                             reg_mode=reg_mode, teacher=teacher).total

    return grad_check(loss_fn, {k: params.arrays[k] for k in names}, eps=eps, tol=tol)


# ----------------------------------------------------------------- variants


@dataclass
class VariantRun:
    name: str
    pretrained_init: bool
    pretrained: ModelParams | None
    finetuned: ModelParams
    pretrain_history: list[dict]
    finetune_history: list[dict]


def variant_settings(name: str, cfg: TrainConfig, model_kw: dict | None = None) -> tuple[ModelConfig, TrainConfig]:
    """Model and training configuration for one row of the ablation table."""
    if name not in VARIANT_TABLE:
        raise ConfigError(f"unknown variant {name!r}; expected one of {list(VARIANT_TABLE)}")
    variant, reg = VARIANT_TABLE[name]
    model_kw = dict(model_kw or {})
    model_kw.pop("variant", None)
    model_kw.pop("J", None)
    if name == "baseline":
        tcfg = dataclasses.replace(cfg, reg_mode="none", lambda_d_p=0.0, lambda_d_f=0.0, lambda_r_f=0.0)
        return ModelConfig(variant="none", J=0, seed=cfg.seed, **model_kw), tcfg
    if cfg.J < 1:
        raise ConfigError(f"variant {name!r} needs J >= 1")
    tcfg = dataclasses.replace(cfg, reg_mode=reg)
    if reg == "none":
        tcfg = dataclasses.replace(tcfg, lambda_r_f=0.0)
    return ModelConfig(variant=variant, J=cfg.J, seed=cfg.seed, **model_kw), tcfg


_PRETRAIN_FIELDS = ("pretrain_iters", "batch_size", "lambda_d_p", "lr", "beta1", "beta2", "adam_eps", "grad_clip", "seed")


def _pretrain_key(mcfg: ModelConfig, tcfg: TrainConfig, ds: SyntheticDataset) -> tuple:
    return (mcfg, tuple(getattr(tcfg, f) for f in _PRETRAIN_FIELDS), id(ds), ds.seed)


def run_variant(
    name: str,
    ds: SyntheticDataset,
    cfg: TrainConfig,
    pretrained_init: bool = True,
    model_kw: dict | None = None,
    cache: dict | None = None,
    backend: str | None = None,
) -> VariantRun:
    """Train one ablation variant end to end.

    Without pre-trained initialization the fine-tuning stage starts from
    fresh weights; the pre-trained model is still trained when the variant
    needs it as a teacher.  ``cache`` shares pre-trained checkpoints
    between variants with the same model layout.
    """
    mcfg, tcfg = variant_settings(name, cfg, model_kw)
    if tcfg.reg_mode == "fix" and not pretrained_init:
        raise ConfigError("cdnet_fix freezes the pre-trained decomposition block; it needs pretrained_init")
    if mcfg.raw_dim != ds.config.raw_dim:
        raise ConfigError(f"model raw_dim {mcfg.raw_dim} does not match dataset raw_dim {ds.config.raw_dim}")
    fresh = init_params(mcfg)
    needs_teacher = tcfg.reg_mode in ("partial", "full", "fix")
    pre, pre_hist = None, []
    if pretrained_init or needs_teacher:
        key = _pretrain_key(mcfg, tcfg, ds)
        if cache is not None and key in cache:
            pre, pre_hist = cache[key]
        else:
            pre, pre_hist = pretrain(fresh, ds, tcfg, backend=backend)
            if cache is not None:
                cache[key] = (pre, pre_hist)
    start = pre if pretrained_init else fresh
    teacher = pre if needs_teacher else None
    fine, fine_hist = finetune(start, teacher, ds, tcfg, backend=backend)
    fine.meta = {**fine.meta, "variant": name, "pretrained_init": pretrained_init}
    return VariantRun(name, pretrained_init, pre, fine, pre_hist, fine_hist)

"""Encoder, learn-to-decompose (LD) cascade, ablation variants and heads.

Parameters live in a flat registry of named numpy arrays.  A forward pass
wraps them in tensors, so the same functions serve training (gradients)
and inference (plain values).

Registry layout::

    encoder.{W1,b1,W2,b2}          raw_dim -> d -> d
    ld.{P,slope,W1,b1,W2,b2,W3,b3} one shared LD unit       (sequential)
    ld0.* ... ld{J-1}.*            J independent LD units   (parallel)
    st.{M,b,slope}                 fused transform          (single)
    expr_head.{W,b}                d -> n_expr
    domain_head.{W1,b1,W2,b2}      d -> d/2 -> n_domains    (absent for baseline)
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import io
from .errors import ConfigError
from .numerics import (
    CascadeArrays,
    ContractViolation,
    Tensor,
    as_tensor,
    concat,
    getitem,
    linear,
    mul,
    parameter,
    prelu,
    relu,
    reshape,
    shared_cascade,
    sigmoid,
    sub,
)

VARIANTS = ("none", "sequential", "parallel", "single")
LD_KEYS = ("P", "slope", "W1", "b1", "W2", "b2", "W3", "b3")
DECOMP_KEYS = ("P", "slope")
ALPHA_ACTIVATIONS = ("linear", "sigmoid")
FORMAT = "cdnet-checkpoint/1"


@dataclass(frozen=True)
class ModelConfig:
    raw_dim: int = 32
    d: int = 64
    J: int = 3
    variant: str = "sequential"
    n_expr: int = 7
    n_domains: int = 5
    seed: int = 0
    init: str = "kaiming"
    prelu_init: float = 0.25
    p_noise: float = 0.01
    alpha_activation: str = "sigmoid"
    dtype: str = "float64"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown model variant {self.variant!r}; expected one of {VARIANTS}")
        if self.variant != "none" and self.J < 1:
            raise ConfigError("J must be >= 1 for decomposition variants (J = 0 is the baseline)")
        if self.alpha_activation not in ALPHA_ACTIVATIONS:
            raise ConfigError(f"alpha_activation must be one of {ALPHA_ACTIVATIONS}, got {self.alpha_activation!r}")
        if self.init not in ("kaiming", "symmetric"):
            raise ConfigError(f"unknown init {self.init!r}")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError(f"dtype must be float64 or float32, got {self.dtype!r}")
        for name in ("raw_dim", "d", "n_expr", "n_domains"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.d < 2:
            raise ConfigError("d must be >= 2")

    @property
    def weight_hidden(self) -> tuple[int, int]:
        return self.d, max(1, self.d // 2)

    @property
    def domain_hidden(self) -> int:
        return max(1, self.d // 2)


@dataclass
class ModelParams:
    config: ModelConfig
    arrays: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.arrays.items()}, dict(self.meta))

    def ld_prefixes(self) -> list[str]:
        """Distinct LD parameter sets in the registry."""
        return sorted({k.split(".")[0] for k in self.arrays if k.split(".")[0].startswith("ld")})

    def decomposition_names(self) -> list[str]:
        if self.config.variant == "single":
            return [k for k in self.arrays if k.startswith("st.")]
        return [f"{p}.{k}" for p in self.ld_prefixes() for k in DECOMP_KEYS]

    def group(self, prefix: str) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.arrays.items() if k.split(".")[0] == prefix}

    def tensors(self, trainable=None) -> dict[str, Tensor]:
        """Wrap arrays; names in ``trainable`` (default: all) collect gradients."""
        out = {}
        for k, v in self.arrays.items():
            if trainable is None or k in trainable:
                out[k] = parameter(v, name=k)
            else:
                out[k] = Tensor(v, name=k)
        return out

    def manifest_header(self) -> dict:
        return {"format": FORMAT, "config": dataclasses.asdict(self.config), "meta": self.meta}

    def save(self, path) -> str:
        return io.save(path, self.manifest_header(), self.arrays)

    def fingerprint(self) -> str:
        return io.digest(self.manifest_header(), self.arrays)

    @classmethod
    def load(cls, path) -> "ModelParams":
        header, arrays = io.load(path)
        if header.get("format") != FORMAT:
            raise ConfigError(f"{path}: not a cdnet checkpoint")
        cfg = ModelConfig(**header["config"])
        params = cls(cfg, arrays, header.get("meta", {}))
        expected = init_params(dataclasses.replace(cfg, init="symmetric")).arrays
        if {k: v.shape for k, v in expected.items()} != {k: v.shape for k, v in arrays.items()}:
            raise ConfigError(f"{path}: parameter layout does not match its config")
        return params


# ------------------------------------------------------------ initialisation


def _kaiming(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_out, fan_in))


def init_params(cfg: ModelConfig) -> ModelParams:
    rng = np.random.default_rng(cfg.seed)
    d = cfg.d
    h1, h2 = cfg.weight_hidden
    hd = cfg.domain_hidden
    zero = cfg.init == "symmetric"

    def W(o, i):
        return np.zeros((o, i)) if zero else _kaiming(rng, o, i)

    def near_identity():
        return np.zeros((d, d)) if zero else np.eye(d) + cfg.p_noise * rng.standard_normal((d, d))

    a: dict[str, np.ndarray] = {
        "encoder.W1": W(d, cfg.raw_dim),
        "encoder.b1": np.zeros(d),
        "encoder.W2": W(d, d),
        "encoder.b2": np.zeros(d),
    }

    def ld_block(prefix):
        a[f"{prefix}.P"] = near_identity()
        a[f"{prefix}.slope"] = np.array(cfg.prelu_init)
        a[f"{prefix}.W1"] = W(h1, 2 * d)
        a[f"{prefix}.b1"] = np.zeros(h1)
        a[f"{prefix}.W2"] = W(h2, h1)
        a[f"{prefix}.b2"] = np.zeros(h2)
        a[f"{prefix}.W3"] = W(1, h2)
        a[f"{prefix}.b3"] = np.zeros(1)

    if cfg.variant == "sequential":
        ld_block("ld")
    elif cfg.variant == "parallel":
        for k in range(cfg.J):
            ld_block(f"ld{k}")
    elif cfg.variant == "single":
        a["st.M"] = near_identity()
        a["st.b"] = np.zeros(d)
        a["st.slope"] = np.array(cfg.prelu_init)

    a["expr_head.W"] = W(cfg.n_expr, d)
    a["expr_head.b"] = np.zeros(cfg.n_expr)
    if cfg.variant != "none":
        a["domain_head.W1"] = W(hd, d)
        a["domain_head.b1"] = np.zeros(hd)
        a["domain_head.W2"] = W(cfg.n_domains, hd)
        a["domain_head.b2"] = np.zeros(cfg.n_domains)
    dt = np.dtype(cfg.dtype)
    return ModelParams(cfg, {k: np.asarray(v, dtype=dt) for k, v in a.items()})


def sub_params(t: Mapping, prefix: str) -> dict:
    """``{'P': t['ld.P'], ...}`` for one prefix."""
    n = len(prefix) + 1
    return {k[n:]: v for k, v in t.items() if k.startswith(prefix + ".")}


# --------------------------------------------------------------- primitives


def encode(raw, ep: Mapping) -> Tensor:
    h = relu(linear(raw, ep["W1"], ep["b1"]))
    return linear(h, ep["W2"], ep["b2"])


def decompose(x, P, slope) -> Tensor:
    """Expression prototype prelu(P x); no bias."""
    return prelu(linear(x, P), slope)


def weigh(x, p, wp: Mapping, activation: str = "linear") -> Tensor:
    """Scalar weight from a three-layer perceptron on [x, p].

    The output is linear by default; ``activation="sigmoid"`` keeps it in (0, 1).
    """
    x, p = as_tensor(x), as_tensor(p)
    if x.shape != p.shape:
        raise ContractViolation(f"weigh: feature {x.shape} and prototype {p.shape} differ")
    z = concat([x, p], axis=-1)
    h = relu(linear(z, wp["W1"], wp["b1"]))
    h = relu(linear(h, wp["W2"], wp["b2"]))
    alpha = linear(h, wp["W3"], wp["b3"])
    if activation == "sigmoid":
        alpha = sigmoid(alpha)
    return reshape(alpha, alpha.shape[:-1])


def ld_forward(x, ld: Mapping, activation: str = "linear") -> tuple[Tensor, Tensor, Tensor]:
    """(f, p, alpha) with f = alpha * p."""
    p = decompose(x, ld["P"], ld["slope"])
    alpha = weigh(x, p, ld, activation)
    a = alpha if alpha.data.ndim == 0 else reshape(alpha, alpha.shape + (1,))
    return mul(a, p), p, alpha


def transform_forward(x, st: Mapping) -> Tensor:
    """Fused single transformation: prelu(M x + b) is the weighted prototype."""
    return prelu(linear(x, st["M"], st["b"]), st["slope"])


def expr_logits(r_e, heads: Mapping) -> Tensor:
    return linear(r_e, heads["expr_head.W"], heads["expr_head.b"])


def domain_logits(r_d, heads: Mapping) -> Tensor:
    h = relu(linear(r_d, heads["domain_head.W1"], heads["domain_head.b1"]))
    return linear(h, heads["domain_head.W2"], heads["domain_head.b2"])


# ----------------------------------------------------------------- cascades


@dataclass
class CascadeTrace:
    """Plain-array record of one cascade pass."""

    inputs: list[np.ndarray]
    prototypes: list[np.ndarray]
    weights: list[np.ndarray]
    r_e: np.ndarray
    r_d: np.ndarray


def cascade_forward(x0, ld: Mapping, J: int, activation: str = "linear") -> CascadeTrace:
    """Sequential decomposition, composed step by step from tape ops.

    The same ``ld`` parameters are used at every step.  Works for a single
    vector or a (B, d) batch.
    """
    if J < 1:
        raise ContractViolation("cascade_forward needs J >= 1")
    x0 = as_tensor(x0)
    inputs, protos, weights = [], [], []
    x = x0
    r_e = None
    for _ in range(J):
        f, p, alpha = ld_forward(x, ld, activation)
        inputs.append(x.data)
        protos.append(p.data)
        weights.append(alpha.data)
        r_e = f if r_e is None else r_e + f
        x = sub(x, f)
    r_d = sub(x0, r_e)
    return CascadeTrace(inputs, protos, weights, r_e.data, r_d.data)


def single_transform_forward(x0, st: Mapping, J: int) -> tuple[np.ndarray, np.ndarray]:
    feats = _sequential(as_tensor(x0), lambda x: transform_forward(x, st), J)
    return feats[0].data, feats[1].data


def parallel_forward(x0, lds: list[Mapping], activation: str = "linear") -> tuple[np.ndarray, np.ndarray]:
    r_e, r_d = _parallel(as_tensor(x0), lds, activation)
    return r_e.data, r_d.data


def _sequential(x0: Tensor, step, J: int):
    if J < 1:
        raise ContractViolation("cascade needs J >= 1")
    x, r_e, inputs = x0, None, []
    for _ in range(J):
        inputs.append(x)
        f = step(x)
        r_e = f if r_e is None else r_e + f
        x = sub(x, f)
    return r_e, sub(x0, r_e), inputs


def _parallel(x0: Tensor, lds: list[Mapping], activation: str = "linear"):
    if not lds:
        raise ContractViolation("parallel variant needs at least one LD set")
    r_e = None
    for ld in lds:
        f, _, _ = ld_forward(x0, ld, activation)
        r_e = f if r_e is None else r_e + f
    return r_e, sub(x0, r_e)


@dataclass
class Features:
    """Tensors produced by encoder + decomposition for a batch."""

    x0: Tensor
    r_e: Tensor
    r_d: Tensor | None
    inputs: list[Tensor]
    record: CascadeArrays | None = None


def features(cfg: ModelConfig, t: Mapping[str, Tensor], raw, backend: str | None = None) -> Features:
    """Batch forward: raw (B, raw_dim) -> x0, r_e, r_d and cascade inputs."""
    x0 = encode(raw, sub_params(t, "encoder"))
    if cfg.variant == "none":
        return Features(x0, x0, None, [])
    if cfg.variant == "sequential":
        ld = sub_params(t, "ld")
        stacked, record = shared_cascade(x0, *(ld[k] for k in LD_KEYS), J=cfg.J, backend=backend,
                                         sigmoid_alpha=cfg.alpha_activation == "sigmoid")
        inputs = [getitem(stacked, i) for i in range(cfg.J)]
        r_e = getitem(stacked, cfg.J)
        return Features(x0, r_e, sub(x0, r_e), inputs, record)
    if cfg.variant == "single":
        st = sub_params(t, "st")
        r_e, r_d, inputs = _sequential(x0, lambda x: transform_forward(x, st), cfg.J)
        return Features(x0, r_e, r_d, inputs)
    lds = [sub_params(t, f"ld{k}") for k in range(cfg.J)]
    r_e, r_d = _parallel(x0, lds, cfg.alpha_activation)
    return Features(x0, r_e, r_d, [x0] * cfg.J)


def embed(params: ModelParams, raw: np.ndarray, backend: str | None = None) -> np.ndarray:
    """Expression features r_e for a batch, without building gradients."""
    t = params.tensors(trainable=())
    return features(params.config, t, np.asarray(raw, dtype=params.config.dtype), backend).r_e.data

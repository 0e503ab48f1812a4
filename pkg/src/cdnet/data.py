"""Synthetic multi-source-domain data, label unification and samplers.

Base classes are Gaussian clusters whose means sit on a regular simplex;
compound (novel) classes mix the means of two base classes.  Every domain
applies its own well-conditioned affine map to ``mean + noise``.  Source
domains carry base classes (training split); one held-out target domain
carries the compound classes (test split).
"""

from __future__ import annotations

import dataclasses
import itertools
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import expm

from . import io
from .errors import ConfigError, SamplingError

log = logging.getLogger(__name__)

BASE_CLASS_NAMES = ("anger", "disgust", "fear", "happiness", "sadness", "surprise", "neutral")
FORMAT = "cdnet-dataset/1"
TRAIN, TEST = 0, 1


@dataclass(frozen=True)
class DataConfig:
    n_base: int = 7
    n_domains: int = 5
    n_novel: int = 10
    raw_dim: int = 32
    per_class: int = 200
    separation: float = 5.0
    noise: float = 0.25
    # simplex edge = edge_scale * separation * noise (>= separation * noise)
    edge_scale: float = 3.0
    domain_shift: float = 0.3
    target_shift: float = 0.3
    mix_low: float = 0.35
    mix_high: float = 0.65
    shuffle_labels: bool = True
    missing: tuple[tuple[int, str], ...] = ()

    def __post_init__(self):
        if not self.separation > 0:
            raise ConfigError("separation must be > 0")
        if self.noise < 0:
            raise ConfigError("noise must be >= 0")
        if self.edge_scale < 1:
            raise ConfigError("edge_scale must be >= 1 so base means stay separation*noise apart")
        if self.n_base < 2 or self.n_domains < 1 or self.per_class < 1:
            raise ConfigError("need n_base >= 2, n_domains >= 1, per_class >= 1")
        if self.n_base > len(BASE_CLASS_NAMES):
            raise ConfigError(f"at most {len(BASE_CLASS_NAMES)} named base classes are available")
        if self.raw_dim < self.n_base - 1:
            raise ConfigError(
                f"raw_dim={self.raw_dim} cannot hold {self.n_base} equidistant means (needs >= {self.n_base - 1})"
            )
        n_pairs = self.n_base * (self.n_base - 1) // 2
        if not 0 <= self.n_novel <= n_pairs:
            raise ConfigError(f"n_novel must be in [0, {n_pairs}] (one compound per base pair)")
        if not 0 <= self.mix_low <= self.mix_high <= 1:
            raise ConfigError("need 0 <= mix_low <= mix_high <= 1")
        object.__setattr__(self, "missing", tuple((int(d), str(c)) for d, c in self.missing))

    @property
    def class_names(self) -> tuple[str, ...]:
        return BASE_CLASS_NAMES[: self.n_base]


@dataclass(frozen=True)
class DomainSpec:
    domain_id: int
    matrix: np.ndarray
    offset: np.ndarray
    noise_scale: float

    def apply(self, x: np.ndarray) -> np.ndarray:
        return x @ self.matrix.T + self.offset


@dataclass(frozen=True)
class ClassSpec:
    class_id: int
    kind: str  # "base" | "compound"
    mean: np.ndarray
    parents: tuple[int, int] | None = None
    mix: float | None = None


@dataclass
class SyntheticDataset:
    raw: np.ndarray
    y_e: np.ndarray
    y_d: np.ndarray
    split: np.ndarray
    config: DataConfig
    seed: int
    label_tables: list[list[str]]
    domains: list[DomainSpec] | None = None
    classes: list[ClassSpec] | None = None
    _pools: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        order = np.lexsort((np.arange(len(self.y_e)), self.y_e, self.y_d, self.split))
        keys = np.stack([self.split[order], self.y_d[order], self.y_e[order]], axis=1)
        starts = np.flatnonzero(np.r_[True, np.any(keys[1:] != keys[:-1], axis=1)]) if len(order) else []
        bounds = list(starts) + [len(order)]
        for a, b in zip(bounds[:-1], bounds[1:]):
            s, dm, c = (int(v) for v in keys[a])
            self._pools[(s, dm, c)] = order[a:b]

    @property
    def target_domain(self) -> int:
        return self.config.n_domains

    def pool(self, split: int, domain: int, cls: int) -> np.ndarray:
        return self._pools.get((split, domain, cls), np.empty(0, dtype=np.int64))

    def classes_in(self, split: int, domain: int) -> list[int]:
        return sorted(c for (s, dm, c) in self._pools if s == split and dm == domain)

    def domains_in(self, split: int) -> list[int]:
        return sorted({dm for (s, dm, _) in self._pools if s == split})

    def rows(self, split: int, domain: int) -> np.ndarray:
        parts = [self.pool(split, domain, c) for c in self.classes_in(split, domain)]
        return np.sort(np.concatenate(parts)) if parts else np.empty(0, dtype=np.int64)

    def header(self) -> dict:
        return {
            "format": FORMAT,
            "config": dataclasses.asdict(self.config),
            "seed": self.seed,
            "label_tables": self.label_tables,
            "columns": {"raw": "float64[n, raw_dim]", "y_e": "unified expression label", "y_d": "domain label",
                        "split": "0 = train (base classes), 1 = test (novel classes)"},
        }

    def arrays(self) -> dict[str, np.ndarray]:
        return {"raw": self.raw, "y_e": self.y_e, "y_d": self.y_d, "split": self.split}

    def save(self, path) -> str:
        return io.save(path, self.header(), self.arrays())

    def fingerprint(self) -> str:
        return io.digest(self.header(), self.arrays())

    @classmethod
    def load(cls, path) -> "SyntheticDataset":
        header, arrays = io.load(path)
        if header.get("format") != FORMAT:
            raise ConfigError(f"{path}: not a cdnet dataset")
        cfg = header["config"]
        cfg["missing"] = tuple(tuple(m) for m in cfg.get("missing", ()))
        return cls(
            raw=arrays["raw"],
            y_e=arrays["y_e"],
            y_d=arrays["y_d"],
            split=arrays["split"],
            config=DataConfig(**cfg),
            seed=header["seed"],
            label_tables=header["label_tables"],
        )


def unify_labels(tables: Sequence[Sequence[str]], class_names: Sequence[str]) -> list[np.ndarray]:
    """Map each domain's local label indices onto the unified class list.

    Returns one array per domain: ``mapping[dm][local] = unified``.
    """
    index = {name: i for i, name in enumerate(class_names)}
    out = []
    for dm, table in enumerate(tables):
        unknown = [n for n in table if n not in index]
        if unknown:
            raise ConfigError(f"domain {dm}: unknown class name(s) {unknown}")
        if len(set(table)) != len(table):
            raise ConfigError(f"domain {dm}: duplicate class names in label table")
        out.append(np.array([index[n] for n in table], dtype=np.int64))
    return out


def simplex_means(n: int, dim: int, edge: float, rng: np.random.Generator) -> np.ndarray:
    """n points in R^dim, all pairwise distances equal to ``edge``."""
    centered = np.eye(n) - 1.0 / n
    u, s, _ = np.linalg.svd(centered)
    coords = u[:, : n - 1] * s[: n - 1]  # pairwise distance sqrt(2)
    basis, _ = np.linalg.qr(rng.standard_normal((dim, n - 1)))
    return (coords @ basis.T) * (edge / np.sqrt(2.0))


def _domain_transform(domain_id: int, dim: int, shift: float, scale: float, noise: float, rng) -> DomainSpec:
    g = rng.standard_normal((dim, dim))
    skew = (g - g.T) / np.sqrt(2.0 * dim)
    rotation = expm(shift * skew)
    stretch = np.exp(shift * rng.uniform(-0.5, 0.5, size=dim))
    matrix = rotation * stretch[None, :]
    cond = np.linalg.cond(matrix)
    if not cond < 100:
        raise ConfigError(f"domain {domain_id}: transform condition number {cond:.1f} >= 100; lower the shift")
    offset = shift * scale * rng.standard_normal(dim) / np.sqrt(dim)
    return DomainSpec(domain_id, matrix, offset, noise)


def gen_dataset(cfg: DataConfig, seed: int) -> SyntheticDataset:
    """Generate the dataset; a pure function of (cfg, seed)."""
    ss = np.random.SeedSequence(seed)
    geo_rng, dom_rng, lab_rng, smp_rng = (np.random.default_rng(s) for s in ss.spawn(4))
    edge = cfg.edge_scale * cfg.separation * cfg.noise if cfg.noise > 0 else cfg.edge_scale * cfg.separation
    means = simplex_means(cfg.n_base, cfg.raw_dim, edge, geo_rng)
    classes = [ClassSpec(c, "base", means[c]) for c in range(cfg.n_base)]
    pairs = list(itertools.combinations(range(cfg.n_base), 2))
    chosen = geo_rng.choice(len(pairs), size=cfg.n_novel, replace=False) if cfg.n_novel else []
    for j, pi in enumerate(chosen):
        a, b = pairs[int(pi)]
        t = float(geo_rng.uniform(cfg.mix_low, cfg.mix_high))
        classes.append(ClassSpec(cfg.n_base + j, "compound", t * means[a] + (1 - t) * means[b], (a, b), t))

    domains = [
        _domain_transform(dm, cfg.raw_dim, cfg.domain_shift if dm < cfg.n_domains else cfg.target_shift, edge, cfg.noise, dom_rng)
        for dm in range(cfg.n_domains + 1)
    ]

    names = list(cfg.class_names)
    missing = {}
    for dm, name in cfg.missing:
        if name not in names:
            raise ConfigError(f"missing-class entry names unknown class {name!r}")
        if not 0 <= dm < cfg.n_domains:
            raise ConfigError(f"missing-class entry names unknown domain {dm}")
        missing.setdefault(dm, set()).add(name)
    tables = []
    for dm in range(cfg.n_domains):
        table = [n for n in names if n not in missing.get(dm, ())]
        if cfg.shuffle_labels:
            table = [table[i] for i in lab_rng.permutation(len(table))]
        tables.append(table)
    mapping = unify_labels(tables, names)

    raws, ys_e, ys_d, splits = [], [], [], []

    def emit(spec: ClassSpec, dom: DomainSpec, label: int, split: int):
        eps = smp_rng.standard_normal((cfg.per_class, cfg.raw_dim))
        raws.append(dom.apply(spec.mean[None, :] + cfg.noise * eps))
        ys_e.append(np.full(cfg.per_class, label, dtype=np.int64))
        ys_d.append(np.full(cfg.per_class, dom.domain_id, dtype=np.int64))
        splits.append(np.full(cfg.per_class, split, dtype=np.int8))

    for dm in range(cfg.n_domains):
        for local, unified in enumerate(mapping[dm]):
            emit(classes[unified], domains[dm], int(unified), TRAIN)
    for spec in classes[cfg.n_base :]:
        emit(spec, domains[cfg.n_domains], spec.class_id, TEST)

    return SyntheticDataset(
        raw=np.concatenate(raws),
        y_e=np.concatenate(ys_e),
        y_d=np.concatenate(ys_d),
        split=np.concatenate(splits),
        config=cfg,
        seed=seed,
        label_tables=tables,
        domains=domains,
        classes=classes,
    )


# ------------------------------------------------------------------ sampling


@dataclass
class Batch:
    raw: np.ndarray
    y_e: np.ndarray
    y_d: np.ndarray
    index: np.ndarray


@dataclass
class Episode:
    support: np.ndarray  # row indices, class-major (N*K,)
    query: np.ndarray  # row indices, class-major (N*Q,)
    class_map: np.ndarray  # episode-local index -> global class id
    domain_id: int
    n_way: int
    k_shot: int
    n_query: int

    def raw(self, ds: SyntheticDataset) -> np.ndarray:
        """Support rows followed by query rows."""
        return ds.raw[np.concatenate([self.support, self.query])]

    @property
    def query_labels(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_way), self.n_query)


def sample_batch(ds: SyntheticDataset, batch_size: int, rng: np.random.Generator) -> Batch:
    """Batch of training rows from one uniformly chosen source domain."""
    doms = ds.domains_in(TRAIN)
    if not doms or batch_size < 1:
        raise SamplingError("no training data to sample a batch from")
    dm = doms[int(rng.integers(len(doms)))]
    rows = ds.rows(TRAIN, dm)
    replace = len(rows) < batch_size
    if replace:
        log.warning("domain %d has %d rows < batch size %d; sampling with replacement", dm, len(rows), batch_size)
    idx = rng.choice(rows, size=batch_size, replace=replace)
    return Batch(ds.raw[idx], ds.y_e[idx], ds.y_d[idx], idx)


def sample_episode(
    ds: SyntheticDataset,
    n_way: int,
    k_shot: int,
    n_query: int,
    rng: np.random.Generator,
    class_pool: str = "base",
) -> Episode:
    """N-way K-shot task from one domain.

    ``class_pool='base'`` draws from the base classes of a random source
    domain; ``'novel'`` from the compound classes of the target domain.
    """
    if min(n_way, k_shot, n_query) < 1:
        raise SamplingError("n_way, k_shot and n_query must all be >= 1")
    if class_pool == "base":
        split = TRAIN
        doms = ds.domains_in(TRAIN)
        if not doms:
            raise SamplingError("dataset has no source-domain rows")
        dm = doms[int(rng.integers(len(doms)))]
    elif class_pool == "novel":
        split = TEST
        dm = ds.target_domain
    else:
        raise ConfigError(f"class_pool must be 'base' or 'novel', got {class_pool!r}")
    need = k_shot + n_query
    eligible = [c for c in ds.classes_in(split, dm) if len(ds.pool(split, dm, c)) >= need]
    if len(eligible) < n_way:
        have = len(ds.classes_in(split, dm))
        raise SamplingError(
            f"domain {dm} ({class_pool}) has {len(eligible)} of {have} classes with >= {need} samples "
            f"(K={k_shot} + Q={n_query}); need {n_way}"
        )
    chosen = rng.choice(np.array(eligible), size=n_way, replace=False)
    support, query = [], []
    for c in chosen:
        rows = rng.choice(ds.pool(split, dm, int(c)), size=need, replace=False)
        support.append(rows[:k_shot])
        query.append(rows[k_shot:])
    return Episode(np.concatenate(support), np.concatenate(query), chosen.astype(np.int64), dm, n_way, k_shot, n_query)

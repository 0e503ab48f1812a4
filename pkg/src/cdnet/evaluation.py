"""Episodic evaluation on the novel classes of the target domain."""

from __future__ import annotations

import dataclasses
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import SyntheticDataset, sample_episode
from .errors import ConfigError
from .model import ModelParams, embed
from .objectives import METRICS
from .train import VARIANT_TABLE, TrainConfig, run_variant

Z95 = 1.96


@dataclass
class EvalReport:
    per_task_accuracy: list[float]
    mean: float
    ci95: float
    fingerprint: dict = field(default_factory=dict)

    @classmethod
    def from_accuracies(cls, acc, fingerprint: dict | None = None) -> "EvalReport":
        m, ci = mean_ci95(acc)
        return cls([float(a) for a in acc], m, ci, dict(fingerprint or {}))

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))

    def __str__(self) -> str:
        return f"{100 * self.mean:.2f} +- {100 * self.ci95:.2f} (T={len(self.per_task_accuracy)})"


def mean_ci95(acc) -> tuple[float, float]:
    """Mean and normal-approximation 95% half-width 1.96 * sd / sqrt(T)."""
    a = np.asarray(acc, dtype=np.float64)
    if a.size == 0:
        raise ValueError("no task accuracies")
    m = float(a.mean())
    if a.size == 1:
        return m, 0.0
    return m, float(Z95 * a.std(ddof=1) / math.sqrt(a.size))


def nearest_centroid_predict(query, centers, metric: str = "sqeuclidean") -> np.ndarray | int:
    """Index of the closest center per query row; ties go to the lowest index.

    Both metrics rank by squared distance: sqrt is monotone, and rounding
    after sqrt could merge two distinct distances into a false tie.
    """
    if metric not in METRICS:
        raise ConfigError(f"unknown metric {metric!r}")
    q = np.asarray(query, dtype=np.float64)
    c = np.asarray(centers, dtype=np.float64)
    single = q.ndim == 1
    q2 = q[None] if single else q
    diff = q2[:, None, :] - c[None, :, :]
    pred = np.argmin(np.einsum("mnd,mnd->mn", diff, diff), axis=1)
    return int(pred[0]) if single else pred


def task_accuracy(params: ModelParams, ds: SyntheticDataset, n_way, k_shot, n_query, seed, task, metric, backend=None):
    rng = np.random.default_rng([seed, task])
    ep = sample_episode(ds, n_way, k_shot, n_query, rng, class_pool="novel")
    r_e = embed(params, ep.raw(ds), backend)
    n_s = n_way * k_shot
    centers = r_e[:n_s].reshape(n_way, k_shot, -1).mean(axis=1)
    pred = nearest_centroid_predict(r_e[n_s:], centers, metric)
    return float(np.mean(pred == ep.query_labels))


def evaluate(
    params: ModelParams,
    ds: SyntheticDataset,
    n_way: int = 5,
    k_shot: int = 1,
    n_query: int = 16,
    tasks: int = 1000,
    seed: int = 0,
    metric: str = "sqeuclidean",
    workers: int = 1,
    backend: str | None = None,
) -> EvalReport:
    """Mean accuracy over ``tasks`` novel-class episodes of the target domain.

    Task t draws its episode from ``default_rng([seed, t])``, so results do
    not depend on ``workers``.
    """
    if tasks < 1:
        raise ConfigError("tasks must be >= 1")

    def run(t):
        return task_accuracy(params, ds, n_way, k_shot, n_query, seed, t, metric, backend)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            acc = list(pool.map(run, range(tasks)))
    else:
        acc = [run(t) for t in range(tasks)]
    fp = {"n_way": n_way, "k_shot": k_shot, "n_query": n_query, "tasks": tasks, "seed": seed,
          "metric": metric, "checkpoint": params.fingerprint()}
    return EvalReport.from_accuracies(acc, fp)


# ------------------------------------------------------------------ ablation


@dataclass
class AblationTable:
    """mean +- ci95 per (variant, pre-trained init, K); ``None`` marks a gap."""

    shots: tuple[int, ...]
    rows: list[tuple[str, bool, dict[int, EvalReport | None]]]
    errors: dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "shots": list(self.shots),
            "rows": [
                {"variant": name, "pretrained_init": pre,
                 "results": {str(k): (None if r is None else {"mean": r.mean, "ci95": r.ci95, "tasks": len(r.per_task_accuracy)})
                             for k, r in cells.items()}}
                for name, pre, cells in self.rows
            ],
            "errors": self.errors,
        }

    def render(self) -> str:
        head = f"{'Pre':<4}{'Method':<12}" + "".join(f"{f'{k}-shot':>18}" for k in self.shots)
        lines = [head, "-" * len(head)]
        for name, pre, cells in self.rows:
            cols = []
            for k in self.shots:
                r = cells.get(k)
                cols.append(f"{'--':>18}" if r is None else f"{100 * r.mean:>10.2f} +- {100 * r.ci95:4.2f}")
            lines.append(f"{'yes' if pre else 'no':<4}{name:<12}" + "".join(cols))
        return "\n".join(lines)


def ablation_table(
    ds: SyntheticDataset,
    cfg: TrainConfig,
    variants=tuple(VARIANT_TABLE),
    shots=(1, 5),
    pretrained=(True,),
    tasks: int = 1000,
    eval_seed: int = 0,
    model_kw: dict | None = None,
    backend: str | None = None,
    on_run=None,
) -> AblationTable:
    """Train and evaluate each variant under shared data and seeds.

    A variant that cannot be trained (e.g. cdnet_fix without pre-trained
    init) leaves a gap and the run continues.
    """
    order = [v for v in VARIANT_TABLE if v in variants]
    unknown = set(variants) - set(VARIANT_TABLE)
    if unknown:
        raise ConfigError(f"unknown variants {sorted(unknown)}")
    cache: dict = {}
    rows, errors = [], {}
    for pre in pretrained:
        for name in order:
            cells: dict[int, EvalReport | None] = {}
            for k in shots:
                kcfg = dataclasses.replace(cfg, k_shot=k)
                try:
                    run = run_variant(name, ds, kcfg, pretrained_init=pre, model_kw=model_kw, cache=cache, backend=backend)
                except ConfigError as exc:
                    errors[f"{name}/{'pre' if pre else 'scratch'}/{k}"] = str(exc)
                    cells[k] = None
                    continue
                cells[k] = evaluate(run.finetuned, ds, kcfg.n_way, k, kcfg.n_query, tasks, eval_seed,
                                    kcfg.metric, backend=backend)
                if on_run:
                    on_run(run, cells[k])
            rows.append((name, pre, cells))
    return AblationTable(tuple(shots), rows, errors)


def j_sweep(
    ds: SyntheticDataset,
    cfg: TrainConfig,
    J_values=(0, 1, 2, 3, 4, 5, 6),
    tasks: int = 1000,
    eval_seed: int = 0,
    model_kw: dict | None = None,
    backend: str | None = None,
    on_run=None,
) -> list[tuple[int, EvalReport]]:
    """Accuracy against the number of cascaded LD steps; J = 0 is the baseline."""
    series = []
    for J in J_values:
        name = "baseline" if J == 0 else "cdnet"
        jcfg = dataclasses.replace(cfg, J=J)
        run = run_variant(name, ds, jcfg, pretrained_init=True, model_kw=model_kw, backend=backend)
        rep = evaluate(run.finetuned, ds, cfg.n_way, cfg.k_shot, cfg.n_query, tasks, eval_seed, cfg.metric, backend=backend)
        if on_run:
            on_run(J, run, rep)
        series.append((J, rep))
    return series


def format_series(series) -> str:
    """Two-column plot-ready text: J and mean accuracy."""
    return "".join(f"{J} {rep.mean:.17g}\n" for J, rep in series)

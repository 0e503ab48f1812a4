"""Acceptance criteria 1-10, each recorded as one PASS/FAIL line.

The lines are printed in the terminal summary under "acceptance criteria".
"""

import dataclasses
import math
import time

import numpy as np
import pytest

from cdnet.data import DataConfig, gen_dataset
from cdnet.evaluation import evaluate, j_sweep, mean_ci95
from cdnet.model import ModelConfig, features, init_params
from cdnet.train import TrainConfig, episode_grad_check, finetune, pretrain, run_variant

from conftest import BACKENDS

SMALL_DATA = DataConfig(n_domains=3, n_novel=6, raw_dim=12, per_class=40)
SMALL_TRAIN = TrainConfig(pretrain_iters=60, finetune_episodes=2, tasks_per_episode=5, n_query=4, k_shot=2)


def small_kw(ds, **kw):
    return {"raw_dim": ds.config.raw_dim, "n_domains": ds.config.n_domains, "d": 8, **kw}


def reconstruction_error(params, raw, backend=None) -> float:
    t = params.tensors(trainable=())
    f = features(params.config, t, raw, backend)
    return float(np.abs(f.r_e.data + f.r_d.data - f.x0.data).max())


def gradcheck_ok(J: int, seed: int = 0):
    rep = episode_grad_check(ModelConfig(d=8, raw_dim=6, J=J, seed=seed), n_way=2, k_shot=2, n_query=2,
                             reg_mode="partial", seed=seed, eps=1e-6, tol=1e-5)
    return rep


# --------------------------------------------------------------------- 1


def test_c1_reconstruction_identity(acceptance):
    start = time.perf_counter()
    worst = 0.0
    for trial in range(1000):
        rng = np.random.default_rng(trial)
        J = int(rng.integers(1, 6))
        cfg = ModelConfig(d=int(rng.integers(2, 17)), raw_dim=5, J=J, seed=trial)
        params = init_params(cfg)
        for k, v in params.arrays.items():
            params.arrays[k] = v + 0.3 * rng.standard_normal(v.shape)
        raw = rng.standard_normal((int(rng.integers(1, 9)), 5))
        worst = max(worst, reconstruction_error(params, raw, BACKENDS[trial % len(BACKENDS)]))
    elapsed = time.perf_counter() - start
    ok = worst < 1e-12 and elapsed < 10
    acceptance(1, ok, f"max |r_e + r_d - x0| = {worst:.2e} over 1000 trials, {elapsed:.1f}s")
    assert worst < 1e-12
    assert elapsed < 10


# --------------------------------------------------------------------- 2


def test_c2_gradient_correctness(acceptance):
    start = time.perf_counter()
    rep = gradcheck_ok(J=3)
    elapsed = time.perf_counter() - start
    groups = {name.split(".")[0] for name in rep.max_rel_error}
    ld_names = [n for n in rep.max_rel_error if n.startswith("ld.")]
    ok = rep.ok and rep.worst < 1e-5 and len(ld_names) == 8 and elapsed < 30
    acceptance(2, ok, f"max relative error {rep.worst:.2e} over groups {sorted(groups)}, {elapsed:.1f}s")
    assert len(ld_names) == 8
    assert rep.worst < 1e-5, rep.summary()
    assert elapsed < 30


# --------------------------------------------------------------------- 3


def test_c3_regularization_zero_at_init(acceptance, small_ds):
    cfg = dataclasses.replace(SMALL_TRAIN, finetune_episodes=1, tasks_per_episode=1)
    pre, _ = pretrain(init_params(ModelConfig(**small_kw(small_ds))), small_ds, cfg)
    _, hist = finetune(pre, pre, small_ds, cfg)
    reg = abs(hist[0]["reg"])
    acceptance(3, reg <= 1e-12, f"L_r at fine-tune step 0 = {reg:.1e}")
    assert reg <= 1e-12


# --------------------------------------------------------------------- 4


def cardinality_ok(J: int, ds, cfg: TrainConfig) -> tuple[bool, str]:
    seq = init_params(ModelConfig(**small_kw(ds, J=J)))
    par = init_params(ModelConfig(**small_kw(ds, J=J, variant="parallel")))
    pre, _ = pretrain(seq, ds, dataclasses.replace(cfg, J=J))
    fine, _ = finetune(pre, pre, ds, dataclasses.replace(cfg, J=J, reg_mode="fix"))
    frozen = all(fine.arrays[k].tobytes() == pre.arrays[k].tobytes() for k in ("ld.P", "ld.slope"))
    n_seq, n_par = len(seq.ld_prefixes()), len(par.ld_prefixes())
    ok = n_seq == 1 and n_par == J and frozen
    return ok, f"J={J}: sequential {n_seq} LD set, parallel {n_par}, fix-mode decomposition unchanged={frozen}"


def test_c4_sharing_cardinality(acceptance, small_ds):
    ok, detail = cardinality_ok(3, small_ds, SMALL_TRAIN)
    acceptance(4, ok, detail)
    assert ok


# --------------------------------------------------------------------- 5


@pytest.mark.slow
def test_c5_easy_mode_learning(acceptance):
    start = time.perf_counter()
    ds = gen_dataset(DataConfig(separation=5.0), seed=0)
    cfg = TrainConfig(pretrain_iters=2000, finetune_episodes=20, tasks_per_episode=50, k_shot=5, seed=0)
    run = run_variant("cdnet", ds, cfg)
    rep = evaluate(run.finetuned, ds, n_way=5, k_shot=5, n_query=16, tasks=200, seed=0)
    elapsed = time.perf_counter() - start
    ok = rep.mean >= 0.90 and elapsed < 300
    acceptance(5, ok, f"easy-mode 5-way 5-shot accuracy {rep}, {elapsed:.0f}s")
    assert rep.mean >= 0.90
    assert elapsed < 300


# --------------------------------------------------------------------- 6


@pytest.mark.slow
def test_c6_directional_ablation(acceptance):
    start = time.perf_counter()
    ordered = pre_wins = 0
    rows = []
    for seed in range(10):
        ds = gen_dataset(DataConfig(separation=2.0), seed=seed)
        cfg = TrainConfig(pretrain_iters=2000, finetune_episodes=20, tasks_per_episode=50, k_shot=1, seed=seed)
        cache: dict = {}

        def acc(name, pretrained_init=True):
            run = run_variant(name, ds, cfg, pretrained_init=pretrained_init, cache=cache)
            return evaluate(run.finetuned, ds, n_way=5, k_shot=1, n_query=16, tasks=200, seed=seed).mean

        cd, dec, base, scratch = acc("cdnet"), acc("decompose"), acc("baseline"), acc("cdnet", False)
        ordered += cd >= dec >= base
        pre_wins += cd > scratch
        rows.append(f"seed {seed}: cdnet {100 * cd:.2f} decompose {100 * dec:.2f} "
                    f"baseline {100 * base:.2f} scratch {100 * scratch:.2f}")
    elapsed = time.perf_counter() - start
    print("\n".join(rows))
    ok = ordered >= 8 and pre_wins >= 8 and elapsed < 1800
    acceptance(6, ok, f"ordering cdnet >= decompose >= baseline in {ordered}/10 seeds, "
                      f"pre-trained beats scratch in {pre_wins}/10, {elapsed / 60:.1f} min")
    assert pre_wins >= 8
    assert ordered >= 8
    assert elapsed < 1800


# --------------------------------------------------------------------- 7


def test_c7_chance_level(acceptance):
    ds = gen_dataset(DataConfig(), seed=0)
    params = init_params(ModelConfig(raw_dim=ds.config.raw_dim, init="symmetric"))
    rep = evaluate(params, ds, n_way=5, k_shot=1, n_query=16, tasks=200, seed=0)
    sigma = math.sqrt(0.2 * 0.8 / (200 * 5 * 16))
    ok = abs(rep.mean - 0.2) <= 5 * sigma
    acceptance(7, ok, f"untrained symmetric-init accuracy {rep.mean:.4f}, 5 sigma = {5 * sigma:.4f}")
    assert ok


# --------------------------------------------------------------------- 8


def test_c8_statistics(acceptance, small_ds):
    params = init_params(ModelConfig(**small_kw(small_ds)))
    rep = evaluate(params, small_ds, n_way=5, k_shot=1, n_query=4, tasks=100, seed=1)
    a = np.array(rep.per_task_accuracy)
    recomputed = 1.96 * float(np.std(a, ddof=1)) / math.sqrt(a.size)
    m, ci = mean_ci95([0.5, 0.7])
    ok = abs(recomputed - rep.ci95) <= 1e-12 and abs(m - 0.6) <= 1e-12 and abs(ci - 0.196) < 5e-4
    acceptance(8, ok, f"|ci95 recomputed - stored| = {abs(recomputed - rep.ci95):.1e}; {{0.5, 0.7}} -> {m:.4f} +- {ci:.4f}")
    assert abs(recomputed - rep.ci95) <= 1e-12
    assert m == pytest.approx(0.6, abs=1e-12) and ci == pytest.approx(0.196, abs=5e-4)


# --------------------------------------------------------------------- 9


def test_c9_determinism(acceptance):
    def once():
        ds = gen_dataset(SMALL_DATA, seed=4)
        run = run_variant("cdnet", ds, dataclasses.replace(SMALL_TRAIN, seed=4), model_kw=small_kw(ds))
        return ds, run, evaluate(run.finetuned, ds, k_shot=2, n_query=4, tasks=40, seed=4)

    ds, a, ra = once()
    _, b, rb = once()
    same_ckpt = all(a.finetuned.arrays[k].tobytes() == b.finetuned.arrays[k].tobytes() for k in a.finetuned.arrays)
    same_ckpt &= a.pretrained.fingerprint() == b.pretrained.fingerprint()
    same_report = ra.to_json() == rb.to_json()
    par = evaluate(a.finetuned, ds, k_shot=2, n_query=4, tasks=40, seed=4, workers=4)
    same_par = par.to_json() == ra.to_json()
    ok = same_ckpt and same_report and same_par
    acceptance(9, ok, f"checkpoints identical={same_ckpt}, reports identical={same_report}, "
                      f"parallel == sequential={same_par}")
    assert ok


# -------------------------------------------------------------------- 10


@pytest.mark.slow
def test_c10_j_sweep(acceptance, small_ds):
    kw = small_kw(small_ds)
    runs = {}
    series = j_sweep(small_ds, SMALL_TRAIN, J_values=(0, 1, 2, 3, 4, 5), tasks=20, model_kw=kw,
                     on_run=lambda J, run, rep: runs.__setitem__(J, run))
    base = run_variant("baseline", small_ds, SMALL_TRAIN, model_kw=kw)
    base_rep = evaluate(base.finetuned, small_ds, SMALL_TRAIN.n_way, SMALL_TRAIN.k_shot, SMALL_TRAIN.n_query, 20, 0)
    j0_equal = (runs[0].finetuned.fingerprint() == base.finetuned.fingerprint()
                and series[0][1].to_json() == base_rep.to_json())

    failures = []
    raw = small_ds.raw[:200]
    for J in range(1, 6):
        run = runs[J]
        err = reconstruction_error(run.finetuned, raw)
        if err >= 1e-12:
            failures.append(f"J={J} reconstruction {err:.1e}")
        rep = gradcheck_ok(J)
        if rep.worst >= 1e-5:
            failures.append(f"J={J} gradient {rep.worst:.1e}")
        if abs(run.finetune_history[0]["reg"]) > 1e-12:
            failures.append(f"J={J} reg at init {run.finetune_history[0]['reg']:.1e}")
        ok4, detail = cardinality_ok(J, small_ds, SMALL_TRAIN)
        if not ok4:
            failures.append(detail)
    curve = ", ".join(f"J={J}: {100 * r.mean:.1f}" for J, r in series)
    ok = j0_equal and not failures and [J for J, _ in series] == [0, 1, 2, 3, 4, 5]
    acceptance(10, ok, f"J=0 equals baseline={j0_equal}; criteria 1-4 for J=1..5 "
                       f"{'hold' if not failures else 'fail: ' + '; '.join(failures)}; accuracy {curve}")
    assert j0_equal
    assert not failures

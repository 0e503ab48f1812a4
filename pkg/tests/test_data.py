import logging

import numpy as np
import pytest

from cdnet.data import (
    BASE_CLASS_NAMES,
    DataConfig,
    SyntheticDataset,
    gen_dataset,
    sample_batch,
    sample_episode,
    simplex_means,
    unify_labels,
)
from cdnet.errors import ConfigError, SamplingError

NAMES = list(BASE_CLASS_NAMES)


# ------------------------------------------------------------------ labels


def test_unify_identity():
    maps = unify_labels([NAMES, NAMES], NAMES)
    for m in maps:
        assert np.array_equal(m, np.arange(7))


def test_unify_reversed():
    (m,) = unify_labels([NAMES[::-1]], NAMES)
    assert np.array_equal(m, np.arange(7)[::-1])
    # bijective onto the unified ids
    assert sorted(m) == list(range(7))


def test_unify_partial_domain():
    (m,) = unify_labels([NAMES[:6]], NAMES)
    assert len(m) == 6 and 6 not in m


def test_unify_errors():
    with pytest.raises(ConfigError):
        unify_labels([["anger", "contempt"]], NAMES)
    with pytest.raises(ConfigError):
        unify_labels([["anger", "anger"]], NAMES)


def test_missing_class_never_sampled():
    cfg = DataConfig(n_domains=2, per_class=30, raw_dim=8, n_novel=5, missing=((1, "neutral"),))
    ds = gen_dataset(cfg, 0)
    neutral = NAMES.index("neutral")
    assert neutral not in ds.classes_in(0, 1)
    rng = np.random.default_rng(0)
    for _ in range(300):
        b = sample_batch(ds, 16, rng)
        if b.y_d[0] == 1:
            assert neutral not in b.y_e
        ep = sample_episode(ds, 5, 1, 4, rng)
        if ep.domain_id == 1:
            assert neutral not in ep.class_map


# -------------------------------------------------------------- generation


def test_default_config_counts():
    cfg = DataConfig()
    assert cfg.n_base == 7 and cfg.n_domains == 5
    assert cfg.class_names == tuple(NAMES)


def test_gen_deterministic(small_ds):
    again = gen_dataset(small_ds.config, small_ds.seed)
    for k, v in small_ds.arrays().items():
        assert again.arrays()[k].tobytes() == v.tobytes()
    other = gen_dataset(small_ds.config, small_ds.seed + 1)
    assert not np.array_equal(other.raw, small_ds.raw)


def test_structure(small_ds):
    cfg = small_ds.config
    assert small_ds.domains_in(0) == list(range(cfg.n_domains))
    assert small_ds.domains_in(1) == [cfg.n_domains]
    for dm in range(cfg.n_domains):
        assert small_ds.classes_in(0, dm) == list(range(cfg.n_base))
    novel = small_ds.classes_in(1, cfg.n_domains)
    assert len(novel) == cfg.n_novel
    assert not set(novel) & set(range(cfg.n_base))


def test_noiseless_samples_are_transformed_means():
    cfg = DataConfig(noise=0.0, n_domains=2, per_class=5, raw_dim=8, n_novel=3)
    ds = gen_dataset(cfg, 1)
    for s in range(2):
        for dm in ds.domains_in(s):
            for c in ds.classes_in(s, dm):
                rows = ds.raw[ds.pool(s, dm, c)]
                assert np.array_equal(rows, np.broadcast_to(rows[0], rows.shape))
                np.testing.assert_allclose(rows[0], ds.domains[dm].apply(ds.classes[c].mean[None])[0], atol=1e-12)


def test_compound_midpoint_oracle():
    cfg = DataConfig(noise=0.0, n_domains=1, per_class=2, raw_dim=8, n_novel=4, mix_low=0.5, mix_high=0.5)
    ds = gen_dataset(cfg, 2)
    target = ds.domains[cfg.n_domains]
    for spec in ds.classes[cfg.n_base:]:
        a, b = spec.parents
        assert spec.mix == 0.5 and a != b
        mid = 0.5 * (target.apply(ds.classes[a].mean[None]) + target.apply(ds.classes[b].mean[None]))
        np.testing.assert_allclose(ds.raw[ds.pool(1, cfg.n_domains, spec.class_id)][0], mid[0], atol=1e-12)


def test_mixing_range(small_ds):
    for spec in small_ds.classes[small_ds.config.n_base:]:
        assert 0.35 <= spec.mix <= 0.65


def test_geometry(small_ds):
    cfg = small_ds.config
    means = np.array([c.mean for c in small_ds.classes[:cfg.n_base]])
    dist = np.linalg.norm(means[:, None] - means[None], axis=-1)
    off = dist[~np.eye(cfg.n_base, dtype=bool)]
    assert off.min() >= cfg.separation * cfg.noise
    for dm in small_ds.domains:
        assert np.linalg.cond(dm.matrix) < 100


def test_simplex_means_equidistant(rng):
    m = simplex_means(5, 9, 3.0, rng)
    d = np.linalg.norm(m[:, None] - m[None], axis=-1)
    np.testing.assert_allclose(d[~np.eye(5, dtype=bool)], 3.0, rtol=1e-12)


@pytest.mark.parametrize("bad", [dict(separation=0.0), dict(n_base=8), dict(raw_dim=3), dict(n_novel=22),
                                 dict(mix_low=0.7, mix_high=0.6), dict(noise=-1.0)])
def test_config_errors(bad):
    with pytest.raises(ConfigError):
        DataConfig(**bad)


def test_ill_conditioned_shift_rejected():
    with pytest.raises(ConfigError):
        gen_dataset(DataConfig(n_domains=1, per_class=2, raw_dim=8, n_novel=0, domain_shift=12.0), 0)


# ---------------------------------------------------------------- sampling


def test_batch_single_domain(small_ds):
    rng = np.random.default_rng(0)
    for _ in range(200):
        b = sample_batch(small_ds, 16, rng)
        assert b.raw.shape == (16, small_ds.config.raw_dim)
        assert len(set(b.y_d.tolist())) == 1
        assert np.all(small_ds.split[b.index] == 0)


def test_batch_domain_frequencies():
    cfg = DataConfig(n_domains=5, per_class=20, raw_dim=8, n_novel=0)
    ds = gen_dataset(cfg, 0)
    rng = np.random.default_rng(7)
    n = 10_000
    counts = np.bincount([sample_batch(ds, 1, rng).y_d[0] for _ in range(n)], minlength=5)
    p = 0.2
    sd = np.sqrt(n * p * (1 - p))
    assert np.all(np.abs(counts - n * p) < 5 * sd)


def test_batch_single_domain_dataset():
    ds = gen_dataset(DataConfig(n_domains=1, per_class=4, raw_dim=8, n_novel=0), 0)
    rng = np.random.default_rng(0)
    assert {int(sample_batch(ds, 3, rng).y_d[0]) for _ in range(20)} == {0}


def test_batch_with_replacement_warns(caplog):
    ds = gen_dataset(DataConfig(n_domains=1, n_base=2, per_class=3, raw_dim=8, n_novel=0), 0)
    with caplog.at_level(logging.WARNING):
        b = sample_batch(ds, 16, np.random.default_rng(0))
    assert b.raw.shape[0] == 16
    assert "replacement" in caplog.text


@pytest.mark.parametrize("pool,K", [("base", 1), ("base", 5), ("novel", 1), ("novel", 5)])
def test_episode_invariants(small_ds, pool, K):
    rng = np.random.default_rng(K)
    Q = 16
    for _ in range(1000 if K == 1 and pool == "novel" else 100):
        ep = sample_episode(small_ds, 5, K, Q, rng, class_pool=pool)
        assert ep.support.shape == (5 * K,) and ep.query.shape == (5 * Q,)
        assert not set(ep.support.tolist()) & set(ep.query.tolist())
        rows = np.concatenate([ep.support, ep.query])
        assert len(set(small_ds.y_d[rows].tolist())) == 1
        assert small_ds.y_d[rows[0]] == ep.domain_id
        # class-major layout and exact balance
        assert np.array_equal(small_ds.y_e[ep.support], np.repeat(ep.class_map, K))
        assert np.array_equal(small_ds.y_e[ep.query], np.repeat(ep.class_map, Q))
        assert np.array_equal(ep.query_labels, np.repeat(np.arange(5), Q))
        n_base = small_ds.config.n_base
        if pool == "base":
            assert np.all(ep.class_map < n_base) and np.all(small_ds.split[rows] == 0)
        else:
            assert np.all(ep.class_map >= n_base) and ep.domain_id == small_ds.target_domain


def test_episode_sizes_example(small_ds):
    ep = sample_episode(small_ds, 5, 1, 16, np.random.default_rng(0))
    assert len(ep.support) == 5 and len(ep.query) == 80
    assert ep.raw(small_ds).shape == (85, small_ds.config.raw_dim)


def test_episode_errors(small_ds):
    rng = np.random.default_rng(0)
    with pytest.raises(SamplingError, match="K=30"):
        sample_episode(small_ds, 5, 30, 16, rng)
    with pytest.raises(SamplingError, match="need 8"):
        sample_episode(small_ds, 8, 1, 1, rng)
    with pytest.raises(SamplingError):
        sample_episode(small_ds, 5, 0, 1, rng)
    with pytest.raises(ConfigError):
        sample_episode(small_ds, 5, 1, 1, rng, class_pool="all")


def test_export_import_reproduces_sampling(small_ds, tmp_path):
    path = tmp_path / "ds.cdn"
    small_ds.save(path)
    back = SyntheticDataset.load(path)
    assert back.config == small_ds.config and back.seed == small_ds.seed
    assert back.fingerprint() == small_ds.fingerprint()
    r1, r2 = np.random.default_rng(5), np.random.default_rng(5)
    for _ in range(50):
        a, b = sample_episode(small_ds, 5, 2, 3, r1), sample_episode(back, 5, 2, 3, r2)
        assert a.raw(small_ds).tobytes() == b.raw(back).tobytes()
        x, y = sample_batch(small_ds, 16, r1), sample_batch(back, 16, r2)
        assert x.raw.tobytes() == y.raw.tobytes() and np.array_equal(x.y_e, y.y_e)
    back.save(tmp_path / "again.cdn")
    assert (tmp_path / "again.cdn").read_bytes() == path.read_bytes()

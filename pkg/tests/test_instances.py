import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from fmukf import instances, ship
from fmukf.errors import DegenerateNormalizer, PoolExhausted
from fmukf.instances import (DsimConfig, InstancePool, build_pool, dsim, dsim_matrix, dsim_terms,
                             nearest_neighbor_scores, sample_candidate)

SMALL = DsimConfig(n_samples=200, n_rollouts=2, rollout_length=120, seed=5)


@pytest.fixture(scope="module")
def base():
    return ship.base_params()


def test_candidate_ranges(base):
    for seed in range(20):
        c = sample_candidate(base, seed, instance_id=seed)
        for k in base.values:
            if k in base.variation_params:
                assert 0.7 * abs(base[k]) <= abs(c[k]) <= 1.3 * abs(base[k])
                assert np.sign(c[k]) == np.sign(base[k])
            else:
                assert c[k] == base[k]
        assert c.instance_id == seed


def test_candidate_deterministic(base):
    a = sample_candidate(base, 123)
    b = sample_candidate(base, 123)
    assert a.values == b.values


def test_factor_uniformity(base):
    k = base.variation_params[0]
    draws = np.array([sample_candidate(base, s)[k] / base[k] for s in range(10_000)])
    ks = stats.kstest(draws, stats.uniform(0.7, 0.6).cdf).statistic
    assert ks < 0.02


def test_dsim_zero_on_self(base):
    c = sample_candidate(base, 1)
    assert dsim(c, c, base, SMALL) == 0.0
    assert dsim(base, base, base, SMALL) == 0.0


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10 ** 6), st.integers(0, 10 ** 6))
def test_dsim_symmetric_nonnegative(base, s1, s2):
    a = sample_candidate(base, s1)
    b = sample_candidate(base, s2)
    dab = dsim(a, b, base, SMALL)
    assert dab >= 0.0
    assert abs(dab - dsim(b, a, base, SMALL)) <= 1e-12


def test_dsim_matrix_matches_pairwise(base):
    thetas = [sample_candidate(base, s) for s in range(4)]
    d = dsim_matrix(thetas, base, SMALL)
    np.testing.assert_allclose(d, d.T, atol=0)
    assert np.all(np.diag(d) == 0)
    for i in range(4):
        for j in range(4):
            assert d[i, j] == pytest.approx(dsim(thetas[i], thetas[j], base, SMALL), rel=1e-9)


def test_dsim_monte_carlo_convergence(base):
    a = sample_candidate(base, 11)
    b = sample_candidate(base, 12)
    cfg = DsimConfig(n_samples=300, n_rollouts=4, rollout_length=200, seed=2)
    oracle_cfg = DsimConfig(n_samples=3000, n_rollouts=4, rollout_length=200, seed=2)
    doubled = DsimConfig(n_samples=600, n_rollouts=4, rollout_length=200, seed=2)
    oracle = dsim(a, b, base, oracle_cfg)
    terms = dsim_terms(a, b, base, cfg)
    # standard error of the square root of a mean, by the delta method
    se = terms.std(ddof=1) / np.sqrt(len(terms)) / (2 * np.sqrt(terms.mean()))
    d1 = dsim(a, b, base, cfg)
    d2 = dsim(a, b, base, doubled)
    assert abs(d2 - d1) < 2 * se
    assert abs(d1 - oracle) < 2 * se


def test_degenerate_normalizer(base, monkeypatch):
    xs = np.zeros((200, ship.STATE_DIM))
    us = np.zeros((200, ship.CONTROL_DIM))
    monkeypatch.setattr(instances, "operating_draws", lambda b, c: (xs, us))
    with pytest.raises(DegenerateNormalizer):
        dsim(base, base, base, SMALL)


def test_nearest_neighbor_scores():
    d = np.array([[0, 1, 4], [1, 0, 2], [4, 2, 0]], dtype=float)
    np.testing.assert_array_equal(nearest_neighbor_scores(d), [1, 1, 2])


# ------------------------------------------------------------ pool building

def test_two_hand_picked_candidates_kept(base):
    lo = base.with_values(instance_id=0, **{k: base[k] * 0.8 for k in base.variation_params})
    hi = base.with_values(instance_id=1, **{k: base[k] * 1.2 for k in base.variation_params})
    pool = build_pool(base, 2, seed=0, candidates=[lo, hi], dsim_cfg=SMALL,
                      probe_count=2, probe_length=100)
    assert [p.instance_id for p in pool.instances] == [0, 1]


@pytest.fixture(scope="module")
def desk_pool(base):
    return build_pool(base, 10, seed=3, dsim_cfg=SMALL, probe_count=2, probe_length=150)


def test_pool_filter_top_half(base, desk_pool):
    pool = desk_pool
    assert len(pool) == 10 and len(pool.discarded) == 10
    everyone = pool.instances + pool.discarded
    # brute force: recompute every pairwise dsim from scratch
    n = len(everyone)
    d = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            d[i, j] = d[j, i] = dsim(everyone[i], everyone[j], base, SMALL)
    nn = nearest_neighbor_scores(d)
    kept_nn, dropped_nn = nn[:10], nn[10:]
    assert kept_nn.min() >= dropped_nn.max() - 1e-12
    # filtering never lowers the minimum nearest-neighbor dissimilarity
    kept_d = d[:10, :10]
    assert nearest_neighbor_scores(kept_d).min() >= nn.min()


def test_pool_stable_sorted_reproducible(base, desk_pool):
    probes = instances.probe_commands(base, 2, 150, 3)
    assert all(ship.is_stable(p, probes) for p in desk_pool.instances)
    ids = [p.instance_id for p in desk_pool.instances]
    assert ids == sorted(ids) and len(set(ids)) == len(ids)
    again = build_pool(base, 10, seed=3, dsim_cfg=SMALL, probe_count=2, probe_length=150)
    assert [p.values for p in again.instances] == [p.values for p in desk_pool.instances]


def test_pool_roundtrip(desk_pool, tmp_path):
    desk_pool.save(tmp_path / "pool.json")
    back = InstancePool.load(tmp_path / "pool.json")
    assert [p.values for p in back.instances] == [p.values for p in desk_pool.instances]
    assert back.by_id(desk_pool.instances[0].instance_id).values == desk_pool.instances[0].values
    with pytest.raises(KeyError):
        back.by_id(-1)


def test_pool_exhausted(base, monkeypatch):
    monkeypatch.setattr(ship, "is_stable", lambda *a, **k: False)
    with pytest.raises(PoolExhausted):
        build_pool(base, 2, seed=0, dsim_cfg=SMALL, candidate_budget=5,
                   probe_count=1, probe_length=20)


def test_pool_rejects_tiny_target(base):
    with pytest.raises(ValueError):
        build_pool(base, 1)
    with pytest.raises(ValueError):
        DsimConfig(n_samples=50)

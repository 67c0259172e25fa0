import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from padiff.kernels import StepDistribution, srw
from padiff.mc_collision import (
    BLOCK,
    WalkPath,
    _collide_block,
    chi_mc,
    collision_batch,
    collision_time,
    exp_moment,
    exp_moment_from_samples,
    frozen_collision_batch,
    frozen_exp_moment,
    quenched_exp_moment,
    sample_walk,
    simulate_collisions,
)
from padiff.spectral import chi_eigen
from oracles import collision_moments, srw_return

A1, A3 = srw(1), srw(3)


def path(times, steps, start, t_max):
    return WalkPath(np.array(times, float), np.array(steps).reshape(len(times), len(start)), np.array(start), t_max)


def test_collision_time_by_hand():
    a = path([1.0, 3.0], [1, -1], [0], 4.0)
    b = path([2.0], [-1], [1], 4.0)
    # coincide on [1, 2) at 1 and on [3, 4] at 0
    rec = collision_time([a, b], 4.0)
    assert rec.T_total == 2.0
    assert collision_time([a, b], 2.5).T_total == 1.0
    assert collision_time([a, b], 0.0).T_total == 0.0


def test_walkpath_validation():
    with pytest.raises(ValueError):
        path([1.0, 1.0], [1, 1], [0], 2.0)
    with pytest.raises(ValueError):
        path([3.0], [1], [0], 2.0)


@pytest.mark.parametrize("m", [2, 3, 5])
def test_identical_paths(m):
    p = sample_walk(A3, 7.0, seed=4)
    rec = collision_time([p] * m, 7.0)
    assert rec.T_total == pytest.approx(7.0 * m * (m - 1) / 2, rel=1e-14)


def test_additivity_under_forced_separation():
    near = [sample_walk(A1, 5.0, seed=s) for s in range(3)]
    far = [sample_walk(A1, 5.0, seed=10 + s, start=[1000]) for s in range(2)]
    paths = near + far
    total = collision_time(paths, 5.0)
    K = collision_time(paths, 5.0, subset=[0, 1, 2])
    Kc = collision_time(paths, 5.0, subset=[3, 4])
    assert total.T_total == pytest.approx(K.T_total + Kc.T_total, abs=1e-12)
    assert total.T_total > 0


def test_collide_block_by_hand():
    offs = A1.offsets_array
    cum = np.cumsum(A1.probs_array)
    hold = np.array([[1.0, 1.0, 1.0, 5.0]])
    uwalk = np.array([[0.1, 0.6, 0.1, 0.1]])
    # offsets are sorted, so u < 1/2 steps to -1
    ustep = np.array([[0.7, 0.7, 0.2, 0.2]])
    T, P, ex, end = _collide_block(
        2, np.zeros((2, 1), np.int64), offs, cum, np.array([0.5, 2.5, 4.0]), 0, hold, uwalk, ustep, True
    )
    # together on [0,1), apart on [1,2), together on [2,3), apart afterwards
    assert T[0].tolist() == [0.5, 1.5, 2.0]
    assert P[0, 0] == 2.0
    assert not ex[0]
    assert end[0, :, 0].tolist() == [0, 1]


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 4), st.sampled_from([srw(1), srw(2)]), st.integers(0, 2**31), st.floats(0.5, 6.0))
def test_collide_block_matches_exact_integral(m, a, seed, t):
    rng = np.random.default_rng(seed)
    K = 200
    hold = rng.standard_exponential((1, K)) / m
    uwalk = rng.random((1, K))
    ustep = rng.random((1, K))
    offs = a.offsets_array
    cum = np.cumsum(a.probs_array)
    cum[-1] = 1.0
    T, P, ex, _ = _collide_block(m, np.zeros((m, a.dim), np.int64), offs, cum, np.array([t]), 0, hold, uwalk, ustep, True)
    assert not ex[0]
    # rebuild each walker's path from the same uniforms
    times = np.cumsum(hold[0])
    walker = np.minimum((uwalk[0] * m).astype(int), m - 1)
    step = np.searchsorted(cum, ustep[0], side="right")
    paths = []
    for w in range(m):
        sel = (walker == w) & (times < t)
        paths.append(WalkPath(times[sel], offs[step[sel]].reshape(-1, a.dim), np.zeros(a.dim), t))
    rec = collision_time(paths, t)
    assert T[0, 0] == pytest.approx(rec.T_total, abs=1e-12)
    for p, pq in enumerate(itertools.combinations(range(m), 2)):
        assert P[0, p] == pytest.approx(rec.pairs[pq], abs=1e-12)


def test_simulate_collisions_record():
    r1 = simulate_collisions(3, A3, 5.0, seed=9, replica=17)
    r2 = simulate_collisions(3, A3, 5.0, seed=9, replica=17)
    assert r1 == r2
    assert r1.T_total == pytest.approx(sum(r1.pairs.values()), abs=1e-12)
    assert all(0 <= v <= 5.0 for v in r1.pairs.values())
    assert simulate_collisions(3, A3, 0.0, seed=9).T_total == 0.0
    with pytest.raises(ValueError):
        simulate_collisions(2, A3, -1.0, seed=0)


def test_replicas_do_not_depend_on_batching():
    full, _ = collision_batch(2, A3, [3.0, 6.0], 3 * BLOCK, seed=2)
    part, _ = collision_batch(2, A3, [3.0, 6.0], 1000, seed=2, first_replica=1500)
    assert np.array_equal(full[1500:2500], part)
    single = simulate_collisions(2, A3, 6.0, seed=2, replica=2100)
    assert single.T_total == full[2100, 1]
    other, _ = collision_batch(2, A3, [3.0, 6.0], 3 * BLOCK, seed=3)
    assert not np.array_equal(full, other)


def test_horizons_are_nested():
    T, _ = collision_batch(3, A3, [1.0, 2.0, 4.0], 2000, seed=1)
    assert np.all(np.diff(T, axis=1) >= 0)
    assert np.all(T[:, 0] <= 3 * 1.0 + 1e-12)


def test_collision_moments_against_oracle():
    m1, m2 = collision_moments(10.0)
    T, _ = collision_batch(2, A3, [10.0], 200_000, seed=5)
    x = T[:, 0]
    se1 = x.std() / math.sqrt(len(x))
    se2 = (x**2).std() / math.sqrt(len(x))
    assert abs(x.mean() - m1) < 4 * se1
    assert abs((x**2).mean() - m2) < 4 * se2


def test_exp_moment_b0():
    r = exp_moment(2, A3, 0.0, 5.0, 5000, seed=1)
    assert r.estimate == 1.0 and r.se == 0.0 and r.log_estimate == 0.0
    assert not r.ci_refused
    with pytest.raises(ValueError):
        exp_moment(2, A3, -0.1, 5.0, 10, seed=1)


def test_exp_moment_small_b_expansion():
    b, t = 0.05, 10.0
    m1, m2 = collision_moments(t)
    ref = 1 + b * m1 + b * b * m2 / 2
    r = exp_moment(2, A3, b, t, 200_000, seed=8)
    # third-order term b^3 E[T^3]/6 is below 1e-4 here
    assert abs(r.estimate - ref) < 4 * r.se + 1e-4


@pytest.mark.parametrize("b", [0.0, 0.3])
def test_exp_moment_se_scaling(b):
    ns = [10_000 * 2**k for k in range(5)]
    res = [exp_moment(2, A3, b, 5.0, n, seed=k, batches=128) for k, n in enumerate(ns)]
    ses = [r.se_T if b == 0 else r.se for r in res]
    slope = np.polyfit(np.log(ns), np.log(ses), 1)[0]
    assert slope == pytest.approx(-0.5, abs=0.15)


def test_heavy_tail_alarm():
    x = np.zeros(1000)
    x[0] = 10.0
    r = exp_moment_from_samples(x, 2.0, 10.0)
    assert r.ci_refused and r.tail_share > 0.5
    assert math.isnan(r.se) and math.isnan(r.se_log)
    ok = exp_moment_from_samples(np.linspace(0, 1, 1000), 0.5, 1.0)
    assert not ok.ci_refused and ok.tail_share < 0.05


def test_log_sum_exp_is_stable():
    r = exp_moment_from_samples(np.full(100, 1000.0), 1.0, 1000.0)
    assert r.log_estimate == pytest.approx(1000.0)
    assert math.isinf(r.estimate)


def test_chi_mc_b0():
    c = chi_mc(2, A3, 0.0, [5, 10], 1000, seed=1)
    assert c.ci_low <= 0.0 <= c.ci_high


def test_chi_mc_recurrent_positive():
    c = chi_mc(2, A1, 0.2, [25, 50, 75, 100], 20_000, seed=4)
    assert c.ci_low > 0


@pytest.mark.slow
def test_chi_mc_matches_chi_eigen_supercritical():
    # exact ODE solution puts the local slope of log E within 2e-3 of the
    # limit for t >= 10, so the grid starts there
    ref = chi_eigen(2, 1.9, A3, 8).value
    err = abs(ref - chi_eigen(2, 1.9, A3, 4).value)
    c = chi_mc(2, A3, 1.9, [10, 12, 14, 16], 4_000_000, seed=11)
    assert c.alarm
    assert c.ci_low - err <= ref <= c.ci_high + err


def test_frozen_origin_path():
    t = 6.0
    frozen = path([], [], [0, 0, 0], t)
    T = frozen_collision_batch(frozen, A3, [t], 100_000, seed=3)[:, 0]
    ref = quad(lambda s: srw_return(s, 3), 0, t)[0]
    assert abs(T.mean() - ref) < 4 * T.std() / math.sqrt(len(T))
    assert np.all((T >= 0) & (T <= t))


def test_frozen_and_quenched_moments():
    z = sample_walk(A3, 8.0, seed=1)
    assert frozen_exp_moment(z, A3, 0.0, 8.0, 500, seed=1).estimate == 1.0
    q1 = quenched_exp_moment(A3, 0.5, 8.0, xi_seed=3, replicas=2000, seed=4)
    q2 = quenched_exp_moment(A3, 0.5, 8.0, xi_seed=3, replicas=2000, seed=4)
    assert q1 == q2 and q1.estimate >= 1.0


def test_torus_wraps():
    T, _ = collision_batch(2, A1, [50.0], 4000, seed=1, torus=3)
    # two walkers on a 3-cycle coincide a third of the time in the long run
    assert T[:, 0].mean() / 50.0 == pytest.approx(1 / 3, abs=0.03)

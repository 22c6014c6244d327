import itertools
import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from coexist.fsc import FscPolicy
from coexist.inference import (
    Batch,
    DegenerateHistory,
    InferenceAbort,
    PointEstimatePolicy,
    PriorHyperparams,
    SufficientStats,
    VariationalState,
    cavi_iteration,
    elbo,
    elbo_frozen,
    empirical_value,
    expected_log_sticks,
    forward_backward,
    geometric_weights,
    init_variational_state,
    normalized_reward,
    nu_weights,
    point_estimate,
    prune_nodes,
    run_cavi,
    stick_weights,
    sufficient_stats,
    update_state,
)
from coexist.special import digamma
from factories import random_batch, random_point, random_state
from oracles import enumerate_history

PRIORS = PriorHyperparams()


# -- fixtures ------------------------------------------------------------------------

def point_tables(p):
    return p.eta, p.pi, p.omega


def brute_nu(points, batch):
    """nu_t^k, likelihoods by node-path enumeration and the value by a plain double sum."""
    k_n, t1, n_ag = batch.actions.shape
    num = np.zeros((k_n, t1))
    for k in range(k_n):
        for t in range(t1):
            lik = 1.0
            for n, p in enumerate(points):
                lik *= enumerate_history(*point_tables(p), batch.actions[k, :t + 1, n],
                                         batch.observations[k, :t, n])[0]
            num[k, t] = batch.gamma ** t * (batch.rewards[k, t] - batch.r_min) * lik \
                / math.exp(batch.log_behavior[k, t])
    value = num.sum() / k_n
    return num / value, value


# -- stick breaking and point estimates ------------------------------------------------

def test_expected_log_sticks_examples():
    vs = random_state(np.random.default_rng(0), 2, 3, 2)
    vs.delta[:] = 1.0
    vs.mu[:] = 1.0
    log_eta, _ = expected_log_sticks(vs)
    assert log_eta[0] == pytest.approx(-1.0, abs=1e-12)        # psi(1) - psi(2)
    assert log_eta[1] == pytest.approx(-1.0, abs=1e-12)        # leftover: E ln(1 - u_1) = -1
    one = random_state(np.random.default_rng(1), 1, 3, 2)
    log_eta, log_omega = expected_log_sticks(one)
    assert log_eta[0] == 0.0 and np.all(log_omega == 0.0)


def test_expected_log_sticks_against_closed_form():
    rng = np.random.default_rng(2)
    vs = random_state(rng, 4, 2, 2)
    log_eta, _ = expected_log_sticks(vs)
    d, m = vs.delta, vs.mu
    for i in range(4):
        want = sum(float(mpmath.digamma(m[j]) - mpmath.digamma(d[j] + m[j])) for j in range(i))
        if i < 3:
            want += float(mpmath.digamma(d[i]) - mpmath.digamma(d[i] + m[i]))
        assert log_eta[i] == pytest.approx(want, abs=1e-11)


@settings(max_examples=100, deadline=None)
@given(z=st.integers(1, 6), seed=st.integers(0, 2 ** 32 - 1))
def test_point_estimate_subnormalized(z, seed):
    vs = random_state(np.random.default_rng(seed), z, 3, 2)
    p = point_estimate(vs)
    assert p.eta.sum() <= 1.0 + 1e-12
    assert np.all(p.pi.sum(axis=1) <= 1.0 + 1e-12)
    assert np.all(p.omega.sum(axis=-1) <= 1.0 + 1e-12)
    assert np.all(p.eta > 0) and np.all(p.omega > 0)


@settings(max_examples=100)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=12))
def test_stick_weights_sum_to_one(u):
    w = stick_weights(np.array(u))
    assert abs(w.sum() - 1.0) <= 1e-12
    assert np.all(w >= 0)


def test_point_estimate_examples():
    rng = np.random.default_rng(3)
    vs = random_state(rng, 1, 7, 2)
    vs.phi[:] = 1.0
    p = point_estimate(vs)
    assert np.allclose(p.pi, math.exp(digamma(1.0) - digamma(7.0)), rtol=1e-14)
    assert p.eta[0] == 1.0
    vs.phi[0] = [1000.0] + [1.0] * 6
    p = point_estimate(vs)
    want = math.exp(float(mpmath.digamma(1000) - mpmath.digamma(1006)))
    assert p.pi[0, 0] == pytest.approx(want, rel=1e-12)
    assert p.pi[0, 0] > 0.99


# -- forward-backward ---------------------------------------------------------------------

@settings(max_examples=1000, deadline=None)
@given(z=st.integers(1, 3), t=st.integers(0, 4), seed=st.integers(0, 2 ** 32 - 1))
def test_forward_backward_matches_enumeration(z, t, seed):
    rng = np.random.default_rng(seed)
    p = random_point(rng, z, 3, 2)
    acts, obs = rng.integers(0, 3, t + 1), rng.integers(0, 2, t)
    msg = forward_backward(p, acts, obs)
    lik, single, pair = enumerate_history(p.eta, p.pi, p.omega, acts, obs)
    assert abs(msg.likelihood - lik) <= 1e-10 * lik
    assert np.max(np.abs(msg.singleton() - single)) <= 1e-10
    if t:
        pw = msg.pairwise()
        assert np.max(np.abs(pw - pair)) <= 1e-10
        assert np.max(np.abs(pw.sum(axis=2) - msg.singleton()[:-1])) <= 1e-10
        assert np.max(np.abs(pw.sum(axis=1) - msg.singleton()[1:])) <= 1e-10
    assert np.all(msg.beta[-1] == 1.0)


def test_forward_backward_one_node():
    rng = np.random.default_rng(4)
    p = random_point(rng, 1, 4, 3)
    acts, obs = rng.integers(0, 4, 5), rng.integers(0, 3, 4)
    msg = forward_backward(p, acts, obs)
    pi = p.pi[0, acts]
    scale = np.cumprod(msg.scales)
    alpha = msg.alpha[:, 0] * scale
    beta = msg.beta[:, 0] * (scale[-1] / scale)
    assert np.allclose(alpha, np.cumprod(pi), rtol=1e-13)
    tail = np.array([np.prod(pi[tau + 1:]) for tau in range(5)])
    assert np.allclose(beta, tail, rtol=1e-13)


def test_forward_backward_works_on_fsc_and_flags_impossible_history():
    p = FscPolicy(np.array([1.0]), np.array([[1.0, 0.0]]), np.ones((1, 2, 1, 1)))
    assert forward_backward(p, [0, 0], [0]).likelihood == 1.0
    with pytest.raises(DegenerateHistory):
        forward_backward(p, [0, 1], [0])


def test_long_history_does_not_underflow():
    rng = np.random.default_rng(5)
    p = random_point(rng, 3, 7, 9)
    acts, obs = rng.integers(0, 7, 400), rng.integers(0, 9, 399)
    msg = forward_backward(p, acts, obs)
    assert np.isfinite(msg.log_likelihood) and msg.log_likelihood < -700
    assert np.allclose(msg.singleton().sum(axis=1), 1.0)


# -- reweighting -------------------------------------------------------------------------

@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), z=st.integers(1, 3), n=st.integers(1, 2), t=st.integers(0, 3))
def test_nu_matches_bruteforce_and_normalizes(seed, z, n, t):
    rng = np.random.default_rng(seed)
    batch = random_batch(rng, 3, t, n, 3, 2)
    if batch.rewards.max() == batch.r_min:
        return
    points = [random_point(rng, z, 3, 2) for _ in range(n)]
    nu = nu_weights(points, batch)
    want, _ = brute_nu(points, batch)
    assert np.allclose(nu, want, rtol=1e-9, atol=1e-12)
    # (1/K) sum_{k,t} sum over joint node paths of prod_n q(z_n) = 1
    total = 0.0
    k_n = batch.num_episodes
    for k in range(k_n):
        for tt in range(t + 1):
            mass = 1.0
            for ag, p in enumerate(points):
                a_seq, o_seq = batch.actions[k, :tt + 1, ag], batch.observations[k, :tt, ag]
                lik = enumerate_history(p.eta, p.pi, p.omega, a_seq, o_seq)[0]
                paths = itertools.product(range(z), repeat=tt + 1)
                post = 0.0
                for path in paths:
                    w = p.eta[path[0]] * p.pi[path[0], a_seq[0]]
                    for s in range(1, tt + 1):
                        w *= p.omega[path[s - 1], a_seq[s - 1], o_seq[s - 1], path[s]] * p.pi[path[s], a_seq[s]]
                    post += w / lik
                mass *= post
            total += nu[k, tt] * mass / k_n
    assert abs(total - 1.0) <= 1e-8


def test_nu_examples():
    # target equals behaviour, one step: nu = 1
    p = point_estimate(random_state(np.random.default_rng(6), 2, 3, 2))
    a0 = 1
    prob = float(np.sum(p.eta * p.pi[:, a0]))
    batch = Batch(np.array([[[a0]]]), np.zeros((1, 0, 1), int), np.array([[2.0]]),
                  np.array([[math.log(prob)]]), 0.9, 0.0)
    assert nu_weights([p], batch)[0, 0] == pytest.approx(1.0, abs=1e-14)
    # a step whose reward sits at the floor gets zero weight
    batch = Batch(np.array([[[0], [1]]]), np.zeros((1, 1, 1), int), np.array([[0.0, 3.0]]),
                  np.log(np.array([[0.5, 0.25]])), 0.9, 0.0)
    nu = nu_weights([p], batch)
    assert nu[0, 0] == 0.0 and nu[0, 1] == pytest.approx(1.0, abs=1e-14)


def test_all_rewards_at_floor_aborts():
    p = point_estimate(random_state(np.random.default_rng(7), 2, 3, 2))
    batch = Batch(np.zeros((2, 2, 1), int), np.zeros((2, 1, 1), int), np.zeros((2, 2)),
                  np.full((2, 2), -1.0), 0.9, 0.0)
    with pytest.raises(InferenceAbort):
        nu_weights([p], batch)
    assert empirical_value(batch, [p]) == 0.0


def test_flat_rewards_abort_batch_construction():
    from coexist.decpomdp import Trajectory
    tr = Trajectory(np.zeros((2, 1), int), np.zeros((1, 1), int), np.ones(2), np.full((2, 1), 0.5),
                    np.zeros((2, 1), int), np.ones((2, 1), int))
    with pytest.raises(InferenceAbort):
        Batch.from_trajectories([tr, tr], 0.9)


def test_empirical_value_examples():
    rng = np.random.default_rng(8)
    # target = behaviour: every importance ratio is one
    p = FscPolicy.from_unnormalized(rng.random(2) + 0.1, rng.random((2, 3)) + 0.1, rng.random((2, 3, 2, 2)) + 0.1)
    batch = random_batch(rng, 4, 3, 1, 3, 2)
    for k in range(4):
        for t in range(4):
            lik = enumerate_history(p.eta, p.pi, p.omega, batch.actions[k, :t + 1, 0], batch.observations[k, :t, 0])[0]
            batch.log_behavior[k, t] = math.log(lik)
    plain = np.mean(np.sum(0.9 ** np.arange(4) * (batch.rewards - batch.r_min), axis=1))
    assert empirical_value(batch, [p]) == pytest.approx(plain, rel=1e-12)
    # hand-built: two one-step episodes, one-node target with pi = (0.25, 0.75)
    tgt = FscPolicy(np.array([1.0]), np.array([[0.25, 0.75]]), np.ones((1, 2, 1, 1)))
    hand = Batch(np.array([[[0]], [[1]]]), np.zeros((2, 0, 1), int), np.array([[3.0], [5.0]]),
                 np.log(np.array([[0.5], [0.5]])), 0.9, 1.0)
    # (1/2) [ (3-1) * 0.25/0.5 + (5-1) * 0.75/0.5 ] = (1 + 6) / 2
    assert empirical_value(hand, [tgt]) == pytest.approx(3.5, abs=1e-14)


def test_normalized_rewards_and_mixture_weights():
    rng = np.random.default_rng(9)
    r = rng.random(1000) * 50
    rn = normalized_reward(r, r.min(), r.max())
    assert rn.min() == 0.0 and rn.max() == 1.0
    for gamma in (0.0, 0.5, 0.9, 0.99):
        for horizon in (0, 1, 50):
            assert geometric_weights(gamma, horizon).sum() == pytest.approx(1 - gamma ** (horizon + 1), abs=1e-15)
    with pytest.raises(InferenceAbort):
        normalized_reward(r, 1.0, 1.0)


# -- expected counts -----------------------------------------------------------------------

@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), z=st.integers(1, 3), n=st.integers(1, 3), t=st.integers(0, 5))
def test_aggregated_counts_match_per_prefix_sum(seed, z, n, t):
    rng = np.random.default_rng(seed)
    a_n, o_n, k_n = 3, 2, 3
    batch = random_batch(rng, k_n, t, n, a_n, o_n)
    if batch.rewards.max() == batch.r_min:
        return
    states = [random_state(rng, z, a_n, o_n) for _ in range(n)]
    stats = sufficient_stats(states, batch)
    points = [point_estimate(s) for s in states]
    nu, value = brute_nu(points, batch)
    for ag, (p, st_) in enumerate(zip(points, stats)):
        init = np.zeros(z)
        emit = np.zeros((z, a_n))
        trans = np.zeros((z, a_n, o_n, z))
        for k in range(k_n):
            for tt in range(t + 1):
                acts = batch.actions[k, :tt + 1, ag]
                obs = batch.observations[k, :tt, ag]
                msg = forward_backward(p, acts, obs)
                single, w = msg.singleton(), nu[k, tt] / k_n
                init += w * single[0]
                for tau in range(tt + 1):
                    emit[:, acts[tau]] += w * single[tau]
                if tt:
                    pair = msg.pairwise()
                    for tau in range(1, tt + 1):
                        trans[:, acts[tau - 1], obs[tau - 1], :] += w * pair[tau - 1]
        assert np.allclose(st_.initial, init, rtol=1e-9, atol=1e-12)
        assert np.allclose(st_.emit, emit, rtol=1e-9, atol=1e-12)
        assert np.allclose(st_.trans, trans, rtol=1e-9, atol=1e-12)
        assert st_.log_value == pytest.approx(math.log(value), abs=1e-10)
    # total initial mass is (1/K) sum nu = 1
    assert all(abs(s.initial.sum() - 1.0) < 1e-10 for s in stats)


# -- closed-form updates ----------------------------------------------------------------------

def test_gamma_shapes_fixed_by_truncation():
    rng = np.random.default_rng(10)
    batch = random_batch(rng, 4, 3, 2, 3, 2)
    pri = PriorHyperparams(c=0.1, e=0.1)
    states = [random_state(rng, 5, 3, 2) for _ in range(2)]
    for _ in range(3):
        states = cavi_iteration(states, batch, pri)
        for s in states:
            assert s.g == 0.1 + 5 == 5.1
            assert np.all(s.a == 0.1 + 5)
            assert s.h > 0


def test_prior_recovery_with_empty_counts():
    rng = np.random.default_rng(11)
    vs = random_state(rng, 3, 4, 2)
    zero = SufficientStats(np.zeros(3), np.zeros((3, 4)), np.zeros((3, 4, 2, 3)), point_estimate(vs), 0.0)
    out = update_state(vs, zero, PRIORS)
    assert np.all(out.delta == 1.0) and np.all(out.sigma == 1.0)
    assert np.all(out.phi == PRIORS.theta)


def test_single_step_adds_nu_mass_to_taken_action():
    rng = np.random.default_rng(12)
    vs = random_state(rng, 1, 4, 2)
    batch = Batch(np.array([[[2]]]), np.zeros((1, 0, 1), int), np.array([[5.0]]), np.array([[math.log(0.25)]]),
                  0.9, 0.0)
    (out,) = cavi_iteration([vs], batch, PRIORS)
    nu = nu_weights([point_estimate(vs)], batch)[0, 0]
    assert nu == pytest.approx(1.0, abs=1e-14)
    assert np.allclose(out.phi[0], PRIORS.theta + nu * np.eye(4)[2], rtol=0, atol=1e-14)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), z=st.integers(1, 4),
       order=st.permutations(["u", "pi", "v", "rho", "alpha"]))
def test_each_coordinate_update_ascends(seed, z, order):
    rng = np.random.default_rng(seed)
    batch = random_batch(rng, 3, 4, 2, 3, 2)
    pri = PriorHyperparams(c=0.1 + rng.random(), d=1 + 100 * rng.random(), e=0.1 + rng.random(),
                           f=1 + 100 * rng.random(), theta=0.5 + rng.random())
    states = [random_state(rng, z, 3, 2) for _ in range(2)]
    stats = sufficient_stats(states, batch)
    before = elbo_frozen(states, stats, pri)
    for name in order:
        states = [update_state(s, st_, pri, coordinates=(name,)) for s, st_ in zip(states, stats)]
        after = elbo_frozen(states, stats, pri)
        assert after >= before - 1e-8, name
        before = after


COORD_PARAMS = {"u": ("delta", "mu"), "pi": ("phi",), "v": ("sigma", "lam"), "rho": ("g", "h"),
                "alpha": ("a", "b")}


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), z=st.integers(1, 3), name=st.sampled_from(sorted(COORD_PARAMS)))
def test_coordinate_updates_are_exact_maximizers(seed, z, name):
    rng = np.random.default_rng(seed)
    batch = random_batch(rng, 3, 3, 1, 3, 2)
    (vs,) = [random_state(rng, z, 3, 2)]
    (stats,) = sufficient_stats([vs], batch)
    best = update_state(vs, stats, PRIORS, coordinates=(name,))
    top = elbo_frozen([best], [stats], PRIORS)
    for _ in range(5):
        bumped = {}
        for field_name in COORD_PARAMS[name]:
            val = getattr(best, field_name)
            bumped[field_name] = val * np.exp(0.05 * rng.standard_normal(np.shape(val)))
        trial = VariationalState(**{**{f: getattr(best, f) for f in
                                       ("delta", "mu", "phi", "sigma", "lam", "g", "h", "a", "b")}, **bumped})
        if name == "rho":
            trial.g = best.g  # the shape is pinned; only the rate is free
        assert elbo_frozen([trial], [stats], PRIORS) <= top + 1e-10


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), z=st.integers(1, 4))
def test_full_sweeps_raise_elbo(seed, z):
    rng = np.random.default_rng(seed)
    batch = random_batch(rng, 4, 5, 2, 3, 2)
    states = [random_state(rng, z, 3, 2) for _ in range(2)]
    prev = elbo(states, batch, PRIORS)
    for _ in range(5):
        states = cavi_iteration(states, batch, PRIORS)
        cur = elbo(states, batch, PRIORS)
        assert cur >= prev - 1e-8 * abs(prev)
        prev = cur


def test_elbo_equals_frozen_bound_at_its_own_point_estimate():
    rng = np.random.default_rng(13)
    batch = random_batch(rng, 4, 5, 2, 3, 2)
    states = [random_state(rng, 3, 3, 2) for _ in range(2)]
    stats = sufficient_stats(states, batch)
    assert elbo_frozen(states, stats, PRIORS) == pytest.approx(elbo(states, batch, PRIORS), abs=1e-10)


def test_run_cavi_stops_on_relative_change():
    rng = np.random.default_rng(14)
    batch = random_batch(rng, 6, 6, 2, 3, 2)
    states = [random_state(rng, 3, 3, 2) for _ in range(2)]
    out, history, converged = run_cavi(states, batch, PRIORS, tol=1e-5, max_sweeps=200)
    assert converged and len(history) < 200
    assert abs((history[-1] - history[-2]) / history[-2]) < 1e-5
    _, short, flag = run_cavi(states, batch, PRIORS, tol=1e-30, max_sweeps=3)
    assert len(short) == 3 and not flag


# -- pruning ------------------------------------------------------------------------------------

def state_with_occupancy(occ, a=3, o=2):
    rng = np.random.default_rng(15)
    z = len(occ)
    vs = random_state(rng, z, a, o)
    emit = np.outer(occ, np.ones(a) / a)
    trans = rng.random((z, a, o, z)) * np.asarray(occ)[:, None, None, None]
    stats = SufficientStats(np.asarray(occ) / np.sum(occ), emit, trans, point_estimate(vs), 0.0)
    return update_state(vs, stats, PRIORS)


def test_prune_to_single_node():
    vs = state_with_occupancy([5.0, 0.0, 0.0])
    out = prune_nodes(vs, 1e-3, PRIORS)
    assert out.num_nodes == 1 and out.g == PRIORS.e + 1


def test_no_pruning_under_uniform_occupancy():
    vs = state_with_occupancy([1.0, 1.0, 1.0, 1.0])
    assert prune_nodes(vs, 0.2, PRIORS) is vs


def test_prune_exactly_the_negligible_node():
    vs = state_with_occupancy([3.0, 1e-6, 2.0])
    out = prune_nodes(vs, 1e-3, PRIORS)
    assert out.num_nodes == 2
    # survivors re-indexed by decreasing occupancy: old 0 then old 2
    assert np.allclose(out.stats.emit, vs.stats.emit[[0, 2]])
    assert np.allclose(out.stats.trans, vs.stats.trans[[0, 2]][..., [0, 2]])
    assert np.allclose(out.phi, PRIORS.theta + vs.stats.emit[[0, 2]])
    assert np.all(out.a == PRIORS.c + 2)


def test_prune_argument_checks():
    vs = state_with_occupancy([1.0, 1.0])
    with pytest.raises(ValueError):
        prune_nodes(vs, 0.0, PRIORS)
    vs.stats = None
    with pytest.raises(ValueError):
        prune_nodes(vs, 0.1, PRIORS)


def test_init_from_fsc():
    rng = np.random.default_rng(16)
    fsc = FscPolicy.from_unnormalized(rng.random(4) + 0.1, rng.random((4, 3)) + 0.1, rng.random((4, 3, 2, 4)) + 0.1)
    vs = init_variational_state(fsc, PRIORS)
    vs.check()
    assert vs.num_nodes == 4 and vs.g == PRIORS.e + 4
    assert np.allclose(vs.phi, PRIORS.theta + fsc.pi)
    assert np.allclose(vs.delta[:-1], 1 + fsc.eta[:-1]) and vs.delta[-1] == 1.0


def test_state_validation():
    vs = random_state(np.random.default_rng(17), 2, 3, 2)
    vs.phi[0, 0] = -1.0
    with pytest.raises(InferenceAbort):
        vs.check()
    with pytest.raises(ValueError):
        PriorHyperparams(c=0.0)

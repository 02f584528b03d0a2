import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pfas.channel import ArrayGeometry, GridModel, exact_channel_matrix, make_grid, project_scene_to_grid, synth_scene
from pfas.errors import RankDeficientError
from pfas.patterns import synth_pattern_set
from pfas.precoding import (
    PENALTY,
    DownlinkChannelSet,
    PrecoderConfig,
    discrete_rate,
    group_opt,
    mix_channel,
    nonfas,
    objective,
    objective_and_grad,
    optimize_states,
    random_baseline,
    rate,
    refine_states,
    reparam,
    round_to_discrete,
    upper_bound,
    zf_precoder,
)


def _crandn(rng, *shape):
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / math.sqrt(2)


def _random_set(rng, k=2, n_s=3, m=4, n_c=5):
    return DownlinkChannelSet(_crandn(rng, k, n_s, m, n_c))


def _exhaustive(channels, p_t, nv=1.0):
    best = -np.inf
    for s in itertools.product(range(channels.n_states), repeat=channels.n_antennas):
        best = max(best, discrete_rate(channels, np.array(s), p_t, nv)[0])
    return best


def _one_hot_latent(states, n_s, big=60.0):
    latent = np.zeros((n_s, len(states)))
    latent[states, np.arange(len(states))] = big
    return latent


# --------------------------------------------------------------------------
# zero forcing


def test_zf_single_user_closed_form():
    h = np.array([[1.0 + 0j], [1j]])  # ||h||^2 = 2
    w, gamma = zf_precoder(h, 1.0)
    assert gamma == pytest.approx(2.0)
    np.testing.assert_allclose(w, math.sqrt(2) * h.conj() / 2)


def test_zf_orthonormal_columns(rng):
    h = np.linalg.qr(_crandn(rng, 6, 3))[0]
    w, gamma = zf_precoder(h, 1.0)
    assert gamma == pytest.approx(1.0)
    off = h.T @ w - np.diag(np.diag(h.T @ w))
    assert np.max(np.abs(off)) <= 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.1, 100.0))
def test_zf_diagonalizes_and_meets_power(seed, p_t):
    rng = np.random.default_rng(seed)
    h = _crandn(rng, 4, 2)
    w, gamma = zf_precoder(h, p_t)
    np.testing.assert_allclose(h.T @ w, math.sqrt(gamma) * np.eye(2), atol=1e-10 * math.sqrt(gamma))
    assert np.linalg.norm(w) ** 2 == pytest.approx(2 * p_t, rel=1e-9)


def test_zf_rank_deficient():
    h = np.ones((4, 2), complex)
    with pytest.raises(RankDeficientError) as info:
        zf_precoder(h, 1.0)
    assert info.value.condition > 1e10


def test_zf_rejects_more_users_than_antennas(rng):
    with pytest.raises(ValueError):
        zf_precoder(_crandn(rng, 2, 3), 1.0)


@pytest.mark.parametrize("gamma,expect", [(1.0, 1.0), (0.0, 0.0), (3.0, 2.0)])
def test_rate(gamma, expect):
    assert rate(gamma, 1.0) == expect


def test_rate_rejects_negative():
    with pytest.raises(ValueError):
        rate(-1.0)


# --------------------------------------------------------------------------
# relaxation


def test_reparam_uniform():
    s = reparam(np.zeros(12))
    np.testing.assert_allclose(s, (1 / 12) ** 2)
    assert np.sum(np.sqrt(s)) == pytest.approx(1.0)


def test_reparam_peaked():
    s = reparam(np.array([10.0] + [0.0] * 11))
    assert s[0] >= 0.99
    assert np.all(s[1:] <= 1e-4)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-20, 20), min_size=2, max_size=12), st.floats(-50, 50))
def test_reparam_shift_invariant(x, c):
    x = np.array(x)
    np.testing.assert_allclose(reparam(x + c), reparam(x), rtol=1e-9, atol=1e-300)


@pytest.mark.parametrize(
    "weights,expect",
    [([0.01, 0.98, 0.01], 1), ([0.25, 0.25, 0.25, 0.25], 0), ([0.5, 0.3, 0.2], 0)],
)
def test_round_to_discrete(weights, expect):
    assert round_to_discrete(np.array(weights)[:, None])[0] == expect


def test_mix_channel_one_hot_matches_channel(rng):
    ch = _random_set(rng)
    states = np.array([2, 0, 1, 1])
    w = np.zeros((3, 4))
    w[states, np.arange(4)] = 1.0
    np.testing.assert_allclose(mix_channel(ch, w), ch.channel(states))


def test_objective_one_hot_equals_discrete_rate(rng):
    ch = _random_set(rng)
    states = np.array([1, 2, 0, 2])
    value = objective(_one_hot_latent(states, 3), ch, 10.0)
    assert value == pytest.approx(discrete_rate(ch, states, 10.0)[0], rel=1e-12)


def test_objective_single_link():
    h = np.array([[[[0.6 - 0.8j, 1.0, 0.5j]]]])  # K=1, N_s=1, M=1, N_c=3
    ch = DownlinkChannelSet(h)
    expect = np.mean(np.log2(1 + 4.0 * np.abs(h[0, 0, 0]) ** 2 / 2.0))
    assert objective(np.zeros((1, 1)), ch, 4.0, 2.0) == pytest.approx(expect)


def test_objective_penalty_on_collapse():
    resp = np.ones((2, 2, 2, 3), complex)
    value, grad, flag = objective_and_grad(np.zeros((2, 2)), DownlinkChannelSet(resp), 1.0)
    assert flag and value == PENALTY and not grad.any()


@pytest.mark.parametrize("seed", range(5))
def test_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    ch = _random_set(rng, k=2, n_s=3, m=3, n_c=4)
    latent = rng.standard_normal((3, 3))
    _, grad, _ = objective_and_grad(latent, ch, 5.0)
    fd = np.zeros_like(latent)
    h = 1e-4
    for idx in np.ndindex(latent.shape):
        e = np.zeros_like(latent)
        e[idx] = h
        fd[idx] = (objective(latent + e, ch, 5.0) - objective(latent - e, ch, 5.0)) / (2 * h)
    assert np.linalg.norm(grad - fd) <= 1e-4 * np.linalg.norm(fd)


# --------------------------------------------------------------------------
# state optimization


def test_optimize_single_state(rng):
    ch = _random_set(rng, n_s=1)
    sol = optimize_states(ch, 10.0, config=PrecoderConfig(steps=5, restarts=1), rng=0)
    np.testing.assert_array_equal(sol.states, 0)
    assert sol.rate == pytest.approx(discrete_rate(ch, np.zeros(4, int), 10.0)[0])


@pytest.mark.parametrize("seed", range(4))
def test_optimize_tiny_instance_in_exhaustive_table(seed):
    rng = np.random.default_rng(seed)
    ch = DownlinkChannelSet(_crandn(rng, 1, 3, 2, 16))
    sol = optimize_states(ch, 100.0, config=PrecoderConfig(steps=200, restarts=2), rng=seed)
    table = {
        s: discrete_rate(ch, np.array(s), 100.0)[0] for s in itertools.product(range(3), repeat=2)
    }
    assert sol.rate == pytest.approx(table[tuple(sol.states)], rel=1e-12)
    # refinement leaves no better single-antenna move
    for m in range(2):
        for n in range(3):
            t = list(sol.states)
            t[m] = n
            assert table[tuple(t)] <= sol.rate + 1e-12
    assert sol.rate <= _exhaustive(ch, 100.0) + 1e-12


def test_optimize_trace_increases():
    ups = 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        ch = _random_set(rng, k=2, n_s=3, m=4, n_c=8)
        sol = optimize_states(ch, 100.0, config=PrecoderConfig(steps=100, restarts=1), rng=seed)
        ups += sol.trace[-1] >= sol.trace[0]
    assert ups >= 19


def test_refine_reaches_single_antenna_optimum(rng):
    ch = _random_set(rng, k=2, n_s=3, m=4, n_c=6)
    s = refine_states(ch, np.zeros(4, int), 10.0)
    base = discrete_rate(ch, s, 10.0)[0]
    for m in range(4):
        for n in range(3):
            t = s.copy()
            t[m] = n
            assert discrete_rate(ch, t, 10.0)[0] <= base + 1e-12


# --------------------------------------------------------------------------
# baselines


def test_group_opt_single_state(rng):
    ch = _random_set(rng, n_s=1)
    np.testing.assert_array_equal(group_opt(ch, 1.0).states, 0)


def test_group_opt_table(rng):
    ch = _random_set(rng, k=3, n_s=12, m=6, n_c=4)
    sol = group_opt(ch, 10.0)
    table = [discrete_rate(ch, np.full(6, n), 10.0)[0] for n in range(12)]
    np.testing.assert_allclose(sol.candidates, table, rtol=1e-12)
    assert sol.rate == max(table)
    assert np.all(sol.states == int(np.argmax(table)))


def test_random_baseline_reproducible(rng):
    ch = _random_set(rng)
    a = random_baseline(ch, 1.0, rng=np.random.default_rng(3))
    b = random_baseline(ch, 1.0, rng=np.random.default_rng(3))
    np.testing.assert_array_equal(a.states, b.states)
    assert a.rate == b.rate


def test_upper_bound_single_state_is_fixed_evaluation(rng):
    ch = _random_set(rng, n_s=1)
    cfg = PrecoderConfig(steps=10, restarts=1)
    assert upper_bound(ch, 10.0, config=cfg, rng=0).rate == pytest.approx(nonfas(ch, 10.0).rate)


def test_nonfas_needs_single_state(rng):
    with pytest.raises(ValueError):
        nonfas(_random_set(rng, n_s=2), 1.0)


# --------------------------------------------------------------------------
# channel sets


def test_channel_set_from_coeffs_matches_model():
    grid = make_grid(30)
    geom = ArrayGeometry(2, 2)
    model = GridModel(grid, synth_pattern_set(7, 3, 2), geom)
    scene = synth_scene(5, 2, 4, 4, 10.0)
    coeffs = [project_scene_to_grid(scene, grid, k) for k in range(2)]
    ch = DownlinkChannelSet.from_coeffs(model, coeffs, 8)
    states = np.array([2, 1, 0, 2])
    h = ch.channel(states)
    for k in range(2):
        np.testing.assert_allclose(h[:, :, k], model.channel(coeffs[k], states, 8).T, atol=1e-13)


def test_channel_set_from_scene_matches_exact():
    geom = ArrayGeometry(2, 2)
    pats = synth_pattern_set(7, 3, 2)
    scene = synth_scene(5, 2, 4, 4, 10.0)
    ch = DownlinkChannelSet.from_scene(scene, pats, geom, 8)
    states = np.array([0, 2, 2, 1])
    h = ch.channel(states)
    for k in range(2):
        np.testing.assert_allclose(h[:, :, k], exact_channel_matrix(scene, pats, geom, states, 8, k).T, atol=1e-13)


def test_channel_set_rejects_too_many_users(rng):
    with pytest.raises(ValueError):
        DownlinkChannelSet(_crandn(rng, 5, 2, 4, 3))

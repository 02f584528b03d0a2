import math

import numpy as np
import pytest

from pfas.channel import (
    ArrayGeometry,
    GridModel,
    ScatterScene,
    SparseCoeffs,
    UserPaths,
    angular_basis,
    exact_channel,
    exact_channel_matrix,
    load_scene,
    make_grid,
    nearest_grid_index,
    partial_dft,
    project_scene_to_grid,
    save_scene,
    separated_grid_scene,
    snap_scene,
    steering_matrix,
    steering_vector,
    synth_scene,
)
from pfas.patterns import Direction, isotropic_pattern, synth_pattern_set


def _single_path(theta, phi, tau, gv, gh=0.0, delay_span=4):
    u = UserPaths(
        np.array([theta]), np.array([phi]), np.array([tau]), np.array([gv], complex), np.array([gh], complex)
    )
    return ScatterScene((u,), delay_span)


@pytest.mark.parametrize("step,size", [(5, 2701), (90, 15), (15, 325)])
def test_grid_size(step, size):
    assert make_grid(step).size == size


@pytest.mark.parametrize("step", [0, -5, 7])
def test_grid_rejects_bad_step(step):
    with pytest.raises(ValueError):
        make_grid(step)


def test_grid_is_theta_outer():
    g = make_grid(90)
    assert g.n_phi == 5
    np.testing.assert_allclose(g.theta[:5], 0.0)
    np.testing.assert_allclose(g.phi[:5], np.deg2rad([0, 90, 180, 270, 360]))
    assert g.unravel(g.index(1, 3)) == (1, 3)


def test_grid_duplicates():
    g = make_grid(90)
    # poles collapse to one point each, phi=360 repeats phi=0
    canon = set(g.canonical.tolist())
    assert len(canon) == 1 + 4 + 1
    assert g.is_duplicate.sum() == g.size - 6


def test_steering_single_element():
    v = steering_vector(ArrayGeometry(1, 1), Direction(phi=1.0, theta=0.4))
    np.testing.assert_array_equal(v, [1.0])


def test_steering_broadside():
    v = steering_vector(ArrayGeometry(4, 4), Direction(phi=math.pi / 2, theta=math.pi / 2))
    np.testing.assert_allclose(v, np.full(16, 0.25), atol=1e-15)


def test_steering_two_by_one():
    v = steering_vector(ArrayGeometry(2, 1), Direction(phi=0.0, theta=math.pi / 2))
    np.testing.assert_allclose(v, np.array([1, np.exp(-1j * np.pi)]) / math.sqrt(2), atol=1e-15)


def test_steering_is_kronecker():
    geom = ArrayGeometry(3, 2)
    theta, phi = 0.8, 2.1
    f2 = np.exp(-1j * np.pi * np.arange(2) * math.cos(theta))
    f1 = np.exp(-1j * np.pi * np.arange(3) * math.sin(theta) * math.cos(phi))
    np.testing.assert_allclose(steering_matrix(geom, theta, phi)[:, 0], np.kron(f2, f1) / math.sqrt(6))


def test_partial_dft():
    f = partial_dft(8, 3)
    assert f.shape == (8, 3)
    assert f[5, 2] == pytest.approx(np.exp(-2j * np.pi * 10 / 8))


def test_synth_scene_degenerate():
    s = synth_scene(1, 1, 1, 1, 0.0)
    assert s.users[0].n_paths == 1
    assert s.users[0].delay[0] == 0


def test_synth_scene_ranges_and_determinism():
    s = synth_scene(1, 4, 6, 8, 5.0)
    assert s.n_users == 4
    for u in s.users:
        assert u.n_paths == 6
        assert np.all((u.delay >= 0) & (u.delay <= 7))
    t = synth_scene(1, 4, 6, 8, 5.0)
    np.testing.assert_array_equal(s.users[2].gain_v, t.users[2].gain_v)


def test_scene_rejects_bad_delay():
    with pytest.raises(ValueError):
        _single_path(1.0, 1.0, 5, 1.0, delay_span=4)


def test_exact_channel_zero_gains():
    s = _single_path(1.0, 1.0, 1, 0.0)
    h = exact_channel(s, synth_pattern_set(7, 3, 2), ArrayGeometry(2, 2), [0, 1, 2, 0], 3, 16, 0)
    np.testing.assert_array_equal(h, 0)


def test_exact_channel_zero_delay_single_path():
    geom = ArrayGeometry(2, 2)
    pats = synth_pattern_set(7, 3, 2)
    states = np.array([0, 1, 2, 1])
    d = Direction(phi=0.9, theta=1.2)
    c = 0.3 - 0.2j
    s = _single_path(d.theta, d.phi, 0, c)
    nu = np.array([pats.eval_v(int(k), d) for k in states])
    expect = c * nu * steering_vector(geom, d)
    h = exact_channel_matrix(s, pats, geom, states, 8, 0)
    for n in range(8):
        np.testing.assert_allclose(h[:, n], expect, atol=1e-14)


def test_exact_channel_superposition():
    geom = ArrayGeometry(2, 2)
    pats = synth_pattern_set(7, 3, 2)
    states = [2, 0, 1, 1]
    a = _single_path(0.5, 1.0, 1, 1 + 1j, 0.5)
    b = _single_path(1.3, 4.0, 3, -0.5j, 2.0)
    both = ScatterScene(
        (
            UserPaths(
                np.array([0.5, 1.3]),
                np.array([1.0, 4.0]),
                np.array([1, 3]),
                np.array([1 + 1j, -0.5j]),
                np.array([0.5, 2.0], complex),
            ),
        ),
        4,
    )
    for n in (0, 5):
        ha = exact_channel(a, pats, geom, states, n, 16, 0)
        hb = exact_channel(b, pats, geom, states, n, 16, 0)
        np.testing.assert_allclose(exact_channel(both, pats, geom, states, n, 16, 0), ha + hb, atol=1e-14)


def test_exact_channel_rejects_bad_states():
    s = _single_path(1.0, 1.0, 0, 1.0)
    with pytest.raises(ValueError):
        exact_channel(s, synth_pattern_set(7, 3, 2), ArrayGeometry(2, 2), [0, 1, 3, 0], 0, 4, 0)


def test_isotropic_basis_is_scaled_steering():
    grid = make_grid(30)
    geom = ArrayGeometry(2, 3)
    gv, gh = angular_basis(grid, isotropic_pattern(), geom, np.zeros(6, int))
    upper = np.flatnonzero(grid.theta <= np.pi / 2)
    beta = steering_matrix(geom, grid.theta[grid.canonical], grid.phi[grid.canonical])
    np.testing.assert_allclose(gv[:, upper], math.sqrt(2) * beta[:, upper], atol=1e-14)
    np.testing.assert_allclose(gh, gv)


def test_single_antenna_basis_is_pattern_row():
    grid = make_grid(30)
    pats = synth_pattern_set(7, 3, 2)
    gv, _ = angular_basis(grid, pats, ArrayGeometry(1, 1), [2])
    c = grid.canonical
    np.testing.assert_allclose(gv[0], pats.values(grid.theta[c], grid.phi[c], "V")[2], atol=1e-14)


def test_grid_model_empty_support():
    grid = make_grid(30)
    model = GridModel(grid, synth_pattern_set(7, 3, 2), ArrayGeometry(2, 2))
    h = model.channel(SparseCoeffs.zeros(grid.size, 4), [0, 0, 0, 0], 8)
    assert h.shape == (4, 8) and not h.any()


def test_grid_model_zero_delay_entry():
    grid = make_grid(30)
    model = GridModel(grid, synth_pattern_set(7, 3, 2), ArrayGeometry(2, 2))
    psi = np.zeros((grid.size, 4), complex)
    psi[40, 0] = 1.0
    states = [1, 0, 2, 1]
    h = model.channel(SparseCoeffs.from_dense(psi, np.zeros_like(psi)), states, 6)
    gv, _ = model.basis(states)
    for n in range(6):
        np.testing.assert_allclose(h[:, n], gv[:, 40], atol=1e-15)


def test_grid_model_matches_dense_sum(rng):
    grid = make_grid(30)
    model = GridModel(grid, synth_pattern_set(7, 3, 2), ArrayGeometry(2, 2))
    L, n_c = 4, 8
    ind = rng.random((grid.size, L)) < 0.05
    pv = np.where(ind, rng.standard_normal(ind.shape) + 1j * rng.standard_normal(ind.shape), 0)
    ph = np.where(ind, rng.standard_normal(ind.shape), 0).astype(complex)
    states = rng.integers(0, 3, 4)
    gv, gh = model.basis(states)
    f = partial_dft(n_c, L)
    dense = gv @ pv @ f.T + gh @ ph @ f.T
    np.testing.assert_allclose(model.channel(SparseCoeffs.from_dense(pv, ph), states, n_c), dense, atol=1e-12)


def test_state_response_reassembles_channel(rng):
    grid = make_grid(30)
    model = GridModel(grid, synth_pattern_set(7, 3, 2), ArrayGeometry(2, 2))
    coeffs = project_scene_to_grid(synth_scene(3, 1, 5, 4, 10.0), grid, 0)
    resp = model.state_response(coeffs, 8)
    states = np.array([2, 0, 1, 2])
    np.testing.assert_allclose(resp[states, np.arange(4)], model.channel(coeffs, states, 8), atol=1e-13)


def test_project_on_grid_path():
    grid = make_grid(15)
    b = grid.index(4, 7)
    s = _single_path(grid.theta[b], grid.phi[b], 2, 0.7 + 0.1j, delay_span=4)
    c = project_scene_to_grid(s, grid, 0)
    assert c.psi_v[b, 2] == 0.7 + 0.1j
    assert c.support_set == {(b, 2)}


def test_project_sums_colliding_paths():
    grid = make_grid(15)
    b = grid.index(4, 7)
    u = UserPaths(
        np.full(2, grid.theta[b]), np.full(2, grid.phi[b]), np.array([1, 1]),
        np.array([1.0, 2.0j]), np.array([0.5, 0.5], complex),
    )
    c = project_scene_to_grid(ScatterScene((u,), 4), grid, 0)
    assert c.psi_v[b, 1] == 1.0 + 2.0j
    assert c.psi_h[b, 1] == 1.0


def test_nearest_grid_matches_brute_force(rng):
    grid = make_grid(5)
    theta = np.deg2rad(rng.uniform(0, 180, 50))
    phi = np.deg2rad(rng.uniform(0, 360, 50))
    theta[0] = grid.theta[grid.index(10, 3)] + np.deg2rad(2.0)
    phi[0] = grid.phi[grid.index(10, 3)]
    got = nearest_grid_index(grid, theta, phi)
    for t, p, b in zip(theta, phi, got):
        q = np.array([math.sin(t) * math.cos(p), math.sin(t) * math.sin(p), math.cos(t)])
        dist = [math.acos(min(1.0, max(-1.0, float(g @ q)))) for g in grid.unit_vectors]
        assert dist[b] <= min(dist) + 1e-12
    assert got[0] == grid.index(10, 3)


def test_snap_scene_lands_on_grid():
    grid = make_grid(15)
    s = snap_scene(synth_scene(4, 2, 6, 8, 10.0), grid)
    for u in s.users:
        b = nearest_grid_index(grid, u.theta, u.phi)
        np.testing.assert_allclose(grid.theta[b], u.theta)


def test_separated_scene_constraints():
    grid = make_grid(15)
    s = separated_grid_scene(11, grid, 3, 8, 8, min_sep_deg=45.0, power=16.0)
    cos_min = math.cos(math.radians(45.0))
    for u in s.users:
        b = nearest_grid_index(grid, u.theta, u.phi)
        assert len(set(b.tolist())) == 8
        assert np.all(u.theta <= np.pi / 2 + 1e-12)
        for tau in np.unique(u.delay):
            v = grid.unit_vectors[b[u.delay == tau]]
            dots = v @ v.T - 2 * np.eye(len(v))
            assert np.all(dots <= cos_min + 1e-12)


def test_separated_scene_impossible():
    with pytest.raises(ValueError):
        separated_grid_scene(0, make_grid(90), 1, 10, 1, min_sep_deg=80.0, max_draws=200)


def test_sparse_coeffs_validation():
    pv = np.zeros((5, 2), complex)
    pv[1, 1] = 1
    with pytest.raises(ValueError):
        SparseCoeffs(pv, pv.copy(), np.zeros((0, 2), int), np.zeros((5, 2), bool))


def test_scene_round_trip(tmp_path):
    s = synth_scene(9, 2, 3, 8, 10.0)
    save_scene(s, tmp_path / "scene.txt")
    t = load_scene(tmp_path / "scene.txt")
    assert t.delay_span == 8 and t.n_users == 2
    for a, b in zip(s.users, t.users):
        np.testing.assert_array_equal(a.theta, b.theta)
        np.testing.assert_array_equal(a.gain_h, b.gain_h)
        np.testing.assert_array_equal(a.delay, b.delay)


def test_separated_scene_area_weighting_avoids_pole_rows():
    grid = make_grid(15)
    rows = {}
    for w in ("area", "cell"):
        theta = np.concatenate([u.theta for u in separated_grid_scene(0, grid, 200, 4, 8, weighting=w).users])
        rows[w] = np.mean(np.isclose(theta, np.deg2rad(15.0)))
    # expected shares: 6.8% of the hemisphere area, 24 of 145 cells
    assert rows["area"] == pytest.approx(0.068, abs=0.02)
    assert rows["cell"] == pytest.approx(24 / 145, abs=0.03)


def test_separated_scene_bad_weighting():
    with pytest.raises(ValueError):
        separated_grid_scene(0, make_grid(15), 1, 2, 2, weighting="poisson")

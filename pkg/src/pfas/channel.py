"""Array geometry, angular grid, scattering scenes and channel synthesis.

Two channel models live here:

* the exact multipath model, which evaluates the radiation patterns at the
  true (off-grid) path directions, and
* the grid model ``H(s) = (G_V(s) Psi_V + G_H(s) Psi_H) F^T`` whose angular
  bases are built from patterns tabulated on an :class:`AngleGrid`.

Subcarriers, delays, grid points and antenna states are all zero-based.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .patterns import Direction, PatternSet

__all__ = [
    "ArrayGeometry",
    "AngleGrid",
    "UserPaths",
    "ScatterScene",
    "SparseCoeffs",
    "GridModel",
    "make_grid",
    "steering_vector",
    "steering_matrix",
    "partial_dft",
    "synth_scene",
    "snap_scene",
    "separated_grid_scene",
    "nearest_grid_index",
    "exact_channel",
    "exact_channel_matrix",
    "angular_basis",
    "approx_channel",
    "project_scene_to_grid",
    "pattern_grid_nmse",
    "save_scene",
    "load_scene",
]

PDP_DECAY_DB_PER_TAP = 3.0


@dataclass(frozen=True)
class ArrayGeometry:
    """Uniform planar array with ``m1`` rows and ``m2`` columns."""

    m1: int
    m2: int

    def __post_init__(self):
        if self.m1 < 1 or self.m2 < 1:
            raise ValueError("array dimensions must be positive")

    @property
    def m(self) -> int:
        return self.m1 * self.m2


@dataclass(frozen=True)
class AngleGrid:
    """Uniform (theta, phi) grid, theta-outer, both azimuth endpoints kept."""

    step_deg: float
    n_theta: int
    n_phi: int
    theta: np.ndarray = field(repr=False)
    phi: np.ndarray = field(repr=False)

    @property
    def size(self) -> int:
        return self.n_theta * self.n_phi

    def __len__(self):
        return self.size

    @cached_property
    def points(self) -> list[Direction]:
        return [Direction(phi=float(p), theta=float(t)) for t, p in zip(self.theta, self.phi)]

    def index(self, i_theta: int, i_phi: int) -> int:
        return i_theta * self.n_phi + i_phi

    def unravel(self, b):
        return np.divmod(b, self.n_phi)

    @cached_property
    def unit_vectors(self) -> np.ndarray:
        return _unit_vectors(self.theta, self.phi)

    @cached_property
    def canonical(self) -> np.ndarray:
        """Lowest index pointing in the same physical direction as each point.

        The poles repeat across every azimuth and the ``phi = 2 pi`` column
        repeats ``phi = 0``.
        """
        i_theta, i_phi = self.unravel(np.arange(self.size))
        i_phi = np.where(i_phi == self.n_phi - 1, 0, i_phi)
        pole = (i_theta == 0) | (i_theta == self.n_theta - 1)
        i_phi = np.where(pole, 0, i_phi)
        return self.index(i_theta, i_phi)

    @cached_property
    def is_duplicate(self) -> np.ndarray:
        return self.canonical != np.arange(self.size)


def make_grid(step_deg: float) -> AngleGrid:
    """Grid with ``(180/step + 1) * (360/step + 1)`` points."""
    if step_deg <= 0:
        raise ValueError("grid step must be positive")
    ratio = 180.0 / step_deg
    n = round(ratio)
    if n < 1 or abs(ratio - n) > 1e-9:
        raise ValueError(f"grid step {step_deg} does not divide 180 degrees")
    theta_1d = np.deg2rad(np.arange(n + 1) * step_deg)
    phi_1d = np.deg2rad(np.arange(2 * n + 1) * step_deg)
    tt, pp = np.meshgrid(theta_1d, phi_1d, indexing="ij")
    theta, phi = tt.ravel(), pp.ravel()
    theta.setflags(write=False)
    phi.setflags(write=False)
    return AngleGrid(float(step_deg), n + 1, 2 * n + 1, theta, phi)


def steering_matrix(geom: ArrayGeometry, theta, phi) -> np.ndarray:
    """Steering vectors as columns, shape ``(M, n_directions)``.

    Element ``m = i2 * m1 + i1`` carries phase ``-pi (i2 cos(theta) +
    i1 sin(theta) cos(phi))``, i.e. the Kronecker product of the column
    factor with the row factor.
    """
    theta = np.atleast_1d(np.asarray(theta, float))
    phi = np.atleast_1d(np.asarray(phi, float))
    i2, i1 = np.divmod(np.arange(geom.m), geom.m1)
    u = np.cos(theta)
    v = np.sin(theta) * np.cos(phi)
    phase = np.outer(i2, u) + np.outer(i1, v)
    return np.exp(-1j * np.pi * phase) / math.sqrt(geom.m)


def steering_vector(geom: ArrayGeometry, direction: Direction) -> np.ndarray:
    return steering_matrix(geom, direction.theta, direction.phi)[:, 0]


def partial_dft(n_subcarriers: int, delay_span: int) -> np.ndarray:
    """``F[n, l] = exp(-2j pi l n / N_c)``, shape ``(N_c, L)``."""
    n = np.arange(n_subcarriers)[:, None]
    ell = np.arange(delay_span)[None, :]
    return np.exp(-2j * np.pi * n * ell / n_subcarriers)


# --------------------------------------------------------------------------
# scenes


@dataclass(frozen=True)
class UserPaths:
    theta: np.ndarray
    phi: np.ndarray
    delay: np.ndarray
    gain_v: np.ndarray
    gain_h: np.ndarray

    @property
    def n_paths(self) -> int:
        return len(self.delay)


@dataclass(frozen=True)
class ScatterScene:
    users: tuple[UserPaths, ...]
    delay_span: int

    def __post_init__(self):
        if self.delay_span < 1:
            raise ValueError("delay_span must be positive")
        for k, u in enumerate(self.users):
            if u.n_paths < 1:
                raise ValueError(f"user {k} has no paths")
            if np.any(u.delay < 0) or np.any(u.delay > self.delay_span - 1):
                raise ValueError(f"user {k} has delays outside [0, {self.delay_span - 1}]")
            if not (np.all(np.isfinite(u.gain_v)) and np.all(np.isfinite(u.gain_h))):
                raise ValueError(f"user {k} has non-finite gains")

    @property
    def n_users(self) -> int:
        return len(self.users)


def synth_scene(
    seed,
    n_users: int,
    n_paths: int,
    delay_span: int,
    angle_spread_deg: float,
    power: float = 1.0,
) -> ScatterScene:
    """Draw one clustered scattering scene per user.

    Each user gets a cluster centre uniform on the upper hemisphere, Gaussian
    angular offsets with the given spread, uniform integer delays and
    complex-Gaussian gains whose expected power decays 3 dB per tap.  The
    expected total power over both polarizations is ``power``.
    """
    if n_paths < 1 or delay_span < 1:
        raise ValueError("n_paths and delay_span must be positive")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    spread = np.deg2rad(angle_spread_deg)
    users = []
    for _ in range(n_users):
        theta_c = np.arccos(rng.uniform(0.0, 1.0))
        phi_c = rng.uniform(0.0, 2 * np.pi)
        theta = np.clip(theta_c + spread * rng.standard_normal(n_paths), 0.0, np.pi)
        phi = np.mod(phi_c + spread * rng.standard_normal(n_paths), 2 * np.pi)
        delay = rng.integers(0, delay_span, size=n_paths)
        p = 10.0 ** (-PDP_DECAY_DB_PER_TAP * delay / 10.0)
        p *= power / p.sum()
        g = rng.standard_normal((4, n_paths))
        scale = np.sqrt(p / 4.0)
        users.append(
            UserPaths(
                theta=theta,
                phi=phi,
                delay=delay,
                gain_v=scale * (g[0] + 1j * g[1]),
                gain_h=scale * (g[2] + 1j * g[3]),
            )
        )
    return ScatterScene(tuple(users), int(delay_span))


def _unit_vectors(theta, phi) -> np.ndarray:
    st = np.sin(theta)
    return np.stack([st * np.cos(phi), st * np.sin(phi), np.cos(theta)], axis=-1)


def nearest_grid_index(grid: AngleGrid, theta, phi, chunk: int = 2048) -> np.ndarray:
    """Nearest grid point by great-circle distance; ties go to the lower index."""
    theta = np.atleast_1d(np.asarray(theta, float))
    phi = np.atleast_1d(np.asarray(phi, float))
    q = _unit_vectors(theta, phi)
    g = grid.unit_vectors
    out = np.empty(len(q), dtype=int)
    for start in range(0, len(q), chunk):
        dots = np.clip(q[start:start + chunk] @ g.T, -1.0, 1.0)
        dist = np.arccos(dots)
        best = dist.min(axis=1, keepdims=True)
        # first index within rounding of the minimum
        out[start:start + chunk] = np.argmax(dist <= best + 1e-12, axis=1)
    return out


def snap_scene(scene: ScatterScene, grid: AngleGrid) -> ScatterScene:
    """Move every path onto its nearest grid direction (gains untouched)."""
    users = []
    for u in scene.users:
        b = nearest_grid_index(grid, u.theta, u.phi)
        users.append(
            UserPaths(grid.theta[b].copy(), grid.phi[b].copy(), u.delay, u.gain_v, u.gain_h)
        )
    return ScatterScene(tuple(users), scene.delay_span)


def separated_grid_scene(
    seed,
    grid: AngleGrid,
    n_users: int,
    n_paths: int,
    delay_span: int,
    min_sep_deg: float = 45.0,
    power: float = 1.0,
    max_draws: int = 10_000,
    weighting: str = "area",
) -> ScatterScene:
    """Draw paths on distinct upper-hemisphere grid directions.

    Paths that share a delay tap are kept at least ``min_sep_deg`` apart
    (great-circle).  Gains follow the same power-delay profile as
    :func:`synth_scene`.  Used for exact-recovery checks, where clustered
    same-tap paths on neighbouring cells are not identifiable by a greedy
    solver.

    ``weighting="area"`` picks a cell with probability proportional to its
    solid angle, i.e. a direction uniform on the hemisphere snapped to the
    grid; ``"cell"`` picks cells uniformly, which favours the crowded rows
    next to the pole.
    """
    if n_paths < 1 or delay_span < 1:
        raise ValueError("n_paths and delay_span must be positive")
    if weighting not in ("area", "cell"):
        raise ValueError(f"unknown weighting {weighting!r}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    cand = np.flatnonzero((grid.theta <= np.pi / 2 + 1e-12) & ~grid.is_duplicate)
    prob = None
    if weighting == "area":
        half = np.deg2rad(grid.step_deg) / 2
        lo = np.clip(grid.theta[cand] - half, 0.0, np.pi / 2)
        hi = np.clip(grid.theta[cand] + half, 0.0, np.pi / 2)
        pole = grid.theta[cand] < 1e-12
        width = np.where(pole, 2 * np.pi, np.deg2rad(grid.step_deg))
        prob = width * (np.cos(lo) - np.cos(hi))
        prob /= prob.sum()
    cos_min = np.cos(np.deg2rad(min_sep_deg))
    u = grid.unit_vectors
    users = []
    for _ in range(n_users):
        cells, delays = [], []
        for _ in range(max_draws):
            if len(cells) == n_paths:
                break
            b = int(rng.choice(cand, p=prob))
            tau = int(rng.integers(0, delay_span))
            same = [c for c, d in zip(cells, delays) if d == tau]
            if b in cells or (same and np.max(u[same] @ u[b]) > cos_min + 1e-12):
                continue
            cells.append(b)
            delays.append(tau)
        else:
            raise ValueError("could not place the requested number of separated paths")
        b = np.array(cells)
        delay = np.array(delays)
        p = 10.0 ** (-PDP_DECAY_DB_PER_TAP * delay / 10.0)
        p *= power / p.sum()
        g = rng.standard_normal((4, n_paths))
        scale = np.sqrt(p / 4.0)
        users.append(
            UserPaths(
                theta=grid.theta[b].copy(),
                phi=grid.phi[b].copy(),
                delay=delay,
                gain_v=scale * (g[0] + 1j * g[1]),
                gain_h=scale * (g[2] + 1j * g[3]),
            )
        )
    return ScatterScene(tuple(users), int(delay_span))


# --------------------------------------------------------------------------
# exact channel


def exact_channel_matrix(
    scene: ScatterScene,
    patterns: PatternSet,
    geom: ArrayGeometry,
    states,
    n_subcarriers: int,
    user: int,
) -> np.ndarray:
    """Exact channel of one user on all subcarriers, shape ``(M, N_c)``."""
    states = _check_states(states, geom, patterns)
    u = scene.users[user]
    beta = steering_matrix(geom, u.theta, u.phi)  # M x I
    nu_v = patterns.values(u.theta, u.phi, "V")[states]  # M x I
    nu_h = patterns.values(u.theta, u.phi, "H")[states]
    per_path = beta * (nu_v * u.gain_v + nu_h * u.gain_h)
    phase = np.exp(-2j * np.pi * np.outer(u.delay, np.arange(n_subcarriers)) / n_subcarriers)
    return per_path @ phase


def exact_channel(scene, patterns, geom, states, subcarrier: int, n_subcarriers: int, user: int):
    """Exact channel vector of ``user`` on one subcarrier."""
    if not 0 <= subcarrier < n_subcarriers:
        raise ValueError("subcarrier index out of range")
    u = scene.users[user]
    states = _check_states(states, geom, patterns)
    beta = steering_matrix(geom, u.theta, u.phi)
    nu_v = patterns.values(u.theta, u.phi, "V")[states]
    nu_h = patterns.values(u.theta, u.phi, "H")[states]
    phase = np.exp(-2j * np.pi * u.delay * subcarrier / n_subcarriers)
    return (beta * (nu_v * u.gain_v + nu_h * u.gain_h)) @ phase


def _check_states(states, geom: ArrayGeometry, patterns: PatternSet) -> np.ndarray:
    states = np.asarray(states, dtype=int)
    if states.shape != (geom.m,):
        raise ValueError(f"expected {geom.m} states, got shape {states.shape}")
    if np.any(states < 0) or np.any(states >= patterns.n_states):
        raise ValueError(f"state index out of range [0, {patterns.n_states})")
    return states


# --------------------------------------------------------------------------
# grid model


@dataclass(frozen=True)
class SparseCoeffs:
    """Angular-delay coefficients with a support shared by both polarizations.

    ``support`` is an integer array of ``(b, l)`` rows in lexicographic order;
    ``mask`` is the binary prior mask (at least the support).
    """

    psi_v: np.ndarray
    psi_h: np.ndarray
    support: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        if self.psi_v.shape != self.psi_h.shape or self.psi_v.shape != self.mask.shape:
            raise ValueError("psi_v, psi_h and mask must share a shape")
        ind = self.support_indicator
        if np.any(self.psi_v[~ind] != 0) or np.any(self.psi_h[~ind] != 0):
            raise ValueError("nonzero coefficient outside the support")
        if np.any(ind & ~self.mask):
            raise ValueError("support must lie inside the mask")

    @classmethod
    def from_dense(cls, psi_v, psi_h, support=None, mask=None) -> "SparseCoeffs":
        """Build from full matrices; the support defaults to the nonzeros."""
        psi_v = np.array(psi_v, dtype=complex)
        psi_h = np.array(psi_h, dtype=complex)
        if support is None:
            ind = (psi_v != 0) | (psi_h != 0)
        else:
            ind = np.asarray(support, bool)
            if ind.shape != psi_v.shape:
                ind = _indicator(support, psi_v.shape)
            psi_v[~ind] = 0
            psi_h[~ind] = 0
        mask = ind.copy() if mask is None else np.asarray(mask, bool) | ind
        pairs = np.argwhere(ind)
        return cls(psi_v, psi_h, pairs, mask)

    @classmethod
    def zeros(cls, n_grid: int, delay_span: int) -> "SparseCoeffs":
        z = np.zeros((n_grid, delay_span), complex)
        return cls(z, z.copy(), np.zeros((0, 2), int), np.zeros(z.shape, bool))

    @property
    def shape(self):
        return self.psi_v.shape

    @property
    def support_indicator(self) -> np.ndarray:
        return _indicator(self.support, self.psi_v.shape)

    @property
    def support_set(self) -> frozenset:
        return frozenset(map(tuple, self.support.tolist()))

    def stacked(self) -> np.ndarray:
        """``[Psi_V; Psi_H]`` with shape ``(2|B|, L)``."""
        return np.vstack([self.psi_v, self.psi_h])


def _indicator(pairs, shape) -> np.ndarray:
    ind = np.zeros(shape, bool)
    pairs = np.asarray(pairs, int).reshape(-1, 2)
    ind[pairs[:, 0], pairs[:, 1]] = True
    return ind


class GridModel:
    """Patterns and steering vectors tabulated once on a grid.

    The tables do not depend on the channel, so every basis, channel and
    state-response tensor below is assembled from them by indexing.
    """

    def __init__(self, grid: AngleGrid, patterns: PatternSet, geom: ArrayGeometry):
        self.grid = grid
        self.patterns = patterns
        self.geom = geom
        # duplicated directions are tabulated at their canonical point so the
        # copies are bit-identical
        c = grid.canonical
        theta, phi = grid.theta[c], grid.phi[c]
        self.nu_v = patterns.values(theta, phi, "V")  # N_s x |B|
        self.nu_h = patterns.values(theta, phi, "H")
        self.beta = steering_matrix(geom, theta, phi)  # M x |B|

    def basis(self, states) -> tuple[np.ndarray, np.ndarray]:
        states = _check_states(states, self.geom, self.patterns)
        return self.nu_v[states] * self.beta, self.nu_h[states] * self.beta

    def channel(self, coeffs: SparseCoeffs, states, n_subcarriers: int) -> np.ndarray:
        states = _check_states(states, self.geom, self.patterns)
        self._check_coeffs(coeffs)
        if len(coeffs.support) == 0:
            return np.zeros((self.geom.m, n_subcarriers), complex)
        b, ell = coeffs.support.T
        beta = self.beta[:, b]
        x = beta * (
            self.nu_v[states][:, b] * coeffs.psi_v[b, ell]
            + self.nu_h[states][:, b] * coeffs.psi_h[b, ell]
        )
        f = partial_dft(n_subcarriers, coeffs.shape[1])
        return x @ f[:, ell].T

    def state_response(self, coeffs: SparseCoeffs, n_subcarriers: int) -> np.ndarray:
        """Channel with every antenna in each state, shape ``(N_s, M, N_c)``.

        Antenna ``m`` of ``H(s)`` equals row ``m`` of slice ``s_m``, so any
        configuration (or convex mixture of states) is read off this tensor.
        """
        self._check_coeffs(coeffs)
        n_s, m = self.patterns.n_states, self.geom.m
        if len(coeffs.support) == 0:
            return np.zeros((n_s, m, n_subcarriers), complex)
        b, ell = coeffs.support.T
        f = partial_dft(n_subcarriers, coeffs.shape[1])[:, ell]  # N_c x |D|
        cv = self.nu_v[:, b] * coeffs.psi_v[b, ell]  # N_s x |D|
        ch = self.nu_h[:, b] * coeffs.psi_h[b, ell]
        beta = self.beta[:, b]  # M x |D|
        return np.einsum("sd,md,nd->smn", cv + ch, beta, f, optimize=True)

    def _check_coeffs(self, coeffs: SparseCoeffs):
        if coeffs.shape[0] != self.grid.size:
            raise ValueError(
                f"coefficient rows {coeffs.shape[0]} do not match grid size {self.grid.size}"
            )


def angular_basis(grid: AngleGrid, patterns: PatternSet, geom: ArrayGeometry, states):
    """``(G_V, G_H)``, each ``M x |B|``: steering vectors scaled by patterns."""
    return GridModel(grid, patterns, geom).basis(states)


def approx_channel(
    coeffs: SparseCoeffs,
    grid: AngleGrid,
    patterns: PatternSet,
    geom: ArrayGeometry,
    states,
    n_subcarriers: int,
) -> np.ndarray:
    """Grid-model channel ``M x N_c`` summed over the coefficient support."""
    return GridModel(grid, patterns, geom).channel(coeffs, states, n_subcarriers)


def project_scene_to_grid(scene: ScatterScene, grid: AngleGrid, user: int) -> SparseCoeffs:
    """Snap each path of ``user`` to its nearest grid cell, summing gains."""
    u = scene.users[user]
    b = nearest_grid_index(grid, u.theta, u.phi)
    shape = (grid.size, scene.delay_span)
    psi_v = np.zeros(shape, complex)
    psi_h = np.zeros(shape, complex)
    np.add.at(psi_v, (b, u.delay), u.gain_v)
    np.add.at(psi_h, (b, u.delay), u.gain_h)
    ind = np.zeros(shape, bool)
    ind[b, u.delay] = True
    return SparseCoeffs(psi_v, psi_h, np.argwhere(ind), ind.copy())


def pattern_grid_nmse(patterns: PatternSet, grid: AngleGrid, n_points: int = 10_000) -> float:
    """NMSE of replacing each pattern value by its nearest-grid-point value.

    Averaged over quasi-uniform directions, all states and both
    polarizations.
    """
    from .patterns import fibonacci_sphere

    theta, phi = fibonacci_sphere(n_points)
    b = nearest_grid_index(grid, theta, phi)
    err = 0.0
    ref = 0.0
    for pol in ("V", "H"):
        true = patterns.values(theta, phi, pol)
        snapped = patterns.values(grid.theta[b], grid.phi[b], pol)
        err += np.sum(np.abs(true - snapped) ** 2)
        ref += np.sum(np.abs(true) ** 2)
    return float(err / ref)


# --------------------------------------------------------------------------
# scene text format
#
#   # delay_span <L>
#   # n_users <K>
#   user theta phi tau re_v im_v re_h im_h      (one path per row)


def save_scene(scene: ScatterScene, path):
    lines = [
        f"# delay_span {scene.delay_span}",
        f"# n_users {scene.n_users}",
        "# user theta phi tau re_v im_v re_h im_h",
    ]
    for k, u in enumerate(scene.users):
        for i in range(u.n_paths):
            lines.append(
                " ".join(
                    [str(k), repr(float(u.theta[i])), repr(float(u.phi[i])), str(int(u.delay[i]))]
                    + [
                        repr(float(x))
                        for x in (u.gain_v[i].real, u.gain_v[i].imag, u.gain_h[i].real, u.gain_h[i].imag)
                    ]
                )
            )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_scene(path) -> ScatterScene:
    header = {}
    rows = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            parts = line[1:].split()
            if len(parts) == 2 and parts[0] in ("delay_span", "n_users"):
                header[parts[0]] = int(parts[1])
            continue
        parts = line.split()
        if len(parts) != 8:
            raise ValueError(f"{path}:{lineno}: expected 8 columns, got {len(parts)}")
        rows.append(parts)
    if "delay_span" not in header:
        raise ValueError(f"{path}: missing '# delay_span' header")
    n_users = header.get("n_users", 1 + max((int(r[0]) for r in rows), default=-1))
    per_user = [[] for _ in range(n_users)]
    for r in rows:
        per_user[int(r[0])].append(r)
    users = []
    for k, rs in enumerate(per_user):
        if not rs:
            raise ValueError(f"{path}: user {k} has no paths")
        a = np.array([[float(x) for x in r[1:]] for r in rs])
        users.append(
            UserPaths(
                theta=a[:, 0],
                phi=a[:, 1],
                delay=a[:, 2].astype(int),
                gain_v=a[:, 3] + 1j * a[:, 4],
                gain_h=a[:, 5] + 1j * a[:, 6],
            )
        )
    return ScatterScene(tuple(users), header["delay_span"])

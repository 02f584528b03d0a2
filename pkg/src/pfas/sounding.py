"""Uplink sounding, SVD pre-processing and the least-squares baseline."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .channel import GridModel, ScatterScene, SparseCoeffs, exact_channel_matrix, partial_dft
from .errors import NumericalError

__all__ = [
    "SoundingPlan",
    "SoundingObservation",
    "ReducedObservation",
    "make_plan",
    "zadoff_chu",
    "qpsk_pilots",
    "generate_observation",
    "preprocess",
    "reduce_observation",
    "ls_estimate",
    "pilot_overhead",
    "save_observation",
    "load_observation",
]

EPS_SVD = 1e-6
MAX_CONDITION = 1e12


@dataclass(frozen=True)
class SoundingPlan:
    """States of the T sounding blocks plus the user's pilot sequence.

    ``pilots`` are unit-modulus; the transmitted symbols are
    ``sqrt(pilot_power) * pilots``.
    """

    block_states: np.ndarray  # T x M
    pilots: np.ndarray  # N_c
    noise_var: float
    pilot_power: float = 1.0

    def __post_init__(self):
        if self.block_states.ndim != 2 or self.block_states.shape[0] < 1:
            raise ValueError("block_states must be a non-empty T x M array")
        if not np.allclose(np.abs(self.pilots), 1.0, atol=1e-12):
            raise ValueError("pilots must be unit-modulus")
        if self.noise_var < 0 or self.pilot_power <= 0:
            raise ValueError("noise_var must be >= 0 and pilot_power > 0")

    @property
    def n_blocks(self) -> int:
        return self.block_states.shape[0]

    @property
    def n_subcarriers(self) -> int:
        return len(self.pilots)

    def f_bar(self, delay_span: int) -> np.ndarray:
        """Pilot-weighted partial DFT ``diag(x) F``."""
        x = np.sqrt(self.pilot_power) * self.pilots
        return x[:, None] * partial_dft(self.n_subcarriers, delay_span)


def zadoff_chu(n: int, root: int = 1) -> np.ndarray:
    k = np.arange(n)
    if n % 2 == 0:
        return np.exp(-1j * np.pi * root * k * k / n)
    return np.exp(-1j * np.pi * root * k * (k + 1) / n)


def qpsk_pilots(rng: np.random.Generator, n: int) -> np.ndarray:
    return np.exp(1j * (np.pi / 4 + np.pi / 2 * rng.integers(0, 4, size=n)))


def make_plan(
    rng: np.random.Generator,
    n_blocks: int,
    n_antennas: int,
    n_states: int,
    n_subcarriers: int,
    noise_var: float = 1.0,
    pilot_power: float = 1.0,
    pilot_kind: str = "qpsk",
) -> SoundingPlan:
    """Random per-block antenna states and a unit-modulus pilot."""
    states = rng.integers(0, n_states, size=(n_blocks, n_antennas))
    if pilot_kind == "qpsk":
        pilots = qpsk_pilots(rng, n_subcarriers)
    elif pilot_kind == "zc":
        pilots = zadoff_chu(n_subcarriers)
    else:
        raise ValueError(f"unknown pilot kind {pilot_kind!r}")
    return SoundingPlan(states, pilots, float(noise_var), float(pilot_power))


def pilot_overhead(n_users: int, n_blocks: int = 4, comb: int = 4) -> int:
    """OFDM symbols spent on sounding when ``comb`` users share a symbol.

    Follows the floor rule ``n_blocks * floor(K / comb)``, which is exact when
    ``K`` is a multiple of ``comb``.
    """
    return n_blocks * (n_users // comb)


@dataclass(frozen=True)
class SoundingObservation:
    y_u: np.ndarray  # (T*M) x N_c, row blocks ordered by t
    plan: SoundingPlan


def generate_observation(
    source,
    model: GridModel,
    plan: SoundingPlan,
    rng: np.random.Generator,
    user: int = 0,
) -> SoundingObservation:
    """Stack the noisy received pilots of all sounding blocks.

    ``source`` is either :class:`SparseCoeffs` (grid-model generation) or a
    :class:`ScatterScene` (exact patterns at the true path angles).
    """
    n_c = plan.n_subcarriers
    x = np.sqrt(plan.pilot_power) * plan.pilots
    blocks = []
    for s in plan.block_states:
        if isinstance(source, SparseCoeffs):
            h = model.channel(source, s, n_c)
        elif isinstance(source, ScatterScene):
            h = exact_channel_matrix(source, model.patterns, model.geom, s, n_c, user)
        else:
            raise TypeError("source must be SparseCoeffs or ScatterScene")
        blocks.append(h * x[None, :])
    y = np.vstack(blocks)
    if plan.noise_var > 0:
        z = rng.standard_normal(y.shape) + 1j * rng.standard_normal(y.shape)
        y = y + np.sqrt(plan.noise_var / 2) * z
    return SoundingObservation(y, plan)


@dataclass(frozen=True)
class ReducedObservation:
    """Observation after projection onto the dominant left singular vectors.

    The measurement operators ``Q_V = F_bar kron A_V`` and
    ``Q_H = F_bar kron A_H`` are only applied through :meth:`forward` and
    :meth:`adjoint`; :meth:`dense_q` materializes them for small checks.
    """

    u_tilde: np.ndarray  # (T*M) x M~
    singular_values: np.ndarray
    y_tilde: np.ndarray  # M~ x N_c
    a_v: np.ndarray  # M~ x |B|
    a_h: np.ndarray  # M~ x |B|
    f_bar: np.ndarray  # N_c x L
    noise_var: float
    duplicate: np.ndarray | None = None  # grid columns repeating another direction

    @property
    def m_tilde(self) -> int:
        return self.u_tilde.shape[1]

    @property
    def n_grid(self) -> int:
        return self.a_v.shape[1]

    @property
    def delay_span(self) -> int:
        return self.f_bar.shape[1]

    @property
    def n_subcarriers(self) -> int:
        return self.f_bar.shape[0]

    @property
    def a_u(self) -> np.ndarray:
        return np.hstack([self.a_v, self.a_h])

    def forward(self, psi_v, psi_h) -> np.ndarray:
        """``A_V Psi_V F_bar^T + A_H Psi_H F_bar^T`` (matrix form of Q psi)."""
        return (self.a_v @ psi_v + self.a_h @ psi_h) @ self.f_bar.T

    def adjoint(self, r) -> tuple[np.ndarray, np.ndarray]:
        """Matrix forms of ``Q_V^H vec(r)`` and ``Q_H^H vec(r)``."""
        rf = r @ self.f_bar.conj()
        return self.a_v.conj().T @ rf, self.a_h.conj().T @ rf

    def dense_q(self) -> tuple[np.ndarray, np.ndarray]:
        return np.kron(self.f_bar, self.a_v), np.kron(self.f_bar, self.a_h)


def reduce_observation(y_u, g_tilde, f_bar, noise_var, eps_svd: float = EPS_SVD, duplicate=None):
    """Project ``y_u`` onto the left singular vectors of ``g_tilde = [G_uv, G_uh]``.

    Keeps the singular values at or above ``eps_svd`` times the largest.
    """
    u, s, _ = np.linalg.svd(g_tilde, full_matrices=False)
    if s.size == 0 or s[0] == 0:
        raise NumericalError("angular basis is identically zero")
    keep = int(np.count_nonzero(s >= eps_svd * s[0]))
    u_t = u[:, :keep]
    a = u_t.conj().T @ g_tilde
    n_grid = g_tilde.shape[1] // 2
    return ReducedObservation(
        u_tilde=u_t,
        singular_values=s,
        y_tilde=u_t.conj().T @ y_u,
        a_v=a[:, :n_grid],
        a_h=a[:, n_grid:],
        f_bar=f_bar,
        noise_var=float(noise_var),
        duplicate=duplicate,
    )


def stacked_basis(model: GridModel, block_states) -> np.ndarray:
    """``[G_uv, G_uh]`` over all sounding blocks, shape ``(T*M, 2|B|)``."""
    gv, gh = zip(*(model.basis(s) for s in block_states))
    return np.hstack([np.vstack(gv), np.vstack(gh)])


def preprocess(
    observation: SoundingObservation,
    model: GridModel,
    delay_span: int,
    eps_svd: float = EPS_SVD,
) -> ReducedObservation:
    plan = observation.plan
    g_tilde = stacked_basis(model, plan.block_states)
    return reduce_observation(
        observation.y_u,
        g_tilde,
        plan.f_bar(delay_span),
        plan.noise_var,
        eps_svd,
        duplicate=model.grid.is_duplicate,
    )


def _right_inverse(a: np.ndarray) -> np.ndarray:
    """``A^H (A A^H)^{-1}``, Tikhonov-regularized when badly conditioned."""
    gram = a @ a.conj().T
    n = gram.shape[0]
    s = np.linalg.svd(gram, compute_uv=False)
    cond = s[0] / s[-1] if s[-1] > 0 else np.inf
    if cond > MAX_CONDITION:
        gram = gram + 1e-10 * np.trace(gram).real / n * np.eye(n)
    try:
        c = sla.cho_factor(gram)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("normal matrix singular after regularization") from exc
    return sla.cho_solve(c, a).conj().T


def ls_estimate(reduced: ReducedObservation) -> SparseCoeffs:
    """Minimum-norm least squares over all angular-delay cells.

    ``Q = F_bar kron A_u`` factorizes, so its right inverse is applied per
    factor: ``Psi = A_u^+ Y~ (F_bar^T)^+``.
    """
    a_pinv = _right_inverse(reduced.a_u)  # 2|B| x M~
    ft_pinv = _right_inverse(reduced.f_bar.T)  # N_c x L
    psi = a_pinv @ reduced.y_tilde @ ft_pinv
    n = reduced.n_grid
    full = np.ones((n, reduced.delay_span), bool)
    return SparseCoeffs(psi[:n].copy(), psi[n:].copy(), np.argwhere(full), full)


def save_observation(observation: SoundingObservation, path):
    """Companion file to the scene text format (numpy ``.npz``)."""
    p = observation.plan
    np.savez(
        path,
        y_u=observation.y_u,
        block_states=p.block_states,
        pilots=p.pilots,
        noise_var=p.noise_var,
        pilot_power=p.pilot_power,
    )


def load_observation(path) -> SoundingObservation:
    with np.load(path) as d:
        plan = SoundingPlan(
            d["block_states"], d["pilots"], float(d["noise_var"]), float(d["pilot_power"])
        )
        return SoundingObservation(d["y_u"], plan)

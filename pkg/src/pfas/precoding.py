"""Zero-forcing downlink precoding and antenna-state optimization.

The channel of user ``k`` with antenna ``m`` in state ``n`` is read from a
response tensor ``E[k, n, m, c]`` (user, state, antenna, subcarrier).  A
relaxed configuration mixes the states of each antenna with weights
``s_bar[n, m] = softmax(s_tilde[:, m])[n] ** 2``, so

    H[c, m, k] = sum_n s_bar[n, m] E[k, n, m, c].

For a discrete configuration the mixture is one-hot and reduces to
``E[k, s_m, m, c]``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .channel import GridModel, ScatterScene, SparseCoeffs, exact_channel_matrix
from .errors import NumericalError, RankDeficientError

__all__ = [
    "DownlinkChannelSet",
    "PrecoderConfig",
    "PrecoderSolution",
    "zf_precoder",
    "rate",
    "reparam",
    "mix_channel",
    "objective",
    "objective_and_grad",
    "discrete_rate",
    "round_to_discrete",
    "refine_states",
    "optimize_states",
    "group_opt",
    "random_baseline",
    "nonfas",
    "upper_bound",
]

log = logging.getLogger(__name__)

MAX_CONDITION = 1e10
PENALTY = -1e6


@dataclass(frozen=True)
class DownlinkChannelSet:
    """Per-state responses of ``K`` users, ``response[k, n, m, c]``."""

    response: np.ndarray
    coeffs: tuple[SparseCoeffs, ...] | None = None

    def __post_init__(self):
        if self.response.ndim != 4:
            raise ValueError("response must have shape (K, N_s, M, N_c)")
        if self.n_users > self.n_antennas:
            raise ValueError("zero-forcing needs K <= M")

    @property
    def n_users(self) -> int:
        return self.response.shape[0]

    @property
    def n_states(self) -> int:
        return self.response.shape[1]

    @property
    def n_antennas(self) -> int:
        return self.response.shape[2]

    @property
    def n_subcarriers(self) -> int:
        return self.response.shape[3]

    @classmethod
    def from_coeffs(cls, model: GridModel, coeffs, n_subcarriers: int) -> "DownlinkChannelSet":
        """Grid-model channels restricted to each user's support."""
        coeffs = tuple(coeffs)
        resp = np.stack([model.state_response(c, n_subcarriers) for c in coeffs])
        return cls(resp, coeffs)

    @classmethod
    def from_scene(cls, scene: ScatterScene, patterns, geom, n_subcarriers: int):
        """Exact channels at the true path angles.

        Antenna ``m`` only sees its own state, so slice ``n`` is the channel
        with every antenna in state ``n``.
        """
        resp = np.empty(
            (scene.n_users, patterns.n_states, geom.m, n_subcarriers), complex
        )
        for n in range(patterns.n_states):
            states = np.full(geom.m, n)
            for k in range(scene.n_users):
                resp[k, n] = exact_channel_matrix(scene, patterns, geom, states, n_subcarriers, k)
        return cls(resp)

    @cached_property
    def by_antenna(self) -> np.ndarray:
        """``response`` rearranged to ``(M, N_s, N_c * K)`` for batched products."""
        k, n_s, m, n_c = self.response.shape
        return np.ascontiguousarray(
            np.transpose(self.response, (2, 1, 3, 0)).reshape(m, n_s, n_c * k)
        )

    def channel(self, states) -> np.ndarray:
        """``H[c, m, k]`` for a discrete configuration."""
        states = np.asarray(states, int)
        if states.shape != (self.n_antennas,):
            raise ValueError(f"expected {self.n_antennas} states, got shape {states.shape}")
        if np.any(states < 0) or np.any(states >= self.n_states):
            raise ValueError(f"state index out of range [0, {self.n_states})")
        m = np.arange(self.n_antennas)
        return np.transpose(self.response[:, states, m, :], (2, 1, 0))


@dataclass(frozen=True)
class PrecoderConfig:
    lr: float = 1e-3
    steps: int = 500
    restarts: int = 4
    init_scale: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    refine: bool = True  # single-antenna coordinate ascent after rounding

    def __post_init__(self):
        if self.lr <= 0 or self.steps < 0 or self.restarts < 1:
            raise ValueError("need lr > 0, steps >= 0 and restarts >= 1")


@dataclass
class PrecoderSolution:
    states: np.ndarray  # M, zero-based
    gamma: np.ndarray  # N_c
    rate: float  # bits / subcarrier / user
    latent: np.ndarray | None = None  # N_s x M
    weights: np.ndarray | None = None  # N_s x M
    trace: list[float] = field(default_factory=list)
    candidates: np.ndarray | None = None  # rates of the searched configurations


# --------------------------------------------------------------------------
# zero forcing


def _gram(h):
    """``H^T conj(H)`` over the trailing two axes."""
    return np.swapaxes(h, -1, -2) @ h.conj()


def _condition(g):
    """Condition number of Hermitian PSD matrices (batched)."""
    ev = np.linalg.eigvalsh(g)
    with np.errstate(divide="ignore"):
        return np.where(ev[..., 0] > 0, ev[..., -1] / np.maximum(ev[..., 0], 1e-300), np.inf)


def zf_precoder(h, p_t: float):
    """Zero-forcing precoder ``W = sqrt(gamma) conj(H) (H^T conj(H))^{-1}``.

    Parameters
    ----------
    h : (M, K) complex
    p_t : float
        Per-user transmit power; the total power is ``K * p_t``.

    Returns
    -------
    w : (M, K) complex
    gamma : float
    """
    h = np.asarray(h, complex)
    if h.ndim != 2 or h.shape[1] > h.shape[0]:
        raise ValueError("H must be M x K with K <= M")
    g = _gram(h)
    cond = float(_condition(g))
    if cond > MAX_CONDITION:
        raise RankDeficientError("channel matrix is rank deficient", cond)
    k = h.shape[1]
    x = np.linalg.solve(g, h.T)  # G^{-1} H^T, K x M
    trace = float(np.real(np.trace(np.linalg.solve(g, np.eye(k)))))
    gamma = k * p_t / trace
    return math.sqrt(gamma) * x.conj().T, gamma


def rate(gamma, noise_var: float = 1.0):
    """Per-user rate ``log2(1 + gamma / noise_var)``."""
    gamma = np.asarray(gamma, float)
    if np.any(gamma < 0):
        raise ValueError("gamma must be nonnegative")
    out = np.log2(1.0 + gamma / noise_var)
    return float(out) if out.ndim == 0 else out


def _zf_gamma(h, p_t):
    """Batched ``gamma[c]`` for ``h`` of shape ``(N_c, M, K)``."""
    g = _gram(h)
    if np.any(_condition(g) > MAX_CONDITION):
        raise RankDeficientError("channel matrix is rank deficient", float(np.max(_condition(g))))
    eye = np.broadcast_to(np.eye(h.shape[-1]), g.shape)
    trace = np.real(np.trace(np.linalg.solve(g, eye), axis1=-2, axis2=-1))
    return h.shape[-1] * p_t / trace


def discrete_rate(channels: DownlinkChannelSet, states, p_t: float, noise_var: float = 1.0):
    """``(mean rate, gamma)`` of a discrete configuration."""
    gamma = _zf_gamma(channels.channel(states), p_t)
    return float(np.mean(rate(gamma, noise_var))), gamma


# --------------------------------------------------------------------------
# relaxation


def reparam(latent, axis: int = 0) -> np.ndarray:
    """Squared softmax along ``axis``; the square roots sum to one."""
    latent = np.asarray(latent, float)
    z = latent - latent.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)
    return p * p


def mix_channel(channels: DownlinkChannelSet, weights) -> np.ndarray:
    """``H[c, m, k]`` for relaxed weights of shape ``(N_s, M)``."""
    r = channels.by_antenna  # M x N_s x (N_c K)
    h = (np.asarray(weights, float).T[:, None, :] @ r)[:, 0, :]
    return np.transpose(
        h.reshape(channels.n_antennas, channels.n_subcarriers, channels.n_users), (1, 0, 2)
    )


def objective_and_grad(latent, channels: DownlinkChannelSet, p_t: float, noise_var: float = 1.0):
    """Mean rate over subcarriers and its gradient with respect to ``latent``.

    Returns ``(value, grad, penalized)``.  When any subcarrier's Gram matrix
    has condition number above ``1e10`` the value is ``-1e6``, the gradient
    is zero and ``penalized`` is true.

    With ``G = H^T conj(H)`` and ``t = Tr(G^{-1})``,
    ``dt = -2 Re sum(conj(H) G^{-2} * dH)``; the softmax-squared map then
    gives ``df/ds~_i = 2 p_i^2 g_i - 2 p_i sum_j g_j p_j^2``.
    """
    latent = np.asarray(latent, float)
    p = np.exp(latent - latent.max(axis=0, keepdims=True))
    p /= p.sum(axis=0, keepdims=True)
    weights = p * p
    h = mix_channel(channels, weights)
    # one Hermitian eigendecomposition per subcarrier gives the condition
    # number, Tr(G^{-1}) and G^{-2} H^T
    lam, v = np.linalg.eigh(_gram(h))
    if np.any(lam[:, 0] <= 0) or np.any(lam[:, -1] > MAX_CONDITION * lam[:, 0]):
        return PENALTY, np.zeros_like(latent), True
    k = h.shape[-1]
    c = k * p_t / noise_var
    t = np.sum(1.0 / lam, axis=-1)
    value = float(np.mean(np.log2(1.0 + c / t)))
    # X = conj(H) G^{-2} = (G^{-2} H^T)^H since G is Hermitian
    vh_ht = np.swapaxes(v.conj(), -1, -2) @ np.swapaxes(h, -1, -2)
    g2_ht = v @ (vh_ht / (lam * lam)[..., None])
    x = np.swapaxes(g2_ht, -1, -2).conj()  # N_c x M x K
    dfdt = -c / (math.log(2.0) * t * (t + c)) / h.shape[0]
    # dt / dweights[n, m] = -2 Re sum_{c,k} X[c,m,k] E[k,n,m,c]
    a = np.transpose(dfdt[:, None, None] * x, (1, 0, 2)).reshape(x.shape[1], -1)
    gw = -2.0 * np.real(channels.by_antenna @ a[:, :, None])[:, :, 0].T
    grad = 2.0 * weights * gw - 2.0 * p * np.sum(gw * weights, axis=0, keepdims=True)
    return value, grad, False


def objective(latent, channels: DownlinkChannelSet, p_t: float, noise_var: float = 1.0) -> float:
    return objective_and_grad(latent, channels, p_t, noise_var)[0]


def round_to_discrete(weights) -> np.ndarray:
    """Per-antenna argmax of the relaxed weights ``(N_s, M)``; ties go low."""
    return np.argmax(np.asarray(weights), axis=0)


def _mean_rates(h, p_t, noise_var):
    """Mean rate for a batch of channels ``(..., N_c, M, K)``; ``-inf`` if singular."""
    lam = np.linalg.eigvalsh(_gram(h))
    ok = np.all((lam[..., 0] > 0) & (lam[..., -1] <= MAX_CONDITION * lam[..., 0]), axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.sum(1.0 / lam, axis=-1)
        r = np.mean(np.log2(1.0 + h.shape[-1] * p_t / (noise_var * t)), axis=-1)
    return np.where(ok, r, -np.inf)


def refine_states(
    channels: DownlinkChannelSet, states, p_t: float, noise_var: float = 1.0, max_sweeps: int = 20
) -> np.ndarray:
    """Coordinate ascent: move one antenna at a time to its best state.

    Sweeps antennas in order until no single change raises the mean rate.
    """
    states = np.array(states, int)
    resp = channels.response
    m_idx = np.arange(channels.n_antennas)
    h = np.transpose(resp[:, states, m_idx, :], (2, 1, 0))  # N_c x M x K
    current = _mean_rates(h, p_t, noise_var)
    for _ in range(max_sweeps):
        improved = False
        for m in range(channels.n_antennas):
            cand = np.repeat(h[None], channels.n_states, axis=0)
            cand[:, :, m, :] = np.transpose(resp[:, :, m, :], (1, 2, 0))
            rates = _mean_rates(cand, p_t, noise_var)
            best = int(np.argmax(rates))
            if rates[best] > current + 1e-12 * max(1.0, abs(current)):
                states[m] = best
                h = cand[best]
                current = rates[best]
                improved = True
        if not improved:
            break
    return states


def optimize_states(
    channels: DownlinkChannelSet,
    p_t: float,
    noise_var: float = 1.0,
    config: PrecoderConfig | None = None,
    rng=None,
) -> PrecoderSolution:
    """Adam ascent on the relaxed objective from several random starts.

    Each trajectory is rounded to a discrete configuration (argmax, then
    :func:`refine_states` unless ``config.refine`` is false) and the restart
    whose configuration has the highest rate is returned.
    """
    config = config or PrecoderConfig()
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    shape = (channels.n_states, channels.n_antennas)
    best = None
    for _ in range(config.restarts):
        latent = config.init_scale * rng.standard_normal(shape)
        m1 = np.zeros(shape)
        m2 = np.zeros(shape)
        trace = []
        for step in range(1, config.steps + 1):
            value, grad, _ = objective_and_grad(latent, channels, p_t, noise_var)
            trace.append(value)
            m1 = config.beta1 * m1 + (1 - config.beta1) * grad
            m2 = config.beta2 * m2 + (1 - config.beta2) * grad * grad
            m1_hat = m1 / (1 - config.beta1**step)
            m2_hat = m2 / (1 - config.beta2**step)
            latent = latent + config.lr * m1_hat / (np.sqrt(m2_hat) + config.eps)
        trace.append(objective(latent, channels, p_t, noise_var))
        weights = reparam(latent)
        states = round_to_discrete(weights)
        if config.refine:
            states = refine_states(channels, states, p_t, noise_var)
        try:
            r, gamma = discrete_rate(channels, states, p_t, noise_var)
        except RankDeficientError:
            continue
        if best is None or r > best.rate:
            best = PrecoderSolution(states, gamma, r, latent, weights, trace)
    if best is None:
        raise NumericalError("every restart ended in a rank-deficient configuration")
    return best


# --------------------------------------------------------------------------
# baselines


def group_opt(channels: DownlinkChannelSet, p_t: float, noise_var: float = 1.0) -> PrecoderSolution:
    """Best configuration with every antenna in the same state."""
    m = channels.n_antennas
    table = np.full(channels.n_states, -np.inf)
    gammas = {}
    for n in range(channels.n_states):
        try:
            table[n], gammas[n] = discrete_rate(channels, np.full(m, n), p_t, noise_var)
        except RankDeficientError:
            pass
    if not np.any(np.isfinite(table)):
        raise NumericalError("every uniform configuration is rank deficient")
    n = int(np.argmax(table))
    return PrecoderSolution(np.full(m, n), gammas[n], float(table[n]), candidates=table)


def random_baseline(channels: DownlinkChannelSet, p_t: float, noise_var: float = 1.0, rng=None):
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    states = rng.integers(0, channels.n_states, size=channels.n_antennas)
    r, gamma = discrete_rate(channels, states, p_t, noise_var)
    return PrecoderSolution(states, gamma, r)


def nonfas(channels_iso: DownlinkChannelSet, p_t: float, noise_var: float = 1.0):
    """Rate with fixed hemispherical antennas.

    ``channels_iso`` is the same propagation scene seen through
    :class:`IsotropicPatternSet` (a single state), e.g.
    ``DownlinkChannelSet.from_coeffs(GridModel(grid, IsotropicPatternSet(), geom), ...)``.
    """
    if channels_iso.n_states != 1:
        raise ValueError("the non-reconfigurable baseline has a single state")
    states = np.zeros(channels_iso.n_antennas, int)
    r, gamma = discrete_rate(channels_iso, states, p_t, noise_var)
    return PrecoderSolution(states, gamma, r)


def upper_bound(channels_true: DownlinkChannelSet, p_t: float, noise_var: float = 1.0,
                config: PrecoderConfig | None = None, rng=None) -> PrecoderSolution:
    """State optimization with the true channels in place of estimates."""
    return optimize_states(channels_true, p_t, noise_var, config, rng)

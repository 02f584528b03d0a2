"""Mask-assisted turbo variational Bayesian estimator.

Two modules exchange Gaussian messages on ``X_A = X_B^T`` with
``X_B = A_u Psi~``:

* the LMMSE module moves the observation from frequency to delay with a
  white prior of variance ``prior_var`` (one ``L x L`` system for all rows);
* the VBI module runs a Gaussian-Gamma sparse Bayesian update per delay tap,
  restricted to the cells switched on by the dilated OMP support mask.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .channel import AngleGrid, SparseCoeffs
from .errors import NumericalError
from .sounding import ReducedObservation

__all__ = [
    "Mask",
    "VbiConfig",
    "VbiState",
    "VbiResult",
    "build_mask",
    "prior_variance",
    "lmmse_freq_delay",
    "extrinsic_likelihood",
    "reduced_lmmse",
    "update_alpha",
    "inverse_moment",
    "run_turbo_vbi",
]

log = logging.getLogger(__name__)

_KAPPA_FLOOR = 1e-300


@dataclass(frozen=True)
class Mask:
    """Binary activity map ``d`` over (grid point, delay tap)."""

    d: np.ndarray  # |B| x L bool

    def __post_init__(self):
        d = np.asarray(self.d, bool)
        if d.ndim != 2:
            raise ValueError("mask must be a |B| x L matrix")
        object.__setattr__(self, "d", d)

    @property
    def active_sets(self) -> list[np.ndarray]:
        return [np.flatnonzero(self.d[:, ell]) for ell in range(self.d.shape[1])]

    @property
    def n_active(self) -> int:
        return int(self.d.sum())


def build_mask(support, grid: AngleGrid, delay_span: int) -> Mask:
    """Dilate ``support`` by one cell in theta, phi and delay.

    ``support`` is a :class:`SparseCoeffs` or an iterable of ``(b, l)``.
    Azimuth wraps around over the ``n_phi - 1`` distinct azimuths and cells
    that repeat another direction (poles, ``phi = 2 pi``) are folded onto
    their canonical index, so the mask never activates two copies of the
    same column.
    """
    if isinstance(support, SparseCoeffs):
        pairs = np.asarray(support.support, int).reshape(-1, 2)
    else:
        pairs = np.asarray(list(support), int).reshape(-1, 2)
    if len(pairs) == 0:
        raise ValueError("cannot build a mask from an empty support")
    b, ell = pairs[:, 0], pairs[:, 1]
    if np.any((b < 0) | (b >= grid.size) | (ell < 0) | (ell >= delay_span)):
        raise ValueError("support index outside the grid or delay span")
    b = grid.canonical[b]
    i_t, i_p = grid.unravel(b)
    n_az = grid.n_phi - 1
    d = np.zeros((grid.size, delay_span), bool)
    for dt in (-1, 0, 1):
        t = i_t + dt
        ok_t = (t >= 0) & (t < grid.n_theta)
        for dp in (-1, 0, 1):
            p = np.mod(i_p + dp, n_az)
            cell = grid.canonical[grid.index(np.where(ok_t, t, 0), p)]
            for dl in (-1, 0, 1):
                tau = ell + dl
                ok = ok_t & (tau >= 0) & (tau < delay_span)
                d[cell[ok], tau[ok]] = True
    return Mask(d)


@dataclass(frozen=True)
class VbiConfig:
    a0: float = 1e-6
    c0: float = 1e-6
    max_iter: int = 20
    damping: float = 1.0  # weight of the new kappa; 1.0 disables damping
    var_floor: float = 1e-12
    prune_rel: float = 1e-4  # keep cells with power >= prune_rel * max power
    dilation_seed: float = 1e-3  # initial kappa of mask-only cells, relative to the max
    divergence_factor: float = 1e6
    # "mean_field": kappa = 1 / E[alpha] = c/a; "exact": kappa = E[1/alpha] = c/(a-1)
    kappa_moment: str = "mean_field"

    def __post_init__(self):
        if self.a0 <= 0 or self.c0 <= 0:
            raise ValueError("a0 and c0 must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if not 0.0 < self.damping <= 1.0:
            raise ValueError("damping must lie in (0, 1]")
        if self.var_floor <= 0:
            raise ValueError("var_floor must be positive")
        if self.kappa_moment not in ("mean_field", "exact"):
            raise ValueError(f"unknown kappa_moment {self.kappa_moment!r}")


@dataclass
class VbiState:
    """Messages and variational parameters; all per-cell arrays are ``|B| x L``."""

    prior_var: float
    post_var: float
    blik_var: float
    omega_post: np.ndarray  # L x M~
    omega_blik: np.ndarray  # M~ x L
    a_tilde: np.ndarray
    c_tilde: np.ndarray
    kappa: np.ndarray
    mu_v: np.ndarray
    mu_h: np.ndarray
    var_v: np.ndarray
    var_h: np.ndarray


@dataclass
class VbiResult:
    coeffs: SparseCoeffs
    state: VbiState
    iterations: int
    diverged: bool = False
    data_fit: list[float] = field(default_factory=list)


def prior_variance(kappa, a_u, floor: float = 1e-12) -> float:
    """Scalar prior variance of ``X_A`` implied by per-cell variances ``kappa``.

    Equals ``(1 / (M~ L)) sum_l Tr(A_u diag([k_l; k_l]) A_u^H)``, which only
    needs the column norms of ``A_u``.
    """
    kappa = np.asarray(kappa, float)
    m_tilde = a_u.shape[0]
    n_grid = kappa.shape[0]
    col = np.sum(np.abs(a_u) ** 2, axis=0)
    weight = col[:n_grid] + col[n_grid:]
    value = float(weight @ kappa.sum(axis=1)) / (m_tilde * kappa.shape[1])
    return max(value, floor)


def lmmse_freq_delay(y_tilde, f_bar, noise_var, prior_var, floor: float = 1e-12):
    """Frequency-to-delay LMMSE with a white ``prior_var`` prior.

    Returns ``(omega, cov, post_var)`` with ``omega`` of shape ``L x M~``,
    the shared ``L x L`` posterior covariance and ``post_var = Tr(cov) / L``.
    """
    noise_var = max(float(noise_var), floor)
    prior_var = max(float(prior_var), floor)
    n_delay = f_bar.shape[1]
    prec = np.eye(n_delay) / prior_var + (f_bar.conj().T @ f_bar) / noise_var
    try:
        fac = sla.cho_factor(prec)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("frequency-delay precision matrix is not positive definite") from exc
    cov = sla.cho_solve(fac, np.eye(n_delay))
    omega = sla.cho_solve(fac, f_bar.conj().T @ y_tilde.T) / noise_var
    post_var = float(np.trace(cov).real) / n_delay
    return omega, cov, post_var


def extrinsic_likelihood(omega_post, prior_var, post_var, clamp: float = 1e-2):
    """Divide the posterior by the prior message.

    The variance difference is clamped to ``clamp * prior_var`` so the
    extrinsic message stays proper when the two variances nearly coincide.
    """
    diff = max(prior_var - post_var, clamp * prior_var)
    blik_var = prior_var * post_var / diff
    omega_blik = (prior_var / diff) * np.asarray(omega_post).T
    return omega_blik, blik_var


def reduced_lmmse(a_active, kappa_active, mu_blik, blik_var):
    """Posterior of the active coefficients of one delay tap.

    Parameters
    ----------
    a_active : (M~, 2n) complex
        Active columns, V block first then H block.
    kappa_active : (n,) float
        Prior variances, shared by the two polarizations of a cell.
    mu_blik : (M~,) or (M~, k) complex
    blik_var : float

    Returns
    -------
    mu : (2n,) or (2n, k) complex
    var : (2n,) float
        Diagonal of ``(diag([k; k])^{-1} + A^H A / blik_var)^{-1}``.

    Notes
    -----
    When ``2n > M~`` the ``M~ x M~`` matrix
    ``S = blik_var I + A diag([k; k]) A^H`` is factored (matrix inversion
    lemma), which avoids the larger system and never divides by small
    variances.  Otherwise the ``2n x 2n`` information form is used, which
    stays accurate when the prior is much flatter than the likelihood.
    """
    k2 = np.concatenate([kappa_active, kappa_active])
    m_tilde, n2 = a_active.shape
    if n2 <= m_tilde:
        prec = np.diag(1.0 / np.maximum(k2, _KAPPA_FLOOR)) + a_active.conj().T @ a_active / blik_var
        try:
            fac = sla.cho_factor(prec)
        except np.linalg.LinAlgError as exc:
            raise NumericalError("reduced LMMSE precision is not positive definite") from exc
        mu = sla.cho_solve(fac, a_active.conj().T @ mu_blik) / blik_var
        var = np.real(np.diag(sla.cho_solve(fac, np.eye(n2))))
        return mu, np.maximum(var, 0.0)
    ak = a_active * k2
    s = blik_var * np.eye(m_tilde) + ak @ a_active.conj().T
    try:
        fac = sla.cho_factor(s)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("reduced LMMSE system is not positive definite") from exc
    mu = ak.conj().T @ sla.cho_solve(fac, mu_blik)
    sa = sla.cho_solve(fac, ak)
    var = k2 - np.real(np.sum(ak.conj() * sa, axis=0))
    return mu, np.maximum(var, 0.0)


def update_alpha(mu_v, mu_h, var_v, var_h, a0: float = 1e-6, c0: float = 1e-6):
    """Gamma posterior of the cell precisions; returns ``(a_tilde, c_tilde)``."""
    c = c0 + np.abs(mu_v) ** 2 + np.abs(mu_h) ** 2 + var_v + var_h
    return np.full(np.shape(c), a0 + 2.0), c


def inverse_moment(a_tilde, c_tilde, kind: str = "mean_field"):
    """Per-cell prior variance from ``Gam(a, c)``.

    ``kind="mean_field"`` gives ``1 / E[alpha] = c / a``, the variance that
    the mean-field update of ``q(psi)`` uses.  ``kind="exact"`` gives
    ``E[1/alpha] = c / (a - 1)`` (``c / a`` when ``a <= 1``).
    """
    a_tilde = np.asarray(a_tilde, float)
    c_tilde = np.asarray(c_tilde, float)
    if kind == "mean_field":
        return c_tilde / a_tilde
    if kind != "exact":
        raise ValueError(f"unknown moment kind {kind!r}")
    big = a_tilde > 1.0
    return np.where(big, c_tilde / np.where(big, a_tilde - 1.0, 1.0), c_tilde / a_tilde)


def _initial_kappa(mask: Mask, init: SparseCoeffs | None, config: VbiConfig) -> np.ndarray:
    d = mask.d
    if init is None:
        return d.astype(float)
    power = 0.5 * (np.abs(init.psi_v) ** 2 + np.abs(init.psi_h) ** 2)
    power = np.where(d, power, 0.0)
    top = power.max()
    if top <= 0:
        return d.astype(float)
    kappa = np.where(power > 0, power, config.dilation_seed * top)
    return np.where(d, kappa + config.var_floor, 0.0)


def _write_trace(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "prior_var", "post_var", "blik_var", "data_fit", "nmse_db"])
        for row in rows:
            w.writerow(["%.9g" % v if isinstance(v, float) else v for v in row])


def run_turbo_vbi(
    reduced: ReducedObservation,
    mask: Mask,
    config: VbiConfig | None = None,
    init: SparseCoeffs | None = None,
    truth: SparseCoeffs | None = None,
    trace_path=None,
) -> VbiResult:
    """Alternate the LMMSE and VBI modules for ``config.max_iter`` rounds.

    ``init`` (normally the OMP estimate) seeds the per-cell variances.
    ``truth`` is only used for the optional CSV trace written to
    ``trace_path``.
    """
    config = config or VbiConfig()
    n_grid, n_delay = reduced.n_grid, reduced.delay_span
    if mask.d.shape != (n_grid, n_delay):
        raise ValueError(f"mask shape {mask.d.shape} does not match {(n_grid, n_delay)}")
    d = mask.d
    a_u = reduced.a_u
    floor = config.var_floor

    kappa = _initial_kappa(mask, init, config)
    zeros = np.zeros((n_grid, n_delay))
    state = VbiState(
        prior_var=prior_variance(kappa, a_u, floor),
        post_var=np.nan,
        blik_var=np.nan,
        omega_post=np.zeros((n_delay, reduced.m_tilde), complex),
        omega_blik=np.zeros((reduced.m_tilde, n_delay), complex),
        a_tilde=np.where(d, config.a0, 0.0),
        c_tilde=np.where(d, config.c0, 0.0),
        kappa=kappa,
        mu_v=zeros.astype(complex),
        mu_h=zeros.astype(complex),
        var_v=zeros.copy(),
        var_h=zeros.copy(),
    )
    active = mask.active_sets
    trace_rows = []
    fits: list[float] = []
    first_post = None
    diverged = False
    it = 0
    for it in range(1, config.max_iter + 1):
        omega, _, post_var = lmmse_freq_delay(
            reduced.y_tilde, reduced.f_bar, reduced.noise_var, state.prior_var, floor
        )
        if first_post is None:
            first_post = post_var
        if not np.isfinite(post_var) or post_var > config.divergence_factor * first_post:
            log.warning("turbo-VBI diverged at iteration %d; returning the last estimate", it)
            diverged = True
            it -= 1
            break
        omega_blik, blik_var = extrinsic_likelihood(omega, state.prior_var, post_var)
        blik_var = max(blik_var, floor)

        mu_v = np.zeros((n_grid, n_delay), complex)
        mu_h = np.zeros_like(mu_v)
        var_v = np.zeros((n_grid, n_delay))
        var_h = np.zeros_like(var_v)
        for ell, cells in enumerate(active):
            if cells.size == 0:
                continue
            a_l = np.hstack([reduced.a_v[:, cells], reduced.a_h[:, cells]])
            mu, var = reduced_lmmse(a_l, state.kappa[cells, ell], omega_blik[:, ell], blik_var)
            n = cells.size
            mu_v[cells, ell], mu_h[cells, ell] = mu[:n], mu[n:]
            var_v[cells, ell], var_h[cells, ell] = var[:n], var[n:]

        a_t, c_t = update_alpha(mu_v, mu_h, var_v, var_h, config.a0, config.c0)
        new_kappa = np.where(d, inverse_moment(a_t, c_t, config.kappa_moment), 0.0)
        kappa = config.damping * new_kappa + (1.0 - config.damping) * state.kappa

        state = VbiState(
            prior_var=prior_variance(kappa, a_u, floor),
            post_var=post_var,
            blik_var=blik_var,
            omega_post=omega,
            omega_blik=omega_blik,
            a_tilde=np.where(d, a_t, 0.0),
            c_tilde=np.where(d, c_t, 0.0),
            kappa=kappa,
            mu_v=mu_v,
            mu_h=mu_h,
            var_v=var_v,
            var_h=var_h,
        )
        fit = float(np.linalg.norm(reduced.y_tilde - reduced.forward(mu_v, mu_h)))
        fits.append(fit)
        if trace_path is not None:
            nmse = np.nan
            if truth is not None:
                err = np.sum(np.abs(mu_v - truth.psi_v) ** 2 + np.abs(mu_h - truth.psi_h) ** 2)
                ref = np.sum(np.abs(truth.psi_v) ** 2 + np.abs(truth.psi_h) ** 2)
                nmse = float(10 * np.log10(err / ref)) if ref > 0 else np.nan
            trace_rows.append([it, state.prior_var, post_var, blik_var, fit, nmse])

    if trace_path is not None:
        _write_trace(trace_path, trace_rows)

    power = np.abs(state.mu_v) ** 2 + np.abs(state.mu_h) ** 2
    top = power.max() if power.size else 0.0
    keep = d & (power >= config.prune_rel * top) & (power > 0)
    pv = np.where(keep, state.mu_v, 0.0)
    ph = np.where(keep, state.mu_h, 0.0)
    coeffs = SparseCoeffs(pv, ph, np.argwhere(keep), d.copy())
    return VbiResult(coeffs, state, it, diverged, fits)

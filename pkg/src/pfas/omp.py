"""Shared-support orthogonal matching pursuit over the reduced observation.

Every candidate index ``i = l * |B| + b`` owns two columns, one per
polarization: ``q_V,i = F_bar[:, l] kron a_V,b`` and likewise for H.  Both
polarizations always enter or leave the support together.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .channel import SparseCoeffs
from .errors import RankDeficientError
from .sounding import ReducedObservation

__all__ = ["OmpResult", "select_index", "fit_support", "run_momp", "pair_scores"]

log = logging.getLogger(__name__)

DEGENERATE_NORM = 1e-12
MAX_CONDITION = 1e12


@dataclass
class OmpResult:
    coeffs: SparseCoeffs
    support_order: list[int]
    residual_history: list[float]
    iterations: int
    saturated: bool = False
    stop_reason: str = field(default="threshold")


class _PairStats:
    """Per-index 2x2 Gram matrices ``q~_i^H q~_i``, shape ``(|B|, L, 2, 2)``.

    With Kronecker columns each block factors as
    ``||F_bar[:, l]||^2 * [[a_V^H a_V, a_V^H a_H], [a_H^H a_V, a_H^H a_H]]``.
    """

    def __init__(self, reduced: ReducedObservation):
        av, ah = reduced.a_v, reduced.a_h
        vv = np.sum(np.abs(av) ** 2, axis=0)
        hh = np.sum(np.abs(ah) ** 2, axis=0)
        vh = np.sum(av.conj() * ah, axis=0)
        fn = np.sum(np.abs(reduced.f_bar) ** 2, axis=0)
        self.gvv = np.outer(vv, fn)
        self.ghh = np.outer(hh, fn)
        self.gvh = np.outer(vh, fn)
        self.det = self.gvv * self.ghh - np.abs(self.gvh) ** 2
        self.norm = np.sqrt(self.gvv + self.ghh)
        trace = self.gvv + self.ghh
        self.singular = self.det <= 1e-12 * trace**2
        self.degenerate = self.norm < DEGENERATE_NORM
        if reduced.duplicate is not None:
            self.degenerate |= reduced.duplicate[:, None]


def pair_scores(r, reduced: ReducedObservation, stats=None, kind: str = "energy"):
    """Selection score of every index for residual ``r`` (matrix or vec form).

    ``kind="coefficient"`` is the squared norm of the two-column least-squares
    coefficients ``||(q~^H q~)^{-1} q~^H r||^2``; ``kind="energy"`` is the
    residual energy captured by that fit, ``r^H q~ (q~^H q~)^{-1} q~^H r``.
    Degenerate indices score ``-inf``.
    """
    stats = stats or _PairStats(reduced)
    r = np.asarray(r).reshape(reduced.m_tilde, reduced.n_subcarriers, order="F")
    zv, zh = reduced.adjoint(r)
    det = np.where(stats.singular, 1.0, stats.det)
    # closed-form 2x2 inverse
    xv = (stats.ghh * zv - stats.gvh * zh) / det
    xh = (-stats.gvh.conj() * zv + stats.gvv * zh) / det
    if np.any(stats.singular):
        # rank-one pair: pseudo-inverse of the 2x2 block instead
        pv, ph = _pinv_pair(stats, zv, zh)
        xv = np.where(stats.singular, pv, xv)
        xh = np.where(stats.singular, ph, xh)
    if kind == "coefficient":
        score = np.abs(xv) ** 2 + np.abs(xh) ** 2
    elif kind == "energy":
        score = np.real(zv.conj() * xv + zh.conj() * xh)
    else:
        raise ValueError(f"unknown score kind {kind!r}")
    return np.where(stats.degenerate, -np.inf, score)


def _pinv_pair(stats, zv, zh):
    g = np.stack(
        [
            np.stack([stats.gvv, stats.gvh], axis=-1),
            np.stack([stats.gvh.conj(), stats.ghh], axis=-1),
        ],
        axis=-2,
    ).astype(complex)
    gp = np.linalg.pinv(g, hermitian=True)
    z = np.stack([zv, zh], axis=-1)[..., None]
    x = (gp @ z)[..., 0]
    return x[..., 0], x[..., 1]


def select_index(r, reduced: ReducedObservation, excluded=(), stats=None, kind="energy") -> int:
    """Best vectorized index ``l * |B| + b`` outside ``excluded``.

    Ties go to the smallest index.
    """
    score = pair_scores(r, reduced, stats, kind).ravel(order="F")
    if len(excluded):
        score[np.asarray(list(excluded), int)] = -np.inf
    if not np.any(np.isfinite(score)):
        raise ValueError("no candidate index left")
    return int(np.argmax(score))


def _split(indices, n_grid):
    idx = np.asarray(indices, int)
    ell, b = np.divmod(idx, n_grid)
    return b, ell


def fit_support(support, reduced: ReducedObservation):
    """Least squares on the columns of ``support``; returns ``(psi_v, psi_h, r)``.

    ``psi_v``/``psi_h`` are ordered like ``support`` and ``r`` is the
    residual in matrix form ``M~ x N_c``.  Raises :class:`RankDeficientError`
    when the selected columns are (numerically) dependent.
    """
    y = reduced.y_tilde
    if len(support) == 0:
        return np.zeros(0, complex), np.zeros(0, complex), y.copy()
    b, ell = _split(support, reduced.n_grid)
    av, ah = reduced.a_v[:, b], reduced.a_h[:, b]
    f = reduced.f_bar[:, ell]
    fg = f.conj().T @ f
    gram = np.block(
        [
            [fg * (av.conj().T @ av), fg * (av.conj().T @ ah)],
            [fg * (ah.conj().T @ av), fg * (ah.conj().T @ ah)],
        ]
    )
    yf = y @ f.conj()
    rhs = np.concatenate([np.sum(av.conj() * yf, axis=0), np.sum(ah.conj() * yf, axis=0)])
    s = np.linalg.eigvalsh(gram)
    cond = s[-1] / s[0] if s[0] > 0 else np.inf
    if cond > MAX_CONDITION:
        raise RankDeficientError("support columns are linearly dependent", cond)
    x = sla.cho_solve(sla.cho_factor(gram), rhs)
    n = len(support)
    psi_v, psi_h = x[:n], x[n:]
    r = y - (av * psi_v + ah * psi_h) @ f.T
    return psi_v, psi_h, r


def run_momp(
    reduced: ReducedObservation,
    noise_var: float | None = None,
    max_iter: int | None = None,
    rtol: float = 1e-16,
    kind: str = "energy",
) -> OmpResult:
    """Grow a shared support until ``||r||^2 <= M~ N_c noise_var``.

    ``rtol`` adds a relative floor ``rtol * ||y~||^2`` so that noiseless runs
    terminate.  ``max_iter`` defaults to ``min(M~ N_c / 2, 256)``; hitting it
    sets ``saturated``.
    """
    noise_var = reduced.noise_var if noise_var is None else noise_var
    n_obs = reduced.m_tilde * reduced.n_subcarriers
    if max_iter is None:
        max_iter = max(1, min(n_obs // 2, 256))
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")
    stats = _PairStats(reduced)
    y_energy = float(np.sum(np.abs(reduced.y_tilde) ** 2))
    threshold = max(n_obs * noise_var, rtol * y_energy)

    support: list[int] = []
    history: list[float] = []
    r = reduced.y_tilde
    energy = y_energy
    psi_v = psi_h = np.zeros(0, complex)
    saturated = False
    reason = "threshold"
    while energy > threshold:
        if len(support) >= max_iter:
            saturated, reason = True, "max_iter"
            break
        try:
            i = select_index(r, reduced, support, stats, kind)
        except ValueError:
            saturated, reason = True, "exhausted"
            break
        trial = support + [i]
        try:
            pv, ph, r_new = fit_support(trial, reduced)
        except RankDeficientError:
            saturated, reason = True, "rank"
            break
        e_new = float(np.sum(np.abs(r_new) ** 2))
        if e_new >= energy:
            saturated, reason = True, "stalled"
            break
        support, psi_v, psi_h, r, energy = trial, pv, ph, r_new, e_new
        history.append(energy)
    if saturated:
        log.debug("modified OMP stopped early (%s) after %d indices", reason, len(support))

    shape = (reduced.n_grid, reduced.delay_span)
    pv_full = np.zeros(shape, complex)
    ph_full = np.zeros(shape, complex)
    ind = np.zeros(shape, bool)
    if support:
        b, ell = _split(support, reduced.n_grid)
        pv_full[b, ell] = psi_v
        ph_full[b, ell] = psi_h
        ind[b, ell] = True
    coeffs = SparseCoeffs(pv_full, ph_full, np.argwhere(ind), ind.copy())
    return OmpResult(coeffs, support, history, len(support), saturated, reason)

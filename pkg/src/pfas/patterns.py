"""Reconfigurable antenna radiation patterns.

Every pattern set maps ``(state, direction, polarization)`` to a complex
response.  States are indexed from 0 to ``n_states - 1``.  Three families are
provided:

* :class:`SyntheticPatternSet` -- seeded truncated spherical-harmonic
  expansions, normalized to unit average radiated power per state.
* :class:`IsotropicPatternSet` -- a single hemispherical state used by the
  non-reconfigurable baseline.
* :class:`TabulatedPatternSet` -- bilinear interpolation of a measured grid
  loaded with :func:`load_pattern_table`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.interpolate import RegularGridInterpolator
from scipy.special import sph_harm_y

__all__ = [
    "Direction",
    "PatternSet",
    "SyntheticPatternSet",
    "IsotropicPatternSet",
    "TabulatedPatternSet",
    "synth_pattern_set",
    "isotropic_pattern",
    "mixed_pattern",
    "fibonacci_sphere",
    "average_power",
    "load_pattern_table",
    "save_pattern_table",
]

POLARIZATIONS = ("V", "H")
_ANGLE_TOL = 1e-12


@dataclass(frozen=True)
class Direction:
    """Azimuth ``phi`` and elevation ``theta`` in radians.

    ``theta`` is measured from the array's column axis, so ``theta = 0`` is a
    pole.  ``phi = 2*pi`` is accepted because the angular grid keeps both
    azimuth endpoints.
    """

    phi: float
    theta: float

    def __post_init__(self):
        if not (-_ANGLE_TOL <= self.phi <= 2 * math.pi + _ANGLE_TOL):
            raise ValueError(f"azimuth {self.phi} outside [0, 2pi]")
        if not (-_ANGLE_TOL <= self.theta <= math.pi + _ANGLE_TOL):
            raise ValueError(f"elevation {self.theta} outside [0, pi]")


def _pol_index(pol: str) -> int:
    try:
        return POLARIZATIONS.index(pol.upper())
    except (AttributeError, ValueError):
        raise ValueError(f"polarization must be 'V' or 'H', got {pol!r}") from None


class PatternSet:
    """Base class: subclasses implement :meth:`values`."""

    n_states: int
    seed: int | None = None

    def values(self, theta, phi, pol: str) -> np.ndarray:
        """Responses of all states at the given directions.

        Parameters
        ----------
        theta, phi : array_like
            Elevation and azimuth in radians, broadcast against each other.
        pol : {'V', 'H'}

        Returns
        -------
        ndarray of complex, shape ``(n_states,) + broadcast shape``
        """
        raise NotImplementedError

    def eval(self, state: int, direction: Direction, pol: str) -> complex:
        self._check_state(state)
        return complex(self.values(direction.theta, direction.phi, pol)[state])

    def eval_v(self, state: int, direction: Direction) -> complex:
        return self.eval(state, direction, "V")

    def eval_h(self, state: int, direction: Direction) -> complex:
        return self.eval(state, direction, "H")

    def _check_state(self, state):
        s = np.asarray(state)
        if np.any(s < 0) or np.any(s >= self.n_states):
            raise ValueError(f"state index out of range [0, {self.n_states})")


def _sh_basis(order: int, theta, phi) -> np.ndarray:
    """Orthonormal complex spherical harmonics up to degree ``order``.

    Returns shape ``((order + 1)**2,) + broadcast(theta, phi).shape``.
    """
    theta, phi = np.broadcast_arrays(np.asarray(theta, float), np.asarray(phi, float))
    rows = []
    for degree in range(order + 1):
        for m in range(-degree, degree + 1):
            rows.append(sph_harm_y(degree, m, theta, phi))
    return np.stack(rows)


class SyntheticPatternSet(PatternSet):
    """Smooth random patterns built from spherical harmonics.

    Coefficients are complex Gaussian per (state, polarization) and scaled so
    that the sphere average of ``(|nu_V|^2 + |nu_H|^2) / 2`` is exactly one;
    with an orthonormal basis that average equals
    ``(||c_V||^2 + ||c_H||^2) / (8 pi)``.
    """

    def __init__(self, seed: int, n_states: int, order: int):
        if n_states < 1:
            raise ValueError("n_states must be positive")
        if order < 1:
            raise ValueError("order must be positive")
        self.seed = int(seed)
        self.n_states = int(n_states)
        self.order = int(order)
        rng = np.random.default_rng(self.seed)
        n_basis = (self.order + 1) ** 2
        c = rng.standard_normal((n_states, 2, n_basis)) + 1j * rng.standard_normal(
            (n_states, 2, n_basis)
        )
        energy = np.sum(np.abs(c) ** 2, axis=(1, 2))
        c *= np.sqrt(8 * np.pi / energy)[:, None, None]
        c.setflags(write=False)
        self.coeffs = c

    def values(self, theta, phi, pol):
        p = _pol_index(pol)
        basis = _sh_basis(self.order, theta, phi)
        return np.tensordot(self.coeffs[:, p, :], basis, axes=(1, 0))


class IsotropicPatternSet(PatternSet):
    """One state radiating equally over the upper hemisphere.

    The amplitude sqrt(2) gives unit average power over the full sphere since
    only half of it is illuminated.
    """

    n_states = 1
    amplitude = math.sqrt(2.0)

    def values(self, theta, phi, pol):
        _pol_index(pol)
        theta, phi = np.broadcast_arrays(np.asarray(theta, float), np.asarray(phi, float))
        out = np.where(theta <= np.pi / 2 + _ANGLE_TOL, self.amplitude, 0.0).astype(complex)
        return out[None, ...]


class TabulatedPatternSet(PatternSet):
    """Patterns sampled on a regular (theta, phi) grid, interpolated bilinearly.

    ``table`` has shape ``(n_states, 2, n_theta, n_phi)``; theta spans
    ``[0, pi]`` and phi spans ``[0, 2 pi]`` endpoint-inclusive.
    """

    def __init__(self, table: np.ndarray):
        table = np.asarray(table, complex)
        if table.ndim != 4 or table.shape[1] != 2:
            raise ValueError("table must have shape (n_states, 2, n_theta, n_phi)")
        if table.shape[2] < 2 or table.shape[3] < 2:
            raise ValueError("need at least two samples along each angle")
        self.table = table
        self.n_states = table.shape[0]
        self._theta = np.linspace(0.0, np.pi, table.shape[2])
        self._phi = np.linspace(0.0, 2 * np.pi, table.shape[3])
        # axes moved so the interpolator returns (..., n_states)
        self._interp = [
            RegularGridInterpolator(
                (self._theta, self._phi), np.moveaxis(table[:, p], 0, -1), method="linear"
            )
            for p in range(2)
        ]

    def values(self, theta, phi, pol):
        p = _pol_index(pol)
        theta, phi = np.broadcast_arrays(np.asarray(theta, float), np.asarray(phi, float))
        pts = np.stack(
            [np.clip(theta, 0.0, np.pi), np.clip(phi, 0.0, 2 * np.pi)], axis=-1
        )
        out = self._interp[p](pts.reshape(-1, 2))
        return np.moveaxis(out, -1, 0).reshape((self.n_states,) + theta.shape)


def synth_pattern_set(seed: int, n_states: int, order: int) -> SyntheticPatternSet:
    return SyntheticPatternSet(seed, n_states, order)


def isotropic_pattern() -> IsotropicPatternSet:
    return IsotropicPatternSet()


def mixed_pattern(patterns: PatternSet, weights, direction: Direction, pol: str) -> complex:
    """Weighted combination ``sum_i w_i nu(direction; i)`` of state responses."""
    w = np.asarray(weights, float)
    if w.shape != (patterns.n_states,):
        raise ValueError(f"expected {patterns.n_states} weights, got shape {w.shape}")
    if np.any(w < 0):
        raise ValueError("weights must be nonnegative")
    vals = patterns.values(direction.theta, direction.phi, pol)
    return complex(w @ vals)


def fibonacci_sphere(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Quasi-uniform ``(theta, phi)`` samples of the unit sphere."""
    k = np.arange(n) + 0.5
    theta = np.arccos(1.0 - 2.0 * k / n)
    phi = np.mod(np.pi * (1.0 + math.sqrt(5.0)) * k, 2 * np.pi)
    return theta, phi


def average_power(patterns: PatternSet, n_points: int = 10_000) -> np.ndarray:
    """Per-state sphere average of ``(|nu_V|^2 + |nu_H|^2) / 2``."""
    theta, phi = fibonacci_sphere(n_points)
    pv = np.abs(patterns.values(theta, phi, "V")) ** 2
    ph = np.abs(patterns.values(theta, phi, "H")) ** 2
    return 0.5 * (pv.mean(axis=1) + ph.mean(axis=1))


# Plain-text table format, one sample per row:
#   state pol theta_index phi_index re im
# pol is V or H, indices are zero-based.  theta_index spans [0, pi] and
# phi_index spans [0, 2 pi], both endpoint-inclusive and uniform.


def load_pattern_table(path) -> TabulatedPatternSet:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 6:
                raise ValueError(f"{path}:{lineno}: expected 6 columns, got {len(parts)}")
            state, pol, ti, pi_ = int(parts[0]), _pol_index(parts[1]), int(parts[2]), int(parts[3])
            rows.append((state, pol, ti, pi_, float(parts[4]), float(parts[5])))
    if not rows:
        raise ValueError(f"{path}: no samples")
    arr = np.array([r[:4] for r in rows], dtype=int)
    n_states, _, n_theta, n_phi = arr.max(axis=0) + 1
    table = np.full((n_states, 2, n_theta, n_phi), np.nan + 0j)
    for (s, p, ti, pj, re, im) in rows:
        table[s, p, ti, pj] = re + 1j * im
    if np.isnan(table.real).any():
        raise ValueError(f"{path}: table has missing samples")
    return TabulatedPatternSet(table)


def save_pattern_table(patterns: PatternSet, path, n_theta: int = 37, n_phi: int = 73):
    """Sample ``patterns`` on a regular grid and write the text table."""
    theta = np.linspace(0.0, np.pi, n_theta)
    phi = np.linspace(0.0, 2 * np.pi, n_phi)
    tt, pp = np.meshgrid(theta, phi, indexing="ij")
    lines = ["# state pol theta_index phi_index re im"]
    for p, pol in enumerate(POLARIZATIONS):
        vals = patterns.values(tt, pp, pol)
        for s in range(patterns.n_states):
            for i in range(n_theta):
                for j in range(n_phi):
                    v = vals[s, i, j]
                    lines.append(f"{s} {pol} {i} {j} {v.real:.17g} {v.imag:.17g}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

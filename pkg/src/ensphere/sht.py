"""Real spherical harmonic transform on equiangular grids.

Harmonics are 4pi-normalised and real, without the Condon-Shortley phase::

    Y_lm = Pbar_lm(sin lat) cos(m lon)     m >= 0
    Y_lm = Pbar_l|m|(sin lat) sin(|m| lon)  m < 0

so that the sphere-average of Y_lm**2 is 1 and the area-weighted mean square
of a field equals the sum of its squared coefficients.

Coefficients are held as a pair ``(C, S)`` of arrays with trailing shape
``(l_max + 1, l_max + 1)`` indexed ``[l, m]``; entries with ``m > l`` and
``S[:, 0]`` are zero.

Analysis uses interpolatory latitude weights (Clenshaw-Curtis on pole-inclusive
grids, Fejer otherwise), which integrate polynomials in sin(lat) of degree
``n_lat - 1`` exactly. Synthesis followed by analysis is therefore exact for
``l_max <= (n_lat - 1) // 2``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from numpy.polynomial import legendre as npleg

from .grid import LatLonGrid

_TABLE_CACHE_LIMIT = 20_000_000
_DENSE_LIMIT = 4_000_000  # (l_max + 1)**2 * n_lat entries for the zero-padded order-major table


def exact_lmax(grid: LatLonGrid) -> int:
    """Largest degree for which synthesis/analysis round-trips exactly."""
    return min((grid.n_lat - 1) // 2, grid.n_lon // 2 - 1)


def resolvable_lmax(grid: LatLonGrid) -> int:
    return min(grid.n_lat - 1, grid.n_lon // 2 - 1)


def legendre_order_blocks(l_max: int, x: np.ndarray):
    """Yield ``(m, P)`` with ``P[l - m, j] = Pbar_lm(x_j)`` for ``l = m..l_max``."""
    x = np.asarray(x, dtype=float)
    s = np.sqrt(np.clip(1.0 - x * x, 0.0, None))
    pmm = np.ones_like(x)
    for m in range(l_max + 1):
        if m == 1:
            pmm = np.sqrt(3.0) * s
        elif m > 1:
            pmm = np.sqrt((2.0 * m + 1.0) / (2.0 * m)) * s * pmm
        block = np.empty((l_max - m + 1,) + x.shape)
        block[0] = pmm
        if m < l_max:
            block[1] = np.sqrt(2.0 * m + 3.0) * x * pmm
        for l in range(m + 2, l_max + 1):
            a = np.sqrt((2.0 * l - 1.0) * (2.0 * l + 1.0) / ((l - m) * (l + m)))
            b = np.sqrt(
                (2.0 * l + 1.0) * (l + m - 1.0) * (l - m - 1.0)
                / ((l - m) * (l + m) * (2.0 * l - 3.0))
            )
            block[l - m] = a * x * block[l - m - 1] - b * block[l - m - 2]
        yield m, block


def quadrature_weights(x: np.ndarray) -> np.ndarray:
    """Interpolatory weights with sum_j w_j p(x_j) = int_{-1}^{1} p(x) dx for deg p < len(x)."""
    n = len(x)
    vander = npleg.legvander(x, n - 1)
    rhs = np.zeros(n)
    rhs[0] = 2.0
    return np.linalg.solve(vander.T, rhs)


@dataclass(frozen=True, eq=False)
class SphericalHarmonicTransform:
    grid: LatLonGrid
    l_max: int

    def __post_init__(self):
        if not 0 <= self.l_max <= resolvable_lmax(self.grid):
            raise ValueError(
                f"l_max={self.l_max} exceeds the resolvable limit {resolvable_lmax(self.grid)} "
                f"of a {self.grid.n_lat}x{self.grid.n_lon} grid"
            )

    @property
    def coeff_shape(self) -> tuple[int, int]:
        return (self.l_max + 1, self.l_max + 1)

    @cached_property
    def _x(self) -> np.ndarray:
        return np.sin(np.deg2rad(self.grid.lat))

    @cached_property
    def lat_weights(self) -> np.ndarray:
        return quadrature_weights(self._x)

    def _blocks(self):
        n_entries = (self.l_max + 1) * (self.l_max + 2) // 2 * self.grid.n_lat
        if n_entries <= _TABLE_CACHE_LIMIT:
            return self._table
        return legendre_order_blocks(self.l_max, self._x)

    @cached_property
    def _table(self) -> list:
        return list(legendre_order_blocks(self.l_max, self._x))

    @cached_property
    def _dense(self):
        """``P[m, l, j]`` with zeros for ``l < m``, or None when too large to hold."""
        L = self.l_max
        if (L + 1) ** 2 * self.grid.n_lat > _DENSE_LIMIT:
            return None
        out = np.zeros((L + 1, L + 1, self.grid.n_lat))
        for m, P in self._blocks():
            out[m, m:] = P
        return out

    def synthesize(self, C, S) -> np.ndarray:
        """Grid values ``(..., n_lat, n_lon)`` from coefficients."""
        C = np.asarray(C, dtype=float)
        S = np.asarray(S, dtype=float)
        batch = C.shape[:-2]
        n_lon = self.grid.n_lon
        spec = np.zeros(batch + (self.grid.n_lat, n_lon // 2 + 1), dtype=complex)
        D = self._dense
        if D is not None:
            # batched over m: (..., m, 1, l) @ (m, l, j) -> (..., m, j)
            a = (np.swapaxes(C, -1, -2)[..., None, :] @ D)[..., 0, :]
            b = (np.swapaxes(S, -1, -2)[..., None, :] @ D)[..., 0, :]
            scale = np.full(self.l_max + 1, 0.5 * n_lon)
            scale[0] = n_lon
            spec[..., : self.l_max + 1] = np.swapaxes((a - 1j * b) * scale[:, None], -1, -2)
            return np.fft.irfft(spec, n=n_lon, axis=-1)
        for m, P in self._blocks():
            a = C[..., m:, m] @ P
            if m == 0:
                spec[..., 0] = n_lon * a
            else:
                spec[..., m] = 0.5 * n_lon * (a - 1j * (S[..., m:, m] @ P))
        return np.fft.irfft(spec, n=n_lon, axis=-1)

    def analyze(self, field) -> tuple[np.ndarray, np.ndarray]:
        """Coefficients ``(C, S)`` of a grid field ``(..., n_lat, n_lon)``."""
        field = np.asarray(field, dtype=float)
        if field.shape[-2:] != self.grid.shape:
            raise ValueError(f"field shape {field.shape[-2:]} does not cover grid {self.grid.shape}")
        batch = field.shape[:-2]
        X = np.fft.rfft(field, axis=-1) * (2.0 * np.pi / self.grid.n_lon)
        w = self.lat_weights / (4.0 * np.pi)
        D = self._dense
        if D is not None:
            Dw = np.swapaxes(D * w, -1, -2)  # (m, j, l)
            Xm = np.swapaxes(X[..., : self.l_max + 1], -1, -2)[..., None, :]  # (..., m, 1, j)
            C = np.swapaxes((Xm.real @ Dw)[..., 0, :], -1, -2)
            S = np.swapaxes((-Xm.imag @ Dw)[..., 0, :], -1, -2)
            S[..., 0] = 0.0
            return C, S
        C = np.zeros(batch + self.coeff_shape)
        S = np.zeros(batch + self.coeff_shape)
        for m, P in self._blocks():
            Pw = (P * w).T
            C[..., m:, m] = X[..., m].real @ Pw
            if m > 0:
                S[..., m:, m] = -X[..., m].imag @ Pw
        return C, S

    def synthesize_at(self, C, S, lat, lon) -> np.ndarray:
        """Evaluate the expansion at arbitrary points; result ``(..., n_points)``."""
        C = np.asarray(C, dtype=float)
        S = np.asarray(S, dtype=float)
        lat = np.atleast_1d(np.asarray(lat, dtype=float))
        lon = np.deg2rad(np.atleast_1d(np.asarray(lon, dtype=float)))
        out = np.zeros(C.shape[:-2] + lat.shape)
        for m, P in legendre_order_blocks(self.l_max, np.sin(np.deg2rad(lat))):
            a = np.einsum("...l,lp->...p", C[..., m:, m], P)
            out += a * np.cos(m * lon)
            if m > 0:
                b = np.einsum("...l,lp->...p", S[..., m:, m], P)
                out += b * np.sin(m * lon)
        return out


def degree_mask(l_max: int) -> tuple[np.ndarray, np.ndarray]:
    """Boolean masks of the valid (l, m) slots in C and S."""
    l = np.arange(l_max + 1)[:, None]
    m = np.arange(l_max + 1)[None, :]
    valid = m <= l
    return valid, valid & (m > 0)


def degree_power(C, S) -> np.ndarray:
    """Per-degree sum of squared coefficients, shape ``(..., l_max + 1)``."""
    C = np.asarray(C)
    S = np.asarray(S)
    return np.sum(C * C + S * S, axis=-1)

"""Interstitial Fourier integrals via full-cell FFT minus a Chebyshev patch term.

Restricting a potential to the interstitial region multiplies it by a
discontinuous mask, which ruins the convergence of a direct FFT.  Instead,
the potential is first replaced inside each patch by a smooth periodic
extension; the full-cell integral of the extension is then spectrally
accurate on a modest FFT grid, and the patch contribution is removed with a
tensor Chebyshev expansion whose 1D oscillatory moments are shared by all
wave vectors:

    table(dk) = (1/|O|) int_cell  Vs e^{i dk.r}
              - (1/|O|) int_patch Vs e^{i dk.r}
              = fft_term(dk) - phase * (Q^T C Q)(dk)        (2D)

Tables are stored densely over the integer difference cube |dn_s| <= m,
which is all that is needed since entries depend only on dk = k_q - k_p.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np
from scipy.fft import dctn

from .geometry import AtomicPatch, DomainDecomposition, UnitCell
from .potentials import (
    PotentialField,
    coeffs_from_samples,
    grid_points,
    smooth_extend_all,
)


class AliasingError(ValueError):
    """FFT grid too small for the requested difference cube."""


@dataclass
class FourierTable:
    """Dense complex table over the integer cube ``[-m..m]^d``."""

    cell: UnitCell
    m: int
    values: np.ndarray

    def get(self, dn) -> complex:
        dn = np.asarray(dn, int)
        if np.any(np.abs(dn) > self.m):
            raise KeyError(f"difference index {dn} outside table range {self.m}")
        return complex(self.values[tuple(dn + self.m)])

    def gather(self, dns: np.ndarray) -> np.ndarray:
        """Vectorized lookup for an (..., d) integer index array."""
        idx = dns + self.m
        return self.values[tuple(np.moveaxis(idx, -1, 0))]

    def conj_symmetry_residual(self) -> float:
        flipped = self.values[tuple(slice(None, None, -1) for _ in range(self.values.ndim))]
        return float(np.abs(self.values - flipped.conj()).max())

    def __sub__(self, other: "FourierTable") -> "FourierTable":
        if other.m != self.m:
            raise ValueError("table sizes differ")
        return FourierTable(self.cell, self.m, self.values - other.values)


def difference_cube(m: int, dim: int) -> np.ndarray:
    rng = np.arange(-m, m + 1)
    grids = np.meshgrid(*[rng] * dim, indexing="ij")
    return np.stack(grids, axis=-1)


def min_grid_for(m: int) -> int:
    return 2 * m + 2


def full_cell_fourier(field: PotentialField, cell: UnitCell, n_grid: int, dn_max: int) -> FourierTable:
    """Normalized full-cell integrals ``(1/|O|) int V e^{i dk.r} dr`` by FFT.

    Spectrally accurate for smooth periodic fields.  The grid must be large
    enough that every requested difference index is below Nyquist.
    """
    if n_grid < min_grid_for(dn_max):
        raise AliasingError(
            f"grid {n_grid} per axis cannot resolve difference indices up to "
            f"{dn_max}; need at least {min_grid_for(dn_max)}"
        )
    samples = field.sample_grid(n_grid)
    if not np.all(np.isfinite(samples)):
        raise ValueError("field has non-finite grid samples; smooth it first")
    coeffs = coeffs_from_samples(samples, cell)
    # J(dk) = conj coefficient index:  (1/|O|) int V e^{+i dk.r} = c(-dk)
    dns = difference_cube(dn_max, cell.dim)
    idx = (-dns) % n_grid
    values = coeffs[tuple(np.moveaxis(idx, -1, 0))]
    return FourierTable(cell, dn_max, values)


@dataclass
class ChebyshevExpansion:
    """Tensor Chebyshev-interpolant coefficients of a field on one patch."""

    patch: AtomicPatch
    degree: int          # number of coefficients per axis
    coeffs: np.ndarray

    def nodes_1d(self) -> np.ndarray:
        n = self.degree
        return np.cos(np.pi * np.arange(n) / (n - 1))

    def evaluate(self, points) -> np.ndarray:
        """Clenshaw-free evaluation via the recurrence, for verification."""
        pts = np.atleast_2d(np.asarray(points, float))
        d = self.patch.dim
        R = self.patch.half_width
        t = (pts - np.asarray(self.patch.center)) / R
        n = self.degree
        polys = []
        for a in range(d):
            T = np.empty((n, pts.shape[0]))
            T[0] = 1.0
            T[1] = t[:, a]
            for r in range(2, n):
                T[r] = 2.0 * t[:, a] * T[r - 1] - T[r - 2]
            polys.append(T)
        letters = "rst"[:d]
        spec = ",".join(f"{c}p" for c in letters)
        return np.einsum(f"{''.join(letters)},{spec}->p", self.coeffs, *polys)


def chebyshev_fit(field: PotentialField, patch: AtomicPatch, n: int) -> ChebyshevExpansion:
    """Interpolate the field at tensor Chebyshev-Lobatto nodes of the patch."""
    if n < 4:
        raise ValueError("need at least 4 Chebyshev coefficients per axis")
    d = patch.dim
    R = patch.half_width
    m = n - 1
    t = np.cos(np.pi * np.arange(n) / m)
    axes = [np.asarray(patch.center)[a] + R * t for a in range(d)]
    grids = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([g.reshape(-1) for g in grids], axis=-1)
    vals = np.asarray(field(pts), float).reshape((n,) * d)
    coeffs = dctn(vals, type=1) / (m**d)
    for a in range(d):
        sl = [slice(None)] * d
        sl[a] = 0
        coeffs[tuple(sl)] *= 0.5
        sl[a] = n - 1
        coeffs[tuple(sl)] *= 0.5
    return ChebyshevExpansion(patch=patch, degree=n, coeffs=coeffs)


@dataclass
class OscillatoryTable:
    """1D Chebyshev moments ``q_r(k) = int_{-R}^{R} T_r(x/R) e^{ikx} dx``.

    Rows are Chebyshev indices ``r < n``; columns follow the 1D integer
    frequencies ``dn in [-m..m]`` with ``k = dn * 2 pi / L``.
    """

    half_width: float
    m: int
    q: np.ndarray  # (n, 2m+1)

    def column(self, dn: int) -> np.ndarray:
        return self.q[:, dn + self.m]


def _chebyshev_moments_quadrature(n: int, kappas: np.ndarray, R: float) -> np.ndarray:
    kmax = np.abs(kappas).max() if kappas.size else 0.0
    m_gl = int(np.ceil((n + 1.4 * kmax) / 2)) + 16
    x, w = np.polynomial.legendre.leggauss(m_gl)
    T = np.empty((n, m_gl))
    T[0] = 1.0
    T[1] = x
    for r in range(2, n):
        T[r] = 2.0 * x * T[r - 1] - T[r - 2]
    E = np.exp(1j * np.outer(x, kappas)) * w[:, None]
    return R * (T @ E)


def _chebyshev_moments_recurrence(n: int, kappa: float, R: float) -> np.ndarray:
    """Three-term recurrence in the Chebyshev index, for large |kappa|.

    Seeded by the analytic I_0, I_1, I_2; the forward recurrence is stable
    while r stays below |kappa| and is monitored against the bound
    |I_r| <= 2; on violation the caller falls back to quadrature.
    """
    out = np.empty(n, dtype=complex)
    k = kappa
    snc = np.sin(k) / k
    out[0] = 2.0 * snc
    if n > 1:
        out[1] = 2j * (snc - np.cos(k)) / k
    if n > 2:
        out[2] = 2.0 * snc - (8.0 / k**2) * (snc - np.cos(k))
    eik = np.exp(1j * k)
    emik = np.exp(-1j * k)
    for r in range(2, n - 1):
        bnd = (2.0 / (r * r - 1.0)) * (eik + (-1) ** r * emik)
        out[r + 1] = (r + 1) * (out[r - 1] / (r - 1) + (1j / k) * (2.0 * out[r] + bnd))
        if abs(out[r + 1]) > 2.5:
            raise ArithmeticError("chebyshev moment recurrence lost stability")
    return R * out


def oscillatory_integrals(n: int, m: int, half_width: float, cell: UnitCell,
                          recurrence_threshold: float = 20.0) -> OscillatoryTable:
    """Moment table for all 1D frequencies ``|dn| <= m`` of the dual lattice."""
    kvals = np.arange(-m, m + 1) * cell.dual_spacing
    kappas = kvals * half_width
    small = np.abs(kappas) <= recurrence_threshold
    q = np.empty((n, kvals.size), dtype=complex)
    if np.any(small):
        q[:, small] = _chebyshev_moments_quadrature(n, kappas[small], half_width)
    for j in np.where(~small)[0]:
        try:
            q[:, j] = _chebyshev_moments_recurrence(n, float(kappas[j]), half_width)
        except ArithmeticError:
            q[:, j] = _chebyshev_moments_quadrature(
                n, np.array([kappas[j]]), half_width
            )[:, 0]
    return OscillatoryTable(half_width=half_width, m=m, q=q)


def inner_patch_fourier(expansion: ChebyshevExpansion, osc: OscillatoryTable,
                        cell: UnitCell, dn_max: int) -> FourierTable:
    """Normalized patch integrals ``(1/|O|) int_patch V e^{i dk.r} dr``.

    Contracts the coefficient tensor with one moment matrix per axis; a
    patch centered off the origin contributes a plane-wave phase.
    """
    if osc.m < dn_max:
        raise ValueError(
            f"oscillatory table covers |dn| <= {osc.m}, need {dn_max}"
        )
    d = expansion.patch.dim
    lo = osc.m - dn_max
    hi = osc.m + dn_max + 1
    Q = osc.q[:, lo:hi]
    C = expansion.coeffs
    if d == 2:
        vals = Q.T @ C @ Q
    else:
        vals = np.einsum("rst,ri,sj,tk->ijk", C, Q, Q, Q, optimize=True)
    kvals = np.arange(-dn_max, dn_max + 1) * cell.dual_spacing
    center = np.asarray(expansion.patch.center)
    for a in range(d):
        shape = [1] * d
        shape[a] = kvals.size
        vals = vals * np.exp(1j * kvals * center[a]).reshape(shape)
    return FourierTable(cell, dn_max, vals / cell.volume)


def v_out_table(V: PotentialField, decomp: DomainDecomposition, cutoff: int,
                n_grid: int, n_cheb: int, ext_params=None,
                smoothed: PotentialField | None = None) -> FourierTable:
    """Interstitial integrals ``(1/|O|) int_out V e^{i dk.r}`` for all
    differences ``dk = k_q - k_p`` of the cutoff-``K`` wave-vector set.

    ``smoothed`` may be passed to reuse a previously built extension (the
    SCF driver does this when only part of the potential changed).
    """
    dn_max = 2 * cutoff
    if smoothed is not None:
        Vs = smoothed
    elif V.singularities:
        Vs = smooth_extend_all(V, decomp, ext_params)
    else:
        # nothing to remove; blending would only inject bump frequencies
        Vs = V
    table = full_cell_fourier(Vs, decomp.cell, n_grid, dn_max)
    for patch in decomp.patches:
        exp = chebyshev_fit(Vs, patch, n_cheb)
        osc = oscillatory_integrals(n_cheb, dn_max, patch.half_width, decomp.cell)
        table = table - inner_patch_fourier(exp, osc, decomp.cell, dn_max)
    return table


def masked_fft_table(V: PotentialField, decomp: DomainDecomposition,
                     n_grid: int, dn_max: int) -> FourierTable:
    """Baseline: zero the grid inside the patches and FFT directly.

    First-order accurate in the grid spacing because of the jump at the
    interface; kept as a comparison baseline at reduced grids.
    """
    if n_grid < min_grid_for(dn_max):
        raise AliasingError(
            f"grid {n_grid} per axis cannot resolve difference indices up to "
            f"{dn_max}; need at least {min_grid_for(dn_max)}"
        )
    cell = decomp.cell
    samples = V.sample_grid(n_grid).copy().reshape(-1)
    pts = grid_points(cell, n_grid)
    samples[decomp.inside_any_patch(pts)] = 0.0
    if not np.all(np.isfinite(samples)):
        raise ValueError("singular sample outside every patch")
    coeffs = coeffs_from_samples(samples.reshape((n_grid,) * cell.dim), cell)
    dns = difference_cube(dn_max, cell.dim)
    idx = (-dns) % n_grid
    values = coeffs[tuple(np.moveaxis(idx, -1, 0))]
    return FourierTable(cell, dn_max, values)


# ---------------------------------------------------------------------------
# binary table cache
# ---------------------------------------------------------------------------

_MAGIC = b"SWVOUTT1"


def table_cache_key(potential_id: str, cutoff: int, n_grid: int, n_cheb: int,
                    ext_params=None) -> str:
    ext = ""
    if ext_params is not None:
        ext = f"b={ext_params.b:.17g},a_c={ext_params.a_c:.17g},g0={ext_params.g0}"
    return f"{potential_id}|K={cutoff}|Ng={n_grid}|n={n_cheb}|{ext}"


def save_table(path, table: FourierTable, key: str) -> None:
    """Header (magic, version, key hash) + little-endian complex doubles.

    Values are written in C order of the dense difference cube, which is the
    deterministic difference-index order.
    """
    digest = hashlib.sha256(key.encode()).digest()
    flat = np.ascontiguousarray(table.values, dtype="<c16")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", 1))
        fh.write(digest)
        fh.write(struct.pack("<II", table.m, table.values.ndim))
        fh.write(struct.pack("<d", table.cell.length))
        fh.write(flat.tobytes())


def load_table(path, key: str, cell: UnitCell) -> FourierTable | None:
    """Load a cached table; returns None on any mismatch."""
    try:
        with open(path, "rb") as fh:
            if fh.read(8) != _MAGIC:
                return None
            (version,) = struct.unpack("<I", fh.read(4))
            if version != 1:
                return None
            if fh.read(32) != hashlib.sha256(key.encode()).digest():
                return None
            m, ndim = struct.unpack("<II", fh.read(8))
            (length,) = struct.unpack("<d", fh.read(8))
            if ndim != cell.dim or abs(length - cell.length) > 1e-15:
                return None
            shape = (2 * m + 1,) * ndim
            data = np.frombuffer(fh.read(), dtype="<c16").reshape(shape)
            return FourierTable(cell, m, data.astype(complex))
    except (OSError, ValueError):
        return None

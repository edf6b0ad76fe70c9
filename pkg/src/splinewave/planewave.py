"""Truncated plane-wave basis on the dual lattice of the periodic cell.

Basis functions are ``e_k(r) = |Omega|^{-1/2} exp(i k.r)`` for wave vectors
``k = (2 pi / L) n`` with integer ``n`` inside the ball ``|n| <= K``.  The
ordering is deterministic: by ``|n|^2`` first, then lexicographically, so
that assembled matrices and DOF partitions are reproducible bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import DomainDecomposition, UnitCell


def sinc(t):
    """sin(t)/t with a series branch near zero; sinc(0) = 1."""
    t = np.asarray(t, float)
    small = np.abs(t) < 1e-4
    safe = np.where(small, 1.0, t)
    out = np.where(small, 1.0 - t * t / 6.0 * (1.0 - t * t / 20.0), np.sin(safe) / safe)
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class WaveVectorSet:
    """Wave vectors of the truncated plane-wave space."""

    cutoff: int
    cell: UnitCell
    ints: np.ndarray     # (N, d) integer lattice coordinates
    vectors: np.ndarray  # (N, d), ints * 2*pi/L

    @property
    def size(self) -> int:
        return self.ints.shape[0]

    def index_of(self, n) -> int:
        n = np.asarray(n, int)
        hit = np.where(np.all(self.ints == n, axis=1))[0]
        if hit.size == 0:
            raise KeyError(f"wave vector {n} not in the set")
        return int(hit[0])


def build_wavevectors(cutoff: int, cell: UnitCell) -> WaveVectorSet:
    """All dual-lattice vectors with ``|k| <= 2 pi K / L``."""
    if cutoff < 1:
        raise ValueError("cutoff must be >= 1")
    K = int(cutoff)
    rng = np.arange(-K, K + 1)
    grids = np.meshgrid(*[rng] * cell.dim, indexing="ij")
    ints = np.stack([g.reshape(-1) for g in grids], axis=-1)
    norms = np.sum(ints * ints, axis=1)
    ints = ints[norms <= K * K]
    norms = np.sum(ints * ints, axis=1)
    order = np.lexsort(tuple(ints[:, a] for a in reversed(range(cell.dim))) + (norms,))
    ints = ints[order]
    return WaveVectorSet(
        cutoff=K, cell=cell, ints=ints, vectors=ints * cell.dual_spacing
    )


def eval_pw(k, r, cell: UnitCell):
    """Value of the normalized plane wave with wave vector k at points r."""
    k = np.asarray(k, float)
    r = np.asarray(r, float)
    phase = r @ k if r.ndim > 1 else float(np.dot(r, k))
    return np.exp(1j * phase) / np.sqrt(cell.volume)


def patch_fourier(dk, decomp: DomainDecomposition):
    """Normalized patch integral ``(1/|Omega|) int_{patches} e^{i dk.r} dr``.

    For one centered patch this is the product of ``2R sinc(dk_s R)`` factors
    over the volume; off-center patches contribute a phase factor.  Accepts a
    single vector or an array of shape (..., d).
    """
    dk = np.asarray(dk, float)
    single = dk.ndim == 1
    dks = np.atleast_2d(dk)
    out = np.zeros(dks.shape[:-1], dtype=complex).reshape(-1)
    flat = dks.reshape(-1, dks.shape[-1])
    for p in decomp.patches:
        R = p.half_width
        prod = np.ones(flat.shape[0])
        for s in range(flat.shape[1]):
            prod = prod * (2.0 * R * sinc(flat[:, s] * R))
        out = out + np.exp(1j * (flat @ np.asarray(p.center))) * prod
    out = out / decomp.cell.volume
    out = out.reshape(dks.shape[:-1])
    return complex(out) if single else out


def geometric_factor_U(dk, decomp: DomainDecomposition):
    """Interstitial overlap factor ``(1/|Omega|) int_{Omega_out} e^{i dk.r} dr``.

    Equals ``delta_{dk,0} - patch_fourier(dk)``; the Gram matrix of the
    restricted plane waves is ``U(k_q - k_p)``.
    """
    dk = np.asarray(dk, float)
    single = dk.ndim == 1
    dks = np.atleast_2d(dk)
    tol = 1e-12 * decomp.cell.dual_spacing
    delta = np.all(np.abs(dks) < tol, axis=-1).astype(float)
    out = delta - np.atleast_1d(patch_fourier(dks, decomp))
    return complex(out[0]) if single else out


def patch_fourier_table(decomp: DomainDecomposition, m: int) -> np.ndarray:
    """Dense table of ``patch_fourier`` over the integer cube [-m..m]^d."""
    d = decomp.cell.dim
    rng = np.arange(-m, m + 1) * decomp.cell.dual_spacing
    out = np.zeros((2 * m + 1,) * d, dtype=complex)
    for p in decomp.patches:
        R = p.half_width
        axis_factors = [2.0 * R * sinc(rng * R) for _ in range(d)]
        phases = [np.exp(1j * rng * p.center[a]) for a in range(d)]
        terms = [axis_factors[a] * phases[a] for a in range(d)]
        prod = terms[0]
        for a in range(1, d):
            prod = np.multiply.outer(prod, terms[a])
        out += prod
    return out / decomp.cell.volume

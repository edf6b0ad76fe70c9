"""Built-in model problems driving the experiment runner.

Each factory fixes the cell, the atomic patches, the periodized potential,
and the nonlinearity kind; discretization parameters stay free.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import AtomicPatch, DomainDecomposition, UnitCell, build_decomposition
from .potentials import (
    EwaldParams,
    PotentialField,
    converged_cutoff,
    ewald_potential,
    zero_potential,
)


@dataclass(frozen=True)
class Problem:
    name: str
    decomp: DomainDecomposition
    potential: PotentialField
    kind: str            # "linear" | "gp" | "hartree"
    occupation: float

    @property
    def cell(self) -> UnitCell:
        return self.decomp.cell

    @property
    def singular_points(self):
        return self.potential.singularities


def free_particle(dim=2, length=4.0, r_in=0.2) -> Problem:
    cell = UnitCell(length, dim)
    decomp = build_decomposition(cell, [AtomicPatch((0.0,) * dim, r_in)])
    return Problem("free_particle", decomp, zero_potential(cell), "linear", 1.0)


def single_atom_2d(alpha=5.0, g_cut=2.0, length=4.0, r_in=0.2) -> Problem:
    """One unit charge at the origin of a 2D cell (the linear benchmark)."""
    cell = UnitCell(length, 2)
    decomp = build_decomposition(cell, [AtomicPatch((0.0, 0.0), r_in)])
    params = EwaldParams(cell, alpha, g_cut, (1.0,), ((0.0, 0.0),))
    return Problem("example1", decomp, ewald_potential(params), "linear", 1.0)


def two_atoms_2d(alpha=5.0, g_cut=2.0, length=4.0, r_in=0.2) -> Problem:
    """Two unit charges at (-1, 0) and (1, 0) with their own patches."""
    cell = UnitCell(length, 2)
    decomp = build_decomposition(
        cell, [AtomicPatch((-1.0, 0.0), r_in), AtomicPatch((1.0, 0.0), r_in)]
    )
    params = EwaldParams(
        cell, alpha, g_cut, (1.0, 1.0), ((-1.0, 0.0), (1.0, 0.0))
    )
    return Problem("example2", decomp, ewald_potential(params), "linear", 1.0)


def gross_pitaevskii_2d(alpha=5.0, g_cut=2.0, length=4.0, r_in=0.2) -> Problem:
    """Single-atom external potential plus the |u|^2 self-interaction."""
    base = single_atom_2d(alpha=alpha, g_cut=g_cut, length=length, r_in=r_in)
    return Problem("example3", base.decomp, base.potential, "gp", 1.0)


def helium_3d(alpha=5.0, g_cut=None, length=4.0, r_in=0.2) -> Problem:
    """Periodic helium: charge-2 attraction plus the Hartree field, occ = 2."""
    cell = UnitCell(length, 3)
    decomp = build_decomposition(cell, [AtomicPatch((0.0, 0.0, 0.0), r_in)])
    if g_cut is None:
        g_cut = converged_cutoff(alpha, 3, 1e-14)
    params = EwaldParams(cell, alpha, g_cut, (2.0,), ((0.0, 0.0, 0.0),))
    return Problem("example4", decomp, ewald_potential(params), "hartree", 2.0)


def custom(dim, length, centers, half_widths, charges, alpha, g_cut, kind="linear",
           occupation=1.0) -> Problem:
    cell = UnitCell(length, dim)
    patches = [AtomicPatch(tuple(c), w) for c, w in zip(centers, half_widths)]
    decomp = build_decomposition(cell, patches)
    if any(z != 0 for z in charges):
        params = EwaldParams(cell, alpha, g_cut, tuple(charges),
                             tuple(tuple(c) for c in centers))
        V = ewald_potential(params)
    else:
        V = zero_potential(cell)
    return Problem("custom", decomp, V, kind, occupation)


FACTORIES = {
    "free_particle": free_particle,
    "example1": single_atom_2d,
    "example2": two_atoms_2d,
    "example3": gross_pitaevskii_2d,
    "example4": helium_3d,
}

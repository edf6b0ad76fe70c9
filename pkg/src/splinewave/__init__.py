"""Hybrid spline / plane-wave interior-penalty DG solver for periodic cells."""

from .geometry import (
    AtomicPatch,
    DomainDecomposition,
    InterfaceFace,
    QuadratureRule,
    UnitCell,
    build_decomposition,
    face_quadrature,
    gauss_rule,
)
from .bspline import (
    GeometryMap,
    KnotVector,
    SplineSpace,
    eval_basis,
    eval_basis_deriv,
    open_uniform_knots,
    tensor_eval,
    uniform_space,
)
from .planewave import (
    WaveVectorSet,
    build_wavevectors,
    eval_pw,
    geometric_factor_U,
    sinc,
)
from .potentials import (
    EwaldParams,
    PotentialField,
    SmoothExtensionParams,
    converged_cutoff,
    density,
    ewald_2d,
    ewald_3d,
    ewald_potential,
    hartree_solve,
    smooth_extend,
    smooth_step,
    splitting_offset,
    zero_potential,
)
from .fftcheb import (
    ChebyshevExpansion,
    FourierTable,
    OscillatoryTable,
    chebyshev_fit,
    full_cell_fourier,
    inner_patch_fourier,
    masked_fft_table,
    oscillatory_integrals,
    v_out_table,
)
from .assembly import (
    AssembledSystem,
    DofMap,
    assemble,
    assemble_coupling,
    assemble_pw_block,
    assemble_spline_block,
    penalty_sigma,
)
from .states import DGState, align_phase, align_to_cluster, error_norms, m_inner
from .eigensolve import (
    DofPartition,
    EigenSolution,
    JacobiPreconditioner,
    TraceBlockPreconditioner,
    condition_estimate,
    partition_dofs,
    solve_lowest,
)
from .scf import GroundState, SCFConfig, gp_scf, hartree_scf, total_energy
from . import problems

__version__ = "0.1.0"

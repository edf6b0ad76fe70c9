import numpy as np
import pytest
import scipy.sparse as sp

from splinewave.assembly import (
    assemble,
    assemble_coupling,
    assemble_pw_block,
    assemble_spline_block,
    interface_tables,
    penalty_sigma,
)
from splinewave.bspline import GeometryMap, uniform_space
from splinewave.fftcheb import v_out_table
from splinewave.geometry import (
    AtomicPatch,
    UnitCell,
    build_decomposition,
    face_quadrature,
)
from splinewave.planewave import build_wavevectors, geometric_factor_U
from splinewave.potentials import EwaldParams, ewald_potential

from oracles import interstitial_integral

CELL = UnitCell(4.0, 2)
DEC = build_decomposition(CELL, [AtomicPatch((0.0, 0.0), 0.2)])


def test_penalty_sigma_values():
    assert penalty_sigma(10.0, 30, 0.1) == pytest.approx(400.0)
    assert penalty_sigma(10.0, 0, 0.4 / 2**5) == pytest.approx(800.0)
    a = penalty_sigma(7.0, 10, 0.1)
    b = penalty_sigma(7.0, 20, 0.05)
    assert b > a


def test_pw_dg_diagonal():
    wvs = build_wavevectors(1, CELL)
    Ha, Ma = assemble_pw_block(wvs, DEC, None, sigma=400.0)
    # at dk = 0 the oscillation collapses: D^a_pp = sigma |Gamma| / |Omega|
    kin = 0.5 * np.sum(wvs.vectors**2, axis=1) * geometric_factor_U(
        np.zeros(2), DEC
    ).real
    want = 400.0 * 1.6 / 16.0 + kin
    assert np.allclose(np.diag(Ha).real, want, atol=1e-12)
    assert np.abs(np.diag(Ha).imag).max() < 1e-14


def test_pw_block_against_quadrature_oracle():
    # V = 0, K = 1: entry-by-entry check of kinetic + interface terms
    wvs = build_wavevectors(1, CELL)
    sigma = 37.0
    Ha, Ma = assemble_pw_block(wvs, DEC, None, sigma=sigma)
    vol = CELL.volume
    for p in range(wvs.size):
        for q in range(wvs.size):
            kp, kq = wvs.vectors[p], wvs.vectors[q]
            dk = kq - kp
            kin = 0.5 * (kp @ kq) * interstitial_integral(
                DEC, lambda pts: np.exp(1j * pts @ dk), order=40
            ) / vol
            dga = 0.0 + 0.0j
            for face in DEC.faces:
                rule = face_quadrature(face, 24)
                ph = np.exp(1j * rule.points @ dk)
                dga += (1j / (4 * vol)) * (dk @ np.asarray(face.normal)) * rule.integrate(ph)
                dga += (sigma / vol) * rule.integrate(ph)
            want = kin + dga
            assert Ha[p, q] == pytest.approx(want, abs=1e-10)
            assert Ma[p, q] == pytest.approx(
                geometric_factor_U(dk, DEC), abs=1e-12
            )


def test_m_block_psd_and_diagonal():
    wvs = build_wavevectors(1, CELL)
    _, Ma = assemble_pw_block(wvs, DEC, None, sigma=1.0)
    assert Ma.shape == (5, 5)
    assert np.allclose(np.diag(Ma).real, 0.99)
    assert np.abs(Ma - Ma.conj().T).max() < 1e-14
    assert np.linalg.eigvalsh(Ma).min() > 0


PATCH = DEC.patches[0]
GMAP = GeometryMap(PATCH)
FACES = list(DEC.faces)


def hat_matrices_1d(n_elem, width):
    """Analytic mass/stiffness for P1 hats on a uniform 1D grid."""
    h = width / n_elem
    n = n_elem + 1
    M = np.zeros((n, n))
    S = np.zeros((n, n))
    for e in range(n_elem):
        M[e: e + 2, e: e + 2] += h / 6.0 * np.array([[2, 1], [1, 2]])
        S[e: e + 2, e: e + 2] += 1.0 / h * np.array([[1, -1], [-1, 1]])
    return M, S


def test_spline_block_matches_hand_assembled_p1():
    space = uniform_space(1, 2, 2)
    blocks = assemble_spline_block(space, GMAP, None, FACES)
    M1, S1 = hat_matrices_1d(2, 0.4)
    mass = np.kron(M1, M1)
    stiff = np.kron(M1, S1) + np.kron(S1, M1)
    assert np.abs(blocks.mass.toarray() - mass).max() < 1e-12
    assert np.abs(blocks.stiffness.toarray() - stiff).max() < 1e-12


def face_rule_per_span(face, space, gmap, order=12):
    """Face quadrature subdivided at spline breakpoints (kink-aware)."""
    import itertools

    from splinewave.geometry import QuadratureRule, gauss_rule

    d = space.dim
    pts_axes, wts_axes = [], []
    for b in face.tangent_axes:
        bps = space.knotvectors[b].breakpoints
        lo = gmap.patch.center[b] - gmap.patch.half_width
        xs, ws = [], []
        for a_, b_ in zip(bps[:-1], bps[1:]):
            r = gauss_rule(order, (lo + gmap.scale * a_, lo + gmap.scale * b_))
            xs.append(r.points)
            ws.append(r.weights)
        pts_axes.append(np.concatenate(xs))
        wts_axes.append(np.concatenate(ws))
    grids = np.meshgrid(*pts_axes, indexing="ij") if pts_axes else []
    npts = grids[0].size if grids else 1
    pts = np.tile(np.asarray(face.origin, float), (npts, 1))
    for t_axis, g in zip(face.tangent_axes, grids):
        pts[:, t_axis] = g.reshape(-1)
    wg = np.meshgrid(*wts_axes, indexing="ij") if wts_axes else []
    w = np.ones(npts)
    for g in wg:
        w = w * g.reshape(-1)
    return QuadratureRule(pts, w)


def test_spline_block_constant_row_sums():
    # stiffness and the first consistency term vanish on constants; what is
    # left of H_b(sigma=0) @ 1 is exactly -1/4 of the boundary flux of each
    # basis function
    from splinewave.bspline import tensor_eval

    space = uniform_space(2, 3, 2)
    blocks = assemble_spline_block(space, GMAP, None, FACES)
    ones = np.ones(space.ndof)
    assert np.abs(blocks.stiffness @ ones).max() < 1e-12
    h0 = blocks.hamiltonian(0.0) @ ones
    flux = np.zeros(space.ndof)
    for face in FACES:
        rule = face_rule_per_span(face, space, GMAP)
        n_plus = np.asarray(face.normal)
        for x, w in zip(rule.points, rule.weights):
            idx, _, grads = tensor_eval(space, GMAP, x)
            flux[idx] += w * (grads @ n_plus)
    assert np.abs(h0 - (-0.25) * flux).max() < 1e-11
    # face mass row sums are the trace integrals (partition of unity on Gamma)
    trace = np.zeros(space.ndof)
    for face in FACES:
        rule = face_rule_per_span(face, space, GMAP)
        for x, w in zip(rule.points, rule.weights):
            idx, vals, _ = tensor_eval(space, GMAP, x)
            trace[idx] += w * vals
    assert np.abs(blocks.face_mass @ ones - trace).max() < 1e-11


def test_spline_mass_row_sums():
    space = uniform_space(2, 4, 2)
    blocks = assemble_spline_block(space, GMAP, None, FACES)
    total = blocks.mass.sum()
    assert total == pytest.approx(0.16, rel=1e-12)
    assert np.all(np.asarray(blocks.mass.sum(axis=1)).reshape(-1) > 0)


def test_spline_face_mass_total():
    # sum over entries of the face mass = int_Gamma (sum chi)^2 = |Gamma|
    space = uniform_space(2, 3, 2)
    blocks = assemble_spline_block(space, GMAP, None, FACES)
    assert blocks.face_mass.sum() == pytest.approx(DEC.interface_measure, rel=1e-12)


def test_spline_potential_mass_constant_v():
    space = uniform_space(1, 3, 2)
    blocks = assemble_spline_block(
        space, GMAP, lambda pts: np.full(np.atleast_2d(pts).shape[0], 2.0), FACES
    )
    assert np.abs(blocks.pot_mass.toarray() - 2.0 * blocks.mass.toarray()).max() < 1e-12


def test_coupling_interior_columns_absent():
    wvs = build_wavevectors(2, CELL)
    space = uniform_space(1, 4, 2)
    panel = assemble_coupling(wvs, space, GMAP, FACES)
    interior = []
    for flat in range(space.ndof):
        mi = space.multi_index(flat)
        if all(1 < m_ < n_ - 2 for m_, n_ in zip(mi, space.n_per_axis)):
            interior.append(flat)
    assert set(interior).isdisjoint(set(panel.columns.tolist()))


def test_coupling_constant_column_sum_at_k0():
    wvs = build_wavevectors(1, CELL)
    space = uniform_space(2, 3, 2)
    sigma = 400.0
    panel = assemble_coupling(wvs, space, GMAP, FACES)
    hc = panel.hamiltonian(sigma)
    row0 = wvs.index_of((0, 0))
    # sum over all spline DOFs of H^c[k=0, q]: partition of unity on Gamma
    total = hc[row0].sum()
    assert total == pytest.approx(-sigma * 1.6 / 4.0, abs=1e-10)


def test_coupling_against_face_quadrature_oracle():
    from splinewave.bspline import tensor_eval

    wvs = build_wavevectors(1, CELL)
    space = uniform_space(1, 2, 2)
    sigma = 5.0
    panel = assemble_coupling(wvs, space, GMAP, FACES)
    hc = panel.hamiltonian(sigma)
    vol = CELL.volume
    dense = np.zeros((wvs.size, space.ndof), complex)
    dense[:, panel.columns] = hc
    for p in range(wvs.size):
        kp = wvs.vectors[p]
        want = np.zeros(space.ndof, complex)
        for face in FACES:
            rule = face_rule_per_span(face, space, GMAP, order=20)
            n_plus = np.asarray(face.normal)
            for x, w in zip(rule.points, rule.weights):
                idx, vals, grads = tensor_eval(space, GMAP, x)
                ph = np.exp(-1j * kp @ x)
                want[idx] += w * ph * (
                    0.25 * (grads @ n_plus)
                    + 0.25j * (kp @ n_plus) * vals
                    - sigma * vals
                )
        want /= np.sqrt(vol)
        assert np.abs(dense[p] - want).max() < 1e-10


@pytest.fixture(scope="module")
def small_system():
    params = EwaldParams(CELL, 5.0, 2.0, (1.0,), ((0.0, 0.0),))
    V = ewald_potential(params)
    wvs = build_wavevectors(3, CELL)
    vout = v_out_table(V, DEC, cutoff=3, n_grid=64, n_cheb=32)
    spaces = (uniform_space(1, 4, 2),)
    return assemble(
        DEC, wvs, spaces, V, vout, c_sigma=10.0,
        singular_points=((0.0, 0.0),),
    )


def test_assembled_hermitian(small_system):
    H = small_system.dense_h()
    assert np.abs(H - H.conj().T).max() < 1e-12
    M = small_system.dense_m()
    assert np.abs(M - M.conj().T).max() < 1e-12


def test_assembled_m_positive_definite(small_system):
    M = small_system.dense_m()
    assert np.linalg.eigvalsh(M).min() > 0
    np.linalg.cholesky(M)


def test_mixed_overlap_block_zero(small_system):
    M = small_system.dense_m()
    npw = small_system.n_pw
    assert np.abs(M[:npw, npw:]).max() == 0.0
    assert np.abs(M[npw:, :npw]).max() == 0.0


def test_sigma_linearity():
    params = EwaldParams(CELL, 5.0, 2.0, (1.0,), ((0.0, 0.0),))
    V = ewald_potential(params)
    wvs = build_wavevectors(2, CELL)
    vout = v_out_table(V, DEC, cutoff=2, n_grid=64, n_cheb=24)
    spaces = (uniform_space(1, 2, 2),)

    def system(sig):
        return assemble(DEC, wvs, spaces, V, vout, c_sigma=1.0, sigma=sig,
                        singular_points=((0.0, 0.0),))

    s1, s2 = 100.0, 200.0
    sys1, sys2 = system(s1), system(s2)
    H1, H2 = sys1.dense_h(), sys2.dense_h()
    P = sys1.dense_penalty()
    assert np.abs((H2 - H1) - (s2 - s1) * P).max() < 1e-10
    # H(2s) - H(s) = H(s) - H(0) restricted to penalty structure
    H0 = system(0.0).dense_h()
    assert np.abs((H2 - H1) - (H1 - H0)).max() < 1e-10


def test_apply_matches_dense(small_system):
    rng = np.random.default_rng(9)
    n = small_system.n
    X = rng.normal(size=(n, 3)) + 1j * rng.normal(size=(n, 3))
    H = small_system.dense_h()
    M = small_system.dense_m()
    assert np.abs(small_system.apply_h(X) - H @ X).max() < 1e-11
    assert np.abs(small_system.apply_m(X) - M @ X).max() < 1e-11
    y1 = small_system.apply_h(X[:, 0])
    assert y1.shape == (n,)
    assert np.abs(y1 - H @ X[:, 0]).max() < 1e-11


def test_global_constant_in_kernel_free_particle():
    wvs = build_wavevectors(2, CELL)
    spaces = (uniform_space(2, 3, 2),)
    system = assemble(DEC, wvs, spaces, None, None, c_sigma=10.0)
    x = np.zeros(system.n, complex)
    x[wvs.index_of((0, 0))] = 1.0
    x[system.n_pw:] = 1.0 / np.sqrt(CELL.volume)
    hx = system.apply_h(x)
    assert np.abs(hx).max() < 1e-9
    # and it is M-normalized
    assert np.vdot(x, system.apply_m(x)).real == pytest.approx(1.0, abs=1e-12)


def test_free_particle_coercive():
    wvs = build_wavevectors(2, CELL)
    spaces = (uniform_space(1, 3, 2),)
    system = assemble(DEC, wvs, spaces, None, None, c_sigma=10.0)
    H = system.dense_h()
    M = system.dense_m()
    from scipy.linalg import eigh

    w = eigh(H, M, eigvals_only=True)
    assert w.min() > -1e-10


def test_interface_tables_match_quadrature():
    S, N = interface_tables(DEC, 3)
    dual = CELL.dual_spacing
    rng = np.random.default_rng(1)
    for _ in range(8):
        dn = rng.integers(-3, 4, size=2)
        dk = dn * dual
        s_want = 0.0 + 0.0j
        n_want = 0.0 + 0.0j
        for face in DEC.faces:
            rule = face_quadrature(face, 20)
            ph = np.exp(1j * rule.points @ dk)
            s_want += rule.integrate(ph)
            n_want += (dk @ np.asarray(face.normal)) * rule.integrate(ph)
        assert S[tuple(dn + 3)] == pytest.approx(s_want, abs=1e-12)
        assert N[tuple(dn + 3)] == pytest.approx(n_want, abs=1e-12)


def test_diag_accessors(small_system):
    H = small_system.dense_h()
    M = small_system.dense_m()
    assert np.abs(small_system.diag_h() - np.diag(H).real).max() < 1e-11
    assert np.abs(small_system.diag_m() - np.diag(M).real).max() < 1e-11


def test_dense_a_tau_subset(small_system):
    rng = np.random.default_rng(3)
    n = small_system.n
    idx = np.sort(rng.choice(n, size=min(40, n), replace=False))
    tau = 0.7
    A = small_system.dense_h() - tau * small_system.dense_m()
    got = small_system.dense_a_tau(tau, idx)
    # rows/cols of the subset appear pw-first in index order
    npw_sel = idx[idx < small_system.n_pw]
    spl_sel = idx[idx >= small_system.n_pw]
    order = np.concatenate([npw_sel, spl_sel])
    assert np.abs(got - A[np.ix_(order, order)]).max() < 1e-11


def test_matrix_export_roundtrip(tmp_path, small_system):
    from splinewave.assembly import export_coo, read_coo

    H = small_system.dense_h()
    path = tmp_path / "h.coo"
    export_coo(path, H)
    back = read_coo(path)
    assert np.array_equal(back, H)
    # sparse input round-trips too
    Mb = small_system.spline_blocks[0].mass
    export_coo(tmp_path / "m.coo", Mb)
    assert np.abs(read_coo(tmp_path / "m.coo") - Mb.toarray()).max() == 0.0
    # deterministic bytes
    export_coo(tmp_path / "h2.coo", H)
    assert (tmp_path / "h.coo").read_bytes() == (tmp_path / "h2.coo").read_bytes()

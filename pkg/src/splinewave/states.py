"""Discrete states of the coupled basis: evaluation, norms, comparisons.

A state is a coefficient vector over the plane-wave DOFs followed by the
spline DOFs.  States from different discretizations of the same domain
decomposition can be compared: plane-wave parts meet on the union of their
wave-vector sets where the interstitial Gram matrix is known in closed
form, spline parts are integrated on the union mesh where products of both
bases are exactly quadrable, and interface jumps are integrated face by
face.
"""

from __future__ import annotations

import numpy as np

from .bspline import basis_table
from .geometry import gauss_rule
from .planewave import patch_fourier_table


class DGState:
    """One coefficient vector bound to its assembled system."""

    def __init__(self, system, coeffs):
        self.system = system
        self.coeffs = np.asarray(coeffs, dtype=complex).reshape(-1)
        if self.coeffs.size != system.n:
            raise ValueError("coefficient length does not match the system")

    # -- bookkeeping -----------------------------------------------------------

    @property
    def cell(self):
        return self.system.decomp.cell

    @property
    def pw_coeffs(self) -> np.ndarray:
        return self.coeffs[: self.system.n_pw]

    def spline_coeffs(self, ip: int) -> np.ndarray:
        offs = self.system.dofmap.spline_offsets
        return self.coeffs[offs[ip]: offs[ip + 1]]

    def m_norm(self) -> float:
        return float(np.sqrt(np.vdot(self.coeffs, self.system.apply_m(self.coeffs)).real))

    def normalized(self) -> "DGState":
        return DGState(self.system, self.coeffs / self.m_norm())

    def phase_fixed(self) -> "DGState":
        """Rotate so the largest-magnitude coefficient is real positive."""
        j = int(np.argmax(np.abs(self.coeffs)))
        c = self.coeffs[j]
        if abs(c) == 0:
            return self
        return DGState(self.system, self.coeffs * (abs(c) / c))

    # -- evaluation --------------------------------------------------------------

    def _pw_eval(self, points, gradient=False):
        wvs = self.system.dofmap.wvs
        pts = np.atleast_2d(np.asarray(points, float))
        c = self.pw_coeffs / np.sqrt(self.cell.volume)
        out_shape = (pts.shape[0], pts.shape[1]) if gradient else (pts.shape[0],)
        out = np.zeros(out_shape, dtype=complex)
        chunk = max(1, int(4e6) // max(wvs.size, 1))
        for s in range(0, pts.shape[0], chunk):
            E = np.exp(1j * pts[s: s + chunk] @ wvs.vectors.T)
            if gradient:
                for a in range(pts.shape[1]):
                    out[s: s + chunk, a] = E @ (1j * wvs.vectors[:, a] * c)
            else:
                out[s: s + chunk] = E @ c
        return out

    def _spline_eval_tensor(self, ip, axes_pts, deriv_axis=None):
        """Tensor-grid values of the spline part on one patch."""
        blocks = self.system.spline_blocks[ip]
        space, gmap = blocks.space, blocks.gmap
        d = space.dim
        lo = np.asarray(gmap.patch.center) - gmap.patch.half_width
        mats = []
        for a in range(d):
            xi = np.clip((np.asarray(axes_pts[a]) - lo[a]) / gmap.scale, 0.0, 1.0)
            vals, ders = basis_table(space.knotvectors[a], xi)
            mats.append(ders / gmap.scale if a == deriv_axis else vals)
        C = self.spline_coeffs(ip).reshape(space.n_per_axis, order="F")
        letters = "abc"[:d]
        out_letters = "xyz"[:d]
        spec = ",".join(f"{l}{o}" for l, o in zip(letters, out_letters))
        return np.einsum(f"{letters},{spec}->{out_letters}", C, *mats, optimize=True)

    def eval(self, points) -> np.ndarray:
        """Pointwise values; patch interiors take the spline representation."""
        pts = np.atleast_2d(np.asarray(points, float))
        owner = self.system.decomp.patch_of(pts)
        out = np.zeros(pts.shape[0], dtype=complex)
        outside = owner < 0
        if np.any(outside):
            out[outside] = self._pw_eval(pts[outside])
        for ip in range(len(self.system.decomp.patches)):
            sel = owner == ip
            if not np.any(sel):
                continue
            sub = pts[sel]
            vals = np.array(
                [self._spline_point(ip, p) for p in sub]
            )
            out[sel] = vals
        return out

    def _spline_point(self, ip, point):
        from .bspline import tensor_eval

        blocks = self.system.spline_blocks[ip]
        idx, vals, _ = tensor_eval(blocks.space, blocks.gmap, point)
        return complex(self.spline_coeffs(ip)[idx] @ vals)

    def sample_grid(self, n_grid: int) -> np.ndarray:
        """Values on the uniform cell grid; plane-wave part via inverse FFT."""
        wvs = self.system.dofmap.wvs
        cell = self.cell
        d = cell.dim
        if n_grid < 2 * wvs.cutoff + 2:
            raise ValueError("grid too small for the wave-vector content")
        spec = np.zeros((n_grid,) * d, dtype=complex)
        r0 = -0.5 * cell.length
        phases = np.exp(1j * (wvs.vectors @ np.full(d, r0)))
        np.add.at(
            spec,
            tuple((wvs.ints[:, a]) % n_grid for a in range(d)),
            self.pw_coeffs * phases / np.sqrt(cell.volume),
        )
        vals = np.fft.ifftn(spec) * n_grid**d
        # overwrite patch interiors with the spline representation
        xs = r0 + cell.length * np.arange(n_grid) / n_grid
        for ip, patch in enumerate(self.system.decomp.patches):
            sel_axes = []
            for a in range(d):
                lo = patch.center[a] - patch.half_width
                hi = patch.center[a] + patch.half_width
                sel_axes.append(np.where((xs >= lo - 1e-14) & (xs <= hi + 1e-14))[0])
            axes_pts = [xs[s] for s in sel_axes]
            sub = self._spline_eval_tensor(ip, axes_pts)
            vals[np.ix_(*sel_axes)] = sub
        return vals


# ---------------------------------------------------------------------------
# cross-discretization inner products and error norms
# ---------------------------------------------------------------------------

def _union_pw(u: DGState, v: DGState):
    """Coefficients of both states on the union of their wave-vector sets."""
    ints_u = u.system.dofmap.wvs.ints
    ints_v = v.system.dofmap.wvs.ints
    keys = {}
    for n in ints_u:
        keys.setdefault(tuple(n), len(keys))
    for n in ints_v:
        keys.setdefault(tuple(n), len(keys))
    union = np.array(sorted(keys, key=lambda t: (sum(x * x for x in t), t)))
    pos = {tuple(n): i for i, n in enumerate(union)}
    cu = np.zeros(len(union), dtype=complex)
    cv = np.zeros(len(union), dtype=complex)
    for n, c in zip(ints_u, u.pw_coeffs):
        cu[pos[tuple(n)]] = c
    for n, c in zip(ints_v, v.pw_coeffs):
        cv[pos[tuple(n)]] = c
    return union, cu, cv


def _patch_quadform(decomp, union_ints, a, b, weight=None, chunk=512):
    """``a^H G b`` with ``G(p,q) = patch_fourier(k_q - k_p)`` (optionally
    weighted per axis by the wave-vector components)."""
    m = int(np.abs(union_ints).max()) * 2 if union_ints.size else 0
    tab = patch_fourier_table(decomp, max(m, 1))
    aw = a if weight is None else weight * a
    bw = b if weight is None else weight * b
    total = 0.0 + 0.0j
    mm = max(m, 1)
    for s in range(0, union_ints.shape[0], chunk):
        dn = union_ints[None, :, :] - union_ints[s: s + chunk][:, None, :]
        block = tab[tuple(np.moveaxis(dn + mm, -1, 0))]
        total += np.conj(aw[s: s + chunk]) @ (block @ bw)
    return total


def pw_l2_out(decomp, union_ints, coeffs) -> float:
    """``int_out |sum c_k e_k|^2`` via the closed-form Gram matrix."""
    base = float(np.vdot(coeffs, coeffs).real)
    corr = _patch_quadform(decomp, union_ints, coeffs, coeffs).real
    return max(base - corr, 0.0)


def pw_h1semi_out(decomp, union_ints, coeffs, dual) -> float:
    total = 0.0
    kvecs = union_ints * dual
    for a_ in range(union_ints.shape[1]):
        w = kvecs[:, a_]
        wc = w * coeffs
        total += float(np.vdot(wc, wc).real)
        total -= _patch_quadform(decomp, union_ints, coeffs, coeffs, weight=w).real
    return max(total, 0.0)


def _union_breakpoints(u: DGState, v: DGState, ip: int):
    bu = u.system.spline_blocks[ip].space.knotvectors
    bv = v.system.spline_blocks[ip].space.knotvectors
    out = []
    for a in range(len(bu)):
        bps = np.union1d(bu[a].breakpoints, bv[a].breakpoints)
        out.append(bps)
    return out


def _patch_axis_rules(u, v, ip, order):
    gmap = u.system.spline_blocks[ip].gmap
    lo = np.asarray(gmap.patch.center) - gmap.patch.half_width
    axes = []
    for a, bps in enumerate(_union_breakpoints(u, v, ip)):
        xs, ws = [], []
        for p0, p1 in zip(bps[:-1], bps[1:]):
            rule = gauss_rule(order, (lo[a] + gmap.scale * p0, lo[a] + gmap.scale * p1))
            xs.append(rule.points)
            ws.append(rule.weights)
        axes.append((np.concatenate(xs), np.concatenate(ws)))
    return axes


def spline_difference_norms(u: DGState, v: DGState, ip: int):
    """(L2^2, H1-seminorm^2) of the spline-part difference on patch ip."""
    space_u = u.system.spline_blocks[ip].space
    space_v = v.system.spline_blocks[ip].space
    order = max(space_u.degree, space_v.degree) + 2
    axes = _patch_axis_rules(u, v, ip, order)
    axes_pts = [a[0] for a in axes]
    wts = [a[1] for a in axes]
    d = len(axes)
    diff = u._spline_eval_tensor(ip, axes_pts) - v._spline_eval_tensor(ip, axes_pts)
    wgrid = np.ones_like(diff, dtype=float)
    for a in range(d):
        shape = [1] * d
        shape[a] = wts[a].size
        wgrid = wgrid * wts[a].reshape(shape)
    l2 = float(np.sum(np.abs(diff) ** 2 * wgrid))
    h1 = 0.0
    for a in range(d):
        g = u._spline_eval_tensor(ip, axes_pts, deriv_axis=a) - v._spline_eval_tensor(
            ip, axes_pts, deriv_axis=a
        )
        h1 += float(np.sum(np.abs(g) ** 2 * wgrid))
    return l2, h1


def _face_rule(u: DGState, v: DGState, face, order):
    """Tangential rule on a face, subdivided at union-mesh breakpoints."""
    ip = face.patch_index
    gmap = u.system.spline_blocks[ip].gmap
    lo = np.asarray(gmap.patch.center) - gmap.patch.half_width
    bps_all = _union_breakpoints(u, v, ip)
    axes_pts, axes_wts = [], []
    for b in face.tangent_axes:
        xs, ws = [], []
        for p0, p1 in zip(bps_all[b][:-1], bps_all[b][1:]):
            rule = gauss_rule(order, (lo[b] + gmap.scale * p0, lo[b] + gmap.scale * p1))
            xs.append(rule.points)
            ws.append(rule.weights)
        axes_pts.append(np.concatenate(xs))
        axes_wts.append(np.concatenate(ws))
    grids = np.meshgrid(*axes_pts, indexing="ij") if axes_pts else []
    npts = grids[0].size if grids else 1
    pts = np.tile(np.asarray(face.origin, float), (npts, 1))
    for t_axis, g in zip(face.tangent_axes, grids):
        pts[:, t_axis] = g.reshape(-1)
    wg = np.meshgrid(*axes_wts, indexing="ij") if axes_wts else []
    w = np.ones(npts)
    for g in wg:
        w = w * g.reshape(-1)
    return pts, w


def jump_l2_sq(u: DGState, v: DGState | None = None, order=12) -> float:
    """``int_Gamma |[w]|^2`` for w = u (v=None) or w = u - v."""
    total = 0.0
    other = v if v is not None else u
    for face in u.system.decomp.faces:
        pts, w = _face_rule(u, other, face, order)
        inner = _face_spline_values(u, face, pts)
        outer = u._pw_eval(pts)
        jump = inner - outer
        if v is not None:
            jump -= _face_spline_values(v, face, pts) - v._pw_eval(pts)
        total += float(np.sum(np.abs(jump) ** 2 * w))
    return total


def _face_spline_values(state: DGState, face, pts):
    ip = face.patch_index
    blocks = state.system.spline_blocks[ip]
    d = blocks.space.dim
    axes_pts = []
    tangent = list(face.tangent_axes)
    for a in range(d):
        if a == face.axis:
            axes_pts.append(np.array([face.origin[a]]))
        else:
            axes_pts.append(np.unique(pts[:, a]))
    vals = state._spline_eval_tensor(ip, axes_pts)
    # map back to the flattened point list
    idx = []
    for a in tangent:
        uniq = axes_pts[a]
        idx.append(np.searchsorted(uniq, pts[:, a]))
    if d == 2:
        return vals[0, idx[0]] if face.axis == 0 else vals[idx[0], 0]
    sel = [None] * d
    sel[face.axis] = np.zeros(pts.shape[0], dtype=int)
    for a, i in zip(tangent, idx):
        sel[a] = i
    return vals[tuple(sel)]


def m_inner(u: DGState, v: DGState) -> complex:
    """``(u, v)_{L2} = int u conj(v)`` across possibly different systems."""
    union, cu, cv = _union_pw(u, v)
    decomp = u.system.decomp
    out = np.vdot(cv, cu) - _patch_quadform(decomp, union, cv, cu)
    for ip in range(len(decomp.patches)):
        order = max(
            u.system.spline_blocks[ip].space.degree,
            v.system.spline_blocks[ip].space.degree,
        ) + 2
        axes = _patch_axis_rules(u, v, ip, order)
        axes_pts = [a[0] for a in axes]
        wts = [a[1] for a in axes]
        fu = u._spline_eval_tensor(ip, axes_pts)
        fv = v._spline_eval_tensor(ip, axes_pts)
        wgrid = np.ones_like(fu, dtype=float)
        for a in range(len(axes)):
            shape = [1] * len(axes)
            shape[a] = wts[a].size
            wgrid = wgrid * wts[a].reshape(shape)
        out += np.sum(fu * np.conj(fv) * wgrid)
    return complex(out)


def error_norms(u: DGState, ref: DGState, sigma: float):
    """(L2 error, DG error) between a state and a reference state.

    The DG norm is the broken H1 norm over both regions plus the
    sigma-weighted interface-jump L2 norm.
    """
    union, cu, cr = _union_pw(u, ref)
    dc = cu - cr
    decomp = u.system.decomp
    dual = decomp.cell.dual_spacing
    l2_out = pw_l2_out(decomp, union, dc)
    h1_out = pw_h1semi_out(decomp, union, dc, dual)
    l2_in = h1_in = 0.0
    for ip in range(len(decomp.patches)):
        l2p, h1p = spline_difference_norms(u, ref, ip)
        l2_in += l2p
        h1_in += h1p
    jump = jump_l2_sq(u, ref)
    l2 = np.sqrt(l2_out + l2_in)
    dg = np.sqrt(l2_out + h1_out + l2_in + h1_in + sigma * jump)
    return l2, dg


def align_phase(u: DGState, ref: DGState) -> DGState:
    """Rotate u to maximize the real inner product with the reference."""
    ip = m_inner(ref, u)
    if abs(ip) == 0:
        return u
    return DGState(u.system, u.coeffs * (ip / abs(ip)))


def align_to_cluster(u: DGState, refs) -> DGState:
    """Best reference-space representative of u within a degenerate cluster.

    Projects u onto the span of the reference states (in the L2 inner
    product) and normalizes; with a single reference this reduces to phase
    alignment.
    """
    coeffs = np.conj([m_inner(r, u) for r in refs])
    nrm = np.linalg.norm(coeffs)
    if nrm == 0:
        return refs[0]
    coeffs = coeffs / nrm
    mixed = sum(c * r.coeffs for c, r in zip(coeffs, refs))
    out = DGState(refs[0].system, mixed)
    return out.normalized()

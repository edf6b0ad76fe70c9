"""B-spline bases on open knot vectors and tensor-product spline spaces.

Univariate bases are evaluated with the Cox-de Boor recursion in its
numerically stable triangular form (de Boor's algorithm).  Tensor-product
spaces are mapped onto atomic patches by an affine geometry map, so physical
gradients pick up a constant factor ``1/(2R)`` per axis.

Degrees of freedom are numbered lexicographically with the first axis index
varying fastest; this ordering is relied upon by the assembly and by the
interface/interior partition and must not change.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import AtomicPatch, gauss_rule


@dataclass(frozen=True)
class KnotVector:
    """Open knot vector on [0, 1] with simple internal knots.

    Parameters
    ----------
    degree : int
        Polynomial degree ``p >= 1``.
    knots : array
        Non-decreasing sequence ``xi_1 <= ... <= xi_{n+p+1}`` with the first
        and last ``p+1`` entries clamped to 0 and 1.
    """

    degree: int
    knots: np.ndarray

    def __post_init__(self):
        p = self.degree
        knots = np.asarray(self.knots, float)
        object.__setattr__(self, "knots", knots)
        if p < 1:
            raise ValueError("degree must be >= 1")
        if len(knots) < 2 * (p + 1):
            raise ValueError("knot vector too short for an open basis")
        if np.any(np.diff(knots) < 0):
            raise ValueError("knots must be non-decreasing")
        if not (np.all(knots[: p + 1] == 0.0) and np.all(knots[-(p + 1):] == 1.0)):
            raise ValueError("knot vector must be open: p+1 zeros then p+1 ones")
        internal = knots[p + 1: -(p + 1)]
        if internal.size and np.any(np.diff(internal) <= 0):
            raise ValueError("internal knots must be strictly increasing (multiplicity one)")

    @property
    def n(self) -> int:
        """Number of basis functions."""
        return len(self.knots) - self.degree - 1

    @property
    def breakpoints(self) -> np.ndarray:
        return np.unique(self.knots)

    @property
    def n_elements(self) -> int:
        return len(self.breakpoints) - 1


def open_uniform_knots(degree: int, n_elements: int) -> KnotVector:
    """Open knot vector with uniform internal knots ``j / n_elements``."""
    if n_elements < 1:
        raise ValueError("need at least one element")
    internal = np.arange(1, n_elements) / n_elements
    knots = np.concatenate(
        [np.zeros(degree + 1), internal, np.ones(degree + 1)]
    )
    return KnotVector(degree, knots)


def find_span(kv: KnotVector, xi: float) -> int:
    """Index ``i`` with ``knots[i] <= xi < knots[i+1]`` (last span at xi = 1)."""
    if xi < 0.0 or xi > 1.0:
        raise ValueError(f"parametric coordinate {xi} outside [0, 1]")
    p, knots, n = kv.degree, kv.knots, kv.n
    if xi >= 1.0:
        return n - 1
    return int(np.searchsorted(knots, xi, side="right") - 1)


def eval_basis(kv: KnotVector, xi: float):
    """Nonzero basis values at ``xi``.

    Returns
    -------
    first : int
        Index of the first active basis function.
    values : array of length p+1
        ``B_{first}, ..., B_{first+p}`` evaluated at xi; non-negative and
        summing to one.
    """
    span = find_span(kv, xi)
    p, knots = kv.degree, kv.knots
    values = np.zeros(p + 1)
    left = np.zeros(p)
    right = np.zeros(p)
    values[0] = 1.0
    for j in range(p):
        left[j] = xi - knots[span - j]
        right[j] = knots[span + 1 + j] - xi
        saved = 0.0
        for r in range(j + 1):
            denom = right[r] + left[j - r]
            temp = values[r] / denom if denom != 0.0 else 0.0
            values[r] = saved + right[r] * temp
            saved = left[j - r] * temp
        values[j + 1] = saved
    return span - p, values


def eval_basis_deriv(kv: KnotVector, xi: float):
    """First derivatives of the active basis functions at ``xi``.

    Uses the lower-degree representation
    ``B'_{i,p} = p * (B_{i,p-1}/(xi_{i+p}-xi_i) - B_{i+1,p-1}/(xi_{i+p+1}-xi_{i+1}))``.
    The returned values sum to zero.
    """
    span = find_span(kv, xi)
    p, knots = kv.degree, kv.knots
    if p == 1:
        low_vals = np.ones(1)
        low_first = span
    else:
        # evaluate degree p-1 basis on the same knot sequence
        values = np.zeros(p)
        left = np.zeros(p - 1)
        right = np.zeros(p - 1)
        values[0] = 1.0
        for j in range(p - 1):
            left[j] = xi - knots[span - j]
            right[j] = knots[span + 1 + j] - xi
            saved = 0.0
            for r in range(j + 1):
                denom = right[r] + left[j - r]
                temp = values[r] / denom if denom != 0.0 else 0.0
                values[r] = saved + right[r] * temp
                saved = left[j - r] * temp
            values[j + 1] = saved
        low_vals = values
        low_first = span - (p - 1)
    derivs = np.zeros(p + 1)
    first = span - p
    for idx in range(p + 1):
        i = first + idx
        acc = 0.0
        j = i - low_first
        if 0 <= j < p:
            denom = knots[i + p] - knots[i]
            if denom != 0.0:
                acc += low_vals[j] / denom
        j = i + 1 - low_first
        if 0 <= j < p:
            denom = knots[i + p + 1] - knots[i + 1]
            if denom != 0.0:
                acc -= low_vals[j] / denom
        derivs[idx] = p * acc
    return first, derivs


@dataclass(frozen=True)
class SplineSpace:
    """Tensor product of univariate spline spaces, one knot vector per axis."""

    knotvectors: tuple

    def __post_init__(self):
        kvs = tuple(self.knotvectors)
        object.__setattr__(self, "knotvectors", kvs)
        degrees = {kv.degree for kv in kvs}
        if len(degrees) != 1:
            raise ValueError("all axes must share the same degree")

    @property
    def dim(self) -> int:
        return len(self.knotvectors)

    @property
    def degree(self) -> int:
        return self.knotvectors[0].degree

    @property
    def n_per_axis(self) -> tuple:
        return tuple(kv.n for kv in self.knotvectors)

    @property
    def ndof(self) -> int:
        return int(np.prod(self.n_per_axis))

    def flat_index(self, multi) -> int:
        """Lexicographic flattening with the first axis fastest."""
        idx = 0
        for a in reversed(range(self.dim)):
            idx = idx * self.knotvectors[a].n + multi[a]
        return idx

    def multi_index(self, flat: int) -> tuple:
        out = []
        for a in range(self.dim):
            n = self.knotvectors[a].n
            out.append(flat % n)
            flat //= n
        return tuple(out)


def uniform_space(degree: int, n_elements: int, dim: int) -> SplineSpace:
    kv = open_uniform_knots(degree, n_elements)
    return SplineSpace((kv,) * dim)


@dataclass(frozen=True)
class GeometryMap:
    """Affine map from the parametric cube [0,1]^d onto an atomic patch."""

    patch: AtomicPatch

    @property
    def dim(self) -> int:
        return self.patch.dim

    @property
    def scale(self) -> float:
        """Physical length per unit parametric length (constant per axis)."""
        return 2.0 * self.patch.half_width

    @property
    def jacobian_det(self) -> float:
        return self.scale**self.dim

    def to_physical(self, xi):
        xi = np.asarray(xi, float)
        lo = np.asarray(self.patch.center) - self.patch.half_width
        return lo + self.scale * xi

    def to_parametric(self, x):
        x = np.asarray(x, float)
        lo = np.asarray(self.patch.center) - self.patch.half_width
        return (x - lo) / self.scale


def tensor_eval(space: SplineSpace, gmap: GeometryMap, point):
    """Active basis values and physical gradients at one physical point.

    Returns
    -------
    indices : int array, shape (m,)
        Flat DOF indices of the active functions (m <= (p+1)^d).
    values : float array, shape (m,)
    gradients : float array, shape (m, d)
    """
    point = np.asarray(point, float)
    xi = gmap.to_parametric(point)
    if np.any(xi < -1e-12) or np.any(xi > 1.0 + 1e-12):
        raise ValueError(f"point {point} outside patch {gmap.patch}")
    xi = np.clip(xi, 0.0, 1.0)
    d = space.dim
    firsts, vals, ders = [], [], []
    for a in range(d):
        f, v = eval_basis(space.knotvectors[a], xi[a])
        _, dv = eval_basis_deriv(space.knotvectors[a], xi[a])
        firsts.append(f)
        vals.append(v)
        ders.append(dv / gmap.scale)
    p1 = space.degree + 1
    shape = (p1,) * d
    m = p1**d
    indices = np.empty(m, dtype=int)
    values = np.empty(m)
    gradients = np.empty((m, d))
    for flat_local in range(m):
        loc = np.unravel_index(flat_local, shape)
        multi = tuple(firsts[a] + loc[a] for a in range(d))
        indices[flat_local] = space.flat_index(multi)
        v = 1.0
        for a in range(d):
            v *= vals[a][loc[a]]
        values[flat_local] = v
        for a in range(d):
            g = ders[a][loc[a]]
            for b in range(d):
                if b != a:
                    g *= vals[b][loc[b]]
            gradients[flat_local, a] = g
    return indices, values, gradients


def basis_table(kv: KnotVector, xis) -> tuple:
    """Values and derivatives of all n basis functions at many points.

    Returns dense arrays of shape (n, len(xis)); convenient for building
    per-axis evaluation tables on grids and quadrature nodes.
    """
    xis = np.asarray(xis, float)
    n = kv.n
    vals = np.zeros((n, xis.size))
    ders = np.zeros((n, xis.size))
    for j, xi in enumerate(xis.reshape(-1)):
        f, v = eval_basis(kv, xi)
        vals[f: f + v.size, j] = v
        f2, dv = eval_basis_deriv(kv, xi)
        ders[f2: f2 + dv.size, j] = dv
    return vals, ders


def element_quadrature_tables(kv: KnotVector, order: int):
    """Per-element Gauss tables for 1D assembly.

    For each knot span returns (nodes, weights, first_active, values, derivs)
    with ``values/derivs`` of shape (p+1, order) in parametric units.
    """
    p = kv.degree
    out = []
    bps = kv.breakpoints
    for e in range(len(bps) - 1):
        rule = gauss_rule(order, (bps[e], bps[e + 1]))
        vals = np.zeros((p + 1, order))
        ders = np.zeros((p + 1, order))
        first = None
        for j, xi in enumerate(rule.points):
            f, v = eval_basis(kv, xi)
            first = f if first is None else first
            if f != first:
                raise RuntimeError("inconsistent span inside one element")
            vals[:, j] = v
            _, dv = eval_basis_deriv(kv, xi)
            ders[:, j] = dv
        out.append((rule.points, rule.weights, first, vals, ders))
    return out

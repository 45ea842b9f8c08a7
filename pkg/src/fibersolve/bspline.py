"""B-spline basis functions, Gauss quadrature and tensor-product box patches.

Univariate bases use clamped (open) uniform knot vectors evaluated with the
Cox-de Boor recursion, including first and second derivatives.  Volumetric
patches map the unit cube through a constant affine map, so Jacobians are
constant and point location is closed-form.
"""

import numpy as np

__all__ = [
    "open_knot_vector",
    "KnotVector",
    "BasisEval",
    "eval_basis",
    "tabulate",
    "QuadratureRule",
    "Patch3D",
    "PatchEval",
]


def open_knot_vector(degree, n_elements, interval=(0.0, 1.0)):
    """Clamped uniform knot vector with ``n_elements`` non-empty spans.

    The first and last knot are repeated ``degree + 1`` times so the basis
    interpolates the interval endpoints.
    """
    if n_elements < 1:
        raise ValueError("need at least one element")
    a, b = float(interval[0]), float(interval[1])
    if not b > a:
        raise ValueError("interval must have positive length")
    interior = np.linspace(a, b, n_elements + 1)
    return np.concatenate(
        [np.full(degree, a), interior, np.full(degree, b)]
    )


class KnotVector:
    """Univariate clamped B-spline basis of a fixed degree."""

    def __init__(self, knots, degree):
        self.knots = np.asarray(knots, dtype=float)
        self.degree = int(degree)
        self.n_basis = len(self.knots) - self.degree - 1
        if self.n_basis < self.degree + 1:
            raise ValueError("knot vector too short for degree")
        self.breakpoints = np.unique(self.knots)
        self.n_spans = len(self.breakpoints) - 1
        self.start = self.knots[self.degree]
        self.end = self.knots[self.n_basis]

    def find_span(self, u):
        """Index i with knots[i] <= u < knots[i+1] (last span at the right end)."""
        p, n = self.degree, self.n_basis
        if u >= self.knots[n]:
            return n - 1
        if u <= self.knots[p]:
            return p
        return int(np.searchsorted(self.knots, u, side="right") - 1)

    @property
    def greville(self):
        """Knot averages; for degree zero the span midpoints."""
        p, n = self.degree, self.n_basis
        if p == 0:
            return 0.5 * (self.knots[:-1] + self.knots[1:])
        return np.array([self.knots[a + 1 : a + p + 1].mean() for a in range(n)])

    def span_interval(self, s):
        return self.breakpoints[s], self.breakpoints[s + 1]

    def span_first_basis(self, s):
        """Index of the first basis function supported on span ``s``."""
        # clamped uniform: span s covers functions s .. s+degree
        return s


class BasisEval:
    """Nonzero basis values and derivatives at one parameter value.

    ``first`` is the index of the first of the ``degree + 1`` active
    functions; ``values``, ``d1`` and ``d2`` hold their values and first two
    derivatives.
    """

    __slots__ = ("first", "values", "d1", "d2")

    def __init__(self, first, values, d1, d2):
        self.first = first
        self.values = values
        self.d1 = d1
        self.d2 = d2


def _ders_basis_funs(span, u, p, n_derivs, U):
    """Cox-de Boor recursion with derivatives (returns (n_derivs+1, p+1))."""
    ndu = np.empty((p + 1, p + 1))
    ndu[0, 0] = 1.0
    left = np.empty(p + 1)
    right = np.empty(p + 1)
    for j in range(1, p + 1):
        left[j] = u - U[span + 1 - j]
        right[j] = U[span + j] - u
        saved = 0.0
        for r in range(j):
            ndu[j, r] = right[r + 1] + left[j - r]
            temp = ndu[r, j - 1] / ndu[j, r]
            ndu[r, j] = saved + right[r + 1] * temp
            saved = left[j - r] * temp
        ndu[j, j] = saved

    ders = np.zeros((n_derivs + 1, p + 1))
    ders[0, :] = ndu[:, p]
    nd = min(n_derivs, p)
    a = np.empty((2, p + 1))
    for r in range(p + 1):
        s1, s2 = 0, 1
        a[0, 0] = 1.0
        for k in range(1, nd + 1):
            d = 0.0
            rk, pk = r - k, p - k
            if r >= k:
                a[s2, 0] = a[s1, 0] / ndu[pk + 1, rk]
                d = a[s2, 0] * ndu[rk, pk]
            j1 = 1 if rk >= -1 else -rk
            j2 = k - 1 if r - 1 <= pk else p - r
            for j in range(j1, j2 + 1):
                a[s2, j] = (a[s1, j] - a[s1, j - 1]) / ndu[pk + 1, rk + j]
                d += a[s2, j] * ndu[rk + j, pk]
            if r <= pk:
                a[s2, k] = -a[s1, k - 1] / ndu[pk + 1, r]
                d += a[s2, k] * ndu[r, pk]
            ders[k, r] = d
            s1, s2 = s2, s1
    fact = float(p)
    for k in range(1, nd + 1):
        ders[k, :] *= fact
        fact *= p - k
    return ders


def eval_basis(kv, u, n_derivs=2):
    """Evaluate the nonzero basis functions of ``kv`` at parameter ``u``."""
    span = kv.find_span(u)
    ders = _ders_basis_funs(span, float(u), kv.degree, n_derivs, kv.knots)
    d1 = ders[1] if n_derivs >= 1 else None
    d2 = ders[2] if n_derivs >= 2 else None
    return BasisEval(span - kv.degree, ders[0], d1, d2)


def tabulate(kv, points, n_derivs=2):
    """Evaluate the basis at many points.

    Returns ``(first, ders)`` where ``first[i]`` is the first active function
    at ``points[i]`` and ``ders[i, k]`` holds the k-th derivatives of the
    ``degree + 1`` active functions.
    """
    points = np.asarray(points, dtype=float)
    npts = len(points)
    first = np.empty(npts, dtype=int)
    ders = np.empty((npts, n_derivs + 1, kv.degree + 1))
    for i, u in enumerate(points):
        span = kv.find_span(u)
        first[i] = span - kv.degree
        ders[i] = _ders_basis_funs(span, u, kv.degree, n_derivs, kv.knots)
    return first, ders


class QuadratureRule:
    """Per-span Gauss-Legendre rule over the whole knot interval."""

    def __init__(self, points, weights, n_per_span):
        self.points = points
        self.weights = weights
        self.n_per_span = n_per_span

    @classmethod
    def for_knots(cls, kv, n_points=None):
        """Gauss rule with ``n_points`` per span (default: degree + 1)."""
        n = kv.degree + 1 if n_points is None else int(n_points)
        ref_pts, ref_wts = np.polynomial.legendre.leggauss(n)
        pts, wts = [], []
        for s in range(kv.n_spans):
            a, b = kv.span_interval(s)
            half = 0.5 * (b - a)
            pts.append(0.5 * (a + b) + half * ref_pts)
            wts.append(half * ref_wts)
        return cls(np.concatenate(pts), np.concatenate(wts), n)

    def span_slice(self, s):
        return slice(s * self.n_per_span, (s + 1) * self.n_per_span)


class PatchEval:
    """Active basis data of a volumetric patch at one point.

    ``indices`` are flattened control-point ids, ``values`` the basis values,
    ``grad`` the physical gradients (m, 3) and ``hess`` the physical second
    derivatives (m, 3, 3).
    """

    __slots__ = ("indices", "values", "grad", "hess")

    def __init__(self, indices, values, grad, hess):
        self.indices = indices
        self.values = values
        self.grad = grad
        self.hess = hess


class Patch3D:
    """Tensor-product B-spline patch over an affinely mapped unit cube.

    Geometry: ``x = origin + edge_matrix @ xi`` with ``xi`` in [0, 1]^3.  The
    columns of ``edge_matrix`` are the box edge vectors, which may encode a
    rotation; the Jacobian is constant so physical derivatives come from one
    constant linear solve and point location is exact.
    """

    def __init__(self, degrees, n_elements, origin, edge_matrix):
        self.degrees = tuple(int(p) for p in degrees)
        self.n_elements = tuple(int(n) for n in n_elements)
        self.origin = np.asarray(origin, dtype=float)
        self.edge_matrix = np.asarray(edge_matrix, dtype=float)
        if self.edge_matrix.shape != (3, 3):
            raise ValueError("edge_matrix must be 3x3")
        det = np.linalg.det(self.edge_matrix)
        if det <= 0:
            raise ValueError("edge_matrix must be orientation-preserving")
        self.jacobian_det = det
        self.jacobian_inv = np.linalg.inv(self.edge_matrix)

        self.bases = tuple(
            KnotVector(open_knot_vector(p, n), p)
            for p, n in zip(self.degrees, self.n_elements)
        )
        self.n_cp = tuple(kv.n_basis for kv in self.bases)
        self.n_control_points = int(np.prod(self.n_cp))

        g1, g2, g3 = (kv.greville for kv in self.bases)
        grid = np.stack(np.meshgrid(g1, g2, g3, indexing="ij"), axis=-1)
        xi_cp = grid.reshape(-1, 3)
        self.greville_parametric = xi_cp
        self.control_points = self.origin + xi_cp @ self.edge_matrix.T

    def cp_index(self, i, j, k):
        n1, n2, n3 = self.n_cp
        return (i * n2 + j) * n3 + k

    def eval_patch(self, xi, n_derivs=2):
        """Basis values and physical derivatives at parametric point ``xi``."""
        p1, p2, p3 = self.degrees
        evals = [eval_basis(kv, x, n_derivs) for kv, x in zip(self.bases, xi)]
        e1, e2, e3 = evals
        i0 = np.arange(e1.first, e1.first + p1 + 1)
        j0 = np.arange(e2.first, e2.first + p2 + 1)
        k0 = np.arange(e3.first, e3.first + p3 + 1)
        n1, n2, n3 = self.n_cp
        indices = (
            (i0[:, None, None] * n2 + j0[None, :, None]) * n3 + k0[None, None, :]
        ).ravel()

        V1, V2, V3 = e1.values, e2.values, e3.values
        values = np.einsum("a,b,c->abc", V1, V2, V3).ravel()
        if n_derivs == 0:
            return PatchEval(indices, values, None, None)

        D1, D2, D3 = e1.d1, e2.d1, e3.d1
        grad_p = np.stack(
            [
                np.einsum("a,b,c->abc", D1, V2, V3).ravel(),
                np.einsum("a,b,c->abc", V1, D2, V3).ravel(),
                np.einsum("a,b,c->abc", V1, V2, D3).ravel(),
            ],
            axis=1,
        )
        grad = grad_p @ self.jacobian_inv
        if n_derivs == 1:
            return PatchEval(indices, values, grad, None)

        S1, S2, S3 = e1.d2, e2.d2, e3.d2
        m = len(values)
        hess_p = np.empty((m, 3, 3))
        hess_p[:, 0, 0] = np.einsum("a,b,c->abc", S1, V2, V3).ravel()
        hess_p[:, 1, 1] = np.einsum("a,b,c->abc", V1, S2, V3).ravel()
        hess_p[:, 2, 2] = np.einsum("a,b,c->abc", V1, V2, S3).ravel()
        hess_p[:, 0, 1] = hess_p[:, 1, 0] = np.einsum("a,b,c->abc", D1, D2, V3).ravel()
        hess_p[:, 0, 2] = hess_p[:, 2, 0] = np.einsum("a,b,c->abc", D1, V2, D3).ravel()
        hess_p[:, 1, 2] = hess_p[:, 2, 1] = np.einsum("a,b,c->abc", V1, D2, D3).ravel()
        Jinv = self.jacobian_inv
        hess = np.einsum("ji,mjk,kl->mil", Jinv, hess_p, Jinv)
        return PatchEval(indices, values, grad, hess)

    def locate_point(self, x, tol=1e-9):
        """Parametric coordinates of physical point ``x`` (exact inverse map)."""
        xi = self.jacobian_inv @ (np.asarray(x, dtype=float) - self.origin)
        if (xi < -tol).any() or (xi > 1.0 + tol).any():
            raise ValueError(f"point {x} lies outside the patch (xi={xi})")
        return np.clip(xi, 0.0, 1.0)

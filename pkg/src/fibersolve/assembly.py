"""Degree-of-freedom management and assembly of the coupled block system.

Unknown layout (one flat state vector): matrix displacements u, then per
fiber the centerline positions, force resultants, moment resultants,
quaternion coefficients and area-multiplier components (plus optional
endpoint multipliers).  Equations are arranged so the row index set matches
the column index set -- boundary conditions remove matching row/column
pairs and the remaining system stays square.

Row content:
  u rows     bulk balance: volume stress work plus all condensed line terms
             (force transfer, moment transfer, second-gradient contraction,
             area-multiplier shear) and endpoint brackets
  pos rows   centerline-position constraint tested with the order-p basis
  frc rows   force-constitutive residual tested with the order p-1 basis
  mom rows   moment-constitutive residual tested with the order p-1 basis
  rot rows   per coefficient: one quaternion-length row plus three
             torque-transfer constraint rows (or three standalone moment
             balance rows when the torque coupling is switched off)
  mun rows   area-constraint rows tested with the order p-2 basis, plus
             pointwise endpoint constraint rows when those are enabled

Endpoint loads are given in applied-load semantics: ``n_ext_*``/``m_ext_*``
are the external force/moment vectors acting on the respective end.
"""

import numpy as np
import scipy.sparse as sp

from .beam import beam_resultants, beam_strains, circular_section, quat_bilinear, quat_to_rotation
from .bspline import KnotVector, QuadratureRule, open_knot_vector, tabulate
from .coupling import (
    build_frame,
    condensed_stresses,
    constraint_densities,
    endpoint_moment_stress,
    frame_rate,
    symmetric_dyads,
)

__all__ = [
    "FiberSpec",
    "FiberDiscretization",
    "VolumeDiscretization",
    "Problem",
    "DofMap",
    "build_dof_map",
    "validate_order_ladder",
    "set_initial_state",
    "BlockSystem",
    "FiberBlocks",
    "assemble",
    "to_global_matrix",
    "apply_dirichlet",
    "average_piola",
    "matrix_energy",
    "beam_energy",
    "total_energy",
    "constraint_report",
    "default_directors",
]

_I3 = np.eye(3)
_EYE4 = np.eye(4)
_Z33 = np.zeros((3, 3))


def validate_order_ladder(orders):
    """Check the nested order ladder (p, p, p, p-1, p-1, p-2, p-2, p-2)."""
    orders = tuple(int(o) for o in orders)
    if len(orders) != 8:
        raise ValueError("order ladder needs 8 entries")
    p = orders[0]
    expected = (p, p, p, p - 1, p - 1, p - 2, p - 2, p - 2)
    if orders != expected or p < 2:
        raise ValueError(
            f"inconsistent-orders: ladder {orders} not supported; "
            f"required pattern is {expected} with p >= 2"
        )
    return p


def default_directors(axis):
    """Orthonormal director columns with the third column along ``axis``.

    The first director comes from the global axis least aligned with the
    fiber, orthonormalized; the second completes the right-handed triad.
    """
    D3 = np.asarray(axis, dtype=float)
    D3 = D3 / np.linalg.norm(D3)
    seed = np.eye(3)[np.argmin(np.abs(D3))]
    D1 = seed - (seed @ D3) * D3
    D1 /= np.linalg.norm(D1)
    D2 = np.cross(D3, D1)
    return np.column_stack([D1, D2, D3])


class FiberSpec:
    """Geometric and material description of one embedded fiber."""

    def __init__(
        self,
        start,
        end,
        radius,
        youngs,
        poisson,
        n_elements,
        m_ext_start=None,
        m_ext_end=None,
        n_ext_start=None,
        n_ext_end=None,
        line_force=None,
        line_moment=None,
        directors=None,
        clamp_start=False,
    ):
        self.start = np.asarray(start, dtype=float)
        self.end = np.asarray(end, dtype=float)
        self.radius = float(radius)
        self.youngs = float(youngs)
        self.poisson = float(poisson)
        self.n_elements = int(n_elements)

        def _vec(v):
            return np.zeros(3) if v is None else np.asarray(v, dtype=float)

        self.m_ext_start = _vec(m_ext_start)
        self.m_ext_end = _vec(m_ext_end)
        self.n_ext_start = _vec(n_ext_start)
        self.n_ext_end = _vec(n_ext_end)
        self.line_force = _vec(line_force)
        self.line_moment = _vec(line_moment)
        self.directors = directors
        self.clamp_start = bool(clamp_start)


class _PointEval:
    """Patch basis data at one centerline station, in footprint-local slots."""

    __slots__ = ("slots", "values", "grad", "hess")


class FiberDiscretization:
    """Knot vectors, quadrature, basis tables and patch traces of one fiber."""

    def __init__(self, spec, patch, degree, n_quad=None):
        self.spec = spec
        self.degree = int(degree)
        p = self.degree
        axis = spec.end - spec.start
        self.length = float(np.linalg.norm(axis))
        if self.length <= 0.0:
            raise ValueError("fiber has zero length")
        self.axis = axis / self.length
        if spec.directors is None:
            self.directors = default_directors(self.axis)
        else:
            self.directors = np.asarray(spec.directors, dtype=float)
        Dm = self.directors
        if not np.allclose(Dm.T @ Dm, _I3, atol=1e-10):
            raise ValueError("fiber directors must be orthonormal")
        if not np.allclose(Dm[:, 2], self.axis, atol=1e-10):
            raise ValueError("third director must point along the fiber")
        self.section = circular_section(spec.youngs, spec.poisson, spec.radius)

        self.kv_pos = KnotVector(open_knot_vector(p, spec.n_elements, (0.0, self.length)), p)
        self.kv_res = KnotVector(open_knot_vector(p - 1, spec.n_elements, (0.0, self.length)), p - 1)
        self.kv_mul = KnotVector(open_knot_vector(p - 2, spec.n_elements, (0.0, self.length)), p - 2)
        self.n_pos = self.kv_pos.n_basis
        self.n_res = self.kv_res.n_basis
        self.n_mul = self.kv_mul.n_basis

        rule = QuadratureRule.for_knots(self.kv_pos, n_quad)
        self.s = rule.points
        self.w = rule.weights
        self.n_qp = len(self.s)

        self.pos_first, self.pos_ders = tabulate(self.kv_pos, self.s, n_derivs=1)
        self.res_first, res_ders = tabulate(self.kv_res, self.s, n_derivs=0)
        self.res_vals = res_ders[:, 0, :]
        self.mul_first, mul_ders = tabulate(self.kv_mul, self.s, n_derivs=0)
        self.mul_vals = mul_ders[:, 0, :]

        ends = np.array([0.0, self.length])
        self.end_pos_first, self.end_pos_ders = tabulate(self.kv_pos, ends, n_derivs=1)

        # trace of the volumetric basis along the centerline
        raw = [patch.eval_patch(patch.locate_point(self.point(si))) for si in self.s]
        raw_ends = [patch.eval_patch(patch.locate_point(self.point(si))) for si in ends]
        cps = np.unique(np.concatenate([pe.indices for pe in raw + raw_ends]))
        self.footprint_cps = cps
        self.n_fp = len(cps)
        self.trace = [self._compact(pe, cps) for pe in raw]
        self.trace_ends = [self._compact(pe, cps) for pe in raw_ends]

        self.gram_pos = self._gram(self.pos_ders[:, 0, :], self.pos_first, p + 1, self.n_pos)
        self.gram_res = self._gram(self.res_vals, self.res_first, p, self.n_res)
        self.greville = self.kv_pos.greville

    @staticmethod
    def _compact(pe, cps):
        c = _PointEval()
        c.slots = np.searchsorted(cps, pe.indices)
        c.values = pe.values
        c.grad = pe.grad
        c.hess = pe.hess
        return c

    def _gram(self, vals, firsts, width, n):
        G = np.zeros((n, n))
        for i in range(self.n_qp):
            a = firsts[i]
            G[a : a + width, a : a + width] += self.w[i] * np.outer(vals[i], vals[i])
        return G

    def point(self, s):
        return self.spec.start + s * self.axis

    def initial_positions(self):
        return self.spec.start[None, :] + self.greville[:, None] * self.axis[None, :]


class VolumeDiscretization:
    """Per-direction tables and element iteration for the bulk patch."""

    def __init__(self, patch, n_quad=None):
        self.patch = patch
        self.rules = [QuadratureRule.for_knots(kv, n_quad) for kv in patch.bases]
        self.tables = [
            tabulate(kv, rule.points, n_derivs=1)
            for kv, rule in zip(patch.bases, self.rules)
        ]
        ne = patch.n_elements
        self.elements = [
            (ex, ey, ez)
            for ex in range(ne[0])
            for ey in range(ne[1])
            for ez in range(ne[2])
        ]
        n1, n2, n3 = patch.n_cp
        self._el_indices = {}
        for e in self.elements:
            firsts = [
                self.tables[d][0][self.rules[d].span_slice(e[d]).start] for d in range(3)
            ]
            p1, p2, p3 = patch.degrees
            i0 = np.arange(firsts[0], firsts[0] + p1 + 1)
            j0 = np.arange(firsts[1], firsts[1] + p2 + 1)
            k0 = np.arange(firsts[2], firsts[2] + p3 + 1)
            idx = ((i0[:, None, None] * n2 + j0[None, :, None]) * n3 + k0[None, None, :]).ravel()
            self._el_indices[e] = idx

    def element_data(self, e):
        """Indices, basis values, physical gradients and weights for element e."""
        patch = self.patch
        Vd, Dd, wd = [], [], []
        for d in range(3):
            sl = self.rules[d].span_slice(e[d])
            ders = self.tables[d][1][sl]
            Vd.append(ders[:, 0, :].T)
            Dd.append(ders[:, 1, :].T)
            wd.append(self.rules[d].weights[sl])
        V = np.einsum("aq,br,cs->abcqrs", Vd[0], Vd[1], Vd[2])
        Gp = np.stack(
            [
                np.einsum("aq,br,cs->abcqrs", Dd[0], Vd[1], Vd[2]),
                np.einsum("aq,br,cs->abcqrs", Vd[0], Dd[1], Vd[2]),
                np.einsum("aq,br,cs->abcqrs", Vd[0], Vd[1], Dd[2]),
            ],
            axis=-1,
        )
        m = V.shape[0] * V.shape[1] * V.shape[2]
        nq = V.shape[3] * V.shape[4] * V.shape[5]
        V = V.reshape(m, nq)
        G = Gp.reshape(m, nq, 3) @ patch.jacobian_inv
        w = np.einsum("q,r,s->qrs", wd[0], wd[1], wd[2]).ravel() * patch.jacobian_det
        return self._el_indices[e], V, G, w


class Problem:
    """Fully discretized coupled problem: geometry, materials and switches."""

    def __init__(
        self,
        patch,
        material,
        fibers,
        couple_tau=True,
        couple_area=True,
        endpoint_constraints=False,
        unity_mode="weak",
        dirichlet_dofs=None,
        dirichlet_values=None,
        volume_quad=None,
    ):
        self.patch = patch
        self.material = material
        self.fibers = list(fibers)
        self.couple_tau = bool(couple_tau)
        self.couple_area = bool(couple_area)
        self.endpoint_constraints = bool(endpoint_constraints)
        if self.endpoint_constraints and not (self.couple_tau and self.couple_area):
            raise ValueError("endpoint constraints require both coupling channels")
        if unity_mode not in ("weak", "direct"):
            raise ValueError("unity_mode must be 'weak' or 'direct'")
        self.unity_mode = unity_mode
        self.volume = VolumeDiscretization(patch, volume_quad)
        self.dirichlet_dofs = (
            np.zeros(0, dtype=int)
            if dirichlet_dofs is None
            else np.asarray(dirichlet_dofs, dtype=int)
        )
        self.dirichlet_values = (
            np.zeros(0)
            if dirichlet_values is None
            else np.asarray(dirichlet_values, dtype=float)
        )


class FiberLayout:
    """Global dof slices of one fiber's unknown blocks."""

    __slots__ = ("pos", "frc", "mom", "rot", "mun", "n_pos", "n_res", "n_mul", "n_ep")


class DofMap:
    """Block offsets, sizes and the constrained index set.

    ``scalable`` marks the prescribed values that represent boundary data
    (and therefore ramp with the load factor); structural constraints such
    as clamped quaternions or multiplier pins keep their values.
    """

    def __init__(self, n_matrix_dofs, fibers, constrained, prescribed, total, scalable=None):
        self.n_u = n_matrix_dofs
        self.u = slice(0, n_matrix_dofs)
        self.fibers = fibers
        self.total = total
        constrained = np.asarray(constrained, dtype=int)
        prescribed = np.asarray(prescribed, dtype=float)
        if scalable is None:
            scalable = np.zeros(len(constrained), dtype=bool)
        scalable = np.asarray(scalable, dtype=bool)
        order = np.argsort(constrained)
        self.constrained = constrained[order]
        self.prescribed = prescribed[order]
        self.scalable = scalable[order]
        if len(np.unique(self.constrained)) != len(self.constrained):
            raise ValueError("duplicate constrained dof")
        if len(self.constrained) and (
            self.constrained[0] < 0 or self.constrained[-1] >= total
        ):
            raise ValueError("constrained dof out of range")
        mask = np.ones(total, dtype=bool)
        mask[self.constrained] = False
        self.free = np.nonzero(mask)[0]

    def block_dims(self):
        """Dimensions of the six equation groups (for the scaled norm)."""
        dims = [self.n_u]
        for name in ("pos", "frc", "mom", "rot", "mun"):
            dims.append(
                sum(getattr(f, name).stop - getattr(f, name).start for f in self.fibers)
            )
        return dims


def build_dof_map(problem):
    """Lay out all unknown blocks and collect constrained dofs."""
    n_u = 3 * problem.patch.n_control_points
    offset = n_u
    layouts = []
    extra_con = []
    extra_val = []
    extra_scal = []
    for fib in problem.fibers:
        lay = FiberLayout()
        lay.n_pos, lay.n_res, lay.n_mul = fib.n_pos, fib.n_res, fib.n_mul
        lay.n_ep = 12 if problem.endpoint_constraints else 0
        lay.pos = slice(offset, offset + 3 * lay.n_pos)
        lay.frc = slice(lay.pos.stop, lay.pos.stop + 3 * lay.n_res)
        lay.mom = slice(lay.frc.stop, lay.frc.stop + 3 * lay.n_res)
        lay.rot = slice(lay.mom.stop, lay.mom.stop + 4 * lay.n_pos)
        n_mun = (3 * lay.n_mul + lay.n_ep) if problem.couple_area else 0
        lay.mun = slice(lay.rot.stop, lay.rot.stop + n_mun)
        offset = lay.mun.stop
        layouts.append(lay)

        def pin(dofs, values, scalable=False):
            extra_con.extend(dofs)
            extra_val.extend(values)
            extra_scal.extend([scalable] * len(values))

        if problem.couple_area:
            # first area-multiplier coefficient pinned to zero
            pin(range(lay.mun.start, lay.mun.start + 3), [0.0, 0.0, 0.0])
        # Eliminating a balance row hands it to the matrix equations and
        # identifies the end values of the matching resultant field with
        # the applied end loads, so those coefficients are prescribed
        # (open knots interpolate the ends).  The force balance is always
        # eliminated; the moment balance only when the rotation coupling
        # is on — with it off, the standalone balance rows impose the end
        # moments weakly and the end coefficients must stay free.  A
        # clamped start keeps its resultants free either way: reactions.
        spec = fib.spec
        last = 3 * (lay.n_res - 1)
        pin(range(lay.frc.start + last, lay.frc.start + last + 3),
            spec.n_ext_end.tolist(), scalable=True)
        if problem.couple_tau:
            pin(range(lay.mom.start + last, lay.mom.start + last + 3),
                spec.m_ext_end.tolist(), scalable=True)
        if spec.clamp_start:
            pin(range(lay.pos.start, lay.pos.start + 3), spec.start.tolist())
            pin(range(lay.rot.start, lay.rot.start + 4), [1.0, 0.0, 0.0, 0.0])
            if problem.endpoint_constraints:
                # a clamped root already enforces the pointwise coupling
                # there, so its endpoint multipliers are pure gauge
                ep0 = lay.mun.start + 3 * lay.n_mul
                pin(range(ep0, ep0 + 6), [0.0] * 6)
        else:
            pin(range(lay.frc.start, lay.frc.start + 3),
                spec.n_ext_start.tolist(), scalable=True)
            if problem.couple_tau:
                pin(range(lay.mom.start, lay.mom.start + 3),
                    spec.m_ext_start.tolist(), scalable=True)

    con = np.concatenate([problem.dirichlet_dofs, np.asarray(extra_con, dtype=int)])
    val = np.concatenate([problem.dirichlet_values, np.asarray(extra_val, dtype=float)])
    scal = np.concatenate(
        [
            np.ones(len(problem.dirichlet_dofs), dtype=bool),
            np.asarray(extra_scal, dtype=bool),
        ]
    )
    return DofMap(n_u, layouts, con, val, offset, scal)


def set_initial_state(problem, dofmap):
    """Reference state: zero displacement, straight lines, unit quaternions."""
    x = np.zeros(dofmap.total)
    for fib, lay in zip(problem.fibers, dofmap.fibers):
        x[lay.pos] = fib.initial_positions().ravel()
        q = np.zeros((lay.n_pos, 4))
        q[:, 0] = 1.0
        x[lay.rot] = q.ravel()
    x[dofmap.constrained] = dofmap.prescribed
    return x


class FiberBlocks:
    """Dense tangent blocks of one fiber.

    Rows/columns are fiber-local; the ``u`` rows/columns are restricted to
    the fiber's matrix footprint and ``fp_dofs`` maps them to global dofs.
    """

    def __init__(self, lay, fib, couple_area):
        self.lay = lay
        self.fp_dofs = (3 * fib.footprint_cps[:, None] + np.arange(3)[None, :]).ravel()
        nfp = 3 * fib.n_fp
        np3, nr3, nq4 = 3 * lay.n_pos, 3 * lay.n_res, 4 * lay.n_pos
        nmu = (3 * lay.n_mul + lay.n_ep) if couple_area else 0
        self.n_mu = nmu
        self.A_u_pos = np.zeros((nfp, np3))
        self.A_u_frc = np.zeros((nfp, nr3))
        self.A_u_mom = np.zeros((nfp, nr3))
        self.A_u_rot = np.zeros((nfp, nq4))
        self.A_u_mun = np.zeros((nfp, nmu))
        self.A_pos_u = np.zeros((np3, nfp))
        self.M_pos_pos = np.zeros((np3, np3))
        self.A_frc_pos = np.zeros((nr3, np3))
        self.A_frc_rot = np.zeros((nr3, nq4))
        self.M_frc_frc = np.zeros((nr3, nr3))
        self.A_mom_rot = np.zeros((nr3, nq4))
        self.M_mom_mom = np.zeros((nr3, nr3))
        self.A_rot_u = np.zeros((nq4, nfp))
        self.A_rot_rot = np.zeros((nq4, nq4))
        self.A_rot_pos = np.zeros((nq4, np3))
        self.A_rot_frc = np.zeros((nq4, nr3))
        self.A_rot_mom = np.zeros((nq4, nr3))
        self.A_rot_mun = np.zeros((nq4, nmu))
        self.A_mun_u = np.zeros((nmu, nfp))
        self.A_mun_rot = np.zeros((nmu, nq4))


class BlockSystem:
    """Residual vector plus tangent blocks in the fiber-block layout."""

    def __init__(self, R, K_uu, fiber_blocks, dofmap):
        self.R = R
        self.K_uu = K_uu
        self.fiber_blocks = fiber_blocks
        self.dofmap = dofmap


def assemble(problem, dofmap, x, want_tangent=True):
    """Assemble the residual and (optionally) all tangent blocks at state x."""
    R = np.zeros(dofmap.total)
    u = x[dofmap.u].reshape(-1, 3)

    K_uu = _assemble_volume(problem, u, R, want_tangent)

    fiber_blocks = []
    stash = _TripletStash(dofmap.n_u) if want_tangent else None
    for fib, lay in zip(problem.fibers, dofmap.fibers):
        fa = _FiberAssembler(problem, fib, lay, x, u, want_tangent)
        fa.run()
        fa.scatter(R)
        fiber_blocks.append(fa.blocks)
        if want_tangent:
            stash.add_dense(fa.fp_dofs, fa.K_uu_fp)
    if want_tangent and stash.has_entries():
        K_uu = K_uu + stash.to_csr()

    return BlockSystem(R, K_uu, fiber_blocks, dofmap)


class _TripletStash:
    """Accumulates footprint-dense contributions to the u-u block."""

    def __init__(self, n):
        self.n = n
        self.rows = []
        self.cols = []
        self.vals = []

    def add_dense(self, dofs, block):
        if block is None or not np.any(block):
            return
        m = len(dofs)
        self.rows.append(np.repeat(dofs, m))
        self.cols.append(np.tile(dofs, m))
        self.vals.append(block.ravel())

    def has_entries(self):
        return bool(self.vals)

    def to_csr(self):
        return sp.coo_matrix(
            (
                np.concatenate(self.vals),
                (np.concatenate(self.rows), np.concatenate(self.cols)),
            ),
            shape=(self.n, self.n),
        ).tocsr()


def _assemble_volume(problem, u, R, want_tangent):
    vol = problem.volume
    n_u = 3 * problem.patch.n_control_points
    K = sp.csr_matrix((n_u, n_u)) if want_tangent else None
    rows_b, cols_b, vals_b = [], [], []
    budget = 0
    for e in vol.elements:
        idx, V, G, w = vol.element_data(e)
        u_e = u[idx]
        F = _I3 + np.einsum("mi,mqj->qij", u_e, G)
        P = problem.material.first_pk(F)
        r_e = np.einsum("q,qij,mqj->mi", w, P, G)
        dofs = (3 * idx[:, None] + np.arange(3)[None, :]).ravel()
        np.add.at(R, dofs, r_e.ravel())
        if not want_tangent:
            continue
        A4 = problem.material.material_tangent(F)
        A4 *= w[:, None, None, None, None]
        Gq = np.ascontiguousarray(G.transpose(1, 0, 2))
        T = np.einsum("qaJ,qiJkL->qaikL", Gq, A4)
        nq, m = Gq.shape[0], Gq.shape[1]
        Kq = T.reshape(nq, m * 9, 3) @ Gq.transpose(0, 2, 1)
        K_e = Kq.sum(axis=0).reshape(m, 3, 3, m).transpose(0, 1, 3, 2)
        m3 = 3 * len(idx)
        rows_b.append(np.repeat(dofs, m3))
        cols_b.append(np.tile(dofs, m3))
        vals_b.append(K_e.reshape(m3, m3).ravel())
        budget += m3 * m3
        if budget > 12_000_000:
            K = K + sp.coo_matrix(
                (
                    np.concatenate(vals_b),
                    (np.concatenate(rows_b), np.concatenate(cols_b)),
                ),
                shape=(n_u, n_u),
            ).tocsr()
            rows_b, cols_b, vals_b = [], [], []
            budget = 0
    if want_tangent and vals_b:
        K = K + sp.coo_matrix(
            (np.concatenate(vals_b), (np.concatenate(rows_b), np.concatenate(cols_b))),
            shape=(n_u, n_u),
        ).tocsr()
    return K


def _slot3(srow):
    return np.arange(3 * srow, 3 * srow + 3)


def _pair_p1(a, b):
    """First transfer tensor with its two director slots split.

    ``_pair_p1(d, d)`` recovers the tensor itself, so sums of split calls
    give exact product-rule derivatives of any order.
    """
    return np.outer(a[:, 1], b[:, 2]) - 2.0 * np.outer(a[:, 2], b[:, 1])


def _pair_p2(a, b):
    """Second transfer tensor with its two director slots split."""
    return -np.outer(a[:, 0], b[:, 2]) + 2.0 * np.outer(a[:, 2], b[:, 0])


class _FiberAssembler:
    """Assembles one fiber's residual rows and tangent blocks."""

    def __init__(self, problem, fib, lay, x, u, want_tangent):
        self.problem = problem
        self.fib = fib
        self.lay = lay
        self.u = u
        self.want_tangent = want_tangent
        self.tau_on = problem.couple_tau
        self.area_on = problem.couple_area
        self.ep_on = problem.endpoint_constraints
        self.spec = fib.spec
        self.D = fib.directors
        self.B = symmetric_dyads(self.D)
        self.circ = fib.section.circumference
        self.K1 = fib.section.force_stiffness
        self.K2 = fib.section.moment_stiffness

        self.pos = x[lay.pos].reshape(-1, 3)
        self.quat = x[lay.rot].reshape(-1, 4)
        self.frc = x[lay.frc].reshape(-1, 3)
        self.mom = x[lay.mom].reshape(-1, 3)
        if self.area_on:
            mun_all = x[lay.mun]
            self.mun = mun_all[: 3 * lay.n_mul].reshape(-1, 3)
            self.ep_vals = mun_all[3 * lay.n_mul :]
        else:
            self.mun = None
            self.ep_vals = np.zeros(0)

        self.r_u = np.zeros((fib.n_fp, 3))
        self.r_pos = np.zeros((lay.n_pos, 3))
        self.r_frc = np.zeros((lay.n_res, 3))
        self.r_mom = np.zeros((lay.n_res, 3))
        self.r_rot = np.zeros((lay.n_pos, 4))
        self.r_mun = np.zeros(3 * lay.n_mul + lay.n_ep) if self.area_on else None

        self.fp_dofs = (3 * fib.footprint_cps[:, None] + np.arange(3)[None, :]).ravel()
        self.blocks = None
        self.K_uu_fp = None
        if want_tangent:
            self.blocks = FiberBlocks(lay, fib, self.area_on)
            self.K_uu_fp = np.zeros((3 * fib.n_fp, 3 * fib.n_fp))
            self.blocks.M_pos_pos[:] = -self.circ * np.kron(fib.gram_pos, _I3)
            self.blocks.M_frc_frc[:] = -np.kron(fib.gram_res, _I3)
            self.blocks.M_mom_mom[:] = self.blocks.M_frc_frc

    # ---- helpers ---------------------------------------------------------

    def _deformation(self, te):
        u_loc = self.u[self.fib.footprint_cps[te.slots]]
        F_c = _I3 + np.einsum("mi,mj->ij", u_loc, te.grad)
        return u_loc, F_c

    def _rotation_bases(self, q, dq):
        Rdot = [2.0 * quat_bilinear(q, _EYE4[l]) for l in range(4)]
        Sdot = [2.0 * quat_bilinear(dq, _EYE4[l]) for l in range(4)]
        return Rdot, Sdot

    # ---- driver ----------------------------------------------------------

    def run(self):
        for iq in range(self.fib.n_qp):
            self._quad_point(iq)
        if self.problem.unity_mode == "direct":
            self.r_rot[:, 0] = np.einsum("Al,Al->A", self.quat, self.quat) - 1.0
            if self.want_tangent:
                for A in range(self.lay.n_pos):
                    self.blocks.A_rot_rot[4 * A, 4 * A : 4 * A + 4] = 2.0 * self.quat[A]
        self._endpoints()

    # ---- one interior quadrature point ------------------------------------

    def _quad_point(self, iq):
        fib = self.fib
        wq = fib.w[iq]
        pf = fib.pos_first[iq]
        N = fib.pos_ders[iq, 0]
        dN = fib.pos_ders[iq, 1]
        psl = slice(pf, pf + fib.degree + 1)
        rf = fib.res_first[iq]
        M = fib.res_vals[iq]
        rsl = slice(rf, rf + fib.degree)

        q = N @ self.quat[psl]
        dq = dN @ self.quat[psl]
        phi_t = N @ self.pos[psl]
        dphi = dN @ self.pos[psl]
        n_pt = M @ self.frc[rsl]
        m_pt = M @ self.mom[rsl]
        Rm = quat_to_rotation(q)
        dRm = 2.0 * quat_bilinear(q, dq)
        frame = build_frame(Rm, dRm, self.D, self.circ)

        te = fib.trace[iq]
        Vv, Gv, Hv, slots = te.values, te.grad, te.hess, te.slots
        u_loc, F_c = self._deformation(te)
        phi_c = Vv @ (self.problem.patch.control_points[fib.footprint_cps[slots]] + u_loc)

        if self.area_on:
            mf = fib.mul_first[iq]
            Tm = fib.mul_vals[iq]
            msl = slice(mf, mf + fib.degree - 1)
            nu = Tm @ self.mun[msl]
        else:
            mf, Tm, msl = 0, None, None
            nu = np.zeros(3)

        stresses = condensed_stresses(
            frame, n_pt, m_pt, dphi, self.spec.line_moment, F_c, nu
        )
        gap, g_tau, g_n = constraint_densities(frame, phi_c, phi_t, F_c)

        # ---- u rows -------------------------------------------------------
        P_line = stresses.P_n.copy()
        if self.tau_on:
            P_line += stresses.P_m
        if self.area_on:
            P_line += stresses.P_shear
        self.r_u[slots] += wq * (Gv @ P_line.T)
        if self.tau_on:
            self.r_u[slots] += wq * np.einsum("iJK,mJK->mi", stresses.PP, Hv)
        if np.any(self.spec.line_force):
            self.r_u[slots] -= wq * np.outer(Vv, self.spec.line_force)

        # ---- pos rows -------------------------------------------------------
        self.r_pos[psl] += self.circ * wq * np.outer(N, gap)

        # ---- frc / mom rows --------------------------------------------------
        gamma, curv = beam_strains(Rm, dphi, dRm, self.D[:, 2])
        n_con, m_con = beam_resultants(gamma, curv, fib.section, Rm)
        self.r_frc[rsl] += wq * np.outer(M, n_con - n_pt)
        self.r_mom[rsl] += wq * np.outer(M, m_con - m_pt)

        # ---- rot rows -------------------------------------------------------
        if self.problem.unity_mode == "weak":
            self.r_rot[psl, 0] += wq * N * (q @ q - 1.0)
        if self.tau_on:
            self.r_rot[psl, 1:] += self.circ * wq * np.outer(N, g_tau)
        else:
            v_mom = np.cross(dphi, n_pt) + self.spec.line_moment
            self.r_rot[psl, 1:] += wq * (np.outer(N, v_mom) - np.outer(dN, m_pt))

        # ---- mun rows -------------------------------------------------------
        if self.area_on:
            self.r_mun[3 * mf : 3 * mf + 3 * (fib.degree - 1)] += (
                self.circ * wq * np.outer(Tm, g_n)
            ).ravel()

        if self.want_tangent:
            self._quad_point_tangent(
                wq, N, dN, M, psl, rsl, msl, Tm, q, dq, dphi, n_pt, m_pt, nu,
                frame, Rm, dRm, F_c, Vv, Gv, Hv, slots, gamma, curv,
            )

    # ---- tangent at one interior quadrature point --------------------------

    def _quad_point_tangent(
        self, wq, N, dN, M, psl, rsl, msl, Tm, q, dq, dphi, n_pt, m_pt, nu,
        frame, Rm, dRm, F_c, Vv, Gv, Hv, slots, gamma, curv,
    ):
        fib = self.fib
        b = self.blocks
        D1, D2, D3 = self.D[:, 0], self.D[:, 1], self.D[:, 2]
        sl3 = (3 * slots[:, None] + np.arange(3)[None, :]).ravel()
        pos_cols = (3 * np.arange(psl.start, psl.stop)[:, None] + np.arange(3)).ravel()
        res_cols = (3 * np.arange(rsl.start, rsl.stop)[:, None] + np.arange(3)).ravel()
        rot_cols = (4 * np.arange(psl.start, psl.stop)[:, None] + np.arange(4)).ravel()
        tau_rows = (4 * np.arange(psl.start, psl.stop)[:, None] + np.arange(1, 4)).ravel()
        n_bp = len(N)
        n_br = len(M)

        GD1 = Gv @ D1
        GD2 = Gv @ D2
        GD3 = Gv @ D3
        HD1 = np.einsum("mjk,j,k->m", Hv, D1, D3)
        HD2 = np.einsum("mjk,j,k->m", Hv, D2, D3)
        v_mom = np.cross(dphi, n_pt) + self.spec.line_moment

        Rdot, Sdot = self._rotation_bases(q, dq)
        FR1 = [frame_rate(frame, Rdot[l], Sdot[l]) for l in range(4)]
        FR2 = [frame_rate(frame, _Z33, Rdot[l]) for l in range(4)]

        # ---- u rows -------------------------------------------------------
        # force transfer: d/d frc (delta_ij structured)
        blk = wq * np.outer(GD3, M)
        for i in range(3):
            b.A_u_frc[np.ix_(sl3[i::3], res_cols[i::3])] += blk

        if self.tau_on:
            # moment transfer + second gradient: d/d mom
            for j in range(3):
                col = 0.5 * (
                    np.outer(GD1, frame.P1_rate[:, j])
                    + np.outer(GD2, frame.P2_rate[:, j])
                    + np.outer(HD1, frame.P1[:, j])
                    + np.outer(HD2, frame.P2[:, j])
                )
                b.A_u_mom[np.ix_(sl3, res_cols[j::3])] += (
                    wq * np.einsum("mi,B->miB", col, M)
                ).reshape(len(sl3), n_br)
            # moment transfer: d/d frc through dphi x frc
            for j in range(3):
                vec = np.cross(dphi, _I3[j])
                col = -0.5 * (np.outer(GD1, frame.P1 @ vec) + np.outer(GD2, frame.P2 @ vec))
                b.A_u_frc[np.ix_(sl3, res_cols[j::3])] += (
                    wq * np.einsum("mi,B->miB", col, M)
                ).reshape(len(sl3), n_br)
            # moment transfer: d/d pos through dphi
            for j in range(3):
                vec = np.cross(_I3[j], n_pt)
                col = -0.5 * (np.outer(GD1, frame.P1 @ vec) + np.outer(GD2, frame.P2 @ vec))
                b.A_u_pos[np.ix_(sl3, pos_cols[j::3])] += (
                    wq * np.einsum("mi,A->miA", col, dN)
                ).reshape(len(sl3), n_bp)
            # moment transfer + second gradient: d/d quat
            for l in range(4):
                y1 = 0.5 * (
                    np.outer(GD1, FR1[l].P1_rate @ m_pt - FR1[l].P1 @ v_mom)
                    + np.outer(GD2, FR1[l].P2_rate @ m_pt - FR1[l].P2 @ v_mom)
                    + np.outer(HD1, FR1[l].P1 @ m_pt)
                    + np.outer(HD2, FR1[l].P2 @ m_pt)
                )
                y2 = 0.5 * (
                    np.outer(GD1, FR2[l].P1_rate @ m_pt)
                    + np.outer(GD2, FR2[l].P2_rate @ m_pt)
                )
                b.A_u_rot[np.ix_(sl3, rot_cols[l::4])] += (
                    wq * (np.einsum("mi,A->miA", y1, N) + np.einsum("mi,A->miA", y2, dN))
                ).reshape(len(sl3), n_bp)

        if self.area_on:
            # shear stress: d/d mun
            for k in range(3):
                col = 0.5 * self.circ * (Gv @ (F_c @ self.B[k]).T)
                mun_cols = 3 * np.arange(msl.start, msl.stop) + k
                b.A_u_mun[np.ix_(sl3, mun_cols)] += (
                    wq * np.einsum("mi,C->miC", col, Tm)
                ).reshape(len(sl3), fib.degree - 1)
            # shear stress: d/d u (delta_ik structured)
            Mnu = nu[0] * self.B[0] + nu[1] * self.B[1] + nu[2] * self.B[2]
            S = 0.5 * self.circ * wq * (Gv @ Mnu @ Gv.T)
            for i in range(3):
                self.K_uu_fp[np.ix_(sl3[i::3], sl3[i::3])] += S

        # ---- pos rows -------------------------------------------------------
        blk = self.circ * wq * np.outer(N, Vv)
        for i in range(3):
            b.A_pos_u[np.ix_(pos_cols[i::3], sl3[i::3])] += blk

        # ---- frc rows -------------------------------------------------------
        RK1R = Rm @ self.K1 @ Rm.T
        b.A_frc_pos[np.ix_(res_cols, pos_cols)] += (
            wq * np.einsum("B,ik,A->BiAk", M, RK1R, dN)
        ).reshape(len(res_cols), len(pos_cols))
        for l in range(4):
            dvec = Rdot[l] @ (self.K1 @ gamma) + Rm @ (self.K1 @ (Rdot[l].T @ dphi))
            b.A_frc_rot[np.ix_(res_cols, rot_cols[l::4])] += (
                wq * np.einsum("B,i,A->BiA", M, dvec, N)
            ).reshape(len(res_cols), n_bp)

        # ---- mom rows -------------------------------------------------------
        for l in range(4):
            W1 = Rdot[l].T @ dRm + Rm.T @ Sdot[l]
            W2 = Rm.T @ Rdot[l]
            ax1 = 0.5 * np.array(
                [W1[2, 1] - W1[1, 2], W1[0, 2] - W1[2, 0], W1[1, 0] - W1[0, 1]]
            )
            ax2 = 0.5 * np.array(
                [W2[2, 1] - W2[1, 2], W2[0, 2] - W2[2, 0], W2[1, 0] - W2[0, 1]]
            )
            v1 = Rdot[l] @ (self.K2 @ curv) + Rm @ (self.K2 @ ax1)
            v2 = Rm @ (self.K2 @ ax2)
            b.A_mom_rot[np.ix_(res_cols, rot_cols[l::4])] += (
                wq * (np.einsum("B,i,A->BiA", M, v1, N) + np.einsum("B,i,A->BiA", M, v2, dN))
            ).reshape(len(res_cols), n_bp)

        # ---- rot rows -------------------------------------------------------
        if self.problem.unity_mode == "weak":
            coef = 2.0 * wq * np.outer(N, N)
            for l in range(4):
                b.A_rot_rot[np.ix_(rot_cols[0::4], rot_cols[l::4])] += coef * q[l]
        if self.tau_on:
            d_cur = frame.current_directors
            w1 = F_c @ D1 - d_cur[:, 0]
            w2 = F_c @ D2 - d_cur[:, 1]
            # d/d u
            for a_loc, srow in enumerate(slots):
                Su = 0.5 * (GD1[a_loc] * frame.P1.T + GD2[a_loc] * frame.P2.T)
                b.A_rot_u[np.ix_(tau_rows, _slot3(srow))] += (
                    self.circ * wq * np.einsum("A,jk->Ajk", N, Su)
                ).reshape(3 * n_bp, 3)
            # d/d quat
            for l in range(4):
                dd = FR1[l].current_directors
                g1 = 0.5 * (
                    FR1[l].P1.T @ w1
                    + FR1[l].P2.T @ w2
                    - frame.P1.T @ dd[:, 0]
                    - frame.P2.T @ dd[:, 1]
                )
                b.A_rot_rot[np.ix_(tau_rows, rot_cols[l::4])] += (
                    self.circ * wq * np.einsum("A,j,B->AjB", N, g1, N)
                ).reshape(3 * n_bp, n_bp)
        else:
            # standalone moment balance rows
            for j in range(3):
                vecp = np.cross(_I3[j], n_pt)
                b.A_rot_pos[np.ix_(tau_rows, pos_cols[j::3])] += (
                    wq * np.einsum("A,i,B->AiB", N, vecp, dN)
                ).reshape(3 * n_bp, n_bp)
                vecf = np.cross(dphi, _I3[j])
                b.A_rot_frc[np.ix_(tau_rows, res_cols[j::3])] += (
                    wq * np.einsum("A,i,B->AiB", N, vecf, M)
                ).reshape(3 * n_bp, n_br)
            blk = -wq * np.outer(dN, M)
            rows = 4 * np.arange(psl.start, psl.stop)[:, None] + np.arange(1, 4)
            for j in range(3):
                b.A_rot_mom[np.ix_(rows[:, j], res_cols[j::3])] += blk

        # ---- mun rows -------------------------------------------------------
        if self.area_on:
            mun_rows = (3 * np.arange(msl.start, msl.stop)[:, None] + np.arange(3)).ravel()
            FB = np.stack([F_c @ self.B[k] for k in range(3)])  # (k, i, J)
            b.A_mun_u[np.ix_(mun_rows, sl3)] += (
                self.circ * wq * np.einsum("C,kiJ,mJ->Ckmi", Tm, FB, Gv)
            ).reshape(len(mun_rows), len(sl3))

    # ---- endpoint terms ----------------------------------------------------

    def _endpoints(self):
        fib = self.fib
        spec = self.spec
        m_apps = (spec.m_ext_start, spec.m_ext_end)
        n_apps = (spec.n_ext_start, spec.n_ext_end)
        for ie in (0, 1):
            pf = fib.end_pos_first[ie]
            psl = slice(pf, pf + fib.degree + 1)
            N = fib.end_pos_ders[ie, 0]
            dN = fib.end_pos_ders[ie, 1]
            q = N @ self.quat[psl]
            dq = dN @ self.quat[psl]
            Rm = quat_to_rotation(q)
            dRm = 2.0 * quat_bilinear(q, dq)
            frame = build_frame(Rm, dRm, self.D, self.circ)
            te = fib.trace_ends[ie]
            Vv, Gv, slots = te.values, te.grad, te.slots

            # applied endpoint loads; the boundary terms are differences
            # between the two ends, so the start contributes with the
            # opposite sign
            sgn = 1.0 if ie == 1 else -1.0
            if np.any(n_apps[ie]):
                self.r_u[slots] -= sgn * np.outer(Vv, n_apps[ie])
            if self.tau_on:
                if np.any(m_apps[ie]):
                    EPS = endpoint_moment_stress(frame, m_apps[ie])
                    self.r_u[slots] -= sgn * (Gv @ EPS.T)
                    if self.want_tangent:
                        sl3 = (3 * slots[:, None] + np.arange(3)[None, :]).ravel()
                        rot_cols = (
                            4 * np.arange(psl.start, psl.stop)[:, None] + np.arange(4)
                        ).ravel()
                        GD1 = Gv @ self.D[:, 0]
                        GD2 = Gv @ self.D[:, 1]
                        Rdot, Sdot = self._rotation_bases(q, dq)
                        for l in range(4):
                            fr1 = frame_rate(frame, Rdot[l], Sdot[l])
                            y1 = -0.5 * sgn * (
                                np.outer(GD1, fr1.P1 @ m_apps[ie])
                                + np.outer(GD2, fr1.P2 @ m_apps[ie])
                            )
                            self.blocks.A_u_rot[np.ix_(sl3, rot_cols[l::4])] += np.einsum(
                                "mi,A->miA", y1, N
                            ).reshape(len(sl3), len(N))
            else:
                # endpoint moments drive the standalone balance rows
                if np.any(m_apps[ie]):
                    self.r_rot[psl, 1:] += sgn * np.outer(N, m_apps[ie])

            if self.ep_on:
                self._endpoint_constraints(ie, te, psl, N, q, dq, frame)

    def _endpoint_constraints(self, ie, te, psl, N, q, dq, frame):
        """Pointwise constraint rows at one end plus their multiplier forces."""
        fib = self.fib
        lay = self.lay
        b = self.blocks
        Vv, Gv, slots = te.values, te.grad, te.slots
        D1, D2 = self.D[:, 0], self.D[:, 1]
        area_w = fib.section.area
        u_loc, F_c = self._deformation(te)
        d_cur = frame.current_directors
        mu_tau_e = self.ep_vals[6 * ie : 6 * ie + 3]
        nu_e = self.ep_vals[6 * ie + 3 : 6 * ie + 6]
        ep_row0 = 3 * lay.n_mul + 6 * ie
        sl3 = (3 * slots[:, None] + np.arange(3)[None, :]).ravel()
        GD1 = Gv @ D1
        GD2 = Gv @ D2

        w1 = F_c @ D1 - d_cur[:, 0]
        w2 = F_c @ D2 - d_cur[:, 1]
        g_tau = 0.5 * (frame.P1.T @ w1 + frame.P2.T @ w2)
        Cdev = F_c.T @ F_c - _I3
        g_n = 0.5 * np.array([np.sum(Cdev * Bk) for Bk in self.B])
        self.r_mun[ep_row0 : ep_row0 + 3] += area_w * g_tau
        self.r_mun[ep_row0 + 3 : ep_row0 + 6] += area_w * g_n

        # multiplier forces on the matrix rows (constraint-energy gradient)
        Mnu_e = nu_e[0] * self.B[0] + nu_e[1] * self.B[1] + nu_e[2] * self.B[2]
        self.r_u[slots] += area_w * (
            0.5 * (np.outer(GD1, frame.P1 @ mu_tau_e) + np.outer(GD2, frame.P2 @ mu_tau_e))
            + Gv @ (F_c @ Mnu_e).T
        )

        # the torque gap moves with the end directors too, so its multiplier
        # also reacts on the quaternion coefficients; the scalar component
        # stays clear of the reserved unity row
        Rdot, Sdot = self._rotation_bases(q, dq)
        FR1 = [frame_rate(frame, Rdot[l], Sdot[l]) for l in range(4)]
        g1 = []
        for l in range(4):
            ddl = FR1[l].current_directors
            g1.append(
                0.5 * area_w * (
                    FR1[l].P1.T @ w1 + FR1[l].P2.T @ w2
                    - frame.P1.T @ ddl[:, 0] - frame.P2.T @ ddl[:, 1]
                )
            )
        react = np.array([g1[l] @ mu_tau_e for l in range(1, 4)])
        self.r_rot[psl, 1:] += np.outer(N, react)

        if not self.want_tangent:
            return
        rot_cols = (4 * np.arange(psl.start, psl.stop)[:, None] + np.arange(4)).ravel()
        n_mu = b.n_mu
        ep_cols_tau = n_mu - lay.n_ep + 6 * ie + np.arange(3)
        ep_cols_nu = ep_cols_tau + 3

        # u rows: d/d mu_tau_e, d/d nu_e, d/d u, d/d quat
        for j in range(3):
            col = 0.5 * area_w * (np.outer(GD1, frame.P1[:, j]) + np.outer(GD2, frame.P2[:, j]))
            b.A_u_mun[sl3, ep_cols_tau[j]] += col.ravel()
        for k in range(3):
            col = area_w * (Gv @ (F_c @ self.B[k]).T)
            b.A_u_mun[sl3, ep_cols_nu[k]] += col.ravel()
        S = area_w * (Gv @ Mnu_e @ Gv.T)
        for i in range(3):
            self.K_uu_fp[np.ix_(sl3[i::3], sl3[i::3])] += S
        y1s = []
        for l in range(4):
            y1 = 0.5 * area_w * (
                np.outer(GD1, FR1[l].P1 @ mu_tau_e) + np.outer(GD2, FR1[l].P2 @ mu_tau_e)
            )
            y1s.append(y1)
            b.A_u_rot[np.ix_(sl3, rot_cols[l::4])] += np.einsum("mi,A->miA", y1, N).reshape(
                len(sl3), len(N)
            )

        # constraint rows: d/d u and d/d quat
        tau_rows = ep_row0 + np.arange(3)
        for a_loc, srow in enumerate(slots):
            Su = 0.5 * area_w * (GD1[a_loc] * frame.P1.T + GD2[a_loc] * frame.P2.T)
            b.A_mun_u[np.ix_(tau_rows, _slot3(srow))] += Su
        for l in range(4):
            b.A_mun_rot[np.ix_(tau_rows, rot_cols[l::4])] += np.outer(g1[l], N)
        n_rows = ep_row0 + 3 + np.arange(3)
        for k in range(3):
            row = area_w * (F_c @ self.B[k] @ Gv.T)  # (i, m)
            b.A_mun_u[n_rows[k], sl3] += row.T.ravel()

        # quaternion reaction rows: d/d mu_tau_e, d/d u and d/d quat
        NN = np.outer(N, N)
        for l in range(1, 4):
            b.A_rot_mun[np.ix_(rot_cols[l::4], ep_cols_tau)] += np.outer(N, g1[l])
            b.A_rot_u[np.ix_(rot_cols[l::4], sl3)] += np.einsum(
                "A,mi->Ami", N, y1s[l]
            ).reshape(len(N), len(sl3))
            ul = FR1[l].current_directors
            for m in range(4):
                um = FR1[m].current_directors
                zz = (2.0 * quat_bilinear(_EYE4[l], _EYE4[m])) @ self.D
                P1lm = _pair_p1(zz, d_cur) + _pair_p1(d_cur, zz)
                P1lm += _pair_p1(ul, um) + _pair_p1(um, ul)
                P2lm = _pair_p2(zz, d_cur) + _pair_p2(d_cur, zz)
                P2lm += _pair_p2(ul, um) + _pair_p2(um, ul)
                h = 0.5 * area_w * (
                    P1lm.T @ w1 + P2lm.T @ w2
                    - FR1[l].P1.T @ um[:, 0] - FR1[l].P2.T @ um[:, 1]
                    - FR1[m].P1.T @ ul[:, 0] - FR1[m].P2.T @ ul[:, 1]
                    - frame.P1.T @ zz[:, 0] - frame.P2.T @ zz[:, 1]
                ) @ mu_tau_e
                b.A_rot_rot[np.ix_(rot_cols[l::4], rot_cols[m::4])] += h * NN

    # ---- scatter ------------------------------------------------------------

    def scatter(self, R):
        lay = self.lay
        np.add.at(R, self.fp_dofs, self.r_u.ravel())
        R[lay.pos] += self.r_pos.ravel()
        R[lay.frc] += self.r_frc.ravel()
        R[lay.mom] += self.r_mom.ravel()
        R[lay.rot] += self.r_rot.ravel()
        if self.area_on:
            R[lay.mun] += self.r_mun


def to_global_matrix(system):
    """Assemble all tangent blocks into one global sparse matrix."""
    dm = system.dofmap
    n = dm.total
    rows, cols, vals = [], [], []

    def add(block, row_idx, col_idx):
        if block is None or block.size == 0:
            return
        nz = np.nonzero(block)
        if len(nz[0]) == 0:
            return
        rows.append(np.asarray(row_idx)[nz[0]])
        cols.append(np.asarray(col_idx)[nz[1]])
        vals.append(block[nz])

    K = sp.coo_matrix(system.K_uu)
    rows.append(K.row)
    cols.append(K.col)
    vals.append(K.data)

    for fb in system.fiber_blocks:
        lay = fb.lay
        fp = fb.fp_dofs
        pos_idx = np.arange(lay.pos.start, lay.pos.stop)
        frc_idx = np.arange(lay.frc.start, lay.frc.stop)
        mom_idx = np.arange(lay.mom.start, lay.mom.stop)
        rot_idx = np.arange(lay.rot.start, lay.rot.stop)
        mun_idx = np.arange(lay.mun.start, lay.mun.stop)
        add(fb.A_u_pos, fp, pos_idx)
        add(fb.A_u_frc, fp, frc_idx)
        add(fb.A_u_mom, fp, mom_idx)
        add(fb.A_u_rot, fp, rot_idx)
        add(fb.A_u_mun, fp, mun_idx)
        add(fb.A_pos_u, pos_idx, fp)
        add(fb.M_pos_pos, pos_idx, pos_idx)
        add(fb.A_frc_pos, frc_idx, pos_idx)
        add(fb.M_frc_frc, frc_idx, frc_idx)
        add(fb.A_frc_rot, frc_idx, rot_idx)
        add(fb.A_mom_rot, mom_idx, rot_idx)
        add(fb.M_mom_mom, mom_idx, mom_idx)
        add(fb.A_rot_u, rot_idx, fp)
        add(fb.A_rot_rot, rot_idx, rot_idx)
        add(fb.A_rot_pos, rot_idx, pos_idx)
        add(fb.A_rot_frc, rot_idx, frc_idx)
        add(fb.A_rot_mom, rot_idx, mom_idx)
        add(fb.A_rot_mun, rot_idx, mun_idx)
        add(fb.A_mun_u, mun_idx, fp)
        add(fb.A_mun_rot, mun_idx, rot_idx)

    return sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    ).tocsr()


def apply_dirichlet(K, R, dofmap):
    """Restrict a global matrix and residual to the free row/column pairs."""
    free = dofmap.free
    return K[free][:, free].tocsr(), R[free]


def average_piola(problem, x_or_u):
    """Volume average of the bulk first Piola-Kirchhoff stress field."""
    x = np.asarray(x_or_u, dtype=float)
    n_u = 3 * problem.patch.n_control_points
    u = x[:n_u].reshape(-1, 3)
    vol = problem.volume
    total = np.zeros((3, 3))
    volume = 0.0
    for e in vol.elements:
        idx, V, G, w = vol.element_data(e)
        F = _I3 + np.einsum("mi,mqj->qij", u[idx], G)
        P = problem.material.first_pk(F)
        total += np.einsum("q,qij->ij", w, P)
        volume += w.sum()
    return total / volume


def matrix_energy(problem, x_or_u):
    """Stored energy of the bulk material."""
    x = np.asarray(x_or_u, dtype=float)
    n_u = 3 * problem.patch.n_control_points
    u = x[:n_u].reshape(-1, 3)
    vol = problem.volume
    total = 0.0
    for e in vol.elements:
        idx, V, G, w = vol.element_data(e)
        F = _I3 + np.einsum("mi,mqj->qij", u[idx], G)
        total += w @ problem.material.energy(F)
    return float(total)


def beam_energy(problem, dofmap, x):
    """Stored energy of all fibers (stretch/shear plus bending/twist)."""
    total = 0.0
    for fib, lay in zip(problem.fibers, dofmap.fibers):
        pos = x[lay.pos].reshape(-1, 3)
        quat = x[lay.rot].reshape(-1, 4)
        K1 = fib.section.force_stiffness
        K2 = fib.section.moment_stiffness
        D3 = fib.directors[:, 2]
        for iq in range(fib.n_qp):
            pf = fib.pos_first[iq]
            psl = slice(pf, pf + fib.degree + 1)
            N = fib.pos_ders[iq, 0]
            dN = fib.pos_ders[iq, 1]
            q = N @ quat[psl]
            dq = dN @ quat[psl]
            Rm = quat_to_rotation(q)
            dRm = 2.0 * quat_bilinear(q, dq)
            gamma, curv = beam_strains(Rm, dN @ pos[psl], dRm, D3)
            total += 0.5 * fib.w[iq] * (gamma @ (K1 @ gamma) + curv @ (K2 @ curv))
    return float(total)


def total_energy(problem, dofmap, x):
    return matrix_energy(problem, x) + beam_energy(problem, dofmap, x)


def constraint_report(problem, dofmap, x):
    """Maximum coupling-constraint violations along every fiber."""
    n_u = 3 * problem.patch.n_control_points
    u = x[:n_u].reshape(-1, 3)
    gap_max = 0.0
    tau_max = 0.0
    area_max = 0.0
    for fib, lay in zip(problem.fibers, dofmap.fibers):
        pos = x[lay.pos].reshape(-1, 3)
        quat = x[lay.rot].reshape(-1, 4)
        D = fib.directors
        for iq in range(fib.n_qp):
            pf = fib.pos_first[iq]
            psl = slice(pf, pf + fib.degree + 1)
            N = fib.pos_ders[iq, 0]
            dN = fib.pos_ders[iq, 1]
            q = N @ quat[psl]
            dq = dN @ quat[psl]
            Rm = quat_to_rotation(q)
            dRm = 2.0 * quat_bilinear(q, dq)
            frame = build_frame(Rm, dRm, D, fib.section.circumference)
            te = fib.trace[iq]
            u_loc = u[fib.footprint_cps[te.slots]]
            F_c = _I3 + np.einsum("mi,mj->ij", u_loc, te.grad)
            phi_c = te.values @ (
                problem.patch.control_points[fib.footprint_cps[te.slots]] + u_loc
            )
            gap, g_tau, g_n = constraint_densities(frame, phi_c, N @ pos[psl], F_c)
            gap_max = max(gap_max, float(np.linalg.norm(gap)))
            tau_max = max(tau_max, float(np.linalg.norm(g_tau)))
            area_max = max(area_max, float(np.linalg.norm(g_n)))
    return {
        "position_gap": gap_max,
        "torque_constraint": tau_max,
        "area_constraint": area_max,
    }

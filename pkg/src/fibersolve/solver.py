"""Newton solution of the coupled block system.

The tangent has a fixed coupling pattern: the centerline-position rows,
force-constitutive rows and moment-constitutive rows each carry a
constant, block-diagonal, invertible matrix on their own unknown.  Those
three groups are eliminated fiber by fiber before the global solve,
leaving a system over matrix displacements, quaternion coefficients and
area multipliers only.  The eliminated unknowns are recovered by exact
back-substitution, so the reduced step equals the unreduced one up to
rounding.

The standalone moment-balance rows used when the torque coupling is
switched off break that pattern, so that configuration (and any other
special case) can fall back to ``mode="full"``, which factors the whole
matrix at once.
"""

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.linalg import lu_factor, lu_solve

from .assembly import assemble, apply_dirichlet, set_initial_state, to_global_matrix

__all__ = [
    "NewtonResult",
    "newton_solve",
    "solve_with_load_steps",
    "compute_newton_step",
    "dense_newton_step",
    "scaled_residual_norm",
]


class NewtonResult:
    """Outcome of one Newton run (or one load step sequence)."""

    def __init__(self, x, converged, iterations, residuals, message=""):
        self.x = x
        self.converged = converged
        self.iterations = iterations
        self.residuals = list(residuals)
        self.message = message

    def __repr__(self):
        state = "converged" if self.converged else "FAILED"
        return f"NewtonResult({state}, {self.iterations} iterations)"


def scaled_residual_norm(R, dofmap):
    """Residual norm with each equation group weighted by its free size."""
    free_mask = np.zeros(dofmap.total, dtype=bool)
    free_mask[dofmap.free] = True
    groups = [np.arange(dofmap.n_u)]
    for name in ("pos", "frc", "mom", "rot", "mun"):
        idx = [np.arange(getattr(l, name).start, getattr(l, name).stop) for l in dofmap.fibers]
        groups.append(np.concatenate(idx) if idx else np.zeros(0, dtype=int))
    total = 0.0
    for idx in groups:
        if len(idx) == 0:
            continue
        sub = idx[free_mask[idx]]
        if len(sub) == 0:
            continue
        total += np.dot(R[sub], R[sub]) / len(sub)
    return float(np.sqrt(total))


def _block_free(lay, name, free_mask):
    s = getattr(lay, name)
    ids = np.arange(s.start, s.stop)
    loc = np.nonzero(free_mask[ids])[0]
    return ids, loc


def compute_newton_step(system, mode="reduced"):
    """Solve the linearized system for the full-length update vector.

    ``mode="reduced"`` eliminates the position/force/moment groups per
    fiber first; ``mode="full"`` factors the complete matrix.  Entries at
    constrained dofs are zero either way.
    """
    dm = system.dofmap
    if mode == "full":
        K = to_global_matrix(system)
        Kf, Rf = apply_dirichlet(K, system.R, dm)
        d = spla.splu(Kf.tocsc()).solve(-Rf)
        delta = np.zeros(dm.total)
        delta[dm.free] = d
        return delta
    if mode != "reduced":
        raise ValueError("mode must be 'reduced' or 'full'")

    free_mask = np.zeros(dm.total, dtype=bool)
    free_mask[dm.free] = True
    R = system.R

    free_u = dm.free[dm.free < dm.n_u]
    n_u_f = len(free_u)
    red_of_u = -np.ones(dm.n_u, dtype=int)
    red_of_u[free_u] = np.arange(n_u_f)

    # reduced unknown ordering: free u, then per fiber free rot and mun
    offset = n_u_f
    fiber_data = []
    for fb in system.fiber_blocks:
        if fb is None:
            raise ValueError("system was assembled without tangents")
        lay = fb.lay
        if fb.A_rot_pos.any() or fb.A_rot_frc.any() or fb.A_rot_mom.any():
            raise ValueError(
                "standalone moment-balance rows cannot be block-reduced; use mode='full'"
            )
        data = {"fb": fb, "lay": lay}
        fp = fb.fp_dofs
        data["fp_loc"] = np.nonzero(free_mask[fp])[0]
        data["fp_red"] = red_of_u[fp[data["fp_loc"]]]
        for name in ("pos", "frc", "mom", "rot", "mun"):
            ids, loc = _block_free(lay, name, free_mask)
            data[name + "_ids"] = ids
            data[name + "_loc"] = loc
        data["rot_red"] = offset + np.arange(len(data["rot_loc"]))
        offset += len(data["rot_loc"])
        data["mun_red"] = offset + np.arange(len(data["mun_loc"]))
        offset += len(data["mun_loc"])
        fiber_data.append(data)
    n_red = offset

    Kuu_f = sp.coo_matrix(system.K_uu[free_u][:, free_u])
    rows = [Kuu_f.row]
    cols = [Kuu_f.col]
    vals = [Kuu_f.data]
    rhs = np.zeros(n_red)
    rhs[:n_u_f] = -R[free_u]

    def add(block, ridx, cidx):
        if block.size == 0:
            return
        nz = np.nonzero(block)
        if len(nz[0]) == 0:
            return
        rows.append(np.asarray(ridx)[nz[0]])
        cols.append(np.asarray(cidx)[nz[1]])
        vals.append(block[nz])

    for data in fiber_data:
        fb = data["fb"]
        fpl, fpr = data["fp_loc"], data["fp_red"]
        posl, frcl, moml, rotl, munl = (
            data["pos_loc"], data["frc_loc"], data["mom_loc"], data["rot_loc"], data["mun_loc"],
        )
        rotr, munr = data["rot_red"], data["mun_red"]

        Mp = lu_factor(fb.M_pos_pos[np.ix_(posl, posl)])
        Mf = lu_factor(fb.M_frc_frc[np.ix_(frcl, frcl)])
        Mm = lu_factor(fb.M_mom_mom[np.ix_(moml, moml)])
        data["Mp"], data["Mf"], data["Mm"] = Mp, Mf, Mm

        R_pos = R[data["pos_ids"][posl]]
        R_frc = R[data["frc_ids"][frcl]]
        R_mom = R[data["mom_ids"][moml]]

        A_u_pos = fb.A_u_pos[np.ix_(fpl, posl)]
        A_u_frc = fb.A_u_frc[np.ix_(fpl, frcl)]
        A_u_mom = fb.A_u_mom[np.ix_(fpl, moml)]
        A_u_rot = fb.A_u_rot[np.ix_(fpl, rotl)]
        A_u_mun = fb.A_u_mun[np.ix_(fpl, munl)]
        A_pos_u = fb.A_pos_u[np.ix_(posl, fpl)]
        A_frc_pos = fb.A_frc_pos[np.ix_(frcl, posl)]
        A_frc_rot = fb.A_frc_rot[np.ix_(frcl, rotl)]
        A_mom_rot = fb.A_mom_rot[np.ix_(moml, rotl)]

        X1 = lu_solve(Mp, np.column_stack([A_pos_u, R_pos])) if len(posl) else np.zeros(
            (0, len(fpl) + 1)
        )
        X1u, X1r = X1[:, :-1], X1[:, -1]
        Y = lu_solve(Mf, np.column_stack([A_frc_pos, A_frc_rot, R_frc[:, None]])) if len(
            frcl
        ) else np.zeros((0, len(posl) + len(rotl) + 1))
        Ypos = Y[:, : len(posl)]
        Yrot = Y[:, len(posl) : len(posl) + len(rotl)]
        Yr = Y[:, -1]
        Z = lu_solve(Mm, np.column_stack([A_mom_rot, R_mom[:, None]])) if len(moml) else np.zeros(
            (0, len(rotl) + 1)
        )
        Zrot, Zr = Z[:, :-1], Z[:, -1]

        W = A_u_pos - A_u_frc @ Ypos
        add(-W @ X1u, fpr, fpr)
        add(A_u_rot - A_u_frc @ Yrot - A_u_mom @ Zrot, fpr, rotr)
        add(A_u_mun, fpr, munr)
        np.add.at(rhs, fpr, W @ X1r + A_u_frc @ Yr + A_u_mom @ Zr)

        add(fb.A_rot_u[np.ix_(rotl, fpl)], rotr, fpr)
        add(fb.A_rot_rot[np.ix_(rotl, rotl)], rotr, rotr)
        add(fb.A_rot_mun[np.ix_(rotl, munl)], rotr, munr)
        rhs[rotr] = -R[data["rot_ids"][rotl]]
        add(fb.A_mun_u[np.ix_(munl, fpl)], munr, fpr)
        add(fb.A_mun_rot[np.ix_(munl, rotl)], munr, rotr)
        rhs[munr] = -R[data["mun_ids"][munl]]

    K_red = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n_red, n_red),
    ).tocsc()
    d = spla.splu(K_red).solve(rhs)

    delta = np.zeros(dm.total)
    delta[free_u] = d[:n_u_f]
    for data in fiber_data:
        fb = data["fb"]
        lay = data["lay"]
        fpl = data["fp_loc"]
        posl, frcl, moml, rotl, munl = (
            data["pos_loc"], data["frc_loc"], data["mom_loc"], data["rot_loc"], data["mun_loc"],
        )
        delta[data["rot_ids"][rotl]] = d[data["rot_red"]]
        delta[data["mun_ids"][munl]] = d[data["mun_red"]]

        du = delta[fb.fp_dofs[fpl]]
        drot = d[data["rot_red"]]
        if len(posl):
            dpos = lu_solve(
                data["Mp"],
                -system.R[data["pos_ids"][posl]] - fb.A_pos_u[np.ix_(posl, fpl)] @ du,
            )
            delta[data["pos_ids"][posl]] = dpos
        else:
            dpos = np.zeros(0)
        if len(frcl):
            delta[data["frc_ids"][frcl]] = lu_solve(
                data["Mf"],
                -system.R[data["frc_ids"][frcl]]
                - fb.A_frc_pos[np.ix_(frcl, posl)] @ dpos
                - fb.A_frc_rot[np.ix_(frcl, rotl)] @ drot,
            )
        if len(moml):
            delta[data["mom_ids"][moml]] = lu_solve(
                data["Mm"],
                -system.R[data["mom_ids"][moml]]
                - fb.A_mom_rot[np.ix_(moml, rotl)] @ drot,
            )
    return delta


def dense_newton_step(system):
    """Reference step from a dense factorization of the full matrix."""
    dm = system.dofmap
    K = to_global_matrix(system)
    Kf, Rf = apply_dirichlet(K, system.R, dm)
    d = np.linalg.solve(Kf.toarray(), -Rf)
    delta = np.zeros(dm.total)
    delta[dm.free] = d
    return delta


def newton_solve(
    problem,
    dofmap,
    x0=None,
    mode=None,
    abs_tol=None,
    rel_tol=1e-12,
    max_iters=25,
    load_scale=1.0,
    callback=None,
):
    """Full Newton iteration on the coupled system.

    Convergence is declared when the group-scaled residual norm drops
    below ``abs_tol`` (default ``1e-10 * max(1, load_scale, first norm)``)
    or below ``rel_tol`` times the first norm.
    """
    if mode is None:
        mode = "reduced" if problem.couple_tau else "full"
    x = set_initial_state(problem, dofmap) if x0 is None else np.array(x0, dtype=float)
    x[dofmap.constrained] = dofmap.prescribed

    residuals = []
    r0 = None
    for it in range(max_iters + 1):
        try:
            system = assemble(problem, dofmap, x, want_tangent=True)
        except ValueError as exc:  # e.g. matrix inverted under a too-large step
            return NewtonResult(x, False, it, residuals, f"assembly failed: {exc}")
        rnorm = scaled_residual_norm(system.R, dofmap)
        residuals.append(rnorm)
        if callback is not None:
            callback(it, rnorm, x)
        if r0 is None:
            r0 = rnorm
            tol = abs_tol if abs_tol is not None else 1e-10 * max(1.0, load_scale, r0)
        if not np.isfinite(rnorm) or rnorm > 1e8 * max(r0, 1.0):
            return NewtonResult(x, False, it, residuals, "residual diverged")
        if rnorm <= tol or (r0 > 0 and rnorm <= rel_tol * r0):
            return NewtonResult(x, True, it, residuals)
        if it == max_iters:
            break
        try:
            delta = compute_newton_step(system, mode)
        except (ValueError, RuntimeError) as exc:
            return NewtonResult(x, False, it, residuals, f"linear solve failed: {exc}")
        x = x + delta
    return NewtonResult(x, False, max_iters, residuals, "iteration limit reached")


def _scaled_specs(problem):
    """Snapshot of all fiber load vectors, for the load stepper."""
    names = ("m_ext_start", "m_ext_end", "n_ext_start", "n_ext_end", "line_force", "line_moment")
    return [{n: getattr(f.spec, n).copy() for n in names} for f in problem.fibers]


def load_reference_magnitude(problem, dofmap):
    """Largest load or prescribed-value magnitude, used to scale tolerances."""
    mags = [1.0]
    for snap in _scaled_specs(problem):
        mags.extend(float(np.linalg.norm(v)) for v in snap.values())
    if len(dofmap.prescribed):
        mags.append(float(np.max(np.abs(dofmap.prescribed))))
    return max(mags)


def solve_with_load_steps(problem, dofmap, n_steps=1, x0=None, mode=None, callback=None, **kw):
    """Ramp all loads and scalable boundary values linearly over n_steps.

    Each step starts from the previous solution (warm start).  The fiber
    load vectors and the dof map's prescribed values are restored before
    returning.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be at least 1")
    snaps = _scaled_specs(problem)
    presc0 = dofmap.prescribed.copy()
    load_scale = load_reference_magnitude(problem, dofmap)
    x = set_initial_state(problem, dofmap) if x0 is None else np.array(x0, dtype=float)
    all_residuals = []
    try:
        for k in range(1, n_steps + 1):
            f = k / n_steps
            for fib, snap in zip(problem.fibers, snaps):
                for name, full in snap.items():
                    setattr(fib.spec, name, f * full)
            dofmap.prescribed = np.where(dofmap.scalable, f * presc0, presc0)
            result = newton_solve(
                problem, dofmap, x0=x, mode=mode, load_scale=load_scale,
                callback=(lambda it, r, xx, k=k: callback(k, it, r, xx)) if callback else None,
                **kw,
            )
            all_residuals.extend(result.residuals)
            if not result.converged:
                result.residuals = all_residuals
                result.message = f"load step {k}/{n_steps}: {result.message}"
                return result
            x = result.x
    finally:
        for fib, snap in zip(problem.fibers, snaps):
            for name, full in snap.items():
                setattr(fib.spec, name, full)
        dofmap.prescribed = presc0
    result.residuals = all_residuals
    return result

"""Tests for dof layout and block assembly.

The tangent checks compare the fully assembled global matrix against
central finite differences of the residual in random directions, which
exercises every block including the toggled variants.
"""

import numpy as np
import pytest

from fibersolve.assembly import (
    FiberDiscretization,
    FiberSpec,
    Problem,
    apply_dirichlet,
    assemble,
    average_piola,
    beam_energy,
    build_dof_map,
    constraint_report,
    default_directors,
    matrix_energy,
    set_initial_state,
    to_global_matrix,
    validate_order_ladder,
)
from fibersolve.bspline import Patch3D
from fibersolve.materials import MooneyRivlinPolyconvex, SaintVenantKirchhoff


def make_problem(
    unity="weak",
    tau=True,
    area=True,
    ep=False,
    degree=3,
    fiber_els=2,
    matrix_els=(2, 2, 2),
    loads=False,
    material=None,
):
    patch = Patch3D(
        degrees=(2, 2, 2),
        n_elements=matrix_els,
        origin=np.zeros(3),
        edge_matrix=np.eye(3),
    )
    if material is None:
        material = SaintVenantKirchhoff(5.0, 0.3)
    kw = {}
    if loads:
        kw = dict(
            m_ext_start=(0.005, -0.01, 0.0),
            m_ext_end=(0.01, 0.02, 0.005),
            n_ext_start=(0.0, 0.004, -0.002),
            n_ext_end=(0.01, 0.0, 0.02),
            line_force=(0.001, 0.002, -0.001),
            line_moment=(0.002, -0.001, 0.001),
        )
    spec = FiberSpec(
        start=(0.45, 0.52, 0.12),
        end=(0.58, 0.44, 0.88),
        radius=0.06,
        youngs=60.0,
        poisson=0.25,
        n_elements=fiber_els,
        **kw,
    )
    fib = FiberDiscretization(spec, patch, degree=degree)
    problem = Problem(
        patch,
        material,
        [fib],
        couple_tau=tau,
        couple_area=area,
        endpoint_constraints=ep,
        unity_mode=unity,
    )
    dofmap = build_dof_map(problem)
    return problem, dofmap


# ---------------------------------------------------------------------------
# order ladder and directors


def test_order_ladder_accepts_nested_pattern():
    assert validate_order_ladder((4, 4, 4, 3, 3, 2, 2, 2)) == 4
    assert validate_order_ladder((2, 2, 2, 1, 1, 0, 0, 0)) == 2


@pytest.mark.parametrize(
    "ladder",
    [
        (4, 4, 4, 2, 2, 2, 2, 2),
        (4, 4, 4, 3, 3, 3, 2, 2),
        (1, 1, 1, 0, 0, -1, -1, -1),
        (4, 4, 4, 3, 3, 2, 2),
    ],
)
def test_order_ladder_rejects_everything_else(ladder):
    with pytest.raises(ValueError):
        validate_order_ladder(ladder)


def test_default_directors_orthonormal_right_handed():
    rng = np.random.default_rng(7)
    for _ in range(25):
        axis = rng.standard_normal(3)
        D = default_directors(axis)
        assert np.allclose(D.T @ D, np.eye(3), atol=1e-12)
        assert np.allclose(D[:, 2], axis / np.linalg.norm(axis), atol=1e-12)
        assert np.allclose(np.cross(D[:, 0], D[:, 1]), D[:, 2], atol=1e-12)


# ---------------------------------------------------------------------------
# dof layout


def test_dof_counts_worked_example():
    # patch: (2+2)^3 = 64 control points -> 192 displacement dofs
    # fiber degree 4, 20 elements: 24 position, 23 resultant, 22 multiplier
    patch = Patch3D(
        degrees=(2, 2, 2), n_elements=(2, 2, 2), origin=np.zeros(3), edge_matrix=np.eye(3)
    )
    spec = FiberSpec(
        start=(0.5, 0.5, 0.05),
        end=(0.5, 0.5, 0.95),
        radius=0.05,
        youngs=10.0,
        poisson=0.0,
        n_elements=20,
    )
    fib = FiberDiscretization(spec, patch, degree=4)
    assert (fib.n_pos, fib.n_res, fib.n_mul) == (24, 23, 22)
    problem = Problem(patch, SaintVenantKirchhoff(1.0, 0.0), [fib])
    dm = build_dof_map(problem)
    lay = dm.fibers[0]
    assert dm.n_u == 192
    assert lay.pos.stop - lay.pos.start == 72
    assert lay.frc.stop - lay.frc.start == 69
    assert lay.mom.stop - lay.mom.start == 69
    assert lay.rot.stop - lay.rot.start == 96
    assert lay.mun.stop - lay.mun.start == 66
    assert dm.total == 192 + 72 + 69 + 69 + 96 + 66
    assert dm.block_dims() == [192, 72, 69, 69, 96, 66]


def test_dof_counts_with_endpoint_constraints():
    problem, dm = make_problem(ep=True)
    lay = dm.fibers[0]
    assert lay.n_ep == 12
    assert lay.mun.stop - lay.mun.start == 3 * lay.n_mul + 12


def test_area_toggle_removes_multiplier_block():
    problem, dm = make_problem(area=False)
    lay = dm.fibers[0]
    assert lay.mun.stop == lay.mun.start
    # no multiplier pin either
    assert dm.total == lay.rot.stop


def test_first_multiplier_coefficient_is_pinned():
    problem, dm = make_problem()
    lay = dm.fibers[0]
    pinned = np.arange(lay.mun.start, lay.mun.start + 3)
    assert np.all(np.isin(pinned, dm.constrained))


def test_clamp_start_constrains_position_and_rotation():
    patch = Patch3D(
        degrees=(2, 2, 2), n_elements=(2, 2, 2), origin=np.zeros(3), edge_matrix=np.eye(3)
    )
    spec = FiberSpec(
        start=(0.5, 0.5, 0.1),
        end=(0.5, 0.5, 0.9),
        radius=0.05,
        youngs=10.0,
        poisson=0.0,
        n_elements=2,
        clamp_start=True,
    )
    fib = FiberDiscretization(spec, patch, degree=3)
    problem = Problem(patch, SaintVenantKirchhoff(1.0, 0.0), [fib])
    dm = build_dof_map(problem)
    lay = dm.fibers[0]
    expected = np.concatenate(
        [
            np.arange(lay.mun.start, lay.mun.start + 3),
            np.arange(lay.pos.start, lay.pos.start + 3),
            np.arange(lay.rot.start, lay.rot.start + 4),
        ]
    )
    assert np.all(np.isin(expected, dm.constrained))
    x = set_initial_state(problem, dm)
    assert np.allclose(x[lay.pos.start : lay.pos.start + 3], spec.start)
    assert np.allclose(x[lay.rot.start : lay.rot.start + 4], [1, 0, 0, 0])


def test_duplicate_and_out_of_range_dirichlet_rejected():
    patch = Patch3D(
        degrees=(2, 2, 2), n_elements=(1, 1, 1), origin=np.zeros(3), edge_matrix=np.eye(3)
    )
    mat = SaintVenantKirchhoff(1.0, 0.0)
    with pytest.raises(ValueError):
        build_dof_map(
            Problem(patch, mat, [], dirichlet_dofs=[3, 3], dirichlet_values=[0.0, 0.0])
        )
    with pytest.raises(ValueError):
        build_dof_map(
            Problem(patch, mat, [], dirichlet_dofs=[10**6], dirichlet_values=[0.0])
        )


def test_problem_validation_errors():
    patch = Patch3D(
        degrees=(2, 2, 2), n_elements=(1, 1, 1), origin=np.zeros(3), edge_matrix=np.eye(3)
    )
    mat = SaintVenantKirchhoff(1.0, 0.0)
    with pytest.raises(ValueError):
        Problem(patch, mat, [], unity_mode="sometimes")
    with pytest.raises(ValueError):
        Problem(patch, mat, [], couple_tau=False, endpoint_constraints=True)
    spec = FiberSpec(
        start=(0.5, 0.5, 0.5),
        end=(0.5, 0.5, 0.5),
        radius=0.05,
        youngs=1.0,
        poisson=0.0,
        n_elements=1,
    )
    with pytest.raises(ValueError):
        FiberDiscretization(spec, patch, degree=2)
    bad = FiberSpec(
        start=(0.5, 0.5, 0.1),
        end=(0.5, 0.5, 0.9),
        radius=0.05,
        youngs=1.0,
        poisson=0.0,
        n_elements=1,
        directors=np.eye(3)[:, ::-1],  # third column not along the fiber
    )
    with pytest.raises(ValueError):
        FiberDiscretization(bad, patch, degree=2)


# ---------------------------------------------------------------------------
# residual structure


@pytest.mark.parametrize("unity", ["weak", "direct"])
@pytest.mark.parametrize("tau,area,ep", [
    (True, True, False),
    (True, True, True),
    (True, False, False),
    (False, True, False),
    (False, False, False),
])
def test_reference_state_is_equilibrium(unity, tau, area, ep):
    problem, dm = make_problem(unity=unity, tau=tau, area=area, ep=ep)
    x = set_initial_state(problem, dm)
    system = assemble(problem, dm, x, want_tangent=False)
    assert np.linalg.norm(system.R) < 1e-12


def test_translation_invariance_of_residual():
    problem, dm = make_problem(loads=True)
    rng = np.random.default_rng(3)
    x = set_initial_state(problem, dm)
    x += 0.02 * rng.standard_normal(dm.total)
    R1 = assemble(problem, dm, x, want_tangent=False).R

    shift = np.array([0.37, -0.21, 0.11])
    x2 = x.copy()
    x2[dm.u] = (x[dm.u].reshape(-1, 3) + shift).ravel()
    lay = dm.fibers[0]
    x2[lay.pos] = (x[lay.pos].reshape(-1, 3) + shift).ravel()
    R2 = assemble(problem, dm, x2, want_tangent=False).R
    assert np.allclose(R1, R2, atol=1e-10)


def test_endpoint_loads_enter_residual_at_reference():
    problem, dm = make_problem(loads=True)
    x = set_initial_state(problem, dm)
    R = assemble(problem, dm, x, want_tangent=False).R
    assert np.linalg.norm(R) > 1e-4


def test_quadrature_consistency_on_polynomial_integrands():
    """With a single-element patch the line traces are global polynomials, so
    the default rule and a finer rule must integrate every row exactly."""
    patch = Patch3D(
        degrees=(2, 2, 2), n_elements=(1, 1, 1), origin=np.zeros(3), edge_matrix=np.eye(3)
    )
    mat = SaintVenantKirchhoff(5.0, 0.3)
    spec = FiberSpec(
        start=(0.5, 0.5, 0.1),
        end=(0.5, 0.5, 0.9),
        radius=0.05,
        youngs=40.0,
        poisson=0.0,
        n_elements=2,
    )
    fibs = [FiberDiscretization(spec, patch, degree=4, n_quad=n) for n in (None, 7)]
    rng = np.random.default_rng(11)
    pert = None
    Rs = []
    for fib in fibs:
        problem = Problem(patch, mat, [fib])
        dm = build_dof_map(problem)
        if pert is None:
            pert = 0.02 * rng.standard_normal(dm.total)
            pert[dm.fibers[0].rot] = 0.0  # constant unit quaternion keeps
            # every integrand a polynomial of integrable degree
        x = set_initial_state(problem, dm) + pert
        Rs.append(assemble(problem, dm, x, want_tangent=False).R)
    assert np.linalg.norm(Rs[0] - Rs[1]) < 1e-11 * max(1.0, np.linalg.norm(Rs[0]))


# ---------------------------------------------------------------------------
# tangent consistency (global matrix vs central differences)


def _fd_check(problem, dm, seed, n_probes=3, h=1e-6, tol=2e-6, state_scale=0.02):
    rng = np.random.default_rng(seed)
    x = set_initial_state(problem, dm)
    x = x + state_scale * rng.standard_normal(dm.total)
    system = assemble(problem, dm, x, want_tangent=True)
    K = to_global_matrix(system)
    worst = 0.0
    for _ in range(n_probes):
        v = rng.standard_normal(dm.total)
        v /= np.linalg.norm(v)
        Rp = assemble(problem, dm, x + h * v, want_tangent=False).R
        Rm = assemble(problem, dm, x - h * v, want_tangent=False).R
        fd = (Rp - Rm) / (2 * h)
        Kv = K @ v
        err = np.linalg.norm(Kv - fd) / max(np.linalg.norm(fd), 1e-10)
        worst = max(worst, err)
    assert worst < tol, f"tangent mismatch {worst:.3e}"


@pytest.mark.parametrize("unity", ["weak", "direct"])
def test_tangent_matches_fd_default(unity):
    problem, dm = make_problem(unity=unity, loads=True)
    _fd_check(problem, dm, seed=5)


def test_tangent_matches_fd_endpoint_constraints():
    problem, dm = make_problem(ep=True, loads=True)
    _fd_check(problem, dm, seed=6)


def test_tangent_matches_fd_torque_coupling_off():
    problem, dm = make_problem(tau=False, loads=True)
    _fd_check(problem, dm, seed=7)


def test_tangent_matches_fd_area_coupling_off():
    problem, dm = make_problem(area=False, loads=True)
    _fd_check(problem, dm, seed=8)


def test_tangent_matches_fd_both_couplings_off():
    problem, dm = make_problem(tau=False, area=False, loads=True)
    _fd_check(problem, dm, seed=9)


def test_tangent_matches_fd_polyconvex_matrix():
    problem, dm = make_problem(material=MooneyRivlinPolyconvex(2.0, 1.0, 10.0))
    _fd_check(problem, dm, seed=10)


def test_matrix_only_tangent_symmetric_and_fd():
    patch = Patch3D(
        degrees=(2, 2, 2), n_elements=(2, 2, 2), origin=np.zeros(3), edge_matrix=np.eye(3)
    )
    problem = Problem(patch, SaintVenantKirchhoff(5.0, 0.3), [])
    dm = build_dof_map(problem)
    _fd_check(problem, dm, seed=12)
    rng = np.random.default_rng(13)
    x = set_initial_state(problem, dm) + 0.02 * rng.standard_normal(dm.total)
    K = to_global_matrix(assemble(problem, dm, x))
    asym = abs(K - K.T).max()
    assert asym < 1e-10 * max(1.0, abs(K).max())


# ---------------------------------------------------------------------------
# derived quantities


def test_average_piola_reproduces_uniform_deformation():
    patch = Patch3D(
        degrees=(2, 2, 2), n_elements=(2, 2, 2), origin=np.zeros(3), edge_matrix=np.eye(3)
    )
    mat = SaintVenantKirchhoff(50.0, 0.2)
    problem = Problem(patch, mat, [])
    dm = build_dof_map(problem)
    Fbar = np.array(
        [
            [1.01, 0.002, -0.001],
            [0.003, 0.995, 0.002],
            [-0.002, 0.001, 1.004],
        ]
    )
    u = (patch.control_points @ (Fbar - np.eye(3)).T).ravel()
    P = average_piola(problem, u)
    assert np.allclose(P, mat.first_pk(Fbar), atol=1e-12)


def test_energies_vanish_at_reference():
    problem, dm = make_problem()
    x = set_initial_state(problem, dm)
    assert matrix_energy(problem, x) < 1e-14
    assert beam_energy(problem, dm, x) < 1e-14


def test_constraint_report_zero_at_reference():
    problem, dm = make_problem()
    x = set_initial_state(problem, dm)
    rep = constraint_report(problem, dm, x)
    assert rep["position_gap"] < 1e-12
    assert rep["torque_constraint"] < 1e-12
    assert rep["area_constraint"] < 1e-12


def test_apply_dirichlet_restricts_to_free_set():
    problem, dm = make_problem()
    x = set_initial_state(problem, dm)
    system = assemble(problem, dm, x)
    K = to_global_matrix(system)
    Kf, Rf = apply_dirichlet(K, system.R, dm)
    n_free = dm.total - len(dm.constrained)
    assert Kf.shape == (n_free, n_free)
    assert Rf.shape == (n_free,)

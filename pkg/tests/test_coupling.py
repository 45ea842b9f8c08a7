"""Tests for the section-frame coupling algebra.

Oracles: hand evaluations at the identity frame, the explicit matrix form of
the interface stress, finite differences along smooth rotating-frame paths,
and the commutator closed form of the transported tensor derivatives.
"""

import numpy as np
import pytest

from fibersolve.beam import quat_bilinear, quat_multiply, quat_to_rotation
from fibersolve.coupling import (
    CouplingFrame,
    build_frame,
    condensed_stresses,
    constraint_densities,
    endpoint_moment_stress,
    mu_n_sym,
    sigma_assemble,
    symmetric_dyads,
)
from fibersolve.materials import axl, spin


def random_unit_quat(rng):
    q = rng.normal(size=4)
    return q / np.linalg.norm(q)


def random_triad(rng):
    """Random proper-orthonormal director matrix (columns D1, D2, D3)."""
    return quat_to_rotation(random_unit_quat(rng))


def random_frame(rng, circumference=1.0, directors=None):
    """Frame from a random unit quaternion and a random rotation rate."""
    D = np.eye(3) if directors is None else directors
    q = random_unit_quat(rng)
    dq = rng.normal(size=4)
    R = quat_to_rotation(q)
    dR = 2.0 * quat_bilinear(q, dq)
    return build_frame(R, dR, D, circumference)


def sigma_matrix_oracle(frame, mu_tau, mu_n):
    """Explicit matrix form: R D [mu-matrix] D^T with director components."""
    d = frame.current_directors
    t = d.T @ mu_tau
    n = d.T @ mu_n
    M = np.array(
        [
            [n[0], n[2] - t[2], 0.0],
            [n[2] + t[2], n[1], 0.0],
            [-2.0 * t[1], 2.0 * t[0], 0.0],
        ]
    )
    D = frame.reference_directors
    return (frame.rotation @ D) @ M @ D.T


class TestBuildFrame:
    def test_identity_frame_tensors(self):
        f = build_frame(np.eye(3), np.zeros((3, 3)), np.eye(3), 1.0)
        e = np.eye(3)
        assert np.allclose(f.P1, np.outer(e[1], e[2]) - 2 * np.outer(e[2], e[1]))
        assert np.allclose(f.P2, -np.outer(e[0], e[2]) + 2 * np.outer(e[2], e[0]))
        assert np.allclose(f.Q1, np.outer(e[0], e[0]) + np.outer(e[1], e[2]))
        assert np.allclose(f.Q2, np.outer(e[1], e[1]) + np.outer(e[0], e[2]))

    def test_constant_frame_has_zero_rates(self):
        rng = np.random.default_rng(50)
        R = quat_to_rotation(random_unit_quat(rng))
        f = build_frame(R, np.zeros((3, 3)), np.eye(3), 1.0)
        assert np.allclose(f.kappa, 0.0)
        assert np.allclose(f.P1_rate, 0.0)
        assert np.allclose(f.P2_rate, 0.0)

    def test_current_directors_are_rotated_reference(self):
        rng = np.random.default_rng(51)
        D = random_triad(rng)
        f = random_frame(rng, directors=D)
        assert np.allclose(f.current_directors, f.rotation @ D, atol=1e-13)

    def test_kappa_is_axial_vector_of_spatial_rate(self):
        rng = np.random.default_rng(52)
        q = random_unit_quat(rng)
        dq = rng.normal(size=4)
        R = quat_to_rotation(q)
        dR = 2.0 * quat_bilinear(q, dq)
        f = build_frame(R, dR, np.eye(3), 1.0)
        assert np.allclose(f.kappa, axl(dR @ R.T), atol=1e-13)

    def test_tensor_rates_match_fd_along_frame_path(self):
        # smooth unit-quaternion path: q(s) = (cos(w s/2), sin(w s/2) a) * q0
        rng = np.random.default_rng(53)
        a = rng.normal(size=3)
        a /= np.linalg.norm(a)
        w = 1.7
        q0 = random_unit_quat(rng)
        D = random_triad(rng)

        def q_path(s):
            r = np.concatenate([[np.cos(0.5 * w * s)], np.sin(0.5 * w * s) * a])
            return quat_multiply(r, q0)

        def frame_at(s):
            q = q_path(s)
            dq = 0.5 * w * quat_multiply(np.concatenate([[0.0], a]), q)
            return build_frame(
                quat_to_rotation(q), 2.0 * quat_bilinear(q, dq), D, 1.0
            )

        s0, h = 0.31, 1e-6
        f = frame_at(s0)
        fp, fm = frame_at(s0 + h), frame_at(s0 - h)
        fd_P1 = (fp.P1 - fm.P1) / (2 * h)
        fd_P2 = (fp.P2 - fm.P2) / (2 * h)
        assert np.allclose(f.P1_rate, fd_P1, rtol=1e-6, atol=1e-7)
        assert np.allclose(f.P2_rate, fd_P2, rtol=1e-6, atol=1e-7)

    def test_tensor_rates_match_commutator_form_at_unit_norm(self):
        # for rates tangent to the unit-quaternion sphere (no radial part),
        # the product rule collapses to the commutator [k]x P - P [k]x
        rng = np.random.default_rng(54)
        for _ in range(25):
            D = random_triad(rng)
            q = random_unit_quat(rng)
            dq = rng.normal(size=4)
            dq -= (q @ dq) * q
            R = quat_to_rotation(q)
            dR = 2.0 * quat_bilinear(q, dq)
            f = build_frame(R, dR, D, 1.0)
            Kx = spin(f.kappa)
            assert np.allclose(f.P1_rate, Kx @ f.P1 - f.P1 @ Kx, atol=1e-11)
            assert np.allclose(f.P2_rate, Kx @ f.P2 - f.P2 @ Kx, atol=1e-11)


class TestSigmaAssemble:
    def test_zero_multipliers(self):
        rng = np.random.default_rng(55)
        f = random_frame(rng)
        assert np.allclose(sigma_assemble(f, np.zeros(3), np.zeros(3)), 0.0)

    def test_identity_frame_pure_torsion_multiplier(self):
        f = build_frame(np.eye(3), np.zeros((3, 3)), np.eye(3), 1.0)
        t = 0.7
        S = sigma_assemble(f, np.array([0.0, 0.0, t]), np.zeros(3))
        e = np.eye(3)
        assert np.allclose(S, t * (np.outer(e[1], e[0]) - np.outer(e[0], e[1])), atol=1e-14)

    def test_matches_matrix_form_oracle(self):
        rng = np.random.default_rng(56)
        for _ in range(50):
            D = random_triad(rng)
            f = random_frame(rng, directors=D)
            mu_tau = rng.normal(size=3)
            mu_n = rng.normal(size=3)
            S = sigma_assemble(f, mu_tau, mu_n)
            assert np.allclose(S, sigma_matrix_oracle(f, mu_tau, mu_n), atol=1e-12)

    def test_annihilates_axis_and_recovers_torque_multiplier(self):
        rng = np.random.default_rng(57)
        for _ in range(25):
            D = random_triad(rng)
            f = random_frame(rng, directors=D)
            mu_tau = rng.normal(size=3)
            mu_n = rng.normal(size=3)
            S = sigma_assemble(f, mu_tau, mu_n)
            assert np.allclose(S @ D[:, 2], 0.0, atol=1e-12)
            assert np.allclose(axl(S @ f.rotation.T), mu_tau, atol=1e-12)


class TestMuNSym:
    def test_identity_frame_expansion(self):
        f = build_frame(np.eye(3), np.zeros((3, 3)), np.eye(3), 1.0)
        M = mu_n_sym(f, np.array([1.0, 2.0, 3.0]))
        assert np.allclose(M, [[1, 3, 0], [3, 2, 0], [0, 0, 0]], atol=1e-14)

    def test_zero(self):
        rng = np.random.default_rng(58)
        f = random_frame(rng)
        assert np.allclose(mu_n_sym(f, np.zeros(3)), 0.0)

    def test_defining_formula_symmetry_and_axis(self):
        rng = np.random.default_rng(59)
        for _ in range(25):
            D = random_triad(rng)
            f = random_frame(rng, directors=D)
            mu_n = rng.normal(size=3)
            M = mu_n_sym(f, mu_n)
            direct = f.rotation.T @ (
                np.outer(f.Q1 @ mu_n, D[:, 0]) + np.outer(f.Q2 @ mu_n, D[:, 1])
            )
            assert np.allclose(M, direct, atol=1e-12)
            assert np.allclose(M, M.T, atol=1e-12)
            assert np.allclose(M @ D[:, 2], 0.0, atol=1e-12)

    def test_component_dyad_representation(self):
        # mu_n with components nu on the current directors expands on the
        # reference-plane dyads with the same components
        rng = np.random.default_rng(60)
        for _ in range(10):
            D = random_triad(rng)
            f = random_frame(rng, directors=D)
            nu = rng.normal(size=3)
            d = f.current_directors
            spatial = d @ nu
            B = symmetric_dyads(D)
            expected = nu[0] * B[0] + nu[1] * B[1] + nu[2] * B[2]
            assert np.allclose(mu_n_sym(f, spatial), expected, atol=1e-12)


class TestCondensedStresses:
    def test_all_zero_inputs(self):
        rng = np.random.default_rng(61)
        f = random_frame(rng)
        cs = condensed_stresses(
            f,
            n=np.zeros(3),
            m=np.zeros(3),
            dphi_ds=np.zeros(3),
            m_bar=np.zeros(3),
            F_c=np.eye(3),
            mu_n=np.zeros(3),
        )
        for T in (cs.P_n, cs.P_m, cs.P_g, cs.P_shear, cs.PP):
            assert np.allclose(T, 0.0)

    def test_axial_force_stress(self):
        f = build_frame(np.eye(3), np.zeros((3, 3)), np.eye(3), 1.0)
        e3 = np.array([0.0, 0.0, 1.0])
        cs = condensed_stresses(f, 2.0 * e3, np.zeros(3), e3, np.zeros(3), np.eye(3), np.zeros(3))
        assert np.allclose(cs.P_n, 2.0 * np.outer(e3, e3), atol=1e-14)
        assert np.allclose(cs.P_m, 0.0, atol=1e-14)  # e3 x n = 0 for axial force

    def test_third_order_stress_hand_value(self):
        f = build_frame(np.eye(3), np.zeros((3, 3)), np.eye(3), 1.0)
        m = 0.9
        cs = condensed_stresses(
            f, np.zeros(3), np.array([0, 0, m]), np.zeros(3), np.zeros(3), np.eye(3), np.zeros(3)
        )
        e = np.eye(3)
        expected = 0.5 * m * (
            np.einsum("i,j,k->ijk", e[1], e[0], e[2])
            - np.einsum("i,j,k->ijk", e[0], e[1], e[2])
        )
        assert np.allclose(cs.PP, expected, atol=1e-14)

    def test_third_order_only_contracts_axis_second_derivative(self):
        # PP : S = 0 for any Hessian-like third-order array with S D3 = 0
        rng = np.random.default_rng(62)
        D = random_triad(rng)
        D3 = D[:, 2]
        f = random_frame(rng, directors=D)
        cs = condensed_stresses(
            f, rng.normal(size=3), rng.normal(size=3), rng.normal(size=3),
            rng.normal(size=3), np.eye(3) + 0.1 * rng.normal(size=(3, 3)), rng.normal(size=3),
        )
        S = np.zeros((3, 3, 3))
        for _ in range(4):
            a = rng.normal(size=3)
            b = rng.normal(size=3)
            b -= (b @ D3) * D3
            c = rng.normal(size=3)
            c -= (c @ D3) * D3
            S += np.einsum("i,j,k->ijk", a, b, c) + np.einsum("i,j,k->ikj", a, b, c)
        assert np.allclose(S @ D3, 0.0, atol=1e-13)
        assert abs(np.einsum("ijk,ijk->", cs.PP, S)) < 1e-10

    def test_geometric_term_zero_for_straight_fibers(self):
        rng = np.random.default_rng(63)
        f = random_frame(rng)
        cs = condensed_stresses(
            f, rng.normal(size=3), rng.normal(size=3), rng.normal(size=3),
            rng.normal(size=3), np.eye(3), rng.normal(size=3),
        )
        assert np.allclose(cs.P_g, 0.0)

    def test_geometric_term_formula_with_synthetic_curvature(self):
        rng = np.random.default_rng(64)
        D = random_triad(rng)
        f = random_frame(rng, directors=D)
        m = rng.normal(size=3)
        dD = (rng.normal(size=3), rng.normal(size=3))
        cs = condensed_stresses(
            f, np.zeros(3), m, np.zeros(3), np.zeros(3), np.eye(3), np.zeros(3), dD_ds=dD
        )
        expected = 0.5 * (np.outer(f.P1 @ m, dD[0]) + np.outer(f.P2 @ m, dD[1]))
        assert np.allclose(cs.P_g, expected, atol=1e-13)

    def test_shear_stress_term(self):
        rng = np.random.default_rng(65)
        D = random_triad(rng)
        f = build_frame(quat_to_rotation(random_unit_quat(rng)), np.zeros((3, 3)), D, 0.5)
        nu = rng.normal(size=3)
        F_c = np.eye(3) + 0.2 * rng.normal(size=(3, 3))
        cs = condensed_stresses(f, np.zeros(3), np.zeros(3), np.zeros(3), np.zeros(3), F_c, nu)
        B = symmetric_dyads(D)
        M = nu[0] * B[0] + nu[1] * B[1] + nu[2] * B[2]
        assert np.allclose(cs.P_shear, 0.5 * 0.5 * F_c @ M, atol=1e-13)

    def test_moment_stress_fd_against_rotating_frame(self):
        # P_m's first piece is d/ds of the moment transfer: check [P1' m] term
        rng = np.random.default_rng(66)
        f = random_frame(rng)
        m = rng.normal(size=3)
        cs = condensed_stresses(f, np.zeros(3), m, np.zeros(3), np.zeros(3), np.eye(3), np.zeros(3))
        D = f.reference_directors
        expected = 0.5 * (np.outer(f.P1_rate @ m, D[:, 0]) + np.outer(f.P2_rate @ m, D[:, 1]))
        assert np.allclose(cs.P_m, expected, atol=1e-13)


class TestConstraintDensities:
    def test_exactly_satisfied_constraints(self):
        rng = np.random.default_rng(67)
        D = random_triad(rng)
        q = random_unit_quat(rng)
        R = quat_to_rotation(q)
        f = build_frame(R, np.zeros((3, 3)), D, 1.0)
        phi = rng.normal(size=3)
        g_pos, g_tau, g_n = constraint_densities(f, phi, phi, R)
        assert np.allclose(g_pos, 0.0)
        assert np.allclose(g_tau, 0.0, atol=1e-12)
        assert np.allclose(g_n, 0.0, atol=1e-12)

    def test_any_rotation_satisfies_area_constraint(self):
        rng = np.random.default_rng(68)
        f = random_frame(rng, directors=random_triad(rng))
        Q = quat_to_rotation(random_unit_quat(rng))
        _, _, g_n = constraint_densities(f, np.zeros(3), np.zeros(3), Q)
        assert np.allclose(g_n, 0.0, atol=1e-12)

    def test_uniaxial_stretch_area_density(self):
        f = build_frame(np.eye(3), np.zeros((3, 3)), np.eye(3), 1.0)
        a = 0.3
        _, _, g_n = constraint_densities(f, np.zeros(3), np.zeros(3), np.diag([1 + a, 1.0, 1.0]))
        assert np.allclose(g_n, [0.5 * ((1 + a) ** 2 - 1), 0.0, 0.0], atol=1e-13)

    def test_tau_detects_bending_mismatch(self):
        rng = np.random.default_rng(69)
        D = random_triad(rng)
        q = random_unit_quat(rng)
        R = quat_to_rotation(q)
        f = build_frame(R, np.zeros((3, 3)), D, 1.0)
        d3 = f.current_directors[:, 2]
        F_c = R + 0.01 * np.outer(d3, D[:, 0])
        _, g_tau, _ = constraint_densities(f, np.zeros(3), np.zeros(3), F_c)
        assert np.linalg.norm(g_tau) > 1e-4

    def test_position_density(self):
        rng = np.random.default_rng(70)
        f = random_frame(rng)
        a, b = rng.normal(size=(2, 3))
        g_pos, _, _ = constraint_densities(f, a, b, np.eye(3))
        assert np.allclose(g_pos, a - b)


class TestEndpointMomentStress:
    def test_zero_moment(self):
        rng = np.random.default_rng(71)
        assert np.allclose(endpoint_moment_stress(random_frame(rng), np.zeros(3)), 0.0)

    def test_axial_moment_identity_frame(self):
        f = build_frame(np.eye(3), np.zeros((3, 3)), np.eye(3), 1.0)
        M = 0.025
        S = endpoint_moment_stress(f, np.array([0.0, 0.0, M]))
        e = np.eye(3)
        assert np.allclose(S, 0.5 * M * (np.outer(e[1], e[0]) - np.outer(e[0], e[1])), atol=1e-15)

    def test_transverse_moment_identity_frame(self):
        f = build_frame(np.eye(3), np.zeros((3, 3)), np.eye(3), 1.0)
        M = 0.9
        S = endpoint_moment_stress(f, np.array([M, 0.0, 0.0]))
        e = np.eye(3)
        assert np.allclose(S, M * np.outer(e[2], e[1]), atol=1e-14)


class TestInterfaceIdentity:
    def test_area_constrained_gradient_transfer(self):
        # when F_c maps the section directors to an orthonormal pair and the
        # frame is built from that pair, the multiplier transfer written with
        # the section tensors equals the one written with F_c itself
        rng = np.random.default_rng(72)
        for _ in range(100):
            Dtriad = random_triad(rng)
            D1, D2, D3 = Dtriad[:, 0], Dtriad[:, 1], Dtriad[:, 2]
            F0 = np.eye(3) + 0.4 * rng.normal(size=(3, 3))
            v1, v2 = F0 @ D1, F0 @ D2
            u1 = v1 / np.linalg.norm(v1)
            u2 = v2 - (v2 @ u1) * u1
            u2 /= np.linalg.norm(u2)
            F_c = F0 + np.outer(u1 - v1, D1) + np.outer(u2 - v2, D2)
            R = np.column_stack([u1, u2, np.cross(u1, u2)]) @ Dtriad.T
            f = build_frame(R, np.zeros((3, 3)), Dtriad, 1.0)

            _, _, g_n = constraint_densities(f, np.zeros(3), np.zeros(3), F_c)
            assert np.allclose(g_n, 0.0, atol=1e-12)

            mu_n = rng.normal(size=3)
            G = rng.normal(size=(3, 3))
            lhs = np.einsum(
                "ij,ij->",
                np.outer(f.Q1 @ mu_n, D1) + np.outer(f.Q2 @ mu_n, D2),
                G,
            )
            rhs = np.einsum("ij,ij->", F_c @ mu_n_sym(f, mu_n), G)
            assert np.isclose(lhs, rhs, rtol=1e-12, atol=1e-12)

"""Section-frame coupling algebra for rods embedded in a bulk continuum.

Everything the reduced surface-to-line coupling needs at one centerline
point: the director frame with its transfer tensors P_a / Q_a and their
arc-length rates, the interface stress built from torque-like and
normal-like multipliers, the symmetric multiplier tensor, the condensed
line stresses (including the third-order term contracted with test-function
Hessians), constraint densities, and the endpoint moment stress.
"""

import numpy as np

from .materials import axl

__all__ = [
    "CouplingFrame",
    "build_frame",
    "frame_rate",
    "symmetric_dyads",
    "sigma_assemble",
    "mu_n_sym",
    "CondensedStresses",
    "condensed_stresses",
    "constraint_densities",
    "endpoint_moment_stress",
]


def _transfer_tensors(d1, d2, d3):
    P1 = np.outer(d2, d3) - 2.0 * np.outer(d3, d2)
    P2 = -np.outer(d1, d3) + 2.0 * np.outer(d3, d1)
    Q1 = np.outer(d1, d1) + np.outer(d2, d3)
    Q2 = np.outer(d2, d2) + np.outer(d1, d3)
    return P1, P2, Q1, Q2


class CouplingFrame:
    """Director frame and transfer tensors at one centerline point.

    ``reference_directors`` / ``current_directors`` hold D_i / d_i = R D_i as
    columns.  P1_rate / P2_rate are arc-length derivatives obtained by the
    product rule on the rotated directors, which coincides with the
    commutator form [kappa]x P - P [kappa]x at orthogonal frames.
    """

    __slots__ = (
        "rotation",
        "rotation_rate",
        "reference_directors",
        "current_directors",
        "current_director_rates",
        "P1",
        "P2",
        "Q1",
        "Q2",
        "P1_rate",
        "P2_rate",
        "kappa",
        "circumference",
    )


def build_frame(R, dR_ds, D, circumference):
    """Assemble the coupling frame from rotation, its rate and directors."""
    f = CouplingFrame()
    f.rotation = R
    f.rotation_rate = dR_ds
    f.reference_directors = D
    d = R @ D
    dd = dR_ds @ D
    f.current_directors = d
    f.current_director_rates = dd
    d1, d2, d3 = d[:, 0], d[:, 1], d[:, 2]
    r1, r2, r3 = dd[:, 0], dd[:, 1], dd[:, 2]
    f.P1, f.P2, f.Q1, f.Q2 = _transfer_tensors(d1, d2, d3)
    f.P1_rate = (
        np.outer(r2, d3) + np.outer(d2, r3) - 2.0 * (np.outer(r3, d2) + np.outer(d3, r2))
    )
    f.P2_rate = (
        -(np.outer(r1, d3) + np.outer(d1, r3)) + 2.0 * (np.outer(r3, d1) + np.outer(d3, r1))
    )
    f.kappa = axl(dR_ds @ R.T)
    f.circumference = circumference
    return f


def frame_rate(frame, R_dot, dR_dot):
    """Directional derivative of the frame tensors along (R_dot, dR_dot).

    Returns a plain namespace-like frame carrying the derivatives of the
    current directors, their rates, P1/P2/Q1/Q2 and P1_rate/P2_rate; used by
    the analytic tangent assembly.
    """
    g = CouplingFrame()
    D = frame.reference_directors
    g.rotation = R_dot
    g.rotation_rate = dR_dot
    g.reference_directors = D
    dv = R_dot @ D
    rv = dR_dot @ D
    g.current_directors = dv
    g.current_director_rates = rv
    d = frame.current_directors
    r = frame.current_director_rates
    d1, d2, d3 = d[:, 0], d[:, 1], d[:, 2]
    v1, v2, v3 = dv[:, 0], dv[:, 1], dv[:, 2]
    g.P1 = np.outer(v2, d3) + np.outer(d2, v3) - 2.0 * (np.outer(v3, d2) + np.outer(d3, v2))
    g.P2 = -(np.outer(v1, d3) + np.outer(d1, v3)) + 2.0 * (np.outer(v3, d1) + np.outer(d3, v1))
    g.Q1 = np.outer(v1, d1) + np.outer(d1, v1) + np.outer(v2, d3) + np.outer(d2, v3)
    g.Q2 = np.outer(v2, d2) + np.outer(d2, v2) + np.outer(v1, d3) + np.outer(d1, v3)
    r1, r2, r3 = r[:, 0], r[:, 1], r[:, 2]
    w1, w2, w3 = rv[:, 0], rv[:, 1], rv[:, 2]
    g.P1_rate = (
        np.outer(w2, d3) + np.outer(r2, v3) + np.outer(v2, r3) + np.outer(d2, w3)
        - 2.0 * (np.outer(w3, d2) + np.outer(r3, v2) + np.outer(v3, r2) + np.outer(d3, w2))
    )
    g.P2_rate = (
        -(np.outer(w1, d3) + np.outer(r1, v3) + np.outer(v1, r3) + np.outer(d1, w3))
        + 2.0 * (np.outer(w3, d1) + np.outer(r3, v1) + np.outer(v3, r1) + np.outer(d3, w1))
    )
    g.kappa = None
    g.circumference = 0.0
    return g


def symmetric_dyads(D):
    """Reference-plane dyad basis: D1xD1, D2xD2, D1xD2 + D2xD1."""
    D1, D2 = D[:, 0], D[:, 1]
    return np.stack(
        [
            np.outer(D1, D1),
            np.outer(D2, D2),
            np.outer(D1, D2) + np.outer(D2, D1),
        ]
    )


def sigma_assemble(frame, mu_tau, mu_n):
    """Interface stress from spatial multiplier vectors.

    Sigma = (P_a mu_tau + Q_a mu_n) (x) D_a; annihilates D3 and its
    skew part against the rotation recovers mu_tau exactly.
    """
    D = frame.reference_directors
    v1 = frame.P1 @ mu_tau + frame.Q1 @ mu_n
    v2 = frame.P2 @ mu_tau + frame.Q2 @ mu_n
    return np.outer(v1, D[:, 0]) + np.outer(v2, D[:, 1])


def mu_n_sym(frame, mu_n):
    """Symmetric multiplier tensor R^T (Q_a mu_n (x) D_a) of a spatial mu_n."""
    D = frame.reference_directors
    S = np.outer(frame.Q1 @ mu_n, D[:, 0]) + np.outer(frame.Q2 @ mu_n, D[:, 1])
    return frame.rotation.T @ S


class CondensedStresses:
    """Line-supported stress contributions of one centerline point."""

    __slots__ = ("P_n", "P_m", "P_g", "P_shear", "PP")

    def __init__(self, P_n, P_m, P_g, P_shear, PP):
        self.P_n = P_n
        self.P_m = P_m
        self.P_g = P_g
        self.P_shear = P_shear
        self.PP = PP


def condensed_stresses(frame, n, m, dphi_ds, m_bar, F_c, mu_n, dD_ds=None):
    """All condensed stress terms at one centerline point.

    ``mu_n`` holds the normal-multiplier components on the symmetric
    reference-plane dyads (quaternion-free storage).  ``dD_ds`` are the
    arc-length rates of the in-plane reference directors; None means a
    straight fiber, for which the geometric term vanishes identically.
    """
    D = frame.reference_directors
    D1, D2, D3 = D[:, 0], D[:, 1], D[:, 2]

    P_n = np.outer(n, D3)

    v = np.cross(dphi_ds, n) + m_bar
    P_m = 0.5 * (
        np.outer(frame.P1_rate @ m - frame.P1 @ v, D1)
        + np.outer(frame.P2_rate @ m - frame.P2 @ v, D2)
    )

    if dD_ds is None:
        P_g = np.zeros((3, 3))
    else:
        P_g = 0.5 * (np.outer(frame.P1 @ m, dD_ds[0]) + np.outer(frame.P2 @ m, dD_ds[1]))

    B = symmetric_dyads(D)
    M = mu_n[0] * B[0] + mu_n[1] * B[1] + mu_n[2] * B[2]
    P_shear = 0.5 * frame.circumference * (F_c @ M)

    T = 0.5 * (np.outer(frame.P1 @ m, D1) + np.outer(frame.P2 @ m, D2))
    PP = np.einsum("ij,k->ijk", T, D3)

    return CondensedStresses(P_n, P_m, P_g, P_shear, PP)


def constraint_densities(frame, phi_c, phi_tilde, F_c):
    """Pointwise densities of the three coupling constraints.

    Position: bulk trace minus centerline.  Tau: transfer-tensor-weighted
    mismatch between the mapped and rotated in-plane directors.  Area: the
    rotation-free in-plane right Cauchy-Green deviation on the symmetric
    dyad basis.
    """
    D = frame.reference_directors
    d = frame.current_directors
    g_pos = phi_c - phi_tilde

    g_tau = 0.5 * (
        frame.P1.T @ (F_c @ D[:, 0] - d[:, 0]) + frame.P2.T @ (F_c @ D[:, 1] - d[:, 1])
    )

    C = F_c.T @ F_c - np.eye(3)
    B = symmetric_dyads(D)
    g_n = 0.5 * np.array(
        [np.einsum("ij,ij->", C, B[0]), np.einsum("ij,ij->", C, B[1]), np.einsum("ij,ij->", C, B[2])]
    )
    return g_pos, g_tau, g_n


def endpoint_moment_stress(frame, m_ext):
    """Stress-like endpoint term 1/2 (P_a m_ext) (x) D_a.

    Contracted with the test-function gradient at the fiber ends with the
    end-minus-start sign convention.
    """
    D = frame.reference_directors
    return 0.5 * (
        np.outer(frame.P1 @ m_ext, D[:, 0]) + np.outer(frame.P2 @ m_ext, D[:, 1])
    )

"""Geometrically exact rod kinematics and constitution.

Rotations are parametrized by unconstrained quaternions through the
homogeneous quadratic map R(q) = (q0^2 - q.q) I + 2 q (x) q + 2 q0 [q]_x,
whose polarization `quat_bilinear` supplies all rotation derivatives in
closed form (dR(q)[e] = 2 B(q, e), R' = 2 B(q, q')).
"""

import numpy as np

from .materials import axl, spin

__all__ = [
    "quat_to_rotation",
    "quat_bilinear",
    "quat_multiply",
    "BeamSection",
    "circular_section",
    "beam_strains",
    "beam_resultants",
    "beam_def_gradient",
]

_I3 = np.eye(3)


def quat_to_rotation(q):
    """Rotation tensor of a quaternion (scalar part first; broadcasts).

    Homogeneous of degree two: orthogonal exactly at |q| = 1, no hidden
    normalization, so it stays differentiable in all four components.
    """
    q = np.asarray(q, dtype=float)
    q0 = q[..., 0]
    qv = q[..., 1:]
    sq = (q0**2 - np.einsum("...i,...i->...", qv, qv))[..., None, None]
    return (
        sq * _I3
        + 2.0 * np.einsum("...i,...j->...ij", qv, qv)
        + 2.0 * q0[..., None, None] * spin(qv)
    )


def quat_bilinear(a, b):
    """Symmetric bilinear polarization of `quat_to_rotation`.

    quat_bilinear(q, q) equals quat_to_rotation(q), and 2*quat_bilinear(q, e)
    is its directional derivative at q in direction e.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    a0, av = a[..., 0], a[..., 1:]
    b0, bv = b[..., 0], b[..., 1:]
    sq = (a0 * b0 - np.einsum("...i,...i->...", av, bv))[..., None, None]
    return (
        sq * _I3
        + np.einsum("...i,...j->...ij", av, bv)
        + np.einsum("...i,...j->...ij", bv, av)
        + a0[..., None, None] * spin(bv)
        + b0[..., None, None] * spin(av)
    )


def quat_multiply(a, b):
    """Hamilton product (scalar part first)."""
    a0, av = a[..., 0], a[..., 1:]
    b0, bv = b[..., 0], b[..., 1:]
    s = a0 * b0 - np.einsum("...i,...i->...", av, bv)
    v = a0[..., None] * bv + b0[..., None] * av + np.cross(av, bv)
    return np.concatenate([s[..., None], v], axis=-1)


class BeamSection:
    """Diagonal section constitution of a circular rod."""

    def __init__(self, EA, GA1, GA2, EI1, EI2, GJ, radius):
        self.EA = EA
        self.GA1 = GA1
        self.GA2 = GA2
        self.EI1 = EI1
        self.EI2 = EI2
        self.GJ = GJ
        self.radius = radius
        self.area = np.pi * radius**2
        self.circumference = 2.0 * np.pi * radius
        self.force_stiffness = np.diag([GA1, GA2, EA])
        self.moment_stiffness = np.diag([EI1, EI2, GJ])


def circular_section(youngs, poisson, radius):
    """Section stiffnesses of a solid circular rod (shear correction 1)."""
    if youngs <= 0 or radius <= 0:
        raise ValueError("Young's modulus and radius must be positive")
    if not -1.0 < poisson < 0.5:
        raise ValueError("Poisson ratio must lie in (-1, 0.5)")
    shear_mod = youngs / (2.0 * (1.0 + poisson))
    area = np.pi * radius**2
    inertia = np.pi * radius**4 / 4.0
    return BeamSection(
        EA=youngs * area,
        GA1=shear_mod * area,
        GA2=shear_mod * area,
        EI1=youngs * inertia,
        EI2=youngs * inertia,
        GJ=shear_mod * 2.0 * inertia,
        radius=radius,
    )


def beam_strains(R, dphi_ds, dR_ds, D3):
    """Material strain measures of the rod (broadcasts).

    Returns (Gamma, K): Gamma = R^T phi' - D3 and K = axl(R^T R').
    """
    gamma = np.einsum("...ji,...j->...i", R, dphi_ds) - D3
    curv = axl(np.einsum("...ji,...jk->...ik", R, dR_ds))
    return gamma, curv


def beam_resultants(gamma, curv, section, R):
    """Spatial force and moment resultants from the diagonal section law."""
    n = np.einsum("...ij,jk,...k->...i", R, section.force_stiffness, gamma)
    m = np.einsum("...ij,jk,...k->...i", R, section.moment_stiffness, curv)
    return n, m


def beam_def_gradient(gamma, curv, theta, R, D):
    """Rod deformation gradient at in-section coordinates theta = (t1, t2).

    `D` holds the reference directors as columns.  Used for verification:
    the dual closed form phi' (x) D3 + d_a (x) D_a + t^a d'_a (x) D3 must
    produce the same tensor.
    """
    D3 = D[:, 2]
    in_plane = theta[0] * D[:, 0] + theta[1] * D[:, 1]
    core = (
        np.outer(gamma, D3)
        + np.outer(spin(curv) @ in_plane, D3)
        + _I3
    )
    return R @ core

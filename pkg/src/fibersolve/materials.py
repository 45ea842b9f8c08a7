"""3x3 tensor kernel and hyperelastic constitutive models.

The tensor cross product [A x B]_{iJ} = eps_{imn} eps_{JPQ} A_{mP} B_{nQ}
gives the cofactor H = 1/2 F x F and the determinant J = (1/6)(F x F):F, and
lets all stresses and tangents be written without explicit inverses.  All
functions broadcast over leading axes so whole quadrature batches evaluate in
one call.
"""

import numpy as np

__all__ = [
    "tensor_cross",
    "tensor_cross_operator",
    "cofactor_det",
    "axl",
    "spin",
    "SaintVenantKirchhoff",
    "MooneyRivlinPolyconvex",
    "MooneyRivlinInvariant",
    "first_pk",
    "material_tangent",
]

_EPS = np.zeros((3, 3, 3))
_EPS[0, 1, 2] = _EPS[1, 2, 0] = _EPS[2, 0, 1] = 1.0
_EPS[0, 2, 1] = _EPS[2, 1, 0] = _EPS[1, 0, 2] = -1.0

_I3 = np.eye(3)
_I4 = np.einsum("ik,JL->iJkL", _I3, _I3)

_MIN_VOLUME_RATIO = 1e-12


def tensor_cross(A, B):
    """Tensor cross product of two second-order tensors (broadcasts)."""
    return np.einsum("imn,JPQ,...mP,...nQ->...iJ", _EPS, _EPS, A, B, optimize=True)


def tensor_cross_operator(A):
    """Fourth-order operator T with T:B = tensor_cross(A, B)."""
    return np.einsum("imk,JPL,...mP->...iJkL", _EPS, _EPS, A, optimize=True)


def cofactor_det(F):
    """Cofactor and determinant of F via the tensor cross product."""
    H = 0.5 * tensor_cross(F, F)
    J = np.einsum("...iJ,...iJ->...", H, F) / 3.0
    return H, J


def axl(A):
    """Axial vector of (the skew part of) a second-order tensor."""
    A = np.asarray(A)
    return 0.5 * np.stack(
        [
            A[..., 2, 1] - A[..., 1, 2],
            A[..., 0, 2] - A[..., 2, 0],
            A[..., 1, 0] - A[..., 0, 1],
        ],
        axis=-1,
    )


def spin(a):
    """Skew tensor with spin(a) @ b = a x b."""
    a = np.asarray(a)
    S = np.zeros(a.shape[:-1] + (3, 3))
    S[..., 0, 1] = -a[..., 2]
    S[..., 0, 2] = a[..., 1]
    S[..., 1, 0] = a[..., 2]
    S[..., 1, 2] = -a[..., 0]
    S[..., 2, 0] = -a[..., 1]
    S[..., 2, 1] = a[..., 0]
    return S


def _checked_volume(J):
    if np.any(J <= _MIN_VOLUME_RATIO):
        raise ValueError("non-positive volume ratio: deformation state is inadmissible")
    return J


class SaintVenantKirchhoff:
    """Quadratic Green-Lagrange strain energy with Lame constants from (E, nu)."""

    def __init__(self, youngs, poisson):
        if youngs <= 0:
            raise ValueError("Young's modulus must be positive")
        if not -1.0 < poisson < 0.5:
            raise ValueError("Poisson ratio must lie in (-1, 0.5)")
        self.youngs = float(youngs)
        self.poisson = float(poisson)
        self.lam = youngs * poisson / ((1.0 + poisson) * (1.0 - 2.0 * poisson))
        self.mu = youngs / (2.0 * (1.0 + poisson))

    def _green_strain(self, F):
        return 0.5 * (np.einsum("...kI,...kJ->...IJ", F, F) - _I3)

    def energy(self, F):
        E = self._green_strain(np.asarray(F, dtype=float))
        tr = np.einsum("...II->...", E)
        return 0.5 * self.lam * tr**2 + self.mu * np.einsum("...IJ,...IJ->...", E, E)

    def first_pk(self, F):
        F = np.asarray(F, dtype=float)
        E = self._green_strain(F)
        tr = np.einsum("...II->...", E)
        S = self.lam * tr[..., None, None] * _I3 + 2.0 * self.mu * E
        return np.einsum("...iP,...PJ->...iJ", F, S)

    def material_tangent(self, F):
        F = np.asarray(F, dtype=float)
        E = self._green_strain(F)
        tr = np.einsum("...II->...", E)
        S = self.lam * tr[..., None, None] * _I3 + 2.0 * self.mu * E
        FFt = np.einsum("...iP,...kP->...ik", F, F)
        A = np.einsum("ik,...JL->...iJkL", _I3, S)
        A = A + self.lam * np.einsum("...iJ,...kL->...iJkL", F, F)
        A = A + self.mu * np.einsum("...iL,...kJ->...iJkL", F, F)
        A = A + self.mu * np.einsum("...ik,JL->...iJkL", FFt, _I3)
        return A


class _CofactorVolumetricModel:
    """Shared stress/tangent structure for models of the form

    Psi = a1 F:F + a2 H:H + g(J)

    with P = 2 a1 F + 2 a2 H x F + g'(J) H and the corresponding analytic
    tangent.  Subclasses provide a1, a2 and the volumetric function g.
    """

    a1 = 0.0
    a2 = 0.0

    def _g(self, J):
        raise NotImplementedError

    def _g1(self, J):
        raise NotImplementedError

    def _g2(self, J):
        raise NotImplementedError

    def energy(self, F):
        F = np.asarray(F, dtype=float)
        H, J = cofactor_det(F)
        _checked_volume(J)
        return (
            self.a1 * np.einsum("...iJ,...iJ->...", F, F)
            + self.a2 * np.einsum("...iJ,...iJ->...", H, H)
            + self._g(J)
        )

    def first_pk(self, F):
        F = np.asarray(F, dtype=float)
        H, J = cofactor_det(F)
        _checked_volume(J)
        g1 = np.asarray(self._g1(J))[..., None, None]
        return 2.0 * self.a1 * F + 2.0 * self.a2 * tensor_cross(H, F) + g1 * H

    def material_tangent(self, F):
        F = np.asarray(F, dtype=float)
        H, J = cofactor_det(F)
        _checked_volume(J)
        TF = tensor_cross_operator(F)
        TH = tensor_cross_operator(H)
        comp = np.einsum("...iJmP,...mPkL->...iJkL", TF, TF, optimize=True)
        HH = np.einsum("...iJ,...kL->...iJkL", H, H)
        g1 = np.asarray(self._g1(J))[..., None, None, None, None]
        g2 = np.asarray(self._g2(J))[..., None, None, None, None]
        return 2.0 * self.a1 * _I4 + 2.0 * self.a2 * (comp + TH) + g2 * HH + g1 * TF


class MooneyRivlinPolyconvex(_CofactorVolumetricModel):
    """Mooney-Rivlin energy in (F, H, J) form, convex in all 19 variables."""

    def __init__(self, alpha, beta, lam):
        if alpha < 0 or beta < 0 or lam < 0:
            raise ValueError("material parameters must be non-negative")
        self.alpha = float(alpha)
        self.beta = float(beta)
        self.lam = float(lam)
        self.a1 = self.alpha
        self.a2 = self.beta

    def _g(self, J):
        return (
            -2.0 * self.alpha * np.log(J)
            - 4.0 * self.beta * J
            + 0.5 * self.lam * (J - 1.0) ** 2
            - 3.0 * (self.alpha + self.beta)
        )

    def _g1(self, J):
        return -2.0 * self.alpha / J - 4.0 * self.beta + self.lam * (J - 1.0)

    def _g2(self, J):
        return 2.0 * self.alpha / J**2 + self.lam


class MooneyRivlinInvariant(_CofactorVolumetricModel):
    """Two-coefficient Mooney-Rivlin with c, d coupled so the reference is stress-free."""

    def __init__(self, c1, c2):
        if c1 <= 0 or c2 <= 0:
            raise ValueError("c1 and c2 must be positive")
        self.c1 = float(c1)
        self.c2 = float(c2)
        self.c = (2.0 / 3.0) * (c1 + c2)
        self.d = 2.0 * (c1 + 2.0 * c2)
        self.a1 = self.c1
        self.a2 = self.c2

    def _g(self, J):
        return self.c * (J - 1.0) ** 2 - self.d * np.log(J) - 3.0 * (self.c1 + self.c2)

    def _g1(self, J):
        return 2.0 * self.c * (J - 1.0) - self.d / J

    def _g2(self, J):
        return 2.0 * self.c + self.d / J**2


def first_pk(model, F):
    """First Piola-Kirchhoff stress of ``model`` at deformation gradient ``F``."""
    return model.first_pk(F)


def material_tangent(model, F):
    """Analytic fourth-order tangent dP/dF of ``model`` at ``F``."""
    return model.material_tangent(F)

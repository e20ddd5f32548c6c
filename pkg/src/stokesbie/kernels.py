"""Closed-form kernels for the forced Stokes boundary integral formulation.

Conventions shared by every function here:

* ``q`` is the integration (source) point, ``p`` the evaluation point, and
  the separation is ``R = q - p`` with ``r = |R|``.
* Derivative kernels differentiate with respect to the evaluation point
  ``p``; negate to differentiate with respect to ``q`` instead.
* Inputs broadcast over leading axes, so ``q``, ``p`` and normals may be
  ``(..., 3)`` stacks.  Component axes come last in the output.
* A zero separation raises ``ValueError``.  Quadrature is responsible for
  keeping evaluation points off the singularity.

The velocity kernel U is the free-space response to a unit point force, the
stress kernel T is its traction counterpart, and H is the biharmonic-type
potential satisfying ``mu * lap H = U`` with ``div H = 0`` column-wise.  The
plane-strain (2D) variants at the bottom drop all normalization constants;
they back the identity self-checks only, never a solver path.
"""

from __future__ import annotations

import numpy as np

_EYE3 = np.eye(3)
_EYE2 = np.eye(2)


def _separation(q, p, dim=3):
    """Return (R, r) for R = q - p, raising on coincident points."""
    q = np.asarray(q, dtype=float)
    p = np.asarray(p, dtype=float)
    rv = q - p
    if rv.shape[-1] != dim:
        raise ValueError(f"expected trailing axis of length {dim}, got {rv.shape}")
    r2 = np.einsum("...i,...i->...", rv, rv)
    if np.any(r2 == 0.0):
        raise ValueError("zero separation in kernel evaluation")
    return rv, np.sqrt(r2)


def stokeslet(q, p, mu=1.0):
    """Velocity kernel U_kj: response in direction k to a unit force along j.

    U_kj = (1 / (8 pi mu)) * (delta_kj / r + R_k R_j / r^3).
    Symmetric in (k, j) and even in R, so U(q, p) = U(p, q).
    """
    rv, r = _separation(q, p)
    inv_r = 1.0 / r
    out = _EYE3 * inv_r[..., None, None]
    out = out + rv[..., :, None] * rv[..., None, :] * (inv_r**3)[..., None, None]
    return out / (8.0 * np.pi * mu)


def stresslet(q, p):
    """Stress kernel T_ijk = -(3 / (4 pi)) R_i R_j R_k / r^5.

    Fully symmetric in (i, j, k); contracting with a unit normal over j
    gives the traction of the unit point-force flow along k.  Independent
    of viscosity.
    """
    rv, r = _separation(q, p)
    coef = -3.0 / (4.0 * np.pi) / (r**5)
    return (
        coef[..., None, None, None]
        * rv[..., :, None, None]
        * rv[..., None, :, None]
        * rv[..., None, None, :]
    )


def stresslet_normal(q, p, normal_q):
    """T_ijk contracted with n_j(q): the (i, k) traction matrix.

    Equals -(3 / (4 pi)) (n . R) R_i R_k / r^5, symmetric in (i, k).
    """
    rv, r = _separation(q, p)
    normal_q = np.asarray(normal_q, dtype=float)
    ndr = np.einsum("...i,...i->...", normal_q, rv)
    coef = -3.0 / (4.0 * np.pi) * ndr / (r**5)
    return coef[..., None, None] * rv[..., :, None] * rv[..., None, :]


def hfun(q, p, mu=1.0):
    """Potential kernel H_kj = (1 / (32 pi mu^2)) (3 r delta_kj - R_k R_j / r).

    Satisfies mu * lap_q H_kj = U_kj and d/dq_k H_kj = 0.
    """
    rv, r = _separation(q, p)
    out = 3.0 * _EYE3 * r[..., None, None]
    out = out - rv[..., :, None] * rv[..., None, :] / r[..., None, None]
    return out / (32.0 * np.pi * mu**2)


# The paper-facing pair (velocity, stress) of the potential flow: the flow
# whose velocity column j is H_.j has zero pressure, so its traction comes
# solely from the strain rate of H.
h_velocity = hfun


def h_stress(q, p, mu=1.0):
    """Stress sigma_kjl of the potential flow with velocity column H_.j.

    sigma_kjl = (1 / (16 pi mu)) * (R_k R_l R_j / r^3
                + (R_l delta_kj + R_k delta_jl - R_j delta_kl) / r).
    Contract with n_l to get the traction on a surface.
    """
    rv, r = _separation(q, p)
    inv_r = 1.0 / r
    rrr = (
        rv[..., :, None, None]
        * rv[..., None, :, None]
        * rv[..., None, None, :]
        * (inv_r**3)[..., None, None, None]
    )
    mixed = (
        rv[..., None, None, :] * _EYE3[:, :, None]
        + rv[..., :, None, None] * _EYE3[None, :, :]
        - rv[..., None, :, None] * _EYE3[:, None, :]
    ) * inv_r[..., None, None, None]
    return (rrr + mixed) / (16.0 * np.pi * mu)


def h_traction(q, p, normal_q, mu=1.0):
    """Traction t_kj = sigma_kjl n_l of the potential flow columns."""
    sig = h_stress(q, p, mu)
    normal_q = np.asarray(normal_q, dtype=float)
    return np.einsum("...kjl,...l->...kj", sig, normal_q)


def hfun_normal_derivative(q, p, normal_q, mu=1.0):
    """Directional derivative of H along the unit normal at q.

    dH_kj/dn = (1 / (32 pi mu^2 r)) * (3 (n.R) delta_kj
               - (n_k R_j + n_j R_k) + (n.R) R_k R_j / r^2).
    Bounded as r -> 0 on flat geometry since n.R vanishes there.
    """
    rv, r = _separation(q, p)
    normal_q = np.asarray(normal_q, dtype=float)
    ndr = np.einsum("...i,...i->...", normal_q, rv)
    out = 3.0 * ndr[..., None, None] * _EYE3
    out = out - (
        normal_q[..., :, None] * rv[..., None, :]
        + normal_q[..., None, :] * rv[..., :, None]
    )
    out = out + (ndr / r**2)[..., None, None] * rv[..., :, None] * rv[..., None, :]
    return out / (32.0 * np.pi * mu**2 * r[..., None, None])


def stokeslet_deriv(q, p, mu=1.0):
    """dU_kj/dp_m, returned as an (..., k, j, m) stack.

    (1 / (8 pi mu)) * (delta_kj R_m - delta_km R_j - delta_jm R_k
                       + 3 R_k R_j R_m / r^2) / r^3.
    """
    rv, r = _separation(q, p)
    inv_r3 = 1.0 / r**3
    out = _EYE3[:, :, None] * rv[..., None, None, :]
    out = out - _EYE3[:, None, :] * rv[..., None, :, None]
    out = out - _EYE3[None, :, :] * rv[..., :, None, None]
    out = out + (3.0 / r**2)[..., None, None, None] * (
        rv[..., :, None, None] * rv[..., None, :, None] * rv[..., None, None, :]
    )
    return out * inv_r3[..., None, None, None] / (8.0 * np.pi * mu)


def stresslet_deriv(q, p):
    """dT_ijk/dp_m as an (..., i, j, k, m) stack.

    -(3 / (4 pi)) * (-(delta_im R_j R_k + delta_jm R_i R_k
                     + delta_km R_i R_j) / r^5 + 5 R_i R_j R_k R_m / r^7).
    """
    rv, r = _separation(q, p)
    inv_r5 = 1.0 / r**5
    d_im = _EYE3[:, None, None, :] * (rv[..., None, :, None, None] * rv[..., None, None, :, None])
    d_jm = _EYE3[None, :, None, :] * (rv[..., :, None, None, None] * rv[..., None, None, :, None])
    d_km = _EYE3[None, None, :, :] * (rv[..., :, None, None, None] * rv[..., None, :, None, None])
    rrrr = (
        rv[..., :, None, None, None]
        * rv[..., None, :, None, None]
        * rv[..., None, None, :, None]
        * rv[..., None, None, None, :]
    )
    out = -(d_im + d_jm + d_km) * inv_r5[..., None, None, None, None]
    out = out + (5.0 / r**7)[..., None, None, None, None] * rrrr
    return -3.0 / (4.0 * np.pi) * out


def stresslet_normal_deriv(q, p, normal_q):
    """d/dp_m of the normal-contracted stresslet, as an (..., i, k, m) stack.

    Equals stresslet_deriv contracted with n_j over the second index, with
    the contraction done analytically:
    -(3 / (4 pi)) * (-(delta_im (R.n) R_k + n_m R_i R_k
                     + delta_km (R.n) R_i) / r^5 + 5 R_i R_k R_m (R.n) / r^7).
    """
    rv, r = _separation(q, p)
    n = np.asarray(normal_q, dtype=float)
    ndr = np.einsum("...i,...i->...", n, rv)
    inv_r5 = 1.0 / r**5
    rr = rv[..., :, None] * rv[..., None, :]
    out = -(_EYE3[:, None, :] * (ndr[..., None] * rv)[..., None, :, None]
            + n[..., None, None, :] * rr[..., :, :, None]
            + _EYE3[None, :, :] * (ndr[..., None] * rv)[..., :, None, None])
    out = out + (5.0 * ndr / r**2)[..., None, None, None] * (
        rr[..., :, :, None] * rv[..., None, None, :]
    )
    return -3.0 / (4.0 * np.pi) * out * inv_r5[..., None, None, None]


def hfun_deriv(q, p, mu=1.0):
    """dH_kj/dp_m as an (..., k, j, m) stack.

    (1 / (32 pi mu^2)) * (-3 delta_kj R_m + delta_km R_j + delta_jm R_k
                          - R_k R_j R_m / r^2) / r.
    """
    rv, r = _separation(q, p)
    out = -3.0 * _EYE3[:, :, None] * rv[..., None, None, :]
    out = out + _EYE3[:, None, :] * rv[..., None, :, None]
    out = out + _EYE3[None, :, :] * rv[..., :, None, None]
    out = out - (1.0 / r**2)[..., None, None, None] * (
        rv[..., :, None, None] * rv[..., None, :, None] * rv[..., None, None, :]
    )
    return out / (32.0 * np.pi * mu**2 * r[..., None, None, None])


def _hfun_normal_derivative_dp(q, p, normal_q, mu=1.0):
    """d/dp_m of hfun_normal_derivative, as an (..., k, j, m) stack.

    Internal helper for the volume-cancellation diagnostic; not part of the
    formulation itself.
    """
    rv, r = _separation(q, p)
    n = np.asarray(normal_q, dtype=float)
    ndr = np.einsum("...i,...i->...", n, rv)
    inv_r = 1.0 / r
    inv_r3 = inv_r**3
    rr = rv[..., :, None] * rv[..., None, :]
    out = 3.0 * _EYE3[:, :, None] * (n * inv_r[..., None])[..., None, None, :]
    out = out - 3.0 * _EYE3[:, :, None] * (ndr * inv_r3)[..., None, None, None] * rv[..., None, None, :]
    out = out - (
        _EYE3[:, None, :] * n[..., None, :, None] + _EYE3[None, :, :] * n[..., :, None, None]
    ) * inv_r[..., None, None, None]
    out = out + (
        n[..., :, None, None] * rv[..., None, :, None] + n[..., None, :, None] * rv[..., :, None, None]
    ) * (inv_r3[..., None, None, None] * rv[..., None, None, :])
    out = out + inv_r3[..., None, None, None] * rr[..., None] * n[..., None, None, :]
    out = out + (ndr * inv_r3)[..., None, None, None] * (
        _EYE3[:, None, :] * rv[..., None, :, None] + _EYE3[None, :, :] * rv[..., :, None, None]
    )
    out = out - 3.0 * (ndr * inv_r3 * inv_r**2)[..., None, None, None] * rr[..., None] * rv[..., None, None, :]
    return -out / (32.0 * np.pi * mu**2)


def point_source_velocity(q, p_source, mu=1.0, column=0):
    """Velocity at q of a unit point force at p_source along axis `column`."""
    return stokeslet(q, p_source, mu)[..., :, column]


def point_source_traction(q, p_source, normal_q, column=0):
    """Traction at q (normal n(q)) of the point-force flow along `column`."""
    t = stresslet(q, p_source)
    normal_q = np.asarray(normal_q, dtype=float)
    return np.einsum("...ijk,...j->...ik", t, normal_q)[..., column]


def stokeslet_pressure(q, p_source, column=0):
    """Pressure of the point-force flow: R_c / (4 pi r^3).

    Only the finite-difference stress oracle consumes this; the traction
    kernel T already folds the pressure in.
    """
    rv, r = _separation(q, p_source)
    return rv[..., column] / (4.0 * np.pi * r**3)


def laplace_green(q, p):
    """Free-space Laplace kernel G = 1 / (4 pi r)."""
    _, r = _separation(q, p)
    return 1.0 / (4.0 * np.pi * r)


def laplace_green_dn(q, p, normal_q):
    """Normal-weighted Laplace kernel (n . R) / (4 pi r^3).

    Sign convention: this equals n . grad_p G, the derivative in the
    evaluation point.  The Green representation of an interior harmonic
    function phi reads
        phi(p) = S[flux](p) + D[phi](p)
    with S the single layer over laplace_green and D the integral of
    phi * laplace_green_dn.
    """
    rv, r = _separation(q, p)
    normal_q = np.asarray(normal_q, dtype=float)
    ndr = np.einsum("...i,...i->...", normal_q, rv)
    return ndr / (4.0 * np.pi * r**3)


def stokeslet_2d(q, p):
    """Plane-strain velocity kernel, normalization dropped.

    U_kj = -delta_kj log r + R_k R_j / r^2.
    """
    rv, r = _separation(q, p, dim=2)
    out = -_EYE2 * np.log(r)[..., None, None]
    out = out + rv[..., :, None] * rv[..., None, :] / (r**2)[..., None, None]
    return out


def hfun_2d(q, p):
    """Plane-strain potential kernel, normalization dropped.

    H_kj = (1/32) * (delta_kj r^2 (17 - 12 log r)
                     + 2 R_k R_j (4 log r - 5)).
    Satisfies lap H = U and div H = 0 exactly with these scalings.
    """
    rv, r = _separation(q, p, dim=2)
    logr = np.log(r)
    out = _EYE2 * (r**2 * (17.0 - 12.0 * logr))[..., None, None]
    out = out + 2.0 * rv[..., :, None] * rv[..., None, :] * (4.0 * logr - 5.0)[..., None, None]
    return out / 32.0

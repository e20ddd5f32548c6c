"""Boundary velocity gradients by a two-sided limit difference.

Differentiating the flow representation gives a gradient integral I(X)
that jumps across the surface.  Evaluating it at mirrored offset points
X = P -/+ eps nu (fluid side first) and extrapolating the difference to
eps -> 0 isolates the jump, which is the velocity gradient at P.
Everything continuous across the surface cancels in the extrapolated
difference up to O(eps^3): the far-field part of the integral and the
volume potential of a continuous forcing both drop out, so only elements
within a few diameters of P are integrated, each by fan quadrature about
the point nearest P with geometric radial grading.
"""

import numpy as np
from scipy.sparse.linalg import splu

from . import kernels
from .mesh import mass_matrix
from .quadrature import (_subdivide4, closest_point_barycentric,
                         find_near_pairs, gauss_triangle,
                         polar_stencil_moments, run_chunks, surface_potential)

EPS_SCHEDULE = (0.5, 0.25, 0.125)   # offsets in units of the local node spacing
OUTER_DEGREE = 1                    # projection rule per subdivided child
OUTER_LEVELS = 1                    # 4**levels children: 4 centroids per element
NEAR_CUTOFF = 2.0                   # element diameters kept in the difference
POLAR_RADIAL = 8
POLAR_ANGULAR = 16


def extrapolation_weights(schedule, power=1):
    """Richardson weights of the offset schedule: Lagrange at zero in e^power.

    The default fits the difference as D0 + c1 e + c2 e^2 + ...; for a
    three-entry schedule the weights then annihilate both the linear and
    the quadratic term.  Killing the linear term is load-bearing: the
    far-field and volume contributions to the mirrored difference are odd
    in e at leading order, so these weights let both be skipped entirely.
    The weights depend only on the ratios of the schedule, so one weight
    vector serves every surface point even though the absolute offsets
    vary locally.  A single-entry schedule returns [1.0].
    """
    s = np.asarray(schedule, dtype=float) ** power
    w = np.empty_like(s)
    for i in range(len(s)):
        others = np.delete(s, i)
        w[i] = np.prod(others / (others - s[i]))
    return w


def lsq_extrapolation_weights(schedule, fit_degree=2):
    """Least-squares Richardson weights: value at zero of the best
    polynomial fit of the given degree through the schedule evaluations.

    With more offsets than fit coefficients this damps evaluation noise
    while still annihilating every polynomial term up to the fit degree,
    so the far-field and volume skips stay valid.
    """
    s = np.asarray(schedule, dtype=float)
    if len(s) <= fit_degree:
        raise ValueError("need more schedule entries than the fit degree")
    v = np.vander(s, fit_degree + 1, increasing=True)
    return np.linalg.pinv(v)[0]


def gradient_kernels(mu):
    """Derivative kernels reshaped to (..., 9, 3) for potential machinery.

    First factor index is the flattened (component k, direction m) pair;
    the last contracts with the density: traction for the single-layer
    derivative, velocity for the normal-contracted stresslet derivative.
    """

    def kern_du(q, p, nq):
        d = kernels.stokeslet_deriv(q, p, mu)            # (..., k, j, m)
        d = np.swapaxes(d, -1, -2)                       # (..., k, m, j)
        return d.reshape(d.shape[:-3] + (9, 3))

    def kern_dt(q, p, nq):
        d = kernels.stresslet_normal_deriv(q, p, nq)     # (..., i, k, m)
        d = np.moveaxis(d, -3, -1)                       # (..., k, m, i)
        return d.reshape(d.shape[:-3] + (9, 3))

    return kern_du, kern_dt


def offset_geometry(mesh, degree=OUTER_DEGREE, levels=0):
    """Projection-rule points with interpolated unit normals and spacing.

    Returns (points (m, g, 3), bary (g, 3), weights (g,), normals
    (m, g, 3), spacing (m, g)).  The interpolated vertex normal defines
    the offset direction; vertex spacing sets the local offset scale.
    With ``levels`` > 0 the rule is applied on a uniform 4**levels
    subdivision of each element, which keeps every sample point away
    from the element edges where the offset integrand varies fastest.
    """
    rule = gauss_triangle(degree)
    psi, w = rule.points, rule.weights
    if levels:
        corners = np.eye(3)[None, :, :]
        for _ in range(levels):
            corners = _subdivide4(corners)
        psi = np.einsum("ga,kar->kgr", psi, corners).reshape(-1, 3)
        w = np.tile(w / len(corners), len(corners))
    pts = np.einsum("ga,mac->mgc", psi, mesh.vertices[mesh.triangles])
    vn = mesh.vertex_normals()
    sp = mesh.vertex_spacing()
    tri = mesh.triangles
    nu = np.einsum("ga,mac->mgc", psi, vn[tri])
    nu /= np.linalg.norm(nu, axis=-1, keepdims=True)
    h = np.einsum("ga,ma->mg", psi, sp[tri])
    return pts, psi, w, nu, h


def _fan_levels(verts, apex_bary, dist):
    """Radial grading depth: resolve the fan down to the target distance."""
    apex = np.einsum("pa,pac->pc", apex_bary, verts)
    extent = np.linalg.norm(verts - apex[:, None, :], axis=2).max(axis=1)
    ratio = extent / np.maximum(dist, 1e-30)
    return np.clip(np.ceil(np.log2(np.maximum(ratio, 1.0))).astype(int) + 1, 1, 24)


def limit_difference_rhs(solution, *, schedule=EPS_SCHEDULE,
                         cutoff=NEAR_CUTOFF, include_far=False,
                         volume_term=None, degree=5,
                         outer_degree=OUTER_DEGREE, outer_levels=OUTER_LEVELS,
                         fit_degree=None,
                         n_rad=POLAR_RADIAL, n_theta=POLAR_ANGULAR,
                         threads=1):
    """Galerkin right-hand sides (n, 9) of the limit-difference equation.

    Evaluates the extrapolated mirrored difference of the representation
    derivative at interior rule points of every element, then tests it
    against the nodal basis.  Column K = 3 k + m holds the data for
    du_k/dx_m.  ``include_far`` adds the plain-rule far field into every
    offset evaluation; the stencil cancels it analytically, so this is a
    diagnostic, not an improvement.  ``volume_term`` maps points to
    (p, 3, 3) volume-derivative values and exists for the same
    cancellation diagnostic.
    """
    ops = solution.operators
    mesh = ops.mesh
    tau = solution.traction
    vel = solution.velocity
    pts, psi, w_rule, nu, h = offset_geometry(mesh, outer_degree, outer_levels)
    m, g = pts.shape[:2]
    n_pts = m * g
    flat_pts = pts.reshape(-1, 3)
    flat_nu = nu.reshape(-1, 3)
    flat_h = h.reshape(-1)

    schedule = np.asarray(schedule, dtype=float)
    if fit_degree is None:
        cw = extrapolation_weights(schedule)
    else:
        cw = lsq_extrapolation_weights(schedule, fit_degree)
    # Stencil over the 2 * len(schedule) offset points: fluid side (-eps)
    # minus the other side, each extrapolated to eps -> 0.
    stencil = np.concatenate([cw, -cw])

    offs = (flat_h[:, None] * schedule[None, :])[:, :, None] * flat_nu[:, None, :]
    x_points = np.concatenate([flat_pts[:, None, :] - offs,
                               flat_pts[:, None, :] + offs], axis=1)  # (n_pts, 2S, 3)

    pairs, dist = find_near_pairs(mesh, flat_pts, cutoff, return_dist=True)
    pi, ei = pairs[:, 0], pairs[:, 1]
    tri = mesh.triangles[ei]
    verts = mesh.vertices[tri]
    nrm = mesh.tri_normals[ei]
    apex_bary = closest_point_barycentric(verts, flat_pts[pi])
    gap = np.sqrt(dist**2 + (flat_h[pi] * schedule.min())**2)
    levels = _fan_levels(verts, apex_bary, gap)

    kern_du, kern_dt = gradient_kernels(ops.mu)
    d0 = np.zeros((n_pts, 9))
    # Fan resolution tiers by separation: the rate constant of the fan rule
    # is the gap over the fan extent, so distant pairs need far fewer nodes.
    rel = dist / mesh.tri_diameters[ei]
    tiers = [(rel < 0.25, n_rad, n_theta),
             ((rel >= 0.25) & (rel < 0.6), max(n_rad - 2, 4), max(n_theta - 4, 8)),
             (rel >= 0.6, max(n_rad - 4, 4), max(n_theta - 8, 8))]
    for sel, nr, nt in tiers:
        if not sel.any():
            continue
        p_s, t_s = pi[sel], tri[sel]
        mom_u = polar_stencil_moments(verts[sel], apex_bary[sel], x_points[p_s],
                                      stencil, kern_du, nrm[sel], levels[sel],
                                      n_rad=nr, n_theta=nt)
        mom_t = polar_stencil_moments(verts[sel], apex_bary[sel], x_points[p_s],
                                      stencil, kern_dt, nrm[sel], levels[sel],
                                      n_rad=nr, n_theta=nt)
        np.add.at(d0, p_s, np.einsum("pakj,paj->pk", mom_u, tau[t_s])
                  - np.einsum("pakj,paj->pk", mom_t, vel[t_s]))

    if include_far:
        # The offsets move each point by at most about half a diameter, so
        # a slightly inflated radius keeps every fan pair excludable.
        for s in range(x_points.shape[1]):
            iu = surface_potential(mesh, x_points[:, s], kern_du, tau,
                                   degree=degree, near_factor=cutoff + 0.6,
                                   exclude_pairs=pairs, threads=threads)
            it = surface_potential(mesh, x_points[:, s], kern_dt, vel,
                                   degree=degree, near_factor=cutoff + 0.6,
                                   exclude_pairs=pairs, threads=threads)
            d0 += stencil[s] * (iu - it)
    if volume_term is not None:
        for s in range(x_points.shape[1]):
            d0 += stencil[s] * volume_term(x_points[:, s]).reshape(n_pts, 9)

    b = np.einsum("g,ga,mgK->maK", w_rule, psi, d0.reshape(m, g, 9))
    b *= mesh.tri_areas[:, None, None]
    rhs = np.zeros((mesh.n_vertices, 9))
    for a in range(3):
        np.add.at(rhs, mesh.triangles[:, a], b[:, a])
    return rhs


def solve_gradients(mesh, rhs):
    """Nodal gradient (n, 3, 3) from Galerkin right-hand sides (n, 9).

    One sparse LU of the mass matrix serves all nine component solves.
    """
    rhs = np.asarray(rhs, dtype=float)
    if rhs.shape != (mesh.n_vertices, 9):
        raise ValueError(f"rhs must be ({mesh.n_vertices}, 9)")
    lu = splu(mass_matrix(mesh).tocsc())
    grad = np.column_stack([lu.solve(rhs[:, k]) for k in range(9)])
    return grad.reshape(mesh.n_vertices, 3, 3)


def limit_difference_gradient(solution, **kwargs):
    """Recovered nodal velocity gradient (n, 3, 3) with entries du_k/dx_m.

    Convenience composition of :func:`limit_difference_rhs` and
    :func:`solve_gradients`.
    """
    mesh = solution.operators.mesh
    return solve_gradients(mesh, limit_difference_rhs(solution, **kwargs))


def divergence_ms(grad):
    """Mean-square nodal trace of a recovered gradient: zero for
    incompressible fields up to discretization error."""
    tr = np.einsum("nkk->n", np.asarray(grad, dtype=float))
    return float(np.sqrt((tr**2).mean()))


def stokeslet_flow_gradient(points, source, mu=1.0, column=0):
    """Exact du_k/dx_m of a unit point-force flow, as (n, 3, 3)."""
    return kernels.stokeslet_deriv(np.asarray(source, dtype=float),
                                   np.asarray(points, dtype=float),
                                   mu)[..., :, column, :]


def h_flow_gradient(points, source, mu=1.0, column=0):
    """Exact du_k/dx_m of the potential-kernel flow column, as (n, 3, 3)."""
    return kernels.hfun_deriv(np.asarray(source, dtype=float),
                              np.asarray(points, dtype=float),
                              mu)[..., :, column, :]


def volume_gradient_term(field, extension, mu=1.0, *, degree=5, threads=1,
                         source_chunk=4096):
    """Pointwise gradient of the volume potential, for the cancellation check.

    Returns a callable mapping (p, 3) points to (p, 3, 3) values of
    d/dx_m of the split volume potential: H boundary derivative terms plus
    the grid-sum derivative of the remainder.  Continuous across the
    surface, so feeding it to limit_difference_gradient must change
    nothing beyond discretization scale.
    """
    mesh = extension.mesh

    def kern_dhn(q, p, nq):
        d = kernels._hfun_normal_derivative_dp(q, p, nq, mu)   # (..., k, j, m)
        d = np.swapaxes(d, -1, -2)
        return d.reshape(d.shape[:-3] + (9, 3))

    def kern_dh(q, p, nq):
        d = kernels.hfun_deriv(q, p, mu)
        d = np.swapaxes(d, -1, -2)
        return d.reshape(d.shape[:-3] + (9, 3))

    sel = field.inside & np.any(field.values != 0.0, axis=1)
    src = field.grid.vertex_coords()[sel]
    stren = field.grid.vertex_weights()[sel, None] * field.values[sel]

    def term(points):
        points = np.atleast_2d(np.asarray(points, dtype=float))
        bnd = mu * (surface_potential(mesh, points, kern_dhn, extension.dirichlet,
                                      degree=degree, threads=threads)
                    - surface_potential(mesh, points, kern_dh, extension.flux,
                                        degree=degree, threads=threads))

        def chunk_sum(sl):
            vals = kernels.stokeslet_deriv(src[sl][None, :, :],
                                           points[:, None, :], mu)
            return np.einsum("pskjm,sj->pkm", vals, stren[sl])

        slices = [slice(i, i + source_chunk) for i in range(0, len(src), source_chunk)]
        acc = bnd.reshape(len(points), 3, 3).copy()
        for part in run_chunks(chunk_sum, slices, threads):
            acc += part
        return acc

    return term

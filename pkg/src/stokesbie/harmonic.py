"""Componentwise harmonic extension of boundary data.

The body-force split needs, for each component of the boundary force
data, the harmonic function matching it on the surface together with its
normal flux.  The flux comes from a direct Galerkin boundary solve of
the Laplace Green identity; interior values then follow from the same
identity evaluated off the surface:

    phi(x) = int_S [ G(q, x) flux(q) + phi(q) dG/dn(q, x) ] dS_q

with the mesh normals pointing out of the domain.
"""

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from . import kernels
from .mesh import mass_matrix
from .quadrature import (DEFAULT_CLOSE_DEGREE, DEFAULT_POINT_TOL,
                         DEFAULT_REGULAR_DEGREE, DEFAULT_SINGULAR_ORDER,
                         surface_potential)
from .galerkin import OperatorSpec, SolverError, assemble_pair_operators


def _kern_g(q, p, nq):
    return kernels.laplace_green(q, p)


def _kern_gn(q, p, nq):
    return kernels.laplace_green_dn(q, p, nq)


@dataclass
class LaplaceOperators:
    """Dense Galerkin Laplace operators on one mesh.

    ``single_layer`` is the (n, n) matrix of the 1/(4 pi r) kernel and
    ``double_layer`` the tested interior-limit combination (M/2 minus the
    principal value of the normal-derivative kernel) whose rows sum to
    zero, so constants are in its null space exactly.
    """

    mesh: object
    single_layer: np.ndarray
    double_layer: np.ndarray
    mass: object


def assemble_laplace_operators(mesh, *, degree=DEFAULT_REGULAR_DEGREE,
                               close_degree=DEFAULT_CLOSE_DEGREE,
                               singular_order=DEFAULT_SINGULAR_ORDER, threads=1):
    specs = [
        OperatorSpec("G", _kern_g, scalar=True, parity="even", coincident="singular"),
        OperatorSpec("Gn", _kern_gn, scalar=True, parity="directional", coincident="zero"),
    ]
    mats = assemble_pair_operators(mesh, specs, degree=degree, close_degree=close_degree,
                                   singular_order=singular_order, threads=threads)
    mass = mass_matrix(mesh)
    dl = 0.5 * mass.toarray() - mats["Gn"]
    # Constants are harmonic with zero flux: force exact zero row sums.
    idx = np.arange(mesh.n_vertices)
    dl[idx, idx] -= dl.sum(axis=1)
    return LaplaceOperators(mesh, mats["G"], dl, mass)


@dataclass
class HarmonicExtension:
    """Boundary data and flux of the componentwise harmonic extension."""

    operators: LaplaceOperators
    dirichlet: np.ndarray       # (n, C) nodal boundary values
    flux: np.ndarray            # (n, C) nodal normal derivative

    @property
    def mesh(self):
        return self.operators.mesh


def solve_flux(operators, dirichlet):
    """Normal flux of the harmonic extension of nodal Dirichlet data.

    ``dirichlet`` is (n,) or (n, C); all columns share one factorization
    of the single-layer matrix.  Returns the flux in matching shape.
    """
    dirichlet = np.asarray(dirichlet, dtype=float)
    squeeze = dirichlet.ndim == 1
    data = dirichlet[:, None] if squeeze else dirichlet
    if data.shape[0] != operators.mesh.n_vertices:
        raise ValueError("dirichlet data does not match the mesh")
    rhs = operators.double_layer @ data
    try:
        lu, piv = sla.lu_factor(operators.single_layer)
        flux = sla.lu_solve((lu, piv), rhs)
    except (sla.LinAlgError, ValueError) as exc:
        raise SolverError(f"Laplace single-layer solve failed: {exc}") from exc
    if not np.all(np.isfinite(flux)):
        raise SolverError("Laplace single-layer system is singular to working precision")
    return flux[:, 0] if squeeze else flux


def harmonic_extension(operators, dirichlet):
    dirichlet = np.atleast_2d(np.asarray(dirichlet, dtype=float))
    if dirichlet.shape[0] == 1 and operators.mesh.n_vertices != 1:
        dirichlet = dirichlet.T
    return HarmonicExtension(operators, dirichlet, solve_flux(operators, dirichlet))


def slice_columns(extension, cols):
    """Extension restricted to a column slice (one problem of a batch)."""
    return HarmonicExtension(extension.operators, extension.dirichlet[:, cols],
                             extension.flux[:, cols])


def interior_values(extension, points, *, degree=DEFAULT_REGULAR_DEGREE,
                    tol=DEFAULT_POINT_TOL, threads=1, **near_kwargs):
    """Green-identity values of the extension at strictly interior points.

    Returns (n_points, C).  Points near the surface are handled by the
    graded near-singular rules (tunable via ``near_factor``/``near_margin``);
    points outside the domain produce garbage silently, classification is
    the caller's job.
    """
    mesh = extension.mesh
    points = np.atleast_2d(np.asarray(points, dtype=float))
    single = surface_potential(mesh, points, _kern_g, extension.flux,
                               degree=degree, tol=tol, threads=threads,
                               **near_kwargs)
    double = surface_potential(mesh, points, _kern_gn, extension.dirichlet,
                               degree=degree, tol=tol, threads=threads,
                               **near_kwargs)
    return single + double

"""Galerkin boundary-element solver for the forced 3D Stokes equation.

The package solves interior and exterior Stokes problems with mixed
velocity/traction boundary data on closed triangulated surfaces.  A body
force is handled without volume meshing: its harmonic boundary trace is
extended inside by a Laplace solve, the extension's contribution enters
through closed-form boundary kernels, and the small remainder is integrated
on a regular covering grid.  Boundary velocity gradients come from a
two-sided limit of the differentiated representation.
"""

__version__ = "0.1.0"

from .mesh import (
    SurfaceMesh,
    load_mesh,
    make_icosphere,
    make_sphere_mesh,
    mass_matrix,
    mean_square_error,
    save_mesh,
)

__all__ = [
    "SurfaceMesh",
    "load_mesh",
    "make_icosphere",
    "make_sphere_mesh",
    "mass_matrix",
    "mean_square_error",
    "save_mesh",
    "__version__",
]

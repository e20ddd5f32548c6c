"""Covering grid and the two halves of the body-force volume term.

The velocity representation picks up the volume potential
int_Omega U(q, x) F(q) dV.  Splitting F into its componentwise harmonic
extension F0 plus a remainder turns that into

    mu * oint [ dH/dn F0 - H dF0/dn ] dS   (boundary integrals of H)
  + int_Omega U (F - F0) dV                (remainder, zero on Sigma)

and the remainder extends continuously by zero outside the domain, so a
plain vertex-weighted sum over a regular covering grid integrates it
without any boundary fitting.
"""

from dataclasses import dataclass

import numpy as np

from . import harmonic, kernels
from .mesh import MeshTopologyError
from .quadrature import (DEFAULT_CLOSE_DEGREE, DEFAULT_REGULAR_DEGREE,
                         DEFAULT_SINGULAR_ORDER, run_chunks, surface_nodal_load,
                         surface_potential)
from .galerkin import OperatorSpec, assemble_pair_operators

GRID_NEAR_FACTOR = 1.0
GRID_NEAR_MARGIN = 1


@dataclass(frozen=True)
class CoveringGrid:
    """Regular vertex lattice over a box that strictly contains the mesh."""

    box_min: np.ndarray         # (3,)
    box_max: np.ndarray         # (3,)
    cells: tuple                # cells per axis

    @property
    def spacing(self):
        return (self.box_max - self.box_min) / np.asarray(self.cells, dtype=float)

    @property
    def shape(self):
        return tuple(c + 1 for c in self.cells)

    @property
    def n_vertices(self):
        return int(np.prod(self.shape))

    def vertex_coords(self):
        axes = [np.linspace(self.box_min[d], self.box_max[d], self.cells[d] + 1)
                for d in range(3)]
        gx, gy, gz = np.meshgrid(*axes, indexing="ij")
        return np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)

    def vertex_weights(self):
        """Trapezoidal weights: cell volume / 8 per incident cell."""
        cell_vol = float(np.prod(self.spacing))
        factors = []
        for d in range(3):
            f = np.full(self.cells[d] + 1, 2.0)
            f[0] = f[-1] = 1.0
            factors.append(f)
        w = factors[0][:, None, None] * factors[1][None, :, None] * factors[2][None, None, :]
        return (cell_vol / 8.0) * w.reshape(-1)

    def cell_centers(self):
        axes = [self.box_min[d] + self.spacing[d] * (np.arange(self.cells[d]) + 0.5)
                for d in range(3)]
        gx, gy, gz = np.meshgrid(*axes, indexing="ij")
        return np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)


def build_grid(box, cells, mesh=None):
    """Covering grid from box corners and cells per axis.

    ``box`` is (min_corner, max_corner) or a scalar half-width b meaning
    [-b, b]^3; ``cells`` an int or a 3-tuple.  When a mesh is given it
    must lie strictly inside the box.
    """
    if np.isscalar(box):
        lo, hi = -float(box) * np.ones(3), float(box) * np.ones(3)
    else:
        lo = np.asarray(box[0], dtype=float)
        hi = np.asarray(box[1], dtype=float)
    if np.isscalar(cells):
        cells = (int(cells),) * 3
    cells = tuple(int(c) for c in cells)
    if not (hi > lo).all() or min(cells) < 1:
        raise ValueError("grid box must have positive extent and cell counts")
    if mesh is not None:
        vmin = mesh.vertices.min(axis=0)
        vmax = mesh.vertices.max(axis=0)
        if not ((vmin > lo).all() and (vmax < hi).all()):
            raise ValueError("mesh is not strictly contained in the grid box")
    return CoveringGrid(lo, hi, cells)


def classify_points(points, mesh, seed=0, max_attempts=12):
    """Parity ray casting: True where the point is inside the closed mesh.

    Rays are cast in seeded random directions; any hit that is nearly
    parallel, nearly on an edge, or nearly through the origin point gets
    the point re-cast in a fresh direction.  Points still ambiguous after
    ``max_attempts`` directions are classified outside, which is the
    conservative choice for fields that vanish on the surface.
    """
    points = np.asarray(points, dtype=float)
    v = mesh.vertices[mesh.triangles]
    v0, e1, e2 = v[:, 0], v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]
    scale = float(mesh.bbox_diagonal)
    rng = np.random.default_rng(seed)
    inside = np.zeros(len(points), dtype=bool)
    pending = np.arange(len(points))
    chunk = max(1, 4_000_000 // max(mesh.n_triangles, 1))

    for _ in range(max_attempts):
        if len(pending) == 0:
            break
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        retry = []
        for c0 in range(0, len(pending), chunk):
            idx = pending[c0:c0 + chunk]
            o = points[idx]
            h = np.cross(d, e2)                       # (E, 3)
            det = np.einsum("ej,ej->e", e1, h)        # (E,)
            s = o[:, None, :] - v0[None, :, :]        # (P, E, 3)
            u = np.einsum("pej,ej->pe", s, h)
            q = np.cross(s, e1[None, :, :])
            w = np.einsum("pej,j->pe", q, d)
            t = np.einsum("pej,ej->pe", q, e2)
            with np.errstate(divide="ignore", invalid="ignore"):
                u = u / det[None, :]
                w = w / det[None, :]
                t = t / det[None, :]
            hit = (u >= 0) & (w >= 0) & (u + w <= 1) & (t > 0)
            margin = np.minimum(np.minimum(u, w), 1 - u - w)
            bad = (np.abs(det)[None, :] < 1e-13) | (hit & (margin < 1e-9))
            bad |= hit & (t * np.abs(det)[None, :] < 1e-12 * scale)
            ambiguous = bad.any(axis=1)
            parity = (hit & ~bad).sum(axis=1) % 2 == 1
            inside[idx] = np.where(ambiguous, False, parity)
            retry.append(idx[ambiguous])
        pending = np.concatenate(retry) if retry else np.empty(0, dtype=np.int64)
    return inside


def classify_vertices(grid, mesh, seed=0):
    if mesh.n_triangles == 0:
        raise MeshTopologyError("cannot classify against an empty mesh")
    return classify_points(grid.vertex_coords(), mesh, seed=seed)


@dataclass
class GridField:
    """Zero-extended remainder values on the grid vertices.

    ``values`` is (N, 3) for a single right-hand side or (N, B, 3) for a
    batch of B problems sharing the grid and classification.
    """

    grid: CoveringGrid
    inside: np.ndarray          # (N,) bool
    values: np.ndarray          # (N, [B,] 3), exactly zero outside

    def __post_init__(self):
        shape = self.values.shape
        if shape[0] != self.grid.n_vertices or shape[-1] != 3 or len(shape) > 3:
            raise ValueError("field values must be (n_grid_vertices, [B,] 3)")
        if np.abs(self.values[~self.inside]).max(initial=0.0) != 0.0:
            raise ValueError("outside vertices must be exactly zero")

    @property
    def n_batch(self):
        return None if self.values.ndim == 2 else self.values.shape[1]

    def select(self, b):
        """Single-problem view of a batched field."""
        return GridField(self.grid, self.inside, self.values[:, b])


def remainder_field(grid, force, extension, *, degree=DEFAULT_REGULAR_DEGREE,
                    threads=1, inside=None, seed=0):
    """F - F0 at the grid vertices, exactly zero outside the domain.

    ``force`` maps (n, 3) points to (n, 3) values, or to (n, B, 3) for a
    batch; a batched ``extension`` must carry the matching 3B columns
    flattened in (batch, component) order.  ``inside`` may carry a
    precomputed classification.
    """
    mesh = extension.mesh
    if inside is None:
        inside = classify_vertices(grid, mesh, seed=seed)
    coords = grid.vertex_coords()
    pts = coords[inside]
    fvals = np.asarray(force(pts), dtype=float) if len(pts) else np.zeros((0, 3))
    values = np.zeros((grid.n_vertices,) + fvals.shape[1:])
    if len(pts):
        if 3 * np.prod(fvals.shape[1:-1], dtype=int) != extension.dirichlet.shape[1]:
            raise ValueError("extension columns do not match the force batch shape")
        f0 = harmonic.interior_values(extension, pts, degree=degree, threads=threads,
                                      near_factor=GRID_NEAR_FACTOR,
                                      near_margin=GRID_NEAR_MARGIN)
        values[inside] = fvals - f0.reshape(fvals.shape)
    return GridField(grid, inside, values)


def remainder_volume_rhs(mesh, field, mu=1.0, *, degree=DEFAULT_REGULAR_DEGREE,
                         threads=1):
    """Galerkin volume vector of the remainder: the vertex-weighted sum of
    boundary moments int_S psi_a(p) U_kj(vertex, p) dS_p.

    Returns (3n,) or (B, 3n) for a batched field.  The remainder vanishes
    on the surface, so the plain element rule is accurate without
    near-source corrections (sources close to an element carry negligible
    strength).
    """
    batched = field.values.ndim == 3
    axes = tuple(range(1, field.values.ndim))
    sel = field.inside & np.any(field.values != 0.0, axis=axes)
    if not sel.any():
        shape = (3 * mesh.n_vertices,)
        return np.zeros((field.values.shape[1],) + shape if batched else shape)
    sources = field.grid.vertex_coords()[sel]
    w = field.grid.vertex_weights()[sel]
    strengths = w.reshape((-1,) + (1,) * (field.values.ndim - 1)) * field.values[sel]

    def kern(q, p, nq):
        return kernels.stokeslet(q, p, mu)

    load = surface_nodal_load(mesh, sources, strengths, kern, degree=degree,
                              near_factor=0.0, threads=threads)
    if batched:
        return load.transpose(1, 0, 2).reshape(load.shape[1], -1)
    return load.reshape(-1)


_H_CACHE = {}


def h_boundary_operators(mesh, mu=1.0, *, degree=DEFAULT_REGULAR_DEGREE,
                         close_degree=DEFAULT_CLOSE_DEGREE,
                         singular_order=DEFAULT_SINGULAR_ORDER, threads=1):
    """Galerkin matrices of the H kernel and its source-normal derivative."""
    key = (id(mesh), float(mu), degree, close_degree, singular_order)
    if key in _H_CACHE:
        return _H_CACHE[key]

    def kern_h(q, p, nq):
        return kernels.hfun(q, p, mu)

    def kern_hn(q, p, nq):
        return kernels.hfun_normal_derivative(q, p, nq, mu)

    specs = [
        OperatorSpec("H", kern_h, parity="even", coincident="singular"),
        OperatorSpec("Hn", kern_hn, parity="directional", coincident="singular"),
    ]
    mats = assemble_pair_operators(mesh, specs, degree=degree, close_degree=close_degree,
                                   singular_order=singular_order, threads=threads)
    _H_CACHE[key] = (mats["H"], mats["Hn"])
    return _H_CACHE[key]


def h_boundary_rhs(mesh, extension, mu=1.0, **kwargs):
    """Galerkin vector of mu * oint [ dH/dn F0 - H dF0/dn ] dS.

    Returns (3n,) for a 3-column extension, (B, 3n) for 3B columns.
    """
    h_mat, hn_mat = h_boundary_operators(mesh, mu, **kwargs)
    n, cols = extension.dirichlet.shape
    if cols % 3:
        raise ValueError("extension must have 3 columns per problem")
    diri = extension.dirichlet.reshape(n, -1, 3).transpose(1, 0, 2).reshape(cols // 3, -1)
    flux = extension.flux.reshape(n, -1, 3).transpose(1, 0, 2).reshape(cols // 3, -1)
    rhs = mu * (diri @ hn_mat.T - flux @ h_mat.T)
    return rhs[0] if cols == 3 else rhs


def volume_rhs(mesh, field, extension, mu=1.0, *, degree=DEFAULT_REGULAR_DEGREE,
               threads=1):
    """Full Galerkin volume vector: H boundary term plus remainder term."""
    bnd = h_boundary_rhs(mesh, extension, mu, degree=degree, threads=threads)
    rem = remainder_volume_rhs(mesh, field, mu, degree=degree, threads=threads)
    if bnd.shape != rem.shape:
        raise ValueError("field batch does not match the extension columns")
    return bnd + rem


def volume_velocity(field, extension, mu, points, *, degree=DEFAULT_REGULAR_DEGREE,
                    threads=1, source_chunk=4096):
    """The volume potential int U(q, x) F(q) dV at interior points."""
    mesh = extension.mesh
    points = np.atleast_2d(np.asarray(points, dtype=float))

    def kern_h(q, p, nq):
        return kernels.hfun(q, p, mu)

    def kern_hn(q, p, nq):
        return kernels.hfun_normal_derivative(q, p, nq, mu)

    bnd = mu * (surface_potential(mesh, points, kern_hn, extension.dirichlet,
                                  degree=degree, threads=threads)
                - surface_potential(mesh, points, kern_h, extension.flux,
                                    degree=degree, threads=threads))

    sel = field.inside & np.any(field.values != 0.0, axis=1)
    if sel.any():
        src = field.grid.vertex_coords()[sel]
        s = field.grid.vertex_weights()[sel, None] * field.values[sel]

        def chunk_sum(sl):
            vals = kernels.stokeslet(src[sl][None, :, :], points[:, None, :], mu)
            return np.einsum("pskj,sj->pk", vals, s[sl])

        slices = [slice(i, i + source_chunk) for i in range(0, len(src), source_chunk)]
        for part in run_chunks(chunk_sum, slices, threads):
            bnd += part
    return bnd


def brute_volume_rhs(mesh, force, mu=1.0, *, box=1.1, cells=60, seed=0,
                     degree=DEFAULT_REGULAR_DEGREE, near_factor=1.0,
                     threads=1):
    """Direct midpoint-rule Galerkin volume vector, the split-path oracle.

    Integrates the full forcing with cell-volume weights at inside cell
    centers, no extension and no remainder split.  Slow and low-order,
    but assumption-free.  Returns (3n,).
    """
    grid = build_grid(box, cells, mesh=mesh)
    centers = grid.cell_centers()
    inside = classify_points(centers, mesh, seed=seed)
    src = centers[inside]
    strengths = float(np.prod(grid.spacing)) * np.asarray(force(src), dtype=float)

    def kern(q, p, nq):
        return kernels.stokeslet(q, p, mu)

    load = surface_nodal_load(mesh, src, strengths, kern, degree=degree,
                              near_factor=near_factor, threads=threads)
    return load.reshape(-1)


def save_grid_field(field, path):
    """CSV dump (i, j, k, inside, fx, fy, fz) for plotting and debugging."""
    ni, nj, nk = field.grid.shape
    ii, jj, kk = np.meshgrid(np.arange(ni), np.arange(nj), np.arange(nk), indexing="ij")
    rows = np.column_stack([ii.reshape(-1), jj.reshape(-1), kk.reshape(-1),
                            field.inside.astype(int), field.values])
    header = "i,j,k,inside,fx,fy,fz"
    np.savetxt(path, rows, fmt=["%d", "%d", "%d", "%d", "%.17g", "%.17g", "%.17g"],
               delimiter=",", header=header, comments="")

"""Galerkin assembly of the boundary operators and the mixed solver.

The discrete system comes from testing the flow representation against the
linear nodal basis on the non-fluid-side limit:

    0 = V tau - K u - b_vol,

where V is the single-layer operator of the velocity kernel, K the
double-layer operator of the traction kernel including its jump term, and
b_vol the Galerkin volume forcing.  Normals must point out of the fluid:
pass an outward mesh for interior problems, a flipped one (and
``exterior=True``) for exterior problems.

The double-layer diagonal never comes from quadrature.  Constant fields
must reproduce exactly (rigid-body condition), which pins each nodal 3x3
diagonal block to the negated off-diagonal row sum, plus the full mass row
for exterior limits.
"""

from __future__ import annotations

import weakref
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg as sla

from . import kernels
from .mesh import mass_matrix
from .quadrature import (
    DEFAULT_CLOSE_DEGREE,
    DEFAULT_REGULAR_DEGREE,
    DEFAULT_SINGULAR_ORDER,
    classify_pair,
    element_quadrature,
    find_near_pairs,
    gauss_triangle,
    point_triangle_distance,
    run_chunks,
    singular_pair_blocks,
    surface_potential,
)


class SolverError(RuntimeError):
    """Linear solve failed or produced a non-finite result."""


# --------------------------------------------------------------------------
# Pair plan: classification of every element pair by shared vertices.

_plan_cache = weakref.WeakKeyDictionary()


@dataclass
class PairPlan:
    edge_pairs: np.ndarray      # (ne, 2) element ids, first < second
    edge_perm_p: np.ndarray     # (ne, 3) permutation for the first element
    edge_perm_q: np.ndarray
    vertex_pairs: np.ndarray    # (nv, 2)
    vertex_perm_p: np.ndarray
    vertex_perm_q: np.ndarray
    neighbor_sets: list         # per element: ids sharing >= 1 vertex (incl self)
    close_pairs: np.ndarray     # (nc, 2) separated but within the close radius


def build_pair_plan(mesh, close_factor=2.0):
    """Classify all element pairs once per mesh; cached by mesh identity."""
    cached = _plan_cache.get(mesh)
    if cached is not None:
        return cached
    tris = mesh.triangles
    m = mesh.n_triangles
    vert_to_elems = [[] for _ in range(mesh.n_vertices)]
    for e, tri in enumerate(tris):
        for v in tri:
            vert_to_elems[v].append(e)
    neighbor_sets = []
    shared_count = {}
    for e, tri in enumerate(tris):
        seen = {}
        for v in tri:
            for f in vert_to_elems[v]:
                seen[f] = seen.get(f, 0) + 1
        neighbor_sets.append(np.array(sorted(seen), dtype=np.int64))
        for f, cnt in seen.items():
            if e < f:
                shared_count[(e, f)] = cnt
    edge_pairs, vertex_pairs = [], []
    for (e, f), cnt in shared_count.items():
        (edge_pairs if cnt == 2 else vertex_pairs).append((e, f))
    edge_pairs = np.array(sorted(edge_pairs), dtype=np.int64).reshape(-1, 2)
    vertex_pairs = np.array(sorted(vertex_pairs), dtype=np.int64).reshape(-1, 2)

    def perms(pairs):
        pp = np.empty((len(pairs), 3), dtype=np.int64)
        pq = np.empty((len(pairs), 3), dtype=np.int64)
        for i, (e, f) in enumerate(pairs):
            cfg = classify_pair(tris[e], tris[f])
            pp[i] = cfg.perm_p
            pq[i] = cfg.perm_q
        return pp, pq

    edge_pp, edge_pq = perms(edge_pairs)
    vert_pp, vert_pq = perms(vertex_pairs)

    # Close separated pairs get a higher-degree rule during assembly.
    from scipy.spatial import cKDTree

    radius = close_factor * float(mesh.tri_diameters.max())
    tree = cKDTree(mesh.tri_centroids)
    close = set()
    for e, lst in enumerate(tree.query_ball_point(mesh.tri_centroids, r=radius)):
        for f in lst:
            if e < f:
                close.add((e, f))
    close -= set(map(tuple, edge_pairs.tolist()))
    close -= set(map(tuple, vertex_pairs.tolist()))
    close_pairs = np.array(sorted(close), dtype=np.int64).reshape(-1, 2)

    plan = PairPlan(edge_pairs, edge_pp, edge_pq, vertex_pairs, vert_pp, vert_pq,
                    neighbor_sets, close_pairs)
    _plan_cache[mesh] = plan
    return plan


@dataclass
class OperatorSpec:
    """One bilinear form to assemble in a shared sweep.

    parity 'even' kernels satisfy K(q, p) = K(p, q)^T entrywise (true for
    the velocity, potential, and Laplace single-layer kernels), so only
    unordered pairs are evaluated and the transpose is scattered.  The
    normal-bearing kernels are 'directional' and need both orders.
    coincident 'zero' marks kernels that vanish identically on a flat
    element (n . R = 0), like the traction kernel.
    """

    name: str
    fn: object
    scalar: bool = False
    parity: str = "even"
    coincident: str = "singular"


def _scatter_tensor(mat, rows, cols, blocks):
    b = blocks.shape[0]
    r = (3 * rows[:, :, None, None, None] + np.arange(3)[None, None, None, :, None])
    c = (3 * cols[:, None, :, None, None] + np.arange(3)[None, None, None, None, :])
    r = np.broadcast_to(r, (b, 3, 3, 3, 3))
    c = np.broadcast_to(c, (b, 3, 3, 3, 3))
    np.add.at(mat, (r.ravel(), c.ravel()), blocks.ravel())


def _scatter_scalar(mat, rows, cols, blocks):
    b = blocks.shape[0]
    r = np.broadcast_to(rows[:, :, None], (b, 3, 3))
    c = np.broadcast_to(cols[:, None, :], (b, 3, 3))
    np.add.at(mat, (r.ravel(), c.ravel()), blocks.ravel())


def assemble_pair_operators(mesh, specs, *, degree=DEFAULT_REGULAR_DEGREE,
                            close_degree=DEFAULT_CLOSE_DEGREE,
                            singular_order=DEFAULT_SINGULAR_ORDER,
                            threads=1, pair_chunk=16384):
    """Assemble dense Galerkin matrices for several kernels in one sweep.

    Entry layout for tensor kernels: A[3a + k, 3b + j] tests component k of
    the kernel row at node a against component j at node b, scalar kernels
    produce plain (n, n) matrices.  All kernels in `specs` share the pair
    classification, quadrature points, and scatter indexing.
    """
    plan = build_pair_plan(mesh)
    n = mesh.n_vertices
    tris = mesh.triangles
    verts = mesh.vertices
    normals = mesh.tri_normals
    areas = mesh.tri_areas
    out = {}
    for spec in specs:
        size = n if spec.scalar else 3 * n
        out[spec.name] = np.zeros((size, size))

    def scatter(spec, rows, cols, blocks):
        if spec.scalar:
            _scatter_scalar(out[spec.name], rows, cols, blocks)
        else:
            _scatter_tensor(out[spec.name], rows, cols, blocks)

    def mirror_blocks(spec, blocks):
        if spec.scalar:
            return np.transpose(blocks, (0, 2, 1))
        return np.transpose(blocks, (0, 2, 1, 4, 3))

    # Singular classes.
    for kind, pairs, perm_p, perm_q in (
        ("edge", plan.edge_pairs, plan.edge_perm_p, plan.edge_perm_q),
        ("vertex", plan.vertex_pairs, plan.vertex_perm_p, plan.vertex_perm_q),
    ):
        if len(pairs) == 0:
            continue
        tri_p = tris[pairs[:, 0][:, None], perm_p]
        tri_q = tris[pairs[:, 1][:, None], perm_q]
        vp = verts[tri_p]
        vq = verts[tri_q]
        for spec in specs:
            blocks = singular_pair_blocks(vp, vq, kind, spec.fn,
                                          normal_q=normals[pairs[:, 1]],
                                          order=singular_order)
            scatter(spec, tri_p, tri_q, blocks)
            if spec.parity == "even":
                scatter(spec, tri_q, tri_p, mirror_blocks(spec, blocks))
            else:
                rev = singular_pair_blocks(vq, vp, kind, spec.fn,
                                           normal_q=normals[pairs[:, 0]],
                                           order=singular_order)
                scatter(spec, tri_q, tri_p, rev)

    coincident_specs = [s for s in specs if s.coincident != "zero"]
    if coincident_specs:
        ve = verts[tris]
        for spec in coincident_specs:
            blocks = singular_pair_blocks(ve, ve, "coincident", spec.fn,
                                          normal_q=normals, order=singular_order)
            scatter(spec, tris, tris, blocks)

    # Separated pairs, unordered, chunked.  Close pairs use the finer rule.
    pts_cache = {}
    for deg in {degree, close_degree}:
        pts, psi, w = element_quadrature(mesh, deg)
        pts_cache[deg] = (pts, psi, w)
    close_set = {tuple(p) for p in plan.close_pairs.tolist()}

    def separated_batches():
        m = mesh.n_triangles
        buf_e, buf_f = [], []
        count = 0
        for e in range(m):
            mask = np.ones(m - e, dtype=bool)
            nb = plan.neighbor_sets[e]
            nb = nb[nb >= e]
            mask[nb - e] = False
            fs = np.nonzero(mask)[0] + e
            if len(fs):
                buf_e.append(np.full(len(fs), e, dtype=np.int64))
                buf_f.append(fs.astype(np.int64))
                count += len(fs)
            if count >= pair_chunk or (e == m - 1 and count):
                ee = np.concatenate(buf_e)
                ff = np.concatenate(buf_f)
                yield ee, ff
                buf_e, buf_f, count = [], [], 0

    def process_batch(batch):
        ee, ff = batch
        is_close = np.array([(int(a), int(b)) in close_set for a, b in zip(ee, ff)])
        parts = []
        for close_flag in (False, True):
            sel = np.nonzero(is_close == close_flag)[0]
            if len(sel) == 0:
                continue
            deg = close_degree if close_flag else degree
            pts, psi, w = pts_cache[deg]
            parts.append((ee[sel], ff[sel], pts, psi, w))
        results = []
        for se, sf, pts, psi, w in parts:
            pp = pts[se]
            qq = pts[sf]
            ap = areas[se] * areas[sf]
            batch_out = []
            for spec in specs:
                vals = spec.fn(qq[:, None, :, :], pp[:, :, None, :], normals[sf][:, None, None, :])
                flat = vals.reshape(vals.shape[0], vals.shape[1], vals.shape[2], -1)
                blocks = np.einsum("g,h,ga,hb,zghc->zabc", w, w, psi, psi, flat, optimize=True)
                blocks = blocks * ap[:, None, None, None]
                comp = vals.shape[3:]
                blocks = blocks.reshape(blocks.shape[:3] + comp)
                if spec.parity == "even":
                    batch_out.append((spec, se, sf, blocks, True, None))
                else:
                    vals2 = spec.fn(pp[:, None, :, :], qq[:, :, None, :], normals[se][:, None, None, :])
                    flat2 = vals2.reshape(vals2.shape[0], vals2.shape[1], vals2.shape[2], -1)
                    blocks2 = np.einsum("g,h,ga,hb,zghc->zabc", w, w, psi, psi, flat2, optimize=True)
                    blocks2 = (blocks2 * ap[:, None, None, None]).reshape(blocks.shape)
                    batch_out.append((spec, se, sf, blocks, False, blocks2))
            results.append(batch_out)
        return results

    # Kernel evaluation can run on a pool (numpy releases the GIL); the
    # scatter into shared matrices stays serial and ordered.  Batches are
    # consumed in windows so at most `threads` block sets are in flight.
    batches = list(separated_batches())
    for w0 in range(0, len(batches), max(threads, 1)):
        window = batches[w0:w0 + max(threads, 1)]
        for results in run_chunks(process_batch, window, threads):
            for batch_out in results:
                for spec, se, sf, blocks, even, blocks2 in batch_out:
                    scatter(spec, tris[se], tris[sf], blocks)
                    if even:
                        scatter(spec, tris[sf], tris[se], mirror_blocks(spec, blocks))
                    else:
                        scatter(spec, tris[sf], tris[se], blocks2)
    return out


# --------------------------------------------------------------------------
# Stokes operators.


@dataclass
class StokesOperators:
    """Dense boundary operators on one mesh at one viscosity."""

    mesh: object
    mu: float
    exterior: bool
    single_layer: np.ndarray    # V
    double_layer: np.ndarray    # K, non-fluid-side limit, diagonal regularized
    mass: object                # sparse (n, n)

    @property
    def n_dofs(self):
        return 3 * self.mesh.n_vertices


def _rigid_body_diagonal(a_dl, mass, exterior):
    """Overwrite nodal diagonal blocks so constants reproduce exactly."""
    n = mass.shape[0]
    a4 = a_dl.reshape(n, 3, n, 3)
    rowsum = a4.sum(axis=2)
    idx = np.arange(n)
    diag = a4[idx, :, idx, :]
    target = np.zeros((n, 3, 3))
    if exterior:
        mrow = np.asarray(mass.sum(axis=1)).ravel()
        target = mrow[:, None, None] * np.eye(3)
    a4[idx, :, idx, :] = diag - rowsum + target


def assemble_operators(mesh, mu=1.0, exterior=False, *, degree=DEFAULT_REGULAR_DEGREE,
                       close_degree=DEFAULT_CLOSE_DEGREE,
                       singular_order=DEFAULT_SINGULAR_ORDER, threads=1):
    """Assemble V, K and the mass matrix for one mesh.

    The mesh normals must point out of the fluid.  ``exterior`` switches
    the rigid-body diagonal to the exterior-limit target (full mass row on
    the diagonal component); the principal-value assembly is identical.
    """

    def kern_u(q, p, nq):
        return kernels.stokeslet(q, p, mu)

    def kern_t(q, p, nq):
        return kernels.stresslet_normal(q, p, nq)

    specs = [
        OperatorSpec("V", kern_u, parity="even", coincident="singular"),
        OperatorSpec("K", kern_t, parity="directional", coincident="zero"),
    ]
    mats = assemble_pair_operators(mesh, specs, degree=degree, close_degree=close_degree,
                                   singular_order=singular_order, threads=threads)
    mass = mass_matrix(mesh)
    a_dl = mats["K"]
    # Non-fluid-side limit: principal value plus half the identity, tested.
    half = (0.5 * mass).tocoo()
    for k in range(3):
        a_dl[3 * half.row + k, 3 * half.col + k] += half.data
    _rigid_body_diagonal(a_dl, mass, exterior)
    return StokesOperators(mesh, float(mu), bool(exterior), mats["V"], a_dl, mass)


# --------------------------------------------------------------------------
# Mixed boundary conditions and the dense solve.


@dataclass
class MixedBC:
    """Per-node boundary data: kind 0 prescribes velocity, 1 traction."""

    kind: np.ndarray            # (n,) int
    values: np.ndarray          # (n, 3)

    def __post_init__(self):
        self.kind = np.asarray(self.kind, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=float)
        if self.kind.ndim != 1 or self.values.shape != (len(self.kind), 3):
            raise ValueError("kind must be (n,), values (n, 3)")
        if not np.isin(self.kind, (0, 1)).all():
            raise ValueError("kind entries must be 0 (velocity) or 1 (traction)")


def velocity_bc(values):
    values = np.asarray(values, dtype=float)
    return MixedBC(np.zeros(len(values), dtype=np.int64), values)


def traction_bc(values):
    values = np.asarray(values, dtype=float)
    return MixedBC(np.ones(len(values), dtype=np.int64), values)


def mixed_bc_by_plane(mesh, velocity_values, traction_values, axis=2, offset=0.0):
    """Velocity data where vertex coordinate >= offset, traction below."""
    kind = (mesh.vertices[:, axis] < offset).astype(np.int64)
    values = np.where(kind[:, None] == 0, velocity_values, traction_values)
    return MixedBC(kind, values)


@dataclass
class BoundarySolution:
    operators: StokesOperators
    bc: MixedBC
    velocity: np.ndarray        # (n, 3) complete nodal velocity
    traction: np.ndarray        # (n, 3) complete nodal traction
    residual: float


def solve_mixed(operators, bc, volume_rhs=None):
    """Solve the mixed Galerkin system by dense LU.

    Unknowns are the traction on velocity-prescribed nodes and the
    velocity on traction-prescribed nodes.  Prescribed values pass through
    to the output arrays bit-exact.  ``volume_rhs`` is the Galerkin
    projection (3n,) of the volume potential that adds to the boundary
    representation, zero when absent.
    """
    mesh = operators.mesh
    n = mesh.n_vertices
    if len(bc.kind) != n:
        raise ValueError("boundary data does not match the mesh")
    v_mat = operators.single_layer
    k_mat = operators.double_layer
    b_vol = np.zeros(3 * n) if volume_rhs is None else np.asarray(volume_rhs, dtype=float)
    if b_vol.shape != (3 * n,):
        raise ValueError(f"volume_rhs must be ({3 * n},)")

    vel_nodes = bc.kind == 0
    dof_vel = np.repeat(vel_nodes, 3)
    vals = bc.values.ravel()

    # V tau - K u + b_vol = 0. Move knowns right, unknowns left: columns
    # of +V where tau is unknown (velocity nodes), columns of -K where u
    # is unknown (traction nodes).
    system = np.where(dof_vel[None, :], v_mat, -k_mat)
    rhs = -b_vol
    rhs += k_mat[:, dof_vel] @ vals[dof_vel]
    rhs -= v_mat[:, ~dof_vel] @ vals[~dof_vel]

    try:
        lu, piv = sla.lu_factor(system)
        x = sla.lu_solve((lu, piv), rhs)
    except (sla.LinAlgError, ValueError) as exc:
        raise SolverError(f"mixed system factorization failed: {exc}") from exc
    if not np.all(np.isfinite(x)):
        cond = np.linalg.cond(system)
        raise SolverError(f"mixed system is singular to working precision (cond ~ {cond:.3e})")
    residual = float(np.linalg.norm(system @ x - rhs) / max(np.linalg.norm(rhs), 1e-300))

    velocity = np.where(vel_nodes[:, None], bc.values, x.reshape(n, 3))
    traction = np.where(vel_nodes[:, None], x.reshape(n, 3), bc.values)
    return BoundarySolution(operators, bc, velocity, traction, residual)


SURFACE_CLEARANCE = 1e-6


def interior_velocity(solution, points, volume_term=None, *, degree=DEFAULT_REGULAR_DEGREE,
                      tol=1e-9, threads=1):
    """Evaluate the flow at points strictly inside the fluid.

    u(x) = [V tau](x) - [K u](x) + vol(x).  Points closer to the surface
    than SURFACE_CLEARANCE are rejected; elements within the near radius
    are integrated adaptively.  ``volume_term`` maps the point array to the
    (n_pts, 3) volume contribution and is omitted when None.
    """
    ops = solution.operators
    mesh = ops.mesh
    points = np.atleast_2d(np.asarray(points, dtype=float))
    near = find_near_pairs(mesh, points, factor=1.0)
    if len(near):
        d = point_triangle_distance(mesh.vertices[mesh.triangles[near[:, 1]]], points[near[:, 0]])
        if (d < SURFACE_CLEARANCE).any():
            raise ValueError("evaluation point is on or nearly on the surface")

    def kern_u(q, p, nq):
        return kernels.stokeslet(q, p, ops.mu)

    def kern_t(q, p, nq):
        return kernels.stresslet_normal(q, p, nq)

    single = surface_potential(mesh, points, kern_u, solution.traction,
                               degree=degree, tol=tol, threads=threads)
    double = surface_potential(mesh, points, kern_t, solution.velocity,
                               degree=degree, tol=tol, threads=threads)
    out = single - double
    if volume_term is not None:
        out = out + volume_term(points)
    return out


def double_layer_identity(mesh, points, *, degree=DEFAULT_REGULAR_DEGREE, tol=1e-9):
    """The closed-surface traction-kernel integral, normalized to
    the identity matrix for points inside and zero outside.

    Returns (n_pts, 3, 3).  This is the sign anchor for the whole
    formulation: the double-layer operator acting on a constant field
    must reproduce the constant inside the surface and kill it outside.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))

    def kern_t(q, p, nq):
        return kernels.stresslet_normal(q, p, nq)

    cols = []
    for i in range(3):
        dens = np.zeros((mesh.n_vertices, 3))
        dens[:, i] = 1.0
        cols.append(-surface_potential(mesh, points, kern_t, dens, degree=degree, tol=tol))
    return np.stack(cols, axis=-1)

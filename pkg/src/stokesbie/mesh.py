"""Triangulated closed surfaces: construction, file I/O, and nodal metrics.

Meshes are flat triangulations with linear (vertex-based) degrees of
freedom.  Every solver path assumes a closed, consistently wound, manifold
surface whose normals point out of the fluid domain; for exterior problems
call :meth:`SurfaceMesh.flipped` on a conventionally outward mesh.
"""

from __future__ import annotations

import numpy as np
from scipy import sparse

_DEGENERATE_REL_AREA = 1e-12


class MeshFormatError(ValueError):
    """Raised when a mesh file cannot be parsed; carries the line number."""

    def __init__(self, path, lineno, message):
        super().__init__(f"{path}:{lineno}: {message}")
        self.path = str(path)
        self.lineno = lineno


class MeshTopologyError(ValueError):
    """Raised for non-manifold, open, inconsistently wound, or degenerate input."""


class SurfaceMesh:
    """A closed triangulated surface with cached element geometry.

    Parameters
    ----------
    vertices : (n_vertices, 3) float array
    triangles : (n_triangles, 3) int array
        Vertex indices, consistently wound so that the right-hand rule
        normal points out of the fluid.
    validate : bool
        Run the topology checks (closed, manifold, consistent winding,
        no degenerate elements).  Skipped internally when the arrays are
        known good, e.g. after a winding repair.
    """

    def __init__(self, vertices, triangles, validate=True):
        vertices = np.ascontiguousarray(vertices, dtype=float)
        triangles = np.ascontiguousarray(triangles, dtype=np.int64)
        if vertices.ndim != 2 or vertices.shape[1] != 3:
            raise ValueError(f"vertices must be (n, 3), got {vertices.shape}")
        if triangles.ndim != 2 or triangles.shape[1] != 3:
            raise ValueError(f"triangles must be (m, 3), got {triangles.shape}")
        if triangles.size and (triangles.min() < 0 or triangles.max() >= len(vertices)):
            raise MeshTopologyError("triangle index out of range")
        self.vertices = vertices
        self.triangles = triangles
        self.vertices.flags.writeable = False
        self.triangles.flags.writeable = False

        corners = vertices[triangles]
        cross = np.cross(corners[:, 1] - corners[:, 0], corners[:, 2] - corners[:, 0])
        two_area = np.linalg.norm(cross, axis=1)
        self.tri_areas = 0.5 * two_area
        bbox = vertices.max(axis=0) - vertices.min(axis=0) if len(vertices) else np.zeros(3)
        self.bbox_diagonal = float(np.linalg.norm(bbox))
        if validate:
            self._validate_topology()
            floor = _DEGENERATE_REL_AREA * self.bbox_diagonal**2
            bad = np.nonzero(self.tri_areas <= floor)[0]
            if bad.size:
                raise MeshTopologyError(
                    f"degenerate triangle(s) {bad[:5].tolist()} with area <= {floor:g}"
                )
        with np.errstate(invalid="ignore", divide="ignore"):
            self.tri_normals = cross / two_area[:, None]
        self.tri_centroids = corners.mean(axis=1)
        edges = corners - corners[:, [1, 2, 0]]
        self.tri_diameters = np.linalg.norm(edges, axis=2).max(axis=1)
        self._vertex_normals = None
        self._vertex_spacing = None

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_triangles(self):
        return len(self.triangles)

    @property
    def area(self):
        return float(self.tri_areas.sum())

    def _validate_topology(self):
        tris = self.triangles
        if len(tris) == 0:
            raise MeshTopologyError("empty triangulation")
        same = (tris[:, 0] == tris[:, 1]) | (tris[:, 1] == tris[:, 2]) | (tris[:, 0] == tris[:, 2])
        if same.any():
            raise MeshTopologyError(f"triangle {np.nonzero(same)[0][0]} repeats a vertex")
        directed = np.concatenate([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]])
        und = np.sort(directed, axis=1)
        _, counts = np.unique(und, axis=0, return_counts=True)
        if (counts > 2).any():
            raise MeshTopologyError("non-manifold edge: an edge borders more than two triangles")
        if (counts < 2).any():
            raise MeshTopologyError("open surface: an edge borders only one triangle")
        # Consistent winding means every directed edge occurs exactly once.
        _, dcounts = np.unique(directed, axis=0, return_counts=True)
        if (dcounts > 1).any():
            raise MeshTopologyError(
                "inconsistent winding: a directed edge occurs twice "
                "(load with repair_orientation=True to fix)"
            )

    def flipped(self):
        """Same surface with reversed winding, hence reversed normals."""
        return SurfaceMesh(self.vertices, self.triangles[:, [0, 2, 1]], validate=False)

    def signed_volume(self):
        """Volume enclosed by the surface, positive for outward normals."""
        corners = self.vertices[self.triangles]
        return float(np.einsum("ij,ij->", corners[:, 0], np.cross(corners[:, 1], corners[:, 2])) / 6.0)

    def vertex_normals(self):
        """Area-weighted average of incident element normals, unit length."""
        if self._vertex_normals is None:
            acc = np.zeros((self.n_vertices, 3))
            weighted = self.tri_normals * self.tri_areas[:, None]
            for c in range(3):
                np.add.at(acc, self.triangles[:, c], weighted)
            acc /= np.linalg.norm(acc, axis=1)[:, None]
            acc.flags.writeable = False
            self._vertex_normals = acc
        return self._vertex_normals

    def vertex_spacing(self):
        """Mean length of the edges incident to each vertex."""
        if self._vertex_spacing is None:
            tris = self.triangles
            directed = np.concatenate([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]])
            # Each undirected edge appears twice in the directed list, once
            # per orientation, so per-vertex sums come out right.
            lengths = np.linalg.norm(
                self.vertices[directed[:, 0]] - self.vertices[directed[:, 1]], axis=1
            )
            total = np.zeros(self.n_vertices)
            count = np.zeros(self.n_vertices)
            for c in range(2):
                np.add.at(total, directed[:, c], lengths)
                np.add.at(count, directed[:, c], 1.0)
            out = total / count
            out.flags.writeable = False
            self._vertex_spacing = out
        return self._vertex_spacing


# Golden-ratio icosahedron; winding fixed below by the signed-volume check.
_ICO_T = (1.0 + np.sqrt(5.0)) / 2.0
_ICO_VERTS = np.array(
    [
        (-1, _ICO_T, 0), (1, _ICO_T, 0), (-1, -_ICO_T, 0), (1, -_ICO_T, 0),
        (0, -1, _ICO_T), (0, 1, _ICO_T), (0, -1, -_ICO_T), (0, 1, -_ICO_T),
        (_ICO_T, 0, -1), (_ICO_T, 0, 1), (-_ICO_T, 0, -1), (-_ICO_T, 0, 1),
    ],
    dtype=float,
)
_ICO_FACES = np.array(
    [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ],
    dtype=np.int64,
)

MAX_ICOSPHERE_SUBDIVISIONS = 6


def _split_on_sphere(verts, faces):
    """One midpoint 1-to-4 split with new nodes pushed to the unit sphere."""
    verts = list(verts)
    midpoint = {}
    new_faces = []

    def mid(a, b):
        key = (a, b) if a < b else (b, a)
        idx = midpoint.get(key)
        if idx is None:
            m = verts[a] + verts[b]
            verts.append(m / np.linalg.norm(m))
            idx = len(verts) - 1
            midpoint[key] = idx
        return idx

    for i0, i1, i2 in faces:
        m01, m12, m20 = mid(i0, i1), mid(i1, i2), mid(i2, i0)
        new_faces += [(i0, m01, m20), (i1, m12, m01), (i2, m20, m12), (m01, m12, m20)]
    return verts, np.array(new_faces, dtype=np.int64)


def make_icosphere(subdivisions, radius=1.0):
    """Sphere triangulation from recursive icosahedron subdivision.

    Each level quadruples the element count: 20 * 4**subdivisions
    triangles, 10 * 4**subdivisions + 2 vertices, all on the sphere of the
    given radius.  Normals point outward.
    """
    subdivisions = int(subdivisions)
    if not 0 <= subdivisions <= MAX_ICOSPHERE_SUBDIVISIONS:
        raise ValueError(
            f"subdivisions must be in [0, {MAX_ICOSPHERE_SUBDIVISIONS}], got {subdivisions}"
        )
    if radius <= 0:
        raise ValueError("radius must be positive")
    verts = [v / np.linalg.norm(v) for v in _ICO_VERTS]
    faces = _ICO_FACES
    for _ in range(subdivisions):
        verts, faces = _split_on_sphere(verts, faces)
    mesh = SurfaceMesh(radius * np.array(verts), faces)
    if mesh.signed_volume() < 0:
        mesh = mesh.flipped()
    return mesh


def make_sphere_mesh(n_nodes, subdivisions=0, radius=1.0):
    """Sphere triangulation with an exact node count before refinement.

    Places ``n_nodes`` points on a golden-angle spiral and triangulates
    their convex hull, giving 2 * n_nodes - 4 triangles of reasonably
    uniform size for any requested count.  Optional midpoint subdivisions
    then quadruple the element count with new nodes on the sphere.
    Normals point outward.
    """
    from scipy.spatial import ConvexHull

    n_nodes = int(n_nodes)
    if n_nodes < 6:
        raise ValueError("need at least 6 nodes for a sensible sphere mesh")
    if radius <= 0:
        raise ValueError("radius must be positive")
    i = np.arange(n_nodes)
    # Offset 0.5 keeps the first and last points off the poles.
    z = 1.0 - 2.0 * (i + 0.5) / n_nodes
    phi = i * np.pi * (3.0 - np.sqrt(5.0))
    rho = np.sqrt(1.0 - z * z)
    pts = np.column_stack([rho * np.cos(phi), rho * np.sin(phi), z])
    faces = ConvexHull(pts).simplices
    verts, faces = pts, _repair_winding(pts, faces).triangles
    for _ in range(int(subdivisions)):
        verts, faces = _split_on_sphere(verts, faces)
    mesh = SurfaceMesh(radius * np.asarray(verts), faces)
    if mesh.signed_volume() < 0:
        mesh = mesh.flipped()
    return mesh


def _repair_winding(vertices, triangles):
    """Make the winding consistent by breadth-first flip propagation.

    Returns repaired triangles with outward global orientation (positive
    enclosed volume).  Raises MeshTopologyError for non-orientable input.
    """
    tris = np.array(triangles, dtype=np.int64)
    n = len(tris)
    edge_to_faces = {}
    for f, (a, b, c) in enumerate(tris):
        for u, v in ((a, b), (b, c), (c, a)):
            key = (u, v) if u < v else (v, u)
            edge_to_faces.setdefault(key, []).append(f)
    for key, faces in edge_to_faces.items():
        if len(faces) != 2:
            raise MeshTopologyError(f"edge {key} borders {len(faces)} triangles")

    def directed_edges(f):
        a, b, c = tris[f]
        return ((a, b), (b, c), (c, a))

    visited = np.zeros(n, dtype=bool)
    for seed in range(n):
        if visited[seed]:
            continue
        visited[seed] = True
        stack = [seed]
        while stack:
            f = stack.pop()
            for u, v in directed_edges(f):
                key = (u, v) if u < v else (v, u)
                for g in edge_to_faces[key]:
                    if g == f:
                        continue
                    same_direction = (u, v) in directed_edges(g)
                    if not visited[g]:
                        if same_direction:
                            tris[g] = tris[g][[0, 2, 1]]
                        visited[g] = True
                        stack.append(g)
                    elif same_direction:
                        raise MeshTopologyError("surface is non-orientable")
    mesh = SurfaceMesh(vertices, tris)
    if mesh.signed_volume() < 0:
        mesh = mesh.flipped()
    return mesh


def _parse_off(path, lines):
    rows = []
    for lineno, raw in enumerate(lines, start=1):
        text = raw.split("#", 1)[0].strip()
        if text:
            rows.append((lineno, text))
    if not rows:
        raise MeshFormatError(path, 1, "empty file")
    lineno, header = rows[0]
    tokens = header.split()
    if tokens[0] != "OFF":
        raise MeshFormatError(path, lineno, "missing OFF header")
    rows = rows[1:]
    if len(tokens) == 4:
        counts = tokens[1:]
    else:
        if not rows:
            raise MeshFormatError(path, lineno, "missing count line")
        lineno, count_line = rows[0]
        counts = count_line.split()
        rows = rows[1:]
    try:
        nv, nf = int(counts[0]), int(counts[1])
    except (ValueError, IndexError):
        raise MeshFormatError(path, lineno, f"bad count line {counts!r}") from None
    if len(rows) < nv + nf:
        raise MeshFormatError(path, rows[-1][0] if rows else lineno, "truncated file")
    verts = np.empty((nv, 3))
    for i in range(nv):
        lineno, text = rows[i]
        parts = text.split()
        if len(parts) < 3:
            raise MeshFormatError(path, lineno, "vertex line needs 3 coordinates")
        try:
            verts[i] = [float(t) for t in parts[:3]]
        except ValueError:
            raise MeshFormatError(path, lineno, f"bad vertex line {text!r}") from None
    tris = np.empty((nf, 3), dtype=np.int64)
    for i in range(nf):
        lineno, text = rows[nv + i]
        parts = text.split()
        try:
            k = int(parts[0])
        except (ValueError, IndexError):
            raise MeshFormatError(path, lineno, f"bad face line {text!r}") from None
        if k != 3 or len(parts) < 4:
            raise MeshFormatError(path, lineno, f"only triangular faces supported, got {k}-gon")
        try:
            tris[i] = [int(t) for t in parts[1:4]]
        except ValueError:
            raise MeshFormatError(path, lineno, f"bad face line {text!r}") from None
    return verts, tris


def _parse_obj(path, lines):
    verts = []
    tris = []
    for lineno, raw in enumerate(lines, start=1):
        text = raw.split("#", 1)[0].strip()
        if not text:
            continue
        parts = text.split()
        if parts[0] == "v":
            if len(parts) < 4:
                raise MeshFormatError(path, lineno, "vertex line needs 3 coordinates")
            try:
                verts.append([float(t) for t in parts[1:4]])
            except ValueError:
                raise MeshFormatError(path, lineno, f"bad vertex line {text!r}") from None
        elif parts[0] == "f":
            if len(parts) != 4:
                raise MeshFormatError(path, lineno, "only triangular faces supported")
            idx = []
            for token in parts[1:]:
                head = token.split("/", 1)[0]
                try:
                    i = int(head)
                except ValueError:
                    raise MeshFormatError(path, lineno, f"bad face token {token!r}") from None
                if i <= 0:
                    raise MeshFormatError(path, lineno, "only positive 1-based indices supported")
                idx.append(i - 1)
            tris.append(idx)
        # Other OBJ records (vn, vt, usemtl, ...) carry nothing we keep.
    if not verts or not tris:
        raise MeshFormatError(path, 1, "no geometry found")
    return np.array(verts, dtype=float), np.array(tris, dtype=np.int64)


def load_mesh(path, repair_orientation=False):
    """Load an ASCII OFF or OBJ triangulation.

    The format is picked from the extension (.off or .obj).  Parse errors
    raise :class:`MeshFormatError` with the offending line number.  When
    ``repair_orientation`` is set, inconsistent winding is fixed by flip
    propagation and the result oriented outward; otherwise it raises
    :class:`MeshTopologyError`.
    """
    path = str(path)
    lower = path.lower()
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.readlines()
    if lower.endswith(".off"):
        verts, tris = _parse_off(path, lines)
    elif lower.endswith(".obj"):
        verts, tris = _parse_obj(path, lines)
    else:
        raise ValueError(f"unsupported mesh extension in {path!r} (want .off or .obj)")
    if repair_orientation:
        return _repair_winding(verts, tris)
    return SurfaceMesh(verts, tris)


def save_mesh(mesh, path):
    """Write an ASCII OFF or OBJ file, format picked from the extension."""
    path = str(path)
    lower = path.lower()
    with open(path, "w", encoding="utf-8") as fh:
        if lower.endswith(".off"):
            fh.write("OFF\n")
            fh.write(f"{mesh.n_vertices} {mesh.n_triangles} 0\n")
            for v in mesh.vertices:
                fh.write(f"{v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
            for t in mesh.triangles:
                fh.write(f"3 {t[0]} {t[1]} {t[2]}\n")
        elif lower.endswith(".obj"):
            for v in mesh.vertices:
                fh.write(f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
            for t in mesh.triangles:
                fh.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")
        else:
            raise ValueError(f"unsupported mesh extension in {path!r} (want .off or .obj)")


def mass_matrix(mesh):
    """Sparse Gram matrix of the linear nodal basis, M_ab = int psi_a psi_b.

    Per element of area A the block is A/6 on the diagonal and A/12 off it.
    Row sums equal one third of the incident element area.
    """
    m = mesh.n_triangles
    block = np.full((3, 3), 1.0 / 12.0)
    block[np.diag_indices(3)] = 1.0 / 6.0
    vals = mesh.tri_areas[:, None, None] * block
    rows = np.repeat(mesh.triangles, 3, axis=1).reshape(m, 3, 3)
    cols = rows.swapaxes(1, 2)
    out = sparse.coo_matrix(
        (vals.ravel(), (rows.ravel(), cols.ravel())),
        shape=(mesh.n_vertices, mesh.n_vertices),
    )
    return out.tocsr()


def mean_square_error(computed, exact):
    """Root mean square nodal error, per trailing component.

    For (n,) inputs returns a scalar, for (n, k) an array of k values:
    sqrt(mean over nodes of the squared difference).
    """
    computed = np.asarray(computed, dtype=float)
    exact = np.asarray(exact, dtype=float)
    if computed.shape != exact.shape:
        raise ValueError(f"shape mismatch {computed.shape} vs {exact.shape}")
    diff2 = (computed - exact) ** 2
    out = np.sqrt(diff2.mean(axis=0))
    return float(out) if out.ndim == 0 else out

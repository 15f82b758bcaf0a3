"""Structured conforming simplicial meshes of the built-in computational domains.

Generators cover the unit interval, the unit square (fixed diagonal split),
the L-shaped domain made of three unit squares, and the unit cube via the
Kuhn 6-tet split.  Vertices additionally carry integer coordinates over a
global denominator so that degree-of-freedom identification across cells can
be done in exact arithmetic.
"""

from dataclasses import dataclass
from itertools import permutations
from math import factorial

import numpy as np


class MeshError(ValueError):
    """Invalid mesh request or non-conforming connectivity."""


@dataclass(frozen=True)
class AffineMap:
    """Reference-to-physical map x = J xhat + b for one cell."""

    J: np.ndarray
    b: np.ndarray
    detJ: float
    JinvT: np.ndarray


class Mesh:
    """Conforming simplicial mesh.

    Attributes
    ----------
    d : spatial dimension (1, 2 or 3)
    vertices : (nv, d) float array
    ivertices : (nv, d) integer array; vertices == ivertices / iscale
    iscale : common integer denominator of the vertex coordinates
    cells : (nc, d+1) vertex indices, positively oriented
    """

    def __init__(self, d, vertices, cells, ivertices=None, iscale=1):
        self.d = int(d)
        self.vertices = np.asarray(vertices, dtype=float).reshape(-1, d)
        self.cells = np.asarray(cells, dtype=np.int64).reshape(-1, d + 1)
        if ivertices is None:
            scale = 1 << 30
            ivertices = np.rint(self.vertices * scale).astype(np.int64)
            iscale = scale
        self.ivertices = np.asarray(ivertices, dtype=np.int64).reshape(-1, d)
        self.iscale = int(iscale)
        self._orient()
        vols = np.array([self.cell_volume(c) for c in range(len(self.cells))])
        if np.any(vols <= 0):
            raise MeshError("degenerate or inverted cell")
        diams = np.array([self._cell_diameter(c) for c in range(len(self.cells))])
        self.h_global = float(diams.max())
        self.h_min = float(diams.min())

    @property
    def num_vertices(self):
        return len(self.vertices)

    @property
    def num_cells(self):
        return len(self.cells)

    def _orient(self):
        # canonical vertex order: sorted indices, then swap the last two if the
        # signed volume comes out negative
        cells = np.sort(self.cells, axis=1)
        for c in cells:
            if self._signed_volume(c) < 0:
                c[-1], c[-2] = c[-2], c[-1]
        self.cells = cells

    def _signed_volume(self, cell):
        v = self.vertices[list(cell)]
        J = (v[1:] - v[0]).T
        return np.linalg.det(J) / factorial(self.d)

    def cell_volume(self, c):
        return self._signed_volume(self.cells[c])

    def _cell_diameter(self, c):
        v = self.vertices[list(self.cells[c])]
        dmax = 0.0
        for i in range(len(v)):
            for j in range(i + 1, len(v)):
                dmax = max(dmax, float(np.linalg.norm(v[i] - v[j])))
        return dmax

    def affine_map(self, c) -> AffineMap:
        return affine_map(self, c)

    def total_volume(self):
        return sum(self.cell_volume(c) for c in range(self.num_cells))


def affine_map(mesh: Mesh, cell: int) -> AffineMap:
    """Affine map of ``cell``; detJ equals d! times the cell volume."""
    v = mesh.vertices[list(mesh.cells[cell])]
    J = np.ascontiguousarray((v[1:] - v[0]).T)
    detJ = float(np.linalg.det(J))
    if detJ <= 0:
        raise MeshError(f"degenerate cell {cell}")
    JinvT = np.ascontiguousarray(np.linalg.inv(J).T)
    return AffineMap(J=J, b=v[0].copy(), detJ=detJ, JinvT=JinvT)


def build_unit_interval_mesh(n: int) -> Mesh:
    """n equal cells on [0, 1]."""
    if n < 1:
        raise MeshError("need at least one cell")
    verts = np.linspace(0.0, 1.0, n + 1).reshape(-1, 1)
    iverts = np.arange(n + 1, dtype=np.int64).reshape(-1, 1)
    cells = [(i, i + 1) for i in range(n)]
    return Mesh(1, verts, cells, iverts, n)


def _square_block(n, ox, oy, vid):
    """Triangulate [ox,ox+n] x [oy,oy+n] (integer grid) with the fixed
    lower-left to upper-right diagonal; vid maps integer points to ids."""
    cells = []
    for i in range(ox, ox + n):
        for j in range(oy, oy + n):
            p00 = vid[(i, j)]
            p10 = vid[(i + 1, j)]
            p01 = vid[(i, j + 1)]
            p11 = vid[(i + 1, j + 1)]
            cells.append((p00, p10, p11))
            cells.append((p00, p11, p01))
    return cells


def build_unit_square_mesh(n: int) -> Mesh:
    """2 n^2 triangles on (0,1)^2, every subsquare split along its main diagonal."""
    if n < 1:
        raise MeshError("need at least one subdivision")
    vid = {}
    ipts = []
    for i in range(n + 1):
        for j in range(n + 1):
            vid[(i, j)] = len(ipts)
            ipts.append((i, j))
    ipts = np.array(ipts, dtype=np.int64)
    cells = _square_block(n, 0, 0, vid)
    return Mesh(2, ipts / n, cells, ipts, n)


def build_lshape_mesh(n: int) -> Mesh:
    """L-shaped domain (-1,1)^2 minus [0,1) x (-1,0], three unit squares of
    2 n^2 triangles each; the re-entrant corner is the vertex at the origin."""
    if n < 1:
        raise MeshError("need at least one subdivision")
    vid = {}
    ipts = []

    def add_grid(ox, oy):
        for i in range(ox, ox + n + 1):
            for j in range(oy, oy + n + 1):
                if (i, j) not in vid:
                    vid[(i, j)] = len(ipts)
                    ipts.append((i, j))

    blocks = [(0, 0), (-n, 0), (-n, -n)]
    for ox, oy in blocks:
        add_grid(ox, oy)
    cells = []
    for ox, oy in blocks:
        cells.extend(_square_block(n, ox, oy, vid))
    ipts = np.array(ipts, dtype=np.int64)
    return Mesh(2, ipts / n, cells, ipts, n)


_KUHN_PERMS = list(permutations(range(3)))


def build_unit_cube_mesh(n: int) -> Mesh:
    """6 n^3 tetrahedra on (0,1)^3 via the Kuhn split of every subcube.

    Each subcube is cut into the six tets whose vertex chains walk the axes in
    the orders given by the permutations of (x, y, z); all six share the main
    diagonal of the subcube, which makes the split conforming across subcubes.
    """
    if n < 1:
        raise MeshError("need at least one subdivision")
    vid = {}
    ipts = []
    for i in range(n + 1):
        for j in range(n + 1):
            for k in range(n + 1):
                vid[(i, j, k)] = len(ipts)
                ipts.append((i, j, k))
    ipts = np.array(ipts, dtype=np.int64)
    cells = []
    axes = np.eye(3, dtype=np.int64)
    for i in range(n):
        for j in range(n):
            for k in range(n):
                base = np.array((i, j, k), dtype=np.int64)
                for perm in _KUHN_PERMS:
                    p = base.copy()
                    chain = [tuple(p)]
                    for ax in perm:
                        p = p + axes[ax]
                        chain.append(tuple(p))
                    cells.append(tuple(vid[q] for q in chain))
    return Mesh(3, ipts / n, cells, ipts, n)


@dataclass
class Face:
    """One (d-1)-face with oriented adjacency.

    ``vertices`` is the sorted global vertex tuple; ``left_locals`` /
    ``right_locals`` give, for each vertex in that canonical order, its local
    index inside the left/right cell.  The unit normal points out of the left
    cell (into the right cell for interior faces).
    """

    vertices: tuple
    left_cell: int
    left_locals: tuple
    normal: np.ndarray
    measure: float
    right_cell: int | None = None
    right_locals: tuple | None = None

    @property
    def is_boundary(self):
        return self.right_cell is None


@dataclass
class FaceTable:
    faces: list
    interior_count: int
    boundary_count: int

    def __iter__(self):
        return iter(self.faces)

    def __len__(self):
        return len(self.faces)


def _face_measure_normal(mesh, cell_verts, omitted_local):
    """Unit outward normal and (d-1)-measure of one facet of a cell."""
    d = mesh.d
    pts = mesh.vertices[[v for i, v in enumerate(cell_verts) if i != omitted_local]]
    apex = mesh.vertices[cell_verts[omitted_local]]
    if d == 1:
        nrm = np.array([1.0]) if pts[0, 0] > apex[0] else np.array([-1.0])
        return nrm, 1.0
    if d == 2:
        t = pts[1] - pts[0]
        length = float(np.linalg.norm(t))
        nrm = np.array([t[1], -t[0]]) / length
    else:
        t1 = pts[1] - pts[0]
        t2 = pts[2] - pts[0]
        cr = np.cross(t1, t2)
        area = float(np.linalg.norm(cr))
        nrm = cr / area
        length = 0.5 * area
    if np.dot(nrm, pts[0] - apex) < 0:
        nrm = -nrm
    return nrm, length


def build_face_table(mesh: Mesh) -> FaceTable:
    """Enumerate all faces with deterministic ordering and oriented adjacency."""
    d = mesh.d
    incident = {}
    for c, cell in enumerate(mesh.cells):
        for omit in range(d + 1):
            key = tuple(sorted(v for i, v in enumerate(cell) if i != omit))
            incident.setdefault(key, []).append((c, omit))
    faces = []
    nint = nbnd = 0
    for key in sorted(incident):
        hits = incident[key]
        if len(hits) > 2:
            raise MeshError(f"non-conforming mesh: face {key} has {len(hits)} cells")
        hits.sort()
        left, _ = hits[0]
        cell = mesh.cells[left]
        loc = {v: i for i, v in enumerate(cell)}
        left_locals = tuple(loc[v] for v in key)
        omit_left = next(i for i in range(d + 1) if cell[i] not in key)
        normal, measure = _face_measure_normal(mesh, cell, omit_left)
        face = Face(key, left, left_locals, normal, measure)
        if len(hits) == 2:
            right, _ = hits[1]
            rcell = mesh.cells[right]
            rloc = {v: i for i, v in enumerate(rcell)}
            face.right_cell = right
            face.right_locals = tuple(rloc[v] for v in key)
            nint += 1
        else:
            nbnd += 1
        faces.append(face)
    return FaceTable(faces, nint, nbnd)


def write_mesh_ascii(mesh: Mesh, path):
    """Write the plain-text format: 'd nv nc', vertex lines, cell lines."""
    with open(path, "w") as fh:
        fh.write(f"{mesh.d} {mesh.num_vertices} {mesh.num_cells}\n")
        for v in mesh.vertices:
            fh.write(" ".join(repr(float(x)) for x in v) + "\n")
        for c in mesh.cells:
            fh.write(" ".join(str(int(i)) for i in c) + "\n")


def read_mesh_ascii(path) -> Mesh:
    with open(path) as fh:
        tokens = fh.read().split()
    it = iter(tokens)
    try:
        d = int(next(it))
        nv = int(next(it))
        nc = int(next(it))
        verts = np.array([float(next(it)) for _ in range(nv * d)]).reshape(nv, d)
        cells = np.array([int(next(it)) for _ in range(nc * (d + 1))],
                         dtype=np.int64).reshape(nc, d + 1)
    except StopIteration:
        raise MeshError("truncated mesh file") from None
    return Mesh(d, verts, cells)

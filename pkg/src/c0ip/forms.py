"""Assembly of the C0 interior penalty system for the m-th Laplace equation.

The bilinear form is

    a(w, v) = volume(w, v) + C(w, v) + C(v, w) + tau * S(w, v)

with the volume term (Delta^mt w, Delta^mt v) for even m = 2 mt and
(grad Delta^mt w, grad Delta^mt v) for odd m = 2 mt + 1.  The coupling C and
stabilization S are sums of face terms generated here as explicit term lists,
so a single assembler covers every m; independently hand-coded kernels for
m = 2, 3, 4 exist purely as cross-checks.

Face terms run over all faces, with one-sided traces on the boundary.  For
solutions whose boundary traces do not vanish, every coupling/stabilization
term that is linear in the trial function's boundary jump is mirrored on the
right-hand side with the known trace data, so the exact solution satisfies
the discrete identity by construction (Nitsche-consistent data lifting).
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .jets import boundary_trace_data, source_term
from .mesh import FaceTable, Mesh, affine_map
from .quadrature import face_rule, simplex_rule
from .refbasis import (CellEvaluator, ReferenceBasis, build_lagrange_basis,
                       multi_indices, multinomial)

FACTORIAL = [1, 1, 2, 6]


class AssemblyError(ValueError):
    pass


@dataclass
class ProblemSpec:
    """Discretization parameters: order m, degree r >= m, penalty tau."""

    m: int
    r: int
    d: int
    tau: float = 1.0
    solution: object = None
    quad_boost: int = 0
    solver: str = "direct"

    def __post_init__(self):
        if self.m < 1:
            raise AssemblyError("m must be a positive integer")
        if self.r < self.m:
            raise AssemblyError(f"need r >= m, got r={self.r}, m={self.m}")
        if self.d not in (1, 2, 3):
            raise AssemblyError("d must be 1, 2 or 3")

    @property
    def m_tilde(self):
        return self.m // 2

    @property
    def even(self):
        return self.m % 2 == 0

    @property
    def volume_degree(self):
        return 2 * self.r + 2 + self.quad_boost

    @property
    def error_degree(self):
        return 2 * self.r + 4 + self.quad_boost


def coupling_terms(m: int):
    """Term list (sign, avg_kind, avg_order, jump_kind, jump_order) of C(w, v).

    avg_* applies to the first argument w (trial slot), jump_* to the second.
    'lap' k stands for Delta^k, 'glap' k for grad Delta^k.
    """
    mt = m // 2
    terms = []
    if m % 2 == 0:
        for i in range(mt):
            terms.append((-1.0, "lap", mt + i, "glap", mt - i - 1))
        for i in range(mt - 1):
            terms.append((+1.0, "glap", mt + i, "lap", mt - i - 1))
    else:
        for i in range(mt):
            terms.append((+1.0, "lap", mt + i + 1, "glap", mt - i - 1))
        for i in range(mt):
            terms.append((-1.0, "glap", mt + i, "lap", mt - i))
    return terms


def stabilization_terms(m: int):
    """Term list (h_exponent, jump_kind, jump_order) of S(w, v)."""
    mt = m // 2
    terms = []
    if m % 2 == 0:
        for i in range(mt):
            terms.append((4 * i + 1, "glap", mt - i - 1))
        for i in range(mt - 1):
            terms.append((4 * i + 3, "lap", mt - i - 1))
    else:
        for i in range(mt):
            terms.append((4 * i + 3, "glap", mt - i - 1))
        for i in range(mt):
            terms.append((4 * i + 1, "lap", mt - i))
    return terms


# ---------------------------------------------------------------------------
# degrees of freedom
# ---------------------------------------------------------------------------

@dataclass
class DofMap:
    """Global numbering of the C0 lattice nodes of P_r on a mesh."""

    r: int
    cell_dofs: np.ndarray        # (nc, nb)
    ndofs: int
    boundary_mask: np.ndarray    # (ndofs,) bool
    node_coords: np.ndarray      # (ndofs, d)

    @property
    def boundary_dofs(self):
        return np.nonzero(self.boundary_mask)[0]


def build_dof_map(mesh: Mesh, basis: ReferenceBasis, faces: FaceTable) -> DofMap:
    """Identify shared lattice nodes across cells in exact integer arithmetic.

    A lattice node of a cell with barycentric integers beta (sum r) sits at
    sum_k beta_k * ivertex_k over the denominator r * mesh.iscale; nodes of
    neighboring cells coincide exactly, so a dictionary of integer tuples
    yields the C0-conforming numbering without geometric tolerances.
    """
    r = basis.r
    d = mesh.d
    nb = basis.size
    # barycentric integers per local node: (r - |alpha|, alpha_1, .., alpha_d)
    barys = np.empty((nb, d + 1), dtype=np.int64)
    for i, alpha in enumerate(basis.node_indices):
        barys[i, 0] = r - sum(alpha)
        barys[i, 1:] = alpha
    ids = {}
    cell_dofs = np.empty((mesh.num_cells, nb), dtype=np.int64)
    coords = []
    for c in range(mesh.num_cells):
        iverts = mesh.ivertices[list(mesh.cells[c])]          # (d+1, d)
        pts = barys @ iverts                                  # (nb, d) integers
        for i in range(nb):
            key = tuple(pts[i])
            gid = ids.get(key)
            if gid is None:
                gid = len(ids)
                ids[key] = gid
                coords.append(pts[i])
            cell_dofs[c, i] = gid
    ndofs = len(ids)
    node_coords = np.array(coords, dtype=float) / (r * mesh.iscale)
    # boundary nodes: local nodes whose barycentric weight at the omitted
    # vertex vanishes, for every boundary face
    onface = {omit: np.nonzero(barys[:, omit] == 0)[0] for omit in range(d + 1)}
    boundary = np.zeros(ndofs, dtype=bool)
    for f in faces:
        if not f.is_boundary:
            continue
        cell = mesh.cells[f.left_cell]
        omit = next(i for i in range(d + 1) if cell[i] not in f.vertices)
        boundary[cell_dofs[f.left_cell, onface[omit]]] = True
    return DofMap(r, cell_dofs, ndofs, boundary, node_coords)


# ---------------------------------------------------------------------------
# evaluation cache
# ---------------------------------------------------------------------------

_REF_VERTS = {d: np.vstack([np.zeros(d), np.eye(d)]) for d in (1, 2, 3)}


class BasisCache:
    """Caches per-cell-shape basis tables; shapes are keyed by the rounded
    Jacobian so structured meshes evaluate each configuration only once."""

    def __init__(self, mesh: Mesh, basis: ReferenceBasis):
        self.mesh = mesh
        self.basis = basis
        self.maps = [affine_map(mesh, c) for c in range(mesh.num_cells)]
        self.jkeys = [m.J.round(14).tobytes() for m in self.maps]
        self._evaluators = {}
        self._tables = {}

    def evaluator(self, cell: int) -> CellEvaluator:
        key = self.jkeys[cell]
        ev = self._evaluators.get(key)
        if ev is None:
            ev = CellEvaluator(self.basis, self.maps[cell].JinvT)
            self._evaluators[key] = ev
        return ev

    def cell_groups(self):
        """Cells grouped by shape class, deterministic order."""
        groups = {}
        for c in range(self.mesh.num_cells):
            groups.setdefault(self.jkeys[c], []).append(c)
        return [np.array(v, dtype=np.int64) for _, v in sorted(groups.items())]

    def tables(self, cell: int, refpts_key, refpts, request):
        """request: ('lap', orders) | ('glap', orders) | ('partials', alphas)
        | ('values', None); orders/alphas must be hashable."""
        key = (self.jkeys[cell], refpts_key, request)
        tab = self._tables.get(key)
        if tab is None:
            ev = self.evaluator(cell)
            kind, arg = request
            if kind == "lap":
                tab = ev.laplacians(refpts, set(arg))
            elif kind == "glap":
                tab = ev.grad_laplacians(refpts, set(arg))
            elif kind == "partials":
                tab = ev.partials(refpts, arg)
            elif kind == "values":
                tab = ev.values(refpts)
            else:
                raise AssemblyError(f"unknown table request {kind}")
            self._tables[key] = tab
        return tab


def face_refpoints(face, side: str, rule) -> np.ndarray:
    """Quadrature points of a face rule in the reference coordinates of the
    cell on the given side, using the face's canonical vertex order so both
    sides sample identical physical points."""
    locals_ = face.left_locals if side == "left" else face.right_locals
    t = rule.points  # (nq, d-1)
    bary = np.hstack([1.0 - t.sum(axis=1, keepdims=True), t])  # (nq, d)
    d = len(locals_)
    refv = _REF_VERTS[d][list(locals_)]
    return bary @ refv


def _face_weights(face, rule, d):
    if d == 1:
        return rule.weights.copy()
    return rule.weights * (face.measure * FACTORIAL[d - 1])


# ---------------------------------------------------------------------------
# linear system
# ---------------------------------------------------------------------------

@dataclass
class LinearSystem:
    """Symmetric sparse system with boundary constraints kept explicit."""

    A: sp.csr_matrix
    b: np.ndarray
    constrained: np.ndarray = field(default_factory=lambda: np.array([], dtype=np.int64))
    values: np.ndarray = field(default_factory=lambda: np.array([]))

    @property
    def ndofs(self):
        return self.A.shape[0]

    @property
    def free(self):
        mask = np.ones(self.ndofs, dtype=bool)
        mask[self.constrained] = False
        return np.nonzero(mask)[0]

    def symmetry_defect(self) -> float:
        diff = abs(self.A - self.A.T)
        denom = abs(self.A).max() or 1.0
        return float(diff.max() / denom) if diff.nnz else 0.0

    def reduced(self):
        """Constrained rows/columns eliminated symmetrically."""
        free = self.free
        A = self.A.tocsr()
        rhs = self.b.copy()
        if len(self.constrained):
            rhs -= A[:, self.constrained] @ self.values
        return A[free][:, free].tocsc(), rhs[free]

    def expand(self, x_free: np.ndarray) -> np.ndarray:
        x = np.zeros(self.ndofs)
        x[self.free] = x_free
        if len(self.constrained):
            x[self.constrained] = self.values
        return x


class _TripletAccumulator:
    """COO triplets folded into a CSR sum in bounded-memory chunks."""

    def __init__(self, ndofs, chunk=6_000_000):
        self.shape = (ndofs, ndofs)
        self.chunk = chunk
        self.rows, self.cols, self.vals = [], [], []
        self.count = 0
        self.total = sp.csr_matrix(self.shape)

    def add(self, rows, cols, vals):
        self.rows.append(np.asarray(rows, dtype=np.int64).ravel())
        self.cols.append(np.asarray(cols, dtype=np.int64).ravel())
        self.vals.append(np.asarray(vals, dtype=float).ravel())
        self.count += self.rows[-1].size
        if self.count >= self.chunk:
            self._flush()

    def _flush(self):
        if not self.count:
            return
        m = sp.coo_matrix(
            (np.concatenate(self.vals),
             (np.concatenate(self.rows), np.concatenate(self.cols))),
            shape=self.shape).tocsr()
        self.total = self.total + m
        self.rows, self.cols, self.vals = [], [], []
        self.count = 0

    def result(self) -> sp.csr_matrix:
        self._flush()
        self.total.sum_duplicates()
        return self.total


def _scatter_same_local(acc, local: np.ndarray, gdofs: np.ndarray):
    """Scatter one local matrix for every row of global dof indices."""
    nb = local.shape[0]
    rows = np.repeat(gdofs, nb, axis=1).ravel()
    cols = np.tile(gdofs, (1, nb)).ravel()
    vals = np.tile(local.ravel(), len(gdofs))
    acc.add(rows, cols, vals)


# ---------------------------------------------------------------------------
# volume and face assembly
# ---------------------------------------------------------------------------

def _volume_rule(spec, d):
    return simplex_rule(d, spec.volume_degree)


def _face_rule(spec, d):
    return face_rule(d - 1, spec.volume_degree)


def assemble_volume(spec: ProblemSpec, mesh: Mesh, dofs: DofMap,
                    cache: BasisCache | None = None) -> sp.csr_matrix:
    """(Delta^mt w, Delta^mt v) for even m, gradient version for odd m."""
    cache = cache or BasisCache(mesh, build_lagrange_basis(mesh.d, spec.r))
    rule = _volume_rule(spec, mesh.d)
    mt = spec.m_tilde
    acc = _TripletAccumulator(dofs.ndofs)
    pts_key = ("vol", rule.exact_degree)
    for cells in cache.cell_groups():
        c0 = int(cells[0])
        if spec.even:
            tab = cache.tables(c0, pts_key, rule.points, ("lap", (mt,)))[mt]
            local = np.einsum("iq,jq,q->ij", tab, tab, rule.weights)
        else:
            tab = cache.tables(c0, pts_key, rule.points, ("glap", (mt,)))[mt]
            local = np.einsum("iqa,jqa,q->ij", tab, tab, rule.weights)
        local = local * cache.maps[c0].detJ
        _scatter_same_local(acc, local, dofs.cell_dofs[cells])
    return acc.result()


def _side_tables(cache, cell, face, side, rule, lap_orders, glap_orders,
                 rule_tag="face"):
    refpts = face_refpoints(face, side, rule)
    key = (rule_tag, rule.exact_degree, face.left_locals if side == "left"
           else face.right_locals)
    lap = cache.tables(cell, key, refpts, ("lap", lap_orders)) if lap_orders else {}
    glap = cache.tables(cell, key, refpts, ("glap", glap_orders)) if glap_orders else {}
    return lap, glap


def _face_stacks(spec, cache, face, rule):
    """Average/jump value stacks over the stacked local dofs of a face.

    Returns (avg, jump) dicts keyed by (kind, order): averages of 'glap'
    entries are pre-contracted with the unit normal, jumps of 'lap' entries
    carry the scalar factor of the normal-vector-valued jump.
    """
    cterms = coupling_terms(spec.m)
    sterms = stabilization_terms(spec.m)
    lap_orders = tuple(sorted({o for _, k, o, _, _ in cterms if k == "lap"}
                              | {o for _, _, _, k, o in cterms if k == "lap"}
                              | {o for _, k, o in sterms if k == "lap"}))
    glap_orders = tuple(sorted({o for _, k, o, _, _ in cterms if k == "glap"}
                               | {o for _, _, _, k, o in cterms if k == "glap"}
                               | {o for _, k, o in sterms if k == "glap"}))
    nu = face.normal
    lapL, glapL = _side_tables(cache, face.left_cell, face, "left", rule,
                               lap_orders, glap_orders)
    if face.is_boundary:
        avg = {("lap", k): lapL[k] for k in lap_orders}
        avg.update({("glap", k): glapL[k] @ nu for k in glap_orders})
        jump = {("lap", k): lapL[k] for k in lap_orders}
        jump.update({("glap", k): glapL[k] @ nu for k in glap_orders})
        return avg, jump
    lapR, glapR = _side_tables(cache, face.right_cell, face, "right", rule,
                               lap_orders, glap_orders)
    avg, jump = {}, {}
    for k in lap_orders:
        avg[("lap", k)] = 0.5 * np.vstack([lapL[k], lapR[k]])
        jump[("lap", k)] = np.vstack([lapL[k], -lapR[k]])
    for k in glap_orders:
        avg[("glap", k)] = 0.5 * np.vstack([glapL[k] @ nu, glapR[k] @ nu])
        jump[("glap", k)] = np.vstack([glapL[k] @ nu, -glapR[k] @ nu])
    return avg, jump


def _face_dofs(face, dofs):
    gd = dofs.cell_dofs[face.left_cell]
    if face.is_boundary:
        return gd
    return np.concatenate([gd, dofs.cell_dofs[face.right_cell]])


def _face_config_key(cache, face):
    left = (cache.jkeys[face.left_cell], face.left_locals)
    right = (None if face.is_boundary
             else (cache.jkeys[face.right_cell], face.right_locals))
    return (left, right, face.normal.round(14).tobytes(),
            round(face.measure, 14))


def _assemble_face_parts(spec, mesh, faces, dofs, cache, parts):
    """Shared face loop; ``parts`` selects any of 'C', 'S', 'A'."""
    rule = _face_rule(spec, mesh.d)
    h = mesh.h_global
    accs = {p: _TripletAccumulator(dofs.ndofs) for p in parts}
    local_cache = {}
    for face in faces:
        key = _face_config_key(cache, face)
        locs = local_cache.get(key)
        if locs is None:
            w = _face_weights(face, rule, mesh.d)
            avg, jump = _face_stacks(spec, cache, face, rule)
            nl = next(iter(jump.values())).shape[0] if jump else None
            C = S = None
            if coupling_terms(spec.m):
                C = np.zeros((nl, nl))
                for sign, pk, po, qk, qo in coupling_terms(spec.m):
                    C += sign * np.einsum("iq,jq,q->ij",
                                          jump[(qk, qo)], avg[(pk, po)], w)
            if stabilization_terms(spec.m):
                S = np.zeros((nl, nl))
                for e, kind, k in stabilization_terms(spec.m):
                    j = jump[(kind, k)]
                    S += h ** (-e) * np.einsum("iq,jq,q->ij", j, j, w)
            locs = (C, S)
            local_cache[key] = locs
        C, S = locs
        gd = _face_dofs(face, dofs)[None, :]
        if "C" in accs and C is not None:
            _scatter_same_local(accs["C"], C, gd)
        if "S" in accs and S is not None:
            _scatter_same_local(accs["S"], S, gd)
        if "A" in accs and (C is not None or S is not None):
            combined = 0.0
            if C is not None:
                combined = C + C.T
            if S is not None:
                combined = combined + spec.tau * S
            _scatter_same_local(accs["A"], combined, gd)
    return {p: accs[p].result() for p in parts}


def assemble_coupling(spec: ProblemSpec, mesh: Mesh, faces: FaceTable,
                      dofs: DofMap, cache: BasisCache | None = None):
    """C(w, v) as a matrix with trial functions in the average slot; the
    method adds this matrix plus its transpose."""
    cache = cache or BasisCache(mesh, build_lagrange_basis(mesh.d, spec.r))
    return _assemble_face_parts(spec, mesh, faces, dofs, cache, ("C",))["C"]


def assemble_stabilization(spec: ProblemSpec, mesh: Mesh, faces: FaceTable,
                           dofs: DofMap, cache: BasisCache | None = None):
    """S(w, v), not yet scaled by tau; zero matrix when m == 1."""
    cache = cache or BasisCache(mesh, build_lagrange_basis(mesh.d, spec.r))
    return _assemble_face_parts(spec, mesh, faces, dofs, cache, ("S",))["S"]


# ---------------------------------------------------------------------------
# load vector and boundary data lifting
# ---------------------------------------------------------------------------

def _face_physical_points(cache, face, refpts):
    amap = cache.maps[face.left_cell]
    return refpts @ amap.J.T + amap.b


def _needs_data(solution, m):
    if solution is None:
        return False
    hom = solution.is_homogeneous(m)
    return hom is not True


def assemble_load(spec: ProblemSpec, mesh: Mesh, faces: FaceTable,
                  dofs: DofMap, cache: BasisCache | None = None,
                  chunk: int = 1024) -> np.ndarray:
    """Right-hand side (f, v) plus boundary-data corrections.

    Every coupling/stabilization face term linear in the trial function's
    boundary jump contributes the known exact trace instead, which moves the
    data to the load vector and keeps the matrix untouched.
    """
    if spec.solution is None:
        raise AssemblyError("assemble_load needs a manufactured solution")
    cache = cache or BasisCache(mesh, build_lagrange_basis(mesh.d, spec.r))
    rule = _volume_rule(spec, mesh.d)
    b = np.zeros(dofs.ndofs)
    sol = spec.solution
    pts_key = ("vol", rule.exact_degree)
    if not getattr(sol, "source_is_zero", lambda m: False)(spec.m):
        for cells in cache.cell_groups():
            c0 = int(cells[0])
            phi = cache.tables(c0, pts_key, rule.points, ("values", None))
            detJ = cache.maps[c0].detJ
            J = cache.maps[c0].J
            for start in range(0, len(cells), chunk):
                sub = cells[start:start + chunk]
                origins = np.array([cache.maps[c].b for c in sub])
                phys = (rule.points @ J.T)[None, :, :] + origins[:, None, :]
                fvals = source_term(sol, spec.m, phys.reshape(-1, mesh.d))
                fvals = fvals.reshape(len(sub), -1)
                bloc = np.einsum("cq,jq,q->cj", fvals, phi, rule.weights) * detJ
                np.add.at(b, dofs.cell_dofs[sub], bloc)
    if _needs_data(sol, spec.m):
        b += _boundary_corrections(spec, mesh, faces, dofs, cache)
    return b


def _boundary_corrections(spec, mesh, faces, dofs, cache) -> np.ndarray:
    """Load contributions C(v, u)|data + tau * S(u, v)|data, boundary faces."""
    rule = _face_rule(spec, mesh.d)
    h = mesh.h_global
    b = np.zeros(dofs.ndofs)
    cterms = coupling_terms(spec.m)
    sterms = stabilization_terms(spec.m)
    if not cterms and not sterms:
        return b
    lap_orders = tuple(sorted({o for _, k, o, _, _ in cterms if k == "lap"}
                              | {o for _, k, o in sterms if k == "lap"}))
    glap_orders = tuple(sorted({o for _, _, _, k, o in cterms if k == "glap"}
                               | {o for _, k, o in sterms if k == "glap"}
                               | {o for _, k, o, _, _ in cterms if k == "glap"}))
    for face in faces:
        if not face.is_boundary:
            continue
        nu = face.normal
        refpts = face_refpoints(face, "left", rule)
        w = _face_weights(face, rule, mesh.d)
        lapv, glapv = _side_tables(cache, face.left_cell, face, "left", rule,
                                   lap_orders, glap_orders)
        phys = _face_physical_points(cache, face, refpts)
        data = boundary_trace_data(spec.solution, phys, spec.m)
        gd = dofs.cell_dofs[face.left_cell]
        contrib = np.zeros(len(gd))
        # C(v, u): test function in the average slot, data in the jump slot
        for sign, pk, po, qk, qo in cterms:
            if qk == "glap":
                g = data["gradlap"][qo] @ nu
                contrib += sign * (lapv[po] * (w * g)).sum(axis=1)
            else:
                g = data["lap"][qo]
                contrib += sign * ((glapv[po] @ nu) * (w * g)).sum(axis=1)
        # tau * S(u, v): data against the matching jump of the test function
        for e, kind, k in sterms:
            if kind == "glap":
                g = data["gradlap"][k] @ nu
                contrib += spec.tau * h ** (-e) * ((glapv[k] @ nu) * (w * g)).sum(axis=1)
            else:
                g = data["lap"][k]
                contrib += spec.tau * h ** (-e) * (lapv[k] * (w * g)).sum(axis=1)
        np.add.at(b, gd, contrib)
    return b


def apply_essential_bc(system: LinearSystem, spec: ProblemSpec,
                       dofs: DofMap) -> LinearSystem:
    """Constrain boundary lattice nodes to the exact trace (or zero)."""
    bdofs = dofs.boundary_dofs
    if spec.solution is not None:
        vals = spec.solution.jet(dofs.node_coords[bdofs], 0).value().copy()
    else:
        vals = np.zeros(len(bdofs))
    return LinearSystem(system.A, system.b, bdofs, vals)


def assemble_system(spec: ProblemSpec, mesh: Mesh, faces: FaceTable,
                    dofs: DofMap, cache: BasisCache | None = None,
                    with_load: bool = True) -> LinearSystem:
    """Full constrained system A = V + C + C^T + tau S with load vector."""
    if spec.d != mesh.d:
        raise AssemblyError("spec dimension does not match the mesh")
    cache = cache or BasisCache(mesh, build_lagrange_basis(mesh.d, spec.r))
    A = assemble_volume(spec, mesh, dofs, cache)
    if spec.m > 1:
        A = A + _assemble_face_parts(spec, mesh, faces, dofs, cache, ("A",))["A"]
    b = assemble_load(spec, mesh, faces, dofs, cache) if with_load \
        else np.zeros(dofs.ndofs)
    return apply_essential_bc(LinearSystem(A, b), spec, dofs)


# ---------------------------------------------------------------------------
# gram matrices for norms and monitors
# ---------------------------------------------------------------------------

def assemble_partial_gram(mesh: Mesh, dofs: DofMap, order: int,
                          cache: BasisCache, degree: int) -> sp.csr_matrix:
    """Volume Gram matrix of all order-``order`` partials with multinomial
    multiplicities: the matrix of ||D^order v||^2 over the mesh."""
    rule = simplex_rule(mesh.d, degree)
    alphas = tuple(a for a in multi_indices(mesh.d, order) if sum(a) == order)
    mults = np.array([multinomial(a) for a in alphas], dtype=float)
    acc = _TripletAccumulator(dofs.ndofs)
    key = ("vol", rule.exact_degree)
    for cells in cache.cell_groups():
        c0 = int(cells[0])
        tab = cache.tables(c0, key, rule.points, ("partials", alphas))
        local = np.einsum("a,aiq,ajq,q->ij", mults, tab, tab, rule.weights)
        local = local * cache.maps[c0].detJ
        _scatter_same_local(acc, local, dofs.cell_dofs[cells])
    return acc.result()


def assemble_jump_gram(mesh: Mesh, faces: FaceTable, dofs: DofMap, order: int,
                       cache: BasisCache, degree: int) -> sp.csr_matrix:
    """Face Gram matrix of the full order-``order`` jump tensor [[D^j v]]_J
    (plain differences; one-sided traces on boundary faces)."""
    rule = face_rule(mesh.d - 1, degree)
    alphas = tuple(a for a in multi_indices(mesh.d, order) if sum(a) == order)
    mults = np.array([multinomial(a) for a in alphas], dtype=float)
    acc = _TripletAccumulator(dofs.ndofs)
    local_cache = {}
    for face in faces:
        key = _face_config_key(cache, face)
        local = local_cache.get(key)
        if local is None:
            w = _face_weights(face, rule, mesh.d)
            keyL = ("err-face", rule.exact_degree, face.left_locals)
            refL = face_refpoints(face, "left", rule)
            tabL = cache.tables(face.left_cell, keyL, refL, ("partials", alphas))
            if face.is_boundary:
                jmp = tabL
            else:
                keyR = ("err-face", rule.exact_degree, face.right_locals)
                refR = face_refpoints(face, "right", rule)
                tabR = cache.tables(face.right_cell, keyR, refR,
                                    ("partials", alphas))
                jmp = np.concatenate([tabL, -tabR], axis=1)
            local = np.einsum("a,aiq,ajq,q->ij", mults, jmp, jmp, w)
            local_cache[key] = local
        _scatter_same_local(acc, local, _face_dofs(face, dofs)[None, :])
    return acc.result()


# ---------------------------------------------------------------------------
# hand-coded specializations (independent cross-check kernels)
# ---------------------------------------------------------------------------

def _hand_side(cache, face, side, rule, kmax):
    """Plain per-side trace values for the hand-written kernels, computed
    directly from a fresh evaluator (no shared table cache)."""
    cell = face.left_cell if side == "left" else face.right_cell
    ev = CellEvaluator(cache.basis, cache.maps[cell].JinvT)
    refpts = face_refpoints(face, side, rule)
    lap = ev.laplacians(refpts, set(range(kmax + 1)))
    glap = ev.grad_laplacians(refpts, set(range(kmax + 1)))
    return lap, glap


def _hand_coded_matrix(spec, mesh, faces, dofs, cache) -> sp.csr_matrix:
    """Literal transcription of the m = 2, 3, 4 formulas, assembled with its
    own face loop; exists only to cross-check the generic term lists."""
    m, tau = spec.m, spec.tau
    if m not in (2, 3, 4):
        raise AssemblyError("hand-coded kernels exist for m = 2, 3, 4 only")
    rule = _face_rule(spec, mesh.d)
    h = mesh.h_global
    ndofs = dofs.ndofs
    rows, cols, vals = [], [], []
    vol_rule = simplex_rule(mesh.d, spec.volume_degree)
    for c in range(mesh.num_cells):
        ev = CellEvaluator(cache.basis, cache.maps[c].JinvT)
        if m in (2, 4):
            k = m // 2
            tab = ev.laplacians(vol_rule.points, {k})[k]
            local = np.einsum("iq,jq,q->ij", tab, tab, vol_rule.weights)
        else:
            g = ev.grad_laplacians(vol_rule.points, {1})[1]
            local = np.einsum("iqa,jqa,q->ij", g, g, vol_rule.weights)
        local *= cache.maps[c].detJ
        gd = dofs.cell_dofs[c]
        rows.append(np.repeat(gd, len(gd)))
        cols.append(np.tile(gd, len(gd)))
        vals.append(local.ravel())
    for face in faces:
        w = _face_weights(face, rule, mesh.d)
        nu = face.normal
        kmax = m - 1
        lapL, glapL = _hand_side(cache, face, "left", rule, kmax)
        if face.is_boundary:
            lap = {k: lapL[k] for k in lapL}
            glap_n = {k: glapL[k] @ nu for k in glapL}
            avg_lap = lap
            avg_glap_n = glap_n
            jmp_lap = lap
            jmp_glap_n = glap_n
        else:
            lapR, glapR = _hand_side(cache, face, "right", rule, kmax)
            avg_lap = {k: 0.5 * np.vstack([lapL[k], lapR[k]]) for k in lapL}
            avg_glap_n = {k: 0.5 * np.vstack([glapL[k] @ nu, glapR[k] @ nu])
                          for k in glapL}
            jmp_lap = {k: np.vstack([lapL[k], -lapR[k]]) for k in lapL}
            jmp_glap_n = {k: np.vstack([glapL[k] @ nu, -glapR[k] @ nu])
                          for k in glapL}

        def pair(test_arr, trial_arr):
            return np.einsum("iq,jq,q->ij", test_arr, trial_arr, w)

        nl = next(iter(jmp_lap.values())).shape[0]
        M = np.zeros((nl, nl))
        if m == 2:
            B = pair(jmp_glap_n[0], avg_lap[1])
            M -= B + B.T
            M += tau * h ** (-1) * pair(jmp_glap_n[0], jmp_glap_n[0])
        elif m == 3:
            B1 = pair(jmp_glap_n[0], avg_lap[2])
            B2 = pair(jmp_lap[1], avg_glap_n[1])
            M += (B1 + B1.T) - (B2 + B2.T)
            M += tau * (h ** (-3) * pair(jmp_glap_n[0], jmp_glap_n[0])
                        + h ** (-1) * pair(jmp_lap[1], jmp_lap[1]))
        else:
            B1 = pair(jmp_glap_n[0], avg_lap[3])
            B2 = pair(jmp_lap[1], avg_glap_n[2])
            B3 = pair(jmp_glap_n[1], avg_lap[2])
            M += -(B1 + B1.T) + (B2 + B2.T) - (B3 + B3.T)
            M += tau * (h ** (-5) * pair(jmp_glap_n[0], jmp_glap_n[0])
                        + h ** (-3) * pair(jmp_lap[1], jmp_lap[1])
                        + h ** (-1) * pair(jmp_glap_n[1], jmp_glap_n[1]))
        gd = _face_dofs(face, dofs)
        rows.append(np.repeat(gd, len(gd)))
        cols.append(np.tile(gd, len(gd)))
        vals.append(M.ravel())
    A = sp.coo_matrix((np.concatenate(vals),
                       (np.concatenate(rows), np.concatenate(cols))),
                      shape=(ndofs, ndofs)).tocsr()
    A.sum_duplicates()
    return A


def check_specialization(m: int, mesh: Mesh, r: int | None = None,
                         tau: float = 1.0) -> float:
    """Max relative entry deviation between the generic assembler and the
    hand-coded m = 2, 3, 4 kernels on a small mesh."""
    if mesh.num_cells > 8:
        raise AssemblyError("specialization check is meant for tiny meshes")
    spec = ProblemSpec(m=m, r=r or m, d=mesh.d, tau=tau)
    from .mesh import build_face_table
    faces = build_face_table(mesh)
    basis = build_lagrange_basis(mesh.d, spec.r)
    cache = BasisCache(mesh, basis)
    dofs = build_dof_map(mesh, basis, faces)
    A = assemble_volume(spec, mesh, dofs, cache)
    parts = _assemble_face_parts(spec, mesh, faces, dofs, cache, ("A",))
    A = A + parts["A"]
    B = _hand_coded_matrix(spec, mesh, faces, dofs, cache)
    scale = max(abs(A).max(), 1.0)
    return float(abs(A - B).max() / scale)


def dump_matrix_market(system: LinearSystem, path):
    """Write the (unconstrained) matrix in Matrix Market coordinate format."""
    from scipy.io import mmwrite
    mmwrite(str(path), system.A.tocoo())

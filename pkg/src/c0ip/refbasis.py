"""Lagrange bases on the reference simplex and physical derivative tables.

Basis functions live on the equispaced lattice {alpha / r : |alpha| <= r} and
are represented by monomial coefficients obtained from an exact rational
Vandermonde solve (cast to float afterwards), so nodal interpolation and
derivative evaluation carry no solver round-off of their own.

Because cell maps are affine, any physical derivative is a constant-coefficient
combination of reference derivatives.  Derivatives act on the monomial
coefficient vectors through small dense matrices:

    d/dx_a         =  sum_b JinvT[a, b] D_b
    laplacian      =  sum_{b,c} (Jinv Jinv^T)[b, c] D_b D_c

which makes iterated Laplacians and arbitrary partials exact polynomial
operations, evaluated afterwards at quadrature points.
"""

from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from math import comb, factorial

import numpy as np

MAX_DEGREE = 6


class BasisError(ValueError):
    """Unsupported basis request."""


@lru_cache(maxsize=None)
def multi_indices(d: int, max_deg: int):
    """All length-d multi-indices with |alpha| <= max_deg, graded lexicographic."""
    out = []
    def rec(prefix, remaining_slots, budget):
        if remaining_slots == 0:
            out.append(tuple(prefix))
            return
        for a in range(budget + 1):
            rec(prefix + [a], remaining_slots - 1, budget - a)
    rec([], d, max_deg)
    out.sort(key=lambda a: (sum(a), a))
    return tuple(out)


def multinomial(alpha) -> int:
    """Number of ordered derivative tuples collapsing to multi-index alpha."""
    n = factorial(sum(alpha))
    for a in alpha:
        n //= factorial(a)
    return n


def _rational_inverse(M):
    """Invert a list-of-lists Fraction matrix by Gauss-Jordan elimination."""
    n = len(M)
    A = [row[:] + [Fraction(int(i == j)) for j in range(n)] for i, row in enumerate(M)]
    for col in range(n):
        piv = next((r for r in range(col, n) if A[r][col] != 0), None)
        if piv is None:
            raise BasisError("singular Vandermonde system")
        A[col], A[piv] = A[piv], A[col]
        inv = Fraction(1) / A[col][col]
        A[col] = [x * inv for x in A[col]]
        for r in range(n):
            if r != col and A[r][col] != 0:
                f = A[r][col]
                A[r] = [x - f * y for x, y in zip(A[r], A[col])]
    return [row[n:] for row in A]


@dataclass(frozen=True)
class ReferenceBasis:
    """Lagrange basis of degree r on the reference d-simplex.

    coeffs[i, k] is the coefficient of monomial ``monomials[k]`` in the i-th
    basis function; basis function i is nodal at lattice point
    ``node_indices[i] / r``.
    """

    d: int
    r: int
    node_indices: tuple      # multi-indices alpha, node = alpha / r
    monomials: tuple
    coeffs: np.ndarray       # (nb, nb)
    nodes: np.ndarray        # (nb, d)

    @property
    def size(self) -> int:
        return len(self.node_indices)


@lru_cache(maxsize=None)
def build_lagrange_basis(d: int, r: int) -> ReferenceBasis:
    if d not in (1, 2, 3):
        raise BasisError(f"unsupported dimension {d}")
    if not 1 <= r <= MAX_DEGREE:
        raise BasisError(f"degree r={r} outside supported range 1..{MAX_DEGREE}")
    idx = multi_indices(d, r)
    n = len(idx)
    assert n == comb(r + d, d)
    # V[i][k] = node_i ^ monomial_k in exact rationals
    V = []
    for alpha in idx:
        node = [Fraction(a, r) for a in alpha]
        row = []
        for gamma in idx:
            val = Fraction(1)
            for x, g in zip(node, gamma):
                val *= x ** g
            row.append(val)
        V.append(row)
    Vinv = _rational_inverse(V)
    # phi_i = sum_k C[i, k] mono_k with C = V^{-T}
    C = np.array([[float(Vinv[k][i]) for k in range(n)] for i in range(n)])
    nodes = np.array([[a / r for a in alpha] for alpha in idx])
    return ReferenceBasis(d, r, idx, idx, C, nodes)


@lru_cache(maxsize=None)
def _diff_matrices(d: int, r: int):
    """Coefficient-space matrices of d/dxhat_b for the degree-r monomial set."""
    idx = multi_indices(d, r)
    pos = {a: i for i, a in enumerate(idx)}
    n = len(idx)
    mats = []
    for b in range(d):
        D = np.zeros((n, n))
        for j, alpha in enumerate(idx):
            if alpha[b] > 0:
                low = list(alpha)
                low[b] -= 1
                D[pos[tuple(low)], j] = alpha[b]
        mats.append(D)
    return mats


def _monomial_values(basis: ReferenceBasis, points: np.ndarray) -> np.ndarray:
    """(ncoef, npts) array of monomial values."""
    pts = np.asarray(points, dtype=float).reshape(-1, basis.d)
    out = np.empty((len(basis.monomials), len(pts)))
    for k, gamma in enumerate(basis.monomials):
        v = np.ones(len(pts))
        for ax, g in enumerate(gamma):
            if g:
                v = v * pts[:, ax] ** g
        out[k] = v
    return out


def ref_derivative(basis: ReferenceBasis, k: int, alpha, point) -> float:
    """Exact reference-domain derivative d^alpha phi_k at ``point``."""
    alpha = tuple(int(a) for a in alpha)
    if sum(alpha) > basis.r:
        return 0.0
    c = basis.coeffs[k].copy()
    mats = _diff_matrices(basis.d, basis.r)
    for ax, a in enumerate(alpha):
        for _ in range(a):
            c = mats[ax] @ c
    vals = _monomial_values(basis, np.asarray(point, dtype=float).reshape(1, -1))
    return float(c @ vals[:, 0])


class CellEvaluator:
    """Physical derivative evaluation of all basis functions on one cell shape.

    The object is defined by (basis, JinvT); all evaluations are exact
    polynomial manipulations followed by pointwise evaluation.
    """

    def __init__(self, basis: ReferenceBasis, JinvT: np.ndarray):
        self.basis = basis
        self.JinvT = np.asarray(JinvT, dtype=float)
        self.d = basis.d
        self._Dref = _diff_matrices(basis.d, basis.r)
        # physical partial derivative operators
        self._Dphys = [
            sum(self.JinvT[a, b] * self._Dref[b] for b in range(self.d))
            for a in range(self.d)
        ]
        G = self.JinvT.T @ self.JinvT  # metric Jinv Jinv^T
        n = len(basis.monomials)
        L = np.zeros((n, n))
        for b in range(self.d):
            for c in range(self.d):
                if G[b, c] != 0.0:
                    L += G[b, c] * (self._Dref[b] @ self._Dref[c])
        self._lap = L
        self._CT = basis.coeffs.T.copy()  # (ncoef, nb)

    def _coeffs_lap(self, k: int) -> np.ndarray:
        c = self._CT
        for _ in range(k):
            c = self._lap @ c
        return c

    def laplacians(self, points: np.ndarray, orders) -> dict:
        """{k: (nb, nq) array of Delta^k phi} for each k in ``orders``."""
        V = _monomial_values(self.basis, points)
        out = {}
        c = self._CT
        upto = max(orders, default=-1)
        for k in range(upto + 1):
            if k in orders:
                out[k] = (c.T @ V)
            if k < upto:
                c = self._lap @ c
        return out

    def grad_laplacians(self, points: np.ndarray, orders) -> dict:
        """{k: (nb, nq, d) array of grad Delta^k phi}."""
        V = _monomial_values(self.basis, points)
        out = {}
        c = self._CT
        upto = max(orders, default=-1)
        for k in range(upto + 1):
            if k in orders:
                g = np.empty((self.basis.size, V.shape[1], self.d))
                for a in range(self.d):
                    g[:, :, a] = (self._Dphys[a] @ c).T @ V
                out[k] = g
            if k < upto:
                c = self._lap @ c
        return out

    def partials(self, points: np.ndarray, alphas) -> np.ndarray:
        """(nalpha, nb, nq) array of physical partials d^alpha phi."""
        V = _monomial_values(self.basis, points)
        out = np.empty((len(alphas), self.basis.size, V.shape[1]))
        for i, alpha in enumerate(alphas):
            c = self._CT
            for ax, a in enumerate(alpha):
                for _ in range(a):
                    c = self._Dphys[ax] @ c
            out[i] = c.T @ V
        return out

    def values(self, points: np.ndarray) -> np.ndarray:
        V = _monomial_values(self.basis, points)
        return self._CT.T @ V


@dataclass
class DerivTable:
    """Cached per-(cell shape, rule) physical derivative values.

    lap[k] has shape (nb, nq); gradlap[k] has shape (nb, nq, d);
    partials, when present, stacks d^alpha phi over the requested alphas.
    """

    lap: dict
    gradlap: dict
    partials: np.ndarray | None = None
    alphas: tuple | None = None


def physical_deriv_table(basis: ReferenceBasis, amap, points, m: int,
                         alphas=None, face: bool = False) -> DerivTable:
    """Build the derivative tables used by volume/face assembly for order m.

    ``points`` are reference coordinates.  Volume tables carry laplacian
    powers up to ceil(m/2) (all the volume term needs); face tables carry
    powers up to m-1, which the coupling term requires.  Raw partials are
    included only when ``alphas`` is given.
    """
    ev = CellEvaluator(basis, amap.JinvT)
    kmax = max(m - 1, 0) if face else (m + 1) // 2
    orders = range(kmax + 1)
    table = DerivTable(
        lap=ev.laplacians(points, set(orders)),
        gradlap=ev.grad_laplacians(points, set(orders)),
    )
    if alphas is not None:
        table.partials = ev.partials(points, alphas)
        table.alphas = tuple(alphas)
    return table

"""Quadrature rules on reference simplices.

Volume and face rules are conical-product (collapsed tensor) Gauss rules:
Gauss-Legendre in the last coordinate combined with Gauss-Jacobi rules that
absorb the collapse Jacobian exactly.  All weights are positive and every
rule is audited at construction time against the closed-form monomial
integral on the reference simplex,

    int_T x^alpha dx = (prod_i alpha_i!) / (|alpha| + dim)!

The reference simplex is {x_i >= 0, sum x_i <= 1} with measure 1/dim!.
"""

from dataclasses import dataclass
from functools import lru_cache
from itertools import product
from math import factorial

import numpy as np
from scipy.special import roots_jacobi, roots_legendre

MAX_DEGREE = 30


class QuadratureError(ValueError):
    """Unsupported rule request or failed exactness audit."""


@dataclass(frozen=True)
class QuadRule:
    """Points and weights on the reference simplex of dimension ``dim``.

    ``dim == 0`` is the degenerate point "rule" used for faces of 1D meshes:
    a single point with weight one (integration = evaluation).
    """

    dim: int
    points: np.ndarray   # (n, dim)
    weights: np.ndarray  # (n,)
    exact_degree: int

    @property
    def npoints(self) -> int:
        return len(self.weights)


def monomial_integral(alpha, dim: int) -> float:
    """Exact integral of x^alpha over the reference ``dim``-simplex."""
    alpha = tuple(int(a) for a in alpha)
    num = 1
    for a in alpha:
        num *= factorial(a)
    return num / factorial(sum(alpha) + dim)


def _gauss_jacobi_01(n: int, alpha: int):
    """Nodes/weights for int_0^1 f(x) (1-x)^alpha dx, exact for deg(f) <= 2n-1."""
    if alpha == 0:
        t, w = roots_legendre(n)
    else:
        t, w = roots_jacobi(n, alpha, 0.0)
    x = 0.5 * (t + 1.0)
    w = w * 0.5 ** (alpha + 1)
    return x, w


def _interval_rule(degree: int) -> QuadRule:
    n = degree // 2 + 1
    x, w = _gauss_jacobi_01(n, 0)
    return QuadRule(1, x.reshape(-1, 1), w, 2 * n - 1)


def _triangle_rule(degree: int) -> QuadRule:
    n = degree // 2 + 1
    xi, wx = _gauss_jacobi_01(n, 1)
    eta, wy = _gauss_jacobi_01(n, 0)
    pts = np.empty((n * n, 2))
    wts = np.empty(n * n)
    k = 0
    for i in range(n):
        for j in range(n):
            pts[k, 0] = xi[i]
            pts[k, 1] = eta[j] * (1.0 - xi[i])
            wts[k] = wx[i] * wy[j]
            k += 1
    return QuadRule(2, pts, wts, 2 * n - 1)


def _tet_rule(degree: int) -> QuadRule:
    n = degree // 2 + 1
    xi, wx = _gauss_jacobi_01(n, 2)
    eta, wy = _gauss_jacobi_01(n, 1)
    zeta, wz = _gauss_jacobi_01(n, 0)
    pts = np.empty((n ** 3, 3))
    wts = np.empty(n ** 3)
    k = 0
    for i in range(n):
        for j in range(n):
            for l in range(n):
                pts[k, 0] = xi[i]
                pts[k, 1] = eta[j] * (1.0 - xi[i])
                pts[k, 2] = zeta[l] * (1.0 - xi[i]) * (1.0 - eta[j])
                wts[k] = wx[i] * wy[j] * wz[l]
                k += 1
    return QuadRule(3, pts, wts, 2 * n - 1)


def _all_multi_indices(dim: int, max_degree: int):
    for idx in product(range(max_degree + 1), repeat=dim):
        if sum(idx) <= max_degree:
            yield idx


def verify_exactness(rule: QuadRule, tol: float = 1e-12) -> float:
    """Audit the rule over all monomials up to its exact degree.

    Returns the worst relative deviation; raises QuadratureError beyond tol.
    """
    if rule.dim == 0:
        return 0.0
    worst = 0.0
    for alpha in _all_multi_indices(rule.dim, rule.exact_degree):
        vals = np.prod(rule.points ** np.asarray(alpha), axis=1)
        approx = float(rule.weights @ vals)
        exact = monomial_integral(alpha, rule.dim)
        dev = abs(approx - exact) / max(abs(exact), 1.0)
        worst = max(worst, dev)
    if worst > tol:
        raise QuadratureError(
            f"rule dim={rule.dim} degree={rule.exact_degree} audit failed: {worst:.3e}"
        )
    return worst


@lru_cache(maxsize=None)
def simplex_rule(dim: int, degree: int) -> QuadRule:
    """Volume rule on the reference ``dim``-simplex, exact to ``degree``."""
    if dim not in (1, 2, 3):
        raise QuadratureError(f"unsupported simplex dimension {dim}")
    if degree < 0 or degree > MAX_DEGREE:
        raise QuadratureError(f"unsupported quadrature degree {degree}")
    rule = {1: _interval_rule, 2: _triangle_rule, 3: _tet_rule}[dim](degree)
    verify_exactness(rule)
    return rule


@lru_cache(maxsize=None)
def face_rule(dim_minus_1: int, degree: int) -> QuadRule:
    """Rule on a (d-1)-face; for 1D meshes the face is a point with weight 1."""
    if dim_minus_1 == 0:
        return QuadRule(0, np.zeros((1, 0)), np.ones(1), MAX_DEGREE)
    return simplex_rule(dim_minus_1, degree)

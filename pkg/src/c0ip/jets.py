"""Truncated multivariate Taylor (jet) arithmetic and manufactured solutions.

A jet stores, for every multi-index |alpha| <= K, the scaled derivative
d^alpha u / alpha! at a batch of expansion points.  All exact-solution data
(right-hand sides, boundary traces, error integrands) flows through jets, so
there is a single mechanism to test instead of hand-written derivative
formulas per solution.

Coefficient arrays are vectorized over points: shape (ncoef, npts).
"""

from dataclasses import dataclass
from functools import lru_cache
from math import factorial

import numpy as np

from .refbasis import multi_indices, multinomial


class JetError(ValueError):
    pass


class QuadraturePlacementError(JetError):
    """A singular solution was evaluated at its singular point; quadrature
    rules never place points on vertices, so this indicates a caller bug."""


@lru_cache(maxsize=None)
def _index_maps(d: int, K: int):
    idx = multi_indices(d, K)
    pos = {a: i for i, a in enumerate(idx)}
    return idx, pos


@lru_cache(maxsize=None)
def _mul_table(d: int, K: int):
    """Index triplets (i, j, o) with alpha_i + alpha_j = alpha_o, |alpha_o| <= K."""
    idx, pos = _index_maps(d, K)
    table = []
    for i, a in enumerate(idx):
        for j, b in enumerate(idx):
            s = tuple(x + y for x, y in zip(a, b))
            if sum(s) <= K:
                table.append((i, j, pos[s]))
    return tuple(table)


class Jet:
    """Taylor expansion to order K of one function at a batch of points."""

    __slots__ = ("d", "K", "coeffs")

    def __init__(self, d, K, coeffs):
        self.d = d
        self.K = K
        self.coeffs = coeffs  # (ncoef, npts)

    # -- construction -----------------------------------------------------
    @staticmethod
    def constant(d, K, values, npts=None):
        values = np.atleast_1d(np.asarray(values))
        if npts is None:
            npts = len(values)
        idx, _ = _index_maps(d, K)
        c = np.zeros((len(idx), npts), dtype=values.dtype)
        c[0] = values
        return Jet(d, K, c)

    @staticmethod
    def variable(d, K, axis, points):
        pts = np.asarray(points, dtype=float).reshape(-1, d)
        idx, pos = _index_maps(d, K)
        c = np.zeros((len(idx), len(pts)))
        c[0] = pts[:, axis]
        if K >= 1:
            e = tuple(int(i == axis) for i in range(d))
            c[pos[e]] = 1.0
        return Jet(d, K, c)

    # -- ring operations ---------------------------------------------------
    def _like(self, coeffs):
        return Jet(self.d, self.K, coeffs)

    def __add__(self, other):
        if isinstance(other, Jet):
            return self._like(self.coeffs + other.coeffs)
        c = self.coeffs.copy()
        c[0] = c[0] + other
        return self._like(c)

    __radd__ = __add__

    def __neg__(self):
        return self._like(-self.coeffs)

    def __sub__(self, other):
        if isinstance(other, Jet):
            return self._like(self.coeffs - other.coeffs)
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if not isinstance(other, Jet):
            return self._like(self.coeffs * other)
        a, b = self.coeffs, other.coeffs
        out = np.zeros(a.shape, dtype=np.result_type(a, b))
        for i, j, o in _mul_table(self.d, self.K):
            out[o] += a[i] * b[j]
        return self._like(out)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Jet):
            return self * other.reciprocal()
        return self._like(self.coeffs / other)

    def ipow(self, n: int):
        """Integer power by repeated multiplication (valid at any center)."""
        if n < 0:
            return self.ipow(-n).reciprocal()
        out = Jet.constant(self.d, self.K, np.ones(self.coeffs.shape[1]))
        base = self
        while n:
            if n & 1:
                out = out * base
            base = base * base if n > 1 else base
            n >>= 1
        return out

    # -- composition with univariate outer functions ------------------------
    def compose(self, outer_coeffs):
        """sum_k outer_coeffs[k] * (self - self0)^k, truncated at K.

        outer_coeffs[k] must be F^(k)(g0)/k! evaluated at the inner jet's
        value array g0; evaluated by Horner in jet arithmetic.
        """
        ghat = self._like(self.coeffs.copy())
        ghat.coeffs[0] = 0.0
        res = Jet.constant(self.d, self.K, outer_coeffs[-1].astype(
            np.result_type(outer_coeffs[-1], self.coeffs)))
        for k in range(len(outer_coeffs) - 2, -1, -1):
            res = res * ghat
            res.coeffs[0] += outer_coeffs[k]
        return res

    def sin(self):
        g0 = self.coeffs[0]
        cyc = [np.sin(g0), np.cos(g0), -np.sin(g0), -np.cos(g0)]
        outer = [cyc[k % 4] / factorial(k) for k in range(self.K + 1)]
        return self.compose(outer)

    def cos(self):
        g0 = self.coeffs[0]
        cyc = [np.cos(g0), -np.sin(g0), -np.cos(g0), np.sin(g0)]
        outer = [cyc[k % 4] / factorial(k) for k in range(self.K + 1)]
        return self.compose(outer)

    def power(self, p: float):
        """Real power t^p; requires positive centers unless p is a whole number."""
        if float(p).is_integer() and p >= 0:
            return self.ipow(int(p))
        g0 = self.coeffs[0]
        if np.iscomplexobj(g0):
            bad = np.abs(g0) == 0.0
        else:
            bad = g0 <= 0.0
        if np.any(bad):
            raise QuadraturePlacementError(
                "non-integer power of a jet centered at a non-positive value")
        outer = []
        fac = np.ones_like(g0)
        for k in range(self.K + 1):
            outer.append(fac * g0 ** (p - k) / factorial(k))
            fac = fac * (p - k)
        return self.compose(outer)

    def reciprocal(self):
        g0 = self.coeffs[0]
        if np.any(g0 == 0.0):
            raise JetError("reciprocal of a jet centered at zero")
        outer = [(-1.0) ** k * g0 ** (-1 - k) for k in range(self.K + 1)]
        return self.compose(outer)

    # -- extraction ---------------------------------------------------------
    def value(self):
        return self.coeffs[0]

    def derivative(self, alpha):
        """d^alpha u at the expansion points (alpha! times the coefficient)."""
        alpha = tuple(int(a) for a in alpha)
        if sum(alpha) > self.K:
            raise JetError(f"jet order {self.K} cannot provide d^{alpha}")
        _, pos = _index_maps(self.d, self.K)
        fac = 1
        for a in alpha:
            fac *= factorial(a)
        return self.coeffs[pos[alpha]] * fac

    def gradient_axis(self, axis):
        """Jet of d u / d x_axis (order drops by one)."""
        if self.K < 1:
            raise JetError("jet order too low for a gradient")
        idx_lo, _ = _index_maps(self.d, self.K - 1)
        _, pos = _index_maps(self.d, self.K)
        out = np.empty((len(idx_lo), self.coeffs.shape[1]), dtype=self.coeffs.dtype)
        for i, a in enumerate(idx_lo):
            up = list(a)
            up[axis] += 1
            out[i] = self.coeffs[pos[tuple(up)]] * up[axis]
        return Jet(self.d, self.K - 1, out)

    def laplacian(self):
        """Jet of Delta u (order drops by two)."""
        if self.K < 2:
            raise JetError("jet order too low for a laplacian")
        idx_lo, _ = _index_maps(self.d, self.K - 2)
        _, pos = _index_maps(self.d, self.K)
        out = np.zeros((len(idx_lo), self.coeffs.shape[1]), dtype=self.coeffs.dtype)
        for i, a in enumerate(idx_lo):
            for ax in range(self.d):
                up = list(a)
                up[ax] += 2
                out[i] += self.coeffs[pos[tuple(up)]] * (a[ax] + 1) * (a[ax] + 2)
        return Jet(self.d, self.K - 2, out)


def m_laplace(jet: Jet, m: int):
    """(-1)^m Delta^m u at the jet's expansion points."""
    if jet.K < 2 * m:
        raise JetError(f"jet order {jet.K} insufficient for Delta^{m}")
    cur = jet
    for _ in range(m):
        cur = cur.laplacian()
    return ((-1) ** m) * cur.value()


# ---------------------------------------------------------------------------
# manufactured solutions
# ---------------------------------------------------------------------------

class ExactSolution:
    """Interface: a named closed-form function with jets at arbitrary points."""

    d: int
    name: str

    def jet(self, points, K: int) -> Jet:
        raise NotImplementedError

    def is_homogeneous(self, m: int):
        """True/False when known analytically, None to decide by trace sampling."""
        return None

    def __repr__(self):
        return self.name


class SeparableProduct(ExactSolution):
    """u(x) = prod_i g_i(x_i) with cheap closed-form univariate jets."""

    def _axis_jets(self, axis, x, K):
        """Array (K+1, npts) with g^{(k)}(x)/k!."""
        raise NotImplementedError

    def jet(self, points, K):
        pts = np.asarray(points, dtype=float).reshape(-1, self.d)
        idx, _ = _index_maps(self.d, K)
        axis_tabs = [self._axis_jets(ax, pts[:, ax], K) for ax in range(self.d)]
        coeffs = np.empty((len(idx), len(pts)))
        for i, alpha in enumerate(idx):
            v = axis_tabs[0][alpha[0]].copy()
            for ax in range(1, self.d):
                v *= axis_tabs[ax][alpha[ax]]
            coeffs[i] = v
        return Jet(self.d, K, coeffs)


class SineProduct(SeparableProduct):
    """u = prod_i sin(pi x_i) on the unit interval/square/cube."""

    def __init__(self, d):
        self.d = d
        self.name = f"sine-product-{d}d"

    def _axis_jets(self, axis, x, K):
        out = np.empty((K + 1, len(x)))
        for k in range(K + 1):
            out[k] = np.pi ** k * np.sin(np.pi * x + k * np.pi / 2) / factorial(k)
        return out

    def is_homogeneous(self, m):
        # value vanishes on the boundary but the normal derivative does not
        return m == 1


class PolyBubble(SeparableProduct):
    """u = prod_i (x_i (1 - x_i))^m; all traces up to order m-1 vanish."""

    def __init__(self, d, m):
        self.d = d
        self.m = m
        self.name = f"poly-bubble-{d}d-m{m}"
        base = np.array([0.0, 1.0, -1.0])  # x - x^2
        poly = np.array([1.0])
        for _ in range(m):
            poly = np.convolve(poly, base)
        self._poly = poly  # ascending coefficients

    def _axis_jets(self, axis, x, K):
        out = np.zeros((K + 1, len(x)))
        p = self._poly
        for k in range(K + 1):
            if len(p) == 0:
                break
            out[k] = np.polyval(p[::-1], x) / factorial(k)
            p = np.arange(1, len(p)) * p[1:]
        return out

    def is_homogeneous(self, mm):
        return mm <= self.m


class RadialPowerBubble(ExactSolution):
    """u = (x^2 + y^2)^(7.1/4) (x - x^2)^3 (y - y^2)^3 on the unit square.

    In H^s for 4 <= s < 4.1 only, because of the radial factor at the corner.
    """

    def __init__(self, exponent=7.1 / 4.0):
        self.d = 2
        self.exponent = exponent
        self.name = "radial-power-bubble"

    def jet(self, points, K):
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        x = Jet.variable(2, K, 0, pts)
        y = Jet.variable(2, K, 1, pts)
        radial = (x * x + y * y).power(self.exponent)
        bubble = (x - x * x).ipow(3) * (y - y * y).ipow(3)
        return radial * bubble

    def is_homogeneous(self, m):
        return m <= 3


class CornerSingularity(ExactSolution):
    """u = r^a sin(a theta) with theta measured in [0, 2 pi), a = 5/2 by default.

    Harmonic away from the origin; the natural singular solution on the
    L-shaped domain whose re-entrant corner sits at the origin.  Implemented
    through the holomorphic map w -> w^a: all partials follow from
    d/dx = d/dw and d/dy = i d/dw.
    """

    def __init__(self, exponent=2.5):
        self.d = 2
        self.exponent = exponent
        self.name = "corner-singularity"

    def jet(self, points, K):
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        w = pts[:, 0] + 1j * pts[:, 1]
        r = np.abs(w)
        theta = np.mod(np.angle(w), 2.0 * np.pi)
        a = self.exponent
        idx, _ = _index_maps(2, K)
        coeffs = np.empty((len(idx), len(pts)))
        origin = r == 0.0
        if np.any(origin) and K >= int(np.ceil(a)):
            raise QuadraturePlacementError(
                "corner-singularity jet of this order is singular at the origin")
        # falling-factorial prefactors a (a-1) ... (a-j+1)
        ff = np.ones(K + 1)
        for j in range(1, K + 1):
            ff[j] = ff[j - 1] * (a - (j - 1))
        with np.errstate(divide="ignore", invalid="ignore"):
            for i, (ax, ay) in enumerate(idx):
                j = ax + ay
                mag = np.where(origin, 0.0, r ** (a - j))
                ang = (a - j) * theta + ay * (np.pi / 2.0)
                val = ff[j] * mag * np.sin(ang)
                fac = factorial(ax) * factorial(ay)
                coeffs[i] = val / fac
        return Jet(2, K, coeffs)

    def is_homogeneous(self, m):
        return False


# ---------------------------------------------------------------------------
# custom expressions: small prefix grammar
# ---------------------------------------------------------------------------

_UNARY = {"sin", "cos", "neg"}
_BINARY = {"+", "-", "*", "/", "pow"}
_VARS = {"x": 0, "y": 1, "z": 2}


def parse_prefix_expr(text: str):
    """Parse a whitespace-separated prefix expression into a nested tuple.

    Tokens: binary '+ - * / pow', unary 'sin cos neg', variables 'x y z',
    the constant 'pi', and numeric literals.  Example:
    '* sin * pi x sin * pi y' is sin(pi x) sin(pi y).
    """
    tokens = text.replace("(", " ").replace(")", " ").split()

    def parse(pos):
        if pos >= len(tokens):
            raise JetError("truncated expression")
        tok = tokens[pos]
        if tok in _BINARY:
            lhs, pos = parse(pos + 1)
            rhs, pos = parse(pos)
            return (tok, lhs, rhs), pos
        if tok in _UNARY:
            arg, pos = parse(pos + 1)
            return (tok, arg), pos
        if tok in _VARS:
            return ("var", _VARS[tok]), pos + 1
        if tok == "pi":
            return ("const", np.pi), pos + 1
        try:
            return ("const", float(tok)), pos + 1
        except ValueError:
            raise JetError(f"unknown token {tok!r}") from None

    tree, pos = parse(0)
    if pos != len(tokens):
        raise JetError("trailing tokens in expression")
    return tree


class CustomExpression(ExactSolution):
    """Closed-form solution given by a prefix-grammar expression tree."""

    def __init__(self, expr: str, d: int):
        self.d = d
        self.tree = parse_prefix_expr(expr) if isinstance(expr, str) else expr
        self.name = f"custom({expr})" if isinstance(expr, str) else "custom"
        self._check_vars(self.tree)

    def _check_vars(self, node):
        op = node[0]
        if op == "var":
            if node[1] >= self.d:
                raise JetError("expression uses a variable beyond the dimension")
        elif op != "const":
            for child in node[1:]:
                self._check_vars(child)

    def _eval(self, node, points, K):
        op = node[0]
        if op == "const":
            return Jet.constant(self.d, K, np.full(len(points), node[1]))
        if op == "var":
            return Jet.variable(self.d, K, node[1], points)
        args = [self._eval(child, points, K) for child in node[1:]]
        if op == "+":
            return args[0] + args[1]
        if op == "-":
            return args[0] - args[1]
        if op == "*":
            return args[0] * args[1]
        if op == "/":
            return args[0] / args[1]
        if op == "pow":
            if node[2][0] != "const":
                raise JetError("pow exponent must be a constant")
            return args[0].power(node[2][1])
        if op == "sin":
            return args[0].sin()
        if op == "cos":
            return args[0].cos()
        if op == "neg":
            return -args[0]
        raise JetError(f"unknown operator {op}")

    def jet(self, points, K):
        pts = np.asarray(points, dtype=float).reshape(-1, self.d)
        return self._eval(self.tree, pts, K)


# ---------------------------------------------------------------------------
# derived data
# ---------------------------------------------------------------------------

def jet_of_solution(solution: ExactSolution, points, K: int) -> Jet:
    """Jet of the manufactured solution at a batch of points."""
    return solution.jet(points, K)


def required_jet_order(m: int) -> int:
    """Order that covers the right-hand side and all error/boundary data."""
    return max(2 * m, m + 1)


def source_term(solution: ExactSolution, m: int, points):
    """f = (-1)^m Delta^m u at the given points."""
    return m_laplace(solution.jet(points, 2 * m), m)


def boundary_trace_data(solution: ExactSolution, points, m: int):
    """Traces {u, Delta^k u, grad Delta^k u : k <= m-1} at boundary points."""
    pts = np.asarray(points, dtype=float).reshape(-1, solution.d)
    jet = solution.jet(pts, 2 * m - 1)
    data = {"value": jet.value().copy(), "lap": {}, "gradlap": {}}
    cur = jet
    for k in range(m):
        grad = np.empty((len(pts), solution.d))
        for ax in range(solution.d):
            e = tuple(int(i == ax) for i in range(solution.d))
            grad[:, ax] = cur.derivative(e).real if np.iscomplexobj(
                cur.coeffs) else cur.derivative(e)
        data["lap"][k] = cur.value().copy()
        data["gradlap"][k] = grad
        if k < m - 1:
            cur = cur.laplacian()
    return data


def normal_derivatives(solution: ExactSolution, points, normals, m: int):
    """Stack of d^j u / d nu^j for j = 0..m-1 at boundary sample points."""
    pts = np.asarray(points, dtype=float).reshape(-1, solution.d)
    nrm = np.asarray(normals, dtype=float).reshape(-1, solution.d)
    jet = solution.jet(pts, max(m - 1, 0))
    idx, _ = _index_maps(solution.d, jet.K)
    out = np.zeros((m, len(pts)))
    for alpha in idx:
        j = sum(alpha)
        if j >= m:
            continue
        nu_pow = np.ones(len(pts))
        for ax, a in enumerate(alpha):
            if a:
                nu_pow = nu_pow * nrm[:, ax] ** a
        out[j] += multinomial(alpha) * nu_pow * jet.derivative(alpha)
    return out


def check_homogeneous_bc(solution: ExactSolution, m: int, points, normals,
                         tol: float = 1e-10) -> bool:
    """Sample whether the solution satisfies the order-m homogeneous BCs."""
    known = solution.is_homogeneous(m)
    if known is not None:
        return known
    stack = normal_derivatives(solution, points, normals, m)
    return bool(np.max(np.abs(stack)) <= tol)

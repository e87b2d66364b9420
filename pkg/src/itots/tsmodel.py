"""Itô stochastic Takagi-Sugeno models.

A model is a rule base of local linear SDEs ``dx = (A_i x + B_i u) dt + C_i x dW``
blended by fuzzy basis functions ``h_i(x) = prod_j mu_j^{alpha_ij}(x_j)``.
Membership families are one-dimensional, so both the basis functions and
their partial derivatives are cheap to evaluate analytically.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import optimize

DEFAULT_BOX = 50.0
GRID_POINTS = 20001


class DegenerateDenominator(ArithmeticError):
    """Membership weights of a family summed to (numerically) zero."""


class UnboundedDerivative(ValueError):
    """sup |x dmu/dx| is not attained inside the working box."""


@dataclass(frozen=True)
class Gaussian:
    """Gaussian bump ``c * exp(-a (x - m)^2)``."""

    c: float
    a: float
    m: float = 0.0

    def __post_init__(self):
        if not (self.c > 0 and self.a > 0):
            raise ValueError(f"Gaussian needs c>0 and a>0, got c={self.c}, a={self.a}")

    def __call__(self, x):
        return self.c * np.exp(-self.a * (np.asarray(x, dtype=float) - self.m) ** 2)

    def deriv(self, x):
        x = np.asarray(x, dtype=float)
        return -2.0 * self.a * (x - self.m) * self(x)

    def describe(self) -> str:
        return f"gauss {self.c!r} {self.a!r} {self.m!r}"


@dataclass(frozen=True)
class Complement:
    """One minus the sum of every non-complement member of the family."""

    def describe(self) -> str:
        return "complement"


@dataclass(frozen=True)
class Custom:
    """Arbitrary differentiable weight; derivative by central differences if absent."""

    func: Callable
    dfunc: Optional[Callable] = None

    def __call__(self, x):
        return np.asarray(self.func(np.asarray(x, dtype=float)), dtype=float)

    def deriv(self, x):
        if self.dfunc is not None:
            return np.asarray(self.dfunc(np.asarray(x, dtype=float)), dtype=float)
        x = np.asarray(x, dtype=float)
        h = 1e-6 * np.maximum(1.0, np.abs(x))
        return (self(x + h) - self(x - h)) / (2 * h)

    def describe(self) -> str:
        return "custom"


@dataclass(frozen=True)
class MembershipFamily:
    """Fuzzy sets defined on one state dimension, ordered by ordinal (1-based)."""

    members: tuple

    def __post_init__(self):
        object.__setattr__(self, "members", tuple(self.members))
        if not self.members:
            raise ValueError("membership family needs at least one set")

    @property
    def size(self) -> int:
        return len(self.members)

    @property
    def is_gaussian_family(self) -> bool:
        """True for Gaussians plus complements, the decaying forms with analytic sup."""
        return all(isinstance(m, (Gaussian, Complement)) for m in self.members)

    def breakpoints(self, lo: float, hi: float) -> list:
        """Sorted points in (lo, hi) around which the memberships vary quickly.

        Quadrature splits there so that narrow bumps cannot be stepped over.
        """
        pts = set()
        for mem in self.members:
            if isinstance(mem, Gaussian):
                width = 1.0 / math.sqrt(mem.a)
                pts.update(mem.m + k * width for k in range(-6, 7))
            elif isinstance(mem, Custom):
                pts.update(np.linspace(lo, hi, 65)[1:-1].tolist())
        a, b = min(lo, hi), max(lo, hi)
        return sorted(p for p in pts if a < p < b)

    def weights(self, x):
        """Raw weights, shape ``(size,) + shape(x)``."""
        x = np.asarray(x, dtype=float)
        raw = [None] * self.size
        base = np.zeros_like(x)
        for r, mem in enumerate(self.members):
            if not isinstance(mem, Complement):
                raw[r] = mem(x) * np.ones_like(x)
                base = base + raw[r]
        for r, mem in enumerate(self.members):
            if isinstance(mem, Complement):
                raw[r] = 1.0 - base
        return np.stack(raw)

    def weight_derivs(self, x):
        x = np.asarray(x, dtype=float)
        raw = [None] * self.size
        base = np.zeros_like(x)
        for r, mem in enumerate(self.members):
            if not isinstance(mem, Complement):
                raw[r] = mem.deriv(x) * np.ones_like(x)
                base = base + raw[r]
        for r, mem in enumerate(self.members):
            if isinstance(mem, Complement):
                raw[r] = -base
        return np.stack(raw)

    def normalized(self, x):
        """Normalized memberships mu^rho(x), shape ``(size,) + shape(x)``."""
        w = self.weights(x)
        total = w.sum(axis=0)
        if np.any(np.abs(total) < 1e-300):
            raise DegenerateDenominator("membership weights sum to zero")
        return w / total

    def normalized_derivs(self, x):
        """d mu^rho / dx, shape ``(size,) + shape(x)``."""
        w = self.weights(x)
        dw = self.weight_derivs(x)
        total = w.sum(axis=0)
        if np.any(np.abs(total) < 1e-300):
            raise DegenerateDenominator("membership weights sum to zero")
        dtotal = dw.sum(axis=0)
        return (dw * total - w * dtotal) / total**2


def normalize(family: MembershipFamily, xj: float) -> list:
    """Normalized memberships of ``family`` at a scalar point."""
    return [float(v) for v in family.normalized(float(xj))]


@dataclass
class TSModel:
    """Rule base with local matrices and one membership family per state dimension.

    ``ordinals`` holds 1-based fuzzy-set indices, one row per rule.
    ``B`` may be omitted for unforced models (p = 0).
    """

    A: list
    C: list
    ordinals: np.ndarray
    families: list
    B: Optional[list] = None
    box: float = DEFAULT_BOX
    name: str = ""

    def __post_init__(self):
        self.A = [np.atleast_2d(np.asarray(a, dtype=float)) for a in self.A]
        self.C = [np.atleast_2d(np.asarray(c, dtype=float)) for c in self.C]
        if self.B is None:
            n = self.A[0].shape[0] if self.A else 0
            self.B = [np.zeros((n, 0)) for _ in self.A]
        else:
            self.B = [np.asarray(b, dtype=float).reshape(len(b), -1) for b in self.B]
        self.ordinals = np.atleast_2d(np.asarray(self.ordinals, dtype=int))
        self.families = list(self.families)

    @property
    def n(self) -> int:
        return self.A[0].shape[0]

    @property
    def p(self) -> int:
        return self.B[0].shape[1]

    @property
    def s(self) -> int:
        return len(self.A)

    @property
    def set_counts(self) -> tuple:
        return tuple(f.size for f in self.families)

    @property
    def full_combination(self) -> bool:
        counts = self.set_counts
        if self.s != math.prod(counts):
            return False
        seen = {tuple(row) for row in self.ordinals.tolist()}
        every = set(itertools.product(*[range(1, c + 1) for c in counts]))
        return seen == every

    def replace(self, **changes) -> "TSModel":
        kw = dict(A=[a.copy() for a in self.A], C=[c.copy() for c in self.C],
                  B=[b.copy() for b in self.B], ordinals=self.ordinals.copy(),
                  families=list(self.families), box=self.box, name=self.name)
        kw.update(changes)
        return TSModel(**kw)

    # -- basis functions -------------------------------------------------

    def _memberships(self, x):
        """Per-dimension normalized memberships and derivatives at x."""
        x = np.asarray(x, dtype=float).reshape(-1)
        mu = [fam.normalized(x[j]) for j, fam in enumerate(self.families)]
        dmu = [fam.normalized_derivs(x[j]) for j, fam in enumerate(self.families)]
        return mu, dmu

    def basis(self, x) -> np.ndarray:
        mu, _ = self._memberships(x)
        h = np.ones(self.s)
        for j in range(self.n):
            h *= mu[j][self.ordinals[:, j] - 1]
        return h

    def basis_jacobian(self, x) -> np.ndarray:
        """Matrix of partial derivatives dh_i/dx_j, shape (s, n)."""
        mu, dmu = self._memberships(x)
        factors = np.stack([mu[j][self.ordinals[:, j] - 1] for j in range(self.n)], axis=1)
        dfactors = np.stack([dmu[j][self.ordinals[:, j] - 1] for j in range(self.n)], axis=1)
        jac = np.empty((self.s, self.n))
        for j in range(self.n):
            others = np.prod(np.delete(factors, j, axis=1), axis=1)
            jac[:, j] = others * dfactors[:, j]
        return jac

    def basis_batch(self, X) -> np.ndarray:
        """Basis functions at many states, X of shape (m, n) -> (m, s)."""
        X = np.asarray(X, dtype=float)
        H = np.ones((X.shape[0], self.s))
        for j, fam in enumerate(self.families):
            mu = fam.normalized(X[:, j])  # (s_j, m)
            H *= mu[self.ordinals[:, j] - 1].T
        return H


def basis(model: TSModel, x) -> np.ndarray:
    return model.basis(x)


def basis_jacobian(model: TSModel, x) -> np.ndarray:
    return model.basis_jacobian(x)


# -- derivative bounds -------------------------------------------------------

@dataclass
class BetaBounds:
    """Bounds beta_ij >= sup |x_j dmu_j^{alpha_ij}/dx_j| and their total."""

    values: np.ndarray
    raw: np.ndarray
    methods: list = field(default_factory=list)

    @property
    def total(self) -> float:
        return float(self.values.sum())

    @classmethod
    def uniform(cls, s: int, n: int, value: float) -> "BetaBounds":
        vals = np.full((s, n), float(value))
        return cls(values=vals, raw=vals.copy(), methods=[["given"] * n for _ in range(s)])


def round_up(value: float, decimals: int = 4) -> float:
    scale = 10.0**decimals
    # tolerate float noise so an exact 0.0125 stays 0.0125
    return math.ceil(value * scale - 1e-9) / scale


def _golden_refine(f, grid, k) -> float:
    """Maximize f near grid[k] with golden-section search on the neighbouring bracket."""
    lo = grid[max(k - 1, 0)]
    hi = grid[min(k + 1, len(grid) - 1)]
    if hi <= lo:
        return float(f(grid[k]))
    res = optimize.minimize_scalar(lambda t: -f(t), bracket=(lo, grid[k], hi), method="golden") \
        if 0 < k < len(grid) - 1 else None
    best = float(f(grid[k]))
    if res is not None and lo <= res.x <= hi:
        best = max(best, float(-res.fun))
    return best


def member_sup(family: MembershipFamily, rho: int, box: float) -> tuple:
    """Raw sup over [-box, box] of |x dmu^rho/dx| and the method used."""
    gauss = [m for m in family.members if isinstance(m, Gaussian)]
    trivial_norm = (family.is_gaussian_family and len(gauss) == 1
                    and sum(isinstance(m, Complement) for m in family.members) == 1)
    if trivial_norm and gauss[0].m == 0.0 and box >= 1.0 / math.sqrt(gauss[0].a):
        return 2.0 * gauss[0].c / math.e, "closed-form"

    def f(t):
        return np.abs(t * family.normalized_derivs(t)[rho - 1])

    grid = np.linspace(-box, box, GRID_POINTS)
    vals = f(grid)
    k = int(np.argmax(vals))
    if not family.is_gaussian_family and k in (0, len(grid) - 1):
        edge = vals[:50] if k == 0 else vals[-50:][::-1]
        if np.all(np.diff(edge) <= 0):
            raise UnboundedDerivative(
                f"|x dmu/dx| for set {rho} grows to the box edge x={grid[k]:g}")
    return _golden_refine(f, grid, k), "grid-refined"


def beta_bounds(model: TSModel, envelope: bool = True, decimals: int = 4) -> BetaBounds:
    """Derivative bounds for every (rule, dimension) pair.

    Each raw sup is rounded up at ``decimals``. With ``envelope`` every entry
    is raised to the largest rounded value, a uniform table like the one
    used for the bundled example2 model.
    """
    s, n = model.s, model.n
    raw = np.zeros((s, n))
    methods = [[""] * n for _ in range(s)]
    cache = {}
    for i in range(s):
        for j in range(n):
            rho = int(model.ordinals[i, j])
            key = (j, rho)
            if key not in cache:
                cache[key] = member_sup(model.families[j], rho, model.box)
            raw[i, j], methods[i][j] = cache[key]
    vals = np.vectorize(lambda v: round_up(v, decimals))(raw)
    vals = np.maximum(vals, 10.0**-decimals)
    if envelope:
        vals = np.full_like(vals, vals.max())
    return BetaBounds(values=vals, raw=raw, methods=methods)


# -- validation --------------------------------------------------------------

def validate(model: TSModel, samples: int = 1000, seed: int = 0,
             require_full: bool = True) -> list:
    """List of human-readable violations; empty means the model is usable.

    Quadratic analysis accepts any rule base, so callers doing only that pass
    ``require_full=False`` to skip the full-combination check.
    """
    issues = []
    if not model.A:
        return ["no rules"]
    n = model.n
    for i, (A, B, C) in enumerate(zip(model.A, model.B, model.C), start=1):
        if A.shape != (n, n):
            issues.append(f"rule {i}: A has shape {A.shape}, expected {(n, n)}")
        if C.shape != (n, n):
            issues.append(f"rule {i}: C has shape {C.shape}, expected {(n, n)}")
        if B.shape[0] != n or B.shape[1] != model.B[0].shape[1]:
            issues.append(f"rule {i}: B has shape {B.shape}")
    if len(model.B) != model.s or len(model.C) != model.s:
        issues.append("matrix lists have different lengths")
    if len(model.families) != n:
        issues.append(f"{len(model.families)} membership families for {n} states")
        return issues
    if model.ordinals.shape != (model.s, n):
        issues.append(f"ordinal table has shape {model.ordinals.shape}, expected {(model.s, n)}")
        return issues
    for i, row in enumerate(model.ordinals.tolist(), start=1):
        for j, a in enumerate(row):
            if not 1 <= a <= model.families[j].size:
                issues.append(f"rule {i}: ordinal {a} out of range for dimension {j + 1}")
    rows = [tuple(r) for r in model.ordinals.tolist()]
    for i, row in enumerate(rows):
        if row in rows[:i]:
            issues.append(f"duplicate rule: rule {i + 1} repeats ordinals {row}")
    if require_full and not model.full_combination:
        issues.append(f"incomplete rule base: {model.s} rules for set counts {model.set_counts}")
    if issues:
        return issues
    rng = np.random.default_rng(seed)
    X = rng.uniform(-model.box, model.box, size=(samples, n))
    try:
        for j, fam in enumerate(model.families):
            w = fam.weights(X[:, j])
            if np.any(w < -1e-12):
                issues.append(f"dimension {j + 1}: negative membership weight")
        H = model.basis_batch(X)
    except DegenerateDenominator as exc:
        issues.append(f"degenerate normalization: {exc}")
        return issues
    # a partial rule base cannot sum to one; only the quadratic test accepts it
    if model.full_combination and np.max(np.abs(H.sum(axis=1) - 1.0)) > 1e-12:
        issues.append("basis functions do not sum to one")
    return issues

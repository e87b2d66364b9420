"""Structured matrix variables, affine matrix expressions and a small SDP front end.

Expressions are affine in a flat vector of scalar decision variables::

    F(x) = F0 + sum_k x_k F_k

Constraints ask ``F(x) - margin*I`` to be positive semidefinite. Strict
inequalities from the control-theory side are written with ``margin = eps``.
The numerical work is delegated to cvxopt's primal-dual interior-point SDP
solver; :func:`check_solution` re-evaluates every block densely and never
trusts the solver's own status.
"""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, Optional, Sequence

import numpy as np

log = logging.getLogger(__name__)

DEFAULT_EPS = 1e-6
DEFAULT_TOL_FEAS = 1e-7
DEFAULT_TOL_GAP = 1e-7


class DimensionMismatch(ValueError):
    pass


class VarSpace:
    """Ordered registry of scalar decision variables.

    A variable is created either under a unique name or under a sharing key;
    asking for the same key again returns the same scalar.
    """

    def __init__(self):
        self.names: list = []
        self._by_name: Dict[str, int] = {}

    def __len__(self):
        return len(self.names)

    def scalar(self, name: str) -> int:
        if name in self._by_name:
            raise KeyError(f"variable {name!r} already registered")
        self._by_name[name] = len(self.names)
        self.names.append(name)
        return self._by_name[name]

    def shared(self, key) -> int:
        name = key if isinstance(key, str) else ":".join(str(k) for k in key)
        if name in self._by_name:
            return self._by_name[name]
        return self.scalar(name)

    def index(self, name: str) -> int:
        return self._by_name[name]


class MatExpr:
    """Affine matrix expression ``const + sum_k x_k * coeffs[k]``."""

    __slots__ = ("const", "coeffs")
    # make ``ndarray @ MatExpr`` defer to __rmatmul__
    __array_ufunc__ = None

    def __init__(self, const, coeffs: Optional[dict] = None):
        self.const = np.atleast_2d(np.asarray(const, dtype=float))
        self.coeffs: Dict[int, np.ndarray] = coeffs or {}

    @classmethod
    def constant(cls, M) -> "MatExpr":
        return cls(np.array(M, dtype=float, ndmin=2))

    @classmethod
    def zeros(cls, rows: int, cols: Optional[int] = None) -> "MatExpr":
        return cls(np.zeros((rows, rows if cols is None else cols)))

    @classmethod
    def identity(cls, n: int) -> "MatExpr":
        return cls(np.eye(n))

    @property
    def shape(self) -> tuple:
        return self.const.shape

    @property
    def variables(self) -> list:
        return sorted(self.coeffs)

    def copy(self) -> "MatExpr":
        return MatExpr(self.const.copy(), {k: v.copy() for k, v in self.coeffs.items()})

    # -- algebra -----------------------------------------------------------

    @staticmethod
    def _lift(other) -> "MatExpr":
        if isinstance(other, MatExpr):
            return other
        return MatExpr.constant(other)

    def __add__(self, other) -> "MatExpr":
        other = self._lift(other)
        if other.shape != self.shape:
            raise DimensionMismatch(f"cannot add {self.shape} and {other.shape}")
        coeffs = {k: v.copy() for k, v in self.coeffs.items()}
        for k, v in other.coeffs.items():
            coeffs[k] = coeffs[k] + v if k in coeffs else v.copy()
        return MatExpr(self.const + other.const, coeffs)

    __radd__ = __add__

    def __neg__(self) -> "MatExpr":
        return MatExpr(-self.const, {k: -v for k, v in self.coeffs.items()})

    def __sub__(self, other) -> "MatExpr":
        return self + (-self._lift(other))

    def __rsub__(self, other) -> "MatExpr":
        return self._lift(other) + (-self)

    def __mul__(self, scalar) -> "MatExpr":
        scalar = float(scalar)
        return MatExpr(scalar * self.const, {k: scalar * v for k, v in self.coeffs.items()})

    __rmul__ = __mul__

    def __matmul__(self, M) -> "MatExpr":
        if isinstance(M, MatExpr):
            if M.coeffs and self.coeffs:
                raise TypeError("product of two variable expressions is not affine")
            if not self.coeffs:
                return self.const @ M
            M = M.const
        M = np.atleast_2d(np.asarray(M, dtype=float))
        if self.shape[1] != M.shape[0]:
            raise DimensionMismatch(f"cannot multiply {self.shape} by {M.shape}")
        return MatExpr(self.const @ M, {k: v @ M for k, v in self.coeffs.items()})

    def __rmatmul__(self, M) -> "MatExpr":
        M = np.atleast_2d(np.asarray(M, dtype=float))
        if M.shape[1] != self.shape[0]:
            raise DimensionMismatch(f"cannot multiply {M.shape} by {self.shape}")
        return MatExpr(M @ self.const, {k: M @ v for k, v in self.coeffs.items()})

    @property
    def T(self) -> "MatExpr":
        return MatExpr(self.const.T.copy(), {k: v.T.copy() for k, v in self.coeffs.items()})

    def sym(self) -> "MatExpr":
        """``M + M^T``."""
        return self + self.T

    def congruence(self, A) -> "MatExpr":
        """``A^T M A``."""
        A = np.atleast_2d(np.asarray(A, dtype=float))
        return A.T @ self @ A

    @staticmethod
    def block(rows: Sequence[Sequence]) -> "MatExpr":
        """Assemble a block matrix; ``None`` entries are zero blocks.

        Row heights and column widths are inferred from the non-``None`` entries.
        """
        nr, nc = len(rows), len(rows[0])
        heights = [None] * nr
        widths = [None] * nc
        for r, row in enumerate(rows):
            if len(row) != nc:
                raise DimensionMismatch("ragged block rows")
            for c, blk in enumerate(row):
                if blk is None:
                    continue
                shp = MatExpr._lift(blk).shape
                if heights[r] not in (None, shp[0]) or widths[c] not in (None, shp[1]):
                    raise DimensionMismatch(f"block ({r}, {c}) has shape {shp}")
                heights[r], widths[c] = shp[0], shp[1]
        if None in heights or None in widths:
            raise DimensionMismatch("a block row or column is entirely empty")
        ro = np.concatenate([[0], np.cumsum(heights)])
        co = np.concatenate([[0], np.cumsum(widths)])
        const = np.zeros((ro[-1], co[-1]))
        coeffs: Dict[int, np.ndarray] = {}
        for r, row in enumerate(rows):
            for c, blk in enumerate(row):
                if blk is None:
                    continue
                blk = MatExpr._lift(blk)
                sl = (slice(ro[r], ro[r + 1]), slice(co[c], co[c + 1]))
                const[sl] += blk.const
                for k, v in blk.coeffs.items():
                    if k not in coeffs:
                        coeffs[k] = np.zeros_like(const)
                    coeffs[k][sl] += v
        return MatExpr(const, coeffs)

    def evaluate(self, values) -> np.ndarray:
        values = np.asarray(values, dtype=float)
        out = self.const.copy()
        for k, v in self.coeffs.items():
            out += values[k] * v
        return out

    def is_symmetric(self, tol: float = 1e-12) -> bool:
        if self.shape[0] != self.shape[1]:
            return False
        mats = [self.const, *self.coeffs.values()]
        return all(np.allclose(m, m.T, atol=tol, rtol=0) for m in mats)


def symmetrize(expr) -> MatExpr:
    return MatExpr._lift(expr).sym()


# -- structured variables ----------------------------------------------------

PATTERNS = ("symmetric", "hollow", "diagonal", "shared-diagonal", "full")


@dataclass
class StructuredMatVar:
    """A matrix whose slots are scalar variables according to ``pattern``."""

    name: str
    pattern: str
    expr: MatExpr
    scalars: list

    @property
    def shape(self) -> tuple:
        return self.expr.shape

    def value(self, values) -> np.ndarray:
        return self.expr.evaluate(values)


def build_var(space: VarSpace, pattern: str, size, name: str,
              ordinals: Optional[Sequence[int]] = None, pool: Optional[str] = None) -> StructuredMatVar:
    """Register the scalars of a structured matrix variable.

    ``size`` is an int for square patterns or ``(rows, cols)`` for ``full``.
    For ``shared-diagonal`` the diagonal entry ``j`` is the pool scalar keyed by
    ``(pool, j, ordinals[j])``, so rules sharing a fuzzy set on dimension ``j``
    share that entry.
    """
    if pattern not in PATTERNS:
        raise ValueError(f"unknown pattern {pattern!r}")
    if pattern == "full":
        rows, cols = (size, size) if np.isscalar(size) else tuple(size)
    else:
        rows = cols = int(size)
    if rows < 1 or cols < 1:
        raise ValueError("size must be at least 1")
    coeffs: Dict[int, np.ndarray] = {}
    scalars = []

    def put(k, slots):
        E = np.zeros((rows, cols))
        for r, c in slots:
            E[r, c] = 1.0
        coeffs[k] = coeffs[k] + E if k in coeffs else E
        if k not in scalars:
            scalars.append(k)

    if pattern == "full":
        for r in range(rows):
            for c in range(cols):
                put(space.scalar(f"{name}[{r + 1},{c + 1}]"), [(r, c)])
    elif pattern in ("symmetric", "hollow"):
        first = 0 if pattern == "symmetric" else 1
        for r in range(rows):
            for c in range(r + first, cols):
                put(space.scalar(f"{name}[{r + 1},{c + 1}]"), {(r, c), (c, r)})
    elif pattern == "diagonal":
        for r in range(rows):
            put(space.scalar(f"{name}[{r + 1}]"), [(r, r)])
    else:
        if ordinals is None or len(ordinals) != rows:
            raise ValueError("shared-diagonal needs one ordinal per dimension")
        key = pool or name
        for j, rho in enumerate(ordinals):
            put(space.shared((key, j + 1, int(rho))), [(j, j)])
    return StructuredMatVar(name, pattern, MatExpr(np.zeros((rows, cols)), coeffs), scalars)


def affine(expr) -> MatExpr:
    """Coerce a constant or expression into a :class:`MatExpr`."""
    return MatExpr._lift(expr)


# -- problems and solutions --------------------------------------------------

@dataclass
class Constraint:
    expr: MatExpr
    margin: float = 0.0
    label: str = ""


class Status(str, enum.Enum):
    OPTIMAL = "Optimal"
    FEASIBLE = "Feasible"
    INFEASIBLE = "Infeasible"
    MAX_ITERATIONS = "MaxIterations"
    NUMERICAL_FAILURE = "NumericalFailure"

    @property
    def ok(self) -> bool:
        return self in (Status.OPTIMAL, Status.FEASIBLE)


@dataclass
class SDPProblem:
    """Linear objective over a :class:`VarSpace` with PSD block constraints."""

    space: VarSpace = field(default_factory=VarSpace)
    constraints: list = field(default_factory=list)
    objective: dict = field(default_factory=dict)
    eps: float = DEFAULT_EPS
    handles: dict = field(default_factory=dict)

    def psd(self, expr, label: str = "") -> Constraint:
        """Require ``expr >= 0``."""
        return self._add(expr, 0.0, label)

    def strict(self, expr, label: str = "") -> Constraint:
        """Require ``expr > 0``, encoded as ``expr >= eps I``."""
        return self._add(expr, self.eps, label)

    def _add(self, expr, margin, label):
        expr = affine(expr)
        if not expr.is_symmetric(1e-10):
            raise DimensionMismatch(f"constraint {label!r} is not square symmetric")
        con = Constraint(expr, margin, label)
        self.constraints.append(con)
        return con

    def set_objective(self, terms: dict):
        self.objective = {int(k): float(v) for k, v in terms.items() if v != 0.0}

    def objective_value(self, values) -> float:
        values = np.asarray(values, dtype=float)
        return float(sum(c * values[k] for k, c in self.objective.items()))

    def block_sizes(self) -> list:
        return [c.expr.shape[0] for c in self.constraints]

    def dump(self) -> str:
        """Readable listing of variables, objective and constraint blocks."""
        out = [f"variables {len(self.space)}"]
        out += [f"  x{k} {name}" for k, name in enumerate(self.space.names)]
        out.append("objective " + " ".join(f"{c:+.17g}*x{k}" for k, c in sorted(self.objective.items())))
        for i, con in enumerate(self.constraints):
            m = con.expr.shape[0]
            out.append(f"constraint {i} {con.label} size {m} margin {con.margin:.17g}")
            out.append("  F0 " + _fmt(con.expr.const))
            for k in sorted(con.expr.coeffs):
                out.append(f"  x{k} " + _fmt(con.expr.coeffs[k]))
        return "\n".join(out) + "\n"


def _fmt(M) -> str:
    return "; ".join(" ".join(f"{v:.17g}" for v in row) for row in M)


@dataclass
class Solution:
    values: np.ndarray
    status: Status
    max_violation: float
    objective: float
    iterations: int = 0
    message: str = ""

    @property
    def ok(self) -> bool:
        return self.status.ok


@dataclass
class SolveOptions:
    tol_feas: float = DEFAULT_TOL_FEAS
    tol_gap: float = DEFAULT_TOL_GAP
    max_iter: int = 100


def check_solution(problem: SDPProblem, values, tol: float = DEFAULT_TOL_FEAS) -> list:
    """Minimum eigenvalue of ``F(x) - margin*I`` for every constraint.

    Dense re-evaluation with a symmetric eigensolver. ``tol`` is accepted for
    call-site symmetry; compare the returned numbers against ``-tol``.
    """
    values = np.asarray(values, dtype=float)
    report = []
    for con in problem.constraints:
        F = con.expr.evaluate(values)
        F = 0.5 * (F + F.T)
        report.append(float(np.linalg.eigvalsh(F)[0]) - con.margin)
    return report


def max_violation(problem: SDPProblem, values) -> float:
    rep = check_solution(problem, values)
    return min(rep) if rep else 0.0


def _to_cvxopt(problem: SDPProblem):
    from cvxopt import matrix, spmatrix

    nv = len(problem.space)
    c = np.zeros(nv)
    for k, v in problem.objective.items():
        c[k] = v
    Gs, hs = [], []
    for con in problem.constraints:
        m = con.expr.shape[0]
        vals, rows, cols = [], [], []
        for k, F in con.expr.coeffs.items():
            flat = F.flatten(order="F")
            nz = np.flatnonzero(flat)
            vals.extend((-flat[nz]).tolist())
            rows.extend(nz.tolist())
            cols.extend([k] * len(nz))
        Gs.append(spmatrix(vals, rows, cols, (m * m, nv)))
        h = con.expr.const - con.margin * np.eye(m)
        hs.append(matrix(np.ascontiguousarray(h)))
    return matrix(c), Gs, hs


def solve(problem: SDPProblem, opts: Optional[SolveOptions] = None) -> Solution:
    """Minimize the linear objective subject to all block constraints.

    A problem with no objective terms is solved as a pure feasibility problem.
    The status reported is downgraded if the dense recheck finds a block more
    negative than ``-tol_feas``.
    """
    from cvxopt import solvers

    opts = opts or SolveOptions()
    nv = len(problem.space)
    if not problem.constraints:
        values = np.zeros(nv)
        return Solution(values, Status.OPTIMAL, 0.0, problem.objective_value(values))
    used = set()
    for con in problem.constraints:
        used.update(con.expr.coeffs)
    if len(used) < nv:
        missing = [problem.space.names[k] for k in range(nv) if k not in used]
        raise ValueError(f"variables not used by any constraint: {missing[:5]}")

    c, Gs, hs = _to_cvxopt(problem)
    # the solver's residuals are scaled; aim below the dense recheck tolerance
    options = dict(show_progress=False, maxiters=opts.max_iter, feastol=0.1 * opts.tol_feas,
                   abstol=opts.tol_gap, reltol=opts.tol_gap)
    try:
        res = solvers.sdp(c, Gs=Gs, hs=hs, options=options)
    except (ArithmeticError, ValueError) as exc:
        log.debug("solver breakdown: %s", exc)
        return Solution(np.zeros(nv), Status.NUMERICAL_FAILURE, float("-inf"), float("nan"),
                        message=str(exc))

    iters = int(res.get("iterations", 0) or 0)
    raw = res["status"]
    if raw == "primal infeasible":
        return Solution(np.zeros(nv), Status.INFEASIBLE, float("-inf"), float("nan"), iters,
                        message="dual ray certifies primal infeasibility")
    if res["x"] is None:
        return Solution(np.zeros(nv), Status.NUMERICAL_FAILURE, float("-inf"), float("nan"), iters,
                        message=f"solver status {raw}")
    values = np.array(res["x"]).reshape(-1)
    viol = max_violation(problem, values)
    objective = problem.objective_value(values)
    if viol >= -opts.tol_feas:
        status = Status.OPTIMAL if raw == "optimal" else Status.FEASIBLE
    elif raw == "optimal":
        status = Status.NUMERICAL_FAILURE
    elif iters >= opts.max_iter:
        status = Status.MAX_ITERATIONS
    else:
        status = Status.NUMERICAL_FAILURE
    return Solution(values, status, viol, objective, iters, message=f"solver status {raw}")

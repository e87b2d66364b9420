"""Open-loop stability certificates and parameter sweeps.

Two certificates are supported:

* line-integral (rule-dependent ``P_k = Pbar + D_k`` with hollow ``Pbar`` and
  diagonal entries shared by fuzzy set), with slack blocks ``Q_ij`` stacked
  into a positive definite matrix;
* common quadratic ``V = x^T P x`` with one slack ``Q_i`` per rule.

The same builders are reused for closed loops, where the drift vertices are
``A_i + B_i K_j`` and the slack blocks carry a third index.
"""
from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import lmi
from .lmi import MatExpr, SDPProblem, SolveOptions, Status, build_var
from .tsmodel import BetaBounds, TSModel, validate

log = logging.getLogger(__name__)

THEOREM1 = "theorem1"
COROLLARY1 = "corollary1"
METHODS = (THEOREM1, COROLLARY1)


class ModelInvalid(ValueError):
    pass


class SolverFailure(RuntimeError):
    pass


def _beta_value(beta) -> float:
    if isinstance(beta, BetaBounds):
        return beta.total
    return float(beta)


@dataclass
class LineIntegralCertificate:
    """Decision values proving a line-integral stability condition.

    ``Q`` is keyed by ``(i, j)`` for the open loop and ``(i, j, k)`` for the
    closed loop; indices are 0-based and both orderings of ``(i, j)`` are present.
    """

    Pbar: np.ndarray
    pool: dict
    D: np.ndarray
    Q: dict
    beta: float
    ordinals: np.ndarray

    @property
    def n(self) -> int:
        return self.Pbar.shape[0]

    @property
    def s(self) -> int:
        return self.ordinals.shape[0]

    def D_rule(self, k: int) -> np.ndarray:
        return np.diag([self.pool[(j + 1, int(r))] for j, r in enumerate(self.ordinals[k])])

    def P(self, k: int) -> np.ndarray:
        return self.Pbar + self.D_rule(k)

    def P_all(self) -> list:
        return [self.P(k) for k in range(self.s)]

    def theta(self, k: Optional[int] = None) -> np.ndarray:
        s = self.s
        if k is None:
            return np.block([[self.Q[(i, j)] for j in range(s)] for i in range(s)])
        return np.block([[self.Q[(i, j, k)] for j in range(s)] for i in range(s)])

    def invariants(self) -> dict:
        """Smallest eigenvalue of every structural condition (positive is good)."""
        out = {}
        for k in range(self.s):
            out[f"P{k + 1}>0"] = float(np.linalg.eigvalsh(self.P(k))[0])
            out[f"D-D{k + 1}>=0"] = float(np.min(np.diag(self.D) - np.diag(self.D_rule(k))))
        closed = any(len(key) == 3 for key in self.Q)
        if closed:
            for k in range(self.s):
                out[f"Theta{k + 1}>0"] = float(np.linalg.eigvalsh(self.theta(k))[0])
        else:
            out["Theta>0"] = float(np.linalg.eigvalsh(self.theta())[0])
        return out

    def valid(self, tol: float = 1e-9) -> bool:
        inv = self.invariants()
        return all(v > 0 if ">0" in name else v >= -tol for name, v in inv.items())


@dataclass
class QuadraticCertificate:
    P: np.ndarray
    Q: list

    def invariants(self, model: TSModel) -> dict:
        out = {"P>0": float(np.linalg.eigvalsh(self.P)[0])}
        for i, (A, C, Qi) in enumerate(zip(model.A, model.C, self.Q), start=1):
            out[f"Q{i}>0"] = float(np.linalg.eigvalsh(Qi)[0])
            M = self.P @ A + A.T @ self.P + C.T @ self.P @ C + Qi
            out[f"rule{i}<0"] = float(-np.linalg.eigvalsh(M)[-1])
        return out

    def valid(self, model: TSModel) -> bool:
        return all(v > 0 for v in self.invariants(model).values())


# -- shared variable structure ----------------------------------------------

def line_integral_vars(prob: SDPProblem, model: TSModel) -> dict:
    """Register Pbar, the shared diagonal pool (one D_k per rule) and the cap D."""
    sp = prob.space
    n = model.n
    Pbar = build_var(sp, "hollow", n, "Pbar") if n > 1 else None
    Dk = [build_var(sp, "shared-diagonal", n, f"D{k + 1}", ordinals=model.ordinals[k], pool="d")
          for k in range(model.s)]
    D = build_var(sp, "diagonal", n, "D")
    zero = MatExpr.zeros(n)
    P = [(Pbar.expr if Pbar else zero) + Dk[k].expr for k in range(model.s)]
    return dict(Pbar=Pbar, Dk=Dk, D=D, P=P)


def structural_constraints(prob: SDPProblem, model: TSModel, h: dict):
    for k in range(model.s):
        prob.strict(h["P"][k], f"P{k + 1}>0")
    for k in range(model.s):
        prob.psd(h["D"].expr - h["Dk"][k].expr, f"D-D{k + 1}>=0")


def symmetric_slacks(prob: SDPProblem, n: int, s: int, name: str, suffix=()) -> dict:
    """Symmetric blocks Q[i, j, *suffix] with Q[i, j] and Q[j, i] aliased."""
    Q = {}
    for i in range(s):
        for j in range(i, s):
            tag = ",".join(str(t + 1) for t in (i, j, *suffix))
            var = build_var(prob.space, "symmetric", n, f"{name}[{tag}]")
            Q[(i, j, *suffix)] = Q[(j, i, *suffix)] = var.expr
    return Q


def extract_line_integral(prob: SDPProblem, model: TSModel, values, beta: float) -> LineIntegralCertificate:
    h = prob.handles
    n = model.n
    Pbar = h["Pbar"].value(values) if h["Pbar"] is not None else np.zeros((n, n))
    pool = {}
    for k in range(model.s):
        dk = np.diag(h["Dk"][k].value(values))
        for j, rho in enumerate(model.ordinals[k]):
            pool[(j + 1, int(rho))] = float(dk[j])
    Q = {key: expr.evaluate(values) for key, expr in h["Q"].items()}
    return LineIntegralCertificate(Pbar=Pbar, pool=pool, D=h["D"].value(values), Q=Q,
                                   beta=beta, ordinals=model.ordinals.copy())


# -- builders ---------------------------------------------------------------

def _require(model: TSModel, full: bool):
    issues = validate(model, require_full=full)
    if issues:
        raise ModelInvalid("; ".join(issues))


def build_theorem1(model: TSModel, beta, eps: float = lmi.DEFAULT_EPS) -> SDPProblem:
    """Line-integral open-loop conditions.

    For all rules: ``P_k > 0``, ``D - D_k >= 0``; for all pairs (i, j):
    ``(P_j A_i)^S + C_i^T (P_j + beta D) C_i + Q_ij < 0``; and the stacked
    ``[Q_ij] > 0``.
    """
    _require(model, full=True)
    b = _beta_value(beta)
    prob = SDPProblem(eps=eps)
    h = line_integral_vars(prob, model)
    s, n = model.s, model.n
    Q = symmetric_slacks(prob, n, s, "Q")
    h["Q"] = {key: Q[key] for key in Q}
    structural_constraints(prob, model, h)
    for i in range(s):
        A, C = model.A[i], model.C[i]
        for j in range(s):
            Pj = h["P"][j]
            M = (Pj @ A).sym() + (Pj + b * h["D"].expr).congruence(C) + Q[(i, j)]
            prob.strict(-M, f"rule({i + 1},{j + 1})<0")
    theta = MatExpr.block([[Q[(i, j)] for j in range(s)] for i in range(s)])
    prob.strict(theta, "Theta>0")
    prob.handles = h
    return prob


def build_theorem2(model: TSModel, gains, beta, eps: float = lmi.DEFAULT_EPS) -> SDPProblem:
    """Line-integral conditions for the closed loop ``A_ij = A_i + B_i K_j``."""
    _require(model, full=True)
    b = _beta_value(beta)
    gains = [np.atleast_2d(np.asarray(K, dtype=float)) for K in gains]
    s, n = model.s, model.n
    if len(gains) != s or any(K.shape != (model.p, n) for K in gains):
        raise ModelInvalid(f"expected {s} gains of shape {(model.p, n)}")
    prob = SDPProblem(eps=eps)
    h = line_integral_vars(prob, model)
    Q = {}
    for k in range(s):
        Q.update(symmetric_slacks(prob, n, s, "Qbar", suffix=(k,)))
    h["Q"] = Q
    structural_constraints(prob, model, h)
    for i in range(s):
        C = model.C[i]
        for j in range(s):
            Aij = model.A[i] + model.B[i] @ gains[j]
            for k in range(s):
                Pk = h["P"][k]
                M = (Pk @ Aij).sym() + (Pk + b * h["D"].expr).congruence(C) + Q[(i, j, k)]
                prob.strict(-M, f"rule({i + 1},{j + 1},{k + 1})<0")
    for k in range(s):
        theta = MatExpr.block([[Q[(i, j, k)] for j in range(s)] for i in range(s)])
        prob.strict(theta, f"Theta{k + 1}>0")
    prob.handles = h
    return prob


def build_corollary1(model: TSModel, eps: float = lmi.DEFAULT_EPS) -> SDPProblem:
    """Common quadratic conditions ``(P A_i)^S + C_i^T P C_i + Q_i < 0`` with P, Q_i > 0."""
    _require(model, full=False)
    prob = SDPProblem(eps=eps)
    n = model.n
    P = build_var(prob.space, "symmetric", n, "P")
    Q = [build_var(prob.space, "symmetric", n, f"Q{i + 1}") for i in range(model.s)]
    prob.strict(P.expr, "P>0")
    for i, Qi in enumerate(Q):
        prob.strict(Qi.expr, f"Q{i + 1}>0")
    for i, (A, C) in enumerate(zip(model.A, model.C)):
        M = (P.expr @ A).sym() + P.expr.congruence(C) + Q[i].expr
        prob.strict(-M, f"rule{i + 1}<0")
    prob.handles = dict(P=P, Q=Q)
    return prob


# -- analysis ---------------------------------------------------------------

@dataclass
class Analysis:
    method: str
    status: Status
    certificate: object = None
    invariants: dict = field(default_factory=dict)
    solution: Optional[lmi.Solution] = None

    @property
    def feasible(self) -> bool:
        return self.certificate is not None

    @property
    def letter(self) -> str:
        if self.feasible:
            return "F"
        return "I" if self.status == Status.INFEASIBLE else "X"


def analyze(model: TSModel, method: str = THEOREM1, beta=None,
            eps: float = lmi.DEFAULT_EPS, opts: Optional[SolveOptions] = None) -> Analysis:
    """Solve one stability test and re-validate whatever certificate comes back.

    A solver answer that fails the dense re-validation is reported with the
    solver status but without a certificate.
    """
    if method == THEOREM1:
        if beta is None:
            raise ValueError("theorem1 needs derivative bounds")
        prob = build_theorem1(model, beta, eps)
    elif method == COROLLARY1:
        prob = build_corollary1(model, eps)
    else:
        raise ValueError(f"unknown method {method!r}")
    sol = lmi.solve(prob, opts)
    if not sol.ok:
        return Analysis(method, sol.status, solution=sol)
    if method == THEOREM1:
        cert = extract_line_integral(prob, model, sol.values, _beta_value(beta))
        inv = cert.invariants()
        ok = cert.valid()
    else:
        h = prob.handles
        cert = QuadraticCertificate(P=h["P"].value(sol.values),
                                    Q=[q.value(sol.values) for q in h["Q"]])
        inv = cert.invariants(model)
        ok = cert.valid(model)
    if not ok:
        log.warning("%s: solver reported %s but certificate re-validation failed", method, sol.status)
        return Analysis(method, Status.NUMERICAL_FAILURE, invariants=inv, solution=sol)
    return Analysis(method, sol.status, cert, inv, sol)


def quadratic_as_line_integral(model: TSModel, cert: QuadraticCertificate,
                               margin: float = 0.0) -> LineIntegralCertificate:
    """Embed a common quadratic certificate in the line-integral structure.

    Every ``P_k`` equals ``P``, the cap is ``diag(P) + margin I``, diagonal
    slack blocks keep ``Q_i`` and off-diagonal ones are zero. The result
    satisfies the line-integral conditions with ``beta = 0``.
    """
    P = cert.P
    n = model.n
    pool = {}
    for k in range(model.s):
        for j, rho in enumerate(model.ordinals[k]):
            pool[(j + 1, int(rho))] = float(P[j, j])
    Q = {}
    for i in range(model.s):
        for j in range(model.s):
            Q[(i, j)] = cert.Q[i].copy() if i == j else np.zeros((n, n))
    return LineIntegralCertificate(Pbar=P - np.diag(np.diag(P)), pool=pool,
                                   D=np.diag(np.diag(P)) + margin * np.eye(n), Q=Q, beta=0.0,
                                   ordinals=model.ordinals.copy())


def certificate_values(prob: SDPProblem, model: TSModel, cert: LineIntegralCertificate) -> np.ndarray:
    """Map a line-integral certificate back onto the variables of ``prob``."""
    values = np.zeros(len(prob.space))
    sp = prob.space
    n = model.n
    for r in range(n):
        for c in range(r + 1, n):
            values[sp.index(f"Pbar[{r + 1},{c + 1}]")] = cert.Pbar[r, c]
    for (j, rho), v in cert.pool.items():
        values[sp.index(f"d:{j}:{rho}")] = v
    for r in range(n):
        values[sp.index(f"D[{r + 1}]")] = cert.D[r, r]
    for key, expr in prob.handles["Q"].items():
        if key[0] > key[1]:
            continue
        Qv = cert.Q[key]
        for var, coeff in expr.coeffs.items():
            r, c = np.argwhere(coeff)[0]
            values[var] = Qv[r, c]
    return values


# -- sweeps -----------------------------------------------------------------

@dataclass
class SweepAxis:
    name: str
    start: float
    stop: float
    step: float

    def values(self) -> np.ndarray:
        count = int(np.floor((self.stop - self.start) / self.step + 1e-9)) + 1
        return np.round(self.start + self.step * np.arange(count), 10)


@dataclass
class ParamSlot:
    """Scalar parameter written into ``model.<matrix>[rule][row, col]`` (1-based)."""

    name: str
    matrix: str
    rule: int
    row: int
    col: int

    def apply(self, model: TSModel, value: float):
        mats = getattr(model, self.matrix)
        mats[self.rule - 1][self.row - 1, self.col - 1] = value


@dataclass
class RegionSweep:
    axes: tuple
    cells: list  # (a, b, theorem1 letter, corollary1 letter)

    def counts(self) -> dict:
        out = {}
        for m, col in ((THEOREM1, 2), (COROLLARY1, 3)):
            for letter in "FIX":
                out[f"{m}_{letter}"] = sum(1 for c in self.cells if c[col] == letter)
        return out

    def inclusion_violations(self) -> list:
        """Cells where the quadratic test passes but the line-integral one does not."""
        return [c for c in self.cells if c[3] == "F" and c[2] == "I"]

    def to_csv(self) -> str:
        a, b = self.axes
        lines = [f"{a.name},{b.name},{THEOREM1},{COROLLARY1}"]
        for va, vb, t1, c1 in self.cells:
            lines.append(f"{_num(va)},{_num(vb)},{t1},{c1}")
        return "\n".join(lines) + "\n"


def _num(v: float) -> str:
    return f"{v:.10g}"


def read_sweep_csv(text: str) -> list:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    out = []
    for ln in lines[1:]:
        a, b, t1, c1 = ln.split(",")
        out.append((float(a), float(b), t1, c1))
    return out


def _sweep_cell(args):
    template, slots, beta, va, vb, eps, opts = args
    model = template.replace()
    slots[0].apply(model, va)
    slots[1].apply(model, vb)
    letters = []
    for method in METHODS:
        try:
            res = analyze(model, method, beta, eps, opts)
            letters.append(res.letter)
        except Exception as exc:  # a failed cell must not abort the sweep
            log.warning("cell (%s, %s) %s failed: %s", va, vb, method, exc)
            letters.append("X")
    return (float(va), float(vb), *letters)


def sweep(template: TSModel, slots, axes, beta=None, eps: float = lmi.DEFAULT_EPS,
          opts: Optional[SolveOptions] = None, workers: int = 1) -> RegionSweep:
    """Solve both tests on every grid cell, first axis outermost."""
    from .tsmodel import beta_bounds

    if beta is None:
        beta = beta_bounds(template)
    b = _beta_value(beta)
    jobs = [(template, slots, b, va, vb, eps, opts)
            for va in axes[0].values() for vb in axes[1].values()]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            cells = list(pool.map(_sweep_cell, jobs, chunksize=8))
    else:
        cells = [_sweep_cell(j) for j in jobs]
    return RegionSweep(tuple(axes), cells)

"""State-feedback synthesis by cone complementarity linearization.

The controller is the fuzzy blend ``u = sum_j h_j K_j x``. Gains come from an
LMI system in which ``Pbar_k`` stands in for ``(Pbar + D_k)^{-1}`` and
``Dbar`` for ``D^{-1}``; the coupling constraints

    [[Pbar_k, I], [I, D_k + Pbar]] >= 0,   [[Dbar, I], [I, D]] >= 0

only give ``Pbar_k >= (D_k + Pbar)^{-1}``, so the iteration drives

    E = sum_k tr(Pbar_k (D_k + Pbar)) + tr(Dbar D) - (s + 1) n

to zero by repeatedly minimizing the linearization of the trace sum around
the previous iterate. Afterwards the gains are re-certified with the
closed-loop line-integral test, which shares no code path with the iteration
beyond the model itself.
"""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import lmi
from .lmi import MatExpr, SDPProblem, SolveOptions, Status, build_var
from .stability import (LineIntegralCertificate, ModelInvalid, SolverFailure, _beta_value,
                        build_theorem2, extract_line_integral, line_integral_vars,
                        structural_constraints, symmetric_slacks)
from .tsmodel import BetaBounds, TSModel, validate

log = logging.getLogger(__name__)


class SynthesisStatus(str, enum.Enum):
    CONVERGED = "Converged"
    MAX_ITERATIONS = "MaxIterations"
    INIT_INFEASIBLE = "InitInfeasible"
    SOLVER_FAILURE = "SolverFailure"
    NUMERICAL_FAILURE = "NumericalFailure"


class InitInfeasible(RuntimeError):
    pass


@dataclass
class SynthesisOptions:
    ccl_tol: float = 1e-4
    n_max: int = 50
    eps: float = lmi.DEFAULT_EPS
    omega_min_sv: float = 1e-9
    solver: SolveOptions = field(default_factory=SolveOptions)


@dataclass
class SynthesisProblem:
    model: TSModel
    beta: object
    options: SynthesisOptions = field(default_factory=SynthesisOptions)

    @property
    def beta_total(self) -> float:
        return _beta_value(self.beta)


@dataclass
class Iterate:
    """One point of the iteration: raw variable values plus the error."""

    values: np.ndarray
    error: float
    objective: float


@dataclass
class TraceRow:
    iteration: int
    objective: float
    error: float


@dataclass
class SynthesisResult:
    status: SynthesisStatus
    gains: list = field(default_factory=list)
    matrices: dict = field(default_factory=dict)
    trace: list = field(default_factory=list)
    message: str = ""

    @property
    def converged(self) -> bool:
        return self.status == SynthesisStatus.CONVERGED

    def trace_csv(self) -> str:
        lines = ["iter,objective,error"]
        lines += [f"{r.iteration},{r.objective:.12e},{r.error:.12e}" for r in self.trace]
        return "\n".join(lines) + "\n"


def read_trace_csv(text: str) -> list:
    rows = []
    for ln in text.strip().splitlines()[1:]:
        it, obj, err = ln.split(",")
        rows.append(TraceRow(int(it), float(obj), float(err)))
    return rows


# -- constraint system ------------------------------------------------------

def build_ccl_constraints(problem: SynthesisProblem) -> SDPProblem:
    """LMI system shared by the initial solve and every linearized step.

    Handles stored on the returned problem: ``Pbar``, ``Dk``, ``D``, ``P``,
    ``Dbar``, ``X`` (inverse surrogates), ``Omega``, ``M``, ``R``, ``Q``.
    """
    model = problem.model
    issues = validate(model)
    if issues:
        raise ModelInvalid("; ".join(issues))
    if model.p < 1:
        raise ModelInvalid("synthesis needs at least one input")
    beta = problem.beta_total
    s, n, p = model.s, model.n, model.p
    prob = SDPProblem(eps=problem.options.eps)
    sp = prob.space
    h = line_integral_vars(prob, model)
    h["Dbar"] = build_var(sp, "diagonal", n, "Dbar")
    h["X"] = [build_var(sp, "symmetric", n, f"Pbar{k + 1}") for k in range(s)]
    h["Omega"] = [build_var(sp, "full", n, f"Omega{j + 1}") for j in range(s)]
    h["M"] = [build_var(sp, "full", (p, n), f"M{j + 1}") for j in range(s)]
    h["R"] = {}
    Q = {}
    for k in range(s):
        Q.update(symmetric_slacks(prob, n, s, "Q", suffix=(k,)))
    h["Q"] = Q
    for i in range(s):
        for j in range(s):
            for k in range(s):
                h["R"][(i, j, k)] = build_var(sp, "symmetric", n, f"R[{i + 1},{j + 1},{k + 1}]").expr

    I = np.eye(n)
    structural_constraints(prob, model, h)
    for k in range(s):
        X = h["X"][k].expr
        prob.psd(MatExpr.block([[X, I], [I, h["P"][k]]]), f"[Pbar{k + 1},I;I,P{k + 1}]>=0")
    for k in range(s):
        theta = MatExpr.block([[Q[(i, j, k)] for j in range(s)] for i in range(s)])
        prob.strict(theta, f"Theta{k + 1}>0")
    prob.psd(MatExpr.block([[h["Dbar"].expr, I], [I, h["D"].expr]]), "[Dbar,I;I,D]>=0")
    for key, R in h["R"].items():
        prob.strict(R, "R[{},{},{}]>0".format(*(t + 1 for t in key)))
    for i in range(s):
        A, B, C = model.A[i], model.B[i], model.C[i]
        for j in range(s):
            Om = h["Omega"][j].expr
            ups = A @ Om + B @ h["M"][j].expr
            for k in range(s):
                X = h["X"][k].expr
                lam = ups.sym() + h["R"][(i, j, k)] + Q[(i, j, k)]
                XC = X @ C.T
                rows = [
                    [lam, ups, None, XC],
                    [ups.T, -Om.sym(), X - Om, None],
                    [None, (X - Om).T, -h["R"][(i, j, k)], None],
                    [XC.T, None, None, -X],
                ]
                if beta > 0:
                    for row in rows:
                        row.append(None)
                    rows[0][4] = XC
                    rows.append([XC.T, None, None, None, (-1.0 / beta) * h["Dbar"].expr])
                big = MatExpr.block(rows)
                prob.strict(-big, f"LMI({i + 1},{j + 1},{k + 1})<0")
    prob.handles = h
    return prob


def _pairs(prob: SDPProblem) -> list:
    """(surrogate, target) expression pairs whose products should be identity."""
    h = prob.handles
    pairs = [(h["X"][k].expr, h["P"][k]) for k in range(len(h["X"]))]
    pairs.append((h["Dbar"].expr, h["D"].expr))
    return pairs


def trace_objective(prob: SDPProblem, values) -> float:
    """``sum_k tr(Pbar_k (D_k + Pbar)) + tr(Dbar D)`` at ``values``."""
    return float(sum(np.trace(a.evaluate(values) @ b.evaluate(values)) for a, b in _pairs(prob)))


def ccl_error(prob: SDPProblem, values) -> float:
    n = prob.handles["D"].shape[0]
    return trace_objective(prob, values) - len(_pairs(prob)) * n


def linearized_objective(prob: SDPProblem, at) -> dict:
    """Coefficients of ``sum tr(A_j B + A B_j)`` linearized at ``at``."""
    terms: dict = {}
    for a, b in _pairs(prob):
        A0, B0 = a.evaluate(at), b.evaluate(at)
        for fixed, expr in ((A0, b), (B0, a)):
            for k, coeff in expr.coeffs.items():
                terms[k] = terms.get(k, 0.0) + float(np.sum(fixed * coeff.T))
    return terms


def ccl_initialize(problem: SynthesisProblem, prob: Optional[SDPProblem] = None) -> Iterate:
    """Feasibility solve of the constraint system (zero objective)."""
    prob = prob or build_ccl_constraints(problem)
    prob.set_objective({})
    sol = lmi.solve(prob, problem.options.solver)
    if not sol.ok:
        raise InitInfeasible(f"constraint system not solved: {sol.status.value} ({sol.message})")
    err = ccl_error(prob, sol.values)
    return Iterate(sol.values, err, 2.0 * trace_objective(prob, sol.values))


def ccl_step(problem: SynthesisProblem, prob: SDPProblem, current: Iterate) -> Iterate:
    """Minimize the objective linearized at ``current`` over the same constraints.

    The returned ``objective`` is the optimal linearized value, which cannot
    increase from one step to the next.
    """
    prob.set_objective(linearized_objective(prob, current.values))
    sol = lmi.solve(prob, problem.options.solver)
    if not sol.ok:
        raise SolverFailure(f"linearized step failed: {sol.status.value} ({sol.message})")
    return Iterate(sol.values, ccl_error(prob, sol.values), sol.objective)


def gains_from(prob: SDPProblem, values, min_sv: float = 1e-9) -> list:
    """``K_j = M_j Omega_j^{-1}``; raises if some Omega_j is numerically singular."""
    h = prob.handles
    gains = []
    for Om, M in zip(h["Omega"], h["M"]):
        Omv, Mv = Om.value(values), M.value(values)
        if np.linalg.svd(Omv, compute_uv=False)[-1] < min_sv:
            raise np.linalg.LinAlgError("Omega is numerically singular")
        gains.append(np.linalg.solve(Omv.T, Mv.T).T)
    return gains


def result_matrices(prob: SDPProblem, values) -> dict:
    h = prob.handles
    s = len(h["X"])
    n = h["D"].shape[0]
    out = {
        "Pbar": h["Pbar"].value(values) if h["Pbar"] is not None else np.zeros((n, n)),
        "D": h["D"].value(values),
        "Dbar": h["Dbar"].value(values),
    }
    for k in range(s):
        out[f"D{k + 1}"] = h["Dk"][k].value(values)
        out[f"P{k + 1}"] = h["P"][k].evaluate(values)
        out[f"Pbar{k + 1}"] = h["X"][k].value(values)
        out[f"Omega{k + 1}"] = h["Omega"][k].value(values)
        out[f"M{k + 1}"] = h["M"][k].value(values)
    for (i, j, k), R in sorted(h["R"].items()):
        out[f"R[{i + 1},{j + 1},{k + 1}]"] = R.evaluate(values)
    for (i, j, k), Q in sorted(h["Q"].items()):
        if i <= j:
            out[f"Q[{i + 1},{j + 1},{k + 1}]"] = Q.evaluate(values)
    return out


def synthesize(problem: SynthesisProblem, callback=None) -> SynthesisResult:
    """Run the full iteration; ``callback(trace_row)`` is called after every step."""
    opts = problem.options
    prob = build_ccl_constraints(problem)
    try:
        cur = ccl_initialize(problem, prob)
    except InitInfeasible as exc:
        return SynthesisResult(SynthesisStatus.INIT_INFEASIBLE, message=str(exc))
    trace = [TraceRow(0, cur.objective, cur.error)]
    if callback:
        callback(trace[-1])
    status = SynthesisStatus.MAX_ITERATIONS
    it = 0
    if abs(cur.error) < opts.ccl_tol:
        status = SynthesisStatus.CONVERGED
    while status != SynthesisStatus.CONVERGED and it < opts.n_max:
        it += 1
        try:
            cur = ccl_step(problem, prob, cur)
        except SolverFailure as exc:
            return SynthesisResult(SynthesisStatus.SOLVER_FAILURE, trace=trace, message=str(exc),
                                   matrices=result_matrices(prob, cur.values))
        trace.append(TraceRow(it, cur.objective, cur.error))
        if callback:
            callback(trace[-1])
        if abs(cur.error) < opts.ccl_tol:
            status = SynthesisStatus.CONVERGED
    mats = result_matrices(prob, cur.values)
    try:
        gains = gains_from(prob, cur.values, opts.omega_min_sv)
    except np.linalg.LinAlgError as exc:
        return SynthesisResult(SynthesisStatus.NUMERICAL_FAILURE, trace=trace, matrices=mats,
                               message=str(exc))
    return SynthesisResult(status, gains, mats, trace)


# -- closed-loop re-verification ---------------------------------------------

@dataclass
class ClosedLoopModel:
    model: TSModel
    gains: list

    def vertex(self, i: int, j: int) -> np.ndarray:
        return self.model.A[i] + self.model.B[i] @ self.gains[j]

    def drift_matrix(self, h) -> np.ndarray:
        """``sum_ij h_i h_j (A_i + B_i K_j)`` for a basis vector ``h``."""
        h = np.asarray(h)
        Ah = sum(hi * A for hi, A in zip(h, self.model.A))
        Bh = sum(hi * B for hi, B in zip(h, self.model.B))
        Kh = sum(hj * K for hj, K in zip(h, self.gains))
        return Ah + Bh @ Kh


@dataclass
class ClosedLoopVerification:
    status: Status
    certificate: Optional[LineIntegralCertificate] = None
    invariants: dict = field(default_factory=dict)

    @property
    def feasible(self) -> bool:
        return self.certificate is not None


def verify_closed_loop(model: TSModel, gains, beta, eps: float = lmi.DEFAULT_EPS,
                       opts: Optional[SolveOptions] = None) -> ClosedLoopVerification:
    """Certify given gains with the closed-loop line-integral test."""
    prob = build_theorem2(model, gains, beta, eps)
    sol = lmi.solve(prob, opts)
    if not sol.ok:
        return ClosedLoopVerification(sol.status)
    cert = extract_line_integral(prob, model, sol.values, _beta_value(beta))
    inv = cert.invariants()
    if not cert.valid():
        return ClosedLoopVerification(Status.NUMERICAL_FAILURE, invariants=inv)
    return ClosedLoopVerification(sol.status, cert, inv)

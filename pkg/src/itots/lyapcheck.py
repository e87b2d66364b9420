"""Numerical evaluation of the line-integral Lyapunov function.

With the product basis and shared diagonal entries the line integral splits
per axis::

    V(x) = x^T Pbar x + 2 sum_j int_0^{x_j} sigma_j(t) t dt,
    sigma_j(t) = sum_rho mu_j^rho(t) d_jj^rho

which is what :meth:`LyapunovEvaluator.V` integrates (adaptive Simpson).
:meth:`LyapunovEvaluator.V_path` integrates ``2 fbar(Psi)^T dPsi`` along the
straight segment instead, with an unrelated Gauss-Kronrod rule, and serves
only as a cross-check of path independence.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import integrate

from .stability import LineIntegralCertificate
from .tsmodel import TSModel


class BoundViolated(AssertionError):
    def __init__(self, msg, x=None, y=None):
        super().__init__(msg)
        self.x, self.y = x, y


class PreconditionViolated(ValueError):
    pass


def adaptive_simpson(f, a: float, b: float, tol: float = 1e-10, max_depth: int = 40) -> float:
    """Adaptive Simpson quadrature with Richardson correction."""
    if a == b:
        return 0.0
    fa, fb = f(a), f(b)
    m = 0.5 * (a + b)
    fm = f(m)
    whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    stack = [(a, b, fa, fm, fb, whole, tol, max_depth)]
    total = 0.0
    while stack:
        a, b, fa, fm, fb, whole, eps, depth = stack.pop()
        m = 0.5 * (a + b)
        lm, rm = 0.5 * (a + m), 0.5 * (m + b)
        flm, frm = f(lm), f(rm)
        left = (m - a) / 6.0 * (fa + 4.0 * flm + fm)
        right = (b - m) / 6.0 * (fm + 4.0 * frm + fb)
        delta = left + right - whole
        if depth <= 0 or abs(delta) <= 15.0 * eps:
            total += left + right + delta / 15.0
        else:
            stack.append((a, m, fa, flm, fm, left, eps / 2.0, depth - 1))
            stack.append((m, b, fm, frm, fb, right, eps / 2.0, depth - 1))
    return total


def constant_certificate(model: TSModel, P) -> LineIntegralCertificate:
    """Certificate whose rule matrices all equal ``P`` (slack blocks left empty)."""
    P = np.asarray(P, dtype=float)
    pool = {}
    for row in model.ordinals:
        for j, rho in enumerate(row):
            pool[(j + 1, int(rho))] = float(P[j, j])
    return LineIntegralCertificate(Pbar=P - np.diag(np.diag(P)), pool=pool,
                                   D=np.diag(np.diag(P)), Q={}, beta=0.0,
                                   ordinals=model.ordinals.copy())


@dataclass
class LyapunovEvaluator:
    model: TSModel
    cert: LineIntegralCertificate
    beta: Optional[float] = None
    quad_tol: float = 1e-10
    max_depth: int = 40

    def __post_init__(self):
        if not self.model.full_combination:
            raise ValueError("line-integral evaluation needs a full-combination rule base")
        if self.beta is None:
            self.beta = float(self.cert.beta)
        self._P = np.stack(self.cert.P_all())
        self._Dk = np.stack([np.diag(self.cert.D_rule(k)) for k in range(self.model.s)])
        n = self.model.n
        self._dpool = [np.array([self.cert.pool[(j + 1, r + 1)]
                                 for r in range(self.model.families[j].size)]) for j in range(n)]

    # -- pieces -------------------------------------------------------------

    def P_of(self, x) -> np.ndarray:
        h = self.model.basis(x)
        return np.tensordot(h, self._P, axes=1)

    def sigma(self, j: int, t: float) -> float:
        return float(self.model.families[j].normalized(t) @ self._dpool[j])

    # -- V and derivatives --------------------------------------------------

    def V(self, x) -> float:
        x = np.asarray(x, dtype=float).reshape(-1)
        val = float(x @ self.cert.Pbar @ x)
        for j, xj in enumerate(x):
            val += 2.0 * self.axis_integral(j, float(xj))
        return val

    def axis_integral(self, j: int, xj: float) -> float:
        """``int_0^{x_j} sigma_j(t) t dt``, split at the family's breakpoints."""
        cuts = self.model.families[j].breakpoints(0.0, xj)
        knots = [0.0, *(cuts if xj > 0 else cuts[::-1]), xj]
        tol = self.quad_tol / max(len(knots) - 1, 1)
        f = lambda t: self.sigma(j, t) * t  # noqa: E731
        return sum(adaptive_simpson(f, a, b, tol, self.max_depth) for a, b in zip(knots, knots[1:]))

    def V_path(self, x) -> float:
        """``2 int_0^1 fbar(t x)^T x dt`` on the straight segment."""
        x = np.asarray(x, dtype=float).reshape(-1)

        def integrand(t):
            psi = t * x
            return float((self.P_of(psi) @ psi) @ x)

        pts = set()
        for j, fam in enumerate(self.model.families):
            if x[j] != 0.0:
                pts.update(p / x[j] for p in fam.breakpoints(0.0, x[j]))
        pts = sorted(p for p in pts if 0.0 < p < 1.0)
        val, _ = integrate.quad(integrand, 0.0, 1.0, epsabs=1e-13, epsrel=1e-13, limit=500,
                                points=pts or None)
        return 2.0 * val

    def grad(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(-1)
        return 2.0 * x @ self.P_of(x)

    def hessian_terms(self, x) -> tuple:
        """``(P(x), sum_i dh_i/dx x^T D_i)``; the second matrix is the rank-one sum."""
        x = np.asarray(x, dtype=float).reshape(-1)
        jac = self.model.basis_jacobian(x)  # (s, n)
        rank_one = sum(np.outer(jac[i], self._Dk[i] * x) for i in range(self.model.s))
        return self.P_of(x), rank_one

    def hessian(self, x) -> np.ndarray:
        P, R = self.hessian_terms(x)
        return 2.0 * (P + R)

    # -- generator ----------------------------------------------------------

    def generator_bound(self, x, gains=None) -> float:
        """Upper bound on the generator of V at ``x`` (open loop if ``gains`` is None)."""
        return float(self.generator_bound_batch(np.atleast_2d(x), gains)[0])

    def generator_bound_batch(self, X, gains=None) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        H = self.model.basis_batch(X)  # (m, s)
        s = self.model.s
        bD = self.beta * self.cert.D
        out = np.zeros(X.shape[0])
        if gains is None:
            for i in range(s):
                A, C = self.model.A[i], self.model.C[i]
                for j in range(s):
                    M = self._P[j] @ A
                    M = M + M.T + C.T @ (self._P[j] + bD) @ C
                    out += H[:, i] * H[:, j] * np.einsum("ma,ab,mb->m", X, M, X)
        else:
            for i in range(s):
                C = self.model.C[i]
                for j in range(s):
                    Aij = self.model.A[i] + self.model.B[i] @ np.atleast_2d(gains[j])
                    for k in range(s):
                        M = self._P[k] @ Aij
                        M = M + M.T + C.T @ (self._P[k] + bD) @ C
                        out += H[:, i] * H[:, j] * H[:, k] * np.einsum("ma,ab,mb->m", X, M, X)
        return out

    def generator_exact(self, x, gains=None) -> float:
        """Exact Ito generator ``dV f + 0.5 g^T Hess g`` (diagnostic only)."""
        x = np.asarray(x, dtype=float).reshape(-1)
        h = self.model.basis(x)
        f = sum(hi * A for hi, A in zip(h, self.model.A)) @ x
        if gains is not None:
            Bh = sum(hi * B for hi, B in zip(h, self.model.B))
            Kh = sum(hj * np.atleast_2d(K) for hj, K in zip(h, gains))
            f = f + Bh @ Kh @ x
        g = sum(hi * C for hi, C in zip(h, self.model.C)) @ x
        return float(self.grad(x) @ f + 0.5 * g @ self.hessian(x) @ g)


# -- checks -------------------------------------------------------------------

def _box_samples(model: TSModel, count: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    X = rng.uniform(-model.box, model.box, size=(count, model.n))
    return X[np.linalg.norm(X, axis=1) > 0]


def check_hessian_bound(ev: LyapunovEvaluator, samples: int = 10_000, seed: int = 0,
                        tol: float = 1e-9, raise_on_violation: bool = False) -> dict:
    """Sample ``y^T(P(x) + sum dh_i/dx x^T D_i)y <= y^T(P(x) + beta D)y``.

    ``y`` is drawn on the unit sphere and ``x`` in the working box.
    """
    cert = ev.cert
    for k in range(ev.model.s):
        gap = np.diag(cert.D) - np.diag(cert.D_rule(k))
        if np.min(gap) < -1e-12:
            raise PreconditionViolated(f"D - D_{k + 1} is not positive semidefinite "
                                       f"(min diagonal {np.min(gap):.3g})")
    rng = np.random.default_rng(seed)
    n = ev.model.n
    worst, arg = -math.inf, None
    for _ in range(samples):
        x = rng.uniform(-ev.model.box, ev.model.box, size=n)
        y = rng.standard_normal(n)
        y /= np.linalg.norm(y)
        P, R = ev.hessian_terms(x)
        gap = y @ R @ y - ev.beta * (y @ cert.D @ y)
        if gap > worst:
            worst, arg = gap, (x, y)
    ok = worst <= tol
    if not ok and raise_on_violation:
        raise BoundViolated(f"Hessian bound violated by {worst:.3g}", *arg)
    return {"max_violation": float(worst), "argmax": arg, "ok": ok, "samples": samples}


def check_generator(ev: LyapunovEvaluator, gains=None, samples: int = 10_000, seed: int = 0) -> dict:
    """Largest normalized generator bound ``LV(x)/|x|^2`` over random nonzero states."""
    X = _box_samples(ev.model, samples, seed)
    vals = ev.generator_bound_batch(X, gains) / np.sum(X**2, axis=1)
    k = int(np.argmax(vals))
    return {"max_normalized": float(vals[k]), "argmax": X[k], "ok": bool(vals[k] < 0),
            "samples": len(X)}


def relative_error(a, b) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))


def check_path_independence(ev: LyapunovEvaluator, samples: int = 100, seed: int = 0) -> dict:
    X = _box_samples(ev.model, samples, seed)
    errs = [abs(ev.V(x) - ev.V_path(x)) / max(abs(ev.V_path(x)), 1e-300) for x in X]
    return {"max_rel": float(max(errs)), "ok": max(errs) <= 1e-8, "samples": len(X)}


def check_gradient(ev: LyapunovEvaluator, samples: int = 100, seed: int = 0, step: float = 1e-5) -> dict:
    """Central differences of V against the analytic gradient (relative to |grad|)."""
    X = _box_samples(ev.model, samples, seed)
    worst = 0.0
    for x in X:
        g = ev.grad(x)
        fd = np.empty_like(g)
        for j in range(len(x)):
            e = np.zeros_like(x)
            hstep = step * max(1.0, abs(x[j]))
            e[j] = hstep
            fd[j] = (ev.V(x + e) - ev.V(x - e)) / (2 * hstep)
        worst = max(worst, relative_error(fd, g))
    return {"max_rel": worst, "ok": worst <= 1e-6, "samples": len(X)}


def check_hessian(ev: LyapunovEvaluator, samples: int = 100, seed: int = 0, step: float = 1e-5) -> dict:
    """Quadratic forms of the Hessian against central differences of the gradient."""
    X = _box_samples(ev.model, samples, seed)
    rng = np.random.default_rng(seed + 1)
    worst = 0.0
    for x in X:
        H = ev.hessian(x)
        fd = np.empty_like(H)
        for j in range(len(x)):
            e = np.zeros_like(x)
            hstep = step * max(1.0, abs(x[j]))
            e[j] = hstep
            fd[:, j] = (ev.grad(x + e) - ev.grad(x - e)) / (2 * hstep)
        y = rng.standard_normal(len(x))
        q, qfd = y @ H @ y, y @ fd @ y
        sym_err = relative_error(0.5 * (fd + fd.T), 0.5 * (H + H.T))
        worst = max(worst, abs(q - qfd) / max(abs(qfd), 1e-300), sym_err)
    return {"max_rel": worst, "ok": worst <= 1e-5, "samples": len(X)}


def check_positive(ev: LyapunovEvaluator, samples: int = 200, seed: int = 0) -> dict:
    X = _box_samples(ev.model, samples, seed)
    vals = np.array([ev.V(x) for x in X])
    return {"min_V": float(vals.min()), "ok": bool(np.all(vals > 0)), "samples": len(X)}


def sample_report(ev: LyapunovEvaluator, samples: int = 200, seed: int = 0, gains=None) -> str:
    """CSV ``x_1,...,x_n,V,LV_bound`` at random states of the working box."""
    X = _box_samples(ev.model, samples, seed)
    lv = ev.generator_bound_batch(X, gains)
    n = ev.model.n
    lines = [",".join([f"x_{j + 1}" for j in range(n)] + ["V", "LV_bound"])]
    for x, b in zip(X, lv):
        lines.append(",".join(f"{v:.12e}" for v in (*x, ev.V(x), b)))
    return "\n".join(lines) + "\n"


def read_sample_report(text: str) -> np.ndarray:
    return np.loadtxt(text.splitlines()[1:], delimiter=",", ndmin=2)

"""Seeded Euler-Maruyama Monte Carlo for Itô T-S systems.

Base Wiener increments live on the fine grid ``dt = T/N``; the integrator
steps with ``Dt = R dt`` and sums ``R`` consecutive base increments per step.
Each path draws from its own Philox stream keyed by ``(seed, path)``, so path
``p`` is reproducible on its own and adding paths never changes earlier ones.
"""
from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .tsmodel import TSModel

BLOWUP = 1e12

REFERENCE_INITIAL_STATES = ((-7.0, 3.0), (-5.0, 5.0), (-5.0, 10.0), (12.0, 10.0))


@dataclass
class SimConfig:
    T: float = 15.0
    N: int = 2**8
    R: int = 2
    initial_states: list = field(default_factory=lambda: [list(x) for x in REFERENCE_INITIAL_STATES])
    paths: int = 50
    seed: int = 0
    gains: Optional[list] = None

    def __post_init__(self):
        if self.T <= 0:
            raise ValueError("horizon T must be positive")
        if self.N < 1 or self.R < 1 or self.N % self.R:
            raise ValueError(f"N={self.N} must be a positive multiple of R={self.R}")
        if self.paths < 1:
            raise ValueError("need at least one path")

    @property
    def dt(self) -> float:
        return self.T / self.N

    @property
    def Dt(self) -> float:
        return self.R * self.dt

    @property
    def steps(self) -> int:
        return self.N // self.R

    def times(self) -> np.ndarray:
        return self.Dt * np.arange(self.steps + 1)


def path_generator(seed: int, path: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=[int(seed) & (2**64 - 1), int(path)]))


def wiener_increments(seed: int, N: int, dt: float, path: int) -> np.ndarray:
    """``N`` i.i.d. N(0, dt) increments of path ``path``."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    return np.sqrt(dt) * path_generator(seed, path).standard_normal(N)


def coarse_increments(base: np.ndarray, R: int) -> np.ndarray:
    return base.reshape(*base.shape[:-1], -1, R).sum(axis=-1)


def _drift_diffusion(model: TSModel, X: np.ndarray, gains):
    """Batched drift and diffusion for states X of shape (m, n)."""
    H = model.basis_batch(X)
    drift = np.einsum("mi,iab,mb->ma", H, np.stack(model.A), X)
    if gains is not None:
        Kx = np.einsum("mj,jpb,mb->mp", H, np.stack(gains), X)
        drift += np.einsum("mi,iap,mp->ma", H, np.stack(model.B), Kx)
    diff = np.einsum("mi,iab,mb->ma", H, np.stack(model.C), X)
    return drift, diff


def simulate_paths(model: TSModel, x0, dW: np.ndarray, Dt: float, gains=None):
    """Step every path at once; dW has shape (paths, steps).

    Returns ``(states, blown)`` with states of shape (paths, steps+1, n).
    Paths whose norm passes :data:`BLOWUP` are frozen at NaN from then on.
    """
    gains = None if gains is None else [np.atleast_2d(np.asarray(K, dtype=float)) for K in gains]
    m, L = dW.shape
    n = model.n
    out = np.full((m, L + 1, n), np.nan)
    x = np.tile(np.asarray(x0, dtype=float), (m, 1))
    out[:, 0] = x
    alive = np.ones(m, dtype=bool)
    for k in range(L):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        xa = x[idx]
        f, g = _drift_diffusion(model, xa, gains)
        xa = xa + f * Dt + g * dW[idx, k][:, None]
        bad = ~np.isfinite(xa).all(axis=1) | (np.linalg.norm(xa, axis=1) > BLOWUP)
        alive[idx[bad]] = False
        x[idx] = xa
        good = idx[~bad]
        out[good, k + 1] = x[good]
    return out, ~alive


def euler_maruyama(model: TSModel, config: SimConfig, path: int, x0=None) -> dict:
    """Single trajectory; ``x0`` defaults to the first configured initial state."""
    x0 = config.initial_states[0] if x0 is None else x0
    dW = coarse_increments(wiener_increments(config.seed, config.N, config.dt, path), config.R)
    states, blown = simulate_paths(model, x0, dW[None, :], config.Dt, config.gains)
    return {"t": config.times(), "x": states[0], "blowup": bool(blown[0])}


@dataclass
class SimEnsemble:
    config: SimConfig
    x0: np.ndarray
    t: np.ndarray
    paths: np.ndarray  # (M, L+1, n)
    blowup: np.ndarray

    @property
    def mean(self) -> np.ndarray:
        return self.paths.mean(axis=0)

    def final_norms(self) -> np.ndarray:
        return np.linalg.norm(self.paths[:, -1], axis=1)

    def summary(self) -> dict:
        norms = self.final_norms()
        return {
            "paths": int(self.paths.shape[0]),
            "blowups": int(self.blowup.sum()),
            "mean_final_norm": float(np.mean(norms)),
            "median_final_norm": float(np.median(norms)),
            "final_mean_state": self.mean[-1].tolist(),
        }

    def to_csv(self) -> str:
        cfg = self.config
        n = self.paths.shape[2]
        buf = io.StringIO()
        buf.write(f"# T={cfg.T!r}\n# N={cfg.N}\n# R={cfg.R}\n# paths={cfg.paths}\n")
        buf.write(f"# seed={cfg.seed}\n# x0={','.join(repr(float(v)) for v in self.x0)}\n")
        buf.write(f"# mode={'closed-loop' if cfg.gains is not None else 'open-loop'}\n")
        buf.write(f"# blowups={','.join(str(p) for p in np.flatnonzero(self.blowup))}\n")
        buf.write("path,t," + ",".join(f"x_{j + 1}" for j in range(n)) + "\n")
        for label, traj in [*enumerate(self.paths), ("mean", self.mean)]:
            for tk, xk in zip(self.t, traj):
                buf.write(f"{label},{tk:.10g}," + ",".join(f"{v:.12e}" for v in xk) + "\n")
        return buf.getvalue()


def read_ensemble_csv(text: str) -> dict:
    """Parse an ensemble CSV into metadata, per-path arrays and the mean."""
    meta, rows = {}, {}
    lines = text.splitlines()
    body = []
    for ln in lines:
        if ln.startswith("#"):
            key, _, val = ln[1:].strip().partition("=")
            meta[key] = val
        else:
            body.append(ln)
    for ln in body[1:]:
        label, *vals = ln.split(",")
        rows.setdefault(label, []).append([float(v) for v in vals])
    data = {k: np.array(v) for k, v in rows.items()}
    return {"meta": meta, "mean": data.pop("mean"),
            "paths": [data[k] for k in sorted(data, key=int)]}


def monte_carlo(model: TSModel, config: SimConfig, x0=None) -> SimEnsemble:
    """``config.paths`` independent trajectories from one initial state."""
    x0 = np.asarray(config.initial_states[0] if x0 is None else x0, dtype=float)
    base = np.stack([wiener_increments(config.seed, config.N, config.dt, p)
                     for p in range(config.paths)])
    dW = coarse_increments(base, config.R)
    states, blown = simulate_paths(model, x0, dW, config.Dt, config.gains)
    return SimEnsemble(config, x0, config.times(), states, blown)


def scenario_csv(ensembles) -> str:
    """Ensembles that share a config but start from different states, in one CSV.

    Rows are ``start,path,t,x_1..x_n`` where ``start`` indexes the initial
    state; each start also carries its ``mean`` pseudo-path.
    """
    cfg = ensembles[0].config
    n = ensembles[0].paths.shape[2]
    buf = io.StringIO()
    buf.write(f"# T={cfg.T!r}\n# N={cfg.N}\n# R={cfg.R}\n# paths={cfg.paths}\n# seed={cfg.seed}\n")
    buf.write(f"# mode={'closed-loop' if cfg.gains is not None else 'open-loop'}\n")
    for s, ens in enumerate(ensembles):
        buf.write(f"# x0[{s}]={','.join(repr(float(v)) for v in ens.x0)}\n")
        buf.write(f"# blowups[{s}]={','.join(str(p) for p in np.flatnonzero(ens.blowup))}\n")
    buf.write("start,path,t," + ",".join(f"x_{j + 1}" for j in range(n)) + "\n")
    for s, ens in enumerate(ensembles):
        for label, traj in [*enumerate(ens.paths), ("mean", ens.mean)]:
            for tk, xk in zip(ens.t, traj):
                buf.write(f"{s},{label},{tk:.10g}," + ",".join(f"{v:.12e}" for v in xk) + "\n")
    return buf.getvalue()


def read_scenario_csv(text: str) -> dict:
    """Inverse of :func:`scenario_csv`: metadata plus, per start, paths and mean."""
    meta, starts = {}, {}
    body = []
    for ln in text.splitlines():
        if ln.startswith("#"):
            key, _, val = ln[1:].strip().partition("=")
            meta[key] = val
        elif ln:
            body.append(ln)
    for ln in body[1:]:
        s, label, *vals = ln.split(",")
        starts.setdefault(int(s), {}).setdefault(label, []).append([float(v) for v in vals])
    out = []
    for s in sorted(starts):
        data = {k: np.array(v) for k, v in starts[s].items()}
        mean = data.pop("mean")
        out.append({"x0": [float(v) for v in meta[f"x0[{s}]"].split(",")],
                    "blowups": [int(p) for p in meta[f"blowups[{s}]"].split(",") if p],
                    "mean": mean, "paths": [data[k] for k in sorted(data, key=int)]})
    return {"meta": meta, "starts": out}

"""Fixed-point and root-finding engines with full trace recording.

Three solvers share one trace contract: plain damped iteration, Anderson
acceleration (Type I or II), and limited-memory good Broyden.  Each
records, per iteration, the iterate, its residual norm, optional cost and
KKT diagnostics, cumulative evaluation counters, and wall time.  A
nonfinite iterate stops the run with ``failed`` set rather than raising,
so callers can inspect the partial trace.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import SingularMatrix
from .layers import EvalCounters
from .linalg import lstsq_ridge, solve_dense

ANDERSON_TYPE_I = "I"
ANDERSON_TYPE_II = "II"


@dataclass
class SolverConfig:
    max_iter: int = 100
    tol: float = 1e-9
    memory: int = 20
    beta: float = 1.0           # mixing coefficient in (0, 1]
    ridge: float | None = None  # None: 1e-8 * ||current residual||^2 per iteration
    anderson_type: str = ANDERSON_TYPE_II
    method: str = "anderson"    # naive | anderson | broyden

    def __post_init__(self):
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if self.memory < 0:
            raise ValueError("memory must be >= 0")
        if not 0.0 < self.beta <= 1.0:
            raise ValueError("beta must lie in (0, 1]")
        if self.anderson_type not in (ANDERSON_TYPE_I, ANDERSON_TYPE_II):
            raise ValueError(f"unknown anderson_type {self.anderson_type!r}")
        if self.method not in ("naive", "anderson", "broyden"):
            raise ValueError(f"unknown method {self.method!r}")


@dataclass
class SolverTrace:
    iterates: list = field(default_factory=list)
    residuals: list = field(default_factory=list)
    costs: list = field(default_factory=list)
    kkt_norms: list = field(default_factory=list)
    f_evals: list = field(default_factory=list)
    vjp_evals: list = field(default_factory=list)
    wall_ns: list = field(default_factory=list)
    converged: bool = False
    failed: bool = False

    def __len__(self) -> int:
        return len(self.iterates)

    @property
    def final(self) -> np.ndarray:
        return self.iterates[-1]

    def record(self, v, residual, cost, kkt_norm, counters: EvalCounters, t0: int):
        self.iterates.append(v.copy())
        self.residuals.append(float(residual))
        self.costs.append(float(cost) if cost is not None else float("nan"))
        self.kkt_norms.append(float(kkt_norm) if kkt_norm is not None else float("nan"))
        self.f_evals.append(counters.f_evals)
        self.vjp_evals.append(counters.vjp_evals)
        self.wall_ns.append(time.perf_counter_ns() - t0)


def _counting(F, counters: EvalCounters):
    def wrapped(v):
        counters.f_evals += 1
        return F(v)
    return wrapped


def _diag_or_nan(diagnostics, v, fv):
    if diagnostics is None:
        return None, None
    return diagnostics(v, fv)


def iterate_naive(F, v0: np.ndarray, cfg: SolverConfig, *,
                  counters: EvalCounters | None = None,
                  diagnostics=None, post_update=None) -> SolverTrace:
    """Repeat v <- F(v) until the residual norm drops below tol."""
    if counters is None:
        counters = EvalCounters()
        F = _counting(F, counters)
    trace = SolverTrace()
    t0 = time.perf_counter_ns()
    v = np.asarray(v0, dtype=np.float64).copy()
    for _ in range(cfg.max_iter + 1):
        fv = F(v)
        if not np.all(np.isfinite(fv)):
            trace.failed = True
            trace.record(v, float("nan"), *_diag_or_nan(diagnostics, v, fv),
                         counters, t0)
            return trace
        residual = np.linalg.norm(fv - v)
        cost, kkt = _diag_or_nan(diagnostics, v, fv)
        trace.record(v, residual, cost, kkt, counters, t0)
        if residual <= cfg.tol:
            trace.converged = True
            return trace
        if len(trace) > cfg.max_iter:
            return trace
        v = fv if post_update is None else post_update(fv)
    return trace


def anderson(F, v0: np.ndarray, cfg: SolverConfig, *,
             counters: EvalCounters | None = None,
             diagnostics=None, post_update=None) -> SolverTrace:
    """Anderson-accelerated fixed-point iteration.

    Maintains windows of iterate differences dV and residual differences
    dG of width min(memory, k).  Type II solves the ridge least-squares
    problem min ||g - dG c||^2 + lam ||c||^2; Type I solves the oblique
    system (dV^T dG + lam I) c = dV^T g.  The update is
    v+ = v + beta*g - (dV + beta*dG) c.  With memory 0 this reduces to
    plain mixing, bit-identical to iterate_naive at beta = 1.
    """
    if counters is None:
        counters = EvalCounters()
        F = _counting(F, counters)
    trace = SolverTrace()
    t0 = time.perf_counter_ns()
    v = np.asarray(v0, dtype=np.float64).copy()
    hist_v: list[np.ndarray] = []
    hist_g: list[np.ndarray] = []
    for k in range(cfg.max_iter + 1):
        fv = F(v)
        if not np.all(np.isfinite(fv)):
            trace.failed = True
            trace.record(v, float("nan"), *_diag_or_nan(diagnostics, v, fv),
                         counters, t0)
            return trace
        g = fv - v
        residual = np.linalg.norm(g)
        cost, kkt = _diag_or_nan(diagnostics, v, fv)
        trace.record(v, residual, cost, kkt, counters, t0)
        if residual <= cfg.tol:
            trace.converged = True
            return trace
        if len(trace) > cfg.max_iter:
            return trace
        if cfg.memory > 0:
            hist_v.append(v.copy())
            hist_g.append(g.copy())
        width = min(cfg.memory, k)
        if width == 0:
            v_new = fv.copy() if cfg.beta == 1.0 else (1 - cfg.beta) * v + cfg.beta * fv
        else:
            lam = cfg.ridge if cfg.ridge is not None else 1e-8 * float(g @ g)
            dV = np.stack([hist_v[-width + j] - hist_v[-width + j - 1]
                           for j in range(width)], axis=1)
            dG = np.stack([hist_g[-width + j] - hist_g[-width + j - 1]
                           for j in range(width)], axis=1)
            try:
                if cfg.anderson_type == ANDERSON_TYPE_II:
                    coef = lstsq_ridge(dG, g, lam)
                else:
                    coef = solve_dense(dV.T @ dG + lam * np.eye(width), dV.T @ g)
            except SingularMatrix:
                coef = np.zeros(width)   # degenerate window: fall back to mixing
            v_new = v + cfg.beta * g - (dV + cfg.beta * dG) @ coef
        if post_update is not None:
            v_new = post_update(v_new)
        if not np.all(np.isfinite(v_new)):
            trace.failed = True
            return trace
        v = v_new
        if len(hist_v) > cfg.memory + 1:
            hist_v.pop(0)
            hist_g.pop(0)
    return trace


def broyden(g, v0: np.ndarray, cfg: SolverConfig, *,
            counters: EvalCounters | None = None,
            diagnostics=None, post_update=None) -> SolverTrace:
    """Limited-memory good-Broyden root finder for g(v) = 0.

    The inverse-Jacobian estimate starts at -I (the standard choice for
    equilibrium residual maps) and is carried as at most ``memory``
    rank-one pairs, oldest dropped first.  The step length is fixed at 1.
    """
    if counters is None:
        counters = EvalCounters()
        g = _counting(g, counters)
    trace = SolverTrace()
    t0 = time.perf_counter_ns()
    v = np.asarray(v0, dtype=np.float64).copy()
    us: list[np.ndarray] = []
    ws: list[np.ndarray] = []

    def apply_B(vec):
        out = -vec
        for u, w in zip(us, ws):
            out = out + u * (w @ vec)
        return out

    def apply_BT(vec):
        out = -vec
        for u, w in zip(us, ws):
            out = out + w * (u @ vec)
        return out

    gv = g(v)
    for _ in range(cfg.max_iter + 1):
        if not np.all(np.isfinite(gv)):
            trace.failed = True
            trace.record(v, float("nan"), *_diag_or_nan(diagnostics, v, gv),
                         counters, t0)
            return trace
        residual = np.linalg.norm(gv)
        cost, kkt = _diag_or_nan(diagnostics, v, gv)
        trace.record(v, residual, cost, kkt, counters, t0)
        if residual <= cfg.tol:
            trace.converged = True
            return trace
        if len(trace) > cfg.max_iter:
            return trace
        dv = -apply_B(gv)
        v_new = v + dv
        if post_update is not None:
            v_new = post_update(v_new)
            dv = v_new - v
        if not np.all(np.isfinite(v_new)):
            trace.failed = True
            return trace
        g_new = g(v_new)
        if np.all(np.isfinite(g_new)):
            dg = g_new - gv
            Bdg = apply_B(dg)
            denom = dv @ Bdg
            if abs(denom) > 1e-300:
                us.append((dv - Bdg) / denom)
                ws.append(apply_BT(dv))
                if len(us) > cfg.memory:
                    us.pop(0)
                    ws.pop(0)
        v, gv = v_new, g_new
    return trace


def select_iterate(trace: SolverTrace, costs=None, kkt_norms=None,
                   feasibility_factor: float = 10.0) -> int:
    """Pick the cheapest iterate among those with near-minimal KKT norm.

    Admissible iterates have kkt <= feasibility_factor * min(kkt); among
    them the index of least cost wins, earliest on ties.  Iterates without
    diagnostics (NaN entries) are admissible on KKT and ranked last on
    cost.
    """
    if len(trace) == 0:
        raise ValueError("empty trace")
    if feasibility_factor < 1.0:
        raise ValueError("feasibility_factor must be >= 1")
    costs = np.asarray(trace.costs if costs is None else costs, dtype=np.float64)
    kkt = np.asarray(trace.kkt_norms if kkt_norms is None else kkt_norms,
                     dtype=np.float64)
    finite_kkt = kkt[np.isfinite(kkt)]
    if finite_kkt.size == 0:
        admissible = np.ones(len(costs), dtype=bool)
    else:
        kkt_min = finite_kkt.min()
        if np.isinf(feasibility_factor):
            threshold = np.inf
        else:
            threshold = feasibility_factor * kkt_min
        admissible = ~np.isfinite(kkt) | (kkt <= threshold)
    ranked = np.where(np.isfinite(costs), costs, np.inf)
    ranked = np.where(admissible, ranked, np.inf)
    return int(np.argmin(ranked))

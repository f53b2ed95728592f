"""Sequential input optimization: the inner/outer approach JIIO is measured against.

Each optimizer step pays for a full forward fixed-point solve and a full
adjoint solve, so the evaluation counters of a T-step run reflect exactly
T of each.  Supported input optimizers: plain gradient descent, Adam, and
projected gradient descent.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .augmented import ConstraintSet, InputOptProblem, project, richardson_mu
from .errors import DimensionMismatch
from .layers import (EquilibriumLayer, EvalCounters, layer_eval, layer_vjp_x,
                     loss_eval, loss_grad_z)
from .linalg import solve_dense
from .solvers import SolverConfig, SolverTrace, anderson, broyden, iterate_naive


@dataclass
class AdjointConfig:
    max_iter: int = 2000
    tol: float = 1e-8
    mode: str = "richardson"    # richardson | dense

    def __post_init__(self):
        if self.mode not in ("richardson", "dense"):
            raise ValueError(f"unknown adjoint mode {self.mode!r}")


class GradientDescent:
    def __init__(self, step: float):
        if step < 0:
            raise ValueError("step must be nonnegative")
        self.step = step

    def update(self, x: np.ndarray, grad: np.ndarray) -> np.ndarray:
        return x - self.step * grad


class Adam:
    def __init__(self, step: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps_hat: float = 1e-8):
        self.step = step
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps_hat = eps_hat
        self.t = 0
        self.m = None
        self.v = None

    def update(self, x: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(x)
            self.v = np.zeros_like(x)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        return x - self.step * m_hat / (np.sqrt(v_hat) + self.eps_hat)


class ProjectedGradientDescent:
    def __init__(self, step: float, constraint: ConstraintSet):
        self.step = step
        self.constraint = constraint

    def update(self, x: np.ndarray, grad: np.ndarray) -> np.ndarray:
        return project(self.constraint, x - self.step * grad)


_FP_SOLVERS = {"naive": iterate_naive, "anderson": anderson}


def forward_solve(layer: EquilibriumLayer, x: np.ndarray,
                  solver_cfg: SolverConfig | None = None,
                  counters: EvalCounters | None = None,
                  z0: np.ndarray | None = None):
    """Plain forward equilibrium solve z = f(z, x) via the configured solver."""
    cfg = solver_cfg or SolverConfig(max_iter=500, tol=1e-8)
    counters = counters if counters is not None else EvalCounters()
    if x.shape != (layer.d,):
        raise DimensionMismatch(f"x must have length {layer.d}")

    def fmap(z):
        return layer_eval(layer, z, x, counters)

    v0 = np.zeros(layer.n) if z0 is None else z0
    if cfg.method == "broyden":
        trace = broyden(lambda z: fmap(z) - z, v0, cfg, counters=counters)
    else:
        trace = _FP_SOLVERS[cfg.method](fmap, v0, cfg, counters=counters)
    return trace.final, trace


def implicit_input_grad(problem: InputOptProblem, x: np.ndarray,
                        z_star: np.ndarray,
                        adjoint_cfg: AdjointConfig | None = None,
                        counters: EvalCounters | None = None) -> np.ndarray:
    """d loss / d x at a solved forward fixed point, via the adjoint."""
    cfg = adjoint_cfg or AdjointConfig()
    xt = problem.total_input(x)
    if cfg.mode == "dense":
        from .layers import layer_jac_dense
        Jz, _ = layer_jac_dense(problem.layer, z_star, xt)
        g = loss_grad_z(problem.loss, problem.head, z_star)
        mu = solve_dense(np.eye(problem.n) - Jz.T, g)
    else:
        mu = richardson_mu(problem, z_star, x, max_iter=cfg.max_iter,
                           tol=cfg.tol, counters=counters)
    return problem.to_variable(layer_vjp_x(problem.layer, z_star, xt, mu, counters))


@dataclass
class SequentialResult:
    x_best: np.ndarray
    best_cost: float
    x_final: np.ndarray
    trace: SolverTrace


def sequential_input_opt(problem: InputOptProblem, x0: np.ndarray, steps: int,
                         optimizer, solver_cfg: SolverConfig | None = None,
                         adjoint_cfg: AdjointConfig | None = None,
                         counters: EvalCounters | None = None) -> SequentialResult:
    """Alternate full forward solves with implicit input-gradient steps.

    Records the cost of each visited iterate x_t (t < steps) before its
    update; the returned best iterate minimizes the recorded costs, while
    ``x_final`` is the iterate produced by the last update (its cost is
    never evaluated, keeping the accounting at exactly ``steps`` forward
    and adjoint solves).
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    counters = counters if counters is not None else EvalCounters()
    trace = SolverTrace()
    t0 = time.perf_counter_ns()
    x = np.asarray(x0, dtype=np.float64).copy()
    z_warm = None
    for _ in range(steps):
        z_star, _fwd = forward_solve(problem.layer, problem.total_input(x),
                                     solver_cfg, counters, z0=z_warm)
        z_warm = z_star
        cost = loss_eval(problem.loss, problem.head, z_star)
        grad = implicit_input_grad(problem, x, z_star, adjoint_cfg, counters)
        trace.record(x, np.linalg.norm(grad), cost, None, counters, t0)
        x = optimizer.update(x, grad)
        if not np.all(np.isfinite(x)):
            trace.failed = True
            break
    costs = np.asarray(trace.costs)
    best = int(np.argmin(costs))
    return SequentialResult(trace.iterates[best].copy(), float(costs[best]),
                            x, trace)


def pgd_attack(layer: EquilibriumLayer, head, x: np.ndarray, label: int,
               epsilon: float, steps: int = 20, step_size: float | None = None,
               solver_cfg: SolverConfig | None = None,
               adjoint_cfg: AdjointConfig | None = None,
               counters: EvalCounters | None = None) -> np.ndarray:
    """L2 projected-gradient attack: maximize the classification loss over
    a perturbation delta with ||delta|| <= epsilon; returns the final delta."""
    from .layers import NEG_CROSS_ENTROPY, InnerLoss
    if epsilon < 0:
        raise ValueError("epsilon must be nonnegative")
    if epsilon == 0.0:
        return np.zeros(layer.d)
    problem = InputOptProblem(
        layer=layer, head=head,
        loss=InnerLoss(NEG_CROSS_ENTROPY, label),
        constraint=ConstraintSet.l2_ball(np.zeros(layer.d), epsilon),
        x_base=np.asarray(x, dtype=np.float64))
    step = step_size if step_size is not None else 2.5 * epsilon / steps
    opt = ProjectedGradientDescent(step, problem.constraint)
    result = sequential_input_opt(problem, np.zeros(layer.d), steps, opt,
                                  solver_cfg, adjoint_cfg, counters)
    return result.x_final

"""Gradient-based meta-learning with the joint solver in the inner loop.

A task is adapted by optimizing a shared task vector rather than the
model parameters: every support example keeps its own equilibrium state
and dual, all driven by one task vector whose update sums the
input-gradient contributions across the support set.  The outer loop
evaluates query examples at the adapted (frozen) task vector and trains
the model parameters by ordinary implicit differentiation of the query
fixed points.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..augmented import (AugmentedState, Damping, InputOptProblem, project,
                         richardson_mu, _step_parts)
from ..backward import ThetaGradient, grad_theta_reuse
from ..baselines import forward_solve
from ..errors import NonFiniteError
from ..layers import SQUARED_ERROR, EvalCounters, InnerLoss, loss_eval
from ..rng import SeededRng
from ..solvers import SolverConfig, SolverTrace, select_iterate
from .data import MetaTask, Model
from .train_utils import (AdamParams, EvalSolveConfig, TrainConfig,
                          accumulate, check_finite_grads, grads_as_dict)


def task_embedding(model: Model, task_dim: int) -> np.ndarray:
    """Injection of the task vector into the leading input coordinates."""
    E = np.zeros((model.layer.d, task_dim))
    E[:task_dim, :task_dim] = np.eye(task_dim)
    return E


def example_problem(model: Model, features: np.ndarray, target,
                    task_dim: int) -> InputOptProblem:
    """Per-example problem: input = [task vector; fixed example features]."""
    d = model.layer.d
    if task_dim + len(features) != d:
        raise ValueError(f"task_dim {task_dim} + features {len(features)} != input {d}")
    x_base = np.concatenate([np.zeros(task_dim), features])
    loss = InnerLoss(SQUARED_ERROR, np.asarray(target, dtype=np.float64))
    return InputOptProblem(layer=model.layer, head=model.head, loss=loss,
                           x_base=x_base, input_embed=task_embedding(model, task_dim))


class _StackedMap:
    """Joint update over K example states sharing one task vector."""

    def __init__(self, problems: list[InputOptProblem], damping: Damping,
                 counters: EvalCounters):
        self.problems = problems
        self.damping = damping
        self.counters = counters
        self.iteration = 0
        self.n = problems[0].n
        self.task_dim = problems[0].var_dim
        self._caches = None

    def unpack(self, v: np.ndarray):
        k, n = len(self.problems), self.n
        zs = [v[i * n:(i + 1) * n] for i in range(k)]
        mus = [v[(k + i) * n:(k + i + 1) * n] for i in range(k)]
        x = v[2 * k * n:]
        return zs, mus, x

    def __call__(self, v: np.ndarray) -> np.ndarray:
        zs, mus, x = self.unpack(v)
        alpha_x = self.damping.alpha_x_at(self.iteration)
        self.iteration += 1
        caches = [_step_parts(p, z, mu, x, self.counters)
                  for p, z, mu in zip(self.problems, zs, mus)]
        self._caches = caches
        az, am = self.damping.alpha_z, self.damping.alpha_mu
        new_zs = [(1.0 - az) * z + az * c.f for z, c in zip(zs, caches)]
        new_mus = [(1.0 - am) * mu + am * (c.vjp_z_mu + c.grad_loss)
                   for mu, c in zip(mus, caches)]
        grad_x = caches[0].grad_x.copy()
        for c in caches[1:]:
            grad_x += c.grad_x
        x_new = project(self.problems[0].constraint, x - alpha_x * grad_x)
        return np.concatenate(new_zs + new_mus + [x_new])

    def diagnostics(self, v: np.ndarray, fv: np.ndarray):
        zs, mus, x = self.unpack(v)
        cost = 0.0
        sq = 0.0
        grad_x = None
        for p, z, mu, c in zip(self.problems, zs, mus, self._caches):
            cost += loss_eval(p.loss, p.head, z)
            r_z = c.f - z
            r_mu = c.grad_loss + c.vjp_z_mu - mu
            sq += r_z @ r_z + r_mu @ r_mu
            grad_x = c.grad_x.copy() if grad_x is None else grad_x + c.grad_x
        constraint = self.problems[0].constraint
        if constraint.kind == "unconstrained":
            r_x = grad_x
        else:
            r_x = x - project(constraint, x - grad_x)
        return cost, float(np.sqrt(sq + r_x @ r_x))


@dataclass
class MetaInnerResult:
    x: np.ndarray
    z: list
    mu: list
    cost: float
    trace: SolverTrace


def meta_inner_solve(model: Model, task: MetaTask,
                     eval_cfg: EvalSolveConfig | None = None,
                     counters: EvalCounters | None = None) -> MetaInnerResult:
    """Adapt the shared task vector on the support set.

    With a single support example this is exactly the plain joint solve
    (bit for bit); with several, the task-vector update row sums the
    per-example contributions.
    """
    from ..solvers import anderson, broyden, iterate_naive
    cfg = eval_cfg or EvalSolveConfig(
        inner_iters=100, damping=Damping(0.8, 0.6, 0.04, schedule=((65, 0.01),)))
    counters = counters if counters is not None else EvalCounters()
    problems = [example_problem(model, task.support_x[k], task.support_y[k],
                                task.task_dim) for k in range(task.k)]
    fmap = _StackedMap(problems, cfg.damping, counters)
    n, K = fmap.n, task.k
    v0 = np.zeros(2 * K * n + task.task_dim)
    solver_cfg = cfg.solver_cfg()
    solvers = {"naive": iterate_naive, "anderson": anderson}
    if solver_cfg.method == "broyden":
        trace = broyden(lambda v: fmap(v) - v, v0, solver_cfg, counters=counters,
                        diagnostics=fmap.diagnostics)
    else:
        trace = solvers[solver_cfg.method](fmap, v0, solver_cfg,
                                           counters=counters,
                                           diagnostics=fmap.diagnostics)
    idx = select_iterate(trace, feasibility_factor=cfg.selection_c)
    zs, mus, x = fmap.unpack(trace.iterates[idx])
    return MetaInnerResult(x.copy(), [z.copy() for z in zs],
                           [m.copy() for m in mus],
                           float(trace.costs[idx]), trace)


def query_loss(model: Model, task: MetaTask, x_task: np.ndarray,
               forward_cfg=None) -> float:
    """Mean query-set loss at a frozen task vector."""
    total = 0.0
    for s, y in zip(task.query_x, task.query_y):
        problem = example_problem(model, s, y, task.task_dim)
        z_star, _ = forward_solve(model.layer, problem.total_input(x_task),
                                  forward_cfg)
        total += loss_eval(problem.loss, problem.head, z_star)
    return total / len(task.query_x)


def meta_query_grad(model: Model, task: MetaTask,
                    x_task: np.ndarray) -> ThetaGradient:
    """Parameter gradient of the query loss with the task vector frozen."""
    total: ThetaGradient | None = None
    for s, y in zip(task.query_x, task.query_y):
        problem = example_problem(model, s, y, task.task_dim)
        z_star, _ = forward_solve(model.layer, problem.total_input(x_task), None)
        mu = richardson_mu(problem, z_star, x_task)
        state = AugmentedState(z_star, mu, x_task.copy())
        total = accumulate(total, grad_theta_reuse(problem, state))
    return total.scaled(1.0 / len(task.query_x))


def meta_train(task_sampler, model: Model, cfg: TrainConfig, rng: SeededRng):
    """Outer loop over tasks: adapt on support, update parameters on query."""
    opt = AdamParams(cfg.lr)
    metrics = []
    for step in range(cfg.steps):
        total: ThetaGradient | None = None
        q_sum = 0.0
        tasks = [task_sampler(rng) for _ in range(cfg.batch_size)]
        for task in tasks:
            inner = meta_inner_solve(model, task, cfg.inner)
            if inner.trace.failed:
                raise NonFiniteError(f"inner adaptation diverged at step {step}")
            grad = meta_query_grad(model, task, inner.x)
            check_finite_grads(grad, f"meta step {step}")
            total = accumulate(total, grad)
            q_sum += query_loss(model, task, inner.x)
        params = model.params
        opt.step(params, grads_as_dict(total.scaled(1.0 / len(tasks))))
        model = model.with_params(params)
        if cfg.rescale_every_step:
            model = model.rescaled()
        metrics.append({"step": step, "query_loss": q_sum / len(tasks)})
    return model, metrics

"""Decoder-only generative modeling by joint latent optimization.

Training alternates a joint solve for each item's optimal latent code
with a reuse-shortcut parameter update, optionally regularized by the
Hutchinson squared-Jacobian estimate evaluated at a randomly chosen
iterate of the solve trajectory.  Sampling is post hoc: fit a diagonal
Gaussian over the training latents and decode fresh draws.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from ..augmented import AugmentedState, InputOptProblem, jiio_solve
from ..backward import ThetaGradient, grad_theta_reuse, hutchinson_reg
from ..errors import DegenerateFit, NonFiniteError
from ..layers import SQUARED_ERROR, EvalCounters, InnerLoss
from ..rng import SeededRng
from ..solvers import SolverTrace
from .data import Dataset, Model
from .train_utils import (AdamParams, EvalSolveConfig, TrainConfig,
                          accumulate, check_finite_grads, grads_as_dict)


def latent_problem(model: Model, y: np.ndarray,
                   operator_matrix: np.ndarray | None = None) -> InputOptProblem:
    return InputOptProblem(
        layer=model.layer, head=model.head,
        loss=InnerLoss(SQUARED_ERROR, y, operator_matrix=operator_matrix))


@dataclass
class FitResult:
    x: np.ndarray
    reconstruction: np.ndarray
    cost: float
    trace: SolverTrace


def fit_latent(model: Model, y: np.ndarray,
               eval_cfg: EvalSolveConfig | None = None,
               init="zeros", counters: EvalCounters | None = None) -> FitResult:
    """Solve for the latent code that best reconstructs y under the model."""
    cfg = eval_cfg or EvalSolveConfig()
    problem = latent_problem(model, y)
    state, trace = jiio_solve(problem, init=init, damping=cfg.damping,
                              solver_cfg=cfg.solver_cfg(),
                              selection_c=cfg.selection_c, counters=counters)
    recon = model.head(state.z)
    cost = float(np.sum((y - recon) ** 2))
    return FitResult(state.x, recon, cost, trace)


def _hutch_at_random_iterate(problem: InputOptProblem, trace: SolverTrace,
                             rng: SeededRng, samples: int):
    """Regularizer evaluated at one uniformly drawn trajectory iterate."""
    k = int(rng.integers(0, len(trace)))
    state = AugmentedState.unpack(trace.iterates[k], problem.n, problem.var_dim)
    xt = problem.total_input(state.x)
    return hutchinson_reg(problem.layer, state.z, xt, rng, samples)


def train_generative(dataset: Dataset, model: Model, cfg: TrainConfig,
                     rng: SeededRng):
    """Fit the decoder to reconstruct each item through its optimal latent.

    Returns the trained model, per-step metric rows, and the final epoch's
    latent codes keyed by item index (for post-hoc sampling).
    """
    opt = AdamParams(cfg.lr)
    metrics = []
    latents: dict[int, np.ndarray] = {}
    n_items = len(dataset)
    for step in range(cfg.steps):
        idx = rng.integers(0, n_items, size=min(cfg.batch_size, n_items))
        total: ThetaGradient | None = None
        mse_sum = 0.0
        hutch_val = 0.0
        for i in idx:
            y = dataset.items[int(i)]
            problem = latent_problem(model, y)
            state, trace = jiio_solve(problem, damping=cfg.inner.damping,
                                      solver_cfg=cfg.inner.solver_cfg(),
                                      selection_c=cfg.inner.selection_c)
            if trace.failed:
                raise NonFiniteError(
                    f"joint solve diverged at step {step}, item {int(i)}; "
                    f"residuals: {trace.residuals[-3:]}")
            latents[int(i)] = state.x.copy()
            grad = grad_theta_reuse(problem, state)
            if cfg.hutch_lambda > 0.0:
                est, hgrad = _hutch_at_random_iterate(problem, trace, rng,
                                                      cfg.hutch_samples)
                hutch_val += est
                grad = grad.add(hgrad.scaled(cfg.hutch_lambda))
            check_finite_grads(grad, f"generative step {step}")
            total = accumulate(total, grad)
            mse_sum += float(np.mean((y - model.head(state.z)) ** 2))
        params = model.params
        opt.step(params, grads_as_dict(total.scaled(1.0 / len(idx))))
        model = model.with_params(params)
        if cfg.rescale_every_step:
            model = model.rescaled()
        metrics.append({"step": step, "mse": mse_sum / len(idx),
                        "hutch": hutch_val / len(idx)})
    return model, metrics, latents


def sample_posthoc(model: Model, latents: np.ndarray, count: int,
                   rng: SeededRng, forward_cfg=None) -> np.ndarray:
    """Fit a diagonal Gaussian to the latent collection, draw, and decode."""
    from ..baselines import forward_solve
    latents = np.asarray(latents, dtype=np.float64)
    if latents.ndim != 2 or len(latents) < 2:
        raise ValueError("need at least two latent vectors")
    mean = latents.mean(axis=0)
    var = latents.var(axis=0)
    floored = var < 1e-12
    if np.any(floored):
        warnings.warn(f"{int(floored.sum())} latent coordinates have "
                      "near-zero variance; flooring", DegenerateFit)
        var = np.maximum(var, 1e-12)
    out = np.empty((count, model.head.p))
    for i in range(count):
        x = mean + np.sqrt(var) * rng.standard_normal(latents.shape[1])
        z_star, _ = forward_solve(model.layer, x, forward_cfg)
        out[i] = model.head(z_star)
    return out

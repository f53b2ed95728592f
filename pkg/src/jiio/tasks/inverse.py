"""Inverse problems on a decoder: unsupervised solving and supervised training.

Unsupervised: reuse a (pre)trained decoder as a prior and fit the latent
so the decoded output matches the corrupted observation *through* the
measurement operator; the decoded output itself is the restored signal.
Supervised: train the decoder so that this restoration matches clean
data, which requires the general backward route because the outer loss
(clean-domain error) is not the inner loss (observed-domain error).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..augmented import InputOptProblem, jiio_solve
from ..backward import CUSTOM, OuterLoss, ThetaGradient, grad_theta_general
from ..errors import NonFiniteError
from ..layers import SQUARED_ERROR, EvalCounters, InnerLoss
from ..rng import SeededRng
from ..solvers import SolverTrace
from .data import Dataset, MeasurementOperator, Model, MASK
from .train_utils import (AdamParams, EvalSolveConfig, TrainConfig,
                          accumulate, check_finite_grads, grads_as_dict)


def _operator_loss(operator: MeasurementOperator, target: np.ndarray) -> InnerLoss:
    matrix = operator.as_matrix() if operator.kind == MASK else None
    return InnerLoss(SQUARED_ERROR, target, operator_matrix=matrix)


def inverse_problem(model: Model, observed: np.ndarray,
                    operator: MeasurementOperator) -> InputOptProblem:
    return InputOptProblem(layer=model.layer, head=model.head,
                           loss=_operator_loss(operator, observed))


@dataclass
class InverseResult:
    reconstruction: np.ndarray
    x: np.ndarray
    cost: float
    trace: SolverTrace


def solve_inverse_unsup(model: Model, observed: np.ndarray,
                        operator: MeasurementOperator,
                        eval_cfg: EvalSolveConfig | None = None,
                        counters: EvalCounters | None = None) -> InverseResult:
    """Restore a corrupted observation through the decoder prior.

    With the identity operator this is exactly latent fitting; the
    returned reconstruction lives in the full (uncorrupted) domain.
    """
    cfg = eval_cfg or EvalSolveConfig()
    problem = inverse_problem(model, observed, operator)
    state, trace = jiio_solve(problem, damping=cfg.damping,
                              solver_cfg=cfg.solver_cfg(),
                              selection_c=cfg.selection_c, counters=counters)
    recon = model.head(state.z)
    idx = len(trace.costs) - 1
    return InverseResult(recon, state.x, float(trace.costs[idx]), trace)


def train_inverse_sup(dataset: Dataset, operator: MeasurementOperator,
                      model: Model, cfg: TrainConfig, rng: SeededRng):
    """Train the decoder for one specific inverse problem.

    The inner objective compares reconstructions with clean targets in
    the observed domain (both sides through the operator); the outer
    objective is the clean-domain reconstruction error, so gradients flow
    through the KKT linear system.
    """
    opt = AdamParams(cfg.lr)
    metrics = []
    for step in range(cfg.steps):
        idx = rng.integers(0, len(dataset), size=min(cfg.batch_size, len(dataset)))
        total: ThetaGradient | None = None
        outer_sum = 0.0
        for i in idx:
            y = dataset.items[int(i)]
            problem = InputOptProblem(layer=model.layer, head=model.head,
                                      loss=_operator_loss(operator, y))
            state, trace = jiio_solve(problem, damping=cfg.inner.damping,
                                      solver_cfg=cfg.inner.solver_cfg(),
                                      selection_c=cfg.inner.selection_c)
            if trace.failed:
                raise NonFiniteError(f"inner solve diverged at step {step}")
            outer = OuterLoss(CUSTOM, head=problem.head,
                              loss=InnerLoss(SQUARED_ERROR, y))
            grad = grad_theta_general(problem, state, outer)
            check_finite_grads(grad, f"supervised inverse step {step}")
            total = accumulate(total, grad)
            outer_sum += float(np.sum((y - model.head(state.z)) ** 2))
        params = model.params
        opt.step(params, grads_as_dict(total.scaled(1.0 / len(idx))))
        model = model.with_params(params)
        if cfg.rescale_every_step:
            model = model.rescaled()
        metrics.append({"step": step, "outer_loss": outer_sum / len(idx)})
    return model, metrics


def masked_region_mse(operator: MeasurementOperator, reference: np.ndarray,
                      estimate: np.ndarray) -> float:
    """Mean squared error restricted to the operator's zeroed window."""
    idx = operator.mask_indices()
    if idx.size == 0:
        return float(np.mean((reference - estimate) ** 2))
    return float(np.mean((reference[idx] - estimate[idx]) ** 2))

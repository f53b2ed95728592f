"""L2 adversarial attacks and adversarial training of equilibrium classifiers.

The joint attack embeds the perturbation search into the augmented
system: the inner objective is the negated classification loss and the
perturbation block stays inside the epsilon ball by projection.  The
sequential alternative attacks with projected gradient descent over full
forward/adjoint solves.  Either adversary plugs into the same training
loop; parameter gradients at the attacked point use the reuse shortcut
with the appropriate sign.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..augmented import (AugmentedState, ConstraintSet, Damping,
                         InputOptProblem, jiio_solve, richardson_mu)
from ..backward import NEG_OF_INNER, SAME_AS_INNER, ThetaGradient, grad_theta_reuse
from ..baselines import AdjointConfig, forward_solve, pgd_attack
from ..errors import NonFiniteError
from ..layers import (CROSS_ENTROPY, NEG_CROSS_ENTROPY, EvalCounters,
                      InnerLoss, loss_eval)
from ..rng import SeededRng
from ..solvers import SolverConfig, SolverTrace
from .data import Dataset, Model
from .train_utils import (AdamParams, TrainConfig, accumulate,
                          check_finite_grads, grads_as_dict)


@dataclass
class AttackConfig:
    epsilon: float = 1.0
    jiio_iters: int = 80
    pgd_iters: int = 20
    pgd_step: float | None = None
    damping: Damping = field(default_factory=lambda: Damping(0.8, 0.6, 0.6))
    memory: int = 20
    selection_c: float = 10.0


def perturbation_problem(model: Model, x: np.ndarray, label: int,
                         epsilon: float) -> InputOptProblem:
    return InputOptProblem(
        layer=model.layer, head=model.head,
        loss=InnerLoss(NEG_CROSS_ENTROPY, label),
        constraint=ConstraintSet.l2_ball(np.zeros(model.layer.d), epsilon),
        x_base=np.asarray(x, dtype=np.float64))


def jiio_attack(model: Model, x: np.ndarray, label: int,
                cfg: AttackConfig | None = None,
                counters: EvalCounters | None = None):
    """Joint attack: solve the augmented system over (z, mu, delta)."""
    cfg = cfg or AttackConfig()
    if cfg.epsilon == 0.0:
        return np.zeros(model.layer.d), None
    problem = perturbation_problem(model, x, label, cfg.epsilon)
    solver = SolverConfig(max_iter=cfg.jiio_iters, tol=1e-12, memory=cfg.memory)
    state, trace = jiio_solve(problem, damping=cfg.damping, solver_cfg=solver,
                              selection_c=cfg.selection_c, counters=counters)
    return state.x, trace


def classify(model: Model, x: np.ndarray, forward_cfg=None,
             counters: EvalCounters | None = None) -> int:
    z_star, _ = forward_solve(model.layer, x, forward_cfg, counters)
    return int(np.argmax(model.head(z_star)))


def classification_loss(model: Model, x: np.ndarray, label: int,
                        forward_cfg=None) -> float:
    z_star, _ = forward_solve(model.layer, x, forward_cfg)
    return loss_eval(InnerLoss(CROSS_ENTROPY, label), model.head, z_star)


def attack_item(model: Model, x: np.ndarray, label: int, method: str,
                cfg: AttackConfig, counters: EvalCounters | None = None):
    if method == "jiio":
        delta, _ = jiio_attack(model, x, label, cfg, counters)
        return delta
    if method == "pgd":
        return pgd_attack(model.layer, model.head, x, label, cfg.epsilon,
                          steps=cfg.pgd_iters, step_size=cfg.pgd_step,
                          counters=counters)
    raise ValueError(f"unknown attack method {method!r}")


def robust_accuracy(model: Model, dataset: Dataset, method: str,
                    cfg: AttackConfig) -> float:
    hits = 0
    for x, label in zip(dataset.items, dataset.labels):
        delta = attack_item(model, x, int(label), method, cfg)
        hits += classify(model, x + delta) == int(label)
    return hits / len(dataset)


def clean_accuracy(model: Model, dataset: Dataset) -> float:
    hits = sum(classify(model, x) == int(label)
               for x, label in zip(dataset.items, dataset.labels))
    return hits / len(dataset)


def _clean_grad(model: Model, x: np.ndarray, label: int) -> ThetaGradient:
    """Implicit-differentiation gradient of the clean classification loss."""
    problem = InputOptProblem(layer=model.layer, head=model.head,
                              loss=InnerLoss(CROSS_ENTROPY, label))
    z_star, _ = forward_solve(model.layer, x, None)
    mu = richardson_mu(problem, z_star, x)
    state = AugmentedState(z_star, mu, x.copy())
    return grad_theta_reuse(problem, state, SAME_AS_INNER)


def adv_train(dataset: Dataset, epsilon: float, model: Model,
              cfg: TrainConfig, adversary: str, rng: SeededRng):
    """Adversarial (or clean, when epsilon = 0) training loop.

    Per item: find the perturbation with the chosen adversary, then take
    the parameter gradient of the classification loss at the attacked
    input.  The joint adversary hands back its converged dual, so the
    gradient is the sign-flipped reuse shortcut; the sequential adversary
    requires a fresh forward/adjoint pass.
    """
    if adversary not in ("jiio", "pgd", "none"):
        raise ValueError(f"unknown adversary {adversary!r}")
    if epsilon == 0.0:
        adversary = "none"
    attack_cfg = AttackConfig(epsilon=epsilon, jiio_iters=cfg.inner.inner_iters,
                              damping=cfg.inner.damping)
    opt = AdamParams(cfg.lr)
    metrics = []
    for step in range(cfg.steps):
        idx = rng.integers(0, len(dataset), size=min(cfg.batch_size, len(dataset)))
        total: ThetaGradient | None = None
        loss_sum = 0.0
        for i in idx:
            x = dataset.items[int(i)]
            label = int(dataset.labels[int(i)])
            if adversary == "none":
                grad = _clean_grad(model, x, label)
            elif adversary == "jiio":
                problem = perturbation_problem(model, x, label, epsilon)
                solver = SolverConfig(max_iter=attack_cfg.jiio_iters, tol=1e-12,
                                      memory=attack_cfg.memory)
                state, trace = jiio_solve(problem, damping=attack_cfg.damping,
                                          solver_cfg=solver,
                                          selection_c=attack_cfg.selection_c)
                if trace.failed:
                    raise NonFiniteError(f"attack solve diverged at step {step}")
                grad = grad_theta_reuse(problem, state, NEG_OF_INNER)
            else:
                delta = pgd_attack(model.layer, model.head, x, label, epsilon,
                                   steps=attack_cfg.pgd_iters,
                                   step_size=attack_cfg.pgd_step)
                grad = _clean_grad(model, x + delta, label)
            check_finite_grads(grad, f"adversarial step {step}")
            total = accumulate(total, grad)
            loss_sum += classification_loss(model, x, label)
        params = model.params
        opt.step(params, grads_as_dict(total.scaled(1.0 / len(idx))))
        model = model.with_params(params)
        if cfg.rescale_every_step:
            model = model.rescaled()
        metrics.append({"step": step, "clean_loss": loss_sum / len(idx)})
    return model, metrics

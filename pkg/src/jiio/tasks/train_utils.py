"""Shared training plumbing: configs, the parameter-dict Adam, common hooks."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from ..augmented import Damping
from ..backward import ThetaGradient
from ..errors import NonFiniteError
from ..solvers import SolverConfig
from ..layers import EvalCounters


@dataclass
class EvalSolveConfig:
    """Budget and damping for one joint solve."""

    inner_iters: int = 100
    damping: Damping = field(default_factory=lambda: Damping(
        0.8, 0.6, 0.01, schedule=((65, 0.003),)))
    solver: SolverConfig | None = None
    selection_c: float = 10.0

    def solver_cfg(self) -> SolverConfig:
        if self.solver is not None:
            return replace(self.solver, max_iter=self.inner_iters)
        return SolverConfig(max_iter=self.inner_iters, tol=1e-12, memory=20)


@dataclass
class TrainConfig:
    steps: int = 200
    batch_size: int = 8
    lr: float = 1e-3
    inner: EvalSolveConfig = field(default_factory=lambda: EvalSolveConfig(
        inner_iters=40, damping=Damping(0.8, 0.6, 0.01)))
    hutch_lambda: float = 0.1
    hutch_samples: int = 2
    rescale_every_step: bool = True


class AdamParams:
    """Adam over a dict of named parameter arrays, applied in place."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict = {}
        self.v: dict = {}

    def step(self, params: dict, grads: dict):
        self.t += 1
        b1c = 1 - self.beta1 ** self.t
        b2c = 1 - self.beta2 ** self.t
        for name, g in grads.items():
            if g is None:
                continue
            if name not in self.m:
                self.m[name] = np.zeros_like(params[name])
                self.v[name] = np.zeros_like(params[name])
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            update = self.lr * (self.m[name] / b1c) / (np.sqrt(self.v[name] / b2c) + self.eps)
            params[name] -= update


def grads_as_dict(grad: ThetaGradient) -> dict:
    return dict(grad.items())


def accumulate(total: ThetaGradient | None, grad: ThetaGradient) -> ThetaGradient:
    return grad if total is None else total.add(grad)


def check_finite_grads(grad: ThetaGradient, context: str):
    for name, arr in grad.items():
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"nonfinite {name} gradient during {context}")


def fresh_counters() -> EvalCounters:
    return EvalCounters()

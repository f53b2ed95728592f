"""The augmented equilibrium system over (z, mu, x).

One joint damped update advances the forward fixed point (z), the adjoint
Richardson iteration (mu), and the projected gradient step on the input
variable (x) simultaneously; a fixed point of the joint map is a root of
the KKT conditions of

    minimize_{x, z}  loss(z)   subject to  z = f(z, x_base + E x),

with projection maintaining x inside the constraint set.  ``jiio_solve``
wraps the map with any of the generic solvers and records inner cost and
KKT norm per iterate, at no extra layer evaluations, by caching the step
ingredients.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, NoConvergence
from .layers import (EquilibriumLayer, EvalCounters, InnerLoss, OutputHead,
                     layer_eval, layer_vjp_x, layer_vjp_z, loss_eval,
                     loss_grad_z)
from .solvers import (SolverConfig, SolverTrace, anderson, broyden,
                      iterate_naive, select_iterate)

UNCONSTRAINED = "unconstrained"
L2_BALL = "l2_ball"
BOX = "box"


@dataclass(frozen=True)
class ConstraintSet:
    kind: str = UNCONSTRAINED
    center: np.ndarray | None = None
    radius: float = 0.0
    lo: np.ndarray | None = None
    hi: np.ndarray | None = None

    @staticmethod
    def unconstrained() -> "ConstraintSet":
        return ConstraintSet(UNCONSTRAINED)

    @staticmethod
    def l2_ball(center, radius: float) -> "ConstraintSet":
        if radius <= 0:
            raise ValueError("ball radius must be positive")
        return ConstraintSet(L2_BALL, center=np.asarray(center, dtype=np.float64),
                             radius=float(radius))

    @staticmethod
    def box(lo, hi) -> "ConstraintSet":
        lo = np.asarray(lo, dtype=np.float64)
        hi = np.asarray(hi, dtype=np.float64)
        if np.any(lo > hi):
            raise ValueError("box bounds must satisfy lo <= hi")
        return ConstraintSet(BOX, lo=lo, hi=hi)


def project(constraint: ConstraintSet, x: np.ndarray) -> np.ndarray:
    """Euclidean projection of x onto the constraint set."""
    if constraint.kind == UNCONSTRAINED:
        return x
    if constraint.kind == L2_BALL:
        delta = x - constraint.center
        norm = np.linalg.norm(delta)
        if norm <= constraint.radius:
            return x
        return constraint.center + (constraint.radius / norm) * delta
    return np.clip(x, constraint.lo, constraint.hi)


@dataclass(frozen=True)
class Damping:
    """Per-block step sizes, with an optional reduction schedule for alpha_x."""

    alpha_z: float = 0.8
    alpha_mu: float = 0.6
    alpha_x: float = 0.01
    schedule: tuple = ()        # ((iteration, new_alpha_x), ...), thresholds increasing

    def __post_init__(self):
        for a in (self.alpha_z, self.alpha_mu):
            if not 0.0 < a <= 1.0:
                raise ValueError("alpha_z and alpha_mu must lie in (0, 1]")
        if not 0.0 <= self.alpha_x <= 1.0:
            raise ValueError("alpha_x must lie in [0, 1]")
        thresholds = [t for t, _ in self.schedule]
        if thresholds != sorted(set(thresholds)):
            raise ValueError("schedule thresholds must be strictly increasing")

    def alpha_x_at(self, iteration: int) -> float:
        ax = self.alpha_x
        for threshold, value in self.schedule:
            if iteration >= threshold:
                ax = value
        return ax


@dataclass
class AugmentedState:
    z: np.ndarray
    mu: np.ndarray
    x: np.ndarray

    def pack(self) -> np.ndarray:
        return np.concatenate([self.z, self.mu, self.x])

    @staticmethod
    def unpack(v: np.ndarray, n: int, d: int) -> "AugmentedState":
        if v.shape != (2 * n + d,):
            raise DimensionMismatch(f"expected flat state of length {2 * n + d}")
        return AugmentedState(v[:n].copy(), v[n:2 * n].copy(), v[2 * n:].copy())


@dataclass(frozen=True)
class InputOptProblem:
    """Layer, head, inner loss, constraint set and input parametrization.

    The layer sees the total input ``x_base + input_embed @ x``; the
    optimization variable x is the latent code for generative problems,
    the perturbation delta for adversarial ones (nonzero x_base), or a
    shared task vector embedded into part of the input (input_embed).
    """

    layer: EquilibriumLayer
    head: OutputHead
    loss: InnerLoss
    constraint: ConstraintSet = field(default_factory=ConstraintSet.unconstrained)
    x_base: np.ndarray | None = None
    input_embed: np.ndarray | None = None   # d_in x d_var, identity when None

    def __post_init__(self):
        if self.x_base is not None:
            xb = np.asarray(self.x_base, dtype=np.float64)
            if xb.shape != (self.layer.d,):
                raise DimensionMismatch(f"x_base must have length {self.layer.d}")
            object.__setattr__(self, "x_base", xb)
        if self.input_embed is not None:
            E = np.asarray(self.input_embed, dtype=np.float64)
            if E.ndim != 2 or E.shape[0] != self.layer.d:
                raise DimensionMismatch("input_embed must be d_in x d_var")
            object.__setattr__(self, "input_embed", E)
        if self.head.C.shape[1] != self.layer.n:
            raise DimensionMismatch("head width must match layer state size")

    @property
    def n(self) -> int:
        return self.layer.n

    @property
    def var_dim(self) -> int:
        return self.layer.d if self.input_embed is None else self.input_embed.shape[1]

    @property
    def target(self):
        return self.loss.target

    def total_input(self, x: np.ndarray) -> np.ndarray:
        xt = x if self.input_embed is None else self.input_embed @ x
        return xt if self.x_base is None else self.x_base + xt

    def to_variable(self, grad_input: np.ndarray) -> np.ndarray:
        return grad_input if self.input_embed is None else self.input_embed.T @ grad_input

    def zero_state(self) -> AugmentedState:
        return AugmentedState(np.zeros(self.n), np.zeros(self.n),
                              np.zeros(self.var_dim))


@dataclass
class _StepCache:
    f: np.ndarray
    grad_loss: np.ndarray
    vjp_z_mu: np.ndarray
    grad_x: np.ndarray          # variable-space x gradient


def _step_parts(problem: InputOptProblem, z, mu, x,
                counters: EvalCounters | None) -> _StepCache:
    """Evaluate the shared ingredients of one augmented update: 1 f-eval, 2 vjps."""
    xt = problem.total_input(x)
    f = layer_eval(problem.layer, z, xt, counters)
    grad_loss = loss_grad_z(problem.loss, problem.head, z)
    vz = layer_vjp_z(problem.layer, z, xt, mu, counters)
    gx = problem.to_variable(layer_vjp_x(problem.layer, z, xt, mu, counters))
    return _StepCache(f, grad_loss, vz, gx)


def _apply_damping(problem, state: AugmentedState, cache: _StepCache,
                   damping: Damping, alpha_x: float) -> AugmentedState:
    az, am = damping.alpha_z, damping.alpha_mu
    z_new = (1.0 - az) * state.z + az * cache.f
    mu_new = (1.0 - am) * state.mu + am * (cache.vjp_z_mu + cache.grad_loss)
    x_new = project(problem.constraint, state.x - alpha_x * cache.grad_x)
    return AugmentedState(z_new, mu_new, x_new)


def augmented_step(problem: InputOptProblem, state: AugmentedState,
                   damping: Damping, counters: EvalCounters | None = None,
                   iteration: int = 0) -> AugmentedState:
    """One damped joint update of (z, mu, x) with projection on the x block."""
    cache = _step_parts(problem, state.z, state.mu, state.x, counters)
    return _apply_damping(problem, state, cache, damping,
                          damping.alpha_x_at(iteration))


@dataclass(frozen=True)
class KktResidual:
    r_z: np.ndarray
    r_mu: np.ndarray
    r_x: np.ndarray
    norm: float


def _kkt_from_parts(problem, z, mu, x, cache: _StepCache) -> KktResidual:
    r_z = cache.f - z
    r_mu = cache.grad_loss + cache.vjp_z_mu - mu
    if problem.constraint.kind == UNCONSTRAINED:
        r_x = cache.grad_x
    else:
        r_x = x - project(problem.constraint, x - cache.grad_x)
    norm = float(np.sqrt(r_z @ r_z + r_mu @ r_mu + r_x @ r_x))
    return KktResidual(r_z, r_mu, r_x, norm)


def kkt_residual(problem: InputOptProblem, state: AugmentedState) -> KktResidual:
    """Stationarity and feasibility residuals at the given joint state.

    For constrained problems the x block is the projected-gradient
    residual x - P(x - grad), which vanishes exactly at constrained
    stationary points.
    """
    cache = _step_parts(problem, state.z, state.mu, state.x, None)
    return _kkt_from_parts(problem, state.z, state.mu, state.x, cache)


def richardson_mu(problem: InputOptProblem, z: np.ndarray, x: np.ndarray,
                  max_iter: int = 2000, tol: float = 1e-10,
                  counters: EvalCounters | None = None) -> np.ndarray:
    """Adjoint fixed point mu = (df/dz)^T mu + dloss/dz, from mu = 0."""
    xt = problem.total_input(x)
    grad_loss = loss_grad_z(problem.loss, problem.head, z)
    mu = np.zeros(problem.n)
    for _ in range(max_iter):
        mu_new = layer_vjp_z(problem.layer, z, xt, mu, counters) + grad_loss
        if np.linalg.norm(mu_new - mu) <= tol:
            return mu_new
        mu = mu_new
    raise NoConvergence(f"adjoint iteration did not reach {tol} in {max_iter} steps")


class _AugmentedMap:
    """Flat-vector view of the augmented update, with cached diagnostics."""

    def __init__(self, problem: InputOptProblem, damping: Damping,
                 counters: EvalCounters):
        self.problem = problem
        self.damping = damping
        self.counters = counters
        self.iteration = 0
        self._cache: _StepCache | None = None

    def __call__(self, v: np.ndarray) -> np.ndarray:
        n, d = self.problem.n, self.problem.var_dim
        z, mu, x = v[:n], v[n:2 * n], v[2 * n:]
        cache = _step_parts(self.problem, z, mu, x, self.counters)
        alpha_x = self.damping.alpha_x_at(self.iteration)
        self.iteration += 1
        self._cache = cache
        state = _apply_damping(self.problem, AugmentedState(z, mu, x),
                               cache, self.damping, alpha_x)
        return state.pack()

    def diagnostics(self, v: np.ndarray, fv: np.ndarray):
        n = self.problem.n
        z, mu, x = v[:n], v[n:2 * n], v[2 * n:]
        cost = loss_eval(self.problem.loss, self.problem.head, z)
        kkt = _kkt_from_parts(self.problem, z, mu, x, self._cache)
        return cost, kkt.norm

    def post_update(self, v: np.ndarray) -> np.ndarray:
        # extrapolation can leave the constraint set; re-project the x block
        if self.problem.constraint.kind == UNCONSTRAINED:
            return v
        n = self.problem.n
        out = v.copy()
        out[2 * n:] = project(self.problem.constraint, v[2 * n:])
        return out


_SOLVERS = {"naive": iterate_naive, "anderson": anderson}


def jiio_solve(problem: InputOptProblem, init="zeros",
               damping: Damping | None = None,
               solver_cfg: SolverConfig | None = None,
               selection_c: float = 10.0,
               counters: EvalCounters | None = None):
    """Solve the joint inference and input optimization problem.

    Runs the configured solver on the augmented update map, recording
    inner cost and KKT norm every iteration, then returns the selected
    iterate (least cost among near-minimal KKT norm) together with the
    full trace.  Running out of iterations is not an error; callers
    inspect the trace.
    """
    damping = damping or Damping()
    cfg = solver_cfg or SolverConfig()
    counters = counters if counters is not None else EvalCounters()
    if init == "zeros":
        state0 = problem.zero_state()
    elif isinstance(init, AugmentedState):
        state0 = init
    else:
        raise ValueError("init must be 'zeros' or an AugmentedState")
    state0 = AugmentedState(state0.z, state0.mu,
                            project(problem.constraint, state0.x))
    fmap = _AugmentedMap(problem, damping, counters)
    v0 = state0.pack()
    if cfg.method == "broyden":
        def residual_map(v):
            return fmap(v) - v
        trace = broyden(residual_map, v0, cfg, counters=counters,
                        diagnostics=fmap.diagnostics,
                        post_update=fmap.post_update)
    else:
        solver = _SOLVERS[cfg.method]
        trace = solver(fmap, v0, cfg, counters=counters,
                       diagnostics=fmap.diagnostics,
                       post_update=fmap.post_update)
    idx = select_iterate(trace, feasibility_factor=selection_c)
    best = AugmentedState.unpack(trace.iterates[idx], problem.n, problem.var_dim)
    return best, trace

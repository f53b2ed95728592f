"""Parameter gradients through the solved joint system.

Two routes to d(outer loss)/d(theta) at a solved state v* = (z*, mu*, x*):

* the reuse shortcut, valid when the outer loss is the inner loss or its
  negation: the converged dual already is the adjoint, so the layer
  gradient is just mu*^T df/dtheta plus the direct head term;
* the general route for any outer loss: solve the transposed linear
  system of the KKT Jacobian for the adjoint u, then contract u against
  the theta derivative of the KKT residual.

Also here: the Hutchinson squared-Jacobian-norm regularizer with its
analytic parameter gradient, and a finite-difference gradient checker.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .augmented import AugmentedState, InputOptProblem
from .errors import DimensionMismatch, DimensionTooLarge
from .layers import (SQUARED_ERROR, EquilibriumLayer, InnerLoss, OutputHead,
                     _activation_diags, _softmax, layer_jac_dense,
                     layer_second_vjp, layer_vjp_theta, loss_eval,
                     loss_grad_head, loss_grad_z, loss_hess_z)
from .linalg import solve_dense
from .rng import SeededRng

SAME_AS_INNER = "same"
NEG_OF_INNER = "neg"
CUSTOM = "custom"

_DENSE_LIMIT = 600


@dataclass
class ThetaGradient:
    """Gradient over (W, U, b) and, when a head participates, (C, d)."""

    W: np.ndarray
    U: np.ndarray
    b: np.ndarray
    C: np.ndarray | None = None
    d: np.ndarray | None = None

    def items(self):
        for name in ("W", "U", "b", "C", "d"):
            arr = getattr(self, name)
            if arr is not None:
                yield name, arr

    def scaled(self, s: float) -> "ThetaGradient":
        def f(a):
            return None if a is None else s * a
        return ThetaGradient(s * self.W, s * self.U, s * self.b,
                             f(self.C), f(self.d))

    def add(self, other: "ThetaGradient") -> "ThetaGradient":
        def f(a, b):
            if a is None:
                return None if b is None else b.copy()
            return a if b is None else a + b
        return ThetaGradient(self.W + other.W, self.U + other.U,
                             self.b + other.b, f(self.C, other.C),
                             f(self.d, other.d))


@dataclass(frozen=True)
class OuterLoss:
    """Outer objective evaluated at the solved joint state.

    ``same`` and ``neg`` reference the problem's inner loss exactly;
    ``custom`` carries its own head and loss (the head may be the
    problem's own head object, in which case its parameters receive the
    direct gradient term).
    """

    kind: str = SAME_AS_INNER
    head: OutputHead | None = None
    loss: InnerLoss | None = None

    def __post_init__(self):
        if self.kind not in (SAME_AS_INNER, NEG_OF_INNER, CUSTOM):
            raise ValueError(f"unknown outer loss kind {self.kind!r}")
        if self.kind == CUSTOM and (self.head is None or self.loss is None):
            raise ValueError("custom outer loss needs a head and a loss")

    def resolve(self, problem: InputOptProblem):
        if self.kind == SAME_AS_INNER:
            return problem.head, problem.loss, 1.0
        if self.kind == NEG_OF_INNER:
            return problem.head, problem.loss, -1.0
        return self.head, self.loss, 1.0

    def value(self, problem: InputOptProblem, state: AugmentedState) -> float:
        head, loss, sign = self.resolve(problem)
        return sign * loss_eval(loss, head, state.z)

    def grad_z(self, problem: InputOptProblem, state: AugmentedState) -> np.ndarray:
        head, loss, sign = self.resolve(problem)
        return sign * loss_grad_z(loss, head, state.z)


def grad_theta_reuse(problem: InputOptProblem, state: AugmentedState,
                     outer: str = SAME_AS_INNER) -> ThetaGradient:
    """Outer gradient by reusing the converged dual as the adjoint.

    Valid when the outer loss equals the inner loss (``same``) or its
    negation (``neg``); accuracy degrades smoothly with the KKT residual
    of the supplied state.  The direct head-parameter term of the loss is
    included, since an affine head contributes no signal through mu alone.
    """
    if outer not in (SAME_AS_INNER, NEG_OF_INNER):
        raise ValueError("grad_theta_reuse supports 'same' or 'neg' outer losses")
    xt = problem.total_input(state.x)
    gW, gU, gb = layer_vjp_theta(problem.layer, state.z, xt, state.mu)
    gC, gd = loss_grad_head(problem.loss, problem.head, state.z)
    grad = ThetaGradient(gW, gU, gb, gC, gd)
    return grad.scaled(-1.0) if outer == NEG_OF_INNER else grad


def assemble_kkt_jacobian(problem: InputOptProblem,
                          state: AugmentedState) -> np.ndarray:
    """Dense Jacobian of the KKT residual, blocks ordered (z, mu, x).

    Only defined for the unconstrained residual form; constrained
    problems at interior solutions reduce to the same matrix.
    """
    n, d = problem.n, problem.var_dim
    if 2 * n + d > _DENSE_LIMIT:
        raise DimensionTooLarge(f"dense KKT assembly capped at {_DENSE_LIMIT}")
    z, mu, x = state.z, state.mu, state.x
    xt = problem.total_input(x)
    E = problem.input_embed
    Jz, Jx = layer_jac_dense(problem.layer, z, xt)
    if E is not None:
        Jx = Jx @ E
    Szz, Szx, Sxz, Sxx = layer_second_vjp(problem.layer, z, xt, mu)
    if E is not None:
        Szx = Szx @ E
        Sxz = E.T @ Sxz
        Sxx = E.T @ Sxx @ E
    H = loss_hess_z(problem.loss, problem.head, z)
    K = np.zeros((2 * n + d, 2 * n + d))
    K[:n, :n] = Jz - np.eye(n)
    K[:n, 2 * n:] = Jx
    K[n:2 * n, :n] = H + Szz
    K[n:2 * n, n:2 * n] = Jz.T - np.eye(n)
    K[n:2 * n, 2 * n:] = Szx
    K[2 * n:, :n] = Sxz
    K[2 * n:, n:2 * n] = Jx.T
    K[2 * n:, 2 * n:] = Sxx
    return K


def _loss_head_mu_contract(loss: InnerLoss, head: OutputHead, z, u_mu):
    """Contract u_mu against the head-parameter derivative of dloss/dz."""
    h = head(z)
    if loss.base_kind() == SQUARED_ERROR:
        r = loss.target - h
        G = loss.operator_matrix
        if G is not None:
            GG = G.T @ G
            gr, gCu = GG @ r, GG @ (head.C @ u_mu)
        else:
            gr, gCu = r, head.C @ u_mu
        gC = -2.0 * np.outer(gr, u_mu) + 2.0 * np.outer(gCu, z)
        gd = 2.0 * gCu
    else:
        sigma = _softmax(h)
        Js = np.diag(sigma) - np.outer(sigma, sigma)
        resid = sigma.copy()
        resid[loss.target] -= 1.0
        gC = np.outer(resid, u_mu) + np.outer(Js @ (head.C @ u_mu), z)
        gd = Js @ (head.C @ u_mu)
    if loss.negated:
        return -gC, -gd
    return gC, gd


def _kkt_theta_contract(problem: InputOptProblem, state: AugmentedState,
                        u: np.ndarray) -> ThetaGradient:
    """u^T dK/dtheta assembled analytically for both layer kinds."""
    n, d = problem.n, problem.var_dim
    z, mu, x = state.z, state.mu, state.x
    xt = problem.total_input(x)
    u_z, u_mu, u_x = u[:n], u[n:2 * n], u[2 * n:]
    ue = u_x if problem.input_embed is None else problem.input_embed @ u_x
    layer = problem.layer
    W, U = layer.params.W, layer.params.U
    s, sp = _activation_diags(layer, z, xt)
    # r_z rows: u_z^T d f / d theta
    gW, gU, gb = layer_vjp_theta(layer, z, xt, u_z)
    # r_mu rows: derivative of W^T (s o mu) in (W, U, b)
    q = mu * sp * (W @ u_mu)
    gW = gW + np.outer(s * mu, u_mu) + np.outer(q, z)
    gU = gU + np.outer(q, xt)
    gb = gb + q
    # r_mu rows: head parameters inside dloss/dz
    gC, gd = _loss_head_mu_contract(problem.loss, problem.head, z, u_mu)
    # r_x rows: derivative of U^T (s o mu) in (W, U, b)
    pq = mu * sp * (U @ ue)
    gU = gU + np.outer(s * mu, ue) + np.outer(pq, xt)
    gW = gW + np.outer(pq, z)
    gb = gb + pq
    return ThetaGradient(gW, gU, gb, gC, gd)


def grad_theta_general(problem: InputOptProblem, state: AugmentedState,
                       outer: OuterLoss | str = SAME_AS_INNER) -> ThetaGradient:
    """Outer gradient through the transposed KKT linear system.

    Solves (dK/dv)^T u = -(d outer / d v*)^T, contracts u against
    dK/dtheta, and adds the direct head-parameter term of the outer loss.
    Raises SingularMatrix at degenerate KKT points.
    """
    if isinstance(outer, str):
        outer = OuterLoss(outer)
    n, d = problem.n, problem.var_dim
    gz = outer.grad_z(problem, state)
    rhs = -np.concatenate([gz, np.zeros(n), np.zeros(d)])
    K = assemble_kkt_jacobian(problem, state)
    u = solve_dense(K.T, rhs)
    grad = _kkt_theta_contract(problem, state, u)
    head, loss, sign = outer.resolve(problem)
    if head is problem.head:
        gC, gd = loss_grad_head(loss, head, state.z)
        grad = grad.add(ThetaGradient(np.zeros_like(grad.W), np.zeros_like(grad.U),
                                      np.zeros_like(grad.b), sign * gC, sign * gd))
    return grad


def hutchinson_reg(layer: EquilibriumLayer, z: np.ndarray, x: np.ndarray,
                   rng: SeededRng | None = None, samples: int = 2,
                   eps: list | None = None):
    """Stochastic estimate of ||df/dz||_F^2 with its analytic theta gradient.

    estimate = mean_i ||(df/dz) eps_i||^2 over standard-normal probes,
    an unbiased estimate of the squared Frobenius norm (the trace of
    J^T J).  Pass ``eps`` to freeze the probes, e.g. for gradient checks.
    """
    if eps is None:
        if rng is None or samples < 1:
            raise ValueError("need an rng and samples >= 1, or explicit eps")
        eps = [rng.standard_normal(layer.n) for _ in range(samples)]
    W, U = layer.params.W, layer.params.U
    s, sp = _activation_diags(layer, z, x)
    est = 0.0
    gW = np.zeros_like(W)
    gU = np.zeros_like(U)
    gb = np.zeros(layer.n)
    for e in eps:
        w = W @ e
        jv = s * w
        est += float(jv @ jv)
        u_vec = 2.0 * s * sp * w * w
        gW += 2.0 * np.outer(s * s * w, e) + np.outer(u_vec, z)
        gU += np.outer(u_vec, x)
        gb += u_vec
    k = float(len(eps))
    return est / k, ThetaGradient(gW / k, gU / k, gb / k)


def fd_gradcheck(fn, params: dict, analytic: dict, step: float = 1e-5) -> float:
    """Max relative error of ``analytic`` against central differences of ``fn``.

    ``fn`` maps the (mutated in place, then restored) parameter dict to a
    scalar.  The per-coordinate denominator is
    max(|analytic|, |fd|, 1e-8).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    worst = 0.0
    for name, arr in params.items():
        grad = np.asarray(analytic[name], dtype=np.float64)
        if grad.shape != np.shape(arr):
            raise DimensionMismatch(f"gradient shape mismatch for {name!r}")
        it = np.nditer(arr, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            orig = arr[idx]
            arr[idx] = orig + step
            f_plus = fn(params)
            arr[idx] = orig - step
            f_minus = fn(params)
            arr[idx] = orig
            fd = (f_plus - f_minus) / (2.0 * step)
            denom = max(abs(grad[idx]), abs(fd), 1e-8)
            worst = max(worst, abs(grad[idx] - fd) / denom)
            it.iternext()
    return worst

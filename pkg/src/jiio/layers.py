"""Input-injected equilibrium layers, output heads, and inner losses.

A layer maps (z, x) -> z' and is either affine (``linear``) or a tanh
saturation of the same affine form (``tanh``).  Both are kept
gamma-contractive in z via spectral rescaling of the state weight, which
guarantees a unique forward fixed point.  Alongside evaluation, the module
provides the first- and second-order derivative contractions (VJPs, JVP,
dense Jacobians, and derivatives *of* the VJPs) that the augmented system
and its backward pass consume.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import DimensionMismatch, ZeroWeight
from .linalg import spectral_norm

LINEAR = "linear"
TANH = "tanh"

SQUARED_ERROR = "squared_error"
NEG_SQUARED_ERROR = "neg_squared_error"
CROSS_ENTROPY = "cross_entropy"
NEG_CROSS_ENTROPY = "neg_cross_entropy"


@dataclass
class EvalCounters:
    """Cumulative layer-evaluation counters shared across a run."""

    f_evals: int = 0
    vjp_evals: int = 0

    def total(self) -> int:
        return self.f_evals + self.vjp_evals


@dataclass(frozen=True)
class LayerParams:
    W: np.ndarray          # n x n state weight
    U: np.ndarray          # n x d input injection
    b: np.ndarray          # length-n bias
    gamma: float = 0.9     # contraction target in (0, 1)

    def __post_init__(self):
        W = np.asarray(self.W, dtype=np.float64)
        U = np.asarray(self.U, dtype=np.float64)
        b = np.asarray(self.b, dtype=np.float64)
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "U", U)
        object.__setattr__(self, "b", b)
        n = W.shape[0]
        if W.shape != (n, n) or U.shape[0] != n or b.shape != (n,):
            raise DimensionMismatch(
                f"inconsistent parameter shapes W{W.shape} U{U.shape} b{b.shape}")
        for name, arr in (("W", W), ("U", U), ("b", b)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains NaN or Inf")


@dataclass(frozen=True)
class EquilibriumLayer:
    kind: str
    params: LayerParams

    def __post_init__(self):
        if self.kind not in (LINEAR, TANH):
            raise ValueError(f"unknown layer kind {self.kind!r}")

    @property
    def n(self) -> int:
        return self.params.W.shape[0]

    @property
    def d(self) -> int:
        return self.params.U.shape[1]


@dataclass(frozen=True)
class OutputHead:
    """Affine readout h(z) = C z + d."""

    C: np.ndarray
    d: np.ndarray

    def __post_init__(self):
        C = np.asarray(self.C, dtype=np.float64)
        d = np.asarray(self.d, dtype=np.float64)
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "d", d)
        if C.ndim != 2 or d.shape != (C.shape[0],):
            raise DimensionMismatch(f"head shapes C{C.shape} d{d.shape}")

    @property
    def p(self) -> int:
        return self.C.shape[0]

    def __call__(self, z: np.ndarray) -> np.ndarray:
        return self.C @ z + self.d


@dataclass(frozen=True)
class InnerLoss:
    """Loss on the equilibrium state, evaluated through an output head.

    ``squared_error`` compares head output against the target, optionally
    through a measurement operator (its matrix is supplied by the tasks
    layer as ``operator_matrix``).  ``cross_entropy`` is softmax negative
    log-likelihood against an integer class target.  The ``neg_*`` kinds
    are exact negations, used as the inner objective of adversarial
    problems.
    """

    kind: str
    target: np.ndarray | int
    operator_matrix: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in (SQUARED_ERROR, NEG_SQUARED_ERROR,
                             CROSS_ENTROPY, NEG_CROSS_ENTROPY):
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if self.kind in (CROSS_ENTROPY, NEG_CROSS_ENTROPY):
            object.__setattr__(self, "target", int(self.target))
        else:
            y = np.asarray(self.target, dtype=np.float64)
            if not np.all(np.isfinite(y)):
                raise ValueError("loss target contains NaN or Inf")
            object.__setattr__(self, "target", y)
        if self.operator_matrix is not None:
            object.__setattr__(self, "operator_matrix",
                               np.asarray(self.operator_matrix, dtype=np.float64))

    @property
    def negated(self) -> bool:
        return self.kind in (NEG_SQUARED_ERROR, NEG_CROSS_ENTROPY)

    def base_kind(self) -> str:
        return {NEG_SQUARED_ERROR: SQUARED_ERROR,
                NEG_CROSS_ENTROPY: CROSS_ENTROPY}.get(self.kind, self.kind)

    def negation(self) -> "InnerLoss":
        flipped = {SQUARED_ERROR: NEG_SQUARED_ERROR,
                   NEG_SQUARED_ERROR: SQUARED_ERROR,
                   CROSS_ENTROPY: NEG_CROSS_ENTROPY,
                   NEG_CROSS_ENTROPY: CROSS_ENTROPY}[self.kind]
        return replace(self, kind=flipped)


# ---------------------------------------------------------------------------
# layer evaluation and derivatives
# ---------------------------------------------------------------------------

def _preactivation(layer: EquilibriumLayer, z: np.ndarray, x: np.ndarray) -> np.ndarray:
    p = layer.params
    if z.shape != (layer.n,) or x.shape != (layer.d,):
        raise DimensionMismatch(
            f"expected z({layer.n},) x({layer.d},), got z{z.shape} x{x.shape}")
    return p.W @ z + p.U @ x + p.b


def _activation_diags(layer, z, x):
    """Return (s, s') with s = diag of df/da and s' its derivative in a."""
    a = _preactivation(layer, z, x)
    if layer.kind == LINEAR:
        return np.ones_like(a), np.zeros_like(a)
    t = np.tanh(a)
    s = 1.0 - t * t
    return s, -2.0 * t * s


def layer_eval(layer: EquilibriumLayer, z: np.ndarray, x: np.ndarray,
               counters: EvalCounters | None = None) -> np.ndarray:
    """Apply the layer once: f(z, x)."""
    a = _preactivation(layer, z, x)
    if counters is not None:
        counters.f_evals += 1
    return a if layer.kind == LINEAR else np.tanh(a)


def layer_vjp_z(layer, z, x, w, counters: EvalCounters | None = None) -> np.ndarray:
    """(df/dz)^T w."""
    if w.shape != (layer.n,):
        raise DimensionMismatch(f"w must have length {layer.n}")
    s, _ = _activation_diags(layer, z, x)
    if counters is not None:
        counters.vjp_evals += 1
    return layer.params.W.T @ (s * w)


def layer_vjp_x(layer, z, x, w, counters: EvalCounters | None = None) -> np.ndarray:
    """(df/dx)^T w."""
    if w.shape != (layer.n,):
        raise DimensionMismatch(f"w must have length {layer.n}")
    s, _ = _activation_diags(layer, z, x)
    if counters is not None:
        counters.vjp_evals += 1
    return layer.params.U.T @ (s * w)


def layer_vjp_theta(layer, z, x, w, counters: EvalCounters | None = None):
    """w^T df/dtheta for theta = (W, U, b); returns gradients shaped like them."""
    if w.shape != (layer.n,):
        raise DimensionMismatch(f"w must have length {layer.n}")
    s, _ = _activation_diags(layer, z, x)
    dw = s * w
    if counters is not None:
        counters.vjp_evals += 1
    return np.outer(dw, z), np.outer(dw, x), dw


def layer_jvp_z(layer, z, x, v, counters: EvalCounters | None = None) -> np.ndarray:
    """(df/dz) v, forward-mode."""
    if v.shape != (layer.n,):
        raise DimensionMismatch(f"v must have length {layer.n}")
    s, _ = _activation_diags(layer, z, x)
    if counters is not None:
        counters.vjp_evals += 1
    return s * (layer.params.W @ v)


def layer_jac_dense(layer, z, x):
    """Dense Jacobians (df/dz, df/dx) at (z, x)."""
    s, _ = _activation_diags(layer, z, x)
    return s[:, None] * layer.params.W, s[:, None] * layer.params.U


def layer_second_vjp(layer, z, x, mu):
    """Derivatives of the mu-contractions of both first-order VJPs.

    Returns the four dense blocks
        d/dz[(df/dz)^T mu],  d/dx[(df/dz)^T mu],
        d/dz[(df/dx)^T mu],  d/dx[(df/dx)^T mu],
    which vanish identically for the linear kind.
    """
    if mu.shape != (layer.n,):
        raise DimensionMismatch(f"mu must have length {layer.n}")
    p = layer.params
    n, d = layer.n, layer.d
    if layer.kind == LINEAR:
        return (np.zeros((n, n)), np.zeros((n, d)),
                np.zeros((d, n)), np.zeros((d, d)))
    _, sp = _activation_diags(layer, z, x)
    mid = (mu * sp)[:, None]
    WtM = p.W.T * mid.T     # W^T diag(mu*s') as (n, n)
    UtM = p.U.T * mid.T
    return (WtM @ p.W, WtM @ p.U, UtM @ p.W, UtM @ p.U)


def contraction_rescale(params: LayerParams, gamma: float) -> LayerParams:
    """Rescale W so its spectral norm equals gamma, leaving U and b alone."""
    if not 0.0 < gamma < 1.0:
        raise ValueError("gamma must lie in (0, 1)")
    if not np.any(params.W):
        raise ZeroWeight("cannot rescale an all-zero state weight")
    sigma = spectral_norm(params.W, max_iter=5000, tol=1e-10)
    return replace(params, W=(gamma / sigma) * params.W, gamma=gamma)


# ---------------------------------------------------------------------------
# inner losses
# ---------------------------------------------------------------------------

def _softmax(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - logits.max())
    return e / e.sum()


def _check_loss_dims(loss: InnerLoss, head: OutputHead):
    if loss.base_kind() == SQUARED_ERROR:
        if np.shape(loss.target) != (head.p,):
            raise DimensionMismatch(
                f"target length {np.shape(loss.target)} vs head output {head.p}")
        if loss.operator_matrix is not None and loss.operator_matrix.shape != (head.p, head.p):
            raise DimensionMismatch("operator matrix must be p x p")
    else:
        if not 0 <= loss.target < head.p:
            raise DimensionMismatch(f"class target {loss.target} out of range for p={head.p}")


def loss_eval(loss: InnerLoss, head: OutputHead, z: np.ndarray) -> float:
    _check_loss_dims(loss, head)
    h = head(z)
    if loss.base_kind() == SQUARED_ERROR:
        r = loss.target - h
        if loss.operator_matrix is not None:
            r = loss.operator_matrix @ r
        val = float(r @ r)
    else:
        logits = h - h.max()
        val = float(np.log(np.exp(logits).sum()) - logits[loss.target])
    return -val if loss.negated else val


def loss_grad_z(loss: InnerLoss, head: OutputHead, z: np.ndarray) -> np.ndarray:
    _check_loss_dims(loss, head)
    h = head(z)
    if loss.base_kind() == SQUARED_ERROR:
        r = loss.target - h
        if loss.operator_matrix is not None:
            M = loss.operator_matrix
            g = -2.0 * head.C.T @ (M.T @ (M @ r))
        else:
            g = -2.0 * head.C.T @ r
    else:
        sigma = _softmax(h)
        sigma[loss.target] -= 1.0
        g = head.C.T @ sigma
    return -g if loss.negated else g


def loss_hess_z(loss: InnerLoss, head: OutputHead, z: np.ndarray) -> np.ndarray:
    _check_loss_dims(loss, head)
    if loss.base_kind() == SQUARED_ERROR:
        if loss.operator_matrix is not None:
            MC = loss.operator_matrix @ head.C
            H = 2.0 * MC.T @ MC
        else:
            H = 2.0 * head.C.T @ head.C
    else:
        # exact for an affine head: Gauss-Newton form of the softmax NLL
        sigma = _softmax(head(z))
        J = np.diag(sigma) - np.outer(sigma, sigma)
        H = head.C.T @ J @ head.C
    return -H if loss.negated else H


def loss_grad_head(loss: InnerLoss, head: OutputHead, z: np.ndarray):
    """Direct gradient of the loss value with respect to (C, d) at fixed z."""
    _check_loss_dims(loss, head)
    h = head(z)
    if loss.base_kind() == SQUARED_ERROR:
        r = loss.target - h
        if loss.operator_matrix is not None:
            M = loss.operator_matrix
            gr = M.T @ (M @ r)
        else:
            gr = r
        gC = -2.0 * np.outer(gr, z)
        gd = -2.0 * gr
    else:
        sigma = _softmax(h)
        sigma[loss.target] -= 1.0
        gC = np.outer(sigma, z)
        gd = sigma
    if loss.negated:
        return -gC, -gd
    return gC, gd

"""Shared task-level data types: models, datasets, measurement operators."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DimensionMismatch
from ..layers import (LINEAR, TANH, EquilibriumLayer, LayerParams, OutputHead,
                      contraction_rescale)
from ..rng import SeededRng

IDENTITY = "identity"
MASK = "mask"
NOISY_IDENTITY = "noisy_identity"


@dataclass(frozen=True)
class MeasurementOperator:
    """The corruption map of an inverse problem.

    ``mask`` zeroes a rectangular pixel window of an image; the noisy
    variant is the identity operator whose sigma only drives data
    corruption, never the loss.
    """

    kind: str = IDENTITY
    image_shape: tuple = (8, 8)
    origin: tuple = (0, 0)
    size: tuple = (0, 0)
    sigma: float = 0.0

    def __post_init__(self):
        if self.kind not in (IDENTITY, MASK, NOISY_IDENTITY):
            raise ValueError(f"unknown operator kind {self.kind!r}")
        if self.kind == MASK:
            r0, c0 = self.origin
            h, w = self.size
            rows, cols = self.image_shape
            if not (0 <= r0 and r0 + h <= rows and 0 <= c0 and c0 + w <= cols):
                raise ValueError("mask window out of bounds")

    @property
    def dim(self) -> int:
        return int(np.prod(self.image_shape))

    def mask_indices(self) -> np.ndarray:
        """Flat indices of the zeroed window (empty unless kind is mask)."""
        if self.kind != MASK:
            return np.empty(0, dtype=int)
        r0, c0 = self.origin
        h, w = self.size
        rows = np.arange(r0, r0 + h)
        cols = np.arange(c0, c0 + w)
        grid = rows[:, None] * self.image_shape[1] + cols[None, :]
        return grid.ravel()

    def as_matrix(self) -> np.ndarray:
        diag = np.ones(self.dim)
        diag[self.mask_indices()] = 0.0
        return np.diag(diag)

    def apply(self, y: np.ndarray) -> np.ndarray:
        if y.shape != (self.dim,):
            raise DimensionMismatch(f"operator expects length {self.dim}")
        if self.kind != MASK:
            return y.copy()
        out = y.copy()
        out[self.mask_indices()] = 0.0
        return out

    def corrupt(self, y: np.ndarray, rng: SeededRng | None = None) -> np.ndarray:
        """Produce the observed data: A y, plus noise for the noisy kind."""
        out = self.apply(y)
        if self.kind == NOISY_IDENTITY:
            if rng is None:
                raise ValueError("noisy corruption needs an rng")
            out = out + self.sigma * rng.standard_normal(y.shape)
        return out


@dataclass
class Dataset:
    items: np.ndarray                    # N x D
    labels: np.ndarray | None = None
    provenance: str = "synthetic"

    def __post_init__(self):
        self.items = np.asarray(self.items, dtype=np.float64)
        if self.items.ndim != 2:
            raise DimensionMismatch("items must be a 2-D array")
        if self.labels is not None:
            self.labels = np.asarray(self.labels)
            if len(self.labels) != len(self.items):
                raise DimensionMismatch("labels length must match items")

    def __len__(self) -> int:
        return len(self.items)

    @property
    def dim(self) -> int:
        return self.items.shape[1]


@dataclass
class MetaTask:
    """Few-shot task: disjoint support and query example sets sharing a
    latent task vector of the given dimension."""

    support_x: np.ndarray       # K x feat
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    task_dim: int

    @property
    def k(self) -> int:
        return len(self.support_x)


@dataclass
class Model:
    """Equilibrium layer plus affine readout; the unit all tasks train."""

    layer: EquilibriumLayer
    head: OutputHead

    @property
    def params(self) -> dict:
        return {"W": self.layer.params.W, "U": self.layer.params.U,
                "b": self.layer.params.b, "C": self.head.C, "d": self.head.d}

    def with_params(self, params: dict) -> "Model":
        lp = LayerParams(params["W"], params["U"], params["b"],
                         self.layer.params.gamma)
        return Model(EquilibriumLayer(self.layer.kind, lp),
                     OutputHead(params["C"], params["d"]))

    def rescaled(self) -> "Model":
        lp = contraction_rescale(self.layer.params, self.layer.params.gamma)
        return Model(EquilibriumLayer(self.layer.kind, lp), self.head)


def init_model(kind: str, state_dim: int, input_dim: int, output_dim: int,
               gamma: float, rng: SeededRng) -> Model:
    """Randomly initialized model with a gamma-contractive state weight."""
    if kind not in (LINEAR, TANH):
        raise ValueError(f"unknown model kind {kind!r}")
    W = rng.standard_normal((state_dim, state_dim))
    U = rng.standard_normal((state_dim, input_dim)) / np.sqrt(input_dim)
    b = 0.1 * rng.standard_normal(state_dim)
    C = rng.standard_normal((output_dim, state_dim)) / np.sqrt(state_dim)
    d = np.zeros(output_dim)
    params = contraction_rescale(LayerParams(W, U, b, gamma), gamma)
    return Model(EquilibriumLayer(kind, params), OutputHead(C, d))


def psnr(reference: np.ndarray, estimate: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for [0, 1]-ranged data, capped at 99."""
    reference = np.asarray(reference, dtype=np.float64)
    estimate = np.asarray(estimate, dtype=np.float64)
    if reference.shape != estimate.shape:
        raise DimensionMismatch("psnr operands must share a shape")
    mse = float(np.mean((reference - estimate) ** 2))
    if mse < 1e-10:
        return 99.0
    return 10.0 * np.log10(1.0 / mse)

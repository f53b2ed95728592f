"""Seeded synthetic corpora: blob images, spiral classes, meta tasks."""

from __future__ import annotations

import numpy as np

from .baselines import forward_solve
from .rng import SeededRng
from .tasks.data import Dataset, MetaTask, Model, init_model
from .tasks.meta import example_problem

BLOB_SHAPE = (8, 8)


def _blob_image(rng: SeededRng) -> np.ndarray:
    rows, cols = BLOB_SHAPE
    rr, cc = np.mgrid[0:rows, 0:cols]
    img = np.zeros(BLOB_SHAPE)
    for _ in range(2):
        cr = rng.uniform(1.0, rows - 2.0)
        ccol = rng.uniform(1.0, cols - 2.0)
        amp = rng.uniform(0.5, 1.0)
        width = rng.uniform(0.8, 1.6)
        img += amp * np.exp(-((rr - cr) ** 2 + (cc - ccol) ** 2) / (2 * width ** 2))
    return np.clip(img, 0.0, 1.0).ravel()


def _spiral_points(rng: SeededRng, count: int):
    points = np.empty((count, 2))
    labels = np.empty(count, dtype=np.int64)
    for i in range(count):
        label = int(rng.integers(0, 2))
        t = rng.uniform(0.25, 1.0)
        angle = 3.0 * np.pi * t + np.pi * label
        r = t
        noise = 0.04 * rng.standard_normal(2)
        points[i] = [r * np.cos(angle) + noise[0], r * np.sin(angle) + noise[1]]
        labels[i] = label
    return points, labels


def tasks_from_model(model: Model, count: int, shots: int, task_dim: int,
                     rng: SeededRng, noise: float = 0.0) -> list[MetaTask]:
    """Meta tasks whose targets the given model itself generates from a
    planted task vector, so every task is realizable by construction."""
    feat_dim = model.layer.d - task_dim
    tasks = []
    for _ in range(count):
        x_true = rng.standard_normal(task_dim)
        sx = rng.standard_normal((2 * shots, feat_dim))
        ys = np.empty((2 * shots, model.head.p))
        for k in range(2 * shots):
            problem = example_problem(model, sx[k], np.zeros(model.head.p),
                                      task_dim)
            z_star, _ = forward_solve(model.layer, problem.total_input(x_true))
            ys[k] = model.head(z_star)
            if noise > 0:
                ys[k] += noise * rng.standard_normal(model.head.p)
        tasks.append(MetaTask(sx[:shots], ys[:shots], sx[shots:], ys[shots:],
                              task_dim))
    return tasks


def gen_synthetic(kind: str, count: int, seed: int, *, task_dim: int = 4,
                  feat_dim: int = 4, shots: int = 3, state_dim: int = 8,
                  out_dim: int = 3):
    """Deterministic synthetic data of the requested kind.

    blobs: 8x8 images with two Gaussian bumps, pixel range within [0, 1].
    spirals: two interleaved 2-D spiral arms with labels.
    linreal-tasks: meta tasks planted by a seeded linear generator model.
    """
    if count < 0:
        raise ValueError("count must be nonnegative")
    rng = SeededRng(seed)
    if kind == "blobs":
        items = np.stack([_blob_image(rng) for _ in range(count)]) \
            if count else np.empty((0, BLOB_SHAPE[0] * BLOB_SHAPE[1]))
        return Dataset(items, provenance="synthetic")
    if kind == "spirals":
        points, labels = _spiral_points(rng, count)
        return Dataset(points, labels=labels, provenance="synthetic")
    if kind == "linreal-tasks":
        generator = init_model("linear", state_dim, task_dim + feat_dim,
                               out_dim, 0.7, rng.spawn(1))
        return tasks_from_model(generator, count, shots, task_dim, rng.spawn(2))
    raise ValueError(f"unknown synthetic kind {kind!r}")

"""Centralized reference: least squares for ``Y = A U``, random instances, error metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .datamodel import IoDataset, Partition, unvec, vec

COND_LIMIT = 1e10


@dataclass(frozen=True)
class ReferenceModel:
    A_star: np.ndarray
    partition: Partition | None = None
    unique: bool = True

    def block(self, i: int) -> np.ndarray:
        return self.A_star[:, list(self.partition.input_rows[i])]

    def blocks(self) -> list[np.ndarray]:
        return [self.block(i) for i in range(self.partition.n_agents)]

    def x_blocks(self) -> list[np.ndarray]:
        return [vec(B) for B in self.blocks()]


def least_squares(dataset: IoDataset, partition: Partition | None = None) -> ReferenceModel:
    """Minimize ``||A U - Y||_F``.

    Solves the normal equations by Cholesky; falls back to the SVD
    pseudo-inverse (minimum-norm solution) when the Gram matrix is singular or
    its condition estimate exceeds ``COND_LIMIT``. ``unique`` is False when
    ``U`` lacks full row rank.
    """
    U, Y = dataset.U, dataset.Y
    G = U @ U.T
    unique = np.linalg.matrix_rank(U) == U.shape[0]
    A = None
    if unique and np.linalg.cond(G) <= COND_LIMIT:
        try:
            c = scipy.linalg.cho_factor(G)
            A = scipy.linalg.cho_solve(c, U @ Y.T).T
        except np.linalg.LinAlgError:
            A = None
    if A is None:
        A = Y @ np.linalg.pinv(U)
    return ReferenceModel(A, partition, bool(unique))


def generate_smallscale(seed: int, noise: float = 0.0, n_agents: int = 5,
                        input_sizes=(4, 5), output_sizes=(3, 4)):
    """Random networked linear system ``y = sum_i A_i u_i``.

    Returns ``(dataset, partition, reference)``. Agent block sizes are drawn
    uniformly from ``input_sizes`` / ``output_sizes``, entries of ``A`` and
    the inputs are standard normal, and ``T = 2 m``. Redraws ``U`` in the
    (probability zero) event that it is rank deficient.
    """
    rng = np.random.default_rng(seed)
    du = rng.choice(input_sizes, size=n_agents)
    dy = rng.choice(output_sizes, size=n_agents)
    partition = Partition.contiguous(du, dy)
    m, n = partition.m, partition.n
    T = 2 * m
    A = rng.standard_normal((n, m))
    while True:
        U = rng.standard_normal((m, T))
        if np.linalg.matrix_rank(U) == m:
            break
    Y = A @ U
    if noise:
        Y = Y + noise * rng.standard_normal(Y.shape)
    return IoDataset(U, Y), partition, ReferenceModel(A, partition)


def model_error(x_blocks, reference: ReferenceModel) -> tuple[float, np.ndarray]:
    """Entrywise ``|A_hat - A_star|`` and its max, ``A_hat`` rebuilt from ``vec`` blocks."""
    part = reference.partition
    if len(x_blocks) != part.n_agents:
        raise ValueError(f"{len(x_blocks)} blocks for {part.n_agents} agents")
    A_hat = np.zeros_like(reference.A_star)
    for x, du in zip(x_blocks, part.input_rows):
        x = np.asarray(x, dtype=float)
        if x.size != part.n * len(du):
            raise ValueError(f"block of length {x.size}, expected {part.n * len(du)}")
        A_hat[:, list(du)] = unvec(x, part.n)
    err = np.abs(A_hat - reference.A_star)
    return float(err.max()), err

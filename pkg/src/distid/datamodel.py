"""Identification data: partitions, data matrices, agent views and lifted blocks.

Index sets are 0-based internally. The text formats in :mod:`distid.textio` use
1-based indices.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

FeatureMap = Callable[[np.ndarray], np.ndarray]


def identity(v: np.ndarray) -> np.ndarray:
    return v


def square(v: np.ndarray) -> np.ndarray:
    return v * v


FEATURE_MAPS: dict[str, FeatureMap] = {"identity": identity, "square": square}


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Partition:
    """Disjoint split of input rows and output rows across agents."""

    m: int
    n: int
    input_rows: tuple[tuple[int, ...], ...]
    output_rows: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        ins = tuple(tuple(sorted(int(j) for j in s)) for s in self.input_rows)
        outs = tuple(tuple(sorted(int(j) for j in s)) for s in self.output_rows)
        object.__setattr__(self, "input_rows", ins)
        object.__setattr__(self, "output_rows", outs)
        if len(ins) != len(outs) or not ins:
            raise ValueError("input_rows and output_rows must list the same, nonzero number of agents")
        for name, sets, size in (("input", ins, self.m), ("output", outs, self.n)):
            if any(len(s) == 0 for s in sets):
                raise ValueError(f"every agent needs at least one {name} row")
            flat = [j for s in sets for j in s]
            if sorted(flat) != list(range(size)):
                raise ValueError(f"{name} rows must be disjoint and cover 0..{size - 1}")

    @property
    def n_agents(self) -> int:
        return len(self.input_rows)

    @classmethod
    def contiguous(cls, input_sizes: Sequence[int], output_sizes: Sequence[int]) -> "Partition":
        """Consecutive row ranges, agent 0 first."""
        def ranges(sizes):
            out, start = [], 0
            for s in sizes:
                out.append(tuple(range(start, start + int(s))))
                start += int(s)
            return out, start

        ins, m = ranges(input_sizes)
        outs, n = ranges(output_sizes)
        return cls(m, n, tuple(ins), tuple(outs))


@dataclass(frozen=True)
class IoDataset:
    U: np.ndarray
    Y: np.ndarray
    phi_u: str = "identity"
    phi_y: str = "identity"

    def __post_init__(self):
        U, Y = _freeze(self.U), _freeze(self.Y)
        if U.ndim != 2 or Y.ndim != 2:
            raise ValueError("U and Y must be 2-D")
        if U.shape[1] != Y.shape[1] or U.shape[1] < 1:
            raise ValueError(f"U and Y need the same positive column count, got {U.shape[1]} and {Y.shape[1]}")
        if not (np.all(np.isfinite(U)) and np.all(np.isfinite(Y))):
            raise ValueError("data matrices contain non-finite values")
        object.__setattr__(self, "U", U)
        object.__setattr__(self, "Y", Y)

    @property
    def m(self) -> int:
        return self.U.shape[0]

    @property
    def n(self) -> int:
        return self.Y.shape[0]

    @property
    def T(self) -> int:
        return self.U.shape[1]


@dataclass(frozen=True)
class AgentView:
    agent_id: int
    U_local: np.ndarray
    Y_local: np.ndarray


@dataclass(frozen=True)
class LiftedBlocks:
    """Per-agent lifted operator and scattered output vector.

    ``U_lift`` is the dense ``nT x n|D_u,i|`` matrix whose ``k``-th row block
    is ``[U(j,k) I_n for j in D_u,i]``. The solver uses the equivalent
    reshaped products :meth:`apply` / :meth:`adjoint`, which never touch the
    dense matrix.
    """

    agent_id: int
    n: int
    T: int
    U_local: np.ndarray
    U_lift: np.ndarray
    Y_lift: np.ndarray

    @property
    def x_len(self) -> int:
        return self.n * self.U_local.shape[0]

    @property
    def z_len(self) -> int:
        return self.n * self.T

    def apply(self, x: np.ndarray) -> np.ndarray:
        """``U_lift @ x``."""
        return (self.U_local.T @ x.reshape(-1, self.n)).ravel()

    def adjoint(self, z: np.ndarray) -> np.ndarray:
        """``U_lift.T @ z``."""
        return (self.U_local @ z.reshape(self.T, self.n)).ravel()


def build_dataset(samples, phi_u: str | FeatureMap = "identity",
                  phi_y: str | FeatureMap = "identity") -> IoDataset:
    """Stack ``(u(k), y(k))`` samples into ``U`` (m x T) and ``Y`` (n x T).

    Feature maps are given by name (see ``FEATURE_MAPS``) or as callables.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("need at least one sample")
    fu, name_u = _resolve_map(phi_u)
    fy, name_y = _resolve_map(phi_y)
    cols_u, cols_y = [], []
    m = n = None
    for k, (u, y) in enumerate(samples):
        u = np.atleast_1d(np.asarray(u, dtype=float))
        y = np.atleast_1d(np.asarray(y, dtype=float))
        if m is None:
            m, n = u.size, y.size
        elif u.size != m or y.size != n:
            raise ValueError(f"sample {k} has dimensions ({u.size}, {y.size}), expected ({m}, {n})")
        cols_u.append(np.asarray(fu(u), dtype=float))
        cols_y.append(np.asarray(fy(y), dtype=float))
    return IoDataset(np.column_stack(cols_u), np.column_stack(cols_y), name_u, name_y)


def _resolve_map(phi):
    if callable(phi):
        return phi, getattr(phi, "__name__", "custom")
    try:
        return FEATURE_MAPS[phi], phi
    except KeyError:
        raise ValueError(f"unknown feature map {phi!r}") from None


def split_views(dataset: IoDataset, partition: Partition) -> list[AgentView]:
    if (dataset.m, dataset.n) != (partition.m, partition.n):
        raise ValueError(
            f"partition is for m={partition.m}, n={partition.n}; dataset has m={dataset.m}, n={dataset.n}")
    views = []
    for i, (du, dy) in enumerate(zip(partition.input_rows, partition.output_rows)):
        views.append(AgentView(i, _freeze(dataset.U[list(du)]), _freeze(dataset.Y[list(dy)])))
    return views


def reassemble(views: Sequence[AgentView], partition: Partition) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of :func:`split_views`."""
    T = views[0].U_local.shape[1]
    U = np.empty((partition.m, T))
    Y = np.empty((partition.n, T))
    for v in views:
        U[list(partition.input_rows[v.agent_id])] = v.U_local
        Y[list(partition.output_rows[v.agent_id])] = v.Y_local
    return U, Y


def lift_agent_blocks(view: AgentView, partition: Partition) -> LiftedBlocks:
    i = view.agent_id
    du, dy = partition.input_rows[i], partition.output_rows[i]
    n = partition.n
    if view.U_local.shape[0] != len(du) or view.Y_local.shape[0] != len(dy):
        raise ValueError(f"view {i} row counts do not match the partition")
    T = view.U_local.shape[1]
    U_lift = np.kron(view.U_local.T, np.eye(n))
    Y_lift = np.zeros((T, n))
    Y_lift[:, list(dy)] = view.Y_local.T
    return LiftedBlocks(i, n, T, view.U_local, _freeze(U_lift), _freeze(Y_lift.ravel()))


def lift_all(views: Sequence[AgentView], partition: Partition) -> list[LiftedBlocks]:
    return [lift_agent_blocks(v, partition) for v in views]


def vec(A: np.ndarray) -> np.ndarray:
    """Column-major vectorization."""
    return np.asarray(A).ravel(order="F")


def unvec(x: np.ndarray, n: int) -> np.ndarray:
    return np.asarray(x).reshape(n, -1, order="F")


def assemble_global(blocks: Sequence[LiftedBlocks]) -> tuple[np.ndarray, np.ndarray]:
    """Dense ``(U_hat, Y_hat)``. Verification only; never used by agents."""
    rows = sum(b.z_len for b in blocks)
    cols = sum(b.x_len for b in blocks)
    U_hat = np.zeros((rows, cols))
    r = c = 0
    for b in blocks:
        U_hat[r:r + b.z_len, c:c + b.x_len] = b.U_lift
        r += b.z_len
        c += b.x_len
    return U_hat, np.concatenate([b.Y_lift for b in blocks])

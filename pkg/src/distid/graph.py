"""Communication graph, Laplacian actions and spectral bounds."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

PRESETS = ("ring", "path", "complete")


class PowerIterationError(RuntimeError):
    pass


@dataclass(frozen=True)
class CommGraph:
    n_nodes: int
    edges: frozenset[tuple[int, int]]
    laplacian: np.ndarray
    neighbors: tuple[tuple[int, ...], ...]

    @property
    def degrees(self) -> np.ndarray:
        return np.diag(self.laplacian).astype(int)

    def sorted_edges(self) -> list[tuple[int, int]]:
        return sorted(self.edges)


def laplacian(edges: Iterable[tuple[int, int]], n_nodes: int) -> CommGraph:
    """Build an undirected graph on nodes ``0..n_nodes-1``."""
    if n_nodes < 1:
        raise ValueError("graph needs at least one node")
    canon = set()
    for a, b in edges:
        a, b = int(a), int(b)
        if a == b:
            raise ValueError(f"self-loop at node {a}")
        if not (0 <= a < n_nodes and 0 <= b < n_nodes):
            raise ValueError(f"edge ({a}, {b}) out of range for {n_nodes} nodes")
        canon.add((min(a, b), max(a, b)))
    L = np.zeros((n_nodes, n_nodes), dtype=np.int64)
    for a, b in canon:
        L[a, b] = L[b, a] = -1
        L[a, a] += 1
        L[b, b] += 1
    nbrs = [[] for _ in range(n_nodes)]
    for a, b in sorted(canon):
        nbrs[a].append(b)
        nbrs[b].append(a)
    L = L.astype(float)
    L.setflags(write=False)
    return CommGraph(n_nodes, frozenset(canon), L, tuple(tuple(sorted(v)) for v in nbrs))


def preset(name: str, n_nodes: int) -> CommGraph:
    if name == "ring":
        if n_nodes <= 2:
            return preset("path", n_nodes)
        edges = [(i, (i + 1) % n_nodes) for i in range(n_nodes)]
    elif name == "path":
        edges = [(i, i + 1) for i in range(n_nodes - 1)]
    elif name == "complete":
        edges = [(i, j) for i in range(n_nodes) for j in range(i + 1, n_nodes)]
    else:
        raise ValueError(f"unknown graph preset {name!r}; choose from {PRESETS}")
    return laplacian(edges, n_nodes)


def is_connected(graph: CommGraph) -> bool:
    seen = {0}
    queue = deque([0])
    while queue:
        for j in graph.neighbors[queue.popleft()]:
            if j not in seen:
                seen.add(j)
                queue.append(j)
    return len(seen) == graph.n_nodes


def laplacian_block(i: int, z_i: np.ndarray, received: Mapping[int, np.ndarray],
                    graph: CommGraph) -> np.ndarray:
    """Row ``i`` of ``(L kron I) z`` from the agent's own block and its neighbors' blocks."""
    out = len(graph.neighbors[i]) * z_i
    for j in graph.neighbors[i]:
        out = out - received[j]
    return out


def apply_expanded_laplacian(z_blocks: Sequence[np.ndarray], graph: CommGraph) -> list[np.ndarray]:
    if len(z_blocks) != graph.n_nodes:
        raise ValueError(f"{len(z_blocks)} blocks for a {graph.n_nodes}-node graph")
    size = len(z_blocks[0])
    if any(len(z) != size for z in z_blocks):
        raise ValueError("all z blocks must have the same length")
    return [laplacian_block(i, z_blocks[i], {j: z_blocks[j] for j in graph.neighbors[i]}, graph)
            for i in range(graph.n_nodes)]


def laplacian_sqrt(graph: CommGraph) -> np.ndarray:
    # eigenvalues below 1e-12 clamped to zero for PSD safety
    w, V = np.linalg.eigh(graph.laplacian)
    w = np.where(w < 1e-12, 0.0, w)
    S = (V * np.sqrt(w)) @ V.T
    return (S + S.T) / 2


def apply_D(z_blocks: Sequence[np.ndarray], graph: CommGraph, blocks) -> list[np.ndarray]:
    """``(L kron I + U_hat U_hat^T) z``, blockwise."""
    lz = apply_expanded_laplacian(z_blocks, graph)
    return [lz[i] + b.apply(b.adjoint(z_blocks[i])) for i, b in enumerate(blocks)]


def spectral_radius_D(graph: CommGraph, blocks, *, seed: int = 0, max_iter: int = 10_000,
                      rtol: float = 1e-9) -> float:
    """Largest eigenvalue of ``D`` by power iteration on blockwise products.

    ``blocks`` are anything with ``apply``/``adjoint``/``z_len`` (normally
    :class:`~distid.datamodel.LiftedBlocks`).
    """
    rng = np.random.default_rng(seed)
    z = [rng.standard_normal(b.z_len) for b in blocks]
    nrm = np.sqrt(sum(float(v @ v) for v in z))
    z = [v / nrm for v in z]
    prev = None
    for _ in range(max_iter):
        dz = apply_D(z, graph, blocks)
        rq = sum(float(a @ b) for a, b in zip(z, dz))
        nrm = np.sqrt(sum(float(v @ v) for v in dz))
        if nrm == 0.0:
            return 0.0
        if prev is not None and abs(rq - prev) <= rtol * max(abs(rq), 1e-300):
            return rq
        prev = rq
        z = [v / nrm for v in dz]
    raise PowerIterationError(f"power iteration did not converge in {max_iter} iterations")


def dense_D(graph: CommGraph, blocks) -> np.ndarray:
    """Dense ``D``. Verification only."""
    from .datamodel import assemble_global

    U_hat, _ = assemble_global(blocks)
    nT = blocks[0].z_len
    return np.kron(graph.laplacian, np.eye(nT)) + U_hat @ U_hat.T

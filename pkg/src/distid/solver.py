"""Distributed identification iterations.

Two schemes share one ``z`` recursion, ``z <- z - alpha (L kron I + U_hat U_hat^T) z``:

* ``baseline``: plain consensus gradient, ``x <- x - alpha U_hat^T z``;
* ``adam``: the same ``z`` recursion with an Adam-scaled ``x`` step.

``adam_tracking`` is an opt-in variant in which ``z`` follows the actual Adam
displacement of ``x`` (``z <- z - alpha L z + U_hat dx``). It is not the default
and its ``z`` sequence differs from the other two.

Every agent touches only its own lifted blocks, its own state and the ``z``
blocks its neighbors send it.
"""

from __future__ import annotations

import csv
import logging
import math
import time
import warnings
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .datamodel import AgentView, LiftedBlocks, Partition, lift_all, unvec
from .graph import (CommGraph, apply_expanded_laplacian, is_connected, laplacian_block,
                    laplacian_sqrt, spectral_radius_D)
from .netsim import Network, WireLog

logger = logging.getLogger(__name__)

MODES = ("baseline", "adam", "adam_tracking")
DIVERGENCE_THRESHOLD = 1e12


class DivergenceError(RuntimeError):
    def __init__(self, k: int, z_norm: float):
        super().__init__(f"iteration diverged at k={k}: ||z|| = {z_norm:.3e}")
        self.k = k
        self.z_norm = z_norm


class CertificateWarning(UserWarning):
    pass


@dataclass(frozen=True)
class AdamConfig:
    alpha: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.95
    epsilon: float = 1e-8
    iters: int = 1000

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.iters < 0:
            raise ValueError("iters must be nonnegative")


@dataclass(frozen=True)
class CertificateConfig:
    mu: float = 1e-7

    def __post_init__(self):
        if not self.mu > 0:
            raise ValueError("mu must be positive")


@dataclass(frozen=True)
class InitSpec:
    """Initial ``x`` blocks and optional slack ``w`` (length ``T N n``)."""

    x0: tuple[np.ndarray, ...]
    w0: np.ndarray | None = None

    @classmethod
    def zeros(cls, partition: Partition) -> "InitSpec":
        return cls(tuple(np.zeros(partition.n * len(d)) for d in partition.input_rows))

    @classmethod
    def random(cls, partition: Partition, seed: int = 0) -> "InitSpec":
        rng = np.random.default_rng(seed)
        return cls(tuple(rng.standard_normal(partition.n * len(d)) for d in partition.input_rows))


@dataclass(frozen=True)
class AgentState:
    x: np.ndarray
    z: np.ndarray
    s1: np.ndarray
    s2: np.ndarray
    k: int = 0


def init_state(views: Sequence[AgentView], partition: Partition, graph: CommGraph,
               init: InitSpec, blocks: Sequence[LiftedBlocks] | None = None) -> list[AgentState]:
    """``z_i(0) = U_lift,i x_i(0) - Y_lift,i`` when ``w0`` is absent (agent-local).

    A nonzero ``w0`` needs ``L^(1/2)``, which no agent has; that path is for
    verification only.
    """
    if graph.n_nodes != partition.n_agents:
        raise ValueError(f"graph has {graph.n_nodes} nodes for {partition.n_agents} agents")
    if not is_connected(graph):
        raise ValueError("communication graph must be connected")
    if blocks is None:
        blocks = lift_all(views, partition)
    if len(init.x0) != len(blocks):
        raise ValueError("need one initial x block per agent")
    states = []
    for b, x0 in zip(blocks, init.x0):
        x0 = np.asarray(x0, dtype=float)
        if x0.size != b.x_len:
            raise ValueError(f"agent {b.agent_id + 1}: x0 has length {x0.size}, expected {b.x_len}")
        z0 = b.apply(x0) - b.Y_lift
        states.append(AgentState(x0.copy(), z0, np.zeros(b.x_len), np.zeros(b.x_len)))
    if init.w0 is not None and np.any(init.w0):
        nT = blocks[0].z_len
        w = np.asarray(init.w0, dtype=float).reshape(graph.n_nodes, nT)
        sw = laplacian_sqrt(graph) @ w
        states = [replace(s, z=s.z - sw[i]) for i, s in enumerate(states)]
    return states


def _neighbor_tables(states, graph, network, round_):
    zs = [s.z for s in states]
    if network is not None:
        return network.exchange(zs, round_)
    return [{j: zs[j] for j in graph.neighbors[i]} for i in range(graph.n_nodes)]


def _check_finite(new_states, k):
    # a single non-finite entry makes the squared norm non-finite
    total = sum(float(np.dot(s.x, s.x)) + float(np.dot(s.z, s.z)) for s in new_states)
    if not math.isfinite(total):
        raise DivergenceError(k, math.inf)


class ZFingerprint:
    """Order-sensitive 64-bit fingerprint of a ``z`` trajectory.

    Every bit of every float enters a wrapping dot product with odd weights,
    so a single flipped bit anywhere changes the fingerprint.
    """

    _MOD = (1 << 64) - 1

    def __init__(self, length: int):
        rng = np.random.default_rng(0x5EED)
        self._w = rng.integers(0, 2**63, length, dtype=np.uint64) * np.uint64(2) + np.uint64(1)
        self.value = 0

    def update(self, z: np.ndarray) -> None:
        h = int(z.view(np.uint64) @ self._w[:z.size])
        self.value = (self.value * 0x100000001B3 + h) & self._MOD

    def hexdigest(self) -> str:
        return f"{self.value:016x}"


def baseline_step(states: Sequence[AgentState], graph: CommGraph, blocks: Sequence[LiftedBlocks],
                  alpha: float, network: Network | None = None) -> list[AgentState]:
    received = _neighbor_tables(states, graph, network, states[0].k)
    out = []
    for i, (s, b) in enumerate(zip(states, blocks)):
        g = b.adjoint(s.z)
        lz = laplacian_block(i, s.z, received[i], graph)
        out.append(AgentState(s.x - alpha * g, s.z - alpha * (lz + b.apply(g)), s.s1, s.s2, s.k + 1))
    _check_finite(out, states[0].k + 1)
    return out


def _bias_correction(beta: float, k: int) -> float:
    p = beta ** k
    return 1.0 if p < 1e-300 else 1.0 - p


def adam_step(states: Sequence[AgentState], graph: CommGraph, blocks: Sequence[LiftedBlocks],
              config: AdamConfig, network: Network | None = None,
              tracking: bool = False) -> list[AgentState]:
    alpha, b1, b2, eps = config.alpha, config.beta1, config.beta2, config.epsilon
    k = states[0].k + 1
    # x <- x - alpha * (s1 / c1) / (sqrt(s2 / c2) + eps), bias corrections folded into scalars
    step = alpha / _bias_correction(b1, k)
    inv_c2 = 1.0 / _bias_correction(b2, k)
    received = _neighbor_tables(states, graph, network, states[0].k)
    out = []
    for i, (s, b) in enumerate(zip(states, blocks)):
        g = b.adjoint(s.z)
        s1 = b1 * s.s1 + (1 - b1) * g
        s2 = b2 * s.s2 + (1 - b2) * (g * g)
        dx = (-step * s1) / (np.sqrt(inv_c2 * s2) + eps)
        lz = laplacian_block(i, s.z, received[i], graph)
        if tracking:
            z = s.z - alpha * lz + b.apply(dx)
        else:
            z = s.z - alpha * (lz + b.apply(g))
        out.append(AgentState(s.x + dx, z, s1, s2, k))
    _check_finite(out, k)
    return out


def step_size_certificate(lambda_max_D: float, alpha: float, mu: float) -> bool:
    """Sufficient step-size condition with ``P = I``: ``lambda_max(D) <= 2 alpha / (alpha^2 + mu)``."""
    return lambda_max_D * (1 + 1e-9) <= 2 * alpha / (alpha * alpha + mu)


def kkt_residual(states: Sequence[AgentState], graph: CommGraph,
                 blocks: Sequence[LiftedBlocks]) -> tuple[float, float]:
    """``(||U_hat^T z||, ||(L kron I) z||)``."""
    zs = [s.z for s in states]
    r_stat = math.sqrt(sum(float(np.dot(g, g)) for g in (b.adjoint(z) for b, z in zip(blocks, zs))))
    r_cons = math.sqrt(sum(float(np.dot(v, v)) for v in apply_expanded_laplacian(zs, graph)))
    return r_stat, r_cons


def x_blocks_to_matrix(x_blocks: Sequence[np.ndarray], partition: Partition) -> np.ndarray:
    A = np.zeros((partition.n, partition.m))
    for x, du in zip(x_blocks, partition.input_rows):
        A[:, list(du)] = unvec(x, partition.n)
    return A


@dataclass
class TraceRecord:
    k: int
    err_max: float
    z_norm: float
    r_stat: float
    r_cons: float
    wall: float


@dataclass
class RunTrace:
    mode: str
    records: list[TraceRecord]
    z_norms: np.ndarray
    z_digest: str
    states: list[AgentState]
    log: WireLog
    lambda_max: float
    certified: bool
    extra: dict = field(default_factory=dict)

    @property
    def final(self) -> TraceRecord:
        return self.records[-1]

    def record_at(self, k: int) -> TraceRecord:
        for r in self.records:
            if r.k == k:
                return r
        raise KeyError(f"no trace record at k={k}")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["k", "err_max", "z_norm", "r_stat", "r_cons"])
            for r in self.records:
                w.writerow([r.k, repr(r.err_max), repr(r.z_norm), repr(r.r_stat), repr(r.r_cons)])


def _z_norm(states) -> float:
    return math.sqrt(sum(float(np.dot(s.z, s.z)) for s in states))


def run(views: Sequence[AgentView], partition: Partition, graph: CommGraph, config: AdamConfig,
        mode: str = "adam", init: InitSpec | None = None, reference_A: np.ndarray | None = None, *,
        seed: int = 0, certificate: CertificateConfig = CertificateConfig(),
        log: WireLog | None = None, record_every: int = 1) -> RunTrace:
    """Run ``config.iters`` synchronous rounds, each exchanging ``z`` over the wire log.

    ``init`` defaults to standard-normal ``x`` blocks drawn from ``seed``.
    Trace records are taken every ``record_every`` rounds and at the end;
    ``z_norms`` and the ``z`` digest cover every round.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; choose from {MODES}")
    blocks = lift_all(views, partition)
    if init is None:
        init = InitSpec.random(partition, seed)
    states = init_state(views, partition, graph, init, blocks)

    lam = spectral_radius_D(graph, blocks, seed=seed)
    certified = step_size_certificate(lam, config.alpha, certificate.mu)
    if not certified:
        warnings.warn(f"alpha={config.alpha} fails the step-size certificate (lambda_max(D)={lam:.6g}, "
                      f"mu={certificate.mu})", CertificateWarning, stacklevel=2)

    if log is None:
        log = WireLog()
    network = Network(graph, log, payload_len=blocks[0].z_len)

    digest = ZFingerprint(blocks[0].z_len)
    z_norms = np.empty(config.iters + 1)
    t0 = time.perf_counter()

    def snapshot(k):
        zn = float(z_norms[k])
        err = math.nan
        if reference_A is not None:
            err = float(np.max(np.abs(x_blocks_to_matrix([s.x for s in states], partition) - reference_A)))
        rs, rc = kkt_residual(states, graph, blocks)
        return TraceRecord(k, err, zn, rs, rc, time.perf_counter() - t0)

    def absorb(k):
        for s in states:
            digest.update(s.z)
        z_norms[k] = _z_norm(states)
        if not math.isfinite(z_norms[k]) or z_norms[k] > DIVERGENCE_THRESHOLD:
            raise DivergenceError(k, z_norms[k])

    absorb(0)
    records = [snapshot(0)]
    for k in range(1, config.iters + 1):
        log.note_private(k - 1, [s.x for s in states])
        if mode == "baseline":
            states = baseline_step(states, graph, blocks, config.alpha, network)
        else:
            states = adam_step(states, graph, blocks, config, network, tracking=(mode == "adam_tracking"))
        absorb(k)
        if k % record_every == 0 or k == config.iters:
            records.append(snapshot(k))
    log.note_private(config.iters, [s.x for s in states])
    trace = RunTrace(mode, records, z_norms, digest.hexdigest(), states, log, lam, certified)
    logger.debug("mode=%s iters=%d z_norm=%.3e err_max=%.3e", mode, config.iters,
                 trace.final.z_norm, trace.final.err_max)
    return trace

"""Synchronous message passing of dummy ``z`` blocks, with a wire log and privacy audit.

The only payload kind that exists is :attr:`PayloadKind.DUMMY_Z`; a
:class:`WireMessage` cannot be built with anything else. The log keeps compact
per-message metadata. Full payloads are kept only on request, so long runs
screen payloads online through a :class:`PrivacyTap` attached to the log.
"""

from __future__ import annotations

import array
import csv
import enum
import math
import struct
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .datamodel import IoDataset, Partition
from .graph import CommGraph

MATCH_TOL = 1e-12


class PayloadKind(enum.Enum):
    DUMMY_Z = "dummy_z"


@dataclass(frozen=True)
class WireMessage:
    sender: int
    receiver: int
    round: int
    payload: np.ndarray
    kind: PayloadKind = PayloadKind.DUMMY_Z

    def __post_init__(self):
        if not isinstance(self.kind, PayloadKind):
            raise TypeError(f"illegal payload kind {self.kind!r}")


class _Column:
    """Append-only typed column; compact storage, numpy view on read."""

    def __init__(self, typecode, dtype):
        self._a = array.array(typecode)
        self._dtype = dtype

    def append(self, v):
        self._a.append(v)

    def extend(self, vs):
        self._a.extend(vs)

    def __len__(self):
        return len(self._a)

    def last(self):
        return self._a[-1]

    @property
    def values(self) -> np.ndarray:
        return np.frombuffer(self._a, dtype=self._dtype).copy() if len(self._a) else np.empty(0, self._dtype)


_KIND_CODES = {PayloadKind.DUMMY_Z: 0}
_KIND_NAMES = {0: PayloadKind.DUMMY_Z.value, -1: "illegal"}


class WireLog:
    """Append-only record of every message put on the wire."""

    def __init__(self, retain_payloads: bool = False, tap: "PrivacyTap | None" = None):
        self.retain_payloads = retain_payloads
        self.tap = tap
        self._round = _Column("q", np.int64)
        self._sender = _Column("i", np.int32)
        self._receiver = _Column("i", np.int32)
        self._kind = _Column("b", np.int8)
        self._length = _Column("q", np.int64)
        self._norm = _Column("d", np.float64)
        self.payloads: list[np.ndarray] = []
        self.round_counts: dict[int, int] = {}
        self.flags: list[tuple[int, str]] = []

    def __len__(self):
        return len(self._round)

    def append(self, msg) -> int:
        """Record ``msg``. Performs no schema validation; :func:`privacy_audit` does."""
        if len(self) and msg.round < self._round.last():
            raise ValueError(f"round {msg.round} appended after round {self._round.last()}")
        payload = np.asarray(msg.payload, dtype=float)
        idx = len(self)
        self._round.append(msg.round)
        self._sender.append(msg.sender)
        self._receiver.append(msg.receiver)
        self._kind.append(_KIND_CODES.get(msg.kind, -1))
        self._length.append(payload.size)
        self._norm.append(float(np.linalg.norm(payload)))
        self.round_counts[msg.round] = self.round_counts.get(msg.round, 0) + 1
        if self.retain_payloads:
            self.payloads.append(payload.copy())
        if self.tap is not None:
            for reason in self.tap.inspect(payload, msg.round):
                self.flags.append((idx, reason))
        return idx

    def extend(self, msgs: Sequence[WireMessage]) -> None:
        """Record one round's worth of messages in a single batch."""
        if not msgs:
            return
        if (len(self) and msgs[0].round < self._round.last()) or any(
                b.round < a.round for a, b in zip(msgs, msgs[1:])):
            raise ValueError("rounds must be nondecreasing in append order")
        start = len(self)
        payloads = [np.asarray(m.payload, dtype=float) for m in msgs]
        norms: dict[int, float] = {}
        for p in payloads:
            if id(p) not in norms:
                flat = p.ravel()
                norms[id(p)] = math.sqrt(float(flat @ flat))
        for m, p in zip(msgs, payloads):
            self._round.append(m.round)
            self._sender.append(m.sender)
            self._receiver.append(m.receiver)
            self._kind.append(_KIND_CODES.get(m.kind, -1))
            self._length.append(p.size)
            self._norm.append(norms[id(p)])
            self.round_counts[m.round] = self.round_counts.get(m.round, 0) + 1
        if self.retain_payloads:
            self.payloads.extend(p.copy() for p in payloads)
        if self.tap is not None:
            distinct = {}
            for p in payloads:
                distinct.setdefault(id(p), p)
            found = dict(zip(distinct, self.tap.screen.scan_many(list(distinct.values()))))
            for k, p in enumerate(payloads):
                for reason in found[id(p)]:
                    self.flags.append((start + k, reason))

    def note_private(self, round_: int, x_blocks: Sequence[np.ndarray]) -> None:
        """Tell the attached tap the agents' current private ``x_i`` (observer side only)."""
        if self.tap is not None:
            self.tap.watch_x(round_, x_blocks)

    @property
    def rounds(self) -> np.ndarray:
        return self._round.values

    @property
    def senders(self) -> np.ndarray:
        return self._sender.values

    @property
    def receivers(self) -> np.ndarray:
        return self._receiver.values

    @property
    def kinds(self) -> np.ndarray:
        return self._kind.values

    @property
    def lengths(self) -> np.ndarray:
        return self._length.values

    @property
    def norms(self) -> np.ndarray:
        return self._norm.values

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["round", "sender", "receiver", "kind", "payload_norm"])
            for r, s, t, k, nrm in zip(self.rounds, self.senders, self.receivers, self.kinds, self.norms):
                w.writerow([int(r), int(s) + 1, int(t) + 1, _KIND_NAMES.get(int(k), "illegal"), repr(float(nrm))])

    def dump_payloads(self, path) -> None:
        """Binary sidecar: per message a little-endian int64 length then float64 values."""
        if not self.retain_payloads:
            raise ValueError("log was created without retain_payloads")
        with open(path, "wb") as fh:
            for p in self.payloads:
                fh.write(struct.pack("<q", p.size))
                fh.write(np.ascontiguousarray(p, dtype="<f8").tobytes())


def read_payloads(path) -> list[np.ndarray]:
    out = []
    with open(path, "rb") as fh:
        while head := fh.read(8):
            (size,) = struct.unpack("<q", head)
            out.append(np.frombuffer(fh.read(8 * size), dtype="<f8").copy())
    return out


class PayloadScreen:
    """Finds private vectors embedded in a payload.

    A vector ``v`` is considered embedded when ``+v`` or ``-v`` appears, within
    ``tol``, either as a contiguous slice of the payload or as a slice with
    stride ``n`` (one output channel across samples, the ``z`` block layout).
    Candidates are located through each vector's largest-magnitude entry,
    looked up in the sorted payload entries. Vectors whose entries are
    all within ``tol`` of zero carry nothing to leak and are skipped.
    """

    def __init__(self, n: int, tol: float = MATCH_TOL):
        self.n = n
        self.tol = tol
        self._static = self._index([])
        self._dynamic = self._index([])
        self._merged = None

    def _index(self, labelled):
        entries, keys = [], []
        for lbl, v in labelled:
            v = np.asarray(v, dtype=float).ravel()
            if not v.size:
                continue
            a = int(np.argmax(np.abs(v)))
            if abs(v[a]) <= self.tol:
                continue
            for sign in (1.0, -1.0):
                keys.append(sign * v[a])
                entries.append((lbl, v, a, sign))
        order = np.argsort(np.asarray(keys), kind="stable")
        return np.asarray(keys, dtype=float)[order], [entries[i] for i in order]

    def set_static(self, labelled: Iterable[tuple[str, np.ndarray]]) -> None:
        self._static = self._index(labelled)
        self._merged = None

    def set_dynamic(self, labelled: Iterable[tuple[str, np.ndarray]]) -> None:
        self._dynamic = self._index(labelled)
        self._merged = None

    def _merged_index(self):
        if self._merged is None:
            keys = np.concatenate([self._static[0], self._dynamic[0]])
            entries = self._static[1] + self._dynamic[1]
            order = np.argsort(keys, kind="stable")
            self._merged = keys[order], [entries[i] for i in order]
        return self._merged

    def scan(self, payload: np.ndarray) -> list[str]:
        return self.scan_many([payload])[0]

    def scan_many(self, payloads: Sequence[np.ndarray]) -> list[list[str]]:
        """Screen several payloads with one pair of sorted lookups."""
        keys, entries = self._merged_index()
        flat = [np.asarray(p, dtype=float).ravel() for p in payloads]
        found = [set() for _ in flat]
        if entries and flat:
            allp = np.concatenate(flat)
            sp = np.sort(allp)
            lo = np.searchsorted(sp, keys - self.tol, side="left")
            hi = np.searchsorted(sp, keys + self.tol, side="right")
            offsets = np.cumsum([0] + [p.size for p in flat])
            for e in np.nonzero(hi > lo)[0]:
                lbl, v, a, sign = entries[e]
                for flat_pos in np.nonzero(np.abs(allp - keys[e]) <= self.tol)[0]:
                    which = int(np.searchsorted(offsets, flat_pos, side="right")) - 1
                    p, pos = flat[which], int(flat_pos - offsets[which])
                    if self._embedded(p, pos, v, a, sign):
                        found[which].add(f"payload embeds {'-' if sign < 0 else ''}{lbl}")
        return [sorted(f) for f in found]

    def _embedded(self, p, pos, v, a, sign) -> bool:
        for stride in ((1,) if self.n == 1 else (1, self.n)):
            start = pos - a * stride
            stop = start + (v.size - 1) * stride + 1
            if start < 0 or stop > p.size:
                continue
            if np.all(np.abs(p[start:stop:stride] - sign * v) <= self.tol):
                return True
        return False


class PrivacyTap:
    """Observer that screens every logged payload against the agents' private data.

    It sees ``U``, ``Y`` and the current ``x_i`` snapshots; agents never do.
    """

    def __init__(self, dataset: IoDataset, partition: Partition, tol: float = MATCH_TOL):
        self.screen = PayloadScreen(partition.n, tol)
        self.screen.set_static(_private_rows(dataset))
        self._last = None
        self._last_hits: list[str] = []

    def watch_x(self, round_: int, x_blocks: Sequence[np.ndarray]) -> None:
        self.screen.set_dynamic((f"x_{i + 1}@round{round_}", x) for i, x in enumerate(x_blocks))
        self._last = None

    def inspect(self, payload: np.ndarray, round_: int) -> list[str]:
        # an agent sends the same z block to all its neighbors; screen it once.
        # Holding the object keeps its id from being recycled.
        if self._last is not None and self._last[0] == round_ and self._last[1] is payload:
            return self._last_hits
        self._last = (round_, payload)
        self._last_hits = self.screen.scan(payload)
        return self._last_hits


def _private_rows(dataset: IoDataset):
    for j, row in enumerate(dataset.U):
        yield f"U row {j + 1}", row
    for j, row in enumerate(dataset.Y):
        yield f"Y row {j + 1}", row


class Network:
    """Reliable, in-order, synchronous delivery of ``z`` blocks along graph edges."""

    def __init__(self, graph: CommGraph, log: WireLog | None = None, payload_len: int | None = None):
        self.graph = graph
        self.log = log if log is not None else WireLog()
        self.payload_len = payload_len
        self._pairs = sorted((i, j) for i in range(graph.n_nodes) for j in graph.neighbors[i])

    def exchange(self, z_blocks: Sequence[np.ndarray], round_: int) -> list[dict[int, np.ndarray]]:
        return exchange_round(z_blocks, self.graph, self.log, round_, self._pairs, self.payload_len)


def exchange_round(z_blocks: Sequence[np.ndarray], graph: CommGraph, log: WireLog, round_: int,
                   pairs=None, payload_len: int | None = None) -> list[dict[int, np.ndarray]]:
    """Send every agent's current block to each neighbor; return what each agent received.

    Messages are committed in ascending ``(sender, receiver)`` order.
    """
    if len(z_blocks) != graph.n_nodes:
        raise ValueError(f"{len(z_blocks)} z blocks for a {graph.n_nodes}-node graph")
    if payload_len is not None and any(z.size != payload_len for z in z_blocks):
        raise ValueError(f"z blocks must have length {payload_len}")
    if pairs is None:
        pairs = sorted((i, j) for i in range(graph.n_nodes) for j in graph.neighbors[i])
    received: list[dict[int, np.ndarray]] = [{} for _ in range(graph.n_nodes)]
    msgs = [WireMessage(i, j, round_, z_blocks[i]) for i, j in pairs]
    log.extend(msgs)
    for msg in msgs:
        received[msg.receiver][msg.sender] = msg.payload
    return received


@dataclass
class AuditReport:
    passed: bool
    n_messages: int
    violations: list[tuple[int, str]] = field(default_factory=list)

    def summary(self) -> str:
        head = f"privacy audit: {'PASS' if self.passed else 'FAIL'} ({self.n_messages} messages"
        head += f", {len(self.violations)} violations)"
        lines = [head] + [f"  message {i}: {why}" for i, why in self.violations]
        return "\n".join(lines)


def privacy_audit(log: WireLog, partition: Partition, dataset: IoDataset,
                  graph: CommGraph | None = None,
                  x_snapshots: dict[int, Sequence[np.ndarray]] | None = None) -> AuditReport:
    """Check that only schema-legal dummy blocks crossed the wire.

    Checks schema (kind and length ``nT``), endpoints (when ``graph`` is given),
    online tap findings, and any retained payloads against rows of ``U``/``Y``
    and the ``x_i`` snapshots in ``x_snapshots`` (keyed by round).
    """
    nT = partition.n * dataset.T
    bad: dict[int, list[str]] = {}

    def flag(i, why):
        bad.setdefault(int(i), []).append(why)

    for i in np.nonzero(log.kinds != _KIND_CODES[PayloadKind.DUMMY_Z])[0]:
        flag(i, "illegal payload kind")
    for i in np.nonzero(log.lengths != nT)[0]:
        flag(i, f"payload length {int(log.lengths[i])} != nT = {nT}")
    if graph is not None:
        for i, (s, r) in enumerate(zip(log.senders, log.receivers)):
            if (min(s, r), max(s, r)) not in graph.edges:
                flag(i, f"endpoints ({s + 1}, {r + 1}) are not a graph edge")
    for i, why in log.flags:
        flag(i, why)
    if log.retain_payloads:
        screen = PayloadScreen(partition.n)
        screen.set_static(_private_rows(dataset))
        current_round = None
        for i, p in enumerate(log.payloads):
            rnd = int(log.rounds[i])
            if x_snapshots is not None and rnd != current_round:
                snap = x_snapshots.get(rnd, ())
                screen.set_dynamic((f"x_{a + 1}@round{rnd}", x) for a, x in enumerate(snap))
                current_round = rnd
            for why in screen.scan(p):
                flag(i, why)
    violations = [(i, why) for i in sorted(bad) for why in dict.fromkeys(bad[i])]
    return AuditReport(not violations, len(log), violations)

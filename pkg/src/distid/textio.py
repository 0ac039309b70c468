"""Plain-text formats: datasets, partitions, graphs, matrices, key=value configs.

All index sets and node ids in files are 1-based; everything in memory is 0-based.
"""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np

from .datamodel import IoDataset, Partition
from .graph import PRESETS, CommGraph, laplacian, preset
from .oracle import ReferenceModel


class FormatError(ValueError):
    pass


def _fmt(values) -> str:
    return ",".join(repr(float(v)) for v in values)


def _lines(path):
    """Non-empty lines with ``#`` comments stripped, paired with line numbers."""
    for no, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if line:
            yield no, line


def _header(path, keys):
    first = Path(path).read_text().split("\n", 1)[0].strip()
    m = re.fullmatch(r"#\s*" + r"\s*,\s*".join(rf"{k}\s*=\s*(\d+)" for k in keys), first)
    if not m:
        raise FormatError(f"{path}: expected header '#{','.join(k + '=<int>' for k in keys)}'")
    return tuple(int(g) for g in m.groups())


def write_dataset(path, dataset: IoDataset) -> None:
    """One sample per line: ``m`` inputs then ``n`` outputs."""
    rows = [f"#m={dataset.m},n={dataset.n}"]
    rows += [_fmt(np.concatenate([u, y])) for u, y in zip(dataset.U.T, dataset.Y.T)]
    Path(path).write_text("\n".join(rows) + "\n")


def read_dataset(path, phi_u: str = "identity", phi_y: str = "identity") -> IoDataset:
    m, n = _header(path, ("m", "n"))
    samples = []
    for no, line in _lines(path):
        try:
            vals = [float(t) for t in line.split(",")]
        except ValueError:
            raise FormatError(f"{path}:{no}: non-numeric value") from None
        if len(vals) != m + n:
            raise FormatError(f"{path}:{no}: {len(vals)} values, expected m+n={m + n}")
        samples.append(vals)
    if not samples:
        raise FormatError(f"{path}: no samples")
    S = np.array(samples).T
    return IoDataset(S[:m], S[m:], phi_u, phi_y)


def write_partition(path, partition: Partition) -> None:
    rows = [f"#m={partition.m},n={partition.n}"]
    for i, (du, dy) in enumerate(zip(partition.input_rows, partition.output_rows), 1):
        rows.append(f"agent {i} inputs {','.join(str(j + 1) for j in du)} outputs {','.join(str(j + 1) for j in dy)}")
    Path(path).write_text("\n".join(rows) + "\n")


_AGENT = re.compile(r"agent\s+(\d+)\s+inputs\s+([\d,\s]+?)\s+outputs\s+([\d,\s]+)")


def read_partition(path) -> Partition:
    """Lines ``agent <id> inputs 1,2 outputs 1``; agents must be numbered 1..N.

    ``m`` and ``n`` come from an optional ``#m=..,n=..`` header, else from the
    largest index used.
    """
    agents = {}
    for no, line in _lines(path):
        mt = _AGENT.fullmatch(line)
        if not mt:
            raise FormatError(f"{path}:{no}: cannot parse {line!r}")
        ids = [tuple(int(t) - 1 for t in g.replace(" ", "").split(",") if t) for g in mt.groups()[1:]]
        agents[int(mt.group(1))] = ids
    if sorted(agents) != list(range(1, len(agents) + 1)):
        raise FormatError(f"{path}: agent ids must be 1..N")
    try:
        m, n = _header(path, ("m", "n"))
    except FormatError:
        m = max(max(a[0], default=-1) for a in agents.values()) + 1
        n = max(max(a[1], default=-1) for a in agents.values()) + 1
    ins = tuple(agents[i][0] for i in sorted(agents))
    outs = tuple(agents[i][1] for i in sorted(agents))
    return Partition(m, n, ins, outs)


def read_graph(spec: str, n_nodes: int) -> CommGraph:
    """A preset name or an edge-list file (``i j`` or ``i,j`` per line, 1-based)."""
    if spec in PRESETS:
        return preset(spec, n_nodes)
    path = Path(spec)
    if not path.exists():
        raise FormatError(f"graph {spec!r} is neither a preset {PRESETS} nor an existing file")
    edges = []
    for no, line in _lines(path):
        tok = line.replace(",", " ").split()
        if len(tok) != 2:
            raise FormatError(f"{path}:{no}: expected two node ids")
        a, b = int(tok[0]) - 1, int(tok[1]) - 1
        if not (0 <= a < n_nodes and 0 <= b < n_nodes):
            raise FormatError(f"{path}:{no}: node id outside 1..{n_nodes}")
        edges.append((a, b))
    return laplacian(edges, n_nodes)


def write_graph(path, graph: CommGraph) -> None:
    Path(path).write_text("".join(f"{a + 1},{b + 1}\n" for a, b in graph.sorted_edges()))


def write_matrix(path, M: np.ndarray) -> None:
    M = np.atleast_2d(M)
    rows = [f"#rows={M.shape[0]},cols={M.shape[1]}"] + [_fmt(r) for r in M]
    Path(path).write_text("\n".join(rows) + "\n")


def read_matrix(path) -> np.ndarray:
    r, c = _header(path, ("rows", "cols"))
    M = np.array([[float(t) for t in line.split(",")] for _, line in _lines(path)]).reshape(-1, c) if r else np.empty((0, c))
    if M.shape != (r, c):
        raise FormatError(f"{path}: found shape {M.shape}, header says {(r, c)}")
    return M


def dump_instance(directory, dataset: IoDataset, partition: Partition, reference: ReferenceModel) -> dict:
    """Write ``dataset.txt``, ``partition.txt`` and the ``astar.txt`` sidecar."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = {"dataset": d / "dataset.txt", "partition": d / "partition.txt", "astar": d / "astar.txt"}
    write_dataset(paths["dataset"], dataset)
    write_partition(paths["partition"], partition)
    write_matrix(paths["astar"], reference.A_star)
    return paths


def load_instance(directory):
    d = Path(directory)
    ds = read_dataset(d / "dataset.txt")
    part = read_partition(d / "partition.txt")
    A = read_matrix(d / "astar.txt")
    return ds, part, ReferenceModel(A, part)


def read_config(path) -> dict[str, str]:
    """``key=value`` lines; ``#`` starts a comment."""
    out = {}
    for no, line in _lines(path):
        if "=" not in line:
            raise FormatError(f"{path}:{no}: expected key=value")
        k, v = (s.strip() for s in line.split("=", 1))
        if not k:
            raise FormatError(f"{path}:{no}: empty key")
        out[k] = v
    return out

"""LinDistFlow radial feeder, PV agents, dual-ascent voltage regulation and scenario loops.

Voltages follow the linearized model

    v = v0 + 1/2 (R p_net + X q_net),   R(i, j) = 2 * sum of r over lines shared
                                        by the root paths of buses i and j,

with ``X`` built the same way from reactances. Every PV bus is an agent whose
input is its own ``(p, q)`` injection and whose output is its own voltage.
"""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .datamodel import IoDataset, Partition, split_views
from .graph import CommGraph
from .netsim import PrivacyTap, WireLog, privacy_audit
from .solver import AdamConfig, DivergenceError, InitSpec, run, x_blocks_to_matrix
from .textio import read_graph

logger = logging.getLogger(__name__)

SCENARIOS = ("no_control", "known_model", "offline_identified", "online_identified")


class FeederSpecError(ValueError):
    pass


class ScenarioError(RuntimeError):
    """Solver failure inside a scenario; ``__cause__`` holds the original error."""


@dataclass(frozen=True)
class PvSpec:
    bus: int
    pmin: float
    pmax: float
    qmin: float
    qmax: float


@dataclass
class PvAgent:
    """Control state of one PV unit. ``u = (p, q)`` always lies in the box."""

    spec: PvSpec
    u: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        self.u = self.clip(self.u)

    def clip(self, u) -> np.ndarray:
        s = self.spec
        return np.clip(np.asarray(u, dtype=float), (s.pmin, s.qmin), (s.pmax, s.qmax))

    def set(self, u) -> None:
        self.u = self.clip(u)

    def observe(self, v: np.ndarray, feeder: "FeederModel") -> float:
        return float(v[feeder.index(self.spec.bus)])


@dataclass(frozen=True)
class FeederModel:
    """Buses are numbered ``1..n_bus``; ``0`` is the substation."""

    bus_ids: tuple[int, ...]
    parent: tuple[int, ...]
    r: np.ndarray
    x: np.ndarray
    pv: tuple[PvSpec, ...]
    R: np.ndarray
    X: np.ndarray
    v0: float = 1.0

    @property
    def n_bus(self) -> int:
        return len(self.bus_ids)

    def index(self, bus: int) -> int:
        return self.bus_ids.index(bus)

    @property
    def pv_index(self) -> list[int]:
        return [self.index(p.bus) for p in self.pv]

    def true_A(self) -> np.ndarray:
        """Sensitivity of PV-bus voltages to ``u = [p_1, q_1, p_2, q_2, ...]``."""
        idx = self.pv_index
        A = np.empty((len(idx), 2 * len(idx)))
        A[:, 0::2] = 0.5 * self.R[np.ix_(idx, idx)]
        A[:, 1::2] = 0.5 * self.X[np.ix_(idx, idx)]
        return A

    def partition(self) -> Partition:
        k = len(self.pv)
        return Partition(2 * k, k, tuple((2 * i, 2 * i + 1) for i in range(k)), tuple((i,) for i in range(k)))

    def box(self) -> tuple[np.ndarray, np.ndarray]:
        lo = np.ravel([(p.pmin, p.qmin) for p in self.pv])
        hi = np.ravel([(p.pmax, p.qmax) for p in self.pv])
        return lo, hi


def build_feeder(lines: Sequence[tuple], v0: float = 1.0) -> FeederModel:
    """Build from ``(bus, parent, r, x, pv)`` tuples; ``pv`` is ``None`` or ``(pmin, pmax, qmin, qmax)``."""
    bus_ids = [int(ln[0]) for ln in lines]
    if len(set(bus_ids)) != len(bus_ids):
        raise FeederSpecError("duplicate bus id")
    if 0 in bus_ids:
        raise FeederSpecError("bus 0 is the substation and cannot be redefined")
    parent = {int(ln[0]): int(ln[1]) for ln in lines}
    for b, p in parent.items():
        if p != 0 and p not in parent:
            raise FeederSpecError(f"bus {b} has unknown parent {p} (disconnected)")
    order = sorted(bus_ids)
    pos = {b: i for i, b in enumerate(order)}
    # path incidence: P[i, h] = 1 when the line into bus h lies on the root path of bus i
    P = np.zeros((len(order), len(order)))
    for b in order:
        seen, cur = set(), b
        while cur != 0:
            if cur in seen:
                raise FeederSpecError(f"cycle through bus {cur}")
            seen.add(cur)
            P[pos[b], pos[cur]] = 1.0
            cur = parent[cur]
    by_id = {int(ln[0]): ln for ln in lines}
    r = np.array([float(by_id[b][2]) for b in order])
    x = np.array([float(by_id[b][3]) for b in order])
    if np.any(r < 0) or np.any(x < 0):
        raise FeederSpecError("line impedances must be nonnegative")
    pv = tuple(PvSpec(b, *map(float, by_id[b][4])) for b in order if len(by_id[b]) > 4 and by_id[b][4] is not None)
    R = 2.0 * (P * r) @ P.T
    X = 2.0 * (P * x) @ P.T
    return FeederModel(tuple(order), tuple(parent[b] for b in order), r, x, pv, R, X, v0)


def parse_feeder_spec(text: str) -> list[tuple]:
    """Parse ``bus <id> parent <id> r <val> x <val> [pv pmin pmax qmin qmax]`` lines.

    Blank lines and ``#`` comments are ignored.
    """
    out = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        try:
            if tok[0] != "bus" or tok[2] != "parent" or tok[4] != "r" or tok[6] != "x":
                raise ValueError
            pv = None
            if len(tok) > 8:
                if tok[8] != "pv" or len(tok) != 13:
                    raise ValueError
                pv = tuple(float(t) for t in tok[9:13])
            elif len(tok) != 8:
                raise ValueError
            out.append((int(tok[1]), int(tok[3]), float(tok[5]), float(tok[7]), pv))
        except (ValueError, IndexError):
            raise FeederSpecError(f"line {lineno}: cannot parse {raw.strip()!r}") from None
    if not out:
        raise FeederSpecError("feeder spec has no buses")
    return out


def load_feeder(path) -> FeederModel:
    return build_feeder(parse_feeder_spec(Path(path).read_text()))


def format_feeder_spec(feeder: FeederModel) -> str:
    pv = {p.bus: p for p in feeder.pv}
    rows = []
    for b, par, r, x in zip(feeder.bus_ids, feeder.parent, feeder.r, feeder.x):
        row = f"bus {b} parent {par} r {float(r)!r} x {float(x)!r}"
        if b in pv:
            p = pv[b]
            row += " pv " + " ".join(repr(float(v)) for v in (p.pmin, p.pmax, p.qmin, p.qmax))
        rows.append(row)
    return "\n".join(rows) + "\n"


def default_feeder(seed: int = 37) -> FeederModel:
    """36-bus radial test feeder with 7 PV agents.

    A 12-bus trunk carries four 6-bus laterals. PV units sit at the trunk end,
    each lateral end and two mid-feeder buses.
    """
    rng = np.random.default_rng(seed)
    lines = []
    trunk = list(range(1, 13))
    for i, b in enumerate(trunk):
        lines.append([b, 0 if i == 0 else trunk[i - 1]])
    nxt = 13
    lateral_ends = []
    for root in (3, 6, 8, 10):
        prev = root
        for _ in range(6):
            lines.append([nxt, prev])
            prev = nxt
            nxt += 1
        lateral_ends.append(prev)
    pv_buses = {12, *lateral_ends, 5, 9}
    spec = []
    for b, p in lines:
        r = rng.uniform(0.004, 0.008)
        x = r * rng.uniform(0.8, 1.2)
        pv = (0.0, 0.1, -0.1, 0.1) if b in pv_buses else None
        spec.append((b, p, r, x, pv))
    return build_feeder(spec)


def measure(feeder: FeederModel, p_inj, q_inj, p_load, q_load, noise_sigma: float = 0.0,
            rng: np.random.Generator | None = None) -> np.ndarray:
    """Voltage magnitudes (p.u.) at every bus."""
    v = feeder.v0 + 0.5 * (feeder.R @ (np.asarray(p_inj) - p_load) + feeder.X @ (np.asarray(q_inj) - q_load))
    if noise_sigma:
        rng = rng if rng is not None else np.random.default_rng()
        v = v + noise_sigma * rng.standard_normal(v.shape)
    return v


def bus_injections(feeder: FeederModel, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Scatter PV controls ``[p_1, q_1, ...]`` onto the bus vector."""
    p = np.zeros(feeder.n_bus)
    q = np.zeros(feeder.n_bus)
    idx = feeder.pv_index
    p[idx] = u[0::2]
    q[idx] = u[1::2]
    return p, q


@dataclass(frozen=True)
class ControllerGains:
    gamma: float = 20.0
    eta: float = 0.05


def controller_step(duals, identified_A, measurements, band, gains: ControllerGains, u, box,
                    partition: Partition):
    """One dual-ascent round on band violations.

    ``duals`` is ``(lam_hi, lam_lo)`` over the monitored buses. Each agent
    moves its own controls using only its column block of ``identified_A``.
    Returns ``((lam_hi, lam_lo), u_new)``.
    """
    lam_hi, lam_lo = duals
    v_min, v_max = band
    v = np.asarray(measurements)
    lam_hi = np.maximum(0.0, lam_hi + gains.gamma * (v - v_max))
    lam_lo = np.maximum(0.0, lam_lo + gains.gamma * (v_min - v))
    lo, hi = box
    u_new = np.array(u, dtype=float)
    for cols in partition.input_rows:
        cols = list(cols)
        A_i = identified_A[:, cols]
        u_new[cols] = np.clip(u_new[cols] - gains.eta * A_i.T @ (lam_hi - lam_lo), lo[cols], hi[cols])
    return (lam_hi, lam_lo), u_new


@dataclass(frozen=True)
class ScenarioConfig:
    scenario: str = "known_model"
    horizon: int = 120
    window: int = 140
    band: tuple[float, float] = (0.95, 1.05)
    gains: ControllerGains = ControllerGains()
    probe: float = 0.02
    u_scale: float = 0.02
    y_scale: float = 1e-3
    ident_iters: int = 200_000
    ident_mode: str = "adam"
    online_every: int = 1
    online_iters: int = 2_000
    online_dither: float = 0.005
    load_scale: float = 1.0
    settle: int = 40
    holdout: int = 20
    seed: int = 0
    graph: str = "ring"

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}; choose from {SCENARIOS}")
        lo, hi = self.band
        if not lo < hi:
            raise ValueError(f"empty voltage band {self.band}")
        if self.horizon < 1 or self.window < 1:
            raise ValueError("horizon and window must be positive")


def default_loads(feeder: FeederModel, horizon: int, scale: float = 1.0, seed: int = 0):
    """Per-bus ``(p_load, q_load)`` series of shape ``(horizon, n_bus)``.

    Heavy enough that, without control, the far ends of the feeder sag below
    0.95 p.u. for most of the horizon.
    """
    rng = np.random.default_rng(seed)
    base = rng.uniform(0.02, 0.04, feeder.n_bus) * scale
    t = np.arange(horizon)
    shape = 1.0 + 0.25 * np.sin(2 * np.pi * t / max(horizon, 1))
    p = np.outer(shape, base)
    return p, 0.5 * p


@dataclass
class ScenarioTrace:
    scenario: str
    voltages: np.ndarray
    controls: np.ndarray
    err_max: np.ndarray
    monitored: list[int]
    band: tuple[float, float]
    settle: int
    identified_A: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    def violation(self, buses: str = "all") -> np.ndarray:
        """Per-step max band violation (0 when inside)."""
        v = self.voltages if buses == "all" else self.voltages[:, self.monitored]
        lo, hi = self.band
        return np.maximum(0.0, np.maximum(lo - v, v - hi)).max(axis=1)

    def post_settle_violation(self, buses: str = "all") -> float:
        """Worst violation from step ``settle`` on (the last step if the horizon is shorter)."""
        viol = self.violation(buses)
        return float(viol[min(self.settle, len(viol) - 1):].max())

    def write_csv(self, path, feeder: FeederModel) -> None:
        pv_pos = {b: i for i, b in enumerate(feeder.pv_index)}
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "bus", "v", "p", "q", "err_max"])
            for t in range(self.voltages.shape[0]):
                for b in range(self.voltages.shape[1]):
                    k = pv_pos.get(b)
                    p, q = (self.controls[t, 2 * k], self.controls[t, 2 * k + 1]) if k is not None else (0.0, 0.0)
                    w.writerow([t, feeder.bus_ids[b], repr(float(self.voltages[t, b])), repr(float(p)),
                                repr(float(q)), repr(float(self.err_max[t]))])


@dataclass
class Identification:
    A: np.ndarray
    x_blocks: list[np.ndarray]
    dataset: IoDataset
    trace: object
    audit: object


def collect_excitation(feeder: FeederModel, u_nominal, p_load, q_load, T: int, probe: float,
                       rng: np.random.Generator):
    """Probe around ``u_nominal`` at fixed loads; return ``(du, dv)`` of shapes ``(m, T)``, ``(n, T)``.

    Deviations are uniform in ``[-probe, probe]``, clipped to the PV box.
    """
    lo, hi = feeder.box()
    idx = feeder.pv_index
    base_v = measure(feeder, *bus_injections(feeder, u_nominal), p_load, q_load)[idx]
    dus, dvs = [], []
    for _ in range(T):
        u = np.clip(u_nominal + rng.uniform(-probe, probe, u_nominal.size), lo, hi)
        v = measure(feeder, *bus_injections(feeder, u), p_load, q_load)[idx]
        dus.append(u - u_nominal)
        dvs.append(v - base_v)
    return np.array(dus).T, np.array(dvs).T


def identify(feeder: FeederModel, du: np.ndarray, dv: np.ndarray, config: ScenarioConfig,
             iters: int, x0: Sequence[np.ndarray] | None = None, graph: CommGraph | None = None,
             mode: str | None = None, solver: AdamConfig | None = None) -> Identification:
    """Distributed identification of ``dv = A du`` on scaled data.

    Inputs are divided by ``u_scale`` and outputs by ``y_scale`` (known unit
    maps), so the solver sees ``A_s = A u_scale / y_scale``.
    """
    part = feeder.partition()
    ds = IoDataset(du / config.u_scale, dv / config.y_scale, f"scale({config.u_scale:g})", f"scale({config.y_scale:g})")
    if graph is None:
        graph = read_graph(config.graph, part.n_agents)
    factor = config.u_scale / config.y_scale
    init = None if x0 is None else InitSpec(tuple(np.asarray(x) * factor for x in x0))
    if du.shape[1] < part.m:
        warnings.warn(f"window of {du.shape[1]} samples cannot excite {part.m} inputs", stacklevel=2)
    solver = replace(solver or AdamConfig(), iters=iters)
    log = WireLog(tap=PrivacyTap(ds, part))
    trace = run(split_views(ds, part), part, graph, solver, mode or config.ident_mode, init,
                feeder.true_A() * factor, seed=config.seed, log=log, record_every=max(iters, 1))
    audit = privacy_audit(log, part, ds, graph)
    x_blocks = [s.x / factor for s in trace.states]
    return Identification(x_blocks_to_matrix(x_blocks, part), x_blocks, ds, trace, audit)


def prediction_error(A_hat: np.ndarray, du: np.ndarray, dv: np.ndarray) -> float:
    """Relative held-out error ``||A_hat du - dv|| / ||dv||``."""
    return float(np.linalg.norm(A_hat @ du - dv) / np.linalg.norm(dv))


def run_scenario(feeder: FeederModel, config: ScenarioConfig, loads=None,
                 solver: AdamConfig | None = None) -> ScenarioTrace:
    """Closed-loop simulation of one scenario.

    ``no_control`` holds nominal injections; ``known_model`` regulates with the
    impedance-derived model; ``offline_identified`` identifies once from a
    probing window before control; ``online_identified`` also slides the
    window over closed-loop data and re-identifies, warm-started, every
    ``online_every`` steps. ``solver`` supplies step sizes; iteration
    budgets come from ``config``.
    """
    try:
        return _run_scenario(feeder, config, loads, solver)
    except DivergenceError as exc:
        raise ScenarioError(f"scenario {config.scenario}: {exc}") from exc


def _run_scenario(feeder, config, loads, solver):
    rng = np.random.default_rng(config.seed)
    H = config.horizon
    p_load, q_load = loads if loads is not None else default_loads(feeder, H, config.load_scale, config.seed)
    part = feeder.partition()
    lo, hi = feeder.box()
    u = np.zeros(2 * len(feeder.pv))
    A_true = feeder.true_A()
    mon = feeder.pv_index

    A_ctrl = None
    extra = {}
    if config.scenario == "known_model":
        A_ctrl = A_true
    elif config.scenario in ("offline_identified", "online_identified"):
        du, dv = collect_excitation(feeder, u, p_load[0], q_load[0], config.window + config.holdout,
                                    config.probe, rng)
        W = config.window
        ident = identify(feeder, du[:, :W], dv[:, :W], config, config.ident_iters, solver=solver)
        A_ctrl = ident.A
        extra["offline_prediction_error"] = prediction_error(ident.A, du[:, W:], dv[:, W:])
        extra["offline_audit"] = ident.audit
        extra["offline_err_max"] = float(np.max(np.abs(ident.A - A_true)))
        logger.info("offline identification: held-out prediction error %.3e", extra["offline_prediction_error"])
        win_u, win_v = du[:, :W].copy(), dv[:, :W].copy()
        x_cur = ident.x_blocks

    V = np.empty((H, feeder.n_bus))
    C = np.empty((H, u.size))
    E = np.full(H, np.nan)
    duals = (np.zeros(len(mon)), np.zeros(len(mon)))
    prev_u = prev_v = None
    audits_ok = True
    for t in range(H):
        v = measure(feeder, *bus_injections(feeder, u), p_load[t], q_load[t])
        V[t], C[t] = v, u
        if A_ctrl is not None:
            E[t] = float(np.max(np.abs(A_ctrl - A_true)))
        if config.scenario == "no_control":
            continue
        if config.scenario == "online_identified" and prev_u is not None:
            # newest increment pair replaces the oldest column of the window
            win_u = np.roll(win_u, -1, axis=1)
            win_v = np.roll(win_v, -1, axis=1)
            win_u[:, -1] = u - prev_u
            win_v[:, -1] = v[mon] - prev_v
            if t % config.online_every == 0:
                ident = identify(feeder, win_u, win_v, config, config.online_iters, x0=x_cur, solver=solver)
                audits_ok &= ident.audit.passed
                x_cur = ident.x_blocks
                A_ctrl = ident.A
        prev_u, prev_v = u.copy(), v[mon].copy()
        duals, u = controller_step(duals, A_ctrl, v[mon], config.band, config.gains, u, (lo, hi), part)
        if config.scenario == "online_identified":
            u = np.clip(u + rng.uniform(-config.online_dither, config.online_dither, u.size), lo, hi)
    if config.scenario == "online_identified":
        extra["online_audits_passed"] = audits_ok
    return ScenarioTrace(config.scenario, V, C, E, mon, config.band, config.settle, A_ctrl, extra)

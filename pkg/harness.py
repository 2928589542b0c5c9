"""
Synchronous ADMM Round Scheduler

One round = pre-x messages -> x-updates -> pre-z messages -> z-updates ->
post-z messages -> multiplier updates -> residual aggregation.
Every phase runs all agents in parallel over a thread pool; results are
committed per bus after the phase barrier, so the outcome does not depend on
the worker count.
"""

import csv
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, Iterable, List, Optional, Sequence, TextIO, Tuple

import numpy as np

import config
from agent import (
    AgentState, Message, init_states, local_objective, local_residual_contrib,
    multiplier_update, post_z_messages, pre_x_messages, pre_z_messages, x_update, z_update,
)
from network import GENERATORS, LoadProfile, RadialNetwork, diameter
from storage import write_json_atomic, write_text_atomic

log = logging.getLogger("ropf.harness")

TRACE_HEADER = ["iter", "r", "s", "objective"]


@dataclass(frozen=True)
class SolveConfig:
    rho: float = 1.0
    tol_scale: float = 1e-4
    max_iters: int = 100000
    parallelism: int = 1

    def __post_init__(self):
        if not self.rho > 0:
            raise ValueError(f"rho must be positive, got {self.rho}")
        if not self.tol_scale > 0:
            raise ValueError(f"tol_scale must be positive, got {self.tol_scale}")
        if self.max_iters < 1:
            raise ValueError(f"max_iters must be >= 1, got {self.max_iters}")
        if self.parallelism < 1:
            raise ValueError(f"parallelism must be >= 1, got {self.parallelism}")

    @classmethod
    def from_config(cls) -> "SolveConfig":
        return cls(rho=config.RHO, tol_scale=config.TOL_SCALE,
                   max_iters=config.MAX_ITERS, parallelism=config.default_parallelism())


class Status(Enum):
    CONVERGED = "Converged"
    MAX_ITERS = "MaxIters"


@dataclass(frozen=True)
class TraceRow:
    iter: int
    r: float
    s: float
    objective: float


@dataclass
class PhaseTimes:
    """Cumulative wall time per phase and per-agent kernel time (seconds)."""
    x: float = 0.0
    z: float = 0.0
    mult: float = 0.0
    agent_kernel: float = 0.0
    agent_calls: int = 0

    @property
    def mean_agent_kernel(self) -> float:
        return self.agent_kernel / self.agent_calls if self.agent_calls else 0.0


@dataclass
class Trace:
    rows: List[TraceRow] = field(default_factory=list)
    status: Status = Status.MAX_ITERS
    times: PhaseTimes = field(default_factory=PhaseTimes)


@dataclass(frozen=True)
class BusSolution:
    v: float
    p: float
    q: float


@dataclass(frozen=True)
class LineSolution:
    P: float
    Q: float
    l: float


@dataclass(frozen=True)
class Solution:
    buses: Dict[int, BusSolution]
    lines: Dict[int, LineSolution]
    iterations: int
    r: float
    s: float
    status: Status


def _route(outbound: Iterable[List[Message]]) -> Dict[int, List[Message]]:
    box: Dict[int, List[Message]] = {}
    for msgs in outbound:
        for m in msgs:
            box.setdefault(m.receiver, []).append(m)
    return box


class Engine:
    """All agents of one network plus the worker pool that drives them."""

    def __init__(self, net: RadialNetwork, cfg: SolveConfig):
        self.net = net
        self.config = cfg
        self.agents: Dict[int, AgentState] = init_states(net, cfg.rho)
        self.iter = 0
        self.times = PhaseTimes()
        self._pool = ThreadPoolExecutor(max_workers=cfg.parallelism) if cfg.parallelism > 1 else None

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown(wait=True)
            self._pool = None

    def __enter__(self) -> "Engine":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def _map(self, fn: Callable, buses: Sequence[int]) -> list:
        """fn over buses, one contiguous slice per worker; results in bus order."""
        if self._pool is None:
            return [fn(b) for b in buses]
        size = -(-len(buses) // self.config.parallelism)
        chunks = [buses[i:i + size] for i in range(0, len(buses), size)]
        out: list = []
        for part in self._pool.map(lambda chunk: [fn(b) for b in chunk], chunks):
            out.extend(part)
        return out

    def _timed(self, fn: Callable, state: AgentState, inbound: List[Message]):
        t0 = time.perf_counter()
        out = fn(state, inbound)
        return out, time.perf_counter() - t0

    def _phase(self, fn: Callable, inbox: Dict[int, List[Message]]) -> list:
        buses = list(self.net.buses())
        results = self._map(lambda b: self._timed(fn, self.agents[b], inbox.get(b, [])), buses)
        self.times.agent_kernel += math.fsum(dt for _, dt in results)
        self.times.agent_calls += len(results)
        return [out for out, _ in results]

    def round(self) -> Tuple[float, float]:
        """Run one full ADMM iteration; returns the global (r, s)."""
        k = self.iter + 1
        buses = list(self.net.buses())
        agents = self.agents

        t0 = time.perf_counter()
        inbox = _route(pre_x_messages(agents[b], k) for b in buses)
        for b, x in zip(buses, self._phase(x_update, inbox)):
            agents[b].x = x
        t1 = time.perf_counter()

        inbox_z = _route(pre_z_messages(agents[b], k) for b in buses)
        for b, z in zip(buses, self._phase(z_update, inbox_z)):
            agents[b].z_prev, agents[b].z = agents[b].z, z
        t2 = time.perf_counter()

        post = _route(post_z_messages(agents[b], k) for b in buses)
        inbox_m = {b: inbox_z.get(b, []) + post.get(b, []) for b in buses}
        contrib = self._map(lambda b: local_residual_contrib(agents[b], inbox_m[b]), buses)
        for b, mult in zip(buses, self._phase(multiplier_update, inbox_m)):
            agents[b].mult = mult
        t3 = time.perf_counter()

        self.times.x += t1 - t0
        self.times.z += t2 - t1
        self.times.mult += t3 - t2
        self.iter = k

        # ascending bus order, one square root per residual
        r = math.sqrt(math.fsum(c[0] for c in contrib))
        s = self.config.rho * math.sqrt(math.fsum(c[1] for c in contrib))
        return r, s

    def objective(self) -> float:
        return math.fsum(local_objective(self.agents[b]) for b in self.net.buses())

    def solution(self, r: float, s: float, status: Status) -> Solution:
        buses, lines = {}, {}
        for b in self.net.buses():
            z = self.agents[b].z
            buses[b] = BusSolution(z.v, z.p, z.q)
            if not self.net.is_root(b):
                lines[b] = LineSolution(z.P, z.Q, z.l)
        return Solution(buses, lines, self.iter, r, s, status)


def run(net: RadialNetwork, cfg: SolveConfig,
        on_row: Optional[Callable[[TraceRow], None]] = None) -> Tuple[Solution, Trace]:
    """
    Iterate rounds until r and s are both <= tol_scale * sqrt(N), or max_iters.

    Hitting max_iters is reported through Trace.status, not raised.
    """
    n = net.n_buses
    tol = cfg.tol_scale * math.sqrt(n)
    log.info(f"🚀 ADMM | buses={n} rho={cfg.rho} tol={tol:.3e} max_iters={cfg.max_iters} "
             f"workers={cfg.parallelism}")

    trace = Trace()
    r = s = math.inf
    with Engine(net, cfg) as engine:
        for _ in range(cfg.max_iters):
            r, s = engine.round()
            row = TraceRow(engine.iter, r, s, engine.objective())
            trace.rows.append(row)
            if on_row is not None:
                on_row(row)
            log.debug(f"iter {row.iter}: r={r:.3e} s={s:.3e} obj={row.objective:.6f}")
            if config.LOG_EVERY > 0 and row.iter % config.LOG_EVERY == 0:
                log.info(f"iter {row.iter}: r={r:.3e} s={s:.3e} obj={row.objective:.6f}")
            if not (math.isfinite(r) and math.isfinite(s)):
                log.warning(f"residuals diverged at iter {row.iter} (r={r}, s={s})")
                break
            if r <= tol and s <= tol:
                trace.status = Status.CONVERGED
                break
        trace.times = engine.times
        sol = engine.solution(r, s, trace.status)

    if trace.status is Status.CONVERGED:
        log.info(f"✅ Converged after {sol.iterations} iterations (r={r:.3e}, s={s:.3e})")
    else:
        log.info(f"⏹️ Stopped at {sol.iterations} iterations without convergence (r={r:.3e}, s={s:.3e})")
    return sol, trace


# ---------- diagnostics ----------

def exactness_gap(sol: Solution, net: RadialNetwork) -> Dict[int, float]:
    """v_i l_i - |S_i|^2 per line; zero where the relaxation is tight."""
    out = {}
    for b, ln in sol.lines.items():
        out[b] = sol.buses[b].v * ln.l - (ln.P * ln.P + ln.Q * ln.Q)
    return out


def flow_residual(sol: Solution, net: RadialNetwork) -> float:
    """Largest violation of the voltage-drop and power-balance equations."""
    worst = 0.0
    for b in net.buses():
        P_in = sum(sol.lines[j].P - net.line[j].r * sol.lines[j].l for j in net.kids(b))
        Q_in = sum(sol.lines[j].Q - net.line[j].x * sol.lines[j].l for j in net.kids(b))
        own = sol.lines.get(b, LineSolution(0.0, 0.0, 0.0))
        bus = sol.buses[b]
        worst = max(worst, abs(P_in + bus.p - own.P), abs(Q_in + bus.q - own.Q))
        if not net.is_root(b):
            ln = net.line[b]
            drop = (sol.buses[net.parent[b]].v - bus.v + 2.0 * (ln.r * own.P + ln.x * own.Q)
                    - own.l * ln.z_sq)
            worst = max(worst, abs(drop))
    return worst


def total_loss(sol: Solution, net: RadialNetwork) -> float:
    return math.fsum(net.line[b].r * ln.l for b, ln in sol.lines.items())


def objective(sol: Solution, net: RadialNetwork) -> float:
    total = []
    for b, bus in sol.buses.items():
        sp = net.spec[b]
        total.append(0.5 * sp.alpha * bus.p * bus.p + sp.beta * bus.p)
    return math.fsum(total)


# ---------- serialization ----------

class TraceWriter:
    """Streams trace rows to CSV, flushing after every row."""

    def __init__(self, path: str):
        self._fh: TextIO = open(path, "w", newline="", encoding="utf-8")
        self._w = csv.writer(self._fh, lineterminator="\n")
        self._w.writerow(TRACE_HEADER)
        self._fh.flush()

    def __call__(self, row: TraceRow) -> None:
        self._w.writerow([row.iter, repr(row.r), repr(row.s), repr(row.objective)])
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self) -> "TraceWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def trace_csv(trace: Trace) -> str:
    lines = [",".join(TRACE_HEADER)]
    for row in trace.rows:
        lines.append(f"{row.iter},{row.r!r},{row.s!r},{row.objective!r}")
    return "\n".join(lines) + "\n"


def write_trace_csv(trace: Trace, path: str) -> None:
    write_text_atomic(path, trace_csv(trace))


def solution_to_doc(sol: Solution) -> dict:
    return {
        "status": sol.status.value,
        "iterations": sol.iterations,
        "r": sol.r,
        "s": sol.s,
        "buses": [{"id": b, "v": x.v, "p": x.p, "q": x.q} for b, x in sorted(sol.buses.items())],
        "lines": [{"from": b, "P": x.P, "Q": x.Q, "l": x.l} for b, x in sorted(sol.lines.items())],
    }


def write_solution(sol: Solution, path: str) -> None:
    write_json_atomic(path, solution_to_doc(sol))


# ---------- size / diameter study ----------

@dataclass(frozen=True)
class SweepRow:
    topology: str
    n: int
    diameter: int
    iterations: int
    status: Status
    seconds: float


def sweep(topologies: Sequence[str], sizes: Sequence[int], profile: LoadProfile,
          cfg: SolveConfig) -> List[SweepRow]:
    """Solve every generated (topology, size) network with the same profile and config."""
    rows = []
    for topo in topologies:
        if topo not in GENERATORS:
            raise ValueError(f"unknown topology {topo!r} (choose from {', '.join(GENERATORS)})")
        for n in sizes:
            net = GENERATORS[topo](n, profile)
            t0 = time.perf_counter()
            sol, trace = run(net, cfg)
            row = SweepRow(topo, n, diameter(net), sol.iterations, trace.status, time.perf_counter() - t0)
            log.info(f"sweep {topo} n={n} D={row.diameter}: {row.iterations} iterations ({row.status.value})")
            rows.append(row)
    return rows


def fit_iteration_model(rows: Sequence[SweepRow]) -> Tuple[float, float]:
    """Least-squares (a, b) for iterations ~ a * N + b * D."""
    if len(rows) < 2:
        raise ValueError(f"need at least 2 sweep rows to fit, got {len(rows)}")
    X = np.array([[row.n, row.diameter] for row in rows], dtype=float)
    y = np.array([row.iterations for row in rows], dtype=float)
    (a, b), *_ = np.linalg.lstsq(X, y, rcond=None)
    return float(a), float(b)

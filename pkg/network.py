"""
Radial Network Model

Buses are dense integers 0..N-1 with bus 0 the substation. Line i runs from
bus i to its parent A_i, so every non-root bus owns exactly one line.

Power quantities are per-unit, voltage and current quantities are per-unit
squared (v = |V|^2, l = |I|^2).

Document format (JSON, canonical = sorted keys, ascending ids):
    {"version": 1,
     "buses": [{"id", "v_lo", "v_hi", "alpha", "beta",
                "injection": {"kind": "box", "p_lo", "p_hi", "q_lo", "q_hi"}
                           | {"kind": "disk", "s_max"}}],
     "lines": [{"from": child id, "to": parent id, "r", "x"}]}
"""

import json
import logging
import math
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Any, Dict, List, Mapping, Optional, Tuple, Union

import networkx as nx
import numpy as np

import config
from storage import canonical_json

log = logging.getLogger("ropf.network")

DOC_VERSION = 1
ROOT = 0

# Voltage band for load buses: +-5% around nominal, squared
V_LO_DEFAULT = 0.95 ** 2
V_HI_DEFAULT = 1.05 ** 2


class NetworkFormatError(ValueError):
    """Malformed network document."""


class NetworkValidationError(ValueError):
    """One or more network invariants are violated."""

    def __init__(self, problems: List[str]):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


@dataclass(frozen=True)
class LineParams:
    r: float
    x: float

    @property
    def z_sq(self) -> float:
        return self.r * self.r + self.x * self.x


@dataclass(frozen=True)
class Box:
    """Controllable load: independent bounds on p and q."""
    p_lo: float
    p_hi: float
    q_lo: float
    q_hi: float
    kind: str = field(default="box", init=False)


@dataclass(frozen=True)
class Disk:
    """Inverter-connected PV: p >= 0 and p^2 + q^2 <= s_max^2."""
    s_max: float
    kind: str = field(default="disk", init=False)


InjectionRegion = Union[Box, Disk]


@dataclass(frozen=True)
class BusSpec:
    injection: InjectionRegion
    v_lo: float
    v_hi: float
    alpha: float = 0.0
    beta: float = 0.0


@dataclass(frozen=True)
class RadialNetwork:
    n_buses: int
    parent: Mapping[int, int]
    children: Mapping[int, Tuple[int, ...]]
    line: Mapping[int, LineParams]
    spec: Mapping[int, BusSpec]

    @classmethod
    def from_parts(
        cls,
        parent: Dict[int, int],
        line: Dict[int, LineParams],
        spec: Dict[int, BusSpec],
    ) -> "RadialNetwork":
        """Build a network, deriving the canonical (ascending) children lists."""
        children: Dict[int, List[int]] = {b: [] for b in spec}
        for child, par in parent.items():
            children.setdefault(par, []).append(child)
        return cls(
            n_buses=len(spec),
            parent=MappingProxyType(dict(sorted(parent.items()))),
            children=MappingProxyType({b: tuple(sorted(c)) for b, c in sorted(children.items())}),
            line=MappingProxyType(dict(sorted(line.items()))),
            spec=MappingProxyType(dict(sorted(spec.items()))),
        )

    def buses(self) -> range:
        return range(self.n_buses)

    def is_root(self, bus: int) -> bool:
        return bus == ROOT

    def kids(self, bus: int) -> Tuple[int, ...]:
        return self.children.get(bus, ())


# ---------- validation ----------

def _finite(*vals: float) -> bool:
    return all(isinstance(v, (int, float)) and math.isfinite(v) for v in vals)


def _tree_problems(net: RadialNetwork) -> List[str]:
    problems = []
    n = net.n_buses
    expected = set(range(1, n))
    if set(net.parent) != expected:
        missing = sorted(expected - set(net.parent))
        extra = sorted(set(net.parent) - expected)
        if missing:
            problems.append(f"buses {missing}: no parent (not a tree)")
        if extra:
            problems.append(f"parent map has unknown buses {extra}")
    for b, a in net.parent.items():
        if not (0 <= a < n):
            problems.append(f"bus {b}: parent {a} out of range")
    if set(net.line) != set(net.parent):
        problems.append(f"lines {sorted(set(net.line) ^ set(net.parent))}: line/parent mismatch")

    # every bus must reach the root without revisiting a bus
    upward = nx.DiGraph()
    upward.add_edges_from((b, a) for b, a in net.parent.items() if b != ROOT and 0 <= a < n)
    for b in sorted(net.parent):
        if b not in upward:
            continue
        try:
            cycle = nx.find_cycle(upward, source=b)
        except nx.NetworkXNoCycle:
            continue
        problems.append(f"bus {b}: not a tree (cycle through bus {cycle[0][0]})")

    for b, kids in net.children.items():
        if list(kids) != sorted(kids):
            problems.append(f"bus {b}: children not in ascending order")
        for c in kids:
            if net.parent.get(c) != b:
                problems.append(f"bus {b}: child {c} does not point back to it")
    return problems


def validate(net: RadialNetwork) -> None:
    """Raise NetworkValidationError listing every violated invariant."""
    problems: List[str] = []
    n = net.n_buses
    if n < 1:
        raise NetworkValidationError(["network has no buses"])
    if set(net.spec) != set(range(n)):
        problems.append(f"bus ids must be dense 0..{n - 1}")

    problems += _tree_problems(net)

    for b, ln in net.line.items():
        if not _finite(ln.r, ln.x):
            problems.append(f"line {b}: non-finite impedance")
        elif ln.r < 0 or ln.x < 0:
            problems.append(f"line {b}: negative impedance r={ln.r} x={ln.x}")
        elif ln.z_sq <= 0:
            problems.append(f"line {b}: zero impedance")

    for b, sp in net.spec.items():
        if not _finite(sp.v_lo, sp.v_hi, sp.alpha, sp.beta):
            problems.append(f"bus {b}: non-finite bound or cost")
            continue
        if not (0 < sp.v_lo <= sp.v_hi):
            problems.append(f"bus {b}: need 0 < v_lo <= v_hi (got {sp.v_lo}, {sp.v_hi})")
        if b == ROOT and sp.v_lo != sp.v_hi:
            problems.append("bus 0: root voltage must be fixed (v_lo == v_hi)")
        if sp.alpha < 0:
            problems.append(f"bus {b}: alpha must be >= 0")
        inj = sp.injection
        if isinstance(inj, Box):
            if not _finite(inj.p_lo, inj.p_hi, inj.q_lo, inj.q_hi):
                problems.append(f"bus {b}: non-finite box bounds")
            else:
                if inj.p_lo > inj.p_hi:
                    problems.append(f"bus {b}: box p_lo > p_hi")
                if inj.q_lo > inj.q_hi:
                    problems.append(f"bus {b}: box q_lo > q_hi")
        elif isinstance(inj, Disk):
            if not _finite(inj.s_max) or inj.s_max < 0:
                problems.append(f"bus {b}: disk s_max must be >= 0")
        else:
            problems.append(f"bus {b}: unknown injection region {inj!r}")

    if problems:
        raise NetworkValidationError(problems)


# ---------- document codec ----------

def _num(obj: Dict[str, Any], key: str, where: str) -> float:
    if key not in obj:
        raise NetworkFormatError(f"{where}: missing field '{key}'")
    v = obj[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise NetworkFormatError(f"{where}: field '{key}' must be a number")
    return float(v)


def _int(obj: Dict[str, Any], key: str, where: str) -> int:
    v = obj.get(key)
    if isinstance(v, bool) or not isinstance(v, int):
        raise NetworkFormatError(f"{where}: field '{key}' must be an integer")
    return v


def _parse_injection(obj: Any, where: str) -> InjectionRegion:
    if not isinstance(obj, dict):
        raise NetworkFormatError(f"{where}: injection must be an object")
    kind = obj.get("kind")
    if kind == "box":
        return Box(*(_num(obj, k, where) for k in ("p_lo", "p_hi", "q_lo", "q_hi")))
    if kind == "disk":
        return Disk(_num(obj, "s_max", where))
    raise NetworkFormatError(f"{where}: unknown injection kind {kind!r}")


def load_network(data: Union[bytes, str]) -> RadialNetwork:
    """Parse and validate a network document."""
    try:
        doc = json.loads(data)
    except (ValueError, UnicodeDecodeError) as e:
        raise NetworkFormatError(f"not a JSON document: {e}") from e
    if not isinstance(doc, dict):
        raise NetworkFormatError("top level must be an object")
    if doc.get("version") != DOC_VERSION:
        raise NetworkFormatError(f"unsupported version {doc.get('version')!r}")
    buses = doc.get("buses")
    lines = doc.get("lines")
    if not isinstance(buses, list) or not isinstance(lines, list):
        raise NetworkFormatError("'buses' and 'lines' must be arrays")

    spec: Dict[int, BusSpec] = {}
    for item in buses:
        if not isinstance(item, dict):
            raise NetworkFormatError("bus entries must be objects")
        bid = _int(item, "id", "bus")
        where = f"bus {bid}"
        if bid in spec:
            raise NetworkFormatError(f"{where}: duplicate id")
        spec[bid] = BusSpec(
            injection=_parse_injection(item.get("injection"), where),
            v_lo=_num(item, "v_lo", where),
            v_hi=_num(item, "v_hi", where),
            alpha=_num(item, "alpha", where),
            beta=_num(item, "beta", where),
        )

    parent: Dict[int, int] = {}
    line: Dict[int, LineParams] = {}
    for item in lines:
        if not isinstance(item, dict):
            raise NetworkFormatError("line entries must be objects")
        child = _int(item, "from", "line")
        where = f"line {child}"
        if child in line:
            raise NetworkFormatError(f"{where}: duplicate line")
        parent[child] = _int(item, "to", where)
        line[child] = LineParams(_num(item, "r", where), _num(item, "x", where))

    for bid in spec:
        if bid != ROOT and bid not in line:
            raise NetworkFormatError(f"bus {bid}: missing line impedance")

    net = RadialNetwork.from_parts(parent, line, spec)
    validate(net)
    return net


def _injection_doc(inj: InjectionRegion) -> Dict[str, Any]:
    if isinstance(inj, Box):
        return {"kind": "box", "p_lo": inj.p_lo, "p_hi": inj.p_hi, "q_lo": inj.q_lo, "q_hi": inj.q_hi}
    return {"kind": "disk", "s_max": inj.s_max}


def network_to_doc(net: RadialNetwork) -> Dict[str, Any]:
    return {
        "version": DOC_VERSION,
        "buses": [
            {"id": b, "v_lo": sp.v_lo, "v_hi": sp.v_hi, "alpha": sp.alpha, "beta": sp.beta,
             "injection": _injection_doc(sp.injection)}
            for b, sp in sorted(net.spec.items())
        ],
        "lines": [
            {"from": b, "to": net.parent[b], "r": ln.r, "x": ln.x}
            for b, ln in sorted(net.line.items())
        ],
    }


def save_network(net: RadialNetwork) -> bytes:
    return canonical_json(network_to_doc(net)).encode("utf-8")


# ---------- topology ----------

def _feeder_graph(parent: Mapping[int, int], n: int) -> nx.DiGraph:
    """Lines directed parent -> child; successors come out in ascending id."""
    g = nx.DiGraph()
    g.add_nodes_from(range(n))
    g.add_edges_from((a, b) for b, a in sorted(parent.items()))
    return g


def feeder_graph(net: RadialNetwork) -> nx.DiGraph:
    return _feeder_graph(net.parent, net.n_buses)


def depth(net: RadialNetwork) -> Dict[int, int]:
    """Hop count of every bus from the root."""
    return dict(nx.single_source_shortest_path_length(feeder_graph(net), ROOT))


def diameter(net: RadialNetwork) -> int:
    """Longest hop count between two buses (two BFS passes)."""
    g = feeder_graph(net).to_undirected(as_view=True)
    first = nx.single_source_shortest_path_length(g, ROOT)
    far = max(first, key=lambda b: (first[b], -b))
    return max(nx.single_source_shortest_path_length(g, far).values())


def post_order(net: RadialNetwork) -> List[int]:
    """Every bus after all of its children, root last."""
    return list(nx.dfs_postorder_nodes(feeder_graph(net), ROOT))


def _fed_path_sum(parent: Mapping[int, int], n: int) -> int:
    """
    Largest sum, over the lines between the root and some bus, of the number
    of buses each line feeds. With unit demand at every bus and unit
    impedance on every line this is the deepest voltage drop.
    """
    g = _feeder_graph(parent, n)
    fed: Dict[int, int] = {}
    for b in nx.dfs_postorder_nodes(g, ROOT):
        fed[b] = 1 + sum(fed[c] for c in g.successors(b))
    path = {ROOT: 0}
    for a, b in nx.dfs_edges(g, ROOT):
        path[b] = path[a] + fed[b]
    return max(path.values())


# ---------- generators ----------

@dataclass(frozen=True)
class LoadProfile:
    """Seeded load/impedance recipe shared by every generator."""
    seed: int = 1
    pv_fraction: float = 0.2
    flex: float = 0.2
    objective: str = "loss"
    root_v: float = 1.0
    window: int = 0

    @classmethod
    def from_config(cls, seed: Optional[int] = None) -> "LoadProfile":
        return cls(
            seed=config.SEED if seed is None else seed,
            pv_fraction=config.PV_FRACTION,
            flex=config.LOAD_FLEX,
            objective=config.OBJECTIVE,
            root_v=config.ROOT_V,
            window=config.TREE_WINDOW,
        )


# Per-bus demand ranges before scaling
P_DEMAND_MAX = 0.05
Q_DEMAND_MAX = 0.02
PV_S_MAX = 0.03
# Line r and x: BASE_IMPEDANCE times a uniform jitter in [JITTER_LO, JITTER_HI]
BASE_IMPEDANCE = 0.01
JITTER_LO, JITTER_HI = 0.5, 1.5
# Worst-case voltage drop (squared pu) with every load at its maximum
DROP_BUDGET = 0.05
ROOT_BOX = 10.0
# Share of the substation box that peak demand may use
ROOT_SHARE = 0.5


def demand_scale(parent: Mapping[int, int], n: int) -> float:
    """
    Factor applied to every demand and PV rating of a generated feeder.

    Line impedances do not depend on the shape, so deep feeders get lighter
    loads: the worst-case voltage drop stays within DROP_BUDGET and peak
    demand within ROOT_SHARE of the substation box.
    """
    worst_drop = 2.0 * BASE_IMPEDANCE * JITTER_HI * (P_DEMAND_MAX + Q_DEMAND_MAX) * _fed_path_sum(parent, n)
    peak = (n - 1) * P_DEMAND_MAX
    return min(1.0, DROP_BUDGET / worst_drop, ROOT_SHARE * ROOT_BOX / peak)


def _assemble(parent: Dict[int, int], n: int, profile: LoadProfile, rng: np.random.Generator) -> RadialNetwork:
    if not 0.0 <= profile.flex <= 1.0:
        raise ValueError(f"flex must lie in [0, 1], got {profile.flex}")
    if profile.objective not in ("loss", "cost"):
        raise ValueError(f"objective must be 'loss' or 'cost', got {profile.objective!r}")

    scale = demand_scale(parent, n)

    line: Dict[int, LineParams] = {}
    spec: Dict[int, BusSpec] = {}
    loss = profile.objective == "loss"
    spec[ROOT] = BusSpec(
        injection=Box(-ROOT_BOX, ROOT_BOX, -ROOT_BOX, ROOT_BOX),
        v_lo=profile.root_v, v_hi=profile.root_v,
        alpha=0.0 if loss else 1.0, beta=1.0,
    )
    for b in range(1, n):
        jr, jx = rng.uniform(JITTER_LO, JITTER_HI, size=2)
        line[b] = LineParams(BASE_IMPEDANCE * jr, BASE_IMPEDANCE * jx)
        if rng.random() < profile.pv_fraction:
            inj: InjectionRegion = Disk(PV_S_MAX * scale)
        else:
            dp = rng.uniform(0.0, P_DEMAND_MAX) * scale
            dq = rng.uniform(0.0, Q_DEMAND_MAX) * scale
            keep = 1.0 - profile.flex
            inj = Box(-dp, -keep * dp, -dq, -keep * dq)
        spec[b] = BusSpec(inj, V_LO_DEFAULT, V_HI_DEFAULT, alpha=0.0, beta=1.0 if loss else 0.0)
    return RadialNetwork.from_parts(parent, line, spec)


def _check_size(n: int) -> None:
    if n < 2:
        raise ValueError(f"network needs at least 2 buses, got {n}")


def gen_line(n: int, profile: LoadProfile = LoadProfile()) -> RadialNetwork:
    """Path 0-1-...-(n-1): the largest diameter for its size."""
    _check_size(n)
    rng = np.random.default_rng(profile.seed)
    net = _assemble({i: i - 1 for i in range(1, n)}, n, profile, rng)
    log.debug(f"gen_line n={n} seed={profile.seed}")
    return net


def gen_fat_tree(n: int, profile: LoadProfile = LoadProfile()) -> RadialNetwork:
    """Star around the substation: diameter 2 for n >= 3."""
    _check_size(n)
    rng = np.random.default_rng(profile.seed)
    net = _assemble({i: ROOT for i in range(1, n)}, n, profile, rng)
    log.debug(f"gen_fat_tree n={n} seed={profile.seed}")
    return net


def gen_random_tree(n: int, profile: LoadProfile = LoadProfile()) -> RadialNetwork:
    """
    Random recursive tree: bus i hangs off a uniformly drawn earlier bus,
    which keeps the depth logarithmic in n. A positive `window` restricts
    the draw to the `window` most recent buses for long, feeder-like trees.
    """
    _check_size(n)
    if profile.window < 0:
        raise ValueError(f"window must be >= 0, got {profile.window}")
    rng = np.random.default_rng(profile.seed)
    w = profile.window
    parent = {i: int(rng.integers(max(0, i - w) if w else 0, i)) for i in range(1, n)}
    net = _assemble(parent, n, profile, rng)
    log.debug(f"gen_random_tree n={n} seed={profile.seed} window={profile.window}")
    return net


GENERATORS = {
    "line": gen_line,
    "fattree": gen_fat_tree,
    "random": gen_random_tree,
}

"""
Per-Bus ADMM Agent

Each bus keeps:
- x: its own copies (v, l, P, Q, p, q), a copy of the parent's voltage and,
  per child j, copies (l, P, Q) of that child's line quantities
- z: (v, l, P, Q, p, q) constrained by the cone, voltage box and injection region
- multipliers: lam_* for its own x/z pairs, mu_* and gamma for its parent edge

The multipliers of the parent edge live with the child: mu pairs the parent's
copy of the child's (l, S) with the child's z, gamma pairs the child's copy of
the parent's voltage with the parent's v_z. The child sends them upstream
whenever the parent needs them.

Complex powers are carried as (real, imaginary) float pairs.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from types import MappingProxyType
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Type, TypeVar

import numpy as np

from kernels import (
    BoxQP, ConeBoxQP, DiskQP, EqQPFactor, KernelError,
    solve_box_qp, solve_cone_box_qp, solve_disk_qp,
)
from network import Box, BusSpec, Disk, LineParams, RadialNetwork, post_order

log = logging.getLogger("ropf.agent")


class AgentError(RuntimeError):
    """Protocol violation between agents (missing or misrouted message)."""


# ---------- state ----------

@dataclass(frozen=True)
class ChildCopy:
    l: float
    P: float
    Q: float


@dataclass(frozen=True)
class LocalX:
    v: float
    l: float
    P: float
    Q: float
    p: float
    q: float
    v_parent: Optional[float] = None
    child_copies: Mapping[int, ChildCopy] = field(default_factory=dict)


@dataclass(frozen=True)
class LocalZ:
    v: float
    l: float
    P: float
    Q: float
    p: float
    q: float

    def as_array(self) -> np.ndarray:
        return np.array([self.v, self.l, self.P, self.Q, self.p, self.q])


@dataclass(frozen=True)
class Multipliers:
    lam_v: float = 0.0
    lam_l: float = 0.0
    lam_P: float = 0.0
    lam_Q: float = 0.0
    lam_p: float = 0.0
    lam_q: float = 0.0
    mu_l: float = 0.0
    mu_P: float = 0.0
    mu_Q: float = 0.0
    gamma: float = 0.0


@dataclass(frozen=True)
class HatTargets:
    P: float
    Q: float
    l: float
    v: float
    p: float
    q: float


@dataclass
class AgentState:
    bus: int
    parent: Optional[int]
    children: Tuple[int, ...]
    spec: BusSpec
    line: Optional[LineParams]
    child_lines: Mapping[int, LineParams]
    rho: float
    x: LocalX
    z: LocalZ
    z_prev: LocalZ
    mult: Multipliers
    eq: EqQPFactor = field(repr=False, compare=False)

    @property
    def is_root(self) -> bool:
        return self.parent is None


# ---------- messages ----------

@dataclass(frozen=True)
class Message:
    sender: int
    receiver: int
    iteration: int


@dataclass(frozen=True)
class ParentToChildPreX(Message):
    v_z: float


@dataclass(frozen=True)
class ChildToParentPreX(Message):
    l_z: float
    P_z: float
    Q_z: float
    mu_l: float
    mu_P: float
    mu_Q: float


@dataclass(frozen=True)
class ParentToChildPreZ(Message):
    l_copy: float
    P_copy: float
    Q_copy: float


@dataclass(frozen=True)
class ChildToParentPreZ(Message):
    v_copy: float
    gamma: float


@dataclass(frozen=True)
class ParentToChildPostZ(Message):
    v_z: float


M = TypeVar("M", bound=Message)


def _from_parent(state: AgentState, inbound: Iterable[Message], kind: Type[M]) -> Optional[M]:
    if state.is_root:
        return None
    for m in inbound:
        if isinstance(m, kind) and m.sender == state.parent and m.receiver == state.bus:
            return m
    raise AgentError(f"bus {state.bus}: missing {kind.__name__} from parent {state.parent}")


def _from_children(state: AgentState, inbound: Iterable[Message], kind: Type[M]) -> Dict[int, M]:
    got = {m.sender: m for m in inbound if isinstance(m, kind) and m.receiver == state.bus}
    missing = [j for j in state.children if j not in got]
    if missing:
        raise AgentError(f"bus {state.bus}: missing {kind.__name__} from children {missing}")
    return got


# ---------- initialization ----------

def _feasible_injection(spec: BusSpec) -> Tuple[float, float]:
    inj = spec.injection
    if isinstance(inj, Box):
        return (inj.p_lo + inj.p_hi) / 2.0, (inj.q_lo + inj.q_hi) / 2.0
    return 0.0, 0.0


def initial_z(net: RadialNetwork) -> Dict[int, LocalZ]:
    """
    Zero-impedance power flow: v = 1 (root at its fixed value), s at a
    canonical feasible point, S accumulated leaf to root, l = |S|^2 / v.
    """
    s = {b: _feasible_injection(net.spec[b]) for b in net.buses()}
    S: Dict[int, Tuple[float, float]] = {}
    for b in post_order(net):
        P = s[b][0] + sum(S[j][0] for j in net.kids(b))
        Q = s[b][1] + sum(S[j][1] for j in net.kids(b))
        S[b] = (P, Q)

    out = {}
    for b in net.buses():
        if net.is_root(b):
            out[b] = LocalZ(v=net.spec[b].v_lo, l=0.0, P=0.0, Q=0.0, p=s[b][0], q=s[b][1])
        else:
            P, Q = S[b]
            out[b] = LocalZ(v=1.0, l=P * P + Q * Q, P=P, Q=Q, p=s[b][0], q=s[b][1])
    return out


def constraint_matrix(state_line: Optional[LineParams], child_lines: Sequence[LineParams]) -> np.ndarray:
    """
    Rows of the x-update constraints in the agent's variable order.

    Non-root order: v, l, P, Q, p, q, v_parent, then (l, P, Q) per child.
    Root order: p, q, then (l, P, Q) per child (v, l, S are fixed there).
    """
    base = 2 if state_line is None else 7
    B = np.zeros((2 if state_line is None else 3, base + 3 * len(child_lines)))
    if state_line is None:
        bal_p, bal_q = 0, 1
        B[bal_p, 0] = 1.0
        B[bal_q, 1] = 1.0
    else:
        r, x = state_line.r, state_line.x
        B[0, 6] = 1.0                  # v_parent
        B[0, 0] = -1.0                 # v
        B[0, 2] = 2.0 * r              # P
        B[0, 3] = 2.0 * x              # Q
        B[0, 1] = -state_line.z_sq     # l
        bal_p, bal_q = 1, 2
        B[bal_p, 2], B[bal_p, 4] = -1.0, 1.0
        B[bal_q, 3], B[bal_q, 5] = -1.0, 1.0
    for k, ln in enumerate(child_lines):
        col = base + 3 * k
        B[bal_p, col] = -ln.r
        B[bal_p, col + 1] = 1.0
        B[bal_q, col] = -ln.x
        B[bal_q, col + 2] = 1.0
    return B


def init_state(net: RadialNetwork, bus: int, rho: float = 1.0,
               z0: Optional[Mapping[int, LocalZ]] = None) -> AgentState:
    """
    Agent state for one bus with x-copies equal to the initial z-values.

    Pass z0 from initial_z() when building every agent of a network.
    """
    if not rho > 0:
        raise ValueError(f"rho must be positive, got {rho}")
    if z0 is None:
        z0 = initial_z(net)
    z = z0[bus]
    parent = None if net.is_root(bus) else net.parent[bus]
    kids = net.kids(bus)
    line = None if parent is None else net.line[bus]
    child_lines = MappingProxyType({j: net.line[j] for j in kids})

    x = LocalX(
        v=z.v, l=z.l, P=z.P, Q=z.Q, p=z.p, q=z.q,
        v_parent=None if parent is None else z0[parent].v,
        child_copies=MappingProxyType({j: ChildCopy(z0[j].l, z0[j].P, z0[j].Q) for j in kids}),
    )
    B = constraint_matrix(line, [child_lines[j] for j in kids])
    try:
        eq = EqQPFactor(np.full(B.shape[1], rho), B)
    except KernelError as e:
        raise AgentError(f"bus {bus}: x-update constraints are degenerate: {e}") from e
    return AgentState(
        bus=bus, parent=parent, children=kids, spec=net.spec[bus], line=line,
        child_lines=child_lines, rho=rho, x=x, z=z, z_prev=z, mult=Multipliers(), eq=eq,
    )


def init_states(net: RadialNetwork, rho: float = 1.0) -> Dict[int, AgentState]:
    z0 = initial_z(net)
    return {b: init_state(net, b, rho, z0) for b in net.buses()}


# ---------- outbound messages ----------

def pre_x_messages(state: AgentState, iteration: int) -> List[Message]:
    out: List[Message] = [ParentToChildPreX(state.bus, j, iteration, state.z.v) for j in state.children]
    if not state.is_root:
        m = state.mult
        out.append(ChildToParentPreX(state.bus, state.parent, iteration,
                                     state.z.l, state.z.P, state.z.Q, m.mu_l, m.mu_P, m.mu_Q))
    return out


def pre_z_messages(state: AgentState, iteration: int) -> List[Message]:
    cc = state.x.child_copies
    out: List[Message] = [ParentToChildPreZ(state.bus, j, iteration, cc[j].l, cc[j].P, cc[j].Q)
                          for j in state.children]
    if not state.is_root:
        out.append(ChildToParentPreZ(state.bus, state.parent, iteration, state.x.v_parent, state.mult.gamma))
    return out


def post_z_messages(state: AgentState, iteration: int) -> List[Message]:
    return [ParentToChildPostZ(state.bus, j, iteration, state.z.v) for j in state.children]


# ---------- x-update ----------

def x_update(state: AgentState, inbound: Sequence[Message]) -> LocalX:
    """
    Minimize rho/2 |x - target|^2 + <mult, x> over the voltage-drop and
    power-balance rows. Needs the parent's v_z and each child's (z, mu).
    """
    rho, z, m = state.rho, state.z, state.mult
    up = _from_parent(state, inbound, ParentToChildPreX)
    down = _from_children(state, inbound, ChildToParentPreX)

    if state.is_root:
        c = [m.lam_p - rho * z.p, m.lam_q - rho * z.q]
    else:
        c = [
            m.lam_v - rho * z.v, m.lam_l - rho * z.l,
            m.lam_P - rho * z.P, m.lam_Q - rho * z.Q,
            m.lam_p - rho * z.p, m.lam_q - rho * z.q,
            m.gamma - rho * up.v_z,
        ]
    for j in state.children:
        d = down[j]
        c += [d.mu_l - rho * d.l_z, d.mu_P - rho * d.P_z, d.mu_Q - rho * d.Q_z]

    sol = state.eq.solve(np.asarray(c))
    base = 2 if state.is_root else 7
    copies = MappingProxyType({
        j: ChildCopy(float(sol[base + 3 * k]), float(sol[base + 3 * k + 1]), float(sol[base + 3 * k + 2]))
        for k, j in enumerate(state.children)
    })
    if state.is_root:
        return LocalX(v=state.spec.v_lo, l=0.0, P=0.0, Q=0.0, p=float(sol[0]), q=float(sol[1]),
                      v_parent=None, child_copies=copies)
    v, l, P, Q, p, q, vp = (float(t) for t in sol[:7])
    return LocalX(v=v, l=l, P=P, Q=Q, p=p, q=q, v_parent=vp, child_copies=copies)


# ---------- z-update ----------

def compute_hats(state: AgentState, inbound: Sequence[Message]) -> HatTargets:
    """
    Centres of the completed-square z objective.

    Needs the parent's copies of this bus's (l, S) and each child's
    (v_copy, gamma). At the root S and l are not variables and their
    hats are 0.
    """
    rho, x, m = state.rho, state.x, state.mult
    up = _from_parent(state, inbound, ParentToChildPreZ)
    down = _from_children(state, inbound, ChildToParentPreZ)

    v_sum = x.v + sum(down[j].v_copy for j in state.children)
    lam_sum = m.lam_v + sum(down[j].gamma for j in state.children)
    v_hat = (v_sum + lam_sum / rho) / (len(state.children) + 1)
    p_hat, q_hat = x.p + m.lam_p / rho, x.q + m.lam_q / rho

    if up is None:
        return HatTargets(P=0.0, Q=0.0, l=0.0, v=v_hat, p=p_hat, q=q_hat)
    return HatTargets(
        P=(x.P + up.P_copy) / 2.0 + (m.lam_P + m.mu_P) / (2.0 * rho),
        Q=(x.Q + up.Q_copy) / 2.0 + (m.lam_Q + m.mu_Q) / (2.0 * rho),
        l=(x.l + up.l_copy) / 2.0 + (m.lam_l + m.mu_l) / (2.0 * rho),
        v=v_hat, p=p_hat, q=q_hat,
    )


def cone_scale(n_children: int) -> Tuple[float, float]:
    """(kappa, k) with z3 = kappa * v and (z1^2+z2^2)/z3 <= k^2 z4 equivalent to |S|^2 <= v l."""
    kappa = math.sqrt((n_children + 1) / 2.0)
    return kappa, 1.0 / math.sqrt(kappa)


def injection_update(spec: BusSpec, rho: float, p_hat: float, q_hat: float) -> Tuple[float, float]:
    """argmin alpha/2 p^2 + beta p + rho/2 |s - s_hat|^2 over the injection region."""
    inj = spec.injection
    if isinstance(inj, Disk):
        if inj.s_max == 0:
            return 0.0, 0.0
        return solve_disk_qp(DiskQP(a1=spec.alpha + rho, a2=rho, b1=spec.beta - rho * p_hat,
                                    b2=-rho * q_hat, c=inj.s_max))
    return solve_box_qp(BoxQP(alpha=spec.alpha, beta=spec.beta, rho=rho, p_hat=p_hat, q_hat=q_hat,
                              p_lo=inj.p_lo, p_hi=inj.p_hi, q_lo=inj.q_lo, q_hi=inj.q_hi))


def z_update(state: AgentState, inbound: Sequence[Message]) -> LocalZ:
    hat = compute_hats(state, inbound)
    kappa, k = cone_scale(len(state.children))
    lo, hi = state.spec.v_lo, state.spec.v_hi
    cone = ConeBoxQP(c1=-2.0 * hat.P, c2=-2.0 * hat.Q, c3=-2.0 * kappa * hat.v, c4=-2.0 * hat.l,
                     k=k, z3_lo=kappa * lo, z3_hi=kappa * hi)
    z1, z2, z3, z4 = solve_cone_box_qp(cone)
    v = min(hi, max(z3 / kappa, lo))
    p, q = injection_update(state.spec, state.rho, hat.p, hat.q)
    if state.is_root:
        return LocalZ(v=v, l=0.0, P=0.0, Q=0.0, p=p, q=q)
    return LocalZ(v=v, l=z4, P=z1, Q=z2, p=p, q=q)


# ---------- multipliers and residuals ----------

def _pair_gaps(state: AgentState, inbound: Sequence[Message]) -> List[float]:
    """x-side minus z-side of every consensus pair this bus owns."""
    x, z = state.x, state.z
    gaps = [x.v - z.v, x.l - z.l, x.P - z.P, x.Q - z.Q, x.p - z.p, x.q - z.q]
    if not state.is_root:
        copy = _from_parent(state, inbound, ParentToChildPreZ)
        post = _from_parent(state, inbound, ParentToChildPostZ)
        gaps += [copy.l_copy - z.l, copy.P_copy - z.P, copy.Q_copy - z.Q, x.v_parent - post.v_z]
    return gaps


def multiplier_update(state: AgentState, inbound: Sequence[Message]) -> Multipliers:
    """
    Each multiplier moves by rho * (x-side - z-side) of its pair.

    Non-root buses need the parent's ParentToChildPreZ copies and the
    parent's fresh v_z (ParentToChildPostZ).
    """
    g = [state.rho * t for t in _pair_gaps(state, inbound)]
    m = state.mult
    out = replace(m, lam_v=m.lam_v + g[0], lam_l=m.lam_l + g[1], lam_P=m.lam_P + g[2],
                  lam_Q=m.lam_Q + g[3], lam_p=m.lam_p + g[4], lam_q=m.lam_q + g[5])
    if not state.is_root:
        out = replace(out, mu_l=m.mu_l + g[6], mu_P=m.mu_P + g[7], mu_Q=m.mu_Q + g[8], gamma=m.gamma + g[9])
    return out


def local_residual_contrib(state: AgentState, inbound: Sequence[Message]) -> Tuple[float, float]:
    """(r_sq, s_sq): squared gaps of this bus's pairs and |z - z_prev|^2."""
    r_sq = math.fsum(t * t for t in _pair_gaps(state, inbound))
    dz = state.z.as_array() - state.z_prev.as_array()
    return r_sq, math.fsum(dz * dz)


def local_objective(state: AgentState) -> float:
    p = state.z.p
    return 0.5 * state.spec.alpha * p * p + state.spec.beta * p

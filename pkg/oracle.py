"""
Reference Solvers

Slow, independent solvers used by the tests, the kernel check and the small
network acceptance runs. Nothing here reuses the closed-form kernels:
- cone-box: grid search, then L-BFGS-B and a compass search on the reduced
  objective (z4 eliminated)
- disk: polar grid plus bounded line searches on the arc and the p = 0 edge
- small networks: the whole relaxation as one SLSQP problem
"""

import logging
import math
from dataclasses import dataclass
from typing import List, Mapping, Optional, Tuple

import numpy as np
from scipy.optimize import minimize, minimize_scalar

import config
from network import Box, Disk, RadialNetwork, post_order

log = logging.getLogger("ropf.oracle")

MAX_ORACLE_BUSES = 6
FEASIBILITY_TOL = 1e-7


class OracleError(RuntimeError):
    """No feasible point found for a reference instance."""


@dataclass(frozen=True)
class OracleConfig:
    grid: int = 60
    refine: int = 200
    tol: float = 1e-10

    def __post_init__(self):
        if self.grid < 50:
            raise ValueError(f"oracle grid must be >= 50 points per axis, got {self.grid}")
        if self.refine < 1:
            raise ValueError(f"oracle refine must be >= 1, got {self.refine}")
        if not 0 < self.tol <= 1e-8:
            raise ValueError(f"oracle tol must lie in (0, 1e-8], got {self.tol}")

    @classmethod
    def from_config(cls) -> "OracleConfig":
        return cls(grid=config.ORACLE_GRID, refine=config.ORACLE_REFINE, tol=config.ORACLE_TOL)


def _compass(f, x0: np.ndarray, lo: np.ndarray, hi: np.ndarray, step: float, cfg: OracleConfig,
             project=None) -> Tuple[np.ndarray, float]:
    """Projected compass search with halving steps."""
    dirs = []
    n = x0.size
    for i in range(n):
        e = np.zeros(n)
        e[i] = 1.0
        dirs += [e, -e]
    if n >= 2:
        d = np.zeros(n)
        d[:2] = (1.0, 1.0)
        dirs += [d / math.sqrt(2), -d / math.sqrt(2)]
        d = np.zeros(n)
        d[:2] = (1.0, -1.0)
        dirs += [d / math.sqrt(2), -d / math.sqrt(2)]

    x, fx = x0.copy(), f(x0)
    sweeps = 0
    while step >= cfg.tol and sweeps < cfg.refine:
        improved = False
        for d in dirs:
            y = np.clip(x + step * d, lo, hi)
            if project is not None:
                y = project(y)
            fy = f(y)
            if fy < fx:
                x, fx, improved = y, fy, True
        if not improved:
            step /= 2.0
            sweeps += 1
    return x, fx


# ---------- equality-constrained QP ----------

def oracle_eq_qp(q) -> Tuple[np.ndarray, float]:
    """Dense KKT solve of [[A, B'], [B, 0]] [x; nu] = [-c; 0]."""
    a = np.asarray(q.a_diag, dtype=float)
    B = np.atleast_2d(np.asarray(q.B, dtype=float))
    c = np.asarray(q.c, dtype=float)
    n, m = a.size, B.shape[0]
    K = np.zeros((n + m, n + m))
    K[:n, :n] = np.diag(a)
    K[:n, n:] = B.T
    K[n:, :n] = B
    sol = np.linalg.lstsq(K, np.concatenate([-c, np.zeros(m)]), rcond=None)[0]
    x = sol[:n]
    return x, float(0.5 * np.dot(a * x, x) + np.dot(c, x))


# ---------- cone-box ----------

def _cone_reduced(c: np.ndarray, k2: float, z1, z2, z3):
    """Objective with z4 at its best value given (z1, z2, z3)."""
    w = (z1 * z1 + z2 * z2) / (k2 * z3)
    z4 = np.maximum(w, -c[3] / 2.0)
    return z1 * z1 + c[0] * z1 + z2 * z2 + c[1] * z2 + z3 * z3 + c[2] * z3 + z4 * z4 + c[3] * z4, w


def oracle_cone_box(q, cfg: OracleConfig = OracleConfig()) -> Tuple[Tuple[float, float, float, float], float]:
    """Minimize sum(z_i^2 + c_i z_i) s.t. (z1^2+z2^2)/z3 <= k^2 z4, z3 in [z3_lo, z3_hi]."""
    lo3, hi3 = q.z3_lo, q.z3_hi
    if not (0 < lo3 <= hi3) or not q.k > 0:
        raise OracleError(f"infeasible cone-box instance: z3 in [{lo3}, {hi3}], k={q.k}")
    c = np.array([q.c1, q.c2, q.c3, q.c4], dtype=float)
    k2 = q.k * q.k
    # optimal z1 lies between 0 and -c1/2 (same for z2)
    lo = np.array([min(0.0, -c[0] / 2), min(0.0, -c[1] / 2), lo3])
    hi = np.array([max(0.0, -c[0] / 2), max(0.0, -c[1] / 2), hi3])

    axes = [np.linspace(lo[i], hi[i], cfg.grid) for i in range(3)]
    g1, g2, g3 = np.meshgrid(*axes, indexing="ij")
    vals, _ = _cone_reduced(c, k2, g1, g2, g3)
    best = np.unravel_index(np.argmin(vals), vals.shape)
    x0 = np.array([g1[best], g2[best], g3[best]])

    def f(x):
        return float(_cone_reduced(c, k2, x[0], x[1], x[2])[0])

    def fg(x):
        val, w = _cone_reduced(c, k2, x[0], x[1], x[2])
        slope = max(2.0 * w + c[3], 0.0)
        return float(val), np.array([
            2 * x[0] + c[0] + slope * 2 * x[0] / (k2 * x[2]),
            2 * x[1] + c[1] + slope * 2 * x[1] / (k2 * x[2]),
            2 * x[2] + c[2] - slope * w / x[2],
        ])

    res = minimize(fg, x0, jac=True, method="L-BFGS-B", bounds=list(zip(lo, hi)),
                   options={"ftol": 1e-15, "gtol": 1e-12, "maxiter": 2000})
    x1 = np.clip(res.x, lo, hi) if f(np.clip(res.x, lo, hi)) < f(x0) else x0
    step = max(float(np.max(hi - lo)) / cfg.grid, 1e-6)
    x, _ = _compass(f, x1, lo, hi, step, cfg)

    z1, z2, z3 = (float(t) for t in x)
    z4 = max((z1 * z1 + z2 * z2) / (k2 * z3), -c[3] / 2.0)
    z = (z1, z2, z3, z4)
    return z, float(sum(zi * zi + ci * zi for zi, ci in zip(z, c)))


# ---------- disk ----------

def oracle_disk(q, cfg: OracleConfig = OracleConfig()) -> Tuple[float, float, float]:
    """Minimize a1/2 p^2 + b1 p + a2/2 q^2 + b2 q over p >= 0, p^2 + q^2 <= c^2."""
    a1, a2, b1, b2, rad = q.a1, q.a2, q.b1, q.b2, q.c

    def f(p, qq):
        return 0.5 * a1 * p * p + b1 * p + 0.5 * a2 * qq * qq + b2 * qq

    cands: List[Tuple[float, float]] = []
    r = np.linspace(0.0, rad, cfg.grid)
    th = np.linspace(-math.pi / 2, math.pi / 2, cfg.grid)
    R, T = np.meshgrid(r, th, indexing="ij")
    P, Q = R * np.cos(T), R * np.sin(T)
    vals = f(P, Q)
    i, j = np.unravel_index(np.argmin(vals), vals.shape)
    cands.append((float(P[i, j]), float(Q[i, j])))

    pu, qu = -b1 / a1, -b2 / a2
    if pu >= 0 and pu * pu + qu * qu <= rad * rad:
        cands.append((pu, qu))

    # arc: bounded search around every local minimum of the sampled arc
    arc = f(rad * np.cos(th), rad * np.sin(th))
    dth = th[1] - th[0]
    for m in range(cfg.grid):
        if (m == 0 or arc[m] <= arc[m - 1]) and (m == cfg.grid - 1 or arc[m] <= arc[m + 1]):
            lo_t, hi_t = max(-math.pi / 2, th[m] - dth), min(math.pi / 2, th[m] + dth)
            res = minimize_scalar(lambda t: f(rad * math.cos(t), rad * math.sin(t)),
                                  bounds=(lo_t, hi_t), method="bounded", options={"xatol": cfg.tol})
            cands.append((max(0.0, rad * math.cos(res.x)), rad * math.sin(res.x)))

    # p = 0 edge
    res = minimize_scalar(lambda t: f(0.0, t), bounds=(-rad, rad), method="bounded", options={"xatol": cfg.tol})
    cands.append((0.0, float(res.x)))

    def project(y):
        p, qq = max(y[0], 0.0), y[1]
        n = math.hypot(p, qq)
        return np.array([p * rad / n, qq * rad / n]) if n > rad else np.array([p, qq])

    p0, q0 = min(cands, key=lambda s: f(*s))
    x, _ = _compass(lambda y: f(y[0], y[1]), np.array([p0, q0]), np.array([0.0, -rad]),
                    np.array([rad, rad]), max(rad / cfg.grid, 1e-9), cfg, project)
    cands.append((float(x[0]), float(x[1])))
    p, qq = min(cands, key=lambda s: f(*s))
    return p, qq, f(p, qq)


# ---------- small networks ----------

@dataclass(frozen=True)
class OraclePoint:
    v: Mapping[int, float]
    p: Mapping[int, float]
    q: Mapping[int, float]
    P: Mapping[int, float]
    Q: Mapping[int, float]
    l: Mapping[int, float]


def objective(point, net: RadialNetwork) -> float:
    """sum of alpha/2 p^2 + beta p over buses."""
    total = 0.0
    for b in net.buses():
        sp, p = net.spec[b], point.p[b]
        total += 0.5 * sp.alpha * p * p + sp.beta * p
    return total


class _Layout:
    """Flat variable vector: (v, p, q) per bus, then (P, Q, l) per line."""

    def __init__(self, net: RadialNetwork):
        self.net = net
        self.lines = [b for b in net.buses() if not net.is_root(b)]
        self.n_bus = net.n_buses
        self.size = 3 * self.n_bus + 3 * len(self.lines)
        self._line_pos = {b: 3 * self.n_bus + 3 * k for k, b in enumerate(self.lines)}

    def v(self, b): return 3 * b
    def p(self, b): return 3 * b + 1
    def q(self, b): return 3 * b + 2
    def P(self, b): return self._line_pos[b]
    def Q(self, b): return self._line_pos[b] + 1
    def l(self, b): return self._line_pos[b] + 2


def _linear_rows(lay: _Layout) -> np.ndarray:
    net = lay.net
    rows = []
    for b in lay.lines:
        ln = net.line[b]
        row = np.zeros(lay.size)
        row[lay.v(net.parent[b])] += 1.0
        row[lay.v(b)] -= 1.0
        row[lay.P(b)] = 2.0 * ln.r
        row[lay.Q(b)] = 2.0 * ln.x
        row[lay.l(b)] = -ln.z_sq
        rows.append(row)
    for b in net.buses():
        rp, rq = np.zeros(lay.size), np.zeros(lay.size)
        for j in net.kids(b):
            rp[lay.P(j)] += 1.0
            rp[lay.l(j)] -= net.line[j].r
            rq[lay.Q(j)] += 1.0
            rq[lay.l(j)] -= net.line[j].x
        rp[lay.p(b)] += 1.0
        rq[lay.q(b)] += 1.0
        if not net.is_root(b):
            rp[lay.P(b)] -= 1.0
            rq[lay.Q(b)] -= 1.0
        rows += [rp, rq]
    return np.array(rows)


def _bounds(lay: _Layout) -> List[Tuple[Optional[float], Optional[float]]]:
    net = lay.net
    bnds: List[Tuple[Optional[float], Optional[float]]] = [(None, None)] * lay.size
    for b in net.buses():
        sp = net.spec[b]
        bnds[lay.v(b)] = (sp.v_lo, sp.v_hi)
        inj = sp.injection
        if isinstance(inj, Box):
            bnds[lay.p(b)] = (inj.p_lo, inj.p_hi)
            bnds[lay.q(b)] = (inj.q_lo, inj.q_hi)
        else:
            bnds[lay.p(b)] = (0.0, inj.s_max)
            bnds[lay.q(b)] = (-inj.s_max, inj.s_max)
    for b in lay.lines:
        bnds[lay.l(b)] = (0.0, None)
    return bnds


def _start(lay: _Layout, rng: Optional[np.random.Generator]) -> np.ndarray:
    """Lossless flow from an injection inside each region (random when rng is given)."""
    net = lay.net
    x = np.zeros(lay.size)
    for b in net.buses():
        sp = net.spec[b]
        inj = sp.injection
        t = rng.uniform(0.0, 1.0, size=2) if rng is not None else np.array([0.5, 0.5])
        if isinstance(inj, Box):
            x[lay.p(b)] = inj.p_lo + t[0] * (inj.p_hi - inj.p_lo)
            x[lay.q(b)] = inj.q_lo + t[1] * (inj.q_hi - inj.q_lo)
        elif rng is not None:
            rad, ang = inj.s_max * math.sqrt(t[0]), math.pi * (t[1] - 0.5)
            x[lay.p(b)], x[lay.q(b)] = rad * math.cos(ang), rad * math.sin(ang)
        x[lay.v(b)] = sp.v_lo if net.is_root(b) else min(sp.v_hi, max(1.0, sp.v_lo))
    for b in post_order(net):
        if net.is_root(b):
            continue
        x[lay.P(b)] = x[lay.p(b)] + sum(x[lay.P(j)] for j in net.kids(b))
        x[lay.Q(b)] = x[lay.q(b)] + sum(x[lay.Q(j)] for j in net.kids(b))
        x[lay.l(b)] = (x[lay.P(b)] ** 2 + x[lay.Q(b)] ** 2) / x[lay.v(b)]
    return x


def oracle_ropf_small(net: RadialNetwork, cfg: OracleConfig = OracleConfig(),
                      starts: int = 4) -> Tuple[float, OraclePoint]:
    """
    Solve the relaxed OPF of a network with at most 6 buses as one dense
    SLSQP problem, from a midpoint start plus seeded random starts.
    Returns the best objective among feasible results.
    """
    if net.n_buses > MAX_ORACLE_BUSES:
        raise ValueError(f"oracle handles at most {MAX_ORACLE_BUSES} buses, got {net.n_buses}")
    lay = _Layout(net)
    A = _linear_rows(lay)
    bnds = _bounds(lay)
    alpha = np.zeros(lay.size)
    beta = np.zeros(lay.size)
    for b in net.buses():
        alpha[lay.p(b)] = net.spec[b].alpha
        beta[lay.p(b)] = net.spec[b].beta
    disks = [b for b in net.buses() if isinstance(net.spec[b].injection, Disk)]

    def fun(x):
        return float(np.dot(0.5 * alpha * x, x) + np.dot(beta, x)), alpha * x + beta

    def ineq(x):
        out = [x[lay.v(b)] * x[lay.l(b)] - x[lay.P(b)] ** 2 - x[lay.Q(b)] ** 2 for b in lay.lines]
        out += [net.spec[b].injection.s_max ** 2 - x[lay.p(b)] ** 2 - x[lay.q(b)] ** 2 for b in disks]
        return np.array(out)

    def ineq_jac(x):
        J = np.zeros((len(lay.lines) + len(disks), lay.size))
        for k, b in enumerate(lay.lines):
            J[k, lay.v(b)] = x[lay.l(b)]
            J[k, lay.l(b)] = x[lay.v(b)]
            J[k, lay.P(b)] = -2.0 * x[lay.P(b)]
            J[k, lay.Q(b)] = -2.0 * x[lay.Q(b)]
        for k, b in enumerate(disks, start=len(lay.lines)):
            J[k, lay.p(b)] = -2.0 * x[lay.p(b)]
            J[k, lay.q(b)] = -2.0 * x[lay.q(b)]
        return J

    cons = [{"type": "eq", "fun": lambda x: A @ x, "jac": lambda x: A}]
    if lay.lines or disks:
        cons.append({"type": "ineq", "fun": ineq, "jac": ineq_jac})

    lo = np.array([-np.inf if b[0] is None else b[0] for b in bnds])
    hi = np.array([np.inf if b[1] is None else b[1] for b in bnds])
    rng = np.random.default_rng(0)
    best: Optional[Tuple[float, np.ndarray]] = None
    for k in range(max(1, starts)):
        x0 = _start(lay, None if k == 0 else rng)
        res = minimize(fun, x0, jac=True, method="SLSQP", bounds=bnds, constraints=cons,
                       options={"ftol": 1e-14, "maxiter": 1000})
        x = np.clip(res.x, lo, hi)
        viol = max(float(np.max(np.abs(A @ x))) if A.size else 0.0,
                   float(np.max(-ineq(x), initial=0.0)))
        val = fun(x)[0]
        log.debug(f"oracle start {k}: success={res.success} obj={val:.9g} violation={viol:.2e}")
        if viol <= FEASIBILITY_TOL and (best is None or val < best[0]):
            best = (val, x)
    if best is None:
        raise OracleError(f"no feasible point found for {net.n_buses}-bus network")

    x = best[1]
    point = OraclePoint(
        v={b: float(x[lay.v(b)]) for b in net.buses()},
        p={b: float(x[lay.p(b)]) for b in net.buses()},
        q={b: float(x[lay.q(b)]) for b in net.buses()},
        P={b: float(x[lay.P(b)]) for b in lay.lines},
        Q={b: float(x[lay.Q(b)]) for b in lay.lines},
        l={b: float(x[lay.l(b)]) for b in lay.lines},
    )
    return objective(point, net), point

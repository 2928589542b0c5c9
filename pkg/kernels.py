"""
Closed-Form Subproblem Kernels

Every ADMM step of the solver reduces to one of four small problems:

1. EqQP      min 1/2 x'Ax + c'x  s.t. Bx = 0, A positive diagonal (x-update)
2. ConeBoxQP min sum(z_i^2 + c_i z_i)  s.t. (z1^2+z2^2)/z3 <= k^2 z4, z3 in a box
3. DiskQP    separable quadratic over the half disk p >= 0, p^2+q^2 <= c^2
4. BoxQP     separable quadratic over a box

None of them iterates: the cone and disk problems are resolved by enumerating
KKT cases whose stationarity conditions become polynomials of degree <= 4.
"""

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import List, Sequence, Tuple

import numpy as np
from scipy import linalg

log = logging.getLogger("ropf.kernels")

RANK_TOL = 1e-10        # relative pivot size below which B is rank deficient
COEF_STRIP = 1e-14      # leading coefficients below this share of the max are dropped
IMAG_TOL = 1e-6         # eigenvalues with relative |imag| below this count as real
ROOT_RESIDUAL = 1e-9    # accepted |poly(root)| relative to the evaluation scale
MERGE_TOL = 1e-6        # roots closer than this (relative) are reported once
SIGN_TOL = 1e-9         # multipliers >= -SIGN_TOL * scale count as nonnegative


class KernelError(RuntimeError):
    """Numerical failure inside a closed-form kernel."""

    def __init__(self, message: str, instance=None):
        super().__init__(message)
        self.instance = instance


def clamp(x: float, lo: float, hi: float) -> float:
    """x clipped into [lo, hi]."""
    if lo > hi:
        raise ValueError(f"clamp bounds out of order: lo={lo} > hi={hi}")
    return min(hi, max(x, lo))


# ---------- polynomial roots ----------

def _polyval(c: Sequence[float], x: float) -> float:
    acc = 0.0
    for ci in c:
        acc = acc * x + ci
    return acc


def _eval_scale(c: Sequence[float], x: float) -> float:
    ax = abs(x)
    acc = 0.0
    for ci in c:
        acc = acc * ax + abs(ci)
    return acc


def _polish(c: Sequence[float], dc: Sequence[float], x: float) -> float:
    """A few guarded Newton steps; only improvements are kept."""
    fx = abs(_polyval(c, x))
    for _ in range(3):
        d = _polyval(dc, x)
        if d == 0.0 or fx == 0.0:
            break
        nx = x - _polyval(c, x) / d
        fn = abs(_polyval(c, nx))
        if not fn < fx:
            break
        x, fx = nx, fn
    return x


def _quadratic(a: float, b: float, c: float) -> List[float]:
    disc = b * b - 4.0 * a * c
    if disc < 0.0:
        if disc < -1e-14 * (b * b + abs(4.0 * a * c)):
            return []
        disc = 0.0
    q = -0.5 * (b + math.copysign(math.sqrt(disc), b))
    if q == 0.0:
        return [0.0]
    return [q / a, c / q]


def real_roots(coeffs: Sequence[float]) -> List[float]:
    """
    Real roots of a polynomial of degree <= 4.

    Args:
        coeffs: coefficients, highest degree first (numpy.polyval order)

    Returns:
        Distinct real roots in ascending order. Degrees 1-2 use the closed
        form, degrees 3-4 the eigenvalues of the companion matrix followed by
        Newton polishing.
    """
    c = np.asarray(coeffs, dtype=float).ravel()
    if c.size > 5:
        raise ValueError(f"degree {c.size - 1} > 4")
    if c.size == 0 or not np.all(np.isfinite(c)):
        raise ValueError("coefficients must be finite and non-empty")
    top = float(np.max(np.abs(c)))
    if top == 0.0:
        raise ValueError("zero polynomial has no isolated roots")
    lead = np.nonzero(np.abs(c) > COEF_STRIP * top)[0][0]
    c = c[lead:]
    deg = c.size - 1
    cl = c.tolist()

    if deg == 0:
        return []
    if deg == 1:
        cands = [-cl[1] / cl[0]]
    elif deg == 2:
        cands = _quadratic(cl[0], cl[1], cl[2])
    else:
        monic = c[1:] / c[0]
        comp = np.zeros((deg, deg))
        comp[0, :] = -monic
        comp[1:, :-1] = np.eye(deg - 1)
        eig = np.linalg.eigvals(comp)
        cands = [float(z.real) for z in eig if abs(z.imag) <= IMAG_TOL * (1.0 + abs(z.real))]

    c = cl
    dc = [ci * (deg - i) for i, ci in enumerate(cl[:-1])]
    found: List[Tuple[float, float]] = []
    for x in cands:
        x = _polish(c, dc, float(x))
        res = abs(_polyval(c, x))
        if res <= ROOT_RESIDUAL * max(_eval_scale(c, x), top):
            found.append((x, res))
    found.sort()

    roots: List[float] = []
    last_res = 0.0
    for x, res in found:
        if roots and abs(x - roots[-1]) <= MERGE_TOL * (1.0 + abs(x)):
            if res < last_res:
                roots[-1], last_res = x, res
            continue
        roots.append(x)
        last_res = res
    return roots


# ---------- equality-constrained QP ----------

@dataclass(frozen=True)
class EqQP:
    a_diag: np.ndarray
    B: np.ndarray
    c: np.ndarray


def check_rank(B: np.ndarray) -> None:
    """Raise KernelError unless B has full row rank (pivoted QR of B')."""
    m, n = B.shape
    if m == 0:
        return
    if m > n:
        raise KernelError(f"B has more rows ({m}) than columns ({n})")
    r = linalg.qr(B.T, mode="r", pivoting=True)[0]
    d = np.abs(np.diag(r))
    if d[0] == 0.0 or d[-1] <= RANK_TOL * d[0]:
        raise KernelError("B is rank deficient")


class EqQPFactor:
    """
    Solution maps of the x-update for a fixed (A, B), reusable across right-hand sides c.

    x = (A^-1 B'(B A^-1 B')^-1 B A^-1 - A^-1) c, and nu solves Ax + c + B'nu = 0.
    Both maps are built once from a Cholesky factor of B A^-1 B', so every
    solve is a matrix-vector product.
    """

    def __init__(self, a_diag: np.ndarray, B: np.ndarray):
        a = np.asarray(a_diag, dtype=float).ravel()
        B = np.asarray(B, dtype=float)
        if B.ndim == 1:
            B = B.reshape(1, -1) if B.size else B.reshape(0, a.size)
        if np.any(a <= 0) or not np.all(np.isfinite(a)):
            raise ValueError("A must be positive diagonal")
        if B.shape[1] != a.size:
            raise ValueError(f"dimension mismatch: A {a.size}, B {B.shape}")
        check_rank(B)
        self.a_inv = 1.0 / a
        self.B = B
        self._x_map = -np.diag(self.a_inv)
        self._nu_map = np.zeros((0, a.size))
        if B.shape[0]:
            BA = B * self.a_inv
            try:
                chol = linalg.cho_factor(BA @ B.T)
            except linalg.LinAlgError as e:
                raise KernelError(f"B A^-1 B' is not positive definite: {e}") from e
            y_map = linalg.cho_solve(chol, BA)
            self._x_map += BA.T @ y_map
            self._nu_map = -y_map

    def _rhs(self, c: np.ndarray) -> np.ndarray:
        c = np.asarray(c, dtype=float).ravel()
        if c.size != self.a_inv.size:
            raise ValueError(f"dimension mismatch: A {self.a_inv.size}, c {c.size}")
        return c

    def solve_kkt(self, c: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        c = self._rhs(c)
        return self._x_map @ c, self._nu_map @ c

    def solve(self, c: np.ndarray) -> np.ndarray:
        return self._x_map @ self._rhs(c)


def solve_eq_qp_kkt(q: EqQP) -> Tuple[np.ndarray, np.ndarray]:
    """Minimizer and multiplier of 1/2 x'Ax + c'x s.t. Bx = 0."""
    return EqQPFactor(q.a_diag, q.B).solve_kkt(q.c)


def solve_eq_qp(q: EqQP) -> np.ndarray:
    return solve_eq_qp_kkt(q)[0]


# ---------- cone-box QP ----------

@dataclass(frozen=True)
class ConeBoxQP:
    c1: float
    c2: float
    c3: float
    c4: float
    k: float
    z3_lo: float
    z3_hi: float

    def objective(self, z: Sequence[float]) -> float:
        cs = (self.c1, self.c2, self.c3, self.c4)
        return sum(zi * zi + ci * zi for zi, ci in zip(z, cs))

    def cone_violation(self, z: Sequence[float]) -> float:
        z1, z2, z3, z4 = z
        return max(0.0, (z1 * z1 + z2 * z2) / z3 - self.k * self.k * z4)


class ConeCase(Enum):
    INACTIVE = "case1"           # cone slack, mu = 0
    UPPER = "case2.1-upper"      # cone active, z3 at its upper bound
    LOWER = "case2.1-lower"      # cone active, z3 at its lower bound
    INTERIOR = "case2.2"         # cone active, z3 strictly inside


Point4 = Tuple[float, float, float, float]


def _best(q: ConeBoxQP, cands: List[Point4]) -> Point4:
    return min(cands, key=lambda z: (q.objective(z), z))


def solve_cone_box_qp_case(q: ConeBoxQP) -> Tuple[Point4, ConeCase]:
    """
    Solve the cone-box QP by KKT case enumeration.

    Cases are tried in order and the first one with a KKT-consistent
    candidate wins; within a case every real polynomial root is screened
    and the least objective survivor is returned.

    With mu > 0 write p = -1/(2(z3 + mu)), so z1 = c1 p z3 and z2 = c2 p z3.
    A zero c1 (or c2) then pins that coordinate to 0 without dividing by it.
    """
    c1, c2, c3, c4, k = q.c1, q.c2, q.c3, q.c4, q.k
    lo, hi = q.z3_lo, q.z3_hi
    if not (k > 0 and 0 < lo <= hi):
        raise ValueError(f"invalid cone-box instance: k={k}, z3 in [{lo}, {hi}]")
    k2 = k * k
    scale = max(1.0, abs(c1), abs(c2), abs(c3), abs(c4), hi)
    tol = SIGN_TOL * scale

    # Case 1: componentwise minimizer with z3 clamped
    z1, z2, z3, z4 = -c1 / 2.0, -c2 / 2.0, clamp(-c3 / 2.0, lo, hi), -c4 / 2.0
    if z1 * z1 + z2 * z2 <= k2 * z3 * z4:
        return (z1, z2, z3, z4), ConeCase.INACTIVE

    C = c1 * c1 + c2 * c2
    fixed = lo == hi

    # Case 2.1: z3 pinned at a bound, cubic in p
    for case, Z in ((ConeCase.UPPER, hi), (ConeCase.LOWER, lo)):
        cands: List[Point4] = []
        cubic = [4.0 * C / (k2 * k2), 0.0, 2.0 + 2.0 * c4 / (k2 * Z), 1.0 / Z]
        for p in real_roots(cubic):
            mu = -1.0 / (2.0 * p) - Z
            if mu < -tol:
                continue
            z1, z2 = c1 * p * Z, c2 * p * Z
            w = z1 * z1 + z2 * z2
            if not fixed:
                # z3 stationarity gives the bound multiplier
                g = 2.0 * Z + c3 - mu * w / (Z * Z)
                bound_mult = -g if case is ConeCase.UPPER else g
                if bound_mult < -tol:
                    continue
            cands.append((z1, z2, Z, w / (k2 * Z)))
        if cands:
            return _best(q, cands), case
        if fixed:
            break

    # Case 2.2: z3 interior, quartic in p
    if not fixed:
        cands = []
        quartic = [C * C / (k2 * k2), (C / k2) * (2.0 * c3 / k2 - c4), 0.0, c3 - 2.0 * c4 / k2, -1.0]
        for p in real_roots(quartic):
            if p >= 0.0:
                continue
            z3 = -(C * p + 2.0 * c3) / (2.0 * (C * p * p + 2.0))
            if z3 < lo - tol or z3 > hi + tol:
                continue
            z3 = clamp(z3, lo, hi)
            mu = -1.0 / (2.0 * p) - z3
            if mu < -tol:
                continue
            z1, z2 = c1 * p * z3, c2 * p * z3
            cands.append((z1, z2, z3, (z1 * z1 + z2 * z2) / (k2 * z3)))
        if cands:
            return _best(q, cands), ConeCase.INTERIOR

    log.warning(f"cone-box QP: no KKT-consistent candidate for {q}")
    raise KernelError("cone-box QP: no KKT-consistent candidate", q)


def solve_cone_box_qp(q: ConeBoxQP) -> Point4:
    return solve_cone_box_qp_case(q)[0]


# ---------- half-disk QP ----------

@dataclass(frozen=True)
class DiskQP:
    a1: float
    a2: float
    b1: float
    b2: float
    c: float

    def objective(self, p: float, q: float) -> float:
        return 0.5 * self.a1 * p * p + self.b1 * p + 0.5 * self.a2 * q * q + self.b2 * q

    def violation(self, p: float, q: float) -> float:
        return max(0.0, -p, math.hypot(p, q) - self.c)


def solve_disk_qp(q: DiskQP) -> Tuple[float, float]:
    """
    Minimize a1/2 p^2 + b1 p + a2/2 q^2 + b2 q over p >= 0, p^2 + q^2 <= c^2.

    Case 1 (b1 >= 0): p = 0, q clamped into [-c, c].
    Case 2 (b1 < 0, unconstrained optimum inside): p = -b1/a1, q = -b2/a2.
    Case 3 (b1 < 0, outside): the disk multiplier lam > 0 is the unique
    positive root of b1^2 (a2+2lam)^2 + b2^2 (a1+2lam)^2 = c^2 (a1+2lam)^2 (a2+2lam)^2.
    """
    a1, a2, b1, b2, c = q.a1, q.a2, q.b1, q.b2, q.c
    if not (a1 > 0 and a2 > 0 and c > 0):
        raise ValueError(f"invalid disk instance: {q}")
    if b1 >= 0:
        return 0.0, clamp(-b2 / a2, -c, c)
    p, qq = -b1 / a1, -b2 / a2
    if p * p + qq * qq <= c * c:
        return p, qq

    u = np.array([2.0, a1])
    w = np.array([2.0, a2])
    uu, ww = np.polymul(u, u), np.polymul(w, w)
    quartic = np.polysub(np.polyadd(b1 * b1 * ww, b2 * b2 * uu), c * c * np.polymul(uu, ww))
    best = None
    for lam in real_roots(quartic):
        if lam <= 0:
            continue
        pp, qv = -b1 / (a1 + 2.0 * lam), -b2 / (a2 + 2.0 * lam)
        gap = abs(math.hypot(pp, qv) - c)
        if best is None or gap < best[0]:
            best = (gap, pp, qv)
    if best is None:
        log.warning(f"disk QP: no positive multiplier for {q}")
        raise KernelError("disk QP: no positive multiplier root", q)
    _, p, qq = best
    # rounding can leave the point a hair outside the circle
    r = math.hypot(p, qq)
    if r > c:
        p, qq = p * c / r, qq * c / r
    return p, qq


# ---------- box QP ----------

@dataclass(frozen=True)
class BoxQP:
    alpha: float
    beta: float
    rho: float
    p_hat: float
    q_hat: float
    p_lo: float
    p_hi: float
    q_lo: float
    q_hi: float


def solve_box_qp(q: BoxQP) -> Tuple[float, float]:
    """Minimize alpha/2 p^2 + beta p + rho/2 |s - s_hat|^2 over a box."""
    if not q.alpha + q.rho > 0:
        raise ValueError(f"alpha + rho must be positive, got {q.alpha + q.rho}")
    p = clamp((q.rho * q.p_hat - q.beta) / (q.alpha + q.rho), q.p_lo, q.p_hi)
    return p, clamp(q.q_hat, q.q_lo, q.q_hi)

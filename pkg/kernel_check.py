"""
Kernel Fuzzing and Latency Bench

Seeded instance streams for every kernel family, a kernel-vs-oracle check
that serializes the first failing instance of each family for reproduction,
and a per-call latency benchmark.
"""

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional

import numpy as np

import kernels
from kernels import ConeBoxQP, DiskQP, EqQP
from oracle import OracleConfig, oracle_cone_box, oracle_disk, oracle_eq_qp
from storage import write_json_atomic

log = logging.getLogger("ropf.check")

# Acceptance tolerances
CONE_GAP = 1e-6
CONE_VIOLATION = 1e-8
DISK_GAP = 1e-6
DISK_VIOLATION = 1e-9
EQ_KKT = 1e-9
EQ_GAP = 1e-9

FAMILIES = ("eq_qp", "cone_box_qp", "disk_qp")


# ---------- instance streams ----------

def eq_instances(count: int, seed: int) -> Iterator[EqQP]:
    rng = np.random.default_rng([seed, 0])
    for _ in range(count):
        n = int(rng.integers(2, 21))
        m = int(rng.integers(1, min(10, n) + 1))
        yield EqQP(rng.uniform(0.1, 5.0, n), rng.normal(size=(m, n)), rng.normal(size=n))


def xupdate_instances(count: int, seed: int, max_children: int = 10) -> Iterator[EqQP]:
    """Instances shaped like a non-root agent's x-update (3 rows, 7 + 3 per child columns)."""
    rng = np.random.default_rng([seed, 3])
    for _ in range(count):
        kids = int(rng.integers(0, max_children + 1))
        n = 7 + 3 * kids
        B = np.zeros((3, n))
        r, x = rng.uniform(0.001, 0.05, 2)
        B[0, [6, 0, 2, 3, 1]] = [1.0, -1.0, 2 * r, 2 * x, -(r * r + x * x)]
        B[1, [2, 4]] = [-1.0, 1.0]
        B[2, [3, 5]] = [-1.0, 1.0]
        for k in range(kids):
            rj, xj = rng.uniform(0.001, 0.05, 2)
            col = 7 + 3 * k
            B[1, [col, col + 1]] = [-rj, 1.0]
            B[2, [col, col + 2]] = [-xj, 1.0]
        rho = float(rng.uniform(0.1, 10.0))
        yield EqQP(np.full(n, rho), B, rng.normal(size=n))


def cone_instances(count: int, seed: int) -> Iterator[ConeBoxQP]:
    rng = np.random.default_rng([seed, 1])
    for _ in range(count):
        c = rng.uniform(-5.0, 5.0, 4)
        lo, hi = np.sort(rng.uniform(1e-3, 3.0, 2))
        yield ConeBoxQP(*(float(t) for t in c), k=float(rng.uniform(0.3, 2.0)),
                        z3_lo=float(lo), z3_hi=float(hi))


def disk_instances(count: int, seed: int) -> Iterator[DiskQP]:
    rng = np.random.default_rng([seed, 2])
    for _ in range(count):
        a1, a2 = rng.uniform(0.1, 5.0, 2)
        b1, b2 = rng.uniform(-5.0, 5.0, 2)
        yield DiskQP(float(a1), float(a2), float(b1), float(b2), float(rng.uniform(0.1, 3.0)))


# ---------- check ----------

@dataclass
class FamilyReport:
    count: int = 0
    max_gap: float = 0.0
    max_violation: float = 0.0
    failures: int = 0
    repro: Optional[str] = None


@dataclass
class CheckReport:
    families: Dict[str, FamilyReport] = field(default_factory=lambda: {f: FamilyReport() for f in FAMILIES})

    @property
    def ok(self) -> bool:
        return all(r.failures == 0 for r in self.families.values())


def _instance_doc(q) -> dict:
    doc = dataclasses.asdict(q)
    return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in doc.items()}


def _record(report: FamilyReport, family: str, q, gap: float, viol: float, ok: bool,
            detail: dict, repro_dir: str) -> None:
    report.count += 1
    report.max_gap = max(report.max_gap, gap)
    report.max_violation = max(report.max_violation, viol)
    if ok:
        return
    report.failures += 1
    if report.repro is None:
        path = f"{repro_dir.rstrip('/')}/kernel_failure_{family}.json"
        write_json_atomic(path, {"family": family, "instance": _instance_doc(q),
                                 "gap": gap, "violation": viol, **detail})
        report.repro = path
        log.warning(f"❌ {family}: tolerance breach (gap={gap:.3e}, violation={viol:.3e}), saved {path}")


def _check_eq(q: EqQP) -> tuple:
    try:
        x, nu = kernels.solve_eq_qp_kkt(q)
    except kernels.KernelError as e:
        return math.inf, math.inf, False, {"error": str(e)}
    a, B, c = np.asarray(q.a_diag), np.atleast_2d(q.B), np.asarray(q.c)
    scale = max(1.0, float(np.max(np.abs(c))), float(np.max(a)), float(np.max(np.abs(B))))
    kkt = max(float(np.max(np.abs(a * x + c + B.T @ nu))), float(np.max(np.abs(B @ x))))
    obj = float(0.5 * np.dot(a * x, x) + np.dot(c, x))
    _, ref = oracle_eq_qp(q)
    gap = obj - ref
    ok = kkt <= EQ_KKT * scale and gap <= EQ_GAP * max(1.0, abs(ref))
    return gap, kkt, ok, {"x": x.tolist(), "oracle_objective": ref}


def _check_cone(q: ConeBoxQP, cfg: OracleConfig) -> tuple:
    try:
        z = kernels.solve_cone_box_qp(q)
    except kernels.KernelError as e:
        return math.inf, math.inf, False, {"error": str(e)}
    viol = q.cone_violation(z)
    box_ok = q.z3_lo <= z[2] <= q.z3_hi
    _, ref = oracle_cone_box(q, cfg)
    gap = q.objective(z) - ref
    ok = box_ok and viol <= CONE_VIOLATION and gap <= CONE_GAP
    return gap, viol, ok, {"z": list(z), "oracle_objective": ref}


def _check_disk(q: DiskQP, cfg: OracleConfig) -> tuple:
    try:
        p, qq = kernels.solve_disk_qp(q)
    except kernels.KernelError as e:
        return math.inf, math.inf, False, {"error": str(e)}
    viol = q.violation(p, qq)
    _, _, ref = oracle_disk(q, cfg)
    gap = q.objective(p, qq) - ref
    ok = viol <= DISK_VIOLATION and gap <= DISK_GAP
    return gap, viol, ok, {"p": p, "q": qq, "oracle_objective": ref}


def run_kernel_check(count: int, seed: int, repro_dir: str = ".",
                     cfg: Optional[OracleConfig] = None) -> CheckReport:
    """Compare every kernel family against its oracle on `count` seeded instances."""
    if count < 0:
        raise ValueError(f"count must be >= 0, got {count}")
    cfg = cfg or OracleConfig.from_config()
    report = CheckReport()
    checks: Dict[str, tuple] = {
        "eq_qp": (eq_instances, lambda q: _check_eq(q)),
        "cone_box_qp": (cone_instances, lambda q: _check_cone(q, cfg)),
        "disk_qp": (disk_instances, lambda q: _check_disk(q, cfg)),
    }
    for family, (stream, check) in checks.items():
        fam = report.families[family]
        for q in stream(count, seed):
            gap, viol, ok, detail = check(q)
            _record(fam, family, q, gap, viol, ok, detail, repro_dir)
        log.info(f"{family}: {fam.count} instances, max gap {fam.max_gap:.3e}, "
                 f"max violation {fam.max_violation:.3e}, failures {fam.failures}")
    return report


# ---------- bench ----------

@dataclass(frozen=True)
class BenchStats:
    count: int
    mean_us: float
    median_us: float
    p99_us: float


def _time_calls(fn: Callable, instances) -> List[float]:
    out = []
    for q in instances:
        t0 = time.perf_counter_ns()
        fn(q)
        out.append((time.perf_counter_ns() - t0) / 1000.0)
    return out


def _stats(samples: List[float]) -> BenchStats:
    if not samples:
        return BenchStats(0, 0.0, 0.0, 0.0)
    arr = np.asarray(samples)
    return BenchStats(len(samples), float(arr.mean()), float(np.median(arr)), float(np.percentile(arr, 99)))


def run_bench(count: int, seed: int) -> Dict[str, BenchStats]:
    """Per-call wall time of each kernel, in microseconds."""
    if count < 0:
        raise ValueError(f"count must be >= 0, got {count}")
    return {
        "eq_qp": _stats(_time_calls(kernels.solve_eq_qp, list(xupdate_instances(count, seed)))),
        "cone_box_qp": _stats(_time_calls(kernels.solve_cone_box_qp, list(cone_instances(count, seed)))),
        "disk_qp": _stats(_time_calls(kernels.solve_disk_qp, list(disk_instances(count, seed)))),
    }

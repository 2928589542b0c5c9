import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose

from kernel_check import cone_instances, disk_instances, eq_instances
from kernels import (
    BoxQP, ConeBoxQP, ConeCase, DiskQP, EqQP, KernelError, clamp, real_roots,
    solve_box_qp, solve_cone_box_qp, solve_cone_box_qp_case, solve_disk_qp, solve_eq_qp,
    solve_eq_qp_kkt,
)
from oracle import OracleConfig, oracle_cone_box, oracle_disk, oracle_eq_qp


# ---------- clamp ----------

@pytest.mark.parametrize("x,expected", [(5, 2), (-1, 0), (1, 1)])
def test_clamp(x, expected):
    assert clamp(x, 0, 2) == expected


def test_clamp_rejects_reversed_bounds():
    with pytest.raises(ValueError):
        clamp(1.0, 2.0, 0.0)


# ---------- real_roots ----------

@pytest.mark.parametrize("coeffs,expected", [
    ([1, 0, -1, 0], [-1, 0, 1]),
    ([1, 0, -5, 0, 4], [-2, -1, 1, 2]),
    ([1, 0, 1], []),
    ([2, -3], [1.5]),
    ([1, -2, 1], [1]),
    ([1, 0, -2, 0, 1], [-1, 1]),
    ([0, 0, 1, -3], [3]),
])
def test_real_roots_examples(coeffs, expected):
    assert_allclose(real_roots(coeffs), expected, atol=1e-9)


def test_real_roots_rejects_zero_polynomial():
    with pytest.raises(ValueError):
        real_roots([0, 0, 0])


def test_real_roots_rejects_degree_five():
    with pytest.raises(ValueError):
        real_roots([1, 0, 0, 0, 0, 1])


def test_close_pair_is_resolved():
    assert_allclose(real_roots(np.poly([1.0, 1.001])), [1.0, 1.001], atol=1e-9)


@settings(max_examples=300, deadline=None)
@given(st.lists(st.integers(min_value=-100, max_value=100), min_size=1, max_size=4, unique=True),
       st.floats(min_value=0.0, max_value=0.05),
       st.floats(min_value=0.1, max_value=10))
def test_real_roots_recovers_factored_polynomials(ticks, shift, lead):
    roots = sorted(t / 10.0 - shift for t in ticks)
    c = lead * np.poly(roots)
    got = real_roots(c)
    assert len(got) == len(roots)
    assert_allclose(got, roots, atol=1e-7)
    assert all(abs(np.polyval(c, r)) <= 1e-9 * np.max(np.abs(c)) * max(1.0, abs(r)) ** 4 for r in got)


# ---------- equality-constrained QP ----------

def test_eq_qp_examples():
    B = np.array([[1.0, -1.0]])
    assert_allclose(solve_eq_qp(EqQP(np.ones(2), B, np.array([1.0, 0.0]))), [-0.5, -0.5])
    assert_allclose(solve_eq_qp(EqQP(2 * np.ones(2), B, np.array([1.0, 0.0]))), [-0.25, -0.25])
    assert_allclose(solve_eq_qp(EqQP(np.array([3.0, 0.5]), B, np.zeros(2))), [0.0, 0.0])


def test_eq_qp_rank_deficient():
    B = np.array([[1.0, -1.0, 0.0], [2.0, -2.0, 0.0]])
    with pytest.raises(KernelError, match="rank"):
        solve_eq_qp(EqQP(np.ones(3), B, np.ones(3)))


def test_eq_qp_rejects_nonpositive_diagonal():
    with pytest.raises(ValueError):
        solve_eq_qp(EqQP(np.array([1.0, 0.0]), np.array([[1.0, 1.0]]), np.ones(2)))


def test_eq_qp_kkt_and_oracle():
    for q in eq_instances(200, seed=11):
        x, nu = solve_eq_qp_kkt(q)
        a, B, c = q.a_diag, q.B, q.c
        scale = max(1.0, np.max(np.abs(c)), np.max(a), np.max(np.abs(B)))
        assert np.max(np.abs(a * x + c + B.T @ nu)) <= 1e-9 * scale
        assert np.max(np.abs(B @ x)) <= 1e-9 * scale
        _, ref = oracle_eq_qp(q)
        assert 0.5 * np.dot(a * x, x) + np.dot(c, x) <= ref + 1e-9 * max(1.0, abs(ref))


# ---------- cone-box QP ----------

def test_cone_box_origin():
    z, case = solve_cone_box_qp_case(ConeBoxQP(0, 0, 0, 0, k=1, z3_lo=0.5, z3_hi=2))
    assert_allclose(z, (0, 0, 0.5, 0))
    assert case is ConeCase.INACTIVE


def test_cone_box_inactive_cone():
    assert_allclose(solve_cone_box_qp(ConeBoxQP(-1, 0, -2, -2, k=1, z3_lo=0.5, z3_hi=2)), (0.5, 0, 1, 1))


def test_cone_box_active_cone_matches_oracle():
    q = ConeBoxQP(-4, 0, -2, -2, k=1, z3_lo=0.5, z3_hi=2)
    z, case = solve_cone_box_qp_case(q)
    assert case is ConeCase.INTERIOR
    assert_allclose(z, (4 / 3, 0, 4 / 3, 4 / 3), atol=1e-9)
    assert (z[0] ** 2 + z[1] ** 2) / z[2] == pytest.approx(z[3], abs=1e-9)
    zo, ref = oracle_cone_box(q)
    assert q.objective(z) <= ref + 1e-6
    assert_allclose(z, zo, atol=1e-4)


def test_cone_box_zero_c1():
    q = ConeBoxQP(0, -4, -2, -2, k=1, z3_lo=0.5, z3_hi=2)
    z = solve_cone_box_qp(q)
    assert z[0] == 0.0
    assert q.cone_violation(z) <= 1e-8
    assert q.objective(z) <= oracle_cone_box(q)[1] + 1e-6


def test_cone_box_fixed_box():
    q = ConeBoxQP(-4, 0, -2, -2, k=1, z3_lo=1.0, z3_hi=1.0)
    z, case = solve_cone_box_qp_case(q)
    assert z[2] == 1.0
    assert case is ConeCase.UPPER
    assert q.cone_violation(z) <= 1e-8
    assert q.objective(z) <= oracle_cone_box(q)[1] + 1e-6


def test_cone_box_rejects_bad_instances():
    with pytest.raises(ValueError):
        solve_cone_box_qp(ConeBoxQP(0, 0, 0, 0, k=1, z3_lo=0.0, z3_hi=1.0))
    with pytest.raises(ValueError):
        solve_cone_box_qp(ConeBoxQP(0, 0, 0, 0, k=-1, z3_lo=0.5, z3_hi=1.0))


def _cone_case_consistent(q, z, case):
    lo, hi = q.z3_lo, q.z3_hi
    k2 = q.k * q.k
    z1, z2, z3 = -q.c1 / 2, -q.c2 / 2, clamp(-q.c3 / 2, lo, hi)
    case1_holds = z1 * z1 + z2 * z2 <= k2 * z3 * (-q.c4 / 2)
    if case is ConeCase.INACTIVE:
        return case1_holds
    if case1_holds:
        return False
    if case is ConeCase.UPPER:
        return z[2] == hi
    if case is ConeCase.LOWER:
        return z[2] == lo
    return lo <= z[2] <= hi


def test_cone_box_case_order():
    for q in cone_instances(300, seed=5):
        z, case = solve_cone_box_qp_case(q)
        assert _cone_case_consistent(q, z, case), (q, z, case)
        assert q.cone_violation(z) <= 1e-8
        assert q.z3_lo <= z[2] <= q.z3_hi


def test_cone_box_against_oracle():
    cfg = OracleConfig()
    for q in cone_instances(60, seed=2):
        z = solve_cone_box_qp(q)
        assert q.objective(z) <= oracle_cone_box(q, cfg)[1] + 1e-6, q


@pytest.mark.slow
def test_cone_box_against_oracle_full():
    cfg = OracleConfig()
    for q in cone_instances(1000, seed=1):
        z = solve_cone_box_qp(q)
        assert q.cone_violation(z) <= 1e-8
        assert q.objective(z) <= oracle_cone_box(q, cfg)[1] + 1e-6, q


# ---------- disk QP ----------

@pytest.mark.parametrize("q,expected", [
    (DiskQP(2, 2, 1, -1, 10), (0.0, 0.5)),
    (DiskQP(2, 2, -1, -1, 10), (0.5, 0.5)),
    (DiskQP(2, 2, -4, 0, 1), (1.0, 0.0)),
    (DiskQP(1, 1, -1000, 0, 1), (1.0, 0.0)),
])
def test_disk_examples(q, expected):
    assert_allclose(solve_disk_qp(q), expected, atol=1e-12)
    p, qq, _ = oracle_disk(q)
    assert_allclose((p, qq), expected, atol=1e-6)


def test_disk_boundary_radius_not_one():
    q = DiskQP(2, 2, -4, -4, 2)
    p, qq = solve_disk_qp(q)
    assert math.hypot(p, qq) == pytest.approx(2.0, abs=1e-12)
    assert_allclose((p, qq), (math.sqrt(2), math.sqrt(2)), atol=1e-9)


def test_disk_against_oracle():
    for q in disk_instances(300, seed=3):
        p, qq = solve_disk_qp(q)
        assert q.violation(p, qq) <= 1e-9
        assert q.objective(p, qq) <= oracle_disk(q)[2] + 1e-6, q


# ---------- box QP ----------

def test_box_examples():
    base = dict(rho=1.0, q_hat=-0.1, p_lo=0.0, p_hi=1.0, q_lo=-1.0, q_hi=1.0)
    assert solve_box_qp(BoxQP(alpha=0, beta=0, p_hat=0.3, **base)) == pytest.approx((0.3, -0.1))
    assert solve_box_qp(BoxQP(alpha=0, beta=1, p_hat=0.3, **base))[0] == 0.0
    assert solve_box_qp(BoxQP(alpha=0, beta=0, p_hat=5.0, **base))[0] == 1.0

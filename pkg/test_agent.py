import math
from dataclasses import replace
from types import MappingProxyType

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose

from agent import (
    AgentError, ChildCopy, ChildToParentPreX, ChildToParentPreZ, LocalZ, Multipliers,
    ParentToChildPostZ, ParentToChildPreX, ParentToChildPreZ, compute_hats, cone_scale,
    constraint_matrix, init_state, init_states, initial_z, injection_update,
    local_residual_contrib, multiplier_update, post_z_messages, pre_x_messages, pre_z_messages,
    x_update, z_update,
)
from network import Box, BusSpec, Disk, LineParams, RadialNetwork


def _net(parent, lines=None, spec=None):
    full = {0: BusSpec(Box(-10, 10, -10, 10), 1.0, 1.0, beta=1.0)}
    for b in parent:
        full[b] = BusSpec(Box(-1.0, -1.0, -0.5, -0.5), 0.9, 1.1)
    full.update(spec or {})
    lines = lines or {b: LineParams(0.01, 0.02) for b in parent}
    return RadialNetwork.from_parts(dict(parent), lines, full)


def _random_state(net, bus, rng, rho=1.0):
    """Agent state with random x-values and multipliers, plus matching inbound pre-z messages."""
    st_ = init_state(net, bus, rho)
    u = lambda: float(rng.uniform(-1.0, 1.0))
    x = replace(st_.x, v=u(), l=u(), P=u(), Q=u(), p=u(), q=u(),
                v_parent=None if st_.is_root else u(),
                child_copies=MappingProxyType({j: ChildCopy(u(), u(), u()) for j in st_.children}))
    mult = Multipliers(*(u() for _ in range(10)))
    st_ = replace(st_, x=x, mult=mult)
    inbound = [ChildToParentPreZ(j, bus, 1, u(), u()) for j in st_.children]
    if not st_.is_root:
        inbound.append(ParentToChildPreZ(st_.parent, bus, 1, u(), u(), u()))
    return st_, inbound


# ---------- initialization ----------

def test_initial_point_two_bus():
    net = _net({1: 0})
    s = init_state(net, 1)
    assert (s.z.P, s.z.Q) == (-1.0, -0.5)
    assert s.z.l == pytest.approx(1.25)
    assert s.z.v == 1.0
    assert s.x.v_parent == 1.0
    root = init_state(net, 0)
    assert (root.z.v, root.z.l, root.z.P, root.z.Q) == (1.0, 0.0, 0.0, 0.0)
    assert root.x.child_copies[1] == ChildCopy(pytest.approx(1.25), -1.0, -0.5)


def test_zero_injection_leaf_starts_at_zero():
    net = _net({1: 0}, spec={1: BusSpec(Disk(0.03), 0.9, 1.1)})
    z = initial_z(net)[1]
    assert (z.P, z.Q, z.l, z.p, z.q) == (0.0, 0.0, 0.0, 0.0, 0.0)


def test_initial_flows_accumulate_down_the_line():
    net = _net({1: 0, 2: 1})
    z = initial_z(net)
    assert (z[1].P, z[1].Q) == (-2.0, -1.0)
    assert (z[2].P, z[2].Q) == (-1.0, -0.5)


def test_initial_residual_is_zero():
    net = _net({1: 0, 2: 1, 3: 1})
    states = init_states(net)
    inbox = {b: [] for b in net.buses()}
    for s in states.values():
        for m in pre_z_messages(s, 1) + post_z_messages(s, 1):
            inbox[m.receiver].append(m)
    for b, s in states.items():
        assert local_residual_contrib(s, inbox[b]) == (0.0, 0.0)


def test_init_rejects_nonpositive_rho():
    with pytest.raises(ValueError):
        init_state(_net({1: 0}), 1, rho=0.0)


# ---------- messages ----------

def test_message_fanout():
    net = _net({1: 0, 2: 0})
    states = init_states(net)
    root_out = pre_x_messages(states[0], 3)
    assert [(type(m), m.receiver, m.iteration) for m in root_out] == [
        (ParentToChildPreX, 1, 3), (ParentToChildPreX, 2, 3)]
    leaf_out = pre_x_messages(states[1], 3)
    assert len(leaf_out) == 1 and isinstance(leaf_out[0], ChildToParentPreX)
    assert leaf_out[0].receiver == 0
    assert post_z_messages(states[1], 3) == []


def test_missing_message_is_a_protocol_error():
    net = _net({1: 0, 2: 1})
    s = init_state(net, 1)
    with pytest.raises(AgentError, match="ParentToChildPreX"):
        x_update(s, [ChildToParentPreX(2, 1, 1, 0, 0, 0, 0, 0, 0)])
    with pytest.raises(AgentError, match="children"):
        x_update(s, [ParentToChildPreX(0, 1, 1, 1.0)])
    with pytest.raises(AgentError):
        compute_hats(s, [])


# ---------- x-update ----------

def _flow_point(line, child_line):
    """Bus 1 values that already satisfy its voltage-drop and balance rows."""
    P2, Q2, l2 = -0.3, -0.1, 0.1
    p1, q1, l1 = -0.2, -0.05, 0.3
    P1 = P2 - child_line.r * l2 + p1
    Q1 = Q2 - child_line.x * l2 + q1
    v_par = 1.0
    v1 = v_par + 2.0 * (line.r * P1 + line.x * Q1) - l1 * line.z_sq
    return LocalZ(v=v1, l=l1, P=P1, Q=Q1, p=p1, q=q1), v_par, (l2, P2, Q2)


def test_x_update_keeps_a_feasible_target():
    net = _net({1: 0, 2: 1}, lines={1: LineParams(0.02, 0.03), 2: LineParams(0.01, 0.04)})
    z, v_par, (l2, P2, Q2) = _flow_point(net.line[1], net.line[2])
    s = replace(init_state(net, 1, rho=2.0), z=z)
    x = x_update(s, [ParentToChildPreX(0, 1, 1, v_par), ChildToParentPreX(2, 1, 1, l2, P2, Q2, 0, 0, 0)])
    assert_allclose([x.v, x.l, x.P, x.Q, x.p, x.q, x.v_parent],
                    [z.v, z.l, z.P, z.Q, z.p, z.q, v_par], atol=1e-12)
    assert_allclose([x.child_copies[2].l, x.child_copies[2].P, x.child_copies[2].Q], [l2, P2, Q2], atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(min_value=0, max_value=2**32 - 1), st.integers(min_value=0, max_value=4))
def test_x_update_is_the_constrained_minimizer(seed, n_kids):
    rng = np.random.default_rng(seed)
    parent = {1: 0, **{2 + k: 1 for k in range(n_kids)}}
    lines = {b: LineParams(*rng.uniform(0.001, 0.05, 2)) for b in parent}
    net = _net(parent, lines=lines)
    rho = float(rng.uniform(0.1, 5.0))
    s, _ = _random_state(net, 1, rng, rho)
    s = replace(s, z=LocalZ(*rng.uniform(-1, 1, 6)))
    v_z = float(rng.uniform(0.9, 1.1))
    down = {j: rng.uniform(-1, 1, 6) for j in s.children}
    inbound = [ParentToChildPreX(0, 1, 1, v_z)]
    inbound += [ChildToParentPreX(j, 1, 1, *down[j]) for j in s.children]

    x = x_update(s, inbound)
    vec = [x.v, x.l, x.P, x.Q, x.p, x.q, x.v_parent]
    m, z = s.mult, s.z
    c = [m.lam_v - rho * z.v, m.lam_l - rho * z.l, m.lam_P - rho * z.P, m.lam_Q - rho * z.Q,
         m.lam_p - rho * z.p, m.lam_q - rho * z.q, m.gamma - rho * v_z]
    for j in s.children:
        cc = x.child_copies[j]
        vec += [cc.l, cc.P, cc.Q]
        l_z, P_z, Q_z, mu_l, mu_P, mu_Q = down[j]
        c += [mu_l - rho * l_z, mu_P - rho * P_z, mu_Q - rho * Q_z]
    vec, c = np.array(vec), np.array(c)

    B = constraint_matrix(s.line, [s.child_lines[j] for j in s.children])
    assert np.max(np.abs(B @ vec)) <= 1e-9
    grad = rho * vec + c
    nu, *_ = np.linalg.lstsq(B.T, grad, rcond=None)
    assert np.max(np.abs(grad - B.T @ nu)) <= 1e-9 * max(1.0, np.max(np.abs(c)))


def test_root_x_update_keeps_fixed_values():
    net = _net({1: 0, 2: 0})
    s = init_state(net, 0)
    x = x_update(s, [ChildToParentPreX(j, 0, 1, 0.1, -0.2, -0.1, 0, 0, 0) for j in (1, 2)])
    assert (x.v, x.l, x.P, x.Q, x.v_parent) == (1.0, 0.0, 0.0, 0.0, None)
    # balance with no upstream line: p = sum over children of (l r - P)
    flow_p = sum(x.child_copies[j].P - 0.01 * x.child_copies[j].l for j in (1, 2))
    assert x.p + flow_p == pytest.approx(0.0, abs=1e-12)


# ---------- z-update ----------

def test_leaf_voltage_hat():
    net = _net({1: 0})
    s = init_state(net, 1, rho=1.5)
    s = replace(s, mult=Multipliers(lam_v=1.5), x=replace(s.x, v=1.0))
    hat = compute_hats(s, [ParentToChildPreZ(0, 1, 1, 0.0, 0.0, 0.0)])
    assert hat.v == pytest.approx(2.0)


def test_root_line_hats_are_zero():
    net = _net({1: 0})
    s, inbound = _random_state(net, 0, np.random.default_rng(0))
    hat = compute_hats(s, inbound)
    assert (hat.P, hat.Q, hat.l) == (0.0, 0.0, 0.0)


def _pair_objective(s, inbound, v, l, P, Q):
    """rho/2 |gap|^2 + mult * gap summed over every pair whose z-side is (v, l, P, Q)."""
    rho, x, m = s.rho, s.x, s.mult
    up = next(msg for msg in inbound if isinstance(msg, ParentToChildPreZ))
    down = [msg for msg in inbound if isinstance(msg, ChildToParentPreZ)]
    pairs = [(x.v, v, m.lam_v), (x.l, l, m.lam_l), (x.P, P, m.lam_P), (x.Q, Q, m.lam_Q),
             (up.l_copy, l, m.mu_l), (up.P_copy, P, m.mu_P), (up.Q_copy, Q, m.mu_Q)]
    pairs += [(d.v_copy, v, d.gamma) for d in down]
    return math.fsum(mult * (a - b) + 0.5 * rho * (a - b) ** 2 for a, b, mult in pairs)


@settings(max_examples=50, deadline=None)
@given(st.integers(min_value=0, max_value=2**32 - 1), st.integers(min_value=0, max_value=5))
def test_completed_square_differs_by_a_constant(seed, n_kids):
    rng = np.random.default_rng(seed)
    net = _net({1: 0, **{2 + k: 1 for k in range(n_kids)}})
    s, inbound = _random_state(net, 1, rng, rho=float(rng.uniform(0.2, 4.0)))
    hat = compute_hats(s, inbound)

    def completed(v, l, P, Q):
        return s.rho * ((P - hat.P) ** 2 + (Q - hat.Q) ** 2 + (l - hat.l) ** 2
                        + (n_kids + 1) / 2.0 * (v - hat.v) ** 2)

    offsets = []
    for _ in range(3):
        pt = rng.uniform(-2.0, 2.0, 4)
        offsets.append(_pair_objective(s, inbound, *pt) - completed(*pt))
    assert_allclose(offsets, offsets[0], atol=1e-9)


@pytest.mark.parametrize("n_kids", range(11))
def test_cone_scaling_is_equivalent(n_kids):
    kappa, k = cone_scale(n_kids)
    assert kappa ** 2 == pytest.approx((n_kids + 1) / 2.0)
    rng = np.random.default_rng(n_kids)
    for _ in range(100):
        P, Q = rng.uniform(-1, 1, 2)
        v, l = rng.uniform(0.1, 2.0, 2)
        inside = P * P + Q * Q <= v * l
        assert ((P * P + Q * Q) / (kappa * v) <= k * k * l) == inside or \
            abs(P * P + Q * Q - v * l) < 1e-12


@settings(max_examples=50, deadline=None)
@given(st.integers(min_value=0, max_value=2**32 - 1), st.booleans())
def test_z_update_is_feasible(seed, pv):
    rng = np.random.default_rng(seed)
    leaf = BusSpec(Disk(0.5), 0.9, 1.1, beta=1.0) if pv else BusSpec(Box(-0.4, -0.1, -0.2, 0.0), 0.9, 1.1)
    net = _net({1: 0, 2: 1, 3: 1}, spec={1: leaf})
    s, inbound = _random_state(net, 1, rng)
    z = z_update(s, inbound)
    assert 0.9 <= z.v <= 1.1
    assert z.P * z.P + z.Q * z.Q <= z.v * z.l + 1e-8
    if pv:
        assert z.p >= 0.0 and math.hypot(z.p, z.q) <= 0.5 + 1e-12
    else:
        assert -0.4 <= z.p <= -0.1 and -0.2 <= z.q <= 0.0


def test_root_z_update_pins_line_values():
    net = _net({1: 0})
    s, inbound = _random_state(net, 0, np.random.default_rng(1))
    z = z_update(s, inbound)
    assert (z.v, z.l, z.P, z.Q) == (1.0, 0.0, 0.0, 0.0)


def test_injection_update_examples():
    assert injection_update(BusSpec(Disk(0.0), 0.9, 1.1), 1.0, 0.5, 0.5) == (0.0, 0.0)
    assert injection_update(BusSpec(Disk(1.0), 0.9, 1.1, beta=5.0), 1.0, 0.5, 0.0) == (0.0, 0.0)
    p, q = injection_update(BusSpec(Box(-1, 1, -1, 1), 0.9, 1.1, alpha=1.0, beta=0.5), 1.0, 0.5, 2.0)
    assert (p, q) == (pytest.approx(0.0), 1.0)


# ---------- multipliers and residuals ----------

def test_multiplier_moves_by_rho_times_gap():
    net = _net({1: 0})
    s = init_state(net, 0, rho=2.0)
    s = replace(s, x=replace(s.x, p=s.z.p + 3.0))
    m = multiplier_update(s, [])
    assert m.lam_p == pytest.approx(6.0)
    assert replace(m, lam_p=0.0) == Multipliers()


def test_no_gap_no_change():
    net = _net({1: 0})
    states = init_states(net, rho=3.0)
    assert multiplier_update(states[0], []) == Multipliers()


def test_edge_multipliers_live_with_the_child():
    net = _net({1: 0})
    s = init_state(net, 1, rho=2.0)
    z = s.z
    inbound = [ParentToChildPreZ(0, 1, 1, z.l + 1.0, z.P, z.Q),
               ParentToChildPostZ(0, 1, 1, s.x.v_parent - 0.5)]
    m = multiplier_update(s, inbound)
    assert m.mu_l == pytest.approx(2.0)
    assert m.gamma == pytest.approx(1.0)
    assert (m.mu_P, m.mu_Q, m.lam_v) == (0.0, 0.0, 0.0)
    with pytest.raises(AgentError):
        multiplier_update(s, inbound[:1])


def test_residual_contributions():
    net = _net({1: 0})
    s = init_state(net, 0)
    s = replace(s, x=replace(s.x, p=s.z.p + 3.0), z_prev=replace(s.z, v=s.z.v - 0.5, q=s.z.q + 2.0))
    r_sq, s_sq = local_residual_contrib(s, [])
    assert r_sq == pytest.approx(9.0)
    assert s_sq == pytest.approx(4.25)

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_injections, random_tree, seeds
from vvoreg.feeder import Bus, FeederModel, Line, chain_feeder
from vvoreg.powerflow import Injections, PowerFlowError, residuals, solve_powerflow

# fixed point of P = p + r l, Q = q + x l, l = P^2 + Q^2 (v0 = 1), iterated in plain floats
V1_LOADED = 0.9959959839195494
ELL_LOADED = 0.020080402253525035
P_LOADED = 0.10020080402253526
V1_COMPENSATED = 0.9979979959879598


@pytest.fixture
def two_bus_load():
    m = chain_feeder([0.01], [0.01])
    return m, Injections.build(2, p_c=[0, 0.1], q_c=[0, 0.1])


def test_zero_injections_flat():
    m = chain_feeder([0.01, 0.02, 0.03], [0.01, 0.01, 0.01])
    sol = solve_powerflow(m, Injections.zeros(4))
    assert sol.converged
    np.testing.assert_array_equal(sol.v, 1.0)
    np.testing.assert_array_equal(sol.P, 0.0)
    np.testing.assert_array_equal(sol.ell, 0.0)


def test_two_bus_oracle(two_bus_load):
    m, inj = two_bus_load
    sol = solve_powerflow(m, inj)
    assert sol.converged and sol.status == "converged"
    assert sol.v[1] == pytest.approx(V1_LOADED, abs=1e-10)
    assert sol.ell[0] == pytest.approx(ELL_LOADED, abs=1e-10)
    assert sol.P[0] == pytest.approx(P_LOADED, abs=1e-10)
    assert round(sol.v[1], 5) == 0.996 and round(sol.ell[0], 5) == 0.02008


def test_reactive_support_raises_voltage(two_bus_load):
    m, inj = two_bus_load
    base = solve_powerflow(m, inj)
    comp = solve_powerflow(m, inj.with_q_g([0, 0.1]))
    assert comp.v[1] > base.v[1]
    assert comp.v[1] == pytest.approx(V1_COMPENSATED, abs=1e-10)


def test_residuals_of_converged_solution(rng):
    m = random_tree(rng, 30)
    inj = random_injections(rng, m)
    sol = solve_powerflow(m, inj)
    assert residuals(m, sol, inj).worst <= 1e-10


def test_perturbed_voltage_shows_in_drop_residual(rng):
    m = random_tree(rng, 10)
    inj = random_injections(rng, m)
    sol = solve_powerflow(m, inj)
    j = 4
    v = sol.v.copy()
    v[j] += 1e-3
    bad = type(sol)(v, sol.P, sol.Q, sol.ell, sol.P0, sol.Q0, True, 0, "converged")
    rep = residuals(m, bad, inj)
    k = int(m.topology.line_into[j])
    assert rep.voltage_drop[k] == pytest.approx(1e-3, rel=1e-6)


def test_hand_built_solution_residuals(two_bus_load):
    m, inj = two_bus_load
    Q = P_LOADED
    sol = type(solve_powerflow(m, inj))(np.array([1.0, V1_LOADED]), np.array([P_LOADED]), np.array([Q]),
                                         np.array([ELL_LOADED]), P_LOADED, Q, True, 0, "converged")
    assert residuals(m, sol, inj).worst <= 1e-8


def test_collapse_is_reported():
    m = chain_feeder([0.5], [0.5])
    sol = solve_powerflow(m, Injections.build(2, p_c=[0, 5.0], q_c=[0, 5.0]))
    assert not sol.converged and sol.status == "collapse"


def test_max_iter_is_reported(two_bus_load):
    m, inj = two_bus_load
    sol = solve_powerflow(m, inj, max_iter=2)
    assert not sol.converged and sol.status == "max-iter" and sol.iterations == 2


def test_nonpositive_slack_voltage():
    with pytest.raises(PowerFlowError):
        solve_powerflow(chain_feeder([0.1], [0.1]), Injections.zeros(2), v0=0.0)


def test_batch_matches_single(rng):
    m = random_tree(rng, 15)
    injs = [random_injections(rng, m) for _ in range(4)]
    stack = Injections(*(np.stack([getattr(i, f) for i in injs]) for f in ("p_c", "q_c", "p_g", "q_g")))
    v0 = np.array([1.0, 0.98, 1.02, 1.0])
    batch = solve_powerflow(m, stack, v0=v0)
    for n, inj in enumerate(injs):
        one = solve_powerflow(m, inj, v0=v0[n])
        np.testing.assert_allclose(batch.v[n], one.v, atol=1e-12)
        np.testing.assert_allclose(batch.ell[n], one.ell, atol=1e-12)


# -- properties


@given(seeds, st.integers(2, 60))
@settings(max_examples=100, deadline=None)
def test_slack_conservation(seed, n):
    rng = np.random.default_rng(seed)
    m = random_tree(rng, n, n_inverters=min(3, n - 1))
    inj = random_injections(rng, m, pv=0.03)
    sol = solve_powerflow(m, inj)
    assert sol.converged
    T = m.topology
    assert sol.P0 == pytest.approx(np.sum(inj.p) + T.r @ sol.ell, abs=1e-8)
    assert sol.Q0 == pytest.approx(np.sum(inj.q) + T.x @ sol.ell, abs=1e-8)


@given(seeds, st.integers(2, 40), st.floats(1e-4, 1e-2))
@settings(max_examples=60, deadline=None)
def test_reactive_injection_at_leaf_raises_its_voltage(seed, n, dq):
    rng = np.random.default_rng(seed)
    m = random_tree(rng, n)
    inj = random_injections(rng, m)
    T = m.topology
    leaves = [j for j in range(m.n_buses) if j != T.slack and not T.children[j]]
    leaf = leaves[int(rng.integers(len(leaves)))]
    q_g = np.zeros(m.n_buses)
    q_g[leaf] = dq
    a = solve_powerflow(m, inj)
    b = solve_powerflow(m, inj.with_q_g(q_g))
    assert b.v[leaf] >= a.v[leaf]


@given(seeds, st.integers(2, 40))
@settings(max_examples=50, deadline=None)
def test_relabeling_invariance(seed, n):
    rng = np.random.default_rng(seed)
    m = random_tree(rng, n)
    inj = random_injections(rng, m)
    sol = solve_powerflow(m, inj)
    # permute bus and line order and rename ids
    perm = rng.permutation(n)
    new_id = {b.id: f"b{perm[i]}" for i, b in enumerate(m.buses)}
    bus_order = rng.permutation(n)
    line_order = rng.permutation(n - 1)
    buses = tuple(Bus(new_id[m.buses[i].id], m.buses[i].kind, m.buses[i].has_load) for i in bus_order)
    lines = tuple(Line(new_id[m.lines[k].from_bus], new_id[m.lines[k].to_bus], m.lines[k].r, m.lines[k].x)
                  for k in line_order)
    m2 = FeederModel(buses, lines)
    inj2 = Injections(inj.p_c[bus_order], inj.q_c[bus_order], inj.p_g[bus_order], inj.q_g[bus_order])
    sol2 = solve_powerflow(m2, inj2)
    np.testing.assert_allclose(sol2.v, sol.v[bus_order], atol=1e-12)
    np.testing.assert_allclose(sol2.ell, sol.ell[line_order], atol=1e-12)
    assert sol2.P0 == pytest.approx(sol.P0, abs=1e-12)

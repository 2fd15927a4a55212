import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_injections, random_tree, seeds
from oracles import grid_search_opf, random_small_instance
from vvoreg.feeder import chain_feeder, synthetic_feeder
from vvoreg.opf import (OpfConfig, OpfError, OpfLayout, build_opf, check_exactness, inverter_capacity,
                        opf_csv, read_opf_csv, solve_opf, solve_opf_batch)
from vvoreg.powerflow import Injections, solve_powerflow
from vvoreg.scenarios import ScenarioSet

# gamma = 0 on r = x = 0.01 with 0.1 + j0.1 load: Q is cancelled, P = (1 - sqrt(1 - 4 r p)) / 2r
P_STAR = 0.10010020050140421
LOSS_STAR = 1.0020050140421324e-4
Q_STAR = 0.1001002005014042  # q_c + x l


@pytest.fixture
def loaded(two_bus):
    return two_bus, Injections.build(2, p_c=[0, 0.1], q_c=[0, 0.1])


def test_two_bus_closed_form(loaded):
    m, inj = loaded
    sol = solve_opf(m, inj, OpfConfig(gamma=0.0))
    assert sol.ok and sol.exact
    # loss is quadratic in q at the optimum, so a 1e-8 relative gap pins q only to ~1e-5
    assert sol.q_g[0] == pytest.approx(Q_STAR, abs=2e-5)
    assert sol.P[0] == pytest.approx(P_STAR, abs=1e-8)
    assert sol.objective == pytest.approx(LOSS_STAR, rel=1e-6)
    assert sol.objective == sol.loss


def test_layout_sizes(loaded):
    m, inj = loaded
    assert OpfLayout.for_model(m).n_vars == 7
    big = synthetic_feeder(129, seed=2)
    prob = build_opf(big, Injections.zeros(129), OpfConfig())
    assert len(prob.cones) == 128
    assert prob.n_vars == 128 + 3 * 128 + len(big.inverters) + 129


def test_inverter_capacity_at_rated_pv():
    # s = 1.05 p_max, p_g = p_max  ->  q_bar = sqrt(0.1025) p_max
    assert inverter_capacity(0.02, 0.021) == pytest.approx(0.3201562118716424 * 0.02, rel=1e-12)
    assert inverter_capacity(0.0, 0.021) == pytest.approx(0.021)


@pytest.mark.parametrize("p_g", [-0.01, 0.03])
def test_inverter_capacity_rejects_out_of_range(p_g):
    with pytest.raises(OpfError):
        inverter_capacity(p_g, 0.021)


def test_domain_error_is_recorded(two_bus):
    sol = solve_opf(two_bus, Injections.build(2, p_g=[0, 0.5]))
    assert sol.status == "domain-error" and not sol.ok


def test_infeasible_bounds(loaded):
    m, inj = loaded
    sol = solve_opf(m, inj, OpfConfig(v_min=1.2**2, v_max=1.3**2))
    assert sol.status == "infeasible" and not sol.exact
    assert math.isnan(sol.objective)


def test_crossed_bounds_rejected(loaded):
    with pytest.raises(OpfError):
        build_opf(*loaded, OpfConfig(v_min=1.1, v_max=1.0))


def test_flat_profile_when_nothing_happens():
    m = chain_feeder([0.01, 0.01], [0.01, 0.01], ["2"], p_max=0.02)
    sol = solve_opf(m, Injections.zeros(3))
    assert sol.ok
    assert sol.objective == pytest.approx(0.0, abs=1e-8)
    np.testing.assert_allclose(sol.v, 1.0, atol=1e-7)


def test_exactness_flags_slack():
    m = chain_feeder([0.01], [0.01])
    fake = type("S", (), {})()
    fake.v = np.array([1.0, 0.99])
    fake.P = np.array([0.1])
    fake.Q = np.array([0.0])
    fake.ell = np.array([0.01 + 2e-6])
    rep = check_exactness(m, fake)
    assert not rep.exact and rep.max_slack == pytest.approx(2e-6)


def test_batch_keeps_failures_in_place(two_bus):
    T = 3
    p_c = np.tile([0.0, 0.05], (T, 1))
    p_c[1, 1] = 50.0  # no feasible voltage
    sc = ScenarioSet(np.arange(T).astype("datetime64[m]"), two_bus.bus_ids, p_c, p_c / 4, np.zeros_like(p_c))
    sols = solve_opf_batch(two_bus, sc)
    assert [s.ok for s in sols] == [True, False, True]
    assert sols[0].objective == pytest.approx(sols[2].objective, rel=1e-12)


def test_csv_round_trip(rng):
    m = random_tree(rng, 6, n_inverters=2, p_max=0.03)
    injs = [random_injections(rng, m, load=0.05, pv=0.03) for _ in range(3)]
    sc = ScenarioSet(np.arange(3).astype("datetime64[m]"), m.bus_ids,
                     *(np.stack([getattr(i, f) for i in injs]) for f in ("p_c", "q_c", "p_g")))
    sols = solve_opf_batch(m, sc)
    sols[1] = type(sols[1]).failed(m, "infeasible")
    back = read_opf_csv(opf_csv(m, sols), m, sc)
    assert [s.ok for s in back] == [True, False, True]
    for a, b in zip(sols, back):
        if a.ok:
            np.testing.assert_array_equal(a.v, b.v)
            np.testing.assert_array_equal(a.q_g, b.q_g)
            assert a.objective == b.objective and a.exact == b.exact
            np.testing.assert_allclose(a.q_bar, b.q_bar, rtol=0, atol=0)


def test_csv_rejects_wrong_row_count(two_bus):
    sc = ScenarioSet(np.arange(1).astype("datetime64[m]"), two_bus.bus_ids, *np.zeros((3, 1, 2)))
    with pytest.raises(OpfError, match="rows"):
        read_opf_csv("scenario_index,bus,q_g_opt,v,objective,exact\n", two_bus, sc)


# -- properties


@given(seeds)
@settings(max_examples=25, deadline=None)
def test_matches_grid_search(seed):
    rng = np.random.default_rng(seed)
    m, inj = random_small_instance(rng)
    cfg = OpfConfig(gamma=float(rng.choice([0.0, 0.1, 1.0])))
    ref = grid_search_opf(m, inj, cfg)
    sol = solve_opf(m, inj, cfg)
    if ref is None:
        assert not sol.ok
        return
    assert sol.ok and sol.exact
    assert abs(sol.objective - ref[0]) <= 1e-5
    assert np.max(np.abs(sol.q_g - ref[1])) <= 2e-4


@given(seeds, st.integers(3, 40))
@settings(max_examples=30, deadline=None)
def test_bounds_and_capacity_hold(seed, n):
    rng = np.random.default_rng(seed)
    m = random_tree(rng, n, n_inverters=min(4, n - 1), p_max=0.03)
    inj = random_injections(rng, m, load=0.04, pv=0.03)
    cfg = OpfConfig(gamma=float(rng.choice([0.0, 0.1, 1.0])))
    sol = solve_opf(m, inj, cfg)
    assert sol.ok
    assert np.all(sol.v >= cfg.v_min - 1e-8) and np.all(sol.v <= cfg.v_max + 1e-8)
    assert np.all(np.abs(sol.q_g) <= sol.q_bar + 1e-8)


@given(seeds, st.integers(3, 40))
@settings(max_examples=30, deadline=None)
def test_exact_solutions_reproduce_through_sweep(seed, n):
    rng = np.random.default_rng(seed)
    m = random_tree(rng, n, n_inverters=min(4, n - 1), p_max=0.03)
    inj = random_injections(rng, m, load=0.04, pv=0.03)
    sol = solve_opf(m, inj, OpfConfig(gamma=0.1))
    assert sol.ok
    if sol.exact:
        q_g = np.zeros(n)
        q_g[m.topology.inverter_bus] = sol.q_g
        pf = solve_powerflow(m, inj.with_q_g(q_g))
        assert np.max(np.abs(pf.v - sol.v)) <= 1e-6


@given(seeds)
@settings(max_examples=15, deadline=None)
def test_weight_trades_loss_for_flatness(seed):
    rng = np.random.default_rng(seed)
    m = random_tree(rng, 12, n_inverters=4, p_max=0.03)
    inj = random_injections(rng, m, load=0.04, pv=0.03)
    sols = [solve_opf(m, inj, OpfConfig(gamma=g)) for g in (0.0, 0.01, 0.1, 1.0)]
    assert all(s.ok for s in sols)
    loss = [s.loss for s in sols]
    dev = [s.voltage_deviation for s in sols]
    assert all(b >= a - 1e-8 for a, b in zip(loss, loss[1:]))
    assert all(b <= a + 1e-6 for a, b in zip(dev, dev[1:]))

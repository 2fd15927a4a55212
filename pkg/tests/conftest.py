import numpy as np
import pytest
from hypothesis import strategies as st

from vvoreg.feeder import Bus, FeederModel, InverterSpec, Line, chain_feeder
from vvoreg.powerflow import Injections


def random_tree(rng, n_buses, n_inverters=0, r_scale=0.01, p_max=0.05, shuffle=False):
    """Random radial feeder; bus ``0`` is the slack. Buses are optionally listed out of order."""
    buses = [Bus("0", "slack", False)] + [Bus(str(j)) for j in range(1, n_buses)]
    lines = []
    for j in range(1, n_buses):
        parent = int(rng.integers(0, j))
        lines.append(Line(str(parent), str(j), float(r_scale * rng.uniform(0.2, 1.5)),
                          float(r_scale * rng.uniform(0.2, 1.5))))
    inv_buses = rng.choice(np.arange(1, n_buses), size=min(n_inverters, n_buses - 1), replace=False) \
        if n_buses > 1 else []
    invs = [InverterSpec.with_overcapacity(str(b), p_max) for b in sorted(inv_buses)]
    if shuffle:
        buses = [buses[i] for i in rng.permutation(len(buses))]
        lines = [lines[i] for i in rng.permutation(len(lines))]
    return FeederModel(tuple(buses), tuple(lines), tuple(invs))


def random_injections(rng, model, load=0.02, pv=0.0):
    B = model.n_buses
    p_c = rng.uniform(0, load, B)
    q_c = rng.uniform(0, load / 2, B)
    p_g = np.zeros(B)
    for inv in model.inverters:
        p_g[model.bus_index[inv.bus]] = rng.uniform(0, pv) if pv else 0.0
    slack = model.bus_index[model.slack.id]
    p_c[slack] = q_c[slack] = 0.0
    return Injections(p_c, q_c, p_g, np.zeros(B))


seeds = st.integers(min_value=0, max_value=2**32 - 1)


@pytest.fixture
def two_bus():
    return chain_feeder([0.01], [0.01], inverter_buses=["1"], p_max=0.1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- acceptance reporting: one line per criterion in the terminal summary


def pytest_configure(config):
    config._acceptance_lines = []


@pytest.fixture
def criterion(request):
    """``criterion(n, ok, detail)`` prints and records a PASS/FAIL line, then asserts ``ok``."""

    def record(n, ok, detail):
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(line)
        request.config._acceptance_lines.append(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = getattr(config, "_acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)

"""Radial feeder model: buses, lines, inverters, per-unit conversion.

Feeder documents are JSON with keys ``base_mva``, ``base_kv``, ``buses``,
``lines`` and ``inverters``; see ``docs/formats.md``.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Optional, Sequence

import numpy as np

INVERTER_OVERCAPACITY = 1.05


class FeederError(ValueError):
    """Raised for malformed or non-radial feeder documents."""


def bus_sort_key(bus_id: str):
    """Numeric ids sort numerically, everything else lexically after them."""
    s = str(bus_id)
    return (0, int(s), "") if s.isdigit() else (1, 0, s)


@dataclass(frozen=True)
class Bus:
    id: str
    kind: str = "load"  # slack | load
    has_load: bool = True


@dataclass(frozen=True)
class Line:
    from_bus: str
    to_bus: str
    r: float  # p.u.
    x: float  # p.u.


@dataclass(frozen=True)
class InverterSpec:
    bus: str
    p_max: float  # p.u.
    s_rated: float  # p.u.

    @classmethod
    def with_overcapacity(cls, bus: str, p_max: float, factor: float = INVERTER_OVERCAPACITY):
        return cls(bus=bus, p_max=p_max, s_rated=factor * p_max)


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def __str__(self) -> str:
        if self.ok:
            return "feeder is valid"
        return "\n".join(f"{kind}: {msg}" for kind, msg in self.violations)


@dataclass(frozen=True)
class Ordering:
    """Buses from the slack outward; ``lines[k]`` feeds ``buses[k + 1]``."""

    buses: tuple
    lines: tuple

    @property
    def reverse(self) -> tuple:
        return tuple(reversed(self.buses))


@dataclass(frozen=True)
class FeederModel:
    buses: tuple
    lines: tuple
    inverters: tuple = ()
    base_mva: float = 1.0
    base_kv: float = 12.47
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "lines", tuple(self.lines))
        object.__setattr__(self, "inverters", tuple(self.inverters))

    @property
    def z_base(self) -> float:
        """Impedance base in ohms."""
        return self.base_kv**2 / self.base_mva

    @property
    def n_buses(self) -> int:
        return len(self.buses)

    @property
    def bus_ids(self) -> tuple:
        return tuple(b.id for b in self.buses)

    @cached_property
    def bus_index(self) -> dict:
        return {b.id: i for i, b in enumerate(self.buses)}

    @property
    def slack(self) -> Bus:
        slacks = [b for b in self.buses if b.kind == "slack"]
        if len(slacks) != 1:
            raise FeederError(f"expected exactly one slack bus, found {len(slacks)}")
        return slacks[0]

    @cached_property
    def topology(self) -> "Topology":
        return Topology.from_model(self)

    def inverter_at(self, bus_id: str) -> Optional[InverterSpec]:
        for inv in self.inverters:
            if inv.bus == bus_id:
                return inv
        return None


@dataclass(frozen=True)
class Topology:
    """Index arrays for vectorised branch-flow computations.

    All arrays use the model's own bus and line order. Each line is keyed by
    its downstream bus.
    """

    slack: int
    line_from: np.ndarray
    line_to: np.ndarray
    r: np.ndarray
    x: np.ndarray
    # subtree[k, j] is 1 when bus j lies at or below the downstream end of line k
    subtree: np.ndarray
    # line_subtree[k, m] is 1 when line m lies at or below line k
    line_subtree: np.ndarray
    children: tuple
    # child_lines[k, m] is 1 when line m leaves the downstream bus of line k
    child_lines: np.ndarray
    line_into: np.ndarray  # line feeding each bus, -1 for the slack
    inverter_bus: np.ndarray
    order: np.ndarray = field(repr=False)

    @classmethod
    def from_model(cls, model: FeederModel) -> "Topology":
        report = validate_radial(model)
        if not report.ok:
            raise FeederError(str(report))
        idx = model.bus_index
        B, E = model.n_buses, len(model.lines)
        lf = np.array([idx[l.from_bus] for l in model.lines], dtype=int)
        lt = np.array([idx[l.to_bus] for l in model.lines], dtype=int)
        line_into = np.full(B, -1, dtype=int)
        line_into[lt] = np.arange(E)
        children = [[] for _ in range(B)]
        for k in range(E):
            children[lf[k]].append(int(lt[k]))
        order = np.array([idx[b] for b in downstream_order(model).buses], dtype=int)
        subtree = np.zeros((E, B))
        # reverse topological accumulation of descendant sets
        for j in order[::-1]:
            k = line_into[j]
            if k < 0:
                continue
            subtree[k, j] = 1.0
            for c in children[j]:
                subtree[k] += subtree[line_into[c]]
        line_subtree = subtree[:, lt] if E else np.zeros((0, 0))
        child_lines = np.zeros((E, E))
        for m in range(E):
            k = line_into[lf[m]]
            if k >= 0:
                child_lines[k, m] = 1.0
        return cls(
            slack=idx[model.slack.id],
            line_from=lf,
            line_to=lt,
            r=np.array([l.r for l in model.lines], dtype=float),
            x=np.array([l.x for l in model.lines], dtype=float),
            subtree=subtree,
            line_subtree=line_subtree,
            child_lines=child_lines,
            children=tuple(tuple(c) for c in children),
            line_into=line_into,
            inverter_bus=np.array([idx[i.bus] for i in model.inverters], dtype=int),
            order=order,
        )


def validate_radial(model: FeederModel) -> ValidationReport:
    """List every topology violation; an empty report means the model is usable."""
    out = []
    ids = [b.id for b in model.buses]
    seen = set()
    for i in ids:
        if i in seen:
            out.append(("duplicate-bus", f"bus id {i!r} appears more than once"))
        seen.add(i)
    slacks = [b.id for b in model.buses if b.kind == "slack"]
    if not slacks:
        out.append(("missing-slack", "no bus has kind 'slack'"))
    elif len(slacks) > 1:
        out.append(("multiple-slack", f"slack buses {slacks}"))
    for b in model.buses:
        if b.kind not in ("slack", "load"):
            out.append(("bad-kind", f"bus {b.id!r} has kind {b.kind!r}"))

    for l in model.lines:
        for end in (l.from_bus, l.to_bus):
            if end not in seen:
                out.append(("unknown-bus", f"line {l.from_bus}->{l.to_bus} references {end!r}"))
        if l.from_bus == l.to_bus:
            out.append(("self-loop", f"line at bus {l.from_bus!r}"))
        if not (l.r >= 0 and l.x >= 0 and l.r + l.x > 0):
            out.append(("bad-impedance", f"line {l.from_bus}->{l.to_bus} has r={l.r}, x={l.x}"))

    # undirected union-find for cycles and connectivity
    parent = {i: i for i in seen}

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for l in model.lines:
        if l.from_bus not in parent or l.to_bus not in parent or l.from_bus == l.to_bus:
            continue
        ra, rb = find(l.from_bus), find(l.to_bus)
        if ra == rb:
            out.append(("cycle", f"line {l.from_bus}->{l.to_bus} closes a loop"))
        else:
            parent[ra] = rb
    roots = {find(i) for i in seen}
    if len(roots) > 1 and slacks and slacks[0] in parent:
        root = find(slacks[0])
        isolated = sorted((i for i in seen if find(i) != root), key=bus_sort_key)
        out.append(("disconnected", f"buses not connected to the slack: {isolated}"))
    if len(model.lines) != len(seen) - 1 and not any(k == "cycle" for k, _ in out):
        out.append(("line-count", f"{len(model.lines)} lines for {len(seen)} buses"))

    # direction: each non-slack bus is fed by exactly one line, slack by none
    fed = {}
    for l in model.lines:
        fed[l.to_bus] = fed.get(l.to_bus, 0) + 1
    for b, count in fed.items():
        if count > 1:
            out.append(("multiple-feeds", f"bus {b!r} is the downstream end of {count} lines"))
    if slacks and fed.get(slacks[0]):
        out.append(("slack-fed", f"slack bus {slacks[0]!r} is the downstream end of a line"))

    inv_seen = set()
    for inv in model.inverters:
        if inv.bus not in seen:
            out.append(("orphan-inverter", f"inverter on unknown bus {inv.bus!r}"))
        if inv.bus in inv_seen:
            out.append(("duplicate-inverter", f"bus {inv.bus!r} has two inverters"))
        inv_seen.add(inv.bus)
        if not (inv.p_max >= 0 and inv.s_rated >= inv.p_max):
            out.append(("bad-inverter", f"inverter at {inv.bus!r}: s_rated < p_max"))
    return ValidationReport(tuple(out))


def downstream_order(model: FeederModel) -> Ordering:
    """Breadth-first order from the slack, siblings sorted by bus id."""
    report = validate_radial(model)
    if not report.ok:
        raise FeederError(str(report))
    children = {b.id: [] for b in model.buses}
    feeding = {}
    for l in model.lines:
        children[l.from_bus].append(l.to_bus)
        feeding[l.to_bus] = l
    buses, lines = [], []
    queue = deque([model.slack.id])
    while queue:
        b = queue.popleft()
        buses.append(b)
        if b in feeding:
            lines.append(feeding[b])
        queue.extend(sorted(children[b], key=bus_sort_key))
    return Ordering(tuple(buses), tuple(lines))


# ---------------------------------------------------------------------------
# documents


def parse_feeder(text: str) -> FeederModel:
    """Parse and validate a JSON feeder document."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FeederError(f"malformed feeder document: {exc}") from exc
    return feeder_from_dict(doc)


def feeder_from_dict(doc: dict) -> FeederModel:
    if not isinstance(doc, dict):
        raise FeederError("feeder document must be a JSON object")
    try:
        base_mva = float(doc["base_mva"])
        base_kv = float(doc["base_kv"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FeederError("base_mva and base_kv are required numbers") from exc
    if not (base_mva > 0 and base_kv > 0):
        raise FeederError("bases must be positive")
    z_base = base_kv**2 / base_mva
    kw_base = base_mva * 1000.0

    try:
        buses = [
            Bus(
                id=str(b["id"]),
                kind=str(b.get("kind", "load")),
                has_load=bool(b.get("has_load", b.get("kind", "load") != "slack")),
            )
            for b in doc.get("buses", [])
        ]
        lines = []
        for l in doc.get("lines", []):
            where = f"line {l.get('from')}->{l.get('to')}"
            lines.append(
                Line(
                    from_bus=str(l["from"]),
                    to_bus=str(l["to"]),
                    r=_pu_ohm(l, "r", z_base, where),
                    x=_pu_ohm(l, "x", z_base, where),
                )
            )
        inverters = []
        for inv in doc.get("inverters", []):
            where = f"inverter at {inv.get('bus')}"
            p_max = _pu_power(inv, "p_max", "kw", kw_base, where)
            if "s_rated_pu" in inv or "s_rated_kva" in inv:
                s_rated = _pu_power(inv, "s_rated", "kva", kw_base, where)
            else:
                s_rated = INVERTER_OVERCAPACITY * p_max
            inverters.append(InverterSpec(str(inv["bus"]), p_max, s_rated))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, FeederError):
            raise
        raise FeederError(f"malformed feeder document: {exc!r}") from exc

    model = FeederModel(tuple(buses), tuple(lines), tuple(inverters), base_mva, base_kv,
                        name=str(doc.get("name", "")))
    report = validate_radial(model)
    if not report.ok:
        raise FeederError(str(report))
    return model


def _pu_ohm(entry, name, z_base, where) -> float:
    if f"{name}_pu" in entry:
        return float(entry[f"{name}_pu"])
    if f"{name}_ohm" in entry:
        return float(entry[f"{name}_ohm"]) / z_base
    raise FeederError(f"{where}: needs {name}_pu or {name}_ohm")


def _pu_power(entry, name, unit, base, where) -> float:
    if f"{name}_pu" in entry:
        return float(entry[f"{name}_pu"])
    if f"{name}_{unit}" in entry:
        return float(entry[f"{name}_{unit}"]) / base
    raise FeederError(f"{where}: needs {name}_pu or {name}_{unit}")


def feeder_to_dict(model: FeederModel) -> dict:
    doc = {
        "base_mva": model.base_mva,
        "base_kv": model.base_kv,
        "buses": [{"id": b.id, "kind": b.kind, "has_load": b.has_load} for b in model.buses],
        "lines": [{"from": l.from_bus, "to": l.to_bus, "r_pu": l.r, "x_pu": l.x} for l in model.lines],
        "inverters": [
            {"bus": i.bus, "p_max_pu": i.p_max, "s_rated_pu": i.s_rated} for i in model.inverters
        ],
    }
    if model.name:
        doc["name"] = model.name
    return doc


def serialize_feeder(model: FeederModel) -> str:
    return json.dumps(feeder_to_dict(model), indent=2)


def ohms_to_pu(z_ohm, base_mva: float, base_kv: float):
    return np.asarray(z_ohm) * base_mva / base_kv**2


def pu_to_ohms(z_pu, base_mva: float, base_kv: float):
    return np.asarray(z_pu) * base_kv**2 / base_mva


# ---------------------------------------------------------------------------
# synthetic feeders


def synthetic_feeder(
    n_buses: int = 129,
    n_loads: Optional[int] = None,
    pv_fraction: float = 0.5,
    seed: int = 0,
    base_mva: float = 1.0,
    base_kv: float = 12.47,
    r_ohm: float = 0.10,
    x_ohm: float = 0.07,
    inverter_kva: float = 24.0,
    branchiness: float = 0.25,
) -> FeederModel:
    """Random radial feeder with typical residential line and inverter data.

    Representative only; it is not a replica of any real circuit. Bus ``0``
    is the slack. Each new bus hangs off the most recent bus with probability
    ``1 - branchiness`` (long laterals), otherwise off a random earlier bus.
    """
    rng = np.random.default_rng(seed)
    if n_loads is None:
        n_loads = max(0, round(53 * (n_buses - 1) / 128)) if n_buses > 1 else 0
    n_loads = min(n_loads, n_buses - 1)
    buses = [Bus("0", "slack", False)]
    lines = []
    for j in range(1, n_buses):
        if j == 1 or rng.random() > branchiness:
            parent = j - 1
        else:
            parent = int(rng.integers(0, j))
        scale = rng.uniform(0.5, 1.5)
        lines.append(
            Line(str(parent), str(j), r_ohm * scale * base_mva / base_kv**2,
                 x_ohm * scale * base_mva / base_kv**2)
        )
    load_buses = set(rng.choice(np.arange(1, n_buses), size=n_loads, replace=False).tolist()) if n_loads else set()
    for j in range(1, n_buses):
        buses.append(Bus(str(j), "load", j in load_buses))
    n_pv = int(round(pv_fraction * n_loads))
    pv_buses = sorted(rng.choice(sorted(load_buses), size=n_pv, replace=False).tolist()) if n_pv else []
    inverters = [
        InverterSpec.with_overcapacity(
            str(b), inverter_kva * rng.uniform(0.6, 1.4) / INVERTER_OVERCAPACITY / (base_mva * 1000.0)
        )
        for b in pv_buses
    ]
    return FeederModel(tuple(buses), tuple(lines), tuple(inverters), base_mva, base_kv,
                       name=f"synthetic-{n_buses}-seed{seed}")


def chain_feeder(r: Sequence[float], x: Sequence[float], inverter_buses: Iterable[str] = (),
                 p_max: float = 1.0) -> FeederModel:
    """Slack ``0`` followed by a chain ``1..len(r)``; impedances in p.u."""
    buses = [Bus("0", "slack", False)] + [Bus(str(i + 1)) for i in range(len(r))]
    lines = [Line(str(i), str(i + 1), float(r[i]), float(x[i])) for i in range(len(r))]
    invs = [InverterSpec.with_overcapacity(str(b), p_max) for b in inverter_buses]
    return FeederModel(tuple(buses), tuple(lines), tuple(invs))

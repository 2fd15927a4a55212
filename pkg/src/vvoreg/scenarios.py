"""Time series of per-bus consumption and PV generation.

Scenario CSV header: ``timestamp,bus,p_c_kw,q_c_kvar,p_g_kw``. The reactive
column may be omitted or left blank, in which case it is derived from the
bus power factor. Values are stored internally in p.u. on the feeder's
``base_mva``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from datetime import datetime
from decimal import Context, Decimal
from typing import Dict, Iterable, Mapping, Optional, Sequence, Tuple

import numpy as np

from .feeder import FeederModel
from .powerflow import Injections

DEFAULT_PF = 0.92
RESOLUTION_MIN = 15
_DECIMAL = Context(prec=40)


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class ScenarioSet:
    timestamps: np.ndarray  # datetime64[m], shape (T,)
    bus_ids: tuple
    p_c: np.ndarray  # (T, B) p.u.
    q_c: np.ndarray
    p_g: np.ndarray
    source: str = ""
    resolution_min: int = RESOLUTION_MIN

    def __len__(self) -> int:
        return len(self.timestamps)

    def injections(self, n: int) -> Injections:
        return Injections(self.p_c[n], self.q_c[n], self.p_g[n], np.zeros(len(self.bus_ids)))

    def select(self, mask) -> "ScenarioSet":
        mask = np.asarray(mask)
        return replace(self, timestamps=self.timestamps[mask], p_c=self.p_c[mask],
                       q_c=self.q_c[mask], p_g=self.p_g[mask])

    def equals(self, other: "ScenarioSet") -> bool:
        return (
            self.bus_ids == other.bus_ids
            and np.array_equal(self.timestamps, other.timestamps)
            and all(np.array_equal(getattr(self, a), getattr(other, a)) for a in ("p_c", "q_c", "p_g"))
        )


def empty_scenarios(model: FeederModel) -> ScenarioSet:
    z = np.zeros((0, model.n_buses))
    return ScenarioSet(np.array([], dtype="datetime64[m]"), model.bus_ids, z, z.copy(), z.copy())


def _parse_ts(s: str) -> np.datetime64:
    try:
        return np.datetime64(datetime.fromisoformat(s.strip()), "m")
    except ValueError as exc:
        raise ScenarioError(f"bad timestamp {s!r}") from exc


def _num(s: str, what: str) -> float:
    try:
        v = float(s)
    except (TypeError, ValueError) as exc:
        raise ScenarioError(f"missing or non-numeric {what}: {s!r}") from exc
    if not math.isfinite(v):
        raise ScenarioError(f"non-finite {what}")
    return v


def load_scenarios(
    source,
    model: FeederModel,
    power_factor: Mapping[str, float] | float = DEFAULT_PF,
    source_tag: str = "csv",
) -> ScenarioSet:
    """Parse a scenario CSV (text or file object) into a per-unit ScenarioSet.

    Buses absent from the file get zero load. Every timestamp must list the
    same set of buses, timestamps must be non-decreasing in file order, and
    PV output is only allowed at inverter buses.
    """
    text = source.read() if hasattr(source, "read") else source
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None:
        return empty_scenarios(model)
    fields = [f.strip() for f in reader.fieldnames]
    for req in ("timestamp", "bus", "p_c_kw", "p_g_kw"):
        if req not in fields:
            raise ScenarioError(f"missing column {req!r}")
    reader.fieldnames = fields
    has_q = "q_c_kvar" in fields
    kw_base = model.base_mva * 1000.0
    idx = model.bus_index
    inverter_buses = {i.bus for i in model.inverters}

    rows: Dict[np.datetime64, Dict[str, Tuple[float, float, float]]] = {}
    order = []
    last = None
    for lineno, rec in enumerate(reader, start=2):
        ts = _parse_ts(rec["timestamp"] or "")
        if last is not None and ts < last:
            raise ScenarioError(f"line {lineno}: timestamps are not monotone")
        last = ts
        bus = (rec["bus"] or "").strip()
        if bus not in idx:
            raise ScenarioError(f"line {lineno}: unknown bus {bus!r}")
        p_c = _to_pu(rec["p_c_kw"], kw_base, f"p_c_kw on line {lineno}")
        p_g = _to_pu(rec["p_g_kw"], kw_base, f"p_g_kw on line {lineno}")
        q_raw = rec.get("q_c_kvar") if has_q else None
        if q_raw is None or q_raw.strip() == "":
            pf = power_factor.get(bus, DEFAULT_PF) if isinstance(power_factor, Mapping) else power_factor
            q_c = p_c * math.tan(math.acos(pf))
        else:
            q_c = _to_pu(q_raw, kw_base, f"q_c_kvar on line {lineno}")
        if p_g != 0.0 and bus not in inverter_buses:
            raise ScenarioError(f"line {lineno}: PV output at bus {bus!r} without an inverter")
        slot = rows.get(ts)
        if slot is None:
            slot = rows[ts] = {}
            order.append(ts)
        if bus in slot:
            raise ScenarioError(f"line {lineno}: duplicate row for bus {bus!r} at {ts}")
        slot[bus] = (p_c, q_c, p_g)

    if not order:
        return empty_scenarios(model)
    bus_set = set(rows[order[0]])
    for ts in order:
        if set(rows[ts]) != bus_set:
            missing = sorted(bus_set.symmetric_difference(rows[ts]))
            raise ScenarioError(f"missing cells at {ts}: buses {missing}")
    T, B = len(order), model.n_buses
    arr = np.zeros((3, T, B))
    for n, ts in enumerate(order):
        for bus, vals in rows[ts].items():
            arr[:, n, idx[bus]] = vals
    stamps = np.array(order, dtype="datetime64[m]")
    res = int((stamps[1] - stamps[0]).astype(int)) if T > 1 else RESOLUTION_MIN
    return ScenarioSet(stamps, model.bus_ids, arr[0], arr[1], arr[2], source_tag, res)


def _to_pu(text: str, kw_base: float, what: str) -> float:
    """Exact decimal division, so values written by ``_from_pu`` load back bit-identical."""
    _num(text, what)
    return float(_DECIMAL.divide(Decimal(text.strip()), Decimal(repr(kw_base))))


def _from_pu(pu: float, kw_base: float) -> str:
    if pu == 0.0:
        return "0"
    return str(_DECIMAL.multiply(Decimal(repr(float(pu))), Decimal(repr(kw_base))).normalize(_DECIMAL))


def serialize_scenarios(sc: ScenarioSet, model: FeederModel) -> str:
    """CSV text that loads back to bit-identical per-unit arrays."""
    kw_base = model.base_mva * 1000.0
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["timestamp", "bus", "p_c_kw", "q_c_kvar", "p_g_kw"])
    cols = [j for j, b in enumerate(model.buses)
            if b.has_load or model.inverter_at(b.id) is not None
            or np.any(sc.p_c[:, j]) or np.any(sc.q_c[:, j]) or np.any(sc.p_g[:, j])]
    for n in range(len(sc)):
        ts = str(sc.timestamps[n].astype("datetime64[s]"))
        for j in cols:
            w.writerow([ts, sc.bus_ids[j]] + [
                _from_pu(a[n, j], kw_base) for a in (sc.p_c, sc.q_c, sc.p_g)
            ])
    return out.getvalue()


def aggregate_residences(profiles: Sequence[np.ndarray], target_peak: Optional[float] = None) -> np.ndarray:
    """Sum aligned residence series, then rescale so the peak equals ``target_peak``."""
    if not profiles:
        raise ScenarioError("no profiles to aggregate")
    lengths = {len(p) for p in profiles}
    if len(lengths) != 1:
        raise ScenarioError(f"profiles have different lengths {sorted(lengths)}")
    total = np.sum(np.asarray(profiles, dtype=float), axis=0)
    if target_peak is None:
        return total
    peak = total.max()
    if peak <= 0:
        raise ScenarioError("aggregate profile has no positive peak to scale")
    return total * (target_peak / peak)


@dataclass(frozen=True)
class SplitSpec:
    """Half-open ``[start, end)`` timestamp ranges; ``None`` means empty."""

    train: Optional[Tuple[np.datetime64, np.datetime64]]
    validation: Optional[Tuple[np.datetime64, np.datetime64]]

    @staticmethod
    def _range(r):
        if r is None:
            return None
        a, b = (np.datetime64(x, "m") for x in r)
        return (a, b) if b > a else None

    def __post_init__(self):
        tr, va = self._range(self.train), self._range(self.validation)
        object.__setattr__(self, "train", tr)
        object.__setattr__(self, "validation", va)
        if tr and va and tr[0] < va[1] and va[0] < tr[1]:
            raise ScenarioError("training and validation ranges overlap")

    @classmethod
    def by_days(cls, start, train_days: Iterable[int], validation_days: Iterable[int]) -> "SplitSpec":
        """Contiguous day ranges counted from ``start`` (day 0)."""
        s = np.datetime64(start, "D")

        def rng_(days):
            days = sorted(days)
            if not days:
                return None
            return (s + np.timedelta64(days[0], "D"), s + np.timedelta64(days[-1] + 1, "D"))

        return cls(rng_(train_days), rng_(validation_days))


def split(sc: ScenarioSet, spec: SplitSpec) -> Tuple[ScenarioSet, ScenarioSet]:
    def mask(r):
        if r is None:
            return np.zeros(len(sc), dtype=bool)
        return (sc.timestamps >= r[0]) & (sc.timestamps < r[1])

    return sc.select(mask(spec.train)), sc.select(mask(spec.validation))


# ---------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SyntheticConfig:
    days: int = 28
    seed: int = 0
    pv_fraction: float = 1.0
    dip: bool = True
    dip_days: tuple = (0,)
    dip_depth: float = 0.4  # PV multiplier inside the dip window
    start: str = "2014-07-04"
    resolution_min: int = RESOLUTION_MIN
    peak_kva: float = 26.0
    power_factor: float = DEFAULT_PF
    max_residences: int = 8
    sunrise_h: float = 6.5
    sunset_h: float = 20.25


def _bump(hours, center, width):
    d = (hours - center + 12.0) % 24.0 - 12.0
    return np.exp(-0.5 * (d / width) ** 2)


def _residence(rng, hours, day_scale, steps_per_day):
    shift = rng.normal(0.0, 0.6)
    base = rng.uniform(0.25, 0.45)
    shape = (
        base
        + rng.uniform(0.15, 0.35) * _bump(hours, 7.5 + shift, 1.0)
        + rng.uniform(0.25, 0.5) * _bump(hours, 15.5 + shift, 2.5)
        + rng.uniform(0.7, 1.0) * _bump(hours, 19.0 + shift, 2.0)
    )
    noise = rng.normal(0.0, 0.06, size=hours.shape)
    kernel = np.ones(3) / 3.0
    noise = np.convolve(noise, kernel, mode="same")
    daily = np.repeat(day_scale, steps_per_day)
    return np.maximum(shape * daily * (1.0 + noise), 0.05)


def pv_shape(hours, sunrise_h: float = 6.5, sunset_h: float = 20.25) -> np.ndarray:
    """Clear-sky normalised PV output: zero outside daylight, peak 1."""
    frac = (hours - sunrise_h) / (sunset_h - sunrise_h)
    inside = (frac > 0) & (frac < 1)
    return np.where(inside, np.sin(np.pi * np.clip(frac, 0, 1)) ** 1.5, 0.0)


def generate_synthetic(model: FeederModel, config: SyntheticConfig = SyntheticConfig()) -> ScenarioSet:
    """Seeded residential load and PV scenarios for every load bus.

    Loads aggregate 1..``max_residences`` synthetic homes (evening peak)
    scaled to a per-bus peak around ``peak_kva``. PV follows a daylight bell
    with per-day clearness and, on ``dip_days``, a 13:45-14:15 drop to
    ``dip_depth`` of its value. ``pv_fraction`` is the share of inverter
    buses whose PV system produces.
    """
    cfg = config
    rng = np.random.default_rng(cfg.seed)
    spd = 1440 // cfg.resolution_min
    T = cfg.days * spd
    stamps = np.datetime64(cfg.start, "m") + np.arange(T) * np.timedelta64(cfg.resolution_min, "m")
    minutes = np.arange(T) * cfg.resolution_min % 1440
    hours = minutes / 60.0
    B = model.n_buses
    kw_base = model.base_mva * 1000.0

    day_scale = rng.uniform(0.85, 1.1, size=cfg.days)
    p_c = np.zeros((T, B))
    q_c = np.zeros((T, B))
    for j, bus in enumerate(model.buses):
        if not bus.has_load:
            continue
        n_res = int(rng.integers(1, cfg.max_residences + 1))
        profiles = [_residence(rng, hours, day_scale, spd) for _ in range(n_res)]
        s_kva = aggregate_residences(profiles, cfg.peak_kva * rng.uniform(0.6, 1.4))
        pf = float(np.clip(rng.normal(cfg.power_factor, 0.015), 0.85, 0.98))
        p_c[:, j] = s_kva * pf / kw_base
        q_c[:, j] = s_kva * math.sqrt(1.0 - pf * pf) / kw_base

    clear = np.repeat(rng.uniform(0.7, 1.0, size=cfg.days), spd)
    cloud = 1.0 - 0.25 * np.clip(np.convolve(rng.normal(0, 1, T), np.ones(4) / 4, mode="same"), 0, None)
    irradiance = pv_shape(hours, cfg.sunrise_h, cfg.sunset_h) * clear * np.clip(cloud, 0.3, 1.0)
    if cfg.dip:
        window = (minutes >= 13 * 60 + 45) & (minutes <= 14 * 60 + 15)
        day_idx = np.arange(T) // spd
        irradiance = np.where(window & np.isin(day_idx, cfg.dip_days), irradiance * cfg.dip_depth, irradiance)

    p_g = np.zeros((T, B))
    n_active = int(round(cfg.pv_fraction * len(model.inverters)))
    active = set(rng.choice(len(model.inverters), size=n_active, replace=False).tolist()) if n_active else set()
    for k, inv in enumerate(model.inverters):
        local = rng.uniform(0.9, 1.0)
        jitter = 1.0 + rng.normal(0.0, 0.02, size=T)
        if k in active:
            p_g[:, model.bus_index[inv.bus]] = np.clip(inv.p_max * local * irradiance * jitter, 0.0, inv.p_max)
    tag = f"synthetic(seed={cfg.seed},days={cfg.days},pv_fraction={cfg.pv_fraction},dip={cfg.dip})"
    return ScenarioSet(stamps, model.bus_ids, p_c, q_c, p_g, tag, cfg.resolution_min)

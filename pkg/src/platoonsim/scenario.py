"""Scenario files: parsing, validation and simulator construction.

A scenario is a TOML document with the sections ``simulation``,
``corridor``, ``demand``, ``[[platoon]]``, ``maneuver``, ``controller``,
``tactical``, ``authority`` and ``[[at_events]]``. See
``docs/scenario_format.md`` for the full schema.
"""

from __future__ import annotations

import math
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Optional, Union

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .authority import ATConfig, ATEventKind
from .core import G, ControlMode, PlatoonState, TruckParameters, VehicleKind, VehicleState
from .operational import ControllerConfig
from .simulator import Corridor, DemandProfile, InitialVehicle, InsertionEvent, ReferenceSimulator
from .tactical import TacticalConfig

SHIPPED_DIR = Path(__file__).parent / "scenarios"


class ScenarioError(Exception):
    """All problems found while loading a scenario file."""

    def __init__(self, path, problems: list[str]):
        self.path = str(path)
        self.problems = problems
        super().__init__(f"{path}: {len(problems)} problem(s)\n" +
                         "\n".join(f"  {p}" for p in problems))


@dataclass(frozen=True)
class PlatoonTruck:
    params: TruckParameters
    position_m: float
    speed_mps: float
    length_m: float = 18.0
    lane: int = 0


@dataclass(frozen=True)
class StopAndGo:
    cruise_speed_mps: float = 32.0
    decel_mag_mps2: float = G / 80.0
    dwell_s: float = 10.0
    start_s: float = 20.0


@dataclass(frozen=True)
class CutIn:
    event: InsertionEvent


@dataclass(frozen=True)
class Join:
    approach_speed_delta_mps: Optional[float] = None


@dataclass(frozen=True)
class Split:
    at_time_s: float
    index: int


@dataclass(frozen=True)
class SpeedPulse:
    """Leader speed excursion of ``amplitude_mps`` shaped as sin^2 over ``duration_s``."""

    start_s: float = 20.0
    amplitude_mps: float = 2.0
    duration_s: float = 10.0


Maneuver = Union[StopAndGo, CutIn, Join, Split, SpeedPulse, None]


@dataclass(frozen=True)
class ScriptedATEvent:
    time_s: float
    truck: int
    kind: ATEventKind


@dataclass(frozen=True)
class ScenarioSpec:
    corridor: Corridor
    platoon: tuple[PlatoonTruck, ...]
    dt_s: float = 0.1
    horizon_s: float = 60.0
    seed: int = 0
    demand: DemandProfile = field(default_factory=DemandProfile)
    maneuver: Maneuver = None
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    tactical: TacticalConfig = field(default_factory=TacticalConfig)
    authority: ATConfig = field(default_factory=ATConfig)
    at_events: tuple[ScriptedATEvent, ...] = ()
    name: str = "scenario"

    @property
    def horizon_steps(self) -> int:
        return int(round(self.horizon_s / self.dt_s))

    @property
    def starts_formed(self) -> bool:
        return not isinstance(self.maneuver, Join)

    def with_seed(self, seed: Optional[int]) -> "ScenarioSpec":
        if seed is None:
            return self
        return replace(self, seed=seed)


# -- loading ----------------------------------------------------------------

_SECTIONS = {"name", "simulation", "corridor", "demand", "platoon", "maneuver",
             "controller", "tactical", "authority", "at_events"}
_PLATOON_KEYS = {f.name for f in fields(TruckParameters)} | {"position_m", "speed_mps", "length_m", "lane"}
_MANEUVERS = {"StopAndGo", "CutIn", "Join", "Split", "SpeedPulse", "None"}


class _Collector:
    def __init__(self):
        self.problems: list[str] = []

    def add(self, where: str, msg: str) -> None:
        self.problems.append(f"{where}: {msg}")

    def build(self, where: str, cls, kwargs: dict):
        try:
            return cls(**kwargs)
        except (TypeError, ValueError) as exc:
            self.add(where, str(exc))
            return None


def _table(doc: dict, key: str, bad: _Collector) -> dict:
    value = doc.get(key, {})
    if not isinstance(value, dict):
        bad.add(key, "must be a table")
        return {}
    return dict(value)


def _known(where: str, table: dict, allowed: set, bad: _Collector) -> dict:
    for k in sorted(set(table) - allowed):
        bad.add(f"{where}.{k}", "unknown key")
    return {k: v for k, v in table.items() if k in allowed}


def _numbers(where: str, table: dict, bad: _Collector, ints=()) -> dict:
    out = {}
    for k, v in table.items():
        if k in ints:
            if isinstance(v, bool) or not isinstance(v, int):
                bad.add(f"{where}.{k}", f"expected an integer, got {v!r}")
                continue
        elif isinstance(v, bool) or not isinstance(v, (int, float)):
            bad.add(f"{where}.{k}", f"expected a number, got {v!r}")
            continue
        elif not math.isfinite(v):
            bad.add(f"{where}.{k}", "must be finite")
            continue
        out[k] = v if k in ints else float(v)
    return out


def _config(where: str, table: dict, cls, bad: _Collector, ints=(), extra=None):
    names = {f.name for f in fields(cls)}
    kwargs = _numbers(where, _known(where, table, names, bad), bad, ints)
    if extra:
        for k, v in extra.items():
            kwargs.setdefault(k, v)
    return bad.build(where, cls, kwargs)


def parse_scenario(doc: dict, source: str = "<scenario>") -> ScenarioSpec:
    bad = _Collector()
    _known("<root>", doc, _SECTIONS, bad)

    sim = _table(doc, "simulation", bad)
    sim = _known("simulation", sim, {"dt_s", "horizon_s", "seed"}, bad)
    sim = _numbers("simulation", sim, bad, ints=("seed",))
    dt = sim.get("dt_s", 0.1)
    horizon = sim.get("horizon_s", 60.0)
    seed = sim.get("seed", 0)
    if not dt > 0:
        bad.add("simulation.dt_s", "must be positive")
    elif not horizon > 0:
        bad.add("simulation.horizon_s", "must be positive")
    elif abs(horizon / dt - round(horizon / dt)) > 1e-6:
        bad.add("simulation.horizon_s", f"{horizon} is not a multiple of dt_s={dt}")

    corridor = _config("corridor", _table(doc, "corridor", bad), Corridor, bad, ints=("lane_count",))
    demand = _config("demand", _table(doc, "demand", bad), DemandProfile, bad)
    controller = _config("controller", _table(doc, "controller", bad), ControllerConfig, bad)
    d0 = controller.d0_m if controller else ControllerConfig().d0_m
    tactical = _config("tactical", _table(doc, "tactical", bad), TacticalConfig, bad,
                       ints=("max_platoon_length",), extra={"standstill_spacing_m": d0})
    authority = _config("authority", _table(doc, "authority", bad), ATConfig, bad)

    trucks = _platoon(doc.get("platoon"), corridor, bad)
    maneuver = _maneuver(doc.get("maneuver"), len(trucks), dt, bad)
    at_events = _at_events(doc.get("at_events", []), len(trucks), bad)

    if tactical is not None and isinstance(maneuver, Join) and maneuver.approach_speed_delta_mps is not None:
        tactical = replace(tactical, approach_speed_delta_mps=maneuver.approach_speed_delta_mps)
    if isinstance(maneuver, StopAndGo):
        for i, t in enumerate(trucks):
            if not t.params.max_decel_mps2 <= -maneuver.decel_mag_mps2:
                bad.add(f"platoon[{i}].max_decel_mps2",
                        "cannot realise the stop-and-go deceleration")
            if maneuver.decel_mag_mps2 > t.params.max_accel_mps2:
                bad.add(f"platoon[{i}].max_accel_mps2",
                        "cannot realise the stop-and-go re-acceleration")

    name = doc.get("name", Path(source).stem)
    if not isinstance(name, str):
        bad.add("name", "must be a string")
    if bad.problems:
        raise ScenarioError(source, bad.problems)
    return ScenarioSpec(corridor=corridor, platoon=tuple(trucks), dt_s=dt, horizon_s=horizon,
                        seed=seed, demand=demand, maneuver=maneuver, controller=controller,
                        tactical=tactical, authority=authority, at_events=tuple(at_events),
                        name=name)


def _platoon(raw, corridor: Optional[Corridor], bad: _Collector) -> list[PlatoonTruck]:
    if not isinstance(raw, list) or not raw:
        bad.add("platoon", "at least one [[platoon]] entry is required")
        return []
    out = []
    for i, entry in enumerate(raw):
        where = f"platoon[{i}]"
        if not isinstance(entry, dict):
            bad.add(where, "must be a table")
            continue
        entry = _known(where, entry, _PLATOON_KEYS, bad)
        brand = entry.pop("brand", f"truck{i}")
        if not isinstance(brand, str):
            bad.add(f"{where}.brand", "must be a string")
            brand = f"truck{i}"
        nums = _numbers(where, entry, bad, ints=("lane",))
        missing = [k for k in ("position_m", "speed_mps") if k not in nums]
        for k in missing:
            bad.add(f"{where}.{k}", "is required")
        position = nums.pop("position_m", None)
        speed = nums.pop("speed_mps", None)
        length = nums.pop("length_m", 18.0)
        lane = nums.pop("lane", 0)
        params = bad.build(where, TruckParameters, dict(brand=brand, **nums))
        if speed is not None and speed < 0:
            bad.add(f"{where}.speed_mps", "must be non-negative")
        if not length > 0:
            bad.add(f"{where}.length_m", "must be positive")
        if corridor is not None and not 0 <= lane < corridor.lane_count:
            bad.add(f"{where}.lane", f"must lie in [0, {corridor.lane_count})")
        if params is None or missing:
            continue
        out.append(PlatoonTruck(params, position, speed, length, lane))
    for i, (a, b) in enumerate(zip(out, out[1:])):
        if not b.position_m < a.position_m:
            bad.add(f"platoon[{i + 1}].position_m",
                    f"platoon order: {b.position_m} is not behind {a.position_m}")
        elif b.position_m > a.position_m - a.length_m:
            bad.add(f"platoon[{i + 1}].position_m", "overlaps the truck ahead")
    if len({t.lane for t in out}) > 1:
        bad.add("platoon", "all platoon trucks must start in one lane")
    return out


def _maneuver(raw, n_trucks: int, dt: float, bad: _Collector) -> Maneuver:
    if raw is None:
        return None
    if not isinstance(raw, dict):
        bad.add("maneuver", "must be a table")
        return None
    raw = dict(raw)
    kind = raw.pop("type", None)
    if kind not in _MANEUVERS:
        bad.add("maneuver.type", f"must be one of {sorted(_MANEUVERS)}, got {kind!r}")
        return None
    if kind == "None":
        _known("maneuver", raw, set(), bad)
        return None
    if kind == "StopAndGo":
        raw = _known("maneuver", raw, {"cruise_speed_mps", "decel_mag_mps2", "decel_g_divisor",
                                       "dwell_s", "start_s"}, bad)
        nums = _numbers("maneuver", raw, bad)
        if "decel_g_divisor" in nums:
            if "decel_mag_mps2" in nums:
                bad.add("maneuver", "give decel_mag_mps2 or decel_g_divisor, not both")
            divisor = nums.pop("decel_g_divisor")
            if not divisor > 0:
                bad.add("maneuver.decel_g_divisor", "must be positive")
                return None
            nums["decel_mag_mps2"] = G / divisor
        m = bad.build("maneuver", StopAndGo, nums)
        if m is not None:
            if not m.decel_mag_mps2 > 0:
                bad.add("maneuver.decel_mag_mps2", "must be positive")
            if m.dwell_s < 0 or m.start_s < 0 or not m.cruise_speed_mps > 0:
                bad.add("maneuver", "dwell_s and start_s must be >= 0, cruise speed > 0")
        return m
    if kind == "CutIn":
        names = {f.name for f in fields(InsertionEvent)}
        nums = _numbers("maneuver", _known("maneuver", raw, names, bad), bad,
                        ints=("target_platoon_id", "insert_after_index"))
        nums.setdefault("target_platoon_id", 0)
        event = bad.build("maneuver", InsertionEvent, nums)
        if event is not None and event.insert_after_index + 1 >= n_trucks:
            bad.add("maneuver.insert_after_index", f"platoon has only {n_trucks} trucks")
        return CutIn(event) if event else None
    if kind == "Join":
        nums = _numbers("maneuver", _known("maneuver", raw, {"approach_speed_delta_mps"}, bad), bad)
        return Join(**nums)
    if kind == "Split":
        nums = _numbers("maneuver", _known("maneuver", raw, {"at_time_s", "index"}, bad), bad,
                        ints=("index",))
        if "at_time_s" not in nums or "index" not in nums:
            bad.add("maneuver", "Split needs at_time_s and index")
            return None
        if not 0 <= nums["index"] < n_trucks:
            bad.add("maneuver.index", f"must lie in [0, {n_trucks})")
        return Split(**nums)
    nums = _numbers("maneuver", _known("maneuver", raw, {"start_s", "amplitude_mps", "duration_s"}, bad), bad)
    m = SpeedPulse(**nums)
    if not m.duration_s > 0:
        bad.add("maneuver.duration_s", "must be positive")
    return m


def _at_events(raw, n_trucks: int, bad: _Collector) -> list[ScriptedATEvent]:
    if not isinstance(raw, list):
        bad.add("at_events", "must be an array of tables")
        return []
    out = []
    for i, entry in enumerate(raw):
        where = f"at_events[{i}]"
        if not isinstance(entry, dict):
            bad.add(where, "must be a table")
            continue
        entry = _known(where, entry, {"time_s", "truck", "event"}, bad)
        try:
            kind = ATEventKind(entry.get("event"))
        except ValueError:
            bad.add(f"{where}.event", f"unknown event {entry.get('event')!r}")
            continue
        nums = _numbers(where, {k: v for k, v in entry.items() if k != "event"}, bad, ints=("truck",))
        if "time_s" not in nums or "truck" not in nums:
            bad.add(where, "needs time_s and truck")
            continue
        if not 0 <= nums["truck"] < n_trucks:
            bad.add(f"{where}.truck", f"must lie in [0, {n_trucks})")
            continue
        if nums["time_s"] < 0:
            bad.add(f"{where}.time_s", "must be non-negative")
            continue
        out.append(ScriptedATEvent(nums["time_s"], nums["truck"], kind))
    return out


def load_scenario(path: Union[str, Path]) -> ScenarioSpec:
    """Parse and fully validate a scenario file.

    Raises :class:`ScenarioError` listing every problem found.
    """
    path = Path(path)
    try:
        with path.open("rb") as fh:
            doc = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ScenarioError(path, [f"parse error: {exc}"]) from exc
    return parse_scenario(doc, str(path))


def shipped_scenarios() -> dict[str, Path]:
    return {p.stem: p for p in sorted(SHIPPED_DIR.glob("*.toml"))}


def resolve_scenario(name_or_path: str) -> Path:
    """A path, or the stem of a shipped scenario such as ``stopandgo``."""
    p = Path(name_or_path)
    if p.exists():
        return p
    shipped = shipped_scenarios()
    if name_or_path in shipped:
        return shipped[name_or_path]
    raise FileNotFoundError(f"no scenario file {name_or_path!r}")


# -- simulator construction ------------------------------------------------

def initial_vehicles(spec: ScenarioSpec) -> list[InitialVehicle]:
    out = []
    for i, truck in enumerate(spec.platoon):
        formed = spec.starts_formed
        state = VehicleState(
            id=i, kind=VehicleKind.TRUCK, position_m=truck.position_m, speed_mps=truck.speed_mps,
            length_m=truck.length_m, lane=truck.lane,
            platoon_id=0 if formed else None,
            platoon_state=PlatoonState.PLATOONING if formed else PlatoonState.STANDALONE,
            control_mode=ControlMode.AUTOMATED,
            position_in_platoon=i if formed else None)
        out.append(InitialVehicle(state, truck.params))
    return out


def build_simulator(spec: ScenarioSpec, seed: Optional[int] = None) -> ReferenceSimulator:
    return ReferenceSimulator(
        corridor=spec.corridor, dt_s=spec.dt_s,
        seed=spec.seed if seed is None else seed,
        demand=spec.demand, initial=initial_vehicles(spec))


def simulator_factory(spec: ScenarioSpec):
    """Factory for :func:`platoonsim.bridge.serve`; ``None`` keeps the scenario seed."""
    def make(seed: Optional[int] = None) -> ReferenceSimulator:
        return build_simulator(spec, seed)
    return make

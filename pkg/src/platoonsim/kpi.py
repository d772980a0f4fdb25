"""Performance indicators computed from a trajectory log."""

from __future__ import annotations

import math
import statistics
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

from .core import ControlMode, PlatoonState
from .scenario import Join, ScenarioSpec, Split


class EmptyTrajectoryError(ValueError):
    pass


@dataclass(frozen=True)
class FollowerStats:
    headway_mean_m: float
    headway_std_m: float
    speed_std_mps: float
    accel_std_mps2: float


@dataclass
class KpiReport:
    followers: dict[int, FollowerStats]
    min_gap_m: Optional[float]
    collision_count: int
    maneuver_durations_s: dict[str, float] = field(default_factory=dict)
    peak_speed_deviation_mps: dict[int, float] = field(default_factory=dict)
    window_start_s: float = 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["followers"] = {str(k): v for k, v in d["followers"].items()}
        d["peak_speed_deviation_mps"] = {str(k): v for k, v in d["peak_speed_deviation_mps"].items()}
        return d

    def string_stability_ratios(self, order: Sequence[int]) -> list[float]:
        """Peak deviation ratio of each vehicle in ``order`` to its predecessor."""
        dev = self.peak_speed_deviation_mps
        return [dev[b] / dev[a] if dev[a] > 0 else math.inf
                for a, b in zip(order, order[1:])]


def _platoon_ids(records, spec: Optional[ScenarioSpec]) -> list[int]:
    if spec is not None:
        return list(range(len(spec.platoon)))
    return sorted({r.vehicle_id for r in records if r.control_mode is ControlMode.AUTOMATED})


def formation_time(records, ids) -> Optional[float]:
    """First time every truck in ``ids`` has been seen in Platooning."""
    first: dict[int, float] = {}
    for r in records:
        if r.vehicle_id in ids and r.platoon_state is PlatoonState.PLATOONING:
            first.setdefault(r.vehicle_id, r.t_s)
    if any(i not in first for i in ids):
        return None
    return max(first.values())


def compute_kpis(records: Sequence, spec: Optional[ScenarioSpec] = None) -> KpiReport:
    """Variability, safety and maneuver-duration indicators.

    Follower statistics use the window after the platoon first formed; the
    collision count, minimum gap and maneuver durations use the full log.
    """
    if not records:
        raise EmptyTrajectoryError("trajectory is empty")
    ids = _platoon_ids(records, spec)
    t0 = formation_time(records, ids)
    window_start = t0 if t0 is not None else records[0].t_s

    series: dict[int, list] = defaultdict(list)
    for r in records:
        series[r.vehicle_id].append(r)

    min_gap = None
    collisions = 0
    for rows in series.values():
        was_negative = False
        for r in rows:
            if r.gap_m is None:
                was_negative = False
                continue
            min_gap = r.gap_m if min_gap is None else min(min_gap, r.gap_m)
            negative = r.gap_m < 0
            if negative and not was_negative:
                collisions += 1
            was_negative = negative

    followers = {}
    peak = {}
    for vid in ids:
        rows = [r for r in series.get(vid, ()) if r.t_s >= window_start]
        if not rows:
            continue
        speeds = [r.speed_mps for r in rows]
        peak[vid] = max(abs(v - speeds[0]) for v in speeds)
        gaps = [r.gap_m for r in rows if r.gap_m is not None]
        if not gaps:
            continue
        # statistics.pstdev is exact, so a constant series gives exactly zero
        followers[vid] = FollowerStats(
            headway_mean_m=statistics.fmean(gaps),
            headway_std_m=statistics.pstdev(gaps),
            speed_std_mps=statistics.pstdev(speeds),
            accel_std_mps2=statistics.pstdev([r.accel_mps2 for r in rows]),
        )

    return KpiReport(followers, min_gap, collisions, _durations(series, ids, spec),
                     peak, window_start)


def _durations(series, ids, spec: Optional[ScenarioSpec]) -> dict[str, float]:
    out = {}
    maneuver = spec.maneuver if spec is not None else None
    for vid in ids:
        rows = series.get(vid, ())
        joining = next((r.t_s for r in rows if r.platoon_state is PlatoonState.JOINING), None)
        if joining is not None and (maneuver is None or isinstance(maneuver, Join)):
            done = next((r.t_s for r in rows if r.t_s >= joining
                         and r.platoon_state is PlatoonState.PLATOONING), None)
            if done is not None:
                out[f"join:{vid}"] = round(done - joining, 9)
    if isinstance(maneuver, Split):
        rows = series.get(maneuver.index, ())
        done = next((r.t_s for r in rows if r.t_s > maneuver.at_time_s
                     and r.platoon_state is PlatoonState.STANDALONE), None)
        if done is not None:
            out[f"split:{maneuver.index}"] = round(done - maneuver.at_time_s, 9)
    return out

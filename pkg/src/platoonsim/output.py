"""Trajectory CSV files and the four figure panels."""

from __future__ import annotations

import csv
import io
from pathlib import Path
from typing import Iterable, Optional, Sequence

from .core import ControlMode, PlatoonState
from .runner import TrajectoryRecord

CSV_HEADER = ("t_s", "vehicle_id", "position_m", "speed_mps", "accel_mps2",
              "gap_m", "time_gap_s", "platoon_state", "control_mode")
PANELS = ("position", "speed", "accel", "headway")


class OutputError(OSError):
    pass


def _num(x: Optional[float]) -> str:
    return "" if x is None else repr(float(x))


def format_csv(records: Iterable[TrajectoryRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in records:
        w.writerow((_num(r.t_s), r.vehicle_id, _num(r.position_m), _num(r.speed_mps),
                    _num(r.accel_mps2), _num(r.gap_m), _num(r.time_gap_s),
                    r.platoon_state.value, r.control_mode.value))
    return buf.getvalue()


def write_csv(records: Sequence[TrajectoryRecord], path) -> Path:
    path = Path(path)
    try:
        path.write_text(format_csv(records), encoding="utf-8")
    except OSError as exc:
        raise OutputError(f"cannot write {path}: {exc.strerror or exc}") from exc
    return path


def _opt(s: str) -> Optional[float]:
    return None if s == "" else float(s)


def read_csv(path) -> list[TrajectoryRecord]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise OutputError(f"cannot read {path}: {exc.strerror or exc}") from exc
    rows = csv.reader(io.StringIO(text))
    header = next(rows, None)
    if tuple(header or ()) != CSV_HEADER:
        raise ValueError(f"{path}: unexpected header {header!r}")
    out = []
    for n, row in enumerate(rows, start=2):
        try:
            out.append(TrajectoryRecord(
                float(row[0]), int(row[1]), float(row[2]), float(row[3]), float(row[4]),
                _opt(row[5]), _opt(row[6]), PlatoonState(row[7]), ControlMode(row[8])))
        except (IndexError, ValueError) as exc:
            raise ValueError(f"{path}:{n}: {exc}") from exc
    return out


def plotted_vehicles(records: Sequence[TrajectoryRecord]) -> list[int]:
    """Platoon trucks plus vehicles that first appear inside the platoon envelope."""
    automated = {r.vehicle_id for r in records if r.control_mode is ControlMode.AUTOMATED}
    first_seen: dict[int, TrajectoryRecord] = {}
    by_time: dict[float, list[TrajectoryRecord]] = {}
    for r in records:
        first_seen.setdefault(r.vehicle_id, r)
        by_time.setdefault(r.t_s, []).append(r)
    chosen = set(automated)
    for vid, r in first_seen.items():
        if vid in chosen:
            continue
        trucks = [o.position_m for o in by_time[r.t_s] if o.vehicle_id in automated]
        if trucks and min(trucks) < r.position_m < max(trucks):
            chosen.add(vid)
    return sorted(chosen)


def emit_plots(records: Sequence[TrajectoryRecord], out_dir, t_window: Optional[tuple] = None,
               headway_vehicle: Optional[int] = None) -> list[Path]:
    """Write position/speed/accel/headway panels as SVG files.

    ``t_window`` crops all panels to ``(t_start, t_end)``. The headway panel
    shows the second platoon truck unless ``headway_vehicle`` is given.
    """
    if not records:
        raise ValueError("no records to plot")
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OutputError(f"cannot create {out_dir}: {exc.strerror or exc}") from exc

    if t_window is not None:
        lo, hi = t_window
        records = [r for r in records if lo <= r.t_s <= hi]
        if not records:
            raise ValueError(f"no records inside window {t_window}")
    vehicles = plotted_vehicles(records)
    if headway_vehicle is None:
        trucks = sorted({r.vehicle_id for r in records if r.control_mode is ControlMode.AUTOMATED})
        headway_vehicle = trucks[1] if len(trucks) > 1 else (vehicles[0] if vehicles else None)

    series: dict[int, list[TrajectoryRecord]] = {v: [] for v in vehicles}
    for r in records:
        if r.vehicle_id in series:
            series[r.vehicle_id].append(r)

    panels = {
        "position": ("position [m]", lambda r: r.position_m, vehicles),
        "speed": ("speed [m/s]", lambda r: r.speed_mps, vehicles),
        "accel": ("acceleration [m/s$^2$]", lambda r: r.accel_mps2, vehicles),
        "headway": ("headway to leader [m]", lambda r: r.gap_m, [headway_vehicle]),
    }
    written = []
    plt.rcParams["svg.hashsalt"] = "platoonsim"
    for name, (label, get, ids) in panels.items():
        fig, ax = plt.subplots(figsize=(7, 4))
        for vid in ids:
            if vid is None:
                continue
            rows = [r for r in series.get(vid, ()) if get(r) is not None]
            ax.plot([r.t_s for r in rows], [get(r) for r in rows], label=f"vehicle {vid}",
                    linewidth=1.2)
        ax.set_xlabel("time [s]")
        ax.set_ylabel(label)
        ax.grid(True, alpha=0.3)
        if ax.lines:
            ax.legend(loc="best", fontsize="small")
        path = out_dir / f"{name}.svg"
        try:
            fig.savefig(path, format="svg", metadata={"Date": None})
        except OSError as exc:
            raise OutputError(f"cannot write {path}: {exc.strerror or exc}") from exc
        finally:
            plt.close(fig)
        written.append(path)
    return written

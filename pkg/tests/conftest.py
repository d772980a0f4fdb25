import pytest

from platoonsim.core import (
    ControlMode,
    PlatoonState,
    SimClock,
    Snapshot,
    TruckParameters,
    VehicleKind,
    VehicleState,
)
from platoonsim.simulator import Corridor, InitialVehicle, ReferenceSimulator


def truck(vid, x, v, pid=None, idx=None, state=PlatoonState.STANDALONE,
          mode=ControlMode.AUTOMATED, lane=0, length=18.0, accel=0.0):
    return VehicleState(id=vid, kind=VehicleKind.TRUCK, position_m=x, speed_mps=v,
                        accel_mps2=accel, length_m=length, lane=lane, platoon_id=pid,
                        platoon_state=state, control_mode=mode, position_in_platoon=idx)


def car(vid, x, v, lane=0):
    return VehicleState(id=vid, kind=VehicleKind.CAR, position_m=x, speed_mps=v,
                        length_m=4.5, lane=lane)


def snap(*vehicles, step=0, dt=0.1):
    return Snapshot(SimClock(step, dt), tuple(vehicles))


def platoon(n, v=32.0, head=1000.0, clearance=None, length=18.0):
    """n trucks in Platooning at the given clearance (default d0 + 1.6 v)."""
    c = 5.0 + 1.6 * v if clearance is None else clearance
    return [truck(i, head - i * (c + length), v, pid=0, idx=i, state=PlatoonState.PLATOONING)
            for i in range(n)]


def sim_with(vehicles, params=None, **kw):
    params = params or TruckParameters(desired_speed_mps=32.0)
    init = [InitialVehicle(v, params if v.kind is VehicleKind.TRUCK else None) for v in vehicles]
    kw.setdefault("corridor", Corridor(length_m=20000.0))
    return ReferenceSimulator(initial=init, **kw)


@pytest.fixture
def default_truck():
    return TruckParameters(desired_speed_mps=32.0)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)

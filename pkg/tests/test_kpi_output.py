import pytest
from hypothesis import given, settings, strategies as st

from platoonsim.core import ControlMode as M, PlatoonState as S
from platoonsim.kpi import EmptyTrajectoryError, compute_kpis
from platoonsim.output import CSV_HEADER, emit_plots, format_csv, read_csv, write_csv
from platoonsim.runner import TrajectoryRecord, run
from platoonsim.scenario import build_simulator, load_scenario, parse_scenario, resolve_scenario


def rec(t, vid, x=0.0, v=10.0, a=0.0, g=None, state=S.PLATOONING, mode=M.AUTOMATED):
    tg = None if g is None else g / max(v, 0.1)
    return TrajectoryRecord(t, vid, x, v, a, g, tg, state, mode)


def constant_log(n=50):
    out = []
    for k in range(n):
        t = round(k * 0.1, 9)
        out.append(rec(t, 0, 1000.0 + 32 * t, 32.0))
        out.append(rec(t, 1, 1000.0 + 32 * t - 74.2, 32.0, g=56.2))
    return out


def test_constant_series():
    k = compute_kpis(constant_log())
    f = k.followers[1]
    assert f.headway_std_m == 0.0 and f.headway_mean_m == pytest.approx(56.2)
    assert f.speed_std_mps == 0.0 and f.accel_std_mps2 == 0.0
    assert k.min_gap_m == pytest.approx(56.2)
    assert k.collision_count == 0


def test_join_duration():
    recs = [rec(float(t), 1, state=S.STANDALONE if t < 5 else S.JOINING if t < 47 else S.PLATOONING)
            for t in range(60)]
    assert compute_kpis(recs).maneuver_durations_s["join:1"] == pytest.approx(42.0)


def test_split_duration():
    spec = parse_scenario({"simulation": {"dt_s": 1.0, "horizon_s": 60.0},
                           "platoon": [{"position_m": 500.0, "speed_mps": 1.0},
                                       {"position_m": 400.0, "speed_mps": 1.0}],
                           "maneuver": {"type": "Split", "at_time_s": 10.0, "index": 1}})
    recs = [rec(float(t), 1, state=S.PLATOONING if t < 10 else S.FRONT_SPLIT if t < 31 else S.STANDALONE)
            for t in range(60)]
    assert compute_kpis(recs, spec).maneuver_durations_s["split:1"] == pytest.approx(21.0)


def test_collision_counting():
    log = constant_log(5)
    log[3] = rec(0.1, 1, g=-0.5)
    assert compute_kpis(log).collision_count == 1
    # one continuous overlap counts once, a second onset counts again
    gaps = [5.0, -1.0, -2.0, 3.0, -1.0]
    recs = [rec(float(i), 1, g=g) for i, g in enumerate(gaps)]
    assert compute_kpis(recs).collision_count == 2


def test_empty_log():
    with pytest.raises(EmptyTrajectoryError):
        compute_kpis([])


def test_post_formation_window():
    recs = []
    for t in range(20):
        recs.append(rec(float(t), 0, state=S.JOINING if t < 8 else S.PLATOONING))
        recs.append(rec(float(t), 1, g=100.0 if t < 8 else 50.0,
                        state=S.JOINING if t < 8 else S.PLATOONING))
    k = compute_kpis(recs)
    assert k.window_start_s == 8.0
    assert k.followers[1].headway_std_m == 0.0


def test_csv_header_and_round_trip(tmp_path):
    recs = constant_log(3) + [rec(0.3, 4, v=0.1 + 0.2, g=None, state=S.STANDALONE, mode=M.MANUAL)]
    p = write_csv(recs, tmp_path / "t.csv")
    assert p.read_text().splitlines()[0] == ",".join(CSV_HEADER)
    assert read_csv(p) == recs


finite = st.floats(-1e6, 1e6, allow_nan=False)


@settings(max_examples=50)
@given(st.lists(st.tuples(finite, finite, st.floats(0, 100), finite,
                          st.one_of(st.none(), finite)), min_size=1, max_size=20))
def test_csv_round_trip_property(tmp_path_factory, rows):
    recs = [rec(float(i), i, x, v, a, g) for i, (x, a, v, _, g) in enumerate(rows)]
    p = tmp_path_factory.mktemp("csv") / "t.csv"
    write_csv(recs, p)
    assert read_csv(p) == recs


def test_read_csv_rejects_wrong_header(tmp_path):
    p = tmp_path / "x.csv"
    p.write_text("a,b\n1,2\n")
    with pytest.raises(ValueError):
        read_csv(p)


def test_kpis_equal_from_csv(tmp_path):
    spec = load_scenario(resolve_scenario("cutin"))
    recs = run(spec, build_simulator(spec))
    p = write_csv(recs, tmp_path / "t.csv")
    assert compute_kpis(read_csv(p), spec) == compute_kpis(recs, spec)


def test_plots_written(tmp_path):
    spec = load_scenario(resolve_scenario("cutin"))
    recs = run(spec, build_simulator(spec))
    files = emit_plots(recs, tmp_path / "plots", t_window=(5.0, 25.0))
    assert sorted(f.name for f in files) == ["accel.svg", "headway.svg", "position.svg", "speed.svg"]
    for f in files:
        assert f.read_text().lstrip().startswith("<?xml")
    # the intruder appears in the kinematic panels
    assert "vehicle 4" in (tmp_path / "plots" / "speed.svg").read_text()


def test_empty_plot_writes_nothing(tmp_path):
    with pytest.raises(ValueError):
        emit_plots([], tmp_path / "none")
    assert not (tmp_path / "none").exists()


def test_format_is_deterministic():
    log = constant_log(10)
    assert format_csv(log) == format_csv(list(log))

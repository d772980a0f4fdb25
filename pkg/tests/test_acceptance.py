"""Acceptance criteria 1-9.

Each check records one PASS/FAIL line (printed in the terminal summary by
conftest.py) and then asserts. Tolerances are pinned as module constants.
"""

import random
import threading
import time
from collections import defaultdict

import numpy as np
import pytest

from platoonsim.bridge.protocol import (
    Apply,
    Bye,
    Error,
    Event,
    Hello,
    HelloAck,
    QueryState,
    State,
    Step,
    Stepped,
    decode,
    encode,
)
from platoonsim.bridge.server import Session, bind, serve
from platoonsim.cli import main
from platoonsim.core import (
    CommandRecord,
    ControlMode,
    PlatoonState as S,
    TruckParameters,
    VehicleKind,
    VehicleState,
)
from platoonsim.kpi import compute_kpis
from platoonsim.operational import ControllerConfig, SensorReading, compute_accel
from platoonsim.output import format_csv
from platoonsim.runner import RunLog, run
from platoonsim.scenario import (
    build_simulator,
    load_scenario,
    resolve_scenario,
    shipped_scenarios,
    simulator_factory,
)
from platoonsim.tactical import ALLOWED_EDGES, TacticalDecision, transition

RESULTS: list[str] = []

DT = 0.1
TIME_GAP = 1.6
TG_TOL_STEADY = 0.05
TG_TOL_RECOVERED = 0.08
RECOVERY_WINDOW_S = 60.0
STOP_GAP_MAX = 5.0 + 2.0
CUTIN_WINDOW_S = 20.0
CUTIN_MIN_ACCEL = -0.05
CUTIN_SETTLED = 0.02
STRING_RATIO_MAX = 1.05
SCENARIO_RUNTIME_S = 2.0
CONTROLLER_RUNTIME_S = 10.0
N_BOUNDS = 10**6
N_MONOTONE = 10**5
EQ_TOL = 1e-9
N_DOUBLES = 10**6


def check(criterion: str, ok: bool, detail: str) -> None:
    RESULTS.append(f"[{'PASS' if ok else 'FAIL'}] {criterion}: {detail}")
    assert ok, f"{criterion}: {detail}"


def timed_run(name):
    spec = load_scenario(resolve_scenario(name))
    t0 = time.perf_counter()
    log = RunLog()
    records = run(spec, build_simulator(spec), log)
    return spec, records, log, time.perf_counter() - t0


def by_vehicle(records):
    out = defaultdict(list)
    for r in records:
        out[r.vehicle_id].append(r)
    return out


# -- 1. stop-and-go -----------------------------------------------------------

@pytest.fixture(scope="module")
def stopandgo():
    spec, records, _, elapsed = timed_run("stopandgo")
    assert spec.dt_s == DT
    return spec, records, by_vehicle(records), elapsed


def test_1a_stopandgo_no_collision(stopandgo):
    spec, records, _, _ = stopandgo
    n = compute_kpis(records, spec).collision_count
    check("1a stop-and-go collisions", n == 0, f"collision_count={n} (required 0)")


def test_1_stopandgo_runtime(stopandgo):
    elapsed = stopandgo[3]
    check("1 stop-and-go runtime", elapsed < SCENARIO_RUNTIME_S,
          f"{elapsed:.2f} s (required < {SCENARIO_RUNTIME_S} s)")


def test_1b_stopandgo_steady_time_gap(stopandgo):
    spec, _, series, _ = stopandgo
    start = spec.maneuver.start_s
    worst = {}
    policy = {}
    for vid in range(1, len(spec.platoon)):
        rows = [r for r in series[vid] if start - 10.0 <= r.t_s < start]
        worst[vid] = max(abs(r.time_gap_s - TIME_GAP) for r in rows)
        policy[vid] = np.mean([(r.gap_m - spec.controller.d0_m) / r.speed_mps for r in rows])
    RESULTS.append(f"[INFO] 1b policy time gap (gap - d0)/v per follower: "
                   + ", ".join(f"{v}: {policy[v]:.4f} s" for v in policy))
    check("1b pre-maneuver time gap", all(w <= TG_TOL_STEADY for w in worst.values()),
          f"max |tg - {TIME_GAP}| per follower = "
          + ", ".join(f"{v}: {w:.4f}" for v, w in worst.items())
          + f" (tolerance {TG_TOL_STEADY} s)")


def test_1c_stopandgo_min_gap_while_stopped(stopandgo):
    spec, _, series, _ = stopandgo
    lead = series[0]
    stop_start = next(r.t_s for r in lead if r.speed_mps == 0.0)
    restart = next(r.t_s for r in lead if r.t_s > stop_start and r.speed_mps > 0.0)
    gaps = [r.gap_m for vid in range(1, len(spec.platoon)) for r in series[vid]
            if spec.maneuver.start_s <= r.t_s <= restart]
    g = min(gaps)
    check("1c min gap in stop phase", 0.0 < g < STOP_GAP_MAX,
          f"min gap {g:.3f} m (required 0 < gap < {STOP_GAP_MAX} m)")


def test_1d_stopandgo_recovery(stopandgo):
    spec, _, series, _ = stopandgo
    lead = series[0]
    stop = next(r.t_s for r in lead if r.speed_mps == 0.0)
    back = next(r.t_s for r in lead
                if r.t_s > stop and r.speed_mps >= spec.maneuver.cruise_speed_mps - 1e-9)
    settle = {}
    for vid in range(1, len(spec.platoon)):
        rows = [r for r in series[vid] if r.t_s >= back]
        t_ok = None
        for r in reversed(rows):
            if abs(r.time_gap_s - TIME_GAP) > TG_TOL_RECOVERED:
                break
            t_ok = r.t_s
        settle[vid] = None if t_ok is None else round(t_ok - back, 3)
        final = rows[-1].time_gap_s
        settle[vid] = (settle[vid], round(final, 4))
    ok = all(s is not None and s <= RECOVERY_WINDOW_S for s, _ in settle.values())
    check("1d time gap recovery", ok,
          f"leader back at cruise t={back:g} s; per follower (settle s, final tg s) = {settle} "
          f"(required |tg - {TIME_GAP}| <= {TG_TOL_RECOVERED} within {RECOVERY_WINDOW_S:g} s)")


# -- 2. cut-in ----------------------------------------------------------------

@pytest.fixture(scope="module")
def cutin():
    spec, records, log, elapsed = timed_run("cutin")
    return spec, records, log, elapsed


def test_2a_cutin_no_collision(cutin):
    spec, records, _, elapsed = cutin
    n = compute_kpis(records, spec).collision_count
    check("2a cut-in collisions", n == 0, f"collision_count={n} (required 0)")
    check("2 cut-in runtime", elapsed < SCENARIO_RUNTIME_S,
          f"{elapsed:.2f} s (required < {SCENARIO_RUNTIME_S} s)")


def _intruder(spec, records):
    trucks = set(range(len(spec.platoon)))
    ids = {r.vehicle_id for r in records} - trucks
    assert len(ids) == 1
    return ids.pop()


def test_2b_cutin_acceleration_signature(cutin):
    spec, records, _, _ = cutin
    series = by_vehicle(records)
    intruder = _intruder(spec, records)
    t_ins = series[intruder][0].t_s
    ins_pos = series[intruder][0].position_m
    behind = [vid for vid in range(len(spec.platoon))
              if next(r for r in series[vid] if r.t_s == t_ins).position_m < ins_pos]
    detail = {}
    ok = bool(behind)
    for vid in behind:
        rows = series[vid]
        window = [r for r in rows if t_ins <= r.t_s <= t_ins + CUTIN_WINDOW_S]
        low = min(window, key=lambda r: r.accel_mps2)
        pos = next((r for r in rows if r.t_s > low.t_s and r.accel_mps2 > 0.0), None)
        calm = None if pos is None else next(
            (r for r in rows if r.t_s > pos.t_s and abs(r.accel_mps2) < CUTIN_SETTLED), None)
        good = low.accel_mps2 <= CUTIN_MIN_ACCEL and pos is not None and calm is not None
        ok &= good
        detail[vid] = (round(low.accel_mps2, 3), pos and pos.t_s, calm and calm.t_s)
    check("2b reduce-then-increase acceleration", ok,
          f"intruder {intruder} at t={t_ins:g}; per follower (min a, first a>0 at, |a|<"
          f"{CUTIN_SETTLED} at) = {detail} (required min a <= {CUTIN_MIN_ACCEL})")


def test_2c_cutin_state_sequence(cutin):
    spec, records, log, _ = cutin
    series = by_vehicle(records)
    intruder = _intruder(spec, records)
    t_ins = series[intruder][0].t_s
    snap_at = {r.vehicle_id: r for r in records if r.t_s == t_ins}
    behind = sorted((vid for vid in range(len(spec.platoon))
                     if snap_at[vid].position_m < snap_at[intruder].position_m),
                    key=lambda v: -snap_at[v].position_m)
    direct = behind[0]
    seqs = {}
    for vid in behind:
        seq = []
        for r in series[vid]:
            if not seq or seq[-1] is not r.platoon_state:
                seq.append(r.platoon_state)
        seqs[vid] = seq
    edges_ok = all((a, b) in ALLOWED_EDGES for vid in behind
                   for a, b in zip(seqs[vid], seqs[vid][1:]))
    d = seqs[direct]
    direct_ok = (d[:2] == [S.PLATOONING, S.CUT_IN] and len(d) >= 3
                 and d[2] in (S.PLATOONING, S.BACK_SPLIT))
    logged_ok = all((old, new) in ALLOWED_EDGES for _, _, old, new in log.transitions)
    check("2c state transitions", edges_ok and direct_ok and logged_ok,
          f"truck directly behind intruder {direct}: {'->'.join(s.value for s in d)}; "
          f"others: " + "; ".join(f"{v}: {'->'.join(s.value for s in seqs[v])}" for v in behind[1:])
          + " (all edges in the allowed set)")


# -- 3. string stability ------------------------------------------------------

def test_3_string_stability():
    spec, records, _, elapsed = timed_run("stringstability")
    assert len(spec.platoon) == 5 and spec.maneuver.amplitude_mps == 2.0
    kpis = compute_kpis(records, spec)
    ratios = kpis.string_stability_ratios(list(range(len(spec.platoon))))
    lead_peak = kpis.peak_speed_deviation_mps[0]
    check("3 string stability", max(ratios) <= STRING_RATIO_MAX and elapsed < SCENARIO_RUNTIME_S,
          f"leader peak {lead_peak:.3f} m/s; ratios {[round(r, 4) for r in ratios]} "
          f"(required <= {STRING_RATIO_MAX}); runtime {elapsed:.2f} s")


# -- 4. state machine ---------------------------------------------------------

def test_4_transition_table():
    accepted = suppressed = 0
    exact = True
    for cur in S:
        for prop in S:
            out = transition(cur, prop)
            legal = cur is prop or (cur, prop) in ALLOWED_EDGES
            exact &= out is (prop if legal else cur)
            if cur is not prop:
                accepted += out is prop
                suppressed += out is cur
    check("4 transition table", exact and accepted == 10 and suppressed == 20,
          f"{len(list(S)) ** 2} pairs: {accepted} edges accepted, 6 identities, "
          f"{suppressed} suppressed (required 10/6/20)")


# -- 5. authority transitions --------------------------------------------------

def test_5_authority_timing():
    spec, records, log, _ = timed_run("takeover")
    rows = {r.t_s: r.control_mode for r in records if r.vehicle_id == 1}
    flip = next(t for t in sorted(rows) if rows[t] is ControlMode.MANUAL)
    back = next(t for t in sorted(rows) if t > flip and rows[t] is ControlMode.AUTOMATED)
    rejected = [t for t, vid, res in log.authority if vid == 1 and res.rejected]
    ok = (flip == 11.5 and rows[11.4] is ControlMode.AUTOMATED and 21.4 in rejected
          and rows[21.4] is ControlMode.MANUAL and back == 21.5)
    check("5 authority timing", ok,
          f"Manual from t={flip!r} (required 11.5); request at 21.4 rejected={21.4 in rejected}; "
          f"Automated again at t={back!r} (required 21.5)")


# -- 6. transport transparency ---------------------------------------------------

@pytest.mark.parametrize("name", ["stopandgo", "cutin"])
def test_6_remote_identical(name, tmp_path):
    spec = load_scenario(resolve_scenario(name))
    local = tmp_path / "local"
    remote = tmp_path / "remote"
    assert main(["run", "--scenario", name, "--out", str(local), "--no-plots"]) == 0
    listener = bind("127.0.0.1", 0)
    port = listener.getsockname()[1]
    th = threading.Thread(target=serve, args=(simulator_factory(spec), spec.dt_s),
                          kwargs=dict(listener=listener, max_sessions=1), daemon=True)
    th.start()
    rc = main(["run", "--scenario", name, "--out", str(remote), "--no-plots",
               "--remote", f"127.0.0.1:{port}"])
    th.join(10.0)
    a = (local / "trajectory.csv").read_bytes()
    b = (remote / "trajectory.csv").read_bytes() if rc == 0 else b""
    check(f"6 transport transparency ({name})", rc == 0 and a == b,
          f"local {len(a)} bytes, remote {len(b)} bytes, identical={a == b}")


# -- 7. controller properties ----------------------------------------------------

def test_7_controller_properties():
    rng = np.random.default_rng(7)
    cfg = ControllerConfig()
    t0 = time.perf_counter()
    trucks = [TruckParameters(mass_kg=m, engine_power_kw=p, max_accel_mps2=a, max_decel_mps2=d)
              for m, p, a, d in zip(rng.uniform(15e3, 44e3, 50), rng.uniform(200, 600, 50),
                                    rng.uniform(0.3, 2.0, 50), rng.uniform(-8.0, -1.0, 50))]
    v = rng.uniform(0.0, 40.0, N_BOUNDS)
    g = rng.uniform(0.0, 200.0, N_BOUNDS)
    vl = rng.uniform(0.0, 40.0, N_BOUNDS)
    tg = rng.uniform(0.3, 3.0, N_BOUNDS)
    decisions = [TacticalDecision(x, 32.0, S.PLATOONING) for x in rng.uniform(0.3, 3.0, 1000)]
    which = rng.integers(0, len(trucks), N_BOUNDS)
    no_leader = rng.random(N_BOUNDS) < 0.1
    out_of_bounds = 0
    for i in range(N_BOUNDS):
        p = trucks[which[i]]
        reading = SensorReading(v[i]) if no_leader[i] else SensorReading(v[i], g[i], vl[i])
        a = compute_accel(reading, decisions[i % 1000], p, cfg).accel_mps2
        if not p.max_decel_mps2 <= a <= p.max_accel_mps2:
            out_of_bounds += 1

    eq_worst = 0.0
    for i in range(10_000):
        spacing = cfg.d0_m + tg[i] * v[i]
        dec = TacticalDecision(tg[i], 32.0, S.PLATOONING)
        a = compute_accel(SensorReading(v[i], spacing, v[i]), dec, trucks[0], cfg).accel_mps2
        eq_worst = max(eq_worst, abs(a))

    # rejection-sample until N_MONOTONE pairs are both below saturation
    violations = 0
    checked = 0
    wide = TruckParameters(max_accel_mps2=50.0, max_decel_mps2=-50.0, engine_power_kw=1e6)
    while checked < N_MONOTONE:
        v1, vl1 = rng.uniform(0.0, 40.0, 2)
        g_lo, g_hi = np.sort(rng.uniform(0.0, 200.0, 2))
        dec = decisions[checked % 1000]
        a1 = compute_accel(SensorReading(v1, g_lo, vl1), dec, wide, cfg)
        a2 = compute_accel(SensorReading(v1, g_hi, vl1), dec, wide, cfg)
        if a1.saturated or a2.saturated or g_lo == g_hi:
            continue
        checked += 1
        violations += not a1.accel_mps2 < a2.accel_mps2
    elapsed = time.perf_counter() - t0
    check("7 controller bounds", out_of_bounds == 0,
          f"{out_of_bounds} of {N_BOUNDS} samples outside [max_decel, max_accel]")
    check("7 controller equilibrium", eq_worst < EQ_TOL,
          f"max |a| at gap = d0 + T*v, equal speeds: {eq_worst:.3e} (required < {EQ_TOL})")
    check("7 controller monotonicity", violations == 0 and checked == N_MONOTONE,
          f"{violations} violations in {checked} pre-saturation pairs")
    check("7 controller runtime", elapsed < CONTROLLER_RUNTIME_S,
          f"{elapsed:.2f} s (required < {CONTROLLER_RUNTIME_S} s)")


# -- 8. determinism ------------------------------------------------------------

def test_8_determinism():
    same = {}
    for name, path in shipped_scenarios().items():
        spec = load_scenario(path)
        a = format_csv(run(spec, build_simulator(spec)))
        b = format_csv(run(spec, build_simulator(spec)))
        same[name] = a == b
    spec = load_scenario(resolve_scenario("join"))
    assert spec.demand.arrival_rate_veh_per_h > 0
    arrivals = []
    for seed in (spec.seed, spec.seed + 1):
        s = spec.with_seed(seed)
        sim = build_simulator(s)
        run(s, sim)
        arrivals.append(sim.arrivals)
    differ = arrivals[0] != arrivals[1] and len(arrivals[0]) > 0
    check("8 determinism", all(same.values()) and differ,
          f"byte-identical reruns: {same}; arrivals with seeds {spec.seed}/{spec.seed + 1}: "
          f"{len(arrivals[0])}/{len(arrivals[1])} vehicles, sequences differ={differ}")


# -- 9. protocol conformance -----------------------------------------------------

def _random_doubles(n, seed):
    bits = np.random.default_rng(seed).integers(0, 2**64, size=2 * n, dtype=np.uint64)
    xs = bits.view(np.float64)
    return xs[np.isfinite(xs)][:n]


def test_9_frame_round_trip():
    xs = _random_doubles(N_DOUBLES, 9)
    assert len(xs) == N_DOUBLES
    it = iter(xs.tolist())
    seq = iter(range(1, 10**9))
    sent = []
    taken = 0

    def take(k):
        nonlocal taken
        taken += k
        return [next(it) for _ in range(k)]

    # scalar-carrying variants, a share of the budget each
    for _ in range(10_000):
        sent.append(Hello("1", take(1)[0], next(seq)))
        sent.append(QueryState(take(1)[0], next(seq)))
        sent.append(Step(take(1)[0], next(seq)))
        sent.append(Stepped(take(1)[0], next(seq)))
    for _ in range(1000):
        sent.append(HelloAck("1", next(seq)))
        sent.append(Error("malformed", "x", next(seq)))
        sent.append(Bye(next(seq)))
    # bulk: commands, vehicles and event parameters
    while taken < N_DOUBLES - 3000:
        a, t = take(2)
        cmds = []
        for i in range(100):
            x, y = take(2)
            cmds.append(CommandRecord(i, x, y))
        sent.append(Apply(a, tuple(cmds), next(seq)))
        vehicles = []
        for i in range(100):
            p, s, acc, ln = take(4)
            vehicles.append(VehicleState(i, VehicleKind.TRUCK, p, abs(s), acc,
                                         abs(ln) or 5e-324, 0, i, S.PLATOONING,
                                         ControlMode.AUTOMATED, 0))
        sent.append(State(t, tuple(vehicles), next(seq)))
        sent.append(Event("probe", {"values": take(200)}, next(seq)))
    rest = N_DOUBLES - taken
    if rest:
        sent.append(Event("probe", {"values": take(rest)}, next(seq)))

    mismatches = sum(decode(encode(m)) != m for m in sent)
    # equality on floats treats 0.0 == -0.0; confirm the bits separately
    bits_ok = all(
        np.array_equal(np.array([c.accel_cmd_mps2 for c in decode(encode(m)).commands]).view(np.uint64),
                       np.array([c.accel_cmd_mps2 for c in m.commands]).view(np.uint64))
        for m in sent if isinstance(m, Apply))
    variants = {type(m).__name__ for m in sent}
    check("9 frame round trip", mismatches == 0 and bits_ok and taken == N_DOUBLES
          and len(variants) == 10,
          f"{len(sent)} frames over {len(variants)} message variants carrying {taken} random "
          f"doubles; {mismatches} mismatches, bit-exact={bits_ok}")


class _Spy:
    def __init__(self, sim, dt):
        self.sim, self.dt, self.illegal = sim, dt, []

    @property
    def clock(self):
        return self.sim.clock

    def query_state(self, t):
        return self.sim.query_state(t)

    def peek_state(self):
        return self.sim.peek_state()

    def apply_commands(self, cmds):
        return self.sim.apply_commands(cmds)

    def step(self, dt):
        if dt != self.dt:
            self.illegal.append(("step", dt))
        return self.sim.step(dt)

    def inject_event(self, e):
        return self.sim.inject_event(e)


def test_9_session_fuzz():
    spec = load_scenario(resolve_scenario("cutin"))
    make = simulator_factory(spec)
    rng = random.Random(99)
    spies = []
    untyped = 0
    illegal_unanswered = 0
    sessions = 2000

    def fac(seed=None):
        spies.append(_Spy(make(seed), spec.dt_s))
        return spies[-1]

    for _ in range(sessions):
        s = Session(fac, spec.dt_s)
        seq = 0
        for _ in range(rng.randint(1, 15)):
            if s.closed:
                break
            seq += rng.choice([1, 1, 1, 0, -1])
            t = s.simulator.clock.t_s if s.simulator else 0.0
            msg = rng.choice([
                Hello("1", spec.dt_s, seq), Hello("9", spec.dt_s, seq), Hello("1", 0.5, seq),
                QueryState(t, seq), QueryState(t + rng.choice([0.1, -0.1, 7.0]), seq),
                Apply(t, (CommandRecord(rng.randrange(6), rng.uniform(-5, 5), t),), seq),
                Step(spec.dt_s, seq), Step(rng.choice([0.0, 0.2, 1.0]), seq),
                Event(rng.choice(["status", "insertion", "teleport"]), {"v": 1}, seq),
                Stepped(t, seq), HelloAck("1", seq), State(t, (), seq), Error("malformed", "", seq),
            ])
            before = s.phase
            reply = s.handle(msg)
            if reply is None:
                continue
            if isinstance(reply, Error):
                if reply.code not in ("version", "out-of-phase", "malformed", "invalid-state",
                                      "unknown-tag", "oversize"):
                    untyped += 1
            elif isinstance(msg, (Stepped, HelloAck, State, Error)) or (
                    before.name == "AWAIT_HELLO" and not isinstance(msg, Hello)):
                illegal_unanswered += 1
    illegal_calls = sum(len(sp.illegal) for sp in spies)
    check("9 session fuzzing", illegal_calls == 0 and untyped == 0 and illegal_unanswered == 0,
          f"{sessions} random sessions: {illegal_calls} illegal simulator calls, "
          f"{illegal_unanswered} illegal messages without ERROR, {untyped} untyped errors")

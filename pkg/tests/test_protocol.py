import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pqbench.errors import BenchError, ConfigError, ControlTimeout, VersionMismatch
from pqbench.model import Mode, Registry, builtin_registry
from pqbench.tls.control import Err, Go, Ready, Result, Suite
from pqbench.tls.protocol import (Event, Measurement, PlanEntry, TestPlan, build_plan, check_window_safety,
                                  client_session, server_session, simulate)

REG = builtin_registry()
SMALL = Registry([REG["ML-KEM-512"], REG["ML-KEM-768"], REG["ML-DSA-44"], REG["FN-DSA-512"]])


def run(plan, *, drop=None, timeout=2.0, retries=3, server_version=1, client_version=1, latency=0.01, measure=None):
    s = server_session(plan, machine_id="srv", control_timeout=timeout, max_retries=retries,
                       proto_version=server_version)
    c = client_session(plan, machine_id="cli", control_timeout=timeout, max_retries=retries,
                       proto_version=client_version)
    return simulate(s, c, window_seconds=plan.window_seconds, drop=drop, latency=latency, measure=measure)


def test_plan_order_runs_then_sig_then_kem_then_mode():
    plan = build_plan(SMALL, 2, 1.0)
    assert len(plan) == 2 * 2 * 2 * 2
    assert [e.test_id for e in plan][:4] == [
        "ML-DSA-44|ML-KEM-512|first", "ML-DSA-44|ML-KEM-512|reuse",
        "ML-DSA-44|ML-KEM-768|first", "ML-DSA-44|ML-KEM-768|reuse",
    ]
    assert [e.run_index for e in plan] == [1] * 8 + [2] * 8
    assert build_plan(SMALL, 1, 1.0, first_run=4)[0].run_index == 4


def test_plan_skips_algorithms_without_handshake_capability():
    plan = build_plan(REG, 1, 1.0)
    assert not any("HQC" in e.kem_algorithm_id for e in plan)
    plan.check_capabilities(REG)
    with pytest.raises(ConfigError):
        TestPlan([PlanEntry("ML-DSA-44", "HQC-128", Mode.FIRST_USE)], 1.0).check_capabilities(REG)


def test_plan_rejects_duplicates_and_bad_window():
    e = PlanEntry("ML-DSA-44", "ML-KEM-512", Mode.FIRST_USE)
    with pytest.raises(ConfigError):
        TestPlan([e, e], 1.0)
    with pytest.raises(ConfigError):
        TestPlan([e], 0.0)


def test_clean_session_results_carry_measurements():
    plan = build_plan(SMALL, 1, 2.0)
    res = run(plan, measure=lambda e: Measurement(10 if e.mode is Mode.FIRST_USE else 40, 2.0, 5.0))
    assert res.ok
    assert res.server.peer_machine_id == "cli" and res.client.peer_machine_id == "srv"
    assert [m.connections for _, m in res.client.results] == [10, 40] * 4
    # one window per test, each as long as the configured window in virtual time
    starts = [ev for ev in res.events if ev.kind == "window_start"]
    assert len(starts) == len(plan)
    assert res.elapsed >= len(plan) * 2.0


def test_version_mismatch_fails_fast():
    res = run(build_plan(SMALL, 1, 1.0), server_version=2)
    assert isinstance(res.client_error, VersionMismatch) or isinstance(res.server_error, VersionMismatch)


def test_silent_server_times_out_client():
    plan = build_plan(SMALL, 1, 1.0)
    res = run(plan, drop=lambda who, msg, n: who == "server")
    assert isinstance(res.client_error, ControlTimeout)


def test_test_is_skipped_after_max_retries_and_plan_continues():
    plan = build_plan(SMALL, 1, 1.0)
    victim = plan[2].test_id
    res = run(plan, drop=lambda who, msg, n: who == "client" and isinstance(msg, Go) and msg.test_id == victim,
              retries=2)
    assert res.ok
    assert res.server.skipped == [victim]
    assert [e.test_id for e in res.client.skipped] == [victim]
    assert len(res.client.results) == len(plan) - 1
    assert [a for t, a in res.server.retries if t == victim] == [1, 2]
    assert check_window_safety(res.events) == []


def test_lost_result_ack_is_committed_once_but_unconfirmed():
    plan = build_plan(SMALL, 1, 1.0)
    first = plan[0].test_id
    res = run(plan, drop=lambda who, msg, n: who == "server" and isinstance(msg, Result) and msg.test_id == first)
    assert res.ok
    assert [e.test_id for e, _ in res.client.results] == [e.test_id for e in plan]
    # the server did keep it, but the client had no way to know
    assert first in res.server.completed
    assert [e.test_id for e in res.client.unconfirmed] == [first]


def test_lost_prompts_and_skip_notices_are_settled_as_skips():
    plan = build_plan(SMALL, 1, 1.0)
    # retries=0: the first GO, the second READY and both skip notices vanish
    res = run(plan, retries=0, latency=0.0, drop=lambda who, msg, n: n in {2, 4, 6, 29, 30})
    assert res.ok
    assert sorted(e.test_id for e in res.client.skipped) == sorted(res.server.skipped)
    assert [e.test_id for e, _ in res.client.results] == res.server.completed


def test_lost_skip_notice_marks_the_result_unconfirmed():
    plan = build_plan(SMALL, 1, 1.0)
    first = plan[0].test_id
    # drop every client RESULT for the first test and the server's skip notice
    res = run(plan, retries=1, drop=lambda who, msg, n: (isinstance(msg, Result) and msg.test_id == first
                                                         and who == "client")
              or (isinstance(msg, Err) and msg.detail == first))
    assert res.ok
    assert res.server.skipped == [first]
    assert [e.test_id for e in res.client.unconfirmed] == [first]
    assert res.client.results[0][0].test_id == first
    assert len(res.client.results) == len(plan)


def test_client_never_measures_before_the_go_echo():
    plan = build_plan(SMALL, 1, 1.0)
    res = run(plan)
    for ev in res.events:
        if ev.kind == "window_start":
            echoes = [e for e in res.events if e.seq < ev.seq and e.actor == "server" and e.kind == "send"
                      and isinstance(e.message, Go) and e.test_id == ev.test_id]
            assert echoes


def test_safety_checker_flags_early_window():
    tid_a, tid_b = "S|K|first", "S|K|reuse"
    events = [
        Event(0.0, 1, "server", "send", Ready(Suite.HANDSHAKE, tid_a), tid_a),
        Event(0.1, 2, "client", "window_start", None, tid_a),
        Event(1.0, 3, "client", "window_start", None, tid_b),
    ]
    problems = check_window_safety(events)
    assert len(problems) == 1 and tid_b in problems[0]
    assert check_window_safety(events[:2]) == []


@settings(max_examples=150, deadline=None)
@given(st.sets(st.integers(1, 60), max_size=12), st.floats(0.0, 0.3), st.integers(0, 3))
def test_arbitrary_drops_never_break_safety(dropped, latency, retries):
    plan = build_plan(SMALL, 1, 1.0)
    res = run(plan, drop=lambda who, msg, n: n in dropped, latency=latency, retries=retries)
    assert check_window_safety(res.events) == []
    for err in (res.server_error, res.client_error):
        assert err is None or isinstance(err, BenchError)
    if res.ok:
        done = [e.test_id for e, _ in res.client.results] + [e.test_id for e in res.client.skipped]
        assert sorted(done) == sorted(e.test_id for e in plan)
        confirmed = [e.test_id for e, _ in res.client.results if e not in res.client.unconfirmed]
        assert [t for t in res.server.completed if t in confirmed] == confirmed
        # the two logs may only disagree about results the server never acknowledged
        disputed = set(res.server.skipped) ^ {e.test_id for e in res.client.skipped}
        assert disputed <= {e.test_id for e in res.client.unconfirmed}

"""Control-session state machines, written sans-IO.

Both roles are generators that yield *actions* and receive their results:

    Send(msg)          -> None
    Recv(timeout)      -> ControlMessage, or None on timeout
    Now()              -> current time in seconds
    OpenWindow(entry)  -> None            (server: start serving data connections)
    CloseWindow(entry) -> int             (server: stop serving, returns handshakes served)
    Measure(entry)     -> Measurement     (client: run one measurement window)

A driver supplies the I/O. :func:`simulate` runs a server and a client against
each other in virtual time over a lossy in-memory link; ``runner`` drives the
same generators over real sockets.

Per test the exchange is::

    server READY tid  ->  client GO tid  ->  server GO tid (window open)
    client measures   ->  client RESULT tid <payload>  ->  server RESULT tid <served>

A lost message surfaces as a timeout on the server, which re-prompts with
``RETRY tid n``; after ``max_retries`` it sends ``ERR TOO_MANY_RETRIES tid`` and
skips the test. The client only opens a window after the server's GO echo,
which the server only sends in reply to a GO answering its own READY/RETRY.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from typing import Callable, Generator, Iterable, Sequence

from ..errors import (
    BenchError,
    ConfigError,
    ControlTimeout,
    PeerError,
    PlanMismatch,
    StreamClosed,
    VersionMismatch,
)
from ..model import AlgorithmDescriptor, Capability, Family, Mode
from .control import (
    PROTO_VERSION,
    ControlMessage,
    Done,
    Err,
    Go,
    Hello,
    Ready,
    Result,
    Retry,
    Suite,
    make_test_id,
)

# -- plan ---------------------------------------------------------------------


@dataclass(frozen=True)
class PlanEntry:
    sig_algorithm_id: str
    kem_algorithm_id: str
    mode: Mode
    run_index: int = 1

    @property
    def test_id(self) -> str:
        return make_test_id(self.sig_algorithm_id, self.kem_algorithm_id, self.mode)


@dataclass(frozen=True)
class TestPlan:
    entries: tuple[PlanEntry, ...]
    window_seconds: float
    num_runs: int = 1

    __test__ = False  # not a pytest class

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        if not self.window_seconds > 0:
            raise ConfigError("window_seconds must be > 0")
        seen = set()
        for e in self.entries:
            key = (e.sig_algorithm_id, e.kem_algorithm_id, e.mode, e.run_index)
            if key in seen:
                raise ConfigError(f"duplicate plan entry {e.test_id} run {e.run_index}")
            seen.add(key)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __getitem__(self, i: int) -> PlanEntry:
        return self.entries[i]

    def check_capabilities(self, registry) -> None:
        for e in self.entries:
            for alg_id, fam in ((e.sig_algorithm_id, Family.SIGNATURE), (e.kem_algorithm_id, Family.KEM)):
                d = registry.get(alg_id)
                if d is None or d.family is not fam or not d.has(Capability.HANDSHAKE):
                    raise ConfigError(f"{alg_id} cannot take part in handshake tests")


def build_plan(
    registry: Iterable[AlgorithmDescriptor],
    num_runs: int,
    window_seconds: float,
    *,
    modes: Sequence[Mode] = (Mode.FIRST_USE, Mode.SESSION_REUSE),
    first_run: int = 1,
) -> TestPlan:
    """Every HANDSHAKE-capable (sig, kem) pair in every mode, runs outermost.

    Both roles build the plan from the same registry, so the order is part of
    the protocol: run, then signature, then KEM, then mode, each in registry order.
    """
    descs = [d for d in registry if d.has(Capability.HANDSHAKE)]
    sigs = [d.id for d in descs if d.family is Family.SIGNATURE]
    kems = [d.id for d in descs if d.family is Family.KEM]
    entries = [
        PlanEntry(s, k, m, run)
        for run in range(first_run, first_run + num_runs)
        for s in sigs
        for k in kems
        for m in modes
    ]
    return TestPlan(tuple(entries), window_seconds, num_runs)


# -- actions ------------------------------------------------------------------


@dataclass(frozen=True)
class Send:
    msg: ControlMessage


@dataclass(frozen=True)
class Recv:
    timeout: float


@dataclass(frozen=True)
class Now:
    pass


@dataclass(frozen=True)
class OpenWindow:
    entry: PlanEntry


@dataclass(frozen=True)
class CloseWindow:
    entry: PlanEntry


@dataclass(frozen=True)
class Measure:
    entry: PlanEntry


@dataclass(frozen=True)
class Measurement:
    connections: int
    real_seconds: float
    user_connections_per_sec: float
    failures: int = 0

    def payload(self) -> str:
        return f"{self.connections} {self.real_seconds!r} {self.user_connections_per_sec!r} {self.failures}"


@dataclass
class ServerLog:
    completed: list[str] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)
    retries: list[tuple[str, int]] = field(default_factory=list)
    served: dict[int, dict[str, int]] = field(default_factory=dict)  # run -> test id -> count
    peer_machine_id: str = ""
    handshake_failures: int = 0

    @property
    def retry_count(self) -> int:
        return len(self.retries)


@dataclass
class ClientOutcome:
    results: list[tuple[PlanEntry, Measurement]] = field(default_factory=list)
    skipped: list[PlanEntry] = field(default_factory=list)
    retries_seen: int = 0
    peer_machine_id: str = ""
    # Kept without the server's RESULT echo. Usually the echo alone was lost,
    # but if the RETRY and skip notice went too the server lists these as skipped.
    unconfirmed: list[PlanEntry] = field(default_factory=list)


Session = Generator[object, object, object]


def _await(match: Callable[[ControlMessage], bool], timeout: float, *,
           on_other: Callable[[ControlMessage], list] | None = None):
    """Wait up to ``timeout`` for a message satisfying ``match``.

    Non-matching messages are passed to ``on_other``, which may return actions
    to perform (e.g. re-answering a duplicate HELLO); peer ERR raises.
    """
    deadline = (yield Now()) + timeout
    while True:
        remaining = deadline - (yield Now())
        if remaining <= 0:
            return None
        msg = yield Recv(remaining)
        if msg is None:
            return None
        if match(msg):
            return msg
        if on_other is not None:
            for action in on_other(msg) or ():
                yield action


def _raise_peer(err: Err) -> None:
    if err.code == VersionMismatch.code:
        raise VersionMismatch(err.detail)
    raise PeerError(f"{err.code} {err.detail}".strip())


# -- server -------------------------------------------------------------------


def server_session(
    plan: TestPlan,
    *,
    machine_id: str,
    control_timeout: float,
    max_retries: int,
    proto_version: int = PROTO_VERSION,
    suite: Suite = Suite.HANDSHAKE,
) -> Session:
    log = ServerLog()
    retry_after = control_timeout / 2
    result_wait = plan.window_seconds + retry_after
    hello_reply = Hello(proto_version, machine_id)

    hello = yield from _await(lambda m: isinstance(m, (Hello, Err)), control_timeout)
    if hello is None:
        raise ControlTimeout(f"no HELLO within {control_timeout}s")
    if isinstance(hello, Err):
        _raise_peer(hello)
    if hello.proto_version != proto_version:
        yield Send(Err(VersionMismatch.code, f"server={proto_version} client={hello.proto_version}"))
        raise VersionMismatch(f"client speaks version {hello.proto_version}, server {proto_version}")
    log.peer_machine_id = hello.machine_id
    yield Send(hello_reply)

    def on_other(msg):
        if isinstance(msg, Hello):
            return [Send(hello_reply)]  # our reply was lost and the client asked again
        if isinstance(msg, Err):
            _raise_peer(msg)
        return []

    for entry in plan:
        tid = entry.test_id
        prompt: ControlMessage = Ready(suite, tid)
        attempt = 0
        while True:
            yield Send(prompt)
            go = yield from _await(lambda m: isinstance(m, Go) and m.test_id == tid, retry_after, on_other=on_other)
            if go is not None:
                yield OpenWindow(entry)
                yield Send(Go(tid))
                res = yield from _await(lambda m: isinstance(m, Result) and m.test_id == tid, result_wait,
                                        on_other=on_other)
                served = yield CloseWindow(entry)
                if res is not None:
                    yield Send(Result(tid, str(served)))
                    log.completed.append(tid)
                    log.served.setdefault(entry.run_index, {})[tid] = served
                    break
            attempt += 1
            if attempt > max_retries:
                yield Send(Err("TOO_MANY_RETRIES", tid))
                log.skipped.append(tid)
                break
            log.retries.append((tid, attempt))
            prompt = Retry(tid, attempt)

    for _ in range(max_retries + 1):
        yield Send(Done(suite))
        try:
            got = yield from _await(lambda m: isinstance(m, Done), retry_after, on_other=on_other)
        except StreamClosed:
            break  # client already left after its DONE
        if got is not None:
            break
    return log


# -- client -------------------------------------------------------------------


def client_session(
    plan: TestPlan,
    *,
    machine_id: str,
    control_timeout: float,
    max_retries: int,
    proto_version: int = PROTO_VERSION,
    suite: Suite = Suite.HANDSHAKE,
) -> Session:
    out = ClientOutcome()
    retry_after = control_timeout / 2
    patience = control_timeout + plan.window_seconds
    entries = plan.entries

    # HELLO, resent until the server answers; a READY or RETRY also means it accepted us.
    stash = None
    for _ in range(max_retries + 1):
        yield Send(Hello(proto_version, machine_id))
        reply = yield from _await(lambda m: isinstance(m, (Hello, Err, Ready, Retry, Done)), retry_after)
        if reply is None:
            continue
        if isinstance(reply, Err):
            _raise_peer(reply)
        if isinstance(reply, Hello):
            if reply.proto_version != proto_version:
                raise VersionMismatch(f"server speaks version {reply.proto_version}, client {proto_version}")
            out.peer_machine_id = reply.machine_id
        else:
            stash = reply
        break
    else:
        raise ControlTimeout(f"no HELLO reply after {max_retries + 1} attempts")

    i = 0
    pending: Measurement | None = None

    def commit(acked: bool = False):
        # without the server's RESULT echo we cannot tell a kept result from a skipped one
        nonlocal i, pending
        out.results.append((entries[i], pending))
        if not acked:
            out.unconfirmed.append(entries[i])
        pending = None
        i += 1

    def settle_until(stop: int):
        """The server has moved past entries[i:stop]: keep what we measured, the rest was skipped."""
        nonlocal i, pending
        while i < stop:
            if pending is not None:
                commit()
            else:
                out.skipped.append(entries[i])
                i += 1

    def find_ahead(tid: str) -> int | None:
        return next((j for j in range(i, len(entries)) if entries[j].test_id == tid), None)

    def expect(tid: str):
        if i >= len(entries) or entries[i].test_id != tid:
            want = entries[i].test_id if i < len(entries) else "<end of plan>"
            return Err(PlanMismatch.code, f"expected {want} got {tid}")
        return None

    while True:
        if stash is not None:
            msg, stash = stash, None
        else:
            msg = yield Recv(patience)
        if msg is None:
            raise ControlTimeout(f"server silent for {patience}s")

        if isinstance(msg, Done):
            settle_until(len(entries))
            yield Send(Done(suite))
            break
        if isinstance(msg, Result):
            if pending is not None and msg.test_id == entries[i].test_id:
                commit(acked=True)
            continue
        if isinstance(msg, Err):
            if msg.code == "TOO_MANY_RETRIES":
                j = find_ahead(msg.detail)
                if j is not None:
                    settle_until(j)
                    out.skipped.append(entries[i])
                    pending = None
                    i += 1
                continue
            _raise_peer(msg)
        if not isinstance(msg, (Ready, Retry)):
            continue  # duplicate HELLO or a stale echo

        tid = msg.test_id
        if pending is not None:
            if isinstance(msg, Retry) and tid == entries[i].test_id:
                pending = None  # server never saw our RESULT; measure again
            else:
                commit()  # the ack was lost; the server has moved on
        if i < len(entries) and entries[i].test_id != tid:
            j = find_ahead(tid)
            if j is not None:
                settle_until(j)  # the prompts and skip notices in between were lost
        if isinstance(msg, Retry):
            out.retries_seen += 1
        mismatch = expect(tid)
        if mismatch is not None:
            yield Send(mismatch)
            raise PlanMismatch(mismatch.detail)

        # GO until the server confirms, answering each RETRY with a fresh GO.
        while True:
            yield Send(Go(tid))
            reply = yield from _await(
                lambda m: (isinstance(m, (Go, Retry)) and m.test_id == tid)
                or (isinstance(m, (Ready, Retry)) and m.test_id != tid) or isinstance(m, (Err, Done)),
                patience,
            )
            if reply is None:
                raise ControlTimeout(f"no GO confirmation for {tid}")
            if isinstance(reply, Go):
                pending = yield Measure(entries[i])
                yield Send(Result(tid, pending.payload()))
                break
            if isinstance(reply, Retry) and reply.test_id == tid:
                out.retries_seen += 1
                continue
            stash = reply  # skip notice, DONE, or the server has moved on: the main loop settles it
            break
    return out


# -- virtual-time simulator ---------------------------------------------------


@dataclass(frozen=True)
class Event:
    time: float
    seq: int
    actor: str
    kind: str  # send, drop, recv, window_open, window_close, window_start, window_end, timeout
    message: ControlMessage | None = None
    test_id: str = ""


DropFn = Callable[[str, ControlMessage, int], bool]


@dataclass
class SimulationResult:
    server: ServerLog | None
    client: ClientOutcome | None
    server_error: BenchError | None
    client_error: BenchError | None
    events: list[Event]
    elapsed: float

    @property
    def ok(self) -> bool:
        return self.server_error is None and self.client_error is None


class _Party:
    def __init__(self, name: str, gen: Session):
        self.name = name
        self.gen = gen
        self.inbox: list[ControlMessage] = []
        self.wake: float | None = None  # virtual time of pending timeout / measurement end
        self.waiting: str = ""  # "recv" or "measure"
        self.measure_value = None
        self.done = False
        self.result = None
        self.error: BenchError | None = None


def simulate(
    server_gen: Session,
    client_gen: Session,
    *,
    window_seconds: float,
    drop: DropFn | None = None,
    latency: float = 0.0,
    measure: Callable[[PlanEntry], Measurement] | None = None,
    max_steps: int = 1_000_000,
) -> SimulationResult:
    """Run both roles to completion in virtual time.

    ``drop(sender, msg, n)`` is consulted for the n-th message sent (1-based,
    across both directions); returning True loses it. Measurement windows take
    ``window_seconds`` of virtual time; delivery takes ``latency``.
    """
    measure = measure or (lambda e: Measurement(1, window_seconds, 1.0))
    events: list[Event] = []
    parties = {"server": _Party("server", server_gen), "client": _Party("client", client_gen)}
    peer = {"server": "client", "client": "server"}
    in_flight: list[tuple[float, int, str, ControlMessage]] = []
    clock = 0.0
    counter = [0, 0]  # message number, event sequence
    open_windows: dict[str, int] = {}

    def emit(actor, kind, msg=None, tid=""):
        counter[1] += 1
        tid = tid or getattr(msg, "test_id", "")
        events.append(Event(clock, counter[1], actor, kind, msg, tid))

    def advance(p: _Party, value=None, exc: BaseException | None = None) -> None:
        p.waiting, p.wake = "", None
        try:
            while True:
                if exc is not None:
                    action, exc = p.gen.throw(exc), None
                else:
                    action = p.gen.send(value)
                value = None
                if isinstance(action, Now):
                    value = clock
                elif isinstance(action, Send):
                    counter[0] += 1
                    if drop is not None and drop(p.name, action.msg, counter[0]):
                        emit(p.name, "drop", action.msg)
                    else:
                        emit(p.name, "send", action.msg)
                        heapq.heappush(in_flight, (clock + latency, counter[0], peer[p.name], action.msg))
                elif isinstance(action, Recv):
                    if p.inbox:
                        value = p.inbox.pop(0)
                        emit(p.name, "recv", value)
                    else:
                        p.waiting, p.wake = "recv", clock + action.timeout
                        return
                elif isinstance(action, OpenWindow):
                    open_windows[action.entry.test_id] = 0
                    emit(p.name, "window_open", tid=action.entry.test_id)
                elif isinstance(action, CloseWindow):
                    value = open_windows.pop(action.entry.test_id, 0)
                    emit(p.name, "window_close", tid=action.entry.test_id)
                elif isinstance(action, Measure):
                    tid = action.entry.test_id
                    emit(p.name, "window_start", tid=tid)
                    m = measure(action.entry)
                    if tid in open_windows:
                        open_windows[tid] += m.connections
                    p.waiting, p.wake, p.measure_value = "measure", clock + window_seconds, (tid, m)
                    return
                else:
                    raise TypeError(f"unknown action {action!r}")
        except StopIteration as stop:
            p.done, p.result = True, stop.value
        except BenchError as err:
            p.done, p.error = True, err

    for p in parties.values():
        advance(p)

    steps = 0
    while not all(p.done for p in parties.values()):
        steps += 1
        if steps > max_steps:
            raise RuntimeError("simulation did not terminate")
        # deliver everything due now
        while in_flight and in_flight[0][0] <= clock:
            _, _, to, msg = heapq.heappop(in_flight)
            if not parties[to].done:
                parties[to].inbox.append(msg)
        progressed = False
        for p in parties.values():
            if not p.done and p.waiting == "recv" and p.inbox:
                msg = p.inbox.pop(0)
                emit(p.name, "recv", msg)
                advance(p, msg)
                progressed = True
        if progressed:
            continue
        wakes = [p.wake for p in parties.values() if not p.done and p.wake is not None]
        if in_flight:
            wakes.append(in_flight[0][0])
        if not wakes:
            break  # both blocked forever; cannot happen with finite timeouts
        clock = max(clock, min(wakes))
        for p in parties.values():
            if p.done or p.wake is None or p.wake > clock:
                continue
            if p.waiting == "measure":
                tid, m = p.measure_value
                emit(p.name, "window_end", tid=tid)
                advance(p, m)
            elif not p.inbox:
                emit(p.name, "timeout")
                advance(p, None)

    srv, cli = parties["server"], parties["client"]
    return SimulationResult(srv.result, cli.result, srv.error, cli.error, events, clock)


def check_window_safety(events: Sequence[Event]) -> list[str]:
    """Violations of: every client window_start is preceded by a server READY or
    RETRY for the same test, with no prompt for a different test in between."""
    problems = []
    last_prompt = None
    for ev in events:
        if ev.actor == "server" and ev.kind == "send" and isinstance(ev.message, (Ready, Retry)):
            last_prompt = ev.message.test_id
        if ev.actor == "client" and ev.kind == "window_start":
            if last_prompt != ev.test_id:
                problems.append(f"window for {ev.test_id} started after prompt for {last_prompt}")
    return problems

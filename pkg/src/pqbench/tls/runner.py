"""Socket drivers for the control sessions, the server's data-accept loop, the
client's measurement window, and the TLS speed bench."""

from __future__ import annotations

import logging
import socket
import threading
import time
from typing import Callable, Iterable, Mapping

from ..compute_bench import _operation_callables, run_fixed_window
from ..errors import (
    BenchError,
    ConfigError,
    ConnectRefused,
    ControlTimeout,
    HandshakeMismatch,
    MalformedControl,
    MissingProvider,
    OpPanic,
    StreamClosed,
)
from ..model import BenchConfig, Capability, HandshakeRecord, Mode, Role, SpeedRecord
from ..provider import CycleCounter, OutputKind, default_cycle_counter, external_adapter, mock_providers
from .control import MAX_LINE_BYTES, ControlMessage, Err, decode_control, encode_control
from .handshake import ClientSession, CredentialManifest, ServerIdentity, SessionCache, client_handshake, \
    server_handshake
from .protocol import (
    ClientOutcome,
    CloseWindow,
    Event,
    Measure,
    Measurement,
    Now,
    OpenWindow,
    PlanEntry,
    Recv,
    Send,
    ServerLog,
    Session,
    TestPlan,
    build_plan,
    client_session,
    server_session,
)

log = logging.getLogger(__name__)


class LineChannel:
    """Newline-delimited control messages over a connected socket."""

    def __init__(self, sock: socket.socket):
        self.sock = sock
        self._buf = bytearray()

    def send(self, msg: ControlMessage) -> None:
        try:
            self.sock.sendall(encode_control(msg).encode("utf-8") + b"\n")
        except (BrokenPipeError, ConnectionResetError) as exc:
            raise StreamClosed(str(exc)) from None

    def recv(self, timeout: float) -> ControlMessage | None:
        """Next message, None on timeout; a malformed line comes back as an ERR."""
        deadline = time.monotonic() + timeout
        while b"\n" not in self._buf:
            if len(self._buf) > MAX_LINE_BYTES:
                self._buf.clear()
                return Err(MalformedControl.code, "line too long")
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                return None
            self.sock.settimeout(remaining)
            try:
                chunk = self.sock.recv(4096)
            except socket.timeout:
                return None
            except ConnectionResetError as exc:
                raise StreamClosed(str(exc)) from None
            if not chunk:
                raise StreamClosed("control connection closed by peer")
            self._buf += chunk
        line, _, rest = bytes(self._buf).partition(b"\n")
        self._buf = bytearray(rest)
        try:
            return decode_control(line)
        except MalformedControl as exc:
            log.warning("dropping malformed control line: %s", exc)
            return Err(MalformedControl.code, exc.detail)


def drive(
    gen: Session,
    channel: LineChannel,
    *,
    actor: str,
    events: list[Event] | None = None,
    on_open: Callable[[PlanEntry], None] | None = None,
    on_close: Callable[[PlanEntry], int] | None = None,
    on_measure: Callable[[PlanEntry], Measurement] | None = None,
):
    """Run a control-session generator over a real channel; returns its result.

    Events are stamped with ``time.monotonic()`` so logs from both roles of
    one process can be merged.
    """
    seq = [0]

    def note(kind, msg=None, tid=""):
        if events is not None:
            seq[0] += 1
            events.append(Event(time.monotonic(), seq[0], actor, kind, msg, tid or getattr(msg, "test_id", "")))

    value, exc = None, None
    while True:
        try:
            action = gen.throw(exc) if exc is not None else gen.send(value)
        except StopIteration as stop:
            return stop.value
        value, exc = None, None
        try:
            if isinstance(action, Now):
                value = time.monotonic()
            elif isinstance(action, Send):
                note("send", action.msg)
                channel.send(action.msg)
            elif isinstance(action, Recv):
                value = channel.recv(action.timeout)
                note("recv" if value is not None else "timeout", value)
            elif isinstance(action, OpenWindow):
                note("window_open", tid=action.entry.test_id)
                if on_open:
                    on_open(action.entry)
            elif isinstance(action, CloseWindow):
                value = on_close(action.entry) if on_close else 0
                note("window_close", tid=action.entry.test_id)
            elif isinstance(action, Measure):
                note("window_start", tid=action.entry.test_id)
                value = on_measure(action.entry)
                note("window_end", tid=action.entry.test_id)
            else:
                raise TypeError(f"unknown action {action!r}")
        except StreamClosed as closed:
            exc = closed


# -- server -------------------------------------------------------------------


class DataServer:
    """Accept loop for the data port; serves handshakes only while a window is open."""

    def __init__(self, listener: socket.socket, providers: Mapping[str, object], manifest: CredentialManifest,
                 io_timeout: float):
        self.listener = listener
        self.providers = providers
        self.manifest = manifest
        self.io_timeout = io_timeout
        self.cache = SessionCache()
        self._identities: dict[str, ServerIdentity] = {}
        self._lock = threading.Lock()
        self._entry: PlanEntry | None = None
        self._served = 0
        self.failures = 0
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._loop, name="pqbench-data", daemon=True)

    def identity(self, sig_id: str) -> ServerIdentity:
        if sig_id not in self._identities:
            if sig_id not in self.manifest:
                raise ConfigError(f"no credentials for {sig_id}; run gen-keys first")
            self._identities[sig_id] = ServerIdentity(self.manifest.certificate(sig_id),
                                                      self.manifest.secret_key(sig_id))
        return self._identities[sig_id]

    def start(self) -> None:
        self.listener.settimeout(0.05)
        self._thread.start()

    def stop(self) -> None:
        self._stop.set()
        self._thread.join(timeout=5)

    def open(self, entry: PlanEntry) -> None:
        self.identity(entry.sig_algorithm_id)
        with self._lock:
            self._entry, self._served = entry, 0

    def close(self, entry: PlanEntry) -> int:
        with self._lock:  # waits for an in-progress handshake to finish
            served, self._entry = self._served, None
        return served

    def _loop(self) -> None:
        while not self._stop.is_set():
            try:
                conn, _ = self.listener.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            with conn, self._lock:
                entry = self._entry
                if entry is None:
                    continue  # outside a window: refuse by closing
                conn.settimeout(self.io_timeout)
                conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                try:
                    server_handshake(conn, self.providers[entry.kem_algorithm_id],
                                     self.providers[entry.sig_algorithm_id], entry.mode,
                                     self.identity(entry.sig_algorithm_id), self.cache)
                    self._served += 1
                except (BenchError, OSError) as exc:
                    self.failures += 1
                    log.debug("handshake failed: %s", exc)


def _listen(host: str, port: int) -> socket.socket:
    s = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    s.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    try:
        s.bind((host, port))
    except OSError as exc:
        s.close()
        raise ConfigError(f"cannot bind {host}:{port}: {exc}") from None
    s.listen(16)
    return s


def run_handshake_server(
    config: BenchConfig,
    registry,
    manifest: CredentialManifest,
    plan: TestPlan | None = None,
    *,
    providers: Mapping[str, object] | None = None,
    events: list[Event] | None = None,
    on_listening: Callable[[], None] | None = None,
) -> ServerLog:
    if config.role is not Role.SERVER:
        raise ConfigError("run_handshake_server needs role=server")
    plan = plan or build_plan(registry, config.num_runs, config.tls_window_seconds)
    plan.check_capabilities(registry)
    providers = providers or mock_providers(registry, config.seed, config.mock_work_scale)
    control = _listen(config.bind_address, config.control_port)
    data = _listen(config.bind_address, config.data_port)
    server = DataServer(data, providers, manifest, config.control_timeout_seconds)
    try:
        server.start()
        if on_listening:
            on_listening()
        control.settimeout(config.control_timeout_seconds * (config.max_retries + 1))
        try:
            conn, peer = control.accept()
        except socket.timeout:
            raise ControlTimeout("no client connected to the control port") from None
        log.info("control connection from %s:%d", *peer[:2])
        with conn:
            gen = server_session(plan, machine_id=config.machine_id, control_timeout=config.control_timeout_seconds,
                                 max_retries=config.max_retries)
            result = drive(gen, LineChannel(conn), actor="server", events=events, on_open=server.open,
                           on_close=server.close)
        result.handshake_failures = server.failures
        if result.skipped:
            log.warning("skipped tests: %s", ", ".join(result.skipped))
        return result
    finally:
        server.stop()
        control.close()
        data.close()


# -- client -------------------------------------------------------------------


def measure_window(entry: PlanEntry, address: tuple[str, int], kem, sig, window_seconds: float, io_timeout: float,
                   pinned_certificate: bytes | None = None) -> Measurement:
    """Sequential handshakes against ``address`` until the window elapses."""
    session = ClientSession()

    def one() -> None:
        with socket.create_connection(address, timeout=io_timeout) as s:
            s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            client_handshake(s, kem, sig, entry.mode, session, pinned_certificate)

    if entry.mode is Mode.SESSION_REUSE:
        try:
            one()  # obtain a token; not counted
        except (BenchError, OSError) as exc:
            log.warning("priming handshake for %s failed: %s", entry.test_id, exc)
    done = failures = 0
    c0, t0 = time.process_time(), time.monotonic()
    while True:
        try:
            one()
            done += 1
        except (HandshakeMismatch, StreamClosed, OSError) as exc:
            failures += 1
            log.debug("handshake failed: %s", exc)
        if time.monotonic() - t0 >= window_seconds:
            break
    real = time.monotonic() - t0
    cpu = time.process_time() - c0
    return Measurement(done, real, done / cpu if cpu > 0 else 0.0, failures)


def _connect(host: str, port: int, attempts: int, timeout: float) -> socket.socket:
    delay = min(1.0, timeout / 4)
    last = None
    for n in range(attempts):
        try:
            s = socket.create_connection((host, port), timeout=timeout)
            s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            return s
        except OSError as exc:
            last = exc
            if n + 1 < attempts:
                time.sleep(delay)
    raise ConnectRefused(f"{host}:{port} after {attempts} attempts: {last}")


def run_handshake_client(
    config: BenchConfig,
    registry,
    manifest: CredentialManifest | None,
    plan: TestPlan | None = None,
    *,
    providers: Mapping[str, object] | None = None,
    events: list[Event] | None = None,
    skipped: list[PlanEntry] | None = None,
    failures: dict[str, int] | None = None,
    on_record: Callable[[HandshakeRecord], None] | None = None,
) -> list[HandshakeRecord]:
    """Drive the plan from the client side; one record per completed test.

    Tests the server gave up on are left out and appended to ``skipped``;
    per-test counts of failed handshakes go to ``failures``.
    With a manifest, certificates are pinned to the pre-generated files.
    """
    if config.role is not Role.CLIENT:
        raise ConfigError("run_handshake_client needs role=client")
    plan = plan or build_plan(registry, config.num_runs, config.tls_window_seconds)
    plan.check_capabilities(registry)
    providers = providers or mock_providers(registry, config.seed, config.mock_work_scale)
    for e in plan:
        for alg in (e.sig_algorithm_id, e.kem_algorithm_id):
            if alg not in providers:
                raise MissingProvider(f"no provider for {alg}")
    data_addr = (config.peer_host, config.data_port)
    pins: dict[str, bytes] = {}

    def pinned(sig_id: str) -> bytes | None:
        if manifest is None or sig_id not in manifest:
            return None
        if sig_id not in pins:
            pins[sig_id] = manifest.certificate(sig_id)
        return pins[sig_id]

    def on_measure(entry: PlanEntry) -> Measurement:
        return measure_window(entry, data_addr, providers[entry.kem_algorithm_id],
                              providers[entry.sig_algorithm_id], plan.window_seconds,
                              config.control_timeout_seconds, pinned(entry.sig_algorithm_id))

    sock = _connect(config.peer_host, config.peer_port, config.max_retries + 1, config.control_timeout_seconds)
    with sock:
        gen = client_session(plan, machine_id=config.machine_id, control_timeout=config.control_timeout_seconds,
                             max_retries=config.max_retries)
        outcome: ClientOutcome = drive(gen, LineChannel(sock), actor="client", events=events,
                                       on_measure=on_measure)
    records = []
    for entry, m in outcome.results:
        if m.failures:
            log.warning("%s: %d failed handshakes", entry.test_id, m.failures)
        if failures is not None:
            failures[entry.test_id] = failures.get(entry.test_id, 0) + m.failures
        rec = HandshakeRecord(entry.sig_algorithm_id, entry.kem_algorithm_id, entry.mode, entry.run_index,
                              m.connections, m.real_seconds, m.user_connections_per_sec)
        records.append(rec)
        if on_record:
            on_record(rec)
    if outcome.unconfirmed:
        log.warning("kept without a server ack (check the server log): %s",
                    ", ".join(e.test_id for e in outcome.unconfirmed))
    if outcome.skipped:
        log.warning("server skipped: %s", ", ".join(e.test_id for e in outcome.skipped))
        if skipped is not None:
            skipped.extend(outcome.skipped)
    return records


# -- speed --------------------------------------------------------------------


def ops_per_second(iterations: int, elapsed_seconds: float) -> float:
    if elapsed_seconds <= 0:
        raise ValueError("elapsed_seconds must be > 0")
    return iterations / elapsed_seconds


def bench_tls_speed(
    registry: Iterable,
    providers: Mapping[str, object],
    config: BenchConfig,
    *,
    counter: CycleCounter | None = None,
    first_run: int = 1,
    on_algorithm: Callable[[list[SpeedRecord]], None] | None = None,
) -> list[SpeedRecord]:
    """Fixed-window throughput of each operation, as ops/second."""
    selected = [d for d in registry if d.has(Capability.SPEED)]
    missing = [d.id for d in selected if d.id not in providers]
    if missing:
        raise MissingProvider(f"no provider for {missing}")
    counter = counter or default_cycle_counter()
    records: list[SpeedRecord] = []
    for run in range(first_run, first_run + config.num_runs):
        for d in selected:
            try:
                ops = _operation_callables(providers[d.id], d)
            except BenchError as exc:
                raise exc.with_context(algorithm=d.id, run=run)
            except Exception as exc:
                raise OpPanic(f"{type(exc).__name__}: {exc}", algorithm=d.id, run=run) from exc
            batch = []
            for op in d.operations:
                w = run_fixed_window(ops[op], config.tls_window_seconds, counter,
                                     algorithm=d.id, operation=op.label, run=run)
                batch.append(SpeedRecord.from_throughput(d.id, op, run, ops_per_second(w.iterations, w.elapsed_us / 1e6)))
            records.extend(batch)
            if on_algorithm is not None:
                on_algorithm(batch)
    return records


def bench_tls_speed_external(
    registry: Iterable,
    command_template: str,
    config: BenchConfig,
    *,
    first_run: int = 1,
    timeout: float | None = None,
    on_algorithm: Callable[[list[SpeedRecord]], None] | None = None,
) -> list[SpeedRecord]:
    """Speed records from an external ``openssl speed``-style tool, one call per
    (algorithm, run), with ``{alg}``, ``{window}`` and ``{run}`` substituted."""
    from ..results import parse_openssl_speed

    records: list[SpeedRecord] = []
    for run in range(first_run, first_run + config.num_runs):
        for d in (x for x in registry if x.has(Capability.SPEED)):
            try:
                cap = external_adapter(command_template, OutputKind.OPENSSL_SPEED, alg=d.id,
                                       window=config.tls_window_seconds, run=run, timeout=timeout)
                batch = [r for r in parse_openssl_speed(cap.text, run) if r.algorithm_id == d.id]
            except BenchError as exc:
                raise exc.with_context(algorithm=d.id, run=run)
            records.extend(batch)
            if on_algorithm is not None:
                on_algorithm(batch)
    return records

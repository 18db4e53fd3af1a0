"""Computational benchmarking: the fixed-window CPU loop and Massif-based memory profiling."""

from __future__ import annotations

import logging
import re
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping

from . import kernels
from .errors import BenchError, BenchIOError, EmptyProfile, MalformedMassif, MissingProvider, OpPanic
from .model import (
    AlgorithmDescriptor,
    BenchConfig,
    Capability,
    CpuOpRecord,
    Family,
    MemOpRecord,
    Operation,
)
from .provider import CycleCounter, OutputKind, default_cycle_counter, external_adapter

log = logging.getLogger(__name__)

BENCH_MESSAGE = bytes(range(50))


@dataclass(frozen=True)
class WindowResult:
    iterations: int
    elapsed_us: float
    elapsed_cycles: float

    @property
    def mean_time_us(self) -> float:
        return self.elapsed_us / self.iterations

    @property
    def mean_cycles(self) -> float:
        return self.elapsed_cycles / self.iterations


def run_fixed_window(op: Callable[[], object], window_seconds: float, counter: CycleCounter | None = None,
                     **context) -> WindowResult:
    """Run ``op`` back to back until ``window_seconds`` of wall time elapse.

    The clock is checked after every call, so the loop overshoots by at most
    one call and always completes at least one.
    """
    if not window_seconds > 0:
        raise ValueError("window_seconds must be > 0")
    counter = counter or default_cycle_counter()
    try:
        n, elapsed_ns, cycles = kernels.fixed_window(op, float(window_seconds), counter.read)
    except BenchError:
        raise
    except Exception as exc:
        raise OpPanic(f"{type(exc).__name__}: {exc}", **context) from exc
    return WindowResult(n, elapsed_ns / 1000.0, max(cycles, 0))


def _operation_callables(provider, descriptor: AlgorithmDescriptor) -> dict[Operation, Callable[[], object]]:
    """Zero-argument closures for each operation, with inputs prepared up front."""
    if descriptor.family is Family.KEM:
        pk, sk = provider.keygen()
        ct, _ = provider.encaps(pk)
        return {
            Operation.KEYGEN: provider.keygen,
            Operation.ENCAPS: lambda: provider.encaps(pk),
            Operation.DECAPS: lambda: provider.decaps(sk, ct),
        }
    pk, sk = provider.keypair()
    msg = BENCH_MESSAGE
    sig = provider.sign(sk, msg)
    if not provider.verify(pk, msg, sig):
        raise OpPanic("freshly produced signature does not verify", algorithm=descriptor.id)
    return {
        Operation.KEYPAIR: provider.keypair,
        Operation.SIGN: lambda: provider.sign(sk, msg),
        Operation.VERIFY: lambda: provider.verify(pk, msg, sig),
    }


def bench_cpu(
    registry: Iterable[AlgorithmDescriptor],
    providers: Mapping[str, object],
    config: BenchConfig,
    *,
    counter: CycleCounter | None = None,
    first_run: int = 1,
    on_algorithm: Callable[[list[CpuOpRecord]], None] | None = None,
) -> list[CpuOpRecord]:
    selected = [d for d in registry if d.has(Capability.CPU_BENCH)]
    missing = [d.id for d in selected if d.id not in providers]
    if missing:
        raise MissingProvider(f"no provider for {missing}")
    counter = counter or default_cycle_counter()
    records: list[CpuOpRecord] = []
    for run in range(first_run, first_run + config.num_runs):
        for d in selected:
            prov = providers[d.id]
            try:
                ops = _operation_callables(prov, d)
            except BenchError as exc:
                raise exc.with_context(algorithm=d.id, run=run)
            except Exception as exc:
                raise OpPanic(f"{type(exc).__name__}: {exc}", algorithm=d.id, run=run) from exc
            batch = []
            for op in d.operations:
                w = run_fixed_window(ops[op], config.cpu_window_seconds, counter,
                                     algorithm=d.id, operation=op.label, run=run)
                batch.append(CpuOpRecord(d.id, op, run, w.iterations, w.mean_time_us, w.mean_cycles))
            log.debug("cpu run %d %s done", run, d.id)
            records.extend(batch)
            if on_algorithm is not None:
                on_algorithm(batch)
    return records


# -- Massif -------------------------------------------------------------------


@dataclass(frozen=True)
class MassifSnapshot:
    index: int
    time_unit_value: int
    mem_heap_bytes: int
    mem_heap_extra_bytes: int
    mem_stacks_bytes: int
    is_detailed: bool = False

    @property
    def total(self) -> int:
        return self.mem_heap_bytes + self.mem_heap_extra_bytes + self.mem_stacks_bytes


_SEPARATOR = re.compile(r"^#-+$")
_TREE_LINE = re.compile(r"^n\d+:")
_HEADER_KEYS = ("desc", "cmd", "time_unit")
_BLOCK_FIELDS = {
    "time": "time_unit_value",
    "mem_heap_B": "mem_heap_bytes",
    "mem_heap_extra_B": "mem_heap_extra_bytes",
    "mem_stacks_B": "mem_stacks_bytes",
}


def _lines_with_offsets(text: str):
    offset = 0
    for raw in text.splitlines(keepends=True):
        yield offset, raw.rstrip("\r\n")
        offset += len(raw.encode("utf-8"))


def _massif_int(value: str, field: str, offset: int) -> int:
    v = value.strip()
    if not v.isdigit():
        raise MalformedMassif(f"field {field} is not a non-negative integer: {value!r}", offset=offset, field=field)
    return int(v)


def parse_massif(text: str) -> list[MassifSnapshot]:
    """Parse Massif's text output into snapshots (heap trees are skipped)."""
    lines = list(_lines_with_offsets(text))
    header: dict[str, str] = {}
    snapshots: list[MassifSnapshot] = []
    i = 0
    # header
    while i < len(lines):
        off, line = lines[i]
        if not line.strip():
            i += 1
            continue
        if _SEPARATOR.match(line.strip()):
            break
        key, sep, val = line.partition(":")
        if not sep or key.strip() not in _HEADER_KEYS:
            raise MalformedMassif(f"unexpected header line {line!r}", offset=off, field="header")
        header[key.strip()] = val.strip()
        i += 1
    for key in _HEADER_KEYS:
        if key not in header:
            raise MalformedMassif(f"missing header field '{key}:'", offset=lines[i][0] if i < len(lines) else len(text.encode()), field=key)
    # snapshot blocks
    while i < len(lines):
        off, line = lines[i]
        if not line.strip():
            i += 1
            continue
        if not _SEPARATOR.match(line.strip()):
            raise MalformedMassif(f"expected snapshot separator, got {line!r}", offset=off, field="snapshot")
        block_off = off
        if i + 2 >= len(lines):
            raise MalformedMassif("truncated snapshot header", offset=off, field="snapshot")
        s_off, s_line = lines[i + 1]
        key, sep, val = s_line.strip().partition("=")
        if key != "snapshot" or not sep:
            raise MalformedMassif(f"expected 'snapshot=N', got {s_line!r}", offset=s_off, field="snapshot")
        index = _massif_int(val, "snapshot", s_off)
        if not _SEPARATOR.match(lines[i + 2][1].strip()):
            raise MalformedMassif("expected closing separator after snapshot=", offset=lines[i + 2][0], field="snapshot")
        if snapshots and index <= snapshots[-1].index:
            raise MalformedMassif(
                f"snapshot index {index} does not increase (previous {snapshots[-1].index})",
                offset=s_off, field="snapshot",
            )
        i += 3
        values: dict[str, int] = {}
        tree = None
        while i < len(lines):
            off, line = lines[i]
            stripped = line.strip()
            if _SEPARATOR.match(stripped):
                break
            i += 1
            if not stripped or _TREE_LINE.match(stripped):
                continue
            key, sep, val = stripped.partition("=")
            if not sep:
                raise MalformedMassif(f"unexpected line {line!r}", offset=off, field="block")
            if key in _BLOCK_FIELDS:
                if key in values:
                    raise MalformedMassif(f"duplicate field {key}", offset=off, field=key)
                values[key] = _massif_int(val, key, off)
            elif key == "heap_tree":
                tree = val.strip()
            else:
                raise MalformedMassif(f"unknown field {key!r}", offset=off, field=key)
        for key in (*_BLOCK_FIELDS, "heap_tree"):
            if (key == "heap_tree" and tree is None) or (key != "heap_tree" and key not in values):
                raise MalformedMassif(f"snapshot {index} missing {key}", offset=block_off, field=key)
        snapshots.append(
            MassifSnapshot(
                index=index,
                time_unit_value=values["time"],
                mem_heap_bytes=values["mem_heap_B"],
                mem_heap_extra_bytes=values["mem_heap_extra_B"],
                mem_stacks_bytes=values["mem_stacks_B"],
                is_detailed=tree != "empty",
            )
        )
    return snapshots


def render_massif(snapshots: Iterable[MassifSnapshot], *, desc: str = "(none)", cmd: str = "pqbench",
                  time_unit: str = "i") -> str:
    out = [f"desc: {desc}", f"cmd: {cmd}", f"time_unit: {time_unit}"]
    for s in snapshots:
        out += [
            "#-----------",
            f"snapshot={s.index}",
            "#-----------",
            f"time={s.time_unit_value}",
            f"mem_heap_B={s.mem_heap_bytes}",
            f"mem_heap_extra_B={s.mem_heap_extra_bytes}",
            f"mem_stacks_B={s.mem_stacks_bytes}",
        ]
        if s.is_detailed:
            out.append("heap_tree=detailed")
            out.append(f"n1: {s.mem_heap_bytes} (heap allocation functions) malloc/new/new[], --alloc-fns, etc.")
            out.append(f" n0: {s.mem_heap_bytes} in 1 place, below massif's threshold (1.00%)")
        else:
            out.append("heap_tree=empty")
    return "\n".join(out) + "\n"


def peak_memory(snapshots: Iterable[MassifSnapshot]) -> tuple[int, int, int]:
    """(heap, extHeap, stack) of the snapshot with the largest three-field total.

    Ties go to the lowest snapshot index.
    """
    snaps = list(snapshots)
    if not snaps:
        raise EmptyProfile("profile has no snapshots")
    best = max(snaps, key=lambda s: (s.total, -s.index))
    return best.mem_heap_bytes, best.mem_heap_extra_bytes, best.mem_stacks_bytes


# -- memory benchmarking ------------------------------------------------------

_MOCK_MSG_BYTES = 32


def _mock_allocations(d: AlgorithmDescriptor, op: Operation) -> tuple[list[int], list[int]]:
    """(input buffers, output buffers) a call of ``op`` keeps live, in bytes."""
    pk, sk, pl = d.public_key_bytes, d.private_key_bytes, d.payload_bytes
    ss = 32
    return {
        Operation.KEYGEN: ([], [pk, sk]),
        Operation.ENCAPS: ([pk], [pl, ss]),
        Operation.DECAPS: ([sk, pl], [ss]),
        Operation.KEYPAIR: ([], [pk, sk]),
        Operation.SIGN: ([sk, _MOCK_MSG_BYTES], [pl]),
        Operation.VERIFY: ([pk, _MOCK_MSG_BYTES, pl], []),
    }[op]


def mock_massif_profile(d: AlgorithmDescriptor, op: Operation) -> str:
    """Massif text for a deterministic allocation model of a mock operation.

    Each buffer is malloc'd in order (16-byte granularity, 8 bytes of allocator
    header as extHeap), the operation's stack frame grows with the largest
    buffer, then outputs are freed.
    """
    inputs, outputs = _mock_allocations(d, op)
    frame = 1024 + 2 * max(inputs + outputs + [0])
    snaps = [MassifSnapshot(0, 0, 0, 0, 0)]
    heap = extra = 0
    t = 0
    for n, size in enumerate(inputs + outputs, start=1):
        heap += size
        extra += 8 + (-size % 16)
        t += size
        snaps.append(MassifSnapshot(n, t, heap, extra, frame if n > len(inputs) else 512, is_detailed=False))
    end = len(snaps)
    snaps.append(MassifSnapshot(end, t + 1, 0, 0, 0))
    return render_massif(snaps, desc="--massif-out-file=mock", cmd=f"pqbench-mock {d.id} {op.label}")


def fixture_path(fixture_dir: Path, alg_id: str, op: Operation, run: int) -> Path:
    return Path(fixture_dir) / f"{alg_id}_{op.label}_run{run}.massif"


def bench_memory(
    registry: Iterable[AlgorithmDescriptor],
    profiler_command: str | None,
    config: BenchConfig,
    *,
    fixture_dir: Path | None = None,
    mock: bool = False,
    first_run: int = 1,
    on_algorithm: Callable[[list[MemOpRecord]], None] | None = None,
) -> list[MemOpRecord]:
    """Peak-memory records for every MEM_BENCH algorithm, operation and run.

    Exactly one source is used: ``profiler_command`` (a template run through
    the external adapter; placeholders ``{alg}``, ``{op}``, ``{run}``,
    ``{window}``, ``{out}``, where the profiler writes its Massif file to
    ``{out}``), pre-captured files in ``fixture_dir``, or ``mock`` profiles.
    """
    sources = sum(x is not None and x is not False for x in (profiler_command, fixture_dir, mock or None))
    if sources != 1:
        raise ValueError("choose exactly one of profiler_command, fixture_dir, mock")
    records: list[MemOpRecord] = []
    selected = [d for d in registry if d.has(Capability.MEM_BENCH)]
    with tempfile.TemporaryDirectory(prefix="pqbench-massif-") as scratch:
        for run in range(first_run, first_run + config.num_runs):
            for d in selected:
                batch = []
                for op in d.operations:
                    ctx = dict(algorithm=d.id, operation=op.label, run=run)
                    try:
                        text = _profile_text(d, op, run, profiler_command, fixture_dir, mock, config, Path(scratch))
                        heap, ext, stack = peak_memory(parse_massif(text))
                    except BenchError as exc:
                        raise exc.with_context(**ctx)
                    batch.append(MemOpRecord(d.id, op, run, heap, ext, stack))
                records.extend(batch)
                if on_algorithm is not None:
                    on_algorithm(batch)
    return records


def _profile_text(d, op, run, profiler_command, fixture_dir, mock, config, scratch: Path) -> str:
    if mock:
        return mock_massif_profile(d, op)
    if fixture_dir is not None:
        path = fixture_path(fixture_dir, d.id, op, run)
        try:
            return path.read_text(encoding="utf-8")
        except OSError as exc:
            raise BenchIOError(f"missing fixture profile: {exc}", path=str(path)) from None
    out = scratch / f"massif.{d.id}.{op.label}.{run}.out"
    cap = external_adapter(
        profiler_command, OutputKind.MASSIF, alg=d.id, window=config.cpu_window_seconds,
        out=str(out), op=op.label, run=run,
    )
    if out.exists():
        return out.read_text(encoding="utf-8")
    return cap.text


def bench_cpu_external(
    registry: Iterable[AlgorithmDescriptor],
    command_template: str,
    config: BenchConfig,
    *,
    first_run: int = 1,
    timeout: float | None = None,
    on_algorithm: Callable[[list[CpuOpRecord]], None] | None = None,
) -> list[CpuOpRecord]:
    """CPU records from an external speed tool printing the liboqs-style CSV.

    The template is run once per (algorithm, run) with ``{alg}``, ``{window}``
    and ``{run}`` substituted.
    """
    from .results import parse_liboqs_speed_csv

    records: list[CpuOpRecord] = []
    for run in range(first_run, first_run + config.num_runs):
        for d in (x for x in registry if x.has(Capability.CPU_BENCH)):
            try:
                cap = external_adapter(command_template, OutputKind.LIBOQS_SPEED, alg=d.id,
                                       window=config.cpu_window_seconds, run=run, timeout=timeout)
                batch = parse_liboqs_speed_csv(cap.text, d.id, run)
            except BenchError as exc:
                raise exc.with_context(algorithm=d.id, run=run)
            records.extend(batch)
            if on_algorithm is not None:
                on_algorithm(batch)
    return records

"""CSV formats for measurement records and the run-numbered output hierarchy.

Layout under ``<output_root>/<machine_id>/``::

    computational/cpu/run_<k>.csv
    computational/memory/run_<k>.csv
    tls/handshake/run_<k>.csv
    tls/speed/run_<k>.csv
"""

from __future__ import annotations

import csv
import io
import math
import os
import re
import tempfile
from pathlib import Path
from typing import Callable, Iterable, Sequence

from .errors import BenchIOError, MalformedCsv
from .model import CpuOpRecord, HandshakeRecord, MemOpRecord, Mode, Operation, SpeedRecord

CPU_HEADER = ("algorithm", "family", "operation", "run", "iterations", "mean_time_us", "mean_cycles")
MEM_HEADER = ("algorithm", "family", "operation", "run", "heap_bytes", "ext_heap_bytes", "stack_bytes")
HANDSHAKE_HEADER = (
    "sig_algorithm",
    "kem_algorithm",
    "mode",
    "run",
    "connections",
    "real_seconds",
    "user_connections_per_sec",
)
SPEED_HEADER = ("algorithm", "family", "operation", "run", "ops_per_second", "mean_op_seconds")

CPU_DIR = Path("computational", "cpu")
MEM_DIR = Path("computational", "memory")
HANDSHAKE_DIR = Path("tls", "handshake")
SPEED_DIR = Path("tls", "speed")

_MODE_ORDER = {Mode.FIRST_USE: 0, Mode.SESSION_REUSE: 1}


def fmt_num(x) -> str:
    """Integers verbatim; floats in plain decimal without separators.

    Six fractional digits, widened for values below 0.1 so that six
    significant digits survive (per-operation seconds are often ~1e-5).
    """
    if isinstance(x, bool):
        raise TypeError("bool is not a measurement")
    if isinstance(x, int):
        return str(x)
    digits = 6
    if x != 0 and abs(x) < 0.1:
        digits = min(20, 5 - math.floor(math.log10(abs(x))))
    text = f"{x:.{digits}f}".rstrip("0").rstrip(".")
    return "0" if text in ("", "-0") else text


def record_row(rec) -> list[str]:
    if isinstance(rec, CpuOpRecord):
        return [rec.algorithm_id, rec.family.value, rec.operation.label, str(rec.run_index),
                str(rec.iterations), fmt_num(rec.mean_time_us), fmt_num(rec.mean_cycles)]
    if isinstance(rec, MemOpRecord):
        return [rec.algorithm_id, rec.family.value, rec.operation.label, str(rec.run_index),
                str(rec.heap_bytes), str(rec.ext_heap_bytes), str(rec.stack_bytes)]
    if isinstance(rec, HandshakeRecord):
        return [rec.sig_algorithm_id, rec.kem_algorithm_id, rec.mode.value, str(rec.run_index),
                str(rec.connections), fmt_num(rec.real_seconds), fmt_num(rec.user_connections_per_sec)]
    if isinstance(rec, SpeedRecord):
        return [rec.algorithm_id, rec.family.value, rec.operation.label, str(rec.run_index),
                fmt_num(rec.ops_per_second), fmt_num(rec.mean_op_seconds)]
    raise TypeError(f"not a record: {rec!r}")


def sort_key(rec):
    if isinstance(rec, HandshakeRecord):
        return (rec.sig_algorithm_id, rec.kem_algorithm_id, _MODE_ORDER[rec.mode], rec.run_index)
    return (rec.algorithm_id, rec.operation.order, rec.run_index)


HEADERS = {
    CpuOpRecord: CPU_HEADER,
    MemOpRecord: MEM_HEADER,
    HandshakeRecord: HANDSHAKE_HEADER,
    SpeedRecord: SPEED_HEADER,
}
SUBDIRS = {
    CpuOpRecord: CPU_DIR,
    MemOpRecord: MEM_DIR,
    HandshakeRecord: HANDSHAKE_DIR,
    SpeedRecord: SPEED_DIR,
}


def render_csv(header: Sequence[str], rows: Iterable[Sequence[str]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def records_to_csv(records: Sequence, record_type=None) -> str:
    rtype = record_type or (type(records[0]) if records else None)
    if rtype is None:
        raise ValueError("record_type required for an empty record list")
    if any(type(r) is not rtype for r in records):
        raise TypeError("mixed record types in one CSV")
    return render_csv(HEADERS[rtype], (record_row(r) for r in sorted(records, key=sort_key)))


def atomic_write(path: Path, text: str) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except OSError as exc:
        raise BenchIOError(str(exc), path=str(path)) from None


# -- reading ------------------------------------------------------------------


def _row_to_record(header: tuple, row: list[str]):
    if header == CPU_HEADER:
        return CpuOpRecord(row[0], Operation.from_label(row[2]), int(row[3]), int(row[4]), float(row[5]), float(row[6]))
    if header == MEM_HEADER:
        return MemOpRecord(row[0], Operation.from_label(row[2]), int(row[3]), int(row[4]), int(row[5]), int(row[6]))
    if header == HANDSHAKE_HEADER:
        return HandshakeRecord(row[0], row[1], Mode.parse(row[2]), int(row[3]), int(row[4]), float(row[5]), float(row[6]))
    if header == SPEED_HEADER:
        # mean_op_seconds is derived; the file keeps six significant digits of it
        ops, mean = float(row[4]), float(row[5])
        if ops > 0 and not math.isclose(mean, 1.0 / ops, rel_tol=1e-5):
            raise ValueError(f"mean_op_seconds {mean} disagrees with 1/ops_per_second {1.0 / ops}")
        return SpeedRecord.from_throughput(row[0], Operation.from_label(row[2]), int(row[3]), ops)
    raise AssertionError(header)


def parse_record_csv(text: str, source: str = "<text>") -> list:
    reader = csv.reader(io.StringIO(text))
    rows = list(reader)
    if not rows:
        return []
    header = tuple(c.strip() for c in rows[0])
    if header not in HEADERS.values():
        raise MalformedCsv(f"unrecognised header {list(header)}", source=source, row=1)
    out = []
    for n, row in enumerate(rows[1:], start=2):
        if not any(c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise MalformedCsv(f"expected {len(header)} fields, got {len(row)}", source=source, row=n)
        try:
            rec = _row_to_record(header, [c.strip() for c in row])
        except (ValueError, TypeError) as exc:
            raise MalformedCsv(str(exc), source=source, row=n) from None
        out.append(rec)
    return out


def csv_kind(path: Path):
    """Record type a CSV file holds, judged by its header line; None if not ours."""
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            first = fh.readline()
    except OSError:
        return None
    header = tuple(c.strip() for c in next(csv.reader([first]), []))
    for rtype, h in HEADERS.items():
        if h == header:
            return rtype
    return None


def read_record_file(path: Path) -> list:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise BenchIOError(str(exc), path=str(path)) from None
    return parse_record_csv(text, source=str(path))


def collect_records(root: Path, exclude: Iterable[Path] = ()) -> dict[type, list]:
    """Every record CSV below ``root``, grouped by record type."""
    root = Path(root)
    skip = [Path(p).resolve() for p in exclude]
    found: dict[type, list] = {t: [] for t in HEADERS}
    for path in sorted(root.rglob("*.csv")):
        rp = path.resolve()
        if any(rp == s or s in rp.parents for s in skip):
            continue
        rtype = csv_kind(path)
        if rtype is not None:
            found[rtype].extend(read_record_file(path))
    return found


# -- run-numbered files -------------------------------------------------------

_RUN_RE = re.compile(r"^run_(\d+)\.csv$")


def existing_runs(directory: Path) -> list[int]:
    directory = Path(directory)
    if not directory.is_dir():
        return []
    return sorted(int(m.group(1)) for p in directory.iterdir() if (m := _RUN_RE.match(p.name)))


def next_run_index(*directories: Path) -> int:
    """First run number not yet used in any of ``directories``."""
    used = [k for d in directories for k in existing_runs(d)]
    return max(used, default=0) + 1


def run_file(directory: Path, run_index: int) -> Path:
    return Path(directory) / f"run_{run_index}.csv"


class RunWriter:
    """Keeps per-run record lists and rewrites ``run_<k>.csv`` on each flush.

    Rewriting the whole (sorted) file after every algorithm keeps the on-disk
    file sorted and bounds data loss on a crash to the algorithm in progress.
    """

    def __init__(self, directory: Path, record_type):
        self.directory = Path(directory)
        self.record_type = record_type
        self._runs: dict[int, list] = {}

    def add(self, records: Iterable) -> None:
        touched = set()
        for r in records:
            self._runs.setdefault(r.run_index, []).append(r)
            touched.add(r.run_index)
        for k in sorted(touched):
            atomic_write(run_file(self.directory, k), records_to_csv(self._runs[k], self.record_type))

    def __call__(self, records: Iterable) -> None:
        self.add(records)

    @property
    def paths(self) -> list[Path]:
        return [run_file(self.directory, k) for k in sorted(self._runs)]


RecordSink = Callable[[list], None]

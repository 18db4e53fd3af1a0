"""Averaging across runs, rankings, filters, external-output parsers and report files."""

from __future__ import annotations

import csv
import io
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

from .errors import (
    BenchError,
    InconsistentGroup,
    IncompleteTriple,
    MalformedCsv,
    MalformedSpeedOutput,
)
from .model import (
    OPERATIONS,
    Capability,
    CpuOpRecord,
    Family,
    HandshakeRecord,
    MemOpRecord,
    Mode,
    Operation,
    SpeedRecord,
)
from .storage import atomic_write, fmt_num, render_csv

log = logging.getLogger(__name__)

# -- averaging ----------------------------------------------------------------

_NUMERIC = {
    CpuOpRecord: ("iterations", "mean_time_us", "mean_cycles"),
    MemOpRecord: ("heap_bytes", "ext_heap_bytes", "stack_bytes"),
    HandshakeRecord: ("connections", "real_seconds", "user_connections_per_sec"),
    SpeedRecord: ("ops_per_second", "mean_op_seconds"),
}
KIND_NAMES = {CpuOpRecord: "cpu", MemOpRecord: "memory", HandshakeRecord: "handshake", SpeedRecord: "speed"}
_KIND_ORDER = {name: i for i, name in enumerate(KIND_NAMES.values())}
_MODE_ORDER = {Mode.FIRST_USE: 0, Mode.SESSION_REUSE: 1}


@dataclass(frozen=True)
class AveragedRecord:
    kind: str
    identity: tuple
    means: dict[str, float]
    runs_aggregated: int

    @property
    def algorithm_id(self) -> str:
        if self.kind == "handshake":
            raise AttributeError("handshake averages are keyed by (sig, kem, mode)")
        return self.identity[0]

    @property
    def operation(self) -> Operation:
        return self.identity[1]

    @property
    def family(self) -> Family:
        return self.identity[1].family

    def __getattr__(self, name):
        means = self.__dict__.get("means", {})
        if name in means:
            return means[name]
        raise AttributeError(name)

    def sort_key(self):
        if self.kind == "handshake":
            sig, kem, mode = self.identity
            return (_KIND_ORDER[self.kind], sig, kem, _MODE_ORDER[mode])
        alg, op = self.identity
        return (_KIND_ORDER[self.kind], alg, op.order, "")


def _identity(rec) -> tuple:
    if isinstance(rec, HandshakeRecord):
        return (rec.sig_algorithm_id, rec.kem_algorithm_id, rec.mode)
    return (rec.algorithm_id, rec.operation)


def average_runs(records: Iterable) -> list[AveragedRecord]:
    """Arithmetic mean of every numeric field per identity, sorted by identity.

    ``math.fsum`` is exactly rounded, so the result does not depend on input order.
    """
    groups: dict[tuple, list] = defaultdict(list)
    families: dict[tuple, Family] = {}
    for rec in records:
        rtype = type(rec)
        if rtype not in _NUMERIC:
            raise TypeError(f"not a record: {rec!r}")
        if rtype is not HandshakeRecord:
            fam_key = (rtype, rec.algorithm_id)
            fam = families.setdefault(fam_key, rec.family)
            if fam is not rec.family:
                raise InconsistentGroup(f"{rec.algorithm_id} has both {fam.value} and {rec.family.value} operations")
        groups[(rtype, _identity(rec))].append(rec)
    out = []
    for (rtype, ident), recs in groups.items():
        means = {f: math.fsum(getattr(r, f) for r in recs) / len(recs) for f in _NUMERIC[rtype]}
        out.append(AveragedRecord(KIND_NAMES[rtype], ident, means, len(recs)))
    out.sort(key=AveragedRecord.sort_key)
    return out


# -- filters ------------------------------------------------------------------


@dataclass(frozen=True)
class FilterSet:
    prefer_standardised: bool = False
    exclude_ids: tuple[str, ...] = ()
    require_capability: Capability | None = None

    def __post_init__(self):
        object.__setattr__(self, "exclude_ids", tuple(self.exclude_ids))

    @property
    def empty(self) -> bool:
        return not self.prefer_standardised and not self.exclude_ids and self.require_capability is None

    def describe(self) -> str:
        parts = []
        if self.prefer_standardised:
            parts.append("standardised variants preferred")
        if self.exclude_ids:
            parts.append("excluded: " + ", ".join(self.exclude_ids))
        if self.require_capability is not None:
            parts.append(f"requires {self.require_capability.value}")
        return "; ".join(parts) or "none"


def _record_ids(rec) -> tuple[str, ...]:
    if isinstance(rec, HandshakeRecord):
        return (rec.sig_algorithm_id, rec.kem_algorithm_id)
    if isinstance(rec, AveragedRecord) and rec.kind == "handshake":
        return rec.identity[:2]
    return (rec.algorithm_id,)


def apply_filters(records: Sequence, registry, filters: FilterSet | None) -> list:
    """Drop records per ``filters``; handshake rows go if either algorithm goes.

    Excluded ids that match neither a record nor a registry entry are logged
    as UNKNOWN_EXCLUDE_ID warnings.
    """
    records = list(records)
    if filters is None or filters.empty:
        return records
    present = {i for r in records for i in _record_ids(r)}
    drop = set(filters.exclude_ids)
    for x in filters.exclude_ids:
        if x not in present and (registry is None or registry.get(x) is None):
            log.warning("UNKNOWN_EXCLUDE_ID %s", x)
    if filters.prefer_standardised and registry is not None:
        aliases = getattr(registry, "aliases", {}) or {}
        drop |= {alias for alias, std in aliases.items() if alias in present and std in present}
    if filters.require_capability is not None and registry is not None:
        for i in present:
            d = registry.get(i)
            if d is not None and not d.has(filters.require_capability):
                drop.add(i)
    return [r for r in records if not any(i in drop for i in _record_ids(r))]


# -- ranking ------------------------------------------------------------------


class RankingCriterion(str, Enum):
    CPU_MEAN_TIME = "CPU_MEAN_TIME"
    MEM_PEAK_FOOTPRINT = "MEM_PEAK_FOOTPRINT"
    HANDSHAKE_REAL_CONNECTIONS = "HANDSHAKE_REAL_CONNECTIONS"
    SPEED_MEAN_THROUGHPUT = "SPEED_MEAN_THROUGHPUT"

    @property
    def maximize(self) -> bool:
        return self in (RankingCriterion.HANDSHAKE_REAL_CONNECTIONS, RankingCriterion.SPEED_MEAN_THROUGHPUT)

    @property
    def kind(self) -> str:
        return {
            RankingCriterion.CPU_MEAN_TIME: "cpu",
            RankingCriterion.MEM_PEAK_FOOTPRINT: "memory",
            RankingCriterion.HANDSHAKE_REAL_CONNECTIONS: "handshake",
            RankingCriterion.SPEED_MEAN_THROUGHPUT: "speed",
        }[self]

    @property
    def slug(self) -> str:
        return self.value.lower()

    def value_of(self, avg: AveragedRecord) -> float:
        m = avg.means
        if self is RankingCriterion.CPU_MEAN_TIME:
            return m["mean_time_us"]
        if self is RankingCriterion.MEM_PEAK_FOOTPRINT:
            return m["heap_bytes"] + m["ext_heap_bytes"] + m["stack_bytes"]
        if self is RankingCriterion.SPEED_MEAN_THROUGHPUT:
            return m["ops_per_second"]
        return m["connections"]


def _as_averaged(records: Sequence) -> list[AveragedRecord]:
    if records and not isinstance(records[0], AveragedRecord):
        return average_runs(records)
    return list(records)


def score_algorithms(averaged: Sequence, criterion: RankingCriterion, *,
                     mode: Mode | None = Mode.FIRST_USE) -> list[tuple[object, float]]:
    """(id, score) pairs in rank order. Handshake ids are (sig, kem) tuples scored
    in ``mode``; ``mode=None`` averages the two modes."""
    rows = [a for a in _as_averaged(averaged) if a.kind == criterion.kind]
    scores: dict[object, float] = {}
    if criterion is RankingCriterion.HANDSHAKE_REAL_CONNECTIONS:
        by_pair: dict[tuple, list[float]] = defaultdict(list)
        for a in rows:
            if mode is None or a.identity[2] is mode:
                by_pair[a.identity[:2]].append(criterion.value_of(a))
        scores = {pair: math.fsum(v) / len(v) for pair, v in by_pair.items()}
    else:
        by_alg: dict[str, dict[Operation, float]] = defaultdict(dict)
        for a in rows:
            by_alg[a.algorithm_id][a.operation] = criterion.value_of(a)
        for alg, per_op in by_alg.items():
            fam = next(iter(per_op)).family
            missing = [op.label for op in OPERATIONS[fam] if op not in per_op]
            if missing:
                raise IncompleteTriple(f"{alg} lacks {', '.join(missing)}", criterion=criterion.value)
            scores[alg] = math.fsum(per_op.values()) / len(per_op)
    sign = -1.0 if criterion.maximize else 1.0
    return sorted(scores.items(), key=lambda kv: (sign * kv[1], kv[0]))


def rank_top_n(averaged: Sequence, criterion: RankingCriterion, n: int, filters: FilterSet | None = None,
               registry=None, *, mode: Mode | None = Mode.FIRST_USE) -> list:
    if n < 1:
        raise ValueError("n must be >= 1")
    rows = apply_filters(_as_averaged(averaged), registry, filters)
    return [k for k, _ in score_algorithms(rows, criterion, mode=mode)[:n]]


# -- external output parsers --------------------------------------------------

LIBOQS_HEADER = ("Operation", "Iterations", "Total time (s)", "Time (us): mean", "CPU cycles: mean")


def _is_op_label(text: str) -> bool:
    try:
        Operation.from_label(text)
        return True
    except (ValueError, KeyError):
        return False


def parse_liboqs_speed_csv(text: str, algorithm_id: str | None = None, run_index: int = 1) -> list[CpuOpRecord]:
    """Rows of ``Operation,Iterations,Total time (s),Time (us): mean,CPU cycles: mean``.

    A one-field row names the algorithm for the rows that follow it (the way
    ``speed_kem`` prints one table per scheme); otherwise ``algorithm_id`` is
    used. Columns past the fifth are ignored. Row numbers in errors are 1-based.
    """
    rows = list(csv.reader(io.StringIO(text)))
    while rows and not any(c.strip() for c in rows[-1]):
        rows.pop()
    if not rows:
        return []
    first = tuple(c.strip() for c in rows[0])
    if first[: len(LIBOQS_HEADER)] != LIBOQS_HEADER:
        raise MalformedCsv(f"expected header {','.join(LIBOQS_HEADER)}", row=1)
    out: list[CpuOpRecord] = []
    current = algorithm_id
    name_row = None  # row number of a name with no data yet
    families: dict[str, Family] = {}
    for n, raw in enumerate(rows[1:], start=2):
        row = [c.strip() for c in raw]
        if not any(row):
            continue
        if tuple(row[: len(LIBOQS_HEADER)]) == LIBOQS_HEADER:
            continue
        if len(row) == 1 and not _is_op_label(row[0]):
            if name_row is not None:
                raise MalformedCsv(f"algorithm {current!r} has no rows", row=name_row)
            current, name_row = row[0], n
            continue
        if len(row) < len(LIBOQS_HEADER):
            raise MalformedCsv(f"expected {len(LIBOQS_HEADER)} fields, got {len(row)}", row=n)
        if current is None:
            raise MalformedCsv("no algorithm named before data row", row=n)
        try:
            op = Operation.from_label(row[0])
            iterations = int(row[1])
            float(row[2])
            rec = CpuOpRecord(current, op, run_index, iterations, float(row[3]), float(row[4]))
        except (ValueError, KeyError, BenchError) as exc:
            raise MalformedCsv(str(exc), row=n) from None
        if families.setdefault(current, rec.family) is not rec.family:
            raise MalformedCsv(f"{current} mixes KEM and signature operations", row=n)
        out.append(rec)
        name_row = None
    if name_row is not None:
        raise MalformedCsv(f"trailing row {rows[name_row - 1]!r}", row=name_row)
    return out


_SPEED_HEADERS = {
    ("keygen/s", "encaps/s", "decaps/s"): Family.KEM,
    ("keygens/s", "encaps/s", "decaps/s"): Family.KEM,
    ("keygen/s", "sign/s", "verify/s"): Family.SIGNATURE,
    ("keygens/s", "sign/s", "verify/s"): Family.SIGNATURE,
}


def parse_openssl_speed(text: str, run_index: int = 1) -> list[SpeedRecord]:
    """Whitespace rows ``<alg> <op1/s> <op2/s> <op3/s>`` under a ``keygen/s``-style header.

    Text before the first header (progress chatter) is skipped; after it every
    non-blank line must be a row or another header.
    """
    out: list[SpeedRecord] = []
    family: Family | None = None
    for n, line in enumerate(text.splitlines(), start=1):
        tokens = line.split()
        if not tokens:
            continue
        if tokens[0] in ("keygen/s", "keygens/s"):
            family = _SPEED_HEADERS.get(tuple(tokens))
            if family is None:
                raise MalformedSpeedOutput(f"unrecognised header {line.strip()!r}", line=n)
            continue
        if family is None:
            continue
        if len(tokens) != 4:
            raise MalformedSpeedOutput(f"expected 4 fields, got {len(tokens)}", line=n)
        alg, values = tokens[0], tokens[1:]
        try:
            rates = [float(v) for v in values]
        except ValueError:
            raise MalformedSpeedOutput(f"non-numeric throughput in {line.strip()!r}", line=n) from None
        if any(not math.isfinite(r) or r < 0 for r in rates):
            raise MalformedSpeedOutput(f"throughput must be finite and >= 0 in {line.strip()!r}", line=n)
        for op, rate in zip(OPERATIONS[family], rates):
            out.append(SpeedRecord.from_throughput(alg, op, run_index, rate))
    return out


# -- report -------------------------------------------------------------------

AVERAGED_HEADERS = {
    "cpu": ("algorithm", "family", "operation", "iterations", "mean_time_us", "mean_cycles", "runs"),
    "memory": ("algorithm", "family", "operation", "heap_bytes", "ext_heap_bytes", "stack_bytes", "runs"),
    "handshake": ("sig_algorithm", "kem_algorithm", "mode", "connections", "real_seconds",
                  "user_connections_per_sec", "runs"),
    "speed": ("algorithm", "family", "operation", "ops_per_second", "mean_op_seconds", "runs"),
}


def _avg_row(a: AveragedRecord) -> list[str]:
    nums = [fmt_num(float(a.means[f])) for f in AVERAGED_HEADERS[a.kind][3:-1]]
    if a.kind == "handshake":
        sig, kem, mode = a.identity
        head = [sig, kem, mode.value]
    else:
        alg, op = a.identity
        head = [alg, op.family.value, op.label]
    return head + nums + [str(a.runs_aggregated)]


@dataclass
class Report:
    averaged: list[AveragedRecord]
    rankings: dict[RankingCriterion, list[tuple[object, float]]] = field(default_factory=dict)
    filters: FilterSet = field(default_factory=FilterSet)
    top_n: int = 10
    handshake_mode: Mode = Mode.FIRST_USE


def build_report(records: Iterable, registry=None, filters: FilterSet | None = None, top_n: int = 10,
                 handshake_mode: Mode = Mode.FIRST_USE) -> Report:
    filters = filters or FilterSet()
    averaged = average_runs(records)
    ranked_input = apply_filters(averaged, registry, filters)
    rankings = {
        c: score_algorithms(ranked_input, c, mode=handshake_mode)[:top_n] for c in RankingCriterion
    }
    return Report(averaged, rankings, filters, top_n, handshake_mode)


_MODE_TITLES = {Mode.FIRST_USE: "first use", Mode.SESSION_REUSE: "session reuse"}


def _summary(report: Report) -> str:
    titles = {
        RankingCriterion.CPU_MEAN_TIME: "CPU: lowest mean operation time",
        RankingCriterion.MEM_PEAK_FOOTPRINT: "Memory: lowest mean peak footprint",
        RankingCriterion.HANDSHAKE_REAL_CONNECTIONS:
            f"TLS handshake: most connections in real time ({_MODE_TITLES[report.handshake_mode]})",
        RankingCriterion.SPEED_MEAN_THROUGHPUT: "TLS speed: highest mean throughput",
    }
    lines = ["# Benchmark summary", "", f"Top {report.top_n} per criterion. Filters: {report.filters.describe()}.", ""]
    for crit, title in titles.items():
        lines += [f"## {title}", ""]
        ranked = report.rankings.get(crit, [])
        if not ranked:
            lines += ["no data", ""]
            continue
        for i, (key, _) in enumerate(ranked, start=1):
            name = " + ".join(key) if isinstance(key, tuple) else key
            lines.append(f"{i}. {name}")
        lines.append("")
    return "\n".join(lines)


def emit_report(report: Report, out_dir) -> list[Path]:
    """Write ``averaged/*.csv``, ``rankings/*.csv`` and ``summary.md``; returns the paths.

    The summary names ranked algorithms only, so it is stable across reruns on
    the same inputs even where the underlying scores are timings.
    """
    out_dir = Path(out_dir)
    written = []
    by_kind: dict[str, list[AveragedRecord]] = defaultdict(list)
    for a in report.averaged:
        by_kind[a.kind].append(a)
    for kind, header in AVERAGED_HEADERS.items():
        path = out_dir / "averaged" / f"{kind}.csv"
        atomic_write(path, render_csv(header, (_avg_row(a) for a in by_kind.get(kind, []))))
        written.append(path)
    for crit in RankingCriterion:
        ranked = report.rankings.get(crit, [])
        if crit is RankingCriterion.HANDSHAKE_REAL_CONNECTIONS:
            header = ("rank", "sig_algorithm", "kem_algorithm", "score")
            rows = [[str(i), k[0], k[1], fmt_num(float(s))] for i, (k, s) in enumerate(ranked, start=1)]
        else:
            header = ("rank", "algorithm", "score")
            rows = [[str(i), k, fmt_num(float(s))] for i, (k, s) in enumerate(ranked, start=1)]
        path = out_dir / "rankings" / f"{crit.slug}.csv"
        atomic_write(path, render_csv(header, rows))
        written.append(path)
    path = out_dir / "summary.md"
    atomic_write(path, _summary(report))
    written.append(path)
    return written

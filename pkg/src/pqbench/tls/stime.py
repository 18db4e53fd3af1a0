"""Parser for the summary lines printed by ``openssl s_time``."""

from __future__ import annotations

import re
from dataclasses import dataclass

from ..errors import MalformedSTime

_NUM = r"(\d+(?:\.\d+)?)"
_USER = re.compile(rf"^(\d+) connections in {_NUM}s; {_NUM} connections/user sec, bytes read (\d+)$")
_REAL = re.compile(rf"^(\d+) connections in {_NUM} real seconds, (\d+) bytes read per connection$")
REUSE_MARKER = "Now timing with session id reuse."


@dataclass(frozen=True)
class STimeSummary:
    connections: int
    user_connections_per_sec: float
    real_seconds: float

    def __iter__(self):
        return iter((self.connections, self.user_connections_per_sec, self.real_seconds))


def parse_s_time(text: str) -> STimeSummary:
    """Extract (connections, connections/user sec, real seconds) from one timing block.

    Other s_time chatter (``Collecting connection statistics...``, progress
    lines) may precede the summary; anything after it other than whitespace is
    rejected.
    """
    lines = [ln.strip() for ln in text.splitlines()]
    while lines and not lines[-1]:
        lines.pop()
    user_at = next((i for i, ln in enumerate(lines) if _USER.match(ln)), None)
    if user_at is None:
        raise MalformedSTime("no 'connections/user sec' summary line")
    if user_at + 1 >= len(lines):
        raise MalformedSTime("missing 'real seconds' summary line", line=user_at + 2)
    um, rm = _USER.match(lines[user_at]), _REAL.match(lines[user_at + 1])
    if rm is None:
        raise MalformedSTime(f"bad 'real seconds' line {lines[user_at + 1]!r}", line=user_at + 2)
    if user_at + 2 != len(lines):
        raise MalformedSTime(f"trailing text after summary: {lines[user_at + 2]!r}", line=user_at + 3)
    conns = int(um.group(1))
    if int(rm.group(1)) != conns:
        raise MalformedSTime(f"connection counts disagree: {conns} vs {rm.group(1)}")
    return STimeSummary(conns, float(um.group(3)), float(rm.group(2)))


def parse_s_time_log(text: str) -> dict[str, STimeSummary]:
    """Split a full s_time log into its first-use and session-reuse blocks."""
    first, marker, reuse = text.partition(REUSE_MARKER)
    out = {"first": parse_s_time(first)}
    if marker:
        out["reuse"] = parse_s_time(reuse)
    return out

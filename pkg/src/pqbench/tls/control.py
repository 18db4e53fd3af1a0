"""Line-oriented control messages exchanged between the client and server roles.

One message per UTF-8 line, fields separated by single spaces::

    HELLO <proto_version> <machine_id>
    READY <HANDSHAKE|SPEED> <test_id>
    GO <test_id>
    RESULT <test_id> [payload...]
    RETRY <test_id> <attempt>
    DONE <HANDSHAKE|SPEED>
    ERR <code> [detail...]

``test_id`` is ``<sig_id>|<kem_id>|<first|reuse>``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum
from typing import Union

from ..errors import MalformedControl
from ..model import Mode

PROTO_VERSION = 1
MAX_LINE_BYTES = 4096

_TOKEN = re.compile(r"^[^\s]+$")
_TEST_ID = re.compile(r"^([^\s|]+)\|([^\s|]+)\|(first|reuse)$")


class Suite(str, Enum):
    HANDSHAKE = "HANDSHAKE"
    SPEED = "SPEED"


def make_test_id(sig_id: str, kem_id: str, mode: Mode) -> str:
    tid = f"{sig_id}|{kem_id}|{mode.value}"
    _check_test_id(tid)
    return tid


def split_test_id(test_id: str) -> tuple[str, str, Mode]:
    m = _TEST_ID.match(test_id)
    if not m:
        raise MalformedControl(f"bad test id {test_id!r}")
    return m.group(1), m.group(2), Mode(m.group(3))


def _check_test_id(tid) -> None:
    if not isinstance(tid, str) or not _TEST_ID.match(tid):
        raise MalformedControl(f"bad test id {tid!r}")


def _check_token(name, value) -> None:
    if not isinstance(value, str) or not _TOKEN.match(value):
        raise MalformedControl(f"{name} must be a non-empty token without whitespace, got {value!r}")


def _check_text(name, value) -> None:
    if not isinstance(value, str) or "\n" in value or "\r" in value:
        raise MalformedControl(f"{name} must be single-line text")


@dataclass(frozen=True)
class Hello:
    proto_version: int
    machine_id: str

    def __post_init__(self):
        if not isinstance(self.proto_version, int) or self.proto_version < 0:
            raise MalformedControl(f"bad protocol version {self.proto_version!r}")
        _check_token("machine_id", self.machine_id)


@dataclass(frozen=True)
class Ready:
    suite: Suite
    test_id: str

    def __post_init__(self):
        object.__setattr__(self, "suite", Suite(self.suite))
        _check_test_id(self.test_id)


@dataclass(frozen=True)
class Go:
    test_id: str

    def __post_init__(self):
        _check_test_id(self.test_id)


@dataclass(frozen=True)
class Result:
    test_id: str
    payload: str = ""

    def __post_init__(self):
        _check_test_id(self.test_id)
        _check_text("payload", self.payload)


@dataclass(frozen=True)
class Retry:
    test_id: str
    attempt: int

    def __post_init__(self):
        _check_test_id(self.test_id)
        if not isinstance(self.attempt, int) or isinstance(self.attempt, bool) or self.attempt < 1:
            raise MalformedControl(f"retry attempt must be an integer >= 1, got {self.attempt!r}")


@dataclass(frozen=True)
class Done:
    suite: Suite

    def __post_init__(self):
        object.__setattr__(self, "suite", Suite(self.suite))


@dataclass(frozen=True)
class Err:
    code: str
    detail: str = ""

    def __post_init__(self):
        _check_token("code", self.code)
        _check_text("detail", self.detail)


ControlMessage = Union[Hello, Ready, Go, Result, Retry, Done, Err]


def encode_control(msg: ControlMessage) -> str:
    """Wire form of ``msg`` without the trailing newline."""
    if isinstance(msg, Hello):
        return f"HELLO {msg.proto_version} {msg.machine_id}"
    if isinstance(msg, Ready):
        return f"READY {msg.suite.value} {msg.test_id}"
    if isinstance(msg, Go):
        return f"GO {msg.test_id}"
    if isinstance(msg, Result):
        return f"RESULT {msg.test_id} {msg.payload}" if msg.payload else f"RESULT {msg.test_id}"
    if isinstance(msg, Retry):
        return f"RETRY {msg.test_id} {msg.attempt}"
    if isinstance(msg, Done):
        return f"DONE {msg.suite.value}"
    if isinstance(msg, Err):
        return f"ERR {msg.code} {msg.detail}" if msg.detail else f"ERR {msg.code}"
    raise TypeError(f"not a control message: {msg!r}")


def _int_field(value: str, name: str) -> int:
    if not value.isdigit():
        raise MalformedControl(f"{name} must be numeric, got {value!r}")
    return int(value)


def _suite(value: str) -> Suite:
    try:
        return Suite(value)
    except ValueError:
        raise MalformedControl(f"unknown suite {value!r}") from None


def decode_control(line: str | bytes) -> ControlMessage:
    if isinstance(line, bytes):
        if len(line) > MAX_LINE_BYTES:
            raise MalformedControl(f"line longer than {MAX_LINE_BYTES} bytes")
        try:
            line = line.decode("utf-8")
        except UnicodeDecodeError:
            raise MalformedControl("line is not valid UTF-8") from None
    elif len(line.encode("utf-8")) > MAX_LINE_BYTES:
        raise MalformedControl(f"line longer than {MAX_LINE_BYTES} bytes")
    line = line.rstrip("\r\n")
    verb, _, rest = line.partition(" ")

    def fields(n: int) -> list[str]:
        parts = rest.split(" ") if rest else []
        if len(parts) != n or not all(parts):
            raise MalformedControl(f"{verb} takes {n} field(s), got {line!r}")
        return parts

    if verb == "HELLO":
        version, machine = fields(2)
        return Hello(_int_field(version, "proto_version"), machine)
    if verb == "READY":
        suite, tid = fields(2)
        return Ready(_suite(suite), tid)
    if verb == "GO":
        (tid,) = fields(1)
        return Go(tid)
    if verb == "RESULT":
        tid, _, payload = rest.partition(" ")
        if not tid:
            raise MalformedControl(f"RESULT needs a test id: {line!r}")
        return Result(tid, payload)
    if verb == "RETRY":
        tid, attempt = fields(2)
        return Retry(tid, _int_field(attempt, "attempt"))
    if verb == "DONE":
        (suite,) = fields(1)
        return Done(_suite(suite))
    if verb == "ERR":
        code, _, detail = rest.partition(" ")
        if not code:
            raise MalformedControl(f"ERR needs a code: {line!r}")
        return Err(code, detail)
    raise MalformedControl(f"unknown verb {verb!r}")

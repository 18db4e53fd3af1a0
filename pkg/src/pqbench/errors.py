"""Exception hierarchy.

Every anticipated failure carries a stable ``code`` string (printed by the CLI
in its ``status=error code=...`` line) and an ``exit_code``: 1 for user errors,
2 for runtime failures.
"""

from __future__ import annotations


class BenchError(Exception):
    code = "BENCH_ERROR"
    exit_code = 2

    def __init__(self, detail: str = "", **context):
        self.detail = detail
        self.context = context
        super().__init__(self._render())

    def with_context(self, **context) -> "BenchError":
        """Attach (algorithm, operation, run)-style context and return self for re-raising."""
        self.context = {**context, **self.context}
        self.args = (self._render(),)
        return self

    def __str__(self) -> str:
        return self._render()

    def _render(self) -> str:
        ctx = " ".join(f"{k}={v}" for k, v in self.context.items() if v is not None)
        parts = [self.code]
        if ctx:
            parts.append(f"[{ctx}]")
        if self.detail:
            parts.append(self.detail)
        return " ".join(parts)


class ConfigError(BenchError):
    code = "BAD_CONFIG"
    exit_code = 1


class MalformedRegistry(BenchError):
    code = "MALFORMED_REGISTRY"
    exit_code = 1


class InvalidRecord(BenchError, ValueError):
    code = "INVALID_RECORD"


class WrongFamily(BenchError):
    code = "WRONG_FAMILY"


class SpawnFailed(BenchError):
    code = "SPAWN_FAILED"

    def __init__(self, detail: str = "", stderr: str = "", **context):
        self.stderr = stderr
        super().__init__(detail, **context)


class NonzeroExit(BenchError):
    code = "NONZERO_EXIT"

    def __init__(self, status: int, stderr: str = "", stdout: str = "", **context):
        self.status = status
        self.stderr = stderr
        self.stdout = stdout
        super().__init__(f"exit status {status}: {stderr.strip()[:200]}", **context)


class OpPanic(BenchError):
    code = "OP_PANIC"


class MissingProvider(BenchError):
    code = "MISSING_PROVIDER"


class EmptyProfile(BenchError):
    code = "EMPTY_PROFILE"


class BenchIOError(BenchError):
    code = "IO_ERROR"


class ParseError(BenchError, ValueError):
    code = "PARSE_ERROR"


class MalformedMassif(ParseError):
    code = "MALFORMED_MASSIF"


class MalformedCsv(ParseError):
    code = "MALFORMED_CSV"


class MalformedSpeedOutput(ParseError):
    code = "MALFORMED_SPEED_OUTPUT"


class MalformedSTime(ParseError):
    code = "MALFORMED_S_TIME"


class MalformedControl(ParseError):
    code = "MALFORMED_CONTROL"


class VersionMismatch(BenchError):
    code = "VERSION_MISMATCH"


class ControlTimeout(BenchError):
    code = "CONTROL_TIMEOUT"


class TooManyRetries(BenchError):
    code = "TOO_MANY_RETRIES"


class ConnectRefused(BenchError):
    code = "CONNECT_REFUSED"


class PlanMismatch(BenchError):
    code = "PLAN_MISMATCH"


class PeerError(BenchError):
    code = "PEER_ERROR"


class HandshakeMismatch(BenchError):
    code = "HANDSHAKE_MISMATCH"


class StreamClosed(BenchError):
    code = "STREAM_CLOSED"


class InconsistentGroup(BenchError):
    code = "INCONSISTENT_GROUP"


class IncompleteTriple(BenchError):
    code = "INCOMPLETE_TRIPLE"

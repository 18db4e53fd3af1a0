"""Cryptographic backends: provider contracts, deterministic mocks, cycle counters,
and the external-process adapter used for real tool runs.
"""

from __future__ import annotations

import hashlib
import hmac
import random
import shlex
import subprocess
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Protocol, runtime_checkable

from . import kernels
from .errors import NonzeroExit, SpawnFailed, WrongFamily
from .model import AlgorithmDescriptor, Family, Operation

SHARED_SECRET_BYTES = 32


@runtime_checkable
class KemProvider(Protocol):
    descriptor: AlgorithmDescriptor

    def keygen(self) -> tuple[bytes, bytes]: ...

    def encaps(self, pk: bytes) -> tuple[bytes, bytes]: ...

    def decaps(self, sk: bytes, ct: bytes) -> bytes: ...


@runtime_checkable
class SigProvider(Protocol):
    descriptor: AlgorithmDescriptor

    def keypair(self) -> tuple[bytes, bytes]: ...

    def sign(self, sk: bytes, msg: bytes) -> bytes: ...

    def verify(self, pk: bytes, msg: bytes, sig: bytes) -> bool: ...


class CycleCounter(Protocol):
    def read(self) -> int: ...


class HardwareCycleCounter:
    """Timestamp counter read through the compiled kernel (rdtsc / cntvct_el0)."""

    name = "hw"

    def __init__(self):
        if not kernels.HAS_HW_COUNTER:
            raise RuntimeError("no hardware counter in this build")
        self._read = kernels.read_cycles

    def read(self) -> int:
        return self._read()


class MonotonicCycleCounter:
    """Nanosecond monotonic clock scaled by a nominal core frequency."""

    name = "monotonic"

    def __init__(self, nominal_ghz: float = 1.0):
        if nominal_ghz <= 0:
            raise ValueError("nominal_ghz must be > 0")
        self.nominal_ghz = nominal_ghz

    def read(self) -> int:
        return int(time.monotonic_ns() * self.nominal_ghz)


def default_cycle_counter(nominal_ghz: float = 1.0) -> CycleCounter:
    if kernels.HAS_HW_COUNTER:
        return HardwareCycleCounter()
    return MonotonicCycleCounter(nominal_ghz)


# -- mock providers -----------------------------------------------------------


@dataclass(frozen=True)
class MockCostProfile:
    """Busy work per operation, in iterations of the mixing kernel."""

    work_units: dict[Operation, int] = field(default_factory=dict)
    nominal_cycles_per_unit: dict[Operation, float] = field(default_factory=dict)

    def __post_init__(self):
        for op, units in self.work_units.items():
            if not isinstance(units, int) or units < 0:
                raise ValueError(f"work_units[{op}] must be a non-negative integer")
        for op, c in self.nominal_cycles_per_unit.items():
            if c < 0:
                raise ValueError(f"nominal_cycles_per_unit[{op}] must be >= 0")

    def units(self, op: Operation) -> int:
        return self.work_units.get(op, 0)

    def nominal_cycles(self, op: Operation) -> float:
        return self.units(op) * self.nominal_cycles_per_unit.get(op, 1.0)

    @classmethod
    def free(cls) -> "MockCostProfile":
        return cls()

    @classmethod
    def uniform(cls, units: int, ops=tuple(Operation)) -> "MockCostProfile":
        return cls({op: units for op in ops})

    @classmethod
    def for_descriptor(cls, d: AlgorithmDescriptor, scale: float = 1.0, units_per_byte: int = 8) -> "MockCostProfile":
        """Cost proportional to the bytes each operation touches."""
        pk, sk, pl = d.public_key_bytes, d.private_key_bytes, d.payload_bytes
        touched = {
            Operation.KEYGEN: pk + sk,
            Operation.ENCAPS: pk + pl,
            Operation.DECAPS: sk + pl,
            Operation.KEYPAIR: pk + sk,
            Operation.SIGN: sk + pl,
            Operation.VERIFY: pk + pl,
        }
        return cls({op: int(n * units_per_byte * scale) for op, n in touched.items() if op.family is d.family})


def _expand(label: bytes, data: bytes, n: int) -> bytes:
    return hashlib.shake_256(label + data).digest(n)


class _MockBase:
    def __init__(self, descriptor: AlgorithmDescriptor, seed: int, profile: MockCostProfile, family: Family):
        if descriptor.family is not family:
            raise WrongFamily(f"{descriptor.id} is a {descriptor.family.value}, not a {family.value}")
        self.descriptor = descriptor
        self.seed = seed & 0xFFFFFFFFFFFFFFFF
        self.profile = profile
        self._rng = random.Random(self.seed)
        self.sink = 0

    def _work(self, op: Operation, data: bytes) -> None:
        units = self.profile.units(op)
        if units:
            state = int.from_bytes(data[:8].ljust(8, b"\0"), "little") ^ self.seed
            self.sink ^= kernels.mix(state, units)

    @staticmethod
    def _check_len(name: str, value: bytes, expected: int) -> None:
        if len(value) != expected:
            raise ValueError(f"{name} must be {expected} bytes, got {len(value)}")


class MockKem(_MockBase):
    """KEM stand-in with real encaps/decaps agreement and implicit rejection."""

    def __init__(self, descriptor: AlgorithmDescriptor, seed: int, profile: MockCostProfile):
        super().__init__(descriptor, seed, profile, Family.KEM)
        self._coin_len = min(32, descriptor.payload_bytes)

    def _public_from_secret(self, sk: bytes) -> bytes:
        return _expand(b"pqbench-kem-pk", sk, self.descriptor.public_key_bytes)

    def _filler(self, pk: bytes, coins: bytes) -> bytes:
        return _expand(b"pqbench-kem-ct", pk + coins, self.descriptor.payload_bytes - self._coin_len)

    def keygen(self) -> tuple[bytes, bytes]:
        sk = self._rng.randbytes(self.descriptor.private_key_bytes)
        self._work(Operation.KEYGEN, sk)
        return self._public_from_secret(sk), sk

    def encaps(self, pk: bytes) -> tuple[bytes, bytes]:
        self._check_len("public key", pk, self.descriptor.public_key_bytes)
        coins = self._rng.randbytes(self._coin_len)
        self._work(Operation.ENCAPS, coins)
        ct = coins + self._filler(pk, coins)
        return ct, hashlib.sha3_256(b"ss" + pk + ct).digest()

    def decaps(self, sk: bytes, ct: bytes) -> bytes:
        self._check_len("secret key", sk, self.descriptor.private_key_bytes)
        self._check_len("ciphertext", ct, self.descriptor.payload_bytes)
        self._work(Operation.DECAPS, ct)
        pk = self._public_from_secret(sk)
        coins = ct[: self._coin_len]
        if hmac.compare_digest(ct[self._coin_len :], self._filler(pk, coins)):
            return hashlib.sha3_256(b"ss" + pk + ct).digest()
        return hashlib.sha3_256(b"reject" + sk + ct).digest()


class MockSig(_MockBase):
    """Signature stand-in: signatures are a keyed expansion of (public key, message)."""

    def __init__(self, descriptor: AlgorithmDescriptor, seed: int, profile: MockCostProfile):
        super().__init__(descriptor, seed, profile, Family.SIGNATURE)

    def public_from_secret(self, sk: bytes) -> bytes:
        return _expand(b"pqbench-sig-pk", sk, self.descriptor.public_key_bytes)

    def _expected(self, pk: bytes, msg: bytes) -> bytes:
        return _expand(b"pqbench-sig", pk + len(msg).to_bytes(8, "big") + msg, self.descriptor.payload_bytes)

    def keypair(self) -> tuple[bytes, bytes]:
        sk = self._rng.randbytes(self.descriptor.private_key_bytes)
        self._work(Operation.KEYPAIR, sk)
        return self.public_from_secret(sk), sk

    def sign(self, sk: bytes, msg: bytes) -> bytes:
        self._check_len("secret key", sk, self.descriptor.private_key_bytes)
        self._work(Operation.SIGN, msg)
        return self._expected(self.public_from_secret(sk), msg)

    def verify(self, pk: bytes, msg: bytes, sig: bytes) -> bool:
        self._work(Operation.VERIFY, msg)
        if len(pk) != self.descriptor.public_key_bytes or len(sig) != self.descriptor.payload_bytes:
            return False
        return hmac.compare_digest(sig, self._expected(pk, msg))


def mock_kem(descriptor: AlgorithmDescriptor, seed: int, profile: MockCostProfile | None = None) -> MockKem:
    return MockKem(descriptor, seed, profile if profile is not None else MockCostProfile())


def mock_sig(descriptor: AlgorithmDescriptor, seed: int, profile: MockCostProfile | None = None) -> MockSig:
    return MockSig(descriptor, seed, profile if profile is not None else MockCostProfile())


def mock_provider(descriptor: AlgorithmDescriptor, seed: int, profile: MockCostProfile | None = None):
    factory = mock_kem if descriptor.family is Family.KEM else mock_sig
    return factory(descriptor, seed, profile)


def mock_providers(registry, seed: int = 42, scale: float = 1.0) -> dict:
    """One mock per descriptor, each with a byte-proportional cost profile and
    a seed derived from the base seed and the algorithm's position."""
    return {
        d.id: mock_provider(d, seed * 1_000_003 + i, MockCostProfile.for_descriptor(d, scale))
        for i, d in enumerate(registry)
    }


# -- external tools -----------------------------------------------------------


class OutputKind(str, Enum):
    LIBOQS_SPEED = "LIBOQS_SPEED"
    OPENSSL_SPEED = "OPENSSL_SPEED"
    S_TIME = "S_TIME"
    MASSIF = "MASSIF"


@dataclass(frozen=True)
class Capture:
    kind: OutputKind
    argv: tuple[str, ...]
    text: str
    stderr: str
    status: int


def render_command(template: str, **values) -> list[str]:
    """Split ``template`` into argv and substitute ``{name}`` placeholders verbatim.

    Substitution happens after splitting, so values containing spaces or shell
    metacharacters stay a single, uninterpreted argument.
    """
    argv = shlex.split(template)
    out = []
    for arg in argv:
        for key, val in values.items():
            arg = arg.replace("{" + key + "}", str(val))
        out.append(arg)
    return out


def external_adapter(
    command_template: str,
    output_kind: OutputKind | str,
    *,
    alg: str = "",
    window: float | str = "",
    out: str = "",
    timeout: float | None = None,
    **extra,
) -> Capture:
    kind = OutputKind(output_kind)
    argv = render_command(command_template, alg=alg, window=window, out=out, **extra)
    if not argv:
        raise SpawnFailed("empty command template")
    try:
        proc = subprocess.run(argv, capture_output=True, text=True, timeout=timeout, check=False)
    except (FileNotFoundError, PermissionError, NotADirectoryError) as exc:
        raise SpawnFailed(str(exc), stderr=str(exc), command=argv[0]) from None
    except subprocess.TimeoutExpired as exc:
        stderr = exc.stderr.decode() if isinstance(exc.stderr, bytes) else (exc.stderr or "")
        raise SpawnFailed(f"timed out after {timeout}s", stderr=stderr, command=argv[0]) from None
    if proc.returncode != 0:
        raise NonzeroExit(proc.returncode, stderr=proc.stderr, stdout=proc.stdout, command=argv[0])
    return Capture(kind, tuple(argv), proc.stdout, proc.stderr, proc.returncode)

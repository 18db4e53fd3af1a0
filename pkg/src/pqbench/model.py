"""Shared domain types: algorithm descriptors, the registry, run config, records."""

from __future__ import annotations

import fnmatch
import json
import math
import os
import re
from dataclasses import asdict, dataclass, fields, replace
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Iterable

from .errors import ConfigError, InvalidRecord, MalformedRegistry


class Family(str, Enum):
    KEM = "KEM"
    SIGNATURE = "SIGNATURE"


class Capability(str, Enum):
    CPU_BENCH = "CPU_BENCH"
    MEM_BENCH = "MEM_BENCH"
    HANDSHAKE = "HANDSHAKE"
    SPEED = "SPEED"


class Operation(str, Enum):
    KEYGEN = "KEYGEN"
    ENCAPS = "ENCAPS"
    DECAPS = "DECAPS"
    KEYPAIR = "KEYPAIR"
    SIGN = "SIGN"
    VERIFY = "VERIFY"

    @property
    def family(self) -> Family:
        return Family.KEM if self in _KEM_OPS else Family.SIGNATURE

    @property
    def order(self) -> int:
        return OPERATIONS[self.family].index(self)

    @property
    def label(self) -> str:
        return self.value.lower()

    @classmethod
    def from_label(cls, text: str) -> "Operation":
        key = text.strip().upper()
        key = _OP_SYNONYMS.get(key, key)
        try:
            return cls(key)
        except ValueError:
            raise ValueError(f"unknown operation label {text!r}") from None


_KEM_OPS = (Operation.KEYGEN, Operation.ENCAPS, Operation.DECAPS)
OPERATIONS = {
    Family.KEM: _KEM_OPS,
    Family.SIGNATURE: (Operation.KEYPAIR, Operation.SIGN, Operation.VERIFY),
}
_OP_SYNONYMS = {
    "KEYGENS": "KEYGEN",
    "ENCAP": "ENCAPS",
    "DECAP": "DECAPS",
    "SIGNS": "SIGN",
    "VERIFYS": "VERIFY",
}


class Mode(str, Enum):
    FIRST_USE = "first"
    SESSION_REUSE = "reuse"

    @classmethod
    def parse(cls, text: str) -> "Mode":
        t = text.strip()
        for m in cls:
            if t in (m.value, m.name):
                return m
        raise ValueError(f"unknown handshake mode {text!r}")


class Role(str, Enum):
    SERVER = "SERVER"
    CLIENT = "CLIENT"
    STANDALONE = "STANDALONE"


SECURITY_LEVELS = (1, 3, 5)
_ID_RE = re.compile(r"^[^\s|/\\]+$")


def _is_number(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool) and math.isfinite(x)


def _is_int(x) -> bool:
    return isinstance(x, int) and not isinstance(x, bool)


@dataclass(frozen=True)
class AlgorithmDescriptor:
    id: str
    family: Family
    security_level: int | None
    public_key_bytes: int
    private_key_bytes: int
    payload_bytes: int
    standardised: bool = False
    hybrid: bool = False
    capabilities: frozenset[Capability] = frozenset(Capability)

    def __post_init__(self):
        if not isinstance(self.id, str) or not _ID_RE.match(self.id):
            raise InvalidRecord(f"bad algorithm id {self.id!r}")
        if not isinstance(self.family, Family):
            raise InvalidRecord(f"bad family {self.family!r}", algorithm=self.id)
        if self.security_level is not None and self.security_level not in SECURITY_LEVELS:
            raise InvalidRecord(f"security level {self.security_level!r}", algorithm=self.id)
        for name in ("public_key_bytes", "private_key_bytes", "payload_bytes"):
            v = getattr(self, name)
            if not _is_int(v) or v <= 0:
                raise InvalidRecord(f"{name} must be a positive integer, got {v!r}", algorithm=self.id)
        object.__setattr__(self, "capabilities", frozenset(Capability(c) for c in self.capabilities))

    @property
    def operations(self) -> tuple[Operation, ...]:
        return OPERATIONS[self.family]

    def has(self, cap: Capability) -> bool:
        return cap in self.capabilities

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "family": self.family.value,
            "security_level": self.security_level,
            "public_key_bytes": self.public_key_bytes,
            "private_key_bytes": self.private_key_bytes,
            "payload_bytes": self.payload_bytes,
            "standardised": self.standardised,
            "hybrid": self.hybrid,
            "capabilities": [c.value for c in Capability if c in self.capabilities],
        }


_REGISTRY_KEYS = frozenset(
    {
        "id",
        "family",
        "security_level",
        "public_key_bytes",
        "private_key_bytes",
        "payload_bytes",
        "standardised",
        "hybrid",
        "capabilities",
    }
)


class Registry(list):
    """Ordered list of descriptors plus the standardised/non-standardised alias table.

    ``aliases`` maps a non-standardised id to the id of its standardised
    counterpart (e.g. a SPHINCS+ parameter set to the matching SLH-DSA one).
    """

    def __init__(self, descriptors: Iterable[AlgorithmDescriptor] = (), aliases: dict[str, str] | None = None):
        super().__init__(descriptors)
        self.aliases: dict[str, str] = dict(aliases or {})
        seen = set()
        for d in self:
            if d.id in seen:
                raise MalformedRegistry(f"duplicate id {d.id!r}")
            seen.add(d.id)

    def get(self, alg_id: str) -> AlgorithmDescriptor | None:
        key = normalise_id(alg_id)
        for d in self:
            if d.id == alg_id or d.id == key:
                return d
        return None

    def __getitem__(self, item):
        if isinstance(item, str):
            d = self.get(item)
            if d is None:
                raise KeyError(item)
            return d
        return super().__getitem__(item)

    def ids(self) -> list[str]:
        return [d.id for d in self]

    def with_capability(self, cap: Capability) -> list[AlgorithmDescriptor]:
        return [d for d in self if cap in d.capabilities]

    def subset(self, ids: Iterable[str]) -> "Registry":
        wanted = {normalise_id(i) for i in ids}
        unknown = sorted(wanted - set(self.ids()))
        if unknown:
            raise ConfigError(f"unknown algorithm ids {unknown}")
        return Registry([d for d in self if d.id in wanted], self.aliases)

    def enable(self, patterns: Iterable[str]) -> "Registry":
        """Grant every capability to descriptors matching the glob ``patterns``.

        This is how algorithms shipped disabled (e.g. HQC) are switched on.
        """
        patterns = [normalise_id(p) for p in patterns]
        for p in patterns:
            if not any(fnmatch.fnmatchcase(d.id, p) for d in self):
                raise ConfigError(f"--enable {p!r} matches no algorithm")
        out = [
            replace(d, capabilities=frozenset(Capability)) if any(fnmatch.fnmatchcase(d.id, p) for p in patterns)
            else d
            for d in self
        ]
        return Registry(out, self.aliases)


def normalise_id(alg_id: str) -> str:
    """Map printed names with spaces ("FN-DSA 512") to registry ids ("FN-DSA-512")."""
    return re.sub(r"\s+", "-", alg_id.strip())


def _descriptor_from_json(obj, index: int) -> AlgorithmDescriptor:
    if not isinstance(obj, dict):
        raise MalformedRegistry(f"entry {index} is not an object")
    keys = set(obj)
    if keys != _REGISTRY_KEYS:
        extra = sorted(keys - _REGISTRY_KEYS)
        missing = sorted(_REGISTRY_KEYS - keys)
        raise MalformedRegistry(f"entry {index}: unknown keys {extra}, missing keys {missing}")
    try:
        family = Family(obj["family"])
    except ValueError:
        raise MalformedRegistry(f"entry {index}: unknown family {obj['family']!r}") from None
    level = obj["security_level"]
    if level == "UNKNOWN":
        level = None
    if level is not None and not _is_int(level):
        raise MalformedRegistry(f"entry {index}: bad security_level {level!r}")
    for flag in ("standardised", "hybrid"):
        if not isinstance(obj[flag], bool):
            raise MalformedRegistry(f"entry {index}: {flag} must be boolean")
    caps = obj["capabilities"]
    if not isinstance(caps, list):
        raise MalformedRegistry(f"entry {index}: capabilities must be a list")
    try:
        capset = frozenset(Capability(c) for c in caps)
    except ValueError as exc:
        raise MalformedRegistry(f"entry {index}: {exc}") from None
    try:
        return AlgorithmDescriptor(
            id=obj["id"],
            family=family,
            security_level=level,
            public_key_bytes=obj["public_key_bytes"],
            private_key_bytes=obj["private_key_bytes"],
            payload_bytes=obj["payload_bytes"],
            standardised=obj["standardised"],
            hybrid=obj["hybrid"],
            capabilities=capset,
        )
    except InvalidRecord as exc:
        raise MalformedRegistry(f"entry {index}: {exc.detail}") from None


def parse_registry(text: str) -> Registry:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MalformedRegistry(f"not valid JSON: {exc}") from None
    aliases: dict[str, str] = {}
    if isinstance(doc, dict):
        unknown = set(doc) - {"algorithms", "aliases"}
        if unknown or "algorithms" not in doc:
            raise MalformedRegistry(f"registry object needs 'algorithms' (and optional 'aliases'), got {sorted(doc)}")
        aliases = doc.get("aliases", {})
        if not isinstance(aliases, dict) or not all(
            isinstance(k, str) and isinstance(v, str) for k, v in aliases.items()
        ):
            raise MalformedRegistry("aliases must map id strings to id strings")
        doc = doc["algorithms"]
    if not isinstance(doc, list):
        raise MalformedRegistry("registry must be a JSON array")
    return Registry((_descriptor_from_json(o, i) for i, o in enumerate(doc)), aliases)


def load_registry(path: str | os.PathLike) -> Registry:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise MalformedRegistry(f"cannot read {path}: {exc}") from None
    return parse_registry(text)


def dump_registry(registry: Iterable[AlgorithmDescriptor]) -> str:
    entries = [d.to_json() for d in registry]
    aliases = getattr(registry, "aliases", None)
    doc = {"algorithms": entries, "aliases": aliases} if aliases else entries
    return json.dumps(doc, indent=2) + "\n"


def builtin_registry() -> Registry:
    text = resources.files("pqbench").joinpath("data/builtin_registry.json").read_text(encoding="utf-8")
    return parse_registry(text)


_MACHINE_ID_STRIP = re.compile(r"[^A-Za-z0-9_-]")


def sanitize_machine_id(raw: str) -> str:
    clean = _MACHINE_ID_STRIP.sub("", str(raw))
    if not clean:
        raise ConfigError(f"machine id {raw!r} has no characters from [A-Za-z0-9_-]")
    return clean


DEFAULT_OUTPUT_ROOT = "test_data/up_results"


@dataclass
class BenchConfig:
    machine_id: str = "default"
    role: Role = Role.STANDALONE
    peer_address: str | None = None
    control_port: int = 25000
    data_port: int = 25001
    num_runs: int = 3
    cpu_window_seconds: float = 3.0
    tls_window_seconds: float = 30.0
    control_timeout_seconds: float = 30.0
    max_retries: int = 3
    output_root: str = DEFAULT_OUTPUT_ROOT
    seed: int = 42
    bind_address: str = "0.0.0.0"
    mock_work_scale: float = 1.0

    def __post_init__(self):
        self.machine_id = sanitize_machine_id(self.machine_id)
        try:
            self.role = Role(self.role.upper() if isinstance(self.role, str) else self.role)
        except ValueError:
            raise ConfigError(f"unknown role {self.role!r}") from None
        if not _is_int(self.num_runs) or self.num_runs < 1:
            raise ConfigError(f"num_runs must be an integer >= 1, got {self.num_runs!r}")
        if not _is_int(self.max_retries) or self.max_retries < 0:
            raise ConfigError(f"max_retries must be an integer >= 0, got {self.max_retries!r}")
        for name in ("cpu_window_seconds", "tls_window_seconds", "control_timeout_seconds", "mock_work_scale"):
            v = getattr(self, name)
            if not _is_number(v) or v <= 0:
                raise ConfigError(f"{name} must be > 0, got {v!r}")
        for name in ("control_port", "data_port"):
            v = getattr(self, name)
            if not _is_int(v) or not 0 <= v <= 65535:
                raise ConfigError(f"{name} must be a port number, got {v!r}")
        if self.role is not Role.STANDALONE and not self.peer_address:
            raise ConfigError(f"role {self.role.value} requires a peer address")
        if self.peer_address:
            self.peer_host, self.peer_port = split_host_port(self.peer_address, self.control_port)

    @property
    def machine_dir(self) -> Path:
        return Path(self.output_root) / self.machine_id

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def from_mapping(cls, mapping: dict) -> "BenchConfig":
        unknown = set(mapping) - set(cls.field_names())
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        return cls(**mapping)

    def to_mapping(self) -> dict:
        d = asdict(self)
        d["role"] = self.role.value
        return d


def split_host_port(address: str, default_port: int) -> tuple[str, int]:
    host, sep, port = address.rpartition(":")
    if not sep:
        return address, default_port
    if host.startswith("[") and host.endswith("]"):
        host = host[1:-1]
    try:
        return host, int(port)
    except ValueError:
        raise ConfigError(f"bad peer address {address!r}") from None


def load_config_file(path: str | os.PathLike) -> dict:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config file must hold a JSON object")
    unknown = set(doc) - set(BenchConfig.field_names())
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    return doc


# -- measurement records ------------------------------------------------------


def _check_op(rec, op):
    if not isinstance(op, Operation):
        raise InvalidRecord(f"operation must be an Operation, got {op!r}")


def _check_run(run_index):
    if not _is_int(run_index) or run_index < 1:
        raise InvalidRecord(f"run_index must be an integer >= 1, got {run_index!r}")


def _check_nonneg(name, v, integer=False):
    ok = _is_int(v) if integer else _is_number(v)
    if not ok or v < 0:
        raise InvalidRecord(f"{name} must be a non-negative {'integer' if integer else 'number'}, got {v!r}")


@dataclass(frozen=True)
class CpuOpRecord:
    algorithm_id: str
    operation: Operation
    run_index: int
    iterations: int
    mean_time_us: float
    mean_cycles: float

    def __post_init__(self):
        _check_op(self, self.operation)
        _check_run(self.run_index)
        if not _is_int(self.iterations) or self.iterations < 1:
            raise InvalidRecord(f"iterations must be >= 1, got {self.iterations!r}", algorithm=self.algorithm_id)
        _check_nonneg("mean_time_us", self.mean_time_us)
        _check_nonneg("mean_cycles", self.mean_cycles)

    @property
    def family(self) -> Family:
        return self.operation.family


@dataclass(frozen=True)
class MemOpRecord:
    algorithm_id: str
    operation: Operation
    run_index: int
    heap_bytes: int
    ext_heap_bytes: int
    stack_bytes: int

    def __post_init__(self):
        _check_op(self, self.operation)
        _check_run(self.run_index)
        for name in ("heap_bytes", "ext_heap_bytes", "stack_bytes"):
            _check_nonneg(name, getattr(self, name), integer=True)

    @property
    def family(self) -> Family:
        return self.operation.family

    @property
    def total_bytes(self) -> int:
        return self.heap_bytes + self.ext_heap_bytes + self.stack_bytes


@dataclass(frozen=True)
class HandshakeRecord:
    sig_algorithm_id: str
    kem_algorithm_id: str
    mode: Mode
    run_index: int
    connections: int
    real_seconds: float
    user_connections_per_sec: float

    def __post_init__(self):
        if not isinstance(self.mode, Mode):
            raise InvalidRecord(f"mode must be a Mode, got {self.mode!r}")
        _check_run(self.run_index)
        _check_nonneg("connections", self.connections, integer=True)
        if not _is_number(self.real_seconds) or self.real_seconds <= 0:
            raise InvalidRecord(f"real_seconds must be > 0, got {self.real_seconds!r}")
        _check_nonneg("user_connections_per_sec", self.user_connections_per_sec)


@dataclass(frozen=True)
class SpeedRecord:
    algorithm_id: str
    operation: Operation
    run_index: int
    ops_per_second: float
    mean_op_seconds: float

    def __post_init__(self):
        _check_op(self, self.operation)
        _check_run(self.run_index)
        _check_nonneg("ops_per_second", self.ops_per_second)
        _check_nonneg("mean_op_seconds", self.mean_op_seconds)
        if self.ops_per_second > 0:
            expected = 1.0 / self.ops_per_second
            if abs(self.mean_op_seconds - expected) > 1e-6 * expected:
                raise InvalidRecord(
                    f"mean_op_seconds {self.mean_op_seconds} disagrees with 1/ops_per_second {expected}",
                    algorithm=self.algorithm_id,
                )

    @classmethod
    def from_throughput(cls, algorithm_id: str, operation: Operation, run_index: int, ops_per_second: float):
        mean = 1.0 / ops_per_second if ops_per_second > 0 else 0.0
        return cls(algorithm_id, operation, run_index, float(ops_per_second), mean)

    @property
    def family(self) -> Family:
        return self.operation.family


RECORD_TYPES = (CpuOpRecord, MemOpRecord, HandshakeRecord, SpeedRecord)

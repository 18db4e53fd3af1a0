"""Simulated TLS-1.3-style handshake over a stream socket, plus mock credentials.

Every payload is framed as a 4-byte big-endian length followed by the bytes.

First use::

    C -> S  pk
    S -> C  ct, certificate, signature(transcript), mac, session token

where ``transcript = sha256(pk || ct || certificate)`` and
``mac = HMAC-SHA256(shared_secret, transcript || signature)``. The client checks
the certificate against the pinned copy, verifies the signature with the key
embedded in the certificate, decapsulates and checks the MAC.

Session reuse::

    C -> S  token, pk                   (one flight)
    S -> C  0x01, ct, mac               (token known)   or   0x00 (rejected)

with ``mac = HMAC-SHA256(shared_secret, "resume" || token || pk || ct)``. An empty
token asks for a full handshake that issues a fresh token.
"""

from __future__ import annotations

import hashlib
import hmac
import json
import secrets
import socket
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path

from ..errors import BenchIOError, ConfigError, HandshakeMismatch, StreamClosed
from ..model import AlgorithmDescriptor, Family, Mode
from ..provider import mock_sig
from ..storage import atomic_write

FRAME_HEADER = struct.Struct(">I")
MAX_FRAME = 1 << 24
CERT_HEADER_BYTES = 256
CERT_MAGIC = b"PQBENCH-MOCK-CERT-V1\0"
TOKEN_BYTES = 8
ACCEPT, REJECT = b"\x01", b"\x00"


# -- framing ------------------------------------------------------------------


def frame(*payloads: bytes) -> bytes:
    return b"".join(FRAME_HEADER.pack(len(p)) + p for p in payloads)


def send_frames(sock, *payloads: bytes) -> None:
    try:
        sock.sendall(frame(*payloads))
    except (BrokenPipeError, ConnectionResetError) as exc:
        raise StreamClosed(str(exc)) from None


def _recv_exact(sock, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        try:
            chunk = sock.recv(n - len(buf))
        except ConnectionResetError as exc:
            raise StreamClosed(str(exc)) from None
        if not chunk:
            raise StreamClosed(f"peer closed after {len(buf)} of {n} bytes")
        buf += chunk
    return bytes(buf)


def recv_frame(sock, max_len: int = MAX_FRAME) -> bytes:
    (n,) = FRAME_HEADER.unpack(_recv_exact(sock, FRAME_HEADER.size))
    if n > max_len:
        raise HandshakeMismatch(f"frame of {n} bytes exceeds limit {max_len}")
    return _recv_exact(sock, n) if n else b""


# -- certificates -------------------------------------------------------------


def certificate_size(d: AlgorithmDescriptor) -> int:
    return d.public_key_bytes + d.payload_bytes + CERT_HEADER_BYTES


def _cert_header(d: AlgorithmDescriptor) -> bytes:
    body = CERT_MAGIC + d.id.encode() + b"\0" + struct.pack(">III", d.public_key_bytes, d.private_key_bytes,
                                                            d.payload_bytes)
    if len(body) > CERT_HEADER_BYTES:
        raise ConfigError(f"algorithm id too long for a certificate header: {d.id}")
    return body.ljust(CERT_HEADER_BYTES, b"\0")


def make_certificate(sig_provider, pk: bytes, sk: bytes) -> bytes:
    """Fixed header, then the public key, then a self-signature over both."""
    head = _cert_header(sig_provider.descriptor) + pk
    return head + sig_provider.sign(sk, head)


def certificate_public_key(cert: bytes, d: AlgorithmDescriptor) -> bytes:
    if len(cert) != certificate_size(d) or not cert.startswith(CERT_MAGIC):
        raise HandshakeMismatch(f"certificate is not a {d.id} certificate")
    return cert[CERT_HEADER_BYTES:CERT_HEADER_BYTES + d.public_key_bytes]


@dataclass(frozen=True)
class CredentialEntry:
    algorithm_id: str
    certificate_file: Path
    certificate_bytes: int
    key_file: Path


@dataclass(frozen=True)
class CredentialManifest:
    entries: dict[str, CredentialEntry]
    path: Path | None = None

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, alg_id: str) -> bool:
        return alg_id in self.entries

    def certificate(self, alg_id: str) -> bytes:
        return self._read(self.entries[alg_id].certificate_file)

    def secret_key(self, alg_id: str) -> bytes:
        return self._read(self.entries[alg_id].key_file)

    @staticmethod
    def _read(path: Path) -> bytes:
        try:
            return Path(path).read_bytes()
        except OSError as exc:
            raise BenchIOError(str(exc), path=str(path)) from None


def _write_bytes(path: Path, data: bytes) -> None:
    try:
        path.write_bytes(data)
    except OSError as exc:
        raise BenchIOError(str(exc), path=str(path)) from None


def generate_credentials(registry, out_dir, seed: int = 42) -> CredentialManifest:
    """Deterministic certificate and key files for every signature algorithm."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise BenchIOError(str(exc), path=str(out_dir)) from None
    entries = {}
    for i, d in enumerate(x for x in registry if x.family is Family.SIGNATURE):
        prov = mock_sig(d, seed * 1_000_003 + i)
        pk, sk = prov.keypair()
        cert = make_certificate(prov, pk, sk)
        cert_path, key_path = out_dir / f"{d.id}.crt", out_dir / f"{d.id}.key"
        _write_bytes(cert_path, cert)
        _write_bytes(key_path, sk)
        entries[d.id] = CredentialEntry(d.id, cert_path, len(cert), key_path)
    manifest_path = out_dir / "manifest.json"
    doc = {
        "version": 1,
        "entries": [
            {"algorithm": e.algorithm_id, "certificate_file": e.certificate_file.name,
             "certificate_bytes": e.certificate_bytes, "key_file": e.key_file.name}
            for e in entries.values()
        ],
    }
    atomic_write(manifest_path, json.dumps(doc, indent=2) + "\n")
    return CredentialManifest(entries, manifest_path)


def load_manifest(path) -> CredentialManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
        base = path.parent
        entries = {
            e["algorithm"]: CredentialEntry(e["algorithm"], base / e["certificate_file"],
                                            int(e["certificate_bytes"]), base / e["key_file"])
            for e in doc["entries"]
        }
    except OSError as exc:
        raise BenchIOError(str(exc), path=str(path)) from None
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"bad credential manifest: {exc}", path=str(path)) from None
    return CredentialManifest(entries, path)


# -- handshake ----------------------------------------------------------------


class SessionCache:
    """Server-side store of issued session tokens."""

    def __init__(self):
        self._tokens: set[bytes] = set()
        self._lock = threading.Lock()

    def issue(self) -> bytes:
        token = secrets.token_bytes(TOKEN_BYTES)
        with self._lock:
            self._tokens.add(token)
        return token

    def __contains__(self, token: bytes) -> bool:
        with self._lock:
            return token in self._tokens


@dataclass
class ClientSession:
    token: bytes = b""


@dataclass(frozen=True)
class ServerIdentity:
    certificate: bytes
    secret_key: bytes


def _transcript(pk: bytes, ct: bytes, cert: bytes) -> bytes:
    return hashlib.sha256(pk + ct + cert).digest()


def _mac(ss: bytes, data: bytes) -> bytes:
    return hmac.new(ss, data, hashlib.sha256).digest()


def _server_full(sock, kem, sig, identity: ServerIdentity, cache: SessionCache, pk: bytes) -> bool:
    ct, ss = kem.encaps(pk)
    transcript = _transcript(pk, ct, identity.certificate)
    signature = sig.sign(identity.secret_key, transcript)
    send_frames(sock, ct, identity.certificate, signature, _mac(ss, transcript + signature), cache.issue())
    return True


def server_handshake(sock, kem, sig, mode: Mode, identity: ServerIdentity, cache: SessionCache) -> bool:
    if mode is Mode.FIRST_USE:
        return _server_full(sock, kem, sig, identity, cache, recv_frame(sock))
    token = recv_frame(sock)
    pk = recv_frame(sock)
    if not token:
        return _server_full(sock, kem, sig, identity, cache, pk)
    if token not in cache:
        send_frames(sock, REJECT)
        raise HandshakeMismatch("unknown session token")
    ct, ss = kem.encaps(pk)
    send_frames(sock, ACCEPT, ct, _mac(ss, b"resume" + token + pk + ct))
    return True


def _client_full(sock, kem, sig, pk: bytes, sk: bytes, session: ClientSession, pinned: bytes | None) -> bool:
    ct, cert, signature, mac, token = (recv_frame(sock) for _ in range(5))
    if pinned is not None and not hmac.compare_digest(cert, pinned):
        raise HandshakeMismatch("certificate does not match the pinned credential")
    server_pk = certificate_public_key(cert, sig.descriptor)
    transcript = _transcript(pk, ct, cert)
    if not sig.verify(server_pk, transcript, signature):
        raise HandshakeMismatch("transcript signature does not verify")
    ss = kem.decaps(sk, ct)
    if not hmac.compare_digest(mac, _mac(ss, transcript + signature)):
        raise HandshakeMismatch("shared secrets disagree")
    if len(token) != TOKEN_BYTES:
        raise HandshakeMismatch(f"session token of {len(token)} bytes")
    session.token = token
    return True


def client_handshake(sock, kem, sig, mode: Mode, session: ClientSession | None = None,
                     pinned_certificate: bytes | None = None) -> bool:
    """Run the client side; True on success, HANDSHAKE_MISMATCH otherwise."""
    session = session if session is not None else ClientSession()
    pk, sk = kem.keygen()
    if mode is Mode.FIRST_USE:
        send_frames(sock, pk)
        return _client_full(sock, kem, sig, pk, sk, session, pinned_certificate)
    token = session.token
    send_frames(sock, token, pk)
    if not token:
        return _client_full(sock, kem, sig, pk, sk, session, pinned_certificate)
    if recv_frame(sock) != ACCEPT:
        raise HandshakeMismatch("server rejected the session token")
    ct, mac = recv_frame(sock), recv_frame(sock)
    ss = kem.decaps(sk, ct)
    if not hmac.compare_digest(mac, _mac(ss, b"resume" + token + pk + ct)):
        raise HandshakeMismatch("shared secrets disagree on resumption")
    return True


def simulated_handshake(connection, sig_provider, kem_provider, mode: Mode, *, role: str = "client",
                        session: ClientSession | None = None, identity: ServerIdentity | None = None,
                        cache: SessionCache | None = None, pinned_certificate: bytes | None = None) -> bool:
    """Role-dispatching entry point over an established stream connection."""
    if role == "client":
        return client_handshake(connection, kem_provider, sig_provider, mode, session, pinned_certificate)
    if role == "server":
        if identity is None or cache is None:
            raise ConfigError("server handshake needs an identity and a session cache")
        return server_handshake(connection, kem_provider, sig_provider, mode, identity, cache)
    raise ConfigError(f"unknown handshake role {role!r}")


# -- test helpers used by the fault-injection suites ---------------------------


@dataclass
class CountingSocket:
    """Wraps a socket and counts bytes sent through it."""

    sock: socket.socket
    sent: int = 0

    def sendall(self, data: bytes) -> None:
        self.sent += len(data)
        self.sock.sendall(data)

    def recv(self, n: int) -> bytes:
        return self.sock.recv(n)


@dataclass
class TamperingSocket:
    """Flips one byte at absolute offset ``offset`` of the outgoing stream."""

    sock: socket.socket
    offset: int
    _pos: int = field(default=0)

    def sendall(self, data: bytes) -> None:
        start, self._pos = self._pos, self._pos + len(data)
        if start <= self.offset < self._pos:
            buf = bytearray(data)
            buf[self.offset - start] ^= 0xFF
            data = bytes(buf)
        self.sock.sendall(data)

    def recv(self, n: int) -> bytes:
        return self.sock.recv(n)


def signature_offset(kem_d: AlgorithmDescriptor, sig_d: AlgorithmDescriptor) -> int:
    """Offset of the first signature byte in the server's first-use flight."""
    h = FRAME_HEADER.size
    return (h + kem_d.payload_bytes) + (h + certificate_size(sig_d)) + h

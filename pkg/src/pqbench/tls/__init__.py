"""TLS benchmarking: credentials, control protocol, simulated handshakes, speed."""

from .control import PROTO_VERSION, ControlMessage, Done, Err, Go, Hello, Ready, Result, Retry, Suite, \
    decode_control, encode_control
from .handshake import CredentialManifest, generate_credentials, load_manifest, simulated_handshake
from .protocol import PlanEntry, TestPlan, build_plan, simulate
from .runner import bench_tls_speed, run_handshake_client, run_handshake_server
from .stime import parse_s_time, parse_s_time_log

__all__ = [
    "PROTO_VERSION", "ControlMessage", "Done", "Err", "Go", "Hello", "Ready", "Result", "Retry", "Suite",
    "decode_control", "encode_control", "CredentialManifest", "generate_credentials", "load_manifest",
    "simulated_handshake", "PlanEntry", "TestPlan", "build_plan", "simulate", "bench_tls_speed",
    "run_handshake_client", "run_handshake_server", "parse_s_time", "parse_s_time_log",
]

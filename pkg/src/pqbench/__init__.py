"""Benchmark orchestration for post-quantum KEMs and signatures: computational
(CPU and peak memory) and TLS (handshake throughput and operation speed) suites,
with per-run CSV output, averaging, ranking and reporting."""

__version__ = "0.1.0"

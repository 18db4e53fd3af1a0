"""Pure-Python fallback for the compiled kernels in ``_kernels.pyx``."""

import time

MASK = (1 << 64) - 1
MUL = 0x9E3779B97F4A7C15
ADD = 0xD1B54A32D192ED03

IMPLEMENTATION = "python"
HAS_HW_COUNTER = False


def mix(state: int, units: int) -> int:
    acc = state & MASK
    for i in range(units):
        acc = ((acc ^ (i + ADD)) * MUL) & MASK
        acc = ((acc << 27) | (acc >> 37)) & MASK
    return acc


def read_cycles() -> int:
    return 0


monotonic_ns = time.monotonic_ns


def fixed_window(op, window_seconds: float, read_cycles):
    limit = int(window_seconds * 1e9)
    clock = time.monotonic_ns
    n = 0
    c0 = read_cycles()
    t0 = clock()
    while True:
        op()
        n += 1
        now = clock()
        if now - t0 >= limit:
            break
    c1 = read_cycles()
    return n, now - t0, c1 - c0

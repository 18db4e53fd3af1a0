# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops. Must stay bit-for-bit equivalent to ``_kernels_py``."""

from libc.stdint cimport uint64_t

cdef extern from *:
    """
    #include <stdint.h>
    #include <time.h>
    #if defined(__x86_64__) || defined(__i386__)
    #include <x86intrin.h>
    static inline uint64_t pqb_cycles(void) { return (uint64_t)__rdtsc(); }
    #define PQB_HAS_HW_COUNTER 1
    #elif defined(__aarch64__)
    static inline uint64_t pqb_cycles(void) {
        uint64_t v;
        __asm__ volatile("mrs %0, cntvct_el0" : "=r"(v));
        return v;
    }
    #define PQB_HAS_HW_COUNTER 1
    #else
    static inline uint64_t pqb_cycles(void) { return 0; }
    #define PQB_HAS_HW_COUNTER 0
    #endif
    static inline uint64_t pqb_mono_ns(void) {
        struct timespec ts;
        clock_gettime(CLOCK_MONOTONIC, &ts);
        return (uint64_t)ts.tv_sec * 1000000000ull + (uint64_t)ts.tv_nsec;
    }
    """
    uint64_t pqb_cycles() nogil
    uint64_t pqb_mono_ns() nogil
    int PQB_HAS_HW_COUNTER

cdef uint64_t MUL = 0x9E3779B97F4A7C15ULL
cdef uint64_t ADD = 0xD1B54A32D192ED03ULL

IMPLEMENTATION = "cython"
HAS_HW_COUNTER = bool(PQB_HAS_HW_COUNTER)


cpdef uint64_t mix(uint64_t state, uint64_t units) nogil:
    cdef uint64_t acc = state
    cdef uint64_t i
    for i in range(units):
        acc = (acc ^ (i + ADD)) * MUL
        acc = (acc << 27) | (acc >> 37)
    return acc


def read_cycles():
    return pqb_cycles()


def monotonic_ns():
    return pqb_mono_ns()


def fixed_window(object op, double window_seconds, object read_cycles):
    """Call ``op`` until ``window_seconds`` of wall time have elapsed.

    Returns ``(iterations, elapsed_ns, elapsed_cycles)``. The clock is checked
    after every call, so at least one call always happens.
    """
    cdef uint64_t limit = <uint64_t>(window_seconds * 1e9)
    cdef uint64_t t0, now
    cdef Py_ssize_t n = 0
    c0 = read_cycles()
    t0 = pqb_mono_ns()
    while True:
        op()
        n += 1
        now = pqb_mono_ns()
        if now - t0 >= limit:
            break
    c1 = read_cycles()
    return n, now - t0, c1 - c0

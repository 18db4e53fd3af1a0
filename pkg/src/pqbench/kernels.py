"""Kernel selection: compiled extension when importable, pure Python otherwise.

Set ``PQBENCH_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _kernels_py

if os.environ.get("PQBENCH_PURE_PYTHON") == "1":
    _impl = _kernels_py
else:
    try:
        from . import _kernels as _impl  # type: ignore[attr-defined]
    except ImportError:
        _impl = _kernels_py

IMPLEMENTATION: str = _impl.IMPLEMENTATION
HAS_HW_COUNTER: bool = _impl.HAS_HW_COUNTER
mix = _impl.mix
read_cycles = _impl.read_cycles
monotonic_ns = _impl.monotonic_ns
fixed_window = _impl.fixed_window

__all__ = ["IMPLEMENTATION", "HAS_HW_COUNTER", "mix", "read_cycles", "monotonic_ns", "fixed_window"]

"""Reproducible random streams.

All randomness flows through counter-based Philox generators addressed by
explicit integer keys. Streams keyed by (seed, index, ...) are independent of
the order in which they are consumed, so bootstrap draws and Monte Carlo
replications can be evaluated in any schedule (including across worker
processes) without changing the output.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


def philox_key(*parts: int) -> np.ndarray:
    """Fold integer key parts into the 128-bit Philox key."""
    if not parts:
        raise ValueError("at least one key part is required")
    if len(parts) <= 2:
        padded = tuple(parts) + (0,) * (2 - len(parts))
        return np.array([p & _MASK64 for p in padded], dtype=np.uint64)
    # More than two parts: spread through SeedSequence (stable across runs).
    ss = np.random.SeedSequence([p & _MASK64 for p in parts])
    return ss.generate_state(2, dtype=np.uint64)


def keyed_generator(*parts: int) -> np.random.Generator:
    """Return a Generator on the Philox stream addressed by ``parts``."""
    return np.random.Generator(np.random.Philox(key=philox_key(*parts)))


def derive_seed(*parts: int) -> int:
    """Derive a 64-bit child seed from integer key parts."""
    ss = np.random.SeedSequence([p & _MASK64 for p in parts])
    return int(ss.generate_state(1, dtype=np.uint64)[0])

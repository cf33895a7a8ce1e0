"""Reconstruction of 32-bit frame counters from their 16 wire bits."""

MASK32 = 0xFFFFFFFF


def candidates(next_expected: int, wire16: int):
    """Logical counters consistent with ``wire16``, most likely first.

    Tries the current upper half first and the next one after it, which
    covers a single 16-bit rollover since the last accepted frame.
    """
    base = (next_expected & 0xFFFF0000) | wire16
    return [base & MASK32, (base + 0x10000) & MASK32]


def ahead(fcnt32: int, next_expected: int, window: int) -> bool:
    """True if ``fcnt32`` lies in [next_expected, next_expected + window)."""
    return ((fcnt32 - next_expected) & MASK32) < window

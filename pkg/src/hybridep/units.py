"""Unit conversions into the canonical bytes / seconds / ops-per-second units."""

BYTES_PER_MB = 1e6
BYTES_PER_S_PER_GBPS = 1.25e8
SECONDS_PER_MS = 1e-3


def mb(value: float) -> float:
    return value * BYTES_PER_MB


def gbps(value: float) -> float:
    return value * BYTES_PER_S_PER_GBPS


def ms(value: float) -> float:
    return value * SECONDS_PER_MS


def tflops(value: float) -> float:
    return value * 1e12


def to_mb(nbytes: float) -> float:
    return nbytes / BYTES_PER_MB


def to_ms(seconds: float) -> float:
    return seconds / SECONDS_PER_MS

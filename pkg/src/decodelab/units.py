"""Unit constants and formatting helpers.

Device-side quantities (DRAM capacities, device interface rates) use binary
prefixes throughout: a megabyte of DRAM is 2**20 bytes and a gigabyte is
2**30 bytes, matching how the storage arrays are actually sized.  System-side
rates (core clocks, link bandwidths) are plain decimal SI values.
"""

KIB = 1 << 10
MIB = 1 << 20
GIB = 1 << 30
TIB = 1 << 40

NS = 1e-9
US = 1e-6
MS = 1e-3


def bytes_binary(n: float) -> str:
    """Render a byte count with binary prefixes, e.g. 768.0 MiB."""
    for unit, scale in (("TiB", TIB), ("GiB", GIB), ("MiB", MIB), ("KiB", KIB)):
        if abs(n) >= scale:
            return f"{n / scale:.1f} {unit}"
    return f"{n:.0f} B"


def rate_binary(bps: float) -> str:
    """Render a bytes-per-second rate with binary prefixes."""
    return bytes_binary(bps) + "/s"


def seconds(t: float) -> str:
    """Render a duration with a sensible unit."""
    if t >= 1.0:
        return f"{t:.3f} s"
    if t >= MS:
        return f"{t / MS:.3f} ms"
    if t >= US:
        return f"{t / US:.3f} us"
    return f"{t / NS:.1f} ns"

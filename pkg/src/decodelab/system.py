"""Accelerator system description: cores, compute units, links, power.

One core owns one DRAM pseudo-channel and streams weights through a
dequantizer into a small set of tall-skinny MAC arrays, with a vector unit
for elementwise work.  Sixteen cores plus two memory devices form a compute
unit (CU); CUs sit on a bidirectional ring, four per package.

Device capacities are binary quantities (see ``memstack``); clocks and
system-side bandwidths here are decimal SI.  A core's 32 GB/s pseudo-channel
interface is the deliverable rate the compiler and simulator plan against;
the device-side figure in ``memstack`` is the component rating.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace


@dataclass(frozen=True)
class CoreConfig:
    """One accelerator core and its slice of memory bandwidth."""

    tmacs: int = 4
    macs_per_tmac: int = 64
    clock_hz: float = 2.0e9
    pch_bandwidth_bytes_per_s: float = 32.0e9
    mem_buffer_bytes: int = 512 * 1024
    net_buffer_bytes: int = 128 * 1024
    decoder_weights_per_cycle: int = 64
    hpvop_rate_ops_per_s: float = 3.2e10
    accum_regfile_entries: int = 256

    @property
    def mac_ops_per_s(self) -> float:
        """Multiply-accumulate throughput counted as 2 ops per MAC."""
        return 2.0 * self.tmacs * self.macs_per_tmac * self.clock_hz

    @property
    def ops_per_byte(self) -> float:
        """Arithmetic intensity at which the core is exactly balanced."""
        return self.mac_ops_per_s / self.pch_bandwidth_bytes_per_s

    @property
    def macs_per_cycle(self) -> int:
        return self.tmacs * self.macs_per_tmac

    @property
    def bytes_per_cycle(self) -> float:
        return self.pch_bandwidth_bytes_per_s / self.clock_hz


@dataclass(frozen=True)
class CUConfig:
    """Compute unit: cores sharing a pair of memory devices and the ring."""

    cores_per_cu: int = 16
    devices_per_cu: int = 2
    network_links: int = 2

    @property
    def cores_per_device(self) -> int:
        return self.cores_per_cu // self.devices_per_cu


@dataclass(frozen=True)
class LinkParams:
    """Ring link timing and energy.

    Two distinct per-message costs: a cut-through transfer pays the
    injection overhead once and then streams behind the header, while each
    member of a store-compute-forward reduction pays the full turnaround
    (buffer landing, arbitration, vector op issue, descriptor relaunch).
    Both are calibration knobs for the network model.
    """

    link_bandwidth_bytes_per_s: float = 256.0e9
    hop_latency_s: float = 10.0e-9
    injection_overhead_s: float = 50.0e-9
    turnaround_overhead_s: float = 200.0e-9
    intra_package_pj_per_bit: float = 0.5
    inter_package_pj_per_bit: float = 1.0


@dataclass(frozen=True)
class PowerParams:
    """Energy coefficients and the activity profile used for provisioning.

    The provisioning profile describes sustained decode: the memory system
    pinned at full stream, compute duty-cycled well below peak because
    decode arithmetic intensity sits far under the balance point, and the
    ring mostly idle between collectives.
    """

    device_pj_per_bit: float = 1.46
    datapath_pj_per_byte: float = 1.7
    compute_pj_per_op: float = 0.3
    idle_w_per_cu: float = 0.5
    profile_mem: float = 1.0
    profile_compute: float = 0.3
    profile_net: float = 0.12


@dataclass(frozen=True)
class SystemConfig:
    """A full system: replicated CUs on a ring, grouped into packages."""

    core: CoreConfig = field(default_factory=CoreConfig)
    cu: CUConfig = field(default_factory=CUConfig)
    link: LinkParams = field(default_factory=LinkParams)
    power: PowerParams = field(default_factory=PowerParams)
    n_cus: int = 64
    cus_per_package: int = 4

    def validate(self) -> None:
        if self.n_cus < 1:
            raise ValueError("n_cus must be at least 1")
        if self.cus_per_package < 1:
            raise ValueError("cus_per_package must be at least 1")
        if self.cu.cores_per_cu % self.cu.devices_per_cu != 0:
            raise ValueError("cores_per_cu must divide evenly across devices")
        for name in ("profile_mem", "profile_compute", "profile_net"):
            v = getattr(self.power, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        for obj in (self.core, self.cu, self.link):
            for f in fields(obj):
                if getattr(obj, f.name) <= 0:
                    raise ValueError(f"{type(obj).__name__}.{f.name} must be positive")

    @property
    def n_cores(self) -> int:
        return self.n_cus * self.cu.cores_per_cu

    @property
    def cu_mem_bandwidth_bytes_per_s(self) -> float:
        return self.cu.cores_per_cu * self.core.pch_bandwidth_bytes_per_s

    @property
    def cu_mac_ops_per_s(self) -> float:
        return self.cu.cores_per_cu * self.core.mac_ops_per_s

    @property
    def total_mem_bandwidth_bytes_per_s(self) -> float:
        return self.n_cus * self.cu_mem_bandwidth_bytes_per_s

    def package_of(self, cu: int) -> int:
        return cu // self.cus_per_package

    def ring_distance(self, a: int, b: int) -> int:
        """Hops between CUs a and b on the bidirectional ring."""
        d = abs(a - b) % self.n_cus
        return min(d, self.n_cus - d)

    def hop_is_intra_package(self, cu: int, direction: int = 1) -> bool:
        nxt = (cu + direction) % self.n_cus
        return self.package_of(cu) == self.package_of(nxt)

    def link_pj_per_bit(self, cu: int, direction: int = 1) -> float:
        if self.hop_is_intra_package(cu, direction):
            return self.link.intra_package_pj_per_bit
        return self.link.inter_package_pj_per_bit


def roofline_time_s(cfg: SystemConfig, bytes_read: float, mac_ops: float) -> float:
    """Lower bound on step time from memory traffic and arithmetic alone."""
    t_mem = bytes_read / cfg.total_mem_bandwidth_bytes_per_s
    t_compute = mac_ops / (cfg.n_cus * cfg.cu_mac_ops_per_s)
    return max(t_mem, t_compute)


def power_components_w(
    cfg: SystemConfig,
    mem_frac: float,
    compute_frac: float,
    net_frac: float,
) -> dict[str, float]:
    """Per-CU power split at the given activity fractions."""
    core, cu, link, p = cfg.core, cfg.cu, cfg.link, cfg.power
    stream_bps = cu.cores_per_cu * core.pch_bandwidth_bytes_per_s * mem_frac
    device = stream_bps * 8.0 * p.device_pj_per_bit * 1e-12
    datapath = stream_bps * p.datapath_pj_per_byte * 1e-12
    compute = (
        cu.cores_per_cu * core.mac_ops_per_s * compute_frac * p.compute_pj_per_op * 1e-12
    )
    net_bps = cu.network_links * link.link_bandwidth_bytes_per_s * net_frac
    network = net_bps * 8.0 * link.intra_package_pj_per_bit * 1e-12
    return {
        "device": device,
        "datapath": datapath,
        "compute": compute,
        "network": network,
        "idle": p.idle_w_per_cu,
    }


def peak_streaming_power_w(cfg: SystemConfig) -> float:
    """Per-CU provisioning power: sustained decode at full memory stream."""
    p = cfg.power
    comp = power_components_w(cfg, p.profile_mem, p.profile_compute, p.profile_net)
    return sum(comp.values())


def memory_interface_share(cfg: SystemConfig) -> float:
    """Fraction of streaming power spent in the memory devices themselves.

    Evaluated at full stream with compute and network at light duty, the
    regime where provisioning is actually constrained.
    """
    comp = power_components_w(cfg, 1.0, 0.1, 0.1)
    return comp["device"] / sum(comp.values())


def iso_tdp_cus(cfg: SystemConfig, tdp_w: float) -> int:
    """How many CUs fit in a fixed power envelope at streaming load."""
    per_cu = peak_streaming_power_w(cfg)
    return int(math.floor(tdp_w / per_cu))


def scaled(cfg: SystemConfig, n_cus: int) -> SystemConfig:
    """Same architecture at a different CU count."""
    return replace(cfg, n_cus=n_cus)

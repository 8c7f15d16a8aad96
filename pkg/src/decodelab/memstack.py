"""Analytical model of a capacity-optimized stacked-DRAM device.

A device is a stack of DRAM dies on a base logic die.  Storage is organized
hierarchically: ranks of layers, layers split into channels, channels into
pseudo-channels, then bank groups, banks, and subarrays.  Capacity is the
product of every level.  Bandwidth comes only from the interface dimensions:
the number of pseudo-channels actually wired out (layers x channels x
pseudo-channels per channel) times the per-pseudo-channel IO width and data
rate.  Decoupling the two lets a design trade structure count against
interface width, which is the whole point of the exercise.

Energy per bit is a four-component sum: subarray activation, data movement
over on-die wire, hops through the through-silicon vias of the stack, and
the IO interface.  Wire length scales with the square root of per-die
storage area.  Module cost follows die count and die area, with a fixed
per-die overhead for pads, spine, and assembly that does not shrink with
storage.

All capacities and device bandwidths here are binary-prefixed bytes, see
``units``.
"""

from __future__ import annotations

import csv
import hashlib
import itertools
import math
from dataclasses import dataclass, field, fields, replace
from typing import Iterable, Sequence

from .units import GIB, MIB

# Streaming access needs enough banks open concurrently to hide row
# activation behind transfers: 4 bank groups per pseudo-channel minimum.
MIN_BANK_GROUPS_STREAMING = 4
MIN_BANKS_PER_GROUP_STREAMING = 1


@dataclass(frozen=True)
class StackGeometry:
    """Structural description of one stacked-DRAM device."""

    ranks: int = 1
    layers_per_rank: int = 4
    channels_per_layer: int = 1
    pchs_per_channel: int = 2
    bank_groups_per_pch: int = 4
    banks_per_bank_group: int = 1
    subarrays_per_bank: int = 24
    subarray_capacity_bits: int = 8 * MIB  # 1 MiB per subarray
    pch_io_bits: int = 32
    pch_data_rate: float = 8 * GIB  # transfers per second per IO pin

    def validate(self) -> None:
        for f in fields(self):
            v = getattr(self, f.name)
            if v <= 0:
                raise ValueError(f"{f.name} must be positive, got {v}")
        if self.bank_groups_per_pch < MIN_BANK_GROUPS_STREAMING:
            raise ValueError(
                f"bank_groups_per_pch={self.bank_groups_per_pch} below streaming "
                f"minimum {MIN_BANK_GROUPS_STREAMING}"
            )
        if self.banks_per_bank_group < MIN_BANKS_PER_GROUP_STREAMING:
            raise ValueError("banks_per_bank_group must be at least 1")

    @property
    def storage_dies(self) -> int:
        return self.ranks * self.layers_per_rank

    @property
    def pseudo_channels(self) -> int:
        """Interface pseudo-channels wired to the base die.

        Only one rank drives the interface at a time, so ranks do not
        multiply bandwidth, only capacity.
        """
        return self.layers_per_rank * self.channels_per_layer * self.pchs_per_channel

    def capacity_bytes(self) -> int:
        structures = (
            self.ranks
            * self.layers_per_rank
            * self.channels_per_layer
            * self.pchs_per_channel
            * self.bank_groups_per_pch
            * self.banks_per_bank_group
            * self.subarrays_per_bank
        )
        return structures * self.subarray_capacity_bits // 8

    def bandwidth_bytes_per_s(self) -> float:
        return self.pseudo_channels * self.pch_io_bits * self.pch_data_rate / 8.0

    def bwcap_per_s(self) -> float:
        """Bandwidth-to-capacity ratio: how often the full device can be read."""
        return self.bandwidth_bytes_per_s() / self.capacity_bytes()

    def per_die_capacity_bytes(self) -> float:
        return self.capacity_bytes() / self.storage_dies

    def ideal_stream_latency_s(self) -> float:
        """Time to stream the entire device once at full bandwidth."""
        return self.capacity_bytes() / self.bandwidth_bytes_per_s()


def hbm3e_reference() -> StackGeometry:
    """Bandwidth-first commodity stack used as the comparison baseline."""
    return StackGeometry(
        ranks=4,
        layers_per_rank=4,
        channels_per_layer=4,
        pchs_per_channel=2,
        bank_groups_per_pch=4,
        banks_per_bank_group=4,
        subarrays_per_bank=24,
        subarray_capacity_bits=8 * MIB,
        pch_io_bits=32,
        pch_data_rate=10 * GIB,
    )


def capacity_optimized_candidate() -> StackGeometry:
    """Small-die capacity-first device: one rank, single channel per layer."""
    return StackGeometry(
        ranks=1,
        layers_per_rank=4,
        channels_per_layer=1,
        pchs_per_channel=2,
        bank_groups_per_pch=4,
        banks_per_bank_group=1,
        subarrays_per_bank=24,
        subarray_capacity_bits=8 * MIB,
        pch_io_bits=32,
        pch_data_rate=8 * GIB,
    )


def hbm3e_bandwidth_matched() -> StackGeometry:
    """Commodity-style stack scaled down to the candidate's interface rate.

    Single rank so capacity lands near what one accelerator core can use,
    with big dies (4 banks, 77 subarrays) in the commodity style.  Serves as
    the like-for-like energy and cost comparator at equal bandwidth.
    """
    return StackGeometry(
        ranks=1,
        layers_per_rank=4,
        channels_per_layer=1,
        pchs_per_channel=2,
        bank_groups_per_pch=4,
        banks_per_bank_group=4,
        subarrays_per_bank=77,
        subarray_capacity_bits=8 * MIB,
        pch_io_bits=32,
        pch_data_rate=8 * GIB,
    )


@dataclass(frozen=True)
class EnergyParams:
    """Per-bit energy components in picojoules.

    ``wire_mm_per_sqrt_gib`` converts per-die capacity to an average on-die
    wire run; it is the single calibrated constant of the model.
    """

    activation_pj: float = 0.18
    wire_pj_per_mm: float = 0.2
    tsv_pj_per_layer: float = 0.148
    io_pj: float = 0.25
    wire_mm_per_sqrt_gib: float = 7.6210235533030595

    @classmethod
    def calibrated(
        cls, reference: StackGeometry, target_pj_per_bit: float = 3.44
    ) -> "EnergyParams":
        """Fit the wire-length constant so ``reference`` hits a known total."""
        base = cls(wire_mm_per_sqrt_gib=0.0)
        fixed = (
            base.activation_pj
            + base.io_pj
            + base.tsv_pj_per_layer * mean_tsv_layers(reference)
        )
        per_die_gib = reference.per_die_capacity_bytes() / GIB
        k = (target_pj_per_bit - fixed) / (base.wire_pj_per_mm * math.sqrt(per_die_gib))
        return cls(wire_mm_per_sqrt_gib=k)


def mean_tsv_layers(geometry: StackGeometry) -> float:
    """Average TSV hops for a bit leaving the stack.

    A bit on layer i of the active rank crosses i + 1 via segments to reach
    the base die; uniform traffic over layers gives the mean below.
    """
    return (geometry.layers_per_rank + 1) / 2.0


def wire_length_mm(geometry: StackGeometry, energy: EnergyParams) -> float:
    per_die_gib = geometry.per_die_capacity_bytes() / GIB
    return energy.wire_mm_per_sqrt_gib * math.sqrt(per_die_gib)


def energy_components_pj_per_bit(
    geometry: StackGeometry, energy: EnergyParams
) -> dict[str, float]:
    """Energy per bit read, split by where it is spent."""
    return {
        "activation": energy.activation_pj,
        "wire": energy.wire_pj_per_mm * wire_length_mm(geometry, energy),
        "tsv": energy.tsv_pj_per_layer * mean_tsv_layers(geometry),
        "io": energy.io_pj,
    }


def energy_pj_per_bit(geometry: StackGeometry, energy: EnergyParams) -> float:
    return sum(energy_components_pj_per_bit(geometry, energy).values())


@dataclass(frozen=True)
class CostParams:
    """Die-count and die-area cost model, normalized to a reference module.

    A module is the storage dies plus one base die.  Die cost splits into a
    fixed fraction (pads, power delivery, assembly) and a part proportional
    to storage area.  ``fixed_die_fraction`` is expressed relative to the
    reference die and is fitted once against a known cost-per-byte ratio.
    """

    fixed_die_fraction: float = 0.0359
    base_dies: int = 1

    @classmethod
    def fitted(
        cls,
        reference: StackGeometry,
        candidate: StackGeometry,
        cost_per_gb_ratio_target: float = 1.81,
    ) -> "CostParams":
        """Solve the fixed fraction from a known candidate cost-per-byte ratio."""
        cap_ratio = candidate.capacity_bytes() / reference.capacity_bytes()
        area_ratio = (
            candidate.per_die_capacity_bytes() / reference.per_die_capacity_bytes()
        )
        dies_ref = reference.storage_dies + cls.base_dies
        dies_cand = candidate.storage_dies + cls.base_dies
        # target module-cost ratio m solves m / cap_ratio = cost ratio target
        m = cost_per_gb_ratio_target * cap_ratio
        # m = (dies_cand / dies_ref) * (f + (1 - f) * area_ratio)
        blend = m * dies_ref / dies_cand
        f = (blend - area_ratio) / (1.0 - area_ratio)
        return cls(fixed_die_fraction=f)


def module_cost(
    geometry: StackGeometry, reference: StackGeometry, cost: CostParams
) -> float:
    """Module cost as a fraction of the reference module's cost."""
    f = cost.fixed_die_fraction
    area = geometry.per_die_capacity_bytes() / reference.per_die_capacity_bytes()
    per_die = f + (1.0 - f) * area
    dies = geometry.storage_dies + cost.base_dies
    dies_ref = reference.storage_dies + cost.base_dies
    return dies * per_die / dies_ref


def cost_per_gb_ratio(
    geometry: StackGeometry, reference: StackGeometry, cost: CostParams
) -> float:
    """Cost per byte relative to the reference device."""
    cap_ratio = geometry.capacity_bytes() / reference.capacity_bytes()
    return module_cost(geometry, reference, cost) / cap_ratio


def bandwidth_per_cost(
    geometry: StackGeometry, reference: StackGeometry, cost: CostParams
) -> float:
    """Bandwidth per unit module cost, normalized so the reference is 1.0."""
    rel_bw = geometry.bandwidth_bytes_per_s() / reference.bandwidth_bytes_per_s()
    return rel_bw / module_cost(geometry, reference, cost)


@dataclass(frozen=True)
class DeviceMetrics:
    """Evaluated figures of merit for one stack geometry."""

    geometry: StackGeometry
    capacity_bytes: int
    bandwidth_bytes_per_s: float
    bwcap_per_s: float
    pj_per_bit: float
    e_act: float
    e_move: float
    e_tsv: float
    e_io: float
    cost_module: float
    cost_per_gb: float
    bw_per_dollar: float
    pareto: bool = False


def evaluate_device(
    geometry: StackGeometry,
    energy: EnergyParams | None = None,
    cost: CostParams | None = None,
    reference: StackGeometry | None = None,
) -> DeviceMetrics:
    energy = energy or EnergyParams()
    cost = cost or CostParams()
    reference = reference or hbm3e_reference()
    comp = energy_components_pj_per_bit(geometry, energy)
    return DeviceMetrics(
        geometry=geometry,
        capacity_bytes=geometry.capacity_bytes(),
        bandwidth_bytes_per_s=geometry.bandwidth_bytes_per_s(),
        bwcap_per_s=geometry.bwcap_per_s(),
        pj_per_bit=sum(comp.values()),
        e_act=comp["activation"],
        e_move=comp["wire"],
        e_tsv=comp["tsv"],
        e_io=comp["io"],
        cost_module=module_cost(geometry, reference, cost),
        cost_per_gb=cost_per_gb_ratio(geometry, reference, cost),
        bw_per_dollar=bandwidth_per_cost(geometry, reference, cost),
    )


@dataclass(frozen=True)
class DesignGrid:
    """Axes swept by the device design-space exploration."""

    ranks: Sequence[int] = (1, 2, 4)
    banks_per_bank_group: Sequence[int] = (1, 2, 4)
    subarray_divisors: Sequence[int] = (1, 2, 4, 8, 16)
    channels_per_layer: Sequence[int] = (1, 2, 4)

    def size(self) -> int:
        return (
            len(self.ranks)
            * len(self.banks_per_bank_group)
            * len(self.subarray_divisors)
            * len(self.channels_per_layer)
        )


def enumerate_design_space(
    base: StackGeometry | None = None,
    grid: DesignGrid | None = None,
    energy: EnergyParams | None = None,
    cost: CostParams | None = None,
    reference: StackGeometry | None = None,
) -> list[DeviceMetrics]:
    """Sweep the grid around ``base`` and evaluate every buildable point.

    Points whose subarray divisor does not divide the base subarray count
    are not buildable and are skipped.  Pareto flags are filled in per
    bandwidth class: a point is on the frontier when no same-bandwidth
    point has both lower energy and at least the capacity.
    """
    base = base or capacity_optimized_candidate()
    grid = grid or DesignGrid()
    out: list[DeviceMetrics] = []
    for ranks, banks, div, channels in itertools.product(
        grid.ranks,
        grid.banks_per_bank_group,
        grid.subarray_divisors,
        grid.channels_per_layer,
    ):
        if base.subarrays_per_bank % div != 0:
            continue
        g = replace(
            base,
            ranks=ranks,
            banks_per_bank_group=banks,
            subarrays_per_bank=base.subarrays_per_bank // div,
            channels_per_layer=channels,
        )
        g.validate()
        out.append(evaluate_device(g, energy, cost, reference))
    flag_pareto(out)
    return out


def flag_pareto(points: list[DeviceMetrics]) -> None:
    """Set ``pareto`` in place for each bandwidth class.

    Within one bandwidth, lower energy and higher capacity both win; a
    point survives when nothing dominates it.  Applying the flagging twice
    changes nothing.
    """
    by_bw: dict[float, list[int]] = {}
    for i, p in enumerate(points):
        by_bw.setdefault(p.bandwidth_bytes_per_s, []).append(i)
    flags = [False] * len(points)
    for idxs in by_bw.values():
        for i in idxs:
            p = points[i]
            dominated = False
            for j in idxs:
                if i == j:
                    continue
                q = points[j]
                if (
                    q.pj_per_bit <= p.pj_per_bit
                    and q.capacity_bytes >= p.capacity_bytes
                    and (
                        q.pj_per_bit < p.pj_per_bit
                        or q.capacity_bytes > p.capacity_bytes
                    )
                ):
                    dominated = True
                    break
            flags[i] = not dominated
    for i, p in enumerate(points):
        points[i] = replace(p, pareto=flags[i])


def pareto_frontier(points: Iterable[DeviceMetrics]) -> list[DeviceMetrics]:
    """Frontier points only, sorted by ascending capacity then bandwidth."""
    pts = list(points)
    flag_pareto(pts)
    front = [p for p in pts if p.pareto]
    front.sort(key=lambda p: (p.capacity_bytes, p.bandwidth_bytes_per_s))
    return front


GEOMETRY_FIELDS = [f.name for f in fields(StackGeometry)]
METRIC_FIELDS = [
    "capacity_bytes",
    "bandwidth_Bps",
    "bwcap",
    "pj_per_bit",
    "e_act",
    "e_move",
    "e_tsv",
    "e_io",
    "cost_module",
    "cost_per_gb",
    "bw_per_dollar",
    "pareto_flag",
]


def grid_digest(base: StackGeometry, grid: DesignGrid) -> str:
    text = repr(base) + repr(grid)
    return hashlib.sha256(text.encode()).hexdigest()[:12]


def write_dse_csv(
    points: Sequence[DeviceMetrics],
    path: str,
    base: StackGeometry | None = None,
    grid: DesignGrid | None = None,
) -> None:
    """Write the sweep as CSV with a self-describing comment header."""
    from . import __version__

    base = base or capacity_optimized_candidate()
    grid = grid or DesignGrid()
    with open(path, "w", newline="") as fh:
        fh.write(f"# decodelab {__version__} device design-space sweep\n")
        fh.write(f"# config_digest={grid_digest(base, grid)}\n")
        fh.write(f"# points={len(points)} grid={grid.size()}\n")
        w = csv.writer(fh)
        w.writerow(GEOMETRY_FIELDS + METRIC_FIELDS)
        for p in points:
            row = [getattr(p.geometry, name) for name in GEOMETRY_FIELDS]
            row += [
                p.capacity_bytes,
                f"{p.bandwidth_bytes_per_s:.6g}",
                f"{p.bwcap_per_s:.6f}",
                f"{p.pj_per_bit:.6f}",
                f"{p.e_act:.6f}",
                f"{p.e_move:.6f}",
                f"{p.e_tsv:.6f}",
                f"{p.e_io:.6f}",
                f"{p.cost_module:.8f}",
                f"{p.cost_per_gb:.6f}",
                f"{p.bw_per_dollar:.6f}",
                int(p.pareto),
            ]
            w.writerow(row)

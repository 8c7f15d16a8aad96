"""Deterministic event-driven simulator for three-stream core programs.

Time is integer nanoseconds.  Each core runs its memory, network, and
compute pipelines concurrently; a pipeline advances in quanta (a 2 KB
buffer entry for DMA, the weight chunk a matrix op consumes, one whole
transfer or collective for the network).  When a quantum's gate fails (an
entry counter in the wrong state, a collective not yet complete, a
coupled-mode phase fence) the pipeline parks on a waiter list and the
stall is attributed to a reason; counter updates and fence openings wake
it.  The event heap breaks time ties with (CU, core, pipeline, program
order, serial), so a given program and system replay an identical trace,
summarized by a hash over the event stream.

Collectives are timed analytically on the bidirectional ring: cut-through
transfers (broadcast, all-gather) pay one injection overhead and then
stream behind the header, while reductions pay a store-compute-forward
turnaround per ring step plus a return broadcast, and every member of a
group completes together.  A gather whose result feeds a matrix op also
records an arrival ramp, letting the consumer start on early rows instead
of waiting for the full vector; reductions never do.
"""

from __future__ import annotations

import hashlib
import heapq
import json
import struct
from dataclasses import dataclass, field

from .isa import ENTRY_BYTES, Instruction, Program, Space, Stream, Variant
from .system import SystemConfig

# vector-op kinds carried in the cols field of a COMPUTE_VOP
VOP_AWAIT = 0
VOP_NORM = 1
VOP_ROPE = 2
VOP_SILU = 3
VOP_EXP = 4
VOP_MAX = 5
VOP_ADD = 6
VOP_ROUTE = 7

VOP_NAMES = {
    VOP_AWAIT: "await",
    VOP_NORM: "norm",
    VOP_ROPE: "rope",
    VOP_SILU: "silu",
    VOP_EXP: "exp",
    VOP_MAX: "max",
    VOP_ADD: "add",
    VOP_ROUTE: "route",
}

# collective kinds carried in the batch field of a network instruction
# whose rows field holds the member count and cols field the group id
COLL_BROADCAST = 0
COLL_ALLGATHER = 1
COLL_REDUCE_SUM = 2
COLL_REDUCE_MAX = 3
COLL_REDUCE_EXPSUM = 4

COLL_NAMES = {
    COLL_BROADCAST: "broadcast",
    COLL_ALLGATHER: "allgather",
    COLL_REDUCE_SUM: "reduce_sum",
    COLL_REDUCE_MAX: "reduce_max",
    COLL_REDUCE_EXPSUM: "reduce_expsum",
}

CUT_THROUGH_KINDS = (COLL_BROADCAST, COLL_ALLGATHER)

# TMAC array fixed costs, in core cycles per weight stripe
TREE_SUM_DRAIN_CYCLES = 3
STRIPE_RELOAD_CYCLES = 2
STRIPE_ROWS = 64
TILE_COLS = 8

STALL_REASONS = ("counter", "slot", "collective", "barrier", "memgate",
                 "coupled")

_PIPES = (Stream.MEMORY, Stream.NETWORK, Stream.COMPUTE)
_BUFFER_SPACES = (Space.MEM_BUFFER, Space.NET_BUFFER)

# trace event codes
EV_DMA = 10
EV_NET = 20
EV_VMM = 30
EV_VOP = 40
EV_MARK = 90


class DeadlockError(RuntimeError):
    """Raised when no pipeline can make progress before the program ends."""

    def __init__(self, blocked: list[str]):
        super().__init__(
            "simulation deadlocked; blocked pipelines:\n  " + "\n  ".join(blocked)
        )
        self.blocked = blocked


@dataclass
class KernelInfo:
    """Side-table entry describing one kernel tag (not part of the binary)."""

    name: str
    phase: int = 0
    layer: int = 0


@dataclass
class KernelStat:
    name: str
    start_ns: int = -1
    end_ns: int = 0
    mem_bytes: int = 0
    mac_ops: int = 0
    net_bytes: int = 0
    vop_ops: int = 0
    max_lag_bytes: int = 0


@dataclass
class SimStats:
    """Everything measured in one simulated decode step."""

    latency_ns: int = 0
    tokens: int = 1
    n_cus: int = 0
    events: int = 0
    dram_read_bytes: int = 0
    dram_write_bytes: int = 0
    buffer_write_bytes: int = 0
    mac_ops: int = 0
    vop_ops: int = 0
    link_byte_hops: int = 0
    kernels: dict[int, KernelStat] = field(default_factory=dict)
    busy_ns: dict[str, int] = field(default_factory=dict)
    stall_ns: dict[str, int] = field(default_factory=dict)
    energy_pj: dict[str, float] = field(default_factory=dict)
    peak_buffer_bytes_per_cu: int = 0
    mean_buffer_bytes: float = 0.0
    trace_hash: str = ""
    power_windows: dict[tuple[int, int], list[float]] = field(default_factory=dict)
    power_window_ns: int = 1024

    @property
    def latency_s(self) -> float:
        return self.latency_ns * 1e-9

    def total_energy_j(self) -> float:
        return sum(self.energy_pj.values()) * 1e-12

    def mean_power_w(self) -> float:
        if self.latency_ns == 0:
            return 0.0
        return self.total_energy_j() / self.latency_s

    def energy_delay_product(self) -> float:
        return self.total_energy_j() * self.latency_s

    def dram_bw_utilization(self, system: SystemConfig) -> float:
        if self.latency_ns == 0:
            return 0.0
        peak = system.total_mem_bandwidth_bytes_per_s * self.latency_s
        return (self.dram_read_bytes + self.dram_write_bytes) / peak

    def kernel_duration_ns(self, tag: int) -> int:
        k = self.kernels[tag]
        return max(0, k.end_ns - max(k.start_ns, 0))


def tmac_kernel_time(
    system: SystemConfig, k_rows: int, n_cols: int, batch: int = 1
) -> int:
    """Core cycles to multiply a k x n weight shard by a batch of vectors.

    The array walks the weight matrix in 64-row stripes; within a stripe
    each 8-wide column tile occupies the TMACs for 8 row-feeds, the
    per-column adder tree drains 3 cycles behind the last feed, and
    reloading stripe activations costs a fixed bubble.  Batched inputs
    stream through a loaded stripe back to back.  Ragged edges are padded
    to full tiles.
    """
    core = system.core
    stripes = max(1, -(-k_rows // STRIPE_ROWS))
    tile_cols = max(1, -(-n_cols // TILE_COLS))
    feeds = tile_cols * TILE_COLS
    per_stripe = batch * -(-feeds // core.tmacs)
    per_stripe += TREE_SUM_DRAIN_CYCLES + STRIPE_RELOAD_CYCLES
    return stripes * per_stripe


@dataclass
class _Collective:
    kind: int
    members: int
    payload: int
    arrivals: list[tuple[int, int]] = field(default_factory=list)  # (core, t)
    cu_lo: int = 1 << 30
    cu_hi: int = -1


class _Engine:
    """One simulation run.  Not reusable."""

    def __init__(
        self,
        program: Program,
        system: SystemConfig,
        *,
        mode: str = "decoupled",
        kernel_table: dict[int, KernelInfo] | None = None,
        trace_path: str | None = None,
        window_ns: int = 1024,
        arbiter: tuple[str, str, str] = ("mem", "net", "compute"),
    ):
        if mode not in ("decoupled", "coupled"):
            raise ValueError(f"unknown mode {mode!r}")
        self.program = program
        self.system = system
        self.mode = mode
        self.kernel_table = kernel_table or {}
        self.trace_path = trace_path
        self.window_ns = window_ns
        pipe_of = {"mem": Stream.MEMORY, "net": Stream.NETWORK,
                   "compute": Stream.COMPUTE}
        try:
            order = [pipe_of[a] for a in arbiter]
        except KeyError as e:
            raise ValueError(f"unknown arbiter pipeline {e.args[0]!r}")
        if sorted(order) != sorted(_PIPES):
            raise ValueError("arbiter must rank mem, net, compute exactly once")
        self.pipe_rank = {s: i for i, s in enumerate(order)}

        core = system.core
        self.pch_bytes_per_s = int(core.pch_bandwidth_bytes_per_s)
        self.cycles_per_ns = max(1, round(core.clock_hz / 1e9))
        self.vop_per_ns = max(1, round(core.hpvop_rate_ops_per_s / 1e9))
        link = system.link
        self.link_bytes_per_ns = max(1, round(link.link_bandwidth_bytes_per_s / 1e9))
        self.hop_ns = max(0, round(link.hop_latency_s * 1e9))
        self.inject_ns = max(0, round(link.injection_overhead_s * 1e9))
        self.turnaround_ns = max(0, round(link.turnaround_overhead_s * 1e9))

        pw = system.power
        self.device_pj_bit = pw.device_pj_per_bit
        self.datapath_pj_byte = pw.datapath_pj_per_byte
        self.compute_pj_op = pw.compute_pj_per_op
        self.intra_pj_bit = link.intra_package_pj_per_bit
        self.inter_pj_bit = link.inter_package_pj_per_bit

        self.stats = SimStats(n_cus=system.n_cus, power_window_ns=window_ns)
        for r in STALL_REASONS:
            self.stats.stall_ns[r] = 0
        for pname in ("mem", "net", "compute"):
            self.stats.busy_ns[pname] = 0
        for comp in ("device", "datapath", "compute", "network", "idle"):
            self.stats.energy_pj[comp] = 0.0

        if window_ns < 1:
            raise ValueError("window_ns must be positive")
        self._hash = hashlib.sha256()
        self._pack = struct.Struct("<qIIBIq").pack
        self._trace_file = None
        self._serial = 0
        self._event_pipe: dict[int, Stream] = {}
        self.heap: list[tuple] = []
        self.collectives: dict[int, _Collective] = {}
        self.waiters: dict[tuple, list[tuple[int, Stream]]] = {}
        self._cu_occ: dict[int, int] = {}
        self._lag_prod: dict[int, int] = {}
        self._lag_cons: dict[int, int] = {}
        self.occ_weighted = 0.0
        self.occ_total = 0
        self.occ_last_t = 0
        self.peak_occ_cu: dict[int, int] = {}
        self._load()

    # ------------------------------------------------------------------
    # program loading

    def _load(self) -> None:
        self.cores: dict[int, dict] = {}
        n_phases = 0
        for info in self.kernel_table.values():
            n_phases = max(n_phases, info.phase + 1)
        self.n_phases = n_phases
        self.phase_open_at: dict[int, int] = {0: 0}
        self.phase_arrivals: dict[int, int] = {}

        for cp in self.program.cores:
            regions: dict[Space, list[tuple[int, int]]] = {
                Space.MEM_BUFFER: [],
                Space.NET_BUFFER: [],
            }
            for r in cp.buffers.regions:
                if r.space in regions:
                    regions[r.space].append((r.offset, r.length))
            for sp in regions:
                regions[sp].sort()
            pipes = {}
            for pipe in _PIPES:
                pipes[pipe] = {
                    "instrs": cp.stream(pipe),
                    "idx": 0,
                    "chunk": 0,
                    "busy_until": 0,
                    "inflight": False,
                    "stall_since": -1,
                    "stall_reason": "",
                    "blocked_key": None,
                    "wake_at": None,
                    "pending_curve": None,
                    "collective_wait": None,
                    "reached_phase": 0,
                    "chunk_start": 0,
                    "chunk_bytes": 0,
                    "chunk_macs": 0,
                    "net_bytes": 0,
                    "vmm_state": None,
                }
            self.cores[cp.core_id] = {
                "cp": cp,
                "regions": regions,
                "counters": {},
                "curves": {},
                "occupancy": 0,
                "pipes": pipes,
            }
        self.n_compute_cores = sum(
            1 for st in self.cores.values() if st["pipes"][Stream.COMPUTE]["instrs"]
        )
        if self.mode == "coupled" and self.n_phases > 1:
            for ph in range(1, self.n_phases):
                self.phase_arrivals[ph] = 0
        depth_all = (self.system.n_cus - 1 + 1) // 2
        # combine-then-release flag exchange: one software turnaround
        # each direction plus ring propagation
        self.barrier_ns = 2 * (self.turnaround_ns + self.inject_ns
                               + max(0, depth_all) * self.hop_ns)

        for core_id, st in self.cores.items():
            # cores whose compute opens mid-phase count toward early fences
            self._note_compute_progress(0, core_id, st["pipes"][Stream.COMPUTE])
        for core_id in self.cores:
            for pipe in _PIPES:
                self._push(0, core_id, pipe)

    def _region_of(self, core_state: dict, space: Space,
                   offset: int) -> tuple[int, int]:
        """(base, length) of the declared region containing offset."""
        for base, length in core_state["regions"].get(space, ()):
            if base <= offset < base + length:
                return base, length
        limit = core_state["cp"].buffers.space_bytes(space)
        return 0, max(limit, ENTRY_BYTES)

    # ------------------------------------------------------------------
    # event plumbing

    def _push(self, t: int, core_id: int, pipe: Stream) -> None:
        st = self.cores[core_id]
        p = st["pipes"][pipe]
        self._serial += 1
        heapq.heappush(
            self.heap,
            (t, st["cp"].cu_id, core_id, self.pipe_rank[pipe], p["idx"],
             self._serial),
        )
        self._event_pipe[self._serial] = pipe

    def _wake(self, key: tuple, t: int) -> None:
        lst = self.waiters.pop(key, None)
        if not lst:
            return
        for core_id, pipe in lst:
            p = self.cores[core_id]["pipes"][pipe]
            since = p["stall_since"]
            if since >= 0:
                self.stats.stall_ns[p["stall_reason"]] += max(0, t - since)
                p["stall_since"] = -1
            p["wake_at"] = t
            self._push(t, core_id, pipe)
            if pipe == Stream.COMPUTE and self.mode == "coupled":
                self._wake(("cpl", core_id), t)

    def _block(self, core_id: int, pipe: Stream, key: tuple, reason: str,
               t: int) -> None:
        p = self.cores[core_id]["pipes"][pipe]
        p["stall_since"] = t
        p["stall_reason"] = reason
        p["blocked_key"] = key
        p["wake_at"] = None
        self.waiters.setdefault(key, []).append((core_id, pipe))

    # ------------------------------------------------------------------
    # counters and occupancy

    def _counter(self, owner: int, space: Space, entry: int) -> int:
        return self.cores[owner]["counters"].get((space, entry), 0)

    def _set_counter(self, owner: int, space: Space, entry: int, value: int,
                     t: int) -> None:
        st = self.cores[owner]
        key = (space, entry)
        old = st["counters"].get(key, 0)
        if value:
            st["counters"][key] = value
        else:
            st["counters"].pop(key, None)
        if (old == 0) != (value == 0):
            self._occupancy_delta(st, ENTRY_BYTES if value else -ENTRY_BYTES, t)
        self._wake((owner, space, entry), t)

    def _dec_counter(self, owner: int, space: Space, entry: int, t: int) -> None:
        v = self._counter(owner, space, entry)
        if v > 0:
            self._set_counter(owner, space, entry, v - 1, t)

    def _occupancy_delta(self, core_state: dict, delta: int, t: int) -> None:
        if t > self.occ_last_t:
            self.occ_weighted += self.occ_total * (t - self.occ_last_t)
            self.occ_last_t = t
        core_state["occupancy"] += delta
        self.occ_total += delta
        cu = core_state["cp"].cu_id
        occ = self._cu_occ.get(cu, 0) + delta
        self._cu_occ[cu] = occ
        if occ > self.peak_occ_cu.get(cu, 0):
            self.peak_occ_cu[cu] = occ

    # ------------------------------------------------------------------
    # tracing / accounting

    _PIPE_NAMES = {Stream.MEMORY: "mem", Stream.NETWORK: "net",
                   Stream.COMPUTE: "compute"}

    def _trace(self, t: int, core_id: int, pipe: Stream, event: int,
               ins_idx: int, bytes_: int) -> None:
        self.stats.events += 1
        self._hash.update(self._pack(t, core_id, int(pipe), event,
                                     ins_idx, bytes_))
        if self._trace_file is not None:
            rec = {
                "t_ns": t,
                "core": core_id,
                "cu": self.cores[core_id]["cp"].cu_id,
                "pipe": self._PIPE_NAMES[pipe],
                "event": event,
                "instr": ins_idx,
                "bytes": bytes_,
            }
            self._trace_file.write(json.dumps(rec) + "\n")

    _COMPONENTS = ("device", "datapath", "compute", "network")

    def _deposit(self, component: str, pj: float, cu: int, t: int) -> None:
        self.stats.energy_pj[component] += pj
        win = t // self.window_ns
        cell = self.stats.power_windows.get((cu, win))
        if cell is None:
            cell = [0.0, 0.0, 0.0, 0.0]
            self.stats.power_windows[(cu, win)] = cell
        cell[self._COMPONENTS.index(component)] += pj

    def _kernel(self, tag: int) -> KernelStat:
        ks = self.stats.kernels.get(tag)
        if ks is None:
            info = self.kernel_table.get(tag)
            ks = KernelStat(name=info.name if info else f"tag{tag}")
            self.stats.kernels[tag] = ks
        return ks

    def _kernel_span(self, tag: int, start: int, end: int) -> KernelStat:
        ks = self._kernel(tag)
        if ks.start_ns < 0 or start < ks.start_ns:
            ks.start_ns = start
        if end > ks.end_ns:
            ks.end_ns = end
        return ks

    def _lag_produce(self, tag: int, n: int) -> None:
        prod = self._lag_prod.get(tag, 0) + n
        self._lag_prod[tag] = prod
        lag = prod - self._lag_cons.get(tag, 0)
        ks = self._kernel(tag)
        if lag > ks.max_lag_bytes:
            ks.max_lag_bytes = lag

    def _lag_consume(self, tag: int, n: int) -> None:
        self._lag_cons[tag] = self._lag_cons.get(tag, 0) + n

    # ------------------------------------------------------------------
    # ring geometry

    def _hops(self, cu_a: int, cu_b: int) -> tuple[int, int]:
        """(hops, inter-package hops) along the shorter ring arc."""
        n = self.system.n_cus
        d = abs(cu_a - cu_b) % n
        fwd = min(d, n - d)
        if fwd == 0:
            return 0, 0
        step = 1 if ((cu_b - cu_a) % n) <= n // 2 else -1
        inter = 0
        cpp = self.system.cus_per_package
        c = cu_a
        for _ in range(fwd):
            nxt = (c + step) % n
            if c // cpp != nxt // cpp:
                inter += 1
            c = nxt
        return fwd, inter

    def _net_energy(self, payload: int, hops: int, inter_hops: int, cu: int,
                    t: int) -> None:
        intra = max(0, hops - inter_hops)
        pj = payload * 8 * (intra * self.intra_pj_bit
                            + inter_hops * self.inter_pj_bit)
        if pj:
            self._deposit("network", pj, cu, t)
        self.stats.link_byte_hops += payload * max(1, hops)

    # ------------------------------------------------------------------
    # run loop

    def run(self) -> SimStats:
        if self.trace_path:
            self._trace_file = open(self.trace_path, "w")
        try:
            self._loop()
        finally:
            if self._trace_file is not None:
                self._trace_file.close()
        return self.stats

    def _loop(self) -> None:
        heap = self.heap
        pop = heapq.heappop
        t_max = 0
        event_pipe = self._event_pipe
        while heap:
            t, _cu, core_id, _rank, _idx, serial = pop(heap)
            if t > t_max:
                t_max = t
            self._step(t, core_id, event_pipe.pop(serial))
        blocked = []
        for core_id, st in sorted(self.cores.items()):
            for pipe in _PIPES:
                p = st["pipes"][pipe]
                if p["idx"] < len(p["instrs"]):
                    ins = p["instrs"][p["idx"]]
                    blocked.append(
                        f"core {core_id} {pipe.name.lower()} instr {p['idx']} "
                        f"({ins.variant.name}) waiting on "
                        f"{p['stall_reason'] or 'nothing runnable'}"
                    )
        if blocked:
            raise DeadlockError(blocked)
        self.stats.latency_ns = t_max
        self.occ_weighted += self.occ_total * max(0, t_max - self.occ_last_t)
        self.stats.mean_buffer_bytes = self.occ_weighted / max(1, t_max)
        self.stats.peak_buffer_bytes_per_cu = max(
            self.peak_occ_cu.values(), default=0
        )
        idle_pj = (self.system.power.idle_w_per_cu * self.system.n_cus
                   * t_max * 1e-9) * 1e12
        self.stats.energy_pj["idle"] += idle_pj
        self.stats.trace_hash = self._hash.hexdigest()

    def _step(self, t: int, core_id: int, pipe: Stream) -> None:
        """Complete any quantum in flight, then start as many as possible."""
        st = self.cores[core_id]
        p = st["pipes"][pipe]
        while True:
            if p["idx"] >= len(p["instrs"]):
                return
            if p["busy_until"] > t:
                return
            ins = p["instrs"][p["idx"]]
            v = ins.variant
            if v == Variant.MEM_DMA:
                done = self._step_dma(t, core_id, st, p, ins)
            elif v == Variant.COMPUTE_VMM:
                done = self._step_vmm(t, core_id, st, p, ins)
            elif v == Variant.COMPUTE_VOP:
                done = self._step_vop(t, core_id, st, p, ins)
            elif v in (Variant.NET_SEND, Variant.NET_FORWARD):
                done = self._step_net(t, core_id, st, p, ins)
            else:  # Interrupt: zero-cost marker
                self._trace(t, core_id, pipe, EV_MARK, p["idx"], 0)
                p["idx"] += 1
                p["chunk"] = 0
                if pipe == Stream.COMPUTE:
                    self._note_compute_progress(t, core_id, p)
                done = True
            if not done:
                return

    # -- coupled-mode fences ------------------------------------------

    def _phase_gate(self, t: int, core_id: int, pipe: Stream,
                    ins: Instruction) -> int | None:
        """Returns the allowed start time, or None if blocked."""
        if self.mode != "coupled" or self.n_phases <= 1:
            return t
        info = self.kernel_table.get(ins.tag)
        if info is None:
            return t
        phase = info.phase
        if pipe == Stream.MEMORY:
            # memory may not run ahead of the kernel compute is executing
            own = self.cores[core_id]["pipes"][Stream.COMPUTE]
            if self._compute_phase(core_id, own) < phase:
                self._block(core_id, pipe, ("memgate", core_id), "memgate", t)
                return None
            return t
        if pipe != Stream.COMPUTE or phase == 0:
            return t
        opened = self.phase_open_at.get(phase)
        if opened is None:
            self._block(core_id, pipe, ("phase", phase), "barrier", t)
            return None
        return max(t, opened)

    def _compute_phase(self, core_id: int, p: dict) -> int:
        instrs = p["instrs"]
        if p["idx"] >= len(instrs):
            return self.n_phases
        info = self.kernel_table.get(instrs[p["idx"]].tag)
        return info.phase if info else 0

    def _note_compute_progress(self, t: int, core_id: int, p: dict) -> None:
        """After the compute cursor moves, open fences it satisfies."""
        if self.mode != "coupled" or self.n_phases <= 1:
            return
        reached = self._compute_phase(core_id, p)
        prev = p["reached_phase"]
        if reached <= prev:
            return
        p["reached_phase"] = reached
        for ph in range(prev + 1, reached + 1):
            if ph in self.phase_arrivals:
                self.phase_arrivals[ph] += 1
                if self.phase_arrivals[ph] == self.n_compute_cores:
                    opened = t + self.barrier_ns
                    self.phase_open_at[ph] = opened
                    self._wake(("phase", ph), opened)
        self._wake(("memgate", core_id), t)

    # -- memory pipeline ----------------------------------------------

    def _step_dma(self, t: int, core_id: int, st: dict, p: dict,
                  ins: Instruction) -> bool:
        chunks = ins.chunk_count
        i = p["chunk"]
        if p["inflight"]:
            p["inflight"] = False
            size = p["chunk_bytes"]
            cu = st["cp"].cu_id
            if ins.src.space == Space.DRAM:
                self.stats.dram_read_bytes += size
                self._deposit("device", size * 8 * self.device_pj_bit, cu, t)
                ks = self._kernel_span(ins.tag, p["chunk_start"], t)
                ks.mem_bytes += size
                self._lag_produce(ins.tag, size)
            if ins.dst.space == Space.DRAM:
                self.stats.dram_write_bytes += size
                self._deposit("device", size * 8 * self.device_pj_bit, cu, t)
                self._kernel_span(ins.tag, p["chunk_start"], t).mem_bytes += size
            elif ins.dst.space in _BUFFER_SPACES:
                self.stats.buffer_write_bytes += size
                self._deposit("datapath", size * self.datapath_pj_byte, cu, t)
                if ins.valid_count:
                    owner = self.cores[ins.dst.core]
                    base, length = self._region_of(owner, ins.dst.space,
                                                   ins.dst.offset)
                    slots = max(1, length // ENTRY_BYTES)
                    entry = base // ENTRY_BYTES + (i % slots)
                    self._set_counter(ins.dst.core, ins.dst.space, entry,
                                      ins.valid_count, t)
            self._trace(t, core_id, Stream.MEMORY, EV_DMA, p["idx"], size)
            if i + 1 >= chunks:
                if ins.check_valid and ins.decrement_on_read and \
                        ins.src.space in _BUFFER_SPACES:
                    owner = self.cores[ins.src.core]
                    base, _ = self._region_of(owner, ins.src.space,
                                              ins.src.offset)
                    self._dec_counter(ins.src.core, ins.src.space,
                                      base // ENTRY_BYTES, t)
                p["idx"] += 1
                p["chunk"] = 0
                return True
            p["chunk"] = i + 1
            i += 1
        t0 = self._phase_gate(t, core_id, Stream.MEMORY, ins)
        if t0 is None:
            return False
        if self.mode == "coupled":
            comp = st["pipes"][Stream.COMPUTE]
            key = comp["blocked_key"]
            wake = comp["wake_at"]
            if key is not None and (wake is None or t0 < wake) and (
                    key[0] == "phase"
                    or (len(key) == 3 and key[1] == Space.NET_BUFFER)):
                # loads are issued at the point of use: memory may not
                # run ahead while compute sits in a collective wait
                if wake is not None:
                    self._push(wake, core_id, Stream.MEMORY)
                else:
                    self._block(core_id, Stream.MEMORY, ("cpl", core_id),
                                "coupled", t0)
                return False
        if i == 0 and ins.check_valid and ins.src.space in _BUFFER_SPACES:
            owner = self.cores[ins.src.core]
            base, _ = self._region_of(owner, ins.src.space, ins.src.offset)
            entry = base // ENTRY_BYTES
            if self._counter(ins.src.core, ins.src.space, entry) < 1:
                self._block(core_id, Stream.MEMORY,
                            (ins.src.core, ins.src.space, entry), "counter", t0)
                return False
            curve = owner["curves"].get((ins.src.space, base))
            if curve is not None and curve[1] > t0:
                t0 = curve[1]  # draining a region needs it fully resident
        if ins.valid_count and ins.dst.space in _BUFFER_SPACES:
            owner = self.cores[ins.dst.core]
            base, length = self._region_of(owner, ins.dst.space, ins.dst.offset)
            slots = max(1, length // ENTRY_BYTES)
            entry = base // ENTRY_BYTES + (i % slots)
            if self._counter(ins.dst.core, ins.dst.space, entry) != 0:
                self._block(core_id, Stream.MEMORY,
                            (ins.dst.core, ins.dst.space, entry), "slot", t0)
                return False
        size = min(ENTRY_BYTES, ins.length - i * ENTRY_BYTES) if ins.length else 0
        dur = -(-size * 1_000_000_000 // self.pch_bytes_per_s) if size else 0
        p["chunk_bytes"] = size
        p["chunk_start"] = t0
        p["inflight"] = True
        p["busy_until"] = t0 + dur
        self.stats.busy_ns["mem"] += dur
        self._push(t0 + dur, core_id, Stream.MEMORY)
        return False

    # -- compute pipeline ---------------------------------------------

    def _step_vmm(self, t: int, core_id: int, st: dict, p: dict,
                  ins: Instruction) -> bool:
        chunks = ins.chunk_count
        i = p["chunk"]
        if p["inflight"]:
            p["inflight"] = False
            cu = st["cp"].cu_id
            macs = p["chunk_macs"]
            self.stats.mac_ops += macs
            self._deposit("compute", 2 * macs * self.compute_pj_op, cu, t)
            ks = self._kernel_span(ins.tag, p["chunk_start"], t)
            ks.mac_ops += macs
            self._lag_consume(ins.tag, p["chunk_bytes"])
            if ins.check_valid and ins.decrement_on_read and \
                    ins.src.space in _BUFFER_SPACES:
                owner = self.cores[ins.src.core]
                base, length = self._region_of(owner, ins.src.space,
                                               ins.src.offset)
                slots = max(1, length // ENTRY_BYTES)
                entry = base // ENTRY_BYTES + (i % slots)
                self._dec_counter(ins.src.core, ins.src.space, entry, t)
            self._trace(t, core_id, Stream.COMPUTE, EV_VMM, p["idx"],
                        p["chunk_bytes"])
            if i + 1 >= chunks:
                if ins.valid_count and ins.dst.space in _BUFFER_SPACES:
                    owner = self.cores[ins.dst.core]
                    base, _ = self._region_of(owner, ins.dst.space,
                                              ins.dst.offset)
                    self._set_counter(ins.dst.core, ins.dst.space,
                                      base // ENTRY_BYTES, ins.valid_count, t)
                p["idx"] += 1
                p["chunk"] = 0
                p["vmm_state"] = None
                self._note_compute_progress(t, core_id, p)
                return True
            p["chunk"] = i + 1
            i += 1
        t0 = self._phase_gate(t, core_id, Stream.COMPUTE, ins)
        if t0 is None:
            return False
        state = p["vmm_state"]
        if state is None:
            state = {
                "total_cycles": tmac_kernel_time(
                    self.system, ins.rows, ins.cols, max(1, ins.batch)),
                "total_macs": max(1, ins.rows) * max(1, ins.cols)
                * max(1, ins.batch),
                "cum_macs": 0,
                "cum_ns": 0,
                "curve": p["pending_curve"],
            }
            p["pending_curve"] = None
            p["vmm_state"] = state
        if ins.check_valid and ins.src.space in _BUFFER_SPACES:
            owner = self.cores[ins.src.core]
            base, length = self._region_of(owner, ins.src.space, ins.src.offset)
            slots = max(1, length // ENTRY_BYTES)
            entry = base // ENTRY_BYTES + (i % slots)
            if self._counter(ins.src.core, ins.src.space, entry) < 1:
                self._block(core_id, Stream.COMPUTE,
                            (ins.src.core, ins.src.space, entry), "counter", t0)
                return False
            if self.mode == "coupled":
                # load-then-execute: the ring generation must be fully
                # resident before any of it is consumed
                gen_end = min(chunks, (i // slots + 1) * slots)
                for j in range(i + 1, gen_end):
                    e2 = base // ENTRY_BYTES + (j % slots)
                    if self._counter(ins.src.core, ins.src.space, e2) < 1:
                        self._block(core_id, Stream.COMPUTE,
                                    (ins.src.core, ins.src.space, e2),
                                    "counter", t0)
                        return False
        length = max(1, ins.length)
        size = min(ENTRY_BYTES, ins.length - i * ENTRY_BYTES) if ins.length else 0
        cum_b = min(ins.length, (i + 1) * ENTRY_BYTES) if ins.length else length
        cum_cycles = state["total_cycles"] * cum_b // length
        cum_ns = -(-cum_cycles // self.cycles_per_ns)
        dur = cum_ns - state["cum_ns"]
        cum_macs = state["total_macs"] * cum_b // length
        p["chunk_macs"] = cum_macs - state["cum_macs"]
        p["chunk_bytes"] = size
        state["cum_ns"] = cum_ns
        state["cum_macs"] = cum_macs
        end = t0 + dur
        if state["curve"] is not None:
            t_first, t_full, _ = state["curve"]
            floor = t_first + (t_full - t_first) * cum_b // length
            if end < floor:
                end = floor
        p["chunk_start"] = t0
        p["inflight"] = True
        p["busy_until"] = end
        self.stats.busy_ns["compute"] += max(0, end - t0)
        self._push(end, core_id, Stream.COMPUTE)
        return False

    def _step_vop(self, t: int, core_id: int, st: dict, p: dict,
                  ins: Instruction) -> bool:
        if p["inflight"]:
            p["inflight"] = False
            cu = st["cp"].cu_id
            ops = max(0, ins.rows) * max(1, ins.batch)
            self.stats.vop_ops += ops
            if ops:
                self._deposit("compute", ops * self.compute_pj_op, cu, t)
            ks = self._kernel_span(ins.tag, p["chunk_start"], t)
            ks.vop_ops += ops
            if ins.check_valid and ins.decrement_on_read and \
                    ins.src.space in _BUFFER_SPACES:
                owner = self.cores[ins.src.core]
                base, _ = self._region_of(owner, ins.src.space, ins.src.offset)
                self._dec_counter(ins.src.core, ins.src.space,
                                  base // ENTRY_BYTES, t)
            if ins.valid_count and ins.dst.space in _BUFFER_SPACES:
                owner = self.cores[ins.dst.core]
                base, _ = self._region_of(owner, ins.dst.space, ins.dst.offset)
                self._set_counter(ins.dst.core, ins.dst.space,
                                  base // ENTRY_BYTES, ins.valid_count, t)
            self._trace(t, core_id, Stream.COMPUTE, EV_VOP, p["idx"], 0)
            p["idx"] += 1
            self._note_compute_progress(t, core_id, p)
            return True
        t0 = self._phase_gate(t, core_id, Stream.COMPUTE, ins)
        if t0 is None:
            return False
        if ins.check_valid and ins.src.space in _BUFFER_SPACES:
            owner = self.cores[ins.src.core]
            base, _ = self._region_of(owner, ins.src.space, ins.src.offset)
            entry = base // ENTRY_BYTES
            if self._counter(ins.src.core, ins.src.space, entry) < 1:
                self._block(core_id, Stream.COMPUTE,
                            (ins.src.core, ins.src.space, entry), "counter", t0)
                return False
            curve = owner["curves"].get((ins.src.space, base))
            if curve is not None and curve[1] > t0:
                if ins.cols == VOP_AWAIT:
                    # hand the ramp to the matrix op behind this gate
                    p["pending_curve"] = curve
                else:
                    t0 = curve[1]  # elementwise ops need the whole vector
        dur = -(-(max(0, ins.rows) * max(1, ins.batch)) // self.vop_per_ns)
        p["chunk_start"] = t0
        p["inflight"] = True
        p["busy_until"] = t0 + dur
        self.stats.busy_ns["compute"] += dur
        self._push(t0 + dur, core_id, Stream.COMPUTE)
        return False

    # -- network pipeline ---------------------------------------------

    def _step_net(self, t: int, core_id: int, st: dict, p: dict,
                  ins: Instruction) -> bool:
        if p["inflight"]:
            p["inflight"] = False
            dst = ins.dst
            if ins.valid_count and dst.space in _BUFFER_SPACES and \
                    dst.core in self.cores:
                owner = self.cores[dst.core]
                self.stats.buffer_write_bytes += p["net_bytes"]
                self._deposit("datapath", p["net_bytes"] * self.datapath_pj_byte,
                              owner["cp"].cu_id, t)
                if ins.rows == 0:
                    # collective members publish from _complete_collective
                    base, _ = self._region_of(owner, dst.space, dst.offset)
                    self._set_counter(dst.core, dst.space, base // ENTRY_BYTES,
                                      ins.valid_count, t)
            ks = self._kernel_span(ins.tag, p["chunk_start"], t)
            ks.net_bytes += p["net_bytes"]
            self._trace(t, core_id, Stream.NETWORK, EV_NET, p["idx"],
                        p["net_bytes"])
            p["idx"] += 1
            return True
        t0 = self._phase_gate(t, core_id, Stream.NETWORK, ins)
        if t0 is None:
            return False
        if ins.check_valid and ins.src.space in _BUFFER_SPACES:
            owner = self.cores[ins.src.core]
            base, _ = self._region_of(owner, ins.src.space, ins.src.offset)
            entry = base // ENTRY_BYTES
            if self._counter(ins.src.core, ins.src.space, entry) < 1:
                self._block(core_id, Stream.NETWORK,
                            (ins.src.core, ins.src.space, entry), "counter", t0)
                return False
            curve = owner["curves"].get((ins.src.space, base))
            if curve is not None and curve[1] > t0:
                t0 = curve[1]  # forwarding needs the whole vector resident
        if ins.valid_count and ins.dst.space in _BUFFER_SPACES and \
                ins.dst.core in self.cores:
            owner = self.cores[ins.dst.core]
            base, _ = self._region_of(owner, ins.dst.space, ins.dst.offset)
            entry = base // ENTRY_BYTES
            if self._counter(ins.dst.core, ins.dst.space, entry) != 0:
                self._block(core_id, Stream.NETWORK,
                            (ins.dst.core, ins.dst.space, entry), "slot", t0)
                return False
        if ins.check_valid and ins.decrement_on_read and \
                ins.src.space in _BUFFER_SPACES:
            owner = self.cores[ins.src.core]
            base, _ = self._region_of(owner, ins.src.space, ins.src.offset)
            self._dec_counter(ins.src.core, ins.src.space,
                              base // ENTRY_BYTES, t0)
        p["chunk_start"] = t0
        p["net_bytes"] = ins.length
        if ins.rows > 0:
            return self._join_collective(t0, core_id, st, p, ins)
        cu_src = st["cp"].cu_id
        dst_state = self.cores.get(ins.dst.core)
        cu_dst = dst_state["cp"].cu_id if dst_state else cu_src
        hops, inter = self._hops(cu_src, cu_dst)
        dur = (self.inject_ns + hops * self.hop_ns
               + -(-ins.length // self.link_bytes_per_ns))
        self._net_energy(ins.length, hops, inter, cu_src, t0)
        p["inflight"] = True
        p["busy_until"] = t0 + dur
        self.stats.busy_ns["net"] += dur
        self._push(t0 + dur, core_id, Stream.NETWORK)
        return False

    def _join_collective(self, t0: int, core_id: int, st: dict, p: dict,
                         ins: Instruction) -> bool:
        cid = ins.cols
        coll = self.collectives.get(cid)
        if coll is None:
            coll = _Collective(kind=ins.batch, members=ins.rows,
                               payload=ins.length)
            self.collectives[cid] = coll
        cu = st["cp"].cu_id
        if cu < coll.cu_lo:
            coll.cu_lo = cu
        if cu > coll.cu_hi:
            coll.cu_hi = cu
        coll.arrivals.append((core_id, t0))
        p["inflight"] = True
        p["busy_until"] = 1 << 62  # released when the group completes
        p["collective_wait"] = cid
        p["stall_since"] = t0
        p["stall_reason"] = "collective"
        if len(coll.arrivals) == coll.members:
            self._complete_collective(coll, cid)
        return False

    def _complete_collective(self, coll: _Collective, cid: int) -> None:
        t_last = max(a[1] for a in coll.arrivals)
        if self.mode == "coupled":
            # software-triggered exchange: the initiating core observes
            # the last contribution and launches the ring pass itself
            t_last += self.turnaround_ns
        span = coll.cu_hi - coll.cu_lo + 1
        # a group confined to one CU still pays one exchange step through
        # the CU-local switch; ring depth takes over past that
        depth = max(1, span // 2) if coll.members > 1 else 0
        t_first = t_last
        t_done = t_last
        if depth > 0:
            if coll.kind == COLL_ALLGATHER:
                frag = -(-coll.payload // span)
                frag_ns = -(-frag // self.link_bytes_per_ns)
                t_first = t_last + self.inject_ns + self.hop_ns + frag_ns
                t_done = t_last + self.inject_ns + depth * (self.hop_ns + frag_ns)
            elif coll.kind == COLL_BROADCAST:
                pay_ns = -(-coll.payload // self.link_bytes_per_ns)
                t_first = t_last + self.inject_ns + self.hop_ns
                t_done = t_last + self.inject_ns + depth * self.hop_ns + pay_ns
            else:
                pay_ns = -(-coll.payload // self.link_bytes_per_ns)
                vop_ns = -(-(coll.payload // 2) // self.vop_per_ns)
                up = depth * (self.turnaround_ns + self.hop_ns + pay_ns + vop_ns)
                back = self.inject_ns + depth * self.hop_ns + pay_ns
                t_done = t_last + up + back
                t_first = t_done
        # energy: the payload crosses the span once per direction of travel
        steps = depth if coll.kind in CUT_THROUGH_KINDS else 2 * depth
        if span > 1:
            _, inter = self._hops(coll.cu_lo % self.system.n_cus,
                                  coll.cu_hi % self.system.n_cus)
        else:
            inter = 0
        self._net_energy(coll.payload, max(1, steps), min(inter, max(1, steps)),
                         coll.cu_lo, t_done)
        curve = None
        if coll.kind in CUT_THROUGH_KINDS and t_done > t_first:
            curve = (t_first, t_done, coll.payload)
        # cut-through results become visible as the first fragment lands;
        # matrix consumers then pace themselves with the arrival ramp,
        # other readers wait for the ramp's end.  Reductions publish only
        # once the return broadcast finishes.
        publish_at = t_first if coll.kind in CUT_THROUGH_KINDS else t_done
        for member_core, _t_arr in coll.arrivals:
            mp = self.cores[member_core]["pipes"][Stream.NETWORK]
            if mp["collective_wait"] != cid:
                continue
            mp["collective_wait"] = None
            if mp["stall_since"] >= 0:
                self.stats.stall_ns["collective"] += t_done - mp["stall_since"]
                mp["stall_since"] = -1
            ins = mp["instrs"][mp["idx"]]
            if ins.valid_count and ins.dst.space in _BUFFER_SPACES and \
                    ins.dst.core in self.cores:
                owner = self.cores[ins.dst.core]
                base, _ = self._region_of(owner, ins.dst.space, ins.dst.offset)
                if curve is not None:
                    owner["curves"][(ins.dst.space, base)] = curve
                self._set_counter(ins.dst.core, ins.dst.space,
                                  base // ENTRY_BYTES, ins.valid_count,
                                  publish_at)
            mp["busy_until"] = t_done
            self._push(t_done, member_core, Stream.NETWORK)
        del self.collectives[cid]


def run(
    program: Program,
    system: SystemConfig,
    *,
    tokens: int = 1,
    mode: str = "decoupled",
    kernel_table: dict[int, KernelInfo] | None = None,
    trace_path: str | None = None,
    window_ns: int = 1024,
    arbiter: tuple[str, str, str] = ("mem", "net", "compute"),
) -> SimStats:
    """Simulate one decode step and scale the totals to `tokens` steps.

    The program describes a single token position; successive tokens
    replay the same schedule, so multi-token figures are the single step
    multiplied out.  Callers modeling KV growth re-lower at checkpoints
    and sum the pieces.
    """
    if tokens < 1:
        raise ValueError("tokens must be positive")
    eng = _Engine(
        program,
        system,
        mode=mode,
        kernel_table=kernel_table,
        trace_path=trace_path,
        window_ns=window_ns,
        arbiter=arbiter,
    )
    stats = eng.run()
    stats.tokens = tokens
    if tokens > 1:
        stats.latency_ns *= tokens
        stats.dram_read_bytes *= tokens
        stats.dram_write_bytes *= tokens
        stats.buffer_write_bytes *= tokens
        stats.mac_ops *= tokens
        stats.vop_ops *= tokens
        stats.link_byte_hops *= tokens
        for k in stats.energy_pj:
            stats.energy_pj[k] *= tokens
        for k in stats.busy_ns:
            stats.busy_ns[k] *= tokens
        for k in stats.stall_ns:
            stats.stall_ns[k] *= tokens
    return stats


def power_trace(stats: SimStats, system: SystemConfig,
                window_ns: int | None = None) -> list[dict]:
    """Per-CU power over time from a run's energy deposits.

    Returns one row per (window, CU) with watts by component; idle power
    is spread uniformly.  `window_ns` must be a multiple of the run's
    native window.
    """
    base = stats.power_window_ns
    if window_ns is None:
        window_ns = base
    if window_ns % base != 0:
        raise ValueError(f"window must be a multiple of {base} ns")
    fold = window_ns // base
    idle_w = system.power.idle_w_per_cu
    acc: dict[tuple[int, int], list[float]] = {}
    for (cu, win), cell in stats.power_windows.items():
        row = acc.setdefault((cu, win // fold), [0.0, 0.0, 0.0, 0.0])
        for i, v in enumerate(cell):
            row[i] += v
    scale = 1e-12 / (window_ns * 1e-9)  # pJ per window -> W
    rows = []
    for (cu, win), cell in sorted(acc.items(), key=lambda kv: (kv[0][1], kv[0][0])):
        rows.append(
            {
                "t_ns": win * window_ns,
                "cu": cu,
                "device_w": cell[0] * scale,
                "datapath_w": cell[1] * scale,
                "compute_w": cell[2] * scale,
                "network_w": cell[3] * scale,
                "idle_w": idle_w,
                "total_w": sum(cell) * scale + idle_w,
            }
        )
    return rows

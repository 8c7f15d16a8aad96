"""Lowers sharded transformer decode steps to per-core three-stream programs.

One decode step becomes, on every core: a memory stream that prefetches
weight shards and cache lines in layer order, a compute stream that
consumes them behind valid-counter gates, and a network stream carrying
the activation collectives.  Weight regions are rings sized to one
matrix, so the memory stream naturally runs one matrix ahead of compute
and backpressures through the 2-bit counters.

Only a representative window of layers is emitted (two periods of the
layer pattern plus the vocabulary projection); full-model figures are
recovered from the simulated window by closed-form extrapolation, since
every further period repeats the steady state exactly.
"""

from __future__ import annotations

import csv
import random
from dataclasses import dataclass
from pathlib import Path

from .engine import (
    COLL_ALLGATHER,
    COLL_BROADCAST,
    COLL_REDUCE_MAX,
    COLL_REDUCE_SUM,
    KernelInfo,
    VOP_ADD,
    VOP_AWAIT,
    VOP_EXP,
    VOP_MAX,
    VOP_NORM,
    VOP_ROPE,
    VOP_ROUTE,
    VOP_SILU,
)
from .isa import (
    BF16,
    ENTRY_BYTES,
    BufferMap,
    BufferRegion,
    CoreProgram,
    Instruction,
    NO_REGION,
    Program,
    RegionRef,
    Space,
    Variant,
)
from .models import ModelSpec, load_model
from .sharding import (
    DEFAULT_MEM_BYTES_PER_CORE,
    MatrixShard,
    ShardPlan,
    plan_sharding,
)
from .system import SystemConfig

# Mem-side staging regions, one buffer entry each: single vectors handed
# between the three streams of the same core.
_MEM_STAGING = ("qs", "kst", "vst", "mx", "sm", "op", "zs", "yp", "lg", "r1", "r2")
# Net-side landing regions for collective results.
_NET_STAGING = ("x", "q", "mxr", "smr", "og", "o", "yr", "x2", "z", "rt", "tok")

KV_RING_ENTRIES = 16  # cache-read ring depth per direction (K and V)

# on-core SRAM allotted to each buffer space
MEM_SPACE_BYTES = 512 * 1024
NET_SPACE_BYTES = 128 * 1024

_WEIGHT_ARENA_NAMES = {"gate_up": "moe.gate_up", "down": "moe.down"}


class LoweringError(ValueError):
    """The model/plan combination cannot be expressed by this lowering."""


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def _entries(nbytes: int) -> int:
    return max(1, _ceil_div(nbytes, ENTRY_BYTES))


@dataclass
class KernelMath:
    """Closed-form work attributed to one kernel tag (summed over cores)."""

    dram_bytes: int = 0
    mac_ops: int = 0
    vop_ops: int = 0
    buffer_bytes: int = 0
    net_payload_bytes: int = 0

    def add(self, other: "KernelMath", times: int = 1) -> None:
        self.dram_bytes += times * other.dram_bytes
        self.mac_ops += times * other.mac_ops
        self.vop_ops += times * other.vop_ops
        self.buffer_bytes += times * other.buffer_bytes
        self.net_payload_bytes += times * other.net_payload_bytes


@dataclass
class CompiledStep:
    """A lowered decode step plus the bookkeeping to extrapolate it."""

    program: Program
    kernel_table: dict[int, KernelInfo]
    plan: ShardPlan
    model: ModelSpec
    batch: int
    seq: int
    seed: int
    emitted_layers: tuple[int, ...]
    layer_period: int
    boundary_tags: tuple[int, ...]  # closing kernel tag per emitted layer
    tag_math: dict[int, KernelMath]

    @property
    def n_periods(self) -> int:
        return self.model.layers // self.layer_period

    @property
    def emitted_periods(self) -> int:
        return len(self.emitted_layers) // self.layer_period

    def extra_periods(self) -> int:
        return self.n_periods - self.emitted_periods

    def steady_period_ns(self, stats) -> int:
        """Wall time of one layer period once the pipeline is warm.

        Measured between the closing kernels of the first and second
        emitted periods, so window-edge effects (the bootstrap broadcast,
        cold weight rings) fall outside the measurement.
        """
        p = self.layer_period
        if len(self.boundary_tags) < 2 * p:
            raise ValueError("need two emitted periods to measure steady state")
        a = stats.kernels[self.boundary_tags[p - 1]].end_ns
        b = stats.kernels[self.boundary_tags[2 * p - 1]].end_ns
        return b - a

    def full_latency_ns(self, stats) -> int:
        """Latency of the whole model: simulated window + repeated periods."""
        extra = self.extra_periods()
        if extra == 0:
            return stats.latency_ns
        return stats.latency_ns + extra * self.steady_period_ns(stats)

    def math_for_layers(self, layers) -> KernelMath:
        wanted = set(layers)
        out = KernelMath()
        for tag, info in self.kernel_table.items():
            if info.layer in wanted:
                out.add(self.tag_math[tag])
        return out

    def period_math(self) -> KernelMath:
        p = self.layer_period
        return self.math_for_layers(self.emitted_layers[p : 2 * p])

    def emitted_math(self) -> KernelMath:
        out = KernelMath()
        for m in self.tag_math.values():
            out.add(m)
        return out

    def full_math(self) -> KernelMath:
        out = self.emitted_math()
        out.add(self.period_math(), self.extra_periods())
        return out


# ---------------------------------------------------------------------------


class _Builder:
    def __init__(
        self,
        model: ModelSpec,
        plan: ShardPlan,
        batch: int,
        seq: int,
        seed: int,
        emit: tuple[int, ...],
        period: int,
    ):
        self.m = model
        self.plan = plan
        self.B = batch
        self.S = seq
        self.seed = seed
        self.emit = emit
        self.period = period
        self.C = plan.total_cores
        if plan.n_cus < 1 or self.C % plan.n_cus:
            raise LoweringError("core count must divide evenly into CUs")
        self.cores_per_cu = self.C // plan.n_cus
        if self.C < model.kv_heads:
            raise LoweringError(
                f"{model.name} has {model.kv_heads} KV heads but only "
                f"{self.C} cores; KV head groups would overlap"
            )
        self.abf = model.activation_bits // 8
        self.kvf = model.kv_bits // 8
        self.mem: list[list[Instruction]] = [[] for _ in range(self.C)]
        self.comp: list[list[Instruction]] = [[] for _ in range(self.C)]
        self.net: list[list[Instruction]] = [[] for _ in range(self.C)]
        self.kernel_table: dict[int, KernelInfo] = {}
        self.math: dict[int, KernelMath] = {}
        self._next_tag = 1
        self._next_cid = 1
        self.boundary: list[int] = []
        self._dram_cursor = [0] * self.C
        self._dram_cap = plan.mem_bytes_per_core
        self.regions: list[dict[str, BufferRegion]] = []
        self.buffers: list[BufferMap] = []
        self._plan_regions()

    # -- buffer layout ------------------------------------------------

    def _weight_bytes(self, s: MatrixShard, core: int) -> int:
        idx = core - s.start_core
        return int(s.params_of(idx) * self.m.bits_per_weight / 8)

    def _kv_ring_entries(self, core: int) -> int:
        g = self.plan.kv_group_of_core(core)
        if g is None:
            return 0
        hr = self.plan.kv_heads[g]
        per_seq = _ceil_div(self.S, hr.n_cores) * self.m.head_dim * self.kvf
        return min(KV_RING_ENTRIES, _entries(per_seq))

    def _plan_regions(self) -> None:
        """Size every core's buffer map before any instruction is emitted."""
        need: list[dict[str, int]] = [dict() for _ in range(self.C)]
        layer_kinds = {self.m.is_moe_layer(L) for L in self.emit}
        shard_lists = [self.plan.moe_shards if k else self.plan.dense_shards
                       for k in sorted(layer_kinds)]
        for shards in shard_lists:
            seen_arena = set()
            for s in shards:
                name = s.name
                double = 1
                if s.kind == "expert":
                    # routed experts share one double-buffered arena per
                    # matrix; per-expert regions would not fit the SRAM
                    name = _WEIGHT_ARENA_NAMES[s.name.split(".")[1]]
                    if name in seen_arena:
                        continue
                    seen_arena.add(name)
                    double = 2
                for idx in range(s.n_cores):
                    c = s.start_core + idx
                    nb = self._weight_bytes(s, c) * double
                    if nb:
                        need[c][name] = max(need[c].get(name, 0), nb)
        hs = self.plan.head_shard
        for idx in range(hs.n_cores):
            c = hs.start_core + idx
            nb = self._weight_bytes(hs, c)
            if nb:
                need[c][hs.name] = max(need[c].get(hs.name, 0), nb)

        mem_space = MEM_SPACE_BYTES
        net_space = NET_SPACE_BYTES
        budget = mem_space // ENTRY_BYTES
        for c in range(self.C):
            kv_e = self._kv_ring_entries(c)
            fixed = len(_MEM_STAGING) + 2 * kv_e
            weights = {n: _entries(nb) for n, nb in sorted(need[c].items())}
            total = fixed + sum(weights.values())
            if total > budget:
                avail = budget - fixed
                want = sum(weights.values())
                scaled = {n: max(2, e * avail // want) for n, e in weights.items()}
                if sum(scaled.values()) > avail:
                    worst = max(weights, key=weights.get)
                    raise LoweringError(
                        f"core {c}: weight region '{worst}' cannot fit the "
                        f"memory buffer even at minimum ring depth"
                    )
                weights = scaled
            regions: list[BufferRegion] = []
            off = 0
            for n in _MEM_STAGING:
                regions.append(BufferRegion(n, Space.MEM_BUFFER, off, ENTRY_BYTES))
                off += ENTRY_BYTES
            for n in ("kvk", "kvv"):
                if kv_e:
                    regions.append(
                        BufferRegion(n, Space.MEM_BUFFER, off, kv_e * ENTRY_BYTES)
                    )
                    off += kv_e * ENTRY_BYTES
            for n, e in weights.items():
                regions.append(
                    BufferRegion(n, Space.MEM_BUFFER, off, e * ENTRY_BYTES)
                )
                off += e * ENTRY_BYTES
            noff = 0
            for n in _NET_STAGING:
                regions.append(BufferRegion(n, Space.NET_BUFFER, noff, ENTRY_BYTES))
                noff += ENTRY_BYTES
            bm = BufferMap(
                mem_bytes=mem_space,
                net_bytes=net_space,
                dram_bytes=self._dram_cap,
                regions=tuple(regions),
            )
            self.buffers.append(bm)
            self.regions.append({r.name: r for r in regions})

    # -- low-level emit helpers ---------------------------------------

    def tag(self, name: str, phase: int, layer: int) -> int:
        t = self._next_tag
        self._next_tag += 1
        self.kernel_table[t] = KernelInfo(name=name, phase=phase, layer=layer)
        self.math[t] = KernelMath()
        return t

    def cid(self) -> int:
        c = self._next_cid
        self._next_cid += 1
        return c

    def mref(self, c: int, name: str) -> RegionRef:
        r = self.regions[c][name]
        return RegionRef(r.space, c, r.offset)

    def _dram(self, c: int, nbytes: int) -> int:
        cur = self._dram_cursor[c]
        if cur + nbytes > self._dram_cap:
            cur = 0
        self._dram_cursor[c] = cur + nbytes
        return cur

    def dma_in(self, c, dst_name, nbytes, tag, *, dtype=None, src_name=None,
               dec=False):
        """Stream nbytes from this core's stack (or a staged vector) in."""
        if src_name is None:
            src = RegionRef(Space.DRAM, c, self._dram(c, nbytes))
        else:
            src = self.mref(c, src_name)
        ins = Instruction(
            variant=Variant.MEM_DMA,
            src=src,
            dst=self.mref(c, dst_name),
            length=nbytes,
            dtype=dtype or self.m.weight_dtype(),
            valid_count=1,
            check_valid=src_name is not None,
            decrement_on_read=dec,
            tag=tag,
        )
        self.mem[c].append(ins)
        mt = self.math[tag]
        if src_name is None:
            mt.dram_bytes += nbytes
        mt.buffer_bytes += nbytes

    def dma_out(self, c, src_name, nbytes, tag):
        """Drain a staged vector into this core's stack (cache append)."""
        ins = Instruction(
            variant=Variant.MEM_DMA,
            src=self.mref(c, src_name),
            dst=RegionRef(Space.DRAM, c, self._dram(c, nbytes)),
            length=nbytes,
            dtype=BF16,
            check_valid=True,
            decrement_on_read=True,
            tag=tag,
        )
        self.mem[c].append(ins)
        self.math[tag].dram_bytes += nbytes

    def vmm(self, c, src_name, rows, cols, nbytes, tag, *, batch=None,
            dst_name=None, vc=0):
        if cols <= 0 or rows <= 0:
            raise LoweringError(
                f"core {c}: empty matrix shard reached the compute stream"
            )
        ins = Instruction(
            variant=Variant.COMPUTE_VMM,
            src=self.mref(c, src_name),
            dst=self.mref(c, dst_name) if dst_name else NO_REGION,
            length=nbytes,
            rows=rows,
            cols=cols,
            batch=self.B if batch is None else batch,
            dtype=self.m.weight_dtype(),
            valid_count=vc,
            check_valid=True,
            decrement_on_read=True,
            tag=tag,
        )
        self.comp[c].append(ins)
        self.math[tag].mac_ops += (
            max(1, rows) * max(1, cols) * max(1, ins.batch)
        )

    def vop(self, c, kind, rows, batch, tag, *, src_name=None, dec=False,
            dst_name=None, vc=0):
        ins = Instruction(
            variant=Variant.COMPUTE_VOP,
            src=self.mref(c, src_name) if src_name else NO_REGION,
            dst=self.mref(c, dst_name) if dst_name else NO_REGION,
            rows=rows,
            cols=kind,
            batch=batch,
            dtype=BF16,
            valid_count=vc,
            check_valid=src_name is not None,
            decrement_on_read=dec,
            tag=tag,
        )
        self.comp[c].append(ins)
        self.math[tag].vop_ops += max(0, rows) * max(1, batch)

    def gate(self, c, name, tag):
        """Zero-cost compute gate on a landed region; frees its slot."""
        self.vop(c, VOP_AWAIT, 0, 1, tag, src_name=name, dec=True)

    def coll(self, c, kind, cid, members, payload, tag, *, src_name=None,
             dst_name=None, vc=0, first=False):
        ins = Instruction(
            variant=Variant.NET_SEND,
            src=self.mref(c, src_name) if src_name else NO_REGION,
            dst=self.mref(c, dst_name) if dst_name else NO_REGION,
            length=payload,
            rows=members,
            cols=cid,
            batch=kind,
            dtype=BF16,
            valid_count=vc,
            check_valid=src_name is not None,
            decrement_on_read=src_name is not None,
            tag=tag,
        )
        self.net[c].append(ins)
        if first:
            mt = self.math[tag]
            mt.net_payload_bytes += payload
            if vc:
                mt.buffer_bytes += payload * members

    # -- layer emission -----------------------------------------------

    def emit_all(self) -> None:
        for L in self.emit:
            if self.m.is_moe_layer(L):
                self._emit_layer(L, moe=True)
            else:
                self._emit_layer(L, moe=False)
        self._emit_head()

    def _emit_layer(self, L: int, *, moe: bool) -> None:
        m, B, C = self.m, self.B, self.C
        e = len(self.boundary)
        p0 = 4 * e
        shards = {s.name: s for s in self.plan.layer_shards(L)}
        wq, wo = shards["wq"], shards["wo"]
        if wq.row_groups != 1:
            raise LoweringError("row-grouped q projection is not supported")
        H, hd, qpk = m.hidden, m.head_dim, m.gqa_group
        xb = H * self.abf * B

        t_xag = self.tag(f"L{L}.x_gather", p0, L)
        t_norm1 = self.tag(f"L{L}.norm1", p0, L)
        t_wq = self.tag(f"L{L}.q_proj", p0, L)
        t_wk = self.tag(f"L{L}.k_proj", p0, L)
        t_wv = self.tag(f"L{L}.v_proj", p0, L)
        t_qg = self.tag(f"L{L}.q_gather", p0 + 1, L)
        t_attn = self.tag(f"L{L}.attention", p0 + 1, L)
        t_mxr = self.tag(f"L{L}.score_max", p0 + 1, L)
        t_smr = self.tag(f"L{L}.score_sum", p0 + 1, L)
        t_ored = self.tag(f"L{L}.o_reduce", p0 + 1, L)
        t_oag = self.tag(f"L{L}.o_gather", p0 + 2, L)
        t_wo = self.tag(f"L{L}.o_proj", p0 + 2, L)
        t_wored = (
            self.tag(f"L{L}.o_proj_reduce", p0 + 2, L)
            if wo.row_groups > 1 else 0
        )
        t_r1 = self.tag(f"L{L}.residual1", p0 + 2, L)

        cid_x = self.cid()
        cid_qg = {g: self.cid() for g in range(m.kv_heads)}
        cid_mx = {(g, b): self.cid() for g in range(m.kv_heads) for b in range(B)}
        cid_sm = {(g, b): self.cid() for g in range(m.kv_heads) for b in range(B)}
        cid_or = {g: self.cid() for g in range(m.kv_heads)}
        cid_oag = self.cid()
        cid_wored = (
            {s: self.cid() for s in range(C // wo.row_groups)}
            if wo.row_groups > 1 else {}
        )

        for c in range(C):
            g = self.plan.kv_group_of_core(c)
            hr = self.plan.kv_heads[g] if g is not None else None
            w_wq = wq.width_of(c)
            wq_b = self._weight_bytes(wq, c)
            wo_b = self._weight_bytes(wo, c)
            w_wo = wo.width_of(c)

            # memory stream: attention weights, cache reads
            self.dma_in(c, "wq", wq_b, t_wq)
            if g is not None:
                wk = shards[f"wk.h{g}"]
                wv = shards[f"wv.h{g}"]
                self.dma_in(c, f"wk.h{g}", self._weight_bytes(wk, c), t_wk)
                self.dma_in(c, f"wv.h{g}", self._weight_bytes(wv, c), t_wv)
                tokens_c = _ceil_div(self.S, hr.n_cores)
                kvb = tokens_c * hd * self.kvf
                for b in range(B):
                    self.dma_in(c, "kvk", kvb, t_attn, dtype=BF16)
                    self.dma_in(c, "kvv", kvb, t_attn, dtype=BF16)
            self.dma_in(c, "wo", wo_b, t_wo)

            # network stream: layer-input gather, attention collectives
            if e == 0:
                self.coll(c, COLL_BROADCAST, cid_x, C, xb, t_xag,
                          dst_name="x", vc=2, first=c == 0)
            else:
                self.coll(c, COLL_ALLGATHER, cid_x, C, xb, t_xag,
                          src_name="r2", dst_name="x", vc=2, first=c == 0)
            if g is not None:
                qb = qpk * hd * self.abf * B
                self.coll(c, COLL_ALLGATHER, cid_qg[g], hr.n_cores, qb, t_qg,
                          src_name="qs", dst_name="q", vc=1,
                          first=c == hr.start_core)
                sb = qpk * self.abf
                for b in range(B):
                    self.coll(c, COLL_REDUCE_MAX, cid_mx[(g, b)], hr.n_cores,
                              sb, t_mxr, src_name="mx", dst_name="mxr", vc=1,
                              first=c == hr.start_core)
                    self.coll(c, COLL_REDUCE_SUM, cid_sm[(g, b)], hr.n_cores,
                              sb, t_smr, src_name="sm", dst_name="smr", vc=1,
                              first=c == hr.start_core)
                self.coll(c, COLL_REDUCE_SUM, cid_or[g], hr.n_cores, qb,
                          t_ored, src_name="op", dst_name="og", vc=1,
                          first=c == hr.start_core)
            self.coll(c, COLL_ALLGATHER, cid_oag, C, xb, t_oag,
                      src_name="og" if g is not None else None,
                      dst_name="o", vc=1, first=c == 0)
            if wo.row_groups > 1:
                self.coll(c, COLL_REDUCE_SUM, cid_wored[c // wo.row_groups],
                          wo.row_groups, w_wo * self.abf * B, t_wored,
                          src_name="yp", dst_name="yr", vc=1,
                          first=c % wo.row_groups == 0)

            # compute stream: projections and attention math
            self.vop(c, VOP_NORM, H, B, t_norm1, src_name="x", dec=True)
            self.vmm(c, "wq", H, w_wq, wq_b, t_wq)
            self.vop(c, VOP_ROPE, w_wq, B, t_wq,
                     dst_name="qs" if g is not None else None,
                     vc=1 if g is not None else 0)
            if g is not None:
                wk = shards[f"wk.h{g}"]
                wv = shards[f"wv.h{g}"]
                w_k = wk.width_of(c - wk.start_core)
                w_v = wv.width_of(c - wv.start_core)
                self.vmm(c, f"wk.h{g}", H, w_k, self._weight_bytes(wk, c), t_wk)
                self.vop(c, VOP_ROPE, w_k, B, t_wk, dst_name="kst", vc=1)
                self.vmm(c, f"wv.h{g}", H, w_v, self._weight_bytes(wv, c),
                         t_wv, dst_name="vst", vc=1)
                self.gate(c, "q", t_qg)
                tokens_c = _ceil_div(self.S, hr.n_cores)
                kvb = tokens_c * hd * self.kvf
                for b in range(B):
                    self.vmm(c, "kvk", hd, tokens_c, kvb, t_attn, batch=qpk)
                    self.vop(c, VOP_MAX, tokens_c, qpk, t_attn,
                             dst_name="mx", vc=1)
                    self.gate(c, "mxr", t_attn)
                    self.vop(c, VOP_EXP, tokens_c, qpk, t_attn)
                    self.vop(c, VOP_ADD, tokens_c, qpk, t_attn,
                             dst_name="sm", vc=1)
                    self.gate(c, "smr", t_attn)
                    self.vmm(c, "kvv", tokens_c, hd, kvb, t_attn, batch=qpk)
                self.vop(c, VOP_ADD, qpk * hd, B, t_attn, dst_name="op", vc=1)
            self.gate(c, "o", t_oag)
            self.vmm(c, "wo", wo.rows_per_group, w_wo, wo_b, t_wo,
                     dst_name="yp" if wo.row_groups > 1 else "yr", vc=1)
            self.gate(c, "x", t_r1)
            self.vop(c, VOP_ADD, w_wo, B, t_r1, src_name="yr", dec=True,
                     dst_name="r1", vc=1)

        if moe:
            self._emit_moe_mlp(L, p0, shards)
        else:
            self._emit_dense_mlp(L, p0, shards)

        # cache appends ride at the tail of the memory stream so they
        # never delay the layer's weight prefetches
        for c in range(C):
            g = self.plan.kv_group_of_core(c)
            if g is None:
                continue
            hr = self.plan.kv_heads[g]
            app = _ceil_div(B * hd * self.kvf, hr.n_cores)
            self.dma_out(c, "kst", app, t_wk)
            self.dma_out(c, "vst", app, t_wv)

    def _emit_dense_mlp(self, L: int, p0: int, shards) -> None:
        m, B, C = self.m, self.B, self.C
        H, F = m.hidden, m.ffn_hidden
        gu, dn = shards["gate_up"], shards["down"]
        if gu.row_groups != 1:
            raise LoweringError("row-grouped gate/up projection would need "
                                "a pre-activation reduction; unsupported")
        t_x2 = self.tag(f"L{L}.x2_gather", p0 + 3, L)
        t_norm2 = self.tag(f"L{L}.norm2", p0 + 3, L)
        t_gu = self.tag(f"L{L}.gate_up", p0 + 3, L)
        t_zag = self.tag(f"L{L}.z_gather", p0 + 3, L)
        t_dn = self.tag(f"L{L}.down", p0 + 3, L)
        t_dnred = (
            self.tag(f"L{L}.down_reduce", p0 + 3, L) if dn.row_groups > 1 else 0
        )
        t_r2 = self.tag(f"L{L}.residual2", p0 + 3, L)
        self.boundary.append(t_r2)

        cid_x2 = self.cid()
        cid_z = self.cid()
        cid_dnred = (
            {s: self.cid() for s in range(C // dn.row_groups)}
            if dn.row_groups > 1 else {}
        )
        xb = H * self.abf * B
        for c in range(C):
            gu_b = self._weight_bytes(gu, c)
            dn_b = self._weight_bytes(dn, c)
            w_gu = gu.width_of(c)
            w_dn = dn.width_of(c)
            self.dma_in(c, "gate_up", gu_b, t_gu)
            self.dma_in(c, "down", dn_b, t_dn)

            self.coll(c, COLL_ALLGATHER, cid_x2, C, xb, t_x2,
                      src_name="r1", dst_name="x2", vc=2, first=c == 0)
            self.coll(c, COLL_ALLGATHER, cid_z, C, F * self.abf * B, t_zag,
                      src_name="zs", dst_name="z", vc=1, first=c == 0)
            if dn.row_groups > 1:
                self.coll(c, COLL_REDUCE_SUM, cid_dnred[c // dn.row_groups],
                          dn.row_groups, w_dn * self.abf * B, t_dnred,
                          src_name="yp", dst_name="yr", vc=1,
                          first=c % dn.row_groups == 0)

            self.vop(c, VOP_NORM, H, B, t_norm2, src_name="x2", dec=True)
            self.vmm(c, "gate_up", H, w_gu, gu_b, t_gu)
            self.vop(c, VOP_SILU, _ceil_div(w_gu, 2), B, t_gu,
                     dst_name="zs", vc=1)
            self.gate(c, "z", t_zag)
            self.vmm(c, "down", dn.rows_per_group, w_dn, dn_b, t_dn,
                     dst_name="yp" if dn.row_groups > 1 else "yr", vc=1)
            self.gate(c, "x2", t_r2)
            self.vop(c, VOP_ADD, w_dn, B, t_r2, src_name="yr", dec=True,
                     dst_name="r2", vc=1)

    def _route_tokens(self, L: int) -> list[int]:
        """Deterministic per-sequence expert draw; the only use of the seed."""
        rng = random.Random(f"{self.seed}:{self.m.name}:{L}")
        counts = [0] * self.m.experts
        for _ in range(self.B):
            for e in rng.sample(range(self.m.experts),
                                self.m.experts_per_token):
                counts[e] += 1
        return counts

    def _emit_moe_mlp(self, L: int, p0: int, shards) -> None:
        m, B, C = self.m, self.B, self.C
        H, Fe, E = m.hidden, m.expert_ffn_hidden, m.experts
        router = shards["router"]
        counts = self._route_tokens(L)
        branches: list[tuple[str, MatrixShard, MatrixShard, int, str, str]] = []
        if m.shared_expert:
            branches.append(("shared", shards["shared.gate_up"],
                             shards["shared.down"], B,
                             "shared.gate_up", "shared.down"))
        for eid, tk in enumerate(counts):
            if tk:
                branches.append((f"expert{eid}", shards[f"expert{eid}.gate_up"],
                                 shards[f"expert{eid}.down"], tk,
                                 "moe.gate_up", "moe.down"))
        if not branches:
            raise LoweringError(f"layer {L}: no expert received any token")
        dn0 = branches[0][2]
        if any(b[1].row_groups != 1 for b in branches):
            raise LoweringError("row-grouped gate/up projection would need "
                                "a pre-activation reduction; unsupported")

        t_x2 = self.tag(f"L{L}.x2_gather", p0 + 3, L)
        t_norm2 = self.tag(f"L{L}.norm2", p0 + 3, L)
        t_rt = self.tag(f"L{L}.router", p0 + 3, L)
        t_rtag = self.tag(f"L{L}.router_gather", p0 + 3, L)
        t_route = self.tag(f"L{L}.route", p0 + 3, L)
        bt = {
            name: (self.tag(f"L{L}.{name}.up", p0 + 3, L),
                   self.tag(f"L{L}.{name}.z_gather", p0 + 3, L),
                   self.tag(f"L{L}.{name}.down", p0 + 3, L),
                   self.tag(f"L{L}.{name}.down_reduce", p0 + 3, L)
                   if dshard.row_groups > 1 else 0)
            for name, _, dshard, _, _, _ in branches
        }
        t_r2 = self.tag(f"L{L}.residual2", p0 + 3, L)
        self.boundary.append(t_r2)

        cid_x2 = self.cid()
        cid_rt = self.cid()
        cid_branch = {
            name: (self.cid(),
                   {s: self.cid() for s in range(C // dshard.row_groups)}
                   if dshard.row_groups > 1 else {})
            for name, _, dshard, _, _, _ in branches
        }
        xb = H * self.abf * B
        for c in range(C):
            on_router = router.start_core <= c < router.start_core + router.n_cores
            rt_b = self._weight_bytes(router, c) if on_router else 0
            if on_router and rt_b:
                self.dma_in(c, "router", rt_b, t_rt)
            for name, gshard, dshard, tk, greg, dreg in branches:
                self.dma_in(c, greg, self._weight_bytes(gshard, c), bt[name][0])
                self.dma_in(c, dreg, self._weight_bytes(dshard, c), bt[name][2])

            self.coll(c, COLL_ALLGATHER, cid_x2, C, xb, t_x2,
                      src_name="r1", dst_name="x2", vc=2, first=c == 0)
            self.coll(c, COLL_ALLGATHER, cid_rt, C, E * self.abf * B, t_rtag,
                      src_name="lg" if on_router and rt_b else None,
                      dst_name="rt", vc=1, first=c == 0)
            for name, gshard, dshard, tk, greg, dreg in branches:
                t_up, t_z, t_d, t_dr = bt[name]
                czag, cdn = cid_branch[name]
                self.coll(c, COLL_ALLGATHER, czag, C, Fe * self.abf * tk,
                          t_z, src_name="zs", dst_name="z", vc=1, first=c == 0)
                if dshard.row_groups > 1:
                    self.coll(c, COLL_REDUCE_SUM, cdn[c // dshard.row_groups],
                              dshard.row_groups,
                              dshard.width_of(c) * self.abf * tk, t_dr,
                              src_name="yp", dst_name="yr", vc=1,
                              first=c % dshard.row_groups == 0)

            self.vop(c, VOP_NORM, H, B, t_norm2, src_name="x2", dec=True)
            if on_router and rt_b:
                self.vmm(c, "router", H, router.width_of(c - router.start_core),
                         rt_b, t_rt, dst_name="lg", vc=1)
            self.vop(c, VOP_ROUTE, E, B, t_route, src_name="rt", dec=True)
            for name, gshard, dshard, tk, greg, dreg in branches:
                t_up, t_z, t_d, t_dr = bt[name]
                w_g = gshard.width_of(c)
                w_d = dshard.width_of(c)
                self.vmm(c, greg, H, w_g, self._weight_bytes(gshard, c),
                         t_up, batch=tk)
                self.vop(c, VOP_SILU, _ceil_div(w_g, 2), tk, t_up,
                         dst_name="zs", vc=1)
                self.gate(c, "z", t_z)
                self.vmm(c, dreg, dshard.rows_per_group, w_d,
                         self._weight_bytes(dshard, c), t_d, batch=tk,
                         dst_name="yp" if dshard.row_groups > 1 else "yr",
                         vc=1)
                # fold this branch's output slice into the accumulator
                self.vop(c, VOP_ADD, w_d, tk, t_d, src_name="yr", dec=True)
            self.gate(c, "x2", t_r2)
            self.vop(c, VOP_ADD, dn0.width_of(c), B, t_r2,
                     dst_name="r2", vc=1)

    def _emit_head(self) -> None:
        m, B, C = self.m, self.B, self.C
        hs = self.plan.head_shard
        if hs.row_groups != 1:
            raise LoweringError("row-grouped vocabulary projection unsupported")
        p = 4 * len(self.boundary)
        t_fx = self.tag("final.x_gather", p, m.layers)
        t_fn = self.tag("final.norm", p, m.layers)
        t_head = self.tag("final.logits", p, m.layers)
        t_tok = self.tag("final.token_pick", p, m.layers)
        cid_fx = self.cid()
        cid_tok = self.cid()
        xb = m.hidden * self.abf * B
        for c in range(C):
            hb = self._weight_bytes(hs, c)
            if hb:
                self.dma_in(c, "lm_head", hb, t_head)
            self.coll(c, COLL_ALLGATHER, cid_fx, C, xb, t_fx,
                      src_name="r2", dst_name="x", vc=1, first=c == 0)
            self.coll(c, COLL_REDUCE_MAX, cid_tok, C, 4 * B, t_tok,
                      src_name="lg" if hb else None, dst_name="tok", vc=1,
                      first=c == 0)
            self.vop(c, VOP_NORM, m.hidden, B, t_fn, src_name="x", dec=True)
            if hb:
                self.vmm(c, "lm_head", m.hidden, hs.width_of(c), hb, t_head,
                         dst_name="lg", vc=1)
            self.gate(c, "tok", t_tok)

    # -- assembly -----------------------------------------------------

    def build(self) -> Program:
        cores = []
        for c in range(self.C):
            cores.append(
                CoreProgram(
                    core_id=c,
                    cu_id=c // self.cores_per_cu,
                    buffers=self.buffers[c],
                    memory_stream=self.mem[c],
                    compute_stream=self.comp[c],
                    network_stream=self.net[c],
                )
            )
        return Program(cores=cores)


# ---------------------------------------------------------------------------


def layer_period(model: ModelSpec) -> int:
    """Length of the repeating layer pattern."""
    return model.moe_period if model.experts else 1


def lower(
    model: ModelSpec,
    plan: ShardPlan,
    batch: int = 1,
    seq: int = 8192,
    *,
    seed: int = 0,
    emit_layers: int | None = None,
) -> CompiledStep:
    """Lower one decode step of the model onto the planned layout.

    emit_layers picks how many leading decoder layers are materialized
    (a multiple of the layer pattern period, default two periods); the
    vocabulary projection is always appended.  CompiledStep carries the
    closed-form work table and extrapolation hooks for the rest.
    """
    if batch < 1 or seq < 1:
        raise LoweringError("batch and seq must be at least 1")
    period = layer_period(model)
    if model.layers % period:
        raise LoweringError("layer count must be a multiple of the pattern")
    if emit_layers is None:
        emit_layers = min(model.layers, 2 * period)
    if emit_layers < 1 or emit_layers > model.layers:
        raise LoweringError("emit_layers out of range")
    if emit_layers % period:
        raise LoweringError("emit_layers must be a multiple of the pattern")
    emit = tuple(range(emit_layers))
    b = _Builder(model, plan, batch, seq, seed, emit, period)
    b.emit_all()
    return CompiledStep(
        program=b.build(),
        kernel_table=b.kernel_table,
        plan=plan,
        model=model,
        batch=batch,
        seq=seq,
        seed=seed,
        emitted_layers=emit,
        layer_period=period,
        boundary_tags=tuple(b.boundary),
        tag_math=b.math,
    )


def lower_decode_step(
    model: ModelSpec | str,
    system: SystemConfig,
    batch: int = 1,
    seq: int = 8192,
    *,
    seed: int = 0,
    emit_layers: int | None = None,
    mem_bytes_per_core: int = DEFAULT_MEM_BYTES_PER_CORE,
) -> CompiledStep:
    """Plan sharding and lower in one call."""
    if isinstance(model, str):
        model = load_model(model)
    plan = plan_sharding(model, system, batch, seq,
                         mem_bytes_per_core=mem_bytes_per_core)
    return lower(model, plan, batch, seq, seed=seed, emit_layers=emit_layers)


def lower_linear(
    k: int,
    n: int,
    batch: int = 1,
    n_cores: int = 4,
    *,
    cores_per_cu: int = 16,
) -> Program:
    """Smallest useful lowering: one dense linear spread over a few cores."""
    if n_cores < 1 or k < 1 or n < 1:
        raise LoweringError("linear lowering needs positive dimensions")
    shard = MatrixShard(name="w", k=k, n=n, start_core=0, n_cores=n_cores)
    wbits = 4.25
    cores = []
    cid = 1
    for c in range(n_cores):
        w = shard.width_of(c)
        wb = max(1, int(shard.params_of(c) * wbits / 8))
        # the input vector stages through one buffer entry
        xlen = min(k * 2, ENTRY_BYTES)
        regions = (
            BufferRegion("x", Space.MEM_BUFFER, 0, ENTRY_BYTES),
            BufferRegion("y", Space.MEM_BUFFER, ENTRY_BYTES, ENTRY_BYTES),
            BufferRegion("w", Space.MEM_BUFFER, 2 * ENTRY_BYTES,
                         _entries(wb) * ENTRY_BYTES),
            BufferRegion("yg", Space.NET_BUFFER, 0, ENTRY_BYTES),
        )
        bm = BufferMap(regions=regions)
        x_ref = RegionRef(Space.MEM_BUFFER, c, 0)
        y_ref = RegionRef(Space.MEM_BUFFER, c, ENTRY_BYTES)
        w_ref = RegionRef(Space.MEM_BUFFER, c, 2 * ENTRY_BYTES)
        yg_ref = RegionRef(Space.NET_BUFFER, c, 0)
        mem = [
            Instruction(variant=Variant.MEM_DMA,
                        src=RegionRef(Space.DRAM, c, 0), dst=x_ref,
                        length=xlen, dtype=BF16, valid_count=1, tag=1),
            Instruction(variant=Variant.MEM_DMA,
                        src=RegionRef(Space.DRAM, c, xlen), dst=w_ref,
                        length=wb, valid_count=1, tag=2),
            Instruction(variant=Variant.MEM_DMA, src=y_ref,
                        dst=RegionRef(Space.DRAM, c, 0), length=w * 2 * batch,
                        dtype=BF16, check_valid=True, decrement_on_read=True,
                        tag=4),
        ]
        comp = [
            Instruction(variant=Variant.COMPUTE_VOP, src=x_ref, rows=0,
                        cols=VOP_AWAIT, check_valid=True,
                        decrement_on_read=True, tag=1),
            Instruction(variant=Variant.COMPUTE_VMM, src=w_ref, dst=y_ref,
                        length=wb, rows=k, cols=w, batch=batch, valid_count=2,
                        check_valid=True, decrement_on_read=True, tag=2),
            Instruction(variant=Variant.COMPUTE_VOP, src=yg_ref, rows=0,
                        cols=VOP_AWAIT, check_valid=True,
                        decrement_on_read=True, tag=3),
        ]
        net = [
            Instruction(variant=Variant.NET_SEND, src=y_ref, dst=yg_ref,
                        length=n * 2 * batch, rows=n_cores, cols=cid,
                        batch=COLL_ALLGATHER, dtype=BF16, valid_count=1,
                        check_valid=True, decrement_on_read=True, tag=3),
            Instruction(variant=Variant.INTERRUPT, tag=3),
            Instruction(variant=Variant.INTERRUPT, tag=3),
        ]
        cores.append(CoreProgram(core_id=c, cu_id=c // cores_per_cu,
                                 buffers=bm, memory_stream=mem,
                                 compute_stream=comp, network_stream=net))
    return Program(cores=cores)


LINEAR_KERNEL_TABLE = {
    1: KernelInfo(name="x_in", phase=0, layer=0),
    2: KernelInfo(name="linear", phase=0, layer=0),
    3: KernelInfo(name="y_gather", phase=0, layer=0),
    4: KernelInfo(name="y_out", phase=0, layer=0),
}


def write_shard_csv(plan: ShardPlan, path: str | Path) -> None:
    """Dump the shard layout as a CSV report."""
    rows = []

    def add(group: str, s: MatrixShard):
        rows.append({
            "layer_kind": group,
            "name": s.name,
            "kind": s.kind,
            "k": s.k,
            "n": s.n,
            "start_core": s.start_core,
            "n_cores": s.n_cores,
            "row_groups": s.row_groups,
            "params": s.total_params(),
            "max_width": s.max_width(),
        })

    for s in plan.dense_shards:
        add("dense", s)
    for s in plan.moe_shards:
        add("moe", s)
    add("head", plan.head_shard)
    with open(path, "w", newline="") as f:
        wr = csv.DictWriter(f, fieldnames=list(rows[0]))
        wr.writeheader()
        wr.writerows(rows)

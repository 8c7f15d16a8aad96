"""Tensor-parallel layout planning for decode.

Every weight matrix is column-sharded so each core owns a disjoint slice of
the output vector.  Attention projections are head-aligned: the Q
projection spreads over all cores (a head's columns land on a contiguous
core run), while each KV head's projection and cache live on that head's
core group, capped so grouped-attention collectives stay local even on
very large rings.  Other matrices fall back to uniform column sharding
with row groups added when shards would drop under one TMAC tile width:
row groups split the contraction dimension, widening per-core shards at
the price of a partial-sum reduction.

Routed experts keep a round-robin home CU for routing bookkeeping but their
weights are column-sharded over every core, exactly like dense matrices, so
a single routed token draws the whole machine's stream bandwidth.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .models import ModelSpec
from .system import SystemConfig

# A KV head group never exceeds this many cores: grouped-query attention
# collectives then span at most 8 CUs regardless of system scale.
KV_GROUP_CORE_CAP = 128

MIN_SHARD_WIDTH = 8  # one TMAC tile of output columns
MAX_ROW_GROUPS = 16

DEFAULT_MEM_BYTES_PER_CORE = 96 * 1024 * 1024


class CapacityError(ValueError):
    """Model does not fit the system's memory; carries the byte deficit."""

    def __init__(self, msg: str, deficit_bytes: int):
        super().__init__(msg)
        self.deficit_bytes = deficit_bytes


@dataclass(frozen=True)
class MatrixShard:
    """One weight matrix and how it spreads over a set of cores."""

    name: str
    k: int  # contraction (input) dimension
    n: int  # output dimension being column-sharded
    start_core: int
    n_cores: int
    row_groups: int = 1
    kind: str = "linear"  # linear | attn_q | attn_kv | router | head | expert

    @property
    def cores_per_group(self) -> int:
        return self.n_cores // self.row_groups

    @property
    def rows_per_group(self) -> int:
        return -(-self.k // self.row_groups)

    def width_of(self, idx: int) -> int:
        """Output columns owned by the idx-th core of the shard's core set."""
        cpg = self.cores_per_group
        within = idx // self.row_groups
        base, extra = divmod(self.n, cpg)
        return base + (1 if within < extra else 0)

    def col_start_of(self, idx: int) -> int:
        cpg = self.cores_per_group
        within = idx // self.row_groups
        base, extra = divmod(self.n, cpg)
        return within * base + min(within, extra)

    def group_of(self, idx: int) -> int:
        # interleaved: cores holding the same columns sit side by side on
        # the ring, so partial-sum exchanges stay inside a CU
        return idx % self.row_groups

    def partner_cores(self, idx: int) -> tuple[int, ...]:
        """Absolute core ids reducing the same output columns."""
        base = idx - (idx % self.row_groups)
        return tuple(self.start_core + base + g for g in range(self.row_groups))

    def params_of(self, idx: int) -> int:
        return self.rows_per_group * self.width_of(idx)

    def total_params(self) -> int:
        return self.k * self.n

    def max_width(self) -> int:
        base, extra = divmod(self.n, self.cores_per_group)
        return base + (1 if extra else 0)


def row_groups_for(n: int, n_cores: int) -> int:
    """Smallest power-of-two group count giving at least tile-width shards."""
    g = 1
    while (
        n * g // n_cores < MIN_SHARD_WIDTH
        and g < MAX_ROW_GROUPS
        and g * 2 <= n_cores
        and n_cores % (g * 2) == 0
    ):
        g *= 2
    return g


@dataclass(frozen=True)
class HeadRange:
    head: int
    start_core: int
    n_cores: int


@dataclass
class ShardPlan:
    model: ModelSpec
    total_cores: int
    n_cus: int
    q_heads: tuple[HeadRange, ...]
    kv_heads: tuple[HeadRange, ...]
    expert_cu: tuple[int, ...]  # routed expert -> CU
    dense_shards: tuple[MatrixShard, ...]  # one decoder layer, dense form
    moe_shards: tuple[MatrixShard, ...]  # one decoder layer, MoE form ( () if dense )
    head_shard: MatrixShard  # final vocab projection
    mem_bytes_per_core: int

    def layer_shards(self, layer: int) -> tuple[MatrixShard, ...]:
        if self.model.is_moe_layer(layer):
            return self.moe_shards
        return self.dense_shards

    def kv_group_of_core(self, core: int) -> int | None:
        for hr in self.kv_heads:
            if hr.start_core <= core < hr.start_core + hr.n_cores:
                return hr.head
        return None

    def kv_bytes_per_core(self, core: int, seq: int, batch: int) -> int:
        """Cache bytes (all layers) this core holds at the given state."""
        head = self.kv_group_of_core(core)
        if head is None:
            return 0
        hr = self.kv_heads[head]
        tokens = -(-seq // hr.n_cores)
        m = self.model
        return 2 * m.layers * m.head_dim * tokens * batch * m.kv_bits // 8

    def weight_bytes_per_core(self, core: int) -> int:
        """Quantized weight bytes resident on one core, all layers."""
        m = self.model
        bits = m.bits_per_weight
        params = 0
        for layer in range(m.layers):
            for s in self.layer_shards(layer):
                params += self._shard_params_of(s, core)
        params += self._shard_params_of(self.head_shard, core)
        # input embedding table is stored evenly over all cores
        params += m.embedding_params // self.total_cores
        return int(params * bits / 8)

    @staticmethod
    def _shard_params_of(s: MatrixShard, core: int) -> int:
        if s.start_core <= core < s.start_core + s.n_cores:
            return s.params_of(core - s.start_core)
        return 0

    def per_core_regions(self, core: int, layer: int) -> list[tuple[str, int]]:
        """Named weight regions (name, bytes) one core holds for one layer."""
        m = self.model
        bits = m.bits_per_weight
        out = []
        for s in self.layer_shards(layer):
            p = self._shard_params_of(s, core)
            if p:
                out.append((s.name, int(p * bits / 8)))
        return out


def plan_sharding(
    model: ModelSpec,
    sys_cfg: SystemConfig,
    batch: int = 1,
    seq: int = 8192,
    mem_bytes_per_core: int = DEFAULT_MEM_BYTES_PER_CORE,
) -> ShardPlan:
    """Lay the model out over the system's cores; error if it cannot fit."""
    model.validate()
    sys_cfg.validate()
    C = sys_cfg.n_cores
    fp = model.footprint_bytes(batch, seq)
    budget = C * mem_bytes_per_core
    if fp.total > budget:
        deficit = fp.total - budget
        raise CapacityError(
            f"{model.name} needs {fp.total:,} bytes (weights {fp.weights:,} + "
            f"kv {fp.kv:,}) but {C} cores provide {budget:,}; "
            f"deficit {deficit:,} bytes",
            deficit_bytes=deficit,
        )

    q_map = tuple(
        HeadRange(i, (i * C) // model.q_heads, max(1, C // model.q_heads))
        for i in range(model.q_heads)
    )
    kv_cores = min(max(1, C // model.kv_heads), KV_GROUP_CORE_CAP)
    kv_map = tuple(
        HeadRange(j, (j * C) // model.kv_heads, kv_cores)
        for j in range(model.kv_heads)
    )

    dense = _dense_layer_shards(model, C, kv_map)
    moe: tuple[MatrixShard, ...] = ()
    expert_cu: tuple[int, ...] = ()
    if model.experts:
        expert_cu = tuple(e % sys_cfg.n_cus for e in range(model.experts))
        moe = _moe_layer_shards(model, sys_cfg, C, kv_map, expert_cu)

    head_shard = MatrixShard(
        name="lm_head",
        k=model.hidden,
        n=model.vocab,
        start_core=0,
        n_cores=C,
        row_groups=row_groups_for(model.vocab, C),
        kind="head",
    )

    return ShardPlan(
        model=model,
        total_cores=C,
        n_cus=sys_cfg.n_cus,
        q_heads=q_map,
        kv_heads=kv_map,
        expert_cu=expert_cu,
        dense_shards=dense,
        moe_shards=moe,
        head_shard=head_shard,
        mem_bytes_per_core=mem_bytes_per_core,
    )


def _attention_shards(
    model: ModelSpec, C: int, kv_map: tuple[HeadRange, ...]
) -> list[MatrixShard]:
    shards = [
        MatrixShard(
            name="wq", k=model.hidden, n=model.hidden, start_core=0, n_cores=C,
            kind="attn_q",
        )
    ]
    for hr in kv_map:
        for wname in ("wk", "wv"):
            shards.append(
                MatrixShard(
                    name=f"{wname}.h{hr.head}",
                    k=model.hidden,
                    n=model.head_dim,
                    start_core=hr.start_core,
                    n_cores=hr.n_cores,
                    kind="attn_kv",
                )
            )
    shards.append(
        MatrixShard(
            name="wo",
            k=model.hidden,
            n=model.hidden,
            start_core=0,
            n_cores=C,
            row_groups=row_groups_for(model.hidden, C),
        )
    )
    return shards


def _dense_layer_shards(
    model: ModelSpec, C: int, kv_map: tuple[HeadRange, ...]
) -> tuple[MatrixShard, ...]:
    shards = _attention_shards(model, C, kv_map)
    shards.append(
        MatrixShard(
            name="gate_up",
            k=model.hidden,
            n=2 * model.ffn_hidden,
            start_core=0,
            n_cores=C,
            row_groups=row_groups_for(2 * model.ffn_hidden, C),
        )
    )
    shards.append(
        MatrixShard(
            name="down",
            k=model.ffn_hidden,
            n=model.hidden,
            start_core=0,
            n_cores=C,
            row_groups=row_groups_for(model.hidden, C),
        )
    )
    return tuple(shards)


def _moe_layer_shards(
    model: ModelSpec,
    sys_cfg: SystemConfig,
    C: int,
    kv_map: tuple[HeadRange, ...],
    expert_cu: tuple[int, ...],
) -> tuple[MatrixShard, ...]:
    shards = _attention_shards(model, C, kv_map)
    shards.append(
        MatrixShard(
            name="router",
            k=model.hidden,
            n=model.experts,
            start_core=0,
            n_cores=min(C, model.experts),
            kind="router",
        )
    )
    if model.shared_expert:
        shards.append(
            MatrixShard(
                name="shared.gate_up",
                k=model.hidden,
                n=2 * model.expert_ffn_hidden,
                start_core=0,
                n_cores=C,
                row_groups=row_groups_for(2 * model.expert_ffn_hidden, C),
            )
        )
        shards.append(
            MatrixShard(
                name="shared.down",
                k=model.expert_ffn_hidden,
                n=model.hidden,
                start_core=0,
                n_cores=C,
                row_groups=row_groups_for(model.hidden, C),
            )
        )
    # Expert weights spread over every core so one routed token streams the
    # whole machine's bandwidth, not a single CU's; the round-robin CU map
    # only anchors routing bookkeeping.
    for e in range(len(expert_cu)):
        shards.append(
            MatrixShard(
                name=f"expert{e}.gate_up",
                k=model.hidden,
                n=2 * model.expert_ffn_hidden,
                start_core=0,
                n_cores=C,
                row_groups=row_groups_for(2 * model.expert_ffn_hidden, C),
                kind="expert",
            )
        )
        shards.append(
            MatrixShard(
                name=f"expert{e}.down",
                k=model.expert_ffn_hidden,
                n=model.hidden,
                start_core=0,
                n_cores=C,
                row_groups=row_groups_for(model.hidden, C),
                kind="expert",
            )
        )
    return tuple(shards)

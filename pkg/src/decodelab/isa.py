"""Instruction set for the three-pipeline accelerator core.

Each core runs three statically ordered instruction streams, one per
pipeline: memory (DMA from the DRAM channel into buffer entries), compute
(matrix and vector work consuming buffer entries), network (sends and
forwards over the ring).  Cross-pipeline ordering is data-driven: buffer
entries carry a 2-bit valid counter that producers set and consumers
decrement, so a stream stalls exactly when the data it names is not ready.

Long-running matrix instructions keep CISC-style internal loop counts
(tiles per stripe, stripes per shard) instead of being unrolled.

Serialization is a fixed 64-byte little-endian record per instruction
inside an "RPUP" container; see ``encode``/``decode``.  The byte-exact
layout is documented next to ``_RECORD`` below.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from enum import IntEnum
from typing import Iterable, Sequence

# One buffer entry (and one DMA chunk) per 2-bit valid counter.
ENTRY_BYTES = 2048
MAX_VALID_COUNT = 3  # 2-bit counter

CONTAINER_MAGIC = b"RPUP"
CONTAINER_VERSION = 1


class Variant(IntEnum):
    MEM_DMA = 0
    COMPUTE_VMM = 1
    COMPUTE_VOP = 2
    NET_SEND = 3
    NET_FORWARD = 4
    INTERRUPT = 5


class Space(IntEnum):
    """Address spaces an operand region can live in."""

    NONE = 0
    DRAM = 1  # the core's slice of its memory channel
    MEM_BUFFER = 2
    NET_BUFFER = 3
    ACCUM = 4  # accumulator register file, compute-private


class Stream(IntEnum):
    MEMORY = 0
    COMPUTE = 1
    NETWORK = 2


# Which pipeline may execute which variant.  Interrupts are markers and may
# sit in any stream.
STREAM_VARIANTS = {
    Stream.MEMORY: {Variant.MEM_DMA, Variant.INTERRUPT},
    Stream.COMPUTE: {Variant.COMPUTE_VMM, Variant.COMPUTE_VOP, Variant.INTERRUPT},
    Stream.NETWORK: {Variant.NET_SEND, Variant.NET_FORWARD, Variant.INTERRUPT},
}


@dataclass(frozen=True, slots=True)
class RegionRef:
    """An operand location: address space, owning core, byte offset."""

    space: Space = Space.NONE
    core: int = 0
    offset: int = 0

    def __post_init__(self):
        if self.core < 0 or self.offset < 0:
            raise ValueError("region core and offset must be non-negative")


NO_REGION = RegionRef()


@dataclass(frozen=True, slots=True)
class DTypeDesc:
    """Block-quantized number format: shared exponent per block."""

    format_id: int = 0
    bit_width: int = 4
    block_size: int = 32

    def __post_init__(self):
        if not 4 <= self.bit_width <= 8:
            raise ValueError(f"bit_width must be 4-8, got {self.bit_width}")
        if self.block_size < 1:
            raise ValueError("block_size must be positive")

    def bits_per_value(self) -> float:
        """Stored bits per element including the 8-bit shared exponent."""
        return self.bit_width + 8.0 / self.block_size


BF16 = DTypeDesc(format_id=1, bit_width=8, block_size=2)  # 16 b/value carrier


@dataclass(slots=True)
class Instruction:
    variant: Variant
    src: RegionRef = NO_REGION
    dst: RegionRef = NO_REGION
    length: int = 0
    rows: int = 0
    cols: int = 0
    batch: int = 1
    dtype: DTypeDesc = field(default_factory=DTypeDesc)
    valid_count: int = 0
    check_valid: bool = False
    decrement_on_read: bool = False
    loop_inner: int = 1
    loop_outer: int = 1
    tag: int = 0

    def __post_init__(self):
        if not 0 <= self.valid_count <= MAX_VALID_COUNT:
            raise ValueError(
                f"valid_count {self.valid_count} exceeds 2-bit counter range"
            )
        if self.length < 0:
            raise ValueError("length must be non-negative")
        if self.loop_inner < 1 or self.loop_outer < 1:
            raise ValueError("loop counts must be at least 1")

    @property
    def iterations(self) -> int:
        return self.loop_inner * self.loop_outer

    @property
    def chunk_count(self) -> int:
        """Buffer entries this instruction touches when chunk-streamed."""
        return max(1, -(-self.length // ENTRY_BYTES))

    def counter_writes(self) -> int:
        """How many entry counters this instruction sets, if any.

        DMA sets one counter per streamed chunk; compute and network
        instructions publish one completed output region.
        """
        if self.valid_count == 0:
            return 0
        if self.variant == Variant.MEM_DMA:
            return self.chunk_count
        return 1

    def counter_reads(self) -> int:
        """How many counter decrements this instruction performs.

        Matrix compute drains its weight region chunk by chunk; everything
        else (a DMA draining a staged vector, network sends, vector ops)
        treats the source region as one unit.
        """
        if not (self.check_valid and self.decrement_on_read):
            return 0
        if self.variant == Variant.COMPUTE_VMM:
            return self.chunk_count
        return 1


@dataclass(frozen=True, slots=True)
class BufferRegion:
    name: str
    space: Space
    offset: int
    length: int


@dataclass(slots=True)
class BufferMap:
    """Named layout of a core's SRAM spaces and DRAM slice."""

    mem_bytes: int = 512 * 1024
    net_bytes: int = 128 * 1024
    dram_bytes: int = 96 * 1024 * 1024
    granularity: int = ENTRY_BYTES
    regions: tuple[BufferRegion, ...] = ()

    def space_bytes(self, space: Space) -> int:
        return {
            Space.MEM_BUFFER: self.mem_bytes,
            Space.NET_BUFFER: self.net_bytes,
            Space.DRAM: self.dram_bytes,
        }.get(space, 0)

    def validate(self) -> list[str]:
        problems = []
        seen: dict[Space, list[BufferRegion]] = {}
        for r in self.regions:
            limit = self.space_bytes(r.space)
            if r.offset + r.length > limit:
                problems.append(
                    f"region {r.name} overruns {r.space.name} ({r.offset}+{r.length}>{limit})"
                )
            seen.setdefault(r.space, []).append(r)
        for space, rs in seen.items():
            rs = sorted(rs, key=lambda r: r.offset)
            for a, b in zip(rs, rs[1:]):
                if a.offset + a.length > b.offset:
                    problems.append(
                        f"regions {a.name} and {b.name} overlap in {space.name}"
                    )
        return problems

    def region(self, name: str) -> BufferRegion:
        for r in self.regions:
            if r.name == name:
                return r
        raise KeyError(name)


@dataclass(slots=True)
class CoreProgram:
    core_id: int
    cu_id: int
    buffers: BufferMap
    memory_stream: list[Instruction] = field(default_factory=list)
    compute_stream: list[Instruction] = field(default_factory=list)
    network_stream: list[Instruction] = field(default_factory=list)

    def stream(self, which: Stream) -> list[Instruction]:
        return (
            self.memory_stream,
            self.compute_stream,
            self.network_stream,
        )[int(which)]


@dataclass(slots=True)
class Program:
    cores: list[CoreProgram] = field(default_factory=list)

    def core(self, core_id: int) -> CoreProgram:
        for c in self.cores:
            if c.core_id == core_id:
                return c
        raise KeyError(core_id)

    def instruction_count(self) -> int:
        return sum(
            len(c.memory_stream) + len(c.compute_stream) + len(c.network_stream)
            for c in self.cores
        )


# 64-byte record, little-endian, no implicit padding:
#   u8  variant
#   u8  flags (bit0 check_valid, bit1 decrement_on_read)
#   u8  valid_count
#   u8  dtype format id
#   u8  dtype bit width
#   u16 dtype block size
#   u8  src space,  u32 src core,  u32 src offset
#   u8  dst space,  u32 dst core,  u32 dst offset
#   u64 byte length
#   u32 rows, u32 cols, u32 batch
#   u32 loop_inner, u32 loop_outer
#   u32 tag
#   7 bytes zero pad
_RECORD = struct.Struct("<BBBBBHBIIBIIQIIIIII7x")
RECORD_BYTES = _RECORD.size
assert RECORD_BYTES == 64


class DecodeError(ValueError):
    """Raised on malformed container bytes; message names the byte offset."""


def _pack_instruction(ins: Instruction) -> bytes:
    flags = (1 if ins.check_valid else 0) | (2 if ins.decrement_on_read else 0)
    return _RECORD.pack(
        int(ins.variant),
        flags,
        ins.valid_count,
        ins.dtype.format_id,
        ins.dtype.bit_width,
        ins.dtype.block_size,
        int(ins.src.space),
        ins.src.core,
        ins.src.offset,
        int(ins.dst.space),
        ins.dst.core,
        ins.dst.offset,
        ins.length,
        ins.rows,
        ins.cols,
        ins.batch,
        ins.loop_inner,
        ins.loop_outer,
        ins.tag,
    )


def _unpack_instruction(buf: bytes, offset: int) -> Instruction:
    try:
        f = _RECORD.unpack_from(buf, offset)
    except struct.error as e:
        raise DecodeError(f"truncated instruction record at offset {offset}: {e}")
    try:
        variant = Variant(f[0])
    except ValueError:
        raise DecodeError(f"unknown instruction variant {f[0]} at offset {offset}")
    try:
        src_space, dst_space = Space(f[6]), Space(f[9])
    except ValueError:
        raise DecodeError(f"unknown address space at offset {offset}")
    return Instruction(
        variant=variant,
        check_valid=bool(f[1] & 1),
        decrement_on_read=bool(f[1] & 2),
        valid_count=f[2],
        dtype=DTypeDesc(format_id=f[3], bit_width=f[4], block_size=f[5]),
        src=RegionRef(src_space, f[7], f[8]),
        dst=RegionRef(dst_space, f[10], f[11]),
        length=f[12],
        rows=f[13],
        cols=f[14],
        batch=f[15],
        loop_inner=f[16],
        loop_outer=f[17],
        tag=f[18],
    )


def encode(program: Program) -> bytes:
    """Serialize to the RPUP container format."""
    out = bytearray()
    out += CONTAINER_MAGIC
    out += struct.pack("<HI", CONTAINER_VERSION, len(program.cores))
    for cp in program.cores:
        out += struct.pack("<II", cp.core_id, cp.cu_id)
        bm = cp.buffers
        out += struct.pack(
            "<IIIII",
            bm.mem_bytes,
            bm.net_bytes,
            bm.dram_bytes,
            bm.granularity,
            len(bm.regions),
        )
        for r in bm.regions:
            name = r.name.encode("utf-8")
            out += struct.pack("<H", len(name))
            out += name
            out += struct.pack("<BII", int(r.space), r.offset, r.length)
        for stream in (cp.memory_stream, cp.compute_stream, cp.network_stream):
            out += struct.pack("<I", len(stream))
            for ins in stream:
                out += _pack_instruction(ins)
    return bytes(out)


def decode(data: bytes) -> Program:
    """Parse an RPUP container; errors name the offending byte offset."""
    if data[:4] != CONTAINER_MAGIC:
        raise DecodeError(f"bad magic at offset 0: {data[:4]!r}")
    pos = 4
    try:
        version, n_cores = struct.unpack_from("<HI", data, pos)
    except struct.error:
        raise DecodeError(f"truncated header at offset {pos}")
    if version != CONTAINER_VERSION:
        raise DecodeError(f"unsupported container version {version} at offset {pos}")
    pos += 6
    cores = []
    for _ in range(n_cores):
        try:
            core_id, cu_id = struct.unpack_from("<II", data, pos)
            pos += 8
            mem_b, net_b, dram_b, gran, n_regions = struct.unpack_from(
                "<IIIII", data, pos
            )
            pos += 20
        except struct.error:
            raise DecodeError(f"truncated core header at offset {pos}")
        regions = []
        for _ in range(n_regions):
            try:
                (name_len,) = struct.unpack_from("<H", data, pos)
                pos += 2
                name = data[pos : pos + name_len].decode("utf-8")
                pos += name_len
                space, offset, length = struct.unpack_from("<BII", data, pos)
                pos += 9
            except (struct.error, UnicodeDecodeError):
                raise DecodeError(f"truncated region table at offset {pos}")
            regions.append(BufferRegion(name, Space(space), offset, length))
        bm = BufferMap(
            mem_bytes=mem_b,
            net_bytes=net_b,
            dram_bytes=dram_b,
            granularity=gran,
            regions=tuple(regions),
        )
        streams: list[list[Instruction]] = []
        for _ in range(3):
            try:
                (count,) = struct.unpack_from("<I", data, pos)
            except struct.error:
                raise DecodeError(f"truncated stream header at offset {pos}")
            pos += 4
            instrs = []
            for _ in range(count):
                instrs.append(_unpack_instruction(data, pos))
                pos += RECORD_BYTES
            streams.append(instrs)
        cores.append(
            CoreProgram(
                core_id=core_id,
                cu_id=cu_id,
                buffers=bm,
                memory_stream=streams[0],
                compute_stream=streams[1],
                network_stream=streams[2],
            )
        )
    if pos != len(data):
        raise DecodeError(f"{len(data) - pos} trailing bytes at offset {pos}")
    return Program(cores=cores)


@dataclass
class ValidationReport:
    ok: bool
    problems: list[str] = field(default_factory=list)

    def __bool__(self) -> bool:
        return self.ok


def _operand_regions(ins: Instruction) -> Iterable[tuple[str, RegionRef]]:
    if ins.src.space != Space.NONE:
        yield "src", ins.src
    if ins.dst.space != Space.NONE:
        yield "dst", ins.dst


def validate_program(program: Program) -> ValidationReport:
    """Static checks: bounds, counter balance, stream/variant pairing.

    Counter balance is per named region of its owning core: the total
    valid-count grants written into a region (locally or by a remote send)
    must equal the total decrements consumers take from it.  DMA grants one
    counter write per streamed chunk; compute and network producers publish
    once.  Matrix compute decrements its weight region once per chunk; all
    other readers decrement once.  A check_valid read of a region nothing
    produces is flagged; it would stall forever.
    """
    problems: list[str] = []
    by_id = {cp.core_id: cp for cp in program.cores}
    # balance keys are (owner core, space, region base)
    produced: dict[tuple, int] = {}
    consumed: dict[tuple, int] = {}
    checked: dict[tuple, Variant] = {}
    for cp in program.cores:
        problems += [f"core {cp.core_id}: {p}" for p in cp.buffers.validate()]
        for stream_id in Stream:
            for idx, ins in enumerate(cp.stream(stream_id)):
                if ins.variant not in STREAM_VARIANTS[stream_id]:
                    problems.append(
                        f"core {cp.core_id}: {ins.variant.name} not executable "
                        f"on {stream_id.name} pipeline (instr {idx})"
                    )
                for role, ref in _operand_regions(ins):
                    if ref.space not in (Space.MEM_BUFFER, Space.NET_BUFFER, Space.DRAM):
                        continue
                    owner = by_id.get(ref.core)
                    if owner is None:
                        problems.append(
                            f"core {cp.core_id}: {ins.variant.name} {role} "
                            f"references unknown core {ref.core}"
                        )
                        continue
                    limit = owner.buffers.space_bytes(ref.space)
                    # Network payloads stage through the buffer entry-wise,
                    # so only one entry of footprint is pinned at a time.
                    footprint = ins.length
                    if ins.variant in (Variant.NET_SEND, Variant.NET_FORWARD):
                        footprint = min(footprint, ENTRY_BYTES)
                    if ref.offset + max(footprint, 1) > limit:
                        problems.append(
                            f"core {cp.core_id}: {ins.variant.name} {role} "
                            f"overruns {ref.space.name} "
                            f"({ref.offset}+{footprint}>{limit})"
                        )
                if ins.valid_count > 0 and ins.dst.space in (
                    Space.MEM_BUFFER,
                    Space.NET_BUFFER,
                ):
                    owner = by_id.get(ins.dst.core)
                    if owner is not None:
                        key = _region_key(owner, ins.dst)
                        grants = ins.valid_count * ins.counter_writes()
                        produced[key] = produced.get(key, 0) + grants
                if ins.check_valid and ins.src.space in (
                    Space.MEM_BUFFER,
                    Space.NET_BUFFER,
                ):
                    owner = by_id.get(ins.src.core)
                    if owner is not None:
                        key = _region_key(owner, ins.src)
                        checked[key] = ins.variant
                        if ins.decrement_on_read:
                            reads = ins.counter_reads()
                            consumed[key] = consumed.get(key, 0) + reads
    for key, variant in checked.items():
        if produced.get(key, 0) == 0:
            problems.append(
                f"core {key[0]}: check_valid read of unproduced region "
                f"{Space(key[1]).name}+{key[2]} ({variant.name})"
            )
    for key in set(produced) | set(consumed):
        p, c = produced.get(key, 0), consumed.get(key, 0)
        if p != c:
            problems.append(
                f"core {key[0]}: counter imbalance on "
                f"{Space(key[1]).name}+{key[2]}: {p} grants vs {c} decrements"
            )
    return ValidationReport(ok=not problems, problems=problems)


def _region_key(owner: CoreProgram, ref: RegionRef) -> tuple:
    """Collapse an operand to (owner, space, region base).

    Balance accounting works at region granularity; offsets inside a
    declared region all account to that region.
    """
    base = ref.offset
    for r in owner.buffers.regions:
        if r.space == ref.space and r.offset <= ref.offset < r.offset + max(r.length, 1):
            base = r.offset
            break
    return (owner.core_id, int(ref.space), base)


def disassemble(program: Program) -> str:
    """Human-readable dump of all streams, one line per instruction."""
    lines = []
    for cp in program.cores:
        lines.append(f"core {cp.core_id} (cu {cp.cu_id})")
        for r in cp.buffers.regions:
            lines.append(
                f"  .region {r.name} {r.space.name} off={r.offset} len={r.length}"
            )
        for stream_id in Stream:
            lines.append(f"  .{stream_id.name.lower()}")
            for ins in cp.stream(stream_id):
                flags = []
                if ins.valid_count:
                    flags.append(f"vc={ins.valid_count}")
                if ins.check_valid:
                    flags.append("chk")
                if ins.decrement_on_read:
                    flags.append("dec")
                loop = (
                    f" loops={ins.loop_inner}x{ins.loop_outer}"
                    if ins.iterations > 1
                    else ""
                )
                lines.append(
                    f"    {ins.variant.name:12s} "
                    f"{ins.src.space.name}[{ins.src.core}]+{ins.src.offset} -> "
                    f"{ins.dst.space.name}[{ins.dst.core}]+{ins.dst.offset} "
                    f"len={ins.length} dims={ins.rows}x{ins.cols}x{ins.batch}"
                    f"{loop} {' '.join(flags)} tag={ins.tag}"
                )
    return "\n".join(lines) + "\n"

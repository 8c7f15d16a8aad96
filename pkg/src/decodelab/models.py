"""Declarative transformer model descriptions and footprint math.

Model architecture parameters come from structured key-value files (see
``data/models/``) rather than framework traces; the shipped set covers the
public Llama 3 dense family and the Llama 4 mixture-of-experts pair.

All byte math lives here: quantized weight footprint (block formats carry
an 8-bit shared exponent per block), KV cache growth, per-step streamed
bytes and multiply-accumulates.  These closed forms are what roofline
checks and capacity planning run on; the simulator derives its own timing
from lowered programs and is cross-checked against them.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .isa import DTypeDesc

KV_BITS_DEFAULT = 16
ACTIVATION_BITS_DEFAULT = 16


@dataclass(frozen=True)
class ModelSpec:
    name: str
    layers: int
    hidden: int
    q_heads: int
    kv_heads: int
    head_dim: int
    ffn_hidden: int
    vocab: int
    # mixture-of-experts: 0 experts means dense
    experts: int = 0
    experts_per_token: int = 0
    expert_ffn_hidden: int = 0
    shared_expert: bool = False
    moe_period: int = 1
    # number formats
    weight_bits: int = 4
    weight_block: int = 32
    activation_bits: int = ACTIVATION_BITS_DEFAULT
    kv_bits: int = KV_BITS_DEFAULT

    def validate(self) -> None:
        if self.hidden != self.q_heads * self.head_dim:
            raise ValueError(
                f"{self.name}: hidden {self.hidden} != q_heads*head_dim "
                f"{self.q_heads * self.head_dim}"
            )
        if self.q_heads % self.kv_heads != 0:
            raise ValueError(f"{self.name}: kv_heads must divide q_heads")
        for fname in ("layers", "hidden", "q_heads", "kv_heads", "head_dim", "vocab"):
            if getattr(self, fname) < 1:
                raise ValueError(f"{self.name}: {fname} must be at least 1")
        if self.experts:
            if self.experts_per_token < 1:
                raise ValueError(f"{self.name}: experts_per_token must be >= 1")
            if self.expert_ffn_hidden < 1:
                raise ValueError(f"{self.name}: expert_ffn_hidden must be >= 1")
            if self.moe_period < 1:
                raise ValueError(f"{self.name}: moe_period must be >= 1")

    # ---- structure ----

    @property
    def kv_dim(self) -> int:
        return self.kv_heads * self.head_dim

    @property
    def gqa_group(self) -> int:
        return self.q_heads // self.kv_heads

    def is_moe_layer(self, layer: int) -> bool:
        return self.experts > 0 and layer % self.moe_period == 0

    @property
    def n_moe_layers(self) -> int:
        return sum(1 for i in range(self.layers) if self.is_moe_layer(i))

    def weight_dtype(self) -> DTypeDesc:
        return DTypeDesc(format_id=0, bit_width=self.weight_bits, block_size=self.weight_block)

    @property
    def bits_per_weight(self) -> float:
        return self.weight_dtype().bits_per_value()

    # ---- parameter counts ----

    @property
    def attn_params_per_layer(self) -> int:
        # wQ, wO full-width; wK, wV at the kv head width
        return 2 * self.hidden * self.hidden + 2 * self.hidden * self.kv_dim

    @property
    def dense_mlp_params(self) -> int:
        return 3 * self.hidden * self.ffn_hidden

    @property
    def expert_params(self) -> int:
        return 3 * self.hidden * self.expert_ffn_hidden

    def moe_mlp_params(self, active_only: bool) -> int:
        router = self.hidden * self.experts
        n = self.experts_per_token if active_only else self.experts
        total = n * self.expert_params + router
        if self.shared_expert:
            total += self.expert_params
        return total

    def mlp_params_per_layer(self, layer: int, active_only: bool = False) -> int:
        if self.is_moe_layer(layer):
            return self.moe_mlp_params(active_only)
        return self.dense_mlp_params

    @property
    def embedding_params(self) -> int:
        return self.vocab * self.hidden

    def param_count(self, active_only: bool = False) -> int:
        per_layer_norms = 2 * self.hidden
        total = 0
        for i in range(self.layers):
            total += self.attn_params_per_layer
            total += self.mlp_params_per_layer(i, active_only)
            total += per_layer_norms
        total += self.hidden  # final norm
        total += 2 * self.embedding_params  # input table + output projection
        return total

    def matmul_params_per_step(self) -> int:
        """Weights actually streamed each decode step (per token).

        The input embedding is a single-row lookup, not a streamed matrix;
        everything else that multiplies activations counts, with only the
        routed experts a token actually visits.
        """
        return self.param_count(active_only=True) - self.embedding_params

    # ---- bytes and work per step ----

    def weight_footprint_bytes(self) -> int:
        return int(self.param_count() * self.bits_per_weight / 8)

    def kv_cache_bytes(self, seq: int, batch: int) -> int:
        if seq < 0 or batch < 0:
            raise ValueError("seq and batch must be non-negative")
        return 2 * self.layers * self.kv_dim * seq * batch * self.kv_bits // 8

    def footprint_bytes(self, batch: int, seq: int) -> "Footprint":
        w = self.weight_footprint_bytes()
        kv = self.kv_cache_bytes(seq, batch)
        return Footprint(weights=w, kv=kv, total=w + kv)

    def decode_bytes_per_step(self, batch: int, seq: int) -> int:
        """DRAM bytes one decode step reads: streamed weights plus KV.

        Weights stream once regardless of batch; the KV cache is read in
        full for every sequence in the batch.
        """
        weight_bytes = int(self.matmul_params_per_step() * self.bits_per_weight / 8)
        return weight_bytes + self.kv_cache_bytes(seq, batch)

    def decode_macs_per_step(self, batch: int, seq: int) -> int:
        """Multiply-accumulates per decode step at the given batch."""
        mat = self.matmul_params_per_step() * batch
        attn = 2 * self.hidden * seq * batch * self.layers  # QK then AV
        return mat + attn

    def arithmetic_intensity(self, batch: int, seq: int) -> float:
        return (
            2.0
            * self.decode_macs_per_step(batch, seq)
            / self.decode_bytes_per_step(batch, seq)
        )


@dataclass(frozen=True)
class Footprint:
    weights: int
    kv: int
    total: int


def _data_dir() -> Path:
    return Path(str(resources.files("decodelab"))) / "data" / "models"


def available_models() -> list[str]:
    return sorted(p.stem for p in _data_dir().glob("*.cfg"))


def load_model(name_or_path: str) -> ModelSpec:
    """Load a model spec by shipped name or explicit file path."""
    path = Path(name_or_path)
    if not path.suffix:
        path = _data_dir() / f"{name_or_path}.cfg"
    if not path.exists():
        known = ", ".join(available_models())
        raise FileNotFoundError(f"no model spec {name_or_path!r} (shipped: {known})")
    return parse_model_file(path)


def parse_model_file(path: Path) -> ModelSpec:
    cp = configparser.ConfigParser()
    cp.read(path)
    m = cp["model"]
    kwargs = dict(
        name=m.get("name", path.stem),
        layers=m.getint("layers"),
        hidden=m.getint("hidden"),
        q_heads=m.getint("q_heads"),
        kv_heads=m.getint("kv_heads"),
        head_dim=m.getint("head_dim"),
        ffn_hidden=m.getint("ffn_hidden"),
        vocab=m.getint("vocab"),
    )
    if cp.has_section("moe"):
        moe = cp["moe"]
        kwargs.update(
            experts=moe.getint("experts"),
            experts_per_token=moe.getint("experts_per_token", 1),
            expert_ffn_hidden=moe.getint("expert_ffn_hidden"),
            shared_expert=moe.getboolean("shared_expert", False),
            moe_period=moe.getint("period", 1),
        )
    if cp.has_section("format"):
        fmt = cp["format"]
        kwargs.update(
            weight_bits=fmt.getint("weight_bits", 4),
            weight_block=fmt.getint("weight_block", 32),
            activation_bits=fmt.getint("activation_bits", ACTIVATION_BITS_DEFAULT),
            kv_bits=fmt.getint("kv_bits", KV_BITS_DEFAULT),
        )
    spec = ModelSpec(**kwargs)
    spec.validate()
    return spec


def dequant_overhead_bits(bit_width: int, block_size: int) -> float:
    """Stored bits per weight for a block format with an 8-bit exponent."""
    return DTypeDesc(bit_width=bit_width, block_size=block_size).bits_per_value()

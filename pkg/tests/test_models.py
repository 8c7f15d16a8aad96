"""Model spec tests: parameter counts, footprints, per-step byte math."""

from dataclasses import replace

import pytest
from hypothesis import given
from hypothesis import strategies as st

from decodelab import models


L8 = models.load_model("llama3-8b")
L70 = models.load_model("llama3-70b")
L405 = models.load_model("llama3-405b")
SCOUT = models.load_model("llama4-scout")
MAV = models.load_model("llama4-maverick")


def test_shipped_set():
    assert models.available_models() == [
        "llama3-405b",
        "llama3-70b",
        "llama3-8b",
        "llama4-maverick",
        "llama4-scout",
    ]


@pytest.mark.parametrize(
    "spec,total",
    [
        (L8, 8_030_261_248),
        (L70, 70_553_706_496),
        (L405, 405_853_388_800),
        (SCOUT, 107_769_861_120),
        (MAV, 400_711_848_960),
    ],
)
def test_total_parameter_counts(spec, total):
    # attention + feed-forward + norms + embedding table + output projection
    assert spec.param_count() == total


def test_dense_active_equals_total():
    assert L70.param_count(active_only=True) == L70.param_count()


def test_maverick_active_params():
    # shared + 1 routed expert per MoE layer, dense FFN between
    active = MAV.param_count(active_only=True)
    assert active == pytest.approx(17.2e9, rel=0.01)
    assert active < MAV.param_count() / 20


def test_maverick_layer_alternation():
    flags = [MAV.is_moe_layer(i) for i in range(MAV.layers)]
    assert sum(flags) == 24
    assert flags[0] != flags[1]


def test_scout_all_layers_moe():
    assert SCOUT.n_moe_layers == SCOUT.layers


def test_maverick_fused_gate_up_size():
    # the dense layers' gate and up matrices fuse to 5120 x 32768
    assert 2 * MAV.hidden * MAV.ffn_hidden == 167_772_160


def test_bits_per_weight():
    assert L8.bits_per_weight == 4.25
    assert models.dequant_overhead_bits(4, 32) == 4.25
    assert models.dequant_overhead_bits(8, 32) == 8.25
    assert models.dequant_overhead_bits(4, 1) == 12.0


def test_kv_cache_formula():
    # 2 tensors * layers * kv width * seq * batch * 2 bytes
    assert L8.kv_cache_bytes(seq=16384, batch=1) == 2 * 32 * 1024 * 16384 * 2
    assert L8.kv_cache_bytes(seq=0, batch=4) == 0


def test_405b_footprint_exceeds_64cu_small_sku():
    fp = L405.footprint_bytes(batch=1, seq=8192)
    assert fp.weights == pytest.approx(215.6e9, rel=0.005)
    # 1024 cores at 192 MiB leaves a deficit
    budget = 1024 * 192 * 2**20
    assert fp.total > budget


def test_8b_step_bytes():
    # weights minus the embedding lookup, quantized, plus full KV read
    b1 = L8.decode_bytes_per_step(batch=1, seq=16384)
    assert b1 == pytest.approx(6.134e9, rel=0.001)
    b32 = L8.decode_bytes_per_step(batch=32, seq=8192)
    assert b32 == pytest.approx(38.35e9, rel=0.001)


def test_step_macs_scale_with_batch():
    one = L8.decode_macs_per_step(batch=1, seq=1024)
    four = L8.decode_macs_per_step(batch=4, seq=1024)
    assert four == 4 * one


def test_arithmetic_intensity_rises_with_batch():
    low = L70.arithmetic_intensity(batch=1, seq=4096)
    high = L70.arithmetic_intensity(batch=16, seq=4096)
    assert low == pytest.approx(2.0 * 8 / 4.25, rel=0.05)
    assert high > low


def test_validate_rejects_head_mismatch():
    bad = replace(L8, hidden=4000)
    with pytest.raises(ValueError, match="hidden"):
        bad.validate()


def test_validate_rejects_kv_head_split():
    bad = replace(L8, kv_heads=7)
    with pytest.raises(ValueError, match="kv_heads"):
        bad.validate()


def test_load_unknown_name():
    with pytest.raises(FileNotFoundError, match="shipped"):
        models.load_model("llama9-1t")


def test_load_by_path(tmp_path):
    p = tmp_path / "tiny.cfg"
    p.write_text(
        "[model]\nname=tiny\nlayers=2\nhidden=256\nq_heads=4\nkv_heads=2\n"
        "head_dim=64\nffn_hidden=512\nvocab=1000\n"
    )
    spec = models.load_model(str(p))
    assert spec.name == "tiny"
    assert spec.param_count() > 0


@given(st.integers(0, 8192), st.integers(1, 64))
def test_kv_monotone(seq, batch):
    assert L8.kv_cache_bytes(seq, batch) <= L8.kv_cache_bytes(seq + 1, batch)
    assert L8.kv_cache_bytes(seq, batch) <= L8.kv_cache_bytes(seq, batch + 1)


@given(st.integers(1, 64), st.integers(1, 32768))
def test_step_bytes_dominated_by_weights_plus_kv(batch, seq):
    total = L8.decode_bytes_per_step(batch, seq)
    weights = int(L8.matmul_params_per_step() * L8.bits_per_weight / 8)
    assert total == weights + L8.kv_cache_bytes(seq, batch)

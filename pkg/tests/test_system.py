"""System-architecture tests: balance point, roofline, power provisioning."""

import math
from dataclasses import replace

import pytest
from hypothesis import given
from hypothesis import strategies as st

from decodelab import system as sy


CFG = sy.SystemConfig()


def test_default_config_validates():
    CFG.validate()


def test_core_balance_point():
    # 4 TMACs * 64 MACs * 2 ops * 2 GHz over a 32 GB/s pseudo-channel
    assert CFG.core.mac_ops_per_s == 1.024e12
    assert CFG.core.ops_per_byte == 32.0


def test_core_bytes_per_cycle():
    assert CFG.core.bytes_per_cycle == 16.0


def test_cu_aggregates():
    assert CFG.cu_mem_bandwidth_bytes_per_s == 512.0e9
    assert CFG.cu_mac_ops_per_s == 16.384e12
    assert CFG.cu.cores_per_device == 8


def test_total_bandwidth_scales_with_cus():
    assert sy.scaled(CFG, 428).total_mem_bandwidth_bytes_per_s == 428 * 512.0e9


def test_roofline_memory_bound():
    # 1 GB over 64 CUs * 512 GB/s
    t = sy.roofline_time_s(CFG, 1.0e9, 0.0)
    assert t == pytest.approx(1.0e9 / (64 * 512.0e9), rel=1e-12)


def test_roofline_compute_bound():
    big_ops = 1.0e18
    t = sy.roofline_time_s(CFG, 1.0, big_ops)
    assert t == pytest.approx(big_ops / (64 * 16.384e12), rel=1e-12)


def test_roofline_takes_max():
    bytes_read = 1.0e12
    ops = bytes_read * CFG.core.ops_per_byte
    t = sy.roofline_time_s(CFG, bytes_read, ops)
    # exactly at the balance point both bounds agree
    assert t == pytest.approx(bytes_read / CFG.total_mem_bandwidth_bytes_per_s)


def test_power_components_at_streaming_profile():
    p = CFG.power
    comp = sy.power_components_w(CFG, p.profile_mem, p.profile_compute, p.profile_net)
    assert comp["device"] == pytest.approx(5.98016, rel=1e-9)
    assert comp["datapath"] == pytest.approx(0.8704, rel=1e-9)
    assert comp["compute"] == pytest.approx(1.47456, rel=1e-9)
    assert comp["network"] == pytest.approx(0.24576, rel=1e-9)
    assert comp["idle"] == 0.5


def test_memory_component_of_streaming_power():
    p = CFG.power
    comp = sy.power_components_w(CFG, p.profile_mem, p.profile_compute, p.profile_net)
    assert comp["device"] + comp["datapath"] == pytest.approx(6.7, rel=0.05)


def test_compute_power_range():
    idle_comp = sy.power_components_w(CFG, 1.0, 0.3, 0.1)["compute"]
    full_comp = sy.power_components_w(CFG, 1.0, 1.0, 0.1)["compute"]
    assert idle_comp == pytest.approx(1.5, rel=0.05)
    assert full_comp == pytest.approx(5.0, rel=0.05)


def test_peak_streaming_power():
    assert sy.peak_streaming_power_w(CFG) == pytest.approx(9.07088, rel=1e-9)


def test_iso_tdp_counts():
    assert sy.iso_tdp_cus(CFG, 2800.0) == 308
    assert sy.iso_tdp_cus(CFG, 1400.0) == 154


def test_memory_interface_share_band():
    share = sy.memory_interface_share(CFG)
    assert 0.70 <= share <= 0.80


def test_ring_distance_wraps():
    cfg = sy.scaled(CFG, 8)
    assert cfg.ring_distance(0, 1) == 1
    assert cfg.ring_distance(0, 7) == 1
    assert cfg.ring_distance(0, 4) == 4
    assert cfg.ring_distance(3, 3) == 0


def test_package_grouping_and_link_energy():
    cfg = sy.scaled(CFG, 8)
    assert cfg.package_of(0) == 0
    assert cfg.package_of(3) == 0
    assert cfg.package_of(4) == 1
    # hop 2->3 stays inside package 0, hop 3->4 crosses
    assert cfg.link_pj_per_bit(2) == cfg.link.intra_package_pj_per_bit
    assert cfg.link_pj_per_bit(3) == cfg.link.inter_package_pj_per_bit


def test_validate_rejects_bad_core_split():
    cfg = replace(CFG, cu=replace(CFG.cu, cores_per_cu=10, devices_per_cu=4))
    with pytest.raises(ValueError):
        cfg.validate()


def test_validate_rejects_bad_profile():
    cfg = replace(CFG, power=replace(CFG.power, profile_compute=1.5))
    with pytest.raises(ValueError):
        cfg.validate()


def test_validate_rejects_nonpositive():
    cfg = replace(CFG, core=replace(CFG.core, tmacs=0))
    with pytest.raises(ValueError):
        cfg.validate()


def test_decoder_keeps_up_with_stream():
    # dequant at 64 weights/cycle of 4.25 bit each is 34 B/cycle, twice the
    # 16 B/cycle the pseudo-channel can feed
    c = CFG.core
    decode_bytes_per_cycle = c.decoder_weights_per_cycle * 4.25 / 8
    assert decode_bytes_per_cycle > c.bytes_per_cycle


@given(st.integers(1, 2048), st.integers(1, 32))
def test_ring_distance_symmetric_and_bounded(n, seed):
    cfg = sy.scaled(CFG, n)
    a = seed % n
    b = (seed * 7) % n
    d = cfg.ring_distance(a, b)
    assert d == cfg.ring_distance(b, a)
    assert 0 <= d <= n // 2


@given(
    st.floats(0.0, 1.0),
    st.floats(0.0, 1.0),
    st.floats(0.0, 1.0),
)
def test_power_monotone_in_activity(m, c, n):
    base = sy.power_components_w(CFG, m, c, n)
    bumped = sy.power_components_w(CFG, min(1.0, m + 0.1), c, n)
    assert sum(bumped.values()) >= sum(base.values())
    assert all(v >= 0 for v in base.values())


@given(st.integers(1, 4096))
def test_iso_tdp_monotone(n_w):
    a = sy.iso_tdp_cus(CFG, float(n_w))
    b = sy.iso_tdp_cus(CFG, float(n_w) + 10.0)
    assert b >= a

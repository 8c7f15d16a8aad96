"""Device-model tests against hand-computed expected values."""

import math
from dataclasses import replace

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from decodelab import memstack as ms
from decodelab.units import GIB, MIB


REF = ms.hbm3e_reference()
CAND = ms.capacity_optimized_candidate()


def test_reference_capacity_exact():
    # 4 ranks * 4 layers * 4 channels * 2 pch * 4 groups * 4 banks * 24
    # subarrays = 49152 subarrays of 1 MiB
    assert REF.capacity_bytes() == 48 * GIB


def test_reference_bandwidth_exact():
    # 32 wired pseudo-channels * 32 bit * 10 Gtransfers/s / 8
    assert REF.bandwidth_bytes_per_s() == 1280 * GIB


def test_reference_bwcap():
    assert REF.bwcap_per_s() == pytest.approx(1280 / 48, rel=1e-12)


def test_reference_energy_total():
    assert ms.energy_pj_per_bit(REF, ms.EnergyParams()) == pytest.approx(3.44, abs=1e-9)


def test_reference_energy_components():
    comp = ms.energy_components_pj_per_bit(REF, ms.EnergyParams())
    assert comp["activation"] == pytest.approx(0.18)
    assert comp["io"] == pytest.approx(0.25)
    # mean of 1..4 via segments = 2.5 layers at 0.148 pJ
    assert comp["tsv"] == pytest.approx(0.37)
    assert comp["wire"] == pytest.approx(2.64, abs=1e-9)
    assert all(v > 0 for v in comp.values())


def test_calibration_reproduces_default():
    cal = ms.EnergyParams.calibrated(REF, target_pj_per_bit=3.44)
    assert cal.wire_mm_per_sqrt_gib == pytest.approx(
        ms.EnergyParams().wire_mm_per_sqrt_gib, rel=1e-14
    )


def test_candidate_capacity_and_bandwidth():
    # 4 layers * 2 pch * 4 groups * 24 subarrays = 768 MiB
    assert CAND.capacity_bytes() == 768 * MIB
    assert CAND.bandwidth_bytes_per_s() == 256 * GIB


def test_candidate_bwcap():
    # 256 GiB/s over 0.75 GiB: the whole device streams 341.3 times a second
    assert CAND.bwcap_per_s() == pytest.approx(1024 / 3, rel=1e-12)


def test_candidate_ideal_stream_latency():
    t = CAND.ideal_stream_latency_s()
    assert t == pytest.approx(3 / 1024, rel=1e-12)
    assert t == pytest.approx(2.93e-3, abs=0.01e-3)


def test_candidate_wire_and_energy():
    e = ms.EnergyParams()
    # per-die 192 MiB = 3/16 GiB, wire k*sqrt(3)/4 = 3.3 mm
    assert ms.wire_length_mm(CAND, e) == pytest.approx(3.3, abs=1e-9)
    assert ms.energy_pj_per_bit(CAND, e) == pytest.approx(1.46, abs=1e-9)


def test_energy_ratio_reference_over_candidate():
    e = ms.EnergyParams()
    ratio = ms.energy_pj_per_bit(REF, e) / ms.energy_pj_per_bit(CAND, e)
    assert ratio == pytest.approx(3.44 / 1.46, rel=1e-12)
    assert ratio > 2.3


def test_candidate_module_cost():
    c = ms.CostParams()
    cost = ms.module_cost(CAND, REF, c)
    # 5 dies at (0.0359 + 0.9641/16) of a reference die, over 17 reference dies
    assert cost == pytest.approx(0.02828125, rel=1e-12)
    assert 1 / cost == pytest.approx(35.36, abs=0.01)


def test_candidate_cost_per_gb():
    c = ms.CostParams()
    assert ms.cost_per_gb_ratio(CAND, REF, c) == pytest.approx(1.81, rel=1e-12)


def test_candidate_bandwidth_per_cost():
    c = ms.CostParams()
    # (256/1280) relative bandwidth over 1/35.36 relative cost
    assert ms.bandwidth_per_cost(CAND, REF, c) == pytest.approx(7.0718, abs=1e-3)


def test_cost_fit_reproduces_default():
    fit = ms.CostParams.fitted(REF, CAND, cost_per_gb_ratio_target=1.81)
    assert fit.fixed_die_fraction == pytest.approx(0.0359, rel=1e-12)


def test_reference_module_cost_is_unity():
    assert ms.module_cost(REF, REF, ms.CostParams()) == pytest.approx(1.0)


def test_bandwidth_matched_comparator():
    comp = ms.hbm3e_bandwidth_matched()
    assert comp.capacity_bytes() == 9856 * MIB
    assert comp.bandwidth_bytes_per_s() == 256 * GIB
    e = ms.energy_pj_per_bit(comp, ms.EnergyParams())
    assert e == pytest.approx(3.1644, abs=1e-3)


def test_grid_shape():
    grid = ms.DesignGrid()
    assert grid.size() == 135


def test_enumerate_skips_unbuildable_subarray_splits():
    pts = ms.enumerate_design_space()
    # divisor 16 does not divide 24, dropping 27 of 135 grid points
    assert len(pts) == 108


def test_enumerate_contains_candidate_geometry():
    pts = ms.enumerate_design_space()
    assert any(p.geometry == CAND for p in pts)


def test_enumerate_all_points_buildable():
    for p in ms.enumerate_design_space():
        p.geometry.validate()


def test_bandwidth_classes():
    pts = ms.enumerate_design_space()
    bws = sorted({p.bandwidth_bytes_per_s for p in pts})
    assert bws == [256 * GIB, 512 * GIB, 1024 * GIB]


def test_pareto_same_bandwidth_no_domination():
    pts = ms.enumerate_design_space()
    front = [p for p in pts if p.pareto]
    assert front
    for p in front:
        for q in pts:
            if q.bandwidth_bytes_per_s != p.bandwidth_bytes_per_s:
                continue
            strictly_better = (
                q.pj_per_bit <= p.pj_per_bit
                and q.capacity_bytes >= p.capacity_bytes
                and (q.pj_per_bit < p.pj_per_bit or q.capacity_bytes > p.capacity_bytes)
            )
            assert not strictly_better


def test_pareto_flagging_idempotent():
    pts = ms.enumerate_design_space()
    once = [p.pareto for p in pts]
    ms.flag_pareto(pts)
    assert [p.pareto for p in pts] == once


def test_pareto_frontier_sorted_by_capacity():
    front = ms.pareto_frontier(ms.enumerate_design_space())
    caps = [p.capacity_bytes for p in front]
    assert caps == sorted(caps)


def test_frontier_prefers_many_small_dies():
    # same capacity and bandwidth, fewer ranks means bigger dies, longer
    # wire, more energy; the tall-stack variant must win
    pts = ms.enumerate_design_space()
    tall = next(
        p
        for p in pts
        if p.geometry.ranks == 4
        and p.geometry.banks_per_bank_group == 1
        and p.geometry.subarrays_per_bank == 6
        and p.geometry.channels_per_layer == 1
    )
    flat = next(p for p in pts if p.geometry == CAND)
    assert tall.capacity_bytes == flat.capacity_bytes
    assert tall.pj_per_bit < flat.pj_per_bit
    assert tall.pareto
    assert not flat.pareto


def test_validate_rejects_too_few_bank_groups():
    g = replace(CAND, bank_groups_per_pch=2)
    with pytest.raises(ValueError):
        g.validate()


def test_validate_rejects_nonpositive_fields():
    g = replace(CAND, ranks=0)
    with pytest.raises(ValueError):
        g.validate()


def test_dse_csv_round_trip(tmp_path):
    import csv as csvmod

    pts = ms.enumerate_design_space()
    path = tmp_path / "dse.csv"
    ms.write_dse_csv(pts, str(path))
    lines = path.read_text().splitlines()
    comments = [l for l in lines if l.startswith("#")]
    assert any("config_digest=" in l for l in comments)
    rows = list(csvmod.reader(l for l in lines if not l.startswith("#")))
    header, data = rows[0], rows[1:]
    assert len(data) == len(pts)
    assert header[: len(ms.GEOMETRY_FIELDS)] == ms.GEOMETRY_FIELDS
    k = header.index("capacity_bytes")
    assert int(data[0][k]) == pts[0].capacity_bytes
    flags = [int(r[header.index("pareto_flag")]) for r in data]
    assert sum(flags) == sum(p.pareto for p in pts)


geometry_strategy = st.builds(
    ms.StackGeometry,
    ranks=st.integers(1, 8),
    layers_per_rank=st.integers(1, 16),
    channels_per_layer=st.integers(1, 8),
    pchs_per_channel=st.integers(1, 4),
    bank_groups_per_pch=st.integers(4, 8),
    banks_per_bank_group=st.integers(1, 8),
    subarrays_per_bank=st.integers(1, 128),
    pch_io_bits=st.sampled_from([16, 32, 64]),
    pch_data_rate=st.sampled_from([4 * GIB, 8 * GIB, 10 * GIB]),
)


@given(geometry_strategy)
def test_capacity_is_structure_product(g):
    expected = (
        g.ranks
        * g.layers_per_rank
        * g.channels_per_layer
        * g.pchs_per_channel
        * g.bank_groups_per_pch
        * g.banks_per_bank_group
        * g.subarrays_per_bank
        * MIB
    )
    assert g.capacity_bytes() == expected


@given(geometry_strategy)
def test_ranks_scale_capacity_not_bandwidth(g):
    doubled = replace(g, ranks=2 * g.ranks)
    assert doubled.capacity_bytes() == 2 * g.capacity_bytes()
    assert doubled.bandwidth_bytes_per_s() == g.bandwidth_bytes_per_s()


@given(geometry_strategy)
def test_channels_scale_both(g):
    doubled = replace(g, channels_per_layer=2 * g.channels_per_layer)
    assert doubled.capacity_bytes() == 2 * g.capacity_bytes()
    assert doubled.bandwidth_bytes_per_s() == 2 * g.bandwidth_bytes_per_s()
    assert doubled.bwcap_per_s() == pytest.approx(g.bwcap_per_s())


@given(geometry_strategy)
def test_energy_grows_with_die_size(g):
    e = ms.EnergyParams()
    bigger = replace(g, subarrays_per_bank=2 * g.subarrays_per_bank)
    assert ms.energy_pj_per_bit(bigger, e) > ms.energy_pj_per_bit(g, e)


@given(geometry_strategy)
def test_energy_components_positive_and_sum(g):
    e = ms.EnergyParams()
    comp = ms.energy_components_pj_per_bit(g, e)
    assert all(v > 0 for v in comp.values())
    assert sum(comp.values()) == pytest.approx(ms.energy_pj_per_bit(g, e))


@given(geometry_strategy)
def test_module_cost_positive_and_monotone_in_dies(g):
    c = ms.CostParams()
    cost = ms.module_cost(g, REF, c)
    assert cost > 0
    taller = replace(g, ranks=2 * g.ranks)
    assert ms.module_cost(taller, REF, c) > cost


@settings(max_examples=25)
@given(st.lists(geometry_strategy, min_size=1, max_size=12))
def test_frontier_subset_and_idempotent(geoms):
    pts = [ms.evaluate_device(g) for g in geoms]
    front = ms.pareto_frontier(pts)
    front_geoms = {p.geometry for p in front}
    assert front_geoms <= {p.geometry for p in pts}
    again = ms.pareto_frontier(front)
    assert [p.geometry for p in again] == [p.geometry for p in front]

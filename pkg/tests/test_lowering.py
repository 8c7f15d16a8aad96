"""Tests for the decode-step compiler."""

import csv

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from decodelab import engine, isa, lowering, models, sharding, system
from decodelab.lowering import LoweringError


def toy_model(**over):
    base = dict(
        name="toy",
        layers=4,
        hidden=512,
        q_heads=8,
        kv_heads=4,
        head_dim=64,
        ffn_hidden=1024,
        vocab=8192,
    )
    base.update(over)
    return models.ModelSpec(**base)


def toy_moe_model(**over):
    kwargs = dict(
        name="toy-moe",
        layers=2,
        experts=4,
        experts_per_token=2,
        expert_ffn_hidden=512,
        shared_expert=True,
        moe_period=1,
    )
    kwargs.update(over)
    return toy_model(**kwargs)


def compile_toy(model, batch=1, seq=2048, seed=0):
    cfg = system.SystemConfig(n_cus=2)
    plan = sharding.plan_sharding(model, cfg, batch=batch, seq=seq)
    return cfg, lowering.lower(model, plan, batch=batch, seq=seq, seed=seed)


def expected_read_bytes(m, batch, seq):
    # the step accounting treats norm scale vectors as streamed weights;
    # the compiler keeps them resident, so back them out
    norm_params = (2 * m.layers + 1) * m.hidden
    return m.decode_bytes_per_step(batch, seq) - int(
        norm_params * m.bits_per_weight / 8
    )


def append_write_bytes(m, batch):
    return batch * m.kv_heads * m.head_dim * 2 * (m.kv_bits // 8) * m.layers


# ---- single linear kernel -------------------------------------------


class TestLinearKernel:
    def test_each_stream_has_three_instructions(self):
        prog = lowering.lower_linear(256, 256, n_cores=4)
        assert len(prog.cores) == 4
        for core in prog.cores:
            assert len(core.memory_stream) >= 3
            assert len(core.compute_stream) >= 3
            assert len(core.network_stream) >= 3

    def test_validates_clean(self):
        prog = lowering.lower_linear(512, 384, batch=2, n_cores=4)
        assert isa.validate_program(prog).ok

    def test_runs_and_counts_macs(self):
        cfg = system.SystemConfig(n_cus=1)
        prog = lowering.lower_linear(256, 512, batch=3, n_cores=4)
        stats = engine.run(prog, cfg, kernel_table=lowering.LINEAR_KERNEL_TABLE)
        assert stats.latency_ns > 0
        assert stats.mac_ops == 256 * 512 * 3
        assert any(k.name == "linear" for k in stats.kernels.values())

    def test_deterministic_encoding(self):
        a = isa.encode(lowering.lower_linear(640, 320, n_cores=8))
        b = isa.encode(lowering.lower_linear(640, 320, n_cores=8))
        assert a == b

    @pytest.mark.parametrize("k,n,cores", [(0, 64, 4), (64, 0, 4), (64, 64, 0)])
    def test_rejects_bad_dimensions(self, k, n, cores):
        with pytest.raises(LoweringError):
            lowering.lower_linear(k, n, n_cores=cores)

    @given(
        k=st.integers(32, 768),
        n=st.integers(32, 768),
        batch=st.integers(1, 4),
    )
    @settings(max_examples=25, deadline=None)
    def test_random_linear_validates_and_meets_roofline(self, k, n, batch):
        cfg = system.SystemConfig(n_cus=1)
        prog = lowering.lower_linear(k, n, batch=batch, n_cores=16)
        assert isa.validate_program(prog).ok
        stats = engine.run(prog, cfg)
        floor = system.roofline_time_s(
            cfg,
            stats.dram_read_bytes + stats.dram_write_bytes,
            stats.mac_ops,
        )
        assert stats.latency_s >= floor
        assert stats.mac_ops == k * n * batch


# ---- full decode step, small models ---------------------------------


@pytest.fixture(scope="module")
def toy_dense_step():
    cfg, step = compile_toy(toy_model())
    stats = engine.run(step.program, cfg, kernel_table=step.kernel_table)
    return cfg, step, stats


@pytest.fixture(scope="module")
def toy_moe_step():
    cfg, step = compile_toy(toy_moe_model(), batch=4)
    stats = engine.run(step.program, cfg, kernel_table=step.kernel_table)
    return cfg, step, stats


class TestToyDense:
    def test_program_validates(self, toy_dense_step):
        _, step, _ = toy_dense_step
        assert isa.validate_program(step.program).ok

    def test_emits_window_then_extrapolates(self, toy_dense_step):
        _, step, stats = toy_dense_step
        assert len(step.emitted_layers) == 2
        assert step.extra_periods() == 2
        assert step.steady_period_ns(stats) > 0
        assert step.full_latency_ns(stats) > stats.latency_ns

    def test_read_bytes_match_model_accounting(self, toy_dense_step):
        _, step, _ = toy_dense_step
        m = step.model
        want = expected_read_bytes(m, 1, 2048) + append_write_bytes(m, 1)
        assert step.full_math().dram_bytes == want

    def test_engine_counters_match_compiler_math(self, toy_dense_step):
        _, step, stats = toy_dense_step
        em = step.emitted_math()
        assert stats.dram_read_bytes + stats.dram_write_bytes == em.dram_bytes
        assert stats.mac_ops == em.mac_ops
        assert stats.vop_ops == em.vop_ops
        assert stats.buffer_write_bytes == em.buffer_bytes

    def test_peak_buffer_fits_sram(self, toy_dense_step):
        cfg, _, stats = toy_dense_step
        cap = cfg.cu.cores_per_cu * (
            lowering.MEM_SPACE_BYTES + lowering.NET_SPACE_BYTES
        )
        assert 0 < stats.peak_buffer_bytes_per_cu <= cap

    def test_every_kernel_has_positive_span(self, toy_dense_step):
        _, step, stats = toy_dense_step
        for tag, info in step.kernel_table.items():
            ks = stats.kernels.get(tag)
            assert ks is not None, info.name
            assert ks.end_ns >= ks.start_ns >= 0


class TestToyMoe:
    def test_program_validates(self, toy_moe_step):
        _, step, _ = toy_moe_step
        assert isa.validate_program(step.program).ok

    def test_runs_to_completion(self, toy_moe_step):
        _, step, stats = toy_moe_step
        assert stats.latency_ns > 0
        assert step.extra_periods() == 0
        assert step.full_latency_ns(stats) == stats.latency_ns

    def test_engine_counters_match_compiler_math(self, toy_moe_step):
        _, step, stats = toy_moe_step
        em = step.emitted_math()
        assert stats.dram_read_bytes + stats.dram_write_bytes == em.dram_bytes
        assert stats.mac_ops == em.mac_ops
        assert stats.vop_ops == em.vop_ops

    def test_single_sequence_reads_match_model_accounting(self):
        m = toy_moe_model()
        _, step = compile_toy(m)
        want = expected_read_bytes(m, 1, 2048) + append_write_bytes(m, 1)
        assert step.full_math().dram_bytes == want

    def test_batched_routing_reads_at_least_single_token_weights(self, toy_moe_step):
        # a batch can activate more distinct experts than one token does
        _, step, _ = toy_moe_step
        m = step.model
        want = expected_read_bytes(m, 4, 2048) + append_write_bytes(m, 4)
        assert step.full_math().dram_bytes >= want

    def test_routing_is_seeded(self):
        m = toy_moe_model()
        _, a = compile_toy(m, batch=4, seed=0)
        _, b = compile_toy(m, batch=4, seed=0)
        _, c = compile_toy(m, batch=4, seed=1)
        assert isa.encode(a.program) == isa.encode(b.program)
        assert isa.encode(a.program) != isa.encode(c.program)


# ---- error paths ----------------------------------------------------


class TestLoweringErrors:
    def test_rejects_nonpositive_batch_and_seq(self):
        m = toy_model()
        cfg = system.SystemConfig(n_cus=2)
        plan = sharding.plan_sharding(m, cfg)
        for kwargs in ({"batch": 0}, {"seq": 0}):
            with pytest.raises(LoweringError):
                lowering.lower(m, plan, **kwargs)

    def test_rejects_bad_emit_window(self):
        m = toy_model()
        cfg = system.SystemConfig(n_cus=2)
        plan = sharding.plan_sharding(m, cfg)
        for emit in (0, 6, -1):
            with pytest.raises(LoweringError):
                lowering.lower(m, plan, emit_layers=emit)

    def test_moe_window_must_cover_whole_periods(self):
        m = toy_moe_model(layers=4, moe_period=2)
        cfg = system.SystemConfig(n_cus=2)
        plan = sharding.plan_sharding(m, cfg)
        with pytest.raises(LoweringError):
            lowering.lower(m, plan, emit_layers=3)
        step = lowering.lower(m, plan, emit_layers=4)
        assert len(step.emitted_layers) == 4

    def test_buffer_overflow_names_the_region(self, monkeypatch):
        m = toy_model()
        cfg = system.SystemConfig(n_cus=2)
        plan = sharding.plan_sharding(m, cfg)
        monkeypatch.setattr(lowering, "MEM_SPACE_BYTES", 96 * 1024)
        with pytest.raises(LoweringError, match="region"):
            lowering.lower(m, plan)


# ---- shard table export ---------------------------------------------


def test_shard_csv_round_trip(tmp_path):
    m = toy_moe_model()
    cfg = system.SystemConfig(n_cus=2)
    plan = sharding.plan_sharding(m, cfg)
    path = tmp_path / "shards.csv"
    lowering.write_shard_csv(plan, path)
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert rows
    names = {r["name"] for r in rows}
    assert "lm_head" in names
    for r in rows:
        assert int(r["start_core"]) + int(r["n_cores"]) <= cfg.n_cores


# ---- the big shipped model ------------------------------------------


@pytest.fixture(scope="module")
def llama8b_step():
    cfg = system.SystemConfig(n_cus=64)
    step = lowering.lower_decode_step("llama3-8b", cfg, batch=1, seq=8192)
    stats = engine.run(step.program, cfg, kernel_table=step.kernel_table)
    return cfg, step, stats


class TestLlama8B:
    def test_program_validates(self, llama8b_step):
        _, step, _ = llama8b_step
        assert isa.validate_program(step.program).ok

    def test_full_model_reads_match_accounting(self, llama8b_step):
        _, step, _ = llama8b_step
        m = step.model
        want = expected_read_bytes(m, 1, 8192) + append_write_bytes(m, 1)
        assert step.full_math().dram_bytes == want

    def test_steady_period_near_memory_floor(self, llama8b_step):
        cfg, step, stats = llama8b_step
        per_layer = step.period_math().dram_bytes
        floor_ns = per_layer / cfg.total_mem_bandwidth_bytes_per_s * 1e9
        ratio = step.steady_period_ns(stats) / floor_ns
        assert 1.0 <= ratio <= 2.0

    def test_head_kernel_streams_at_memory_rate(self, llama8b_step):
        # an isolated streaming matmul should finish in bytes-over-bandwidth
        cfg, step, stats = llama8b_step
        m = step.model
        head_bytes = int(m.vocab * m.hidden * m.bits_per_weight / 8)
        floor_ns = head_bytes / cfg.total_mem_bandwidth_bytes_per_s * 1e9
        tag = next(
            t for t, i in step.kernel_table.items() if i.name == "final.logits"
        )
        span = stats.kernel_duration_ns(tag)
        assert floor_ns <= span <= 1.10 * floor_ns

    def test_full_latency_in_expected_band(self, llama8b_step):
        _, step, stats = llama8b_step
        ms = step.full_latency_ns(stats) * 1e-6
        assert 0.15 <= ms <= 0.30

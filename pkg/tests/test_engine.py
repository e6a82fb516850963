import dataclasses
import io

import pytest

from conftest import make_config
from fixtures import HAND_EXPECTED, hand_config
from overlaysim.engine import (
    CostModel, Engine, EngineError, EngineParams, MessageStream, segment_sizes,
)
from overlaysim.topology import StageKind, build_topology
from overlaysim.workload import build_engine, run_experiment

ZERO = {f.name: 0 for f in dataclasses.fields(CostModel)
        if f.name not in ("interrupt_coalesce_batch", "softirq_batch", "count_sender_switches")}


def run_ledger(config, mode="host_overlay", pairs=1):
    run = config.run_config(mode, pairs)
    return build_engine(run).run(run.duration_ticks, run.warmup_ticks)


def test_hand_fixture_counters():
    ledger = run_ledger(hand_config())
    m, want = ledger.measured, HAND_EXPECTED
    for kind in ("pkts", "bytes", "wire", "msgs"):
        assert ledger.flow_sum(kind) == want[kind]
    for kind in ("cycles", "ctx", "intr"):
        for pool, v in want[kind].items():
            assert m[kind, pool] == v
    assert ledger.upcalls == want["upcalls"]
    c = ledger.conservation()
    assert (c["offered"], c["delivered"], c["queued"], c["dropped"]) == (15000, 10000, 5000, 0)


def test_hand_fixture_normalized():
    r = run_experiment(hand_config().run_config("host_overlay", 1))
    for col in ("throughput_gbps", "ctx_per_s", "intr_per_s", "ctx_per_gb", "intr_per_gb",
                "user_cpu_pct"):
        assert getattr(r, col) == pytest.approx(HAND_EXPECTED[col], rel=1e-9)


def test_first_tick_upcalls_then_fast_path():
    config = hand_config()
    engine = build_engine(config.run_config("host_overlay", 1))
    first, second = engine.step(0), engine.step(1)
    for pool in ("host-A", "host-B"):
        assert first["upcalls", pool] == 1 and second["upcalls", pool] == 0
        assert first["cycles", pool] - second["cycles", pool] == 50000
    # the upcall adds 2 switches; host-B also gets a wakeup on tick 1
    assert first["ctx", "host-A"] - second["ctx", "host-A"] == 2


def test_link_bound():
    config = make_config(modes=["host_direct"], duration_ticks=50, warmup_ticks=0,
                         cost_model=ZERO, engine={"window_bytes": None},
                         workload={"message_bytes": 1000, "segment_bytes": 1000})
    ledger = run_ledger(config, "host_direct")
    # 100 Gb/s for 10 us is 125000 bytes
    assert ledger.flow_sum("pkts") == 125 * 50
    r = run_experiment(config.run_config("host_direct", 1))
    assert r.throughput_gbps == 100.0
    assert r.user_cpu_pct == 100.0


def test_pool_bound():
    cost = dict(ZERO, endpoint_tx=80000)
    config = make_config(modes=["host_direct"], duration_ticks=20, warmup_ticks=0,
                         cost_model=cost, engine={"window_bytes": None},
                         network={"link_gbps": 16},
                         workload={"message_bytes": 1000, "segment_bytes": 1000})
    ledger = run_ledger(config, "host_direct")
    # 800000 cycles per tick / 80000 = 10 segments; the link would allow 20
    assert ledger.flow_sum("pkts") == 200
    assert ledger.measured["cycles", "host-A"] == 800000 * 20


def test_window_bounds_rate():
    config = make_config(modes=["host_direct"], duration_ticks=200, warmup_ticks=0,
                         cost_model=ZERO, workload={"message_bytes": 1000, "segment_bytes": 1000},
                         engine={"window_bytes": 20000, "base_rtt_us": 100})
    ledger = run_ledger(config, "host_direct")
    # 20000 bytes per 100 us round trip is 2000 bytes per tick
    assert ledger.flow_sum("bytes") == 2000 * 200


def test_hw_table_overflow_charged_on_dpu():
    cost = dict(ZERO, representor=100, upcall_cost=1000)
    config = make_config(modes=["dpu_offload"], duration_ticks=3, warmup_ticks=0,
                         cost_model=cost, engine={"window_bytes": None},
                         network={"link_gbps": 1.68},
                         switch={"hw_capacity": 1},
                         workload={"message_bytes": 1000, "segment_bytes": 1000})
    ledger = run_ledger(config, "dpu_offload", 2)
    m = ledger.measured
    # 2100 wire bytes per tick (1000 + 50 each) shared by two flows -> 1 segment each per tick.
    # Flow 0 gets the only hardware slot on each DPU after its first packet;
    # flow 1 stays on the software path and pays the representor every packet.
    # dpu-A per tick: tick 0 both upcall + first packets; then only flow 1.
    assert ledger.flow_sum("pkts") == 6
    assert m["upcalls", "dpu-A"] == m["upcalls", "dpu-B"] == 2
    assert m["cycles", "dpu-A"] == 2 * 1000 + 2 * 100 + 2 * 100
    assert m["cycles", "host-A"] == 0


def test_dpu_frees_host_cpu_at_equal_throughput():
    common = dict(duration_ticks=2000, warmup_ticks=100, workload={"rate_gbps": 5})
    overlay = run_experiment(make_config(**common).run_config("host_overlay", 2))
    dpu = run_experiment(make_config(**common).run_config("dpu_offload", 2))
    assert overlay.throughput_gbps == pytest.approx(dpu.throughput_gbps, rel=1e-3)
    assert dpu.user_cpu_pct > overlay.user_cpu_pct


@pytest.mark.parametrize("mode", ["host_direct", "host_overlay", "dpu_offload"])
@pytest.mark.parametrize("pairs", [1, 3, 7])
def test_fast_forward_is_exact(mode, pairs):
    config = make_config(modes=[mode], duration_ticks=3000, warmup_ticks=200)
    fast = run_ledger(config, mode, pairs)
    slow_cfg = make_config(modes=[mode], duration_ticks=3000, warmup_ticks=200,
                           engine={"fast_forward": False})
    slow = run_ledger(slow_cfg, mode, pairs)
    assert +fast.measured == +slow.measured
    assert fast.conservation() == slow.conservation()
    assert fast.upcalls == slow.upcalls


@pytest.mark.parametrize("mode", ["host_direct", "host_overlay", "dpu_offload"])
def test_conservation_and_pool_safety(mode):
    config = make_config(modes=[mode], duration_ticks=1500, warmup_ticks=0,
                         workload={"rate_gbps": 30, "queue_depth": 2})
    run = config.run_config(mode, 5)
    engine = build_engine(run)
    ledger = engine.run(run.duration_ticks, 0)
    c = ledger.conservation()
    assert c["offered"] == c["delivered"] + c["queued"] + c["dropped"]
    assert c["dropped"] > 0  # 150 Gb/s offered into a 100 Gb/s link
    for name, pool in engine.pools.items():
        assert ledger.measured["cycles", name] <= pool.capacity * run.duration_ticks + 1e-3
    # the same balance in segments
    for f in engine.flows:
        s = f.stream
        offered = s.offered // s.message_bytes * s.k
        dropped = s.dropped // s.message_bytes * s.k
        assert offered == ledger.measured["pkts", s.pid] + s.available() + dropped


def test_deterministic():
    config = make_config(duration_ticks=800, warmup_ticks=50,
                         workload={"start_jitter_ticks": 30})
    a = run_experiment(config.run_config("host_overlay", 4))
    b = run_experiment(config.run_config("host_overlay", 4))
    assert a == b and a.breakdown == b.breakdown


def test_trace_rows():
    config = hand_config()
    engine = build_engine(config.run_config("host_overlay", 1))
    buf = io.StringIO()
    engine.run(5, 0, trace=buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "tick,pool,cycles,capacity,ctx,interrupts"
    assert len(lines) == 1 + 5 * 2
    # two segments at 1111, one upcall, one interrupt
    assert lines[1] == f"0,host-A,{2 * 1111 + 50000 + 7:.1f},800000.0,3,1"


def test_fair_share_between_equal_flows():
    config = make_config(modes=["host_direct"], duration_ticks=1000, warmup_ticks=0,
                         cost_model=ZERO, engine={"window_bytes": None})
    ledger = run_ledger(config, "host_direct", 6)
    per = [ledger.measured["bytes", f.stream.pid] for f in ledger.engine.flows]
    assert max(per) - min(per) <= 8192
    assert sum(per) >= 0.99 * 125000 * 1000


def test_run_rejects_short_duration():
    engine = build_engine(hand_config().run_config("host_overlay", 1))
    with pytest.raises(EngineError):
        engine.run(5, 10)


def test_segment_sizes():
    assert segment_sizes(8192, 1450) == [1450] * 5 + [942]
    assert segment_sizes(1, 1450) == [1]
    with pytest.raises(ValueError):
        segment_sizes(0, 10)


def test_vf_dma_includes_driver_cost():
    cost = CostModel()
    assert cost.stage_cost(StageKind.VF_DMA, "tx") == cost.nic_tx + cost.vf_dma
    assert cost.stage_cost(StageKind.WIRE) == 0


def test_cost_model_round_trip(tmp_path):
    cost = CostModel(upcall_cost=123.0)
    cost.save(tmp_path / "c.json")
    assert CostModel.load(tmp_path / "c.json") == cost
    with pytest.raises(KeyError):
        CostModel.from_dict({"bogus": 1})
    with pytest.raises(ValueError):
        CostModel(nic_tx=-1)


def test_idle_engine_counts_nothing():
    topo = build_topology(make_config().run_config("host_overlay", 1))
    stream = MessageStream(0, "c0", "s0", rate_bytes_per_tick=1.0)
    ledger = Engine(topo, [stream], CostModel(), EngineParams()).run(100)
    assert ledger.flow_sum("bytes") == 0
    assert ledger.pool_sum("cycles") == 0


def test_overlay_costs_more_host_cpu_than_direct():
    config = make_config(modes=["host_direct", "host_overlay"], duration_ticks=3000)
    direct = run_experiment(config.run_config("host_direct", 1))
    overlay = run_experiment(config.run_config("host_overlay", 1))
    assert overlay.user_cpu_pct < direct.user_cpu_pct


def test_interrupts_are_ceil_packets_over_batch():
    config = hand_config()
    cost = dataclasses.replace(config.cost, interrupt_coalesce_batch=1)
    ledger = run_ledger(dataclasses.replace(config, cost=cost))
    # two packets per tick per NIC, one interrupt each
    assert ledger.measured["intr", "host-A"] == ledger.measured["intr", "host-B"] == 10


@pytest.mark.parametrize("mode", ["host_overlay", "dpu_offload"])
def test_switch_stats_conserve_packets(mode):
    config = make_config(modes=[mode], duration_ticks=2500, warmup_ticks=0)
    ledger = run_ledger(config, mode, 3)
    pkts = ledger.flow_sum("pkts")
    for sw in ledger.engine.topology.switches.values():
        s = sw.stats
        # hardware hits are the subset of fast-path hits served by the offload table
        assert s.upcalls + s.fast_path_hits == pkts
        assert s.hw_hits <= s.fast_path_hits

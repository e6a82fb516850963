"""Shared hand-computed engine fixture."""

from conftest import make_config

# One overlay pair over a 2.4 Gb/s link (3000 bytes per 10 us tick).  Each
# segment costs 1000 + 50 wire bytes, so exactly two segments move per tick.
HAND_COST = {
    "endpoint_tx": 10, "endpoint_rx": 20, "nic_tx": 1, "nic_rx": 2,
    "bridge_switch": 100, "vxlan_encap": 1000, "vxlan_decap": 2000,
    "upcall_cost": 50000, "upcall_context_switches": 2,
    "interrupt_cost": 7, "interrupt_coalesce_batch": 64,
    "handoff_context_switches": 1, "softirq_batch": 8, "wakeup_context_switches": 1,
}

# Worked by hand, tick by tick:
#   segments 2,2,2,2,2 -> 10 segments, 10000 bytes, 10500 on the wire
#   messages of 3 segments complete at ticks 1, 2 and 4 -> 3 wakeups on B
#   host-A per segment 10+100+1000+1 = 1111; host-B 2+2000+100+20 = 2122
#   one upcall per switch (50000 cycles, 2 ctx) on tick 0
#   one NIC interrupt per host per tick (2 <= 64), 7 cycles each
#   one softirq hand-off per tick per tunnel stage (ceil(2/8))
HAND_EXPECTED = {
    "pkts": 10, "bytes": 10000, "wire": 10500, "msgs": 3,
    "cycles": {"host-A": 11110 + 50000 + 35, "host-B": 21220 + 50000 + 35},
    "ctx": {"host-A": 2 + 5, "host-B": 2 + 5 + 3},
    "intr": {"host-A": 5, "host-B": 5},
    "upcalls": 2,
    "offered": 15000, "queued": 5000,
    # 10000 bytes in 50 us
    "throughput_gbps": 1.6,
    "ctx_per_s": 17 / 50e-6, "intr_per_s": 10 / 50e-6,
    "ctx_per_gb": 17 / 50e-6 / 1.6, "intr_per_gb": 10 / 50e-6 / 1.6,
    # host capacity 800000 cycles per tick
    "user_cpu_pct": 100 * (1 - (61145 + 71255) / 2 / (800000 * 5)),
}


def hand_config():
    return make_config(
        duration_ticks=5, warmup_ticks=0, network={"link_gbps": 2.4}, cost_model=HAND_COST,
        engine={"window_bytes": None},
        workload={"message_bytes": 3000, "segment_bytes": 1000, "queue_depth": 2},
    )


def check_pcap(path):
    """Decode every record of an exported capture; returns (records, inner lengths)."""
    import struct

    from oracles import ones_complement_checksum
    from overlaysim.codec import OuterFrame, decode_frame, encode_frame, vxlan_decapsulate

    raw = open(path, "rb").read()
    magic, major, minor, _tz, _sig, _snap, link = struct.unpack("<IHHiIII", raw[:24])
    assert (magic, major, minor, link) == (0xA1B2C3D4, 2, 4, 1)
    pos, records, inner_lens = 24, [], []
    while pos < len(raw):
        _s, _u, incl, orig = struct.unpack("<IIII", raw[pos:pos + 16])
        data = raw[pos + 16:pos + 16 + incl]
        assert incl == orig == len(data)
        pos += 16 + incl
        outer = decode_frame(data)
        assert isinstance(outer, OuterFrame)
        assert encode_frame(outer) == data
        assert ones_complement_checksum(data[14:34]) == 0
        _vni, inner = vxlan_decapsulate(outer)
        inner_len = len(encode_frame(inner))
        assert len(data) == inner_len + 50
        records.append(data)
        inner_lens.append(inner_len)
    return records, inner_lens

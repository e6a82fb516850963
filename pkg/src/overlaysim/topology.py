"""Experiment world: hosts, container endpoints, VNIs and per-mode packet paths."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from ipaddress import IPv4Address
from typing import Iterable, Mapping, Sequence

from .codec import (ETHERTYPE_IPV4, VNI_MAX, EthernetHeader, InnerFrame, MacAddress,
                    Vtep, VtepAddress, decode_frame, encode_frame)
from .switch import (DEFAULT_CACHE_CAPACITY, DEFAULT_HW_CAPACITY, DEFAULT_IDLE_TIMEOUT,
                     Drop, Encap, Flood, FlowSwitch, Output, VniTable)

UPLINK_PORT = 1
VTEP_PORT = 2
FIRST_ENDPOINT_PORT = 100


class TopologyError(ValueError):
    pass


class PlacementMode(str, enum.Enum):
    HOST_DIRECT = "host_direct"
    HOST_OVERLAY = "host_overlay"
    DPU_OFFLOAD = "dpu_offload"

    @property
    def encapsulates(self) -> bool:
        return self is not PlacementMode.HOST_DIRECT

    @classmethod
    def parse(cls, value) -> "PlacementMode":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            try:
                return cls[str(value).upper()]
            except KeyError:
                raise ValueError(f"unknown placement mode {value!r}") from None


class StageKind(str, enum.Enum):
    ENDPOINT_TX = "endpoint_tx"
    VF_DMA = "vf_dma"
    REPRESENTOR = "representor"
    BRIDGE_SWITCH = "bridge_switch"
    VXLAN_ENCAP = "vxlan_encap"
    VXLAN_DECAP = "vxlan_decap"
    NIC_TX = "nic_tx"
    WIRE = "wire"
    NIC_RX = "nic_rx"
    ENDPOINT_RX = "endpoint_rx"


MIRROR_KIND = {
    StageKind.ENDPOINT_TX: StageKind.ENDPOINT_RX,
    StageKind.ENDPOINT_RX: StageKind.ENDPOINT_TX,
    StageKind.NIC_TX: StageKind.NIC_RX,
    StageKind.NIC_RX: StageKind.NIC_TX,
    StageKind.VXLAN_ENCAP: StageKind.VXLAN_DECAP,
    StageKind.VXLAN_DECAP: StageKind.VXLAN_ENCAP,
}


@dataclass
class Host:
    name: str
    index: int
    host_pool: str
    dpu_pool: str | None
    vtep: VtepAddress
    uplink_bps: float


@dataclass
class Endpoint:
    id: str
    host: str
    mac: MacAddress
    vnis: tuple[int, ...]
    role: str = "client"
    peer: str | None = None
    index: int = 0  # position on its host; also the VF number under DPU placement


@dataclass
class VirtualNetwork:
    vni: int
    members: list[str]
    vteps: list[VtepAddress]


@dataclass(frozen=True)
class PipelineStage:
    kind: StageKind
    pool: str | None
    host: str | None = None
    side: str = "tx"
    switch: FlowSwitch | None = field(default=None, compare=False)
    in_port: int | None = None
    vni: int | None = None
    nic: str | None = None

    @property
    def charged_to_host(self) -> bool:
        return self.pool is not None and self.pool.startswith("host-")


@dataclass
class Topology:
    mode: PlacementMode
    hosts: dict[str, Host]
    endpoints: dict[str, Endpoint]
    networks: dict[int, VirtualNetwork]
    switches: dict[str, FlowSwitch]
    ports: dict[tuple[str, int], int]  # (endpoint id, vni) -> switch port
    representors: dict[str, list[int]]
    vteps: dict[str, Vtep]

    def endpoint_at(self, host: str, port: int) -> Endpoint:
        for (eid, _vni), p in self.ports.items():
            if p == port and self.endpoints[eid].host == host:
                return self.endpoints[eid]
        raise KeyError((host, port))

    def host_by_vtep(self, addr: VtepAddress) -> Host:
        for host in self.hosts.values():
            if host.vtep == addr:
                return host
        raise KeyError(addr)

    def pairs(self) -> list[tuple[Endpoint, Endpoint]]:
        return [(e, self.endpoints[e.peer]) for e in self.endpoints.values()
                if e.role == "client" and e.peer is not None]

    @property
    def representor_count(self) -> int:
        return sum(len(v) for v in self.representors.values())


def host_pool_name(host: str) -> str:
    return f"host-{host}"


def dpu_pool_name(host: str) -> str:
    return f"dpu-{host}"


def _vtep_for(index: int) -> VtepAddress:
    return VtepAddress(IPv4Address(f"192.168.0.{index + 1}"),
                       MacAddress(bytes([0x02, 0xFE, 0x00, 0x00, 0x00, index])))


def build_layout(mode: PlacementMode | str,
                 layout: Mapping[str, Sequence[tuple[str, Iterable[int]]]],
                 link_gbps: float = 100.0,
                 cache_capacity: int = DEFAULT_CACHE_CAPACITY,
                 idle_timeout: int = DEFAULT_IDLE_TIMEOUT,
                 hw_capacity: int = DEFAULT_HW_CAPACITY,
                 peers: Mapping[str, str] | None = None) -> Topology:
    """Build a topology from ``{host: [(endpoint_id, vnis), ...]}``.

    Endpoint MACs come from (host index, position) and switch tables are
    pre-populated, standing in for the out-of-band control plane.
    """
    mode = PlacementMode.parse(mode)
    hosts: dict[str, Host] = {}
    endpoints: dict[str, Endpoint] = {}
    for h_index, (hname, members) in enumerate(layout.items()):
        hosts[hname] = Host(hname, h_index, host_pool_name(hname),
                            dpu_pool_name(hname) if mode is PlacementMode.DPU_OFFLOAD else None,
                            _vtep_for(h_index), link_gbps * 1e9)
        for e_index, (eid, vnis) in enumerate(members):
            if eid in endpoints:
                raise TopologyError(f"duplicate endpoint id {eid!r}")
            vnis = tuple(sorted(set(vnis)))
            for v in vnis:
                if not 0 <= v <= VNI_MAX:
                    raise TopologyError(f"VNI {v} out of range")
            endpoints[eid] = Endpoint(eid, hname, MacAddress.generated(h_index, e_index),
                                      vnis, index=e_index)
    for a, b in (peers or {}).items():
        endpoints[a].peer, endpoints[b].peer = b, a
        endpoints[a].role, endpoints[b].role = "client", "server"

    networks: dict[int, VirtualNetwork] = {}
    for e in endpoints.values():
        for v in e.vnis:
            net = networks.setdefault(v, VirtualNetwork(v, [], []))
            net.members.append(e.id)
            vtep = hosts[e.host].vtep
            if vtep not in net.vteps:
                net.vteps.append(vtep)

    ports: dict[tuple[str, int], int] = {}
    switches: dict[str, FlowSwitch] = {}
    representors: dict[str, list[int]] = {}
    vteps: dict[str, Vtep] = {}
    for hname, host in hosts.items():
        local = [e for e in endpoints.values() if e.host == hname]
        next_port = FIRST_ENDPOINT_PORT
        for e in local:
            for v in e.vnis:
                ports[(e.id, v)] = next_port
                next_port += 1
        if not mode.encapsulates:
            continue
        table = VniTable(vtep_port=VTEP_PORT, uplink_port=UPLINK_PORT)
        for e in local:
            for v in e.vnis:
                table.attachments[ports[(e.id, v)]] = v
        for v, net in networks.items():
            table.remote_vteps[v] = [t for t in net.vteps if t != host.vtep]
            for eid in net.members:
                other = endpoints[eid]
                if other.host != hname:
                    table.remote[(v, other.mac)] = hosts[other.host].vtep
        hw = mode is PlacementMode.DPU_OFFLOAD
        sw = FlowSwitch(f"{'dpu' if hw else 'host'}-{hname}", table, cache_capacity,
                        idle_timeout, hw_offload=hw, hw_capacity=hw_capacity)
        for e in local:
            for v in e.vnis:
                sw.learn(v, e.mac, ports[(e.id, v)], 0)
        switches[hname] = sw
        vteps[hname] = Vtep(host.vtep)
        representors[hname] = (sorted(table.attachments) if hw else [])
    return Topology(mode, hosts, endpoints, networks, switches, ports, representors, vteps)


def build_topology(config) -> Topology:
    """Two-host client/server world for one run.

    ``config`` needs ``mode`` and ``pairs``; optional ``vni_mode``
    ("shared" or "per_pair"), ``base_vni``, ``link_gbps``,
    ``cache_capacity``, ``idle_timeout_ticks`` and ``hw_capacity``.
    """
    mode = PlacementMode.parse(config.mode)
    pairs = int(config.pairs)
    if pairs < 1:
        raise TopologyError("pair count must be at least 1")
    vni_mode = getattr(config, "vni_mode", "shared")
    base = int(getattr(config, "base_vni", 1))
    if vni_mode not in ("shared", "per_pair"):
        raise TopologyError(f"unknown vni_mode {vni_mode!r}")
    vni_of = (lambda i: base) if vni_mode == "shared" else (lambda i: base + i)
    if not 0 <= vni_of(pairs - 1) <= VNI_MAX or not 0 <= base <= VNI_MAX:
        raise TopologyError("VNI out of range")
    layout = {
        "A": [(f"c{i}", [vni_of(i)]) for i in range(pairs)],
        "B": [(f"s{i}", [vni_of(i)]) for i in range(pairs)],
    }
    return build_layout(
        mode, layout,
        link_gbps=getattr(config, "link_gbps", 100.0),
        cache_capacity=getattr(config, "cache_capacity", DEFAULT_CACHE_CAPACITY),
        idle_timeout=getattr(config, "idle_timeout_ticks", DEFAULT_IDLE_TIMEOUT),
        hw_capacity=getattr(config, "hw_capacity", DEFAULT_HW_CAPACITY),
        peers={f"c{i}": f"s{i}" for i in range(pairs)},
    )


def shared_vni(src: Endpoint, dst: Endpoint) -> int | None:
    common = sorted(set(src.vnis) & set(dst.vnis))
    return common[0] if common else None


def build_pipeline(topo: Topology, src: Endpoint | str, dst: Endpoint | str) -> list[PipelineStage]:
    if isinstance(src, str):
        src = topo.endpoints[src]
    if isinstance(dst, str):
        dst = topo.endpoints[dst]
    vni = shared_vni(src, dst)
    if vni is None:
        raise TopologyError(f"{src.id} and {dst.id} share no VNI")
    a, b = src.host, dst.host
    ha, hb = host_pool_name(a), host_pool_name(b)
    S = StageKind
    if topo.mode is PlacementMode.HOST_DIRECT:
        return [
            PipelineStage(S.ENDPOINT_TX, ha, a, "tx"),
            PipelineStage(S.NIC_TX, ha, a, "tx", nic=f"{a}.pf"),
            PipelineStage(S.WIRE, None),
            PipelineStage(S.NIC_RX, hb, b, "rx", nic=f"{b}.pf"),
            PipelineStage(S.ENDPOINT_RX, hb, b, "rx"),
        ]
    sw_a, sw_b = topo.switches[a], topo.switches[b]
    in_a = topo.ports[(src.id, vni)]
    if topo.mode is PlacementMode.HOST_OVERLAY:
        return [
            PipelineStage(S.ENDPOINT_TX, ha, a, "tx"),
            PipelineStage(S.BRIDGE_SWITCH, ha, a, "tx", sw_a, in_a),
            PipelineStage(S.VXLAN_ENCAP, ha, a, "tx", vni=vni),
            PipelineStage(S.NIC_TX, ha, a, "tx", nic=f"{a}.pf"),
            PipelineStage(S.WIRE, None),
            PipelineStage(S.NIC_RX, hb, b, "rx", nic=f"{b}.pf"),
            PipelineStage(S.VXLAN_DECAP, hb, b, "rx", vni=vni),
            PipelineStage(S.BRIDGE_SWITCH, hb, b, "rx", sw_b, VTEP_PORT, vni),
            PipelineStage(S.ENDPOINT_RX, hb, b, "rx"),
        ]
    da, db = dpu_pool_name(a), dpu_pool_name(b)
    return [
        PipelineStage(S.ENDPOINT_TX, ha, a, "tx"),
        PipelineStage(S.VF_DMA, ha, a, "tx", nic=f"{a}.vf{src.index}"),
        PipelineStage(S.REPRESENTOR, da, a, "tx", sw_a, in_a),
        PipelineStage(S.BRIDGE_SWITCH, da, a, "tx", sw_a, in_a),
        PipelineStage(S.VXLAN_ENCAP, da, a, "tx", sw_a, in_a, vni),
        # uplink ports belong to the DPU's embedded switch hardware
        PipelineStage(S.NIC_TX, None, a, "tx"),
        PipelineStage(S.WIRE, None),
        PipelineStage(S.NIC_RX, None, b, "rx"),
        PipelineStage(S.VXLAN_DECAP, db, b, "rx", sw_b, VTEP_PORT, vni),
        PipelineStage(S.BRIDGE_SWITCH, db, b, "rx", sw_b, VTEP_PORT, vni),
        PipelineStage(S.REPRESENTOR, db, b, "rx", sw_b, VTEP_PORT, vni),
        PipelineStage(S.VF_DMA, hb, b, "rx", nic=f"{b}.vf{dst.index}"),
        PipelineStage(S.ENDPOINT_RX, hb, b, "rx"),
    ]


def mirror(stages: Sequence[PipelineStage]) -> list[tuple[StageKind, str | None]]:
    """Reverse a stage list and swap tx/rx roles, as (kind, pool) pairs."""
    return [(MIRROR_KIND.get(s.kind, s.kind), s.pool) for s in reversed(stages)]


@dataclass
class ReachabilityMatrix:
    ids: list[str]
    rows: list[list[bool]]

    def __getitem__(self, pair: tuple[str, str]) -> bool:
        a, b = pair
        return self.rows[self.ids.index(a)][self.ids.index(b)]


def validate_isolation(topo: Topology) -> ReachabilityMatrix:
    """Endpoint x endpoint matrix: True iff the two endpoints share a VNI."""
    ids = sorted(topo.endpoints)
    rows = [[a != b and shared_vni(topo.endpoints[a], topo.endpoints[b]) is not None
             for b in ids] for a in ids]
    return ReachabilityMatrix(ids, rows)


@dataclass
class Delivery:
    receivers: set[str]
    vni_of: dict[str, int]
    wire_frames: list[bytes]


def deliver(topo: Topology, src_id: str, dst_mac: MacAddress, vni: int,
            tick: int = 0) -> Delivery:
    """Walk one frame through the overlay and report which endpoints receive it.

    Tunnel hops go through the real codec: frames are encapsulated,
    serialized, parsed and decapsulated on the far side.
    """
    if not topo.mode.encapsulates:
        raise TopologyError("delivery walk needs an overlay placement")
    src = topo.endpoints[src_id]
    port = topo.ports[(src_id, vni)]
    frame = InnerFrame(EthernetHeader(dst_mac, src.mac, ETHERTYPE_IPV4), b"probe")
    result = Delivery(set(), {}, [])

    def receive(host: str, p: int, v: int):
        ep = topo.endpoint_at(host, p)
        result.receivers.add(ep.id)
        result.vni_of[ep.id] = v

    def tunnel(host: str, v: int, remote: VtepAddress):
        outer = topo.vteps[host].encapsulate(frame, v, remote)
        raw = encode_frame(outer)
        result.wire_frames.append(raw)
        far = topo.host_by_vtep(remote).name
        rvni, inner = topo.vteps[far].decapsulate(decode_frame(raw))
        sw = topo.switches[far]
        action, _ = sw.process_packet(VTEP_PORT, inner, tick, vni=rvni)
        apply(far, sw, action, rvni)

    def apply(host: str, sw: FlowSwitch, action, v: int):
        if isinstance(action, Output):
            receive(host, action.port, v)
        elif isinstance(action, Flood):
            for p in sw.flood_ports(action):
                receive(host, p, v)
            for remote in sw.flood_remotes(action):
                tunnel(host, v, remote)
        elif isinstance(action, Encap):
            tunnel(host, action.vni, action.remote)
        elif isinstance(action, Drop):
            pass

    sw = topo.switches[src.host]
    action, _ = sw.process_packet(port, frame, tick)
    apply(src.host, sw, action, vni)
    return result

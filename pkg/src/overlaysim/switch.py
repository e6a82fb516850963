"""OVS-style virtual switch with an exact-match fast path.

A miss in the flow cache is an *upcall*: the packet goes to the slow-path
classifier, whose decision is cached so later packets of the same flow
skip classification.  An optional hardware table sits in front of the
software cache when the switch runs on a DPU with hardware offload.

Forwarding is layer-2 and VNI scoped; the flow key carries no L3/L4 fields.
"""

from __future__ import annotations

import functools
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Union

from .codec import CodecError, InnerFrame, MacAddress, VtepAddress, decode_frame

PortId = int

DEFAULT_CACHE_CAPACITY = 4096
DEFAULT_IDLE_TIMEOUT = 1000  # ticks; 10 ms at the engine's 10 us tick
DEFAULT_HW_CAPACITY = 65536


@functools.total_ordering
@dataclass(frozen=True)
class FlowKey:
    in_port: PortId
    src_mac: MacAddress
    dst_mac: MacAddress
    ethertype: int
    vni: int | None = None

    def sort_key(self):
        return (self.in_port, self.src_mac.octets, self.dst_mac.octets,
                self.ethertype, -1 if self.vni is None else self.vni)

    def __lt__(self, other: "FlowKey") -> bool:
        return self.sort_key() < other.sort_key()

    @classmethod
    def from_frame(cls, in_port: PortId, frame: InnerFrame, vni: int | None = None) -> "FlowKey":
        return cls(in_port, frame.eth.src, frame.eth.dst, frame.eth.ethertype, vni)


@dataclass(frozen=True)
class Output:
    port: PortId

    def __str__(self):
        return f"output:{self.port}"


@dataclass(frozen=True)
class Flood:
    vni: int
    exclude: PortId

    def __str__(self):
        return f"flood:vni={self.vni},exclude={self.exclude}"


@dataclass(frozen=True)
class Encap:
    vni: int
    remote: VtepAddress
    uplink: PortId

    def __str__(self):
        return f"encap:vni={self.vni},remote={self.remote.ip},uplink={self.uplink}"


@dataclass(frozen=True)
class Decap:
    def __str__(self):
        return "decap"


@dataclass(frozen=True)
class Drop:
    reason: str

    def __str__(self):
        return f"drop:{self.reason}"


FlowAction = Union[Output, Flood, Encap, Decap, Drop]


@dataclass
class FlowCacheEntry:
    key: FlowKey
    action: FlowAction
    hit_count: int
    install_tick: int
    last_hit_tick: int


@dataclass
class FdbEntry:
    port: PortId
    last_seen_tick: int


@dataclass
class SwitchStats:
    upcalls: int = 0
    fast_path_hits: int = 0
    hw_hits: int = 0  # subset of fast_path_hits served by the hardware table
    outputs: int = 0
    encaps: int = 0
    decaps: int = 0
    flood_count: int = 0
    drops: dict[str, int] = field(default_factory=lambda: defaultdict(int))
    evictions: int = 0
    revalidated: int = 0

    @property
    def packets_processed(self) -> int:
        return self.upcalls + self.fast_path_hits

    def as_dict(self) -> dict:
        return {
            "upcalls": self.upcalls,
            "fast_path_hits": self.fast_path_hits,
            "hw_hits": self.hw_hits,
            "outputs": self.outputs,
            "encaps": self.encaps,
            "decaps": self.decaps,
            "flood_count": self.flood_count,
            "drops": dict(sorted(self.drops.items())),
            "evictions": self.evictions,
            "revalidated": self.revalidated,
        }


@dataclass
class VniTable:
    """Static network configuration a switch classifies against."""

    attachments: dict[PortId, int] = field(default_factory=dict)
    vtep_port: PortId | None = None
    uplink_port: PortId | None = None
    # (vni, mac) -> VTEP of the host where that MAC lives
    remote: dict[tuple[int, MacAddress], VtepAddress] = field(default_factory=dict)
    # vni -> remote VTEPs taking part in that VNI (flood replication list)
    remote_vteps: dict[int, list[VtepAddress]] = field(default_factory=dict)

    def members(self, vni: int) -> list[PortId]:
        return sorted(p for p, v in self.attachments.items() if v == vni)

    def scope(self, key: FlowKey) -> int | None:
        if key.in_port == self.vtep_port:
            return key.vni
        return self.attachments.get(key.in_port)


Fdb = dict[tuple[int, MacAddress], FdbEntry]


def classify(key: FlowKey, fdb: Fdb, net: VniTable) -> FlowAction:
    """Slow-path decision for one flow key."""
    if net.uplink_port is not None and key.in_port == net.uplink_port:
        return Decap()
    vni = net.scope(key)
    if vni is None:
        return Drop("unattached")
    from_tunnel = key.in_port == net.vtep_port
    if key.dst_mac.is_multicast:
        return Flood(vni, key.in_port)
    entry = fdb.get((vni, key.dst_mac))
    if entry is not None:
        if entry.port == key.in_port:
            return Drop("hairpin")
        return Output(entry.port)
    remote = net.remote.get((vni, key.dst_mac))
    if remote is not None:
        if from_tunnel:
            return Drop("no_transit")
        return Encap(vni, remote, net.uplink_port)
    return Flood(vni, key.in_port)


@dataclass(frozen=True)
class HwResult:
    action: FlowAction
    upcalls: int
    sw_packets: int
    hw_packets: int


class FlowSwitch:
    """Single-owner switch state machine: FDB, flow cache, optional hardware table."""

    def __init__(self, name: str, net: VniTable, capacity: int = DEFAULT_CACHE_CAPACITY,
                 idle_timeout: int = DEFAULT_IDLE_TIMEOUT, hw_offload: bool = False,
                 hw_capacity: int = DEFAULT_HW_CAPACITY):
        if capacity < 1:
            raise ValueError("cache capacity must be positive")
        self.name = name
        self.net = net
        self.capacity = capacity
        self.idle_timeout = idle_timeout
        self.hw_offload = hw_offload
        self.hw_capacity = hw_capacity
        self.fdb: Fdb = {}
        self.cache: dict[FlowKey, FlowCacheEntry] = {}
        self.hw_table: dict[FlowKey, FlowAction] = {}
        self.stats = SwitchStats()
        self._by_dst: dict[tuple[int, MacAddress], set[FlowKey]] = defaultdict(set)

    # -- slow path ---------------------------------------------------------

    def classify(self, key: FlowKey) -> FlowAction:
        return classify(key, self.fdb, self.net)

    def learn(self, vni: int, mac: MacAddress, port: PortId, tick: int) -> bool:
        """Record ``mac`` behind ``port``. Returns True when forwarding state changed."""
        entry = self.fdb.get((vni, mac))
        if entry is not None and entry.port == port:
            entry.last_seen_tick = tick
            return False
        self.fdb[(vni, mac)] = FdbEntry(port, tick)
        self.revalidate(self._by_dst.get((vni, mac), ()))
        return True

    # -- fast path ---------------------------------------------------------

    def lookup(self, key: FlowKey) -> FlowCacheEntry | None:
        return self.cache.get(key)

    def _key_for(self, port: PortId, frame) -> FlowKey | None:
        if isinstance(frame, (bytes, bytearray)):
            try:
                frame = decode_frame(frame)
            except CodecError:
                return None
        if not isinstance(frame, InnerFrame) or frame.eth.src.is_multicast:
            return None
        return FlowKey.from_frame(port, frame)

    def process_packet(self, port: PortId, frame, tick: int,
                       vni: int | None = None) -> tuple[FlowAction, bool]:
        action, upcalls = self.process_batch(port, frame, tick, 1, vni)
        return action, upcalls == 1

    def process_batch(self, port: PortId, frame, tick: int, count: int,
                      vni: int | None = None) -> tuple[FlowAction, int]:
        """Forward ``count`` identical packets arriving in the same tick.

        Equivalent to ``count`` calls of :meth:`process_packet`; returns the
        action and the number of upcalls (0 or 1).
        """
        key = self._key_for(port, frame)
        if key is None:
            self.stats.drops["malformed"] += count
            return Drop("malformed"), 0
        if vni is not None:
            key = FlowKey(key.in_port, key.src_mac, key.dst_mac, key.ethertype, vni)
        return self._forward(key, tick, count)

    def _forward(self, key: FlowKey, tick: int, count: int) -> tuple[FlowAction, int]:
        if count <= 0:
            return self.classify(key), 0
        entry = self.cache.get(key)
        upcalls = 0
        if entry is None:
            upcalls = 1
            self.stats.upcalls += 1
            action = self.classify(key)
            entry = self._install(key, action, tick)
            hits = count - 1
            scope = self.net.scope(key)
            if (scope is not None and key.in_port != self.net.vtep_port
                    and key.in_port != self.net.uplink_port):
                self.learn(scope, key.src_mac, key.in_port, tick)
        else:
            hits = count
        if hits:
            entry.hit_count += hits
            entry.last_hit_tick = tick
            self.stats.fast_path_hits += hits
        self._account(entry.action, count)
        return entry.action, upcalls

    def _account(self, action: FlowAction, count: int) -> None:
        if isinstance(action, Output):
            self.stats.outputs += count
        elif isinstance(action, Encap):
            self.stats.encaps += count
        elif isinstance(action, Decap):
            self.stats.decaps += count
        elif isinstance(action, Flood):
            self.stats.flood_count += count
        else:
            self.stats.drops[action.reason] += count

    def _install(self, key: FlowKey, action: FlowAction, tick: int) -> FlowCacheEntry:
        if len(self.cache) >= self.capacity:
            victim = min(self.cache.values(), key=lambda e: (e.last_hit_tick, e.key))
            self._remove(victim.key)
            self.stats.evictions += 1
        entry = FlowCacheEntry(key, action, 0, tick, tick)
        self.cache[key] = entry
        scope = self.net.scope(key)
        if scope is not None:
            self._by_dst[(scope, key.dst_mac)].add(key)
        return entry

    def _remove(self, key: FlowKey) -> None:
        self.cache.pop(key, None)
        self.hw_table.pop(key, None)
        scope = self.net.scope(key)
        bucket = self._by_dst.get((scope, key.dst_mac))
        if bucket is not None:
            bucket.discard(key)
            if not bucket:
                del self._by_dst[(scope, key.dst_mac)]

    def revalidate(self, keys: Iterable[FlowKey] | None = None) -> int:
        """Drop cached entries whose action no longer matches a fresh classification."""
        candidates = list(self.cache) if keys is None else list(keys)
        removed = 0
        for key in candidates:
            entry = self.cache.get(key)
            if entry is not None and entry.action != self.classify(key):
                self._remove(key)
                removed += 1
        self.stats.revalidated += removed
        return removed

    def evict_and_revalidate(self, tick: int) -> int:
        idle = [k for k, e in self.cache.items() if tick - e.last_hit_tick > self.idle_timeout]
        for key in idle:
            self._remove(key)
        self.stats.evictions += len(idle)
        removed = len(idle) + self.revalidate()
        while len(self.cache) > self.capacity:
            victim = min(self.cache.values(), key=lambda e: (e.last_hit_tick, e.key))
            self._remove(victim.key)
            self.stats.evictions += 1
            removed += 1
        return removed

    # -- hardware offload --------------------------------------------------

    def hw_offload_lookup(self, key: FlowKey) -> FlowAction | None:
        return self.hw_table.get(key)

    def hw_process(self, port: PortId, frame, tick: int, count: int = 1,
                   vni: int | None = None) -> HwResult:
        """Forward through the hardware table, escalating misses to the software path."""
        if not self.hw_offload:
            raise RuntimeError(f"switch {self.name} is not in hardware-offload mode")
        key = self._key_for(port, frame)
        if key is None:
            self.stats.drops["malformed"] += count
            return HwResult(Drop("malformed"), 0, 0, 0)
        if vni is not None:
            key = FlowKey(key.in_port, key.src_mac, key.dst_mac, key.ethertype, vni)
        if count <= 0:
            return HwResult(self.classify(key), 0, 0, 0)
        action = self.hw_table.get(key)
        if action is not None:
            self._hw_hits(key, tick, count)
            return HwResult(action, 0, 0, count)
        action, upcalls = self._forward(key, tick, 1)
        rest = count - 1
        if key in self.cache and len(self.hw_table) < self.hw_capacity:
            self.hw_table[key] = action
            if rest:
                self._hw_hits(key, tick, rest)
            return HwResult(action, upcalls, 1, rest)
        if rest:
            self._forward(key, tick, rest)
        return HwResult(action, upcalls, count, 0)

    def _hw_hits(self, key: FlowKey, tick: int, count: int) -> None:
        entry = self.cache[key]
        entry.hit_count += count
        entry.last_hit_tick = tick
        self.stats.fast_path_hits += count
        self.stats.hw_hits += count
        self._account(entry.action, count)

    # -- delivery helpers --------------------------------------------------

    def flood_ports(self, action: Flood) -> list[PortId]:
        return [p for p in self.net.members(action.vni) if p != action.exclude]

    def flood_remotes(self, action: Flood) -> list[VtepAddress]:
        if action.exclude == self.net.vtep_port:
            return []  # split horizon: tunnel traffic is never re-flooded to tunnels
        return list(self.net.remote_vteps.get(action.vni, []))

    def dump(self) -> dict:
        """Structured snapshot of FDB, cache, hardware table and stats."""
        fdb = [
            {"vni": vni, "mac": str(mac), "port": e.port, "last_seen": e.last_seen_tick}
            for (vni, mac), e in sorted(self.fdb.items(), key=lambda kv: (kv[0][0], kv[0][1].octets))
        ]
        cache = [
            {"key": _key_dict(e.key), "action": str(e.action), "hits": e.hit_count,
             "installed": e.install_tick, "last_hit": e.last_hit_tick}
            for e in sorted(self.cache.values(), key=lambda e: e.key)
        ]
        hw = [{"key": _key_dict(k), "action": str(a)} for k, a in sorted(self.hw_table.items())]
        return {"name": self.name, "fdb": fdb, "cache": cache, "hw_table": hw,
                "stats": self.stats.as_dict()}


def _key_dict(key: FlowKey) -> dict:
    return {"in_port": key.in_port, "src": str(key.src_mac), "dst": str(key.dst_mac),
            "ethertype": key.ethertype, "vni": key.vni}

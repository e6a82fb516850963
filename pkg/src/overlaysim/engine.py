"""Quantized-time execution engine.

Each tick, every pipeline moves as many whole segments as its stream,
window, the shared wire and the CPU pools allow.  Stage costs are charged
to the pool each stage runs on; interrupts, upcalls and context switches
are counted alongside.

Pipelines are independent of absolute tick numbers once every flow is
installed, so the engine detects when the per-tick state starts to repeat
and fast-forwards whole periods instead of simulating each tick.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
from bisect import bisect_right
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Iterable, TextIO

from .codec import ETHERTYPE_IPV4, VXLAN_OVERHEAD, EthernetHeader, InnerFrame
from .switch import FlowKey, FlowSwitch
from .topology import PipelineStage, PlacementMode, StageKind, Topology, build_pipeline


class EngineError(RuntimeError):
    pass


STAGE_COST_FIELDS = ("endpoint_tx", "endpoint_rx", "nic_tx", "nic_rx", "bridge_switch",
                     "vxlan_encap", "vxlan_decap", "vf_dma", "representor")


@dataclass(frozen=True)
class CostModel:
    """Per-packet cycle charges and per-event counts.

    ``vf_dma`` is the SR-IOV overhead on top of the VF's own netdev driver
    work, which costs the same as ``nic_tx``/``nic_rx``.
    """

    endpoint_tx: float = 300.0
    endpoint_rx: float = 300.0
    nic_tx: float = 200.0
    nic_rx: float = 200.0
    bridge_switch: float = 350.0
    vxlan_encap: float = 500.0
    vxlan_decap: float = 500.0
    vf_dma: float = 150.0
    representor: float = 100.0
    upcall_cost: float = 20000.0
    upcall_context_switches: int = 2
    syscall_cost: float = 0.0
    wakeup_context_switches: int = 1
    interrupt_cost: float = 4000.0
    interrupt_coalesce_batch: int = 64
    hw_fastpath_cost: float = 0.0
    # deferred (softirq) hand-offs through the VXLAN device, per flow per tick
    handoff_context_switches: int = 1
    softirq_batch: int = 8
    count_sender_switches: bool = False

    def __post_init__(self):
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if not isinstance(v, bool) and v < 0:
                raise ValueError(f"cost {f.name} must be non-negative")
        if self.interrupt_coalesce_batch < 1 or self.softirq_batch < 1:
            raise ValueError("batch sizes must be at least 1")

    def stage_cost(self, kind: StageKind, side: str = "tx") -> float:
        if kind is StageKind.WIRE:
            return 0.0
        if kind is StageKind.VF_DMA:
            driver = self.nic_tx if side == "tx" else self.nic_rx
            return driver + self.vf_dma
        return float(getattr(self, kind.value))

    def scaled(self, multipliers: dict[str, float]) -> "CostModel":
        unknown = set(multipliers) - {f.name for f in dataclasses.fields(self)}
        if unknown:
            raise KeyError(f"unknown cost fields {sorted(unknown)}")
        return dataclasses.replace(self, **{k: getattr(self, k) * m for k, m in multipliers.items()})

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "CostModel":
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = set(data) - set(known)
        if unknown:
            raise KeyError(f"unknown cost model keys {sorted(unknown)}")
        return cls(**data)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "CostModel":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass(frozen=True)
class EngineParams:
    tick_us: float = 10.0
    host_cores: int = 32
    host_ghz: float = 2.5
    dpu_cores: int = 8
    dpu_ghz: float = 2.0
    link_gbps: float = 100.0
    # per-stream send window; None removes the window bound
    window_bytes: int | None = 229376
    base_rtt_us: float = 20.0
    revalidate_interval: int = 100
    fast_forward: bool = True

    @property
    def tick_s(self) -> float:
        return self.tick_us * 1e-6

    @property
    def link_bytes_per_tick(self) -> int:
        return round(self.link_gbps * 1e9 * self.tick_s / 8)


@dataclass
class ResourcePool:
    name: str
    capacity: float  # cycles per tick
    hz: float
    consumed: float = 0.0

    @property
    def is_host(self) -> bool:
        return self.name.startswith("host-")

    @classmethod
    def for_cores(cls, name: str, cores: int, ghz: float, tick_s: float) -> "ResourcePool":
        return cls(name, cores * ghz * 1e9 * tick_s, ghz * 1e9)


def segment_sizes(message_bytes: int, segment_bytes: int) -> list[int]:
    if message_bytes < 1 or segment_bytes < 1:
        raise ValueError("message and segment sizes must be positive")
    k = -(-message_bytes // segment_bytes)
    return [segment_bytes] * (k - 1) + [message_bytes - (k - 1) * segment_bytes]


@dataclass
class MessageStream:
    """One sender's message queue. ``rate_bytes_per_tick=None`` means saturating."""

    pid: int
    src: str
    dst: str
    message_bytes: int = 8192
    segment_bytes: int = 1450
    depth: int = 4
    rate_bytes_per_tick: float | None = None
    start_tick: int = 0
    queue_msgs: int = 0
    offset: int = 0
    window_credit: int = 0
    share_credit: int = 0
    offer_credit: float = 0.0
    offered: int = 0
    delivered: int = 0
    dropped: int = 0
    sizes: list[int] = field(init=False, repr=False)
    cum: list[int] = field(init=False, repr=False)

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("queue depth must be at least 1")
        self.sizes = segment_sizes(self.message_bytes, self.segment_bytes)
        self.cum = [0]
        for s in self.sizes:
            self.cum.append(self.cum[-1] + s)

    @property
    def saturating(self) -> bool:
        return self.rate_bytes_per_tick is None

    @property
    def k(self) -> int:
        return len(self.sizes)

    def span_bytes(self, n: int) -> int:
        q, r = divmod(self.offset + n, self.k)
        return q * self.message_bytes + self.cum[r] - self.cum[self.offset]

    def fit(self, budget: int) -> int:
        """Most segments whose bytes fit in ``budget``, starting at the current offset."""
        q, rem = divmod(self.cum[self.offset] + budget, self.message_bytes)
        return q * self.k + bisect_right(self.cum, rem) - 1 - self.offset

    def starts(self, n: int) -> int:
        k = self.k
        return (self.offset + n + k - 1) // k - (self.offset + k - 1) // k

    def completions(self, n: int) -> int:
        return (self.offset + n) // self.k

    def available(self) -> int | None:
        if self.saturating:
            return None
        return self.queue_msgs * self.k - self.offset

    def queued_bytes(self) -> int:
        return self.queue_msgs * self.message_bytes - self.cum[self.offset]

    def refill(self) -> tuple[int, int]:
        """Top up the queue at the start of a tick; returns (offered, dropped) bytes."""
        offered = dropped = 0
        if self.saturating:
            while self.queue_msgs < self.depth:
                self.queue_msgs += 1
                offered += self.message_bytes
        else:
            self.offer_credit += self.rate_bytes_per_tick
            while self.offer_credit >= self.message_bytes:
                self.offer_credit -= self.message_bytes
                offered += self.message_bytes
                if self.queue_msgs < self.depth:
                    self.queue_msgs += 1
                else:
                    dropped += self.message_bytes
        self.offered += offered
        self.dropped += dropped
        return offered, dropped

    def advance(self, n: int) -> tuple[int, int, int]:
        """Send ``n`` segments; returns (bytes, messages started, messages completed)."""
        nbytes = self.span_bytes(n)
        started, done = self.starts(n), self.completions(n)
        self.offset = (self.offset + n) % self.k
        self.queue_msgs -= done
        self.delivered += nbytes
        self.window_credit -= nbytes
        return nbytes, started, done

    def state(self) -> tuple:
        return (self.queue_msgs, self.offset, self.window_credit, self.share_credit,
                self.offer_credit)


@dataclass
class _Hop:
    switch: FlowSwitch
    in_port: int
    vni: int | None
    frame: InnerFrame
    pool: str
    sw_cost: float  # DPU stage cycles per packet on the software path
    hw: bool

    @property
    def key(self) -> FlowKey:
        return FlowKey.from_frame(self.in_port, self.frame, self.vni)


@dataclass
class Flow:
    stream: MessageStream
    stages: list[PipelineStage]
    static: dict[str, float]
    hops: list[_Hop]
    tunnels: list[tuple[str, int | None]]  # (pool, hop index for DPU software path)
    nics: list[tuple[str, str]]
    sender_pool: str
    receiver_pool: str
    link: tuple[str, str]
    overhead: int


@dataclass
class _Plan:
    per_seg: dict[str, float]
    first: dict[str, float]
    rate: int | None  # window bytes per tick


class Engine:
    def __init__(self, topology: Topology, streams: Iterable[MessageStream],
                 cost: CostModel, params: EngineParams = EngineParams()):
        self.topology = topology
        self.cost = cost
        self.params = params
        tick_s = params.tick_s
        self.pools: dict[str, ResourcePool] = {}
        for host in topology.hosts.values():
            self.pools[host.host_pool] = ResourcePool.for_cores(
                host.host_pool, params.host_cores, params.host_ghz, tick_s)
            if host.dpu_pool:
                self.pools[host.dpu_pool] = ResourcePool.for_cores(
                    host.dpu_pool, params.dpu_cores, params.dpu_ghz, tick_s)
        self.flows = [self._make_flow(s) for s in streams]
        self.trace: csv.writer | None = None

    # -- construction ------------------------------------------------------

    def _make_flow(self, stream: MessageStream) -> Flow:
        topo = self.topology
        src, dst = topo.endpoints[stream.src], topo.endpoints[stream.dst]
        stages = build_pipeline(topo, src, dst)
        frame = InnerFrame(EthernetHeader(dst.mac, src.mac, ETHERTYPE_IPV4))
        static: dict[str, float] = defaultdict(float)
        hops: list[_Hop] = []
        hop_of: dict[int, int] = {}
        tunnels: list[tuple[str, int | None]] = []
        nics: list[tuple[str, str]] = []
        dpu = topo.mode is PlacementMode.DPU_OFFLOAD
        for st in stages:
            if st.pool is None:
                continue
            c = self.cost.stage_cost(st.kind, st.side)
            if st.nic:
                nics.append((st.nic, st.pool))
            if dpu and st.switch is not None:
                sid = id(st.switch)
                if sid not in hop_of:
                    hop_of[sid] = len(hops)
                    hops.append(_Hop(st.switch, st.in_port, st.vni, frame, st.pool, 0.0, True))
                hops[hop_of[sid]].sw_cost += c
                if st.kind in (StageKind.VXLAN_ENCAP, StageKind.VXLAN_DECAP):
                    tunnels.append((st.pool, hop_of[sid]))
                continue
            static[st.pool] += c
            if st.kind is StageKind.BRIDGE_SWITCH:
                hops.append(_Hop(st.switch, st.in_port, st.vni, frame, st.pool, 0.0, False))
            if st.kind in (StageKind.VXLAN_ENCAP, StageKind.VXLAN_DECAP):
                tunnels.append((st.pool, None))
        tx = next(s for s in stages if s.kind is StageKind.ENDPOINT_TX)
        rx = next(s for s in stages if s.kind is StageKind.ENDPOINT_RX)
        return Flow(stream, stages, dict(static), hops, tunnels, nics, tx.pool, rx.pool,
                    (src.host, dst.host), VXLAN_OVERHEAD if topo.mode.encapsulates else 0)

    # -- per-tick planning -------------------------------------------------

    def _plan(self, flow: Flow, pending: Counter) -> _Plan:
        per_seg = dict(flow.static)
        first: dict[str, float] = defaultdict(float)
        for hop in flow.hops:
            key = hop.key
            if key not in hop.switch.cache:
                first[hop.pool] += self.cost.upcall_cost
            if not hop.hw:
                continue
            if key in hop.switch.hw_table:
                continue
            sw = hop.switch
            if sw.hw_capacity - len(sw.hw_table) - pending[id(sw)] > 0:
                pending[id(sw)] += 1
                first[hop.pool] += hop.sw_cost
            else:
                per_seg[hop.pool] = per_seg.get(hop.pool, 0.0) + hop.sw_cost
        rate = None
        p = self.params
        if p.window_bytes is not None:
            latency = sum(c / self.pools[pool].hz for pool, c in per_seg.items())
            rate = int(p.window_bytes * p.tick_s / (p.base_rtt_us * 1e-6 + latency))
        return _Plan(per_seg, first, rate)

    def _demand(self, flows, plans, ns):
        """Cycles per pool and wire bytes per link for segment counts ``ns``."""
        cycles: dict[str, float] = defaultdict(float)
        wire: dict[tuple[str, str], int] = defaultdict(int)
        nic_pkts: dict[tuple[str, str], int] = defaultdict(int)
        for flow, plan, n in zip(flows, plans, ns):
            if n <= 0:
                continue
            for pool, c in plan.per_seg.items():
                cycles[pool] += c * n
            for pool, c in plan.first.items():
                cycles[pool] += c
            if self.cost.syscall_cost:
                cycles[flow.sender_pool] += self.cost.syscall_cost * flow.stream.starts(n)
            for nic in flow.nics:
                nic_pkts[nic] += n
            wire[flow.link] += flow.stream.span_bytes(n) + n * flow.overhead
        b = self.cost.interrupt_coalesce_batch
        for (nic, pool), pk in nic_pkts.items():
            cycles[pool] += -(-pk // b) * self.cost.interrupt_cost
        return cycles, wire

    def _feasible(self, flows, plans, ns) -> bool:
        cycles, wire = self._demand(flows, plans, ns)
        link = self.params.link_bytes_per_tick
        if any(v > link for v in wire.values()):
            return False
        return all(v <= self.pools[p].capacity + 1e-6 for p, v in cycles.items())

    def _admit(self, flows, plans, limits) -> list[int]:
        """Hold back first packets whose slow-path cost does not fit this tick."""
        ns = [0] * len(flows)
        waiting = []
        for i, plan in enumerate(plans):
            if plan.first and limits[i] > 0:
                waiting.append(i)
        if not waiting:
            return limits
        limits = list(limits)
        for i in waiting:
            ns[i] = 1
            if not self._feasible(flows, plans, ns):
                ns[i] = 0
                limits[i] = 0
        return limits

    def _allocate(self, flows, plans, limits) -> tuple[list[int], int | None]:
        """Deficit-style fair share of the contended resources.

        Every flow may send whole segments up to ``min(limit, carry + share)``
        where the common share is the largest that fits the wire and all
        pools.  Remaining room then goes one segment at a time to the flows
        owed the most carry.  Returns the segment counts and the share (None
        when nothing was contended).
        """
        streams = [f.stream for f in flows]
        full = [s.fit(lim) for s, lim in zip(streams, limits)]
        if self._feasible(flows, plans, full):
            return full, None

        def counts(level):
            return [s.fit(min(lim, s.share_credit + level)) for s, lim in zip(streams, limits)]

        lo, hi = 0, max(limits)
        while lo < hi:
            mid = (lo + hi + 1) // 2
            if self._feasible(flows, plans, counts(mid)):
                lo = mid
            else:
                hi = mid - 1
        ns = counts(lo)
        owed = sorted(range(len(flows)),
                      key=lambda i: (streams[i].span_bytes(ns[i]) - streams[i].share_credit, i))
        for i in owed:
            if ns[i] < full[i]:
                ns[i] += 1
                if not self._feasible(flows, plans, ns):
                    ns[i] -= 1
        return ns, lo

    # -- stepping ----------------------------------------------------------

    def step(self, tick: int) -> Counter:
        """Advance one tick and return its ledger delta."""
        delta: Counter = Counter()
        active = [f for f in self.flows if tick >= f.stream.start_tick]
        pending: Counter = Counter()
        plans = []
        limits = []
        for flow in active:
            s = flow.stream
            offered, dropped = s.refill()
            delta["offered", s.pid] += offered
            delta["dropped", s.pid] += dropped
            plan = self._plan(flow, pending)
            plans.append(plan)
            limit = self.params.link_bytes_per_tick if s.saturating else s.queued_bytes()
            if plan.rate is not None:
                s.window_credit = min(s.window_credit + plan.rate, self.params.window_bytes)
                limit = min(limit, s.window_credit)
            limits.append(max(limit, 0))
        if active:
            limits = self._admit(active, plans, limits)
            ns, share = self._allocate(active, plans, limits)
        else:
            ns, share = [], None
        squeezed = share is not None
        for flow, n in zip(active, ns):
            s = flow.stream
            if share is None:
                s.share_credit = 0
            else:
                carry = s.share_credit + share - s.span_bytes(n)
                s.share_credit = min(carry, s.segment_bytes)

        nic_pkts: dict[tuple[str, str], int] = defaultdict(int)
        for flow, n in zip(active, ns):
            if n > 0:
                self._commit(flow, n, tick, delta, nic_pkts, squeezed)
        b = self.cost.interrupt_coalesce_batch
        for (nic, pool), pk in sorted(nic_pkts.items()):
            irq = -(-pk // b)
            delta["intr", pool] += irq
            delta["cycles", pool] += irq * self.cost.interrupt_cost
        for name, pool in self.pools.items():
            pool.consumed = delta["cycles", name]
            if pool.consumed > pool.capacity + 1e-6:
                raise EngineError(f"pool {name} over capacity at tick {tick}")
        interval = self.params.revalidate_interval
        if interval and tick and tick % interval == 0:
            for sw in self.topology.switches.values():
                sw.evict_and_revalidate(tick)
        if self.trace is not None:
            for name, pool in self.pools.items():
                self.trace.writerow([tick, name, f"{delta['cycles', name]:.1f}",
                                     f"{pool.capacity:.1f}", delta["ctx", name],
                                     delta["intr", name]])
        return delta

    def _commit(self, flow: Flow, n: int, tick: int, delta: Counter,
                nic_pkts, squeezed: bool) -> None:
        cost = self.cost
        for pool, c in flow.static.items():
            delta["cycles", pool] += c * n
        sw_packets: list[int] = []
        for hop in flow.hops:
            if hop.hw:
                res = hop.switch.hw_process(hop.in_port, hop.frame, tick, n, hop.vni)
                upcalls, sw_pk = res.upcalls, res.sw_packets
                delta["cycles", hop.pool] += sw_pk * hop.sw_cost
            else:
                _action, upcalls = hop.switch.process_batch(hop.in_port, hop.frame, tick, n, hop.vni)
                sw_pk = n
            sw_packets.append(sw_pk)
            if upcalls:
                delta["upcalls", hop.pool] += upcalls
                delta["cycles", hop.pool] += upcalls * cost.upcall_cost
                delta["ctx", hop.pool] += upcalls * cost.upcall_context_switches
        for pool, hop_index in flow.tunnels:
            pk = n if hop_index is None else sw_packets[hop_index]
            if pk:
                delta["ctx", pool] += -(-pk // cost.softirq_batch) * cost.handoff_context_switches
        for nic in flow.nics:
            nic_pkts[nic] += n
        s = flow.stream
        nbytes, started, done = s.advance(n)
        if s.saturating and done:
            # a saturating sender tops its queue back up as messages drain
            s.queue_msgs += done
            s.offered += done * s.message_bytes
            delta["offered", s.pid] += done * s.message_bytes
        if cost.syscall_cost:
            delta["cycles", flow.sender_pool] += started * cost.syscall_cost
        if cost.count_sender_switches and squeezed:
            delta["ctx", flow.sender_pool] += started
        delta["ctx", flow.receiver_pool] += done * cost.wakeup_context_switches
        delta["bytes", s.pid] += nbytes
        delta["pkts", s.pid] += n
        delta["msgs", s.pid] += done
        delta["wire", s.pid] += nbytes + n * flow.overhead

    # -- running -----------------------------------------------------------

    def _state(self) -> tuple:
        hops = []
        for f in self.flows:
            for hop in f.hops:
                key = hop.key
                hops.append((key in hop.switch.cache, key in hop.switch.hw_table))
        return (tuple(f.stream.state() for f in self.flows), tuple(hops))

    def run(self, duration_ticks: int, warmup_ticks: int = 0,
            trace: TextIO | None = None) -> "RunLedger":
        if duration_ticks < warmup_ticks:
            raise EngineError(f"duration {duration_ticks} shorter than warmup {warmup_ticks}")
        if trace is not None:
            self.trace = csv.writer(trace)
            self.trace.writerow(["tick", "pool", "cycles", "capacity", "ctx", "interrupts"])
        totals: Counter = Counter()
        measured: Counter = Counter()
        fast = self.params.fast_forward and trace is None and self.flows
        idle = min((sw.idle_timeout for sw in self.topology.switches.values()), default=10**9)
        seen: dict[tuple, int] = {}
        history: list[Counter] = []
        t = 0
        while t < duration_ticks:
            if fast and t >= warmup_ticks:
                st = self._state()
                if st in seen:
                    t = self._fast_forward(t, duration_ticks, history[seen[st]:],
                                           totals, measured, idle)
                    fast = False
                    continue
                seen[st] = len(history)
            delta = self.step(t)
            totals.update(delta)
            if t >= warmup_ticks:
                measured.update(delta)
                if fast:
                    history.append(delta)
                    if len(history) > 50000:
                        fast = False
            t += 1
        self.trace = None
        return RunLedger(self, measured, totals, duration_ticks - warmup_ticks)

    def _fast_forward(self, t, duration, period, totals, measured, idle) -> int:
        p = len(period)
        reps = (duration - t) // p
        pkts = Counter()
        for d in period:
            for (kind, pid), v in d.items():
                if kind == "pkts":
                    pkts[pid] += v
        quiet = all(_longest_gap([d["pkts", f.stream.pid] for d in period]) * 2 < idle
                    for f in self.flows)
        if reps < 1 or not quiet:
            return t
        summed: Counter = Counter()
        for d in period:
            summed.update(d)
        bulk = Counter({k: v * reps for k, v in summed.items()})
        totals.update(bulk)
        measured.update(bulk)
        last = t + reps * p - 1
        for f in self.flows:
            s = f.stream
            s.offered += bulk["offered", s.pid]
            s.dropped += bulk["dropped", s.pid]
            s.delivered += bulk["bytes", s.pid]
            count = pkts[s.pid] * reps
            if count:
                for hop in f.hops:
                    if hop.hw:
                        hop.switch.hw_process(hop.in_port, hop.frame, last, count, hop.vni)
                    else:
                        hop.switch.process_batch(hop.in_port, hop.frame, last, count, hop.vni)
        return t + reps * p


def _longest_gap(counts: list[int]) -> int:
    """Longest run of zero entries, treating the list as cyclic."""
    if not any(counts):
        return 10**9
    best = run = 0
    for c in counts + counts:
        run = run + 1 if c == 0 else 0
        best = max(best, run)
    return best


@dataclass
class RunLedger:
    """Counters accumulated over a run; ``measured`` excludes warmup."""

    engine: Engine
    measured: Counter
    totals: Counter
    measured_ticks: int

    def pool_sum(self, kind: str, host_only: bool = True, counter: Counter | None = None) -> float:
        c = self.measured if counter is None else counter
        return sum(c[kind, name] for name, p in self.engine.pools.items()
                   if p.is_host or not host_only)

    def flow_sum(self, kind: str, counter: Counter | None = None) -> int:
        c = self.measured if counter is None else counter
        return sum(c[kind, f.stream.pid] for f in self.engine.flows)

    @property
    def upcalls(self) -> int:
        return sum(sw.stats.upcalls for sw in self.engine.topology.switches.values())

    def conservation(self) -> dict[str, int]:
        streams = [f.stream for f in self.engine.flows]
        return {
            "offered": sum(s.offered for s in streams),
            "delivered": sum(s.delivered for s in streams),
            "queued": sum(s.queued_bytes() for s in streams),
            "dropped": sum(s.dropped for s in streams),
        }


def user_cpu_percent(ledger: RunLedger) -> float:
    """Share of host CPU left to a stress workload that soaks up every idle cycle.

    Averaged over host pools only; DPU cores do not run user work.
    """
    hosts = [p for p in ledger.engine.pools.values() if p.is_host]
    ticks = ledger.measured_ticks
    if not hosts or ticks <= 0:
        return 100.0
    shares = [(p.capacity * ticks - ledger.measured["cycles", p.name]) / (p.capacity * ticks)
              for p in hosts]
    return 100.0 * sum(shares) / len(shares)

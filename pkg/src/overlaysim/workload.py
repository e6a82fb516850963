"""Client/server message workloads and the sweep driver."""

from __future__ import annotations

import random
from dataclasses import dataclass
from typing import TYPE_CHECKING, Iterable, Iterator

from .engine import Engine, MessageStream
from .metrics import ExperimentResult, normalize
from .topology import Topology, build_topology

if TYPE_CHECKING:
    from .config import ExperimentConfig, RunConfig


@dataclass(frozen=True)
class WorkloadSpec:
    message_bytes: int = 8192
    segment_bytes: int = 1450
    queue_depth: int = 4
    rate_gbps: float | None = None  # per stream; None saturates
    bidirectional: bool = False
    start_jitter_ticks: int = 0

    def __post_init__(self):
        if self.message_bytes < 1 or self.segment_bytes < 1:
            raise ValueError("message and segment sizes must be positive")
        if self.queue_depth < 1:
            raise ValueError("queue depth must be at least 1")
        if self.rate_gbps is not None and self.rate_gbps <= 0:
            raise ValueError("rate must be positive")
        if self.start_jitter_ticks < 0:
            raise ValueError("start jitter must be non-negative")


def generate(spec: WorkloadSpec, topology: Topology, seed: int = 0,
             tick_s: float = 10e-6) -> list[MessageStream]:
    """One stream per client/server pair, plus the reverse when bidirectional.

    The seed only matters when start jitter is enabled.
    """
    rng = random.Random(seed)
    rate = None if spec.rate_gbps is None else spec.rate_gbps * 1e9 * tick_s / 8
    directions = []
    for client, server in topology.pairs():
        directions.append((client.id, server.id))
        if spec.bidirectional:
            directions.append((server.id, client.id))
    streams = []
    for pid, (src, dst) in enumerate(directions):
        start = rng.randint(0, spec.start_jitter_ticks) if spec.start_jitter_ticks else 0
        streams.append(MessageStream(pid, src, dst, spec.message_bytes, spec.segment_bytes,
                                     spec.queue_depth, rate, start))
    return streams


def build_engine(run: "RunConfig") -> Engine:
    topo = build_topology(run)
    streams = generate(run.workload, topo, run.seed, run.engine.tick_s)
    return Engine(topo, streams, run.cost, run.engine)


def run_experiment(run: "RunConfig", trace=None) -> ExperimentResult:
    engine = build_engine(run)
    ledger = engine.run(run.duration_ticks, run.warmup_ticks, trace=trace)
    return normalize(ledger, run.mode, run.pairs, run.seed, run.digest())


def sweep(config: "ExperimentConfig", runs: Iterable["RunConfig"] | None = None) -> Iterator[ExperimentResult]:
    """Runs every (mode, pairs) point in order: modes outer, pair counts inner."""
    for run in runs if runs is not None else config.runs():
        yield run_experiment(run)

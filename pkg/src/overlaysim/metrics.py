"""Normalization of run ledgers into per-experiment result rows."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from decimal import ROUND_HALF_EVEN, Decimal

from .engine import RunLedger, user_cpu_percent
from .topology import PlacementMode

CSV_COLUMNS = ("mode", "pairs", "throughput_gbps", "ctx_per_s", "intr_per_s", "ctx_per_gb",
               "intr_per_gb", "user_cpu_pct", "upcalls", "seed", "config_digest")
FLOAT_COLUMNS = ("throughput_gbps", "ctx_per_s", "intr_per_s", "ctx_per_gb", "intr_per_gb",
                 "user_cpu_pct")
PLACES = 6


def round6(x: float | None) -> float | None:
    if x is None:
        return None
    return float(Decimal(repr(float(x))).quantize(Decimal(1).scaleb(-PLACES), ROUND_HALF_EVEN))


def per_gb(per_s: float, gbps: float) -> float | None:
    """Events per delivered gigabit; None when nothing was delivered."""
    return per_s / gbps if gbps > 0 else None


@dataclass
class ExperimentResult:
    mode: str
    pairs: int
    throughput_gbps: float
    ctx_per_s: float
    intr_per_s: float
    ctx_per_gb: float | None
    intr_per_gb: float | None
    user_cpu_pct: float
    upcalls: int
    seed: int
    config_digest: str
    breakdown: dict = field(default_factory=dict, compare=False)

    def row(self) -> dict:
        d = asdict(self)
        d.pop("breakdown")
        return d


def normalize(ledger: RunLedger, mode: PlacementMode | str, pairs: int, seed: int,
              digest: str) -> ExperimentResult:
    """Turn raw counters into rates.

    Context switches and interrupts count host pools only; the DPU's own
    figures are kept in ``breakdown``.  Per-gigabit figures are None when
    nothing was delivered.
    """
    seconds = ledger.measured_ticks * ledger.engine.params.tick_s
    if seconds <= 0:
        raise ValueError("no measured ticks")
    delivered = ledger.flow_sum("bytes")
    gbps = delivered * 8 / seconds / 1e9
    ctx = ledger.pool_sum("ctx")
    intr = ledger.pool_sum("intr")
    per_pool = {}
    for name, pool in ledger.engine.pools.items():
        per_pool[name] = {
            "cycles_per_s": round6(ledger.measured["cycles", name] / seconds),
            "utilization": round6(ledger.measured["cycles", name]
                                  / (pool.capacity * ledger.measured_ticks)),
            "ctx_per_s": round6(ledger.measured["ctx", name] / seconds),
            "intr_per_s": round6(ledger.measured["intr", name] / seconds),
            "upcalls": ledger.totals["upcalls", name],
        }
    switches = {name: sw.stats.as_dict() for name, sw in ledger.engine.topology.switches.items()}
    return ExperimentResult(
        mode=PlacementMode.parse(mode).value,
        pairs=int(pairs),
        throughput_gbps=round6(gbps),
        ctx_per_s=round6(ctx / seconds),
        intr_per_s=round6(intr / seconds),
        ctx_per_gb=round6(per_gb(ctx / seconds, gbps)),
        intr_per_gb=round6(per_gb(intr / seconds, gbps)),
        user_cpu_pct=round6(user_cpu_percent(ledger)),
        upcalls=ledger.upcalls,
        seed=int(seed),
        config_digest=digest,
        breakdown={"pools": per_pool, "switches": switches,
                   "conservation": ledger.conservation(),
                   "measured_seconds": seconds},
    )

"""Fitting cost-model multipliers to single-pair throughput anchors."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field

from .config import CalibrationTargets, ExperimentConfig
from .engine import CostModel
from .topology import PlacementMode
from .workload import run_experiment

BASE_GROUP = ("endpoint_tx", "endpoint_rx", "nic_tx", "nic_rx", "syscall_cost")
OVERLAY_GROUP = ("bridge_switch", "vxlan_encap", "vxlan_decap")
DPU_GROUP = ("vf_dma", "representor")
NO_EFFECT_TOLERANCE = 0.05
log = logging.getLogger(__name__)
LOG_RANGE = (-7.0, 7.0)  # natural-log bounds on a multiplier


class CalibrationError(ValueError):
    pass


@dataclass
class Calibration:
    cost: CostModel
    multipliers: dict[str, float] = field(default_factory=dict)
    achieved: dict[str, float] = field(default_factory=dict)


def _throughput(config: ExperimentConfig, mode: PlacementMode, cost: CostModel, ticks: int) -> float:
    run = dataclasses.replace(config.run_config(mode, 1), cost=cost, duration_ticks=ticks,
                              warmup_ticks=min(config.warmup_ticks, ticks // 4))
    return run_experiment(run).throughput_gbps


def _scale(cost: CostModel, group, m: float) -> CostModel:
    return cost.scaled({k: m for k in group})


def _fit(config, mode, cost, group, target, ticks, rel_tol=1e-3, iters=40) -> tuple[float, float]:
    f = lambda m: _throughput(config, mode, _scale(cost, group, m), ticks)
    lo, hi = LOG_RANGE
    f_lo, f_hi = f(math.exp(lo)), f(math.exp(hi))
    if abs(f_lo - f_hi) <= 1e-9 * max(f_lo, 1.0):
        # nothing to scale (e.g. an all-zero group): keep the identity
        here = f(1.0)
        if abs(here - target) > NO_EFFECT_TOLERANCE * target:
            log.warning("%s: cost group %s does not move throughput (%.3f Gb/s vs target %s)",
                        mode.value, ",".join(group), here, target)
        return 1.0, here
    if f_lo < target:
        raise CalibrationError(f"{mode.value}: {target} Gb/s is out of reach "
                               f"(best {f_lo:.3f} Gb/s)")
    if f_hi > target:
        raise CalibrationError(f"{mode.value}: cannot slow down to {target} Gb/s")
    best = (1.0, f(1.0))
    for _ in range(iters):
        mid = (lo + hi) / 2
        got = f(math.exp(mid))
        if abs(got - target) < abs(best[1] - target):
            best = (math.exp(mid), got)
        if abs(got - target) <= rel_tol * target:
            break
        if got > target:
            lo = mid
        else:
            hi = mid
    return best


def calibrate(config: ExperimentConfig, targets: CalibrationTargets | None = None,
              cost: CostModel | None = None) -> Calibration:
    """Fit, in order, the base group to the direct anchor, the overlay
    group to the overlay anchor and, when given, the DPU group to the DPU
    anchor.  Each fit keeps the earlier ones fixed.
    """
    targets = targets or config.calibration
    cost = cost or config.cost
    link = config.engine.link_gbps
    result = Calibration(cost)
    steps = ((PlacementMode.HOST_DIRECT, BASE_GROUP, targets.direct_gbps, "base"),
             (PlacementMode.HOST_OVERLAY, OVERLAY_GROUP, targets.overlay_gbps, "overlay"),
             (PlacementMode.DPU_OFFLOAD, DPU_GROUP, targets.dpu_gbps, "dpu"))
    for mode, group, target, label in steps:
        if target is None:
            continue
        if not 0 < target <= link:
            raise CalibrationError(f"{mode.value}: target {target} Gb/s outside (0, {link}] Gb/s")
        m, got = _fit(config, mode, result.cost, group, target, targets.ticks)
        result.cost = _scale(result.cost, group, m)
        result.multipliers[label] = m
        result.achieved[mode.value] = got
    return result

"""Baseline configurations: memory configuration x checkpoint placement x checkpoint policy."""

from __future__ import annotations

from dataclasses import dataclass

from .air import Program
from .emulator import EXECUTE, PROBE, CheckpointPolicy
from .layout import MemoryLayout, assign_layout
from .placement import PlacementStrategy, normalize_interval_boundaries, place_checkpoints
from .versioning import (VersionPlan, annotate_exits, apply_versioning, detect_war_hazards,
                         plan_partial_update_copies)

V, N = "volatile", "nonvolatile"

BASELINE_NAMES = ("volatile-ll-probe", "volatile-fr-probe", "nonvolatile-ll-execute",
                  "nonvolatile-fr-execute", "nonvolatile-idem-execute")

_PLACEMENTS = {"ll": PlacementStrategy.LoopLatch, "fr": PlacementStrategy.FunctionReturn,
               "idem": PlacementStrategy.IdempotentBoundaries, "manual": PlacementStrategy.Manual}


class BaselineConfigError(ValueError):
    pass


@dataclass(frozen=True)
class BaselineConfig:
    memory: str
    placement: PlacementStrategy
    policy: CheckpointPolicy = EXECUTE
    guard: str = "lent-versioning"       # or "none"

    def __post_init__(self):
        if self.memory not in ("Volatile", "NonVolatile"):
            raise BaselineConfigError(f"memory must be Volatile or NonVolatile, not {self.memory!r}")
        if self.guard not in ("none", "lent-versioning"):
            raise BaselineConfigError(f"unknown anomaly guard {self.guard!r}")

    def validate(self, allow_unguarded: bool = False):
        if self.memory == "NonVolatile" and self.policy.kind != "execute":
            raise BaselineConfigError("a NonVolatile baseline needs the Execute policy")
        risky = self.placement in (PlacementStrategy.LoopLatch, PlacementStrategy.FunctionReturn,
                                   PlacementStrategy.Manual)
        if self.memory == "NonVolatile" and risky and self.guard == "none" and not allow_unguarded:
            raise BaselineConfigError(f"NonVolatile with {self.placement.value} placement needs lent versioning")

    @property
    def name(self) -> str:
        short = {v: k for k, v in _PLACEMENTS.items()}[self.placement]
        name = f"{self.memory.lower()}-{short}-{self.policy.kind}"
        return name + ("-unguarded" if self.guard == "none" and self.memory == "NonVolatile" else "")

    @classmethod
    def parse(cls, name: str) -> BaselineConfig:
        parts = name.lower().split("-")
        if len(parts) not in (3, 4) or parts[0] not in ("volatile", "nonvolatile") or parts[1] not in _PLACEMENTS:
            raise BaselineConfigError(f"unknown baseline {name!r}; known: {', '.join(BASELINE_NAMES)}")
        if parts[2] not in ("probe", "execute") or (len(parts) == 4 and parts[3] != "unguarded"):
            raise BaselineConfigError(f"unknown baseline {name!r}; known: {', '.join(BASELINE_NAMES)}")
        mem = "Volatile" if parts[0] == "volatile" else "NonVolatile"
        guard = "none" if len(parts) == 4 else "lent-versioning"
        return cls(mem, _PLACEMENTS[parts[1]], PROBE if parts[2] == "probe" else EXECUTE, guard)


@dataclass
class Baseline:
    config: BaselineConfig
    program: Program
    layout: MemoryLayout
    plan: VersionPlan


def _retarget(p: Program, target: str):
    for i in p.mem_instrs():
        i.target = target


def build_baseline(p: Program, cfg: BaselineConfig | str, allow_unguarded: bool = False) -> Baseline:
    """Place checkpoints and map every access to one memory.

    Volatile saves dump the volatile segment with the registers; NonVolatile saves
    write registers and PC only and always execute.
    """
    if isinstance(cfg, str):
        allow_unguarded = allow_unguarded or cfg.endswith("-unguarded")
        cfg = BaselineConfig.parse(cfg)
    cfg.validate(allow_unguarded)
    if any(i.target != "unassigned" for i in p.mem_instrs()):
        raise BaselineConfigError("baselines start from an unmapped program")
    # same boundary normalization as the flashvm pipeline, so paired arms share checkpoints
    q = normalize_interval_boundaries(place_checkpoints(p, cfg.placement))
    plan = VersionPlan()
    if cfg.memory == "Volatile":
        _retarget(q, V)
        for i in q.instrs():
            if i.op == "checkpoint":
                i.attrs["save"] = "full"
                i.attrs.pop("exec", None)
        return Baseline(cfg, q, assign_layout(q, plan, full_state_saves=True), plan)
    _retarget(q, N)
    for i in q.instrs():
        if i.op == "checkpoint":
            i.attrs["save"] = "regs"
            i.attrs["exec"] = "always"
    if cfg.guard == "lent-versioning":
        hz = detect_war_hazards(q)
        if hz:
            q, plan = apply_versioning(q, hz)
            plan = plan_partial_update_copies(q, None, plan)
            q = annotate_exits(q, plan)
    return Baseline(cfg, q, assign_layout(q, plan), plan)

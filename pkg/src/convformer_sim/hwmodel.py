"""Memory-hierarchy and compute-throughput model.

The ScratchpadSim is the ground truth for every external-memory-access (EMA)
claim: optimizer modules provide closed-form byte counts, and every one of
those formulas is cross-checked against the counters of a replayed schedule.
Default hardware parameters are order-of-magnitude placeholders, overridable
from the CLI config; every report embeds the config it was produced with.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

from .errors import CapacityError, ConfigError, UseAfterFreeError

KIB = 1024


@dataclass(frozen=True)
class HardwareConfig:
    scratchpad_bytes: int = 256 * KIB
    pe_count: int = 1024            # MACs per cycle
    dram_bytes_per_cycle: int = 16
    e_dram: float = 100.0           # pJ per DRAM byte
    e_sram: float = 1.0             # pJ per scratchpad byte
    e_mac: float = 0.5              # pJ per MAC
    element_bytes: int = 1          # datatype width of modeled traffic

    def __post_init__(self):
        for name in ("scratchpad_bytes", "pe_count", "dram_bytes_per_cycle",
                     "e_dram", "e_sram", "e_mac", "element_bytes"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"hardware.{name} must be > 0")
        if self.e_dram <= self.e_sram:
            # EMA minimization is meaningless if DRAM is not the expensive level.
            raise ConfigError("hardware.e_dram must exceed e_sram")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "HardwareConfig":
        known = {f for f in cls.__dataclass_fields__}
        bad = set(d) - known
        if bad:
            raise ConfigError(f"unknown hardware field(s): {sorted(bad)}")
        merged = dict(d)
        for k in ("scratchpad_bytes", "pe_count", "dram_bytes_per_cycle", "element_bytes"):
            if k in merged:
                merged[k] = int(merged[k])
        for k in ("e_dram", "e_sram", "e_mac"):
            if k in merged:
                merged[k] = float(merged[k])
        return cls(**merged)


class ScratchpadSim:
    """Transaction-counting on-chip buffer.

    Named regions are allocated against a hard capacity; the sum of live
    allocations exceeding capacity is an error, never silent. Counters are
    bytes and monotonically nondecreasing. ``load``/``store`` move data
    between DRAM and the scratchpad; ``touch`` is on-chip-only traffic.
    """

    def __init__(self, capacity: int):
        if capacity <= 0:
            raise ConfigError("scratchpad capacity must be > 0")
        self.capacity = capacity
        self.regions: dict[str, int] = {}
        self.dram_reads = 0
        self.dram_writes = 0
        self.sram_accesses = 0
        self.high_water = 0
        self.loads_by_region: dict[str, int] = {}
        self.trace: list[tuple[str, str, int]] = []

    @property
    def live_bytes(self) -> int:
        return sum(self.regions.values())

    @property
    def ema_bytes(self) -> int:
        return self.dram_reads + self.dram_writes

    def alloc(self, name: str, nbytes: int) -> str:
        if name in self.regions:
            raise UseAfterFreeError(f"region {name!r} already live")
        if nbytes < 0:
            raise ValueError("allocation size must be >= 0")
        needed = self.live_bytes + nbytes
        if needed > self.capacity:
            raise CapacityError(needed, self.capacity, what=f"alloc {name!r}")
        self.regions[name] = nbytes
        self.high_water = max(self.high_water, needed)
        self.trace.append(("alloc", name, nbytes))
        return name

    def _check(self, name: str, nbytes: int):
        if name not in self.regions:
            raise UseAfterFreeError(f"region {name!r} is not live")
        if nbytes < 0:
            raise ValueError("byte count must be >= 0")
        if nbytes > self.regions[name]:
            raise ValueError(
                f"{nbytes} B exceeds region {name!r} size {self.regions[name]} B")

    def load(self, name: str, nbytes: int):
        self._check(name, nbytes)
        self.dram_reads += nbytes
        self.sram_accesses += nbytes
        self.loads_by_region[name] = self.loads_by_region.get(name, 0) + nbytes
        self.trace.append(("load", name, nbytes))

    def store(self, name: str, nbytes: int):
        self._check(name, nbytes)
        self.dram_writes += nbytes
        self.sram_accesses += nbytes
        self.trace.append(("store", name, nbytes))

    def touch(self, name: str, nbytes: int):
        if name not in self.regions:
            raise UseAfterFreeError(f"region {name!r} is not live")
        if nbytes < 0:
            raise ValueError("byte count must be >= 0")
        self.sram_accesses += nbytes
        self.trace.append(("touch", name, nbytes))

    def free(self, name: str):
        if name not in self.regions:
            raise UseAfterFreeError(f"region {name!r} is not live")
        del self.regions[name]
        self.trace.append(("free", name, 0))


def roofline_cycles(macs: int, ema_bytes: int, hw: HardwareConfig) -> int:
    """Max of compute-bound and bandwidth-bound cycles, perfectly overlapped."""
    compute = -(-macs // hw.pe_count)
    transfer = -(-ema_bytes // hw.dram_bytes_per_cycle)
    return max(compute, transfer)


@dataclass
class CostReport:
    ema_bytes: int
    macs: int
    vector_ops: int
    sram_accesses: int
    cycles: int
    energy_pj: float
    scratchpad_high_water: int
    breakdown: list[dict] = field(default_factory=list)
    hardware: dict = field(default_factory=dict)
    seed: int | None = None
    notes: str = "software model, parameters not from silicon"

    CSV_FIELDS = ("ema_bytes", "macs", "vector_ops", "sram_accesses",
                  "cycles", "energy_pj", "scratchpad_high_water")

    def to_dict(self) -> dict:
        return {
            "ema_bytes": self.ema_bytes,
            "macs": self.macs,
            "vector_ops": self.vector_ops,
            "sram_accesses": self.sram_accesses,
            "cycles": self.cycles,
            "energy_pj": self.energy_pj,
            "scratchpad_high_water": self.scratchpad_high_water,
            "breakdown": self.breakdown,
            "hardware": self.hardware,
            "seed": self.seed,
            "notes": self.notes,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def csv_row(self) -> list:
        return [getattr(self, f) for f in self.CSV_FIELDS]


def build_report(macs: int, vector_ops: int, sim: ScratchpadSim,
                 hw: HardwareConfig, breakdown: list[dict] | None = None,
                 seed: int | None = None) -> CostReport:
    """Assemble a report from counters; energy is exactly linear in traffic."""
    ema = sim.ema_bytes
    energy = ema * hw.e_dram + sim.sram_accesses * hw.e_sram + macs * hw.e_mac
    return CostReport(
        ema_bytes=ema,
        macs=macs,
        vector_ops=vector_ops,
        sram_accesses=sim.sram_accesses,
        cycles=roofline_cycles(macs, ema, hw),
        energy_pj=energy,
        scratchpad_high_water=sim.high_water,
        breakdown=breakdown or [],
        hardware=hw.to_dict(),
        seed=seed,
    )

"""Instruction trace accounting and the per-op-kind cost model."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple

import numpy as np

OP_KINDS = (
    "load",
    "analog_arith",
    "analog_write",
    "analog_shift",
    "bit_logic",
    "bit_shift",
    "flag",
    "global_sum",
    "event",
    "event_overhead",
    "refresh",
)

# Display names for the component labels kernels attach to the trace.
COMPONENT_TITLES = {
    "load": "Input Load",
    "duplication": "Digit Duplication",
    "conv": "Convolutional Layer/s",
    "relu": "ReLu",
    "maxpool": "Max Pooling",
    "shrink_duplicate": "Feature Map Shrink and Duplicate",
    "feature_map_creation": "Feature Map Creation",
    "fc": "Fully Connected Layer",
}


class TraceEntry(NamedTuple):
    kind: str
    label: str
    count: int


class Trace:
    """Ordered record of issued instructions.

    Entries are run-length encoded: an ``n``-step shift is one entry with
    ``count=n``. ``len(trace)`` is the number of instructions.
    """

    def __init__(self):
        self.entries: list[TraceEntry] = []
        self._n = 0

    def record(self, kind: str, label: str, count: int = 1):
        if kind not in OP_KINDS:
            raise ValueError(f"unknown op kind {kind!r}")
        if count <= 0:
            return
        self.entries.append(TraceEntry(kind, label, int(count)))
        self._n += int(count)

    def __len__(self):
        return self._n

    def mark(self) -> int:
        """Position usable with :meth:`since` to slice out a sub-routine."""
        return len(self.entries)

    def since(self, mark: int) -> list[TraceEntry]:
        return self.entries[mark:]

    def kind_counts(self, entries: Iterable[TraceEntry] | None = None) -> Counter:
        c = Counter()
        for e in self.entries if entries is None else entries:
            c[e.kind] += e.count
        return c

    def copy(self) -> "Trace":
        t = Trace()
        t.entries = list(self.entries)
        t._n = self._n
        return t


# Per-instruction costs in microseconds, produced by
# ppacnn.calibration.calibrate_costs() (two-layer component timings at full
# weight, the 260 us stack count at weight 0.1). Rerun it to regenerate.
DEFAULT_COSTS = {
    "load": 0.0,
    "analog_arith": 1.0946347015721305,
    "analog_write": 0.0,
    "analog_shift": 0.04813696141080419,
    "bit_logic": 0.3239090082913105,
    "bit_shift": 0.28757604364775813,
    "flag": 0.2559286868197995,
    "global_sum": 0.3279738419047798,
    "event": 0.0,
    "event_overhead": 0.9482192230807671,
    "refresh": 0.10000000000000002,
}


@dataclass
class CostModel:
    costs: dict = field(default_factory=lambda: dict(DEFAULT_COSTS))

    def __post_init__(self):
        unknown = set(self.costs) - set(OP_KINDS)
        if unknown:
            raise ValueError(f"unknown op kinds {sorted(unknown)}")
        for k in OP_KINDS:
            self.costs.setdefault(k, 0.0)
            if self.costs[k] < 0:
                raise ValueError(f"negative cost for {k}")

    def time(self, entries: Iterable[TraceEntry]) -> float:
        return float(sum(self.costs[e.kind] * e.count for e in entries))

    def report(self, trace: Trace | Iterable[TraceEntry]) -> "TraceReport":
        entries = trace.entries if isinstance(trace, Trace) else list(trace)
        rows: dict[str, float] = {}
        for e in entries:
            rows[e.label] = rows.get(e.label, 0.0) + self.costs[e.kind] * e.count
        return TraceReport(rows)


@dataclass
class TraceReport:
    """Modeled microseconds grouped by component label (insertion ordered)."""

    rows: dict

    @property
    def total_us(self) -> float:
        return float(sum(self.rows.values()))

    @property
    def fps(self) -> float:
        t = self.total_us
        return 1e6 / t if t > 0 else float("inf")

    def __getitem__(self, label):
        return self.rows.get(label, 0.0)

    def table(self, notes: dict | None = None) -> str:
        """Plain-text table; ``notes`` maps labels to a trailing remark."""
        notes = notes or {}
        lines = [f"{'Component':<36}{'Modeled (us)':>14}"]
        lines.append("-" * 50)
        for label, us in self.rows.items():
            name = COMPONENT_TITLES.get(label, label)
            line = f"{name:<36}{us:>14.2f}"
            if label in notes:
                line += f"  [{notes[label]}]"
            lines.append(line)
        lines.append("-" * 50)
        lines.append(f"{'Total':<36}{self.total_us:>14.2f}")
        fps = self.fps
        lines.append(f"{'Frames per second':<36}{fps:>14.1f}" if np.isfinite(fps) else f"{'Frames per second':<36}{'-':>14}")
        return "\n".join(lines)

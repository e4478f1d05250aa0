"""
Bound ledger: one entry per update with the lower bound before and after.

Usage:
    ledger = BoundLedger()

    with ledger.phase("bias"):
        # update
        ledger.record(sweep, "bias", subject, before, after, accepted)

    ledger.to_csv(path)
    print(ledger.report())
"""

import csv
import threading
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

from ..core.utils import format_eta

FAMILIES = ("mixture", "weights", "bias", "affine", "velocity", "template", "hyperprior")
CSV_HEADER = ["iteration", "family", "subject", "before", "after", "accepted", "flags", "ms"]


@dataclass
class PhaseStats:
    """Wall time spent in one update family."""
    name: str
    duration: float = 0.0
    calls: int = 0


@dataclass
class LedgerEntry:
    iteration: int
    family: str
    subject: str
    before: float
    after: float
    accepted: bool
    flags: list = field(default_factory=list)
    ms: float = 0.0

    @property
    def gain(self) -> float:
        return self.after - self.before

    def row(self, timing: bool = True) -> list:
        return [
            self.iteration,
            self.family,
            self.subject,
            repr(float(self.before)),
            repr(float(self.after)),
            int(self.accepted),
            ";".join(self.flags),
            f"{self.ms:.1f}" if timing else "0",
        ]


@dataclass
class BoundLedger:
    """Append-only record of every family update across the fit."""

    entries: list = field(default_factory=list)
    phases: dict = field(default_factory=dict)
    bounds: list = field(default_factory=list)
    counters: dict = field(default_factory=dict)
    total_start: float = field(default_factory=time.perf_counter)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    @contextmanager
    def phase(self, name: str):
        """Context manager accumulating wall time per family (re-entrant across calls)."""
        start = time.perf_counter()
        try:
            yield
        finally:
            elapsed = time.perf_counter() - start
            with self._lock:
                stats = self.phases.setdefault(name, PhaseStats(name))
                stats.duration += elapsed
                stats.calls += 1

    def record(self, iteration: int, family: str, subject: str, before: float, after: float,
               accepted: bool, flags=None, ms: float = 0.0) -> LedgerEntry:
        entry = LedgerEntry(iteration, family, subject, float(before), float(after), bool(accepted), list(flags or []), ms)
        with self._lock:
            self.entries.append(entry)
            for flag in entry.flags:
                name = flag.split(":", 1)[0]
                self.counters[name] = self.counters.get(name, 0) + 1
        return entry

    def extend(self, entries) -> None:
        for e in entries:
            self.record(e.iteration, e.family, e.subject, e.before, e.after, e.accepted, e.flags, e.ms)

    def violations(self, tol: float = 1e-8) -> list[LedgerEntry]:
        """Accepted entries whose bound dropped by more than tol * |before|."""
        return [e for e in self.entries if e.accepted and e.after < e.before - tol * abs(e.before)]

    def to_csv(self, path: str | Path, timing: bool = True) -> Path:
        """Write the ledger; timing=False zeroes the ms column so runs compare byte for byte."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(CSV_HEADER)
            for entry in self.entries:
                writer.writerow(entry.row(timing))
        return path

    @property
    def total_duration(self) -> float:
        return time.perf_counter() - self.total_start

    def report(self) -> str:
        lines = []
        lines.append("=" * 60)
        lines.append("LOWER BOUND LEDGER")
        lines.append("=" * 60)
        lines.append(f"Total time: {format_eta(self.total_duration)}")
        lines.append(f"Updates:    {len(self.entries):,}")
        if self.bounds:
            lines.append(f"Bound:      {self.bounds[0]:.6g} -> {self.bounds[-1]:.6g} over {len(self.bounds) - 1} sweeps")
        lines.append("")

        lines.append("FAMILY BREAKDOWN")
        lines.append("-" * 60)
        order = list(FAMILIES) + [name for name in self.phases if name not in FAMILIES]
        for name in order:
            family = [e for e in self.entries if e.family == name]
            stats = self.phases.get(name)
            if not family and stats is None:
                continue
            accepted = sum(e.accepted for e in family)
            gain = sum(e.gain for e in family if e.accepted)
            duration = format_eta(stats.duration) if stats else "-"
            lines.append(
                f"  {name:12s}: {duration:>8s}  {accepted:4d}/{len(family):<4d} accepted  gain {gain:+.4g}"
            )
        lines.append("")

        if self.counters:
            lines.append("FLAGS")
            lines.append("-" * 60)
            for name, count in sorted(self.counters.items()):
                lines.append(f"  {name:20s}: {count:,}")
            lines.append("")
        bad = self.violations()
        if bad:
            lines.append(f"WARNING: {len(bad)} accepted updates decreased the bound")
        lines.append("=" * 60)
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {
            "total_duration": self.total_duration,
            "updates": len(self.entries),
            "bounds": list(self.bounds),
            "counters": dict(self.counters),
            "violations": len(self.violations()),
            "phases": {
                name: {"duration": stats.duration, "calls": stats.calls}
                for name, stats in self.phases.items()
            },
        }

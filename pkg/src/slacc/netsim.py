"""Byte accounting and a latency + bandwidth link model."""
from __future__ import annotations

import csv
import io
import threading
from dataclasses import dataclass, field

UPLINK = "up"
DOWNLINK = "down"


@dataclass(frozen=True)
class LinkModel:
    uplink_rate: float = 1.25e6  # bytes/s (10 Mbit/s)
    downlink_rate: float = 2.5e6  # bytes/s (20 Mbit/s)
    latency: float = 0.01  # seconds per message

    def __post_init__(self):
        if self.uplink_rate <= 0 or self.downlink_rate <= 0:
            raise ValueError("link rates must be positive")
        if self.latency < 0:
            raise ValueError("latency must be non-negative")

    def transfer_time(self, nbytes: int, direction: str) -> float:
        rate = self.uplink_rate if direction == UPLINK else self.downlink_rate
        return self.latency + nbytes / rate


@dataclass(frozen=True, order=True)
class LedgerEntry:
    round: int
    device: int
    direction: str
    bytes: int
    sim_seconds: float


@dataclass
class CommLedger:
    link: LinkModel = field(default_factory=LinkModel)
    entries: list[LedgerEntry] = field(default_factory=list)

    def __post_init__(self):
        self._lock = threading.Lock()

    def record(self, round: int, device: int, direction: str, nbytes: int) -> LedgerEntry:
        if nbytes < 0:
            raise ValueError("byte count must be non-negative")
        if direction not in (UPLINK, DOWNLINK):
            raise ValueError(f"unknown direction {direction!r}")
        entry = LedgerEntry(round, device, direction, int(nbytes), self.link.transfer_time(nbytes, direction))
        with self._lock:
            self.entries.append(entry)
        return entry

    def snapshot(self) -> list[LedgerEntry]:
        # total order: round, device, then uplink before downlink
        with self._lock:
            entries = list(self.entries)
        rank = {UPLINK: 0, DOWNLINK: 1}
        return sorted(entries, key=lambda e: (e.round, e.device, rank[e.direction]))

    def total_bytes(self, direction: str | None = None) -> int:
        return sum(e.bytes for e in self.snapshot() if direction in (None, e.direction))

    def round_bytes(self, round: int, direction: str | None = None) -> dict[int, int]:
        out: dict[int, int] = {}
        for e in self.snapshot():
            if e.round == round and direction in (None, e.direction):
                out[e.device] = out.get(e.device, 0) + e.bytes
        return out

    def round_time(self, round: int, mode: str = "parallel") -> float:
        """Communication time of one round.

        ``parallel``: devices talk concurrently, the slowest device sets the pace.
        ``sequential``: device exchanges happen one after another.
        """
        per_device: dict[int, float] = {}
        for e in self.snapshot():
            if e.round == round:
                per_device[e.device] = per_device.get(e.device, 0.0) + e.sim_seconds
        if not per_device:
            return 0.0
        if mode == "parallel":
            return max(per_device.values())
        if mode == "sequential":
            return sum(per_device.values())
        raise ValueError(f"unknown aggregation mode {mode!r}")

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["round", "device", "direction", "bytes", "sim_seconds"])
        for e in self.snapshot():
            writer.writerow([e.round, e.device, e.direction, e.bytes, repr(float(e.sim_seconds))])
        return buf.getvalue()


def time_to_accuracy(reports, target: float) -> float | None:
    """Cumulative simulated time at the first round reaching ``target`` accuracy.

    ``reports`` need ``test_accuracy`` and ``sim_seconds`` (per-round time,
    comm plus any configured compute cost). Returns None if never reached.
    """
    elapsed = 0.0
    for r in reports:
        elapsed += r.sim_seconds
        if r.test_accuracy is not None and r.test_accuracy >= target:
            return elapsed
    return None

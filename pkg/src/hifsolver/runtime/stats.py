"""Per-rank communication accounting.

Every data message a transport carries is tallied under the phase the rank
declared via set_phase; barriers are control traffic and stay uncounted.
The counters let tests assert conservation (total sent equals total
received per phase) and let the benchmark report message/byte totals plus
the alpha * messages + beta * bytes cost figure.
"""

from __future__ import annotations

from dataclasses import dataclass

PHASES = (
    "elimination-exchange",
    "skeletonization",
    "redistribution",
    "dense-algebra",
)

DEFAULT_PHASE = "dense-algebra"


@dataclass
class PhaseTally:
    messages_sent: int = 0
    bytes_sent: int = 0
    messages_received: int = 0
    bytes_received: int = 0

    def as_dict(self) -> dict:
        return {
            "messages_sent": self.messages_sent,
            "bytes_sent": self.bytes_sent,
            "messages_received": self.messages_received,
            "bytes_received": self.bytes_received,
        }


class CommStats:
    """Monotone per-phase message and byte counters for one rank."""

    def __init__(self, rank: int):
        self.rank = rank
        self.phases = {name: PhaseTally() for name in PHASES}
        self._phase = DEFAULT_PHASE

    @property
    def phase(self) -> str:
        return self._phase

    def set_phase(self, name: str) -> None:
        if name not in self.phases:
            raise ValueError(f"unknown communication phase {name!r}")
        self._phase = name

    def record_send(self, nbytes: int) -> None:
        tally = self.phases[self._phase]
        tally.messages_sent += 1
        tally.bytes_sent += nbytes

    def record_receive(self, nbytes: int, phase: str | None = None) -> None:
        tally = self.phases[phase if phase is not None else self._phase]
        tally.messages_received += 1
        tally.bytes_received += nbytes

    def messages_sent(self, phase: str | None = None) -> int:
        if phase is not None:
            return self.phases[phase].messages_sent
        return sum(t.messages_sent for t in self.phases.values())

    def bytes_sent(self, phase: str | None = None) -> int:
        if phase is not None:
            return self.phases[phase].bytes_sent
        return sum(t.bytes_sent for t in self.phases.values())

    def messages_received(self, phase: str | None = None) -> int:
        if phase is not None:
            return self.phases[phase].messages_received
        return sum(t.messages_received for t in self.phases.values())

    def bytes_received(self, phase: str | None = None) -> int:
        if phase is not None:
            return self.phases[phase].bytes_received
        return sum(t.bytes_received for t in self.phases.values())

    def predicted_cost(self, alpha: float, beta: float) -> float:
        """Latency/bandwidth cost figure alpha * messages + beta * bytes.

        alpha and beta are report inputs, not measured quantities.
        """
        return alpha * self.messages_sent() + beta * self.bytes_sent()

    def as_dict(self) -> dict:
        return {
            "rank": self.rank,
            "phases": {name: t.as_dict() for name, t in self.phases.items()},
        }


def combined_totals(all_stats: list) -> dict:
    """Aggregate counters across ranks, keyed by phase plus a 'total' row."""
    out = {name: PhaseTally() for name in PHASES}
    total = PhaseTally()
    for st in all_stats:
        for name, tally in st.phases.items():
            agg = out[name]
            agg.messages_sent += tally.messages_sent
            agg.bytes_sent += tally.bytes_sent
            agg.messages_received += tally.messages_received
            agg.bytes_received += tally.bytes_received
            total.messages_sent += tally.messages_sent
            total.bytes_sent += tally.bytes_sent
            total.messages_received += tally.messages_received
            total.bytes_received += tally.bytes_received
    result = {name: t.as_dict() for name, t in out.items()}
    result["total"] = total.as_dict()
    return result

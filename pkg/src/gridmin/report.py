"""Solver report records shared by every solution method."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field


@dataclass
class IterationRecord:
    """One residual evaluation inside a Newton solve.

    ``limited_v``/``limited_q`` count the update components clamped by the
    step limiter on the way *out* of this iterate; ``floored`` counts PQ/PV
    current evaluations that hit the voltage-magnitude floor.
    """

    iteration: int
    residual_norm: float
    limited_v: int = 0
    limited_q: int = 0
    floored: int = 0


@dataclass
class StepRecord:
    """One Newton solve at a fixed homotopy factor (accepted or rejected)."""

    mu: float
    converged: bool
    iterations: int
    trace: list[IterationRecord] = field(default_factory=list)
    reason: str = ""


@dataclass
class SolveReport:
    case: str
    method: str
    converged: bool
    message: str
    total_iterations: int
    mu_trace: list[float]
    steps: list[StepRecord]
    initial_deviation_vm: float | None
    bus_ids: list[int] = field(default_factory=list)
    vm: list[float] = field(default_factory=list)
    va: list[float] = field(default_factory=list)
    q_gen: list[float] = field(default_factory=list)
    options: dict = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)
    # Wall-clock data lives here so determinism checks can drop one key.
    timing: dict = field(default_factory=dict)

    @property
    def step_iterations(self) -> list[int]:
        """Iteration counts of the accepted homotopy steps, in order."""
        return [s.iterations for s in self.steps if s.converged]

    @property
    def wall_time_ms(self) -> float | None:
        return self.timing.get("wall_time_ms")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "SolveReport":
        data = dict(data)
        data["steps"] = [
            StepRecord(**{**s, "trace": [IterationRecord(**r) for r in s["trace"]]})
            for s in data["steps"]
        ]
        return cls(**data)

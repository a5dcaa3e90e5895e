"""Compute-path jitter injection.

Each stage keeps an exponential moving average e of its compute times;
with probability p_j a task receives an extra delay
``alpha * max(base, e) * (0.5 + r)`` with r uniform in [0, 1).  Delays
attach to forward/backward compute tasks only, never to communication
edges or weight updates.

Injection tables are materialized per task in canonical per-stage task
order before a run starts.  The EMA therefore also evolves in canonical
order, which makes the (task, delay) set a pure function of (workload,
config, seed): two schedulers running with the same seed experience
identical injections, which is what makes paired-seed robustness sweeps
meaningful.
"""

from __future__ import annotations

from dataclasses import dataclass

from .rng import substream
from .workload import BACKWARD, FORWARD, TaskId, Workload

__all__ = ["JitterConfig", "JitterState", "ema_update", "sample_delay",
           "build_injection_table", "PRESETS"]


@dataclass(frozen=True)
class JitterConfig:
    probability: float = 0.0
    base_delay: int = 0  # microseconds
    scale: float = 0.0
    level: str = "J0"

    def __post_init__(self):
        if not (0.0 <= self.probability <= 1.0):
            raise ValueError("probability must lie in [0, 1]")
        if self.base_delay < 0 or self.scale < 0:
            raise ValueError("base delay and scale must be non-negative")

    @property
    def enabled(self) -> bool:
        return self.probability > 0 and self.scale > 0

    def to_json(self) -> dict:
        return {"probability": self.probability, "base_delay": self.base_delay,
                "scale": self.scale, "level": self.level}

    @classmethod
    def from_json(cls, obj: dict) -> "JitterConfig":
        return cls(**obj)


# Injection levels: (probability, base delay us, scale)
PRESETS = {
    "J0": JitterConfig(0.0, 0, 0.0, "J0"),
    "J1": JitterConfig(0.1, 5_000, 0.5, "J1"),
    "J2": JitterConfig(0.2, 10_000, 1.0, "J2"),
    "J3": JitterConfig(0.3, 15_000, 1.5, "J3"),
}


@dataclass
class JitterState:
    """Stage-local EMA of compute time; -1 until the first observation."""

    ema: int = -1

    def observe(self, compute_time: int) -> None:
        if self.ema < 0:
            self.ema = compute_time  # cold start: first observed value
        else:
            self.ema = ema_update(self.ema, compute_time)


def ema_update(e_prev: int, c: int) -> int:
    """0.9 * previous + 0.1 * current, rounded half-up to integer us."""
    if e_prev < 0 or c < 0:
        raise ValueError("EMA inputs must be non-negative")
    return (9 * e_prev + c + 5) // 10


def sample_delay(cfg: JitterConfig, state: JitterState, rng) -> int:
    """Draw one injection decision from the dedicated jitter sub-stream.

    Two uniforms are always consumed (gate and magnitude) so the stream
    position never depends on earlier outcomes.
    """
    gate = rng.random()
    r = rng.random()
    if not cfg.enabled or gate >= cfg.probability:
        return 0
    e = max(state.ema, 0)
    return int(round(cfg.scale * max(cfg.base_delay, e) * (0.5 + r)))


def build_injection_table(workload: Workload, cfg: JitterConfig,
                          seed: int) -> dict[TaskId, int]:
    """Per-task injected delays, identical for every scheduler at this seed.

    Tasks are walked stage by stage in (microbatch, chunk, F-then-B)
    order, with one sub-stream per stage.
    """
    table: dict[TaskId, int] = {}
    if not cfg.enabled:
        return table
    for stage in range(workload.num_stages):
        rng = substream(seed, "jitter", cfg.level, stage)
        state = JitterState()
        for j in range(workload.num_microbatches):
            for c in range(workload.num_chunks):
                for d in (FORWARD, BACKWARD):
                    task = TaskId(stage, j, c, d)
                    state.observe(workload.latency[task])
                    delay = sample_delay(cfg, state, rng)
                    if delay:
                        table[task] = delay
    return table

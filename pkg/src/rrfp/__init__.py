"""Readiness-driven pipeline-parallel iteration simulator and executor."""

from .analysis import (
    BoundReport,
    bottleneck_stats,
    breakdown,
    brute_force_makespan,
    corollary_ratio_curve,
    lower_bound,
    theorem_bound,
)
from .arbitration import (
    BackpressureState,
    Decision,
    HintOrder,
    StageBuffers,
    TpGroup,
    arbitrate,
    next_by_priority,
    tp_coordinate,
    update_backpressure,
)
from .baselines import (
    FixedSchedule,
    ScheduleDeadlockError,
    backward_only_makespan,
    build_1f1b_schedule,
    forward_only_makespan,
    run_fixed,
)
from .engine import EngineDeadlockError, run_rrfp
from .jitter import PRESETS as JITTER_PRESETS
from .jitter import JitterConfig, JitterState, build_injection_table, ema_update, sample_delay
from .trace import Metrics, Trace, TraceEvent
from .validate import ValidationReport, validate_trace
from .workload import (
    BACKWARD,
    FORWARD,
    WEIGHT,
    CommDelay,
    DependencyEdge,
    DistSpec,
    GeneratorSpec,
    TaskId,
    Workload,
    WorkloadError,
    build_task_graph,
    generate_workload,
)

__version__ = "0.1.0"

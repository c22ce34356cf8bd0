"""
Data model, exceptions and database schema for SCAD.
"""

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, FrozenSet, List, Optional, Tuple

DOCUMENT_VERSION = 1

CPU = 'CPU'
GPU = 'GPU'
DLA = 'DLA'
PROCESSOR_KINDS = (CPU, GPU, DLA)
ACCELERATOR_KINDS = (GPU, DLA)

CATEGORIES = (
    'Sensing',
    'Perception2D',
    'Perception3D',
    'Localization',
    'Tracking',
    'Prediction',
    'Planning',
    'Control',
)

# Categories bound to reserved cores when the platform reserves any
ISOLATED_CATEGORIES = frozenset({'Planning', 'Control'})


class ScadError(ValueError):
    """Base class for SCAD domain errors."""


class DagError(ScadError):
    """Structural, parse or schema error in a task graph or platform."""


class SchedulingError(ScadError):
    """A task cannot be placed, or a schedule does not fit its graph."""


class EnumerationError(ScadError):
    """The accelerator assignment space exceeds the configured bound."""

    def __init__(self, message: str, count: int):
        super().__init__(message)
        self.count = count


class MeasurementError(ScadError):
    """Task performance measurements are incomplete."""


class PartitionError(ScadError):
    """A layer graph cannot be partitioned or costed."""


class ProfileError(ScadError):
    """Unknown or malformed calibration profile."""


class ExperimentError(ScadError):
    """An experiment stage failed."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


# ---------------------------------------------------------------------------
# Task graph
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TaskNode:
    """A DAG vertex: one ROS-style node with its per-kind cost table."""

    id: str
    name: str
    category: str
    cost_table: Dict[str, float]
    eligibility: FrozenSet[str]
    expected_latency: float
    period: Optional[float] = None
    thread_count: int = 2
    group: Optional[str] = None
    host_ms: float = 0.0
    assist_fraction: Optional[float] = None
    affinity: Optional[str] = None
    # GPU-resident part of a placement on another accelerator
    fallback_ms: float = 0.0

    @property
    def is_timer(self) -> bool:
        return self.period is not None

    def mean_cost(self) -> float:
        """Average computation cost over the eligible kinds."""
        values = [self.cost_table[k] for k in sorted(self.eligibility) if k in self.cost_table]
        if not values:
            return 0.0
        return sum(values) / len(values)


@dataclass(frozen=True)
class Edge:
    """Producer-consumer link between two tasks."""

    src: str
    dst: str
    comm_cost: Dict[str, float] = field(default_factory=dict)
    payload_kb: float = 0.0
    trigger: bool = True
    assumed: bool = False

    def mean_comm(self) -> float:
        if not self.comm_cost:
            return 0.0
        return sum(self.comm_cost.values()) / len(self.comm_cost)

    def comm_between(self, kind_a: str, kind_b: str) -> float:
        """Transfer time between two distinct processors of the given kinds."""
        for key in (f"{kind_a}-{kind_b}", f"{kind_b}-{kind_a}"):
            if key in self.comm_cost:
                return self.comm_cost[key]
        return 0.0


@dataclass(frozen=True)
class Dag:
    """Task graph with lookup indexes built once at construction."""

    nodes: Tuple[TaskNode, ...]
    edges: Tuple[Edge, ...]
    metadata: Dict = field(default_factory=dict)
    _by_id: Dict[str, TaskNode] = field(init=False, repr=False, compare=False)
    _preds: Dict[str, List[Edge]] = field(init=False, repr=False, compare=False)
    _succs: Dict[str, List[Edge]] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, 'nodes', tuple(self.nodes))
        object.__setattr__(self, 'edges', tuple(self.edges))
        by_id = {n.id: n for n in self.nodes}
        preds: Dict[str, List[Edge]] = {n.id: [] for n in self.nodes}
        succs: Dict[str, List[Edge]] = {n.id: [] for n in self.nodes}
        for edge in self.edges:
            if edge.dst in preds:
                preds[edge.dst].append(edge)
            if edge.src in succs:
                succs[edge.src].append(edge)
        object.__setattr__(self, '_by_id', by_id)
        object.__setattr__(self, '_preds', preds)
        object.__setattr__(self, '_succs', succs)

    def node(self, task_id: str) -> TaskNode:
        return self._by_id[task_id]

    def has_node(self, task_id: str) -> bool:
        return task_id in self._by_id

    @property
    def task_ids(self) -> List[str]:
        return [n.id for n in self.nodes]

    def in_edges(self, task_id: str) -> List[Edge]:
        return self._preds.get(task_id, [])

    def out_edges(self, task_id: str) -> List[Edge]:
        return self._succs.get(task_id, [])

    def categories(self) -> List[str]:
        """Categories present in the graph, in canonical order."""
        present = {n.category for n in self.nodes}
        return [c for c in CATEGORIES if c in present]


@dataclass(frozen=True)
class Processor:
    id: str
    kind: str
    speed_factor: float = 1.0
    power_watts: float = 0.0


@dataclass(frozen=True)
class Platform:
    """Processors of one device plus the ids reserved for isolated modules."""

    processors: Tuple[Processor, ...]
    reserved: FrozenSet[str] = frozenset()

    def __post_init__(self):
        object.__setattr__(self, 'processors', tuple(self.processors))
        object.__setattr__(self, 'reserved', frozenset(self.reserved))

    def processor(self, proc_id: str) -> Processor:
        for proc in self.processors:
            if proc.id == proc_id:
                return proc
        raise KeyError(proc_id)

    def kinds(self) -> FrozenSet[str]:
        return frozenset(p.kind for p in self.processors)

    def of_kind(self, kind: str) -> List[Processor]:
        return [p for p in self.processors if p.kind == kind]

    def general_cpus(self) -> List[Processor]:
        return [p for p in self.processors if p.kind == CPU and p.id not in self.reserved]

    def reserved_cpus(self) -> List[Processor]:
        return [p for p in self.processors if p.kind == CPU and p.id in self.reserved]

    def accelerators(self) -> List[Processor]:
        return [p for p in self.processors if p.kind != CPU]


# ---------------------------------------------------------------------------
# Schedules
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Slot:
    start: float
    finish: float


@dataclass
class Schedule:
    """Static plan: placement, predicted slots and priorities."""

    assignment: Dict[str, str]
    slots: Dict[str, Slot]
    priorities: Dict[str, int]
    makespan: float
    hosts: Dict[str, str] = field(default_factory=dict)
    order: List[str] = field(default_factory=list)

    def same_plan(self, other: 'Schedule') -> bool:
        """True when placement and priorities match (slot times ignored)."""
        return (
            self.assignment == other.assignment
            and self.priorities == other.priorities
            and self.hosts == other.hosts
        )

    def tasks_on(self, proc_id: str) -> List[str]:
        tasks = [t for t, p in self.assignment.items() if p == proc_id]
        return sorted(tasks, key=lambda t: (self.slots[t].start, t))


# ---------------------------------------------------------------------------
# Simulation
# ---------------------------------------------------------------------------

class Policy(str, Enum):
    TIME_SHARING = 'TIME_SHARING'
    STATIC_RT = 'STATIC_RT'
    JIT_RT = 'JIT_RT'


QUEUEING_MODES = ('drop-oldest', 'block')


@dataclass(frozen=True)
class PolicyConfig:
    """Priority policy plus the knobs of the platform model."""

    policy: Policy = Policy.TIME_SHARING
    quantum: float = 10.0
    slack_factor: float = 1.10
    noise_sigma: float = 0.05
    queueing: str = 'drop-oldest'
    assist_fraction: float = 0.2
    corun_alpha: Dict[str, float] = field(default_factory=lambda: {GPU: 0.15, DLA: 0.0})

    def __post_init__(self):
        object.__setattr__(self, 'policy', Policy(self.policy))
        if self.quantum <= 0:
            raise ValueError(f"quantum must be > 0, got {self.quantum}")
        if self.slack_factor < 1:
            raise ValueError(f"slack_factor must be >= 1, got {self.slack_factor}")
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.queueing not in QUEUEING_MODES:
            raise ValueError(f"queueing must be one of {QUEUEING_MODES}, got {self.queueing!r}")
        if self.assist_fraction < 0:
            raise ValueError(f"assist_fraction must be >= 0, got {self.assist_fraction}")

    def corun_factor(self, kind: str, k: int) -> float:
        alpha = self.corun_alpha.get(kind, 0.0)
        return 1.0 + alpha * max(0, k - 1)


TRACE_KINDS = (
    'activate', 'start', 'preempt', 'resume', 'finish', 'deadline_miss',
    'priority_raise', 'priority_drop', 'offload', 'drop',
)


@dataclass(frozen=True)
class TraceEvent:
    time: float
    kind: str
    task: str
    thread: int
    processor: Optional[str]

    def to_dict(self) -> Dict:
        return {
            'time': round(self.time, 6),
            'kind': self.kind,
            'task': self.task,
            'thread': self.thread,
            'processor': self.processor,
        }


@dataclass
class SimTrace:
    events: List[TraceEvent]
    horizon: float


@dataclass
class ModuleStats:
    """
    Latency and deadline statistics for one module category.

    `completed` counts on-time samples, `missed` late samples plus one
    timeout per exit task that never finished; `samples` counts every
    observed latency.
    """

    module: str
    deadline: float
    completed: int = 0
    missed: int = 0
    dropped: int = 0
    samples: int = 0
    mean: float = math.inf
    std: float = math.inf
    p99: float = math.inf

    @property
    def miss_rate(self) -> float:
        return self.missed / max(1, self.completed + self.missed)

    @property
    def drop_rate(self) -> float:
        """Share of the module's activations replaced before they were processed."""
        return self.dropped / max(1, self.samples + self.dropped)

    @property
    def timeout(self) -> bool:
        return self.samples == 0

    def to_dict(self) -> Dict:
        def finite(value):
            return round(value, 6) if math.isfinite(value) else None

        return {
            'module': self.module,
            'deadline_ms': self.deadline,
            'completed': self.completed,
            'missed': self.missed,
            'dropped': self.dropped,
            'samples': self.samples,
            'miss_rate': round(self.miss_rate, 6),
            'drop_rate': round(self.drop_rate, 6),
            'latency_mean': finite(self.mean),
            'latency_std': finite(self.std),
            'latency_p99': finite(self.p99),
            'timeout': self.timeout,
        }


@dataclass
class MissReport:
    modules: Dict[str, ModuleStats]
    starved: List[str]
    task_perf: Dict[str, float] = field(default_factory=dict)
    completions: Dict[str, int] = field(default_factory=dict)

    @property
    def overall_miss_rate(self) -> float:
        missed = sum(m.missed for m in self.modules.values())
        total = sum(m.completed + m.missed for m in self.modules.values())
        return missed / max(1, total)

    @property
    def overall_drop_rate(self) -> float:
        dropped = sum(m.dropped for m in self.modules.values())
        total = sum(m.samples + m.dropped for m in self.modules.values())
        return dropped / max(1, total)

    def worst_miss_rate(self) -> float:
        return max((m.miss_rate for m in self.modules.values()), default=0.0)

    def worst_latency_ratio(self) -> float:
        """Largest p99 / deadline over modules; infinite when a module timed out."""
        ratios = [m.p99 / m.deadline for m in self.modules.values()]
        return max(ratios) if ratios else 0.0


@dataclass
class EnergyReport:
    """Busy time times active power, per processor and per kind (ms x W = mJ)."""

    busy_ms: Dict[str, float]
    energy_mj: Dict[str, float]
    by_kind_mj: Dict[str, float]
    horizon: float

    @property
    def total_mj(self) -> float:
        return sum(self.energy_mj.values())

    def share(self, kind: str) -> float:
        total = self.total_mj
        if total <= 0:
            return 0.0
        return self.by_kind_mj.get(kind, 0.0) / total

    @property
    def average_power_w(self) -> float:
        return self.total_mj / self.horizon if self.horizon > 0 else 0.0

    def to_dict(self) -> Dict:
        return {
            'busy_ms': {k: round(v, 6) for k, v in sorted(self.busy_ms.items())},
            'energy_mj': {k: round(v, 6) for k, v in sorted(self.energy_mj.items())},
            'by_kind_mj': {k: round(v, 6) for k, v in sorted(self.by_kind_mj.items())},
            'shares': {k: round(self.share(k), 6) for k in sorted(self.by_kind_mj)},
            'total_mj': round(self.total_mj, 6),
            'average_power_w': round(self.average_power_w, 6),
        }


# ---------------------------------------------------------------------------
# Layer graphs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Layer:
    id: int
    op_kind: str
    block: str
    params: Dict[str, str] = field(default_factory=dict)


@dataclass(frozen=True)
class LayerGraph:
    """Ordered DNN layers grouped into named blocks; edges are linear with skips."""

    layers: Tuple[Layer, ...]
    name: str = ''
    skips: Tuple[Tuple[int, int], ...] = ()
    warnings: Tuple[str, ...] = ()

    def blocks(self) -> List[str]:
        seen: List[str] = []
        for layer in self.layers:
            if not seen or seen[-1] != layer.block:
                seen.append(layer.block)
        return seen

    def ops(self) -> List[str]:
        return [layer.op_kind for layer in self.layers]


@dataclass(frozen=True)
class SupportProfile:
    device: str
    supported_ops: FrozenSet[str]
    max_fallback_subgraphs: int = 8

    def __post_init__(self):
        object.__setattr__(self, 'supported_ops', frozenset(self.supported_ops))
        if self.max_fallback_subgraphs < 0:
            raise ValueError("max_fallback_subgraphs must be >= 0")


@dataclass(frozen=True)
class Segment:
    device: str  # 'target' or 'fallback'
    start: int
    end: int  # exclusive

    @property
    def size(self) -> int:
        return self.end - self.start


@dataclass(frozen=True)
class PartitionPlan:
    segments: Tuple[Segment, ...]
    fallback_count: int
    feasible: bool
    unsupported_runs: int
    layer_count: int
    switch_penalty: float = 1.0

    @property
    def entries(self) -> int:
        return self.fallback_count

    @property
    def transitions(self) -> int:
        return 2 * self.fallback_count

    @property
    def est_switch_overhead(self) -> float:
        return self.transitions * self.switch_penalty

    def to_dict(self) -> Dict:
        return {
            'segments': [
                {'index': i, 'device': s.device, 'start': s.start, 'end': s.end, 'layers': s.size}
                for i, s in enumerate(self.segments)
            ],
            'fallback_count': self.fallback_count,
            'entries': self.entries,
            'transitions': self.transitions,
            'unsupported_runs': self.unsupported_runs,
            'feasible': self.feasible,
            'layer_count': self.layer_count,
            'est_switch_overhead': self.est_switch_overhead,
        }


# ---------------------------------------------------------------------------
# Workloads and experiments
# ---------------------------------------------------------------------------

DEFAULT_SOURCE_RATES = {
    'camera': 30.0,
    'lidar': 10.0,
    'gnss': 100.0,
    'planning': 10.0,
    'control': 100.0,
}


@dataclass(frozen=True)
class WorkloadSpec:
    app_name: str
    num_2d_streams: int
    model_family: str
    resolution: int
    cost_profile: str = 'unit'
    source_rates: Dict[str, float] = field(default_factory=lambda: dict(DEFAULT_SOURCE_RATES))
    fusion_2d: bool = True
    padding: bool = False
    substitutions: Tuple[Tuple[str, str], ...] = ()


STAGES = (
    'linux-ts',
    'static-rt',
    'jit',
    'jit+accel',
    'jit+accel+custom',
    'jit+accel+custom+iter',
)


@dataclass
class ExperimentPlan:
    apps: List[str]
    stages: List[str]
    platform: Optional[str] = None
    horizon_ms: float = 6000.0
    seed: int = 7
    output_dir: str = 'results'
    jobs: int = 1
    max_iters: int = 3
    symmetry: bool = True
    padding: bool = False
    db: Optional[str] = None
    trace: bool = False


# Database schema for experiment runs
RUNS_SCHEMA_SQL = """
CREATE TABLE IF NOT EXISTS runs (
    run_id TEXT PRIMARY KEY,
    app TEXT NOT NULL,
    stage TEXT NOT NULL,
    profile TEXT,
    seed INTEGER NOT NULL,
    horizon_ms REAL NOT NULL,
    policy TEXT,
    makespan REAL,
    overall_miss_rate REAL,
    starved_count INTEGER DEFAULT 0,
    starved TEXT,
    total_energy_mj REAL,
    gpu_share REAL,
    dla_share REAL,
    cpu_share REAL,
    average_power_w REAL,
    candidates INTEGER DEFAULT 0,
    recorded_at TIMESTAMP NOT NULL
);
"""

MODULE_RESULTS_SCHEMA_SQL = """
CREATE TABLE IF NOT EXISTS module_results (
    run_id TEXT NOT NULL,
    module TEXT NOT NULL,
    deadline_ms REAL,
    completed INTEGER DEFAULT 0,
    missed INTEGER DEFAULT 0,
    dropped INTEGER DEFAULT 0,
    miss_rate REAL,
    latency_mean REAL,
    latency_std REAL,
    latency_p99 REAL,
    samples INTEGER DEFAULT 0,
    timeout INTEGER DEFAULT 0,
    PRIMARY KEY (run_id, module)
);
"""

INDEXES_SQL = [
    "CREATE INDEX IF NOT EXISTS idx_runs_app ON runs(app);",
    "CREATE INDEX IF NOT EXISTS idx_runs_stage ON runs(stage);",
    "CREATE INDEX IF NOT EXISTS idx_module_results_module ON module_results(module);",
]

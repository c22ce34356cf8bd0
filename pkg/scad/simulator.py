"""
Discrete-event simulation of a scheduled task graph on the platform.

Models timer and reactive activations, per-task main and assistant threads,
real-time and time-sharing CPU scheduling, accelerator engines with co-run
slowdown, deadline accounting and energy. The GPU runs its models
concurrently; every other accelerator is a serial engine.
"""

import heapq
import itertools
import json
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Deque, Dict, List, NamedTuple, Optional, Tuple, Union

import numpy as np

from .heft import check_schedule, schedule_heft
from .models import (
    CPU, GPU, ISOLATED_CATEGORIES,
    Dag, EnergyReport, MissReport, ModuleStats, Platform, Policy, PolicyConfig,
    Schedule, SchedulingError, SimTrace, TaskNode, TraceEvent,
)

logger = logging.getLogger(__name__)

EPS = 1e-9
GENERAL_POOL = 'general'
RESERVED_POOL = 'reserved'


class SimResult(NamedTuple):
    trace: SimTrace
    miss: MissReport
    energy: EnergyReport


@dataclass
class _Item:
    entry: Optional[float]
    noise: float
    start: Optional[float] = None
    device_start: Optional[float] = None
    dispatched: bool = False


@dataclass
class _Thread:
    task: str
    index: int
    pool: str
    core: Optional[str]
    prio: int
    rt: bool = False
    remaining: float = 0.0
    ready: bool = False
    chunks: Deque[float] = field(default_factory=deque)
    fresh_chunk: bool = True


@dataclass
class _Task:
    node: TaskNode
    proc: str
    kind: str
    host: Optional[str]
    exit: bool
    threads: List[_Thread]
    pending: Deque[_Item] = field(default_factory=deque)
    active: Optional[_Item] = None
    fresh: Dict[str, Optional[float]] = field(default_factory=dict)
    out_entry: Optional[float] = None
    spans: List[float] = field(default_factory=list)

    @property
    def main(self) -> _Thread:
        return self.threads[0]


@dataclass
class _Core:
    id: str
    pool: str
    speed: float
    running: Optional[_Thread] = None
    since: float = 0.0
    token: int = 0
    rt_ready: List[Tuple[int, int, int, _Thread]] = field(default_factory=list)


@dataclass
class _Device:
    id: str
    kind: str
    speed: float
    k: int
    shared: bool = False
    queue: List[Tuple[float, int, str]] = field(default_factory=list)
    running: Optional[str] = None
    since: float = 0.0
    token: int = 0
    # shared engines: task id -> token of its job
    jobs: Dict[str, int] = field(default_factory=dict)


def exit_tasks(dag: Dag) -> List[str]:
    """Tasks closing their module: no trigger edge into a reactive task of the same category."""
    exits = []
    for node in dag.nodes:
        continues = any(
            e.trigger and dag.has_node(e.dst)
            and dag.node(e.dst).category == node.category
            and not dag.node(e.dst).is_timer
            for e in dag.out_edges(node.id)
        )
        if not continues:
            exits.append(node.id)
    return exits


class PlatformSimulator:
    """
    Event-driven executor of one (dag, platform, schedule, policy) run.

    Each task has a main thread carrying its cost and `thread_count - 1`
    assistant threads whose CPU demand is a fraction of the main thread's
    CPU work. Accelerator-placed tasks run `host_ms` on their host core
    before queueing on the device. A task placed on a non-GPU accelerator
    with `fallback_ms` runs that part on the GPU after its device part.

    Latency runs from the module entry, or from the moment the item first
    gets a core or joins a device queue; waiting behind the task's own
    earlier items shows up as drops, not as latency.
    """

    def __init__(self, dag: Dag, platform: Platform, schedule: Schedule,
                 config: PolicyConfig, horizon: float, seed: int = 0, **kwargs):
        self.dag = dag
        self.platform = platform
        self.schedule = schedule
        self.config = config
        self.horizon = float(horizon)
        self.record_trace = kwargs.get('trace', True)

        self.rng = np.random.default_rng(seed)
        self.now = 0.0
        self.events: List[Tuple[float, int, str, tuple]] = []
        self.counter = itertools.count()
        self.trace: List[TraceEvent] = []

        self.cores: Dict[str, _Core] = {}
        self.devices: Dict[str, _Device] = {}
        self.pools: Dict[str, Deque[_Thread]] = {GENERAL_POOL: deque(), RESERVED_POOL: deque()}
        self.busy: Dict[str, float] = {p.id: 0.0 for p in platform.processors}
        self.tasks: Dict[str, _Task] = {}

        self.samples: Dict[str, List[float]] = {c: [] for c in dag.categories()}
        self.missed: Dict[str, int] = {c: 0 for c in dag.categories()}
        self.dropped: Dict[str, int] = {c: 0 for c in dag.categories()}

        self._build()

    # ------------------------------------------------------------------
    # Setup
    # ------------------------------------------------------------------

    def _build(self):
        gpus = [p.id for p in self.platform.processors if p.kind == GPU]
        self.fallback_gpu = gpus[0] if gpus else None
        for proc in self.platform.processors:
            if proc.kind == CPU:
                pool = RESERVED_POOL if proc.id in self.platform.reserved else GENERAL_POOL
                self.cores[proc.id] = _Core(proc.id, pool, proc.speed_factor)
            else:
                k = len(self.schedule.tasks_on(proc.id))
                if proc.id == self.fallback_gpu:
                    k += sum(1 for node in self.dag.nodes if self._splits(node))
                self.devices[proc.id] = _Device(proc.id, proc.kind, proc.speed_factor, k, shared=proc.kind == GPU)

        isolate = bool(self.platform.reserved_cpus())
        exits = set(exit_tasks(self.dag))
        policy = self.config.policy

        for node in self.dag.nodes:
            proc_id = self.schedule.assignment[node.id]
            kind = self.platform.processor(proc_id).kind
            host = self.schedule.hosts.get(node.id) if kind != CPU else None
            core = proc_id if kind == CPU else host
            pool = RESERVED_POOL if isolate and node.category in ISOLATED_CATEGORIES else GENERAL_POOL
            prio = self.schedule.priorities.get(node.id, 0)
            threads = []
            for index in range(node.thread_count):
                rt = policy == Policy.STATIC_RT
                threads.append(_Thread(node.id, index, pool, core, prio, rt=rt))
            task = _Task(node, proc_id, kind, host, node.id in exits, threads)
            task.fresh = {e.src: None for e in self.dag.in_edges(node.id) if e.trigger}
            self.tasks[node.id] = task

    def _splits(self, node: TaskNode) -> bool:
        """Placed on a non-GPU accelerator with a part left to the GPU."""
        if node.fallback_ms <= 0 or self.fallback_gpu is None:
            return False
        kind = self.platform.processor(self.schedule.assignment[node.id]).kind
        return kind not in (CPU, GPU)

    # ------------------------------------------------------------------
    # Event plumbing
    # ------------------------------------------------------------------

    def _push(self, time: float, kind: str, payload: tuple = ()):
        heapq.heappush(self.events, (time, next(self.counter), kind, payload))

    def _emit(self, kind: str, task: str, thread: int, processor: Optional[str]):
        if self.record_trace:
            self.trace.append(TraceEvent(self.now, kind, task, thread, processor))

    def run(self) -> SimResult:
        """Run to the horizon and build the reports."""
        for task in self.tasks.values():
            if task.node.is_timer:
                self._push(0.0, 'timer', (task.node.id,))

        while self.events:
            time, _, kind, payload = heapq.heappop(self.events)
            if time >= self.horizon:
                break
            self.now = time
            if kind == 'timer':
                self._on_timer(*payload)
            elif kind == 'arrive':
                self._on_arrive(*payload)
            elif kind == 'slice_end':
                self._on_slice_end(*payload)
            elif kind == 'device_done':
                self._on_device_done(*payload)

        self._close()
        return SimResult(
            trace=SimTrace(events=self.trace, horizon=self.horizon),
            miss=self._miss_report(),
            energy=self._energy_report(),
        )

    # ------------------------------------------------------------------
    # Activations
    # ------------------------------------------------------------------

    def _draw_noise(self) -> float:
        sigma = self.config.noise_sigma
        if sigma <= 0:
            return 1.0
        return float(np.clip(self.rng.normal(1.0, sigma), 1.0 - 2 * sigma, 1.0 + 2 * sigma))

    def _on_timer(self, task_id: str):
        task = self.tasks[task_id]
        next_time = self.now + task.node.period
        if next_time < self.horizon:
            self._push(next_time, 'timer', (task_id,))
        self._activate(task, None)

    def _on_arrive(self, task_id: str, src: str, entry: Optional[float]):
        task = self.tasks[task_id]
        task.fresh[src] = entry if entry is not None else math.nan
        if any(v is None for v in task.fresh.values()):
            return
        category = task.node.category
        entries = [
            v for s, v in task.fresh.items()
            if self.dag.node(s).category == category and not math.isnan(v)
        ]
        task.fresh = {s: None for s in task.fresh}
        self._activate(task, min(entries) if entries else None)

    def _activate(self, task: _Task, entry: Optional[float]):
        item = _Item(entry=entry, noise=self._draw_noise())
        self._emit('activate', task.node.id, 0, task.proc)
        if task.active is None:
            self._begin_item(task, item)
            return
        if self.config.queueing == 'drop-oldest' and task.pending:
            task.pending.popleft()
            self.dropped[task.node.category] += 1
            self._emit('drop', task.node.id, 0, task.proc)
        task.pending.append(item)

    def _cpu_work(self, task: _Task) -> float:
        """CPU work of the main thread per item, before noise."""
        if task.kind == CPU:
            return task.node.cost_table[CPU]
        return task.node.host_ms

    def _begin_item(self, task: _Task, item: _Item):
        task.active = item
        main = task.main

        if self.config.policy == Policy.JIT_RT and not main.rt:
            main.rt = True
            self._emit('priority_raise', task.node.id, 0, main.core)

        if task.kind == CPU:
            main.remaining = task.node.cost_table[CPU] * self._core_speed(main.core) * item.noise
            self._make_ready(main)
        elif task.node.host_ms > 0:
            main.remaining = task.node.host_ms * self._core_speed(main.core)
            self._make_ready(main)
        else:
            self._request_device(task)

        fraction = task.node.assist_fraction
        if fraction is None:
            fraction = self.config.assist_fraction
        chunk = fraction * self._cpu_work(task) * self._core_speed(main.core)
        if chunk > EPS:
            for assistant in task.threads[1:]:
                assistant.chunks.append(chunk)
                if len(assistant.chunks) == 1:
                    assistant.remaining = chunk
                    assistant.fresh_chunk = True
                    self._make_ready(assistant)

    def _core_speed(self, core_id: Optional[str]) -> float:
        core = self.cores.get(core_id)
        return core.speed if core else 1.0

    # ------------------------------------------------------------------
    # CPU scheduling
    # ------------------------------------------------------------------

    def _make_ready(self, thread: _Thread):
        thread.ready = True
        if thread.rt:
            core = self.cores[thread.core]
            seq = next(self.counter)
            heapq.heappush(core.rt_ready, (-thread.prio, seq, seq, thread))
            self._reschedule(core)
        else:
            self.pools[thread.pool].append(thread)
            self._fill_pool(thread.pool)

    def _reschedule(self, core: _Core):
        if not core.rt_ready:
            if core.running is None:
                self._pick_next(core)
            return
        top = core.rt_ready[0][3]
        running = core.running
        if running is None:
            self._pick_next(core)
        elif not running.rt or top.prio > running.prio:
            self._preempt(core)
            self._pick_next(core)
            if not running.rt:
                self._fill_pool(running.pool)

    def _fill_pool(self, pool: str):
        queue = self.pools[pool]
        for core in self.cores.values():
            if not queue:
                return
            if core.pool == pool and core.running is None and not core.rt_ready:
                self._dispatch(core, queue.popleft())

    def _pick_next(self, core: _Core):
        if core.rt_ready:
            thread = heapq.heappop(core.rt_ready)[3]
            self._dispatch(core, thread)
        elif self.pools[core.pool]:
            self._dispatch(core, self.pools[core.pool].popleft())

    def _dispatch(self, core: _Core, thread: _Thread):
        thread.ready = False
        core.running = thread
        core.since = self.now
        core.token += 1
        task = self.tasks[thread.task]
        if thread.index == 0:
            item = task.active
            kind = 'resume' if item.dispatched else 'start'
            item.dispatched = True
            if item.start is None:
                item.start = self.now
        else:
            kind = 'start' if thread.fresh_chunk else 'resume'
            thread.fresh_chunk = False
        self._emit(kind, thread.task, thread.index, core.id)
        run_for = thread.remaining if thread.rt else min(thread.remaining, self.config.quantum)
        self._push(self.now + run_for, 'slice_end', (core.id, core.token))

    def _stop(self, core: _Core) -> _Thread:
        thread = core.running
        elapsed = self.now - core.since
        thread.remaining -= elapsed
        self.busy[core.id] += elapsed
        core.running = None
        core.token += 1
        return thread

    def _preempt(self, core: _Core):
        thread = self._stop(core)
        self._emit('preempt', thread.task, thread.index, core.id)
        if thread.rt:
            seq = next(self.counter)
            heapq.heappush(core.rt_ready, (-thread.prio, -seq, seq, thread))
        else:
            self.pools[thread.pool].appendleft(thread)
        thread.ready = True

    def _on_slice_end(self, core_id: str, token: int):
        core = self.cores[core_id]
        if core.token != token or core.running is None:
            return
        thread = core.running
        if thread.remaining - (self.now - core.since) > EPS:
            # quantum expired
            if not core.rt_ready and not self.pools[thread.pool]:
                elapsed = self.now - core.since
                thread.remaining -= elapsed
                self.busy[core.id] += elapsed
                core.since = self.now
                core.token += 1
                run_for = min(thread.remaining, self.config.quantum)
                self._push(self.now + run_for, 'slice_end', (core.id, core.token))
                return
            self._stop(core)
            self._emit('preempt', thread.task, thread.index, core.id)
            thread.ready = True
            self.pools[thread.pool].append(thread)
            self._pick_next(core)
            return

        self._stop(core)
        thread.remaining = 0.0
        self._burst_done(thread, core)
        if core.running is None:
            self._pick_next(core)

    def _burst_done(self, thread: _Thread, core: _Core):
        task = self.tasks[thread.task]
        if thread.index > 0:
            self._emit('finish', thread.task, thread.index, core.id)
            thread.chunks.popleft()
            if thread.chunks:
                thread.remaining = thread.chunks[0]
                thread.fresh_chunk = True
                self._make_ready(thread)
            return
        if task.kind == CPU:
            self._emit('finish', thread.task, 0, core.id)
            self._complete(task)
        else:
            self._emit('offload', thread.task, 0, core.id)
            self._request_device(task)

    # ------------------------------------------------------------------
    # Accelerators
    # ------------------------------------------------------------------

    def _request_device(self, task: _Task, device_id: Optional[str] = None):
        item = task.active
        if item.start is None:
            item.start = self.now
        device = self.devices[device_id or task.proc]
        if device.shared:
            self._launch(device, task)
            return
        heapq.heappush(device.queue, (self.now, -task.main.prio, task.node.id))
        if device.running is None:
            self._start_device(device)

    def _device_work(self, task: _Task, device: _Device) -> float:
        node = task.node
        if device.id != task.proc:
            return node.fallback_ms
        if self._splits(node):
            return max(0.0, node.cost_table[device.kind] - node.fallback_ms)
        return node.cost_table[device.kind]

    def _launch(self, device: _Device, task: _Task):
        item = task.active
        factor = self.config.corun_factor(device.kind, device.k)
        duration = self._device_work(task, device) * device.speed * item.noise * factor
        if item.device_start is None:
            item.device_start = self.now
        device.token += 1
        if device.shared:
            if not device.jobs:
                device.since = self.now
            device.jobs[task.node.id] = device.token
        else:
            device.running = task.node.id
            device.since = self.now
        kind = 'resume' if item.dispatched else 'start'
        item.dispatched = True
        self._emit(kind, task.node.id, 0, device.id)
        self._push(self.now + duration, 'device_done', (device.id, device.token, task.node.id))

    def _start_device(self, device: _Device):
        if device.queue:
            _, _, task_id = heapq.heappop(device.queue)
            self._launch(device, self.tasks[task_id])

    def _on_device_done(self, device_id: str, token: int, task_id: str):
        device = self.devices[device_id]
        if device.shared:
            if device.jobs.get(task_id) != token:
                return
            del device.jobs[task_id]
            if not device.jobs:
                self.busy[device.id] += self.now - device.since
        else:
            if device.token != token or device.running != task_id:
                return
            self.busy[device.id] += self.now - device.since
            device.running = None

        task = self.tasks[task_id]
        if device.id == task.proc and self._splits(task.node):
            self._emit('offload', task_id, 0, device.id)
            self._request_device(task, self.fallback_gpu)
        else:
            self._emit('finish', task_id, 0, device.id)
            self._complete(task)
        if not device.shared and device.running is None:
            self._start_device(device)

    # ------------------------------------------------------------------
    # Completion
    # ------------------------------------------------------------------

    def _complete(self, task: _Task):
        item = task.active
        node = task.node
        began = item.start if task.kind == CPU else item.device_start
        task.spans.append(self.now - began)
        out_entry = item.entry if item.entry is not None else item.start
        task.out_entry = out_entry

        if task.exit:
            latency = self.now - out_entry
            self.samples[node.category].append(latency)
            if latency > node.expected_latency * self.config.slack_factor + EPS:
                self.missed[node.category] += 1
                self._emit('deadline_miss', node.id, 0, task.proc)

        for edge in self.dag.out_edges(node.id):
            dst = self.tasks.get(edge.dst)
            if dst is None or not edge.trigger or dst.node.is_timer:
                continue
            comm = 0.0
            if dst.proc != task.proc:
                comm = edge.comm_between(task.kind, dst.kind)
            self._push(self.now + comm, 'arrive', (edge.dst, node.id, out_entry))

        task.active = None
        if task.pending:
            self._begin_item(task, task.pending.popleft())
        elif self.config.policy == Policy.JIT_RT and task.main.rt:
            task.main.rt = False
            self._emit('priority_drop', node.id, 0, task.main.core)

    # ------------------------------------------------------------------
    # Reports
    # ------------------------------------------------------------------

    def _close(self):
        """Stop the clock at the horizon, closing bursts still in flight."""
        self.now = self.horizon
        for core in self.cores.values():
            if core.running is not None:
                thread = self._stop(core)
                self._emit('preempt', thread.task, thread.index, core.id)
        for device in self.devices.values():
            if device.running is not None:
                self.busy[device.id] += self.horizon - device.since
                self._emit('preempt', device.running, 0, device.id)
                device.running = None
            if device.jobs:
                self.busy[device.id] += self.horizon - device.since
                for task_id in sorted(device.jobs):
                    self._emit('preempt', task_id, 0, device.id)
                device.jobs.clear()

    def _miss_report(self) -> MissReport:
        modules: Dict[str, ModuleStats] = {}
        for category in self.dag.categories():
            members = [t for t in self.tasks.values() if t.node.category == category]
            deadline = min(t.node.expected_latency for t in members)
            samples = np.asarray(self.samples[category], dtype=float)
            late = self.missed[category]
            timeouts = sum(1 for t in members if t.exit and not t.spans)
            stats = ModuleStats(
                module=category,
                deadline=deadline,
                completed=len(samples) - late,
                missed=late + timeouts,
                dropped=self.dropped[category],
                samples=len(samples),
            )
            if len(samples):
                stats.mean = float(samples.mean())
                stats.std = float(samples.std())
                stats.p99 = float(np.percentile(samples, 99))
            modules[category] = stats

        starved = sorted(t for t, task in self.tasks.items() if not task.spans)
        task_perf = {
            t: float(np.mean(task.spans)) if task.spans else math.inf
            for t, task in self.tasks.items()
        }
        completions = {t: len(task.spans) for t, task in self.tasks.items()}
        return MissReport(modules=modules, starved=starved, task_perf=task_perf, completions=completions)

    def _energy_report(self) -> EnergyReport:
        energy = {}
        by_kind: Dict[str, float] = {}
        for proc in self.platform.processors:
            mj = self.busy[proc.id] * proc.power_watts
            energy[proc.id] = mj
            by_kind[proc.kind] = by_kind.get(proc.kind, 0.0) + mj
        return EnergyReport(busy_ms=dict(self.busy), energy_mj=energy, by_kind_mj=by_kind, horizon=self.horizon)


def simulate(dag: Dag, platform: Platform, schedule: Schedule, policy: PolicyConfig,
             horizon: float, seed: int = 0, trace: bool = True) -> SimResult:
    """
    Simulate a scheduled graph up to a horizon.

    Args:
        dag: Task graph
        platform: Platform the schedule targets
        schedule: Placement, priorities and host cores
        policy: Priority policy and platform-model knobs
        horizon: Simulated time (ms)
        seed: Noise seed; identical inputs and seed give identical results
        trace: Record trace events

    Returns:
        SimResult (trace, miss report, energy report)

    Raises:
        SchedulingError: If the schedule does not fit the graph and platform
        ValueError: If the horizon is not positive
    """
    violations = check_schedule(dag, platform, schedule)
    if violations:
        raise SchedulingError(f"invalid schedule: {'; '.join(violations)}")
    if horizon <= 0:
        raise ValueError(f"horizon must be > 0, got {horizon}")
    longest = max((n.period for n in dag.nodes if n.period), default=0.0)
    if horizon < 10 * longest:
        logger.warning(f"Horizon {horizon:.0f} ms is shorter than 10 periods of the slowest timer ({longest:.0f} ms)")

    result = PlatformSimulator(dag, platform, schedule, policy, horizon, seed, trace=trace).run()
    logger.debug(
        f"Simulated {len(dag.nodes)} tasks under {policy.policy.value} for {horizon:.0f} ms: "
        f"miss rate {result.miss.overall_miss_rate:.1%}, {len(result.miss.starved)} starved"
    )
    return result


def measure_task_perf(dag: Dag, platform: Platform, policy: Union[Policy, PolicyConfig],
                      horizon: float, seed: int = 0,
                      schedule: Optional[Schedule] = None) -> Dict[str, float]:
    """
    Observed mean execution span per task, co-run slowdown included.

    Starved tasks map to +inf. The HEFT placement is used when no schedule
    is given.
    """
    config = policy if isinstance(policy, PolicyConfig) else PolicyConfig(policy=policy)
    if schedule is None:
        schedule = schedule_heft(dag, platform)
    return simulate(dag, platform, schedule, config, horizon, seed, trace=False).miss.task_perf


def trace_to_ndjson(trace: SimTrace) -> str:
    """One JSON object per line, in event order."""
    return ''.join(json.dumps(e.to_dict(), sort_keys=True) + '\n' for e in trace.events)


def write_trace(trace: SimTrace, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.write_text(trace_to_ndjson(trace), encoding='utf-8')
    logger.info(f"Wrote {len(trace.events)} trace events to {path}")
    return path

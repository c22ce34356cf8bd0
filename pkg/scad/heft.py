"""
HEFT list scheduling: upward ranks, insertion-based EFT placement, priorities.
"""

import bisect
import heapq
import json
import logging
import math
from typing import Callable, Dict, List, Tuple

from .dag import topological_order
from .models import (
    CPU, DOCUMENT_VERSION, ISOLATED_CATEGORIES,
    Dag, DagError, Platform, Processor, Schedule, SchedulingError, Slot, TaskNode,
)

logger = logging.getLogger(__name__)

EPS = 1e-9


def heft_rank(dag: Dag) -> Dict[str, float]:
    """Upward rank: mean cost plus the heaviest successor path (comm + rank)."""
    ranks: Dict[str, float] = {}
    for task_id in reversed(topological_order(dag)):
        node = dag.node(task_id)
        tail = 0.0
        for edge in dag.out_edges(task_id):
            if edge.dst in ranks:
                tail = max(tail, edge.mean_comm() + ranks[edge.dst])
        ranks[task_id] = node.mean_cost() + tail
    return ranks


RANK_STRATEGIES: Dict[str, Callable[[Dag], Dict[str, float]]] = {
    'heft': heft_rank,
}


def compute_ranks(dag: Dag, strategy: str = 'heft') -> Dict[str, float]:
    """
    Compute the rank table with a registered strategy.

    Args:
        dag: Task graph
        strategy: Name in RANK_STRATEGIES

    Returns:
        Map from task id to rank (milliseconds)

    Raises:
        DagError: If the graph is cyclic
        KeyError: If the strategy is unknown
    """
    if strategy not in RANK_STRATEGIES:
        raise KeyError(f"unknown rank strategy {strategy!r}; available: {', '.join(RANK_STRATEGIES)}")
    return RANK_STRATEGIES[strategy](dag)


def candidate_processors(node: TaskNode, platform: Platform) -> List[Processor]:
    """Processors a node may be placed on, honoring affinity and core reservation."""
    procs = [p for p in platform.processors if p.kind in node.eligibility and p.kind in node.cost_table]
    if node.affinity is not None:
        procs = [p for p in procs if p.id == node.affinity]
    if platform.reserved:
        if node.category in ISOLATED_CATEGORIES:
            procs = [p for p in procs if p.kind != CPU or p.id in platform.reserved]
        else:
            procs = [p for p in procs if p.id not in platform.reserved]
    return procs


def _comm(edge, assignment: Dict[str, str], platform: Platform, dst_proc: Processor) -> float:
    src_proc_id = assignment[edge.src]
    if src_proc_id == dst_proc.id:
        return 0.0
    return edge.comm_between(platform.processor(src_proc_id).kind, dst_proc.kind)


def _earliest_start(busy: List[Tuple[float, float, str]], ready: float, cost: float) -> float:
    """First start >= ready that fits `cost` into an idle gap or after the last slot."""
    prev_end = 0.0
    for start, finish, _ in busy:
        candidate = max(ready, prev_end)
        if candidate + cost <= start + EPS:
            return candidate
        prev_end = max(prev_end, finish)
    return max(ready, prev_end)


def schedule_heft(dag: Dag, platform: Platform, ranks: Dict[str, float] = None) -> Schedule:
    """
    Place every task on the processor minimizing its earliest finish time.

    Tasks are taken from a ready set in descending rank order (ties by id),
    and each may be inserted into an idle gap between placed slots.

    Args:
        dag: Task graph
        platform: Target platform
        ranks: Rank table; computed with the HEFT rank when omitted

    Returns:
        Schedule with slots, global priorities and host cores

    Raises:
        SchedulingError: If a task has no processor it may run on
    """
    if ranks is None:
        ranks = compute_ranks(dag)

    candidates = {}
    for node in dag.nodes:
        procs = candidate_processors(node, platform)
        if not procs:
            raise SchedulingError(f"task {node.id}: no eligible processor on the platform")
        candidates[node.id] = procs

    indegree = {n.id: 0 for n in dag.nodes}
    for edge in dag.edges:
        if edge.src in indegree and edge.dst in indegree:
            indegree[edge.dst] += 1

    ready = [(-round(ranks[t], 9), t) for t, d in indegree.items() if d == 0]
    heapq.heapify(ready)

    busy: Dict[str, List[Tuple[float, float, str]]] = {p.id: [] for p in platform.processors}
    assignment: Dict[str, str] = {}
    slots: Dict[str, Slot] = {}
    order: List[str] = []

    while ready:
        _, task_id = heapq.heappop(ready)
        node = dag.node(task_id)
        best = None
        for index, proc in enumerate(candidates[task_id]):
            cost = node.cost_table[proc.kind] * proc.speed_factor
            ready_time = 0.0
            for edge in dag.in_edges(task_id):
                if edge.src not in slots:
                    continue
                comm = _comm(edge, assignment, platform, proc)
                ready_time = max(ready_time, slots[edge.src].finish + comm)
            start = _earliest_start(busy[proc.id], ready_time, cost)
            key = (start + cost, index)
            if best is None or key < best[0]:
                best = (key, proc, start, start + cost)

        _, proc, start, finish = best
        assignment[task_id] = proc.id
        slots[task_id] = Slot(start, finish)
        bisect.insort(busy[proc.id], (start, finish, task_id))
        order.append(task_id)
        logger.debug(f"HEFT placed {task_id} on {proc.id} [{start:.3f}, {finish:.3f}]")

        for edge in dag.out_edges(task_id):
            if edge.dst not in indegree:
                continue
            indegree[edge.dst] -= 1
            if indegree[edge.dst] == 0:
                heapq.heappush(ready, (-round(ranks[edge.dst], 9), edge.dst))

    if len(order) != len(dag.nodes):
        raise DagError("cycle detected while scheduling")

    total = len(order)
    priorities = {task_id: total - index for index, task_id in enumerate(order)}
    makespan = max((s.finish for s in slots.values()), default=0.0)
    hosts = assign_hosts(dag, platform, assignment, slots)

    return Schedule(
        assignment=assignment,
        slots=slots,
        priorities=priorities,
        makespan=makespan,
        hosts=hosts,
        order=order,
    )


def assign_hosts(dag: Dag, platform: Platform, assignment: Dict[str, str],
                 slots: Dict[str, Slot]) -> Dict[str, str]:
    """
    Choose the CPU core that drives each accelerator-placed task.

    The core of the first CPU-placed trigger predecessor wins; otherwise the
    least-loaded general core (ties by platform order).
    """
    general = platform.general_cpus()
    load = {p.id: 0.0 for p in general}
    for task_id, proc_id in assignment.items():
        if proc_id in load:
            span = slots[task_id].finish - slots[task_id].start
            if math.isfinite(span):
                load[proc_id] += span

    hosts: Dict[str, str] = {}
    for node in dag.nodes:
        proc_id = assignment.get(node.id)
        if proc_id is None or platform.processor(proc_id).kind == CPU:
            continue
        host = None
        for edge in dag.in_edges(node.id):
            pred_proc = assignment.get(edge.src)
            if edge.trigger and pred_proc in load:
                host = pred_proc
                break
        if host is None and general:
            host = min(general, key=lambda p: load[p.id]).id
        hosts[node.id] = host
    return hosts


def check_schedule(dag: Dag, platform: Platform, schedule: Schedule) -> List[str]:
    """
    Check a schedule against a graph and platform.

    Returns:
        Violation messages (empty when the schedule is valid)
    """
    violations = []
    proc_ids = {p.id for p in platform.processors}

    for node in dag.nodes:
        proc_id = schedule.assignment.get(node.id)
        if proc_id is None:
            violations.append(f"task {node.id}: not assigned")
            continue
        if proc_id not in proc_ids:
            violations.append(f"task {node.id}: unknown processor {proc_id}")
            continue
        kind = platform.processor(proc_id).kind
        if kind not in node.eligibility:
            violations.append(f"task {node.id}: not eligible on {proc_id} ({kind})")
        if node.affinity is not None and node.affinity != proc_id:
            violations.append(f"task {node.id}: pinned to {node.affinity}, placed on {proc_id}")
        if node.id not in schedule.slots:
            violations.append(f"task {node.id}: no slot")
        if kind != CPU:
            host = schedule.hosts.get(node.id)
            if host is None or host not in proc_ids or platform.processor(host).kind != CPU:
                violations.append(f"task {node.id}: accelerator task without a CPU host")

    by_proc: Dict[str, List[Tuple[float, float, str]]] = {}
    for task_id, proc_id in schedule.assignment.items():
        if task_id in schedule.slots:
            slot = schedule.slots[task_id]
            by_proc.setdefault(proc_id, []).append((slot.start, slot.finish, task_id))
    for proc_id, items in sorted(by_proc.items()):
        items.sort()
        for (s1, f1, t1), (s2, f2, t2) in zip(items, items[1:]):
            if f1 > s2 + EPS:
                violations.append(f"processor {proc_id}: slots of {t1} and {t2} overlap")

    for edge in dag.edges:
        if edge.src not in schedule.slots or edge.dst not in schedule.slots:
            continue
        src_proc = schedule.assignment.get(edge.src)
        dst_proc = schedule.assignment.get(edge.dst)
        comm = 0.0
        if src_proc != dst_proc and src_proc in proc_ids and dst_proc in proc_ids:
            comm = edge.comm_between(platform.processor(src_proc).kind, platform.processor(dst_proc).kind)
        if schedule.slots[edge.dst].start + EPS < schedule.slots[edge.src].finish + comm:
            violations.append(f"edge {edge.src}->{edge.dst}: precedence violated")

    return violations


def render_gantt(schedule: Schedule, platform: Platform) -> str:
    """Plain-text Gantt chart, one row per processor."""
    width = max((len(p.id) for p in platform.processors), default=4)
    lines = [f"Gantt chart (makespan {schedule.makespan:.2f} ms)"]
    for proc in platform.processors:
        cells = []
        for task_id in schedule.tasks_on(proc.id):
            slot = schedule.slots[task_id]
            cells.append(f"{task_id}[{slot.start:.2f}-{slot.finish:.2f}]")
        lines.append(f"{proc.id:<{width}} | {'  '.join(cells) if cells else '-'}")
    return '\n'.join(lines) + '\n'


def dump_schedule(schedule: Schedule) -> str:
    """Serialize a schedule to a `.sched` document."""
    order = schedule.order or sorted(schedule.assignment)
    doc = {
        'version': DOCUMENT_VERSION,
        'makespan': schedule.makespan,
        'tasks': [
            {
                'id': task_id,
                'processor': schedule.assignment[task_id],
                'start': schedule.slots[task_id].start,
                'finish': schedule.slots[task_id].finish,
                'priority': schedule.priorities[task_id],
                'host': schedule.hosts.get(task_id),
            }
            for task_id in order
        ],
    }
    return json.dumps(doc, indent=2) + '\n'


def load_schedule(text: str) -> Schedule:
    """
    Parse a `.sched` document.

    Raises:
        SchedulingError: On malformed documents
    """
    try:
        doc = json.loads(text)
        if doc.get('version') != DOCUMENT_VERSION:
            raise SchedulingError(f"unsupported schedule version {doc.get('version')!r}")
        schedule = Schedule(assignment={}, slots={}, priorities={}, makespan=float(doc['makespan']))
        for entry in doc['tasks']:
            task_id = entry['id']
            schedule.assignment[task_id] = entry['processor']
            schedule.slots[task_id] = Slot(float(entry['start']), float(entry['finish']))
            schedule.priorities[task_id] = int(entry['priority'])
            if entry.get('host'):
                schedule.hosts[task_id] = entry['host']
            schedule.order.append(task_id)
        return schedule
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, SchedulingError):
            raise
        raise SchedulingError(f"malformed schedule document: {e}") from e

"""
Scheduling by DAG instantiation over accelerator assignments.

Every valid map from accelerator-eligible tasks to concrete accelerators is
measured, the graph is specialized to the measured costs and rescheduled,
and the candidate with the best simulated score wins.
"""

import itertools
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, List, Mapping, Optional, Tuple, Union

from tqdm import tqdm

from .dag import load_platform
from .heft import schedule_heft
from .models import (
    CPU, PROCESSOR_KINDS,
    Dag, EnergyReport, EnumerationError, MeasurementError, MissReport, Platform,
    Policy, PolicyConfig, Processor, Schedule,
)
from .simulator import measure_task_perf, simulate

logger = logging.getLogger(__name__)

Assignment = Dict[str, str]
Score = Tuple[float, float, float, float, float]


@dataclass(frozen=True)
class SimConfig:
    """Stage policy plus the knobs of the measurement runs."""

    policy: PolicyConfig = field(default_factory=PolicyConfig)
    measure_policy: Optional[PolicyConfig] = None
    horizon_ms: float = 6000.0
    seed: int = 7
    bound: int = 10000
    symmetry: bool = True
    jobs: int = 1

    def measurement_config(self) -> PolicyConfig:
        """Policy of the default-schedule measurement (time sharing unless overridden)."""
        if self.measure_policy is not None:
            return self.measure_policy
        return replace(self.policy, policy=Policy.TIME_SHARING)


@dataclass
class AssignmentSpace:
    b: Dict[str, Dict[str, int]]
    tasks: List[str]
    options: Dict[str, List[str]]
    assignments: List[Assignment]
    full_size: int

    def __len__(self) -> int:
        return len(self.assignments)


@dataclass
class MeasuredCandidate:
    assignment: Assignment
    dag: Dag
    schedule: Schedule
    miss: MissReport
    energy: EnergyReport
    task_perf: Dict[str, float]
    score: Score
    index: int = 0
    history: List[Score] = field(default_factory=list)
    iterations: int = 1
    evaluated: List[Tuple[Assignment, Score]] = field(default_factory=list)


def _identity_class(proc: Processor) -> Tuple[str, float, float]:
    return proc.kind, proc.speed_factor, proc.power_watts


def _accelerator_options(dag: Dag, platform: Platform) -> Dict[str, List[str]]:
    options = {}
    for node in dag.nodes:
        procs = [p.id for p in platform.accelerators() if p.kind in node.eligibility and p.kind in node.cost_table]
        if procs:
            options[node.id] = procs
    return options


def _units(dag: Dag, options: Dict[str, List[str]], symmetry: bool) -> List[List[str]]:
    """Enumeration units: interchangeable task groups (with symmetry) or single tasks."""
    if not symmetry:
        return [[t] for t in options]
    units: Dict[Tuple, List[str]] = {}
    for task_id, procs in options.items():
        group = dag.node(task_id).group
        key = (group, tuple(procs)) if group is not None else (None, task_id)
        units.setdefault(key, []).append(task_id)
    return list(units.values())


def _unit_choices(unit: List[str], procs: List[str]) -> List[Tuple[str, ...]]:
    if len(unit) == 1:
        return [(p,) for p in procs]
    return list(itertools.combinations_with_replacement(procs, len(unit)))


def _relabelings(platform: Platform) -> List[Dict[str, str]]:
    """Every permutation of identical accelerators (same kind, speed and power)."""
    classes: Dict[Tuple, List[str]] = {}
    for proc in platform.accelerators():
        classes.setdefault(_identity_class(proc), []).append(proc.id)
    per_class = [[dict(zip(ids, perm)) for perm in itertools.permutations(ids)] for ids in classes.values()]
    relabelings = []
    for combo in itertools.product(*per_class):
        mapping: Dict[str, str] = {}
        for part in combo:
            mapping.update(part)
        relabelings.append(mapping)
    return relabelings


def _canonical_key(assignment: Assignment, units: List[List[str]], relabelings: List[Dict[str, str]],
                   order: Dict[str, int]) -> Tuple:
    keys = []
    for mapping in relabelings:
        key = []
        for unit in units:
            key.append(tuple(sorted((mapping[assignment[t]] for t in unit), key=order.__getitem__)))
        keys.append(tuple(key))
    return min(keys)


def enumerate_assignments(dag: Dag, platform: Platform, bound: int = 10000,
                          symmetry: bool = True) -> AssignmentSpace:
    """
    Enumerate the valid accelerator assignments of a graph.

    Tasks of the same `group` with identical options are enumerated as
    multisets and assignments that only relabel identical accelerators are
    folded into one when `symmetry` is on.

    Args:
        dag: Task graph
        platform: Platform whose accelerators are assigned
        bound: Largest space enumerated (after group reduction when symmetric)
        symmetry: Fold interchangeable tasks and identical accelerators

    Returns:
        AssignmentSpace in deterministic order

    Raises:
        EnumerationError: If the space exceeds the bound (carries the count)
    """
    b = {
        node.id: {kind: int(kind in node.eligibility) for kind in PROCESSOR_KINDS}
        for node in dag.nodes
    }
    options = _accelerator_options(dag, platform)
    tasks = list(options)
    full_size = math.prod(len(p) for p in options.values())

    units = _units(dag, options, symmetry)
    count = math.prod(math.comb(len(options[u[0]]) + len(u) - 1, len(u)) for u in units)
    if count > bound:
        raise EnumerationError(f"assignment space of {count} candidates exceeds the bound of {bound}", count)

    order = {p.id: i for i, p in enumerate(platform.processors)}
    relabelings = _relabelings(platform) if symmetry else [{p.id: p.id for p in platform.accelerators()}]
    seen = set()
    assignments: List[Assignment] = []
    for combo in itertools.product(*(_unit_choices(u, options[u[0]]) for u in units)):
        assignment: Assignment = {}
        for unit, choice in zip(units, combo):
            assignment.update(zip(unit, choice))
        assignment = {t: assignment[t] for t in tasks}
        if symmetry:
            key = _canonical_key(assignment, units, relabelings, order)
            if key in seen:
                continue
            seen.add(key)
        assignments.append(assignment)

    logger.debug(f"Enumerated {len(assignments)} assignments over {len(tasks)} tasks (full space {full_size})")
    return AssignmentSpace(b=b, tasks=tasks, options=options, assignments=assignments, full_size=full_size)


def restrict(dag: Dag, s: Assignment, platform: Platform) -> Dag:
    """Pin every assigned task to its accelerator."""
    nodes = []
    for node in dag.nodes:
        if node.id in s:
            kind = platform.processor(s[node.id]).kind
            node = replace(node, eligibility=frozenset({kind}), affinity=s[node.id])
        nodes.append(node)
    return Dag(nodes=tuple(nodes), edges=dag.edges, metadata=dict(dag.metadata))


def instantiate(dag: Dag, s: Assignment, perf: Mapping[str, Union[float, Mapping[str, float]]],
                platform: Optional[Platform] = None) -> Dag:
    """
    Specialize a graph's costs to measured performance under an assignment.

    Args:
        dag: Task graph
        s: Assignment of accelerator-eligible tasks to accelerator ids
        perf: Per task, a measured time or a per-kind mapping of times
        platform: Platform the accelerator ids belong to (default device when omitted)

    Returns:
        Dag with single-entry cost tables; assigned tasks are pinned

    Raises:
        MeasurementError: If a task has no measurement for its kind
    """
    platform = platform or load_platform(None)
    nodes = []
    for node in dag.nodes:
        kind = platform.processor(s[node.id]).kind if node.id in s else CPU
        if node.id not in perf:
            raise MeasurementError(f"no measurement for task {node.id}")
        value = perf[node.id]
        if isinstance(value, Mapping):
            if kind not in value:
                raise MeasurementError(f"no {kind} measurement for task {node.id}")
            value = value[kind]
        changes = {'cost_table': {kind: float(value)}, 'eligibility': frozenset({kind})}
        if node.id in s:
            changes['affinity'] = s[node.id]
        nodes.append(replace(node, **changes))
    return Dag(nodes=tuple(nodes), edges=dag.edges, metadata=dict(dag.metadata))


def score_of(miss: MissReport, schedule: Schedule) -> Score:
    """
    Lower is better: worst module miss rate, overall drop rate, overall miss
    rate, worst p99/deadline ratio, makespan.

    Drops stay out of the miss rates. A module missing every deadline scores
    1.0 however few items it completes, so plans missing equally are ranked
    by how many activations they process.
    """
    return (
        miss.worst_miss_rate(),
        miss.overall_drop_rate,
        miss.overall_miss_rate,
        miss.worst_latency_ratio(),
        schedule.makespan,
    )


def evaluate_candidate(dag: Dag, platform: Platform, s: Assignment, config: SimConfig,
                       index: int = 0) -> MeasuredCandidate:
    """Measure, instantiate, reschedule and simulate one assignment."""
    restricted = restrict(dag, s, platform)
    default = schedule_heft(restricted, platform)
    perf = measure_task_perf(restricted, platform, config.measurement_config(),
                             config.horizon_ms, config.seed, schedule=default)
    inst = instantiate(restricted, s, perf, platform)
    schedule = schedule_heft(inst, platform)
    result = simulate(restricted, platform, schedule, config.policy, config.horizon_ms, config.seed, trace=False)
    return MeasuredCandidate(
        assignment=dict(s),
        dag=inst,
        schedule=schedule,
        miss=result.miss,
        energy=result.energy,
        task_perf=result.miss.task_perf,
        score=score_of(result.miss, schedule),
        index=index,
    )


def _evaluate_packed(args) -> MeasuredCandidate:
    return evaluate_candidate(*args)


def evaluate_candidates(dag: Dag, platform: Platform, space: AssignmentSpace, config: SimConfig,
                        verbose: bool = False) -> List[MeasuredCandidate]:
    """Evaluate every assignment; results keep enumeration order whatever `jobs` is."""
    work = [(dag, platform, s, config, i) for i, s in enumerate(space.assignments)]
    if config.jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=config.jobs) as executor:
            results = executor.map(_evaluate_packed, work)
            if verbose:
                results = tqdm(results, total=len(work), desc="Evaluating candidates", unit="cand")
            return list(results)
    iterator = tqdm(work, desc="Evaluating candidates", unit="cand") if verbose else work
    return [_evaluate_packed(args) for args in iterator]


def schedule_by_instantiation(dag: Dag, platform: Platform, config: SimConfig,
                              verbose: bool = False) -> MeasuredCandidate:
    """
    Best-of-enumeration scheduling.

    Returns:
        The candidate with the lowest score (ties go to the earliest
        enumerated); `evaluated` lists every assignment with its score

    Raises:
        EnumerationError: If the assignment space exceeds the bound
    """
    space = enumerate_assignments(dag, platform, config.bound, config.symmetry)
    logger.info(f"Evaluating {len(space)} candidate assignments (full space {space.full_size})")
    candidates = evaluate_candidates(dag, platform, space, config, verbose)
    best = min(candidates, key=lambda c: (c.score, c.index))
    best.evaluated = [(c.assignment, c.score) for c in candidates]
    best.history = [best.score]
    logger.info(f"Best candidate #{best.index}: miss rate {best.score[2]:.1%}, makespan {best.score[-1]:.2f} ms")
    return best


def iterate_corun_schedule(dag: Dag, platform: Platform, config: SimConfig, max_iters: int = 3,
                           reenumerate: bool = False, verbose: bool = False) -> MeasuredCandidate:
    """
    Iterative co-run aware scheduling.

    Starts from the instantiation result, then alternately reschedules on the
    last simulation's measured task times and re-simulates, until the plan
    stops changing or `max_iters` is reached. With `reenumerate`, every
    iteration re-runs the enumeration measuring under the stage policy.

    Returns:
        Best candidate seen; `history` holds the best-seen score after each iteration

    Raises:
        ValueError: If max_iters < 1
    """
    if max_iters < 1:
        raise ValueError(f"max_iters must be >= 1, got {max_iters}")

    current = schedule_by_instantiation(dag, platform, config, verbose)
    evaluated = current.evaluated
    best = current
    history = [best.score]
    iterations = 1

    for iteration in range(2, max_iters + 1):
        if reenumerate:
            candidate = schedule_by_instantiation(
                dag, platform, replace(config, measure_policy=config.policy), verbose
            )
            converged = candidate.schedule.same_plan(current.schedule)
        else:
            restricted = restrict(dag, current.assignment, platform)
            inst = instantiate(restricted, current.assignment, current.task_perf, platform)
            schedule = schedule_heft(inst, platform)
            if schedule.same_plan(current.schedule):
                logger.info(f"Iteration {iteration}: schedule unchanged, converged")
                iterations = iteration
                break
            result = simulate(restricted, platform, schedule, config.policy,
                              config.horizon_ms, config.seed, trace=False)
            candidate = MeasuredCandidate(
                assignment=dict(current.assignment),
                dag=inst,
                schedule=schedule,
                miss=result.miss,
                energy=result.energy,
                task_perf=result.miss.task_perf,
                score=score_of(result.miss, schedule),
                index=current.index,
            )
            converged = False

        iterations = iteration
        if candidate.score < best.score:
            best = candidate
        history.append(best.score)
        logger.info(f"Iteration {iteration}: score {candidate.score[2]:.1%} miss, best {best.score[2]:.1%}")
        current = candidate
        if converged:
            logger.info(f"Iteration {iteration}: enumeration chose the same plan, converged")
            break

    best = replace(best, history=history, iterations=iterations, evaluated=evaluated)
    return best

"""
Experiment orchestration: generate, customize, schedule, simulate and report.
"""

import json
import logging
import math
import time
from dataclasses import fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import pandas as pd

from .dag import resolve_platform
from .database import ReportStore
from .heft import dump_schedule, schedule_heft
from .instantiate import (
    MeasuredCandidate, SimConfig, iterate_corun_schedule, restrict, schedule_by_instantiation,
)
from .models import (
    CATEGORIES, DLA, DOCUMENT_VERSION, STAGES,
    Dag, ExperimentError, ExperimentPlan, PartitionPlan, Policy, PolicyConfig, ScadError, Schedule,
)
from .partitioner import (
    LEAKY_TO_RELU, derive_costs, dla_profile, fixture_path, layer_weighted_costs,
    load_layer_graph, partition, substitute,
)
from .simulator import SimResult, simulate, write_trace
from .workload import (
    STANDARD_APPS, detector_prefix, generate, load_profile, spec_for_app, with_accelerator_costs,
)

logger = logging.getLogger(__name__)

STAGE_POLICIES = {
    'linux-ts': Policy.TIME_SHARING,
    'static-rt': Policy.STATIC_RT,
    'jit': Policy.JIT_RT,
    'jit+accel': Policy.JIT_RT,
    'jit+accel+custom': Policy.JIT_RT,
    'jit+accel+custom+iter': Policy.JIT_RT,
}

# each stage keeps the features of the ones before it
ACCEL_STAGES = STAGES[STAGES.index('jit+accel'):]
CUSTOM_STAGES = STAGES[STAGES.index('jit+accel+custom'):]


def stage_segment(stage: str) -> int:
    """Calibration segment (1-6) of a stage."""
    if stage not in STAGES:
        raise ExperimentError(stage, f"unknown stage; available: {', '.join(STAGES)}")
    return STAGES.index(stage) + 1


def load_plan(source: Union[str, Path]) -> ExperimentPlan:
    """
    Load a JSON plan file.

    `apps` and `stages` accept the string "all".

    Raises:
        ExperimentError: On unknown keys, apps or stages
    """
    path = Path(source)
    try:
        doc = json.loads(path.read_text(encoding='utf-8'))
    except json.JSONDecodeError as e:
        raise ExperimentError('plan', f"{path}: line {e.lineno} column {e.colno}: {e.msg}") from e
    if not isinstance(doc, dict):
        raise ExperimentError('plan', f"{path}: expected an object")

    allowed = {f.name for f in fields(ExperimentPlan)}
    unknown = sorted(set(doc) - allowed)
    if unknown:
        raise ExperimentError('plan', f"unknown field(s) {', '.join(unknown)}")
    if doc.get('apps') == 'all':
        doc['apps'] = list(STANDARD_APPS)
    if doc.get('stages') == 'all':
        doc['stages'] = list(STAGES)
    for key in ('apps', 'stages'):
        if not isinstance(doc.get(key), list) or not doc[key]:
            raise ExperimentError('plan', f"'{key}' must be a non-empty list or \"all\"")
    plan = ExperimentPlan(**doc)
    check_plan(plan)
    return plan


def check_plan(plan: ExperimentPlan):
    for app in plan.apps:
        if app not in STANDARD_APPS:
            raise ExperimentError('plan', f"unknown application {app!r}; standard: {', '.join(STANDARD_APPS)}")
    for stage in plan.stages:
        stage_segment(stage)
    if plan.horizon_ms <= 0:
        raise ExperimentError('plan', "horizon_ms must be > 0")
    if plan.max_iters < 1:
        raise ExperimentError('plan', "max_iters must be >= 1")


def _finite(value: Optional[float]) -> Optional[float]:
    if value is None or not math.isfinite(value):
        return None
    return round(value, 6)


def _score_doc(score: Tuple[float, ...]) -> Dict[str, Optional[float]]:
    return {
        'worst_miss_rate': _finite(score[0]),
        'drop_rate': _finite(score[1]),
        'miss_rate': _finite(score[2]),
        'worst_latency_ratio': _finite(score[3]),
        'makespan': _finite(score[4]),
    }


def result_summary(schedule: Schedule, result: SimResult) -> Dict[str, Any]:
    """Per-module results, starvation, energy and placement of one simulation."""
    miss = result.miss
    return {
        'makespan': _finite(schedule.makespan),
        'modules': {name: stats.to_dict() for name, stats in miss.modules.items()},
        'overall_miss_rate': round(miss.overall_miss_rate, 6),
        'overall_drop_rate': round(miss.overall_drop_rate, 6),
        'starved': list(miss.starved),
        'energy': result.energy.to_dict(),
        'assignment': {t: schedule.assignment[t] for t in sorted(schedule.assignment)},
    }


def build_report(app: str, stage: str, plan: ExperimentPlan, dag: Dag, schedule: Schedule,
                 result: SimResult, candidate: Optional[MeasuredCandidate] = None,
                 partition_plan: Optional[PartitionPlan] = None) -> Dict[str, Any]:
    """Machine-readable report of one (app, stage) run; free of wall-clock data."""
    report: Dict[str, Any] = {
        'version': DOCUMENT_VERSION,
        'run_id': f"{app}:{stage}:{plan.seed}",
        'app': app,
        'stage': stage,
        'segment': stage_segment(stage),
        'profile': dag.metadata.get('profile'),
        'policy': STAGE_POLICIES[stage].value,
        'seed': plan.seed,
        'horizon_ms': plan.horizon_ms,
        'nodes': len(dag.nodes),
        'candidates': len(candidate.evaluated) if candidate else 0,
    }
    report.update(result_summary(schedule, result))
    if candidate is not None:
        report['iterations'] = candidate.iterations
        report['history'] = [_score_doc(s) for s in candidate.history]
    if partition_plan is not None:
        report['partition'] = partition_plan.to_dict()
    return report


def render_report(report: Dict[str, Any]) -> str:
    """Aligned-column text table of a report."""
    rows = []
    for module in CATEGORIES:
        stats = report['modules'].get(module)
        if stats is None:
            continue
        if stats['timeout']:
            latency = '∞'
            p99 = '∞'
        else:
            latency = f"{stats['latency_mean']:.1f}±{stats['latency_std']:.1f}"
            p99 = f"{stats['latency_p99']:.1f}"
        rows.append({
            'Module': module,
            'Deadline': f"{stats['deadline_ms']:g}",
            'Latency (ms)': latency,
            'p99': p99,
            'Miss rate': f"{stats['miss_rate'] * 100:.0f}%",
            'Samples': stats['samples'],
            'Dropped': stats['dropped'],
        })
    df = pd.DataFrame(rows)

    energy = report['energy']
    lines = [
        f"App: {report.get('app', '-')}  Stage: {report.get('stage', '-')}  "
        f"Policy: {report['policy']}  Profile: {report.get('profile') or '-'}",
        f"Seed: {report['seed']}  Horizon: {report['horizon_ms']:g} ms",
        "",
        df.to_string(index=False),
        "",
        f"Overall miss rate: {report['overall_miss_rate'] * 100:.1f}%  "
        f"Drop rate: {report.get('overall_drop_rate', 0.0) * 100:.1f}%",
        f"Starved: {', '.join(report['starved']) if report['starved'] else 'none'}",
        f"Energy: {energy['total_mj']:.1f} mJ  Average power: {energy['average_power_w']:.2f} W",
        "Shares: " + '  '.join(f"{k} {v * 100:.1f}%" for k, v in energy['shares'].items()),
    ]
    return '\n'.join(lines) + '\n'


def dump_report(report: Dict[str, Any]) -> str:
    return json.dumps(report, sort_keys=True, indent=2, ensure_ascii=False) + '\n'


def _candidates_doc(candidate: MeasuredCandidate) -> Dict[str, Any]:
    return {
        'best': candidate.index,
        'candidates': [
            {'index': i, 'assignment': assignment, 'score': _score_doc(score)}
            for i, (assignment, score) in enumerate(candidate.evaluated)
        ],
        'history': [_score_doc(s) for s in candidate.history],
        'iterations': candidate.iterations,
    }


def diff_reports(a: Dict[str, Any], b: Dict[str, Any]) -> List[Dict[str, Any]]:
    """
    Per-module deltas from report `a` to report `b`.

    Returns:
        One row per module in canonical order: latencies, signed latency delta,
        latency ratio (b / a) and miss-rate delta; None where a side timed out

    Raises:
        ExperimentError: If the reports describe different workloads
    """
    if a.get('app') != b.get('app'):
        raise ExperimentError('diff', f"reports describe different workloads ({a.get('app')} vs {b.get('app')})")

    rows = []
    modules = [m for m in CATEGORIES if m in a['modules'] or m in b['modules']]
    for module in modules:
        ma = a['modules'].get(module, {})
        mb = b['modules'].get(module, {})
        la = ma.get('latency_mean')
        lb = mb.get('latency_mean')
        ra = ma.get('miss_rate')
        rb = mb.get('miss_rate')
        rows.append({
            'module': module,
            'latency_a': la,
            'latency_b': lb,
            'latency_delta': round(lb - la, 6) if la is not None and lb is not None else None,
            'latency_ratio': round(lb / la, 6) if la and lb is not None else None,
            'miss_rate_a': ra,
            'miss_rate_b': rb,
            'miss_rate_delta': round(rb - ra, 6) if ra is not None and rb is not None else None,
        })
    return rows


def render_diff(rows: List[Dict[str, Any]]) -> str:
    if not rows:
        return "No modules to compare\n"
    return pd.DataFrame(rows).to_string(index=False, na_rep='∞') + '\n'


class ExperimentRunner:
    """Runs the (app, stage) grid of an experiment plan."""

    def __init__(self, plan: ExperimentPlan, **kwargs):
        """
        Args:
            plan: Experiment plan
            **kwargs: profiles_dir, verbose
        """
        check_plan(plan)
        self.plan = plan
        self.profiles_dir = kwargs.get('profiles_dir')
        self.verbose = kwargs.get('verbose', False)
        self.output_dir = Path(plan.output_dir)
        self.platform = resolve_platform(plan.platform)
        self.store = ReportStore(plan.db) if plan.db else None

    def run(self) -> Dict[str, Any]:
        """
        Run every (app, stage) of the plan and write the reports.

        Returns:
            Summary dictionary with the written report paths

        Raises:
            ExperimentError: Tagged with the failing stage
        """
        start_time = time.time()
        plan = self.plan

        logger.info("=" * 80)
        logger.info("SCAD Experiment Runner")
        logger.info("=" * 80)
        logger.info("Configuration:")
        logger.info(f"  Apps: {', '.join(plan.apps)}")
        logger.info(f"  Stages: {', '.join(plan.stages)}")
        logger.info(f"  Platform: {plan.platform or 'default'}")
        logger.info(f"  Horizon: {plan.horizon_ms:g} ms  Seed: {plan.seed}")
        logger.info(f"  Jobs: {plan.jobs}  Max iterations: {plan.max_iters}")
        logger.info(f"  Output: {self.output_dir}")
        logger.info("")

        self.output_dir.mkdir(parents=True, exist_ok=True)
        reports = []
        paths = []
        for app in plan.apps:
            for stage in plan.stages:
                report, path = self.run_stage(app, stage)
                reports.append(report)
                paths.append(path)

        elapsed = time.time() - start_time
        logger.info("=" * 80)
        logger.info("SUMMARY")
        logger.info("=" * 80)
        for report in reports:
            starved = len(report['starved'])
            logger.info(
                f"{report['app']:<8} {report['stage']:<22} miss {report['overall_miss_rate'] * 100:5.1f}%"
                f"  starved {starved:>2}  energy {report['energy']['total_mj']:.0f} mJ"
            )
        logger.info(f"Execution Time: {elapsed:.2f}s")
        logger.info("=" * 80)
        logger.info("✓ Experiment complete!")
        logger.info("=" * 80)

        return {
            'success': True,
            'reports': [str(p) for p in paths],
            'runs': len(reports),
            'execution_time': elapsed,
        }

    def run_stage(self, app: str, stage: str) -> Tuple[Dict[str, Any], Path]:
        """Run one stage for one application; returns the report and its path."""
        plan = self.plan
        segment = stage_segment(stage)
        substitutions = (('leaky_relu', 'relu'),) if stage in CUSTOM_STAGES else ()
        stem = f"{app}-{stage}"

        logger.info(f"{app} / {stage} (segment {segment})")

        # Phase 1: Generate
        logger.info("Phase 1: Generating workload")
        logger.info("-" * 80)
        try:
            spec = spec_for_app(app, segment=segment, padding=plan.padding, substitutions=substitutions)
            dag = generate(spec, self.profiles_dir)
            profile = load_profile(spec.cost_profile, self.profiles_dir)
        except ScadError as e:
            raise ExperimentError(stage, f"generate: {e}") from e
        logger.info(f"✓ {len(dag.nodes)} tasks, {len(dag.edges)} edges from profile {spec.cost_profile}")

        policy = PolicyConfig(
            policy=STAGE_POLICIES[stage],
            corun_alpha=dict(profile.get('corun_alpha', {})),
        )

        # Phase 2: Customize
        logger.info("Phase 2: Customizing models")
        logger.info("-" * 80)
        partition_plan = None
        try:
            if stage in ACCEL_STAGES:
                dag, partition_plan = self._customize(dag, spec, profile, stage)
        except ScadError as e:
            raise ExperimentError(stage, f"customize: {e}") from e
        if partition_plan is None:
            logger.info("✓ No model customization at this stage")

        # Phase 3: Schedule
        logger.info("Phase 3: Scheduling")
        logger.info("-" * 80)
        candidate = None
        try:
            if stage in ACCEL_STAGES:
                config = SimConfig(
                    policy=policy,
                    horizon_ms=plan.horizon_ms,
                    seed=plan.seed,
                    symmetry=plan.symmetry,
                    jobs=plan.jobs,
                )
                if stage == 'jit+accel+custom+iter':
                    candidate = iterate_corun_schedule(dag, self.platform, config, plan.max_iters,
                                                       verbose=self.verbose)
                else:
                    candidate = schedule_by_instantiation(dag, self.platform, config, verbose=self.verbose)
                schedule = candidate.schedule
                sim_dag = restrict(dag, candidate.assignment, self.platform)
            else:
                schedule = schedule_heft(dag, self.platform)
                sim_dag = dag
        except ScadError as e:
            raise ExperimentError(stage, f"schedule: {e}") from e
        logger.info(f"✓ Makespan {schedule.makespan:.2f} ms")

        # Phase 4: Simulate
        logger.info("Phase 4: Simulating")
        logger.info("-" * 80)
        try:
            result = simulate(sim_dag, self.platform, schedule, policy, plan.horizon_ms, plan.seed,
                              trace=plan.trace)
        except ScadError as e:
            raise ExperimentError(stage, f"simulate: {e}") from e
        logger.info(
            f"✓ Miss rate {result.miss.overall_miss_rate * 100:.1f}%, "
            f"{len(result.miss.starved)} starved task(s)"
        )

        # Phase 5: Report
        logger.info("Phase 5: Writing reports")
        logger.info("-" * 80)
        report = build_report(app, stage, plan, sim_dag, schedule, result, candidate, partition_plan)
        path = self.write(stem, report, schedule, result, candidate)
        if self.store is not None:
            self.store.insert_report(report)
        logger.info(f"✓ Wrote {path}")
        logger.info("")
        return report, path

    def _customize(self, dag: Dag, spec, profile: Dict, stage: str) -> Tuple[Dag, PartitionPlan]:
        graph = load_layer_graph(fixture_path(spec.model_family))
        target = dla_profile()
        penalty = float(profile.get('switch_penalty_ms', 1.0))
        if stage in CUSTOM_STAGES:
            graph = substitute(graph, [LEAKY_TO_RELU], target)
            plan = partition(graph, target, switch_penalty=penalty)
            logger.info(
                f"✓ {graph.name}: LeakyReLU replaced by ReLU, {len(plan.segments)} segment(s), "
                f"{plan.fallback_count} fallback"
            )
            return dag, plan

        plan = partition(graph, target, switch_penalty=penalty)
        dnn = profile.get('dnn', {})
        costs = layer_weighted_costs(plan, float(dnn['dla_ms']), float(dnn['fallback_gpu_ms']))
        dla_ms = round(derive_costs(plan, costs), 6)
        resident = sum(c for c, s in zip(costs, plan.segments) if s.device == 'target')
        fallback_ms = round(dla_ms - resident, 6)
        logger.info(
            f"✓ {graph.name}: {plan.unsupported_runs} unsupported runs, {plan.fallback_count} fallback "
            f"segments, DLA placement costs {dla_ms:.1f} ms ({fallback_ms:.1f} ms on the GPU)"
        )
        return with_accelerator_costs(dag, detector_prefix(spec), DLA, dla_ms, fallback_ms), plan

    def write(self, stem: str, report: Dict[str, Any], schedule: Schedule, result: SimResult,
              candidate: Optional[MeasuredCandidate] = None) -> Path:
        """Write the report files of one run; returns the JSON report path."""
        base = self.output_dir / stem
        json_path = base.with_name(f"{stem}.report.json")
        json_path.write_text(dump_report(report), encoding='utf-8')
        base.with_name(f"{stem}.report.txt").write_text(render_report(report), encoding='utf-8')
        base.with_name(f"{stem}.sched").write_text(dump_schedule(schedule), encoding='utf-8')
        if candidate is not None:
            base.with_name(f"{stem}.cands.json").write_text(
                json.dumps(_candidates_doc(candidate), sort_keys=True, indent=2) + '\n', encoding='utf-8'
            )
        if self.plan.trace:
            write_trace(result.trace, base.with_name(f"{stem}.trace.ndjson"))
        return json_path

    def close(self):
        if self.store is not None:
            self.store.close()


def run_experiment(plan: ExperimentPlan, **kwargs) -> List[Path]:
    """Run a plan end to end; returns the written `.report.json` paths."""
    runner = ExperimentRunner(plan, **kwargs)
    try:
        result = runner.run()
    finally:
        runner.close()
    return [Path(p) for p in result['reports']]

"""
Command-line interface for the scheduling and simulation toolkit.
"""

import os
import sys
import json
import logging
from dataclasses import replace
from pathlib import Path

import click
from dotenv import load_dotenv

from . import __version__
from .dag import dump_dag, load_dag, resolve_platform, validate
from .database import ReportStore
from .experiment import (
    ACCEL_STAGES, STAGE_POLICIES, ExperimentRunner, diff_reports, load_plan, render_diff,
    render_report, result_summary,
)
from .heft import dump_schedule, load_schedule, render_gantt, schedule_heft
from .instantiate import SimConfig, iterate_corun_schedule, schedule_by_instantiation
from .models import STAGES, ExperimentPlan, Policy, PolicyConfig, QUEUEING_MODES
from .partitioner import (
    LEAKY_TO_RELU, dla_profile, load_layer_graph, load_support_profile, partition, substitute,
)
from .simulator import simulate, write_trace
from .workload import STANDARD_APPS, generate, spec_for_app

load_dotenv()


def setup_logging(verbose: bool = False):
    """Configure logging."""
    level = logging.DEBUG if verbose else logging.INFO
    logging.basicConfig(
        level=level,
        format='%(asctime)s %(levelname)s %(message)s',
        datefmt='%Y-%m-%d %H:%M:%S'
    )


def _env_jobs() -> int:
    return int(os.getenv('SCAD_JOBS') or 1)


def _policy_config(policy: str, dag_metadata: dict, **overrides) -> PolicyConfig:
    alpha = dag_metadata.get('corun_alpha')
    if alpha:
        overrides.setdefault('corun_alpha', dict(alpha))
    return PolicyConfig(policy=Policy(policy), **overrides)


@click.group()
@click.version_option(version=__version__)
def cli():
    """DAG scheduling and platform simulation for autonomous-driving workloads."""
    pass


@cli.command(name='gen')
@click.option('--app', required=True, type=click.Choice(sorted(STANDARD_APPS)), help='Standard application')
@click.option('--segment', type=click.IntRange(1, 6), help='Calibration segment (selects segment<N>-<app>)')
@click.option('--profile', 'cost_profile', help='Explicit cost profile name (overrides --segment)')
@click.option('--padding', is_flag=True, help='Add the pass-through backbone nodes')
@click.option('--relu', is_flag=True, help='Substitute LeakyReLU with ReLU in the detectors')
@click.option('--profiles-dir', default=lambda: os.getenv('SCAD_PROFILES_DIR'), help='Calibration profile directory')
@click.option('-o', '--output', required=True, help='Output .dag path')
@click.option('--verbose', is_flag=True, help='Verbose output')
def gen(app, segment, cost_profile, padding, relu, profiles_dir, output, verbose):
    """
    Generate the task graph of a standard application.

    Example:
        scad gen --app ADy288 --segment 1 -o w.dag
    """
    setup_logging(verbose)

    try:
        substitutions = (('leaky_relu', 'relu'),) if relu else ()
        spec = spec_for_app(app, segment=segment, cost_profile=cost_profile, padding=padding,
                            substitutions=substitutions)
        dag = generate(spec, profiles_dir)
        Path(output).write_text(dump_dag(dag), encoding='utf-8')

        click.echo(f"\n✓ Generated {app} with profile {spec.cost_profile}")
        click.echo(f"  Tasks: {len(dag.nodes)}")
        click.echo(f"  Edges: {len(dag.edges)}")
        click.echo(f"  Output: {output}")

    except Exception as e:
        click.echo(f"\n✗ Error: {e}", err=True)
        sys.exit(1)


@cli.command(name='schedule')
@click.argument('dag_path')
@click.argument('platform_path', required=False, default=lambda: os.getenv('SCAD_PLATFORM'))
@click.option('--stage', type=click.Choice(STAGES), default='linux-ts', help='Scheduler stage')
@click.option('-o', '--output', help='Output .sched path')
@click.option('--horizon-ms', type=float, default=6000.0, help='Measurement horizon (ms)')
@click.option('--seed', type=int, default=7, help='Noise seed')
@click.option('--jobs', type=int, default=_env_jobs, help='Parallel candidate evaluations')
@click.option('--bound', type=int, default=10000, help='Assignment enumeration bound')
@click.option('--symmetry/--no-symmetry', default=True, help='Reduce interchangeable tasks and accelerators')
@click.option('--max-iters', type=int, default=3, help='Co-run iterations (iterative stage)')
@click.option('--verbose', is_flag=True, help='Verbose output')
def schedule(dag_path, platform_path, stage, output, horizon_ms, seed, jobs, bound, symmetry, max_iters, verbose):
    """
    Schedule a task graph for one scheduler stage.

    Stages up to jit use HEFT on the static costs; the accelerator stages
    enumerate accelerator assignments and keep the best instantiated schedule.

    Example:
        scad schedule --stage jit+accel w.dag platform.json -o w.sched
    """
    setup_logging(verbose)

    try:
        dag = load_dag(Path(dag_path))
        platform = resolve_platform(platform_path)
        violations = validate(dag, platform)
        if violations:
            raise ValueError(f"invalid graph: {'; '.join(violations)}")

        candidates = 0
        if stage in ACCEL_STAGES:
            config = SimConfig(
                policy=_policy_config(STAGE_POLICIES[stage].value, dag.metadata),
                horizon_ms=horizon_ms,
                seed=seed,
                bound=bound,
                symmetry=symmetry,
                jobs=jobs,
            )
            if stage.endswith('+iter'):
                best = iterate_corun_schedule(dag, platform, config, max_iters, verbose=verbose)
            else:
                best = schedule_by_instantiation(dag, platform, config, verbose=verbose)
            plan = best.schedule
            candidates = len(best.evaluated)
        else:
            plan = schedule_heft(dag, platform)

        click.echo("")
        click.echo(render_gantt(plan, platform))
        if output:
            Path(output).write_text(dump_schedule(plan), encoding='utf-8')

        click.echo(f"\n✓ Scheduled {len(plan.assignment)} tasks ({stage})")
        click.echo(f"  Makespan: {plan.makespan:.2f} ms")
        if candidates:
            click.echo(f"  Candidates evaluated: {candidates}")
        if output:
            click.echo(f"  Output: {output}")

    except Exception as e:
        click.echo(f"\n✗ Error: {e}", err=True)
        sys.exit(1)


@cli.command(name='sim')
@click.argument('dag_path')
@click.option('--schedule', 'schedule_path', help='Schedule (.sched) to simulate (default: HEFT)')
@click.option('--platform', 'platform_path', default=lambda: os.getenv('SCAD_PLATFORM'), help='Platform document')
@click.option('--policy', type=click.Choice([p.value for p in Policy]), default='TIME_SHARING', help='Priority policy')
@click.option('--horizon-ms', type=float, default=60000.0, help='Simulated time (ms)')
@click.option('--seed', type=int, default=7, help='Noise seed')
@click.option('--queueing', type=click.Choice(QUEUEING_MODES), default='drop-oldest', help='Pending item policy')
@click.option('--quantum', type=float, default=10.0, help='Time-sharing quantum (ms)')
@click.option('--slack', type=float, default=1.10, help='Deadline slack factor')
@click.option('--trace', 'trace_path', help='Write the event trace (NDJSON)')
@click.option('--json', 'as_json', is_flag=True, help='Print the machine-readable result')
@click.option('--verbose', is_flag=True, help='Verbose output')
def sim(dag_path, schedule_path, platform_path, policy, horizon_ms, seed, queueing, quantum, slack,
        trace_path, as_json, verbose):
    """
    Simulate a scheduled task graph.

    Example:
        scad sim w.dag --policy JIT_RT --horizon-ms 60000 --seed 7
    """
    setup_logging(verbose)

    try:
        dag = load_dag(Path(dag_path))
        platform = resolve_platform(platform_path)
        if schedule_path:
            plan = load_schedule(Path(schedule_path).read_text(encoding='utf-8'))
        else:
            plan = schedule_heft(dag, platform)
        config = _policy_config(policy, dag.metadata, queueing=queueing, quantum=quantum, slack_factor=slack)

        result = simulate(dag, platform, plan, config, horizon_ms, seed, trace=bool(trace_path))
        report = {
            'app': dag.metadata.get('app', '-'),
            'profile': dag.metadata.get('profile'),
            'policy': policy,
            'seed': seed,
            'horizon_ms': horizon_ms,
            **result_summary(plan, result),
        }
        if trace_path:
            write_trace(result.trace, trace_path)

        if as_json:
            click.echo(json.dumps(report, sort_keys=True, indent=2))
        else:
            click.echo("")
            click.echo(render_report(report))

    except Exception as e:
        click.echo(f"\n✗ Error: {e}", err=True)
        sys.exit(1)


@cli.command(name='run')
@click.option('--plan', 'plan_path', help='Experiment plan (JSON)')
@click.option('--app', 'apps', multiple=True, help='Application (repeatable; "all" for every one)')
@click.option('--stage', 'stages', multiple=True, help='Scheduler stage (repeatable; "all" for every one)')
@click.option('--output-dir', help='Report directory (overrides the plan)')
@click.option('--platform', 'platform_path', default=lambda: os.getenv('SCAD_PLATFORM'), help='Platform document')
@click.option('--profiles-dir', default=lambda: os.getenv('SCAD_PROFILES_DIR'), help='Calibration profile directory')
@click.option('--horizon-ms', type=float, help='Simulated time (ms, overrides the plan)')
@click.option('--seed', type=int, help='Noise seed (overrides the plan)')
@click.option('--jobs', type=int, default=_env_jobs, help='Parallel candidate evaluations')
@click.option('--db', 'db_path', default=lambda: os.getenv('SCAD_DB'), help='Store reports in this SQLite database')
@click.option('--trace', is_flag=True, help='Write event traces')
@click.option('--verbose', is_flag=True, help='Verbose output')
def run(plan_path, apps, stages, output_dir, platform_path, profiles_dir, horizon_ms, seed, jobs, db_path,
        trace, verbose):
    """
    Run experiment stages end to end and write the reports.

    Exits 0 whatever the miss rates; a failing stage exits 1 with a
    stage-tagged message.

    Example:
        scad run --plan plan.json
        scad run --app ADy288 --stage all
    """
    setup_logging(verbose)

    try:
        if plan_path:
            plan = load_plan(plan_path)
        else:
            if not apps or not stages:
                click.echo("Error: give --plan, or both --app and --stage", err=True)
                sys.exit(1)
            plan = ExperimentPlan(
                apps=list(STANDARD_APPS) if 'all' in apps else list(apps),
                stages=list(STAGES) if 'all' in stages else list(stages),
            )
        if output_dir:
            plan.output_dir = output_dir
        if platform_path and not plan.platform:
            plan.platform = platform_path
        if horizon_ms is not None:
            plan.horizon_ms = horizon_ms
        if seed is not None:
            plan.seed = seed
        if jobs and jobs > 1:
            plan.jobs = jobs
        if db_path and not plan.db:
            plan.db = db_path
        if trace:
            plan.trace = True

        runner = ExperimentRunner(plan, profiles_dir=profiles_dir, verbose=verbose)
        try:
            result = runner.run()
        finally:
            runner.close()

        click.echo(f"\n✓ Experiment completed: {result['runs']} run(s)")
        for path in result['reports']:
            click.echo(f"  {path}")
        click.echo(f"  Execution time: {result['execution_time']:.2f}s")

    except Exception as e:
        click.echo(f"\n✗ Error: {e}", err=True)
        sys.exit(1)


@cli.command(name='partition')
@click.argument('model_path')
@click.option('--profile', 'profile_path', help='Accelerator support profile (.prof, default: DLA)')
@click.option('--budget', type=int, help='Override the fallback subgraph budget')
@click.option('--count-total', is_flag=True, help='Count every segment against the budget')
@click.option('--relu', is_flag=True, help='Substitute LeakyReLU with ReLU before partitioning')
@click.option('--switch-penalty', type=float, default=1.0, help='Cost per fallback transition (ms)')
@click.option('--json', 'as_json', is_flag=True, help='Print the plan as JSON')
def partition_model(model_path, profile_path, budget, count_total, relu, switch_penalty, as_json):
    """
    Partition a layer graph between an accelerator and its GPU fallback.

    Example:
        scad partition yolov3.lg --profile dla.prof
    """
    setup_logging()

    try:
        graph = load_layer_graph(model_path)
        profile = load_support_profile(profile_path) if profile_path else dla_profile()
        if budget is not None:
            profile = replace(profile, max_fallback_subgraphs=budget)
        if relu:
            graph = substitute(graph, [LEAKY_TO_RELU], profile)
        plan = partition(graph, profile, count_total=count_total, switch_penalty=switch_penalty)

        if as_json:
            click.echo(json.dumps(plan.to_dict(), indent=2))
            return

        click.echo(f"\n✓ Partitioned {graph.name or model_path} ({plan.layer_count} layers) for {profile.device}")
        click.echo(f"  Segments: {len(plan.segments)}")
        click.echo(f"  Unsupported runs: {plan.unsupported_runs}")
        click.echo(f"  Fallback segments: {plan.fallback_count} (budget {profile.max_fallback_subgraphs})")
        click.echo(f"  Transitions: {plan.transitions}")
        click.echo(f"  Switch overhead: {plan.est_switch_overhead:.1f} ms")
        click.echo(f"  Feasible: {'yes' if plan.feasible else 'no'}")

    except Exception as e:
        click.echo(f"\n✗ Error: {e}", err=True)
        sys.exit(1)


@cli.command(name='diff')
@click.argument('report_a')
@click.argument('report_b')
def diff(report_a, report_b):
    """
    Per-module latency and miss-rate deltas between two reports.

    Example:
        scad diff results/ADy288-jit+accel.report.json results/ADy288-jit+accel+custom.report.json
    """
    setup_logging()

    try:
        a = json.loads(Path(report_a).read_text(encoding='utf-8'))
        b = json.loads(Path(report_b).read_text(encoding='utf-8'))
        rows = diff_reports(a, b)
        click.echo(f"\n{a['app']}: {a.get('stage', '-')} -> {b.get('stage', '-')}\n")
        click.echo(render_diff(rows))

    except Exception as e:
        click.echo(f"\n✗ Error: {e}", err=True)
        sys.exit(1)


@cli.command()
@click.option('--db', 'db_path', default=lambda: os.getenv('SCAD_DB', 'scad.db'), help='SQLite database path')
@click.option('--app', help='Application to show stats for (optional)')
def stats(db_path, app):
    """Show database statistics."""
    setup_logging()

    try:
        with ReportStore(db_path) as db:
            stats = db.get_stats(app=app)

        click.echo("\n" + "=" * 80)
        click.echo("DATABASE STATISTICS")
        click.echo("=" * 80)

        if app:
            click.echo(f"App: {app}")
            click.echo("")

        click.echo(f"Total Runs: {stats.get('total_runs', 0)}")
        click.echo(f"  Apps: {stats.get('app_count', 0)}")
        click.echo(f"  Stages: {stats.get('stage_count', 0)}")
        click.echo("")
        click.echo("Deadlines:")
        click.echo(f"  Clean runs (0% miss): {stats.get('clean_runs', 0)}")
        click.echo(f"  Runs with starvation: {stats.get('starving_runs', 0)}")
        click.echo(f"  Avg Miss Rate: {(stats.get('avg_miss_rate') or 0) * 100:.1f}%")
        click.echo("")
        click.echo("Energy:")
        click.echo(f"  Avg Energy: {stats.get('avg_energy_mj') or 0:.1f} mJ")
        click.echo(f"  Avg Power: {stats.get('avg_power_w') or 0:.2f} W")
        click.echo("")
        click.echo("Runs:")
        click.echo(f"  First: {stats.get('first_run') or 'N/A'}")
        click.echo(f"  Last: {stats.get('last_run') or 'N/A'}")
        click.echo("=" * 80)

    except Exception as e:
        click.echo(f"\n✗ Error: {e}", err=True)
        sys.exit(1)


@cli.command()
@click.option('--db', 'db_path', default=lambda: os.getenv('SCAD_DB', 'scad.db'), help='SQLite database path')
@click.option('--format', 'output_format', type=click.Choice(['csv', 'json']), default='csv', help='Export format')
@click.option('--output', default='export.csv', help='Output file path')
@click.option('--table', type=click.Choice(['modules', 'runs']), default='modules', help='Rows to export')
@click.option('--app', help='Application to export (optional)')
def export(db_path, output_format, output, table, app):
    """Export stored results to CSV or JSON."""
    setup_logging()

    try:
        import pandas as pd

        if table == 'runs':
            sql = "SELECT * FROM runs"
        else:
            sql = """
                SELECT r.app, r.stage, r.seed, r.policy, m.*
                FROM module_results m JOIN runs r ON r.run_id = m.run_id
            """
        params = ()
        if app:
            sql += " WHERE app = ?" if table == 'runs' else " WHERE r.app = ?"
            params = (app,)

        with ReportStore(db_path) as db:
            results = db.execute_query(sql, params)

        if not results:
            click.echo("No data to export", err=True)
            sys.exit(1)

        df = pd.DataFrame(results)

        if output_format == 'csv':
            df.to_csv(output, index=False)
            click.echo(f"\n✓ Exported {len(df)} rows to {output} (CSV)")
        else:
            df.to_json(output, orient='records', indent=2)
            click.echo(f"\n✓ Exported {len(df)} rows to {output} (JSON)")

    except Exception as e:
        click.echo(f"\n✗ Error: {e}", err=True)
        sys.exit(1)


@cli.command()
@click.option('--db', 'db_path', default=lambda: os.getenv('SCAD_DB', 'scad.db'), help='SQLite database path')
@click.option('--sql', required=True, help='SQL query to execute')
def query(db_path, sql):
    """Execute a custom SQL query."""
    setup_logging()

    try:
        import pandas as pd

        with ReportStore(db_path) as db:
            results = db.execute_query(sql)

        if not results:
            click.echo("No results")
        else:
            df = pd.DataFrame(results)
            click.echo(f"\n{df.to_string()}")
            click.echo(f"\n({len(df)} rows)")

    except Exception as e:
        click.echo(f"\n✗ Error: {e}", err=True)
        sys.exit(1)


if __name__ == '__main__':
    cli()

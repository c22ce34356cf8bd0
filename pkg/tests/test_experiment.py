"""
Tests for experiment plans, reports and stage runs.
"""

import copy
import json

import pytest

from scad.experiment import (
    ACCEL_STAGES, CUSTOM_STAGES, STAGE_POLICIES, ExperimentRunner, diff_reports, dump_report, load_plan, render_diff,
    render_report, run_experiment, stage_segment,
)
from scad.models import DLA, STAGES, ExperimentError, ExperimentPlan, Policy
from scad.workload import STANDARD_APPS, generate, load_profile, spec_for_app


def write_plan(tmp_path, doc):
    path = tmp_path / 'plan.json'
    path.write_text(json.dumps(doc), encoding='utf-8')
    return path


def test_stage_segments_and_policies():
    """Stages map to segments 1-6 and to their priority policy."""
    assert [stage_segment(s) for s in STAGES] == [1, 2, 3, 4, 5, 6]
    assert STAGE_POLICIES['linux-ts'] == Policy.TIME_SHARING
    assert STAGE_POLICIES['static-rt'] == Policy.STATIC_RT
    assert all(STAGE_POLICIES[s] == Policy.JIT_RT for s in STAGES[2:])


def test_unknown_stage():
    with pytest.raises(ExperimentError, match=r'\[warp\] unknown stage'):
        stage_segment('warp')


def test_load_plan_expands_all(tmp_path):
    plan = load_plan(write_plan(tmp_path, {'apps': 'all', 'stages': 'all', 'horizon_ms': 2000}))
    assert plan.apps == list(STANDARD_APPS)
    assert plan.stages == list(STAGES)
    assert plan.horizon_ms == 2000
    assert plan.seed == 7


@pytest.mark.parametrize('doc,message', [
    ({'apps': ['ADy288'], 'stages': ['jit'], 'colour': 'red'}, r'unknown field\(s\) colour'),
    ({'apps': [], 'stages': ['jit']}, "'apps' must be a non-empty list"),
    ({'apps': ['ADz1'], 'stages': ['jit']}, "unknown application 'ADz1'"),
    ({'apps': ['ADy288'], 'stages': ['warp']}, 'unknown stage'),
    ({'apps': ['ADy288'], 'stages': ['jit'], 'horizon_ms': 0}, 'horizon_ms must be > 0'),
    ({'apps': ['ADy288'], 'stages': ['jit'], 'max_iters': 0}, 'max_iters must be >= 1'),
])
def test_load_plan_rejects_bad_plans(tmp_path, doc, message):
    with pytest.raises(ExperimentError, match=message):
        load_plan(write_plan(tmp_path, doc))


def test_load_plan_reports_parse_location(tmp_path):
    path = tmp_path / 'plan.json'
    path.write_text('{"apps": [}', encoding='utf-8')
    with pytest.raises(ExperimentError, match=r'\[plan\] .*line 1 column'):
        load_plan(path)


def test_report_fields(sample_report):
    """Reports carry the run identity, module stats and energy without wall-clock data."""
    assert sample_report['run_id'] == 'ADy608:linux-ts:7'
    assert sample_report['segment'] == 1
    assert sample_report['policy'] == 'TIME_SHARING'
    assert sample_report['nodes'] == 3
    assert sample_report['candidates'] == 0
    assert sample_report['overall_miss_rate'] == 0.0
    assert sample_report['modules']['Perception2D']['latency_mean'] == pytest.approx(12.5)
    assert sample_report['modules']['Perception2D']['samples'] == 20
    assert 'iterations' not in sample_report
    assert 'partition' not in sample_report


def test_dump_report_is_deterministic(sample_report):
    text = dump_report(sample_report)
    assert text == dump_report(json.loads(text))
    assert text.endswith('}\n')


def test_render_report(sample_report):
    text = render_report(sample_report)
    assert text.startswith('App: ADy608  Stage: linux-ts  Policy: TIME_SHARING')
    assert 'Perception2D' in text
    assert '12.5±2.5' in text
    assert 'Overall miss rate: 0.0%' in text
    assert 'Starved: none' in text


def test_render_report_shows_timeouts(sample_report):
    report = copy.deepcopy(sample_report)
    stats = report['modules']['Sensing']
    stats.update(timeout=True, samples=0, latency_mean=None, latency_std=None, latency_p99=None)
    line = next(row for row in render_report(report).splitlines() if row.strip().startswith('Sensing'))
    assert '∞' in line


def test_diff_reports(sample_report):
    """Deltas are b minus a; ratios are b over a."""
    slower = copy.deepcopy(sample_report)
    slower['modules']['Perception2D']['latency_mean'] = 25.0
    slower['modules']['Perception2D']['miss_rate'] = 0.5

    rows = diff_reports(sample_report, slower)
    assert [r['module'] for r in rows] == ['Sensing', 'Perception2D']
    p2d = rows[1]
    assert p2d['latency_delta'] == pytest.approx(12.5)
    assert p2d['latency_ratio'] == pytest.approx(2.0)
    assert p2d['miss_rate_delta'] == pytest.approx(0.5)
    assert rows[0]['latency_delta'] == 0.0


def test_diff_with_timeout_has_no_delta(sample_report):
    starved = copy.deepcopy(sample_report)
    starved['modules']['Sensing']['latency_mean'] = None
    rows = diff_reports(sample_report, starved)
    assert rows[0]['latency_delta'] is None
    assert rows[0]['latency_ratio'] is None
    assert '∞' in render_diff(rows)


def test_diff_rejects_other_workloads(sample_report):
    other = dict(sample_report, app='ADs288')
    with pytest.raises(ExperimentError, match='different workloads'):
        diff_reports(sample_report, other)


def test_render_empty_diff():
    assert render_diff([]) == "No modules to compare\n"


def test_runner_rejects_bad_plan(tmp_path):
    plan = ExperimentPlan(apps=['ADy608'], stages=['jit'], horizon_ms=-1, output_dir=str(tmp_path))
    with pytest.raises(ExperimentError, match='horizon_ms must be > 0'):
        ExperimentRunner(plan)


def test_time_sharing_stage_run(tmp_path, temp_db_path):
    """A baseline stage writes its report files and stores the run."""
    plan = ExperimentPlan(apps=['ADy608'], stages=['linux-ts'], horizon_ms=1000.0,
                          output_dir=str(tmp_path), db=temp_db_path, trace=True)
    paths = run_experiment(plan)

    assert [p.name for p in paths] == ['ADy608-linux-ts.report.json']
    report = json.loads(paths[0].read_text(encoding='utf-8'))
    assert report['profile'] == 'segment1-ADy608'
    assert report['nodes'] == 24
    assert set(report['modules']) >= {'Sensing', 'Perception2D', 'Planning'}
    for suffix in ('.report.txt', '.sched', '.trace.ndjson'):
        assert (tmp_path / f"ADy608-linux-ts{suffix}").exists()
    assert not (tmp_path / 'ADy608-linux-ts.cands.json').exists()

    runner = ExperimentRunner(plan)
    try:
        stored = runner.store.get_run('ADy608:linux-ts:7')
    finally:
        runner.close()
    assert stored['stage'] == 'linux-ts'
    assert len(stored['modules']) == len(report['modules'])


@pytest.mark.slow
def test_accelerator_stage_run(tmp_path):
    """The first accelerator stage partitions the detector and enumerates placements."""
    plan = ExperimentPlan(apps=['ADy608'], stages=['jit+accel'], horizon_ms=1000.0,
                          output_dir=str(tmp_path))
    paths = run_experiment(plan)

    report = json.loads(paths[0].read_text(encoding='utf-8'))
    assert report['policy'] == 'JIT_RT'
    assert report['partition']['fallback_count'] == 8
    assert not report['partition']['feasible']
    assert report['candidates'] == 6
    assert report['iterations'] == 1
    cands = json.loads((tmp_path / 'ADy608-jit+accel.cands.json').read_text(encoding='utf-8'))
    assert len(cands['candidates']) == 6


@pytest.mark.slow
def test_custom_stage_keeps_detectors_on_accelerators(tmp_path):
    """With ReLU detectors the whole model fits the DLA."""
    plan = ExperimentPlan(apps=['ADy608'], stages=['jit+accel+custom'], horizon_ms=1000.0,
                          output_dir=str(tmp_path))
    report = json.loads(run_experiment(plan)[0].read_text(encoding='utf-8'))
    assert report['partition']['feasible']
    assert report['partition']['fallback_count'] == 0


def test_later_stages_keep_earlier_features():
    """Every stage from jit+accel on uses accelerators; from +custom on, customized models."""
    assert ACCEL_STAGES == STAGES[3:]
    assert CUSTOM_STAGES == STAGES[4:]
    assert set(CUSTOM_STAGES) < set(ACCEL_STAGES)


def test_partitioned_detector_leaves_its_fallback_to_the_gpu(tmp_path):
    """A LeakyReLU detector placed on a DLA carries the GPU part of its cost."""
    runner = ExperimentRunner(ExperimentPlan(apps=['ADy608'], stages=['jit+accel'], output_dir=str(tmp_path)))
    spec = spec_for_app('ADy608', segment=4)
    try:
        dag, plan = runner._customize(generate(spec), spec, load_profile(spec.cost_profile), 'jit+accel')
    finally:
        runner.close()

    assert plan.fallback_count == 8
    detectors = [n for n in dag.nodes if n.group == 'yolo']
    assert len(detectors) == 3
    for node in detectors:
        assert DLA in node.eligibility
        assert node.cost_table[DLA] == pytest.approx(119.763, abs=1e-2)
        assert node.fallback_ms == pytest.approx(115.444, abs=1e-2)
        assert node.fallback_ms < node.cost_table[DLA]


def test_customized_detector_runs_wholly_on_the_dla(tmp_path):
    runner = ExperimentRunner(ExperimentPlan(apps=['ADy608'], stages=['jit+accel+custom'], output_dir=str(tmp_path)))
    spec = spec_for_app('ADy608', segment=5, substitutions=(('leaky_relu', 'relu'),))
    dag = generate(spec)
    try:
        out, plan = runner._customize(dag, spec, load_profile(spec.cost_profile), 'jit+accel+custom')
    finally:
        runner.close()

    assert plan.feasible
    assert out is dag
    assert all(n.fallback_ms == 0.0 for n in out.nodes)


def test_same_plan_writes_identical_reports(tmp_path):
    """Two runs of one plan produce byte-identical report files."""
    outputs = []
    for name in ('first', 'second'):
        plan = ExperimentPlan(apps=['ADy288'], stages=['linux-ts', 'jit'], horizon_ms=1000.0,
                              output_dir=str(tmp_path / name))
        outputs.append([p.read_bytes() for p in run_experiment(plan)])
        outputs[-1].append((tmp_path / name / 'ADy288-jit.report.txt').read_bytes())
    assert outputs[0] == outputs[1]


@pytest.fixture(scope='module')
def grid(tmp_path_factory):
    """Every standard application through every stage, three seconds each."""
    out = tmp_path_factory.mktemp('grid')
    plan = ExperimentPlan(apps=list(STANDARD_APPS), stages=list(STAGES), horizon_ms=3000.0, output_dir=str(out))
    reports = {}
    for path in run_experiment(plan):
        report = json.loads(path.read_text(encoding='utf-8'))
        reports[(report['app'], report['stage'])] = report
    return reports


def _mean(report, module):
    return report['modules'][module]['latency_mean']


@pytest.mark.slow
def test_grid_detectors_miss_until_customized(grid):
    """2D perception misses every deadline before customization and none after."""
    for app in STANDARD_APPS:
        for stage in STAGES[:4]:
            assert grid[(app, stage)]['modules']['Perception2D']['miss_rate'] == 1.0, (app, stage)
        for stage in CUSTOM_STAGES:
            assert grid[(app, stage)]['overall_miss_rate'] == 0.0, (app, stage)


@pytest.mark.slow
def test_grid_detector_latency_near_measured(grid):
    assert _mean(grid[('ADy288', 'linux-ts')], 'Perception2D') == pytest.approx(193.3, rel=0.15)
    assert _mean(grid[('ADy288', 'jit+accel+custom')], 'Perception2D') == pytest.approx(95.6, rel=0.15)


@pytest.mark.slow
def test_grid_iteration_is_no_worse_than_customization(grid):
    for app in STANDARD_APPS:
        seg5 = grid[(app, 'jit+accel+custom')]
        seg6 = grid[(app, 'jit+accel+custom+iter')]
        assert seg6['overall_miss_rate'] <= seg5['overall_miss_rate'], app
        assert seg6['history'][-1]['worst_miss_rate'] <= seg6['history'][0]['worst_miss_rate'], app


@pytest.mark.slow
def test_grid_custom_detectors_use_both_dlas(grid):
    """Customized detectors spread over the DLAs instead of queueing on one."""
    for app in STANDARD_APPS:
        report = grid[(app, 'jit+accel+custom')]
        placed = [p for t, p in report['assignment'].items() if t.startswith(('yolo_', 'spp_'))]
        assert {'dla0', 'dla1'} <= set(placed), app


@pytest.mark.slow
@pytest.mark.parametrize('app', ['ADy288', 'ADy608'])
def test_grid_accelerator_migration_directions(grid, app):
    """Moving detectors off the GPU and then customizing them shifts 3D perception up, then down."""
    jit = grid[(app, 'jit')]
    accel = grid[(app, 'jit+accel')]
    custom = grid[(app, 'jit+accel+custom')]

    assert _mean(jit, 'Perception3D') < _mean(accel, 'Perception3D')
    assert _mean(custom, 'Perception3D') < _mean(accel, 'Perception3D')
    assert custom['energy']['shares']['GPU'] < jit['energy']['shares']['GPU']


@pytest.mark.slow
def test_grid_large_detectors_leave_the_gpu_once_partitioned(grid):
    """At 608 the partitioned detectors beat the GPU even with their fallback part."""
    jit = grid[('ADy608', 'jit')]
    accel = grid[('ADy608', 'jit+accel')]

    detectors = {t: p for t, p in accel['assignment'].items() if t.startswith('yolo_')}
    assert detectors
    assert all(p.startswith('dla') for p in detectors.values())
    assert _mean(accel, 'Perception2D') < _mean(jit, 'Perception2D')

"""
Tests for workload generation and profile calibration.
"""

import pytest

from scad.dag import default_platform, dump_dag, validate
from scad.models import CPU, DLA, GPU, DagError, ProfileError, WorkloadSpec
from scad.workload import (
    STANDARD_APPS, calibrate, generate, list_profiles, load_profile, spec_for_app,
    with_accelerator_costs,
)


def test_standard_apps_have_all_segment_profiles():
    """Each standard app ships six segment profiles."""
    names = set(list_profiles())
    for app in STANDARD_APPS:
        for segment in range(1, 7):
            assert f"segment{segment}-{app}" in names
    assert 'unit' in names


def test_spec_for_app():
    spec = spec_for_app('ADs416', segment=3)
    assert spec.model_family == 'SPP-v3'
    assert spec.resolution == 416
    assert spec.num_2d_streams == 5
    assert spec.cost_profile == 'segment3-ADs416'
    assert spec_for_app('ADy608').cost_profile == 'unit'


def test_unknown_app_is_rejected():
    with pytest.raises(DagError, match="unknown application 'ADx100'"):
        spec_for_app('ADx100')


def test_unknown_profile_lists_available():
    """The error names the profiles that do exist."""
    with pytest.raises(ProfileError, match="unknown profile 'segment9-ADy288'; available: .*unit"):
        load_profile('segment9-ADy288')


def test_generate_node_counts():
    """Ten cameras, ten detectors and the backbone; padding adds ten pass-through nodes."""
    dag = generate(spec_for_app('ADy288'))
    assert len(dag.nodes) == 38
    assert sum(1 for n in dag.nodes if n.category == 'Perception2D') == 10

    padded = generate(spec_for_app('ADy288', padding=True))
    assert len(padded.nodes) == 48


def test_generated_dag_is_valid_on_default_platform():
    for app in STANDARD_APPS:
        for padding in (False, True):
            dag = generate(spec_for_app(app, segment=1, padding=padding))
            assert validate(dag, default_platform()) == []


def test_generate_is_deterministic():
    spec = spec_for_app('ADs288', segment=2)
    assert dump_dag(generate(spec)) == dump_dag(generate(spec))


def test_unit_profile_costs():
    """The unit profile puts 1 ms on every eligible kind."""
    dag = generate(spec_for_app('ADy416'))
    for node in dag.nodes:
        assert set(node.cost_table.values()) == {1.0}


def test_segment_profile_calibration():
    """Dominant tasks take 90% of their module; detectors take the profile's model times."""
    dag = generate(spec_for_app('ADy288', segment=1))

    assert dag.node('camera_driver_0').cost_table[CPU] == pytest.approx(7.65)
    assert dag.node('ndt_matching').cost_table[CPU] == pytest.approx(44.0 * 0.9)
    assert dag.node('lidar_point_pillars').cost_table == {GPU: pytest.approx(68.0 * 0.9)}
    yolo = dag.node('yolo_0')
    assert yolo.cost_table == {GPU: 128.9, DLA: 18.9}
    assert yolo.host_ms == 1.0
    assert yolo.group == 'yolo'
    assert dag.metadata['corun_alpha']['GPU'] == 0.05


def test_lone_module_task_takes_whole_time():
    """Control has a single task, which receives the full module time."""
    costs = calibrate('segment1-ADy288')
    assert costs['pure_pursuit'][CPU] == pytest.approx(0.5)


def test_calibrate_unit_needs_spec():
    with pytest.raises(ProfileError, match='not tied to an application'):
        calibrate('unit')


def test_detector_eligibility_follows_substitution():
    """Detectors are GPU-only unless LeakyReLU is replaced by ReLU."""
    plain = generate(spec_for_app('ADy288'))
    relu = generate(spec_for_app('ADy288', substitutions=(('leaky_relu', 'relu'),)))
    assert plain.node('yolo_3').eligibility == frozenset({GPU})
    assert relu.node('yolo_3').eligibility == frozenset({GPU, DLA})


def test_fusion_fan_in_matches_streams():
    """Every detector feeds fusion through a latest-value edge."""
    for app, (_, _, streams) in STANDARD_APPS.items():
        dag = generate(spec_for_app(app))
        fusion_in = [
            e for e in dag.in_edges('range_vision_fusion') if e.src.startswith(('yolo_', 'spp_'))
        ]
        assert len(fusion_in) == streams
        assert not any(e.trigger for e in fusion_in)


def test_relay_edges_are_marked_assumed():
    dag = generate(spec_for_app('ADy608'))
    assumed = {(e.src, e.dst) for e in dag.edges if e.assumed}
    assert ('ndt_matching', 'pose_relay') in assumed
    assert ('vel_relay', 'pure_pursuit') in assumed


def test_fusion_without_streams_is_rejected():
    spec = WorkloadSpec(app_name='bare', num_2d_streams=0, model_family='Yolo-v3', resolution=288)
    with pytest.raises(DagError, match='2D fusion requires at least one 2D stream'):
        generate(spec)


def test_bad_source_rate_is_rejected():
    spec = WorkloadSpec(app_name='slow', num_2d_streams=1, model_family='Yolo-v3', resolution=288,
                        source_rates={'camera': 0.0})
    with pytest.raises(DagError, match="source rate 'camera' must be > 0"):
        generate(spec)


def test_with_accelerator_costs():
    """A group gains a DLA cost and eligibility; other nodes are untouched."""
    dag = generate(spec_for_app('ADy288', segment=1))
    out = with_accelerator_costs(dag, 'yolo', DLA, 225.6)
    assert out.node('yolo_0').cost_table[DLA] == 225.6
    assert DLA in out.node('yolo_0').eligibility
    assert out.node('ndt_matching') == dag.node('ndt_matching')
    assert out.metadata == dag.metadata

"""
Workload generation for the autonomous-driving application suite.

Builds the task graph of one application (backbone plus one camera/detector
pair per 2D stream) and calibrates its cost tables from a named profile.
"""

import json
import logging
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

from .models import (
    CPU, DLA, GPU, Dag, DagError, Edge, ProfileError, TaskNode, WorkloadSpec,
)

logger = logging.getLogger(__name__)

PROFILES_DIR = Path(__file__).parent / 'profiles'

# app name -> (model family, input resolution, 2D streams)
STANDARD_APPS = {
    'ADy288': ('Yolo-v3', 288, 10),
    'ADy416': ('Yolo-v3', 416, 5),
    'ADy608': ('Yolo-v3', 608, 3),
    'ADs288': ('SPP-v3', 288, 10),
    'ADs416': ('SPP-v3', 416, 5),
    'ADs608': ('SPP-v3', 608, 3),
}
MODEL_FAMILIES = ('Yolo-v3', 'SPP-v3')

MODULE_DEADLINE_MS = 100.0
PLANNING_DEADLINE_MS = 10.0
PADDING_COST_MS = 0.01
DOMINANT_SHARE = 0.9
CPU_COMM = {'CPU-CPU': 0.1}

# (task id, category, source-rate key for timer tasks)
BACKBONE_TASKS = (
    ('velodyne_driver', 'Sensing', 'lidar'),
    ('voxel_grid_filter', 'Sensing', None),
    ('lidar_point_pillars', 'Perception3D', None),
    ('range_vision_fusion', 'Perception3D', None),
    ('imm_ukf_tracker', 'Tracking', None),
    ('native_motion_predictor', 'Prediction', None),
    ('costmap_generator', 'Prediction', None),
    ('nmea2tfpose', 'Localization', 'gnss'),
    ('ndt_matching', 'Localization', None),
    ('pose_relay', 'Localization', None),
    ('vel_relay', 'Localization', None),
    ('waypoint_replanner', 'Planning', 'planning'),
    ('lane_rule', 'Planning', None),
    ('lane_stop', 'Planning', None),
    ('lane_select', 'Planning', 'planning'),
    ('astar_avoid', 'Planning', None),
    ('velocity_set', 'Planning', None),
    ('pure_pursuit', 'Control', 'control'),
)

# (src, dst, trigger, assumed, payload kB)
BACKBONE_EDGES = (
    ('velodyne_driver', 'voxel_grid_filter', True, False, 1200.0),
    ('voxel_grid_filter', 'lidar_point_pillars', True, False, 400.0),
    ('voxel_grid_filter', 'ndt_matching', True, False, 400.0),
    ('voxel_grid_filter', 'costmap_generator', False, False, 400.0),
    ('lidar_point_pillars', 'range_vision_fusion', True, False, 8.0),
    ('range_vision_fusion', 'imm_ukf_tracker', True, False, 8.0),
    ('imm_ukf_tracker', 'native_motion_predictor', True, False, 8.0),
    ('native_motion_predictor', 'costmap_generator', True, False, 8.0),
    ('costmap_generator', 'astar_avoid', False, False, 250.0),
    ('nmea2tfpose', 'ndt_matching', True, False, 1.0),
    ('ndt_matching', 'pose_relay', True, True, 1.0),
    ('ndt_matching', 'vel_relay', True, True, 1.0),
    ('pose_relay', 'lane_select', False, True, 1.0),
    ('vel_relay', 'pure_pursuit', False, True, 1.0),
    ('vel_relay', 'velocity_set', False, True, 1.0),
    ('waypoint_replanner', 'lane_rule', True, False, 20.0),
    ('lane_rule', 'lane_stop', True, False, 20.0),
    ('lane_stop', 'lane_select', False, False, 20.0),
    ('lane_select', 'astar_avoid', True, False, 20.0),
    ('astar_avoid', 'velocity_set', True, False, 20.0),
    ('velocity_set', 'pure_pursuit', False, False, 20.0),
)

# Pass-through nodes bringing the backbone to 28 tasks: (id, category, period ms)
PADDING_TASKS = (
    ('points_map_loader', 'Localization', 1000.0),
    ('vector_map_loader', 'Planning', 1000.0),
    ('waypoint_loader', 'Planning', 1000.0),
    ('ray_ground_filter', 'Sensing', None),
    ('obj_reproj', 'Perception3D', None),
    ('decision_maker', 'Planning', None),
    ('twist_filter', 'Control', None),
    ('twist_gate', 'Control', None),
    ('vehicle_sender', 'Control', None),
    ('tf_publisher', 'Localization', None),
)

PADDING_EDGES = (
    ('points_map_loader', 'ndt_matching', False),
    ('vector_map_loader', 'lane_rule', False),
    ('waypoint_loader', 'waypoint_replanner', False),
    ('voxel_grid_filter', 'ray_ground_filter', True),
    ('range_vision_fusion', 'obj_reproj', True),
    ('lane_stop', 'decision_maker', True),
    ('pure_pursuit', 'twist_filter', True),
    ('twist_filter', 'twist_gate', True),
    ('twist_gate', 'vehicle_sender', True),
    ('pose_relay', 'tf_publisher', True),
)

# Module -> id prefix of the task receiving the dominant share of the module time
DOMINANT_TASKS = {
    'Sensing': 'camera_driver_',
    'Perception3D': 'lidar_point_pillars',
    'Localization': 'ndt_matching',
    'Tracking': 'imm_ukf_tracker',
    'Prediction': 'native_motion_predictor',
    'Planning': 'astar_avoid',
    'Control': 'pure_pursuit',
}

DRIVER_TASKS = ('camera_driver_', 'velodyne_driver')
GPU_TASKS = ('lidar_point_pillars',)


def resolve_profiles_dir(path: Union[str, Path, None] = None) -> Path:
    return Path(path) if path else PROFILES_DIR


def list_profiles(profiles_dir: Union[str, Path, None] = None) -> List[str]:
    """Names of the calibration profiles available in a directory."""
    directory = resolve_profiles_dir(profiles_dir)
    return sorted(p.stem for p in directory.glob('*.json'))


def load_profile(name: str, profiles_dir: Union[str, Path, None] = None) -> Dict:
    """
    Load a calibration profile by name.

    Raises:
        ProfileError: If the profile does not exist (the message lists the
            available ones) or cannot be parsed
    """
    directory = resolve_profiles_dir(profiles_dir)
    path = directory / f"{name}.json"
    if not path.is_file():
        available = ', '.join(list_profiles(directory)) or 'none'
        raise ProfileError(f"unknown profile {name!r}; available: {available}")
    try:
        return json.loads(path.read_text(encoding='utf-8'))
    except json.JSONDecodeError as e:
        raise ProfileError(f"profile {name}: line {e.lineno} column {e.colno}: {e.msg}") from e


def spec_for_app(name: str, segment: Optional[int] = None, cost_profile: Optional[str] = None,
                 padding: bool = False, substitutions: Tuple[Tuple[str, str], ...] = ()) -> WorkloadSpec:
    """
    Workload spec of one of the six standard applications.

    Args:
        name: Application name (e.g. 'ADy288')
        segment: Profile segment; selects the profile 'segment<N>-<name>'
        cost_profile: Explicit profile name, overrides `segment`
        padding: Add the pass-through nodes
        substitutions: Operator substitutions applied to the detector models

    Raises:
        DagError: If the application is not a standard one
    """
    if name not in STANDARD_APPS:
        raise DagError(f"unknown application {name!r}; standard: {', '.join(STANDARD_APPS)}")
    family, resolution, streams = STANDARD_APPS[name]
    if cost_profile is None:
        cost_profile = f"segment{segment}-{name}" if segment is not None else 'unit'
    return WorkloadSpec(
        app_name=name,
        num_2d_streams=streams,
        model_family=family,
        resolution=resolution,
        cost_profile=cost_profile,
        padding=padding,
        substitutions=tuple(tuple(s) for s in substitutions),
    )


def detector_prefix(spec: WorkloadSpec) -> str:
    return 'spp' if spec.model_family.lower().startswith('spp') else 'yolo'


def dla_native(spec: WorkloadSpec) -> bool:
    """Detectors run natively on a DLA once LeakyReLU is substituted."""
    return ('leaky_relu', 'relu') in {tuple(s) for s in spec.substitutions}


def _check_spec(spec: WorkloadSpec):
    if spec.num_2d_streams < 0:
        raise DagError(f"{spec.app_name}: stream count must be >= 0, got {spec.num_2d_streams}")
    if spec.num_2d_streams == 0 and spec.fusion_2d:
        raise DagError(f"{spec.app_name}: 2D fusion requires at least one 2D stream")
    if spec.model_family not in MODEL_FAMILIES:
        raise DagError(f"{spec.app_name}: unknown model family {spec.model_family!r}")
    if spec.resolution <= 0:
        raise DagError(f"{spec.app_name}: resolution must be > 0")
    for key in ('camera', 'lidar', 'gnss', 'planning', 'control'):
        if not spec.source_rates.get(key, 0) > 0:
            raise DagError(f"{spec.app_name}: source rate {key!r} must be > 0")


def _layout(spec: WorkloadSpec) -> List[Tuple[str, str, Optional[float]]]:
    """(task id, category, period) for every task of the spec, in graph order."""
    rates = spec.source_rates
    tasks = [(f"camera_driver_{k}", 'Sensing', 1000.0 / rates['camera']) for k in range(spec.num_2d_streams)]
    prefix = detector_prefix(spec)
    tasks.extend((f"{prefix}_{k}", 'Perception2D', None) for k in range(spec.num_2d_streams))
    for task_id, category, rate_key in BACKBONE_TASKS:
        tasks.append((task_id, category, 1000.0 / rates[rate_key] if rate_key else None))
    if spec.padding:
        tasks.extend(PADDING_TASKS)
    return tasks


def _calibrate(profile: Dict, spec: WorkloadSpec) -> Dict[str, Dict[str, float]]:
    layout = _layout(spec)
    padding_ids = {t[0] for t in PADDING_TASKS}
    prefix = detector_prefix(spec)

    def kinds_for(task_id: str) -> List[str]:
        if task_id.startswith(f"{prefix}_"):
            return [GPU, DLA]
        if task_id in GPU_TASKS:
            return [GPU]
        return [CPU]

    costs: Dict[str, Dict[str, float]] = {}
    for task_id, _, _ in layout:
        if task_id in padding_ids:
            costs[task_id] = {CPU: PADDING_COST_MS}

    if 'uniform_ms' in profile:
        ms = float(profile['uniform_ms'])
        for task_id, _, _ in layout:
            costs.setdefault(task_id, {kind: ms for kind in kinds_for(task_id)})
        return costs

    try:
        base = profile['base_ms']
        dnn = profile['dnn']
        detector = {GPU: float(dnn['gpu_ms']), DLA: float(dnn['dla_ms'])}
    except (KeyError, TypeError, ValueError) as e:
        raise ProfileError(f"profile {profile.get('name')}: missing calibration field {e}") from e

    modules: Dict[str, List[str]] = {}
    for task_id, category, _ in layout:
        if task_id in padding_ids:
            continue
        if category == 'Perception2D':
            costs[task_id] = dict(detector)
            continue
        modules.setdefault(category, []).append(task_id)

    for category, task_ids in modules.items():
        if category not in base:
            raise ProfileError(f"profile {profile.get('name')}: no base time for module {category}")
        total = float(base[category])
        dominant = [t for t in task_ids if t.startswith(DOMINANT_TASKS.get(category, '\0'))]
        others = [t for t in task_ids if t not in dominant]
        for task_id in task_ids:
            if not dominant or not others:
                # a lone dominant (or a module missing it) takes the whole module time
                ms = total if dominant else total / len(others)
            elif task_id in dominant:
                ms = total * DOMINANT_SHARE
            else:
                ms = total * (1.0 - DOMINANT_SHARE) / len(others)
            costs[task_id] = {kind: round(ms, 6) for kind in kinds_for(task_id)}
    return costs


def calibrate(profile_name: str, spec: Optional[WorkloadSpec] = None,
              profiles_dir: Union[str, Path, None] = None) -> Dict[str, Dict[str, float]]:
    """
    Distribute a profile's module times over the tasks of a workload.

    Within a module the dominant task (camera drivers, lidar_point_pillars,
    ndt_matching, ...) receives 90% of the module time and the remaining tasks
    share the rest. Detectors get the profile's per-model GPU and DLA times;
    the GPU time is the observed module time divided by the co-run factor of
    all the models sharing the GPU, the DLA time one inference on one DLA.

    Args:
        profile_name: Profile name (see list_profiles)
        spec: Workload; defaults to the standard app the profile belongs to
        profiles_dir: Directory holding the profiles

    Returns:
        Map from task id to per-kind cost (ms)

    Raises:
        ProfileError: On unknown profiles, or an app-agnostic profile without a spec
    """
    profile = load_profile(profile_name, profiles_dir)
    if spec is None:
        app = profile.get('app')
        if app not in STANDARD_APPS:
            raise ProfileError(f"profile {profile_name} is not tied to an application; pass a workload spec")
        spec = spec_for_app(app, cost_profile=profile_name)
    return _calibrate(profile, spec)


def generate(spec: WorkloadSpec, profiles_dir: Union[str, Path, None] = None) -> Dag:
    """
    Build the task graph of a workload.

    Every 2D stream adds a camera driver feeding one detector; detectors all
    feed range_vision_fusion through latest-value (non-trigger) edges.
    Detectors are GPU-only unless the spec substitutes LeakyReLU with ReLU,
    which makes them DLA-eligible as well. The output depends only on the
    spec and the profile contents.

    Args:
        spec: Workload spec
        profiles_dir: Directory holding the calibration profiles

    Returns:
        Dag whose metadata records the app, profile and substitutions

    Raises:
        DagError: On invalid specs
        ProfileError: On unknown or incomplete profiles
    """
    _check_spec(spec)
    profile = load_profile(spec.cost_profile, profiles_dir)
    costs = _calibrate(profile, spec)
    dnn = profile.get('dnn', {})
    host = dnn.get('host_ms', {})
    hog = float(profile.get('driver_hog', 0.0))
    prefix = detector_prefix(spec)
    padding_ids = {t[0] for t in PADDING_TASKS}

    nodes = []
    for task_id, category, period in _layout(spec):
        cost_table = costs[task_id]
        eligibility = frozenset(cost_table)
        group = None
        host_ms = 0.0
        assist = None
        if task_id.startswith(f"{prefix}_"):
            group = prefix
            eligibility = frozenset({GPU, DLA}) if dla_native(spec) else frozenset({GPU})
            host_ms = float(host.get('detector', 0.0))
        elif task_id in GPU_TASKS:
            host_ms = float(host.get(task_id, 0.0))
        if hog > 0 and period and task_id.startswith(DRIVER_TASKS):
            assist = round(hog * period / cost_table[CPU], 6)
        nodes.append(TaskNode(
            id=task_id,
            name=task_id,
            category=category,
            cost_table=dict(cost_table),
            eligibility=eligibility,
            expected_latency=PLANNING_DEADLINE_MS if category == 'Planning' else MODULE_DEADLINE_MS,
            period=period,
            thread_count=1 if task_id in padding_ids else 2,
            group=group,
            host_ms=host_ms,
            assist_fraction=assist,
        ))

    frame_kb = round(spec.resolution * spec.resolution * 3 / 1024, 1)
    edges = []
    for k in range(spec.num_2d_streams):
        edges.append(Edge(f"camera_driver_{k}", f"{prefix}_{k}", dict(CPU_COMM), frame_kb))
        if spec.fusion_2d:
            edges.append(Edge(f"{prefix}_{k}", 'range_vision_fusion', dict(CPU_COMM), 4.0, trigger=False))
    for src, dst, trigger, assumed, payload in BACKBONE_EDGES:
        edges.append(Edge(src, dst, dict(CPU_COMM), payload, trigger=trigger, assumed=assumed))
    if spec.padding:
        for src, dst, trigger in PADDING_EDGES:
            edges.append(Edge(src, dst, dict(CPU_COMM), 1.0, trigger=trigger))

    metadata = {
        'app': spec.app_name,
        'profile': spec.cost_profile,
        'model_family': spec.model_family,
        'resolution': spec.resolution,
        'streams': spec.num_2d_streams,
        'padding': spec.padding,
        'substitutions': [list(s) for s in spec.substitutions],
        'corun_alpha': dict(profile.get('corun_alpha', {})),
    }
    dag = Dag(nodes=tuple(nodes), edges=tuple(edges), metadata=metadata)
    logger.debug(f"Generated {spec.app_name} ({spec.cost_profile}): {len(nodes)} nodes, {len(edges)} edges")
    return dag


def with_accelerator_costs(dag: Dag, group: str, kind: str, ms: float, fallback_ms: float = 0.0) -> Dag:
    """
    Give every task of a group a cost on `kind` and make it eligible there.

    `fallback_ms` is the part of `ms` the model leaves to the GPU when it
    runs on `kind`.
    """
    nodes = []
    for node in dag.nodes:
        if node.group == group:
            table = dict(node.cost_table)
            table[kind] = ms
            node = replace(node, cost_table=table, eligibility=node.eligibility | {kind},
                           fallback_ms=fallback_ms)
        nodes.append(node)
    return Dag(nodes=tuple(nodes), edges=dag.edges, metadata=dict(dag.metadata))

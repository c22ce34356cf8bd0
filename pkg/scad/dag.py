"""
Task-graph validation and (de)serialization of `.dag` and platform documents.
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import networkx as nx

from .models import (
    CATEGORIES, CPU, DLA, DOCUMENT_VERSION, GPU, PROCESSOR_KINDS,
    Dag, DagError, Edge, Platform, Processor, TaskNode,
)

logger = logging.getLogger(__name__)

DAG_KEYS = {'version', 'platform', 'nodes', 'edges', 'metadata'}
NODE_KEYS = {
    'id', 'name', 'category', 'costs', 'eligibility', 'period_ms', 'deadline_ms', 'threads',
    'group', 'host_ms', 'assist_fraction', 'affinity', 'fallback_ms',
}
EDGE_KEYS = {'src', 'dst', 'comm', 'payload_kb', 'trigger', 'assumed'}
PLATFORM_KEYS = {'version', 'processors', 'reserved'}
PROCESSOR_KEYS = {'id', 'kind', 'speed', 'watts'}

DEFAULT_PLATFORM_PATH = Path(__file__).parent / 'platforms' / 'jetson-xavier.json'


def to_networkx(dag: Dag) -> nx.DiGraph:
    """Build a networkx view of the graph (node insertion follows dag order)."""
    graph = nx.DiGraph()
    for node in dag.nodes:
        graph.add_node(node.id)
    for edge in dag.edges:
        graph.add_edge(edge.src, edge.dst)
    return graph


def topological_order(dag: Dag) -> List[str]:
    """
    Deterministic topological order (lexicographic among ready nodes).

    Raises:
        DagError: If the graph has a cycle
    """
    graph = to_networkx(dag)
    try:
        return list(nx.lexicographical_topological_sort(graph))
    except nx.NetworkXUnfeasible as e:
        raise DagError(f"cycle detected: {_cycle_description(graph)}") from e


def _cycle_description(graph: nx.DiGraph) -> str:
    cycles = []
    for component in nx.strongly_connected_components(graph):
        if len(component) > 1:
            cycles.append(','.join(sorted(component)))
    return '; '.join(sorted(cycles))


def validate(dag: Dag, platform: Platform) -> List[str]:
    """
    Check graph, node and platform invariants.

    Args:
        dag: Task graph to check
        platform: Platform the graph will be placed on

    Returns:
        List of violation messages, empty when the graph is valid
    """
    violations: List[str] = []
    platform_kinds = platform.kinds()
    proc_ids = {p.id for p in platform.processors}

    if not dag.nodes:
        violations.append("no nodes")

    seen = set()
    for node in dag.nodes:
        if node.id in seen:
            violations.append(f"duplicate node id: {node.id}")
        seen.add(node.id)

    for node in dag.nodes:
        prefix = f"node {node.id}"
        if node.category not in CATEGORIES:
            violations.append(f"{prefix}: unknown category {node.category!r}")
        if not node.eligibility:
            violations.append(f"{prefix}: empty eligibility")
        for kind in sorted(node.eligibility):
            if kind not in PROCESSOR_KINDS:
                violations.append(f"{prefix}: unknown processor kind {kind!r}")
            elif kind not in node.cost_table:
                violations.append(f"{prefix}: no cost for eligible kind {kind}")
        for kind, cost in sorted(node.cost_table.items()):
            if not cost > 0:
                violations.append(f"{prefix}: cost for {kind} must be > 0, got {cost}")
        if node.eligibility and not (set(node.eligibility) & platform_kinds):
            violations.append(
                f"{prefix}: eligibility {','.join(sorted(node.eligibility))} "
                f"matches no processor on the platform"
            )
        if not node.expected_latency > 0:
            violations.append(f"{prefix}: expected latency must be > 0")
        if node.period is not None and not node.period > 0:
            violations.append(f"{prefix}: period must be > 0")
        if node.thread_count < 1:
            violations.append(f"{prefix}: thread count must be >= 1")
        if node.host_ms < 0:
            violations.append(f"{prefix}: host_ms must be >= 0")
        if node.fallback_ms < 0:
            violations.append(f"{prefix}: fallback_ms must be >= 0")
        if node.affinity is not None:
            if node.affinity not in proc_ids:
                violations.append(f"{prefix}: affinity {node.affinity} is not a platform processor")
            elif platform.processor(node.affinity).kind not in node.eligibility:
                violations.append(f"{prefix}: affinity {node.affinity} is not an eligible kind")

    node_ids = {n.id for n in dag.nodes}
    for edge in dag.edges:
        if edge.src == edge.dst:
            violations.append(f"edge {edge.src}->{edge.dst}: self loop")
        for endpoint in (edge.src, edge.dst):
            if endpoint not in node_ids:
                violations.append(f"edge {edge.src}->{edge.dst}: unknown node {endpoint}")
        for key, value in sorted(edge.comm_cost.items()):
            kinds = key.split('-')
            if len(kinds) != 2 or any(k not in PROCESSOR_KINDS for k in kinds):
                violations.append(f"edge {edge.src}->{edge.dst}: bad comm key {key!r}")
            if value < 0:
                violations.append(f"edge {edge.src}->{edge.dst}: negative comm cost for {key}")

    graph = to_networkx(dag)
    graph.remove_nodes_from([n for n in list(graph.nodes) if n not in node_ids])
    cycle = _cycle_description(graph)
    if cycle:
        violations.append(f"cycle detected: {cycle}")
    elif dag.nodes:
        if not any(graph.in_degree(n) == 0 for n in node_ids):
            violations.append("no source node")
        if not any(graph.out_degree(n) == 0 for n in node_ids):
            violations.append("no exit node")

    for node in dag.nodes:
        incoming = [e for e in dag.in_edges(node.id) if e.src in node_ids]
        if node.period is None:
            if not incoming:
                violations.append(f"node {node.id}: source node has no period")
            elif not any(e.trigger for e in incoming):
                violations.append(f"node {node.id}: reactive node has no trigger inputs")

    violations.extend(validate_platform(platform))
    return violations


def validate_platform(platform: Platform) -> List[str]:
    """Check platform invariants; returns violation messages."""
    violations = []
    ids = [p.id for p in platform.processors]
    if len(set(ids)) != len(ids):
        violations.append("platform: duplicate processor ids")
    for proc in platform.processors:
        if proc.kind not in PROCESSOR_KINDS:
            violations.append(f"processor {proc.id}: unknown kind {proc.kind!r}")
        if not proc.speed_factor > 0:
            violations.append(f"processor {proc.id}: speed factor must be > 0")
        if proc.power_watts < 0:
            violations.append(f"processor {proc.id}: power must be >= 0")
    for proc_id in sorted(platform.reserved):
        if proc_id not in ids:
            violations.append(f"platform: reserved id {proc_id} is not a processor")
    if not platform.general_cpus():
        violations.append("platform: no CPU left after removing reserved processors")
    return violations


# ---------------------------------------------------------------------------
# Documents
# ---------------------------------------------------------------------------

def _parse_json(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise DagError(f"line {e.lineno} column {e.colno}: {e.msg}") from e


def _check_keys(obj: Any, allowed: set, where: str, required: tuple = ()):
    if not isinstance(obj, dict):
        raise DagError(f"{where}: expected an object")
    unknown = sorted(set(obj) - allowed)
    if unknown:
        raise DagError(f"{where}: unknown field(s) {', '.join(unknown)}")
    for key in required:
        if key not in obj:
            raise DagError(f"{where}: missing field '{key}'")


def _check_version(doc: Dict, where: str):
    version = doc.get('version')
    if version != DOCUMENT_VERSION:
        raise DagError(f"{where}: unsupported version {version!r} (expected {DOCUMENT_VERSION})")


def _number(value: Any, where: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise DagError(f"{where}: expected a number, got {value!r}")
    return float(value)


def _integer(value: Any, where: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise DagError(f"{where}: expected an integer, got {value!r}")
    return value


def _node_from_doc(doc: Dict, where: str) -> TaskNode:
    _check_keys(doc, NODE_KEYS, where, ('id', 'category', 'costs', 'eligibility', 'deadline_ms'))
    costs = doc['costs']
    if not isinstance(costs, dict):
        raise DagError(f"{where}.costs: expected an object")
    cost_table = {kind: _number(v, f"{where}.costs.{kind}") for kind, v in costs.items()}
    eligibility = doc['eligibility']
    if not isinstance(eligibility, list):
        raise DagError(f"{where}.eligibility: expected a list")
    period = doc.get('period_ms')
    assist = doc.get('assist_fraction')
    return TaskNode(
        id=str(doc['id']),
        name=str(doc.get('name', doc['id'])),
        category=str(doc['category']),
        cost_table=cost_table,
        eligibility=frozenset(str(k) for k in eligibility),
        expected_latency=_number(doc['deadline_ms'], f"{where}.deadline_ms"),
        period=None if period is None else _number(period, f"{where}.period_ms"),
        thread_count=_integer(doc.get('threads', 2), f"{where}.threads"),
        group=doc.get('group'),
        host_ms=_number(doc.get('host_ms', 0.0), f"{where}.host_ms"),
        assist_fraction=None if assist is None else _number(assist, f"{where}.assist_fraction"),
        affinity=doc.get('affinity'),
        fallback_ms=_number(doc.get('fallback_ms', 0.0), f"{where}.fallback_ms"),
    )


def _edge_from_doc(doc: Dict, where: str) -> Edge:
    _check_keys(doc, EDGE_KEYS, where, ('src', 'dst'))
    comm = doc.get('comm', {})
    if not isinstance(comm, dict):
        raise DagError(f"{where}.comm: expected an object")
    return Edge(
        src=str(doc['src']),
        dst=str(doc['dst']),
        comm_cost={k: _number(v, f"{where}.comm.{k}") for k, v in comm.items()},
        payload_kb=_number(doc.get('payload_kb', 0.0), f"{where}.payload_kb"),
        trigger=bool(doc.get('trigger', True)),
        assumed=bool(doc.get('assumed', False)),
    )


def dag_from_dict(doc: Any) -> Dag:
    """Build a Dag from a parsed document."""
    _check_keys(doc, DAG_KEYS, 'document', ('version', 'nodes'))
    _check_version(doc, 'document')
    nodes_doc = doc['nodes']
    if not isinstance(nodes_doc, list) or not nodes_doc:
        raise DagError("no nodes")
    nodes = [_node_from_doc(n, f"nodes[{i}]") for i, n in enumerate(nodes_doc)]
    edges_doc = doc.get('edges', [])
    if not isinstance(edges_doc, list):
        raise DagError("edges: expected a list")
    edges = [_edge_from_doc(e, f"edges[{i}]") for i, e in enumerate(edges_doc)]
    metadata = doc.get('metadata') or {}
    if doc.get('platform') is not None:
        metadata = dict(metadata)
        metadata['platform'] = doc['platform']
    return Dag(nodes=tuple(nodes), edges=tuple(edges), metadata=metadata)


def load_dag(source: Union[str, Path]) -> Dag:
    """
    Load a `.dag` document from text or from a file path.

    Args:
        source: Document text, or a Path to a `.dag` file

    Returns:
        Parsed Dag

    Raises:
        DagError: On parse errors (with line/column or field location),
            schema violations or version mismatch
    """
    if isinstance(source, Path):
        text = source.read_text(encoding='utf-8')
    else:
        text = source
    dag = dag_from_dict(_parse_json(text))
    logger.debug(f"Loaded DAG with {len(dag.nodes)} nodes and {len(dag.edges)} edges")
    return dag


def _node_to_doc(node: TaskNode) -> Dict:
    doc: Dict[str, Any] = {
        'id': node.id,
        'name': node.name,
        'category': node.category,
        'costs': {k: node.cost_table[k] for k in PROCESSOR_KINDS if k in node.cost_table},
        'eligibility': [k for k in PROCESSOR_KINDS if k in node.eligibility],
    }
    if node.period is not None:
        doc['period_ms'] = node.period
    doc['deadline_ms'] = node.expected_latency
    doc['threads'] = node.thread_count
    if node.group is not None:
        doc['group'] = node.group
    if node.host_ms:
        doc['host_ms'] = node.host_ms
    if node.assist_fraction is not None:
        doc['assist_fraction'] = node.assist_fraction
    if node.affinity is not None:
        doc['affinity'] = node.affinity
    if node.fallback_ms:
        doc['fallback_ms'] = node.fallback_ms
    return doc


def dag_to_dict(dag: Dag) -> Dict:
    metadata = dict(dag.metadata)
    platform = metadata.pop('platform', None)
    doc: Dict[str, Any] = {'version': DOCUMENT_VERSION, 'platform': platform}
    if metadata:
        doc['metadata'] = metadata
    doc['nodes'] = [_node_to_doc(n) for n in dag.nodes]
    doc['edges'] = [
        {
            'src': e.src,
            'dst': e.dst,
            'comm': dict(sorted(e.comm_cost.items())),
            'payload_kb': e.payload_kb,
            'trigger': e.trigger,
            'assumed': e.assumed,
        }
        for e in dag.edges
    ]
    return doc


def dump_dag(dag: Dag) -> str:
    """Serialize a Dag to `.dag` document text (stable key order, trailing newline)."""
    return json.dumps(dag_to_dict(dag), indent=2) + '\n'


# ---------------------------------------------------------------------------
# Platforms
# ---------------------------------------------------------------------------

def platform_from_dict(doc: Any) -> Platform:
    _check_keys(doc, PLATFORM_KEYS, 'platform', ('version', 'processors'))
    _check_version(doc, 'platform')
    processors_doc = doc['processors']
    if not isinstance(processors_doc, list):
        raise DagError("platform.processors: expected a list")
    processors = []
    for i, proc in enumerate(processors_doc):
        where = f"processors[{i}]"
        _check_keys(proc, PROCESSOR_KEYS, where, ('id', 'kind'))
        processors.append(Processor(
            id=str(proc['id']),
            kind=str(proc['kind']),
            speed_factor=_number(proc.get('speed', 1.0), f"{where}.speed"),
            power_watts=_number(proc.get('watts', 0.0), f"{where}.watts"),
        ))
    return Platform(processors=tuple(processors), reserved=frozenset(doc.get('reserved', [])))


def load_platform(source: Union[str, Path, None] = None) -> Platform:
    """
    Load a platform document from text or a path; None loads the default device.

    Raises:
        DagError: On parse or schema errors, or when platform invariants fail
    """
    if source is None:
        source = DEFAULT_PLATFORM_PATH
    text = source.read_text(encoding='utf-8') if isinstance(source, Path) else source
    platform = platform_from_dict(_parse_json(text))
    problems = validate_platform(platform)
    if problems:
        raise DagError('; '.join(problems))
    return platform


def dump_platform(platform: Platform) -> str:
    doc = {
        'version': DOCUMENT_VERSION,
        'processors': [
            {'id': p.id, 'kind': p.kind, 'speed': p.speed_factor, 'watts': p.power_watts}
            for p in platform.processors
        ],
        'reserved': sorted(platform.reserved),
    }
    return json.dumps(doc, indent=2) + '\n'


def default_platform(cpu_watts: float = 1.5, gpu_watts: float = 30.0,
                     dla_watts: float = 1.0, reserved_cores: int = 2) -> Platform:
    """8 CPU cores (last ones reserved for planning), one GPU and two DLAs."""
    processors = [Processor(f"cpu{i}", CPU, 1.0, cpu_watts) for i in range(8)]
    processors.append(Processor('gpu0', GPU, 1.0, gpu_watts))
    processors.extend(Processor(f"dla{i}", DLA, 1.0, dla_watts) for i in range(2))
    reserved = frozenset(f"cpu{i}" for i in range(8 - reserved_cores, 8))
    return Platform(processors=tuple(processors), reserved=reserved)


def resolve_platform(path: Optional[str]) -> Platform:
    """Load a platform from a file path, or the default device when no path is given."""
    if not path:
        return load_platform(None)
    return load_platform(Path(path))

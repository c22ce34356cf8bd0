"""
Accelerator fallback partitioning of DNN layer graphs.
"""

import json
import logging
from dataclasses import replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

from .models import Layer, LayerGraph, PartitionError, PartitionPlan, Segment, SupportProfile

logger = logging.getLogger(__name__)

FIXTURES_DIR = Path(__file__).parent / 'fixtures'

DLA_SUPPORTED_OPS = frozenset({
    'conv', 'batch_norm', 'relu', 'add', 'concat', 'upsample', 'maxpool',
})

# Accuracy notes are carried for reference only
LEAKY_TO_RELU = {
    'from_op': 'leaky_relu',
    'to_op': 'relu',
    'accuracy_note': 'retrained with ReLU; mAP within 1-2 points of the LeakyReLU model',
}


def parse_layer_graph(text: str, name: str = '') -> LayerGraph:
    """
    Parse the `.lg` fixture format.

    Lines are `block <name>`, `layer <op_kind> [key=value ...]` or
    `skip <from> <to>` (layer indexes); `#` starts a comment.

    Raises:
        PartitionError: On malformed lines or a layer outside any block
    """
    layers: List[Layer] = []
    skips: List[Tuple[int, int]] = []
    block: Optional[str] = None

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split('#', 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        keyword = parts[0]
        if keyword == 'block' and len(parts) == 2:
            block = parts[1]
        elif keyword == 'layer' and len(parts) >= 2:
            if block is None:
                raise PartitionError(f"line {lineno}: layer outside a block")
            params = {}
            for token in parts[2:]:
                if '=' not in token:
                    raise PartitionError(f"line {lineno}: bad parameter {token!r}")
                key, value = token.split('=', 1)
                params[key] = value
            layers.append(Layer(id=len(layers), op_kind=parts[1].lower(), block=block, params=params))
        elif keyword == 'skip' and len(parts) == 3:
            try:
                skips.append((int(parts[1]), int(parts[2])))
            except ValueError as e:
                raise PartitionError(f"line {lineno}: skip expects two layer indexes") from e
        else:
            raise PartitionError(f"line {lineno}: cannot parse {raw.strip()!r}")

    return LayerGraph(layers=tuple(layers), name=name, skips=tuple(skips))


def load_layer_graph(path: Union[str, Path]) -> LayerGraph:
    path = Path(path)
    graph = parse_layer_graph(path.read_text(encoding='utf-8'), name=path.stem)
    logger.debug(f"Loaded layer graph {path.name}: {len(graph.layers)} layers, {len(graph.blocks())} blocks")
    return graph


def fixture_path(model_family: str) -> Path:
    """Layer-graph fixture for a model family ('Yolo-v3' or 'SPP-v3')."""
    name = 'yolov3-spp.lg' if model_family.lower().startswith('spp') else 'yolov3.lg'
    return FIXTURES_DIR / name


def load_support_profile(path: Union[str, Path, None] = None) -> SupportProfile:
    """Load a `.prof` document; None loads the shipped DLA profile."""
    path = Path(path) if path else FIXTURES_DIR / 'dla.prof'
    try:
        doc = json.loads(path.read_text(encoding='utf-8'))
        return SupportProfile(
            device=doc['device'],
            supported_ops=frozenset(op.lower() for op in doc['supported_ops']),
            max_fallback_subgraphs=int(doc.get('max_fallback_subgraphs', 8)),
        )
    except (KeyError, TypeError, json.JSONDecodeError) as e:
        raise PartitionError(f"{path}: malformed support profile ({e})") from e


def dla_profile(max_fallback_subgraphs: int = 8) -> SupportProfile:
    return SupportProfile('DLA', DLA_SUPPORTED_OPS, max_fallback_subgraphs)


def _runs(graph: LayerGraph, profile: SupportProfile) -> List[Segment]:
    """Maximal runs of supported/unsupported layers."""
    runs: List[Segment] = []
    for layer in graph.layers:
        device = 'target' if layer.op_kind in profile.supported_ops else 'fallback'
        if runs and runs[-1].device == device:
            runs[-1] = Segment(device, runs[-1].start, layer.id + 1)
        else:
            runs.append(Segment(device, layer.id, layer.id + 1))
    return runs


def partition(graph: LayerGraph, profile: SupportProfile, count_total: bool = False,
              switch_penalty: float = 1.0) -> PartitionPlan:
    """
    Split a layer graph into target-resident and fallback segments.

    Once the fallback budget is spent, every remaining layer joins the last
    fallback segment. With `count_total`, every segment counts against the
    budget instead of only fallback segments.

    Args:
        graph: Layer graph
        profile: Device op support and subgraph budget
        count_total: Count all segments against the budget
        switch_penalty: Per-transition cost recorded on the plan

    Returns:
        PartitionPlan covering every layer exactly once

    Raises:
        PartitionError: On an empty graph, or when unsupported layers meet a zero budget
    """
    if not graph.layers:
        raise PartitionError("empty layer graph")

    runs = _runs(graph, profile)
    unsupported_runs = sum(1 for r in runs if r.device == 'fallback')
    budget = profile.max_fallback_subgraphs
    n = len(graph.layers)

    if unsupported_runs and budget == 0:
        raise PartitionError(f"{graph.name or 'graph'}: unsupported layers on {profile.device} with no fallback budget")

    segments = list(runs)
    if count_total:
        feasible = len(runs) <= budget
        if not feasible:
            head = runs[:budget - 1]
            if head and head[-1].device == 'fallback':
                head.pop()
            tail_start = head[-1].end if head else 0
            segments = head + [Segment('fallback', tail_start, n)]
    else:
        feasible = unsupported_runs <= budget
        if not feasible:
            seen = 0
            for index, run in enumerate(runs):
                if run.device == 'fallback':
                    seen += 1
                    if seen == budget:
                        segments = runs[:index] + [Segment('fallback', run.start, n)]
                        break

    fallback_count = sum(1 for s in segments if s.device == 'fallback')
    plan = PartitionPlan(
        segments=tuple(segments),
        fallback_count=fallback_count,
        feasible=feasible or unsupported_runs == 0,
        unsupported_runs=unsupported_runs,
        layer_count=n,
        switch_penalty=switch_penalty,
    )
    logger.debug(
        f"Partitioned {graph.name or 'graph'}: {len(segments)} segments, "
        f"{fallback_count} fallback, {unsupported_runs} unsupported runs"
    )
    return plan


def substitute(graph: LayerGraph, rules: Iterable[Dict],
               target: Optional[SupportProfile] = None) -> LayerGraph:
    """
    Replace op kinds according to rules; structure is left untouched.

    Rules chain: with a->b and b->c every a and b becomes c, so applying the
    result again changes nothing.

    Args:
        graph: Layer graph
        rules: Dicts with 'from_op' and 'to_op' (an optional 'accuracy_note' is ignored)
        target: When given, rules producing ops it does not support add a warning

    Returns:
        New LayerGraph with substituted ops and any warnings attached

    Raises:
        PartitionError: If the rules form a cycle
    """
    mapping = {}
    warnings = list(graph.warnings)
    for rule in rules:
        from_op = rule['from_op'].lower()
        to_op = rule['to_op'].lower()
        if from_op != to_op:
            mapping[from_op] = to_op

    if not mapping:
        return graph

    resolved = {}
    for from_op in mapping:
        seen = [from_op]
        op = mapping[from_op]
        while op in mapping:
            if op in seen:
                raise PartitionError(f"substitution rules form a cycle: {' -> '.join(seen + [op])}")
            seen.append(op)
            op = mapping[op]
        resolved[from_op] = op
        if target is not None and op not in target.supported_ops:
            warnings.append(f"rule {from_op}->{op}: {op} is not supported on {target.device}")

    layers = tuple(
        replace(layer, op_kind=resolved.get(layer.op_kind, layer.op_kind)) for layer in graph.layers
    )
    return LayerGraph(layers=layers, name=graph.name, skips=graph.skips, warnings=tuple(warnings))


def layer_weighted_costs(plan: PartitionPlan, target_ms: float, fallback_ms: float) -> List[float]:
    """Per-segment costs: the segment's share of layers times the device's whole-model time."""
    costs = []
    for segment in plan.segments:
        whole = target_ms if segment.device == 'target' else fallback_ms
        costs.append(whole * segment.size / plan.layer_count)
    return costs


def derive_costs(plan: PartitionPlan, per_segment_costs: Sequence[float],
                 switch_penalty: Optional[float] = None) -> float:
    """
    Effective execution cost of a partitioned model.

    Args:
        plan: Partition plan
        per_segment_costs: One cost per plan segment, in order
        switch_penalty: Cost per fallback transition; defaults to the plan's

    Returns:
        Sum of segment costs plus transitions times the penalty

    Raises:
        PartitionError: If a segment has no cost
    """
    if len(per_segment_costs) < len(plan.segments):
        raise PartitionError(f"no cost for segment {len(per_segment_costs)} of {len(plan.segments)}")
    penalty = plan.switch_penalty if switch_penalty is None else switch_penalty
    total = sum(per_segment_costs[:len(plan.segments)])
    return total + plan.transitions * penalty

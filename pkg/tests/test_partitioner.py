"""
Tests for layer-graph parsing, partitioning and substitution.
"""

import random

import pytest

from scad.models import Layer, LayerGraph, PartitionError, Segment, SupportProfile
from scad.partitioner import (
    LEAKY_TO_RELU, derive_costs, dla_profile, fixture_path, layer_weighted_costs,
    load_layer_graph, load_support_profile, parse_layer_graph, partition, substitute,
)


def graph_of(ops, name='g'):
    return LayerGraph(
        layers=tuple(Layer(i, op, f"b{i // 3}") for i, op in enumerate(ops)),
        name=name,
    )


def oracle_segments(ops, supported, budget):
    """Label layer by layer, merging everything from the budget-th fallback run on."""
    labels = []
    runs = 0
    tail = False
    for i, op in enumerate(ops):
        device = 'target' if op in supported else 'fallback'
        if device == 'fallback' and (i == 0 or labels[-1] != 'fallback'):
            runs += 1
        labels.append(device)
    if runs > budget:
        seen = 0
        for i, op in enumerate(ops):
            if op not in supported and (i == 0 or ops[i - 1] in supported):
                seen += 1
                if seen == budget:
                    labels[i:] = ['fallback'] * (len(ops) - i)
                    tail = True
                    break
    segments = []
    for i, label in enumerate(labels):
        if segments and segments[-1][0] == label:
            segments[-1][2] = i + 1
        else:
            segments.append([label, i, i + 1])
    return [Segment(d, s, e) for d, s, e in segments], runs, tail


def test_parse_blocks_and_skips():
    """Blocks group the following layers; skips and params are kept."""
    graph = parse_layer_graph(
        "# header\n"
        "block conv_01\n"
        "layer conv k=3\n"
        "layer LEAKY_RELU slope=0.1   # trailing comment\n"
        "block conv_02\n"
        "layer add\n"
        "skip 0 2\n",
        name='tiny',
    )
    assert graph.ops() == ['conv', 'leaky_relu', 'add']
    assert graph.blocks() == ['conv_01', 'conv_02']
    assert graph.layers[0].params == {'k': '3'}
    assert graph.skips == ((0, 2),)


def test_parse_rejects_layer_outside_block():
    with pytest.raises(PartitionError, match='line 1: layer outside a block'):
        parse_layer_graph("layer conv\n")


def test_parse_rejects_unknown_lines():
    with pytest.raises(PartitionError, match="line 2: cannot parse 'pool max'"):
        parse_layer_graph("block a\npool max\n")


def test_yolov3_fixture_structure():
    """The shipped YOLOv3 skeleton has 57 convolution blocks with one LeakyReLU each."""
    graph = load_layer_graph(fixture_path('Yolo-v3'))
    assert len(graph.layers) == 198
    assert len(graph.blocks()) == 57
    assert graph.ops().count('leaky_relu') == 57


def test_yolov3_falls_back_57_times():
    """57 unsupported runs exceed the budget; the eighth fallback takes the tail."""
    graph = load_layer_graph(fixture_path('Yolo-v3'))
    plan = partition(graph, dla_profile())

    assert plan.unsupported_runs == 57
    assert plan.fallback_count == 8
    assert plan.entries == 8
    assert plan.transitions == 16
    assert not plan.feasible
    assert plan.segments[-1] == Segment('fallback', 26, 198)
    target_layers = sum(s.size for s in plan.segments if s.device == 'target')
    assert target_layers == 19


def test_relu_substitution_keeps_the_model_on_the_accelerator():
    """With ReLU activations the whole model is one target segment."""
    for family in ('Yolo-v3', 'SPP-v3'):
        graph = load_layer_graph(fixture_path(family))
        relu = substitute(graph, [LEAKY_TO_RELU], dla_profile())
        plan = partition(relu, dla_profile())

        assert plan.segments == (Segment('target', 0, len(graph.layers)),)
        assert plan.fallback_count == 0
        assert plan.feasible
        assert relu.warnings == ()
        assert relu.blocks() == graph.blocks()
        assert relu.skips == graph.skips


def test_substitute_is_idempotent_and_structure_preserving():
    graph = graph_of(['conv', 'leaky_relu', 'add', 'leaky_relu'])
    once = substitute(graph, [LEAKY_TO_RELU])
    assert once.ops() == ['conv', 'relu', 'add', 'relu']
    assert substitute(once, [LEAKY_TO_RELU]) == once
    assert [layer.block for layer in once.layers] == [layer.block for layer in graph.layers]


def test_substitute_without_rules_or_matches():
    graph = graph_of(['conv', 'relu'])
    assert substitute(graph, []) == graph
    assert substitute(graph, [LEAKY_TO_RELU]).ops() == graph.ops()


def test_substitute_warns_on_unsupported_target_op():
    """A rule producing an op the target lacks leaves a warning."""
    graph = graph_of(['conv', 'leaky_relu'])
    out = substitute(graph, [{'from_op': 'leaky_relu', 'to_op': 'mish'}], dla_profile())
    assert out.warnings == ('rule leaky_relu->mish: mish is not supported on DLA',)


def test_substitute_follows_chained_rules():
    """a->b then b->c sends both a and b to c in a single call."""
    graph = graph_of(['leaky_relu', 'mish', 'conv'])
    rules = [{'from_op': 'leaky_relu', 'to_op': 'mish'}, {'from_op': 'mish', 'to_op': 'relu'}]
    once = substitute(graph, rules, dla_profile())

    assert once.ops() == ['relu', 'relu', 'conv']
    assert once.warnings == ()
    assert substitute(once, rules) == once


def test_substitute_rejects_cyclic_rules():
    graph = graph_of(['leaky_relu'])
    rules = [{'from_op': 'leaky_relu', 'to_op': 'mish'}, {'from_op': 'mish', 'to_op': 'leaky_relu'}]
    with pytest.raises(PartitionError, match='cycle'):
        substitute(graph, rules)


def test_all_supported_is_one_target_segment():
    plan = partition(graph_of(['conv', 'batch_norm', 'relu']), dla_profile())
    assert plan.segments == (Segment('target', 0, 3),)
    assert plan.fallback_count == 0
    assert plan.feasible


def test_exactly_budget_runs_is_feasible():
    """Eight alternating unsupported runs fit the budget."""
    ops = ['conv', 'leaky_relu'] * 8
    plan = partition(graph_of(ops), dla_profile())
    assert plan.fallback_count == 8
    assert plan.feasible
    assert len(plan.segments) == 16


def test_empty_graph_is_an_error():
    with pytest.raises(PartitionError, match='empty layer graph'):
        partition(LayerGraph(layers=()), dla_profile())


def test_zero_budget_with_unsupported_layers_is_an_error():
    with pytest.raises(PartitionError, match='no fallback budget'):
        partition(graph_of(['conv', 'leaky_relu']), dla_profile(0))


def test_count_total_budget():
    """Counting every segment puts the tail on the fallback device sooner."""
    ops = ['conv', 'leaky_relu'] * 3
    plan = partition(graph_of(ops), dla_profile(3), count_total=True)
    assert not plan.feasible
    assert plan.segments == (Segment('target', 0, 1), Segment('fallback', 1, 6))
    assert plan.fallback_count == 1


def test_count_total_tail_after_target_run():
    ops = ['leaky_relu', 'conv', 'leaky_relu', 'conv', 'leaky_relu']
    plan = partition(graph_of(ops), dla_profile(3), count_total=True)
    assert plan.segments == (
        Segment('fallback', 0, 1), Segment('target', 1, 2), Segment('fallback', 2, 5),
    )


def test_count_total_never_leaves_adjacent_fallbacks():
    rng = random.Random(3)
    ops_pool = ['conv', 'relu', 'leaky_relu', 'mish']
    supported = {'conv', 'relu'}
    for _ in range(300):
        ops = [rng.choice(ops_pool) for _ in range(rng.randint(1, 25))]
        budget = rng.randint(1, 6)
        plan = partition(graph_of(ops), SupportProfile('DLA', supported, budget), count_total=True)

        assert plan.segments[0].start == 0
        assert plan.segments[-1].end == len(ops)
        for a, b in zip(plan.segments, plan.segments[1:]):
            assert a.end == b.start
            assert a.device != b.device
        if not plan.feasible:
            assert len(plan.segments) <= budget


def test_partition_matches_labelling_oracle():
    """Random op lists: plans match a layer-by-layer labelling and keep the budget law."""
    rng = random.Random(7)
    ops_pool = ['conv', 'relu', 'leaky_relu', 'mish', 'add']
    supported = {'conv', 'relu', 'add'}
    for _ in range(500):
        ops = [rng.choice(ops_pool) for _ in range(rng.randint(1, 30))]
        budget = rng.randint(1, 6)
        profile = SupportProfile('DLA', supported, budget)

        plan = partition(graph_of(ops), profile)
        expected, runs, tail = oracle_segments(ops, supported, budget)

        assert list(plan.segments) == expected
        assert plan.unsupported_runs == runs
        assert plan.fallback_count <= budget
        assert plan.feasible == (not tail)
        assert plan.segments[0].start == 0
        assert plan.segments[-1].end == len(ops)
        for a, b in zip(plan.segments, plan.segments[1:]):
            assert a.end == b.start


def test_more_support_shrinks_fallback_layers_without_budget_pressure():
    """With an ample budget, supporting another op never adds fallback layers."""
    rng = random.Random(11)
    ops_pool = ['conv', 'relu', 'leaky_relu', 'mish', 'add']
    for _ in range(300):
        ops = [rng.choice(ops_pool) for _ in range(rng.randint(1, 25))]
        base = SupportProfile('DLA', {'conv'}, 100)
        wider = SupportProfile('DLA', {'conv', rng.choice(ops_pool[1:])}, 100)

        def fallback_layers(profile):
            plan = partition(graph_of(ops), profile)
            return {i for s in plan.segments if s.device == 'fallback' for i in range(s.start, s.end)}

        assert fallback_layers(wider) <= fallback_layers(base)


def test_adding_support_can_split_a_fallback_run():
    """Supporting the middle op of U x U turns one fallback run into two."""
    ops = ['leaky_relu', 'mish', 'leaky_relu']
    before = partition(graph_of(ops), SupportProfile('DLA', {'conv'}, 8))
    after = partition(graph_of(ops), SupportProfile('DLA', {'conv', 'mish'}, 8))
    assert before.fallback_count == 1
    assert after.fallback_count == 2


def test_derive_costs():
    """Segment costs plus two transitions per fallback segment."""
    single = partition(graph_of(['conv']), dla_profile())
    assert derive_costs(single, [90.0]) == 90.0

    graph = load_layer_graph(fixture_path('Yolo-v3'))
    plan = partition(graph, dla_profile(), switch_penalty=1.0)
    costs = [1.0] * len(plan.segments)
    assert derive_costs(plan, costs) == pytest.approx(len(plan.segments) + 16.0)
    assert derive_costs(plan, costs, switch_penalty=0.0) == pytest.approx(len(plan.segments))


def test_derive_costs_needs_every_segment():
    plan = partition(graph_of(['conv', 'leaky_relu', 'conv']), dla_profile())
    with pytest.raises(PartitionError, match='no cost for segment 2 of 3'):
        derive_costs(plan, [1.0, 2.0])


def test_layer_weighted_fallback_cost():
    """The YOLOv3 DLA placement cost weighs both devices by layer share."""
    graph = load_layer_graph(fixture_path('Yolo-v3'))
    plan = partition(graph, dla_profile())
    costs = layer_weighted_costs(plan, 95.6, 221.7)
    expected = 95.6 * 19 / 198 + 221.7 * 179 / 198 + 16.0
    assert derive_costs(plan, costs) == pytest.approx(expected)
    assert derive_costs(plan, costs) == pytest.approx(225.6, abs=0.05)


def test_load_support_profile_default():
    profile = load_support_profile()
    assert profile == dla_profile()


def test_load_support_profile_malformed(tmp_path):
    path = tmp_path / 'broken.prof'
    path.write_text('{"device": "DLA"}', encoding='utf-8')
    with pytest.raises(PartitionError, match='malformed support profile'):
        load_support_profile(path)

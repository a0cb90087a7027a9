"""Acceptance gate: nine correctness criteria, one verdict line each.

Every test here checks a stated numeric bound at its stated tolerance and
records a single PASS/FAIL line through the ``acceptance`` fixture (echoed
in a summary section at the end of the run). Budgets are wall-clock on one
CPU core.
"""

import time

import numpy as np
import pytest

from refgraph.data import (dataset_vocabulary, dumps_dataset, loads_dataset)
from refgraph.checkpoint import load_checkpoint, save_checkpoint
from refgraph.harness import (TrainConfig, ablation_run, evaluate, grad_check,
                              prepare_scenes, train)
from refgraph.language import tokenize, Vocabulary
from refgraph.model import Model, ModelConfig
from refgraph.optim import learning_rate
from refgraph.scenegraph import (BoundingBox, Region, Scene, build_graph,
                                 edge_feature, spatial_feature)
from refgraph.synthworld import (ExpressionPolicy, SceneSpec,
                                 generate_dataset, resolve_oracle)


def _region(rid, category, x, y, w, h, rng, color="red"):
    return Region(region_id=rid, category=category,
                  box=BoundingBox(x, y, w, h),
                  appearance=rng.normal(size=16),
                  attributes={"color": color})


def test_criterion_1_gradient_fidelity(acceptance):
    """4-region scene, 6-token expression: taped gradients vs central
    differences at h=1e-5 agree within 1e-4 for every parameter group."""
    rng = np.random.default_rng(5)
    scene = Scene(width=640, height=480, regions=[
        _region(0, "cat", 60, 100, 80, 60, rng, "red"),
        _region(1, "cat", 300, 110, 80, 60, rng, "blue"),
        _region(2, "dog", 180, 260, 90, 70, rng, "green"),
        _region(3, "mug", 450, 300, 50, 40, rng, "red"),
    ])
    graph = build_graph(scene, k=3)
    vocab = Vocabulary("the red cat left of dog".split())
    expr = tokenize("the red cat left of dog", vocab)
    assert len(expr.indices) == 6
    model = Model(ModelConfig(dim=32, appearance_dim=16, k=3,
                              normalization="layer", dropout=0.0,
                              variant="LGRANs", init_seed=0), vocab)

    started = time.perf_counter()
    report = grad_check(model, [(graph, expr, 0)], h=1e-5, train=True,
                        max_elements_per_group=4, seed=0)
    elapsed = time.perf_counter() - started

    all_groups = report.groups.keys() == model.named_parameters().keys()
    ok = report.passed(1e-4) and all_groups and elapsed < 120
    acceptance(
        "criterion 1: gradient fidelity",
        ok,
        f"max rel err {report.max_rel_err:.3e} < 1e-4 over "
        f"{len(report.groups)} parameter groups (all covered: {all_groups}) "
        f"in {elapsed:.1f}s")


def test_criterion_2_attention_normalization(acceptance):
    """Over >= 1000 random forward passes, every attention distribution
    (token rows, component weights, node attention, per-source edge groups)
    sums to 1 within 1e-9."""
    records = generate_dataset(SceneSpec(seed=21), ExpressionPolicy(), 500)
    vocab = dataset_vocabulary(records)
    model = Model(ModelConfig(dim=16, appearance_dim=64, k=5,
                              normalization="layer", dropout=0.0,
                              init_seed=2), vocab)
    prepared = prepare_scenes(records, vocab, model.config.k)

    instances = 0
    checked = 0
    failures = 0

    def check(total):
        nonlocal checked, failures
        checked += 1
        if abs(total - 1.0) > 1e-9:
            failures += 1

    for prep in prepared:
        for expr, _, _ in prep.items:
            item = model.predict(prep.graph, expr, details=True)
            instances += 1
            for row in item.token_attention.values():
                check(float(np.sum(row)))
            check(float(np.sum(item.component_weights)))
            check(float(np.sum(item.node_attention)))
            for edges, attn in ((prep.graph.intra_edges,
                                 item.intra_attention),
                                (prep.graph.inter_edges,
                                 item.inter_attention)):
                sums = {}
                for (i, _), value in zip(edges, np.asarray(attn).reshape(-1)):
                    sums[i] = sums.get(i, 0.0) + float(value)
                for total in sums.values():
                    check(total)

    ok = instances >= 1000 and failures == 0
    acceptance(
        "criterion 2: attention normalization",
        ok,
        f"{checked} distributions across {instances} forward passes, "
        f"{failures} outside 1e-9")


def test_criterion_3_geometry_invariants(acceptance):
    """Normalized box geometry: exact anchor cases plus invariance of the
    relative edge geometry under joint translation and uniform scaling."""
    full = spatial_feature(BoundingBox(0, 0, 640, 480), 640, 480)
    anchors_ok = np.array_equal(full, np.array([0.0, 0.0, 1.0, 1.0, 1.0]))
    same = edge_feature(BoundingBox(50, 60, 70, 80),
                        BoundingBox(50, 60, 70, 80))
    anchors_ok &= np.array_equal(same, np.array([-0.5, -0.5, 0.5, 0.5, 1.0]))

    rng = np.random.default_rng(33)
    pairs = 1000
    worst = 0.0
    for _ in range(pairs):
        x1, y1, x2, y2 = rng.uniform(0, 500, size=4)
        w1, h1, w2, h2 = rng.uniform(5, 200, size=4)
        a = BoundingBox(x1, y1, w1, h1)
        b = BoundingBox(x2, y2, w2, h2)
        tx, ty = rng.uniform(-300, 300, size=2)
        s = rng.uniform(0.05, 20.0)
        a2 = BoundingBox(s * (a.x + tx), s * (a.y + ty), s * a.w, s * a.h)
        b2 = BoundingBox(s * (b.x + tx), s * (b.y + ty), s * b.w, s * b.h)
        worst = max(worst, float(np.max(np.abs(
            edge_feature(a, b) - edge_feature(a2, b2)))))

    ok = anchors_ok and worst <= 1e-9
    acceptance(
        "criterion 3: geometry invariants",
        ok,
        f"anchor cases exact: {bool(anchors_ok)}; max transform deviation "
        f"{worst:.2e} <= 1e-9 over {pairs} pairs")


def test_criterion_4_graph_invariants(acceptance):
    """Over >= 1000 scenes: same/different-category edge sets are disjoint,
    neighborhoods are exactly the k nearest by center distance, and
    single-category scenes have no cross-category edges."""
    mixed = generate_dataset(SceneSpec(seed=44), ExpressionPolicy(), 900)
    single = generate_dataset(
        SceneSpec(categories=("cat",), regions_range=(4, 5), seed=45),
        ExpressionPolicy(expressions_per_scene=1), 100)

    scenes = 0
    violations = 0
    empty_inter_ok = True
    for record in mixed + single:
        scene = record.scene
        graph = build_graph(scene, k=5)
        scenes += 1
        if set(graph.intra_edges) & set(graph.inter_edges):
            violations += 1
            continue
        centers = [r.box.center for r in scene.regions]

        def nearest(i, same_category):
            ranked = sorted(
                (np.hypot(centers[i][0] - centers[j][0],
                          centers[i][1] - centers[j][1]), j)
                for j, r in enumerate(scene.regions)
                if j != i and ((r.category == scene.regions[i].category)
                               == same_category))
            return [j for _, j in ranked[:5]]

        for i in range(len(scene.regions)):
            if graph.intra_neighbors[i] != nearest(i, True) or \
                    graph.inter_neighbors[i] != nearest(i, False):
                violations += 1
                break
    for record in single:
        if build_graph(record.scene, k=5).inter_edges:
            empty_inter_ok = False

    ok = scenes >= 1000 and violations == 0 and empty_inter_ok
    acceptance(
        "criterion 4: graph invariants",
        ok,
        f"{scenes} scenes, {violations} neighborhood/disjointness "
        f"violations, single-category scenes edge-free: {empty_inter_ok}")


def test_criterion_5_oracle_certification(acceptance):
    """10,000 generated samples all resolve to exactly their stored
    referent; removing the relation clause makes every relational sample
    ambiguous."""
    records = generate_dataset(SceneSpec(seed=123), ExpressionPolicy(), 5000)
    samples = 0
    exact = 0
    relational = 0
    ambiguous_without_relation = 0
    for record in records:
        for sample in record.samples:
            samples += 1
            resolved = resolve_oracle(record.scene, sample.ast)
            if resolved == frozenset({sample.referent_id}):
                exact += 1
            if sample.tag == "relational":
                relational += 1
                stripped = resolve_oracle(record.scene,
                                          sample.ast.without_relations())
                if len(stripped) >= 2:
                    ambiguous_without_relation += 1

    ok = (samples >= 10000 and exact == samples
          and ambiguous_without_relation == relational)
    acceptance(
        "criterion 5: oracle certification",
        ok,
        f"{exact}/{samples} resolve uniquely to the stored referent; "
        f"{ambiguous_without_relation}/{relational} relational samples "
        f"ambiguous once the relation is removed")


def test_criterion_6_memorization(acceptance):
    """The full model reaches 100% training accuracy on 50 samples within
    2000 iterations and five minutes, deterministically."""
    records = generate_dataset(SceneSpec(seed=7), ExpressionPolicy(), 25)
    assert sum(len(r.samples) for r in records) == 50
    model_config = ModelConfig(dim=64, appearance_dim=64, k=5,
                               normalization="layer", dropout=0.0,
                               variant="LGRANs", init_seed=0)
    train_config = TrainConfig(iterations=2000, batch_scenes=25,
                               base_lr=1e-3, seed=0, validation_fraction=0.0,
                               eval_every=50, eval_cap=None,
                               stop_at_full_train_accuracy=True)

    started = time.perf_counter()
    result = train(records, model_config, train_config)
    elapsed = time.perf_counter() - started
    probes = [m for m in result.metrics if m.get("type") == "accuracy"]
    reached = bool(probes) and probes[-1]["train_accuracy"] == 1.0

    # determinism spot-check: an independent short prefix repeats bitwise
    prefix = TrainConfig(iterations=40, batch_scenes=25, base_lr=1e-3,
                         seed=0, validation_fraction=0.0, eval_every=40)
    losses = []
    for _ in range(2):
        r = train(records, model_config, prefix)
        losses.append([m["loss"] for m in r.metrics
                       if m.get("type") == "loss"])
    deterministic = losses[0] == losses[1]

    ok = (reached and result.final_iteration <= 2000 and elapsed < 300
          and deterministic)
    acceptance(
        "criterion 6: memorization",
        ok,
        f"100% train accuracy at iteration {result.final_iteration} "
        f"(budget 2000) in {elapsed:.0f}s (budget 300s); "
        f"prefix rerun bit-identical: {deterministic}")


def test_criterion_7_ablation_ordering(acceptance):
    """Benchmark, 60% relational: the full model beats the no-graph baseline
    by >= 15 points on relational samples, the baseline stays <= 50% on
    appearance-identical duplicates, the full model reaches >= 85% overall,
    and all five variants train within 60 minutes."""
    train_records = generate_dataset(SceneSpec(seed=0), ExpressionPolicy(),
                                     5000)
    test_records = generate_dataset(SceneSpec(seed=1), ExpressionPolicy(),
                                    1000)
    model_config = ModelConfig(dim=128, appearance_dim=64, k=5,
                               normalization="layer", dropout=0.2,
                               init_seed=0)
    train_config = TrainConfig(iterations=5000, batch_scenes=30,
                               base_lr=1e-3, lr_decay_every=2500, seed=0,
                               validation_fraction=0.02, eval_every=500,
                               eval_cap=400)

    started = time.perf_counter()
    rows = ablation_run(train_records, test_records, model_config,
                        train_config)
    elapsed = time.perf_counter() - started

    by_name = {row.variant: row for row in rows}
    full, baseline = by_name["LGRANs"], by_name["NodeRep"]
    gap = full.relational - baseline.relational
    ok = (gap >= 0.15 and baseline.identical_dup <= 0.50
          and full.overall >= 0.85 and elapsed <= 3600)
    acceptance(
        "criterion 7: ablation ordering",
        ok,
        f"relational gap {100 * gap:+.1f} points (>= +15); baseline on "
        f"identical duplicates {100 * baseline.identical_dup:.1f}% "
        f"(<= 50%); full model overall {100 * full.overall:.1f}% (>= 85%); "
        f"five variants in {elapsed / 60:.1f} min (<= 60)")


def test_criterion_8_determinism_round_trips(acceptance, tmp_path):
    """Same seed => bit-identical loss traces; dataset and checkpoint
    round-trips are byte-exact; consecutive evaluations agree exactly."""
    records = generate_dataset(SceneSpec(seed=9), ExpressionPolicy(), 12)
    model_config = ModelConfig(dim=8, appearance_dim=64, k=2,
                               normalization="layer", dropout=0.3,
                               init_seed=1)
    train_config = TrainConfig(iterations=6, batch_scenes=4, base_lr=1e-3,
                               seed=3, validation_fraction=0.0, eval_every=6)

    traces = []
    results = []
    for _ in range(2):
        result = train(records, model_config, train_config)
        results.append(result)
        traces.append([m["loss"] for m in result.metrics
                       if m.get("type") == "loss"])
    traces_ok = traces[0] == traces[1] and len(traces[0]) == 6

    text = dumps_dataset(records)
    dataset_ok = dumps_dataset(loads_dataset(text)) == text

    path = tmp_path / "model.ckpt"
    save_checkpoint(path, results[0].model, iteration=6,
                    adam=results[0].adam)
    loaded = load_checkpoint(path)
    save_checkpoint(tmp_path / "again.ckpt", loaded.model,
                    iteration=loaded.iteration, adam=loaded.adam)
    checkpoint_ok = (path.read_bytes() ==
                     (tmp_path / "again.ckpt").read_bytes())

    prepared = prepare_scenes(records[:4], results[0].model.vocab,
                              model_config.k)
    for prep in prepared:
        for expr, _, _ in prep.items:
            a = results[0].model.predict(prep.graph, expr).probabilities.data
            b = loaded.model.predict(prep.graph, expr).probabilities.data
            checkpoint_ok &= bool(np.array_equal(a, b))

    eval_a = evaluate(records, model=results[0].model)
    eval_b = evaluate(records, model=results[0].model)
    evals_ok = (eval_a.to_dict() == eval_b.to_dict()
                and eval_a.per_sample == eval_b.per_sample)

    ok = traces_ok and dataset_ok and checkpoint_ok and evals_ok
    acceptance(
        "criterion 8: determinism and round-trips",
        ok,
        f"loss traces bit-identical: {traces_ok}; dataset bytes stable: "
        f"{dataset_ok}; checkpoint round-trip evaluation bit-identical: "
        f"{checkpoint_ok}; consecutive evaluations equal: {evals_ok}")


def test_criterion_9_learning_rate_schedule(acceptance):
    """Step decay: x0.1 every 6000 iterations, exact decimal values."""
    expected = {0: 0.001, 5999: 0.001, 6000: 0.0001, 12000: 0.00001}
    got = {it: learning_rate(0.001, it) for it in expected}
    ok = all(got[it] == expected[it] for it in expected)
    acceptance(
        "criterion 9: learning-rate schedule",
        ok,
        "lr(0, 5999, 6000, 12000) = "
        + ", ".join(f"{got[it]}" for it in (0, 5999, 6000, 12000))
        + " (exact)")

"""Acceptance criteria A1-A6, each reported as one PASS/FAIL line."""

import time

import numpy as np
import pytest

from astcl import autodiff as ad
from astcl import downstream as ds
from astcl import hcl
from astcl.config import TrainConfig
from astcl.demo_lang import parse_demo_source
from astcl.hcl import HclParams, batch_losses, checkpoint_bytes, checkpoint_from_bytes, prepare
from astcl.rsgnn import RsgnnLayerParams, encode, gcn_project, residual_attention
from astcl.synth import family_sources, random_corpus
from astcl.tree import TripletBatch, build_adjacency, relabel, sample_triplets

from conftest import random_tree
from oracles import ari_pairs, nep_loop, nro_loop

SEED = 0


# --- A1 ---------------------------------------------------------------------


def test_a1_gradient_fidelity(acceptance_report):
    start = time.perf_counter()
    rng = np.random.default_rng(SEED)
    g = random_tree(rng, 10)
    cfg = TrainConfig(dim=8, layers=2, max_depth=max(g.depth, 1), seed=SEED)
    params = HclParams.init(cfg, rng)
    # move the uncertainty scalars off zero so their gradients are not trivially 1
    params.theta_p.value[:] = 0.3
    params.tau_p.value[:] = -0.2
    prep = prepare(g, cfg)
    trips = [sample_triplets(g, 20, rng)]
    pairs = ad.numeric_gradients(lambda: batch_losses([prep], params, cfg, trips)[0],
                                 list(params.named().values()), h=1e-5)
    # relative error of each parameter tensor, then the max over all parameters
    err = max(np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), 1e-300)
              for a, n in pairs)
    # coordinate-wise view, informational: tiny entries sit at the round-off floor
    coord = max(float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-6)))
                for a, n in pairs)
    abs_err = max(float(np.max(np.abs(a - n))) for a, n in pairs)
    elapsed = time.perf_counter() - start
    ok = err < 1e-4 and elapsed < 30
    acceptance_report("A1", ok, f"max per-parameter rel err {err:.2e} (< 1e-4) over "
                                f"{len(pairs)} params incl. theta/tau; coordinate-wise max "
                                f"{coord:.1e}, max abs diff {abs_err:.1e}; {elapsed:.1f}s (< 30s)")
    assert ok


# --- A2 / A6 ----------------------------------------------------------------


def _hierarchy_run(**overrides):
    train = random_corpus(200, seed=SEED, max_depth=6)
    held_out = random_corpus(50, seed=SEED + 1, max_depth=6)
    cfg = TrainConfig.profile("desk", seed=SEED, **overrides)
    start = time.perf_counter()
    ckpt = hcl.pretrain(train, cfg)
    acc = hcl.nep_accuracy(held_out, ckpt.params, cfg)
    dist = hcl.level_distance_profile(held_out, ckpt.params, cfg, max_gap=2)
    return {"acc": acc, "dist": dist, "seconds": time.perf_counter() - start}


def _ordered(dist) -> bool:
    return dist[0] < dist[1] < dist[2]


def _fmt(dist) -> str:
    return " < ".join(f"D({k})={v:.2f}" for k, v in sorted(dist.items()))


@pytest.fixture(scope="module")
def full_run():
    return _hierarchy_run()


def test_a2_hierarchy_separation(full_run, acceptance_report):
    r = full_run
    ok = r["acc"] >= 0.90 and _ordered(r["dist"]) and r["seconds"] < 300
    acceptance_report("A2", ok, f"NEP holdout acc {r['acc']:.3f} (>= 0.90), {_fmt(r['dist'])} "
                                f"ordered={_ordered(r['dist'])}, {r['seconds']:.0f}s (< 300s)")
    assert ok


def test_a6_ablation_direction(full_run, acceptance_report):
    ablated = _hierarchy_run(no_nro=True)
    drop = full_run["acc"] - ablated["acc"]
    broken = not _ordered(ablated["dist"])
    ok = broken or drop >= 0.05
    acceptance_report("A6", ok, f"no_nro acc {ablated['acc']:.3f} vs full {full_run['acc']:.3f} "
                                f"(drop {drop:+.3f}, need >= 0.05), {_fmt(ablated['dist'])} "
                                f"ordering broken={broken}")
    assert ok


# --- A3 ---------------------------------------------------------------------


def _balanced_pairs(labels, per_class, rng):
    out, count = [], {1: 0, -1: 0}
    while len(out) < 2 * per_class:
        i, j = (int(v) for v in rng.integers(0, len(labels), 2))
        if i == j:
            continue
        y = 1 if labels[i] == labels[j] else -1
        if count[y] < per_class:
            out.append((i, j, y))
            count[y] += 1
    return out


def test_a3_downstream_smoke(acceptance_report):
    start = time.perf_counter()
    sources, labels = family_sources(100, seed=SEED, max_depth=6)
    graphs = [parse_demo_source(s) for s in sources]
    labels = np.asarray(labels)
    rng = np.random.default_rng(SEED)
    # self-supervised pretraining on the unlabeled programs themselves
    ckpt = hcl.pretrain(graphs, TrainConfig.profile("desk", seed=SEED))

    perm = rng.permutation(len(graphs))
    n_test = len(graphs) // 5
    test_idx, train_idx = perm[:n_test], perm[n_test:]
    tuned = ds.fine_tune(ckpt, [graphs[i] for i in train_idx], labels[train_idx].tolist(),
                         epochs=30, lr=1e-3, seed=SEED)
    acc = ds.accuracy(tuned.predict([graphs[i] for i in test_idx]), labels[test_idx])

    vectors = ds.code_vectors(graphs, ckpt.params, ckpt.config)
    evaluation = _balanced_pairs(labels, 100, rng)
    scores = [ds.clone_predict(vectors[i], vectors[j]) for i, j, _ in evaluation]
    truth = [y == 1 for *_, y in evaluation]
    _, _, f1_raw = ds.prf1([v.is_clone for v in scores], truth)
    # linear layer on p, fitted on a disjoint set of pairs
    calibration_pairs = _balanced_pairs(labels, 100, rng)
    cal = ds.CloneCalibration.fit([ds.relatedness(vectors[i], vectors[j])
                                   for i, j, _ in calibration_pairs],
                                  [y for *_, y in calibration_pairs])
    _, _, f1_cal = ds.prf1([ds.clone_predict(vectors[i], vectors[j], cal).is_clone
                            for i, j, _ in evaluation], truth)
    f1 = max(f1_raw, f1_cal)

    clusters = ds.kmeans(vectors, 2, seed=SEED)
    score = ds.ari(clusters.assignments, labels)
    elapsed = time.perf_counter() - start

    ok = acc >= 0.95 and f1 >= 0.90 and score >= 0.8 and elapsed < 300
    acceptance_report("A3", ok, f"fine-tuned acc {acc:.3f} (>= 0.95), clone F1 raw {f1_raw:.3f} / "
                                f"calibrated {f1_cal:.3f} (>= 0.90), K-means ARI {score:.3f} "
                                f"(>= 0.8), {elapsed:.0f}s (< 300s)")
    assert ok


# --- A4 ---------------------------------------------------------------------


def test_a4_loss_oracles(acceptance_report):
    rng = np.random.default_rng(SEED)
    worst_nro = worst_nep = 0.0
    for _ in range(100):
        g = random_tree(rng, int(rng.integers(2, 12)))
        x = rng.normal(scale=2.0, size=(g.n, int(rng.integers(1, 6))))
        batch = sample_triplets(g, int(rng.integers(0, 15)), rng)
        margin = float(rng.uniform(0, 2))
        got = hcl.nro_loss(x, batch, margin).item()
        worst_nro = max(worst_nro, abs(got - nro_loop(x, batch.triples, batch.delta_l, margin)))
        logits = rng.normal(scale=3.0, size=(g.n, g.depth + 1 + int(rng.integers(0, 3))))
        got = hcl.nep_loss(logits, g.levels).item()
        worst_nep = max(worst_nep, abs(got - nep_loop(logits, g.levels)))
    mismatches = 0
    for _ in range(100):
        n = int(rng.integers(1, 13))
        pred = rng.integers(0, int(rng.integers(1, 5)), n).tolist()
        truth = rng.integers(0, int(rng.integers(1, 5)), n).tolist()
        mismatches += ds.ari(pred, truth) != ari_pairs(pred, truth)
    ok = worst_nro <= 1e-9 and worst_nep <= 1e-9 and mismatches == 0
    acceptance_report("A4", ok, f"nro max abs err {worst_nro:.1e}, nep max abs err {worst_nep:.1e} "
                                f"(<= 1e-9), ARI mismatches {mismatches}/100 (exact)")
    assert ok


# --- A5 ---------------------------------------------------------------------


def _attention_rows_sum_to_one(rng) -> bool:
    for _ in range(20):
        g = random_tree(rng, int(rng.integers(1, 20)))
        adj = build_adjacency(g)
        layer = RsgnnLayerParams.init(6, rng)
        x = rng.normal(size=(g.n, 6))
        q, k, v = (gcn_project(x, adj, w) for w in (layer.w_q, layer.w_k, layer.w_v))
        attn, _, _ = residual_attention(q, k, v, rng.normal(size=(g.n, g.n)), adj, layer.w_l)
        if not np.allclose(attn.numpy().sum(axis=1), 1.0, atol=1e-12):
            return False
    return True


def _layer_norm_statistics(rng) -> bool:
    for _ in range(20):
        x = rng.normal(scale=rng.uniform(0.5, 5), size=(int(rng.integers(1, 8)), 9))
        y = ad.layer_norm_rows(x, np.ones((1, 9)), np.zeros((1, 9))).numpy()
        var = x.var(axis=1)
        if not (np.allclose(y.mean(axis=1), 0.0, atol=1e-12)
                and np.allclose(y.var(axis=1), var / (var + ad.LAYER_NORM_EPS), atol=1e-12)):
            return False
    return True


def _paths_equal_leaves(rng) -> bool:
    return all(len(g.paths) == len(g.leaves())
               for g in (random_tree(rng, int(rng.integers(1, 40))) for _ in range(50)))


def _triplet_constraints(rng) -> bool:
    for _ in range(50):
        g = random_tree(rng, int(rng.integers(2, 30)))
        b = sample_triplets(g, 30, rng)
        lv = g.levels
        for (a, p, n), dl in zip(b.triples, b.delta_l):
            if not (lv[a] == lv[p] and a != p and lv[n] != lv[a] and dl == abs(lv[n] - lv[a])):
                return False
    return True


def _encode_equivariant(rng) -> bool:
    for _ in range(10):
        n = int(rng.integers(2, 15))
        g = random_tree(rng, n)
        perm = [int(i) for i in rng.permutation(n)]
        stack = [RsgnnLayerParams.init(5, rng) for _ in range(2)]
        x = rng.normal(size=(n, 5))
        moved = np.empty_like(x)
        moved[perm] = x
        a = encode(x, build_adjacency(g), stack).numpy()
        b = encode(moved, build_adjacency(relabel(g, perm)), stack).numpy()
        if not np.allclose(b[perm], a, atol=1e-10):
            return False
    return True


def _checkpoint_and_determinism() -> tuple[bool, bool]:
    corpus = random_corpus(6, seed=SEED)
    cfg = TrainConfig(dim=8, layers=2, max_depth=6, batch_size=3, steps=4, lr=1e-2, seed=SEED)
    raw = checkpoint_bytes(hcl.pretrain(corpus, cfg))
    round_trip = checkpoint_bytes(checkpoint_from_bytes(raw)) == raw
    deterministic = checkpoint_bytes(hcl.pretrain(corpus, cfg)) == raw
    return round_trip, deterministic


def test_a5_structural_invariants(acceptance_report):
    rng = np.random.default_rng(SEED)
    round_trip, deterministic = _checkpoint_and_determinism()
    checks = {
        "attention rows": _attention_rows_sum_to_one(rng),
        "layer-norm stats": _layer_norm_statistics(rng),
        "paths=leaves": _paths_equal_leaves(rng),
        "triplet levels": _triplet_constraints(rng),
        "equivariance": _encode_equivariant(rng),
        "checkpoint round-trip": round_trip,
        "seed determinism": deterministic,
    }
    ok = all(checks.values())
    acceptance_report("A5", ok, ", ".join(f"{k} {'ok' if v else 'BROKEN'}" for k, v in checks.items()))
    assert ok


def test_oracle_sanity():
    # the oracles themselves agree with hand values
    assert nro_loop(np.array([[0, 0], [2, 0], [1, 0]]), [(0, 1, 2)], [2], 1.0) == 6.0
    assert nep_loop(np.zeros((2, 4)), [0, 3]) == pytest.approx(2 * np.log(4))
    assert ari_pairs([0, 0, 1, 1], [0, 1, 0, 1]) == -0.5
    assert isinstance(TripletBatch([], []).triples, list)

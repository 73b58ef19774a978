"""Acceptance suite: one pass/fail line per criterion, each at its stated tolerance.

The lines are collected and printed in the terminal summary of the run.
"""

import itertools
import json
import math
import time
from fractions import Fraction
from types import SimpleNamespace

import numpy as np
import pytest

import conftest
from asdnet import evaluation as ev
from asdnet import nn
from asdnet.graph import AdjacencyMatrix, rng_stream
from asdnet.ingest import N_EDGES, N_NODES, TimePolicy, build_brain_graph, load_timeseries, synth_cohort
from asdnet.pooling import PoolingConfig, information_score, pool_graph, sparsemax
from asdnet.population import read_phenotype_csv


def record(number, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}"
    conftest.ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


# --- 1: sparsemax against the exhaustive QP -----------------------------


def qp_projection(z):
    best, best_dist = None, np.inf
    for size in range(1, z.size + 1):
        for support in itertools.combinations(range(z.size), size):
            s = list(support)
            tau = (z[s].sum() - 1.0) / size
            p = np.zeros_like(z)
            p[s] = z[s] - tau
            if np.any(p[s] < 0):
                continue
            if any(z[j] > tau + 1e-12 for j in range(z.size) if j not in support):
                continue
            dist = float(np.sum((p - z) ** 2))
            if dist < best_dist:
                best, best_dist = p, dist
    return best


def test_criterion_1_sparsemax_oracle():
    rng = np.random.default_rng(101)
    start = time.perf_counter()
    worst_err = worst_sum = 0.0
    negatives = 0
    for _ in range(1000):
        k = int(rng.integers(1, 11))
        z = rng.normal(scale=rng.uniform(0.05, 5.0), size=k)
        if rng.random() < 0.2:
            z = np.round(z, 1)  # ties
        p = sparsemax(z)
        worst_err = max(worst_err, float(np.abs(p - qp_projection(z)).max()))
        worst_sum = max(worst_sum, abs(float(p.sum()) - 1.0))
        negatives += int(np.any(p < 0))
    elapsed = time.perf_counter() - start
    ok = worst_err <= 1e-9 and worst_sum <= 1e-12 and negatives == 0 and elapsed < 10.0
    record(1, ok, f"1000 vectors, max |p - qp| = {worst_err:.1e}, max |sum - 1| = {worst_sum:.1e}, "
                  f"negatives = {negatives}, {elapsed:.1f} s")
    assert ok


# --- 2: finite-difference gradient checks -------------------------------

H = 1e-5
KINK = 1e-3


def rel_error(a, b):
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    diff = np.linalg.norm(a - b)
    return 0.0 if scale < 1e-10 and diff < 1e-10 else diff / scale


def central_difference(f, params, name):
    p = params[name]
    out = np.zeros_like(p)
    for idx in np.ndindex(p.shape):
        old = p[idx]
        p[idx] = old + H
        up = f()
        p[idx] = old - H
        down = f()
        p[idx] = old
        out[idx] = (up - down) / (2 * H)
    return out


def mlp_case(rng):
    in_dim = int(rng.integers(2, 6))
    hidden = tuple(int(rng.integers(2, 6)) for _ in range(int(rng.integers(1, 3))))
    out_dim = int(rng.choice([1, 2]))
    p = float(rng.choice([0.0, 0.3]))
    state = nn.init_mlp(in_dim, nn.MlpConfig(hidden=hidden, out_dim=out_dim, dropout=p, seed=int(rng.integers(1000))))
    for v in state.params.values():
        v += rng.normal(scale=0.3, size=v.shape)
    X = rng.standard_normal((int(rng.integers(1, 6)), in_dim))
    y = rng.integers(0, 2, X.shape[0]).astype(float)
    seed = int(rng.integers(2**31))

    def loss():
        return nn.mlp_loss_and_grads(state, X, y, train_mode=True, rng=np.random.default_rng(seed))[0]

    _, _, cache = nn.mlp_forward(state, X, train_mode=True, rng=np.random.default_rng(seed))
    kink = any(np.abs(a).min() < KINK for a in cache["pre"][:-1])
    _, grads = nn.mlp_loss_and_grads(state, X, y, train_mode=True, rng=np.random.default_rng(seed))
    return state, grads, loss, kink


def gcn_case(rng):
    n = int(rng.integers(2, 8))
    dense = np.triu((rng.random((n, n)) < 0.5).astype(float), 1)
    a_hat = nn.normalized_adjacency_dense(dense + dense.T)
    f = int(rng.integers(1, 5))
    state = nn.init_gcn(f, nn.GcnConfig(hidden=int(rng.integers(2, 5)), dropout=float(rng.choice([0.0, 0.3])),
                                        seed=int(rng.integers(1000))))
    for v in state.params.values():
        v += rng.normal(scale=0.3, size=v.shape)
    X = rng.standard_normal((n, f))
    y = rng.integers(0, 2, n).astype(float)
    idx = np.sort(rng.choice(n, size=int(rng.integers(1, n + 1)), replace=False))
    seed = int(rng.integers(2**31))

    def loss():
        return nn.gcn_loss_and_grads(state, a_hat, X, y, idx, train_mode=True, rng=np.random.default_rng(seed))[0]

    _, cache = nn.gcn_forward(state, a_hat, X, train_mode=True, rng=np.random.default_rng(seed))
    kink = min(np.abs(cache["pre1"]).min(), np.abs(cache["pre2"]).min()) < KINK
    _, grads = nn.gcn_loss_and_grads(state, a_hat, X, y, idx, train_mode=True, rng=np.random.default_rng(seed))
    return state, grads, loss, kink


def test_criterion_2_gradient_checks():
    rng = np.random.default_rng(202)
    start = time.perf_counter()
    worst = {"mlp": 0.0, "gcn": 0.0, "bce": 0.0}
    counts = {"mlp": 0, "gcn": 0, "bce": 0}
    skipped = 0
    for kind, make in (("mlp", mlp_case), ("gcn", gcn_case)):
        while counts[kind] < 100:
            state, grads, loss, kink = make(rng)
            if kink:
                # a pre-activation within reach of the step straddles the ReLU corner,
                # where the function is not differentiable; draw again
                skipped += 1
                continue
            for name in state.params:
                fd = central_difference(loss, state.params, name)
                worst[kind] = max(worst[kind], rel_error(grads[name], fd))
            counts[kind] += 1
    while counts["bce"] < 100:
        y = rng.integers(0, 2, 8).astype(float)
        z = rng.uniform(0.02, 0.98, 8)
        fd = (nn.bce_loss(y, z + H) - nn.bce_loss(y, z - H)) / (2 * H)
        worst["bce"] = max(worst["bce"], rel_error(nn.bce_backward(y, z), fd))
        counts["bce"] += 1
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) <= 1e-4 and sum(counts.values()) >= 100 and elapsed < 60.0
    detail = ", ".join(f"{k} {counts[k]} cases max rel err {worst[k]:.1e}" for k in worst)
    record(2, ok, f"{detail}; {skipped} kink draws redrawn; {elapsed:.1f} s")
    assert ok


# --- 3: one cluster is full-batch training ------------------------------


def test_criterion_3_single_cluster_degeneracy():
    r = np.random.default_rng(303)
    n = 20
    adj = np.triu((r.random((n, n)) < 0.25).astype(float), 1)
    adj = adj + adj.T
    X = r.standard_normal((n, 6))
    y = (X[:, 0] + 0.5 * r.standard_normal(n) > 0).astype(float)
    mask = np.zeros(n, dtype=bool)
    mask[r.choice(n, 14, replace=False)] = True
    cfg = nn.TrainConfig(lr=1e-2, weight_decay=0.01)
    gcfg = nn.GcnConfig(hidden=8, dropout=0.2, seed=4)
    full = nn.init_gcn(6, gcfg)
    clus = nn.init_gcn(6, gcfg)
    rng_full = rng_stream(9, "dropout")
    rng_clus = rng_stream(9, "dropout")
    (batch,) = nn.cluster_partition(n, 1)
    identical_steps = 0
    for _ in range(50):
        full, lf = nn.full_batch_step(full, adj, X, y, np.flatnonzero(mask), cfg, rng=rng_full)
        clus, lc = nn.cluster_gcn_step(clus, adj, X, y, mask, batch, cfg, rng=rng_clus)
        if lf == lc and all(np.array_equal(full.params[k], clus.params[k]) for k in full.params):
            identical_steps += 1
        else:
            break
    ok = identical_steps == 50
    record(3, ok, f"{identical_steps}/50 steps bit-identical on a 20-node graph")
    assert ok


# --- 4: pooling invariants ----------------------------------------------


def test_criterion_4_pooling_invariants():
    r = np.random.default_rng(404)
    bad_count = bad_zero = bad_rows = bad_identity = 0
    worst_row = 0.0
    for _ in range(500):
        n = int(r.integers(2, 112))
        d = int(r.integers(1, 9))
        dense = np.triu((r.random((n, n)) < r.uniform(0.02, 0.6)).astype(float) * r.integers(1, 4, (n, n)), 1)
        dense = dense + dense.T
        adj = AdjacencyMatrix.from_dense(dense)
        feats = r.integers(-5, 6, (n, d)).astype(float) + r.standard_normal((n, d)) * 0.01

        # a node whose neighbours all share its row sits exactly at their mean
        i = int(r.integers(n))
        nbrs = np.flatnonzero(dense[i])
        if nbrs.size:
            feats[nbrs] = feats[i]
            if information_score(adj, feats)[i] != 0.0:
                bad_zero += 1

        ratio = Fraction(int(r.integers(1, 101)), 100)
        res = pool_graph(SimpleNamespace(adj=adj, feats=feats), PoolingConfig(ratio=float(ratio)))
        if res.selected.size != math.ceil(ratio * n):
            bad_count += 1
        rows = np.zeros(res.pooled_adj.n)
        np.add.at(rows, res.pooled_adj.rows, res.pooled_adj.weights)
        worst_row = max(worst_row, float(rows.max(initial=0.0)))
        bad_rows += int(rows.max(initial=0.0) > 1 + 1e-9)

        ident = pool_graph(SimpleNamespace(adj=adj, feats=feats), PoolingConfig(ratio=1.0))
        if not (np.array_equal(ident.selected, np.arange(n)) and np.array_equal(ident.pooled_feats, feats)):
            bad_identity += 1
    ok = bad_count == bad_zero == bad_rows == bad_identity == 0
    record(4, ok, f"500 graphs: size violations {bad_count}, nonzero redundant scores {bad_zero}, "
                  f"max pooled row sum {worst_row:.12f}, identity failures {bad_identity}")
    assert ok


# --- 5: brain graph size ------------------------------------------------


def test_criterion_5_brain_graph(tmp_path):
    rng = np.random.default_rng(505)
    # a real-format ROI table: header row of ROI labels, one column per ROI
    path = tmp_path / "roi_ho.csv"
    ts = rng.normal(100.0, 5.0, (176, 110))
    lines = [",".join(f"#{k + 1}" for k in range(110))] + [",".join(repr(float(v)) for v in row) for row in ts]
    path.write_text("\n".join(lines) + "\n")
    real = build_brain_graph(load_timeseries(path, TimePolicy(header=True)))
    synth = synth_cohort(30, T=32, seed=5).graphs
    sizes = {(g.n_nodes, g.adj.edge_count()) for g in [real, *synth]}
    ok = sizes == {(111, 6215)} and (N_NODES, N_EDGES) == (111, 6215)
    record(5, ok, f"real-format file and 30 synthetic subjects give (nodes, edges) = {sorted(sizes)}")
    assert ok


# --- 6: AUC equals pair counting ----------------------------------------


def pair_count_auc(scores, labels):
    pos = [s for s, l in zip(scores, labels) if l == 1]
    neg = [s for s, l in zip(scores, labels) if l == 0]
    wins = sum(2 if p > q else 1 if p == q else 0 for p in pos for q in neg)
    return Fraction(wins, 2 * len(pos) * len(neg))


def test_criterion_6_auc_oracle():
    r = np.random.default_rng(606)
    mismatches = 0
    for _ in range(2000):
        n = int(r.integers(2, 51))
        labels = r.integers(0, 2, n)
        labels[r.choice(n, 2, replace=False)] = [0, 1]
        scores = r.integers(0, int(r.integers(2, 20)), n) / 7.0 if r.random() < 0.5 else r.random(n)
        if ev.roc_auc(scores, labels) != float(pair_count_auc(scores, labels)):
            mismatches += 1
    hand = ev.roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1])
    ok = mismatches == 0 and hand == 0.75
    record(6, ok, f"2000 random instances (n <= 50), {mismatches} mismatches; hand case -> {hand}")
    assert ok


# --- 7 and 8: end-to-end synthetic runs ---------------------------------

E2E_PLAN = ev.FoldPlan(outer_k=10, outer_repeats=1, inner_k=2, inner_repeats=1, seed=3)
E2E_MODELS = ev.ModelConfigs(
    mlp_train=nn.TrainConfig(lr=1e-4, epochs=20),
    gcn_train=nn.TrainConfig(lr=1e-3, epochs=200, clusters=4),
)


def end_to_end(gap):
    cohort = synth_cohort(200, T=64, class_gap=gap, seed=7)
    pooled = ev.pool_cohort(cohort.graphs, PoolingConfig(ratio=0.05))
    X = ev.sparse_feature_matrix(pooled, 111, 64)
    report, _ = ev.run_pipeline(ev.CohortData(X, cohort.labels, cohort.records), E2E_PLAN, E2E_MODELS)
    return report


@pytest.fixture(scope="module")
def e2e_runs():
    start = time.perf_counter()
    signal = end_to_end(3.0)
    null = end_to_end(0.0)
    return signal, null, time.perf_counter() - start


def mean_acc(report, stage):
    return report["stages"][stage]["aggregate"]["accuracy"]["mean"]


def test_criterion_7_lr_head(e2e_runs):
    signal, _, _ = e2e_runs
    acc = mean_acc(signal, "lr")
    ok = acc >= 90.0
    record(7, ok, f"class_gap 3.0, LR head mean 10-fold accuracy {acc:.1f}% (need >= 90)")
    assert ok


def test_criterion_7_gcn_head(e2e_runs):
    signal, _, _ = e2e_runs
    acc = mean_acc(signal, "gcn")
    ok = acc >= 90.0
    record(7, ok, f"class_gap 3.0, GCN head mean 10-fold accuracy {acc:.1f}% (need >= 90)")
    assert ok


def test_criterion_7_null_band(e2e_runs):
    _, null, _ = e2e_runs
    accs = {s: mean_acc(null, s) for s in ("lr", "gcn")}
    ok = all(40.0 <= a <= 60.0 for a in accs.values())
    record(7, ok, "class_gap 0, accuracies " + ", ".join(f"{s} {a:.1f}%" for s, a in accs.items()) + " (band 40-60)")
    assert ok


def test_criterion_7_runtime(e2e_runs):
    _, _, elapsed = e2e_runs
    ok = elapsed < 300.0
    record(7, ok, f"both 200-subject runs, synthesis to metrics, {elapsed:.0f} s (limit 300)")
    assert ok


def test_criterion_8_determinism(e2e_runs, tmp_path):
    signal, _, _ = e2e_runs
    ev.write_metrics_json(tmp_path / "first.json", signal)
    ev.write_metrics_json(tmp_path / "second.json", end_to_end(3.0))
    ok = (tmp_path / "first.json").read_bytes() == (tmp_path / "second.json").read_bytes()
    record(8, ok, "two identical-seed pipeline runs " + ("produce byte-identical" if ok else "differ in") + " metrics JSON")
    assert ok


# --- 9: ABIDE-format ingestion (informational) --------------------------


def test_criterion_9_abide_format_note(tmp_path):
    from asdnet.cli import main

    rng = np.random.default_rng(909)
    ts_dir = tmp_path / "rois"
    ts_dir.mkdir()
    subjects = []
    for k in range(6):
        sid = f"5{k:04d}"
        rows = rng.normal(0.0, 1.0, (80 + 5 * k, 110))
        text = [",".join(f"#{j + 1}" for j in range(110))] + [",".join(repr(float(v)) for v in row) for row in rows]
        (ts_dir / f"{sid}_rois_ho.1D").write_text("\n".join(text) + "\n")
        subjects.append({"subject_id": sid, "timeseries": f"rois/{sid}_rois_ho.1D", "phenotype_ref": sid})
    (tmp_path / "pheno.csv").write_text(
        "subject_id,age,gender,site,dx_group\n"
        + "".join(f"{s['subject_id']},{12 + k},{1 + k % 2},NYU,{1 + k % 2}\n" for k, s in enumerate(subjects))
    )
    manifest = {"schema_version": 1, "atlas_scheme": "ho110+global", "phenotype_csv": "pheno.csv",
                "policy": {"header": True}, "subjects": subjects}
    (tmp_path / "manifest.json").write_text(json.dumps(manifest))
    code = main(["pool", "--manifest", str(tmp_path / "manifest.json"), "--out", str(tmp_path / "pooled")])
    summary = json.loads((tmp_path / "pooled" / "pooling_summary.json").read_text())
    records = read_phenotype_csv(tmp_path / "pheno.csv")
    ok = code == 0 and len(summary["subjects"]) == 6 and summary["time_length"] == 80 and {r.dx_group for r in records} == {0, 1}
    record(9, ok, "NOTE: full-cohort accuracy is not gated; ABIDE-format ROI tables with header rows and "
                  "native 1/2 label coding ingest and pool through the CLI")
    assert ok

"""Cross-validation harness, classification metrics and selection frequencies."""

from __future__ import annotations

import csv
import json
import math
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from . import nn
from .graph import rng_stream
from .pooling import PoolingConfig, PoolingResult, pool_graph, sparse_flatten
from .population import PhenotypeRecord, build_population_graph

SCHEMA_VERSION = 1
STAGES = ("mlp", "lr", "gcn")


class SingleClassFoldError(ValueError):
    pass


@dataclass(frozen=True)
class FoldPlan:
    outer_k: int = 10
    outer_repeats: int = 10
    inner_k: int = 10
    inner_repeats: int = 5
    seed: int = 0


def derive_seed(seed: int, *names) -> int:
    return int(rng_stream(seed, *names).integers(0, 2**62))


def kfold_split(n: int, k: int, seed: int) -> list[np.ndarray]:
    """Seeded shuffle then contiguous chunks; each test set is sorted."""
    if not (1 <= k <= n):
        raise ValueError(f"need 1 <= k <= n, got k={k}, n={n}")
    perm = rng_stream(seed, "kfold").permutation(n)
    return [np.sort(chunk) for chunk in np.array_split(perm, k)]


# --- metrics ------------------------------------------------------------


def confusion(y_true, y_pred) -> dict:
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    return {
        "tp": int(np.sum((y_true == 1) & (y_pred == 1))),
        "fn": int(np.sum((y_true == 1) & (y_pred == 0))),
        "tn": int(np.sum((y_true == 0) & (y_pred == 0))),
        "fp": int(np.sum((y_true == 0) & (y_pred == 1))),
    }


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC from average ranks; tied pairs count 1/2."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes present")
    ranks = rankdata(scores, method="average")
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_points(scores, labels):
    """(fpr, tpr, threshold) triples, one per distinct score, from high to low."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n_pos = max(int(np.sum(labels == 1)), 1)
    n_neg = max(int(np.sum(labels == 0)), 1)
    points = [(0.0, 0.0, math.inf)]
    for t in np.unique(scores)[::-1]:
        pred = scores >= t
        points.append((float(np.sum(pred & (labels == 0)) / n_neg), float(np.sum(pred & (labels == 1)) / n_pos), float(t)))
    return points


def classification_metrics(y_true, prob) -> dict:
    """Accuracy/sensitivity/specificity in percent, AUC in [0, 1]."""
    y_true = np.asarray(y_true, dtype=np.int64)
    prob = np.asarray(prob, dtype=np.float64)
    cm = confusion(y_true, nn.hard_labels(prob))
    total = cm["tp"] + cm["fn"] + cm["tn"] + cm["fp"]
    pos, neg = cm["tp"] + cm["fn"], cm["tn"] + cm["fp"]
    both = pos > 0 and neg > 0
    return {
        "confusion": cm,
        "accuracy": 100.0 * (cm["tp"] + cm["tn"]) / total,
        "sensitivity": 100.0 * cm["tp"] / pos if pos else None,
        "specificity": 100.0 * cm["tn"] / neg if neg else None,
        "auc": roc_auc(prob, y_true) if both else None,
    }


def _mean_sd(values):
    vals = [v for v in values if v is not None]
    if not vals:
        return {"mean": None, "sd": None, "n": 0}
    arr = np.asarray(vals, dtype=np.float64)
    return {"mean": float(arr.mean()), "sd": float(arr.std(ddof=1)) if arr.size > 1 else 0.0, "n": int(arr.size)}


def aggregate(folds: list[dict]) -> dict:
    """Mean and sd over folds, plus sd of the per-repeat means."""
    out = {}
    for key in ("accuracy", "sensitivity", "specificity", "auc"):
        out[key] = _mean_sd([f["metrics"][key] for f in folds])
        by_repeat = {}
        for f in folds:
            if f["metrics"][key] is not None:
                by_repeat.setdefault(f["repeat"], []).append(f["metrics"][key])
        out[key]["over_repeats"] = _mean_sd([float(np.mean(v)) for _, v in sorted(by_repeat.items())])
    return out


# --- pooling of a cohort ------------------------------------------------


def _pool_one(args):
    graph, cfg = args
    return pool_graph(graph, cfg)


def pool_cohort(graphs, cfg: PoolingConfig, jobs: int = 1) -> list[PoolingResult]:
    """Pool every subject; labels are never looked at, so this runs once before CV."""
    graphs = list(graphs)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            return list(ex.map(_pool_one, [(g, cfg) for g in graphs]))
    return [pool_graph(g, cfg) for g in graphs]


def sparse_feature_matrix(results, n_nodes: int, feat_dim: int) -> np.ndarray:
    return np.vstack([sparse_flatten(r, n_nodes, feat_dim).to_dense() for r in results])


# --- pipeline -----------------------------------------------------------


@dataclass
class ModelConfigs:
    mlp: nn.MlpConfig = field(default_factory=nn.MlpConfig)
    mlp_train: nn.TrainConfig = field(default_factory=lambda: nn.TrainConfig(epochs=100))
    lr_train: nn.TrainConfig = field(default_factory=lambda: nn.TrainConfig(lr=0.01, weight_decay=0.0, epochs=300))
    gcn: nn.GcnConfig = field(default_factory=nn.GcnConfig)
    gcn_train: nn.TrainConfig = field(default_factory=lambda: nn.TrainConfig(epochs=300))
    graph_threshold: float = 0.5
    gcn_val_fraction: float = 0.1

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class CohortData:
    features: np.ndarray
    labels: np.ndarray
    records: list[PhenotypeRecord]

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if not (self.features.shape[0] == self.labels.shape[0] == len(self.records)):
            raise ValueError("features, labels and phenotype records must align")


@dataclass
class FoldOutcome:
    repeat: int
    fold: int
    test_idx: np.ndarray
    probs: dict  # stage -> probabilities on test_idx
    inner_val_accuracy: float
    gcn_val_accuracy: float | None
    mlp_state: nn.ModelState | None = None
    gcn_state: nn.ModelState | None = None
    embeddings: np.ndarray | None = None


def _standardize(train, full):
    mu = train.mean(axis=0)
    sd = train.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    return (full - mu) / sd


def _with_seed(cfg, seed):
    return type(cfg)(**{**asdict(cfg), "seed": seed})


def run_fold(data: CohortData, adj_dense, train_idx, test_idx, plan: FoldPlan, models: ModelConfigs,
             repeat: int, fold: int, heads=STAGES, keep_states: bool = False) -> FoldOutcome:
    """Train and evaluate every head on one outer split."""
    X, y = data.features, data.labels
    if np.unique(y[train_idx]).size < 2:
        raise SingleClassFoldError(f"repeat {repeat} fold {fold}: train split holds a single class")
    tag = ("outer", repeat, fold)

    # inner CV picks the MLP feature extractor
    best = None
    for ir in range(plan.inner_repeats):
        inner_k = min(plan.inner_k, train_idx.size)
        for fi, val_pos in enumerate(kfold_split(train_idx.size, inner_k, derive_seed(plan.seed, *tag, "inner", ir))):
            val = train_idx[val_pos]
            inner_train = np.setdiff1d(train_idx, val)
            s = derive_seed(plan.seed, *tag, "inner", ir, fi)
            state, acc, _ = nn.train_mlp(
                X, y, inner_train, val, _with_seed(models.mlp, s), _with_seed(models.mlp_train, s)
            )
            if best is None or acc > best[0]:
                best = (acc, state)
    inner_acc, mlp_state = best
    probs = {}
    if "mlp" in heads:
        probs["mlp"] = nn.predict_proba_mlp(mlp_state, X[test_idx])

    emb = _standardize(nn.embed_mlp(mlp_state, X[train_idx]), nn.embed_mlp(mlp_state, X))

    if "lr" in heads:
        lr_state = nn.train_logistic(emb[train_idx], y[train_idx], models.lr_train)
        probs["lr"] = nn.predict_proba_logistic(lr_state, emb[test_idx])

    gcn_acc, gcn_state = None, None
    if "gcn" in heads:
        s = derive_seed(plan.seed, *tag, "gcn")
        shuffled = train_idx[rng_stream(s, "gcn-val").permutation(train_idx.size)]
        n_val = int(round(models.gcn_val_fraction * train_idx.size))
        val, fit = np.sort(shuffled[:n_val]), np.sort(shuffled[n_val:])
        gcn_state, gcn_acc, _ = nn.train_gcn(
            adj_dense, emb, y, fit, val, _with_seed(models.gcn, s), _with_seed(models.gcn_train, s)
        )
        probs["gcn"] = nn.predict_proba_gcn(gcn_state, adj_dense, emb)[test_idx]

    return FoldOutcome(
        repeat, fold, test_idx, probs, float(inner_acc),
        None if gcn_acc is None or math.isnan(gcn_acc) else float(gcn_acc),
        mlp_state if keep_states else None,
        gcn_state if keep_states else None,
        emb if keep_states else None,
    )


def _run_fold_args(args):
    return run_fold(*args)


def fold_splits(n: int, plan: FoldPlan):
    for r in range(plan.outer_repeats):
        tests = kfold_split(n, plan.outer_k, derive_seed(plan.seed, "outer", r))
        for f, test in enumerate(tests):
            yield r, f, np.setdiff1d(np.arange(n), test), test


def run_pipeline(data: CohortData, plan: FoldPlan, models: ModelConfigs, heads=STAGES,
                 jobs: int = 1, keep_states: bool = False):
    """Nested CV over all outer folds and repeats.

    Returns (report dict, list of FoldOutcome). The population graph depends
    on phenotypes only and is built once; labels enter solely through the
    train masks.
    """
    pg = build_population_graph(data.records, models.graph_threshold)
    adj_dense = np.array(pg.adjacency.to_dense())
    tasks = [
        (data, adj_dense, train, test, plan, models, r, f, tuple(heads), keep_states)
        for r, f, train, test in fold_splits(len(data.labels), plan)
    ]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            outcomes = list(ex.map(_run_fold_args, tasks))
    else:
        outcomes = [run_fold(*t) for t in tasks]
    return build_report(data, outcomes, heads, plan, models, pg.adjacency.edge_count()), outcomes


def build_report(data: CohortData, outcomes, heads, plan: FoldPlan, models: ModelConfigs, n_pop_edges: int) -> dict:
    stages = {}
    for stage in heads:
        folds = []
        for o in outcomes:
            m = classification_metrics(data.labels[o.test_idx], o.probs[stage])
            folds.append({"repeat": o.repeat, "fold": o.fold, "n_test": int(o.test_idx.size), "metrics": m})
        stages[stage] = {"folds": folds, "aggregate": aggregate(folds)}
    return {
        "schema_version": SCHEMA_VERSION,
        "n_subjects": int(data.labels.size),
        "n_population_edges": int(n_pop_edges),
        "fold_plan": asdict(plan),
        "models": models.to_dict(),
        "inner_val_accuracy": [o.inner_val_accuracy for o in outcomes],
        "stages": stages,
    }


def write_metrics_json(path, report: dict) -> None:
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_confusion_csv(path, report: dict) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["schema_version", "stage", "repeat", "fold", "tp", "fn", "tn", "fp"])
        for stage, body in report["stages"].items():
            for f in body["folds"]:
                cm = f["metrics"]["confusion"]
                w.writerow([SCHEMA_VERSION, stage, f["repeat"], f["fold"], cm["tp"], cm["fn"], cm["tn"], cm["fp"]])


def write_roc_csv(path, labels, outcomes, heads) -> None:
    labels = np.asarray(labels)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["schema_version", "stage", "repeat", "fold", "fpr", "tpr", "threshold"])
        for stage in heads:
            for o in outcomes:
                for fpr, tpr, t in roc_points(o.probs[stage], labels[o.test_idx]):
                    w.writerow([SCHEMA_VERSION, stage, o.repeat, o.fold, repr(fpr), repr(tpr), repr(t)])


# --- selection frequencies ---------------------------------------------


@dataclass
class SelectionFrequencyTable:
    group: str
    group_size: int
    node_counts: np.ndarray
    edge_counts: dict
    top_m: int

    def top_nodes(self):
        order = np.lexsort((np.arange(self.node_counts.size), -self.node_counts))[: self.top_m]
        return [(int(i), int(self.node_counts[i]), self.node_counts[i] / self.group_size) for i in order]

    def top_edges(self):
        items = sorted(self.edge_counts.items(), key=lambda kv: (-kv[1], kv[0]))[: self.top_m]
        return [(i, j, c, c / self.group_size) for (i, j), c in items]

    def write_csv(self, path) -> None:
        """Top-m nodes, one row each."""
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["schema_version", "group", "rank", "node", "count", "group_size", "relative_frequency"])
            for rank, (i, c, f) in enumerate(self.top_nodes(), start=1):
                w.writerow([SCHEMA_VERSION, self.group, rank, i, c, self.group_size, repr(float(f))])

    def write_edges_csv(self, path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["schema_version", "group", "rank", "node_i", "node_j", "count", "group_size", "relative_frequency"])
            for rank, (i, j, c, f) in enumerate(self.top_edges(), start=1):
                w.writerow([SCHEMA_VERSION, self.group, rank, i, j, c, self.group_size, repr(float(f))])


def selection_frequencies(selections, edges=None, group: str = "all", top_m: int = 15, n_nodes: int = 111) -> SelectionFrequencyTable:
    """Count how often each node (and undirected pooled edge) occurs across a group.

    ``selections`` holds one array of selected node ids per member;
    ``edges`` optionally one iterable of (i, j) pairs in original numbering.
    """
    selections = [np.asarray(s, dtype=np.int64) for s in selections]
    if not selections:
        raise ValueError(f"group {group!r} is empty")
    counts = np.zeros(n_nodes, dtype=np.int64)
    for s in selections:
        if s.size and (s.min() < 0 or s.max() >= n_nodes):
            raise ValueError("selected node outside atlas range")
        counts[np.unique(s)] += 1
    edge_counts = Counter()
    for member in edges or ():
        edge_counts.update({(min(i, j), max(i, j)) for i, j in member})
    return SelectionFrequencyTable(group, len(selections), counts, dict(edge_counts), top_m)


def pooled_edges(res: PoolingResult):
    """Pooled edges mapped back to original node ids."""
    sel = res.selected
    a = res.pooled_adj
    return [(int(sel[i]), int(sel[j])) for i, j in zip(a.rows, a.cols)]

"""Command-line front end.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__, nn
from . import evaluation as ev
from .config import ConfigError, RunConfig, load_run_config
from .ingest import (
    CohortManifest,
    ManifestEntry,
    TimePolicy,
    TimeSeriesFormatError,
    apply_policy,
    build_brain_graph,
    read_timeseries_raw,
    synth_cohort,
    write_timeseries,
)
from .pooling import PoolingConfig, pool_graph, sparse_flatten
from .population import PhenotypeError, read_phenotype_csv, write_phenotype_csv
from .serialize import FormatError, load_checkpoint, read_sparse_vector, save_checkpoint, write_sparse_vector, write_sparse_vector_csv

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

GROUP_KEYS = ("dx", "gender", "site")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _ensure_outdir(path: Path, force: bool) -> None:
    if path.exists() and any(path.iterdir()) and not force:
        raise UsageError(f"output directory {path} is not empty (use --force)")
    path.mkdir(parents=True, exist_ok=True)


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# --- synth --------------------------------------------------------------


def cmd_synth(args) -> int:
    if args.subjects < 4:
        raise UsageError("--subjects must be at least 4")
    out = Path(args.out)
    _ensure_outdir(out, args.force)
    cohort = synth_cohort(args.subjects, T=args.timepoints, class_gap=args.gap, seed=args.seed)
    (out / "timeseries").mkdir(exist_ok=True)
    entries = []
    for ts, rec in zip(cohort.raw, cohort.records):
        rel = f"timeseries/{rec.subject_id}.csv"
        write_timeseries(out / rel, ts)
        entries.append(ManifestEntry(rec.subject_id, rel, rec.subject_id))
    write_phenotype_csv(out / "phenotypes.csv", cohort.records)
    manifest = CohortManifest(
        entries, phenotype_csv="phenotypes.csv",
        policy={"length": args.timepoints, "mode": "truncate", "zscore": True},
    )
    (out / "manifest.json").write_text(manifest.to_json(), encoding="utf-8")
    print(out / "manifest.json")
    return EXIT_OK


# --- pool ---------------------------------------------------------------


def _pool_subject(task):
    entry_id, path, policy, cfg = task
    try:
        ts = apply_policy(read_timeseries_raw(path, policy), policy)
    except (TimeSeriesFormatError, ValueError) as exc:
        return entry_id, None, None, str(exc)
    graph = build_brain_graph(ts, entry_id)
    return entry_id, graph.feats.shape, pool_graph(graph, cfg), None


def cmd_pool(args) -> int:
    run = _run_config(args)
    cfg = replace(run.pooling, **{k: v for k, v in (("ratio", args.ratio), ("layers", args.layers)) if v is not None})
    manifest = CohortManifest.load(args.manifest)
    manifest.validate()
    policy = manifest.time_policy()
    if policy.length is None:
        # cohort-wide truncation to the shortest series
        lengths = [read_timeseries_raw(manifest.resolve(e.timeseries), policy).shape[1] for e in manifest.entries]
        policy = replace(policy, length=min(lengths))
    out = Path(args.out)
    _ensure_outdir(out, args.force)
    (out / "sparse").mkdir(exist_ok=True)
    tasks = [(e.subject_id, manifest.resolve(e.timeseries), policy, cfg) for e in manifest.entries]
    if args.jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=args.jobs) as ex:
            results = list(ex.map(_pool_subject, tasks))
    else:
        results = [_pool_subject(t) for t in tasks]
    subjects, errors = [], []
    for sid, shape, res, err in results:
        if err is not None:
            errors.append({"subject_id": sid, "error": err})
            continue
        n_nodes, feat_dim = shape
        vec = sparse_flatten(res, n_nodes, feat_dim)
        write_sparse_vector(out / "sparse" / f"{sid}.spv", vec, sid, n_nodes, feat_dim, cfg.ratio)
        if args.csv:
            write_sparse_vector_csv(out / "sparse" / f"{sid}.csv", vec, sid, n_nodes, feat_dim, cfg.ratio)
        subjects.append({
            "subject_id": sid,
            "file": f"sparse/{sid}.spv",
            "selected": [int(i) for i in res.selected],
            "edges": [[a, b] for a, b in ev.pooled_edges(res)],
        })
    summary = {
        "schema_version": ev.SCHEMA_VERSION,
        "manifest": str(Path(args.manifest).resolve()),
        "pooling": asdict(cfg),
        "time_length": policy.length,
        "n_nodes": None,
        "feat_dim": None,
        "subjects": subjects,
        "errors": errors,
    }
    if subjects:
        first = read_sparse_vector(out / subjects[0]["file"])[0]
        summary["n_nodes"], summary["feat_dim"] = first["n_nodes"], first["feat_dim"]
    _write_json(out / "pooling_summary.json", summary)
    for e in errors:
        print(f"error: {e['subject_id']}: {e['error']}", file=sys.stderr)
    return EXIT_DATA if errors else EXIT_OK


# --- shared loading -----------------------------------------------------


def _load_summary(pooled: Path) -> dict:
    path = pooled / "pooling_summary.json"
    if not path.is_file():
        raise DataError(f"pooling summary not found: {path}")
    return json.loads(path.read_text(encoding="utf-8"))


def _load_cohort(pooled: Path, manifest_path=None):
    summary = _load_summary(pooled)
    manifest = CohortManifest.load(manifest_path or summary["manifest"])
    if not manifest.phenotype_csv:
        raise DataError("manifest does not reference a phenotype CSV")
    records = {r.subject_id: r for r in read_phenotype_csv(manifest.resolve(manifest.phenotype_csv))}
    ids, rows, recs = [], [], []
    for s in summary["subjects"]:
        sid = s["subject_id"]
        if sid not in records:
            raise DataError(f"no phenotype row for subject {sid}")
        _, vec = read_sparse_vector(pooled / s["file"])
        ids.append(sid)
        rows.append(vec.to_dense())
        recs.append(records[sid])
    if not ids:
        raise DataError("no pooled subjects")
    return summary, ids, np.vstack(rows), recs


def _run_config(args) -> RunConfig:
    return load_run_config(getattr(args, "config", None))


def _parse_heads(text: str):
    heads = ev.STAGES if text == "all" else tuple(h.strip() for h in text.split(","))
    bad = [h for h in heads if h not in ev.STAGES]
    if bad:
        raise UsageError(f"unknown head(s) {bad}; choose from {list(ev.STAGES)} or 'all'")
    return tuple(h for h in ev.STAGES if h in heads)


def _apply_train_flags(run: RunConfig, args) -> RunConfig:
    m = run.models
    mlp, mlp_train, gcn, gcn_train = m.mlp, m.mlp_train, m.gcn, m.gcn_train
    if args.lr is not None:
        mlp_train, gcn_train = replace(mlp_train, lr=args.lr), replace(gcn_train, lr=args.lr)
    if args.weight_decay is not None:
        mlp_train = replace(mlp_train, weight_decay=args.weight_decay)
        gcn_train = replace(gcn_train, weight_decay=args.weight_decay)
    if args.dropout is not None:
        mlp, gcn = replace(mlp, dropout=args.dropout), replace(gcn, dropout=args.dropout)
    if args.mlp_epochs is not None:
        mlp_train = replace(mlp_train, epochs=args.mlp_epochs)
    if args.gcn_epochs is not None:
        gcn_train = replace(gcn_train, epochs=args.gcn_epochs)
    if args.clusters is not None:
        gcn_train = replace(gcn_train, clusters=args.clusters)
    models = replace(m, mlp=mlp, mlp_train=mlp_train, gcn=gcn, gcn_train=gcn_train)
    plan = run.folds
    overrides = {
        k: getattr(args, k) for k in ("outer_k", "outer_repeats", "inner_k", "inner_repeats", "seed")
        if getattr(args, k) is not None
    }
    return RunConfig(run.pooling, models, replace(plan, **overrides))


# --- train / evaluate ---------------------------------------------------


def cmd_train(args) -> int:
    heads = _parse_heads(args.head)
    run = _apply_train_flags(_run_config(args), args)
    pooled = Path(args.pooled)
    summary, ids, X, records = _load_cohort(pooled, args.manifest)
    if any(r.dx_group is None for r in records):
        raise DataError("every subject needs a dx_group label for training")
    labels = np.array([r.dx_group for r in records])
    out = Path(args.out)
    _ensure_outdir(out, args.force)
    data = ev.CohortData(X, labels, records)
    with np.errstate(over="ignore", under="ignore"):
        report, outcomes = ev.run_pipeline(
            data, run.folds, run.models, heads=heads, jobs=args.jobs, keep_states=not args.no_checkpoints
        )
    for o in outcomes:
        for stage, p in o.probs.items():
            if not np.all(np.isfinite(p)):
                raise FloatingPointError(f"non-finite {stage} output in repeat {o.repeat} fold {o.fold}")
    predictions = {
        "schema_version": ev.SCHEMA_VERSION,
        "heads": list(heads),
        "subject_ids": ids,
        "labels": [int(v) for v in labels],
        "n_population_edges": report["n_population_edges"],
        "folds": [
            {
                "repeat": o.repeat, "fold": o.fold,
                "test_idx": [int(i) for i in o.test_idx],
                "probs": {k: [float(x) for x in v] for k, v in o.probs.items()},
                "inner_val_accuracy": o.inner_val_accuracy,
                "gcn_val_accuracy": o.gcn_val_accuracy,
            }
            for o in outcomes
        ],
    }
    _write_json(out / "predictions.json", predictions)
    config_echo = {
        "pooled": str(pooled.resolve()),
        "manifest": str(Path(args.manifest).resolve()) if args.manifest else summary["manifest"],
        "pooling": summary["pooling"],
        "fold_plan": asdict(run.folds),
        "models": run.models.to_dict(),
        "heads": list(heads),
        "lr": run.models.mlp_train.lr,
        "weight_decay": run.models.mlp_train.weight_decay,
        "dropout": run.models.gcn.dropout,
        "seed": run.folds.seed,
    }
    _write_json(out / "run_config.json", config_echo)
    _write_json(out / "run_metadata.json", {
        **config_echo,
        "package_version": __version__,
        "created": _dt.datetime.now(_dt.timezone.utc).isoformat(),
        "argv": sys.argv[1:],
    })
    if not args.no_checkpoints:
        ck = out / "checkpoints"
        ck.mkdir(exist_ok=True)
        for o in outcomes:
            meta = {"repeat": o.repeat, "fold": o.fold}
            save_checkpoint(ck / f"r{o.repeat}_f{o.fold}_mlp.ckpt", o.mlp_state, meta)
            if o.gcn_state is not None:
                save_checkpoint(ck / f"r{o.repeat}_f{o.fold}_gcn.ckpt", o.gcn_state, meta)
    agg = report["stages"]
    for stage in heads:
        acc = agg[stage]["aggregate"]["accuracy"]
        print(f"{stage}: accuracy {acc['mean']:.2f} +/- {acc['sd']:.2f}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    run_dir = Path(args.run)
    pred_path = run_dir / "predictions.json"
    if not pred_path.is_file():
        raise DataError(f"no predictions found in {run_dir}")
    pred = json.loads(pred_path.read_text(encoding="utf-8"))
    cfg = json.loads((run_dir / "run_config.json").read_text(encoding="utf-8"))
    labels = np.array(pred["labels"])
    outcomes = [
        ev.FoldOutcome(f["repeat"], f["fold"], np.array(f["test_idx"], dtype=np.int64),
                       {k: np.array(v) for k, v in f["probs"].items()},
                       f["inner_val_accuracy"], f["gcn_val_accuracy"])
        for f in pred["folds"]
    ]
    report = {
        "schema_version": ev.SCHEMA_VERSION,
        "n_subjects": int(labels.size),
        "n_population_edges": pred["n_population_edges"],
        "fold_plan": cfg["fold_plan"],
        "models": cfg["models"],
        "inner_val_accuracy": [o.inner_val_accuracy for o in outcomes],
        "stages": {},
    }
    for stage in pred["heads"]:
        folds = [
            {"repeat": o.repeat, "fold": o.fold, "n_test": int(o.test_idx.size),
             "metrics": ev.classification_metrics(labels[o.test_idx], o.probs[stage])}
            for o in outcomes
        ]
        report["stages"][stage] = {"folds": folds, "aggregate": ev.aggregate(folds)}
    out = Path(args.out) if args.out else run_dir
    out.mkdir(parents=True, exist_ok=True)
    ev.write_metrics_json(out / "metrics.json", report)
    ev.write_confusion_csv(out / "confusion.csv", report)
    ev.write_roc_csv(out / "roc.csv", labels, outcomes, pred["heads"])
    print(out / "metrics.json")
    return EXIT_OK


# --- frequencies --------------------------------------------------------


def _group_value(key, rec):
    if key == "dx":
        if rec.dx_group is None:
            raise DataError(f"subject {rec.subject_id} has no dx_group")
        return "ASD" if rec.dx_group == 1 else "control"
    if key == "gender":
        return rec.gender
    return rec.site


def cmd_frequencies(args) -> int:
    keys = [k.strip() for k in args.group.split(",") if k.strip()]
    bad = [k for k in keys if k not in GROUP_KEYS]
    if bad or not keys:
        raise UsageError(f"unknown group key(s) {bad}; valid keys: {', '.join(GROUP_KEYS)}")
    pooled = Path(args.pooled)
    summary = _load_summary(pooled)
    manifest = CohortManifest.load(args.manifest or summary["manifest"])
    records = {r.subject_id: r for r in read_phenotype_csv(manifest.resolve(manifest.phenotype_csv))}
    members = {}
    for s in summary["subjects"]:
        rec = records.get(s["subject_id"])
        if rec is None:
            raise DataError(f"no phenotype row for subject {s['subject_id']}")
        members.setdefault(tuple(_group_value(k, rec) for k in keys), []).append(s)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "edges").mkdir(exist_ok=True)
    n_nodes = summary.get("n_nodes") or 111
    for combo in sorted(members):
        group = members[combo]
        name = "_".join(f"{k}-{v}" for k, v in zip(keys, combo))
        table = ev.selection_frequencies(
            [g["selected"] for g in group], [[tuple(e) for e in g["edges"]] for g in group],
            group=name, top_m=args.top, n_nodes=n_nodes,
        )
        table.write_csv(out / f"freq_{name}.csv")
        table.write_edges_csv(out / "edges" / f"freq_{name}_edges.csv")
        print(out / f"freq_{name}.csv")
    return EXIT_OK


# --- embed-export -------------------------------------------------------


def cmd_embed_export(args) -> int:
    run_dir = Path(args.run)
    cfg = json.loads((run_dir / "run_config.json").read_text(encoding="utf-8"))
    ckpt = run_dir / "checkpoints" / f"r{args.repeat}_f{args.fold}_mlp.ckpt"
    if not ckpt.is_file():
        raise DataError(f"checkpoint not found: {ckpt}")
    state = load_checkpoint(ckpt)
    _, ids, X, records = _load_cohort(Path(cfg["pooled"]), cfg["manifest"])
    emb = nn.embed_mlp(state, X)
    pred = json.loads((run_dir / "predictions.json").read_text(encoding="utf-8"))
    test = set()
    for f in pred["folds"]:
        if f["repeat"] == args.repeat and f["fold"] == args.fold:
            test = set(f["test_idx"])
    import csv

    with Path(args.out).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", "dx_group", "age", "gender", "site", "split"] + [f"e{i}" for i in range(emb.shape[1])])
        for i, (sid, rec) in enumerate(zip(ids, records)):
            w.writerow([sid, "" if rec.dx_group is None else rec.dx_group, repr(rec.age), rec.gender, rec.site,
                        "test" if i in test else "train"] + [repr(float(v)) for v in emb[i]])
    print(args.out)
    return EXIT_OK


# --- parser -------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="asdnet", description="Graph pooling + population GCN pipeline for ROI time series.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic cohort in the ingest formats")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--subjects", type=int, default=200, help="number of subjects (>= 4)")
    s.add_argument("--timepoints", type=int, default=64, help="time points per series")
    s.add_argument("--gap", type=float, default=3.0, help="class separation in noise standard deviations")
    s.add_argument("--seed", type=int, default=0, help="cohort seed")
    s.add_argument("--force", action="store_true", help="write into a non-empty directory")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("pool", help="pool every subject's brain graph into sparse feature files")
    s.add_argument("--manifest", required=True, help="cohort manifest JSON")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--config", help="INI run configuration")
    s.add_argument("--ratio", type=float, help="pooling ratio in (0, 1] (default 0.05)")
    s.add_argument("--layers", type=int, help="pooling layers (default 1)")
    s.add_argument("--csv", action="store_true", help="also write CSV debug copies")
    s.add_argument("--jobs", type=int, default=1, help="worker processes")
    s.add_argument("--force", action="store_true", help="write into a non-empty directory")
    s.set_defaults(func=cmd_pool)

    s = sub.add_parser("train", help="run nested cross-validation and store predictions/checkpoints")
    s.add_argument("--pooled", required=True, help="directory written by 'pool'")
    s.add_argument("--out", required=True, help="run directory")
    s.add_argument("--manifest", help="override the manifest recorded in the pooling summary")
    s.add_argument("--config", help="INI run configuration")
    s.add_argument("--head", default="all", help="mlp, lr, gcn, a comma list, or all")
    s.add_argument("--clusters", type=int, help="Cluster-GCN batch count")
    s.add_argument("--lr", type=float, help="learning rate (default 0.0001)")
    s.add_argument("--weight-decay", type=float, help="decoupled weight decay (default 0.01)")
    s.add_argument("--dropout", type=float, help="dropout probability (default 0.01)")
    s.add_argument("--mlp-epochs", type=int, help="MLP epoch budget")
    s.add_argument("--gcn-epochs", type=int, help="GCN epoch budget")
    s.add_argument("--outer-k", type=int, help="outer folds")
    s.add_argument("--outer-repeats", type=int, help="outer repeats")
    s.add_argument("--inner-k", type=int, help="inner folds")
    s.add_argument("--inner-repeats", type=int, help="inner repeats")
    s.add_argument("--seed", type=int, help="fold-plan seed; all model seeds derive from it")
    s.add_argument("--jobs", type=int, default=1, help="worker processes over outer folds")
    s.add_argument("--no-checkpoints", action="store_true", help="skip writing model checkpoints")
    s.add_argument("--force", action="store_true", help="write into a non-empty directory")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", help="compute metrics JSON and CSV exports from a run")
    s.add_argument("--run", required=True, help="run directory written by 'train'")
    s.add_argument("--out", help="output directory (default: the run directory)")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("frequencies", help="per-group node/edge selection frequencies")
    s.add_argument("--pooled", required=True, help="directory written by 'pool'")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--manifest", help="override the manifest recorded in the pooling summary")
    s.add_argument("--group", default="dx", help="comma list of dx, gender, site")
    s.add_argument("--top", type=int, default=15, help="rows per group")
    s.set_defaults(func=cmd_frequencies)

    s = sub.add_parser("embed-export", help="write MLP embeddings joined with phenotypes")
    s.add_argument("--run", required=True, help="run directory written by 'train'")
    s.add_argument("--out", required=True, help="output CSV")
    s.add_argument("--repeat", type=int, default=0, help="outer repeat of the checkpoint")
    s.add_argument("--fold", type=int, default=0, help="outer fold of the checkpoint")
    s.set_defaults(func=cmd_embed_export)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, FormatError, PhenotypeError, TimeSeriesFormatError, ev.SingleClassFoldError,
            FileNotFoundError, KeyError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

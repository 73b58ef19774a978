import csv
import json

import numpy as np
import pytest

from asdnet.cli import build_parser, main
from asdnet.serialize import read_sparse_vector

TINY_INI = """
[mlp]
hidden = 16, 8
[mlp_train]
epochs = 2
batch_size = 8
[lr_train]
epochs = 20
[gcn]
hidden = 8
[gcn_train]
epochs = 3
[folds]
outer_k = 3
outer_repeats = 1
inner_k = 2
inner_repeats = 1
seed = 1
"""


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("synth", "--out", root / "cohort", "--subjects", 12, "--timepoints", 16, "--seed", 7) == 0
    assert run("pool", "--manifest", root / "cohort" / "manifest.json", "--out", root / "pooled") == 0
    (root / "tiny.ini").write_text(TINY_INI)
    return root


class TestSynth:
    def test_file_contract(self, workspace):
        cohort = workspace / "cohort"
        assert len(list((cohort / "timeseries").glob("*.csv"))) == 12
        assert (cohort / "phenotypes.csv").is_file() and (cohort / "manifest.json").is_file()

    def test_deterministic(self, workspace, tmp_path):
        assert run("synth", "--out", tmp_path / "again", "--subjects", 12, "--timepoints", 16, "--seed", 7) == 0
        for f in (workspace / "cohort").rglob("*"):
            if f.is_file():
                assert (tmp_path / "again" / f.relative_to(workspace / "cohort")).read_bytes() == f.read_bytes()

    def test_too_few_subjects(self, tmp_path):
        assert run("synth", "--out", tmp_path / "x", "--subjects", 2) == 1

    def test_refuses_non_empty_dir(self, workspace):
        assert run("synth", "--out", workspace / "cohort", "--subjects", 12) == 1


class TestPool:
    def test_six_selected(self, workspace):
        summary = json.loads((workspace / "pooled" / "pooling_summary.json").read_text())
        assert len(summary["subjects"]) == 12
        assert all(len(s["selected"]) == 6 for s in summary["subjects"])
        assert summary["n_nodes"] == 111 and summary["feat_dim"] == 16

    def test_full_ratio_dense_equivalent(self, workspace, tmp_path):
        manifest = workspace / "cohort" / "manifest.json"
        assert run("pool", "--manifest", manifest, "--out", tmp_path / "p", "--ratio", 1.0) == 0
        _, vec = read_sparse_vector(tmp_path / "p" / "sparse" / "sub-0000.spv")
        assert vec.positions.tolist() == list(range(111 * 16))

    def test_rerun_byte_identical(self, workspace, tmp_path):
        assert run("pool", "--manifest", workspace / "cohort" / "manifest.json", "--out", tmp_path / "p") == 0
        for f in (workspace / "pooled").rglob("*"):
            if f.is_file():
                assert (tmp_path / "p" / f.relative_to(workspace / "pooled")).read_bytes() == f.read_bytes()

    def test_malformed_subject(self, workspace, tmp_path):
        import shutil

        cohort = tmp_path / "c"
        shutil.copytree(workspace / "cohort", cohort)
        (cohort / "timeseries" / "sub-0003.csv").write_text("1,2,oops\n")
        assert run("pool", "--manifest", cohort / "manifest.json", "--out", tmp_path / "p") == 2
        summary = json.loads((tmp_path / "p" / "pooling_summary.json").read_text())
        assert [e["subject_id"] for e in summary["errors"]] == ["sub-0003"]
        assert len(summary["subjects"]) == 11


class TestTrainEvaluate:
    def test_lr_head_schema(self, workspace, tmp_path):
        out = tmp_path / "run"
        assert run("train", "--pooled", workspace / "pooled", "--out", out, "--config", workspace / "tiny.ini", "--head", "lr") == 0
        assert run("evaluate", "--run", out) == 0
        metrics = json.loads((out / "metrics.json").read_text())
        agg = metrics["stages"]["lr"]["aggregate"]
        assert {"accuracy", "sensitivity", "specificity", "auc"} <= set(agg)
        assert len(list(csv.reader((out / "confusion.csv").open()))) == 1 + 3
        assert (out / "roc.csv").is_file()
        assert len(list((out / "checkpoints").glob("*_mlp.ckpt"))) == 3

    def test_defaults_echo(self, workspace, tmp_path):
        out = tmp_path / "run"
        ini = workspace / "tiny.ini"
        assert run("train", "--pooled", workspace / "pooled", "--out", out, "--config", ini, "--head", "mlp", "--no-checkpoints") == 0
        meta = json.loads((out / "run_metadata.json").read_text())
        assert (meta["lr"], meta["weight_decay"], meta["dropout"]) == (0.0001, 0.01, 0.01)

    def test_rerun_identical_metrics(self, workspace, tmp_path):
        args = ["--pooled", workspace / "pooled", "--config", workspace / "tiny.ini", "--no-checkpoints"]
        for name in ("a", "b"):
            assert run("train", "--out", tmp_path / name, *args) == 0
            assert run("evaluate", "--run", tmp_path / name) == 0
        assert (tmp_path / "a" / "metrics.json").read_bytes() == (tmp_path / "b" / "metrics.json").read_bytes()
        assert (tmp_path / "a" / "run_config.json").read_bytes() == (tmp_path / "b" / "run_config.json").read_bytes()

    def test_embed_export(self, workspace, tmp_path):
        out = tmp_path / "run"
        assert run("train", "--pooled", workspace / "pooled", "--out", out, "--config", workspace / "tiny.ini", "--head", "mlp") == 0
        assert run("embed-export", "--run", out, "--out", tmp_path / "emb.csv") == 0
        rows = list(csv.reader((tmp_path / "emb.csv").open()))
        assert len(rows) == 13 and len(rows[0]) == 6 + 8

    def test_missing_inputs(self, tmp_path):
        assert run("train", "--pooled", tmp_path, "--out", tmp_path / "r") == 2
        assert run("evaluate", "--run", tmp_path) == 2

    def test_bad_head(self, workspace, tmp_path):
        assert run("train", "--pooled", workspace / "pooled", "--out", tmp_path / "r", "--head", "svm") == 1


class TestFrequencies:
    @pytest.mark.parametrize(
        "group,expected",
        [("dx", {"dx-ASD", "dx-control"}), ("gender", {"gender-male", "gender-female"})],
    )
    def test_two_groups(self, workspace, tmp_path, group, expected):
        assert run("frequencies", "--pooled", workspace / "pooled", "--out", tmp_path, "--group", group, "--top", 15) == 0
        files = sorted(tmp_path.glob("freq_*.csv"))
        assert {f.stem[len("freq_"):] for f in files} == expected
        for f in files:
            assert len(f.read_text().splitlines()) == 1 + 15

    def test_four_groups(self, workspace, tmp_path):
        assert run("frequencies", "--pooled", workspace / "pooled", "--out", tmp_path, "--group", "dx,gender") == 0
        groups = {
            (r.dx_group, r.gender)
            for r in __import__("asdnet.population", fromlist=["x"]).read_phenotype_csv(workspace / "cohort" / "phenotypes.csv")
        }
        assert len(list(tmp_path.glob("freq_*.csv"))) == len(groups) == 4

    def test_unknown_key(self, workspace, tmp_path, capsys):
        assert run("frequencies", "--pooled", workspace / "pooled", "--out", tmp_path, "--group", "handedness") == 1
        assert "dx, gender, site" in capsys.readouterr().err


class TestParser:
    @pytest.mark.parametrize("cmd", ["synth", "pool", "train", "evaluate", "frequencies", "embed-export"])
    def test_help_lists_flags(self, cmd, capsys):
        with pytest.raises(SystemExit) as exc:
            main([cmd, "--help"])
        assert exc.value.code == 0
        text = capsys.readouterr().out
        sub = build_parser()._subparsers._group_actions[0].choices[cmd]
        for action in sub._actions:
            for opt in action.option_strings:
                assert opt in text

    def test_unknown_flag(self):
        with pytest.raises(SystemExit) as exc:
            main(["synth", "--out", "x", "--bogus"])
        assert exc.value.code == 1


def test_clusters_one_matches_full_batch():
    from asdnet import nn
    from asdnet.graph import rng_stream

    r = np.random.default_rng(3)
    adj = (r.random((20, 20)) < 0.3).astype(float)
    adj = np.triu(adj, 1)
    adj = adj + adj.T
    X = r.standard_normal((20, 4))
    y = (X[:, 0] > 0).astype(float)
    fit, val = np.arange(16), np.arange(16, 20)
    cfg = nn.TrainConfig(lr=1e-2, epochs=10, clusters=1, seed=2)
    gcfg = nn.GcnConfig(hidden=6, dropout=0.2, seed=2)
    state, _, _ = nn.train_gcn(adj, X, y, fit, val, gcfg, cfg)

    ref = nn.init_gcn(4, gcfg)
    rng = rng_stream(cfg.seed, "gcn-train")
    best = None
    for _ in range(cfg.epochs):
        ref, _ = nn.full_batch_step(ref, adj, X, y, fit, cfg, rng=rng)
        acc = nn.accuracy(nn.predict_proba_gcn(ref, adj, X)[val], y[val])
        if best is None or acc > best[0]:
            best = (acc, ref.copy())
    for k in state.params:
        assert np.array_equal(state.params[k], best[1].params[k])

import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest

from oracles import rule_recovery_mismatches
from mmil.bagdata import load_dataset, load_latent
from mmil.cli import main
from mmil.explain.pipeline import intermediate_representations, load_explainer
from mmil.netcore import load_model


def run(*args):
    return main([str(a) for a in args])


def manifest(path):
    return json.loads((path / "manifest.json").read_text())


@pytest.fixture(scope="module")
def pipeline_dirs(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    syn, tr, ex = root / "syn", root / "train", root / "explain"
    assert run("synth", "--out", syn, "--n-train", 800, "--n-valid", 200, "--n-test", 400, "--seed", 3) == 0
    assert run("train", "--data", syn / "train.json", "--valid", syn / "valid.json", "--test", syn / "test.json",
               "--epochs", 25, "--out", tr) == 0
    assert run("explain", "--model", tr / "model.json", "--data", syn / "train.json", "--valid", syn / "valid.json",
               "--test", syn / "test.json", "--kmax", 4, "--restarts", 3, "--out", ex) == 0
    return root


def test_manifests_hash_every_output_once(pipeline_dirs):
    for name in ("syn", "train", "explain"):
        d = pipeline_dirs / name
        doc = manifest(d)
        files = sorted(p.name for p in d.iterdir() if p.name != "manifest.json")
        assert sorted(doc["outputs"]) == files
        for fname, digest in doc["outputs"].items():
            assert hashlib.sha256((d / fname).read_bytes()).hexdigest() == digest
        for path, digest in doc["inputs"].items():
            assert hashlib.sha256(open(path, "rb").read()).hexdigest() == digest
        assert "seed" in doc["seeds"] or name == "explain"


def test_synth_writes_latent_labels(pipeline_dirs):
    syn = pipeline_dirs / "syn"
    latent = load_latent(syn / "train.latent.json")
    assert len(latent.subbag_labels) == 800


def test_predict_reproduces_training_accuracy(pipeline_dirs, tmp_path):
    syn, tr = pipeline_dirs / "syn", pipeline_dirs / "train"
    assert run("predict", "--model", tr / "model.json", "--data", syn / "test.json", "--out", tmp_path) == 0
    assert manifest(tmp_path)["results"]["accuracy"] == manifest(tr)["results"]["test_accuracy"]
    lines = (tmp_path / "predictions.csv").read_text().splitlines()
    assert lines[0] == "id,prediction,p0,p1" and len(lines) == 401


def test_eval_reports_accuracy(pipeline_dirs, tmp_path):
    syn, tr = pipeline_dirs / "syn", pipeline_dirs / "train"
    assert run("eval", "--model", tr / "model.json", "--data", syn / "test.json", "--out", tmp_path) == 0
    metrics = json.loads((tmp_path / "metrics.json").read_text())
    assert metrics["accuracy"] == manifest(tr)["results"]["test_accuracy"] and metrics["loss"] > 0


def test_eval_dimension_mismatch(pipeline_dirs, tmp_path, capsys):
    syn = pipeline_dirs / "syn"
    assert run("synth", "--out", tmp_path / "wide", "--n-train", 4, "--n-valid", 0, "--n-test", 0,
               "--class-count", 12) == 0
    capsys.readouterr()
    code = run("eval", "--model", pipeline_dirs / "train" / "model.json", "--data", tmp_path / "wide" / "train.json",
               "--out", tmp_path / "e")
    err = capsys.readouterr().err
    assert code != 0
    assert err.count("\n") == 1 and err.startswith("error: ")
    assert "feature_dim" in err and "12" in err and "10" in err
    assert syn.exists()


def test_explain_outputs(pipeline_dirs):
    ex = pipeline_dirs / "explain"
    fid = json.loads((ex / "fidelity.json").read_text())
    assert {"k_inst", "k_sub", "valid_fidelity", "test_fidelity"} <= set(fid)
    assert len((ex / "grid.csv").read_text().splitlines()) == 1 + 9
    assert "t=positive" in (ex / "rules.txt").read_text()


def test_trace_cites_the_seven_cluster(pipeline_dirs, tmp_path):
    syn, tr, ex = (pipeline_dirs / n for n in ("syn", "train", "explain"))
    test = load_dataset(syn / "test.json")
    spec = load_model(tr / "model.json")
    e_inst, e_sub = load_explainer(ex / "explainer.json")
    train = load_dataset(syn / "train.json")
    reps = intermediate_representations(spec, train)
    _, inst_map, _ = rule_recovery_mismatches(e_inst, e_sub, reps, train, load_latent(syn / "train.latent.json"))
    sevens = {f"u{u + 1}" for u, c in inst_map.items() if c == 7}
    positive = next(ex_.id for ex_ in test if ex_.label == 1)
    assert run("trace", "--model", tr / "model.json", "--explainer", ex / "explainer.json",
               "--data", syn / "test.json", "--id", positive, "--out", tmp_path) == 0
    (record,) = json.loads((tmp_path / "trace.json").read_text())
    assert record["id"] == positive and record["prediction"] == "positive"
    cited = {u for sb in record["subbags"] for u in sb["referenced"]}
    assert sevens & cited


def test_trace_unknown_id(pipeline_dirs, tmp_path, capsys):
    syn, tr, ex = (pipeline_dirs / n for n in ("syn", "train", "explain"))
    code = run("trace", "--model", tr / "model.json", "--explainer", ex / "explainer.json",
               "--data", syn / "test.json", "--id", "nope", "--out", tmp_path)
    assert code == 1 and "nope" in capsys.readouterr().err


def test_missing_input_and_usage_errors(tmp_path, capsys):
    assert run("eval", "--model", tmp_path / "none.json", "--data", tmp_path / "x.json", "--out", tmp_path) == 1
    assert "not found" in capsys.readouterr().err
    assert run("train", "--out", tmp_path) == 2
    err = capsys.readouterr().err
    assert err.count("\n") == 1 and "--data" in err


def test_graph_decompose_node_and_graph(tmp_path):
    (tmp_path / "e.csv").write_text("a,b\nb,c\nc,d\nd,e\n")
    (tmp_path / "t.json").write_text(json.dumps({v: ["w1", "w2"] for v in "abcde"}))
    (tmp_path / "l.csv").write_text("a,0\nb,1\nc,0\nd,1\ne,0\n")
    (tmp_path / "y.csv").write_text("a,2001\nb,2002\nc,2003\nd,2004\ne,2005\n")
    out = tmp_path / "node"
    assert run("graph-decompose", "--edges", tmp_path / "e.csv", "--texts", tmp_path / "t.json",
               "--labels", tmp_path / "l.csv", "--out", out) == 0
    ds = load_dataset(out / "data.json")
    assert sum(len(s) for ex in ds for s in ex.subbags) == 2 * (5 + 2 * 4)
    out = tmp_path / "split"
    assert run("graph-decompose", "--edges", tmp_path / "e.csv", "--texts", tmp_path / "t.json",
               "--labels", tmp_path / "l.csv", "--years", tmp_path / "y.csv", "--out", out) == 0
    assert manifest(out)["results"]["yr1"] == 2002
    assert {"train.json", "valid.json", "test.json", "vocabulary.json"} <= set(manifest(out)["outputs"])

    (tmp_path / "gi.csv").write_text("a,g1\nb,g1\nc,g1\nd,g2\ne,g2\n")
    (tmp_path / "ge.csv").write_text("a,b\nb,c\nc,a\nd,e\n")
    (tmp_path / "gl.csv").write_text("g1,1\ng2,0\n")
    out = tmp_path / "graph"
    assert run("graph-decompose", "--task", "graph", "--edges", tmp_path / "ge.csv", "--graph-index",
               tmp_path / "gi.csv", "--labels", tmp_path / "gl.csv", "--degree-variant", "inclusive", "--out", out) == 0
    ds = load_dataset(out / "data.json")
    assert [len(ds[0].subbags), len(ds[1].subbags)] == [3, 2] and ds.feature_dim == 2


def test_rank_eval(tmp_path):
    rng = np.random.default_rng(0)
    truth = rng.integers(0, 2, (6, 10))
    np.savetxt(tmp_path / "truth.csv", truth, fmt="%d", delimiter=",")
    np.savetxt(tmp_path / "scores.csv", truth + 0.1 * rng.random(truth.shape), delimiter=",")
    for variant in ("literal", "standard"):
        out = tmp_path / variant
        assert run("rank-eval", "--truth", tmp_path / "truth.csv", "--scores", tmp_path / "scores.csv",
                   "--percent", 50, "--map-variant", variant, "--out", out) == 0
        # scores equal to the truth rank every deleted one first
        assert manifest(out)["results"]["mAP"] == 1.0
        assert (out / "masked.csv").exists()


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "mmil", "synth", "--out", str(tmp_path), "--n-train", "2",
                           "--n-valid", "0", "--n-test", "0"], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "train.json").exists()

import csv
import json
import shutil

import pytest

from kgx.cli import main
from kgx.rulebase import bundled_rulebase, dump_rulebase

from helpers import snapshot

FAST_RL = {"rl": {"episodes": 30, "steps_per_episode": 20, "epsilon_end": 0.2}}


def kgx(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert kgx("gen-data", "--n", 50, "--size", 256, "--seed", 1, "--out", root / "ds") == 0
    (root / "fast.json").write_text(json.dumps(FAST_RL))
    return root


def test_gen_data_layout_and_rerun(work, tmp_path):
    ds = work / "ds"
    assert len(list((ds / "images").glob("*.png"))) == 50
    rows = list(csv.DictReader(open(ds / "labels.csv")))
    assert sorted(int(r["grade"]) for r in rows) == sorted(list(range(5)) * 10)
    assert (ds / "detections.jsonl").is_file() and (ds / "demographics.csv").is_file()
    assert kgx("gen-data", "--n", 50, "--size", 256, "--seed", 1, "--out", tmp_path / "again") == 0
    assert snapshot(ds) == snapshot(tmp_path / "again")
    m = json.loads((ds / "manifest.json").read_text())
    assert m["command"] == "gen-data" and m["seed"] == 1
    assert set(m["timestamps"]) == {"started", "finished"}


def test_gen_data_seed_changes_output(work, tmp_path):
    assert kgx("gen-data", "--n", 5, "--size", 256, "--seed", 2, "--out", tmp_path / "a") == 0
    assert kgx("gen-data", "--n", 5, "--size", 256, "--seed", 3, "--out", tmp_path / "b") == 0
    assert snapshot(tmp_path / "a") != snapshot(tmp_path / "b")


def test_build_rules_and_replay(tmp_path):
    assert kgx("build-rules", "--out", tmp_path / "r1") == 0
    assert (tmp_path / "r1" / "rulebase.json").read_text() == dump_rulebase(bundled_rulebase())
    passages = json.loads((tmp_path / "r1" / "passages.json").read_text())
    assert len(passages) == 5
    assert [p["score"] for p in passages] == sorted((p["score"] for p in passages), reverse=True)
    assert kgx("build-rules", "--out", tmp_path / "r2") == 0
    assert snapshot(tmp_path / "r1") == snapshot(tmp_path / "r2")
    assert kgx("build-rules", "--replay", tmp_path / "r1" / "manifest.json", "--out", tmp_path / "r3") == 0
    assert snapshot(tmp_path / "r1") == snapshot(tmp_path / "r3")


def test_tune_supervised(work, tmp_path):
    args = ("tune", "--dataset", work / "ds", "--config", work / "fast.json", "--sweep")
    assert kgx(*args, "--out", tmp_path / "t1") == 0
    b = json.loads((tmp_path / "t1" / "bindings.json").read_text())
    assert set(b["bindings"]) == {"confidence_threshold"}
    sw = json.loads((tmp_path / "t1" / "sweep.json").read_text())
    assert len(sw["states"]) == 19
    rows = list(csv.reader(open(tmp_path / "t1" / "episodes.csv")))
    assert len(rows) == 31
    assert kgx(*args, "--out", tmp_path / "t2") == 0
    assert snapshot(tmp_path / "t1") == snapshot(tmp_path / "t2")
    assert kgx("tune", "--replay", tmp_path / "t1", "--out", tmp_path / "t3") == 0
    assert snapshot(tmp_path / "t1") == snapshot(tmp_path / "t3")


def test_tune_unsupervised(tmp_path):
    assert kgx("gen-data", "--fixture", "tuning", "--out", tmp_path / "tun") == 0
    (tmp_path / "fast.json").write_text(json.dumps(FAST_RL))
    assert kgx("tune", "--regime", "unsupervised", "--dataset", tmp_path / "tun",
               "--config", tmp_path / "fast.json", "--out", tmp_path / "t") == 0
    b = json.loads((tmp_path / "t" / "bindings.json").read_text())
    assert set(b["bindings"]) == {"clip_limit", "disc_threshold"}
    tuned = json.loads((tmp_path / "t" / "tuned_plan.json").read_text())
    assert tuned["rule_id"] == "exudates"


def test_verify_bridge_and_identity(work, tmp_path):
    from importlib import resources
    degraded = str(resources.files("kgx").joinpath("data/fixtures/exudates_degraded.json"))
    assert kgx("verify", "--plan", degraded, "--dataset", work / "ds", "--k", 4, "--out", tmp_path / "v") == 0
    rep = json.loads((tmp_path / "v" / "report.json").read_text())
    assert len(rep["validation_ids"]) == 4
    assert 1 <= len(rep["plan_versions"]) <= 5
    assert (tmp_path / "v" / "final_plan.json").is_file()
    assert kgx("verify", "--plan", degraded, "--dataset", work / "ds", "--k", 4, "--refiner", "identity",
               "--max-iterations", 3, "--tau", 1.01, "--out", tmp_path / "i") == 0
    rep = json.loads((tmp_path / "i" / "report.json").read_text())
    assert rep["stop_reason"] == "budget_exhausted" and len(rep["plan_versions"]) == 3
    assert kgx("verify", "--plan", degraded, "--dataset", work / "ds", "--k", 4, "--out", tmp_path / "v2") == 0
    assert snapshot(tmp_path / "v") == snapshot(tmp_path / "v2")


@pytest.fixture(scope="module")
def trained(work):
    out = work / "ete"
    assert kgx("extract-train-eval", "--dataset", work / "ds", "--out", out) == 0
    return out


def test_extract_train_eval_outputs(trained, work, tmp_path):
    metrics = json.loads((trained / "metrics.json").read_text())
    assert metrics["row"]["Test Acc."] >= 0.7
    header = (trained / "features.csv").read_text().splitlines()[0].split(",")
    assert len(header) == 27
    kd = [json.loads(l) for l in (trained / "kd_outputs.jsonl").read_text().splitlines()]
    assert len(kd) == 50 and all(len(r["proba"]) == 5 for r in kd)
    splits = [r["split"] for r in csv.DictReader(open(trained / "samples.csv"))]
    assert (splits.count("train"), splits.count("val"), splits.count("test")) == (30, 10, 10)
    loc = json.loads((trained / "localization.json").read_text())
    assert 0.0 <= loc["accuracy"] <= 1.0
    assert kgx("extract-train-eval", "--dataset", work / "ds", "--out", tmp_path / "again") == 0
    assert snapshot(trained) == snapshot(tmp_path / "again")


def test_shuffled_labels_and_other_kind(work, tmp_path):
    assert kgx("extract-train-eval", "--dataset", work / "ds", "--shuffle-labels", "--kind", "logreg",
               "--out", tmp_path / "s") == 0
    metrics = json.loads((tmp_path / "s" / "metrics.json").read_text())
    assert metrics["model"] == "logreg"
    assert metrics["row"]["Test Acc."] <= 0.6


def _predictions(work, path, conf=0.9):
    rows = list(csv.DictReader(open(work / "ds" / "labels.csv")))
    with open(path, "w") as fh:
        for r in rows:
            fh.write(json.dumps({"image_id": r["image_id"], "label": int(r["grade"]), "confidence": conf}) + "\n")


def test_fuse(trained, work, tmp_path):
    _predictions(work, tmp_path / "p.jsonl")
    assert kgx("fuse", "--predictions", tmp_path / "p.jsonl", "--kd", trained / "kd_outputs.jsonl",
               "--labels", work / "ds", "--out", tmp_path / "f") == 0
    lines = (tmp_path / "f" / "fusion.csv").read_text().splitlines()
    assert lines[0] == "image_id,y_dl,s_dl,y_kd,s_kd,y_final,source" and len(lines) == 51
    summary = json.loads((tmp_path / "f" / "fusion_summary.json").read_text())
    assert summary["deep_only"] == 1.0
    assert kgx("fuse", "--predictions", tmp_path / "p.jsonl", "--kd", trained / "kd_outputs.jsonl",
               "--split", "test", "--out", tmp_path / "ft") == 0
    assert len((tmp_path / "ft" / "fusion.csv").read_text().splitlines()) == 11


def test_fuse_missing_ids(trained, work, tmp_path):
    _predictions(work, tmp_path / "p.jsonl")
    kd = [l for l in (trained / "kd_outputs.jsonl").read_text().splitlines()][1:]
    (tmp_path / "kd.jsonl").write_text("\n".join(kd) + "\n")
    assert kgx("fuse", "--predictions", tmp_path / "p.jsonl", "--kd", tmp_path / "kd.jsonl",
               "--out", tmp_path / "f") == 1
    (tmp_path / "off.json").write_text(json.dumps({"fusion": False}))
    assert kgx("fuse", "--predictions", tmp_path / "p.jsonl", "--kd", trained / "kd_outputs.jsonl",
               "--config", tmp_path / "off.json", "--out", tmp_path / "f2") == 1


def test_report(trained, work, tmp_path):
    assert kgx("report", "--runs", trained, work / "ds", "--out", tmp_path / "r") == 0
    entries = json.loads((tmp_path / "r" / "report.json").read_text())
    assert [e["command"] for e in entries] == ["extract-train-eval", "gen-data"]
    table = (tmp_path / "r" / "table.csv").read_text().splitlines()
    assert table[0].startswith("Model,") and table[1].startswith("gradient_boosting,")
    assert kgx("report", "--runs", trained, work / "ds", "--out", tmp_path / "r2") == 0
    assert snapshot(tmp_path / "r") == snapshot(tmp_path / "r2")


# ---------------------------------------------------------------- failures

def test_invalid_input_exits_1(work, tmp_path, capsys):
    assert kgx("tune", "--out", tmp_path / "a") == 1
    assert "--dataset is required" in capsys.readouterr().err
    assert kgx("tune", "--dataset", tmp_path / "nowhere", "--out", tmp_path / "b") == 1
    assert kgx("gen-data", "--n", 0, "--out", tmp_path / "c") == 1
    assert kgx("gen-data", "--mix", "1,2", "--out", tmp_path / "d") == 1
    (tmp_path / "bad.json").write_text('{"classifier": "svm_rbf"}')
    assert kgx("extract-train-eval", "--dataset", work / "ds", "--config", tmp_path / "bad.json",
               "--out", tmp_path / "e") == 1


def test_argparse_errors_exit_1():
    with pytest.raises(SystemExit) as exc:
        kgx("frobnicate")
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        kgx("tune", "--regime", "sideways")
    assert exc.value.code == 1


def test_runtime_failure_exits_2(tmp_path, capsys):
    (tmp_path / "taken").write_text("a file, not a directory")
    assert kgx("build-rules", "--out", tmp_path / "taken") == 2
    assert "failed" in capsys.readouterr().err


def test_missing_ground_truth(work, tmp_path):
    ds = tmp_path / "ds"
    shutil.copytree(work / "ds", ds)
    (ds / "labels.csv").unlink()
    assert kgx("extract-train-eval", "--dataset", ds, "--out", tmp_path / "e") == 1
    shutil.rmtree(ds / "truth")
    from importlib import resources
    plan = str(resources.files("kgx").joinpath("data/plans/exudates.json"))
    assert kgx("verify", "--plan", plan, "--dataset", ds, "--out", tmp_path / "v") == 1


def test_replay_of_wrong_command(tmp_path):
    assert kgx("build-rules", "--out", tmp_path / "r") == 0
    assert kgx("tune", "--replay", tmp_path / "r" / "manifest.json", "--out", tmp_path / "t") == 1

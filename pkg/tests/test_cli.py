import json

import pytest

from glyrag import cli


def run(*argv):
    return cli.main([str(a) for a in argv])


def last_error(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "toy.json").write_text(json.dumps({"preset": "toy", "epochs_pretrain": 2, "epochs_finetune": 2}))
    assert run("synth", "--patients", 2, "--days", 3, "--seed", 1, "--out", d / "cohort.csv") == 0
    assert run("contextualize", "--data", d / "cohort.csv", "--out", d / "summaries.json") == 0
    assert run("train", "--config", d / "toy.json", "--data", d / "cohort.csv", "--summaries", d / "summaries.json",
               "--out", d / "run") == 0
    assert run("forecast", "--run", d / "run", "--data", d / "cohort.csv", "--summaries", d / "summaries.json",
               "--out", d / "pred.csv") == 0
    return d


def test_synth_is_deterministic(tmp_path):
    for name in ("a.csv", "b.csv"):
        assert run("synth", "--patients", 2, "--days", 3, "--seed", 1, "--out", tmp_path / name) == 0
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_summary_store_is_content_addressed(pipeline):
    store = json.loads((pipeline / "summaries.json").read_text())
    assert store["version"] == 1
    assert len(store["texts"]) < len(store["windows"])  # identical texts stored once
    for entry in list(store["windows"].values())[:50]:
        assert cli._text_key(store["texts"][entry["text_key"]]) == entry["text_key"]


def test_manifest_and_artifacts(pipeline):
    m = json.loads((pipeline / "run" / "manifest.json").read_text())
    assert [s["stage"] for s in m["stages"]] == ["pretrain", "index", "finetune"]
    assert all(s["complete"] and (pipeline / "run" / s["artifact"]).exists() for s in m["stages"])
    assert len(m["config_hash"]) == 16


def test_eval_on_references_gives_zero(pipeline, tmp_path):
    refs = pipeline / "pred_references.csv"
    assert run("eval", "--predictions", refs, "--references", refs, "--out", tmp_path / "r.json",
               "--csv", tmp_path / "r.csv") == 0
    rep = json.loads((tmp_path / "r.json").read_text())
    assert [b["pooled"]["rmse"] for b in rep["horizons"]] == [0.0, 0.0, 0.0]
    assert (tmp_path / "r.csv").read_text().startswith("horizon_min,scope")


def test_rerun_restores_identical_artifacts(pipeline, tmp_path):
    before = (pipeline / "pred.csv").read_bytes()
    (pipeline / "pred.csv").unlink()
    assert run("forecast", "--run", pipeline / "run", "--data", pipeline / "cohort.csv", "--summaries",
               pipeline / "summaries.json", "--out", pipeline / "pred.csv") == 0
    assert (pipeline / "pred.csv").read_bytes() == before
    old = (pipeline / "summaries.json").read_bytes()
    assert run("contextualize", "--data", pipeline / "cohort.csv", "--out", tmp_path / "s.json") == 0
    assert (tmp_path / "s.json").read_bytes() == old


def test_plot_outputs(pipeline, tmp_path):
    assert run("plot", "--predictions", pipeline / "pred.csv", "--references", pipeline / "pred_references.csv",
               "--out", tmp_path, "--limit", 2) == 0
    csvs, svgs = sorted(tmp_path.glob("*.csv")), sorted(tmp_path.glob("*.svg"))
    assert len(csvs) == 2 and len(svgs) == 2
    lines = csvs[0].read_text().splitlines()
    assert lines[0] == "time,minutes_ahead,ref,pred,band_low,band_high" and len(lines) == 13
    assert lines[1].endswith(",70,180")
    assert svgs[0].read_text().startswith("<svg") and "polyline" in svgs[0].read_text()


def test_missing_artifact_exit_code(tmp_path, capsys):
    assert run("forecast", "--run", tmp_path / "none", "--data", tmp_path / "c.csv", "--out", tmp_path / "p.csv") == 3
    assert last_error(capsys)["error"] == "missing_artifact"


def test_malformed_config_exit_code(pipeline, tmp_path, capsys):
    (tmp_path / "bad.json").write_text('{"preset": "toy", "bogus": 1}')
    assert run("train", "--config", tmp_path / "bad.json", "--data", pipeline / "cohort.csv",
               "--out", tmp_path / "r") == 5
    assert last_error(capsys) == {"error": "malformed_config", "exit_code": 5,
                                  "message": "config: unknown keys ['bogus']"}
    (tmp_path / "bad2.json").write_text("{not json")
    assert run("train", "--config", tmp_path / "bad2.json", "--data", pipeline / "cohort.csv",
               "--out", tmp_path / "r") == 5
    assert run("train", "--config", pipeline / "toy.json", "--set", "nope=1", "--data", pipeline / "cohort.csv",
               "--out", tmp_path / "r") == 5


def test_hash_mismatch_exit_code(pipeline, tmp_path, capsys):
    import shutil

    shutil.copytree(pipeline / "run", tmp_path / "run")
    m = json.loads((tmp_path / "run" / "manifest.json").read_text())
    m["config_hash"] = "0" * 16
    (tmp_path / "run" / "manifest.json").write_text(json.dumps(m))
    assert run("forecast", "--run", tmp_path / "run", "--data", pipeline / "cohort.csv", "--summaries",
               pipeline / "summaries.json", "--out", tmp_path / "p.csv") == 4
    assert last_error(capsys)["error"] == "hash_mismatch"


def test_invalid_data_and_usage(tmp_path, capsys):
    (tmp_path / "c.csv").write_text("patient_id,timestamp,glucose_mg_dl\np,0,NaN\n")
    assert run("contextualize", "--data", tmp_path / "c.csv", "--out", tmp_path / "s.json") == 6
    assert last_error(capsys)["error"] == "invalid_data"
    assert run("synth", "--patients", 2) == 2
    assert last_error(capsys)["error"] == "usage"


def test_help_lists_exit_codes_and_flags(capsys):
    assert run("--help") == 0
    out = capsys.readouterr().out
    for cmd in ("synth", "contextualize", "train", "forecast", "eval", "ablate", "plot"):
        assert cmd in out
    assert "hash mismatch" in out and "malformed config" in out
    assert run("train", "--help") == 0
    out = capsys.readouterr().out
    for flag in ("--config", "--data", "--summaries", "--seed", "--set", "--out"):
        assert flag in out


def test_ablate_writes_table(pipeline, tmp_path):
    (tmp_path / "tiny.json").write_text(json.dumps({"preset": "toy", "epochs_pretrain": 1, "epochs_finetune": 1}))
    assert run("ablate", "--config", tmp_path / "tiny.json", "--data", pipeline / "cohort.csv", "--summaries",
               pipeline / "summaries.json", "--out", tmp_path / "ab.csv") == 0
    lines = (tmp_path / "ab.csv").read_text().splitlines()
    assert lines[0].startswith("config,rag,ca,ctl,rmse_5") and len(lines) == 6

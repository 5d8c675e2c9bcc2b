import json
import shutil
from pathlib import Path

import pytest

from march.cli import EXIT_BACKEND, EXIT_OK, EXIT_PARTIAL, EXIT_VALIDATION, main
from march.core import load_database

FIXTURES = Path(__file__).parent / "fixtures"
GOLDEN = FIXTURES / "golden"
SWEEP = FIXTURES / "sweep"


@pytest.fixture
def golden(tmp_path):
    """A writable copy of the golden fixture directory."""
    target = tmp_path / "golden"
    shutil.copytree(GOLDEN, target, ignore=shutil.ignore_patterns("expected"))
    return target


def test_ingest_reports_counts(tmp_path, capsys):
    out = tmp_path / "normalised.jsonl"
    assert main(["ingest", str(GOLDEN / "train.jsonl"), str(out)]) == EXIT_OK
    text = capsys.readouterr().out
    assert text.splitlines()[0] == "6 cases"
    regions_block, abnormality_block = text.split("Regions\n")[1].split("Clinical Abnormalities\n")
    regions = dict(line.strip().rsplit(None, 1) for line in regions_block.strip().splitlines())
    assert regions["lung"] == "6"
    assert regions["pleura"] == "3"
    assert regions["heart"] == "1"
    prevalence = dict(line.strip().rsplit(None, 1) for line in abnormality_block.strip().splitlines())
    assert prevalence["pleural effusion"] == "2"
    assert prevalence["lung nodule"] == "2"
    assert prevalence["emphysema"] == "1"
    assert len(load_database(out)) == 6


def test_ingest_schema_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"case_id": "a", "report": {"lung": "x"}, "logits": [1, 2]}\n')
    assert main(["ingest", str(bad), str(tmp_path / "o.jsonl")]) == EXIT_VALIDATION
    assert "line 1" in capsys.readouterr().err


def test_validate(capsys, tmp_path):
    assert main(["validate", str(GOLDEN / "train.jsonl")]) == EXIT_OK
    assert "ImageToText" in capsys.readouterr().out
    mixed = tmp_path / "mixed.jsonl"
    mixed.write_text(json.dumps({"case_id": "a", "report": {"lung": "x"}, "image_embedding": [1, 2], "text_embedding": [1, 2, 3]}) + "\n")
    assert main(["validate", str(mixed)]) == EXIT_VALIDATION


def test_run_writes_outputs_and_resumes(golden, tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["run", "--config", str(golden / "config.yaml"), "--out", str(out)]) == EXIT_OK
    for name in ("e01", "e02", "e03"):
        assert (out / "results" / f"{name}.json").exists()
        assert (out / "transcripts" / f"{name}.json").exists()
    log = json.loads((out / "run_log.json").read_text())
    assert log["cases"] == 3 and log["failures"] == 0
    assert set(log["timings"]) == {"e01", "e02", "e03"}
    first = (out / "results" / "e02.json").read_bytes()
    assert first == (GOLDEN / "expected" / "results" / "e02.json").read_bytes()
    capsys.readouterr()

    (out / "results" / "e02.json").unlink()
    assert main(["run", "--config", str(golden / "config.yaml"), "--out", str(out)]) == EXIT_OK
    assert "resuming: 2 case(s)" in capsys.readouterr().out
    assert json.loads((out / "run_log.json").read_text())["timings"].keys() == {"e02"}
    assert (out / "results" / "e02.json").read_bytes() == first

    assert main(["run", "--config", str(golden / "config.yaml"), "--out", str(out), "--force"]) == EXIT_OK
    assert "resuming" not in capsys.readouterr().out
    assert len(json.loads((out / "run_log.json").read_text())["timings"]) == 3


def test_run_mode_override(golden, tmp_path):
    out = tmp_path / "out"
    assert main(["run", "--config", str(golden / "config.yaml"), "--out", str(out), "--mode", "sr_sa"]) == EXIT_OK
    result = json.loads((out / "results" / "e01.json").read_text())
    assert result["mode"] == "sr_sa"
    assert result["usage"]["fellow"]["calls"] == 1
    assert "attending" not in result["usage"]


def test_run_missing_api_key_fails_early(golden, tmp_path, monkeypatch, capsys):
    monkeypatch.delenv("MARCH_API_KEY", raising=False)
    config = golden / "remote.yaml"
    config.write_text(
        "mode: full\nbackends:\n  fellow: {type: remote, endpoint: 'http://127.0.0.1:9/v1', model: m}\n"
        "  attending: {type: scripted, script: script.json}\ndata: {eval: eval.jsonl, train: train.jsonl}\n"
    )
    out = tmp_path / "out"
    assert main(["run", "--config", str(config), "--out", str(out)]) == EXIT_VALIDATION
    err = capsys.readouterr().err
    assert "MARCH_API_KEY" in err and "export" in err
    assert not out.exists()


def test_run_all_backend_failures_exit_2(golden, tmp_path):
    script = json.loads((golden / "script.json").read_text())
    script["cases"]["*"]["attending"] = script["cases"]["*"]["attending"][:1]
    (golden / "script.json").write_text(json.dumps(script))
    assert main(["run", "--config", str(golden / "config.yaml"), "--out", str(tmp_path / "o")]) == EXIT_BACKEND


def test_run_strict_partial_failure_exit_3(golden, tmp_path):
    lines = (golden / "eval.jsonl").read_text().splitlines()
    broken = json.loads(lines[0])
    del broken["logits"]
    (golden / "eval.jsonl").write_text("\n".join([json.dumps(broken)] + lines[1:]) + "\n")
    args = ["run", "--config", str(golden / "config.yaml"), "--out", str(tmp_path / "o")]
    assert main(args + ["--force"]) == EXIT_OK
    assert main(args + ["--force", "--strict"]) == EXIT_PARTIAL


def test_unknown_config_key(golden, tmp_path, capsys):
    config = golden / "typo.yaml"
    config.write_text("mode: full\nfelows: 3\n")
    assert main(["run", "--config", str(config), "--out", str(tmp_path / "o")]) == EXIT_VALIDATION
    assert "felows" in capsys.readouterr().err


def test_eval_results(golden, tmp_path, capsys):
    out = tmp_path / "out"
    main(["run", "--config", str(golden / "config.yaml"), "--out", str(out)])
    capsys.readouterr()
    json_out = tmp_path / "metrics.json"
    assert main(["eval", str(out), str(golden / "eval.jsonl"), "--json-out", str(json_out)]) == EXIT_OK
    assert "CE-F1" in capsys.readouterr().out
    metrics = json.loads(json_out.read_text())
    assert metrics["num_cases"] == 3
    assert 0.0 <= metrics["ce_micro"]["f1"] <= 1.0


def test_eval_empty_dir(tmp_path, capsys):
    empty = tmp_path / "empty"
    empty.mkdir()
    assert main(["eval", str(empty), str(GOLDEN / "eval.jsonl")]) == EXIT_VALIDATION
    assert "no result files" in capsys.readouterr().err


def test_sweep_table(tmp_path, capsys):
    json_out = tmp_path / "sweep.json"
    assert main(["sweep", "--config", str(SWEEP / "config.yaml"), "--json-out", str(json_out)]) == EXIT_OK
    table = capsys.readouterr().out.splitlines()
    assert table[0].split() == ["N", "BLEU-1", "BLEU-4", "ROUGE-L", "CE-F1"]
    assert [row.split()[0] for row in table[1:]] == ["1", "3", "5", "10", "20"]
    rows = json.loads(json_out.read_text())
    assert [rows[n]["ce_micro"]["f1"] for n in ("1", "3", "5", "10", "20")] == [0.5, 0.5, 2 / 3, 2 / 3, 2 / 3]


def test_sweep_bad_counts(capsys):
    assert main(["sweep", "--config", str(SWEEP / "config.yaml"), "--counts", "3,x"]) == EXIT_VALIDATION


def test_inspect(capsys):
    assert main(["inspect", str(GOLDEN / "expected" / "transcripts" / "e01.json")]) == EXIT_OK
    text = capsys.readouterr().out
    assert "== Round 0: synthesis ==" in text
    assert "fellow-2: disagree (confidence 3)" in text
    assert "attending: not consulted (unanimous agreement)" in text
    assert "Termination: UnanimousAgreement after 2 round(s)" in text


def test_inspect_missing_file(tmp_path, capsys):
    assert main(["inspect", str(tmp_path / "nope.json")]) == EXIT_VALIDATION

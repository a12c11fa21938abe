import csv
import io
import json

import pytest

from treexpert.cli import flatten, main, parse_overrides, select_section
from treexpert.errors import ConfigError
from treexpert.trainer import AGG_COLUMNS
from treexpert.tasks import TaskSpec


def gen(tmp_path, name, *extra):
    out = tmp_path / name
    code = main(["gen", "--task", "car_cdr_seq", "--out", str(out), "--seed", "2", "--train-size", "30",
                 "--test-size", "8", *extra])
    return code, out


def test_gen_is_deterministic(tmp_path, capsys):
    assert gen(tmp_path, "a")[0] == 0
    assert gen(tmp_path, "b")[0] == 0
    for f in ("train.jsonl", "test_id.jsonl", "test_ood_lexical.jsonl", "test_ood_structural.jsonl",
              "manifest.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    info = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert info["counts"] == {"train": 30, "test_id": 8, "test_ood_lexical": 8, "test_ood_structural": 8}
    assert len(info["vocab_hash"]) == 16


def test_gen_config_file_and_overrides(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text('[task]\ntask_kind = "reverse"\nseed = 5\n[task.sizes]\ntrain = 12\n')
    assert main(["gen", "--config", str(cfg), "--out", str(tmp_path / "d"), "--test-size", "3",
                 "--set", "task.ood_ap_length=4"]) == 0
    info = json.loads((tmp_path / "d" / "manifest.json").read_text())
    assert info["task_kind"] == "reverse" and info["seed"] == 5 and info["counts"]["train"] == 12
    assert info["params"]["ood_ap_length"] == 4


def test_config_errors_exit_2(tmp_path, capsys):
    assert gen(tmp_path, "x", "--set", "bogus=1")[0] == 2
    bad = tmp_path / "bad.toml"
    bad.write_text("[task\n")
    assert main(["gen", "--config", str(bad), "--out", str(tmp_path / "y")]) == 2
    assert main(["train", "--data", str(tmp_path / "nowhere"), "--set", "model_kind=rnn"]) == 2
    assert "config error" in capsys.readouterr().err


def test_io_errors_exit_4(tmp_path):
    _, data = gen(tmp_path, "d")
    assert main(["eval", "--checkpoint", str(tmp_path / "none.bin"), "--data", str(data)]) == 4
    assert main(["train", "--data", str(tmp_path / "nowhere"), "--epochs", "1"]) == 4


def test_train_eval_report(tmp_path, capsys):
    _, data = gen(tmp_path, "d")
    run = tmp_path / "runs" / "r0"
    args = ["train", "--data", str(data), "--out", str(run), "--quiet", "--epochs", "1", "--max-steps", "4",
            "--d-model", "8", "--set", "n_heads=2", "--set", "train.n_experts=2"]
    assert main(args) == 0
    assert (run / "config.toml").read_text().startswith("[train]")
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(run / "checkpoint.bin"), "--data", str(data), "--split",
                 "test_ood_lexical"]) == 0
    rows = list(csv.reader(io.StringIO(capsys.readouterr().out)))
    assert rows[0] == ["checkpoint", "split", "accuracy"] and 0.0 <= float(rows[1][2]) <= 1.0
    assert main(["eval", "--checkpoint", str(run / "checkpoint.bin"), "--data", str(data), "--split", "dev"]) == 2
    out = tmp_path / "agg.csv"
    params = tmp_path / "params.csv"
    assert main(["report", "--runs", str(tmp_path / "runs" / "*"), "--out", str(out),
                 "--params-out", str(params)]) == 0
    rows = list(csv.DictReader(out.open()))
    assert len(rows) == 4 and rows[0]["task"] == "car_cdr_seq" and rows[0]["n_runs"] == "1"
    assert len(list(csv.DictReader(params.open()))) == 9


def test_config_helpers():
    assert flatten({"task": {"seed": 1, "sizes": {"train": 3}}}) == {"task.seed": 1, "task.sizes": {"train": 3}}
    assert parse_overrides(["a=1", "b=x", "c=[1, 2]"]) == {"a": 1, "b": "x", "c": [1, 2]}
    with pytest.raises(ConfigError):
        parse_overrides(["novalue"])
    allowed = {"seed", "task_kind", "sizes"}
    assert select_section({"task.seed": 1, "train.lr": 0.1, "task_kind": "reverse"}, "task", allowed) \
        == {"seed": 1, "task_kind": "reverse"}
    with pytest.raises(ConfigError):
        select_section({"task.nope": 1}, "task", allowed)
    TaskSpec(**select_section({"sizes.train": 4}, "task", allowed))


def test_report_with_no_runs_writes_header_only(tmp_path, capsys):
    out = tmp_path / "agg.csv"
    assert main(["report", "--runs", str(tmp_path / "none" / "*"), "--out", str(out)]) == 0
    assert out.read_text().strip() == ",".join(AGG_COLUMNS)


def test_manifest_hash_tracks_heldout_words(tmp_path):
    _, a = gen(tmp_path, "a")
    code, b = gen(tmp_path, "b", "--set", 'task.heldout_adjectives=["odd", "grim"]')
    assert code == 0
    ha = json.loads((a / "manifest.json").read_text())["vocab_hash"]
    hb = json.loads((b / "manifest.json").read_text())["vocab_hash"]
    assert ha != hb

import csv
import json

import pytest

from omdalib.cli import main, run_command
from omdalib.metrics import PCA_CSV_HEADER

SMALL = {
    "shift": {"d_in": 4, "k": 3, "n_bags": 12, "bag_size": [3, 6], "rotation": [0.5]},
    "train": {"d": 4, "hidden": [8], "disc_hidden": 6, "max_epochs": 3, "patience": 1, "stage2_epochs": 2,
              "batch_size": 4, "log_every": 1},
}


def _config(tmp_path, doc=None, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(SMALL if doc is None else doc))
    return str(path)


def _read(path):
    return json.loads(path.read_text())


def test_gen_data_writes_datasets_and_manifest(tmp_path):
    out = tmp_path / "data"
    assert run_command(["gen-data", "--config", _config(tmp_path), "--seed", "3", "--out", str(out)]) == 0
    manifest = _read(out / "manifest.json")
    assert manifest["command"] == "gen-data"
    assert manifest["seed"] == [3]
    assert manifest["config"]["shift"]["seed"] == 3
    assert len(manifest["config_hash"]) == 64
    header = json.loads((out / "source.jsonl").read_text().splitlines()[0])
    assert header["k"] == 3 and header["d_in"] == 4
    assert len((out / "target.jsonl").read_text().splitlines()) == 13


def test_print_defaults(capsys):
    assert main(["gen-data", "--print-defaults"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert set(doc) == {"shift", "train", "data", "checkpoint"}
    assert doc["train"]["alpha"] == 0.01


@pytest.mark.parametrize("argv", [["fit"], ["gen-data", "--bogus"], [], ["ablate", "--seed", "x..y", "--out", "o"]])
def test_usage_errors_exit_2(argv, capsys):
    assert run_command(argv) == 2
    assert capsys.readouterr().err.startswith("error: ")


def test_missing_out_is_usage_error(capsys):
    assert run_command(["pretrain"]) == 2
    assert "--out" in capsys.readouterr().err


def test_adapt_without_checkpoint_fails(tmp_path, capsys):
    assert run_command(["adapt", "--config", _config(tmp_path), "--out", str(tmp_path / "a")]) == 1
    err = capsys.readouterr().err
    assert "checkpoint" in err
    assert len(err.strip().splitlines()) == 1


def test_bad_config_names_key(tmp_path, capsys):
    doc = {"train": {"alpha": "lots"}}
    assert run_command(["pretrain", "--config", _config(tmp_path, doc), "--out", str(tmp_path / "p")]) == 1
    assert "train.alpha" in capsys.readouterr().err


def test_unknown_config_key(tmp_path, capsys):
    doc = {"shift": {"d_out": 3}}
    assert run_command(["gen-data", "--config", _config(tmp_path, doc), "--out", str(tmp_path / "g")]) == 1
    assert "shift.d_out" in capsys.readouterr().err


def test_partial_data_section_fails(tmp_path, capsys):
    doc = dict(SMALL, data={"source": "only.jsonl"})
    assert run_command(["pretrain", "--config", _config(tmp_path, doc), "--out", str(tmp_path / "p")]) == 1
    assert "data" in capsys.readouterr().err


def test_pretrain_adapt_eval_and_pca(tmp_path):
    data = tmp_path / "data"
    assert run_command(["gen-data", "--config", _config(tmp_path), "--out", str(data)]) == 0
    doc = dict(SMALL, data={"source": str(data / "source.jsonl"), "target": str(data / "target.jsonl")})
    config = _config(tmp_path, doc, name="run.json")

    pre = tmp_path / "pre"
    assert run_command(["pretrain", "--config", config, "--out", str(pre)]) == 0
    log = _read(pre / "train_log.json")
    assert "wall_clock" not in log
    assert 1 <= len(log["records"]) <= 3
    assert set(_read(pre / "eval.json")) == {"source", "target"}

    ada = tmp_path / "ada"
    assert run_command(["adapt", "--config", config, "--checkpoint", str(pre / "checkpoint.json"),
                        "--out", str(ada)]) == 0
    assert len(_read(ada / "adapt_log.json")["records"]) == 2
    assert _read(ada / "manifest.json")["inputs"]["checkpoint"] == str(pre / "checkpoint.json")

    ev = tmp_path / "ev"
    assert run_command(["eval", "--checkpoint", str(ada / "checkpoint.json"), "--dataset",
                        str(data / "target.jsonl"), "--out", str(ev)]) == 0
    report = _read(ev / "eval.json")
    assert report["domain"] == "target"
    assert report["bag"]["count"] == 12

    pca = tmp_path / "pca"
    assert run_command(["export-pca", "--checkpoint", str(ada / "checkpoint.json"), "--source",
                        str(data / "source.jsonl"), "--target", str(data / "target.jsonl"), "--out", str(pca)]) == 0
    with open(str(pca / "pca.csv")) as fp:
        rows = list(csv.reader(fp))
    assert tuple(rows[0]) == PCA_CSV_HEADER
    assert {r[0] for r in rows[1:]} == {"source", "target"}


def test_pretrain_is_reproducible(tmp_path):
    config = _config(tmp_path)
    for name in ("a", "b"):
        assert run_command(["pretrain", "--config", config, "--seed", "5", "--out", str(tmp_path / name)]) == 0
    for name in ("checkpoint.json", "train_log.json", "eval.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_export_pca_rejects_swapped_files(tmp_path, capsys):
    data = tmp_path / "data"
    assert run_command(["gen-data", "--config", _config(tmp_path), "--out", str(data)]) == 0
    pre = tmp_path / "pre"
    assert run_command(["pretrain", "--config", _config(tmp_path), "--out", str(pre)]) == 0
    assert run_command(["export-pca", "--checkpoint", str(pre / "checkpoint.json"), "--source",
                        str(data / "target.jsonl"), "--target", str(data / "source.jsonl"),
                        "--out", str(tmp_path / "pca")]) == 1
    assert "--source" in capsys.readouterr().err


def test_ablate_writes_table_and_seed_dirs(tmp_path):
    out = tmp_path / "abl"
    assert run_command(["ablate", "--config", _config(tmp_path), "--seed", "0..1", "--variants",
                        "full,source_only", "--out", str(out)]) == 0
    table = _read(out / "ablation.json")
    assert len(table["rows"]) == 4
    assert table["variants"] == ["full", "source_only"]
    for seed in (0, 1):
        assert (out / "seed_{}".format(seed) / "pca_before.csv").exists()
        assert (out / "seed_{}".format(seed) / "pca_after.csv").exists()
        assert _read(out / "seed_{}".format(seed) / "manifest.json")["seed"] == [seed]


def test_ablate_unknown_variant(tmp_path, capsys):
    assert run_command(["ablate", "--variants", "full,everything", "--out", str(tmp_path / "x")]) == 2
    assert "everything" in capsys.readouterr().err


def test_grad_check_command(tmp_path):
    out = tmp_path / "gc"
    assert run_command(["grad-check", "--configs", "2", "--out", str(out)]) == 0
    report = _read(out / "grad_check.json")
    assert report["passed"] is True
    assert len(report["cases"]) == 12


def test_malformed_dataset_file_fails_cleanly(tmp_path, capsys):
    data = tmp_path / "data"
    assert run_command(["gen-data", "--config", _config(tmp_path), "--out", str(data)]) == 0
    capsys.readouterr()
    broken = tmp_path / "broken.jsonl"
    broken.write_text("\n".join([json.dumps({"k": 3, "d_in": 4}), json.dumps(
        {"bag_id": "x", "domain": "source", "bag_label": 0, "instances": [{"id": "i", "label": 0}]})]) + "\n")
    doc = dict(SMALL, data={"source": str(broken), "target": str(data / "target.jsonl")})
    assert run_command(["pretrain", "--config", _config(tmp_path, doc, name="run.json"),
                        "--out", str(tmp_path / "p")]) == 1
    err = capsys.readouterr().err
    assert err.startswith("error: ")
    assert "bag x" in err
    assert "Traceback" not in err

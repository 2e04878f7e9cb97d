import csv
import json

import pytest

from biasguard.main import EXIT_DATA, EXIT_OK, EXIT_USAGE, run
from biasguard.manifest import manifest_path_for, read_manifest

SYNTH_ARGS = ["--classes", "5", "--unseen", "2", "--per-class", "8", "--dim-visual", "6",
              "--dim-semantic", "3", "--seed", "4"]
TRAIN_ARGS = ["--epochs", "1", "--batch-size", "8", "--latent", "2", "--proj", "3", "--n-critic", "1"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data.bin"
    ckpt = root / "model.ckpt"
    assert run(["synth", *SYNTH_ARGS, "--out", str(data)]) == EXIT_OK
    assert run(["train", "--data", str(data), *TRAIN_ARGS, "--out", str(ckpt)]) == EXIT_OK
    return root, data, ckpt


def test_synth_is_deterministic(tmp_path, workspace):
    _, data, _ = workspace
    again = tmp_path / "again.bin"
    assert run(["synth", *SYNTH_ARGS, "--out", str(again)]) == EXIT_OK
    assert again.read_bytes() == data.read_bytes()


def test_synth_writes_manifest(workspace):
    _, data, _ = workspace
    manifest = read_manifest(data)
    assert manifest.command == "synth"
    assert manifest.seed == 4
    assert manifest.config["n_classes"] == 5


def test_train_manifest_reruns_identically(workspace):
    _, _, ckpt = workspace
    manifest = read_manifest(ckpt)
    assert manifest.config["epochs"] == "1" and manifest.config["k_proj"] == "3"
    before = ckpt.read_bytes()
    assert run(manifest.argv) == EXIT_OK
    assert ckpt.read_bytes() == before


def test_eval_prints_and_writes_table(tmp_path, workspace, capsys):
    _, data, ckpt = workspace
    table = tmp_path / "eval.csv"
    per_class = tmp_path / "per_class.csv"
    code = run(["eval", "--data", str(data), "--checkpoint", str(ckpt), "--out", str(table),
                "--per-class", str(per_class), "--compare-euclidean"])
    assert code == EXIT_OK
    out = capsys.readouterr().out
    assert out.startswith("config,U,S,H\nmodel,")
    assert "fixed by metric" in out
    with open(table, newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["config", "U", "S", "H"] and len(rows) == 2
    assert manifest_path_for(table).exists()
    with open(per_class, newline="", encoding="utf-8") as f:
        assert len(list(csv.reader(f))) == 6


def test_classify_prints_a_class(workspace, capsys):
    _, data, ckpt = workspace
    assert run(["classify", "--data", str(data), "--checkpoint", str(ckpt), "--index", "0"]) == EXIT_OK
    assert int(capsys.readouterr().out.strip()) in range(5)
    assert run(["classify", "--data", str(data), "--checkpoint", str(ckpt), "--index", "999"]) == EXIT_USAGE


def test_ablate_writes_rows(tmp_path, workspace, capsys):
    _, data, _ = workspace
    table = tmp_path / "ablate.csv"
    code = run(["ablate", "--data", str(data), *TRAIN_ARGS, "--metric-axis", "MAHA,EUCLID",
                "--out", str(table)])
    assert code == EXIT_OK
    lines = table.read_text(encoding="utf-8").splitlines()
    assert lines[0] == "config,U,S,H"
    assert [line.split(",")[0] for line in lines[1:]] == ["metric=MAHA", "metric=EUCLID"]
    assert read_manifest(table).config["axes"] == {"metric": ["MAHA", "EUCLID"]}


def test_dimension_mismatch_exits_with_data_code(tmp_path, workspace, capsys):
    _, _, ckpt = workspace
    narrow = tmp_path / "narrow.bin"
    assert run(["synth", "--classes", "4", "--unseen", "1", "--per-class", "6", "--dim-visual", "4",
                "--dim-semantic", "3", "--out", str(narrow)]) == EXIT_OK
    capsys.readouterr()
    assert run(["eval", "--data", str(narrow), "--checkpoint", str(ckpt)]) == EXIT_DATA
    assert "error[dimension]" in capsys.readouterr().err


def test_bad_arguments_exit_with_usage_code(tmp_path, workspace):
    _, data, _ = workspace
    assert run(["train", "--data", str(data)]) == EXIT_USAGE
    assert run(["train", "--data", str(data), "--out", str(tmp_path / "x.ckpt"), "--metric", "COSINE"]) == EXIT_USAGE
    assert run(["train", "--data", str(data), "--out", str(tmp_path / "x.ckpt"),
                "--branches", "A_ONLY", "--metric", "MAHA"]) == EXIT_USAGE


def test_unknown_config_key_is_rejected(tmp_path, workspace, capsys):
    _, data, _ = workspace
    cfg = tmp_path / "run.cfg"
    cfg.write_text("epochs=1\nlamda_m=0.5\n", encoding="utf-8")
    code = run(["train", "--data", str(data), "--config", str(cfg), "--out", str(tmp_path / "x.ckpt")])
    assert code == EXIT_USAGE
    assert "lamda_m" in capsys.readouterr().err


def test_invalid_utf8_data_exits_with_data_code(tmp_path, workspace, capsys):
    _, _, ckpt = workspace
    bad = tmp_path / "bad.csv"
    bad.write_bytes(b"label,v0,s0\n\xff\xfe,1.0,0.5\n")
    assert run(["eval", "--data", str(bad), "--checkpoint", str(ckpt)]) == EXIT_DATA
    assert "error[data]" in capsys.readouterr().err


def test_invalid_utf8_config_exits_with_usage_code(tmp_path, workspace, capsys):
    _, data, _ = workspace
    cfg = tmp_path / "run.cfg"
    cfg.write_bytes(b"epochs=1\n\xffseed=2\n")
    code = run(["train", "--data", str(data), "--config", str(cfg), "--out", str(tmp_path / "x.ckpt")])
    assert code == EXIT_USAGE
    assert "not valid UTF-8" in capsys.readouterr().err


def test_missing_data_file(tmp_path):
    assert run(["train", "--data", str(tmp_path / "absent.bin"), "--out", str(tmp_path / "x.ckpt")]) == EXIT_DATA


def test_inspect_prints_manifest(workspace, capsys):
    _, _, ckpt = workspace
    assert run(["inspect", str(ckpt)]) == EXIT_OK
    assert json.loads(capsys.readouterr().out)["command"] == "train"

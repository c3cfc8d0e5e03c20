import json

import pytest

from flowseq import cli

SMALL_SYNTH = """\
[synth]
seed = 5
flows_per_day = 400

[episode:Heartbleed]
day = 2
hour = 10
kind = rare_token_burst
n_flows = 20

[episode:PortScan]
day = 3
hour = 9
kind = port_sweep
port_lo = 1
port_hi = 120
"""

FAST = ["--epochs", "1", "--replicas", "1", "--embed-dim", "4", "--hidden", "4", "--dense", "4"]


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "synth.ini").write_text(SMALL_SYNTH)
    out = root / "out"
    assert cli.main(["synth", "--out", str(out), "--synth-config", str(root / "synth.ini")]) == 0
    assert cli.main(["run", "--out", str(out), *FAST]) == 0
    return out


def test_end_to_end_artifacts(run_dir, capsys):
    for name in ("records.csv", "rejected.csv", "day_histogram.csv", "vocab_protobytes.tsv", "vocab_ports.tsv",
                 "report.csv", "report.txt"):
        assert (run_dir / name).exists(), name
    assert len(list((run_dir / "models").glob("*.npz"))) == 10
    assert (run_dir / "scores" / "pc1_frequency_r0.csv").exists()
    report = (run_dir / "report.txt").read_text()
    assert report.count("All Attacks") == 3
    assert "Protobytes AUC" in report and "Ports AUC" in report
    manifest = json.loads((run_dir / "manifest_score.json").read_text())
    assert manifest["seed"] == 0 and "records.csv" in manifest["inputs"]
    assert manifest["test_stride"] == {"protobytes": 1, "ports": 3}
    hist = json.loads((run_dir / "models" / "ports_dyad_r0.json").read_text())
    assert hist["n_train"] + hist["n_val"] == hist["n_windows"]


def test_eval_rerun_is_byte_identical(run_dir):
    before = (run_dir / "report.csv").read_bytes()
    assert cli.main(["eval", "--out", str(run_dir)]) == 0
    assert (run_dir / "report.csv").read_bytes() == before
    text = (run_dir / "report.txt").read_bytes()
    assert cli.main(["report", "--out", str(run_dir)]) == 0
    assert (run_dir / "report.txt").read_bytes() == text


def test_train_refuses_test_rows_in_training(run_dir, tmp_path, capsys):
    import shutil

    out = tmp_path / "bad"
    shutil.copytree(run_dir, out)
    lines = (out / "records.csv").read_text().splitlines()
    header = lines[0].split(",")
    col = header.index("split")
    for i, line in enumerate(lines[1:], 1):
        parts = line.split(",")
        if parts[col] == "test":
            parts[col] = "train"
            lines[i] = ",".join(parts)
            break
    (out / "records.csv").write_text("\n".join(lines) + "\n")
    assert cli.main(["train", "--out", str(out), *FAST]) == 2
    assert "clean-baseline" in capsys.readouterr().err


def test_missing_upstream_names_producer(tmp_path, capsys):
    assert cli.main(["tokenize", "--out", str(tmp_path)]) == 2
    assert "flowseq ingest" in capsys.readouterr().err
    assert cli.main(["report", "--out", str(tmp_path)]) == 2
    assert "flowseq eval" in capsys.readouterr().err


def test_config_precedence(tmp_path, monkeypatch):
    ini = tmp_path / "run.ini"
    ini.write_text("[run]\nepochs = 3\nseed = 4\nrule = dyad\n")
    args = cli.build_parser().parse_args(["train", "--config", str(ini), "--seed", "9"])
    monkeypatch.setenv("FLOWSEQ_EPOCHS", "5")
    monkeypatch.setenv("FLOWSEQ_SEED", "6")
    cfg = cli.load_run_config(args)
    assert (cfg.epochs, cfg.seed, cfg.rule) == (5, 9, "dyad")
    assert cfg.rules == ["dyad"] and cfg.features == ["protobytes", "ports"]
    assert cfg.train_config().seed == 9


def test_unknown_config_key(tmp_path, capsys):
    ini = tmp_path / "run.ini"
    ini.write_text("[run]\nepoch = 3\n")
    assert cli.main(["report", "--config", str(ini), "--out", str(tmp_path)]) == 2
    assert "epoch" in capsys.readouterr().err


def test_stride_override(run_dir, tmp_path):
    import shutil

    out = tmp_path / "s"
    shutil.copytree(run_dir, out)
    args = ["--out", str(out), "--feature", "ports", "--rule", "source", *FAST]
    assert cli.main(["score", "--stride", "1", *args]) == 0
    n1 = len((out / "scores" / "ports_source_r0.csv").read_text().splitlines())
    assert cli.main(["score", *args]) == 0
    n3 = len((out / "scores" / "ports_source_r0.csv").read_text().splitlines())
    assert n3 < n1

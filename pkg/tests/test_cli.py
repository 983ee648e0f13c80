import csv
from pathlib import Path

import numpy as np
import pytest
import torch
import yaml

from bifurcate import toy
from bifurcate.cli import config, runs, schemas
from bifurcate.cli.main import main
from bifurcate.errors import ConfigError, IntegrityError

TINY_TOY = ["--set", "train.epochs_per_stage=6", "--set", "train.width=16", "--set", "train.batch_size=32"]


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def check_all_csvs(run_dir):
    found = list(Path(run_dir).rglob("*.csv"))
    assert found
    for p in found:
        schemas.check_csv(p)


def test_config_round_trip():
    cfg = config.resolve("toy-fit", "desk", overrides=["train.lr=0.003", "problem=toy2"])
    assert cfg["train"]["lr"] == 0.003 and cfg["problem"] == "toy2"
    assert yaml.safe_load(config.dump(cfg)) == cfg
    assert config.resolve("toy-selectors", "paper")["train"]["epochs_per_stage"] > 500


def test_config_errors_name_the_field(tmp_path):
    with pytest.raises(ConfigError, match="train.bogus"):
        config.resolve("toy-fit", overrides=["train.bogus=1"])
    with pytest.raises(ConfigError, match="train.batch_size"):
        config.resolve("toy-fit", overrides=["train.batch_size=abc"])
    bad = tmp_path / "c.yaml"
    bad.write_text("toy-fit:\n  selector: [1, 2]\n")
    with pytest.raises(ConfigError, match="selector"):
        config.resolve("toy-fit", config_file=str(bad))
    with pytest.raises(ConfigError):
        config.load_profile("cluster")


def test_exit_codes(tmp_path, capsys):
    assert main(["toy-fit", "--set", "nope=1", "--out", str(tmp_path / "a")]) == 3
    assert main(["ising-train", "--out", str(tmp_path / "b")]) == 4
    assert "ising-gen" in capsys.readouterr().err
    with pytest.raises(SystemExit) as info:
        main(["frobnicate"])
    assert info.value.code == 2


def test_print_config(capsys):
    assert main(["ac-train", "--print-config", "--set", "epochs=3"]) == 0
    assert yaml.safe_load(capsys.readouterr().out)["epochs"] == 3


def test_verify_operator(tmp_path):
    out = tmp_path / "v"
    assert main(["verify-operator", "--out", str(out), "--set", "families=[affine_pair]"]) == 0
    row = read_rows(out / "summary.csv")[0]
    assert row["family"] == "affine_pair" and float(row["valid_fraction"]) == 1.0
    assert float(row["recovery_fraction"]) == 1.0
    man = runs.RunManifest.read(out)
    assert man.status == "complete" and man.finished
    assert set(man.seeds) == {"dataset", "init", "train"}
    assert man.config == config.resolve("verify-operator", overrides=["families=[affine_pair]"])
    check_all_csvs(out)


def test_toy_fit_resume_matches_uninterrupted_run(tmp_path):
    full, part = tmp_path / "full", tmp_path / "part"
    assert main(["toy-fit", "--out", str(full), *TINY_TOY]) == 0
    assert main(["toy-fit", "--out", str(part), *TINY_TOY, "--set", "stop_after_epoch=3"]) == 0
    assert runs.RunManifest.read(part).status == "interrupted"
    assert not (part / runs.MODEL).exists()
    assert main(["resume", str(part / runs.MANIFEST)]) == 0
    assert runs.RunManifest.read(part).status == "complete"
    for name in ("log.csv", "metrics.csv"):
        assert (full / name).read_text() == (part / name).read_text()
    a, b = np.load(full / runs.MODEL), np.load(part / runs.MODEL)
    np.testing.assert_array_equal(a["values"], b["values"])
    # a finished run resumes as a no-op
    before = (part / "log.csv").read_text()
    assert main(["resume", str(part)]) == 0
    assert (part / "log.csv").read_text() == before
    check_all_csvs(full)


def test_rerun_reproduces_csvs(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert main(["toy-fit", "--out", str(d), *TINY_TOY, "--set", "problem=toy2", "--seed", "4"]) == 0
    for name in ("log.csv", "metrics.csv", "data.csv"):
        assert (a / name).read_text() == (b / name).read_text()


def test_corrupted_checkpoint(tmp_path):
    part = tmp_path / "part"
    assert main(["toy-fit", "--out", str(part), *TINY_TOY, "--set", "stop_after_epoch=2"]) == 0
    ck = part / runs.CHECKPOINT
    data = bytearray(ck.read_bytes())
    data[len(data) // 2] ^= 0xFF
    ck.write_bytes(bytes(data))
    with pytest.raises(IntegrityError):
        runs.load_checkpoint(part)
    assert main(["resume", str(part)]) == 5


def test_ising_pipeline(tmp_path):
    gen, tr, ev = tmp_path / "gen", tmp_path / "tr", tmp_path / "ev"
    assert main(["ising-gen", "--out", str(gen), "--set", "n_train=6", "--set", "n_val=2", "--set", "n_test=3",
                 "--set", "max_nodes=12"]) == 0
    assert main(["ising-train", "--out", str(tr), "--set", f"data={gen / 'data'}", "--set", "epochs=2",
                 "--set", "width=4"]) == 0
    assert main(["ising-eval", "--out", str(ev), "--set", f"data={gen / 'data'}", "--set", f"runs=[{tr}]",
                 "--set", "k=3"]) == 0
    t2 = read_rows(ev / "table2.csv")
    assert len(t2) == 1 and int(t2[0]["oracle_violations"]) == 0
    t3 = read_rows(ev / "table3.csv")
    assert {r["mode"] for r in t3} == {"continuous", "rounded"}
    for d in (gen, tr, ev):
        check_all_csvs(d)


def test_ac_pipeline(tmp_path):
    gen, tr, ev, hy = (tmp_path / k for k in ("gen", "tr", "ev", "hy"))
    assert main(["ac-gen", "--out", str(gen), "--set", "n=16", "--set", "n_train=3", "--set", "n_val=2",
                 "--set", "n_test=2"]) == 0
    data = gen / "data"
    common = ["--set", f"data={data}", "--set", "epochs=6", "--set", "width=4", "--set", "modes=4",
              "--set", "M=2", "--set", "val_inits=2"]
    assert main(["ac-train", "--out", str(tr), *common]) == 0
    assert main(["ac-eval", "--out", str(ev), "--set", f"data={data}", "--set", f"runs=[{tr}]",
                 "--set", f"calibrate_with={tr}", "--set", "n_inits=3", "--set", "T=4"]) == 0
    assert main(["ac-hybrid", "--out", str(hy), "--set", f"data={data}", "--set", f"run={tr}",
                 "--set", "instances=1", "--set", "budget=55"]) == 0
    assert len(read_rows(hy / "traces.csv")) == 2 * 55
    for d in (gen, tr, ev, hy):
        check_all_csvs(d)


def test_schema_matching():
    assert schemas.header_matches(["problem", "bifurcation", "manual_2", "manual_4"], schemas.schema_for("table1.csv"))
    assert not schemas.header_matches(["problem", "bifurcation"], schemas.schema_for("table1.csv"))
    assert schemas.schema_for("data/test_index.csv")[0] == "file"
    with pytest.raises(IntegrityError):
        schemas.schema_for("mystery.csv")


def test_saved_model_keeps_its_precision(tmp_path):
    m = toy.new_model(0, 8, dtype=torch.float32)
    runs.save_model(tmp_path / "m.npz", m)
    back = runs.load_model(tmp_path / "m.npz")
    assert back.params.dtype == torch.float32
    np.testing.assert_array_equal(back.params.numpy(), m.params.numpy())
    assert runs.load_model(tmp_path / "m.npz", torch.float64).params.dtype == torch.float64

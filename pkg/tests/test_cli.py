import json
import statistics
from pathlib import Path

import numpy as np
import pytest

from tuckersfda.archive import load_model
from tuckersfda.cli import main
from tuckersfda.configs import SSC
from tuckersfda.data import TimeSeriesDataset, save_dataset


@pytest.fixture
def out(tmp_path, monkeypatch):
    monkeypatch.setenv("TUCKERSFDA_OUT", str(tmp_path / "runs"))
    return tmp_path / "runs"


def run(*argv):
    assert main([*argv, "--quiet"]) == 0


def blobs(path):
    return {p.name: p.read_bytes() for p in sorted(Path(path).iterdir())}


@pytest.fixture
def toy_archive(out):
    run("pretrain", "--task", "toy-negation", "--epochs", "2", "--out", "pre")
    return out / "pre" / "model"


def test_pretrain_writes_run_dir(out, toy_archive):
    d = out / "pre"
    assert {"model", "log.csv", "metrics.json", "resolved.ini"} <= {p.name for p in d.iterdir()}
    assert len((d / "log.csv").read_text().splitlines()) == 3
    assert "backbone = toy-negation" in (d / "resolved.ini").read_text()


def test_pretrain_zero_epochs(out):
    run("pretrain", "--task", "synthetic-2class", "--epochs", "0", "--out", "p0")
    assert (out / "p0" / "log.csv").read_text().splitlines() == ["epoch,loss,acc,f1"]


def test_same_seed_gives_identical_archives(out):
    run("pretrain", "--task", "toy-negation", "--epochs", "1", "--seed", "3", "--out", "a")
    run("pretrain", "--task", "toy-negation", "--epochs", "1", "--seed", "3", "--out", "b")
    assert blobs(out / "a" / "model") == blobs(out / "b" / "model")


def test_rf1_keeps_logits_and_adds_parameters(out, toy_archive):
    run("decompose", "--archive", str(toy_archive), "--rf", "1", "--skip-recovery", "--out", "rf1")
    rep = json.loads((out / "rf1" / "report.json").read_text())
    assert rep["logit_max_abs_change"] <= 1e-7
    assert rep["recovery"] == "skipped"
    dense, fact = load_model(toy_archive), load_model(out / "rf1" / "model")
    assert fact.num_params() > dense.num_params()
    assert rep["param_reduction_pct"] < 100


def test_ssc_shaped_csv_reproduces_core_budget(out, tmp_path):
    rng = np.random.default_rng(0)
    paths = {}
    for split in ("source", "source_test", "target", "target_test"):
        y = np.repeat(np.arange(5), 2)
        ds = TimeSeriesDataset(rng.normal(size=(10, 1, 3000)), y, 5, split)
        paths[split] = tmp_path / f"{split}.csv"
        save_dataset(ds, paths[split])
    sets = [a for k, v in paths.items() for a in ("--set", f"data.{k}={v}")]
    run("pretrain", "--backbone", "ssc", "--epochs", "0", *sets, "--out", "ssc")
    run("decompose", "--archive", "ssc/model", "--rf", "8", "--skip-recovery", "--out", "ssc8")
    rep = json.loads((out / "ssc8" / "report.json").read_text())
    assert (rep["finetuned_params_K"], rep["param_reduction_pct"]) == (1.38, 98.34)
    assert (rep["macs_M"], rep["mac_reduction_pct"]) == (0.80, 93.81)
    assert load_model(out / "ssc" / "model").input_shape == (SSC.input_channels, SSC.seq_len)


def test_core_on_dense_archive_is_refused(out, toy_archive, capsys):
    assert main(["adapt", "--archive", str(toy_archive), "--subspace", "core", "--quiet"]) == 2
    err = capsys.readouterr().err
    assert "decompose" in err and "--rf 8" in err


def test_bad_inputs_exit_2(out, toy_archive, capsys):
    assert main(["adapt", "--archive", str(out / "nowhere")]) == 2
    assert main(["adapt", "--archive", str(toy_archive), "--set", "adapt.colour=red"]) == 2
    assert main(["adapt", "--archive", str(toy_archive), "--subspace", "full", "--lr", "0.003"]) == 2
    assert main(["pretrain", "--task", "cifar"]) == 2
    assert "error:" in capsys.readouterr().err


def adapt_toy(out, archive, name, *extra):
    run("adapt", "--archive", str(archive), "--subspace", "full", "--epochs", "2", "--lr", "0.0005",
        "--out", name, *extra)
    return out / name


def test_adapt_outputs_and_replay(out, toy_archive):
    d = adapt_toy(out, toy_archive, "ad", "--seeds", "0")
    leaf = d / "seed0"
    assert {"log.csv", "distances.csv", "audit.json", "summary.json", "model"} <= {p.name for p in leaf.iterdir()}
    s = json.loads((leaf / "summary.json").read_text())
    assert s["audit_violations"] == 0 and s["audit_checks"] > 0
    assert s["subspace"] == "full" and s["param_reduction_pct"] == 0.0
    run("adapt", "--config", str(d / "resolved.ini"), "--out", "replay")
    assert blobs(d / "seed0" / "model") == blobs(out / "replay" / "seed0" / "model")


def test_evaluate_prints_json(toy_archive, capsys):
    assert main(["evaluate", "--archive", str(toy_archive), "--split", "source_test"]) == 0
    res = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert res["split"] == "source_test" and 0 <= res["f1"] <= 1


def test_report_single_and_three_seeds(out, toy_archive):
    one = adapt_toy(out, toy_archive, "one", "--seeds", "5")
    three = adapt_toy(out, toy_archive, "three", "--seeds", "0", "1", "2")
    run("report", str(one), "--out", "rep1")
    row = (out / "rep1" / "table1.csv").read_text().splitlines()[1].split(",")
    header = (out / "rep1" / "table1.csv").read_text().splitlines()[0].split(",")
    assert float(row[header.index("f1_std")]) == 0.0
    run("report", str(three), "--out", "rep3")
    finals = [json.loads((three / f"seed{s}" / "summary.json").read_text())["f1_final"] for s in range(3)]
    lines = (out / "rep3" / "table1.csv").read_text().splitlines()
    row = dict(zip(lines[0].split(","), lines[1].split(",")))
    assert float(row["f1_mean"]) == pytest.approx(100 * statistics.mean(finals), abs=1e-9)
    assert float(row["f1_std"]) == pytest.approx(100 * statistics.stdev(finals), abs=1e-9)
    assert row["n_seeds"] == "3" and row["seeds"] == "0 1 2"
    assert "±" in (out / "rep3" / "table2.csv").read_text()


def test_report_keeps_arms_apart_and_rejects_duplicates(out, toy_archive):
    run("decompose", "--archive", str(toy_archive), "--rf", "8", "--skip-recovery", "--out", "d8")
    full = adapt_toy(out, toy_archive, "full", "--seeds", "0")
    run("adapt", "--archive", "d8/model", "--subspace", "core", "--epochs", "1", "--lr", "0.0005",
        "--seeds", "0", "--out", "core")
    run("report", str(full), str(out / "core"), "--out", "mixed")
    lines = (out / "mixed" / "table1.csv").read_text().splitlines()
    assert len(lines) == 3
    dup = adapt_toy(out, toy_archive, "dup", "--seeds", "0")
    assert main(["report", str(full), str(dup), "--quiet"]) == 2


def test_lr_sweep_writes_sweep_csv(out, toy_archive):
    run("adapt", "--archive", str(toy_archive), "--subspace", "bn", "--epochs", "1", "--seeds", "0",
        "--lr-sweep", "--set", "adapt.sweep_lrs=5e-4,1e-4", "--out", "sweep")
    rows = (out / "sweep" / "sweep.csv").read_text().splitlines()
    assert len(rows) == 3
    assert (out / "sweep" / "lr0.0005" / "seed0").is_dir()


def test_ratio_subsamples_target(out, toy_archive):
    d = adapt_toy(out, toy_archive, "ratio", "--seeds", "0", "--ratio", "0.05")
    s = json.loads((d / "seed0" / "summary.json").read_text())
    assert s["n_target"] == 4 * 3  # 60 per class at 5% -> 3


def test_low_ratio_moves_full_fine_tuning_more_than_core(out):
    # one pipeline per seed: data, pretraining, decomposition and adaptation
    f1 = {}
    for seed in ("0", "1", "2"):
        run("pretrain", "--task", "overfit", "--epochs", "15", "--lr", "0.003", "--seed", seed, "--out", f"p{seed}")
        run("decompose", "--archive", f"p{seed}/model", "--rf", "8", "--recovery-epochs", "3", "--out", f"d{seed}")
        for sub, archive in (("full", f"p{seed}/model"), ("core", f"d{seed}/model")):
            for ratio in ("1.0", "0.005"):
                name = f"{sub}-{ratio}-{seed}"
                run("adapt", "--archive", archive, "--subspace", sub, "--ratio", ratio, "--epochs", "10",
                    "--lr", "0.0005", "--seeds", seed, "--set", "adapt.batch_size=10", "--out", name)
                summary = json.loads((out / name / f"seed{seed}" / "summary.json").read_text())
                f1.setdefault((sub, ratio), []).append(summary["f1_final"])
    gap = {sub: abs(np.mean(f1[sub, "1.0"]) - np.mean(f1[sub, "0.005"])) for sub in ("full", "core")}
    assert gap["full"] > gap["core"], f1

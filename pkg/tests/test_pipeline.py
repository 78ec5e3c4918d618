import csv
import json

import pytest

from dualsr.checkpoint import file_sha256, load_checkpoint, restore
from dualsr.cli import main
from dualsr.metrics import count_cost
from dualsr.models import spec_param_count
from dualsr.pipeline import (ConfigError, ExperimentConfig, Pipeline, RunLedger, RunLedgerEntry,
                             StageFailure, run_pipeline, sweep)
from dualsr.pruning import PrunePlan
from dualsr.search import ChannelBudget, budget_gate


def micro(out, **kw):
    """Seconds-scale config exercising every stage."""
    d = {
        "out_dir": str(out), "variant": "drn_tiny", "scale": 4, "ratios": [0.3, 0.5, 0.7], "seed": 0,
        "dataset": {"n_train": 6, "n_val": 2, "train_size": 64, "val_size": 64},
        "train": {"total_iters": 3, "batch": 2, "patch_size": 8, "log_every": 3},
        "search": {"epochs": 1, "steps_per_epoch": 1, "batch": 2, "patch_size": 8},
        "prune": {"probe_batches": 1, "batch": 2, "patch_size": 8},
        "finetune": {"total_iters": 2, "batch": 2, "patch_size": 8, "log_every": 2},
        "latency_runs": 1,
    }
    d.update(kw)
    return ExperimentConfig.from_dict(d)


@pytest.fixture(scope="module")
def micro_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    return out, run_pipeline(micro(out))


def test_three_ratios_give_three_triples_and_one_report(micro_run):
    out, reports = micro_run
    assert [r.name for r in reports] == ["baseline", "drn_tiny@0.3", "drn_tiny@0.5", "drn_tiny@0.7"]
    for tag, r in (("r30", 0.3), ("r50", 0.5), ("r70", 0.7)):
        budget = ChannelBudget.load(out / tag / "budget.json")
        plan = PrunePlan.load(out / tag / "plan.json")
        P, _ = restore(load_checkpoint(out / tag / "finetuned.pt"))
        psi = count_cost(P, (8, 8))[0]
        assert psi == budget.params_budget and budget_gate(psi, budget.params_original, r)
        assert {n: len(s) for n, s in plan.selected.items()} == budget.widths
    report = json.loads((out / "report.json").read_text())
    assert len(report["reports"]) == 4 and "Y channel" in report["convention"]
    assert (out / "report.md").read_text().count("\n| ") >= 5
    params = [r.params for r in reports]
    assert params[0] > params[1] > params[2] > params[3]
    assert all(r.latency_s and r.threads == 1 and r.device for r in reports)


def test_ledger_hashes_verify(micro_run):
    out, _ = micro_run
    ledger = RunLedger(out / "ledger.jsonl")
    assert ledger.verify() == []
    stages = [e.stage for e in ledger.entries()]
    assert stages[0] == "train:baseline" and stages[-2:] == ["eval", "bench"]
    assert all(e.status == "ok" for e in ledger.entries())


def test_resume_replays_without_recomputing(micro_run):
    out, reports = micro_run
    n = len(RunLedger(out / "ledger.jsonl").entries())
    before = {p: file_sha256(p) for p in out.rglob("*.pt")}
    again = run_pipeline(micro(out))
    assert len(RunLedger(out / "ledger.jsonl").entries()) == n
    assert {p: file_sha256(p) for p in out.rglob("*.pt")} == before
    assert [r.scores for r in again] == [r.scores for r in reports]


def test_resume_after_interrupted_prune(tmp_path):
    out = tmp_path / "run"
    cfg = micro(out, ratios=[0.3], stages=["train", "search", "prune", "finetune", "eval"])
    first = run_pipeline(cfg)
    ledger = RunLedger(out / "ledger.jsonl")
    hashes = {e.stage: e.outputs for e in ledger.entries()}
    # simulate a crash mid-prune: drop the prune outputs and everything after
    (out / "r30" / "pruned.pt").unlink()
    second = run_pipeline(cfg)
    new = {e.stage: e.outputs for e in ledger.entries()}
    assert new == hashes
    assert second[1].scores == first[1].scores


def test_identical_runs_have_identical_hashes(tmp_path):
    cfg = dict(ratios=[0.5], stages=["train", "search", "prune", "finetune", "eval"])
    run_pipeline(micro(tmp_path / "a", **cfg))
    run_pipeline(micro(tmp_path / "b", **cfg))
    a = [(e.stage, e.config_hash, e.outputs) for e in RunLedger(tmp_path / "a" / "ledger.jsonl").entries()]
    b = [(e.stage, e.config_hash, e.outputs) for e in RunLedger(tmp_path / "b" / "ledger.jsonl").entries()]
    assert [x[:2] for x in a] == [x[:2] for x in b]
    assert [{k: v["sha256"] for k, v in x[2].items()} for x in a] == \
        [{k: v["sha256"] for k, v in x[2].items()} for x in b]


def test_ratio_zero_is_train_and_eval(tmp_path):
    reports = run_pipeline(micro(tmp_path, ratios=[0.0], stages=["train", "eval"]))
    assert [r.name for r in reports] == ["baseline", "drn_tiny@0"]
    assert reports[0].scores == reports[1].scores and reports[0].params == reports[1].params
    assert [e.stage for e in RunLedger(tmp_path / "ledger.jsonl").entries()] == ["train:baseline", "eval"]


def test_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        micro(tmp_path, stages=["train", "prune"])
    with pytest.raises(ConfigError):
        micro(tmp_path, ratios=[1.0])
    with pytest.raises(ConfigError):
        micro(tmp_path, bogus=1)
    with pytest.raises(ConfigError):
        micro(tmp_path, train={"lambda": -1})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"profile": "nope", "out_dir": str(tmp_path)})


def test_profiles_resolve(tmp_path):
    desk = ExperimentConfig.from_dict({"profile": "desk", "out_dir": str(tmp_path)})
    assert desk.variant == "drn_tiny" and desk.train["total_iters"] == 2000
    assert desk.dataset["n_train"] == 32
    big = ExperimentConfig.from_dict({"profile": "paper-ish", "out_dir": str(tmp_path)})
    assert big.variant == "drn_s_like" and big.train_config().patch_size == 48


def test_stage_failure_is_recorded(tmp_path):
    pipe = Pipeline(micro(tmp_path))

    def boom():
        raise RuntimeError("kaput")

    with pytest.raises(StageFailure):
        pipe.run_stage("train:x", {}, {}, boom)
    e = pipe.ledger.entries()[-1]
    assert e.status == "failed" and "kaput" in e.error


def test_ledger_is_append_only(tmp_path):
    ledger = RunLedger(tmp_path / "l.jsonl")
    for i in range(3):
        ledger.append(RunLedgerEntry(f"s{i}", "h", {}, {}, {}, 0.0))
    text = (tmp_path / "l.jsonl").read_text()
    ledger.append(RunLedgerEntry("s3", "h", {}, {}, {}, 0.0))
    assert (tmp_path / "l.jsonl").read_text().startswith(text)


@pytest.mark.parametrize("param,values", [("lambda", [0.001, 0.01, 0.1, 1, 10]), ("lambda", [0.1]),
                                          ("gamma", [0.1, 1, 10])])
def test_sweeps_emit_csv_and_plot(tmp_path, param, values):
    summary = sweep(param, values, micro(tmp_path, ratios=[0.3]))
    with open(summary["csv"]) as f:
        rows = list(csv.reader(f))
    assert rows[0] == [param, "psnr"] and len(rows) == len(values) + 1
    assert (tmp_path / f"sweep_{param}.png").stat().st_size > 0
    assert summary["best"] in values
    if param == "gamma":
        assert "gamma1_vs_min" in summary and summary["gamma1_vs_min"] >= 0


def test_cli_exit_codes(tmp_path, monkeypatch):
    assert main(["pipeline", "--profile", "desk", "--out", str(tmp_path), "--ratios", "1.5"]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["pipeline", "--config", str(bad)]) == 2
    monkeypatch.delenv("DUALSR_DATA_ROOT", raising=False)
    assert main(["train", "--out", str(tmp_path / "t")]) == 2
    assert main(["train", "--out", str(tmp_path / "t"), "--data-root", str(tmp_path / "missing")]) == 3


def test_cli_stage_commands(tmp_path, desk_root, monkeypatch, capsys):
    monkeypatch.setenv("DUALSR_DATA_ROOT", str(desk_root))
    t = tmp_path / "train"
    assert main(["train", "--out", str(t), "--iters", "2", "--batch-size", "2", "--patch-size", "8"]) == 0
    ck = t / "checkpoint.pt"
    assert main(["search", "--checkpoint", str(ck), "--ratio", "0.3", "--epochs", "1", "--out",
                 str(tmp_path / "b.json"), "--batch-size", "2", "--patch-size", "8"]) == 0
    assert main(["prune", "--checkpoint", str(ck), "--budget", str(tmp_path / "b.json"), "--gamma", "1",
                 "--out", str(tmp_path / "p.pt"), "--plan", str(tmp_path / "plan.json"),
                 "--batch-size", "2", "--patch-size", "8"]) == 0
    budget = ChannelBudget.load(tmp_path / "b.json")
    P, _ = restore(load_checkpoint(tmp_path / "p.pt"))
    assert spec_param_count(P.spec) == budget.params_budget
    assert main(["eval", "--checkpoint", str(tmp_path / "p.pt"), "--data", str(desk_root / "val"),
                 "--report", str(tmp_path / "rep.json")]) == 0
    assert json.loads((tmp_path / "rep.json").read_text())["scores"]["val"][0] > 0
    assert (tmp_path / "rep.md").exists()
    assert main(["bench", "--checkpoint", str(tmp_path / "p.pt"), "--runs", "1"]) == 0
    assert json.loads(capsys.readouterr().out.strip().splitlines()[-1])["threads"] == 1

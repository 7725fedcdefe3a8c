import json

import pytest

from mgnm.cli import main


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv("MGNM_SEED", raising=False)
    (tmp_path / "run.cfg").write_text("train.max_epochs=2\nrun.output_dir=runs/a\nsynth.users=60\nsynth.items=30\n")
    return tmp_path


def kv(path):
    return dict(line.split("=", 1) for line in path.read_text().splitlines())


def test_synth_train_evaluate_reproduces_best_validation(workdir, capsys):
    assert main(["synth", "--config", "run.cfg"]) == 0
    assert main(["prepare", "--config", "run.cfg"]) == 0
    assert main(["train", "--config", "run.cfg"]) == 0
    assert main(["evaluate", "--config", "run.cfg"]) == 0
    run = workdir / "runs" / "a"
    trained, evaluated = kv(run / "report.kv"), kv(run / "evaluate.kv")
    assert trained["valid_recall_at_20"] == evaluated["valid_recall_at_20"]
    assert {k: v for k, v in trained.items() if k.startswith(("recall", "ndcg"))} == \
        {k: v for k, v in evaluated.items() if k.startswith(("recall", "ndcg"))}
    log = [json.loads(line) for line in (run / "train_log.jsonl").read_text().splitlines()]
    assert len(log) == 2 and max(e["valid_recall@20"] for e in log) == float(trained["valid_recall_at_20"])
    assert "recall" in capsys.readouterr().out


def test_modality_toggle_changes_fingerprint(workdir):
    assert main(["synth", "--config", "run.cfg"]) == 0
    assert main(["train", "--config", "run.cfg", "--set", "train.max_epochs=1"]) == 0
    both = kv(workdir / "runs" / "a" / "report.kv")["fingerprint"]
    assert main(["train", "--config", "run.cfg", "--set", "train.max_epochs=1", "--set", "local.modalities=text",
                 "--set", "run.output_dir=runs/t"]) == 0
    text = kv(workdir / "runs" / "t" / "report.kv")["fingerprint"]
    assert both != text
    # evaluating with a different config than the checkpoint was trained with is a user error
    assert main(["evaluate", "--config", "run.cfg", "--set", "train.max_epochs=1", "--set", "local.modalities=text"]) == 1


def test_recommended_weight_overrides(workdir):
    assert main(["synth", "--config", "run.cfg"]) == 0
    assert main(["train", "--config", "run.cfg", "--set", "loss.beta=1e-4", "--set", "loss.delta=1e-4",
                 "--set", "train.max_epochs=1"]) == 0
    saved = kv(workdir / "runs" / "a" / "config.txt")
    assert float(saved["loss.beta"]) == 1e-4 and float(saved["loss.delta"]) == 1e-4


def test_env_seed_changes_the_run(workdir, monkeypatch):
    assert main(["synth", "--config", "run.cfg"]) == 0
    monkeypatch.setenv("MGNM_SEED", "7")
    assert main(["train", "--config", "run.cfg", "--set", "train.max_epochs=1"]) == 0
    assert kv(workdir / "runs" / "a" / "config.txt")["train.seed"] == "7"


def test_user_errors_exit_one(workdir, capsys):
    assert main(["train", "--config", "run.cfg"]) == 1  # no data yet
    assert main(["train", "--config", "missing.cfg"]) == 1
    assert main(["train", "--config", "run.cfg", "--set", "train.bogus=1"]) == 1
    assert main(["explode"]) == 1
    err = capsys.readouterr().err
    assert "mgnm.config" in err and "usage" in err


def test_internal_errors_exit_two(workdir, monkeypatch):
    import mgnm.cli as cli

    def boom(cfg):
        raise RuntimeError("bug")

    monkeypatch.setitem(cli.COMMANDS, "prepare", boom)
    assert main(["prepare", "--config", "run.cfg"]) == 2


def test_default_pipeline_finishes_quickly(tmp_path, monkeypatch):
    import time

    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv("MGNM_SEED", raising=False)
    t0 = time.perf_counter()
    for command in ("synth", "prepare", "train", "evaluate"):
        assert main([command]) == 0
    assert time.perf_counter() - t0 < 300
    assert (tmp_path / "runs" / "default" / "model.ckpt").exists()

import json

import pytest

from stsgr.cli import main


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    spec = root / "spec.yaml"
    spec.write_text("n_frames: 3\nmax_objects: 3\nvisual_dim: 6\nn_candidates: 5\n")
    cfg = root / "cfg.yaml"
    cfg.write_text("task: both\nd_h: 8\nd_ff: 16\nheads: 2\nlabel_dim: 4\nmin_count: 1\nmax_steps: 3\nbatch_size: 4\n")
    assert main(["synth", "--spec", str(spec), "--n", "10", "--out", str(root / "data"), "--seed", "4"]) == 0
    assert main(["train", "--config", str(cfg), "--data", str(root / "data"), "--out", str(root / "run")]) == 0
    return root


def test_train_outputs(workdir):
    run = workdir / "run"
    assert (run / "model.stsgr").read_bytes()[:6] == b"STSGR1"
    meta = json.loads((run / "model.json").read_text())
    assert meta["config"]["d_h"] == 8
    metrics = json.loads((run / "metrics.json").read_text())
    assert metrics["steps"] == 3 and metrics["config"]["task"] == "both"


def test_eval_generate_jsonl(workdir, capsys):
    code = main(["eval", "--task", "generate", "--checkpoint", str(workdir / "run" / "model.stsgr"),
                 "--data", str(workdir / "data"), "--beam", "2"])
    assert code == 0
    out, err = capsys.readouterr()
    lines = [json.loads(l) for l in out.splitlines()]
    assert len(lines) == 10
    assert {"dialog_id", "turn", "question", "top_answers"} <= set(lines[0])
    assert len(lines[0]["top_answers"]) <= 2
    assert "bleu4" in json.loads(err.strip().splitlines()[-1])


def test_eval_retrieve_to_file(workdir, capsys, tmp_path):
    preds = tmp_path / "p.jsonl"
    code = main(["eval", "--task", "retrieve", "--checkpoint", str(workdir / "run" / "model.stsgr"),
                 "--data", str(workdir / "data"), "--predictions", str(preds)])
    assert code == 0
    metrics = json.loads(capsys.readouterr().out)
    recs = [json.loads(l) for l in preds.read_text().splitlines()]
    assert 1 <= metrics["mean_rank"] <= 5
    assert sum(r["gt_rank"] for r in recs) / len(recs) == metrics["mean_rank"]
    scores = [c["score"] for c in recs[0]["ranked_candidates"]]
    assert scores == sorted(scores, reverse=True)


def test_ablate_prints_table(workdir, capsys, tmp_path):
    cfg = workdir / "abl.yaml"
    cfg.write_text("d_h: 8\nd_ff: 16\nheads: 2\nlabel_dim: 4\nmin_count: 1\nmax_steps: 1\nbatch_size: 4\n")
    out_json = tmp_path / "abl.json"
    assert main(["ablate", "--config", str(cfg), "--data", str(workdir / "data"), "--out", str(out_json)]) == 0
    text = capsys.readouterr().out
    assert "STSGR w/o union box features" in text and "of 6 ablations" in text
    assert len(json.loads(out_json.read_text())["rows"]) == 7


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--dh", "4"]) == 0
    assert "PASS" in capsys.readouterr().out


@pytest.mark.parametrize("argv", [
    ["train", "--data", "/nonexistent", "--out", "/tmp/x"],
    ["eval", "--task", "generate", "--checkpoint", "/nonexistent.stsgr", "--data", "/nonexistent"],
    ["synth", "--n", "0", "--out", "/tmp/never"],
])
def test_validation_errors_exit_two(argv, capsys):
    assert main(argv) == 2
    assert "error:" in capsys.readouterr().err


def test_bad_config_exits_two(tmp_path, workdir, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("d_h: 10\nheads: 4\n")
    assert main(["train", "--config", str(cfg), "--data", str(workdir / "data"), "--out", str(tmp_path)]) == 2
    assert "divisible" in capsys.readouterr().err


def test_task_mismatch_exits_two(tmp_path, workdir):
    cfg = tmp_path / "g.yaml"
    cfg.write_text("d_h: 8\nd_ff: 16\nheads: 2\nlabel_dim: 4\nmin_count: 1\nmax_steps: 1\n")
    assert main(["train", "--config", str(cfg), "--data", str(workdir / "data"), "--out", str(tmp_path / "g")]) == 0
    assert main(["eval", "--task", "retrieve", "--checkpoint", str(tmp_path / "g" / "model.stsgr"),
                 "--data", str(workdir / "data")]) == 2


def test_retrieval_training_without_candidates_exits_two(tmp_path, workdir, capsys):
    assert main(["synth", "--n", "4", "--out", str(tmp_path / "plain")]) == 0
    cfg = tmp_path / "r.yaml"
    cfg.write_text("task: retrieve\nd_h: 8\nd_ff: 16\nheads: 2\nmin_count: 1\nmax_steps: 1\n")
    assert main(["train", "--config", str(cfg), "--data", str(tmp_path / "plain"), "--out", str(tmp_path / "r")]) == 2
    assert "candidates" in capsys.readouterr().err


def test_synth_seed_override_is_deterministic(tmp_path):
    for name in ("a", "b"):
        assert main(["synth", "--n", "4", "--out", str(tmp_path / name), "--seed", "8"]) == 0
    assert (tmp_path / "a" / "dialogs.jsonl").read_text() == (tmp_path / "b" / "dialogs.jsonl").read_text()

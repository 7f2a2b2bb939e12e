import csv
import io
import json

import pytest

from proto_shift import cli


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def tree_bytes(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir())}


@pytest.fixture(scope="module")
def bench(tmp_path_factory):
    d = tmp_path_factory.mktemp("bench")
    assert cli.main(["synth", "--preset", "easy-shift", "--seed", "7", "--out", str(d)]) == 0
    return d


def test_synth_is_deterministic(tmp_path, capsys, bench):
    code, out, _ = run(capsys, "synth", "--preset", "easy-shift", "--seed", "7", "--out", tmp_path)
    assert code == 0 and out == ""
    assert tree_bytes(tmp_path) == tree_bytes(bench)
    man = json.loads((bench / "manifest.json").read_text())
    assert man["synth"]["seed"] == 7 and man["synth"]["gamma"] == 0.5


def test_synth_seed_from_env(tmp_path, capsys, monkeypatch, bench):
    monkeypatch.setenv(cli.SEED_ENV, "7")
    assert run(capsys, "synth", "--preset", "easy-shift", "--out", tmp_path)[0] == 0
    assert tree_bytes(tmp_path) == tree_bytes(bench)
    monkeypatch.setenv(cli.SEED_ENV, "seven")
    assert run(capsys, "synth", "--out", tmp_path / "x")[0] == 2


def test_synth_config_file(tmp_path, capsys):
    cfg = tmp_path / "s.json"
    cfg.write_text(json.dumps({"branching": 2, "depth": 3, "n_train": 4, "n_val": 2, "n_test": 2,
                               "n_tgt_train": 2, "samples_per_class_per_domain": 5}))
    assert run(capsys, "synth", "--config", cfg, "--out", tmp_path / "b")[0] == 0
    cfg.write_text(json.dumps({"branches": 2}))
    code, _, err = run(capsys, "synth", "--config", cfg, "--out", tmp_path / "c")
    assert code == 2 and "branches" in err


def test_unknown_preset_is_usage_error(tmp_path, capsys):
    code, _, err = run(capsys, "synth", "--preset", "very-hard", "--out", tmp_path)
    assert code == 2 and "very-hard" in err
    assert not any(tmp_path.iterdir())


def test_argparse_errors_exit_2(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["frobnicate"])
    assert exc.value.code == 2


def train_args(bench, out, *extra):
    return ["train", "--data", bench, "--out", out, "--iterations", 30, "--seed", 5, *extra]


def test_train_and_eval_reproducible(tmp_path, capsys, bench):
    assert run(capsys, *train_args(bench, tmp_path / "a"))[0] == 0
    assert run(capsys, *train_args(bench, tmp_path / "b"))[0] == 0
    a, b = tree_bytes(tmp_path / "a"), tree_bytes(tmp_path / "b")
    assert a.keys() == {"model.ckpt", "train_log.jsonl", "run_config.json"}
    assert a["model.ckpt"] == b["model.ckpt"] and a["train_log.jsonl"] == b["train_log.jsonl"]
    cfg_a, cfg_b = json.loads(a["run_config.json"]), json.loads(b["run_config.json"])
    assert cfg_a.pop("out") != cfg_b.pop("out") and cfg_a == cfg_b
    # the resolved config replays the same run
    replay = tmp_path / "replay.json"
    replay.write_text(json.dumps(dict(cfg_a, out=str(tmp_path / "c"))))
    assert run(capsys, "train", "--config", replay)[0] == 0
    assert (tmp_path / "c" / "model.ckpt").read_bytes() == a["model.ckpt"]
    rows = [json.loads(line) for line in (tmp_path / "a" / "train_log.jsonl").read_text().splitlines()]
    assert len(rows) == 30 and rows[-1]["iter"] == 29 and "val_acc" in rows[-1]
    assert set(rows[0]) == {"iter", "loss", "lr_encoder", "lr_gcn"}

    args = ["eval", "--checkpoint", tmp_path / "a" / "model.ckpt", "--data", bench,
            "--episodes", 40, "--seed", 3]
    code, out1, _ = run(capsys, *args, "--csv", tmp_path / "acc.csv")
    assert code == 0
    rep = json.loads(out1)
    assert set(rep) == {"n", "mean", "ci95"} and rep["n"] == 40 and 0 <= rep["mean"] <= 1
    _, out2, _ = run(capsys, *args, "--workers", 2)
    assert out1 == out2
    assert len((tmp_path / "acc.csv").read_text().splitlines()) == 41


def test_train_config_file_and_flag_precedence(tmp_path, capsys, bench):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"data": str(bench), "out": str(tmp_path / "from_file"),
                               "train": {"iterations": 12, "lam": 0.3, "setting": "tgt"}}))
    assert run(capsys, "train", "--config", cfg, "--iterations", 8, "--out", tmp_path / "o")[0] == 0
    used = json.loads((tmp_path / "o" / "run_config.json").read_text())
    assert used["train"]["iterations"] == 8 and used["train"]["lam"] == 0.3
    assert used["train"]["setting"] == "tgt"
    assert not (tmp_path / "from_file").exists()
    assert len((tmp_path / "o" / "train_log.jsonl").read_text().splitlines()) == 8


@pytest.mark.parametrize("body,needle", [
    ({"bogus": 1}, "bogus"),
    ({"train": {"learning_rate": 0.1}}, "learning_rate"),
    ({"train": {"iterations": 0}}, "iterations"),
    ({"preset": "imagenet"}, "imagenet"),
    ({"distance_mode": "cosine"}, "distance_mode"),
])
def test_invalid_config_rejected_before_work(tmp_path, capsys, bench, body, needle):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps(body))
    code, _, err = run(capsys, "train", "--config", cfg, "--data", bench, "--out", tmp_path / "o")
    assert code == 2 and needle in err
    assert not (tmp_path / "o").exists()


def test_eval_missing_checkpoint(tmp_path, capsys, bench):
    code, out, err = run(capsys, "eval", "--checkpoint", tmp_path / "none.ckpt", "--data", bench)
    assert code == 1 and out == "" and "none.ckpt" in err


def test_eval_corrupt_checkpoint(tmp_path, capsys, bench):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"\x05\x00\x00\x00\x00\x00\x00\x00{}")
    assert run(capsys, "eval", "--checkpoint", bad, "--data", bench)[0] == 1


def test_sweep_csv(tmp_path, capsys, bench):
    args = ["sweep", "--data", bench, "--iterations", 10, "--seed", 1, "--test-episodes", 20]
    code, out, _ = run(capsys, *args, "--grid", "0,0.5,1")
    assert code == 0
    rows = list(csv.DictReader(io.StringIO(out)))
    assert out.splitlines()[0] == "param,mean,ci95"
    assert [float(r["param"]) for r in rows] == [0.0, 0.5, 1.0]
    assert run(capsys, *args, "--grid", "0,0.5,1")[1] == out
    assert run(capsys, *args, "--grid", "0,1.5")[0] == 2
    assert run(capsys, *args, "--grid", "a,b")[0] == 2


def test_default_grid_has_eleven_points():
    assert len(cli._parse_grid(cli.DEFAULT_GRID)) == 11


def test_ablate_csv(tmp_path, capsys, bench):
    out_csv = tmp_path / "abl.csv"
    args = ["ablate", "--data", bench, "--iterations", 10, "--test-episodes", 20, "--csv", out_csv]
    assert run(capsys, *args)[0] == 0
    rows = list(csv.DictReader(io.StringIO(out_csv.read_text())))
    assert [r["param"] for r in rows] == ["rand", "fc"]
    assert run(capsys, "ablate", "--data", bench, "--kind", "dropout")[0] == 2


def test_training_failure_exits_1(tmp_path, capsys, bench):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"train": {"n_way": 60}}))
    code, _, err = run(capsys, "train", "--config", cfg, "--data", bench, "--out", tmp_path / "o")
    assert code == 1 and "CapacityError" in err

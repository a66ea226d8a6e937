import json
from pathlib import Path

import pytest

from pih2t.cli import ConfigError, RunConfig, cmd_eval, load_run_config, main
from pih2t.longtail_data import LabeledDataset, load_dataset, read_manifest, read_profile_csv, save_dataset
from pih2t.trainer import Checkpoint, predict_logits

TINY = """
[run]
seed = 3
out = {out}

[data]
class_count = 4
dim = 6
base_count = 120
imbalance_factor = {rho}
mean_separation = 5.0
test_per_class = 30

[model]
widths = 16
feature_shape = 1,2,4

[train]
mode = {mode}
stage1_epochs = {e1}
stage2_epochs = 2
batch_size = 32
lr = 0.05
lr_decay_epochs = 3

[analysis]
oracle_trials = 200
oracle_dims = 2,4
boundary_classes = 0,3
force_batches = 3
"""


def _config(tmp_path, name="run", mode="pi_h2t", rho=20, e1=4):
    out = tmp_path / name
    path = tmp_path / f"{name}.ini"
    path.write_text(TINY.format(out=out, mode=mode, rho=rho, e1=e1))
    return path, out


def _run(*argv):
    return main([str(a) for a in argv])


def test_toy_config_parses():
    cfg = load_run_config(Path(__file__).parents[1] / "configs" / "toy.ini")
    assert cfg.data.class_count == 10 and cfg.data.imbalance_factor == 100
    assert cfg.train.mode == "pi_h2t" and cfg.train.stage2_epochs == 10


def test_config_text_roundtrip(tmp_path):
    path, _ = _config(tmp_path)
    cfg = load_run_config(path)
    again = tmp_path / "again.ini"
    again.write_text(cfg.to_text())
    assert load_run_config(again) == cfg
    assert cfg.digest() == load_run_config(again).digest()


def test_digest_ignores_seed_and_out():
    import dataclasses

    base = RunConfig()
    assert dataclasses.replace(base, seed=9, out="x").digest() == base.digest()
    assert dataclasses.replace(base, arch="small_cnn").digest() != base.digest()


@pytest.mark.parametrize(
    "text",
    ["[bogus]\nx = 1\n", "[train]\nlr = fast\n", "[train]\nnope = 1\n", "[train]\nmode = other\n",
     "[analysis]\nwhich = margin,tsne\n", "no header\n"],
)  # fmt: skip
def test_config_errors(tmp_path, text):
    path = tmp_path / "bad.ini"
    path.write_text(text)
    with pytest.raises(ConfigError):
        load_run_config(path)


def test_usage_errors_exit_1(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 1
    assert _run("train", "--config", tmp_path / "missing.ini") == 1
    bad = tmp_path / "bad.ini"
    bad.write_text("[train]\nlr = -1\n")
    assert _run("synth", "--config", bad) == 1


def test_train_without_data_is_config_error(tmp_path):
    path, out = _config(tmp_path)
    assert _run("train", "--config", path) == 1


def test_runtime_error_exit_2(tmp_path):
    path, out = _config(tmp_path, e1=2)
    assert _run("synth", "--config", path) == 0
    # lr large enough to blow up the loss
    text = path.read_text().replace("lr = 0.05", "lr = 1e200")
    path.write_text(text)
    assert _run("train", "--config", path) == 2


def test_bad_threads_env(tmp_path, monkeypatch):
    path, _ = _config(tmp_path)
    monkeypatch.setenv("PIH2T_THREADS", "zero")
    assert _run("synth", "--config", path) == 1


def test_synth_outputs(tmp_path):
    path, out = _config(tmp_path)
    assert _run("synth", "--config", path) == 0
    manifest = read_manifest(out / "data" / "train")
    want = [round(120 * 20 ** (-i / 3)) for i in range(4)]
    assert [int(c) for c in manifest["counts"].split(",")] == want == [120, 44, 16, 6]
    assert list(load_dataset(out / "data" / "train").counts) == want
    assert manifest["config_hash"] == load_run_config(path).digest() and manifest["run_seed"] == "3"
    assert list(read_profile_csv(out / "data" / "profile.csv").counts) == want
    assert (out / "data" / "profile.csv").read_text().startswith("# config_hash=")
    snapshot = {p: p.read_bytes() for p in (out / "data").rglob("*") if p.is_file()}
    assert _run("synth", "--config", path) == 0
    assert {p: p.read_bytes() for p in snapshot} == snapshot


def test_synth_balanced(tmp_path):
    path, out = _config(tmp_path, rho=1)
    assert _run("synth", "--config", path) == 0
    assert set(load_dataset(out / "data" / "train").counts) == {120}


def test_seed_flag_overrides(tmp_path):
    path, out = _config(tmp_path)
    assert _run("synth", "--config", path, "--seed", 11, "--out", tmp_path / "other") == 0
    assert read_manifest(tmp_path / "other" / "data" / "train")["run_seed"] == "11"


def _metrics(path):
    lines = path.read_text().splitlines()
    return lines[0], lines[1].split(","), [dict(zip(lines[1].split(","), l.split(","))) for l in lines[2:]]


def test_train_ce_baseline_single_stage(tmp_path):
    path, out = _config(tmp_path, mode="ce_baseline")
    assert _run("synth", "--config", path) == 0
    assert _run("train", "--config", path) == 0
    assert (out / "stage1.ckpt").exists() and not (out / "stage2.ckpt").exists()
    stamp, header, rows = _metrics(out / "metrics.csv")
    assert header == ["stage", "epoch", "loss", "train_acc", "overall_acc", "head_acc", "med_acc", "tail_acc",
                      "mean_r", "head_fusing_frac"]  # fmt: skip
    assert {r["stage"] for r in rows} == {"1"} and len(rows) == 4


def test_train_pi_h2t_and_artifacts(tmp_path):
    path, out = _config(tmp_path)
    assert _run("synth", "--config", path) == 0
    assert _run("train", "--config", path) == 0
    digest = load_run_config(path).digest()
    stamp, _, rows = _metrics(out / "metrics.csv")
    assert stamp == f"# config_hash={digest} seed=3"
    stage2 = [r for r in rows if r["stage"] == "2"]
    assert len(stage2) == 2 and all(0 <= float(r["mean_r"]) <= 1 for r in stage2)
    for name in ("stage1.ckpt", "stage2.ckpt"):
        ck = Checkpoint.load(out / name)
        assert ck.config_hash == digest and ck.seed == 3
    assert (out / "config.ini").read_text().startswith(f"# config_hash={digest} seed=3")
    assert load_run_config(out / "config.ini") == load_run_config(path)

    first = {p.name: p.read_bytes() for p in out.iterdir() if p.is_file()}
    assert _run("train", "--config", path) == 0
    assert {p.name: p.read_bytes() for p in out.iterdir() if p.is_file()} == first

    assert _run("eval", "--config", path, "--checkpoint", out / "stage2.ckpt", "--dataset", out / "data" / "test") == 0
    report = json.loads((out / "eval.json").read_text())
    assert report["config_hash"] == digest and report["stage"] == "stage2"
    assert 0 <= report["metrics"]["overall"] <= 1
    blob = (out / "eval.json").read_bytes()
    assert _run("eval", "--config", path, "--checkpoint", out / "stage2.ckpt", "--dataset", out / "data" / "test") == 0
    assert (out / "eval.json").read_bytes() == blob

    assert _run("analyze", "--config", path, "--checkpoint", out / "stage2.ckpt", "--dataset", out / "data" / "train") == 0
    names = sorted(p.name for p in (out / "analysis").iterdir())
    assert names == ["boundary.json", "embeddings.csv", "forces.txt", "margin.csv", "margin.txt", "oracles.csv", "oracles.txt"]
    for p in (out / "analysis").iterdir():
        assert digest in p.read_text()
    oracle_rows = (out / "analysis" / "oracles.csv").read_text().splitlines()[2:]
    assert len(oracle_rows) == 4 and all(r.split(",")[3] == "0" for r in oracle_rows)
    snapshot = {p.name: p.read_bytes() for p in (out / "analysis").iterdir()}
    assert _run("analyze", "--config", path, "--checkpoint", out / "stage2.ckpt", "--dataset", out / "data" / "train") == 0
    assert {p.name: p.read_bytes() for p in (out / "analysis").iterdir()} == snapshot


def test_analyze_margin_on_untrained(tmp_path):
    path, out = _config(tmp_path, e1=0)
    assert _run("synth", "--config", path) == 0
    assert _run("train", "--config", path) == 0
    assert Checkpoint.load(out / "stage1.ckpt").epoch == 0
    rc = _run("analyze", "--config", path, "--checkpoint", out / "stage1.ckpt", "--dataset", out / "data" / "test",
              "--which", "margin")  # fmt: skip
    assert rc == 0 and "trained=False" in (out / "analysis" / "margin.txt").read_text()


def test_analyze_single_sample_and_oracles_only(tmp_path):
    path, out = _config(tmp_path)
    assert _run("synth", "--config", path) == 0
    assert _run("train", "--config", path) == 0
    one = load_dataset(out / "data" / "test")
    save_dataset(LabeledDataset(one.inputs[:1], one.labels[:1], one.class_count), tmp_path / "one", seed=0)
    rc = _run("analyze", "--config", path, "--checkpoint", out / "stage2.ckpt", "--dataset", tmp_path / "one",
              "--which", "embeddings", "--out", tmp_path / "single")  # fmt: skip
    assert rc == 0
    lines = (tmp_path / "single" / "analysis" / "embeddings.csv").read_text().splitlines()
    assert len(lines) == 3  # stamp, header, one row
    assert _run("analyze", "--config", path, "--which", "oracles", "--out", tmp_path / "o") == 0
    assert _run("analyze", "--config", path, "--which", "margin", "--out", tmp_path / "o") == 1


def test_eval_perfect_classifier(tmp_path):
    path, out = _config(tmp_path)
    assert _run("synth", "--config", path) == 0
    assert _run("train", "--config", path) == 0
    ck = Checkpoint.load(out / "stage2.ckpt")
    test = load_dataset(out / "data" / "test")
    preds = predict_logits(ck, test).argmax(1)
    # relabel the test set with the model's own predictions: accuracy must be 1
    relabelled = LabeledDataset(test.inputs, preds, test.class_count)
    save_dataset(relabelled, tmp_path / "self", seed=0)
    payload = cmd_eval(out / "stage2.ckpt", tmp_path / "self", tmp_path / "self_out")
    assert payload["metrics"]["overall"] == 1.0

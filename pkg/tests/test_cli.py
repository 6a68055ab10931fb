import json
from pathlib import Path

import numpy as np

from sapo import checkpoint
from sapo.cli import LOCK_NAME, main
from sapo.config import load_config
from sapo.experiments import fresh_model

REPO = Path(__file__).resolve().parents[1]

SMALL = {
    "seed": 3,
    "task": {"kind": "pattern", "vocab_size": 8, "prompt_len": 2, "response_len": 4, "count": 60},
    "model": {"dim": 4, "context_window": 4, "hidden": 8},
    "sft": {"epochs": 2, "lr": 0.01, "batch_size": 8},
    "trainer": {"iterations": 6, "sampling_batch": 4, "training_batch": 4, "lr": 0.01,
                "eval_every": 3, "augment": {"n_seg": 2}},
}


def write_cfg(tmp_path, data=None, name="cfg.json", **over):
    data = json.loads(json.dumps(data or SMALL))
    data.update(over)
    path = tmp_path / name
    path.write_text(json.dumps(data))
    return str(path)


def run(argv, capsys):
    code = main(argv)
    out = capsys.readouterr().out
    return code, out


def test_gen_data(tmp_path, capsys):
    cfg = write_cfg(tmp_path)
    code, out = run(["gen-data", "--config", cfg, "--out", str(tmp_path / "a")], capsys)
    assert code == 0 and json.loads(out)["count"] == 60
    assert len((tmp_path / "a" / "dataset.jsonl").read_text().splitlines()) == 60
    run(["gen-data", "--config", cfg, "--out", str(tmp_path / "b")], capsys)
    assert (tmp_path / "a" / "dataset.jsonl").read_bytes() == (tmp_path / "b" / "dataset.jsonl").read_bytes()
    assert not (tmp_path / "a" / LOCK_NAME).exists()


def test_gen_data_rejects_zero_count(tmp_path, capsys):
    bad = json.loads(json.dumps(SMALL))
    bad["task"]["count"] = 0
    assert main(["gen-data", "--config", write_cfg(tmp_path, bad), "--out", str(tmp_path / "o")]) == 2


def test_unknown_config_key(tmp_path):
    bad = json.loads(json.dumps(SMALL))
    bad["trainer"]["learning_rate"] = 0.1
    assert main(["train", "--config", write_cfg(tmp_path, bad), "--out", str(tmp_path / "o")]) == 2


def test_missing_config_file(tmp_path):
    assert main(["train", "--config", str(tmp_path / "nope.json")]) == 2


def test_sft_zero_epochs_is_fresh_init(tmp_path, capsys):
    data = json.loads(json.dumps(SMALL))
    data["sft"]["epochs"] = 0
    cfg = write_cfg(tmp_path, data)
    assert main(["sft", "--config", cfg, "--out", str(tmp_path / "s")]) == 0
    ckpt = checkpoint.load(tmp_path / "s" / "model.ckpt")
    assert ckpt.model.get_params().tobytes() == fresh_model(load_config(cfg)).get_params().tobytes()


def test_sft_then_eval_beats_fresh(tmp_path, capsys):
    data = json.loads(json.dumps(SMALL))
    data["sft"]["epochs"] = 8
    cfg = write_cfg(tmp_path, data)
    assert main(["sft", "--config", cfg, "--out", str(tmp_path / "s")]) == 0
    capsys.readouterr()
    rows = (tmp_path / "s" / "metrics.csv").read_text().splitlines()[1:]
    losses = [float(r.split(",")[2]) for r in rows]
    assert losses[-1] < losses[0]

    checkpoint.save(tmp_path / "fresh.ckpt", fresh_model(load_config(cfg)))
    _, out_trained = run(["eval", "--checkpoint", str(tmp_path / "s" / "model.ckpt"), "--config", cfg], capsys)
    _, out_fresh = run(["eval", "--checkpoint", str(tmp_path / "fresh.ckpt"), "--config", cfg], capsys)
    assert json.loads(out_trained)["pref_acc"] > json.loads(out_fresh)["pref_acc"]
    assert json.loads(out_trained)["mean_chosen_nll"] < json.loads(out_fresh)["mean_chosen_nll"]


def test_checkpoint_roundtrip_bytes(tmp_path):
    model = fresh_model(load_config(write_cfg(tmp_path)))
    shadow = np.linspace(-1, 1, model.param_count)
    checkpoint.save(tmp_path / "a.ckpt", model, shadow, "seed=3")
    loaded = checkpoint.load(tmp_path / "a.ckpt")
    checkpoint.save(tmp_path / "b.ckpt", loaded.model, loaded.ema_shadow, loaded.header["rng_note"])
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_truncated_checkpoint_exit_3(tmp_path):
    model = fresh_model(load_config(write_cfg(tmp_path)))
    checkpoint.save(tmp_path / "m.ckpt", model)
    blob = (tmp_path / "m.ckpt").read_bytes()
    (tmp_path / "m.ckpt").write_bytes(blob[:-5])
    assert main(["eval", "--checkpoint", str(tmp_path / "m.ckpt"), "--config", write_cfg(tmp_path)]) == 3
    (tmp_path / "m.ckpt").write_bytes(b"NOTACKPT" + blob[8:])
    assert main(["eval", "--checkpoint", str(tmp_path / "m.ckpt"), "--config", write_cfg(tmp_path)]) == 3


def test_malformed_dataset_exit_3(tmp_path):
    (tmp_path / "d.jsonl").write_text('{"prompt":[1],"chosen":[2]}\n{broken\n')
    cfg = write_cfg(tmp_path)
    code = main(["sft", "--config", cfg, "--dataset", str(tmp_path / "d.jsonl"), "--out", str(tmp_path / "o")])
    assert code == 3


def test_offline_without_rejected_exit_2(tmp_path):
    data = json.loads(json.dumps(SMALL))
    data["trainer"]["paradigm"] = "offline_paired"
    assert main(["train", "--config", write_cfg(tmp_path, data), "--out", str(tmp_path / "o")]) == 2


def test_gradcheck_passes(capsys):
    code, out = run(["gradcheck", "--tuples", "5"], capsys)
    assert code == 0 and json.loads(out)["passed"]


def test_seed_env_override(tmp_path, monkeypatch):
    cfg = write_cfg(tmp_path)
    monkeypatch.setenv("SAPO_SEED", "11")
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    resolved = json.loads((tmp_path / "o" / "config.resolved.json").read_text())
    assert resolved["seed"] == 11
    monkeypatch.setenv("SAPO_SEED", "eleven")
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "p")]) == 2


def test_locked_output_dir(tmp_path):
    (tmp_path / "o").mkdir()
    (tmp_path / "o" / LOCK_NAME).write_text("123")
    assert main(["train", "--config", write_cfg(tmp_path), "--out", str(tmp_path / "o")]) == 2


def test_train_rerun_from_resolved_config(tmp_path, capsys):
    cfg = write_cfg(tmp_path, checkpoint_every=2)
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
    assert sorted(p.name for p in (tmp_path / "a").glob("step-*.ckpt")) == [
        "step-000002.ckpt", "step-000004.ckpt", "step-000006.ckpt"]
    resolved = tmp_path / "a" / "config.resolved.json"
    assert main(["train", "--config", str(resolved), "--out", str(tmp_path / "b")]) == 0
    for name in ("metrics.csv", "model.ckpt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_n256_preset_smoke(tmp_path, capsys):
    cfg = str(REPO / "configs" / "preset_n256_smoke.json")
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    iterations = load_config(cfg).trainer.iterations
    rows = (tmp_path / "o" / "metrics.csv").read_text().splitlines()
    assert len(rows) == iterations + 1
    assert load_config(cfg).trainer.augment.n_seg == 256

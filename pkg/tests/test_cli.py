import json

import pytest

from soundsight import cli

TINY = {
    "seed": 3,
    "data": {"train_pairs": 40, "test_pairs": 20},
    "var": {"image_channels": [4, 4, 4], "sound_channels": [4, 4], "d_image": 16, "d_sound": 16, "d_joint": 8,
            "epochs": 1, "batch_size": 20},
    "policy": {"hidden": 16, "feature": 16, "conv_channels": [4, 8]},
    "ppo": {"horizon": 32, "num_envs": 2, "minibatch": 32, "epochs": 1, "total_steps": 64},
    "finetune": {"pairs": 10, "rl_steps": 64, "epochs": 1},
    "eval": {"episodes_per_intent": 1},
}


def write_config(tmp_path, raw=TINY):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({**raw, "paths": {"out": "run"}}))
    return str(path)


def run(*argv):
    return cli.dispatch(list(argv))


def test_usage_errors_exit_1(tmp_path, capsys):
    assert run() == 1
    assert run("bogus") == 1
    assert run("train-var", "--centered", "maybe") == 1
    assert "usage" in capsys.readouterr().err


def test_unknown_config_keys_exit_1(tmp_path, capsys):
    for raw in ({"nope": 1}, {"var": {"nope": 1}}, {"env": {"colour": 1}}, {"finetune": {"x": 0}}):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps(raw))
        assert run("gen-data", "--config", str(path)) == 1
    (tmp_path / "bad.json").write_text("{not json")
    assert run("gen-data", "--config", str(tmp_path / "bad.json")) == 1
    assert "config" in capsys.readouterr().err


def test_runtime_failure_exit_2(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert run("train-var", "--config", cfg) == 2  # no data yet
    assert run("report", "--config", cfg) == 2
    assert "gen-data" in capsys.readouterr().err


def test_env_round_trip():
    from soundsight.envsim import EnvConfig, shift_domain
    env = shift_domain(EnvConfig(), 4)
    assert cli.env_from_dict(json.loads(json.dumps(cli.env_to_dict(env)))) == env


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_config(root)
    for argv in (["gen-data"], ["train-var"], ["train-var", "--loss", "triplet", "--centered", "false"],
                 ["eval-var", "--ckpt", str(root / "run/checkpoints/var.ckpt")], ["train-rl", "--reward", "eq5"],
                 ["eval-rl", "--dump-frames"], ["shift-domain"], ["eval-rl", "--shifted"], ["finetune"],
                 ["report"]):
        assert run(*argv, "--config", cfg) == 0, argv
    return root / "run", cfg


def test_pipeline_layout(pipeline):
    out, _ = pipeline
    for rel in ("checkpoints/var.ckpt", "checkpoints/var_triplet_nc.ckpt", "checkpoints/policy_eq5.ckpt",
                "metrics/var_eval.csv", "metrics/policy_eq5_eval.csv", "metrics/policy_eq5_shifted_eval.csv",
                "metrics/policy_eq5_train.csv", "reports/shifted_env.json", "reports/finetune.json",
                "reports/summary.json"):
        assert (out / rel).exists(), rel
    assert any((out / "frames").rglob("*.png"))
    assert (out / "metrics/var_eval.csv").read_text().startswith("NN,LL_img,LL_snd,LL_avg\n")
    report = json.loads((out / "reports/finetune.json").read_text())
    assert report["run_config"]["seed"] == 3 and report["labels_used"] == 10


def test_config_echoed_in_checkpoint(pipeline):
    from soundsight.checkpoint import load_checkpoint
    out, _ = pipeline
    config, _ = load_checkpoint(out / "checkpoints/var.ckpt", "var")
    assert config["run_config"]["seed"] == 3


def test_rerun_is_reproducible(pipeline, tmp_path):
    out, cfg = pipeline
    other = tmp_path / "again"
    for argv in (["gen-data"], ["train-var"], ["eval-var"], ["train-rl"], ["eval-rl"]):
        assert run(*argv, "--config", cfg, "--out", str(other)) == 0
    for rel in ("metrics/var_eval.csv", "metrics/policy_eq5_train.csv", "metrics/policy_eq5_eval.csv"):
        assert (out / rel).read_text() == (other / rel).read_text(), rel


def test_report_reads_disk_only(pipeline, monkeypatch, capsys):
    out, cfg = pipeline
    import soundsight.varmodel as V
    monkeypatch.setattr(V, "load_var", lambda *a, **k: pytest.fail("report must not load models"))
    assert run("report", "--config", cfg) == 0
    summary = json.loads((out / "reports/summary.json").read_text())
    assert "var_eval" in summary["var"] and "finetune" in summary["finetune"]

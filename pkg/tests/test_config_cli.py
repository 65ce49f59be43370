import json

import numpy as np
import pytest

from gruimc import cli, config, pipeline
from gruimc.gru import save_network
from _nets import certified_net, random_net


def test_defaults_roundtrip(tmp_path):
    cfg = config.ExperimentConfig()
    cfg.save(tmp_path / "cfg.json")
    again = config.load(tmp_path / "cfg.json")
    assert again == cfg
    assert cfg.controller.widths == [5, 5, 5] and cfg.model.widths == [10, 10]


def test_unknown_keys_rejected():
    with pytest.raises(config.ConfigError, match="unknown keys"):
        config.from_dict({"seeed": 1})
    with pytest.raises(config.ConfigError, match="io"):
        config.from_dict({"io": {"windw": 3}})
    with pytest.raises(config.ConfigError, match="schema"):
        config.from_dict({"schema_version": 99})


def test_validation():
    with pytest.raises(config.ConfigError, match="widths"):
        config.from_dict({"model": {"widths": []}})
    with pytest.raises(config.ConfigError, match="washout"):
        config.from_dict({"io": {"window": 40}, "model_train": {"washout": 50}})
    with pytest.raises(config.ConfigError, match="does not exist"):
        config.from_dict({"plant_params": "/nonexistent/params.json"})
    with pytest.raises(config.ConfigError):
        config.from_dict({"model_train": {"lr": -1.0}})


def test_env_override():
    data = config.apply_env({"io": {"window": 300}}, {"IMC_IO__WINDOW": "400", "IMC_SEED": "7",
                                                      "IMC_MODEL__WIDTHS": "[3, 2]", "OTHER": "x"})
    cfg = config.from_dict(data)
    assert cfg.io.window == 400 and cfg.seed == 7 and cfg.model.widths == [3, 2]


def test_presets():
    for name in ("full", "desk", "smoke"):
        config.from_dict(config.preset(name))
    desk = config.from_dict(config.preset("desk"))
    assert desk.refs.count == 150 and desk.controller_train.max_epochs <= 400
    assert desk.loop.hold * desk.tau_s >= 5 * desk.tau_r
    with pytest.raises(config.ConfigError):
        config.preset("huge")


def test_cli_config_error_exit(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"nope": 1}))
    assert cli.main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "d")]) == cli.EXIT_CONFIG
    assert "unknown keys" in capsys.readouterr().err
    bad.write_text("{not json")
    assert cli.main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "d")]) == cli.EXIT_CONFIG


def test_cli_certify_exit_codes(tmp_path, capsys):
    rng = np.random.default_rng(0)
    good = certified_net(rng, 2, [3], 2, "identity")
    save_network(good, tmp_path / "good.json")
    assert cli.main(["certify", str(tmp_path / "good.json"), "--out", str(tmp_path / "c.json")]) == 0
    assert json.loads((tmp_path / "c.json").read_text())["certified"] is True
    bad = random_net(rng, 2, [3], 2, "identity", scale=3.0)
    save_network(bad, tmp_path / "bad.json")
    assert cli.main(["certify", str(tmp_path / "bad.json")]) == cli.EXIT_UNCERTIFIED
    assert "NOT certified" in capsys.readouterr().out


def _smoke(tmp_path, name, **over):
    data = cli._merge(config.preset("smoke"), over)
    data["output_dir"] = str(tmp_path / name)
    return config.from_dict(data)


@pytest.fixture(scope="module")
def smoke_runs(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("smoke")
    return [pipeline.run_pipeline(_smoke(tmp, f"run{i}")) for i in range(2)], tmp


def test_pipeline_artifacts(smoke_runs):
    (manifest, _), tmp = smoke_runs
    root = tmp / "run0"
    for name in ("data/io_train.ndjson", "model.json", "model.cert.json", "refs/refs_test.ndjson",
                 "ctrl.json", "schedule.ndjson", "loop_clean.csv", "loop_noisy.json", "report.json"):
        assert name in manifest.artifacts, name
        assert (root / name).exists()
    assert manifest.stages[-1] == "evaluate"
    report = json.loads((root / "report.json").read_text())
    assert report["ss_max"] >= report["ss_mean"] >= 0


def test_pipeline_deterministic(smoke_runs):
    (a, b), _ = smoke_runs
    assert a.artifacts == b.artifacts


def test_uncertified_model_halts(tmp_path, capsys):
    # a margin no network can meet: the run must stop before any reference is generated
    cfg = _smoke(tmp_path, "strict", model_train={"margin": -50.0, "max_epochs": 3})
    with pytest.raises(pipeline.StageFailed) as info:
        pipeline.run_pipeline(cfg)
    assert info.value.stage == "certify-model" and info.value.code == cli.EXIT_UNCERTIFIED
    assert not (tmp_path / "strict" / "refs").exists()
    assert "model.json" in info.value.artifacts

    cfg_path = tmp_path / "strict.json"
    cfg.save(cfg_path)
    code = cli.main(["pipeline", "--config", str(cfg_path), "--out-dir", str(tmp_path / "strict2")])
    assert code == cli.EXIT_UNCERTIFIED
    assert "certify-model" in capsys.readouterr().err


def test_cli_stages(tmp_path):
    # the stage commands chain the same way the pipeline does
    run = tmp_path / "cli"
    cfg_path = tmp_path / "smoke.json"
    _smoke(tmp_path, "cli").save(cfg_path)
    c = ["--config", str(cfg_path)]
    assert cli.main(["gen-data", *c, "--out", str(run / "data")]) == 0
    assert cli.main(["train-model", *c, "--data", str(run / "data"), "--out", str(run / "model.json")]) == 0
    assert cli.main(["gen-refs", *c, "--model", str(run / "model.json"), "--out", str(run / "refs")]) == 0
    assert cli.main(["train-controller", *c, "--model", str(run / "model.json"), "--refs", str(run / "refs"),
                     "--out", str(run / "ctrl.json")]) == 0
    sched = run / "schedule.ndjson"
    sched.write_text(json.dumps({"kind": "setpoint", "index": 0, "y0_m": [0.7, 0.7], "hold_steps": 60}) + "\n")
    assert cli.main(["simulate", *c, "--model", str(run / "model.json"), "--ctrl", str(run / "ctrl.json"),
                     "--schedule", str(sched), "--noise", "0", "--out", str(run / "log.csv")]) == 0
    assert (run / "log.json").exists()
    assert cli.main(["evaluate", *c, "--log", str(run / "log.csv"), "--schedule", str(sched),
                     "--out", str(run / "report.json")]) == 0
    assert json.loads((run / "report.json").read_text())["metadata"]["samples"] == 60

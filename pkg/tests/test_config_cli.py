import json
import os
import subprocess
import sys

import pytest
from click.testing import CliRunner

from featinv import runner
from featinv.cli import cli
from featinv.config import parse_config, parse_config_text
from featinv.errors import ConfigError

FAST = ['prior.name="identity"', "attack.iterations=4", "data.synthetic_count=2"]


def test_defaults_resolved():
    cfg = parse_config_text("[attack]\n")
    a = cfg.attack
    assert (a.iterations, a.learning_rate, a.init_std, a.lambda_s, cfg.prior.sampling_steps) == (1500, 0.1, 0.1, 1.0, 20)
    assert (a.lambda_txt, a.lambda_c) == (0.0, 0.0)
    assert parse_config_text('[attack]\nvariant = "whitebox-text"').attack.lambda_txt == 10.0
    assert parse_config_text('[attack]\nvariant = "multiframe"').attack.lambda_c == 5.0


@pytest.mark.parametrize("text,path", [
    ("[attack]\niterations = -3", "attack.iterations"),
    ("[attack]\nlearnin_rate = 0.2", "attack.learnin_rate"),
    ('[model]\nsplit_index = "two"', "model.split_index"),
    ("[bogus]\nx = 1", "bogus"),
    ("[attack]\nalpha = 2.5", "attack.alpha"),
    ("[defense]\nsigmas = [-1.0]", "defense.sigma"),
])
def test_errors_name_key_path(text, path):
    with pytest.raises(ConfigError) as info:
        parse_config_text(text)
    assert str(info.value).startswith(path)


def test_round_trip_fixed_point():
    cfg = parse_config_text('seed = 4\n[attack]\nvariant = "multiframe"\nbetas = [0.8, 0.99]\n[blackbox]\nvariant = "text"\n')
    again = parse_config_text(cfg.to_toml())
    assert again == cfg and again.to_toml() == cfg.to_toml()


def test_missing_and_malformed_file(tmp_path):
    with pytest.raises(ConfigError):
        parse_config(tmp_path / "nope.toml")
    bad = tmp_path / "bad.toml"
    bad.write_text("[attack\n")
    with pytest.raises(ConfigError, match="malformed"):
        parse_config(bad)


def test_whitebox_run_artifacts(tmp_path):
    cfg = parse_config(None, FAST + [f'output_dir="{tmp_path}"', 'run_id="r"'])
    m = runner.run(cfg, "whitebox")
    out = tmp_path / "r"
    files = {p.name for p in out.iterdir()}
    assert {"recon_0000.png", "recon_0001.png", "loss_trace.csv", "manifest.json", "metrics.json"} <= files
    assert set(m["artifacts"]) == files - {"manifest.json"}
    assert m["config_hash"] == cfg.digest() and m["status"] == "ok"
    assert len(runner.read_trace(out / "loss_trace.csv")) == 4


def test_interrupted_run_leaves_nothing(tmp_path, monkeypatch):
    cfg = parse_config(None, FAST + [f'output_dir="{tmp_path}"', 'run_id="r"'])

    def boom(path, traces):
        raise KeyboardInterrupt

    monkeypatch.setattr(runner, "_write_trace", boom)
    with pytest.raises(KeyboardInterrupt):
        runner.run(cfg, "whitebox")
    assert not (tmp_path / "r").exists()
    quarantined = list((tmp_path / ".quarantine").iterdir())
    assert len(quarantined) == 1 and any(quarantined[0].glob("recon_*.png"))
    assert not any(p.name.startswith(".tmp") for p in tmp_path.iterdir())


def test_engine_error_is_stage_tagged(tmp_path):
    cfg = parse_config(None, FAST + [f'output_dir="{tmp_path}"', 'attack.variant="whitebox-text"', 'attack.text="snow"'])
    with pytest.raises(runner.StageError) as info:
        runner.run(cfg, "whitebox")
    assert info.value.exit_code == 4 and str(info.value).startswith("[whitebox]")


def test_replay_identical(tmp_path, monkeypatch):
    monkeypatch.setenv("FEATINV_DETERMINISTIC", "1")
    cfg = parse_config(None, FAST + [f'output_dir="{tmp_path / "a"}"'])
    m = runner.run(cfg, "whitebox")
    path = tmp_path / "a" / m["run_id"] / "manifest.json"
    new, diff = runner.replay(path, tmp_path / "b")
    assert diff == {} and new["deterministic"]


def test_existing_output_refused(tmp_path):
    cfg = parse_config(None, FAST + [f'output_dir="{tmp_path}"', 'run_id="r"'])
    runner.run(cfg, "whitebox")
    with pytest.raises(Exception, match="already exists"):
        runner.run(cfg, "whitebox")
    runner.run(cfg, "whitebox", overwrite=True)


# ---------------------------------------------------------------- CLI


def _invoke(*args):
    return CliRunner().invoke(cli, list(args))


def _sets():
    return [x for s in FAST for x in ("--set", s)]


def test_cli_exit_codes(tmp_path):
    ok = _invoke("whitebox", *_sets(), "--out", str(tmp_path), "--run-id", "x")
    assert ok.exit_code == 0, ok.output
    assert json.loads(ok.output)["status"] == "ok"
    assert _invoke("whitebox", "--set", "attack.iterations=0").exit_code == 2
    assert _invoke("whitebox", "--set", "model.split_index=9", *_sets(), "--out", str(tmp_path)).exit_code == 2
    cap = _invoke("whitebox", *_sets(), "--text", "blue sky", "--out", str(tmp_path))
    assert cap.exit_code == 4 and "cannot be conditioned" in cap.output


def test_cli_metrics_and_report(tmp_path):
    assert _invoke("whitebox", *_sets(), "--out", str(tmp_path), "--run-id", "x").exit_code == 0
    run_dir = tmp_path / "x"
    orig, rec = tmp_path / "o", tmp_path / "r"
    orig.mkdir(), rec.mkdir()
    for p in run_dir.glob("original_*.png"):
        (orig / p.name.replace("original_", "")).write_bytes(p.read_bytes())
    for p in run_dir.glob("recon_*.png"):
        (rec / p.name.replace("recon_", "")).write_bytes(p.read_bytes())
    res = _invoke("metrics", "--original", str(orig), "--recon", str(rec), "--out", str(tmp_path / "m.json"),
                  "--grid", str(tmp_path / "grid.png"))
    assert res.exit_code == 0, res.output
    assert (tmp_path / "m.csv").exists() and (tmp_path / "grid.png").exists()
    rep = _invoke("report", str(run_dir))
    assert rep.exit_code == 0 and "loss_curves.png" in rep.output
    manifest = json.loads((run_dir / "manifest.json").read_text())
    assert "grid.png" in manifest["artifacts"]


def test_cli_defend_csv(tmp_path):
    res = _invoke("defend", *_sets(), "--set", "defense.eval_count=8", "--set", "defense.attack_count=2",
                  "--sigmas", "0,0.5", "--out", str(tmp_path), "--csv", str(tmp_path / "t.csv"))
    assert res.exit_code == 0, res.output
    assert len((tmp_path / "t.csv").read_text().splitlines()) == 3


def test_cli_blackbox_stages(tmp_path):
    common = ["--set", 'prior.name="identity"', "--set", "blackbox.train_size=16", "--set", "blackbox.test_size=4",
              "--set", "blackbox.epochs=1", "--set", "blackbox.batch_size=8", "--set", "blackbox.width=4",
              "--out", str(tmp_path), "--run-id", "bb"]
    for stage in ("collect", "train", "run"):
        res = _invoke("blackbox", stage, *common)
        assert res.exit_code == 0, res.output
    assert (tmp_path / "bb" / "train" / "inverter.zip").exists()
    assert len(list((tmp_path / "bb" / "run").glob("recon_*.png"))) == 4


def test_batch_runs_separate_processes(tmp_path):
    cfgs = []
    for i in range(2):
        p = tmp_path / f"c{i}.toml"
        p.write_text(f'seed = {i}\noutput_dir = "{tmp_path / "out"}"\n[prior]\nname = "identity"\n'
                     "[attack]\niterations = 2\n[data]\nsynthetic_count = 2\n")
        cfgs.append(str(p))
    res = _invoke("batch", *cfgs, "--jobs", "2")
    assert res.exit_code == 0, res.output
    assert len(list((tmp_path / "out").iterdir())) == 2


def test_console_script_entry_point():
    res = subprocess.run([sys.executable, "-m", "featinv.cli", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and "featinv" in res.stdout

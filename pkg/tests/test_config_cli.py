import json
import subprocess
import sys

import jsonschema
import pytest

from insgen import cli
from insgen.config import ConfigError, RunConfig, config_schema, from_dict, load_config
from insgen.datasets import make_ring, save_table
from insgen.presets import PRESETS, apply_preset

TINY = ["--set", "trainer.steps=6", "--set", "trainer.eval_every=3", "--set", "trainer.batch=8",
        "--set", "model.g_hidden=[8]", "--set", "model.d_hidden=[8]", "--set", "model.feat_dim=8",
        "--set", "model.proj_dim=4", "--set", "dataset.subsample=32", "--set",
        "eval.samples=64"]


# ---------------------------------------------------------------- config


def test_round_trip_idempotent():
    cfg = RunConfig().override(["loss.lambda_g=0.5", "model.d_hidden=[32,32]"])
    again = from_dict(json.loads(cfg.to_json()))
    assert again == cfg and again.to_json() == cfg.to_json() and again.hash() == cfg.hash()


def test_file_then_env_then_overrides(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"trainer": {"steps": 100, "seed": 4}}))
    env = {"INSGEN_TRAINER__STEPS": "200", "INSGEN_LOSS__LAMBDA_G": "0.25", "OTHER": "x"}
    cfg = load_config(path, ["trainer.steps=300"], environ=env)
    assert cfg.trainer.steps == 300 and cfg.trainer.seed == 4 and cfg.loss.lambda_g == 0.25


@pytest.mark.parametrize("doc, where", [
    ({"trainer": {"stepz": 1}}, "trainer.stepz"),
    ({"bogus": {}}, "bogus"),
    ({"trainer": {"steps": "many"}}, "trainer.steps"),
    ({"dataset": {"kind": "table"}}, "dataset.path"),
    ({"trainer": {"steps": -1}}, "trainer.steps"),
])
def test_invalid_configs_name_field(tmp_path, doc, where):
    path = tmp_path / "c.json"
    path.write_text(json.dumps(doc))
    with pytest.raises(ConfigError) as exc:
        load_config(path, environ={})
    assert exc.value.path == where


def test_unknown_override_key():
    with pytest.raises(ConfigError, match="trainer.nope"):
        RunConfig().override(["trainer.nope=1"])


def test_schema_validates_defaults_and_rejects_unknown():
    schema = config_schema()
    jsonschema.validate(RunConfig().to_dict(), schema)
    with pytest.raises(jsonschema.ValidationError):
        jsonschema.validate({"trainer": {"stepz": 1}}, schema)


def test_reference_constants_are_defaults():
    cfg = RunConfig()
    assert cfg.contrastive.tau == 2.0
    assert cfg.trainer.momentum_alpha == 0.999


# ---------------------------------------------------------------- presets


def test_preset_semantics():
    base = RunConfig()
    b = apply_preset(base, "baseline").loss
    assert b.lambda_r_d == b.lambda_f_d == b.lambda_g == 0
    v = apply_preset(base, "+cf_vanilla")
    assert v.contrastive.sigma_eps == 0 and v.loss.lambda_f_d > 0 and v.loss.lambda_g == 0
    cf, cfg = apply_preset(base, "+cf"), apply_preset(base, "+cfg")
    assert cf.contrastive == cfg.contrastive
    assert cf.loss.lambda_g == 0 and cfg.loss.lambda_g > 0
    assert cf.replace(loss=cfg.loss) == cfg
    with pytest.raises(ValueError, match="unknown preset"):
        apply_preset(base, "+everything")
    assert PRESETS == ("baseline", "+cr", "+cf_vanilla", "+cf", "+cfg")


def test_preset_keeps_configured_weights():
    base = RunConfig().override(["loss.lambda_g=0.3", "loss.lambda_r_d=0.5",
                                 "contrastive.sigma_eps=0.2"])
    full = apply_preset(base, "+cfg")
    assert (full.loss.lambda_g, full.loss.lambda_r_d, full.contrastive.sigma_eps) == (0.3, 0.5, 0.2)
    assert apply_preset(base, "+cf").loss.lambda_g == 0
    assert apply_preset(base, "+cf_vanilla").contrastive.sigma_eps == 0


# ---------------------------------------------------------------- commands


def test_train_writes_outputs(tmp_path):
    assert cli.main(["train", *TINY, "--out", str(tmp_path)]) == 0
    for name in ("metrics.csv", "config.json", "samples.svg", "losses.svg", "logits.svg",
                 "frechet.svg", "ckpt_000006.insgen"):
        assert (tmp_path / name).is_file()
    rows = (tmp_path / "metrics.csv").read_text().splitlines()
    assert rows[-1].startswith("6,")


def test_train_twice_identical_outputs(tmp_path):
    for d in ("a", "b"):
        assert cli.main(["train", *TINY, "--out", str(tmp_path / d)]) == 0
    for name in ("metrics.csv", "samples.svg", "losses.svg", "ckpt_000006.insgen"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_train_invalid_config_exit_code(tmp_path, capsys):
    rc = cli.main(["train", "--set", "dataset.kind=table", "--out", str(tmp_path)])
    assert rc != 0
    assert "dataset.path" in capsys.readouterr().err


def test_env_override_reaches_cli(tmp_path, monkeypatch):
    monkeypatch.setenv("INSGEN_TRAINER__STEPS", "3")
    args = [a for a in TINY if a != "trainer.steps=6"]
    args.remove("--set")
    assert cli.main(["train", *args, "--out", str(tmp_path)]) == 0
    assert json.loads((tmp_path / "config.json").read_text())["trainer"]["steps"] == 3


def test_eval_outputs_and_determinism(tmp_path):
    cli.main(["train", *TINY, "--no-plots", "--out", str(tmp_path / "run")])
    ckpt = str(tmp_path / "run" / "ckpt_000006.insgen")
    for d in ("e1", "e2"):
        assert cli.main(["eval", ckpt, "--out", str(tmp_path / d)]) == 0
    report = json.loads((tmp_path / "e1/eval.json").read_text())
    assert set(report) == set(cli.EVAL_KEYS)
    assert report["n_samples"] == 10 * 64
    for name in ("eval.json", "samples.svg"):
        assert (tmp_path / "e1" / name).read_bytes() == (tmp_path / "e2" / name).read_bytes()


def test_eval_with_table_dataset(tmp_path):
    cli.main(["train", *TINY, "--no-plots", "--out", str(tmp_path / "run")])
    table = tmp_path / "d.csv"
    save_table(make_ring(count=20, seed=5), table)
    assert cli.main(["eval", str(tmp_path / "run/ckpt_000006.insgen"), "--dataset", str(table),
                     "--out", str(tmp_path / "e")]) == 0
    report = json.loads((tmp_path / "e/eval.json").read_text())
    assert report["n_samples"] == 200 and report["mode_coverage"] is None


def test_eval_missing_checkpoint(tmp_path, capsys):
    assert cli.main(["eval", str(tmp_path / "missing.insgen"), "--out", str(tmp_path)]) != 0
    assert "not found" in capsys.readouterr().err


def test_ablate_summary(tmp_path):
    rc = cli.main(["ablate", *TINY, "--no-plots", "--preset", "baseline", "+cfg",
                   "--out", str(tmp_path)])
    assert rc == 0
    lines = (tmp_path / "summary.csv").read_text().splitlines()
    assert lines[0].startswith("preset,seed,frechet")
    assert [l.split(",")[0] for l in lines[1:]] == ["baseline", "+cfg"]
    cfg = json.loads((tmp_path / "baseline/seed0/config.json").read_text())
    assert cfg["loss"]["lambda_r_d"] == 0


def test_ablate_unknown_preset(tmp_path):
    assert cli.main(["ablate", "--preset", "+magic", "--out", str(tmp_path)]) != 0


def test_sweep_dedupes_and_rejects(tmp_path, caplog):
    assert cli.main(["sweep-queue", *TINY, "--lengths", "0", "4", "--out", str(tmp_path)]) != 0
    rc = cli.main(["sweep-queue", *TINY, "--no-plots", "--lengths", "4", "16", "4",
                   "--out", str(tmp_path)])
    assert rc == 0
    assert "duplicate" in caplog.text
    rows = (tmp_path / "sweep.csv").read_text().splitlines()
    assert len(rows) == 1 + 2
    assert (tmp_path / "sweep.svg").read_text().startswith("<?xml")
    cfg = json.loads((tmp_path / "len16/seed0/config.json").read_text())
    assert cfg["contrastive"]["queue_fake"] == 16


def test_sweep_single_length(tmp_path):
    assert cli.main(["sweep-queue", *TINY, "--no-plots", "--lengths", "16",
                     "--out", str(tmp_path)]) == 0
    assert len((tmp_path / "sweep.csv").read_text().splitlines()) == 2


def test_parallel_sweep_matches_sequential(tmp_path):
    base = [*TINY, "--no-plots", "--lengths", "4", "8"]
    assert cli.main(["sweep-queue", *base, "--out", str(tmp_path / "seq")]) == 0
    assert cli.main(["sweep-queue", *base, "--parallel", "2", "--out", str(tmp_path / "par")]) == 0
    assert (tmp_path / "seq/sweep.csv").read_bytes() == (tmp_path / "par/sweep.csv").read_bytes()


def test_schema_command(capsys):
    assert cli.main(["schema"]) == 0
    assert json.loads(capsys.readouterr().out)["additionalProperties"] is False


def test_console_entry_point():
    out = subprocess.run([sys.executable, "-m", "insgen.cli", "--help"], capture_output=True,
                         text=True, check=True).stdout
    for sub in ("train", "eval", "ablate", "sweep-queue"):
        assert sub in out

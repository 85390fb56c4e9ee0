import json

import pytest

from htlprune import cli, config
from htlprune.config import ConfigValidationError

TINY = """
version = 1
setting = "supervised"
seeds = [3]
output_dir = "{out}"

[dataset]
split = [0.5, 0.25, 0.25]

[dataset.generate]
preset = "desk"
n_samples = 12
image_size = 16
seed = 2

[arch]
depth = 1
base_channels = 2
input_size = 16

[training]
epochs = 1
batch_size = 4
decay_epochs = []

[mining]
fine_tune_epochs = 1
fine_tune_decay_epoch = 1
class_weights = [1.0, 1.0]
"""


@pytest.fixture
def tiny(tmp_path):
    path = tmp_path / "tiny.toml"
    path.write_text(TINY.format(out=tmp_path / "run"))
    return path


def test_bundled_configs_validate():
    for name in config.BUNDLED:
        cfg = config.load_config(name)
        assert cfg.version == config.CONFIG_VERSION


def test_validation_reports_every_error_at_once(tiny):
    with pytest.raises(ConfigValidationError) as info:
        config.load_config(str(tiny), {"arch.depth": 0, "mining.tau": 2.0, "training.lr": -1.0,
                                       "setting": "nope", "arch.bogus": 1})
    errs = info.value.errors
    assert len(errs) >= 4
    assert any("arch.bogus" in e for e in errs)
    assert any("setting" in e for e in errs)


def test_missing_version_is_an_error(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text('[arch]\ndepth = 1\n')
    with pytest.raises(ConfigValidationError, match="version"):
        config.load_config(str(p))


def test_type_mismatch_named(tiny):
    with pytest.raises(ConfigValidationError, match="training.epochs"):
        config.load_config(str(tiny), {"training.epochs": "ten"})


def test_flag_overrides_config_over_default(tiny):
    cfg = config.load_config(str(tiny))
    assert cfg.mining.tau == 0.4  # default
    assert cfg.arch.base_channels == 2  # file
    cfg = config.load_config(str(tiny), {"arch.base_channels": 5, "mining.tau": None})
    assert cfg.arch.base_channels == 5 and cfg.mining.tau == 0.4


def test_to_dict_round_trips(tiny):
    cfg = config.load_config(str(tiny))
    doc = config.to_dict(cfg)
    json.dumps(doc)
    assert doc["arch"]["base_channels"] == 2


def run_cli(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_cli_config_error_exit_two_with_json(capsys, tiny, tmp_path):
    code, _, err = run_cli(capsys, "generate", "--config", tiny, "--set", "arch.depth=0",
                           "--out", tmp_path / "c")
    assert code == 2
    rec = json.loads(err.strip().splitlines()[-1])["error"]
    assert rec["category"] == "config" and rec["exit_code"] == 2 and rec["errors"]


def test_cli_missing_checkpoint_exit_four(capsys, tiny, tmp_path):
    code, _, err = run_cli(capsys, "prune", "--config", tiny, "--checkpoint", tmp_path / "none")
    assert code == 4
    assert json.loads(err.strip().splitlines()[-1])["error"]["category"] == "io"


def test_cli_malformed_htl_table_exit_four(capsys, tiny, tmp_path):
    assert run_cli(capsys, "train", "--config", tiny, "--out", tmp_path / "base")[0] == 0
    bad = tmp_path / "htl.csv"
    bad.write_text("garbage\n")
    code, _, err = run_cli(capsys, "finetune", "--config", tiny, "--checkpoint", tmp_path / "base",
                           "--htl", bad, "--out", tmp_path / "ft")
    assert code == 4
    assert json.loads(err.strip().splitlines()[-1])["error"]["type"] == "ParseError"


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_cli_divergent_training_exit_three(capsys, tiny, tmp_path):
    code, _, err = run_cli(capsys, "train", "--config", tiny, "--set", "training.lr=1e200",
                           "--out", tmp_path / "base")
    assert code == 3
    rec = json.loads(err.strip().splitlines()[-1])["error"]
    assert rec["category"] == "runtime" and rec["type"] == "TrainingDiverged"
    assert rec["epoch"] == 0


def test_cli_stage_chain(capsys, tiny, tmp_path):
    code, out, _ = run_cli(capsys, "generate", "--config", tiny, "--out", tmp_path / "run" / "corpus")
    assert code == 0 and json.loads(out)["n_samples"] == 12
    assert run_cli(capsys, "train", "--config", tiny, "--out", tmp_path / "base")[0] == 0

    code, out, _ = run_cli(capsys, "prune", "--config", tiny, "--checkpoint", tmp_path / "base",
                           "--ratio", "0", "--out", tmp_path / "p0")
    assert code == 0 and json.loads(out)["sparsity"] == 0.0
    code, out, _ = run_cli(capsys, "prune", "--config", tiny, "--checkpoint", tmp_path / "base",
                           "--ratio", "0.5", "--out", tmp_path / "p5")
    summary = json.loads(out)
    assert summary["zeros"] == round(0.5 * summary["total"])

    code, out, _ = run_cli(capsys, "mine", "--config", tiny, "--checkpoint", tmp_path / "base",
                           "--out", tmp_path / "mine")
    assert code == 0 and (tmp_path / "mine" / "htl.csv").exists()
    for extra in ([], ["--baseline", "random"]):
        code, out, _ = run_cli(capsys, "finetune", "--config", tiny, "--checkpoint", tmp_path / "base",
                               "--htl", tmp_path / "mine" / "htl.csv", "--out", tmp_path / "ft", *extra)
        assert code == 0

    code, out, _ = run_cli(capsys, "evaluate", "--config", tiny, "--checkpoint", tmp_path / "ft",
                           "--out", tmp_path / "eval.json")
    assert code == 0
    m = json.loads(out)
    assert set(m) == {"iou_background", "iou_foreground", "mean_iou", "dice"}
    assert all(0.0 <= v <= 1.0 for v in m.values())


def test_cli_evaluate_untrained_checkpoint(capsys, tiny, tmp_path):
    from htlprune import checkpoint
    from htlprune.unet import ArchConfig, build_unet

    checkpoint.save_checkpoint(build_unet(ArchConfig(depth=1, base_channels=2, input_size=16), seed=0),
                               tmp_path / "raw")
    code, out, _ = run_cli(capsys, "evaluate", "--config", tiny, "--checkpoint", tmp_path / "raw")
    assert code == 0 and "iou_foreground" in json.loads(out)

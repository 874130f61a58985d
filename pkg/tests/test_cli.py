import json

import pytest
import torch
import yaml

from wavereprog.cli import main
from wavereprog.config import DEFAULTS, RESOLVED_NAME, SCHEMA, load_config
from wavereprog.degradations import load_manifest, read_image, write_image, write_toy_images
from wavereprog.errors import ConfigError
from wavereprog.training import load_model

TINY_RUN = {
    "data": {"toy_images": 4, "toy_size": 24},
    "train": {"batch_size": 4, "patch": 16, "epochs": 2},
    "backbone": {"init": "xavier-normal",
                 "config": {"trunk_width": 8, "n_blocks": 2, "block_width": 4}},
    "inference": {"overlap": 4},
}


@pytest.fixture
def tiny_yaml(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(TINY_RUN))
    return path


@pytest.fixture(scope="module")
def test_sets(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli-tests")
    write_toy_images(root / "clean", 3, 24, seed=5)
    assert main(["synth", "--clean", str(root / "clean"), "--kinds", "lr,rain,noise,blur,haze",
                 "--out", str(root / "mixed"), "--seed", "3"]) == 0
    return root / "mixed" / "manifest.tsv"


def _train(tmp_path, tiny_yaml, name, *extra):
    out = tmp_path / name
    code = main(["train", "--config", str(tiny_yaml), "--out", str(out), *extra])
    return code, out


def test_schema_rejects_unknown_keys():
    assert SCHEMA["additionalProperties"] is False
    with pytest.raises(ConfigError, match="lamda"):
        load_config(overrides={"loss": {"lamda": 0.1}})
    with pytest.raises(ConfigError, match="protocol 2"):
        load_config(overrides={"data": {"protocol": 2, "kinds": ["rain"]}})
    assert load_config() == DEFAULTS


def test_schema_command_prints_json(capsys):
    assert main(["schema"]) == 0
    assert json.loads(capsys.readouterr().out)["title"]


def test_bad_yaml_exits_2(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("train: {epochs: -1}\n")
    assert main(["train", "--config", str(bad)]) == 2
    bad.write_text("train: [unclosed\n")
    assert main(["train", "--config", str(bad)]) == 2
    assert main(["train", "--config", str(tmp_path / "missing.yaml")]) == 3


def test_synth_counts_and_determinism(tmp_path, capsys):
    write_toy_images(tmp_path / "clean", 3, 16, seed=0)
    args = ["synth", "--clean", str(tmp_path / "clean"), "--kinds", "noise:25,blur:5,rain,haze", "--seed", "1"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    out = capsys.readouterr().out
    assert "noise-25: 3 pairs" in out and "blur-5: 3 pairs" in out
    assert "rain: 3 pairs" in out and "haze: 3 pairs" in out
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    assert len(load_manifest(tmp_path / "a/manifest.tsv")) == 12
    assert (tmp_path / "a/manifest.tsv").read_bytes() == (tmp_path / "b/manifest.tsv").read_bytes()
    assert (tmp_path / "a" / RESOLVED_NAME).is_file()


def test_synth_unknown_kind_exits_2(tmp_path, capsys):
    write_toy_images(tmp_path / "clean", 1, 16)
    assert main(["synth", "--clean", str(tmp_path / "clean"), "--kinds", "snow",
                 "--out", str(tmp_path / "o")]) == 2
    assert "lr, rain, noise, blur, haze" in capsys.readouterr().err


def test_synth_missing_dir_exits_3(tmp_path):
    assert main(["synth", "--clean", str(tmp_path / "none"), "--kinds", "noise",
                 "--out", str(tmp_path / "o")]) == 3


def test_train_writes_checkpoint_csv_and_resolved_config(tmp_path, tiny_yaml):
    code, out = _train(tmp_path, tiny_yaml, "run", "--protocol", "1", "--kinds", "rain")
    assert code == 0
    assert (out / "reprog-rain.wrpg").is_file() and (out / "reprog-rain-loss.csv").is_file()
    resolved = yaml.safe_load((out / RESOLVED_NAME).read_text())
    assert resolved["data"]["kinds"] == ["rain"] and resolved["train"]["epochs"] == 2


def test_rerun_from_resolved_config_is_byte_identical(tmp_path, tiny_yaml):
    code, out = _train(tmp_path, tiny_yaml, "first", "--kinds", "haze", "--seed", "4")
    assert code == 0
    again = tmp_path / "second"
    assert main(["train", "--config", str(out / RESOLVED_NAME), "--out", str(again)]) == 0
    assert (out / "reprog-haze.wrpg").read_bytes() == (again / "reprog-haze.wrpg").read_bytes()


def test_wave_components_and_mlp_flags(tmp_path, tiny_yaml):
    code, out = _train(tmp_path, tiny_yaml, "real", "--kinds", "noise", "--wave-components",
                       "real", "--n-mlp", "4", "--epochs", "1")
    assert code == 0
    model = load_model(out / "reprog-noise.wrpg")
    assert model.wave_components == "real" and model.output_transform.n_mlp == 4


def test_finetune_updates_backbone(tmp_path, tiny_yaml):
    code, out = _train(tmp_path, tiny_yaml, "ft", "--kinds", "blur", "--finetune",
                       "--init", "kaiming-normal", "--epochs", "1")
    assert code == 0
    model = load_model(out / "reprog-blur.wrpg")
    assert model.metadata["backbone"]["frozen"] is False
    assert model.metadata["backbone_fingerprint"] != _untrained_fingerprint()


def _untrained_fingerprint():
    from wavereprog.backbone import Res12Config, build_res12
    return build_res12(Res12Config(**TINY_RUN["backbone"]["config"]), "kaiming-normal", 0).fingerprint


def test_protocol_kind_count_mismatch_exits_2(tmp_path, tiny_yaml):
    code, _ = _train(tmp_path, tiny_yaml, "bad", "--protocol", "2", "--kinds", "rain")
    assert code == 2
    code, _ = _train(tmp_path, tiny_yaml, "bad2", "--kinds", "fog")
    assert code == 2


def test_divergence_exits_4(tmp_path, tiny_yaml):
    code, out = _train(tmp_path, tiny_yaml, "div", "--kinds", "rain", "--lr", "1e30",
                       "--finetune", "--epochs", "5")
    assert code == 4


def test_backbone_mode_then_reprogram_from_it(tmp_path, tiny_yaml, test_sets):
    code, bb_out = _train(tmp_path, tiny_yaml, "bb", "--mode", "backbone", "--kinds", "haze")
    assert code == 0
    bb = bb_out / "backbone-haze.wrpg"
    code, out = _train(tmp_path, tiny_yaml, "rp", "--backbone", str(bb), "--kinds", "lr,haze",
                       "--protocol", "2", "--manifest", str(test_sets))
    assert code == 0
    model = load_model(out / "reprog-lr-haze.wrpg")
    assert model.backbone.init_method == "trained"


def test_eval_reports_rows_sorted(tmp_path, tiny_yaml, test_sets, capsys):
    _, a = _train(tmp_path, tiny_yaml, "a", "--kinds", "rain")
    _, b = _train(tmp_path, tiny_yaml, "b", "--kinds", "haze")
    code = main(["eval", "--checkpoint", str(b / "reprog-haze.wrpg"), "--checkpoint",
                 str(a / "reprog-rain.wrpg"), "--test-manifest", str(test_sets),
                 "--overlap", "4", "--out", str(tmp_path / "ev")])
    assert code == 0
    lines = (tmp_path / "ev" / "report.csv").read_text().splitlines()
    assert lines[0] == "train,metric,LR,Rain,Noise,Blur,Haze,Avg"
    assert [l.split(",")[0] for l in lines[1:]] == ["Haze", "Haze", "Rain", "Rain"]
    assert (tmp_path / "ev" / RESOLVED_NAME).is_file()


def test_eval_missing_kind_exits_2(tmp_path, tiny_yaml, test_sets, capsys):
    _, a = _train(tmp_path, tiny_yaml, "a", "--kinds", "rain")
    tests = load_manifest(test_sets).by_kind()
    args = ["eval", "--checkpoint", str(a / "reprog-rain.wrpg"), "--out", str(tmp_path / "ev")]
    for kind in ("lr", "rain", "noise", "blur"):
        tests[kind].write(test_sets.parent / f"{kind}.tsv")
        args += ["--test", f"{kind}={test_sets.parent / f'{kind}.tsv'}"]
    assert main(args) == 2
    assert "haze" in capsys.readouterr().err


def test_restore_sizes_and_gate_closed_passthrough(tmp_path, tiny_yaml):
    _, out = _train(tmp_path, tiny_yaml, "r", "--kinds", "noise", "--epochs", "1")
    ckpt = out / "reprog-noise.wrpg"
    write_image(tmp_path / "big.png", torch.rand(3, 50, 40))
    write_image(tmp_path / "small.png", torch.rand(3, 10, 12))
    assert main(["restore", "--checkpoint", str(ckpt), "--input", str(tmp_path / "big.png"),
                 "--input", str(tmp_path / "small.png"), "--overlap", "4",
                 "--out", str(tmp_path / "restored")]) == 0
    assert read_image(tmp_path / "restored/big.png").shape == (3, 50, 40)
    assert read_image(tmp_path / "restored/small.png").shape == (3, 10, 12)
    assert main(["restore", "--checkpoint", str(ckpt), "--input", str(tmp_path / "big.png"),
                 "--tiling", "off", "--out", str(tmp_path / "off.png")]) == 0
    assert read_image(tmp_path / "off.png").shape == (3, 50, 40)

    from wavereprog.model import close_gate
    from wavereprog.training import save_model
    closed = close_gate(load_model(ckpt))
    save_model(closed, tmp_path / "closed.wrpg")
    assert main(["restore", "--checkpoint", str(tmp_path / "closed.wrpg"), "--input",
                 str(tmp_path / "big.png"), "--overlap", "4",
                 "--out", str(tmp_path / "same.png")]) == 0
    assert (torch.equal(read_image(tmp_path / "same.png"), read_image(tmp_path / "big.png")))


def test_restore_missing_input_exits_3(tmp_path, tiny_yaml):
    _, out = _train(tmp_path, tiny_yaml, "r", "--kinds", "noise", "--epochs", "1")
    assert main(["restore", "--checkpoint", str(out / "reprog-noise.wrpg"), "--input",
                 str(tmp_path / "nope.png"), "--out", str(tmp_path / "x")]) == 3


def test_toy_command(tmp_path):
    assert main(["toy", "--out", str(tmp_path / "t"), "--n", "3", "--size", "16"]) == 0
    assert len(list((tmp_path / "t").glob("*.png"))) == 3

import json

import pytest

from foresight.config import ConfigError, apply_overrides, list_packaged_configs, load_config, parse_config


def test_defaults():
    cfg = parse_config("name: x\n")
    assert cfg["criteria"] == ["grasp"] and cfg["ratios"] == [0.95] and cfg["temperature"] == 200.0
    assert cfg["train"]["lr"] == 0.1 and cfg["train"]["milestones"] == [0.5, 0.75]
    assert cfg["scoring"] == {"per_class": 10, "batches": 1, "balanced": True}
    assert cfg["out"] == "runs/x" and cfg["ntk"]["dynamics"] is None
    assert cfg["dataset"] == {"source": "digits", "side": 28, "n_train": 1400}


@pytest.mark.parametrize("text, line, field", [
    ("name: a\nratios: [0.5,\n  1.0]\n", 3, "ratios[1]"),
    ("name: a\ntrain:\n  epochs: 3\n  lrate: 0.1\n", 4, "train.lrate"),
    ("name: a\ntrials: 0\n", 2, "trials"),
    ("criteria: [grasp, obd]\n", 1, "criteria[1]"),
    ("name: a\n\ndataset:\n  source: cifar\n", 4, "dataset.source"),
    ("model: resnet\n", 1, "model"),
    ("train:\n  milestones: [0.75, 0.5]\n", 2, "train.milestones"),
    ("name: a\nscoring:\n  balanced: 3\n", 3, "scoring.balanced"),
    ("temperature: hot\n", 1, "temperature"),
    ("ntk:\n  dynamics:\n    width: 64\n    lr_scale: 2.5\n", 4, "ntk.dynamics.lr_scale"),
    ("dataset: {source: idx, train_images: a}\n", 1, "dataset.train_labels"),
])
def test_errors_are_line_and_field_precise(text, line, field):
    with pytest.raises(ConfigError) as info:
        parse_config(text, "exp.yaml")
    err = info.value
    assert (err.line, err.field) == (line, field)
    assert str(err).startswith(f"exp.yaml:{line}: {field}: ")


def test_yaml_syntax_error_has_line():
    with pytest.raises(ConfigError) as info:
        parse_config("name: a\nratios: [0.5\ntrials: 2\n", "bad.yaml")
    assert info.value.line is not None and "syntax" in str(info.value)


def test_scientific_notation_string_is_accepted():
    assert parse_config("train:\n  weight_decay: 1e-3\n")["train"]["weight_decay"] == 1e-3


def test_overrides_revalidate():
    cfg = parse_config("name: a\n")
    new = apply_overrides(cfg, seed=4, trials=3, criteria=["snip", "random"], ratios=[0.5], temperature=1.0, out="o")
    assert (new["seed"], new["trials"], new["criteria"], new["ratios"], new["temperature"], new["out"]) == (
        4, 3, ["snip", "random"], [0.5], 1.0, "o")
    with pytest.raises(ConfigError, match="ratios"):
        apply_overrides(cfg, ratios=[1.5])


def test_manifest_snapshot_loads(tmp_path):
    cfg = parse_config("name: a\nratios: [0.5, 0.9]\n")
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps({"manifest_version": 1, "config": cfg}, indent=2))
    assert load_config(path) == cfg
    cfg["trials"] = -2
    path.write_text(json.dumps({"manifest_version": 1, "config": cfg}, indent=2))
    with pytest.raises(ConfigError) as info:
        load_config(path)
    assert info.value.field == "trials" and info.value.line is not None


def test_relative_data_paths_resolve_against_the_config(tmp_path):
    (tmp_path / "c.yaml").write_text("dataset: {source: container, train: d/train.fsct, test: d/test.fsct}\n")
    cfg = load_config(tmp_path / "c.yaml")
    assert cfg["dataset"]["train"] == str((tmp_path / "d" / "train.fsct").resolve())


def test_packaged_configs_are_valid():
    names = list_packaged_configs()
    assert {"smoke", "mlp_digits", "deep_mlp_digits", "deep_mlp_profile", "ntk_wide"} <= set(names)
    for name in names:
        assert load_config(name)["name"] == name
    with pytest.raises(ConfigError, match="available"):
        load_config("no_such_config")

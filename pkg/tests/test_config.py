import json

import pytest

from aat.config import ConfigError, ExperimentConfig, config_from_dict, load_config


def test_defaults_roundtrip():
    cfg = ExperimentConfig()
    again = config_from_dict(json.loads(cfg.dumps()))
    assert again == cfg and again.identity() == cfg.identity()


def test_nested_override():
    cfg = config_from_dict({"train": {"beta": 2 / 255, "apr": False}, "data": {"sizes": [10, 10, 5]}})
    assert cfg.train.beta == pytest.approx(2 / 255) and not cfg.train.apr
    assert cfg.data.sizes == (10, 10, 5)


@pytest.mark.parametrize(
    "doc,fragment",
    [
        ({"trian": {}}, "trian"),
        ({"train": {"betta": 0.1}}, "train.betta"),
        ({"data": {"scene": {"colour": 1}}}, "data.scene.colour"),
        ({"train": {"strong_aug": {"cutout": 1}}}, "train.strong_aug.cutout"),
    ],
)
def test_unknown_keys_rejected_with_path(doc, fragment):
    with pytest.raises(ConfigError, match=fragment.replace(".", r"\.")):
        config_from_dict(doc)


@pytest.mark.parametrize(
    "doc",
    [
        {"seed": "0"},
        {"train": {"apr": 1}},
        {"train": {"lr": "fast"}},
        {"data": {"sizes": [1, 2]}},
        {"train": {"num_classes": 3}},
        {"train": {"ema_alpha": 1.5}},
        {"data": {"scene": {"class_weights": [1, 1]}}},
        [],
    ],
)
def test_invalid_values(doc):
    with pytest.raises(ConfigError):
        config_from_dict(doc)


def test_identity_ignores_output_dir_but_not_seed():
    a = ExperimentConfig(output_dir="x")
    b = ExperimentConfig(output_dir="y")
    assert a.identity() == b.identity()
    assert a.identity() != a.identity(seed=1)
    assert len(a.identity()) == 16


def test_load(tmp_path):
    assert load_config(None) == ExperimentConfig()
    p = tmp_path / "c.json"
    p.write_text('{"seed": 4}')
    assert load_config(p).seed == 4
    p.write_text("{nope")
    with pytest.raises(ConfigError):
        load_config(p)

import pytest

from ovmil.config import (
    HYPERPARAMETERS,
    PRESETS,
    ConfigError,
    TrainConfig,
    dumps_kv,
    get_preset,
    parse_overrides,
    read_kv,
    write_kv,
)

# (lr, patience, factor, beta1, beta2, eps, dropout, weight decay, max patches, size)
PUBLISHED_ROWS = {
    "rn50": (2e-3, 20, 0.75, 0.75, 0.95, 1e-2, 0.4, 1e-3, 800, (512, 128)),
    "h-optimus-0": (2.5e-5, 5, 0.75, 0.5, 0.9999, 1e-4, 0.4, 1e-2, 1000, (128, 32)),
    "gpfm": (1e-4, 25, 0.9, 0.95, 0.99, 1e-4, 0.8, 1e-6, 1000, (512, 128)),
    "rn50-5augs": (1e-3, 25, 0.6, 0.8, 0.99, 1e-4, 0.4, 1e-4, 700, (128, 32)),
}


@pytest.mark.parametrize("name,row", PUBLISHED_ROWS.items())
def test_presets(name, row):
    c = get_preset(name)
    assert (c.learning_rate, c.lr_decay_patience, c.lr_decay_factor, c.beta1, c.beta2, c.epsilon,
            c.dropout_p, c.weight_decay, c.max_patches, c.model_size) == row


def test_preset_count_and_defaults():
    assert len(PRESETS) == 24
    assert TrainConfig() == get_preset("rn50")
    assert len(HYPERPARAMETERS) == 10


def test_kv_round_trip(tmp_path):
    cfg = get_preset("uni").replace(seed=7)
    write_kv(cfg.to_kv(), tmp_path / "c.kv")
    assert TrainConfig.from_kv(read_kv(tmp_path / "c.kv")) == cfg
    assert "model_size=[512,256]" in dumps_kv(cfg.to_kv())


def test_overrides_parse_types():
    got = parse_overrides({"model_size": "[64,32]", "learning_rate": "1e-3", "max_patches": "200"})
    assert got == {"model_size": (64, 32), "learning_rate": 1e-3, "max_patches": 200}


@pytest.mark.parametrize("bad", [dict(beta1=1.0), dict(dropout_p=1.0), dict(lr_decay_factor=0.0),
                                 dict(weight_decay=-1.0), dict(max_patches=0)])
def test_validation(bad):
    with pytest.raises(ConfigError):
        TrainConfig(**bad)


def test_unknown_preset():
    with pytest.raises(ConfigError):
        get_preset("resnet-9000")
